//! Gaussian class-cluster features standing in for the frozen extractors.
//!
//! Each modality has its own set of class centers. A draw mixes the true
//! class center with a randomly chosen other center according to the
//! modality's informativeness, adds isotropic noise, and (visual only) may be
//! corrupted to mimic occlusion or blur.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureKey, FeatureRecord, Modality, Provider};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Shrinks the vector toward zero by `blur_factor`.
    Blur,
    /// Replaces the vector with a noisy draw around another class's center.
    Swap,
    /// Zero vector.
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityValues<T> {
    pub visual: T,
    pub text: T,
    pub audio: T,
}

impl<T: Copy> ModalityValues<T> {
    pub fn get(&self, m: Modality) -> T {
        match m {
            Modality::Visual => self.visual,
            Modality::Text => self.text,
            Modality::Audio => self.audio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub dims: ModalityValues<usize>,
    pub class_centers_seed: u64,
    pub noise_sigma: f64,
    pub corruption_rate: f64,
    pub corruption_mode: CorruptionMode,
    pub blur_factor: f64,
    pub informativeness: ModalityValues<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_labels: 6,
            dims: ModalityValues {
                visual: 64,
                text: 48,
                audio: 48,
            },
            class_centers_seed: 17,
            noise_sigma: 0.5,
            corruption_rate: 0.0,
            corruption_mode: CorruptionMode::Blur,
            blur_factor: 0.1,
            informativeness: ModalityValues {
                visual: 1.0,
                text: 1.0,
                audio: 1.0,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 labels"));
        }
        for m in Modality::ALL {
            if self.dims.get(m) < 2 {
                return Err(Error::invalid(format!("{m} dimension must be at least 2")));
            }
            let inf = self.informativeness.get(m);
            if !(0.0..=1.0).contains(&inf) {
                return Err(Error::invalid(format!("{m} informativeness {inf} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::invalid("corruption_rate outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.blur_factor) {
            return Err(Error::invalid("blur_factor outside [0, 1]"));
        }
        Ok(())
    }
}

/// Class centers of one modality, `num_labels` rows of standard normal draws.
pub fn class_centers(spec: &SyntheticSpec, modality: Modality) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.class_centers_seed);
    rng.set_stream(10 + modality as u64);
    let dim = spec.dims.get(modality);
    (0..spec.num_labels)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn record_rng(seed: u64, conv_id: &str, index: usize, modality: Modality) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((conv_id.len() as u64).to_le_bytes());
    h.update(conv_id.as_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(modality.as_str().as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Precomputed centers for repeated draws under one spec.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    centers: ModalityValues<usize>,
    table: [Vec<Vec<f64>>; 3],
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let table = [
            class_centers(&spec, Modality::Visual),
            class_centers(&spec, Modality::Text),
            class_centers(&spec, Modality::Audio),
        ];
        Ok(SyntheticGenerator {
            centers: spec.dims,
            spec,
            table,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.centers.get(m)
    }

    fn center(&self, m: Modality, y: usize) -> &[f64] {
        &self.table[m as usize][y]
    }

    pub fn draw(
        &self,
        conv_id: &str,
        index: usize,
        modality: Modality,
        label: usize,
        seed: u64,
    ) -> Result<FeatureRecord> {
        let k = self.spec.num_labels;
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} labels")));
        }
        let mut rng = record_rng(seed, conv_id, index, modality);
        let others: Vec<usize> = (0..k).filter(|&c| c != label).collect();
        let other = *others.choose(&mut rng).expect("k >= 2");
        let inf = self.spec.informativeness.get(modality);
        let noise = Normal::new(0.0, self.spec.noise_sigma).expect("validated sigma");

        let mix = |rng: &mut ChaCha8Rng, y: usize, o: usize| -> Vec<f64> {
            self.center(modality, y)
                .iter()
                .zip(self.center(modality, o))
                .map(|(a, b)| inf * a + (1.0 - inf) * b + noise.sample(rng))
                .collect()
        };
        let mut v = mix(&mut rng, label, other);

        let corrupt_draw: f64 = rng.random();
        let corrupted = modality == Modality::Visual && corrupt_draw < self.spec.corruption_rate;
        if corrupted {
            match self.spec.corruption_mode {
                CorruptionMode::Blur => v.iter_mut().for_each(|x| *x *= self.spec.blur_factor),
                CorruptionMode::Swap => {
                    let wrong = *others.choose(&mut rng).expect("k >= 2");
                    v = mix(&mut rng, wrong, wrong);
                }
                CorruptionMode::Dropout => v.iter_mut().for_each(|x| *x = 0.0),
            }
        }
        FeatureRecord::new(
            FeatureKey::new(conv_id, index, modality, Provider::Synthetic.as_str()),
            v.into_iter().map(|x| x as f32).collect(),
            Provider::Synthetic,
            corrupted,
        )
    }
}

/// One synthetic draw; a pure function of `(spec, key, label, seed)`.
pub fn synthesize_features(
    spec: &SyntheticSpec,
    conv_id: &str,
    index: usize,
    modality: Modality,
    label: usize,
    seed: u64,
) -> Result<FeatureRecord> {
    SyntheticGenerator::new(spec.clone())?.draw(conv_id, index, modality, label, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_labels: 4,
            dims: ModalityValues {
                visual: 8,
                text: 6,
                audio: 6,
            },
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn degenerate_limit_is_the_center() {
        let s = SyntheticSpec {
            noise_sigma: 1e-300,
            ..spec()
        };
        let centers = class_centers(&s, Modality::Text);
        let r = synthesize_features(&s, "c", 0, Modality::Text, 2, 9).unwrap();
        for (got, want) in r.vector.iter().zip(&centers[2]) {
            assert_eq!(*got, *want as f32);
        }
        assert!(!r.corrupted);
    }

    #[test]
    fn dropout_zeroes_vector() {
        let s = SyntheticSpec {
            corruption_rate: 1.0,
            corruption_mode: CorruptionMode::Dropout,
            ..spec()
        };
        let r = synthesize_features(&s, "c", 3, Modality::Visual, 1, 1).unwrap();
        assert!(r.corrupted);
        assert!(r.vector.iter().all(|&v| v == 0.0));
        let t = synthesize_features(&s, "c", 3, Modality::Text, 1, 1).unwrap();
        assert!(!t.corrupted, "only visual features are corrupted");
    }

    #[test]
    fn draws_are_pure_functions_of_inputs() {
        let s = spec();
        let a = synthesize_features(&s, "c", 5, Modality::Audio, 0, 3).unwrap();
        let b = synthesize_features(&s, "c", 5, Modality::Audio, 0, 3).unwrap();
        let c = synthesize_features(&s, "c", 6, Modality::Audio, 0, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.vector, c.vector);
    }

    #[test]
    fn rejects_bad_spec_and_label() {
        assert!(synthesize_features(&spec(), "c", 0, Modality::Visual, 4, 0).is_err());
        let bad = SyntheticSpec {
            corruption_rate: 1.5,
            ..spec()
        };
        assert!(bad.validate().is_err());
    }
}
