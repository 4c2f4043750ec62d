//! Complete synthetic bundles: a dataset plus features for every utterance.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{CorruptionMode, ModalityValues, SyntheticGenerator, SyntheticSpec};
use super::{CacheSet, Feature, FeatureCache, FeatureRecord, FeatureStore, Modality};
use crate::datamodel::{Conversation, Dataset, MediaRefs, Split, Utterance};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const LABEL_NAMES: [&str; 7] = ["neutral", "joy", "sadness", "anger", "fear", "surprise", "disgust"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBundleSpec {
    pub features: SyntheticSpec,
    pub train_conversations: usize,
    pub val_conversations: usize,
    pub test_conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub speakers_per_conversation: usize,
}

impl Default for SyntheticBundleSpec {
    fn default() -> Self {
        SyntheticBundleSpec {
            features: SyntheticSpec::default(),
            train_conversations: 120,
            val_conversations: 30,
            test_conversations: 30,
            min_utterances: 4,
            max_utterances: 12,
            speakers_per_conversation: 2,
        }
    }
}

impl SyntheticBundleSpec {
    /// Low-noise clusters, every modality fully informative.
    pub fn separable_benchmark() -> Self {
        let mut spec = SyntheticBundleSpec::default();
        spec.features.noise_sigma = 0.05;
        spec
    }

    /// Noisy clusters with 30% blurred visual features and half-informative
    /// text and audio, so the visual branch is unreliable on a known subset.
    pub fn corrupted_benchmark() -> Self {
        let mut spec = SyntheticBundleSpec {
            test_conversations: 100,
            ..Default::default()
        };
        spec.features.noise_sigma = 1.5;
        spec.features.corruption_rate = 0.3;
        spec.features.corruption_mode = CorruptionMode::Blur;
        spec.features.informativeness = ModalityValues {
            visual: 1.0,
            text: 0.5,
            audio: 0.5,
        };
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return Err(Error::invalid("need 1 <= min_utterances <= max_utterances"));
        }
        if self.speakers_per_conversation == 0 {
            return Err(Error::invalid("need at least one speaker per conversation"));
        }
        Ok(())
    }
}

pub fn label_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            LABEL_NAMES
                .get(i)
                .map_or_else(|| format!("class_{i}"), |s| s.to_string())
        })
        .collect()
}

/// Draws the conversation structure and labels.
pub fn generate_dataset(spec: &SyntheticBundleSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.features.num_labels;
    let mut ds = Dataset::from_label_names("synthetic", &label_names(k))?;
    let mut rng = stream_rng(seed, Stream::Data);
    let splits = [
        (Split::Train, spec.train_conversations),
        (Split::Val, spec.val_conversations),
        (Split::Test, spec.test_conversations),
    ];
    let mut n = 0;
    for (split, count) in splits {
        for _ in 0..count {
            let conv_id = format!("syn{n:05}");
            n += 1;
            let len = rng.random_range(spec.min_utterances..=spec.max_utterances);
            let utterances = (0..len)
                .map(|i| Utterance {
                    conv_id: conv_id.clone(),
                    index: i,
                    speaker_id: format!("S{}", rng.random_range(0..spec.speakers_per_conversation)),
                    transcript: format!("synthetic utterance {i} of {conv_id}"),
                    label: Some(rng.random_range(0..k)),
                    media: MediaRefs::default(),
                    audio_descriptors: None,
                    allow_empty_transcript: false,
                })
                .collect();
            ds.conversations.push(Conversation {
                conv_id,
                split,
                utterances,
            });
        }
    }
    Ok(ds)
}

/// Features held in memory, keyed by utterance.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    map: HashMap<(String, usize, Modality), Feature>,
    dims: HashMap<Modality, usize>,
    records: Vec<FeatureRecord>,
}

impl MemoryStore {
    pub fn insert(&mut self, rec: FeatureRecord) -> Result<()> {
        let m = rec.key.modality;
        let dim = *self.dims.entry(m).or_insert(rec.dim());
        if dim != rec.dim() {
            return Err(Error::DimMismatch {
                expected: dim,
                found: rec.dim(),
            });
        }
        self.map.insert(
            (rec.key.conv_id.clone(), rec.key.index, m),
            Feature {
                vector: rec.vector.iter().map(|&v| f64::from(v)).collect(),
                corrupted: rec.corrupted,
            },
        );
        self.records.push(rec);
        Ok(())
    }

    /// Records in insertion order.
    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FeatureStore for MemoryStore {
    fn fetch(&self, conv_id: &str, index: usize, modality: Modality) -> Option<Feature> {
        self.map.get(&(conv_id.to_string(), index, modality)).cloned()
    }

    fn dim(&self, modality: Modality) -> Option<usize> {
        self.dims.get(&modality).copied()
    }
}

/// Draws all three modalities for every labelled utterance of `dataset`.
pub fn generate_features(dataset: &Dataset, spec: &SyntheticSpec, seed: u64) -> Result<MemoryStore> {
    let gen = SyntheticGenerator::new(spec.clone())?;
    if dataset.num_labels() != spec.num_labels {
        return Err(Error::invalid(format!(
            "dataset has {} labels, synthetic spec {}",
            dataset.num_labels(),
            spec.num_labels
        )));
    }
    let mut store = MemoryStore::default();
    for m in Modality::ALL {
        for c in &dataset.conversations {
            for u in &c.utterances {
                let y = u.label.ok_or_else(|| {
                    Error::invalid(format!(
                        "synthetic features need a label for ({}, {})",
                        u.conv_id, u.index
                    ))
                })?;
                store.insert(gen.draw(&u.conv_id, u.index, m, y, seed)?)?;
            }
        }
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub dataset: PathBuf,
    pub spec: PathBuf,
    pub caches: Vec<PathBuf>,
}

/// Writes `dataset.jsonl`, the resolved spec and one cache file per modality into `dir`.
pub fn write_bundle(dir: &Path, spec: &SyntheticBundleSpec, seed: u64) -> Result<(Dataset, MemoryStore, BundlePaths)> {
    std::fs::create_dir_all(dir)?;
    let dataset = generate_dataset(spec, seed)?;
    let store = generate_features(&dataset, &spec.features, seed)?;
    let ds_path = dir.join("dataset.jsonl");
    dataset.save(&ds_path)?;
    let spec_path = dir.join("synthetic_spec.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(spec).expect("spec serializes") + "\n",
    )?;
    let mut caches = Vec::new();
    for m in Modality::ALL {
        let path = CacheSet::path(dir, m);
        let mut cache = FeatureCache::create(&path, spec.features.dims.get(m), m)?;
        for r in store.records().iter().filter(|r| r.key.modality == m) {
            cache.put(r.clone())?;
        }
        caches.push(path);
    }
    Ok((
        dataset,
        store,
        BundlePaths {
            dataset: ds_path,
            spec: spec_path,
            caches,
        },
    ))
}
