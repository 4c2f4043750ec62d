//! Per-utterance modality features: synthetic generation, the binary feature
//! cache and the client for a remote frozen embedding service.

pub mod bundle;
mod cache;
pub mod mock;
mod remote;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{CacheHeader, FeatureCache, PutOutcome, CACHE_MAGIC, CACHE_VERSION};
pub use remote::{extract_remote, EmbedRequest, EmbedResponse, EmbeddingClient, EndpointConfig, ENDPOINT_ENV};
pub use synthetic::{
    class_centers, synthesize_features, CorruptionMode, ModalityValues, SyntheticGenerator, SyntheticSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Text, Modality::Audio];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }

    /// Fixed-width tag stored in cache headers.
    pub fn tag(self) -> [u8; 8] {
        let mut t = [0u8; 8];
        let s = self.as_str().as_bytes();
        t[..s.len()].copy_from_slice(s);
        t
    }

    pub fn from_tag(tag: &[u8; 8]) -> Option<Self> {
        Self::ALL.into_iter().find(|m| &m.tag() == tag)
    }

    /// Conventional cache file name inside a feature directory.
    pub fn cache_file_name(self) -> String {
        format!("{}.vaff", self.as_str())
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Remote,
    Synthetic,
}

impl Provider {
    pub fn as_str(self) -> &'static str {
        match self {
            Provider::Remote => "remote",
            Provider::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub conv_id: String,
    pub index: usize,
    pub modality: Modality,
    pub provider_tag: String,
}

impl FeatureKey {
    pub fn new(conv_id: &str, index: usize, modality: Modality, provider_tag: &str) -> Self {
        FeatureKey {
            conv_id: conv_id.to_string(),
            index,
            modality,
            provider_tag: provider_tag.to_string(),
        }
    }

    /// Unambiguous byte encoding used as the on-disk key.
    pub fn encode(&self) -> String {
        serde_json::to_string(&(&self.conv_id, self.index, self.modality.as_str(), &self.provider_tag))
            .expect("key tuple serializes")
    }

    pub fn decode(s: &str) -> Result<Self> {
        let (conv_id, index, modality, provider_tag): (String, usize, String, String) =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad feature key {s:?}: {e}")))?;
        Ok(FeatureKey {
            conv_id,
            index,
            modality: modality.parse()?,
            provider_tag,
        })
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}#{}/{}/{}",
            self.conv_id, self.index, self.modality, self.provider_tag
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub key: FeatureKey,
    pub vector: Vec<f32>,
    pub provider: Provider,
    pub corrupted: bool,
}

impl FeatureRecord {
    pub fn new(key: FeatureKey, vector: Vec<f32>, provider: Provider, corrupted: bool) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::invalid(format!("empty vector for {key}")));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("component {i} of {key}")));
        }
        Ok(FeatureRecord {
            key,
            vector,
            provider,
            corrupted,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A feature vector as consumed by training, upcast to 64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub vector: Vec<f64>,
    pub corrupted: bool,
}

/// Read access to cached features by utterance.
pub trait FeatureStore {
    fn fetch(&self, conv_id: &str, index: usize, modality: Modality) -> Option<Feature>;

    fn dim(&self, modality: Modality) -> Option<usize>;
}

/// The three per-modality caches of a feature directory.
#[derive(Debug)]
pub struct CacheSet {
    pub visual: FeatureCache,
    pub text: FeatureCache,
    pub audio: FeatureCache,
}

impl CacheSet {
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let open = |m: Modality| -> Result<FeatureCache> {
            let path = Self::path(dir, m);
            if !path.exists() {
                return Err(Error::invalid(format!("missing cache file {}", path.display())));
            }
            FeatureCache::open(&path)
        };
        Ok(CacheSet {
            visual: open(Modality::Visual)?,
            text: open(Modality::Text)?,
            audio: open(Modality::Audio)?,
        })
    }

    pub fn path(dir: &Path, m: Modality) -> PathBuf {
        dir.join(m.cache_file_name())
    }

    pub fn get(&self, m: Modality) -> &FeatureCache {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }
}

impl FeatureStore for CacheSet {
    fn fetch(&self, conv_id: &str, index: usize, modality: Modality) -> Option<Feature> {
        self.get(modality).get_utterance(conv_id, index).map(|r| Feature {
            vector: r.vector.iter().map(|&v| f64::from(v)).collect(),
            corrupted: r.corrupted,
        })
    }

    fn dim(&self, modality: Modality) -> Option<usize> {
        Some(self.get(modality).dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_encoding_round_trips_awkward_ids() {
        let k = FeatureKey::new("dia#1\t\"x\"", 3, Modality::Audio, "synthetic");
        assert_eq!(FeatureKey::decode(&k.encode()).unwrap(), k);
    }

    #[test]
    fn modality_tags_are_distinct() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_tag(&m.tag()), Some(m));
        }
    }

    #[test]
    fn records_reject_non_finite() {
        let k = FeatureKey::new("c", 0, Modality::Visual, "remote");
        assert!(FeatureRecord::new(k.clone(), vec![1.0, f32::NAN], Provider::Remote, false).is_err());
        assert!(FeatureRecord::new(k, vec![], Provider::Remote, false).is_err());
    }
}
