//! Append-only binary feature cache.
//!
//! ```text
//! header : magic "VAFF" | version u32 | dim u32 | count u64 | modality [u8; 8]
//! record : key_len u16 | key (utf-8) | flags u8 | dim x f32 | crc32 u32
//! ```
//! All integers are little-endian. The CRC covers every preceding byte of its
//! record. `count` is rewritten only after a record is fully written, so a
//! torn append is invisible on reopen.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::{FeatureKey, FeatureRecord, Modality, Provider};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: [u8; 4] = *b"VAFF";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 28;
const COUNT_OFFSET: u64 = 12;
const FLAG_CORRUPTED: u8 = 0b01;
const FLAG_REMOTE: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub dim: u32,
    pub count: u64,
    pub modality_tag: [u8; 8],
}

impl CacheHeader {
    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&self.magic);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.dim.to_le_bytes());
        b[12..20].copy_from_slice(&self.count.to_le_bytes());
        b[20..28].copy_from_slice(&self.modality_tag);
        b
    }

    fn from_bytes(b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let h = CacheHeader {
            magic: b[0..4].try_into().expect("4 bytes"),
            version: u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")),
            dim: u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")),
            count: u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")),
            modality_tag: b[20..28].try_into().expect("8 bytes"),
        };
        if h.magic != CACHE_MAGIC {
            return Err(Error::invalid("not a feature cache (bad magic)"));
        }
        if h.version != CACHE_VERSION {
            return Err(Error::invalid(format!("unsupported cache version {}", h.version)));
        }
        if h.dim == 0 {
            return Err(Error::invalid("cache dimension is zero"));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    /// The identical payload was already present.
    Unchanged,
}

#[derive(Debug)]
pub struct FeatureCache {
    path: PathBuf,
    header: CacheHeader,
    modality: Modality,
    records: IndexMap<String, FeatureRecord>,
    by_utterance: HashMap<(String, usize), String>,
    end: u64,
    writer: Option<File>,
}

fn encode_record(rec: &FeatureRecord) -> Vec<u8> {
    let key = rec.key.encode();
    let mut b = Vec::with_capacity(2 + key.len() + 1 + rec.vector.len() * 4 + 4);
    b.extend_from_slice(&(key.len() as u16).to_le_bytes());
    b.extend_from_slice(key.as_bytes());
    let mut flags = 0u8;
    if rec.corrupted {
        flags |= FLAG_CORRUPTED;
    }
    if rec.provider == Provider::Remote {
        flags |= FLAG_REMOTE;
    }
    b.push(flags);
    for v in &rec.vector {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

fn same_payload(a: &FeatureRecord, b: &FeatureRecord) -> bool {
    a.provider == b.provider
        && a.corrupted == b.corrupted
        && a.vector.len() == b.vector.len()
        && a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl FeatureCache {
    /// Creates (or truncates) a cache file.
    pub fn create(path: impl AsRef<Path>, dim: usize, modality: Modality) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::invalid(format!("invalid cache dimension {dim}")));
        }
        let header = CacheHeader {
            magic: CACHE_MAGIC,
            version: CACHE_VERSION,
            dim: dim as u32,
            count: 0,
            modality_tag: modality.tag(),
        };
        let mut f = File::create(&path)?;
        f.write_all(&header.to_bytes())?;
        f.flush()?;
        Ok(FeatureCache {
            path,
            header,
            modality,
            records: IndexMap::new(),
            by_utterance: HashMap::new(),
            end: HEADER_LEN,
            writer: None,
        })
    }

    /// Opens an existing cache, verifying every committed record's checksum.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut r = BufReader::new(File::open(&path)?);
        let mut hb = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut hb)?;
        let header = CacheHeader::from_bytes(&hb)?;
        let modality = Modality::from_tag(&header.modality_tag)
            .ok_or_else(|| Error::invalid("unknown modality tag in cache header"))?;
        let dim = header.dim as usize;

        let mut cache = FeatureCache {
            path,
            header,
            modality,
            records: IndexMap::new(),
            by_utterance: HashMap::new(),
            end: HEADER_LEN,
            writer: None,
        };
        for n in 0..header.count {
            let mut kl = [0u8; 2];
            r.read_exact(&mut kl)?;
            let key_len = u16::from_le_bytes(kl) as usize;
            let body_len = key_len + 1 + dim * 4;
            let mut body = vec![0u8; 2 + body_len];
            body[..2].copy_from_slice(&kl);
            r.read_exact(&mut body[2..])?;
            let mut cb = [0u8; 4];
            r.read_exact(&mut cb)?;
            if crc32fast::hash(&body) != u32::from_le_bytes(cb) {
                return Err(Error::Checksum { record: n });
            }
            let key_str = std::str::from_utf8(&body[2..2 + key_len]).map_err(|_| Error::Checksum { record: n })?;
            let key = FeatureKey::decode(key_str)?;
            let flags = body[2 + key_len];
            let vector = body[3 + key_len..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let provider = if flags & FLAG_REMOTE != 0 {
                Provider::Remote
            } else {
                Provider::Synthetic
            };
            let rec = FeatureRecord::new(key, vector, provider, flags & FLAG_CORRUPTED != 0)?;
            cache.end += (body.len() + 4) as u64;
            cache.index(rec);
        }
        Ok(cache)
    }

    pub fn open_or_create(path: impl AsRef<Path>, dim: usize, modality: Modality) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() {
            let c = Self::open(path)?;
            if c.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: c.dim(),
                    found: dim,
                });
            }
            Ok(c)
        } else {
            Self::create(path, dim, modality)
        }
    }

    fn index(&mut self, rec: FeatureRecord) {
        let enc = rec.key.encode();
        self.by_utterance
            .insert((rec.key.conv_id.clone(), rec.key.index), enc.clone());
        self.records.insert(enc, rec);
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> CacheHeader {
        self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&FeatureRecord> {
        self.records.get(&key.encode())
    }

    pub fn get_utterance(&self, conv_id: &str, index: usize) -> Option<&FeatureRecord> {
        self.by_utterance
            .get(&(conv_id.to_string(), index))
            .and_then(|k| self.records.get(k))
    }

    pub fn contains_utterance(&self, conv_id: &str, index: usize) -> bool {
        self.by_utterance.contains_key(&(conv_id.to_string(), index))
    }

    /// Records in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &FeatureRecord> {
        self.records.values()
    }

    /// Validates `rec` against the cache without writing anything.
    pub fn check(&self, rec: &FeatureRecord) -> Result<Option<PutOutcome>> {
        if rec.key.encode().len() > u16::MAX as usize {
            return Err(Error::invalid(format!("key too long: {}", rec.key)));
        }
        if rec.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: rec.dim(),
            });
        }
        if rec.key.modality != self.modality {
            return Err(Error::invalid(format!(
                "{} record offered to a {} cache",
                rec.key.modality, self.modality
            )));
        }
        if let Some(existing) = self.get(&rec.key) {
            return if same_payload(existing, rec) {
                Ok(Some(PutOutcome::Unchanged))
            } else {
                Err(Error::KeyConflict(format!(
                    "{} already cached with a different payload",
                    rec.key
                )))
            };
        }
        if self.contains_utterance(&rec.key.conv_id, rec.key.index) {
            return Err(Error::KeyConflict(format!(
                "utterance ({}, {}) already cached under another provider tag",
                rec.key.conv_id, rec.key.index
            )));
        }
        Ok(None)
    }

    pub fn put(&mut self, rec: FeatureRecord) -> Result<PutOutcome> {
        if let Some(outcome) = self.check(&rec)? {
            return Ok(outcome);
        }
        let bytes = encode_record(&rec);
        if self.writer.is_none() {
            let f = OpenOptions::new().read(true).write(true).open(&self.path)?;
            f.set_len(self.end)?;
            self.writer = Some(f);
        }
        let w = self.writer.as_mut().expect("writer opened above");
        w.seek(SeekFrom::Start(self.end))?;
        w.write_all(&bytes)?;
        let count = self.header.count + 1;
        w.seek(SeekFrom::Start(COUNT_OFFSET))?;
        w.write_all(&count.to_le_bytes())?;
        w.flush()?;
        self.header.count = count;
        self.end += bytes.len() as u64;
        self.index(rec);
        Ok(PutOutcome::Inserted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(conv: &str, i: usize, v: Vec<f32>) -> FeatureRecord {
        FeatureRecord::new(
            FeatureKey::new(conv, i, Modality::Visual, "synthetic"),
            v,
            Provider::Synthetic,
            false,
        )
        .unwrap()
    }

    #[test]
    fn put_get_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vaff");
        let mut c = FeatureCache::create(&p, 3, Modality::Visual).unwrap();
        let r = rec("a", 0, vec![1.0, -0.0, 3.5e-8]);
        assert_eq!(c.put(r.clone()).unwrap(), PutOutcome::Inserted);
        assert_eq!(c.put(r.clone()).unwrap(), PutOutcome::Unchanged);
        assert!(matches!(
            c.put(rec("a", 0, vec![1.0, 0.0, 0.0])),
            Err(Error::KeyConflict(_))
        ));
        assert!(matches!(c.put(rec("a", 1, vec![1.0])), Err(Error::DimMismatch { .. })));
        let got = c.get(&r.key).unwrap();
        assert!(got
            .vector
            .iter()
            .zip(&r.vector)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(c
            .get(&FeatureKey::new("zz", 0, Modality::Visual, "synthetic"))
            .is_none());
        assert_eq!(FeatureCache::open(&p).unwrap().len(), 1);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vaff");
        let mut c = FeatureCache::create(&p, 2, Modality::Visual).unwrap();
        c.put(rec("a", 0, vec![1.0, 2.0])).unwrap();
        c.put(rec("a", 1, vec![3.0, 4.0])).unwrap();
        drop(c);
        let clean = std::fs::read(&p).unwrap();
        for pos in HEADER_LEN as usize..clean.len() {
            let mut bytes = clean.clone();
            bytes[pos] ^= 0x10;
            std::fs::write(&p, &bytes).unwrap();
            assert!(FeatureCache::open(&p).is_err(), "flip at byte {pos} went unnoticed");
        }
    }

    #[test]
    fn torn_append_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vaff");
        let mut c = FeatureCache::create(&p, 2, Modality::Visual).unwrap();
        c.put(rec("a", 0, vec![1.0, 2.0])).unwrap();
        drop(c);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(&[7, 0, 1, 2, 3]).unwrap();
        drop(f);
        let mut c = FeatureCache::open(&p).unwrap();
        assert_eq!(c.len(), 1);
        c.put(rec("a", 1, vec![5.0, 6.0])).unwrap();
        assert_eq!(FeatureCache::open(&p).unwrap().len(), 2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vaff");
        std::fs::write(&p, [0u8; 28]).unwrap();
        assert!(FeatureCache::open(&p).is_err());
    }
}
