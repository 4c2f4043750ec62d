//! Conversations, utterances and the line-delimited dataset format.
//!
//! Line 1 of a dataset file is a header declaring the label set; every
//! following line is one utterance. Utterances of a conversation appear in
//! temporal order with gapless indices starting at 0.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::AudioDescriptors;

pub const DATASET_SCHEMA: &str = "visaff-dataset/1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmotionLabel {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MediaRefs {
    pub video_path: Option<String>,
    pub audio_path: Option<String>,
    pub reference_image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub conv_id: String,
    pub index: usize,
    pub speaker_id: String,
    pub transcript: String,
    pub label: Option<usize>,
    pub media: MediaRefs,
    pub audio_descriptors: Option<AudioDescriptors>,
    /// Marks an intentionally empty transcript.
    pub allow_empty_transcript: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub conv_id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub labels: Vec<EmotionLabel>,
    pub conversations: Vec<Conversation>,
}

/// Utterances `0..=i` of `conv`, never anything later.
pub fn history_view(conv: &Conversation, i: usize) -> Result<&[Utterance]> {
    if i >= conv.utterances.len() {
        return Err(Error::invalid(format!(
            "utterance index {i} out of range for conversation {} of length {}",
            conv.conv_id,
            conv.utterances.len()
        )));
    }
    Ok(&conv.utterances[..=i])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema: String,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    conv_id: String,
    index: usize,
    split: String,
    speaker_id: String,
    transcript: String,
    label: Option<usize>,
    video_path: Option<String>,
    audio_path: Option<String>,
    reference_image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_descriptors: Option<AudioDescriptors>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    allow_empty_transcript: bool,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Conversation> {
        self.conversations.iter().filter(move |c| c.split == split)
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn from_label_names(name: &str, names: &[String]) -> Result<Self> {
        validate_label_names(names)?;
        Ok(Dataset {
            name: name.to_string(),
            labels: names
                .iter()
                .enumerate()
                .map(|(id, n)| EmotionLabel { id, name: n.clone() })
                .collect(),
            conversations: Vec::new(),
        })
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        validate_label_names(&self.label_names())?;
        let k = self.labels.len();
        let mut seen = HashSet::new();
        for c in &self.conversations {
            if !seen.insert(c.conv_id.as_str()) {
                return Err(Error::invalid(format!("conversation {} appears twice", c.conv_id)));
            }
            if c.utterances.is_empty() {
                return Err(Error::invalid(format!("conversation {} is empty", c.conv_id)));
            }
            for (pos, u) in c.utterances.iter().enumerate() {
                if u.conv_id != c.conv_id {
                    return Err(Error::invalid(format!(
                        "utterance of {} filed under {}",
                        u.conv_id, c.conv_id
                    )));
                }
                if u.index != pos {
                    return Err(Error::invalid(format!(
                        "gapless ordering violated in {}: expected index {pos}, found {}",
                        c.conv_id, u.index
                    )));
                }
                validate_utterance(u, k)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read(BufReader::new(file), &name)
    }

    /// Parses the JSONL format; line numbers in errors are 1-based.
    pub fn read<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty file, expected header".into(),
                })
            }
        };
        let header: HeaderLine = serde_json::from_str(&header).map_err(|e| Error::Parse {
            line: 1,
            message: format!("malformed header: {e}"),
        })?;
        if header.schema != DATASET_SCHEMA {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported schema {:?}", header.schema),
            });
        }
        let mut dataset = Dataset::from_label_names(name, &header.labels).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let k = dataset.labels.len();

        let mut conv_pos: HashMap<String, usize> = HashMap::new();
        let mut keys: HashSet<(String, usize)> = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |e: Error| Error::Parse {
                line: lineno,
                message: e.to_string(),
            };
            let raw: UtteranceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: format!("malformed line: {e}"),
            })?;
            let split: Split = raw.split.parse().map_err(at)?;
            if !keys.insert((raw.conv_id.clone(), raw.index)) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("duplicate utterance ({}, {})", raw.conv_id, raw.index),
                });
            }
            let utt = Utterance {
                conv_id: raw.conv_id.clone(),
                index: raw.index,
                speaker_id: raw.speaker_id,
                transcript: raw.transcript,
                label: raw.label,
                media: MediaRefs {
                    video_path: raw.video_path,
                    audio_path: raw.audio_path,
                    reference_image_path: raw.reference_image_path,
                },
                audio_descriptors: raw.audio_descriptors,
                allow_empty_transcript: raw.allow_empty_transcript,
            };
            validate_utterance(&utt, k).map_err(at)?;

            let pos = *conv_pos.entry(raw.conv_id.clone()).or_insert_with(|| {
                dataset.conversations.push(Conversation {
                    conv_id: raw.conv_id.clone(),
                    split,
                    utterances: Vec::new(),
                });
                dataset.conversations.len() - 1
            });
            let conv = &mut dataset.conversations[pos];
            if conv.split != split {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "conversation {} appears in splits {} and {}",
                        conv.conv_id, conv.split, split
                    ),
                });
            }
            if utt.index != conv.utterances.len() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "gapless ordering violated in {}: expected index {}, found {}",
                        conv.conv_id,
                        conv.utterances.len(),
                        utt.index
                    ),
                });
            }
            conv.utterances.push(utt);
        }
        Ok(dataset)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = HeaderLine {
            schema: DATASET_SCHEMA.to_string(),
            labels: self.label_names(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for c in &self.conversations {
            for u in &c.utterances {
                let line = UtteranceLine {
                    conv_id: u.conv_id.clone(),
                    index: u.index,
                    split: c.split.to_string(),
                    speaker_id: u.speaker_id.clone(),
                    transcript: u.transcript.clone(),
                    label: u.label,
                    video_path: u.media.video_path.clone(),
                    audio_path: u.media.audio_path.clone(),
                    reference_image_path: u.media.reference_image_path.clone(),
                    audio_descriptors: u.audio_descriptors,
                    allow_empty_transcript: u.allow_empty_transcript,
                };
                writeln!(w, "{}", serde_json::to_string(&line).expect("line serializes"))?;
            }
        }
        Ok(())
    }
}

fn validate_label_names(names: &[String]) -> Result<()> {
    if names.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 labels, got {}", names.len())));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::invalid(format!("duplicate label name {n:?}")));
        }
    }
    Ok(())
}

fn validate_utterance(u: &Utterance, k: usize) -> Result<()> {
    if let Some(y) = u.label {
        if y >= k {
            return Err(Error::invalid(format!("label id {y} out of range for {k} labels")));
        }
    }
    if u.speaker_id.is_empty() {
        return Err(Error::invalid("empty speaker_id"));
    }
    if u.transcript.is_empty() && !u.allow_empty_transcript {
        return Err(Error::invalid(format!(
            "empty transcript for ({}, {}) without allow_empty_transcript",
            u.conv_id, u.index
        )));
    }
    Ok(())
}
