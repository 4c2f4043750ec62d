use std::rc::Rc;

use crate::datamodel::Conversation;
use crate::error::{Error, Result};
use crate::numcore::{Mask, Tensor};
use crate::providers::{FeatureStore, Modality};

/// Per-utterance features of one conversation, in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationFeatures {
    pub conv_id: String,
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
    pub corrupted: Vec<bool>,
}

impl ConversationFeatures {
    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &[Vec<f64>] {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Vec<Vec<f64>> {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
            Modality::Audio => &mut self.audio,
        }
    }

    /// Reads every modality of `conv` from `store`; `Err` lists the missing keys.
    pub fn gather(conv: &Conversation, store: &dyn FeatureStore) -> std::result::Result<Self, Vec<String>> {
        let mut out = ConversationFeatures {
            conv_id: conv.conv_id.clone(),
            visual: Vec::new(),
            text: Vec::new(),
            audio: Vec::new(),
            labels: Vec::new(),
            corrupted: Vec::new(),
        };
        let mut missing = Vec::new();
        for u in &conv.utterances {
            let mut corrupted = false;
            for m in Modality::ALL {
                match store.fetch(&u.conv_id, u.index, m) {
                    Some(f) => {
                        if m == Modality::Visual {
                            corrupted = f.corrupted;
                        }
                        out.modality_mut(m).push(f.vector);
                    }
                    None => missing.push(format!("{}#{}/{m}", u.conv_id, u.index)),
                }
            }
            out.labels.push(u.label);
            out.corrupted.push(corrupted);
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(missing)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.visual.len();
        if n == 0 {
            return Err(Error::invalid(format!(
                "conversation {} has no utterances",
                self.conv_id
            )));
        }
        if self.text.len() != n || self.audio.len() != n || self.labels.len() != n || self.corrupted.len() != n {
            return Err(Error::shape(format!(
                "conversation {}: modality sequences are not aligned",
                self.conv_id
            )));
        }
        Ok(())
    }
}

/// Rows of several conversations stacked into one matrix per modality, with
/// the block-causal masks that keep conversations and futures apart.
#[derive(Debug, Clone)]
pub struct Batch {
    pub visual: Tensor,
    pub text: Tensor,
    pub audio: Tensor,
    pub labels: Vec<Option<usize>>,
    pub corrupted: Vec<bool>,
    /// `(conversation position in batch, utterance index)` for each row.
    pub rows: Vec<(usize, usize)>,
    pub conv_ids: Vec<String>,
    pub causal: Rc<Mask>,
    pub current: Rc<Mask>,
}

impl Batch {
    pub fn new(convs: &[&ConversationFeatures]) -> Result<Self> {
        if convs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut rows = Vec::new();
        let (mut v, mut t, mut a) = (Vec::new(), Vec::new(), Vec::new());
        let mut labels = Vec::new();
        let mut corrupted = Vec::new();
        for (ci, c) in convs.iter().enumerate() {
            c.validate()?;
            for i in 0..c.len() {
                rows.push((ci, i));
            }
            v.extend_from_slice(&c.visual);
            t.extend_from_slice(&c.text);
            a.extend_from_slice(&c.audio);
            labels.extend_from_slice(&c.labels);
            corrupted.extend_from_slice(&c.corrupted);
        }
        let n = rows.len();
        let causal = Mask::from_fn(n, n, |i, j| rows[i].0 == rows[j].0 && rows[j].1 <= rows[i].1);
        let current = Mask::from_fn(n, n, |i, j| i == j);
        Ok(Batch {
            visual: Tensor::from_rows(&v)?,
            text: Tensor::from_rows(&t)?,
            audio: Tensor::from_rows(&a)?,
            labels,
            corrupted,
            rows,
            conv_ids: convs.iter().map(|c| c.conv_id.clone()).collect(),
            causal: Rc::new(causal),
            current: Rc::new(current),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
        }
    }
}
