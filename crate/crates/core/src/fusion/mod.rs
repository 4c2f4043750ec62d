//! The fusion head: causal per-modality context encoders, visual-query
//! cross-attention, the residual complement, the reliability gate and the
//! final classifier.
//!
//! Every operation runs on a [`Tape`] over a stacked batch of rows. The
//! per-utterance entry points (`encode_context`, `retrieve_reference`, ...)
//! build one-row batches through the same code.

mod batch;
mod trace;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax, Mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::providers::{Modality, ModalityValues};
use crate::rng::{stream_rng, Stream};

pub use batch::{Batch, ConversationFeatures};
pub use trace::{read_traces, write_traces, GateTrace, TraceRecord};

/// Which states of the external modality serve as retrieval keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalKeys {
    /// States `0..=i` of the same conversation.
    #[default]
    Causal,
    /// Only the state at `i`.
    Current,
}

/// How the gate value in `h_v* = h_v + (1 - g) * delta` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `g = c`, the reliability score.
    #[default]
    Reliability,
    /// `g` held at a constant, e.g. 1 to disable the complement.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: usize,
    pub num_labels: usize,
    pub dims: ModalityValues<usize>,
    pub proj_dim: usize,
    pub retrieval: RetrievalKeys,
    pub gate: GateMode,
    /// Lets the gating path back-propagate into the auxiliary classifier.
    pub gate_gradient: bool,
    pub use_text: bool,
    pub use_audio: bool,
}

impl FusionConfig {
    pub fn new(dims: ModalityValues<usize>, num_labels: usize, hidden: usize) -> Self {
        FusionConfig {
            hidden,
            num_labels,
            dims,
            proj_dim: 64,
            retrieval: RetrievalKeys::Causal,
            gate: GateMode::Reliability,
            gate_gradient: false,
            use_text: true,
            use_audio: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.proj_dim == 0 {
            return Err(Error::invalid("hidden and projection dims must be positive"));
        }
        if self.num_labels < 2 {
            return Err(Error::invalid("need at least 2 labels"));
        }
        if Modality::ALL.iter().any(|&m| self.dims.get(m) == 0) {
            return Err(Error::invalid("feature dims must be positive"));
        }
        if let GateMode::Fixed(g) = self.gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("fixed gate {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn uses(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => true,
            Modality::Text => self.use_text,
            Modality::Audio => self.use_audio,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderIds {
    w_in: ParamId,
    b_in: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct CrossIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    enc: [EncoderIds; 3],
    cross: [CrossIds; 2],
    delta: Mlp,
    aux_w: ParamId,
    aux_b: ParamId,
    cls: Mlp,
    proj: [ParamId; 3],
}

fn slot(m: Modality) -> usize {
    match m {
        Modality::Visual => 0,
        Modality::Text => 1,
        Modality::Audio => 2,
    }
}

/// Parameter names and shapes, in store order.
fn layout(cfg: &FusionConfig) -> Vec<(String, usize, usize, usize)> {
    let h = cfg.hidden;
    let k = cfg.num_labels;
    let mut out = Vec::new();
    for m in Modality::ALL {
        let d = cfg.dims.get(m);
        out.push((format!("enc.{m}.w_in"), d, h, d));
        out.push((format!("enc.{m}.b_in"), 1, h, d));
        for w in ["wq", "wk", "wv"] {
            out.push((format!("enc.{m}.{w}"), h, h, h));
        }
    }
    for m in [Modality::Text, Modality::Audio] {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("cross.{m}.{w}"), h, h, h));
        }
    }
    out.push(("delta.w1".into(), 2 * h, h, 2 * h));
    out.push(("delta.b1".into(), 1, h, 2 * h));
    out.push(("delta.w2".into(), h, h, h));
    out.push(("delta.b2".into(), 1, h, h));
    out.push(("aux.w".into(), h, k, h));
    out.push(("aux.b".into(), 1, k, h));
    out.push(("cls.w1".into(), 3 * h, h, 3 * h));
    out.push(("cls.b1".into(), 1, h, 3 * h));
    out.push(("cls.w2".into(), h, k, h));
    out.push(("cls.b2".into(), 1, k, h));
    for m in Modality::ALL {
        out.push((format!("proj.{m}"), h, cfg.proj_dim, h));
    }
    out
}

fn resolve(cfg: &FusionConfig, store: &ParamStore) -> Result<Ids> {
    for (name, r, c, _) in layout(cfg) {
        let p = store
            .by_name(&name)
            .ok_or_else(|| Error::invalid(format!("parameter {name} missing")))?;
        if p.value.shape() != [r, c] {
            return Err(Error::shape(format!(
                "parameter {name} is {:?}, expected {:?}",
                p.value.shape(),
                [r, c]
            )));
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
    }
    let id = |name: String| store.id(&name).expect("checked above");
    let enc = Modality::ALL.map(|m| EncoderIds {
        w_in: id(format!("enc.{m}.w_in")),
        b_in: id(format!("enc.{m}.b_in")),
        wq: id(format!("enc.{m}.wq")),
        wk: id(format!("enc.{m}.wk")),
        wv: id(format!("enc.{m}.wv")),
    });
    let cross = [Modality::Text, Modality::Audio].map(|m| CrossIds {
        wq: id(format!("cross.{m}.wq")),
        wk: id(format!("cross.{m}.wk")),
        wv: id(format!("cross.{m}.wv")),
    });
    let mlp = |p: &str| Mlp {
        w1: id(format!("{p}.w1")),
        b1: id(format!("{p}.b1")),
        w2: id(format!("{p}.w2")),
        b2: id(format!("{p}.b2")),
    };
    Ok(Ids {
        enc,
        cross,
        delta: mlp("delta"),
        aux_w: id("aux.w".into()),
        aux_b: id("aux.b".into()),
        cls: mlp("cls"),
        proj: Modality::ALL.map(|m| id(format!("proj.{m}"))),
    })
}

/// Tape handles of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Encoder outputs (pre-interaction states), indexed visual, text, audio.
    pub states: [Var; 3],
    pub text_ref: Var,
    pub audio_ref: Var,
    pub text_attn: Var,
    pub audio_attn: Var,
    pub delta: Var,
    pub aux_logits: Var,
    /// Reliability score, `n x 1`.
    pub c: Var,
    /// Gate value actually applied, `n x 1`.
    pub gate: Var,
    pub h_star: Var,
    pub logits: Var,
    /// L2-normalized contrastive projections of `states`.
    pub z: [Var; 3],
}

impl Forward {
    pub fn state(&self, m: Modality) -> Var {
        self.states[slot(m)]
    }

    pub fn projection(&self, m: Modality) -> Var {
        self.z[slot(m)]
    }
}

/// Configuration plus parameters of the fusion head.
#[derive(Debug, Clone)]
pub struct FusionModel {
    config: FusionConfig,
    params: ParamStore,
    ids: Ids,
}

impl FusionModel {
    /// Fresh parameters drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut params = ParamStore::new();
        for (name, r, c, fan_in) in layout(&config) {
            params.insert_uniform(&name, r, c, fan_in, &mut rng)?;
        }
        let ids = resolve(&config, &params)?;
        Ok(FusionModel { config, params, ids })
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_parts(config: FusionConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = resolve(&config, &params)?;
        Ok(FusionModel { config, params, ids })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Changes run-time switches (gate mode, retrieval keys, ablations) that
    /// do not affect parameter shapes.
    pub fn reconfigure(&mut self, config: FusionConfig) -> Result<()> {
        config.validate()?;
        self.ids = resolve(&config, &self.params)?;
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = tape.param(store, w);
        let y = tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, x: Var, p: Mlp) -> Result<Var> {
        let h = self.linear(tape, store, x, p.w1, Some(p.b1))?;
        let h = tape.tanh(h);
        self.linear(tape, store, h, p.w2, Some(p.b2))
    }

    fn attention(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Rc<Mask>) -> Result<(Var, Var)> {
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.affine(scores, 1.0 / (self.config.hidden as f64).sqrt(), 0.0);
        let alpha = tape.masked_softmax(scores, mask)?;
        Ok((tape.matmul(alpha, v)?, alpha))
    }

    /// Causal self-attention encoder with a residual connection over
    /// projected inputs `x` (rows of one modality).
    pub fn encode_on(&self, tape: &mut Tape, store: &ParamStore, m: Modality, x: Var, mask: Rc<Mask>) -> Result<Var> {
        let d = self.config.dims.get(m);
        if tape.value(x).cols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: tape.value(x).cols(),
            });
        }
        let e = self.ids.enc[slot(m)];
        let proj = self.linear(tape, store, x, e.w_in, Some(e.b_in))?;
        let q = self.linear(tape, store, proj, e.wq, None)?;
        let k = self.linear(tape, store, proj, e.wk, None)?;
        let v = self.linear(tape, store, proj, e.wv, None)?;
        let (ctx, _) = self.attention(tape, q, k, v, mask)?;
        tape.add(proj, ctx)
    }

    /// Visual-query cross-attention into the states of `m`; returns the
    /// retrieved references and the attention weights.
    pub fn retrieve_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        m: Modality,
        h_v: Var,
        h_m: Var,
        mask: Rc<Mask>,
    ) -> Result<(Var, Var)> {
        let x = match m {
            Modality::Text => self.ids.cross[0],
            Modality::Audio => self.ids.cross[1],
            Modality::Visual => return Err(Error::invalid("retrieval targets text or audio")),
        };
        let q = self.linear(tape, store, h_v, x.wq, None)?;
        let k = self.linear(tape, store, h_m, x.wk, None)?;
        let v = self.linear(tape, store, h_m, x.wv, None)?;
        self.attention(tape, q, k, v, mask)
    }

    /// `MLP_delta([t_ref - h_v; a_ref - h_v])`. Disabled references enter as zero blocks.
    pub fn delta_on(&self, tape: &mut Tape, store: &ParamStore, h_v: Var, t_ref: Var, a_ref: Var) -> Result<Var> {
        let [n, h] = tape.value(h_v).shape();
        let diff = |tape: &mut Tape, r: Var, on: bool| -> Result<Var> {
            if on {
                tape.sub(r, h_v)
            } else {
                Ok(tape.constant(Tensor::zeros(n, h)))
            }
        };
        let dt = diff(tape, t_ref, self.config.use_text)?;
        let da = diff(tape, a_ref, self.config.use_audio)?;
        let input = tape.concat_cols(&[dt, da])?;
        self.mlp(tape, store, input, self.ids.delta)
    }

    /// Video-only classifier logits and the reliability score `c` (`n x 1`).
    pub fn reliability_on(&self, tape: &mut Tape, store: &ParamStore, h_v: Var) -> Result<(Var, Var)> {
        let aux = self.linear(tape, store, h_v, self.ids.aux_w, Some(self.ids.aux_b))?;
        let p = tape.softmax(aux)?;
        Ok((aux, tape.row_max(p)))
    }

    /// `h_v + (1 - gate) * delta`, row-wise.
    pub fn complement_on(&self, tape: &mut Tape, h_v: Var, delta: Var, gate: Var) -> Result<Var> {
        let open = tape.affine(gate, -1.0, 1.0);
        let scaled = tape.scale_rows(delta, open)?;
        tape.add(h_v, scaled)
    }

    pub fn classify_on(&self, tape: &mut Tape, store: &ParamStore, h_star: Var, t_ref: Var, a_ref: Var) -> Result<Var> {
        let [n, h] = tape.value(h_star).shape();
        let t = if self.config.use_text {
            t_ref
        } else {
            tape.constant(Tensor::zeros(n, h))
        };
        let a = if self.config.use_audio {
            a_ref
        } else {
            tape.constant(Tensor::zeros(n, h))
        };
        let input = tape.concat_cols(&[h_star, t, a])?;
        self.mlp(tape, store, input, self.ids.cls)
    }

    /// Classifier output with the complement fully open (gate 0).
    pub fn open_gate_logits(&self, tape: &mut Tape, store: &ParamStore, fwd: &Forward) -> Result<Var> {
        let h_v = fwd.state(Modality::Visual);
        let h = tape.add(h_v, fwd.delta)?;
        self.classify_on(tape, store, h, fwd.text_ref, fwd.audio_ref)
    }

    /// Full forward pass with an explicit parameter store (which must share
    /// this model's layout).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Forward> {
        let mut states = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = tape.constant(batch.modality(m).clone());
            states.push(self.encode_on(tape, store, m, x, batch.causal.clone())?);
        }
        let states = [states[0], states[1], states[2]];
        let h_v = states[0];
        let keys = match self.config.retrieval {
            RetrievalKeys::Causal => batch.causal.clone(),
            RetrievalKeys::Current => batch.current.clone(),
        };
        let (text_ref, text_attn) = self.retrieve_on(tape, store, Modality::Text, h_v, states[1], keys.clone())?;
        let (audio_ref, audio_attn) = self.retrieve_on(tape, store, Modality::Audio, h_v, states[2], keys)?;
        let delta = self.delta_on(tape, store, h_v, text_ref, audio_ref)?;
        let (aux_logits, c) = self.reliability_on(tape, store, h_v)?;
        let gate = match self.config.gate {
            GateMode::Reliability if self.config.gate_gradient => c,
            GateMode::Reliability => tape.detach(c),
            GateMode::Fixed(g) => tape.constant(Tensor::filled(batch.len(), 1, g)),
        };
        let h_star = self.complement_on(tape, h_v, delta, gate)?;
        let logits = self.classify_on(tape, store, h_star, text_ref, audio_ref)?;
        let mut z = Vec::with_capacity(3);
        for m in Modality::ALL {
            let p = self.linear(tape, store, states[slot(m)], self.ids.proj[slot(m)], None)?;
            z.push(tape.l2_normalize_rows(p));
        }
        Ok(Forward {
            states,
            text_ref,
            audio_ref,
            text_attn,
            audio_attn,
            delta,
            aux_logits,
            c,
            gate,
            h_star,
            logits,
            z: [z[0], z[1], z[2]],
        })
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Forward> {
        self.forward_with(tape, &self.params, batch)
    }

    /// Per-utterance traces for every row of `batch`.
    pub fn forward_batch(&self, batch: &Batch) -> Result<Vec<GateTrace>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch)?;
        let open = self.open_gate_logits(&mut tape, &self.params, &fwd)?;
        let row = |v: Var, i: usize| tape.value(v).row_slice(i).to_vec();
        let mut out = Vec::with_capacity(batch.len());
        for (i, &(ci, index)) in batch.rows.iter().enumerate() {
            let logits = row(fwd.logits, i);
            let aux_logits = row(fwd.aux_logits, i);
            out.push(GateTrace {
                conv_id: batch.conv_ids[ci].clone(),
                index,
                c: tape.value(fwd.c).get(i, 0),
                gate: tape.value(fwd.gate).get(i, 0),
                delta: row(fwd.delta, i),
                h_v: row(fwd.states[0], i),
                h_v_star: row(fwd.h_star, i),
                text_ref: row(fwd.text_ref, i),
                audio_ref: row(fwd.audio_ref, i),
                prediction: argmax(&logits),
                visual_prediction: argmax(&aux_logits),
                aux_logits,
                logits,
                logits_open_gate: row(open, i),
                label: batch.labels[i],
                corrupted: batch.corrupted[i],
            });
        }
        Ok(out)
    }

    pub fn forward_conversation(&self, conv: &ConversationFeatures) -> Result<Vec<GateTrace>> {
        self.forward_batch(&Batch::new(&[conv])?)
    }

    /// Encoder states for one conversation's sequence of `m` features.
    pub fn encode_context(&self, features: &[Vec<f64>], m: Modality) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Err(Error::invalid("empty feature sequence"));
        }
        let n = features.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(features)?);
        let h = self.encode_on(&mut tape, &self.params, m, x, Rc::new(Mask::causal(n)))?;
        Ok(rows_of(tape.value(h)))
    }

    /// Reference retrieved for one visual state from the causal slice `h_m`;
    /// also returns the attention weights over `h_m`.
    pub fn retrieve_reference(&self, h_v_i: &[f64], h_m: &[Vec<f64>], m: Modality) -> Result<(Vec<f64>, Vec<f64>)> {
        if h_m.is_empty() {
            return Err(Error::invalid("empty key sequence"));
        }
        self.check_hidden(h_v_i)?;
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row(h_v_i.to_vec()));
        let k = tape.constant(Tensor::from_rows(h_m)?);
        if tape.value(k).cols() != self.config.hidden {
            return Err(Error::DimMismatch {
                expected: self.config.hidden,
                found: tape.value(k).cols(),
            });
        }
        let (r, a) = self.retrieve_on(&mut tape, &self.params, m, q, k, Rc::new(Mask::full(1, h_m.len())))?;
        Ok((tape.value(r).data().to_vec(), tape.value(a).data().to_vec()))
    }

    pub fn residual_complement(&self, h_v: &[f64], t_ref: &[f64], a_ref: &[f64]) -> Result<Vec<f64>> {
        for v in [h_v, t_ref, a_ref] {
            self.check_hidden(v)?;
        }
        let mut tape = Tape::new();
        let [hv, t, a] = [h_v, t_ref, a_ref].map(|v| tape.constant(Tensor::row(v.to_vec())));
        let d = self.delta_on(&mut tape, &self.params, hv, t, a)?;
        Ok(tape.value(d).data().to_vec())
    }

    /// `(c, aux logits)` for one visual state.
    pub fn compute_reliability(&self, h_v: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_hidden(h_v)?;
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::row(h_v.to_vec()));
        let (aux, c) = self.reliability_on(&mut tape, &self.params, hv)?;
        Ok((tape.value(c).item(), tape.value(aux).data().to_vec()))
    }

    pub fn classify(&self, h_star: &[f64], t_ref: &[f64], a_ref: &[f64]) -> Result<Vec<f64>> {
        for v in [h_star, t_ref, a_ref] {
            self.check_hidden(v)?;
        }
        let mut tape = Tape::new();
        let [h, t, a] = [h_star, t_ref, a_ref].map(|v| tape.constant(Tensor::row(v.to_vec())));
        let o = self.classify_on(&mut tape, &self.params, h, t, a)?;
        Ok(tape.value(o).data().to_vec())
    }

    fn check_hidden(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.hidden {
            return Err(Error::DimMismatch {
                expected: self.config.hidden,
                found: v.len(),
            });
        }
        Ok(())
    }
}

/// `h_v + (1 - c) * delta`, elementwise.
pub fn complement_visual(h_v: &[f64], delta: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!("reliability {c} outside [0, 1]")));
    }
    if h_v.len() != delta.len() {
        return Err(Error::DimMismatch {
            expected: h_v.len(),
            found: delta.len(),
        });
    }
    let open = 1.0 - c;
    Ok(h_v.iter().zip(delta).map(|(h, d)| h + d * open).collect())
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

#[cfg(test)]
mod tests;
