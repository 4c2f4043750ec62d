//! The composite objective, the training loop over cached features and
//! evaluation: metrics, confidence bins and seed averaging.

mod bins;
mod losses;
mod metrics;
mod seeds;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datamodel::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{Batch, ConversationFeatures, FusionConfig, FusionModel, GateMode, GateTrace, RetrievalKeys};
use crate::numcore::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor};
use crate::providers::{FeatureStore, Modality, ModalityValues};
use crate::rng::{stream_rng, Stream};

pub use bins::{bin_by_confidence, uniform_edges, BinReport, BinSample, BinStats};
pub use losses::{loss_infonce, loss_supcon, loss_total, LossBreakdown, LossConfig, LossVars, SupCon};
pub use metrics::{confusion_matrix, per_class_f1, weighted_f1, MetricsReport};
pub use seeds::{seed_average, MeanStd, SeedAggregate};

/// Conversations scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_cl: f64,
    pub lambda_aux: f64,
    pub tau_infonce: f64,
    pub tau_supcon: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Conversations per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub proj_dim: usize,
    pub gate_gradient: bool,
    pub retrieval: RetrievalKeys,
    /// Holds the gate at 1, switching the complement off.
    pub gate_off: bool,
    pub use_text: bool,
    pub use_audio: bool,
    pub use_infonce: bool,
    pub use_supcon: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cl: 0.1,
            lambda_aux: 0.5,
            tau_infonce: 0.07,
            tau_supcon: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 50,
            patience: 10,
            seed: 0,
            hidden: 128,
            proj_dim: 64,
            gate_gradient: false,
            retrieval: RetrievalKeys::Causal,
            gate_off: false,
            use_text: true,
            use_audio: true,
            use_infonce: true,
            use_supcon: true,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cl >= 0.0 && self.lambda_aux >= 0.0) {
            return Err(Error::invalid("lambda_cl and lambda_aux must be non-negative"));
        }
        if !(self.tau_infonce > 0.0 && self.tau_supcon > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::invalid("learning_rate and adam_eps must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.proj_dim == 0 {
            return Err(Error::invalid("batch_size, hidden and proj_dim must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_cl: self.lambda_cl,
            lambda_aux: self.lambda_aux,
            tau_infonce: self.tau_infonce,
            tau_supcon: self.tau_supcon,
            use_infonce: self.use_infonce,
            use_supcon: self.use_supcon,
            use_text: self.use_text,
            use_audio: self.use_audio,
        }
    }

    pub fn fusion_config(&self, dims: ModalityValues<usize>, num_labels: usize) -> FusionConfig {
        FusionConfig {
            hidden: self.hidden,
            num_labels,
            dims,
            proj_dim: self.proj_dim,
            retrieval: self.retrieval,
            gate: if self.gate_off {
                GateMode::Fixed(1.0)
            } else {
                GateMode::Reliability
            },
            gate_gradient: self.gate_gradient,
            use_text: self.use_text,
            use_audio: self.use_audio,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * g[k];
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = md[k] / c1;
                let vh = vd[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_wf1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (the initialization when no
    /// epoch ran).
    pub model: FusionModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_wf1: Option<f64>,
}

/// Gathers features for every conversation of `split`; all missing keys are
/// reported together.
pub fn gather_split(dataset: &Dataset, split: Split, store: &dyn FeatureStore) -> Result<Vec<ConversationFeatures>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for conv in dataset.split(split) {
        match ConversationFeatures::gather(conv, store) {
            Ok(f) => out.push(f),
            Err(keys) => missing.extend(keys),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::MissingFeatures(missing))
    }
}

fn feature_dims(convs: &[ConversationFeatures]) -> Result<ModalityValues<usize>> {
    let first = convs
        .iter()
        .find(|c| !c.is_empty())
        .ok_or_else(|| Error::invalid("no training utterances"))?;
    let dim = |m: Modality| first.modality(m)[0].len();
    Ok(ModalityValues {
        visual: dim(Modality::Visual),
        text: dim(Modality::Text),
        audio: dim(Modality::Audio),
    })
}

/// Trains on the train split and selects by validation W-F1. Test-split
/// features are never read.
pub fn train(config: &TrainConfig, dataset: &Dataset, store: &dyn FeatureStore) -> Result<TrainOutcome> {
    config.validate()?;
    let mut missing = Vec::new();
    let mut gather = |split| match gather_split(dataset, split, store) {
        Ok(v) => v,
        Err(Error::MissingFeatures(keys)) => {
            missing.extend(keys);
            Vec::new()
        }
        Err(_) => unreachable!("gather_split only reports missing features"),
    };
    let train_set = gather(Split::Train);
    let val_set = gather(Split::Val);
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }
    train_features(config, &train_set, &val_set, dataset.num_labels())
}

/// Training loop over pre-gathered features.
pub fn train_features(
    config: &TrainConfig,
    train_set: &[ConversationFeatures],
    val_set: &[ConversationFeatures],
    num_labels: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("no training conversations"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("no validation conversations"));
    }
    let fcfg = config.fusion_config(feature_dims(train_set)?, num_labels);
    let mut model = FusionModel::init(fcfg, config.seed)?;
    let loss_cfg = config.loss_config();
    let mut adam = Adam::new(
        model.params(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut rng = stream_rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let convs: Vec<&ConversationFeatures> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&convs)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch)?;
            let loss = loss_total(&mut tape, &fwd, &batch.labels, &loss_cfg)?;
            let b = loss.breakdown(&tape);
            if !b.total.is_finite() {
                return Err(Error::Divergence { step, loss: b.total });
            }
            model.params_mut().zero_grads();
            tape.backward_into(loss.total, model.params_mut())?;
            adam.step(model.params_mut());
            sum.total += b.total;
            sum.cls += b.cls;
            sum.cl += b.cl;
            sum.aux += b.aux;
            batches += 1;
        }
        let n = batches as f64;
        let mean = LossBreakdown {
            total: sum.total / n,
            cls: sum.cls / n,
            cl: sum.cl / n,
            aux: sum.aux / n,
        };
        let val_wf1 = score(&model, val_set, num_labels)?;
        log.push(EpochLog {
            epoch,
            loss: mean,
            val_wf1,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_wf1 > *b) {
            best = Some((epoch, val_wf1, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_wf1) = match best {
        Some((e, w, params)) => {
            let mut params = params;
            params.zero_grads();
            model = FusionModel::from_parts(model.config().clone(), params)?;
            (Some(e), Some(w))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_wf1,
    })
}

/// Traces for every utterance of `convs`, in order.
pub fn predict(model: &FusionModel, convs: &[ConversationFeatures]) -> Result<Vec<GateTrace>> {
    let mut out = Vec::new();
    for chunk in convs.chunks(EVAL_CHUNK) {
        let refs: Vec<&ConversationFeatures> = chunk.iter().collect();
        out.extend(model.forward_batch(&Batch::new(&refs)?)?);
    }
    Ok(out)
}

fn labelled(traces: &[GateTrace]) -> (Vec<usize>, Vec<usize>) {
    traces.iter().filter_map(|t| t.label.map(|y| (t.prediction, y))).unzip()
}

fn score(model: &FusionModel, convs: &[ConversationFeatures], k: usize) -> Result<f64> {
    let (preds, labels) = labelled(&predict(model, convs)?);
    weighted_f1(&preds, &labels, k)
}

pub fn metrics_from_traces(traces: &[GateTrace], label_names: &[String]) -> Result<MetricsReport> {
    let (preds, labels) = labelled(traces);
    MetricsReport::compute(&preds, &labels, label_names)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub traces: Vec<GateTrace>,
}

pub fn evaluate(model: &FusionModel, dataset: &Dataset, split: Split, store: &dyn FeatureStore) -> Result<Evaluation> {
    let convs = gather_split(dataset, split, store)?;
    let traces = predict(model, &convs)?;
    let report = metrics_from_traces(&traces, &dataset.label_names())?;
    Ok(Evaluation { report, traces })
}

pub fn write_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    for e in log {
        writeln!(w, "{}", serde_json::to_string(e).expect("log serializes"))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes parameters with the model and training configuration in the header.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &FusionModel, config: &TrainConfig) -> Result<()> {
    let mut extra = Map::new();
    extra.insert(
        "model".into(),
        serde_json::to_value(model.config()).expect("config serializes"),
    );
    extra.insert("train".into(), serde_json::to_value(config).expect("config serializes"));
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model.params(), extra)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FusionModel, TrainConfig)> {
    let (header, params) = read_checkpoint(BufReader::new(File::open(path)?))?;
    let field = |k: &str| -> Result<Value> {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("checkpoint header lacks {k:?}")))
    };
    let fcfg: FusionConfig =
        serde_json::from_value(field("model")?).map_err(|e| Error::invalid(format!("checkpoint model config: {e}")))?;
    let tcfg: TrainConfig =
        serde_json::from_value(field("train")?).map_err(|e| Error::invalid(format!("checkpoint train config: {e}")))?;
    Ok((FusionModel::from_parts(fcfg, params)?, tcfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::bundle::{generate_dataset, generate_features, SyntheticBundleSpec};

    fn tiny() -> (Dataset, crate::providers::bundle::MemoryStore) {
        let mut spec = SyntheticBundleSpec {
            train_conversations: 6,
            val_conversations: 2,
            test_conversations: 2,
            ..Default::default()
        };
        spec.features.num_labels = 3;
        spec.features.dims = ModalityValues {
            visual: 6,
            text: 4,
            audio: 4,
        };
        let ds = generate_dataset(&spec, 1).unwrap();
        let store = generate_features(&ds, &spec.features, 1).unwrap();
        (ds, store)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            proj_dim: 4,
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::parse(r#"{"lambda_cl": 0.2}"#).is_ok());
        assert!(TrainConfig::parse(r#"{"lamda_cl": 0.2}"#).is_err());
        assert!(TrainConfig::parse(r#"{"tau_supcon": 0}"#).is_err());
        assert!(TrainConfig::parse(r#"{"lambda_aux": -1}"#).is_err());
    }

    #[test]
    fn recomposition_of_the_objective() {
        let (ds, store) = tiny();
        let convs = gather_split(&ds, Split::Train, &store).unwrap();
        let refs: Vec<_> = convs.iter().collect();
        let batch = Batch::new(&refs).unwrap();
        let cfg = small_cfg();
        let model = FusionModel::init(cfg.fusion_config(feature_dims(&convs).unwrap(), 3), 0).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch).unwrap();
        let lc = LossConfig {
            lambda_cl: 0.37,
            lambda_aux: 1.3,
            ..Default::default()
        };
        let b = loss_total(&mut tape, &fwd, &batch.labels, &lc)
            .unwrap()
            .breakdown(&tape);
        assert!((b.total - (b.cls + 0.37 * b.cl + 1.3 * b.aux)).abs() < 1e-12);
        assert!(b.cl > 0.0);

        let zero = LossConfig {
            lambda_cl: 0.0,
            lambda_aux: 0.0,
            ..Default::default()
        };
        let b = loss_total(&mut tape, &fwd, &batch.labels, &zero)
            .unwrap()
            .breakdown(&tape);
        assert_eq!(b.total, b.cls);
    }

    #[test]
    fn uniform_aux_logits_cost_ln_k() {
        let (ds, store) = tiny();
        let convs = gather_split(&ds, Split::Train, &store).unwrap();
        let cfg = small_cfg();
        let mut model = FusionModel::init(cfg.fusion_config(feature_dims(&convs).unwrap(), 3), 0).unwrap();
        for name in ["aux.w", "aux.b"] {
            let id = model.params().id(name).unwrap();
            model.params_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let batch = Batch::new(&[&convs[0]]).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch).unwrap();
        let lc = LossConfig {
            lambda_cl: 0.0,
            lambda_aux: 1.0,
            ..Default::default()
        };
        let b = loss_total(&mut tape, &fwd, &batch.labels, &lc)
            .unwrap()
            .breakdown(&tape);
        assert!((b.aux - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (ds, store) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let out = train(&cfg, &ds, &store).unwrap();
        assert!(out.log.is_empty());
        let convs = gather_split(&ds, Split::Train, &store).unwrap();
        let init = FusionModel::init(cfg.fusion_config(feature_dims(&convs).unwrap(), 3), cfg.seed).unwrap();
        for (a, b) in out.model.params().iter().zip(init.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (ds, store) = tiny();
        let cfg = small_cfg();
        let a = train(&cfg, &ds, &store).unwrap();
        let b = train(&cfg, &ds, &store).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        for (x, y) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(x.value, y.value);
        }
        for e in &a.log {
            let l = e.loss;
            assert!((l.total - (l.cls + cfg.lambda_cl * l.cl + cfg.lambda_aux * l.aux)).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_log(&mut buf, &a.log).unwrap();
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with(r#"{"epoch":1,"loss":{"total":"#), "{first}");
        assert!(first.contains(r#""val_wf1":"#));
    }

    #[test]
    fn missing_features_are_listed() {
        let (ds, _) = tiny();
        let empty = crate::providers::bundle::MemoryStore::default();
        match train(&small_cfg(), &ds, &empty) {
            Err(Error::MissingFeatures(keys)) => {
                let train_val: usize = ds
                    .conversations
                    .iter()
                    .filter(|c| c.split != Split::Test)
                    .map(|c| c.utterances.len())
                    .sum();
                assert_eq!(keys.len(), 3 * train_val);
            }
            other => panic!("expected missing features, got {other:?}"),
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let (ds, store) = tiny();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 5,
            ..small_cfg()
        };
        match train(&cfg, &ds, &store) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 2),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, store) = tiny();
        let cfg = small_cfg();
        let out = train(&cfg, &ds, &store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &out.model, &cfg).unwrap();
        let (m, c) = load_checkpoint(&path).unwrap();
        assert_eq!(c, cfg);
        let e1 = evaluate(&out.model, &ds, Split::Test, &store).unwrap();
        let e2 = evaluate(&m, &ds, Split::Test, &store).unwrap();
        assert_eq!(e1.report, e2.report);
        assert_eq!(e1.traces, e2.traces);
    }
}
