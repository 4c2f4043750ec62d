use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Forward;
use crate::numcore::{Mask, Tape, Tensor, Var};
use crate::providers::Modality;

/// Symmetric InfoNCE between aligned rows of `z_a` and `z_b` (unit vectors).
pub fn loss_infonce(tape: &mut Tape, z_a: Var, z_b: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let [b, _] = tape.value(z_a).shape();
    if b < 2 {
        return Err(Error::invalid(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    if tape.value(z_b).rows() != b {
        return Err(Error::shape("InfoNCE operands differ in batch size"));
    }
    let sim = tape.matmul_t(z_a, z_b)?;
    let sim = tape.affine(sim, 1.0 / tau, 0.0);
    let simt = tape.transpose(sim);
    let mut w = Tensor::zeros(b, b);
    for i in 0..b {
        w.set(i, i, -1.0 / (2 * b) as f64);
    }
    let fwd = tape.log_softmax(sim)?;
    let bwd = tape.log_softmax(simt)?;
    let lf = tape.weighted_sum(fwd, w.clone())?;
    let lb = tape.weighted_sum(bwd, w)?;
    tape.lin_comb(&[(lf, 1.0), (lb, 1.0)])
}

#[derive(Debug, Clone, Copy)]
pub struct SupCon {
    pub loss: Var,
    /// Rows with at least one same-label partner.
    pub anchors: usize,
}

impl SupCon {
    pub fn no_anchors(&self) -> bool {
        self.anchors == 0
    }
}

/// Supervised contrastive loss over unit rows `z`; unlabelled rows serve
/// only as negatives. With no anchor in the batch the loss is a zero constant.
pub fn loss_supcon(tape: &mut Tape, z: Var, labels: &[Option<usize>], tau: f64) -> Result<SupCon> {
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let [b, _] = tape.value(z).shape();
    if b < 2 {
        return Err(Error::invalid(format!("SupCon needs a batch of at least 2, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| match labels[i] {
            None => Vec::new(),
            Some(y) => (0..b).filter(|&j| j != i && labels[j] == Some(y)).collect(),
        })
        .collect();
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return Ok(SupCon {
            loss: tape.constant(Tensor::scalar(0.0)),
            anchors,
        });
    }
    let mut w = Tensor::zeros(b, b);
    for (i, p) in positives.iter().enumerate() {
        for &j in p {
            w.set(i, j, -1.0 / (p.len() * anchors) as f64);
        }
    }
    let sim = tape.matmul_t(z, z)?;
    let sim = tape.affine(sim, 1.0 / tau, 0.0);
    let ls = tape.masked_log_softmax(sim, Rc::new(Mask::from_fn(b, b, |i, j| i != j)))?;
    Ok(SupCon {
        loss: tape.weighted_sum(ls, w)?,
        anchors,
    })
}

/// Weights and switches of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cl: f64,
    pub lambda_aux: f64,
    pub tau_infonce: f64,
    pub tau_supcon: f64,
    pub use_infonce: bool,
    pub use_supcon: bool,
    pub use_text: bool,
    pub use_audio: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cl: 0.1,
            lambda_aux: 0.5,
            tau_infonce: 0.07,
            tau_supcon: 0.1,
            use_infonce: true,
            use_supcon: true,
            use_text: true,
            use_audio: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub cl: Var,
    pub aux: Var,
}

/// Numeric values of the objective and its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub cl: f64,
    pub aux: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            cls: tape.value(self.cls).item(),
            cl: tape.value(self.cl).item(),
            aux: tape.value(self.aux).item(),
        }
    }
}

/// `cls + lambda_cl * cl + lambda_aux * aux` over one forward pass.
///
/// The contrastive term is the mean of the cross-modal InfoNCE terms
/// (visual with text, visual with audio) plus the mean of per-modality
/// SupCon terms, all on the encoder states. Disabled modalities drop out.
/// Terms that are undefined for the batch (one row, no anchors) are skipped.
pub fn loss_total(tape: &mut Tape, fwd: &Forward, labels: &[Option<usize>], cfg: &LossConfig) -> Result<LossVars> {
    if cfg.lambda_cl < 0.0 || cfg.lambda_aux < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let cls = tape.cross_entropy(fwd.logits, labels)?;
    let aux = tape.cross_entropy(fwd.aux_logits, labels)?;
    let rows = tape.value(fwd.logits).rows();
    let on = |m: Modality| match m {
        Modality::Visual => true,
        Modality::Text => cfg.use_text,
        Modality::Audio => cfg.use_audio,
    };

    let mut parts: Vec<(Var, f64)> = Vec::new();
    if rows >= 2 {
        if cfg.use_infonce {
            let pairs: Vec<Modality> = [Modality::Text, Modality::Audio]
                .into_iter()
                .filter(|&m| on(m))
                .collect();
            let mut nce = Vec::new();
            for &m in &pairs {
                nce.push(loss_infonce(
                    tape,
                    fwd.projection(Modality::Visual),
                    fwd.projection(m),
                    cfg.tau_infonce,
                )?);
            }
            let w = 1.0 / nce.len().max(1) as f64;
            parts.extend(nce.into_iter().map(|v| (v, w)));
        }
        if cfg.use_supcon {
            let mut sc = Vec::new();
            for m in Modality::ALL.into_iter().filter(|&m| on(m)) {
                let s = loss_supcon(tape, fwd.projection(m), labels, cfg.tau_supcon)?;
                if !s.no_anchors() {
                    sc.push(s.loss);
                }
            }
            let w = 1.0 / sc.len().max(1) as f64;
            parts.extend(sc.into_iter().map(|v| (v, w)));
        }
    }
    let cl = if parts.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        tape.lin_comb(&parts)?
    };
    let total = tape.lin_comb(&[(cls, 1.0), (cl, cfg.lambda_cl), (aux, cfg.lambda_aux)])?;
    Ok(LossVars { total, cls, cl, aux })
}
