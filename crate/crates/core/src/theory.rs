//! Empirical checks of the reliability-weighted risk decomposition and of
//! the Rademacher generalization bound for the fused predictor
//! `h_fuse = c * h_v + (1 - c) * h_aux`.
//!
//! All losses are a smoothed cross-entropy bounded by [`LOSS_BOUND`]:
//! `-ln((1 - eps) * p_y + eps / K)` with `eps = K * exp(-M)`. It is convex in
//! the predicted distribution, reaches exactly `M` at `p_y = 0`, and is 0 only
//! in the limit, so it satisfies the bounded convex loss premise where plain
//! clipping would break convexity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{GateTrace, TraceRecord};
use crate::numcore::softmax;
use crate::rng::{stream_rng, Stream};

/// `M`, the upper bound of every loss in this module.
pub const LOSS_BOUND: f64 = 10.0;

/// Bounded convex cross-entropy of distribution `p` at label `y`.
pub fn bounded_ce(p: &[f64], y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            p.len()
        )));
    }
    let k = p.len() as f64;
    let eps = k * (-LOSS_BOUND).exp();
    Ok(-((1.0 - eps) * p[y] + eps / k).ln())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// `c * p_v + (1 - c) * p_aux`, componentwise.
pub fn fuse_predictions(c: f64, p_v: &[f64], p_aux: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!("reliability {c} outside [0, 1]")));
    }
    check_distribution(p_v)?;
    check_distribution(p_aux)?;
    if p_v.len() != p_aux.len() {
        return Err(Error::DimMismatch {
            expected: p_v.len(),
            found: p_aux.len(),
        });
    }
    Ok(p_v.iter().zip(p_aux).map(|(a, b)| c * a + (1.0 - c) * b).collect())
}

/// Per-instance losses of the visual, complemented and fused predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub c: f64,
    pub loss_v: f64,
    pub loss_aux: f64,
    pub loss_fuse: f64,
    pub label: usize,
}

impl RiskSample {
    pub fn new(c: f64, loss_v: f64, loss_aux: f64, loss_fuse: f64, label: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("reliability {c} outside [0, 1]")));
        }
        for l in [loss_v, loss_aux, loss_fuse] {
            if !(0.0..=LOSS_BOUND).contains(&l) {
                return Err(Error::invalid(format!("loss {l} outside [0, {LOSS_BOUND}]")));
            }
        }
        Ok(RiskSample {
            c,
            loss_v,
            loss_aux,
            loss_fuse,
            label,
        })
    }

    /// Losses of the three predictors under [`bounded_ce`].
    pub fn from_distributions(c: f64, p_v: &[f64], p_aux: &[f64], label: usize) -> Result<Self> {
        let fused = fuse_predictions(c, p_v, p_aux)?;
        Self::new(
            c,
            bounded_ce(p_v, label)?,
            bounded_ce(p_aux, label)?,
            bounded_ce(&fused, label)?,
            label,
        )
    }

    /// Visual predictor from the auxiliary logits, complemented predictor
    /// from the open-gate logits. Unlabelled records yield `None`.
    pub fn from_record(r: &TraceRecord) -> Result<Option<Self>> {
        let Some(y) = r.label else { return Ok(None) };
        let c = r.c.clamp(0.0, 1.0);
        Self::from_distributions(c, &softmax(&r.aux_logits, 1.0), &softmax(&r.logits_open_gate, 1.0), y).map(Some)
    }

    pub fn from_trace(t: &GateTrace) -> Result<Option<Self>> {
        Self::from_record(&t.record())
    }
}

/// One instance for the pointwise convexity check.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInstance {
    pub c: f64,
    pub p_v: Vec<f64>,
    pub p_aux: Vec<f64>,
    pub label: usize,
}

/// Max over instances of `l(fuse) - (c l(p_v) + (1 - c) l(p_aux))`; at most
/// rounding error for a convex loss.
pub fn convexity_check<F>(instances: &[FusionInstance], loss: F) -> Result<f64>
where
    F: Fn(&[f64], usize) -> f64,
{
    let mut worst = f64::NEG_INFINITY;
    for s in instances {
        let fused = fuse_predictions(s.c, &s.p_v, &s.p_aux)?;
        let lhs = loss(&fused, s.label);
        let rhs = s.c * loss(&s.p_v, s.label) + (1.0 - s.c) * loss(&s.p_aux, s.label);
        worst = worst.max(lhs - rhs);
    }
    Ok(if instances.is_empty() { 0.0 } else { worst })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Population covariance (divisor n).
pub fn covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("covariance operands differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::invalid("covariance needs at least 2 samples"));
    }
    let (ma, mb) = (mean(a.iter().copied()), mean(b.iter().copied()));
    Ok(mean(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n: usize,
    pub loss_bound: f64,
    pub mean_c: f64,
    pub risk_v: f64,
    pub risk_aux: f64,
    /// Left side: empirical risk of the fused predictor.
    pub risk_fuse: f64,
    /// `E[c] * R(h_v)`.
    pub weighted_risk_v: f64,
    /// `E[1 - c] * R(h_aux)`.
    pub weighted_risk_aux: f64,
    pub cov_c_loss_v: f64,
    pub cov_c_loss_aux: f64,
    /// `E[c l_v] + E[(1 - c) l_aux]`, computed directly.
    pub mixture_risk: f64,
    /// Right side of the decomposition.
    pub decomposition: f64,
    /// `|mixture_risk - decomposition|`.
    pub identity_residual: f64,
    /// `decomposition - risk_fuse`.
    pub slack: f64,
    /// Min over samples of `c l_v + (1 - c) l_aux - l_fuse`.
    pub min_pointwise_slack: f64,
}

pub fn risk_decomposition(samples: &[RiskSample]) -> Result<DecompositionReport> {
    if samples.len() < 2 {
        return Err(Error::invalid("decomposition needs at least 2 samples"));
    }
    let c: Vec<f64> = samples.iter().map(|s| s.c).collect();
    let lv: Vec<f64> = samples.iter().map(|s| s.loss_v).collect();
    let la: Vec<f64> = samples.iter().map(|s| s.loss_aux).collect();
    let mean_c = mean(c.iter().copied());
    let risk_v = mean(lv.iter().copied());
    let risk_aux = mean(la.iter().copied());
    let risk_fuse = mean(samples.iter().map(|s| s.loss_fuse));
    let cov_v = covariance(&c, &lv)?;
    let cov_a = covariance(&c, &la)?;
    let weighted_risk_v = mean_c * risk_v;
    let weighted_risk_aux = (1.0 - mean_c) * risk_aux;
    let mixture_risk = mean(samples.iter().map(|s| s.c * s.loss_v + (1.0 - s.c) * s.loss_aux));
    let decomposition = weighted_risk_v + weighted_risk_aux + cov_v - cov_a;
    let min_pointwise_slack = samples
        .iter()
        .map(|s| s.c * s.loss_v + (1.0 - s.c) * s.loss_aux - s.loss_fuse)
        .fold(f64::INFINITY, f64::min);
    Ok(DecompositionReport {
        n: samples.len(),
        loss_bound: LOSS_BOUND,
        mean_c,
        risk_v,
        risk_aux,
        risk_fuse,
        weighted_risk_v,
        weighted_risk_aux,
        cov_c_loss_v: cov_v,
        cov_c_loss_aux: cov_a,
        mixture_risk,
        decomposition,
        identity_residual: (mixture_risk - decomposition).abs(),
        slack: decomposition - risk_fuse,
        min_pointwise_slack,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLossCorrelation {
    pub n: usize,
    pub cov_c_loss_v: f64,
    pub cov_c_loss_aux: f64,
    /// `c` is constant, so both covariances are zero by construction.
    pub degenerate: bool,
}

pub fn gate_loss_correlation(samples: &[RiskSample]) -> Result<GateLossCorrelation> {
    if samples.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 samples"));
    }
    let c: Vec<f64> = samples.iter().map(|s| s.c).collect();
    let lv: Vec<f64> = samples.iter().map(|s| s.loss_v).collect();
    let la: Vec<f64> = samples.iter().map(|s| s.loss_aux).collect();
    Ok(GateLossCorrelation {
        n: samples.len(),
        cov_c_loss_v: covariance(&c, &lv)?,
        cov_c_loss_aux: covariance(&c, &la)?,
        degenerate: c.iter().all(|&x| x == c[0]),
    })
}

pub fn risk_samples(records: &[TraceRecord]) -> Result<Vec<RiskSample>> {
    let mut out = Vec::new();
    for r in records {
        if let Some(s) = RiskSample::from_record(r)? {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub value: f64,
    /// Standard error over sign draws (0 when exhaustive).
    pub std_error: f64,
    pub draws: usize,
    pub exhaustive: bool,
}

fn check_losses(losses: &[Vec<f64>]) -> Result<usize> {
    let n = losses
        .first()
        .ok_or_else(|| Error::invalid("empty hypothesis sample"))?
        .len();
    if n == 0 {
        return Err(Error::invalid("no data points"));
    }
    if losses.iter().any(|l| l.len() != n) {
        return Err(Error::shape("hypotheses evaluated on different point counts"));
    }
    Ok(n)
}

fn sup_correlation(losses: &[Vec<f64>], sigma: &[f64]) -> f64 {
    let n = sigma.len() as f64;
    losses
        .iter()
        .map(|l| l.iter().zip(sigma).map(|(a, s)| a * s).sum::<f64>() / n)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `E_sigma max_h (1/n) sum_i sigma_i l_h(i)` over `draws` sampled sign
/// vectors. `losses[h][i]` is the loss of hypothesis `h` on point `i`. The
/// maximum runs over the given finite sample of hypotheses only, so this is a
/// lower estimate of the complexity of the full class.
pub fn empirical_rademacher(losses: &[Vec<f64>], draws: usize, rng: &mut ChaCha8Rng) -> Result<RademacherEstimate> {
    let n = check_losses(losses)?;
    if draws < 100 {
        return Err(Error::invalid("need at least 100 sign draws"));
    }
    let mut vals = Vec::with_capacity(draws);
    let mut sigma = vec![0.0; n];
    for _ in 0..draws {
        for s in sigma.iter_mut() {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        vals.push(sup_correlation(losses, &sigma));
    }
    let m = mean(vals.iter().copied());
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
    Ok(RademacherEstimate {
        value: m,
        std_error: (var / draws as f64).sqrt(),
        draws,
        exhaustive: false,
    })
}

/// Exact expectation over all `2^n` sign vectors; `n <= 20`.
pub fn exhaustive_rademacher(losses: &[Vec<f64>]) -> Result<RademacherEstimate> {
    let n = check_losses(losses)?;
    if n > 20 {
        return Err(Error::invalid(format!(
            "exhaustive enumeration limited to n <= 20, got {n}"
        )));
    }
    let total = 1usize << n;
    let mut sigma = vec![0.0; n];
    let mut acc = 0.0;
    for bits in 0..total {
        for (i, s) in sigma.iter_mut().enumerate() {
            *s = if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        acc += sup_correlation(losses, &sigma);
    }
    Ok(RademacherEstimate {
        value: acc / total as f64,
        std_error: 0.0,
        draws: total,
        exhaustive: true,
    })
}

/// Right side of the generalization bound. With `delta >= 1` the confidence
/// term is dropped (second field `true`).
pub fn generalization_bound(
    empirical: f64,
    rademacher: f64,
    lipschitz: f64,
    n: usize,
    delta: f64,
) -> Result<(f64, bool)> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::invalid("bound needs n > 0"));
    }
    let base = empirical + 2.0 * lipschitz * rademacher;
    if delta >= 1.0 {
        return Ok((base, true));
    }
    Ok((
        base + 3.0 * LOSS_BOUND * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt(),
        false,
    ))
}

/// Two-class Gaussian task with a linear visual predictor on `x_v` and a
/// linear complemented predictor on `[x_v; x_e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundCheckConfig {
    pub n: usize,
    pub delta: f64,
    pub resamples: usize,
    pub sign_draws: usize,
    /// Perturbed copies of the trained predictor in the hypothesis sample.
    pub hypotheses: usize,
    pub perturbation: f64,
    pub heldout: usize,
    pub visual_shift: f64,
    pub external_shift: f64,
    /// Fraction of points whose visual input is replaced by pure noise.
    pub corruption_rate: f64,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        BoundCheckConfig {
            n: 200,
            delta: 0.1,
            resamples: 200,
            sign_draws: 200,
            hypotheses: 32,
            perturbation: 0.3,
            heldout: 20_000,
            visual_shift: 1.0,
            external_shift: 0.8,
            corruption_rate: 0.3,
            train_steps: 200,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDraw {
    pub empirical_risk: f64,
    pub rademacher: f64,
    pub bound: f64,
    pub population_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub n: usize,
    pub loss_bound: f64,
    pub lipschitz: f64,
    pub resamples: usize,
    pub mean_empirical_risk: f64,
    pub mean_rademacher: f64,
    /// The Rademacher term uses a finite hypothesis sample.
    pub rademacher_is_lower_estimate: bool,
    pub mean_bound: f64,
    pub mean_population_risk: f64,
    pub violations: usize,
    pub violation_fraction: f64,
    /// `sqrt(delta (1 - delta) / resamples)`.
    pub binomial_std_error: f64,
    pub within_tolerance: bool,
    pub confidence_term_dropped: bool,
    pub draws: Vec<BoundDraw>,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    xv: [f64; 2],
    xe: [f64; 2],
    y: usize,
}

/// Parameters of both linear predictors: visual `2 x 2 + 2`, complemented `4 x 2 + 2`.
#[derive(Debug, Clone)]
struct LinearPair {
    wv: [f64; 6],
    wa: [f64; 10],
}

fn logits2(w: &[f64], x: &[f64]) -> [f64; 2] {
    let d = x.len();
    let mut out = [w[2 * d], w[2 * d + 1]];
    for (i, xi) in x.iter().enumerate() {
        out[0] += xi * w[2 * i];
        out[1] += xi * w[2 * i + 1];
    }
    out
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

impl LinearPair {
    fn fused_loss(&self, p: &Point) -> f64 {
        let pv = softmax2(logits2(&self.wv, &p.xv));
        let x = [p.xv[0], p.xv[1], p.xe[0], p.xe[1]];
        let pa = softmax2(logits2(&self.wa, &x));
        let c = pv[0].max(pv[1]);
        let fused = [c * pv[0] + (1.0 - c) * pa[0], c * pv[1] + (1.0 - c) * pa[1]];
        bounded_ce(&fused, p.y).expect("binary label")
    }
}

/// Full-batch gradient descent on mean cross-entropy.
fn fit_logistic(xs: &[Vec<f64>], ys: &[usize], steps: usize, lr: f64) -> Vec<f64> {
    let d = xs[0].len();
    let mut w = vec![0.0; 2 * d + 2];
    let n = xs.len() as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(ys) {
            let p = softmax2(logits2(&w, x));
            for k in 0..2 {
                let r = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                for i in 0..d {
                    g[2 * i + k] += r * x[i];
                }
                g[2 * d + k] += r;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi;
        }
    }
    w
}

fn sample_points(cfg: &BoundCheckConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..2usize);
            let s = if y == 1 { 1.0 } else { -1.0 };
            let corrupted = rng.random::<f64>() < cfg.corruption_rate;
            let vs = if corrupted { 0.0 } else { s * cfg.visual_shift };
            let xv = [vs + normal.sample(rng), normal.sample(rng)];
            let es = s * cfg.external_shift;
            let xe = [es + normal.sample(rng), es + normal.sample(rng)];
            Point { xv, xe, y }
        })
        .collect()
}

fn fit_pair(cfg: &BoundCheckConfig, pts: &[Point]) -> LinearPair {
    let ys: Vec<usize> = pts.iter().map(|p| p.y).collect();
    let xv: Vec<Vec<f64>> = pts.iter().map(|p| p.xv.to_vec()).collect();
    let xa: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.xv[0], p.xv[1], p.xe[0], p.xe[1]]).collect();
    let wv = fit_logistic(&xv, &ys, cfg.train_steps, cfg.learning_rate);
    let wa = fit_logistic(&xa, &ys, cfg.train_steps, cfg.learning_rate);
    LinearPair {
        wv: wv.try_into().expect("6 weights"),
        wa: wa.try_into().expect("10 weights"),
    }
}

/// Over `resamples` independent training sets, compares the bound with a
/// held-out estimate of the fused predictor's risk.
pub fn bound_check(cfg: &BoundCheckConfig) -> Result<BoundReport> {
    if cfg.n == 0 || cfg.resamples == 0 || cfg.heldout == 0 {
        return Err(Error::invalid("n, resamples and heldout must be positive"));
    }
    let lipschitz = 1.0;
    let mut data_rng = stream_rng(cfg.seed, Stream::Data);
    let heldout = sample_points(cfg, cfg.heldout, &mut data_rng);
    let mut resample_rng = stream_rng(cfg.seed, Stream::Resample);
    let mut sign_rng = stream_rng(cfg.seed, Stream::Rademacher);
    let noise = Normal::new(0.0, cfg.perturbation.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;

    let mut draws = Vec::with_capacity(cfg.resamples);
    let mut dropped = false;
    for _ in 0..cfg.resamples {
        let train = sample_points(cfg, cfg.n, &mut resample_rng);
        let fitted = fit_pair(cfg, &train);
        let mut hyps = vec![fitted.clone()];
        for _ in 0..cfg.hypotheses {
            let mut h = fitted.clone();
            h.wv.iter_mut().for_each(|w| *w += noise.sample(&mut resample_rng));
            h.wa.iter_mut().for_each(|w| *w += noise.sample(&mut resample_rng));
            hyps.push(h);
        }
        let losses: Vec<Vec<f64>> = hyps
            .iter()
            .map(|h| train.iter().map(|p| h.fused_loss(p)).collect())
            .collect();
        let empirical = mean(losses[0].iter().copied());
        let rad = empirical_rademacher(&losses, cfg.sign_draws, &mut sign_rng)?;
        let (bound, d) = generalization_bound(empirical, rad.value, lipschitz, cfg.n, cfg.delta)?;
        dropped = d;
        let population = mean(heldout.iter().map(|p| fitted.fused_loss(p)));
        draws.push(BoundDraw {
            empirical_risk: empirical,
            rademacher: rad.value,
            bound,
            population_risk: population,
        });
    }
    let violations = draws.iter().filter(|d| d.population_risk > d.bound).count();
    let r = cfg.resamples as f64;
    let violation_fraction = violations as f64 / r;
    let binomial_std_error = (cfg.delta * (1.0 - cfg.delta) / r).sqrt();
    Ok(BoundReport {
        delta: cfg.delta,
        n: cfg.n,
        loss_bound: LOSS_BOUND,
        lipschitz,
        resamples: cfg.resamples,
        mean_empirical_risk: mean(draws.iter().map(|d| d.empirical_risk)),
        mean_rademacher: mean(draws.iter().map(|d| d.rademacher)),
        rademacher_is_lower_estimate: true,
        mean_bound: mean(draws.iter().map(|d| d.bound)),
        mean_population_risk: mean(draws.iter().map(|d| d.population_risk)),
        violations,
        violation_fraction,
        binomial_std_error,
        within_tolerance: violation_fraction <= cfg.delta + 3.0 * binomial_std_error,
        confidence_term_dropped: dropped,
        draws,
    })
}
