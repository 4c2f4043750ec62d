use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::weighted_f1;
use crate::error::{Error, Result};
use crate::fusion::{GateTrace, TraceRecord};

/// One labelled prediction with its reliability score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSample {
    pub c: f64,
    pub visual_prediction: usize,
    pub prediction: usize,
    pub label: usize,
}

impl BinSample {
    pub fn from_trace(t: &GateTrace) -> Option<Self> {
        t.label.map(|label| BinSample {
            c: t.c,
            visual_prediction: t.visual_prediction,
            prediction: t.prediction,
            label,
        })
    }

    pub fn from_record(t: &TraceRecord) -> Option<Self> {
        t.label.map(|label| BinSample {
            c: t.c,
            visual_prediction: t.visual_prediction,
            prediction: t.prediction,
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub wf1_visual: Option<f64>,
    pub wf1_full: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStats>,
}

/// `n` equal-width bins over [0, 1].
pub fn uniform_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Groups samples into `[edge_j, edge_{j+1})` (the last bin closed) and scores
/// the visual-only and full predictors inside each bin.
pub fn bin_by_confidence(samples: &[BinSample], edges: &[f64], num_labels: usize) -> Result<BinReport> {
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(Error::invalid("bin edges must span [0, 1]"));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let nb = edges.len() - 1;
    let mut groups: Vec<Vec<&BinSample>> = vec![Vec::new(); nb];
    for s in samples {
        if !(0.0..=1.0).contains(&s.c) {
            return Err(Error::invalid(format!("reliability {} outside [0, 1]", s.c)));
        }
        let j = (0..nb).find(|&j| s.c < edges[j + 1]).unwrap_or(nb - 1);
        groups[j].push(s);
    }
    let mut bins = Vec::with_capacity(nb);
    for (j, g) in groups.iter().enumerate() {
        let (wf1_visual, wf1_full) = if g.is_empty() {
            (None, None)
        } else {
            let labels: Vec<usize> = g.iter().map(|s| s.label).collect();
            let vis: Vec<usize> = g.iter().map(|s| s.visual_prediction).collect();
            let full: Vec<usize> = g.iter().map(|s| s.prediction).collect();
            (
                Some(weighted_f1(&vis, &labels, num_labels)?),
                Some(weighted_f1(&full, &labels, num_labels)?),
            )
        };
        bins.push(BinStats {
            lo: edges[j],
            hi: edges[j + 1],
            count: g.len(),
            wf1_visual,
            wf1_full,
            gain: wf1_full.zip(wf1_visual).map(|(f, v)| f - v),
        });
    }
    Ok(BinReport {
        edges: edges.to_vec(),
        bins,
    })
}

impl BinReport {
    /// `bin_lo,bin_hi,count,wf1_visual,wf1_full,gain`; empty bins leave the
    /// score fields blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,wf1_visual,wf1_full,gain\n");
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                b.lo,
                b.hi,
                b.count,
                f(b.wf1_visual),
                f(b.wf1_full),
                f(b.gain)
            );
        }
        out
    }

    /// Count-weighted mean gain over bins whose range lies inside `[lo, hi]`.
    pub fn mean_gain_within(&self, lo: f64, hi: f64) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for b in self.bins.iter().filter(|b| b.lo >= lo && b.hi <= hi) {
            if let Some(g) = b.gain {
                num += g * b.count as f64;
                den += b.count;
            }
        }
        (den > 0).then(|| num / den as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: f64, v: usize, p: usize, y: usize) -> BinSample {
        BinSample {
            c,
            visual_prediction: v,
            prediction: p,
            label: y,
        }
    }

    #[test]
    fn high_confidence_lands_in_last_bin() {
        let s: Vec<_> = (0..10).map(|i| sample(0.99, i % 2, i % 2, i % 2)).collect();
        let r = bin_by_confidence(&s, &uniform_edges(5), 2).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 0, 0, 10]);
        assert_eq!(r.bins[0].gain, None);
        assert_eq!(r.bins[4].gain, Some(0.0));
    }

    #[test]
    fn counts_partition_and_boundaries() {
        let s = vec![
            sample(0.0, 0, 0, 0),
            sample(0.2, 0, 0, 0),
            sample(0.3999, 0, 1, 1),
            sample(1.0, 1, 1, 1),
        ];
        let r = bin_by_confidence(&s, &uniform_edges(5), 2).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(r.bins[0].count, 1);
        assert_eq!(r.bins[1].count, 2);
        assert_eq!(r.bins[4].count, 1);
        assert!(r
            .to_csv()
            .starts_with("bin_lo,bin_hi,count,wf1_visual,wf1_full,gain\n0,0.2,1,"));
    }

    #[test]
    fn edges_are_validated() {
        assert!(bin_by_confidence(&[], &[0.0, 0.5, 0.5, 1.0], 2).is_err());
        assert!(bin_by_confidence(&[], &[0.1, 1.0], 2).is_err());
        assert!(bin_by_confidence(&[], &[0.0, 0.9], 2).is_err());
    }
}
