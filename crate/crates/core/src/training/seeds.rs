use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("need at least 2 values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
            values: values.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seeds: Vec<u64>,
    pub metrics: IndexMap<String, MeanStd>,
}

/// Mean and sample std of every metric across runs that differ only in seed.
pub fn seed_average(runs: &[(TrainConfig, MetricsReport)]) -> Result<SeedAggregate> {
    if runs.len() < 2 {
        return Err(Error::invalid("seed averaging needs at least 2 runs"));
    }
    let base = TrainConfig {
        seed: 0,
        ..runs[0].0.clone()
    };
    for (cfg, _) in runs {
        if (TrainConfig { seed: 0, ..cfg.clone() }) != base {
            return Err(Error::invalid("runs differ in fields other than the seed"));
        }
    }
    let mut series: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (_, r) in runs {
        series.entry("accuracy".into()).or_default().push(r.accuracy);
        series.entry("weighted_f1".into()).or_default().push(r.weighted_f1);
        for (name, f) in &r.per_class_f1 {
            series.entry(format!("f1/{name}")).or_default().push(*f);
        }
    }
    let mut metrics = IndexMap::new();
    for (k, v) in series {
        if v.len() != runs.len() {
            return Err(Error::invalid(format!("metric {k} missing from some runs")));
        }
        metrics.insert(k, MeanStd::of(&v)?);
    }
    Ok(SeedAggregate {
        seeds: runs.iter().map(|(c, _)| c.seed).collect(),
        metrics,
    })
}
