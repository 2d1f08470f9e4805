//! Normalized-sigmoid ensemble of per-space scorers:
//! `f(x) = Σ w_i · S((s_i(x) - μ_i) / σ_i)`.

use crate::arch::ArchGraph;
use crate::dataset::BenchmarkDataset;
use crate::de::{self, DeConfig};
use crate::error::{Error, Result};
use crate::ranking::spearman;
use crate::scorer::ScorerParams;
use crate::tensor::ops::sigmoid;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Weights are kept inside `[WEIGHT_MARGIN, 1 - WEIGHT_MARGIN]`.
pub const WEIGHT_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub weights: Vec<f64>,
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Scorer checkpoints, in weight order, when stored on disk.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.mus.len() != n || self.sigmas.len() != n {
            return Err(Error::Data("ensemble needs equal, non-zero numbers of weights, mus and sigmas".into()));
        }
        if !self.checkpoints.is_empty() && self.checkpoints.len() != n {
            return Err(Error::Data("ensemble checkpoint count differs from weight count".into()));
        }
        if let Some(index) = self.sigmas.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::DegenerateScorer { index });
        }
        Ok(())
    }

    /// Combine one raw score per member.
    pub fn combine(&self, scores: &[f64]) -> f64 {
        scores
            .iter()
            .zip(&self.weights)
            .zip(self.mus.iter().zip(&self.sigmas))
            .map(|((s, w), (m, sd))| w * sigmoid((s - m) / sd))
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Relative checkpoint paths resolve against the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: EnsembleSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut spec.checkpoints {
            if c.is_relative() {
                *c = base.join(&c);
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn ensemble_score(g: &ArchGraph, scorers: &[ScorerParams], spec: &EnsembleSpec) -> Result<f64> {
    if scorers.len() != spec.weights.len() {
        return Err(Error::Usage("scorer count differs from ensemble size".into()));
    }
    let s = scorers.iter().map(|p| p.score(g)).collect::<Result<Vec<f64>>>()?;
    Ok(spec.combine(&s))
}

/// Fit from precomputed scores: `table[i][j]` holds scorer `i` on every
/// architecture of space `j`, `accuracies[j]` the matching ground truth.
/// Scorer `i` is normalized with its statistics on space `i`.
pub fn fit_ensemble_table(table: &[Vec<Vec<f64>>], accuracies: &[Vec<f64>], cfg: &DeConfig) -> Result<EnsembleSpec> {
    let n = table.len();
    if n == 0 || accuracies.len() != n || table.iter().any(|row| row.len() != n) {
        return Err(Error::Usage("need one scorer per space and scores for every space".into()));
    }
    let (mut mus, mut sigmas) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, row) in table.iter().enumerate() {
        let own = &row[i];
        if own.len() < 2 {
            return Err(Error::Data(format!("space {i} needs at least 2 architectures")));
        }
        let m = own.iter().sum::<f64>() / own.len() as f64;
        let sd = (own.iter().map(|s| (s - m).powi(2)).sum::<f64>() / own.len() as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::DegenerateScorer { index: i });
        }
        mus.push(m);
        sigmas.push(sd);
    }
    // Per-space normalized sigmoid terms, computed once.
    let terms: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| table[i][j].iter().map(|s| sigmoid((s - mus[i]) / sigmas[i])).collect())
                .collect()
        })
        .collect();
    let objective = |w: &[f64]| -> f64 {
        let mut total = 0.0;
        for (j, acc) in accuracies.iter().enumerate() {
            let combined: Vec<f64> = (0..acc.len())
                .map(|k| (0..n).map(|i| w[i] * terms[j][i][k]).sum())
                .collect();
            total += spearman(&combined, acc).unwrap_or(-1.0);
        }
        total / n as f64
    };
    let (lo, hi) = (WEIGHT_MARGIN, 1.0 - WEIGHT_MARGIN);
    let mut seeds = vec![vec![0.5; n]];
    for i in 0..n {
        let mut corner = vec![lo; n];
        corner[i] = hi;
        seeds.push(corner);
    }
    let res = de::maximize(objective, &vec![(lo, hi); n], cfg, &seeds);
    log::info!("ensemble fit: mean spearman {:.6}", res.value);
    let spec = EnsembleSpec {
        weights: res.best,
        mus,
        sigmas,
        checkpoints: Vec::new(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Score every dataset with every scorer, then fit.
pub fn fit_ensemble(scorers: &[ScorerParams], datasets: &[BenchmarkDataset], cfg: &DeConfig) -> Result<EnsembleSpec> {
    let mut table = Vec::with_capacity(scorers.len());
    for p in scorers {
        let row = datasets
            .iter()
            .map(|ds| p.score_batch(&ds.graphs(&ds.eval_indices())))
            .collect::<Result<Vec<_>>>()?;
        table.push(row);
    }
    let acc: Vec<Vec<f64>> = datasets.iter().map(|ds| ds.accuracies(&ds.eval_indices())).collect();
    fit_ensemble_table(&table, &acc, cfg)
}
