//! Scorer training against benchmark accuracy with the soft Spearman loss.

use crate::arch::ArchGraph;
use crate::dataset::BenchmarkDataset;
use crate::error::{Error, Result};
use crate::ranking::{spearman_soft_loss, SoftRankConfig};
use crate::scorer::ScorerParams;
use crate::tensor::{AdamConfig, AdamState, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub sample_size: usize,
    pub soft_rank: SoftRankConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            sample_size: 64,
            soft_rank: SoftRankConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Per-space budget for round-robin training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSchedule {
    pub steps: usize,
    pub sample_size: usize,
}

impl SpaceSchedule {
    pub fn for_dataset(ds: &BenchmarkDataset) -> Self {
        SpaceSchedule {
            steps: ds.kind.default_steps(),
            sample_size: ds.kind.default_sample_size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub space: usize,
    pub loss: f64,
}

/// Loss and summed parameter gradients of one sampled batch.
pub fn batch_gradient(p: &ScorerParams, graphs: &[ArchGraph], accuracies: &[f64], cfg: SoftRankConfig) -> Result<(f64, Vec<Tensor>)> {
    let scores = p.score_batch(graphs)?;
    let (loss, upstream) = spearman_soft_loss(&scores, accuracies, cfg)?;
    let per_arch: Vec<Result<Vec<Tensor>>> = graphs
        .par_iter()
        .zip(&upstream)
        .map(|(g, &u)| p.trace(g, true)?.grads(u))
        .collect();
    let mut total: Option<Vec<Tensor>> = None;
    for (index, r) in per_arch.into_iter().enumerate() {
        let grads = r.map_err(|e| Error::AtIndex { index, source: Box::new(e) })?;
        match total.as_mut() {
            None => total = Some(grads),
            Some(t) => t.iter_mut().zip(&grads).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    Ok((loss, total))
}

/// Draw `k` train entries without replacement, redrawing once if all
/// accuracies in the draw are equal.
fn draw(ds: &BenchmarkDataset, k: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<ArchGraph>, Vec<f64>)> {
    if k < 2 || k > ds.train.len() {
        return Err(Error::Usage(format!(
            "sample size {k} must be in [2, {}] for `{}`",
            ds.train.len(),
            ds.space_id
        )));
    }
    for _ in 0..2 {
        let idx: Vec<usize> = sample(rng, ds.train.len(), k).into_iter().map(|i| ds.train[i]).collect();
        let acc = ds.accuracies(&idx);
        if acc.iter().any(|&a| a != acc[0]) {
            return Ok((ds.graphs(&idx), acc));
        }
    }
    Err(Error::DegenerateBatch)
}

fn apply(p: &mut ScorerParams, adam: &mut AdamState, grads: &[Tensor]) -> Result<()> {
    let names = p.names();
    let mut slots = p.tensors_mut();
    adam.update(&mut slots, grads, &names)
}

/// Train on one space; returns the loss of every step.
pub fn train_single(ds: &BenchmarkDataset, p: &mut ScorerParams, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let schedule = SpaceSchedule {
        steps: cfg.steps,
        sample_size: cfg.sample_size,
    };
    let hist = train_multi(std::slice::from_ref(ds), p, &[schedule], cfg, false)?;
    Ok(hist.into_iter().map(|r| r.loss).collect())
}

/// Round-robin over spaces, one optimizer step per space per cycle until
/// every budget is spent. With `accumulate`, each cycle sums one batch
/// gradient per space and takes a single step.
pub fn train_multi(
    datasets: &[BenchmarkDataset],
    p: &mut ScorerParams,
    schedules: &[SpaceSchedule],
    cfg: &TrainConfig,
    accumulate: bool,
) -> Result<Vec<StepRecord>> {
    if datasets.len() != schedules.len() {
        return Err(Error::Usage("one schedule per dataset is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, p.tensors());
    let mut left: Vec<usize> = schedules.iter().map(|s| s.steps).collect();
    let mut history = Vec::new();
    while left.iter().any(|&l| l > 0) {
        let mut acc: Option<Vec<Tensor>> = None;
        for (i, ds) in datasets.iter().enumerate() {
            if left[i] == 0 {
                continue;
            }
            left[i] -= 1;
            let (graphs, accs) = draw(ds, schedules[i].sample_size, &mut rng)?;
            let (loss, grads) = batch_gradient(p, &graphs, &accs, cfg.soft_rank)?;
            log::debug!("space {} step loss {loss:.6}", ds.space_id);
            history.push(StepRecord { space: i, loss });
            if accumulate {
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
                }
            } else {
                apply(p, &mut adam, &grads)?;
            }
        }
        if let Some(g) = acc {
            apply(p, &mut adam, &g)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::spearman;
    use crate::scorer::ScorerConfig;
    use crate::synthetic;

    fn tiny() -> ScorerParams {
        ScorerParams::init(ScorerConfig::tiny(), 1).unwrap()
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let ds = synthetic::param_dataset(20, 0.0, 3).unwrap();
        let mut p = tiny();
        let before = p.clone();
        let cfg = TrainConfig {
            steps: 0,
            sample_size: 8,
            ..Default::default()
        };
        assert!(train_single(&ds, &mut p, &cfg).unwrap().is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn degenerate_batches_error_after_one_redraw() {
        let mut ds = synthetic::param_dataset(10, 0.0, 3).unwrap();
        ds.entries.iter_mut().for_each(|e| e.accuracy = 0.5);
        let cfg = TrainConfig {
            steps: 1,
            sample_size: 4,
            ..Default::default()
        };
        let err = train_single(&ds, &mut tiny(), &cfg).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = synthetic::param_dataset(40, 0.0, 5).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            sample_size: 12,
            adam: AdamConfig { lr: 0.01, ..Default::default() },
            seed: 2,
            ..Default::default()
        };
        let (mut a, mut b) = (tiny(), tiny());
        let ha = train_single(&ds, &mut a, &cfg).unwrap();
        let hb = train_single(&ds, &mut b, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let head: f64 = ha[..5].iter().sum();
        let tail: f64 = ha[ha.len() - 5..].iter().sum();
        assert!(tail < head, "{ha:?}");
    }

    #[test]
    fn single_space_multi_equals_single() {
        let ds = synthetic::param_dataset(20, 0.0, 6).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            sample_size: 6,
            seed: 4,
            ..Default::default()
        };
        let mut a = tiny();
        let ha = train_single(&ds, &mut a, &cfg).unwrap();
        let mut b = tiny();
        let sched = [SpaceSchedule { steps: 3, sample_size: 6 }];
        let hb: Vec<f64> = train_multi(&[ds], &mut b, &sched, &cfg, false)
            .unwrap()
            .into_iter()
            .map(|r| r.loss)
            .collect();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn round_robin_cycles_spaces_and_accumulates() {
        let d1 = synthetic::param_dataset(12, 0.0, 7).unwrap();
        let d2 = synthetic::param_dataset(12, 0.0, 8).unwrap();
        let cfg = TrainConfig {
            sample_size: 4,
            ..Default::default()
        };
        let sched = [SpaceSchedule { steps: 2, sample_size: 4 }, SpaceSchedule { steps: 1, sample_size: 4 }];
        let h = train_multi(&[d1.clone(), d2.clone()], &mut tiny(), &sched, &cfg, false).unwrap();
        assert_eq!(h.iter().map(|r| r.space).collect::<Vec<_>>(), vec![0, 1, 0]);
        let mut p = tiny();
        let h = train_multi(&[d1, d2], &mut p, &sched, &cfg, true).unwrap();
        assert_eq!(h.len(), 3);
        assert_ne!(p, tiny());
    }

    #[test]
    fn conflicting_spaces_cancel_out() {
        let up = synthetic::param_dataset(30, 0.0, 9).unwrap();
        let mut down = up.clone();
        down.entries.iter_mut().for_each(|e| e.accuracy = -e.accuracy);
        let cfg = TrainConfig {
            sample_size: 10,
            adam: AdamConfig { lr: 0.01, ..Default::default() },
            seed: 1,
            ..Default::default()
        };
        let sched = [SpaceSchedule { steps: 20, sample_size: 10 }; 2];
        let mut p = tiny();
        train_multi(&[up.clone(), down.clone()], &mut p, &sched, &cfg, false).unwrap();
        let all: Vec<usize> = (0..up.len()).collect();
        let scores = p.score_batch(&up.graphs(&all)).unwrap();
        let s_up = spearman(&scores, &up.accuracies(&all)).unwrap();
        let s_down = spearman(&scores, &down.accuracies(&all)).unwrap();
        assert!(((s_up + s_down) / 2.0).abs() < 1e-12);
        assert!(s_up.abs() < 0.999);
    }
}
