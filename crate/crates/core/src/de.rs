//! Differential evolution, rand/1/bin, maximizing a box-bounded objective.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub population: usize,
    pub generations: usize,
    pub f: f64,
    pub cr: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            population: 32,
            generations: 100,
            f: 0.8,
            cr: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub value: f64,
    /// Best value after each generation, starting with the initial population.
    pub history: Vec<f64>,
}

/// rand/1 mutant `a + f (b - c)` followed by binomial crossover with
/// `target`; one coordinate always comes from the mutant.
pub fn rand1_bin<R: Rng + ?Sized>(target: &[f64], a: &[f64], b: &[f64], c: &[f64], f: f64, cr: f64, rng: &mut R) -> Vec<f64> {
    let d = target.len();
    let forced = rng.gen_range(0..d.max(1));
    (0..d)
        .map(|j| {
            if j == forced || rng.gen::<f64>() < cr {
                a[j] + f * (b[j] - c[j])
            } else {
                target[j]
            }
        })
        .collect()
}

/// Maximize `objective` over `bounds`. `seeds` are placed into the initial
/// population ahead of uniform random members.
pub fn maximize<F>(objective: F, bounds: &[(f64, f64)], cfg: &DeConfig, seeds: &[Vec<f64>]) -> DeResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let np = cfg.population.max(4).max(seeds.len());
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.iter().zip(bounds).map(|(v, &(lo, hi))| v.clamp(lo, hi)).collect() };
    let mut pop: Vec<Vec<f64>> = seeds.iter().cloned().map(clamp).collect();
    while pop.len() < np {
        pop.push(bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect());
    }
    let score = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.par_iter()
            .map(|x| {
                let v = objective(x);
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            })
            .collect()
    };
    let mut fit = score(&pop);
    let best_of = |fit: &[f64]| {
        fit.iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > fit[b] { i } else { b })
    };
    let mut history = vec![fit[best_of(&fit)]];
    for _ in 0..cfg.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let picks: Vec<usize> = sample(&mut rng, np - 1, 3).into_iter().map(|k| if k >= i { k + 1 } else { k }).collect();
                let t = rand1_bin(&pop[i], &pop[picks[0]], &pop[picks[1]], &pop[picks[2]], cfg.f, cfg.cr, &mut rng);
                clamp(t)
            })
            .collect();
        let tfit = score(&trials);
        for (i, (t, v)) in trials.into_iter().zip(tfit).enumerate() {
            if v >= fit[i] {
                pop[i] = t;
                fit[i] = v;
            }
        }
        history.push(fit[best_of(&fit)]);
    }
    let b = best_of(&fit);
    DeResult {
        best: pop[b].clone(),
        value: fit[b],
        history,
    }
}
