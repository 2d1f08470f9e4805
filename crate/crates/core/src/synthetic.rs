//! Seeded synthetic spaces for tests, examples and self-checks.

use crate::arch::{ArchGraph, GraphBuilder, LayerSpec};
use crate::dataset::{BenchmarkDataset, Entry};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const WIDTHS: [usize; 5] = [4, 8, 16, 24, 32];

/// A random chain of 1 to 4 conv stages with optional batch norm, ReLU and
/// identity shortcuts.
pub fn random_small_graph<R: Rng + ?Sized>(rng: &mut R) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let input = b.node("input", LayerSpec::Identity).expect("fresh id");
    let mut x = input;
    let mut c = 3;
    for s in 0..rng.gen_range(1..=4) {
        let out = WIDTHS[rng.gen_range(0..WIDTHS.len())];
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
        let entry = x;
        x = b.chain(x, format!("s{s}.conv"), LayerSpec::conv(c, out, k, stride)).expect("fresh id");
        if rng.gen_bool(0.5) {
            x = b.chain(x, format!("s{s}.bn"), LayerSpec::BatchNorm).expect("fresh id");
        }
        x = b.chain(x, format!("s{s}.relu"), LayerSpec::Relu).expect("fresh id");
        if out == c && stride == 1 && rng.gen_bool(0.5) {
            let sum = b.node(format!("s{s}.sum"), LayerSpec::Identity).expect("fresh id");
            b.edge(x, sum);
            b.edge(entry, sum);
            x = sum;
        }
        c = out;
    }
    let out = b.chain(x, "output", LayerSpec::Identity).expect("fresh id");
    b.build(input, out).expect("generator emits valid graphs")
}

/// `n` random small graphs whose accuracy is `ln(params)` rescaled to
/// `[0, 1]` plus Gaussian noise with standard deviation `noise` times that
/// range. All entries are in the train split.
pub fn param_dataset(n: usize, noise: f64, seed: u64) -> Result<BenchmarkDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<ArchGraph> = (0..n).map(|_| random_small_graph(&mut rng)).collect();
    let logp: Vec<f64> = graphs.iter().map(|g| (g.count_params() as f64).ln()).collect();
    let lo = logp.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let entries = graphs
        .into_iter()
        .zip(logp)
        .enumerate()
        .map(|(i, (graph, lp))| Entry {
            id: format!("syn{i}"),
            graph,
            accuracy: (lp - lo) / span + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 },
        })
        .collect();
    BenchmarkDataset::from_entries(format!("synthetic-{seed}"), entries)
}
