//! Built-in numerical checks: finite-difference gradients of every tape op
//! and of the full score pipeline, Monte-Carlo statistics of the DFT
//! resize, and soft-rank oracles.

use crate::arch::{ArchGraph, GraphBuilder, LayerSpec};
use crate::error::Result;
use crate::ranking::{average_ranks, oracle, soft_rank, SoftRankConfig};
use crate::rep::{self, SpectralWeights, Unitization, Variant};
use crate::scorer::{ScorerConfig, ScorerParams};
use crate::spectral::{dft_resize_1d, KernelShape};
use crate::tensor::{finite_diff_check, finite_diff_check_sampled, ConvAttrs, PoolAttrs, Tape, Tensor, Var};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
pub const DFT_TOLERANCE: f64 = 0.05;
pub const ORACLE_TOLERANCE: f64 = 1e-8;

const H: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    /// Worst observed error in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64, instances: usize) -> Self {
        CheckReport {
            name: name.into(),
            worst,
            tolerance,
            instances,
            passed: worst <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: worst {:.3e} (tol {:.0e}, {} instances)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.instances
        )
    }
}

/// Ops of the tape's closed set, in check order.
pub const OPS: [&str; 20] = [
    "conv2d",
    "conv2d_depthwise",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "global_avg_pool",
    "linear",
    "linear_no_bias",
    "add",
    "concat",
    "scale_by_scalar",
    "divide_by_scalar",
    "symlog",
    "sigmoid",
    "batch_norm_rep",
    "mean",
    "std",
    "matmul",
    "transpose_batch_channel",
    "materialize",
];

/// Random weighted reduction to a scalar, so every output position gets a
/// distinct upstream gradient.
fn reduce(t: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let c = t.constant(Tensor::randn(&shape, 2.0, rng));
    let z = t.add(&[y, c])?;
    let s = t.sigmoid(z)?;
    t.mean(s)
}

fn nonzero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.5..2.0);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

type OpCase = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let n = r(rng, 1, 2);
    let c = r(rng, 1, 3);
    let h = r(rng, 3, 6);
    let w = r(rng, 3, 6);
    let x4 = Tensor::randn(&[n, c, h, w], 1.0, rng);
    match op {
        "conv2d" | "conv2d_depthwise" => {
            let k = [1, 3][r(rng, 0, 1)];
            let attrs = ConvAttrs {
                stride: r(rng, 1, 2),
                padding: r(rng, 0, k / 2),
                groups: if op == "conv2d" { 1 } else { c },
            };
            let co = if op == "conv2d" { r(rng, 1, 3) } else { c };
            let wt = Tensor::randn(&[co, c / attrs.groups, k, k], 0.5, rng);
            (vec![x4, wt], Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], attrs)))
        }
        "relu" => (vec![x4], Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0]))),
        "maxpool2d" | "avgpool2d" => {
            let k = r(rng, 2, 3);
            let a = PoolAttrs {
                k,
                stride: r(rng, 1, 2),
                padding: r(rng, 0, k / 2),
            };
            if op == "maxpool2d" {
                (vec![x4], Box::new(move |t: &mut Tape, v: &[Var]| t.maxpool2d(v[0], a)))
            } else {
                (vec![x4], Box::new(move |t: &mut Tape, v: &[Var]| t.avgpool2d(v[0], a)))
            }
        }
        "global_avg_pool" => (vec![x4], Box::new(|t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]))),
        "linear" | "linear_no_bias" => {
            let (b, i, o) = (r(rng, 1, 4), r(rng, 1, 5), r(rng, 1, 5));
            let x = Tensor::randn(&[b, i], 1.0, rng);
            let wt = Tensor::randn(&[o, i], 1.0, rng);
            if op == "linear" {
                let bias = Tensor::randn(&[o], 1.0, rng);
                (vec![x, wt, bias], Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2]))))
            } else {
                (vec![x, wt], Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], None)))
            }
        }
        "add" => {
            let k = r(rng, 2, 3);
            let xs = (0..k).map(|_| Tensor::randn(&[n, c, h, w], 1.0, rng)).collect();
            (xs, Box::new(|t: &mut Tape, v: &[Var]| t.add(v)))
        }
        "concat" => {
            let c2 = r(rng, 1, 3);
            let y = Tensor::randn(&[n, c2, h, w], 1.0, rng);
            (vec![x4, y], Box::new(|t: &mut Tape, v: &[Var]| t.concat(v)))
        }
        "scale_by_scalar" => {
            let k = rng.gen_range(-3.0..3.0);
            (vec![x4], Box::new(move |t: &mut Tape, v: &[Var]| t.scale_by_scalar(v[0], k)))
        }
        "divide_by_scalar" => {
            let s = Tensor::scalar(nonzero(rng));
            (vec![x4, s], Box::new(|t: &mut Tape, v: &[Var]| t.divide_by_scalar(v[0], v[1])))
        }
        "symlog" => (vec![x4.scale(3.0)], Box::new(|t: &mut Tape, v: &[Var]| t.symlog(v[0]))),
        "sigmoid" => (vec![x4.scale(2.0)], Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0]))),
        "batch_norm_rep" => {
            let x = Tensor::randn(&[r(rng, 2, 4), c, h, w], 1.0, rng);
            (vec![x], Box::new(|t: &mut Tape, v: &[Var]| t.batch_norm_rep(v[0])))
        }
        "mean" => (vec![x4], Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        "std" => (vec![x4], Box::new(|t: &mut Tape, v: &[Var]| t.std(v[0]))),
        "matmul" => {
            let (m, k, p) = (r(rng, 1, 5), r(rng, 1, 5), r(rng, 1, 5));
            let a = Tensor::randn(&[m, k], 1.0, rng);
            let b = Tensor::randn(&[k, p], 1.0, rng);
            (vec![a, b], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])))
        }
        "transpose_batch_channel" => (vec![x4], Box::new(|t: &mut Tape, v: &[Var]| t.transpose_batch_channel(v[0]))),
        "materialize" => {
            let cf = r(rng, 2, 4);
            let k = r(rng, 1, 3);
            let fk = Tensor::randn(&[cf, cf, k, k], 1.0, rng);
            let target = KernelShape::new(r(rng, 1, 5), r(rng, 1, 5), r(rng, 1, 4), r(rng, 1, 4));
            (vec![fk], Box::new(move |t: &mut Tape, v: &[Var]| t.materialize(v[0], target)))
        }
        other => panic!("unknown op `{other}`"),
    }
}

/// Finite-difference check of one op over `instances` random cases.
pub fn check_op(op: &str, instances: usize, seed: u64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (inputs, f) = op_case(op, &mut rng);
        let reduce_seed = rng.gen::<u64>();
        let err = finite_diff_check(
            |t, v| {
                let y = f(t, v)?;
                reduce(t, y, &mut ChaCha8Rng::seed_from_u64(reduce_seed))
            },
            &inputs,
            H,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport::new(format!("grad {op}"), worst, OP_TOLERANCE, instances))
}

pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    OPS.par_iter().map(|op| check_op(op, instances, seed)).collect()
}

/// `conv3x3 -> relu -> conv3x3 -> relu -> conv1x1`.
pub fn toy_graph() -> ArchGraph {
    let mut b = GraphBuilder::new();
    let i = b.node("input", LayerSpec::Identity).expect("fresh id");
    let c1 = b.chain(i, "c1", LayerSpec::conv(3, 6, 3, 1)).expect("fresh id");
    let r1 = b.chain(c1, "r1", LayerSpec::Relu).expect("fresh id");
    let c2 = b.chain(r1, "c2", LayerSpec::conv(6, 6, 3, 1)).expect("fresh id");
    let r2 = b.chain(c2, "r2", LayerSpec::Relu).expect("fresh id");
    let c3 = b.chain(r2, "c3", LayerSpec::conv(6, 4, 1, 1)).expect("fresh id");
    b.build(i, c3).expect("valid toy graph")
}

/// Finite-difference check of the complete score with respect to every
/// scorer parameter. V-norm factors are measured once on the unperturbed
/// parameters and then held fixed, matching how they enter the gradient.
pub fn check_pipeline(variant: Variant, instances: usize, coords: usize, seed: u64) -> Result<CheckReport> {
    let g = toy_graph();
    let cfg = ScorerConfig {
        variant,
        ..ScorerConfig::tiny()
    };
    let results: Vec<Result<f64>> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let p = ScorerParams::init(cfg.clone(), s)?;
            let mut ca = rep::build(&g, variant)?;
            let mode = if variant == Variant::VNorm {
                let mut tape = Tape::new();
                let fk = tape.constant(p.fk.tensor().clone());
                ca.calibrate_vnorm(&p.input, &mut SpectralWeights::new(fk), &mut tape)?;
                Unitization::Stored
            } else {
                Unitization::Static
            };
            let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            finite_diff_check_sampled(|t, v| p.forward_constructed(t, v, &ca, mode), &params, H, coords, s)
        })
        .collect();
    let mut worst = 0.0f64;
    for r in results {
        worst = worst.max(r?);
    }
    Ok(CheckReport::new(format!("grad pipeline ({variant})"), worst, PIPELINE_TOLERANCE, instances))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DftStats {
    /// Largest `|mean|` over coefficients.
    pub max_abs_mean: f64,
    /// Largest `|variance / source variance - 1|` over coefficients.
    pub max_rel_var_err: f64,
}

/// Per-coefficient mean and variance of the resize of `trials` standard
/// normal sequences of length `n` to `k` coefficients.
pub fn dft_statistics(n: usize, k: usize, trials: usize, seed: u64) -> DftStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![Complex64::new(0.0, 0.0); k];
    let mut sq = vec![0.0; k];
    for _ in 0..trials {
        let x = Tensor::randn(&[n], 1.0, &mut rng);
        for (j, z) in dft_resize_1d(x.data(), k).into_iter().enumerate() {
            sum[j] += z;
            sq[j] += z.norm_sqr();
        }
    }
    let t = trials as f64;
    let mut out = DftStats {
        max_abs_mean: 0.0,
        max_rel_var_err: 0.0,
    };
    for j in 0..k {
        let mean = sum[j] / t;
        let var = sq[j] / t - mean.norm_sqr();
        out.max_abs_mean = out.max_abs_mean.max(mean.norm());
        out.max_rel_var_err = out.max_rel_var_err.max((var - 1.0).abs());
    }
    out
}

/// Pad (`8 -> 32`) and trim (`32 -> 8`) regimes; the mean error is
/// measured in units of the source standard deviation.
pub fn check_dft(trials: usize, seed: u64) -> Vec<CheckReport> {
    [(8, 32, "pad 8->32"), (32, 8, "trim 32->8")]
        .iter()
        .flat_map(|&(n, k, label)| {
            let s = dft_statistics(n, k, trials, seed);
            [
                CheckReport::new(format!("dft {label} mean"), s.max_abs_mean, DFT_TOLERANCE, trials),
                CheckReport::new(format!("dft {label} variance"), s.max_rel_var_err, DFT_TOLERANCE, trials),
            ]
        })
        .collect()
}

/// Soft ranks at a tiny regularization against hard ranks, on vectors of
/// distinct values.
pub fn check_hard_limit(instances: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SoftRankConfig::new(1e-6).expect("positive epsilon");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=64);
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen_range(0.0..0.5)).collect();
        v.shuffle(&mut rng);
        let soft = soft_rank(&v, cfg);
        let hard = average_ranks(&v);
        for (a, b) in soft.iter().zip(&hard) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckReport::new("soft rank hard limit", worst, 0.0, instances)
}

/// Soft ranks at `epsilon = 3` against the brute-force projection, for every
/// ordering of random vectors of length 1 to 5.
pub fn check_projection_oracle(vectors_per_length: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SoftRankConfig::new(3.0).expect("positive epsilon");
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in 1..=5 {
        for _ in 0..vectors_per_length {
            let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            for perm in permutations(n) {
                let v: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
                let fast = soft_rank(&v, cfg);
                let slow = oracle::brute_force_soft_rank(&v, 3.0);
                for (a, b) in fast.iter().zip(&slow) {
                    worst = worst.max((a - b).abs());
                }
                count += 1;
            }
        }
    }
    CheckReport::new("soft rank projection oracle", worst, ORACLE_TOLERANCE, count)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every check at its full size.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = check_all_ops(100, seed)?;
    out.push(check_pipeline(Variant::VNorm, 100, 4, seed)?);
    out.push(check_pipeline(Variant::Static, 100, 4, seed)?);
    out.extend(check_dft(10_000, seed));
    out.push(check_hard_limit(1000, seed));
    out.push(check_projection_oracle(4, seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
    }

    #[test]
    fn every_op_passes_a_few_instances() {
        for r in check_all_ops(5, 1).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn pipeline_passes_a_few_instances() {
        for v in [Variant::VNorm, Variant::Static] {
            let r = check_pipeline(v, 3, 3, 2).unwrap();
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn dft_statistics_small_run() {
        let s = dft_statistics(4, 8, 4000, 0);
        assert!(s.max_abs_mean < 0.1 && s.max_rel_var_err < 0.1, "{s:?}");
    }

    #[test]
    fn broken_gradient_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        // The constant copy hides part of the dependence on `x`.
        let err = finite_diff_check(
            |t, v| {
                let y = t.scale_by_scalar(v[0], 2.0)?;
                let copy = t.value(y).clone();
                let c = t.constant(copy);
                let z = t.add(&[c, v[0]])?;
                t.mean(z)
            },
            &[x],
            H,
        )
        .unwrap();
        assert!(err > OP_TOLERANCE);
    }
}
