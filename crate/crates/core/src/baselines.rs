//! Handcrafted zero-cost proxies used for comparison.

use crate::arch::ArchGraph;
use crate::error::{Error, Result};
use crate::rep::{self, KaimingWeights, Unitization, Variant};
use crate::tensor::{Tape, Tensor};
use nalgebra::DMatrix;

/// Parameter count as a score.
pub fn params_proxy(g: &ArchGraph) -> f64 {
    g.count_params() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NaswotScore {
    /// `log|det K|`, or negative infinity when `K` is singular.
    pub value: f64,
    pub singular: bool,
}

/// Binary ReLU activation codes, one row per input in the batch.
pub fn activation_codes(g: &ArchGraph, batch: &Tensor, seed: u64) -> Result<Vec<Vec<bool>>> {
    let b = batch.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::Usage(format!("NASWOT needs at least 2 inputs, got {b}")));
    }
    let ca = rep::build(g, Variant::Static)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let run = ca.run(&mut tape, x, &mut KaimingWeights::new(seed), Unitization::None)?;
    let mut codes = vec![Vec::new(); b];
    for node in ca.relu_nodes() {
        let v = tape.value(run.nodes[node].expect("every node runs"));
        let per = v.len() / b;
        for (i, code) in codes.iter_mut().enumerate() {
            code.extend(v.data()[i * per..(i + 1) * per].iter().map(|&a| a > 0.0));
        }
    }
    Ok(codes)
}

/// `K[i][j] = N_A - hamming(c_i, c_j)`.
pub fn hamming_kernel(codes: &[Vec<bool>]) -> DMatrix<f64> {
    let n = codes.len();
    let units = codes.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, n, |i, j| {
        let ham = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count();
        (units - ham) as f64
    })
}

/// NASWOT score of `g` with seeded Kaiming weights.
pub fn naswot_proxy(g: &ArchGraph, batch: &Tensor, seed: u64) -> Result<NaswotScore> {
    let codes = activation_codes(g, batch, seed)?;
    Ok(log_abs_det(&hamming_kernel(&codes), &codes))
}

fn log_abs_det(k: &DMatrix<f64>, codes: &[Vec<bool>]) -> NaswotScore {
    let singular = NaswotScore {
        value: f64::NEG_INFINITY,
        singular: true,
    };
    let duplicate = (0..codes.len()).any(|i| (i + 1..codes.len()).any(|j| codes[i] == codes[j]));
    if duplicate || codes.first().map_or(true, Vec::is_empty) {
        return singular;
    }
    let lu = k.clone().lu();
    let u = lu.u();
    let mut total = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if d == 0.0 {
            return singular;
        }
        total += d.ln();
    }
    NaswotScore {
        value: total,
        singular: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{GraphBuilder, LayerSpec};
    use crate::rep::ConvWeights;
    use crate::spectral::KernelShape;
    use crate::tensor::{ops, ConvAttrs};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu_only() -> ArchGraph {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let r = b.chain(i, "r", LayerSpec::Relu).unwrap();
        b.build(i, r).unwrap()
    }

    fn two_layer() -> ArchGraph {
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c1 = b.chain(i, "c1", LayerSpec::conv(3, 4, 3, 1)).unwrap();
        let r1 = b.chain(c1, "r1", LayerSpec::Relu).unwrap();
        let c2 = b.chain(r1, "c2", LayerSpec::conv(4, 4, 3, 1)).unwrap();
        let r2 = b.chain(c2, "r2", LayerSpec::Relu).unwrap();
        b.build(i, r2).unwrap()
    }

    #[test]
    fn params_proxy_examples() {
        assert_eq!(params_proxy(&relu_only()), 0.0);
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c = b.chain(i, "c", LayerSpec::conv(3, 8, 3, 1)).unwrap();
        let small = b.build(i, c).unwrap();
        let mut b = GraphBuilder::new();
        let i = b.node("in", LayerSpec::Identity).unwrap();
        let c = b.chain(i, "c", LayerSpec::conv(3, 8, 3, 1)).unwrap();
        let d = b.chain(c, "d", LayerSpec::conv(8, 8, 3, 1)).unwrap();
        let big = b.build(i, d).unwrap();
        assert_eq!(params_proxy(&big) - params_proxy(&small), 576.0);
    }

    #[test]
    fn identical_inputs_are_singular() {
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let batch = Tensor::new(vec![2, 3, 4, 4], [x.data(), x.data()].concat()).unwrap();
        let s = naswot_proxy(&two_layer(), &batch, 1).unwrap();
        assert!(s.singular && s.value == f64::NEG_INFINITY);
    }

    #[test]
    fn complementary_codes_give_diagonal_kernel() {
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let neg: Vec<f64> = x.data().iter().map(|v| -v).collect();
        let batch = Tensor::new(vec![2, 3, 4, 4], [x.data(), &neg[..]].concat()).unwrap();
        let s = naswot_proxy(&relu_only(), &batch, 0).unwrap();
        assert!(!s.singular);
        assert!((s.value - 2.0 * (48f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_explicit_three_by_three_determinant() {
        let batch = Tensor::randn(&[3, 3, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let g = two_layer();
        let seed = 7;
        // Independent forward with the raw ops and the same seeded weights.
        let ids: Vec<usize> = ["c1", "c2"].iter().map(|id| g.nodes().iter().position(|n| n.id == *id).unwrap()).collect();
        let mut tape = Tape::new();
        let mut kw = KaimingWeights::new(seed);
        let w1 = kw.weight(&mut tape, ids[0], KernelShape::new(3, 4, 3, 3)).unwrap();
        let w2 = kw.weight(&mut tape, ids[1], KernelShape::new(4, 4, 3, 3)).unwrap();
        let attrs = ConvAttrs { padding: 1, ..Default::default() };
        let h1 = ops::conv2d(&batch, tape.value(w1), attrs).unwrap().map(|v| v.max(0.0));
        let h2 = ops::conv2d(&h1, tape.value(w2), attrs).unwrap().map(|v| v.max(0.0));
        let per = 4 * 25;
        let codes: Vec<Vec<bool>> = (0..3)
            .map(|i| {
                let mut c: Vec<bool> = h1.data()[i * per..(i + 1) * per].iter().map(|&v| v > 0.0).collect();
                c.extend(h2.data()[i * per..(i + 1) * per].iter().map(|&v| v > 0.0));
                c
            })
            .collect();
        let na = 2 * per;
        let k = |i: usize, j: usize| (na - codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count()) as f64;
        let det = k(0, 0) * (k(1, 1) * k(2, 2) - k(1, 2) * k(2, 1)) - k(0, 1) * (k(1, 0) * k(2, 2) - k(1, 2) * k(2, 0))
            + k(0, 2) * (k(1, 0) * k(2, 1) - k(1, 1) * k(2, 0));
        let s = naswot_proxy(&g, &batch, seed).unwrap();
        assert!((s.value - det.abs().ln()).abs() < 1e-9, "{} vs {}", s.value, det.abs().ln());
    }

    #[test]
    fn invariant_to_positive_input_scaling() {
        let batch = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = naswot_proxy(&two_layer(), &batch, 5).unwrap();
        let b = naswot_proxy(&two_layer(), &batch.scale(37.5), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn needs_two_inputs() {
        let batch = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(naswot_proxy(&two_layer(), &batch, 0), Err(Error::Usage(_))));
    }
}
