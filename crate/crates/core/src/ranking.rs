//! Soft ranking, the differentiable Spearman objective and exact rank
//! correlations.
//!
//! `soft_rank` is the Euclidean projection of `v / epsilon` onto the
//! permutahedron of `(1, ..., n)`. Sorting `z = v / epsilon` in descending
//! order reduces it to a decreasing isotonic regression of `s - w`, where
//! `w = (n, ..., 1)`, solved by pool-adjacent-violators.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftRankConfig {
    pub epsilon: f64,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        SoftRankConfig { epsilon: 3.0 }
    }
}

impl SoftRankConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon.is_finite() {
            Ok(SoftRankConfig { epsilon })
        } else {
            Err(Error::Usage(format!("epsilon must be positive, got {epsilon}")))
        }
    }
}

/// Result of a soft-rank evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SoftRank {
    pub ranks: Vec<f64>,
    order: Vec<usize>,
    blocks: Vec<(usize, usize)>,
    epsilon: f64,
}

impl SoftRank {
    /// Vector-Jacobian product with respect to the input vector.
    pub fn vjp(&self, g: &[f64]) -> Vec<f64> {
        let sorted: Vec<f64> = self.order.iter().map(|&i| g[i]).collect();
        let mut out: Vec<f64> = g.to_vec();
        for &(start, end) in &self.blocks {
            let mean = sorted[start..end].iter().sum::<f64>() / (end - start) as f64;
            for &i in &self.order[start..end] {
                out[i] -= mean;
            }
        }
        out.iter().map(|x| x / self.epsilon).collect()
    }
}

/// Decreasing isotonic regression; returns the fitted values and the
/// `[start, end)` blocks of pooled indices.
fn pav_decreasing(y: &[f64]) -> (Vec<f64>, Vec<(usize, usize)>) {
    // (sum, count, start)
    let mut stack: Vec<(f64, usize, usize)> = Vec::with_capacity(y.len());
    for (i, &yi) in y.iter().enumerate() {
        let mut cur = (yi, 1usize, i);
        while let Some(&(s, c, st)) = stack.last() {
            if s / c as f64 <= cur.0 / cur.1 as f64 {
                stack.pop();
                cur = (s + cur.0, c + cur.1, st);
            } else {
                break;
            }
        }
        stack.push(cur);
    }
    let mut fit = vec![0.0; y.len()];
    let mut blocks = Vec::with_capacity(stack.len());
    for (s, c, st) in stack {
        let m = s / c as f64;
        fit[st..st + c].iter_mut().for_each(|f| *f = m);
        blocks.push((st, st + c));
    }
    (fit, blocks)
}

/// Soft ranks of `v` (1 = smallest), with the state needed for [`SoftRank::vjp`].
pub fn soft_rank_with_state(v: &[f64], cfg: SoftRankConfig) -> SoftRank {
    let n = v.len();
    let z: Vec<f64> = v.iter().map(|x| x / cfg.epsilon).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let y: Vec<f64> = order.iter().enumerate().map(|(k, &i)| z[i] - (n - k) as f64).collect();
    let (fit, blocks) = pav_decreasing(&y);
    let mut ranks = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        ranks[i] = z[i] - fit[k];
    }
    SoftRank {
        ranks,
        order,
        blocks,
        epsilon: cfg.epsilon,
    }
}

pub fn soft_rank(v: &[f64], cfg: SoftRankConfig) -> Vec<f64> {
    soft_rank_with_state(v, cfg).ranks
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut e = k + 1;
        while e < n && a[idx[e]] == a[idx[k]] {
            e += 1;
        }
        let r = (k + 1 + e) as f64 / 2.0;
        for &i in &idx[k..e] {
            ranks[i] = r;
        }
        k = e;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 values, got {}", a.len())));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Kendall's tau-b in `O(n log n)`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));

    let pairs = |t: u64| t * t.saturating_sub(1) / 2;
    let (mut ties_a, mut ties_ab) = (0u64, 0u64);
    let (mut run_a, mut run_ab) = (1u64, 1u64);
    for k in 1..n {
        let (p, q) = (idx[k - 1], idx[k]);
        if a[p] == a[q] {
            run_a += 1;
            if b[p] == b[q] {
                run_ab += 1;
            } else {
                ties_ab += pairs(run_ab);
                run_ab = 1;
            }
        } else {
            ties_a += pairs(run_a);
            ties_ab += pairs(run_ab);
            run_a = 1;
            run_ab = 1;
        }
    }
    ties_a += pairs(run_a);
    ties_ab += pairs(run_ab);

    let mut seq: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = seq.clone();
    let swaps = merge_count(&mut seq, &mut buf);

    let mut ties_b = 0u64;
    let mut run = 1u64;
    for k in 1..n {
        if seq[k] == seq[k - 1] {
            run += 1;
        } else {
            ties_b += pairs(run);
            run = 1;
        }
    }
    ties_b += pairs(run);

    let n0 = pairs(n as u64);
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("all values tied".into()));
    }
    let num = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * swaps as f64;
    Ok((num / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort counting strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// `1 - pearson(soft_rank(scores), average_ranks(accuracies))` and its
/// gradient with respect to `scores`.
pub fn spearman_soft_loss(scores: &[f64], accuracies: &[f64], cfg: SoftRankConfig) -> Result<(f64, Vec<f64>)> {
    check_pair(scores, accuracies)?;
    if accuracies.iter().all(|&a| a == accuracies[0]) {
        return Err(Error::DegenerateBatch);
    }
    let n = scores.len() as f64;
    let sr = soft_rank_with_state(scores, cfg);
    let t = average_ranks(accuracies);
    let center = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / n;
        x.iter().map(|v| v - m).collect::<Vec<f64>>()
    };
    let (rc, tc) = (center(&sr.ranks), center(&t));
    let nr = rc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = tc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nr == 0.0 {
        return Err(Error::UndefinedCorrelation("soft ranks are constant (all scores equal)".into()));
    }
    let rho = rc.iter().zip(&tc).map(|(a, b)| a * b).sum::<f64>() / (nr * nt);
    let drho: Vec<f64> = rc
        .iter()
        .zip(&tc)
        .map(|(r, t)| t / (nr * nt) - rho * r / (nr * nr))
        .collect();
    let neg: Vec<f64> = drho.iter().map(|d| -d).collect();
    Ok((1.0 - rho, sr.vjp(&neg)))
}

/// Exhaustive reference projection, exponential in `n`.
pub mod oracle {
    /// Project `v / epsilon` onto the permutahedron of `(1..n)` by trying the
    /// affine hull of every face (ordered set partition) and keeping the
    /// closest feasible candidate.
    pub fn brute_force_soft_rank(v: &[f64], epsilon: f64) -> Vec<f64> {
        let n = v.len();
        let z: Vec<f64> = v.iter().map(|x| x / epsilon).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut assign = vec![0usize; n];
        ordered_partitions(n, 0, 0, &mut assign, &mut |assign, blocks| {
            let x = face_projection(&z, assign, blocks);
            if in_permutahedron(&x, 1e-9) {
                let d: f64 = x.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
                if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                    best = Some((d, x));
                }
            }
        });
        best.expect("some face is feasible").1
    }

    /// Enumerate set partitions of `0..n` as restricted growth strings,
    /// calling `f(assign, blocks)`. Block orderings are tried by the caller.
    fn ordered_partitions(n: usize, i: usize, used: usize, assign: &mut Vec<usize>, f: &mut dyn FnMut(&[usize], usize)) {
        if i == n {
            f(assign, used);
            return;
        }
        for b in 0..=used {
            assign[i] = b;
            ordered_partitions(n, i + 1, used.max(b + 1), assign, f);
        }
    }

    fn face_projection(z: &[f64], assign: &[usize], blocks: usize) -> Vec<f64> {
        // The first block in `order` takes the largest ranks.
        let mut perm: Vec<usize> = (0..blocks).collect();
        let mut best_x = Vec::new();
        let mut best_d = f64::INFINITY;
        permute(&mut perm, 0, &mut |order| {
            let n = z.len();
            let mut x = vec![0.0; n];
            let mut top = n;
            for &label in order.iter() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == label).collect();
                let k = members.len();
                let wsum: f64 = (top + 1 - k..=top).map(|r| r as f64).sum();
                top -= k;
                let zmean = members.iter().map(|&i| z[i]).sum::<f64>() / k as f64;
                for &i in &members {
                    x[i] = z[i] - zmean + wsum / k as f64;
                }
            }
            if in_permutahedron(&x, 1e-9) {
                let d: f64 = x.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best_x = x;
                }
            }
        });
        if best_x.is_empty() {
            vec![f64::NAN; z.len()]
        } else {
            best_x
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    /// Majorization test against `(n, ..., 1)`.
    pub fn in_permutahedron(x: &[f64], tol: f64) -> bool {
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let n = x.len();
        let mut s = x.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        let (mut acc, mut cap) = (0.0, 0.0);
        for (k, v) in s.iter().enumerate() {
            acc += v;
            cap += (n - k) as f64;
            if acc > cap + tol {
                return false;
            }
        }
        (acc - cap).abs() <= tol * n as f64
    }

    /// Kendall's tau-b by enumerating all pairs.
    pub fn kendall_pairs(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let (mut s, mut ta, mut tb, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let da = (a[i] - a[j]).signum() * (a[i] != a[j]) as u8 as f64;
                let db = (b[i] - b[j]).signum() * (b[i] != b[j]) as u8 as f64;
                s += da * db;
                total += 1.0;
                ta += (da == 0.0) as u8 as f64;
                tb += (db == 0.0) as u8 as f64;
            }
        }
        s / ((total - ta) * (total - tb)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eps(e: f64) -> SoftRankConfig {
        SoftRankConfig::new(e).unwrap()
    }

    #[test]
    fn hard_rank_limit() {
        let r = soft_rank(&[3.0, 1.0, 2.0], eps(1e-6));
        assert_eq!(r, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_vector_maps_to_centroid() {
        for e in [1e-3, 1.0, 3.0, 100.0] {
            let r = soft_rank(&[0.7; 5], eps(e));
            assert!(r.iter().all(|&x| (x - 3.0).abs() < 1e-12), "{r:?}");
        }
    }

    #[test]
    fn matches_face_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let fast = soft_rank(&v, eps(3.0));
            let slow = oracle::brute_force_soft_rank(&v, 3.0);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-8, "{v:?}: {fast:?} vs {slow:?}");
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sr = soft_rank_with_state(&v, eps(3.0));
        let analytic = sr.vjp(&g);
        let h = 1e-6;
        for i in 0..8 {
            let mut up = v.clone();
            up[i] += h;
            let mut dn = v.clone();
            dn[i] -= h;
            let f = |x: &[f64]| soft_rank(x, eps(3.0)).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            let num = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_limits() {
        let acc = [0.1, 0.5, 0.3, 0.9];
        let (aligned, _) = spearman_soft_loss(&[1.0, 5.0, 3.0, 9.0], &acc, eps(1e-6)).unwrap();
        let (anti, _) = spearman_soft_loss(&[-1.0, -5.0, -3.0, -9.0], &acc, eps(1e-6)).unwrap();
        assert!(aligned.abs() < 1e-12);
        assert!((anti - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let (_, g) = spearman_soft_loss(&s, &a, eps(3.0)).unwrap();
            let h = 1e-5;
            for i in 0..8 {
                let mut up = s.clone();
                up[i] += h;
                let mut dn = s.clone();
                dn[i] -= h;
                let num = (spearman_soft_loss(&up, &a, eps(3.0)).unwrap().0
                    - spearman_soft_loss(&dn, &a, eps(3.0)).unwrap().0)
                    / (2.0 * h);
                assert!((num - g[i]).abs() / g[i].abs().max(1.0) <= 1e-4);
            }
        }
    }

    #[test]
    fn degenerate_batch() {
        let err = spearman_soft_loss(&[1.0, 2.0], &[0.5, 0.5], eps(3.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0);
        // Average ranks (1.5, 1.5, 3) against (1, 2, 3).
        let ra = [1.5, 1.5, 3.0];
        let rb = [1.0, 2.0, 3.0];
        let (ma, mb) = (2.0, 2.0);
        let num: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - ma) * (b - mb)).sum();
        let da: f64 = ra.iter().map(|a| (a - ma) * (a - ma)).sum();
        let db: f64 = rb.iter().map(|b| (b - mb) * (b - mb)).sum();
        let expect = num / (da * db).sqrt();
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn kendall_examples() {
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&[4.0, 1.0, 2.0], &[4.0, 1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn kendall_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..300 {
            let n = if trial < 100 { 6 } else { rng.gen_range(2..40) };
            // Small integer ranges force ties.
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let slow = oracle::kendall_pairs(&a, &b);
            match kendall_tau(&a, &b) {
                Ok(fast) => assert!((fast - slow).abs() < 1e-12, "{a:?} {b:?}"),
                Err(_) => assert!(!slow.is_finite()),
            }
        }
    }

    proptest! {
        #[test]
        fn soft_rank_in_permutahedron(v in proptest::collection::vec(-50.0f64..50.0, 1..40), e in 0.01f64..10.0) {
            let r = soft_rank(&v, eps(e));
            prop_assert!(oracle::in_permutahedron(&r, 1e-9));
        }

        #[test]
        fn soft_rank_monotone(v in proptest::collection::vec(-50.0f64..50.0, 2..40), e in 0.01f64..10.0) {
            let r = soft_rank(&v, eps(e));
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(r[i] >= r[j] - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn correlations_invariant_under_increasing_maps(
            a in proptest::collection::vec(-10.0f64..10.0, 3..30),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-5.0..5.0)).collect();
            let fa: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let fb: Vec<f64> = b.iter().map(|x| (x / 4.0).exp()).collect();
            if let (Ok(s1), Ok(s2)) = (spearman(&a, &b), spearman(&fa, &fb)) {
                prop_assert!((s1 - s2).abs() < 1e-12);
            }
            if let (Ok(k1), Ok(k2)) = (kendall_tau(&a, &b), kendall_tau(&fa, &fb)) {
                prop_assert!((k1 - k2).abs() < 1e-12);
            }
        }
    }
}
