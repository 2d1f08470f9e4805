use super::{Tape, Tensor, Var};
use crate::error::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maximum over all coordinates of `|analytic - central| / max(1, |analytic|)`.
///
/// `f` rebuilds the computation on a fresh tape from parameter leaves and
/// returns a scalar.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_sampled(f, params, h, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probes at most `max_coords` coordinates
/// per parameter, chosen with `seed`.
pub fn finite_diff_check_sampled<F>(f: F, params: &[Tensor], h: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = probe[pi].data()[c];
            probe[pi].data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let y = t.linear(v[1], v[0], None)?;
                t.mean(y)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn symlog_chain() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.3, 0.7, 5.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let a = t.symlog(v[0])?;
                let b = t.scale_by_scalar(a, 3.0)?;
                let c = t.symlog(b)?;
                t.mean(c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn relu_away_from_zero() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.7, 3.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let a = t.relu(v[0])?;
                t.mean(a)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
