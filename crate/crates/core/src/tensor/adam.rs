use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", format!("param {} {:?} vs grad {:?}", i, p.shape(), g.shape())));
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[3], 0.5);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            st.update(&mut [&mut p], &[Tensor::zeros(&[3])], &names(1)).unwrap();
        }
        assert_eq!(p, Tensor::full(&[3], 0.5));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = Tensor::scalar(1.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg, [&p]);
        st.update(&mut [&mut p], &[Tensor::scalar(1.0)], &names(1)).unwrap();
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::scalar(0.3);
        let mut b = Tensor::scalar(0.3);
        let mut st = AdamState::new(AdamConfig::default(), [&a, &b]);
        for k in 0..20 {
            let g = Tensor::scalar((k as f64).sin());
            st.update(&mut [&mut a, &mut b], &[g.clone(), g], &names(2)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        let err = st.update(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &["fk".into()]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "fk"));
        assert_eq!(st.step, 0);
    }
}
