use super::Parameters;
use crate::error::{Error, Result};

/// Mini-batch gradient descent with optional heavy-ball momentum and
/// global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Clip the global gradient norm to this value; `0` disables clipping.
    pub clip_norm: f64,
    velocity: Option<Vec<Vec<f32>>>,
    updates: usize,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(clip_norm >= 0.0) {
            return Err(Error::Param(format!("clip_norm must be >= 0, got {clip_norm}")));
        }
        Ok(Self {
            lr,
            momentum,
            clip_norm,
            velocity: None,
            updates: 0,
        })
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    ///
    /// Fails with [`Error::NonFinite`] when the gradient norm or the updated
    /// parameters are not finite.
    pub fn step(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>) -> Result<f64> {
        if params.config() != grads.config() {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.updates,
                detail: format!("gradient norm = {norm}"),
            });
        }
        let factor = if self.clip_norm > 0.0 && norm > self.clip_norm {
            (self.clip_norm / norm) as f32
        } else {
            1.0
        };
        let lr = self.lr as f32;
        if self.momentum == 0.0 {
            for (p, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * (gv * factor);
                }
            }
            return self.finish(params, norm);
        }
        let mu = self.momentum as f32;
        let vel = self.velocity.get_or_insert_with(|| {
            grads.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
        });
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(vel) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + gv * factor;
                *pv -= lr * *vv;
            }
        }
        self.finish(params, norm)
    }

    fn finish(&mut self, params: &Parameters<f32>, norm: f64) -> Result<f64> {
        self.updates += 1;
        if !params.is_finite() {
            return Err(Error::NonFinite {
                step: self.updates - 1,
                detail: "parameters after update".into(),
            });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            max_seq_len: 3,
        }
    }

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut p = init_parameters(cfg(), 0).unwrap();
        let before = p.clone();
        let mut g = Parameters::zeros(cfg()).unwrap();
        g.tensors_mut()[0].data_mut()[0] = 2.0;
        let mut opt = Sgd::new(0.5, 0.0, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.tensors()[0].data()[0], before.tensors()[0].data()[0] - 1.0);
        assert_eq!(p.tensors()[1], before.tensors()[1]);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut p = Parameters::zeros(cfg()).unwrap();
        let mut g = Parameters::zeros(cfg()).unwrap();
        g.tensors_mut()[0].data_mut()[0] = 30.0;
        g.tensors_mut()[0].data_mut()[1] = 40.0;
        let mut opt = Sgd::new(1.0, 0.0, 5.0).unwrap();
        let norm = opt.step(&mut p, &g).unwrap();
        assert_eq!(norm, 50.0);
        assert!((p.tensors()[0].data()[0] + 3.0).abs() < 1e-6);
        assert!((p.tensors()[0].data()[1] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Parameters::zeros(cfg()).unwrap();
        let mut g = Parameters::zeros(cfg()).unwrap();
        g.tensors_mut()[0].data_mut()[0] = 1.0;
        let mut opt = Sgd::new(1.0, 0.5, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.tensors()[0].data()[0], -2.5);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.0, -1.0).is_err());
    }

    #[test]
    fn non_finite_updates_are_reported() {
        let mut p = Parameters::zeros(cfg()).unwrap();
        let mut g = Parameters::zeros(cfg()).unwrap();
        g.tensors_mut()[0].data_mut()[0] = f32::NAN;
        let mut opt = Sgd::new(1.0, 0.0, 0.0).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite { step: 0, .. })));

        g.tensors_mut()[0].data_mut()[0] = 1.0;
        let mut opt = Sgd::new(1e30, 0.0, 0.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        g.tensors_mut()[0].data_mut()[0] = f32::MAX;
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite { step: 2, .. })));
    }
}
