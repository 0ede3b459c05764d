use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradSet, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                return Err(Error::Invalid(format!(
                    "adam needs 0 <= beta1, beta2 < 1 and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// A named optimizer-state tensor, laid out like the parameter it tracks.
pub type StateTensor = (String, Vec<usize>, Vec<f64>);

/// Optimizer with per-tensor moment buffers aligned to [`ParamSet::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Number of updates applied per tensor (frozen tensors do not advance).
    steps: Vec<u64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            if on {
                sizes.iter().map(|&n| vec![0.0; n]).collect()
            } else {
                Vec::new()
            }
        };
        let adam = matches!(kind, OptimizerKind::Adam { .. });
        Optimizer {
            kind,
            steps: vec![0; sizes.len()],
            first: zeros(adam),
            second: zeros(adam),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// One update of every tensor whose `trainable` flag is set.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64, trainable: &[bool]) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        if grad_tensors.len() != param_tensors.len()
            || trainable.len() != param_tensors.len()
            || self.steps.len() != param_tensors.len()
        {
            return Err(Error::shape("Optimizer::step", "parameter, gradient and state layouts differ"));
        }
        for (t, (p, g)) in param_tensors.iter_mut().zip(&grad_tensors).enumerate() {
            if !trainable[t] {
                continue;
            }
            if p.len() != g.data.len() {
                return Err(Error::shape("Optimizer::step", format!("tensor {}", g.name)));
            }
            self.steps[t] += 1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &gx) in p.iter_mut().zip(g.data) {
                        *x -= lr * gx;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = self.steps[t] as i32;
                    let c1 = 1.0 - beta1.powi(n);
                    let c2 = 1.0 - beta2.powi(n);
                    let (m, v) = (&mut self.first[t], &mut self.second[t]);
                    for k in 0..p.len() {
                        let gx = g.data[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gx;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gx * gx;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`adam.m/<param>`, `adam.v/<param>`)
    /// plus a `steps` vector; empty apart from `steps` for SGD.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<StateTensor> {
        let layout = params.tensors();
        let mut out = vec![(
            "steps".to_string(),
            vec![self.steps.len()],
            self.steps.iter().map(|&s| s as f64).collect(),
        )];
        for (prefix, bufs) in [("adam.m/", &self.first), ("adam.v/", &self.second)] {
            for (t, buf) in layout.iter().zip(bufs) {
                out.push((format!("{prefix}{}", t.name), t.dims.clone(), buf.clone()));
            }
        }
        out
    }

    /// Inverse of [`Optimizer::state_tensors`].
    pub fn from_state(kind: OptimizerKind, params: &ParamSet, state: &[StateTensor]) -> Result<Self> {
        let mut opt = Optimizer::new(kind, params);
        let expected = opt.state_tensors(params);
        if expected.len() != state.len() {
            return Err(Error::Invalid(format!(
                "optimizer state has {} tensors, expected {}",
                state.len(),
                expected.len()
            )));
        }
        for ((name, dims, _), (sname, sdims, _)) in expected.iter().zip(state) {
            if name != sname || dims != sdims {
                return Err(Error::Invalid(format!(
                    "optimizer tensor {sname} {sdims:?} where {name} {dims:?} was expected"
                )));
            }
        }
        opt.steps = state[0].2.iter().map(|&s| s as u64).collect();
        let n = opt.steps.len();
        for (t, (_, _, data)) in state[1..].iter().enumerate() {
            if t < n {
                opt.first[t].clone_from(data);
            } else {
                opt.second[t - n].clone_from(data);
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Pooling};
    use crate::numerics::Rng;

    fn params() -> ParamSet {
        let arch = Architecture {
            pooling: Pooling::Mvam,
            views: 2,
            view_dim: 3,
            image_input_dim: 4,
            text_input_dim: 4,
            encoder_dim: None,
            project: true,
        };
        ParamSet::init(&arch, &mut Rng::new(1)).unwrap()
    }

    fn filled(p: &ParamSet, v: f64) -> GradSet {
        let mut g = p.clone();
        for t in g.tensors_mut() {
            t.fill(v);
        }
        g
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let p0 = params();
        let mut p = p0.clone();
        let n = p.tensors().len();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &p);
        opt.step(&mut p, &filled(&p0, 0.5), 0.1, &vec![true; n]).unwrap();
        for (a, b) in p.tensors().iter().zip(p0.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, y - 0.1 * 0.5);
            }
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let p0 = params();
        let mut p = p0.clone();
        let n = p.tensors().len();
        let mut opt = Optimizer::new(OptimizerKind::default(), &p);
        opt.step(&mut p, &filled(&p0, 3.0), 0.01, &vec![true; n]).unwrap();
        for (a, b) in p.tensors().iter().zip(p0.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!(((y - x) - 0.01).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        // Scalar oracle: g1 = 2, g2 = -1, lr = 0.1, default betas.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut x = 1.0f64;
        let m1 = (1.0 - b1) * 2.0;
        let v1 = (1.0 - b2) * 4.0;
        x -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * -1.0;
        let v2 = b2 * v1 + (1.0 - b2) * 1.0;
        x -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut p = params();
        let n = p.tensors().len();
        p.tensors_mut()[0][0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::default(), &p);
        for g in [2.0, -1.0] {
            let grads = filled(&p, g);
            opt.step(&mut p, &grads, lr, &vec![true; n]).unwrap();
        }
        assert_eq!(p.tensors()[0].data[0], x);
    }

    #[test]
    fn frozen_tensors_and_zero_lr_leave_params_untouched() {
        let p0 = params();
        let mut p = p0.clone();
        let n = p.tensors().len();
        let mut opt = Optimizer::new(OptimizerKind::default(), &p);
        opt.step(&mut p, &filled(&p0, 1.0), 0.0, &vec![true; n]).unwrap();
        assert_eq!(p, p0);
        let mut mask = vec![true; n];
        mask[0] = false;
        opt.step(&mut p, &filled(&p0, 1.0), 0.1, &mask).unwrap();
        assert_eq!(p.tensors()[0].data, p0.tensors()[0].data);
        assert_eq!(opt.steps()[0], 1);
        assert_eq!(opt.steps()[1], 2);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = params();
        let n = p.tensors().len();
        let mut g = filled(&p, 0.0);
        g.tensors_mut()[1][0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &p);
        assert!(matches!(opt.step(&mut p, &g, 0.1, &vec![true; n]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn state_round_trips() {
        let mut p = params();
        let n = p.tensors().len();
        let kind = OptimizerKind::default();
        let mut opt = Optimizer::new(kind, &p);
        let g = filled(&p, 0.3);
        opt.step(&mut p, &g, 0.1, &vec![true; n]).unwrap();
        let state = opt.state_tensors(&p);
        assert_eq!(state.len(), 1 + 2 * n);
        let back = Optimizer::from_state(kind, &p, &state).unwrap();
        assert_eq!(back, opt);
        assert!(Optimizer::from_state(kind, &p, &state[1..]).is_err());
        let sgd = Optimizer::new(OptimizerKind::Sgd, &p);
        assert_eq!(Optimizer::from_state(OptimizerKind::Sgd, &p, &sgd.state_tensors(&p)).unwrap(), sgd);
    }

    #[test]
    fn bad_adam_settings_rejected() {
        assert!(OptimizerKind::Adam { beta1: 1.0, beta2: 0.9, eps: 1e-8 }.validate().is_err());
        assert!(OptimizerKind::Adam { beta1: 0.9, beta2: 0.9, eps: 0.0 }.validate().is_err());
        assert!(OptimizerKind::default().validate().is_ok());
    }
}
