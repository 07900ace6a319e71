//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && self.betas.iter().all(|b| (0.0..1.0).contains(b));
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: ParamGroup>(config: OptimizerConfig, params: &P) -> Self {
        let mut zeros = Vec::new();
        params.visit(&mut |t| zeros.push(Tensor::zeros(t.shape())));
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update. Nothing changes when any gradient is non-finite.
    pub fn step<P: ParamGroup>(&mut self, params: &mut P, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (gr, m)) in grads.iter().zip(&self.first_moment).enumerate() {
            if gr.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "gradient {i} has shape {:?}, expected {:?}",
                    gr.shape(),
                    m.shape()
                )));
            }
            if !gr.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in parameter tensor {i}")));
            }
        }
        self.step += 1;
        let OptimizerConfig {
            lr,
            weight_decay,
            betas: [b1, b2],
            eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let mut i = 0;
        let (ms, vs) = (&mut self.first_moment, &mut self.second_moment);
        params.visit_mut(&mut |p| {
            let (m, v, gr) = (ms[i].data_mut(), vs[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                *w *= 1.0 - lr * weight_decay;
                m[j] = b1 * m[j] + (1.0 - b1) * gr[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gr[j] * gr[j];
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Applies [`OptimizerState::step`]; free-function form.
pub fn adamw_step<P: ParamGroup>(state: &mut OptimizerState, params: &mut P, grads: &[Tensor]) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearParams;

    fn single(w: f64) -> LinearParams {
        LinearParams {
            weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }
    }

    fn grads(g: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1, 1], vec![g]).unwrap(), Tensor::zeros(&[1])]
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut p = single(0.7);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        for _ in 0..5 {
            st.step(&mut p, &grads(0.0)).unwrap();
        }
        assert_eq!(p.weight.item(), 0.7);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = single(0.0);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..2000 {
            st.step(&mut p, &grads(-3.0)).unwrap();
            delta = p.weight.item() - prev;
            prev = p.weight.item();
        }
        assert!((delta - 1e-3).abs() < 1e-9, "{delta}");
    }

    #[test]
    fn two_steps_by_hand() {
        let (lr, wd, b1, b2, eps) = (0.1, 0.5, 0.9, 0.99, 1e-8);
        let cfg = OptimizerConfig {
            lr,
            weight_decay: wd,
            betas: [b1, b2],
            eps,
        };
        let mut p = single(1.0);
        let mut st = OptimizerState::new(cfg, &p);
        st.step(&mut p, &grads(0.2)).unwrap();
        st.step(&mut p, &grads(-0.4)).unwrap();

        let mut w = 1.0f64;
        w *= 1.0 - lr * wd;
        let m1 = 0.1 * 0.2;
        let v1 = 0.01 * 0.04;
        w -= lr * (m1 / 0.1) / ((v1 / 0.01f64).sqrt() + eps);
        w *= 1.0 - lr * wd;
        let m2 = 0.9 * m1 + 0.1 * -0.4;
        let v2 = 0.99 * v1 + 0.01 * 0.16;
        w -= lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801f64)).sqrt() + eps);
        assert!((p.weight.item() - w).abs() < 1e-15, "{} vs {w}", p.weight.item());
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = single(0.5);
        let mut st = OptimizerState::new(OptimizerConfig::default(), &p);
        let before = (p.clone(), st.clone());
        assert!(matches!(st.step(&mut p, &grads(f64::NAN)), Err(Error::Training(_))));
        assert_eq!((p, st), before);
    }

    #[test]
    fn decay_is_decoupled() {
        // with zero gradient the moments stay zero and only decay acts
        let mut p = single(2.0);
        let mut st = OptimizerState::new(OptimizerConfig::default(), &p);
        st.step(&mut p, &grads(0.0)).unwrap();
        assert_eq!(p.weight.item(), 2.0 * (1.0 - 1e-3 * 1e-2));
        assert_eq!(st.first_moment[0].item(), 0.0);
    }
}
