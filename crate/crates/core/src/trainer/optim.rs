use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Tensor, TensorStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    MomentumSgd,
    #[default]
    AdaptiveMoment,
}

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Momentum SGD (`v = mu v + g; p -= lr v`) or bias-corrected adaptive
/// moments, with per-parameter state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub cfg: OptimizerConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// `m.<name>` and (adaptive only) `v.<name>`.
    pub state: TensorStore,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: OptimizerConfig) -> Self {
        Self {
            kind,
            cfg,
            t: 0,
            state: TensorStore::new(),
        }
    }

    pub fn step(&mut self, params: &mut TensorStore, grads: &TensorStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m_key = format!("m.{name}");
            if self.state.get(&m_key).is_none() {
                self.state.insert(m_key.clone(), Tensor::zeros(p.shape()));
            }
            match self.kind {
                OptimizerKind::MomentumSgd => {
                    let m = self.state.get_mut(&m_key).expect("inserted above");
                    for ((pv, mv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *mv = c.momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let v_key = format!("v.{name}");
                    if self.state.get(&v_key).is_none() {
                        self.state.insert(v_key.clone(), Tensor::zeros(p.shape()));
                    }
                    let mut v = self.state.get(&v_key).expect("inserted above").clone();
                    let m = self.state.get_mut(&m_key).expect("inserted above");
                    for (((pv, mv), vv), gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        *pv -= lr * (*mv / bias1) / ((*vv / bias2).sqrt() + c.eps);
                    }
                    self.state.insert(v_key, v);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TensorStore, TensorStore) {
        let mut p = TensorStore::new();
        p.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut g = TensorStore::new();
        g.insert("w", Tensor::new(vec![3], vec![0.1, 0.2, -0.3]).unwrap());
        (p, g)
    }

    #[test]
    fn zero_lr_is_bit_exact_noop() {
        for kind in [OptimizerKind::MomentumSgd, OptimizerKind::AdaptiveMoment] {
            let (mut p, g) = setup();
            let before = p.clone();
            let mut opt = Optimizer::new(kind, OptimizerConfig::default());
            opt.step(&mut p, &g, 0.0).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let (mut p, g) = setup();
        let mut opt = Optimizer::new(OptimizerKind::MomentumSgd, OptimizerConfig::default());
        opt.step(&mut p, &g, 1.0).unwrap();
        opt.step(&mut p, &g, 1.0).unwrap();
        // Two steps: g + (0.9 g + g) = 2.9 g.
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.29)).abs() < 1e-12);
    }

    #[test]
    fn first_adaptive_step_moves_by_lr() {
        let (mut p, g) = setup();
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerConfig::default());
        opt.step(&mut p, &g, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[2] - 0.51).abs() < 1e-6);
    }
}
