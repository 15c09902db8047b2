//! Optimizers over a [`ParamStore`]. Weight decay is decoupled from the
//! gradient and applied only to matrices and kernels (rank ≥ 2); biases,
//! norm gains and bias tables of rank 1 are left alone.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// SGD only.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Rescale the global gradient norm down to this value; 0 disables.
    #[serde(default)]
    pub clip_norm: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerKind::Adamw,
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: default_momentum(),
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("optimizer.lr: must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("optimizer.weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("optimizer.{k}: must be in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            bad.push(format!("optimizer.eps: must be positive, got {}", self.eps));
        }
        if !(self.clip_norm >= 0.0) {
            bad.push(format!("optimizer.clip_norm: must be >= 0, got {}", self.clip_norm));
        }
        bad
    }
}

pub fn decays(value: &Tensor) -> bool {
    value.ndim() >= 2
}

/// First and second moment buffers (the second is unused by SGD), in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = |_: ()| store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            first: zeros(()),
            second: if config.name == OptimizerKind::Adamw { zeros(()) } else { Vec::new() },
            config,
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn update(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer holds {} buffers for {} parameters",
                self.first.len(),
                store.len()
            )));
        }
        let c = self.config.clone();
        let scale = if c.clip_norm > 0.0 {
            let n = Self::grad_norm(store);
            if n > c.clip_norm { c.clip_norm / n } else { 1.0 }
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            let wd = if decays(&p.value) { c.weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            match c.name {
                OptimizerKind::Adamw => {
                    let v = self.second[i].data_mut();
                    for k in 0..value.len() {
                        let g = grad[k] * scale;
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                        let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                        value[k] -= c.lr * (update + wd * value[k]);
                    }
                }
                OptimizerKind::Sgd => {
                    for k in 0..value.len() {
                        m[k] = c.momentum * m[k] + grad[k] * scale;
                        value[k] -= c.lr * (m[k] + wd * value[k]);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }

    /// Named state tensors for checkpointing.
    pub fn state_entries<'a>(&'a self, store: &'a ParamStore) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (i, p) in store.iter().enumerate() {
            out.push((format!("optim.first.{}", p.name), &self.first[i]));
            if let Some(s) = self.second.get(i) {
                out.push((format!("optim.second.{}", p.name), s));
            }
        }
        out
    }

    /// Restores buffers written by [`Optimizer::state_entries`].
    pub fn restore(
        config: OptimizerConfig,
        store: &ParamStore,
        step: u64,
        get: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(config, store);
        opt.step = step;
        for (i, p) in store.iter().enumerate() {
            let fetch = |kind: &str, slot: &mut Tensor| -> Result<()> {
                let name = format!("optim.{kind}.{}", p.name);
                let t = get(&name).ok_or_else(|| Error::ParamMismatch(format!("missing optimizer state `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::ParamMismatch(format!(
                        "optimizer state `{name}` has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                *slot = t;
                Ok(())
            };
            fetch("first", &mut opt.first[i])?;
            if opt.config.name == OptimizerKind::Adamw {
                fetch("second", &mut opt.second[i])?;
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.insert("b", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        s
    }

    fn set_grads(s: &mut ParamStore, g: &[f64]) {
        let mut k = 0;
        for p in s.iter_mut() {
            for x in p.grad.data_mut() {
                *x = g[k];
                k += 1;
            }
        }
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let mut s = store();
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &s);
        set_grads(&mut s, &[0.2, -0.4, 3.0]);
        opt.update(&mut s).unwrap();
        // first step: m̂ = g, v̂ = g², update = g / (|g| + eps) ≈ sign(g)
        let sgn = |g: f64| g / (g.abs() + 1e-8);
        let w = s.by_name("w").unwrap().value.data().to_vec();
        assert!((w[0] - (1.0 - 0.1 * (sgn(0.2) + 0.5 * 1.0))).abs() < 1e-12);
        assert!((w[1] - (-2.0 - 0.1 * (sgn(-0.4) + 0.5 * -2.0))).abs() < 1e-12);
        // rank-1 bias: no decay
        let b = s.by_name("b").unwrap().value.data()[0];
        assert!((b - (0.5 - 0.1 * sgn(3.0))).abs() < 1e-12);
        assert!(s.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let mut s = store();
        let cfg = OptimizerConfig { name: OptimizerKind::Sgd, lr: 0.1, weight_decay: 0.0, momentum: 0.5, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &s);
        set_grads(&mut s, &[1.0, 0.0, 0.0]);
        opt.update(&mut s).unwrap();
        set_grads(&mut s, &[1.0, 0.0, 0.0]);
        opt.update(&mut s).unwrap();
        // v1 = 1, v2 = 1.5 -> 1 - 0.1 - 0.15
        assert!((s.by_name("w").unwrap().value.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        for name in [OptimizerKind::Adamw, OptimizerKind::Sgd] {
            let mut s = store();
            let cfg = OptimizerConfig { name, lr: 0.05, weight_decay: 0.0, ..Default::default() };
            let mut opt = Optimizer::new(cfg, &s);
            for _ in 0..400 {
                let g: Vec<f64> = s.iter().flat_map(|p| p.value.data().iter().map(|v| 2.0 * (v - 3.0)).collect::<Vec<_>>()).collect();
                set_grads(&mut s, &g);
                opt.update(&mut s).unwrap();
            }
            assert!(s.iter().all(|p| p.value.data().iter().all(|v| (v - 3.0).abs() < 0.05)), "{name:?}");
        }
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut s = store();
        let cfg = OptimizerConfig { name: OptimizerKind::Sgd, lr: 1.0, weight_decay: 0.0, momentum: 0.0, clip_norm: 1.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &s);
        set_grads(&mut s, &[30.0, 40.0, 0.0]);
        opt.update(&mut s).unwrap();
        let w = s.by_name("w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] + 2.8).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut s = store();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s);
        set_grads(&mut s, &[0.1, 0.2, 0.3]);
        opt.update(&mut s).unwrap();
        let entries: Vec<(String, Tensor)> = opt.state_entries(&s).into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = Optimizer::restore(OptimizerConfig::default(), &s, opt.step, |n| {
            entries.iter().find(|e| e.0 == n).map(|e| e.1.clone())
        })
        .unwrap();
        assert_eq!(back, opt);
        let err = Optimizer::restore(OptimizerConfig::default(), &s, 1, |_| None).unwrap_err();
        assert!(err.to_string().contains("optim.first.w"), "{err}");
    }
}
