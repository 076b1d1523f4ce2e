use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the rate drops by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Linear ramp from `warmup_factor · lr` over the first iterations.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm cap; 0 disables it.
    pub clip_norm: f64,
}

impl SgdConfig {
    pub fn lr_at(&self, iter: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| iter >= m).count();
        let mut lr = self.lr * self.gamma.powi(drops as i32);
        if iter < self.warmup_iters {
            let a = iter as f64 / self.warmup_iters as f64;
            lr *= self.warmup_factor * (1.0 - a) + a;
        }
        lr
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParamStore<f32>) -> Self {
        let velocity = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Sgd { cfg, velocity }
    }

    /// Applies one update from the gradients stored on `params` and clears them.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<f32>, iter: usize) -> Result<f64> {
        if self.velocity.len() != params.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        let mut sq = 0.0f64;
        for (_, name, t) in params.iter() {
            let g = t
                .grad()
                .ok_or_else(|| Error::Invalid(format!("parameter {name} has no gradient")))?;
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            (self.cfg.clip_norm / norm) as f32
        } else {
            1.0
        };
        let lr = self.cfg.lr_at(iter) as f32;
        let (mu, wd) = (self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        for (t, v) in params.tensors_mut().iter_mut().zip(&mut self.velocity) {
            let g = t.take_grad().expect("checked above");
            for ((w, vel), gi) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *vel = mu * *vel + gi * clip + wd * *w;
                *w -= lr * *vel;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SgdConfig {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![10, 20],
            gamma: 0.1,
            warmup_iters: 0,
            warmup_factor: 1.0,
            clip_norm: 0.0,
        }
    }

    #[test]
    fn schedule_drops_at_milestones() {
        let c = cfg();
        assert_eq!(c.lr_at(9), 0.1);
        assert!((c.lr_at(10) - 0.01).abs() < 1e-12);
        assert!((c.lr_at(25) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = Sgd::new(cfg(), &s);
        assert!(opt.step(&mut s, 0).is_err());
    }
}
