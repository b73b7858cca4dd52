use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::nn::Parameterized;

use super::config::OptimizerConfig;

/// Adam with bias correction and optional decoupled weight decay. Moment
/// buffers follow the module's visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    /// Completed steps.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, module: &impl Parameterized) -> Self {
        let mut m = Vec::new();
        module.visit("", &mut |_, p| m.push(vec![0.0; p.len()]));
        Adam {
            cfg: cfg.clone(),
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.t)
    }

    pub fn step(&mut self, module: &mut impl Parameterized) {
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let decay = (lr * self.cfg.weight_decay) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps) + decay * p.value[i];
            }
            k += 1;
        });
    }

    /// Appends the moments as `adam.m.<name>` / `adam.v.<name>`.
    pub fn save(&self, ckpt: &mut Checkpoint, module: &impl Parameterized) {
        let mut names = Vec::new();
        module.visit("", &mut |n, p| names.push((n.to_string(), p.shape.clone())));
        for (which, bufs) in [("m", &self.m), ("v", &self.v)] {
            for ((name, shape), buf) in names.iter().zip(bufs) {
                ckpt.push(&format!("adam.{which}.{name}"), shape, buf);
            }
        }
    }

    pub fn restore(cfg: &OptimizerConfig, t: u64, ckpt: &Checkpoint, module: &impl Parameterized) -> Result<Self> {
        let mut adam = Adam::new(cfg, module);
        adam.t = t;
        let mut missing = Vec::new();
        let mut k = 0;
        module.visit("", &mut |name, p| {
            for (which, bufs) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let key = format!("adam.{which}.{name}");
                match ckpt.tensor(&key) {
                    Some((shape, values)) if shape == p.shape.as_slice() => {
                        bufs[k].copy_from_slice(values)
                    }
                    _ => missing.push(key),
                }
            }
            k += 1;
        });
        if missing.is_empty() {
            Ok(adam)
        } else {
            Err(Error::ParamMismatch(missing))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Parameterized};

    struct One(Param);

    impl Parameterized for One {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = One(Param::zeros(&[2]));
        p.0.grad = vec![3.0, -0.01];
        let mut adam = Adam::new(&OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() }, &p);
        adam.step(&mut p);
        assert!((p.0.value[0] + 0.1).abs() < 1e-6);
        assert!((p.0.value[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = One(Param::zeros(&[1]));
        p.0.value[0] = 5.0;
        let mut adam = Adam::new(&OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() }, &p);
        for _ in 0..500 {
            p.0.grad[0] = 2.0 * (p.0.value[0] - 1.5);
            adam.step(&mut p);
        }
        assert!((p.0.value[0] - 1.5).abs() < 1e-2);
    }
}
