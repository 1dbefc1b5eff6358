//! Named parameter storage with per-parameter Adam moment buffers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
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
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Named tensors plus Adam state. Parameter names are unique; iteration is in
/// name order everywhere, which keeps training runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), NnError> {
        if self.params.contains_key(name) {
            return Err(NnError::UnknownParam(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction over exactly the parameters named
    /// in `grads`. Learning-rate decay is the trainer's job, via `cfg.lr`.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<(), NnError> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if !p.same_shape(g) {
                return Err(NnError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_all_finite() {
                return Err(NnError::NonFiniteGrad { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            }
            let m = &self.m[name];
            let v = &self.v[name];
            let p = self.params.get_mut(name).expect("checked above");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Uniform Xavier/Glorot initialization in `[-s, s]`, `s = sqrt(6/(fi+fo))`.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::matrix(rows, cols, data).expect("shape consistent")
}

pub fn xavier_shaped(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, data).expect("shape consistent")
}

/// Standard normal draw via Box-Muller, deterministic for a seeded rng.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.3, -40.0]));
        ps.adam_step(&grads, &AdamConfig::default()).unwrap();
        let got = ps.get("w").unwrap().data();
        // bias-corrected first step is lr * g/|g| up to eps
        assert!((got[0] - (1.0 - 0.001)).abs() < 1e-6, "got {got:?}");
        assert!((got[1] - (1.0 + 0.001)).abs() < 1e-6, "got {got:?}");
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![2]));
        ps.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.5, -0.5]);
        assert_eq!(ps.step_count(), 1);
    }

    #[test]
    fn hundred_steps_descend_a_quadratic_bowl() {
        // f(w) = 0.5 * |w - target|^2, grad = w - target
        let target = [2.0, -1.0, 0.5];
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let cfg = AdamConfig::default();
        let loss = |w: &[f64]| -> f64 {
            w.iter().zip(target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = ps.get("w").unwrap().data().to_vec();
            losses.push(loss(&w));
            let g: Vec<f64> = w.iter().zip(target).map(|(a, b)| a - b).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::vector(g));
            ps.adam_step(&grads, &cfg).unwrap();
        }
        for i in 5..losses.len() - 1 {
            assert!(losses[i + 1] < losses[i], "loss rose at step {i}");
        }
    }

    #[test]
    fn nonfinite_grad_names_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![f64::NAN]));
        match ps.adam_step(&grads, &AdamConfig::default()) {
            Err(NnError::NonFiniteGrad { name }) => assert_eq!(name, "w"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn randn_is_deterministic_for_a_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..32 {
            assert_eq!(randn(&mut a), randn(&mut b));
        }
    }
}
