//! AdamW with decoupled weight decay and global-norm clipping.

use crate::params::ParamStore;
use crate::tensor::{sc, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// What happened during one [`AdamW::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    /// A gradient entry was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
    skipped: u64,
    clipped: u64,
}

impl AdamW {
    pub fn new<F: Scalar>(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
            skipped: 0,
            clipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn clipped(&self) -> u64 {
        self.clipped
    }

    /// Updates every trainable parameter from `grads` (one buffer per
    /// parameter in store order; frozen entries are ignored).
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>]) -> StepOutcome {
        assert_eq!(grads.len(), store.len(), "one gradient buffer per parameter");
        let mut sq = 0.0f64;
        for (p, g) in store.iter().zip(grads) {
            if !p.trainable {
                continue;
            }
            for &x in g {
                let x = x.as_f64();
                if !x.is_finite() {
                    self.skipped += 1;
                    return StepOutcome::SkippedNonFinite;
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let factor = match self.cfg.clip_norm {
            Some(limit) if norm > limit => limit / norm,
            _ => 1.0,
        };
        let clipped = factor < 1.0;
        if clipped {
            self.clipped += 1;
        }
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = g[j].as_f64() * factor;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let (mh, vh) = (m[j] / bc1, v[j] / bc2);
                let x = w.as_f64() * (1.0 - c.lr * c.weight_decay);
                *w = sc(x - c.lr * mh / (vh.sqrt() + c.eps));
            }
        }
        StepOutcome::Applied {
            grad_norm: norm,
            clipped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        let id = s.add("x", &[values.len()], Init::Zeros, true);
        s.get_mut(id).tensor.data_mut().copy_from_slice(values);
        s.add("frozen", &[2], Init::Ones, false);
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = store(&[0.3, -1.2]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, &[vec![0.0; 2], vec![0.0; 2]]);
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[0.3, -1.2]);
    }

    #[test]
    fn zero_gradient_decays_weights() {
        let mut s = store(&[0.3, -1.2]);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, &[vec![0.0; 2], vec![7.0; 2]]);
        let x = s.iter().next().unwrap().tensor.data();
        assert!((x[0] - 0.3 * 0.995).abs() < 1e-15 && (x[1] + 1.2 * 0.995).abs() < 1e-15);
        // frozen parameters ignore their gradient
        assert_eq!(s.iter().nth(1).unwrap().tensor.data(), &[1.0, 1.0]);
    }

    #[test]
    fn three_steps_on_square() {
        let mut s = store(&[1.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        let expect = [0.9000000005, 0.8004122286917928, 0.7015862729460303];
        for e in expect {
            let x = s.iter().next().unwrap().tensor.data()[0];
            opt.step(&mut s, &[vec![2.0 * x], vec![0.0; 2]]);
            let x = s.iter().next().unwrap().tensor.data()[0];
            assert!((x - e).abs() < 1e-12, "{x} vs {e}");
        }
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let out = opt.step(&mut s, &[vec![f64::NAN, 0.0], vec![0.0; 2]]);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!((opt.skipped(), opt.steps()), (1, 0));
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[1.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        match opt.step(&mut s, &[vec![30.0, 40.0], vec![0.0; 2]]) {
            StepOutcome::Applied { grad_norm, clipped } => {
                assert_eq!(grad_norm, 50.0);
                assert!(clipped);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.clipped(), 1);
    }
}
