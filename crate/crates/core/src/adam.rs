//! Adam with bias correction over a fixed set of flat parameter buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

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
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdamError {
    /// A gradient entry was NaN or infinite; nothing was updated.
    NonFiniteGradient { tensor: usize, index: usize },
    ShapeMismatch { tensor: usize, expected: usize, found: usize },
}

impl fmt::Display for AdamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdamError::NonFiniteGradient { tensor, index } => {
                write!(f, "non-finite gradient at tensor {tensor}, entry {index}; step skipped")
            }
            AdamError::ShapeMismatch { tensor, expected, found } => {
                write!(f, "tensor {tensor}: expected {expected} values, found {found}")
            }
        }
    }
}

impl core::error::Error for AdamError {}

/// First and second moment estimates for one parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        let moments = sizes.iter().map(|&n| Moments { m: vec![0.0; n], v: vec![0.0; n] }).collect();
        Adam { config, step: 0, moments }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// One in-place update of every buffer. Gradients are validated first so
    /// a rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AdamError> {
        for (t, (mom, g)) in self.moments.iter().zip(grads).enumerate() {
            if mom.m.len() != g.len() || params[t].len() != g.len() {
                return Err(AdamError::ShapeMismatch { tensor: t, expected: mom.m.len(), found: g.len() });
            }
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(AdamError::NonFiniteGradient { tensor: t, index });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(beta2, self.step as f64);
        for ((p, g), mom) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            for i in 0..g.len() {
                let gi = g[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let mh = mom.m[i] / c1;
                let vh = mom.v[i] / c2;
                p[i] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn sign_descent_limit() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 1e-8 };
        let g = [2.0, -0.5, 1e-3];
        let mut p = vec![0.0; 3];
        Adam::new(cfg, &[3]).step(&mut [&mut p], &[&g]).unwrap();
        for i in 0..3 {
            let expect = -0.1 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }
    }

    /// Independent scalar Adam, written out longhand.
    fn scalar_adam(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = vec![w];
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        let oracle = scalar_adam(20.0, 0.1, 100);
        let mut w = vec![20.0];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &[1]);
        let mut traj = vec![w[0]];
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            adam.step(&mut [&mut w], &[&g]).unwrap();
            traj.push(w[0]);
        }
        for (a, b) in traj.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(traj.windows(2).skip(1).all(|p| p[1].abs() < p[0].abs()));
    }

    #[test]
    fn nan_gradient_is_reported_and_skipped() {
        let mut p = vec![1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let err = adam.step(&mut [&mut p], &[&[0.5, f64::NAN]]).unwrap_err();
        assert_eq!(err, AdamError::NonFiniteGradient { tensor: 0, index: 1 });
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.steps_taken(), 0);
        assert!(adam.moments()[0].m.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![1.0];
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        assert!(matches!(
            adam.step(&mut [&mut p], &[&[0.5]]),
            Err(AdamError::ShapeMismatch { .. })
        ));
    }
}
