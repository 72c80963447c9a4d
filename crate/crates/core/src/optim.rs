//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup / linear decay learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ParamSet};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to at most this global L2 norm.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// First and second moment estimates, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            m: self.m.iter().map(Matrix::cast).collect(),
            v: self.v.iter().map(Matrix::cast).collect(),
            t: self.t,
        }
    }
}

/// Clips `grads`, then applies one AdamW update at learning rate `lr` to
/// every parameter whose `frozen` flag is unset. Frozen parameters and their
/// moments are left untouched. Returns the pre-clip gradient norm.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    grads: &Gradients<T>,
    frozen: &[bool],
    lr: f64,
    config: &AdamWConfig,
) -> f64 {
    assert_eq!(grads.tensors.len(), params.len(), "gradient count");
    assert_eq!(state.m.len(), params.len(), "optimizer state size");
    let trainable = |i: usize| !frozen.get(i).copied().unwrap_or(false);
    // the norm only covers what is being trained
    let norm = grads
        .tensors
        .iter()
        .enumerate()
        .filter(|(i, _)| trainable(*i))
        .map(|(_, g)| g.sum_squares().to_f64())
        .sum::<f64>();
    let norm = libm::sqrt(norm);
    let clip = if norm > config.clip_norm && norm > 0.0 {
        config.clip_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - libm::pow(config.beta1, state.t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, state.t as f64);
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let (one, clip) = (T::one(), T::of(clip));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(config.eps);
    for i in 0..params.len() {
        if !trainable(i) {
            continue;
        }
        let decay = if params.entry(i).decay {
            T::of(1.0 - lr * config.weight_decay)
        } else {
            one
        };
        let g = grads.tensors[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let p = params.get_mut(i).as_mut_slice();
        for j in 0..p.len() {
            let gj = g[j] * clip;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
        }
    }
    norm
}

/// Learning rate for the 1-based optimizer `step`: linear ramp reaching
/// `peak` at `step == warmup`, then linear decay reaching 0 at
/// `step == total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step <= warmup {
        return peak * step as f64 / warmup.max(1) as f64;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use alloc::vec;

    fn one_param(x: f64, decay: bool) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push(String::from("x"), Matrix::from_vec(1, 1, vec![x]), decay);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(1.0, false);
        let mut s = AdamState::new(&p);
        let g = Gradients {
            tensors: vec![Matrix::from_vec(1, 1, vec![0.3])],
        };
        adamw_step(&mut p, &mut s, &g, &[], 0.01, &AdamWConfig::default());
        // bias-corrected m/sqrt(v) is sign(g) on the first step
        assert!((p.get(0).get(0, 0) - 0.99).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only_on_decay_params() {
        let cfg = AdamWConfig::default();
        for (decay, expect) in [(true, 1.0 - 0.1 * 0.01), (false, 1.0)] {
            let mut p = one_param(1.0, decay);
            let mut s = AdamState::new(&p);
            let g = Gradients::zeros_like(&p);
            adamw_step(&mut p, &mut s, &g, &[], 0.1, &cfg);
            assert!((p.get(0).get(0, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = one_param(1.0, true);
        let mut s = AdamState::new(&p);
        let g = Gradients {
            tensors: vec![Matrix::from_vec(1, 1, vec![5.0])],
        };
        adamw_step(&mut p, &mut s, &g, &[true], 0.1, &AdamWConfig::default());
        assert_eq!(p.get(0).get(0, 0), 1.0);
        assert_eq!(s.m[0].get(0, 0), 0.0);
    }

    #[test]
    fn clipping_bounds_the_update_input() {
        let mut p = one_param(0.0, false);
        let mut s = AdamState::new(&p);
        let g = Gradients {
            tensors: vec![Matrix::from_vec(1, 1, vec![100.0])],
        };
        let norm = adamw_step(&mut p, &mut s, &g, &[], 0.1, &AdamWConfig::default());
        assert_eq!(norm, 100.0);
        assert!((s.m[0].get(0, 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(10, 10, 100, 1.0), 1.0);
        assert_eq!(lr_schedule(5, 10, 100, 1.0), 0.5);
        assert_eq!(lr_schedule(1, 10, 100, 1.0), 0.1);
        assert_eq!(lr_schedule(55, 10, 100, 1.0), 0.5);
        assert_eq!(lr_schedule(100, 10, 100, 1.0), 0.0);
        assert_eq!(lr_schedule(1, 0, 4, 2.0), 1.5);
        // continuous at the peak: neighbours are one step of slope away
        let up = lr_schedule(9, 10, 100, 1.0);
        let down = lr_schedule(11, 10, 100, 1.0);
        assert!((1.0 - up - 0.1).abs() < 1e-12 && (1.0 - down - 1.0 / 90.0).abs() < 1e-12);
    }
}
