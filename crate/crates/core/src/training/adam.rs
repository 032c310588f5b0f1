//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "adam epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers, one per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over parameter groups `(params, grads)`.
pub fn adam_step(groups: &mut [(&mut [f64], &[f64])], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if groups.len() != state.m.len() {
        return Err(Error::shape("adam_step groups", state.m.len(), groups.len()));
    }
    for (gi, (p, g)) in groups.iter().enumerate() {
        if p.len() != g.len() || p.len() != state.m[gi].len() {
            return Err(Error::shape(
                "adam_step group",
                format!("group {gi} of length {}", state.m[gi].len()),
                format!("params {} / grads {}", p.len(), g.len()),
            ));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient group {gi}, element {j}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (gi, (p, g)) in groups.iter_mut().enumerate() {
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= config.lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_on_fresh_state_leave_params() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut s = AdamState::new(&[2]);
        adam_step(&mut [(&mut p, &g)], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_grads_decay_moments() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(&[1]);
        s.m[0][0] = 0.4;
        s.v[0][0] = 0.2;
        adam_step(&mut [(&mut p, &[0.0])], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.m[0][0], 0.9 * 0.4);
        assert_eq!(s.v[0][0], 0.999 * 0.2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut p = vec![0.0];
        let mut s = AdamState::new(&[1]);
        adam_step(&mut [(&mut p, &[1.0])], &mut s, &cfg).unwrap();
        // m_hat = 1, sqrt(v_hat) = 1
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut s = AdamState::new(&[3]);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + 0.01 * k as f64).collect();
                adam_step(&mut [(&mut p, &g)], &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(&[2]);
        assert!(adam_step(&mut [(&mut p, &[f64::NAN, 0.0])], &mut s, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut [(&mut p, &[0.0])], &mut s, &AdamConfig::default()).is_err());
        assert_eq!(s.t, 0);
        assert!(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
