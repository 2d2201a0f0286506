//! Sign-based resilient backpropagation (the iRprop- flavour: no weight
//! backtracking, and a sign change suppresses the next comparison).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpropConfig {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta_init: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self {
            eta_plus: 1.2,
            eta_minus: 0.5,
            delta_init: 0.1,
            delta_min: 1e-6,
            delta_max: 50.0,
        }
    }
}

impl RpropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_plus > 1.0 && self.eta_minus > 0.0 && self.eta_minus < 1.0) {
            return Err(Error::InvalidArgument(
                "rprop needs eta_plus > 1 > eta_minus > 0".into(),
            ));
        }
        if !(self.delta_min > 0.0
            && self.delta_min <= self.delta_init
            && self.delta_init <= self.delta_max)
        {
            return Err(Error::InvalidArgument(
                "rprop needs 0 < delta_min <= delta_init <= delta_max".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpropState {
    config: RpropConfig,
    steps: Vec<f64>,
    prev_grad: Vec<f64>,
}

impl RpropState {
    pub fn new(n_weights: usize, config: RpropConfig) -> Self {
        Self {
            config,
            steps: vec![config.delta_init; n_weights],
            prev_grad: vec![0.0; n_weights],
        }
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.steps
    }

    /// One update of `weights` against the full-batch gradient `grad`.
    pub fn apply(&mut self, weights: &mut [f64], grad: &[f64]) {
        assert_eq!(weights.len(), self.steps.len());
        assert_eq!(grad.len(), self.steps.len());
        let c = self.config;
        for (((w, &g), step), prev) in weights
            .iter_mut()
            .zip(grad)
            .zip(&mut self.steps)
            .zip(&mut self.prev_grad)
        {
            let agreement = *prev * g;
            if agreement > 0.0 {
                *step = (*step * c.eta_plus).min(c.delta_max);
            } else if agreement < 0.0 {
                *step = (*step * c.eta_minus).max(c.delta_min);
                *prev = 0.0;
                continue;
            }
            if g > 0.0 {
                *w -= *step;
            } else if g < 0.0 {
                *w += *step;
            }
            *prev = g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w - 3.7)^2, minimum at 3.7.
        let mut w = [-2.0];
        let mut state = RpropState::new(1, RpropConfig::default());
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 3.7)];
            state.apply(&mut w, &g);
        }
        assert!((w[0] - 3.7).abs() < 1e-4, "w = {}", w[0]);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut w = [0.3, -0.7];
        let mut state = RpropState::new(2, RpropConfig::default());
        for _ in 0..5 {
            state.apply(&mut w, &[0.0, 0.0]);
        }
        assert_eq!(w, [0.3, -0.7]);
    }

    #[test]
    fn sign_flip_shrinks_and_skips() {
        let mut w = [0.0];
        let mut state = RpropState::new(1, RpropConfig::default());
        state.apply(&mut w, &[1.0]);
        assert_eq!(w[0], -0.1);
        state.apply(&mut w, &[1.0]);
        assert!((state.step_sizes()[0] - 0.12).abs() < 1e-15);
        let before = w[0];
        state.apply(&mut w, &[-1.0]);
        assert_eq!(w[0], before);
        assert!((state.step_sizes()[0] - 0.06).abs() < 1e-15);
        state.apply(&mut w, &[-1.0]);
        assert!((w[0] - (before + 0.06)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RpropConfig::default().validate().is_ok());
        let bad = RpropConfig { eta_plus: 0.9, ..RpropConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RpropConfig { delta_min: 1.0, ..RpropConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn step_sizes_stay_bounded(grads in proptest::collection::vec(-1.0..1.0f64, 1..200)) {
            let cfg = RpropConfig::default();
            let mut state = RpropState::new(1, cfg);
            let mut w = [0.0];
            for g in grads {
                state.apply(&mut w, &[g]);
                let s = state.step_sizes()[0];
                prop_assert!(s >= cfg.delta_min && s <= cfg.delta_max);
            }
        }
    }
}
