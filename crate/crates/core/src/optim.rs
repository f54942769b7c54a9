//! Adam optimizer, positivity projection, and gradient-statistics loss
//! weighting.
//!
//! The adaptive weight targets the data-misfit term: its estimate is the
//! ratio of the largest residual-gradient magnitude to the mean magnitude of
//! the (already weighted) data-gradient, smoothed by a moving average. This
//! rebalances terms whose back-propagated gradients differ by orders of
//! magnitude, which is what stalls identification of unknown diffusivities.

use thiserror::Error;

/// Clamp floor for physical parameters constrained to remain positive.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter/gradient/moment length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
}

/// Adam state over one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with the standard defaults (beta1 0.9, beta2 0.999,
    /// epsilon 1e-8).
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update, in place.
    ///
    /// Rejects non-finite gradients so a diverging iteration aborts loudly
    /// instead of poisoning the moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), OptimError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(OptimError::LengthMismatch(params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Projects a physical parameter back onto the positive half-line.
pub fn project_positive(value: f64, floor: f64) -> f64 {
    value.max(floor)
}

/// Per-term loss weights with the adaptive data-term option.
#[derive(Clone, Debug)]
pub struct LossWeights {
    weights: Vec<f64>,
    pub adaptive: bool,
    /// Moving-average rate for the adaptive update.
    pub alpha: f64,
}

impl LossWeights {
    /// All-ones weights over `n_terms` terms.
    pub fn uniform(n_terms: usize, adaptive: bool) -> Self {
        LossWeights {
            weights: vec![1.0; n_terms],
            adaptive,
            alpha: 0.1,
        }
    }

    pub fn get(&self, term: usize) -> f64 {
        self.weights[term]
    }

    pub fn set(&mut self, term: usize, weight: f64) {
        assert!(weight > 0.0, "loss weights must stay positive");
        self.weights[term] = weight;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Gradient-statistics update of the data-term weight.
///
/// `grad_residual` is the gradient of the (unweighted) PDE residual loss and
/// `grad_weighted_data` the gradient of the already-weighted data loss, both
/// over the same parameter slice. The estimate is
/// `max|grad_residual| / mean|grad_weighted_data|`, folded into the old
/// weight by `(1 - alpha) * old + alpha * estimate`.
///
/// A vanishing denominator keeps the old weight and logs a warning.
pub fn adaptive_lambda(
    grad_residual: &[f64],
    grad_weighted_data: &[f64],
    lambda_old: f64,
    alpha: f64,
) -> f64 {
    let max_r = grad_residual.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mean_d = if grad_weighted_data.is_empty() {
        0.0
    } else {
        grad_weighted_data.iter().map(|g| g.abs()).sum::<f64>() / grad_weighted_data.len() as f64
    };
    if !(mean_d > 0.0) || !max_r.is_finite() {
        log::warn!(
            "adaptive weight kept at {lambda_old}: degenerate gradient statistics \
             (max residual grad {max_r}, mean data grad {mean_d})"
        );
        return lambda_old;
    }
    let estimate = max_r / mean_d;
    (1.0 - alpha) * lambda_old + alpha * estimate
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut state = AdamState::new(1, 1e-3);
        let mut params = vec![0.5];
        state.step(&mut params, &[1.0]).unwrap();
        // m_hat = 1, v_hat = 1 on the first step, so the update is
        // -lr / (1 + eps).
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert_relative_eq!(params[0], expected, epsilon = 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        let mut state = AdamState::new(3, 1e-3);
        let mut params = vec![1.0, -2.0, 0.25];
        state.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn constant_gradient_keeps_step_near_learning_rate() {
        // Independent two-step recursion of the Adam update for g = 0.7.
        let g = 0.7f64;
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut expected_steps = Vec::new();
        for t in 1..=2i32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - f64::powi(b1, t));
            let v_hat = v / (1.0 - f64::powi(b2, t));
            expected_steps.push(lr * m_hat / (v_hat.sqrt() + eps));
        }

        let mut state = AdamState::new(1, lr);
        let mut params = vec![0.0];
        let mut prev = params[0];
        for expected in expected_steps {
            state.step(&mut params, &[g]).unwrap();
            let delta = prev - params[0];
            assert_relative_eq!(delta, expected, epsilon = 1e-15);
            assert_relative_eq!(delta, lr, max_relative = 1e-4);
            prev = params[0];
        }
    }

    #[test]
    fn first_step_is_scale_equivariant() {
        let mut s1 = AdamState::new(1, 1e-3);
        let mut s2 = AdamState::new(1, 1e-3);
        let mut p1 = vec![0.0];
        let mut p2 = vec![0.0];
        s1.step(&mut p1, &[0.3]).unwrap();
        s2.step(&mut p2, &[0.6]).unwrap();
        assert_relative_eq!(p1[0], p2[0], max_relative = 1e-7);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut state = AdamState::new(2, 1e-3);
        let mut params = vec![0.0, 0.0];
        let err = state.step(&mut params, &[0.0, f64::NAN]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient(1));
        assert!(matches!(
            state.step(&mut params, &[0.0]),
            Err(OptimError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn project_positive_cases() {
        assert_eq!(project_positive(-0.3, POSITIVITY_FLOOR), 1e-6);
        assert_eq!(project_positive(2.0, POSITIVITY_FLOOR), 2.0);
        assert_eq!(project_positive(0.1, POSITIVITY_FLOOR), 0.1);
    }

    #[test]
    fn adaptive_lambda_arithmetic() {
        // max 10, mean 2, old 1 -> estimate 5, new 0.9 + 0.5 = 1.4
        let new = adaptive_lambda(&[-10.0, 4.0], &[2.0, -2.0], 1.0, 0.1);
        assert_relative_eq!(new, 1.4, epsilon = 1e-15);
    }

    #[test]
    fn adaptive_lambda_fixed_point() {
        let lambda = 2.5;
        // estimate equals old weight -> no movement
        let new = adaptive_lambda(&[5.0], &[2.0], lambda, 0.1);
        assert_relative_eq!(new, lambda, epsilon = 1e-15);
    }

    #[test]
    fn adaptive_lambda_zero_denominator_keeps_old() {
        let new = adaptive_lambda(&[1.0], &[0.0, 0.0], 3.0, 0.1);
        assert_eq!(new, 3.0);
        let new = adaptive_lambda(&[1.0], &[], 3.0, 0.1);
        assert_eq!(new, 3.0);
    }

    #[test]
    fn lambda_stays_positive() {
        let mut lambda = 1e-3;
        for k in 0..100 {
            lambda = adaptive_lambda(&[(k as f64) * 0.01], &[1.0], lambda, 0.1);
            assert!(lambda > 0.0);
        }
    }
}
