use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params vs {} grads", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() && state.step == 0 {
        *state = AdamState::new(params);
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || state.m[i].len() != p.len() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.dims(), g.dims()),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradientOverflow);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gv;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let grads = vec![Tensor::vector(vec![3.0, -0.02, 1e3])];
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for (p, g) in params[0].data().iter().zip(grads[0].data()) {
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p - expected).abs() < 1e-18, "{p} vs {expected}");
            assert!((p + cfg.lr * g.signum()).abs() < cfg.lr * 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_is_overflow() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut state = AdamState::default();
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "gradient overflow");
        assert_eq!(params[0].data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::default();
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
    }

    /// Scalar recurrence on f(p) = p^2 from p = 1 with lr = 0.1.
    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::default();
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            adam_step(&mut params, &[g], &mut state, &cfg).unwrap();
        }
        let p = params[0].data()[0];
        assert!(p.abs() < 0.1, "{p}");
        // Value of the same recurrence evaluated independently in Python.
        assert!((p - -7.21798647770884e-06).abs() < 1e-12, "{p}");
    }
}
