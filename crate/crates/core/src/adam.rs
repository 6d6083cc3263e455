//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Strictly increasing; incremented once per `adam_step`.
    pub step: usize,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers shaped after the parameter list; defaults
    /// lr 0.001, beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn default_lr(params: &[&Tensor]) -> Self {
        Self::new(params, 0.001)
    }
}

/// One Adam update over all parameters, reading each tensor's accumulated
/// gradient buffer. `skip[i]` marks frozen parameters that must not move
/// (their moments are not advanced either).
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, skip: &[bool]) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} params vs state for {}",
            params.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if skip.get(i).copied().unwrap_or(false) {
            continue;
        }
        let n = p.numel();
        if state.first_moment[i].len() != n {
            return Err(Error::Dimension(format!(
                "adam_step: param {i} has {n} elements, moments have {}",
                state.first_moment[i].len()
            )));
        }
        let grad = p
            .grad()
            .ok_or_else(|| Error::Argument(format!("adam_step: param {i} has no gradient")))?
            .to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = p.data_mut();
        for e in 0..n {
            let gr = grad[e];
            m[e] = state.beta1 * m[e] + (1.0 - state.beta1) * gr;
            v[e] = state.beta2 * v[e] + (1.0 - state.beta2) * gr * gr;
            let m_hat = m[e] / bias1;
            let v_hat = v[e] / bias2;
            data[e] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns true when clipping fired.
pub fn clip_global_norm(params: &mut [&mut Tensor], max_norm: f64) -> bool {
    let mut sq = 0.0;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return false;
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(&[1.5, -2.0]).with_grad();
        let mut state = AdamState::default_lr(&[&p]);
        adam_step(&mut [&mut p], &mut state, &[false]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // Bias-corrected first step with g=1: m_hat = 1, v_hat = 1,
        // update = lr / (1 + eps) which is lr to within 1e-9.
        let mut p = Tensor::vector(&[0.0]).with_grad();
        p.add_to_grad(&[1.0]).unwrap();
        let mut state = AdamState::default_lr(&[&p]);
        adam_step(&mut [&mut p], &mut state, &[false]).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-9, "got {}", p.data()[0]);
    }

    #[test]
    fn default_learning_rate_is_one_thousandth() {
        let p = Tensor::vector(&[0.0]).with_grad();
        let state = AdamState::default_lr(&[&p]);
        assert_eq!(state.lr, 0.001);
        assert_eq!((state.beta1, state.beta2, state.epsilon), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn skip_freezes_parameter_bitwise() {
        let mut a = Tensor::vector(&[1.0]).with_grad();
        let mut b = Tensor::vector(&[1.0]).with_grad();
        a.add_to_grad(&[0.3]).unwrap();
        b.add_to_grad(&[0.3]).unwrap();
        let mut state = AdamState::default_lr(&[&a, &b]);
        adam_step(&mut [&mut a, &mut b], &mut state, &[false, true]).unwrap();
        assert_ne!(a.data()[0].to_bits(), 1.0_f64.to_bits());
        assert_eq!(b.data()[0].to_bits(), 1.0_f64.to_bits());
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut p = Tensor::vector(&[0.0, 0.0]).with_grad();
        p.add_to_grad(&[3.0, 4.0]).unwrap();
        let clipped = clip_global_norm(&mut [&mut p], 1.0);
        assert!(clipped);
        let g = p.grad().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(!clip_global_norm(&mut [&mut p], 5.0));
    }
}
