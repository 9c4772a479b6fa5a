use super::Scalar;
use crate::error::{Error, Result};

/// First and second moment estimates for one parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: u64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam_step", "grad length", params.len(), grads.len()));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", "state length", params.len(), state.m.len()));
    }
    if t == 0 {
        return Err(Error::invalid("adam_step: step counter starts at 1"));
    }
    let one = T::one();
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = one - beta1.powi(t);
    let c2 = one - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (one - beta1) * g;
        *v = beta2 * *v + (one - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState { m: vec![0.5, 0.5], v: vec![0.25, 0.25] };
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 3).unwrap();
        assert!(s.m.iter().all(|&m| m < 0.5));
        assert!(s.v.iter().all(|&v| v < 0.25));
        let mut q = vec![1.0f64];
        let mut fresh = AdamState::new(1);
        adam_step(&mut q, &[0.0], &mut fresh, 0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_abs_diff_eq!(p[0], -0.1, epsilon = 1e-8);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![0.3f32, 0.3];
        let mut s = AdamState::new(2);
        for t in 1..=100 {
            let g = (t as f32 * 0.1).sin();
            adam_step(&mut p, &[g, g], &mut s, 5e-4, 0.9, 0.999, 1e-8, t).unwrap();
        }
        assert_eq!(p[0].to_bits(), p[1].to_bits());
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut p = vec![0.0f32; 2];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 1).is_err());
    }
}
