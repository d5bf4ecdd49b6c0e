//! Adam with bias correction, plus global-norm gradient clipping.

use super::params::ParamSet;
use super::tape::GradError;

pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn moments(&self, idx: usize) -> (&[f32], &[f32]) {
        (&self.m[idx], &self.v[idx])
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<(), GradError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((val, &g), (mi, vi)) in p
            .values
            .iter_mut()
            .zip(p.grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            if !g.is_finite() {
                return Err(GradError::NonFiniteGrad { op: "adam_step" });
            }
            let g = g as f64;
            let mn = state.beta1 * (*mi as f64) + (1.0 - state.beta1) * g;
            let vn = state.beta2 * (*vi as f64) + (1.0 - state.beta2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let mhat = mn / bc1;
            let vhat = vn / bc2;
            *val = (*val as f64 - lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the scale that was applied (1.0 when no clipping fired).
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> Result<f64, GradError> {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = params.grad_norm();
    if !norm.is_finite() {
        return Err(GradError::NonFiniteGrad { op: "clip_grad_norm" });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        for g in &mut p.grad {
            *g = (*g as f64 * scale) as f32;
        }
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(values: Vec<f32>, grad: Vec<f32>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = values.len();
        let id = p.add_raw("w", 1, n, values);
        p.get_mut(id).grad = grad;
        p
    }

    #[test]
    fn zero_grad_is_a_fixed_point() {
        let mut p = single_param(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &mut st, 0.01).unwrap();
        }
        assert_eq!(p.get(super::super::params::ParamId(0)).values, vec![1.0, -2.0]);
        let (m, v) = st.moments(0);
        assert!(m.iter().all(|&x| x == 0.0) && v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for &g in &[0.003f32, 8.0, -0.41] {
            let mut p = single_param(vec![0.0], vec![g]);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &mut st, 0.001).unwrap();
            let moved = p.get(super::super::params::ParamId(0)).values[0];
            let expected = -0.001 * g.signum();
            assert!(
                (moved - expected).abs() < 1e-5,
                "grad {g}: moved {moved}, expected ~{expected}"
            );
        }
    }

    #[test]
    fn constant_grad_step_approaches_lr_sign() {
        // Oracle: iterate the Adam recurrences in f64 and compare the
        // parameter trajectory against the implementation.
        let g = 0.37f64;
        let lr = 0.002;
        let mut p = single_param(vec![0.0], vec![g as f32]);
        let mut st = AdamState::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            adam_step(&mut p, &mut st, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mhat / (vhat.sqrt() + 1e-8);
            let got = p.get(super::super::params::ParamId(0)).values[0] as f64;
            assert!((got - x).abs() < 1e-5, "step {t}: {got} vs {x}");
        }
        // Late steps move by ~lr in the -sign(g) direction.
        let before = p.get(super::super::params::ParamId(0)).values[0];
        adam_step(&mut p, &mut st, lr).unwrap();
        let after = p.get(super::super::params::ParamId(0)).values[0];
        let step = (after - before) as f64;
        assert!((step + lr).abs() < 0.05 * lr, "step {step}");
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut p = single_param(vec![0.0, 0.0], vec![0.3, 0.4]);
        let scale = clip_grad_norm(&mut p, 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(p.get(super::super::params::ParamId(0)).grad, vec![0.3, 0.4]);
    }

    #[test]
    fn clip_scales_three_four_five() {
        let mut p = single_param(vec![0.0, 0.0], vec![3.0, 4.0]);
        let scale = clip_grad_norm(&mut p, 1.0).unwrap();
        assert!((scale - 0.2).abs() < 1e-12);
        let g = &p.get(super::super::params::ParamId(0)).grad;
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn clip_is_global_across_tensors() {
        let mut p = ParamSet::new();
        let a = p.add_raw("a", 1, 2, vec![0.0, 0.0]);
        let b = p.add_raw("b", 1, 2, vec![0.0, 0.0]);
        p.get_mut(a).grad = vec![3.0, 0.0];
        p.get_mut(b).grad = vec![0.0, 4.0];
        let scale = clip_grad_norm(&mut p, 2.5).unwrap();
        assert!((scale - 0.5).abs() < 1e-12);
        assert!((p.get(a).grad[0] - 1.5).abs() < 1e-6);
        assert!((p.get(b).grad[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clip_preserves_direction_and_never_grows_norm() {
        let mut p = single_param(vec![0.0; 3], vec![1.0, -2.0, 2.0]);
        let before: Vec<f32> = p.get(super::super::params::ParamId(0)).grad.clone();
        let norm_before = p.grad_norm();
        clip_grad_norm(&mut p, 1.0).unwrap();
        let after = &p.get(super::super::params::ParamId(0)).grad;
        let norm_after = p.grad_norm();
        assert!(norm_after <= norm_before + 1e-6);
        assert!(norm_after <= 1.0 + 1e-6);
        let dot: f64 = before.iter().zip(after.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
        let cos = dot / (norm_before * norm_after);
        assert!((cos - 1.0).abs() < 1e-6);
    }
}
