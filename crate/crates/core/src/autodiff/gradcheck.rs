//! Finite-difference verification of analytic gradients.

use super::params::ParamSet;
use super::tape::{GradError, Tape, Var};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare supplied analytic gradients against central finite differences
/// of `loss`. The error per entry is
/// `|analytic - central| / max(1, |central|)`; the max over all entries
/// is returned.
///
/// `loss` must be deterministic; it is evaluated twice at the base point
/// and any disagreement is reported as an error.
pub fn finite_difference_check(
    params: &mut ParamSet,
    h: f32,
    analytic: &[Vec<f32>],
    mut loss: impl FnMut(&ParamSet) -> Result<f64, GradError>,
) -> Result<FdReport, GradError> {
    assert!(h > 0.0, "step must be positive");
    let base_a = loss(params)?;
    let base_b = loss(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(GradError::NonDeterministic);
    }

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for idx in 0..params.len() {
        let n = params.get(super::params::ParamId(idx)).values.len();
        for i in 0..n {
            let orig = params.get(super::params::ParamId(idx)).values[i];
            params.get_mut(super::params::ParamId(idx)).values[i] = orig + h;
            let f_plus = loss(params)?;
            params.get_mut(super::params::ParamId(idx)).values[i] = orig - h;
            let f_minus = loss(params)?;
            params.get_mut(super::params::ParamId(idx)).values[i] = orig;

            let central = (f_plus - f_minus) / (2.0 * h as f64);
            let err = (analytic[idx][i] as f64 - central).abs() / central.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.get(super::params::ParamId(idx)).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Build the graph once for analytic gradients, then run the
/// finite-difference sweep against the same builder.
pub fn check_gradients(
    params: &mut ParamSet,
    h: f32,
    build: impl Fn(&ParamSet, &mut Tape, &[Var]) -> Result<Var, GradError>,
) -> Result<FdReport, GradError> {
    params.zero_grads();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let loss = build(params, &mut tape, &vars)?;
    tape.backward(loss)?;
    params.absorb_grads(&tape, &vars);
    let analytic: Vec<Vec<f32>> = params.iter().map(|p| p.grad.clone()).collect();

    finite_difference_check(params, h, &analytic, |ps| {
        let mut t = Tape::new();
        let vs = ps.bind(&mut t)?;
        let l = build(ps, &mut t, &vs)?;
        Ok(t.scalar_value(l))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let values: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        params.add_raw("w", 2, 3, values);
        let report = check_gradients(&mut params, 1e-3, |_, t, vs| {
            let sq = t.mul(vs[0], vs[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn three_layer_mlp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        params.add_weight("w1", 4, 5, &mut rng);
        params.add_bias("b1", 5);
        params.add_weight("w2", 5, 5, &mut rng);
        params.add_bias("b2", 5);
        params.add_weight("w3", 5, 1, &mut rng);
        let input: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let report = check_gradients(&mut params, 1e-3, move |_, t, vs| {
            let x = t.constant(input.clone(), 2, 4)?;
            let a1 = t.matmul(x, vs[0])?;
            let a1 = t.add(a1, vs[1])?;
            let z1 = t.tanh(a1)?;
            let a2 = t.matmul(z1, vs[2])?;
            let a2 = t.add(a2, vs[3])?;
            let z2 = t.sigmoid(a2)?;
            let out = t.matmul(z2, vs[4])?;
            let sq = t.mul(out, out)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        // Run a correct backward pass, then corrupt one analytic entry
        // and confirm the checker flags it.
        let mut params = ParamSet::new();
        params.add_raw("w", 1, 3, vec![0.4, -0.3, 0.9]);
        let build = |ps: &ParamSet| -> (f64, Vec<Vec<f32>>) {
            let mut t = Tape::new();
            let vs = ps.bind(&mut t).unwrap();
            let sq = t.mul(vs[0], vs[0]).unwrap();
            let l = t.sum(sq).unwrap();
            t.backward(l).unwrap();
            let g: Vec<f32> = t.grad(vs[0]).unwrap().iter().map(|&x| x as f32).collect();
            (t.scalar_value(l), vec![g])
        };
        let (_, mut analytic) = build(&params);
        analytic[0][1] *= 2.5; // deliberately wrong rule
        let report = finite_difference_check(&mut params, 1e-3, &analytic, |ps| {
            let mut t = Tape::new();
            let vs = ps.bind(&mut t)?;
            let sq = t.mul(vs[0], vs[0])?;
            let l = t.sum(sq)?;
            Ok(t.scalar_value(l))
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-1, "{report:?}");
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let mut params = ParamSet::new();
        params.add_raw("w", 1, 1, vec![1.0]);
        let mut counter = 0.0f64;
        let err = finite_difference_check(&mut params, 1e-3, &[vec![0.0]], |_| {
            counter += 1.0;
            Ok(counter)
        })
        .unwrap_err();
        assert!(matches!(err, GradError::NonDeterministic));
    }
}
