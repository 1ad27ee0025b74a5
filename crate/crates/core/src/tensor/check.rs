//! Central finite-difference verification of backward passes.

use super::{Tape, Var};
use crate::{Error, Real, Result};

/// Compare backward gradients of a scalar-valued graph against central finite
/// differences, returning the maximum relative error over every coordinate of
/// every input.
///
/// `build` receives a fresh tape plus one leaf per entry of `inputs` and must
/// return the scalar output. Relative error is `|a - n| / max(|a|, |n|, 1)`.
///
/// The evaluation point must sit away from non-smooth kinks (ReLU at 0,
/// smooth-L1 at the transition, bilinear samples on lattice lines); that is
/// the caller's responsibility.
pub fn finite_difference_check<F>(
    build: F,
    inputs: &[(Vec<Real>, Vec<usize>)],
    eps: Real,
) -> Result<Real>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");

    let eval = |points: &[Vec<Real>]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| tape.constant(data.clone(), shape.clone()))
            .collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape("finite_difference_check", "output must be scalar"));
        }
        Ok(tape.scalar_value(out))
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone()))
        .collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check", "output must be scalar"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<Real>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, (data, _))| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; data.len()]))
        .collect();

    let mut base: Vec<Vec<Real>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].0.len() {
            let orig = base[i][j];
            base[i][j] = orig + eps;
            let plus = eval(&base)?;
            base[i][j] = orig - eps;
            let minus = eval(&base)?;
            base[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / (1.0 as Real).max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};

    #[test]
    fn square_at_three() {
        // f(x) = x² at x = 3: analytic gradient 6
        let err = finite_difference_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum(sq))
            },
            &[(vec![3.0], vec![1])],
            1e-3,
        )
        .unwrap();
        // central differences are exact for quadratics up to rounding;
        // the bound tightens with the f64 feature
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |tape, vars| {
                let c = tape.scalar_const(4.25);
                let zero = tape.affine(vars[0], 0.0, 0.0);
                let z = tape.sum(zero);
                tape.add(c, z)
            },
            &[(vec![1.0, -2.0], vec![2])],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_away_from_kink() {
        // the kink at exactly 0 is excluded by precondition; check at ±1
        let err = finite_difference_check(
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum(r))
            },
            &[(vec![1.0, -1.0], vec![2])],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL);
    }

    #[test]
    fn composite_graph_matches() {
        let err = finite_difference_check(
            |tape, vars| {
                let h = tape.matmul(vars[0], vars[1])?;
                let r = tape.relu(h);
                let e = tape.exp(vars[2]);
                let s1 = tape.sum(r);
                let s2 = tape.sum(e);
                let p = tape.mul(s1, s2)?;
                tape.sub(p, s2)
            },
            &[
                (vec![0.31, -0.62, 0.47, 0.89], vec![2, 2]),
                (vec![0.15, 0.72, -0.44, 0.53], vec![2, 2]),
                (vec![0.2, -0.3], vec![2]),
            ],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < GRAD_CHECK_TOL, "rel err {err}");
    }
}
