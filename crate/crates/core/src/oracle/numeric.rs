//! Central finite differences and tolerance-checked tensor comparison.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::fixtures::NamedTensor;
use crate::hyperattention::Params;

/// Step used for all finite-difference checks at `f64`.
pub const FD_EPS: f64 = 1e-5;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(p + ε e_i) - f(p - ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    exec::map_indices(params.len(), |i| {
        let mut p = params.to_vec();
        central(i, eps, |delta| {
            p[i] = params[i] + delta;
            Ok(f(&p))
        })
    })
    .into_iter()
    .collect()
}

fn central(i: usize, eps: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let up = at(eps)?;
    let down = at(-eps)?;
    if !(up.is_finite() && down.is_finite()) {
        return Err(Error::NonFinite(format!("objective at coordinate {i}")));
    }
    Ok((up - down) / (2.0 * eps))
}

/// Finite differences over every tensor a [`Params`] value exposes.
pub fn finite_diff_params<P, F>(params: &P, f: F, eps: f64) -> Result<Vec<NamedTensor>>
where
    P: Params + Clone + Sync,
    F: Fn(&P) -> Result<f64> + Sync + Send,
{
    let mut layout = Vec::new();
    params.visit("", &mut |name, shape, values| {
        layout.push(NamedTensor::new(name, shape.to_vec(), vec![0.0; values.len()]))
    });
    let total: usize = layout.iter().map(|t| t.values.len()).sum();
    let eval = |coord: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        let mut seen = 0;
        p.visit_mut("", &mut |_, _, values| {
            if coord >= seen && coord < seen + values.len() {
                values[coord - seen] += delta;
            }
            seen += values.len();
        });
        f(&p)
    };
    let diffs = exec::map_indices(total, |i| central(i, eps, |delta| eval(i, delta)));
    let mut it = diffs.into_iter();
    for t in &mut layout {
        for v in &mut t.values {
            *v = it.next().expect("coordinate count matches layout")?;
        }
    }
    Ok(layout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `tensor[index]` of the largest relative error.
    pub worst_location: String,
    pub tolerance: f64,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares `actual` against `reference` tensor by tensor.
///
/// Relative error is `|a - r| / max(|r|, floor)`; the check passes iff the
/// largest one is `<= tol`.
pub fn compare_with_floor(
    actual: &[NamedTensor],
    reference: &[NamedTensor],
    tol: f64,
    floor: f64,
) -> Result<ComparisonReport> {
    if actual.len() != reference.len() {
        return Err(shape_err("tensor set", &[reference.len()], &[actual.len()]));
    }
    let mut report = ComparisonReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_location: String::new(),
        tolerance: tol,
        pass: true,
    };
    for (a, r) in actual.iter().zip(reference) {
        if a.shape != r.shape || a.values.len() != r.values.len() {
            return Err(shape_err(&r.name, &r.shape, &a.shape));
        }
        for (i, (x, y)) in a.values.iter().zip(&r.values).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / y.abs().max(floor);
            if !abs.is_finite() {
                report.max_abs_err = f64::INFINITY;
                report.max_rel_err = f64::INFINITY;
                report.worst_location = format!("{}[{i}]", r.name);
                report.pass = false;
                return Ok(report);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst_location.is_empty() {
                report.max_rel_err = rel;
                report.worst_location = format!("{}[{i}]", r.name);
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

pub fn compare(actual: &[NamedTensor], reference: &[NamedTensor], tol: f64) -> Result<ComparisonReport> {
    compare_with_floor(actual, reference, tol, REL_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: Vec<f64>) -> Vec<NamedTensor> {
        vec![NamedTensor::new("x", vec![values.len()], values)]
    }

    #[test]
    fn sum_has_unit_gradient() {
        let p = vec![0.3, -1.0, 2.0, 5.5];
        let g = finite_diff_grad(|x| x.iter().sum(), &p, FD_EPS).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let p = vec![0.3, -1.0, 2.0, 5.5];
        let g = finite_diff_grad(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(), &p, FD_EPS).unwrap();
        for (a, b) in g.iter().zip(&p) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_objective_errors() {
        assert!(finite_diff_grad(|x| x[0].ln(), &[5e-6], FD_EPS).is_err());
    }

    #[test]
    fn identical_inputs_pass_with_zero_error() {
        let a = t(vec![1.0, 2.0, -3.0]);
        let r = compare(&a, &a, 0.0).unwrap();
        assert_eq!((r.max_abs_err, r.max_rel_err, r.pass), (0.0, 0.0, true));
    }

    #[test]
    fn worst_location_found() {
        let a = t(vec![1.0, 2.0, -3.0, 4.0]);
        let b = t(vec![1.0, 2.0, -3.3, 4.0]);
        let r = compare(&b, &a, 1e-3).unwrap();
        assert_eq!(r.worst_location, "x[2]");
        assert!(!r.pass);
    }

    #[test]
    fn tolerance_is_closed() {
        let r = compare(&t(vec![1.5]), &t(vec![1.0]), 0.5).unwrap();
        assert_eq!(r.max_rel_err, 0.5);
        assert!(r.pass);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(compare(&t(vec![1.0]), &t(vec![1.0, 2.0]), 0.1).is_err());
    }
}
