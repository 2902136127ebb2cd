//! Central finite-difference verification of analytic gradients.
//!
//! The probe rebuilds the computation from scratch for every evaluation, so
//! agreement here means the tape's backward really matches the function the
//! forward pass computes, not some shared intermediate.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Differences at or below this magnitude count as agreement regardless of
/// scale, so that noise around an exactly-zero gradient does not fail.
pub const ABSOLUTE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinate_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences, coordinate by coordinate.
///
/// `f` must build the function on the supplied graph starting from the
/// given input node; it is called once per probe with a fresh graph.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor, coord: Option<usize>| -> Result<(Graph, NodeId, NodeId)> {
        let g = Graph::new();
        let x = g.param(t.clone());
        let out = f(&g, x)?;
        let v = g.value(out);
        if !v.is_scalar() {
            panic!("grad_check: function output must be scalar, got shape {:?}", v.shape());
        }
        if !v.as_scalar().is_finite() {
            return Err(Error::NonFinite { context: "grad_check probe".into(), coordinate: coord });
        }
        Ok((g, x, out))
    };

    let (g, x, out) = eval(point, None)?;
    g.backward(out);
    let analytic = g
        .grad(x)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut errors = Vec::with_capacity(point.numel());
    for c in 0..point.numel() {
        let mut hi = point.clone();
        hi.data_mut()[c] += epsilon;
        let mut lo = point.clone();
        lo.data_mut()[c] -= epsilon;
        let (gh, _, oh) = eval(&hi, Some(c))?;
        let (gl, _, ol) = eval(&lo, Some(c))?;
        let numeric = (gh.scalar_value(oh) - gl.scalar_value(ol)) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check finite difference".into(),
                coordinate: Some(c),
            });
        }
        let a = analytic[c];
        let diff = (a - numeric).abs();
        let err = if diff <= ABSOLUTE_FLOOR {
            0.0
        } else {
            diff / a.abs().max(numeric.abs())
        };
        errors.push(err);
    }

    let (worst, max_err) = errors
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });

    Ok(GradCheckReport {
        coordinate_errors: errors,
        max_relative_error: max_err,
        worst_coordinate: worst,
        tolerance,
        passed: max_err <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_norm_gradient() {
        // f(x) = ||x||_2 at (3,4): gradient (0.6, 0.8).
        let point = Tensor::matrix(1, 2, vec![3.0, 4.0]);
        let report = grad_check(
            |g, x| {
                let origin = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
                Ok(g.sum_all(g.pairwise_dist(x, origin, crate::graph::DistanceMetric::Euclidean)))
            },
            &point,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_relative_error);

        let g = Graph::new();
        let x = g.param(point);
        let origin = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let f = g.sum_all(g.pairwise_dist(x, origin, crate::graph::DistanceMetric::Euclidean));
        g.backward(f);
        let grad = g.grad(x).unwrap();
        assert!((grad.data()[0] - 0.6).abs() < 1e-12);
        assert!((grad.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disagreement_is_detected() {
        // relu probed exactly at its kink: the subgradient is 0 but the
        // central difference sees 0.5, which the harness must flag.
        let point = Tensor::vector(vec![0.0]);
        let report = grad_check(
            |g, x| Ok(g.sum_all(g.relu(x))),
            &point,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_coordinate, 0);
        assert!(report.max_relative_error > 0.9);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let point = Tensor::vector(vec![2.0, 3.0]);
        let err = grad_check(
            |g, x| {
                let pole = g.constant(Tensor::vector(vec![1.0, f64::INFINITY]));
                Ok(g.sum_all(g.mul(x, pole)))
            },
            &point,
            DEFAULT_EPSILON,
            DEFAULT_TOLERANCE,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { .. } => {}
            other => panic!("expected NonFinite, got {other}"),
        }
    }
}
