//! Central finite-difference gradient verification.
//!
//! The checker rebuilds the loss through a caller-supplied closure, so the
//! analytic gradient and every perturbed evaluation run through the exact
//! same forward code.

use super::{TensorBase, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over all compared elements.
    pub max_rel_err: f64,
    /// Elements compared (analytic magnitude above the floor).
    pub compared: usize,
    /// Elements skipped because the analytic gradient was tiny.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Base step; the per-element step is `step * (1 + |x|)`.
    pub step: f64,
    /// Elements with `|analytic| <= floor` are skipped.
    pub floor: f64,
    /// Use the five-point fourth-order stencil instead of the three-point
    /// central difference. Deep composite losses need this: it tolerates a
    /// much larger step, which lifts the estimate out of rounding noise.
    pub fourth_order: bool,
}

/// Compare analytic gradients of `params` against central finite differences
/// of the scalar produced by `loss_fn`, using a second-order stencil.
///
/// Elements whose analytic gradient magnitude is at or below `floor` are
/// skipped; for the rest the relative error is
/// `|fd - analytic| / max(|fd|, |analytic|)`.
pub fn check_gradients<S, F>(
    params: &[&TensorBase<S>],
    loss_fn: F,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport, TensorError>
where
    S: Scalar,
    F: FnMut() -> Result<TensorBase<S>, TensorError>,
{
    check_gradients_with(
        params,
        loss_fn,
        FdOptions {
            step,
            floor,
            fourth_order: false,
        },
    )
}

/// [`check_gradients`] with an explicit stencil choice.
pub fn check_gradients_with<S, F>(
    params: &[&TensorBase<S>],
    mut loss_fn: F,
    opts: FdOptions,
) -> Result<GradCheckReport, TensorError>
where
    S: Scalar,
    F: FnMut() -> Result<TensorBase<S>, TensorError>,
{
    for p in params {
        p.clear_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    for p in params {
        p.clear_grad();
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        compared: 0,
        skipped: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let an = analytic[pi][j];
            if an.abs() <= opts.floor {
                report.skipped += 1;
                continue;
            }
            let original = p.data()[j];
            let base = original.to_f64_lossy();
            let h = opts.step * (1.0 + base.abs());
            let mut eval = |value: f64| -> Result<f64, TensorError> {
                p.with_data_mut(|d| d[j] = S::from_config(value));
                Ok(loss_fn()?.item().to_f64_lossy())
            };
            let fd = if opts.fourth_order {
                let f2p = eval(base + 2.0 * h)?;
                let f1p = eval(base + h)?;
                let f1m = eval(base - h)?;
                let f2m = eval(base - 2.0 * h)?;
                (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h)
            } else {
                let up = eval(base + h)?;
                let down = eval(base - h)?;
                (up - down) / (2.0 * h)
            };
            p.with_data_mut(|d| d[j] = original);
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.compared += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn quadratic_gradient_verifies() {
        let x = T::param(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let report = check_gradients(&[&x], || Ok(x.mul(&x)?.sum_all()), 1e-5, 1e-8).unwrap();
        assert_eq!(report.compared, 3);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The analytic pass sees x^2 but every finite-difference evaluation
        // sees x^3, so the checker must flag the disagreement.
        let x = T::param(vec![2.0], &[1]).unwrap();
        let xc = x.clone();
        let mut use_cube = false;
        let report = check_gradients(
            &[&x],
            move || {
                let l = if use_cube {
                    xc.mul(&xc)?.mul(&xc)?.sum_all()
                } else {
                    xc.mul(&xc)?.sum_all()
                };
                use_cube = true;
                Ok(l)
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-2);
    }

    #[test]
    fn tiny_gradients_are_skipped_not_compared() {
        let x = T::param(vec![0.0], &[1]).unwrap();
        // loss = x^3 has zero gradient at 0.
        let report = check_gradients(
            &[&x],
            || Ok(x.mul(&x)?.mul(&x)?.sum_all()),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.compared, 0);
        assert_eq!(report.skipped, 1);
    }
}
