//! Central finite-difference oracle.
//!
//! Works only through forward evaluations of a closure, so it stays
//! independent of the reverse sweep it is used to check.

/// Relative error with an absolute floor, `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of a finite-difference probe of one coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub numeric: f64,
    /// Step actually used; smaller than requested when the stencil had to be
    /// shrunk to stay on one smooth piece.
    pub step: f64,
}

/// Central difference of `f` around `x[i]`.
///
/// `f` returns `(value, piece)` where `piece` identifies the smooth piece of
/// a piecewise function (see `Graph::kink_signature`). If the stencil
/// straddles a kink the step is shrunk by 100x, up to `retries` times.
pub fn central_difference(
    x: &mut [f64],
    i: usize,
    eps: f64,
    retries: usize,
    mut f: impl FnMut(&[f64]) -> (f64, u64),
) -> Probe {
    let orig = x[i];
    let (_, base_piece) = f(x);
    let mut step = eps;
    let mut last = 0.0;
    for _ in 0..=retries {
        x[i] = orig + step;
        let (fp, pp) = f(x);
        x[i] = orig - step;
        let (fm, pm) = f(x);
        x[i] = orig;
        last = (fp - fm) / (2.0 * step);
        if pp == base_piece && pm == base_piece {
            return Probe { numeric: last, step };
        }
        step /= 100.0;
    }
    Probe {
        numeric: last,
        step: step * 100.0,
    }
}

/// Numeric gradient of a smooth scalar function.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| central_difference(&mut x, i, eps, 0, |v| (f(v), 0)).numeric)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_gradient() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn kink_shrinks_the_step() {
        let mut x = [2e-6];
        let probe = central_difference(&mut x, 0, 1e-5, 3, |v| {
            (v[0].abs(), u64::from(v[0] > 0.0))
        });
        assert!(probe.step < 1e-5);
        assert!((probe.numeric - 1.0).abs() < 1e-9);
    }
}
