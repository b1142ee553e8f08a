use rayon::prelude::*;

use super::{bisquare, lower_median, negligible_scale, tricube_unchecked, LowessConfig, DEGENERATE_TOL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// LOWESS over several characteristics at once: Euclidean neighbourhoods and
/// a local affine fit. Returns fitted values aligned with the rows of `x`.
///
/// Columns are expected on comparable scales (z-scored). `delta` is not used
/// here; every row gets its own fit.
pub fn lowess_fit_multi(x: &Matrix, ys: &[f64], cfg: &LowessConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (n, p) = (x.rows(), x.cols());
    if p == 0 {
        return Err(Error::input("need at least one characteristic column"));
    }
    if ys.len() != n {
        return Err(Error::input(format!(
            "matrix has {n} rows but {} responses were given",
            ys.len()
        )));
    }
    if n <= p + 1 {
        return Err(Error::input(format!(
            "{p}-dimensional LOWESS needs at least {} points, got {n}",
            p + 2
        )));
    }
    if x.as_slice().iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::input("LOWESS inputs must be finite"));
    }

    let q = cfg.neighbours(n);
    let radii: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d = distances(x, i);
            let (_, r, _) = d.select_nth_unstable_by(q - 1, f64::total_cmp);
            *r
        })
        .collect();

    let mut fitted: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| fit_point(x, ys, i, radii[i], None).expect("self weight is positive"))
        .collect();

    let mut residuals = vec![0.0; n];
    for _ in 0..cfg.iterations {
        for ((r, &y), &f) in residuals.iter_mut().zip(ys).zip(&fitted) {
            *r = (y - f).abs();
        }
        let scale = lower_median(&residuals);
        if negligible_scale(scale, ys) {
            break;
        }
        let robust: Vec<f64> = residuals.iter().map(|&r| bisquare(r / (6.0 * scale))).collect();
        fitted = (0..n)
            .into_par_iter()
            .map(|i| fit_point(x, ys, i, radii[i], Some(&robust)).unwrap_or(fitted[i]))
            .collect();
    }
    Ok(fitted)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

fn distances(x: &Matrix, i: usize) -> Vec<f64> {
    let xi = x.row(i);
    (0..x.rows()).map(|j| distance(xi, x.row(j))).collect()
}

fn fit_point(
    x: &Matrix,
    ys: &[f64],
    i: usize,
    radius: f64,
    robust: Option<&[f64]>,
) -> Option<f64> {
    let (n, p) = (x.rows(), x.cols());
    let xi = x.row(i);
    let weights: Vec<(usize, f64)> = (0..n)
        .filter_map(|j| {
            let d = distance(xi, x.row(j));
            let w = if radius > 0.0 {
                tricube_unchecked(d, radius)
            } else if d == 0.0 {
                1.0
            } else {
                0.0
            };
            let w = robust.map_or(w, |r| w * r[j]);
            (w > 0.0).then_some((j, w))
        })
        .collect();

    let sw: f64 = weights.iter().map(|&(_, w)| w).sum();
    if !(sw > 0.0) {
        return None;
    }
    let mut mean = vec![0.0; p];
    let mut second = vec![0.0; p];
    let mut y_mean = 0.0;
    for &(j, w) in &weights {
        for (k, &v) in x.row(j).iter().enumerate() {
            mean[k] += w * v;
            second[k] += w * v * v;
        }
        y_mean += w * ys[j];
    }
    mean.iter_mut().for_each(|m| *m /= sw);
    second.iter_mut().for_each(|m| *m /= sw);
    y_mean /= sw;

    // weighted covariance of the centred design and its cross term with y
    let mut cov = vec![0.0; p * p];
    let mut cross = vec![0.0; p];
    let mut dx = vec![0.0; p];
    for &(j, w) in &weights {
        for (k, &v) in x.row(j).iter().enumerate() {
            dx[k] = v - mean[k];
        }
        let dy = ys[j] - y_mean;
        for a in 0..p {
            cross[a] += w * dx[a] * dy;
            for b in 0..=a {
                cov[a * p + b] += w * dx[a] * dx[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= sw);
    cross.iter_mut().for_each(|c| *c /= sw);

    let Some(beta) = cholesky_solve(&mut cov, &mut cross, p, &second) else {
        return Some(y_mean);
    };
    Some(
        y_mean
            + beta
                .iter()
                .zip(xi.iter().zip(&mean))
                .map(|(b, (v, m))| b * (v - m))
                .sum::<f64>(),
    )
}

/// Solves `cov * beta = rhs` in place via Cholesky on the lower triangle.
/// Returns `None` when a pivot is negligible relative to the matching
/// weighted second moment.
fn cholesky_solve(cov: &mut [f64], rhs: &mut [f64], p: usize, second: &[f64]) -> Option<Vec<f64>> {
    for k in 0..p {
        let mut pivot = cov[k * p + k];
        for m in 0..k {
            pivot -= cov[k * p + m] * cov[k * p + m];
        }
        if !(pivot >= DEGENERATE_TOL * (second[k] + 1.0)) {
            return None;
        }
        let root = pivot.sqrt();
        cov[k * p + k] = root;
        for r in k + 1..p {
            let mut v = cov[r * p + k];
            for m in 0..k {
                v -= cov[r * p + m] * cov[k * p + m];
            }
            cov[r * p + k] = v / root;
        }
    }
    // forward then back substitution
    for r in 0..p {
        let mut v = rhs[r];
        for m in 0..r {
            v -= cov[r * p + m] * rhs[m];
        }
        rhs[r] = v / cov[r * p + r];
    }
    for r in (0..p).rev() {
        let mut v = rhs[r];
        for m in r + 1..p {
            v -= cov[m * p + r] * rhs[m];
        }
        rhs[r] = v / cov[r * p + r];
    }
    Some(rhs.to_vec())
}
