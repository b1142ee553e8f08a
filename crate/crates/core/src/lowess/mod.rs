//! Robust locally weighted scatterplot smoothing.
//!
//! Every point gets its own weighted straight-line fit over the nearest
//! `ceil(f * n)` points, weighted by the tricube of the distance relative to
//! the distance of the farthest of those neighbours. Robustifying passes then
//! down-weight points with large residuals using the bisquare of the residual
//! scaled by six times the median absolute residual.

mod multi;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use multi::lowess_fit_multi;

/// Relative threshold below which a local design is treated as degenerate.
const DEGENERATE_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-10;

/// Smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowessConfig {
    /// Fraction of the data used for each local fit, in (0, 1].
    #[serde(rename = "f")]
    pub bandwidth: f64,
    /// Number of robustifying passes.
    #[serde(rename = "k")]
    pub iterations: usize,
    /// Points closer than this to the previous fitted anchor are
    /// interpolated instead of fitted. 0 fits every point.
    pub delta: f64,
}

impl LowessConfig {
    pub fn new(bandwidth: f64, iterations: usize, delta: f64) -> Result<Self> {
        let cfg = LowessConfig {
            bandwidth,
            iterations,
            delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth <= 1.0) {
            return Err(Error::config(format!(
                "bandwidth must be in (0, 1], got {}",
                self.bandwidth
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!(
                "delta must be a non-negative finite number, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Neighbourhood size `ceil(f * n)`, kept within `[2, n]`.
    pub fn neighbours(&self, n: usize) -> usize {
        let raw = self.bandwidth * n as f64;
        // 0.3 * 100 is 30.000000000000004 in binary; snap near-integers first
        let rounded = raw.round();
        let q = if (raw - rounded).abs() < 1e-9 {
            rounded
        } else {
            raw.ceil()
        };
        (q as usize).clamp(2, n.max(2))
    }
}

/// Tricube kernel `(1 - (d / d_max)^3)^3` on `[0, d_max]`, zero outside.
pub fn tricube(d: f64, d_max: f64) -> Result<f64> {
    if !(d_max > 0.0) {
        return Err(Error::input(format!("tricube needs d_max > 0, got {d_max}")));
    }
    Ok(tricube_unchecked(d, d_max))
}

#[inline]
fn tricube_unchecked(d: f64, d_max: f64) -> f64 {
    let u = d / d_max;
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

/// Bisquare kernel `max(0, 1 - u^2)^2`.
#[inline]
pub fn bisquare(u: f64) -> f64 {
    let t = (1.0 - u * u).max(0.0);
    t * t
}

/// Weighted least-squares line, stored around the weighted mean of x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub x_mean: f64,
    pub y_mean: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn intercept(&self) -> f64 {
        self.y_mean - self.slope * self.x_mean
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.y_mean + self.slope * (x - self.x_mean)
    }
}

/// Minimises `sum w_j (y_j - b0 - b1 x_j)^2` and returns `(b0, b1)`.
///
/// When the weighted variance of `xs` is negligible relative to the weighted
/// mean of `xs^2` the slope is pinned to 0 and the intercept is the weighted
/// mean of `ys`.
pub fn weighted_linear_fit(xs: &[f64], ys: &[f64], ws: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() || xs.len() != ys.len() || xs.len() != ws.len() {
        return Err(Error::input(
            "weighted fit needs non-empty xs, ys and weights of equal length",
        ));
    }
    if ws.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::input("weights must be non-negative"));
    }
    let fit = fit_line(xs, ys, ws).ok_or_else(|| Error::input("all weights are zero"))?;
    Ok((fit.intercept(), fit.slope))
}

fn fit_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Option<LinearFit> {
    let (mut sw, mut swx, mut swy, mut swxx) = (0.0, 0.0, 0.0, 0.0);
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sw += w;
        swx += w * x;
        swy += w * y;
        swxx += w * x * x;
    }
    if !(sw > 0.0) {
        return None;
    }
    let x_mean = swx / sw;
    let y_mean = swy / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let dx = x - x_mean;
        sxx += w * dx * dx;
        sxy += w * dx * (y - y_mean);
    }
    let var = sxx / sw;
    let slope = if var < DEGENERATE_TOL * (swxx / sw + 1.0) {
        0.0
    } else {
        sxy / sxx
    };
    Some(LinearFit {
        x_mean,
        y_mean,
        slope,
    })
}

/// Smoothed values at sorted characteristic values, queryable anywhere by
/// interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr", into = "CurveRepr")]
pub struct FittedCurve {
    xs: Vec<f64>,
    fitted: Vec<f64>,
    config: LowessConfig,
}

#[derive(Serialize, Deserialize)]
struct CurveRepr {
    xs: Vec<f64>,
    fitted: Vec<f64>,
    config: LowessConfig,
}

impl TryFrom<CurveRepr> for FittedCurve {
    type Error = Error;

    fn try_from(r: CurveRepr) -> Result<Self> {
        FittedCurve::new(r.xs, r.fitted, r.config)
    }
}

impl From<FittedCurve> for CurveRepr {
    fn from(c: FittedCurve) -> Self {
        CurveRepr {
            xs: c.xs,
            fitted: c.fitted,
            config: c.config,
        }
    }
}

impl FittedCurve {
    pub fn new(xs: Vec<f64>, fitted: Vec<f64>, config: LowessConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != fitted.len() {
            return Err(Error::input("curve needs equally long, non-empty xs and fitted"));
        }
        if xs.iter().chain(&fitted).any(|v| !v.is_finite()) {
            return Err(Error::input("curve values must be finite"));
        }
        if xs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::input("curve xs must be non-decreasing"));
        }
        Ok(FittedCurve { xs, fitted, config })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn config(&self) -> &LowessConfig {
        &self.config
    }

    /// Value of the curve at `x`: the fitted value on an exact hit (first
    /// match among ties), linear interpolation between neighbours, and the
    /// endpoint value outside the fitted range.
    pub fn predict(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        let n = self.xs.len();
        let idx = self.xs.partition_point(|&v| v < x);
        if idx == n {
            return self.fitted[n - 1];
        }
        if self.xs[idx] == x || idx == 0 {
            return self.fitted[idx];
        }
        let (x0, x1) = (self.xs[idx - 1], self.xs[idx]);
        let (y0, y1) = (self.fitted[idx - 1], self.fitted[idx]);
        y0 + (x - x0) / (x1 - x0) * (y1 - y0)
    }
}

/// Fits the smoother and returns the curve over the sorted inputs.
pub fn lowess_fit(xs: &[f64], ys: &[f64], cfg: &LowessConfig) -> Result<FittedCurve> {
    check_inputs(xs, ys, cfg)?;
    let order = sort_order(xs);
    let sx: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let fitted = smooth_sorted(&sx, &sy, cfg);
    FittedCurve::new(sx, fitted, *cfg)
}

/// Fitted values aligned with the input order.
pub fn lowess_smooth(xs: &[f64], ys: &[f64], cfg: &LowessConfig) -> Result<Vec<f64>> {
    check_inputs(xs, ys, cfg)?;
    let order = sort_order(xs);
    let sx: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let fitted = smooth_sorted(&sx, &sy, cfg);
    let mut out = vec![0.0; xs.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = fitted[k];
    }
    Ok(out)
}

fn check_inputs(xs: &[f64], ys: &[f64], cfg: &LowessConfig) -> Result<()> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::input(format!(
            "xs and ys differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::input("LOWESS needs at least 2 points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::input("LOWESS inputs must be finite"));
    }
    Ok(())
}

/// Stable ascending order; equal values keep their input order.
fn sort_order(xs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    order
}

/// A point that receives its own local fit.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    index: usize,
    /// Distance to the q-th nearest neighbour.
    radius: f64,
    /// Half-open range of sorted positions within `radius`.
    lo: usize,
    hi: usize,
}

fn anchor_indices(xs: &[f64], delta: f64) -> Vec<usize> {
    let n = xs.len();
    if delta <= 0.0 {
        return (0..n).collect();
    }
    let mut anchors = vec![0];
    let mut last = 0;
    while last < n - 1 {
        let cut = xs[last] + delta;
        let within = xs.partition_point(|&v| v <= cut);
        let next = (within - 1).max(last + 1);
        anchors.push(next);
        last = next;
    }
    anchors
}

fn build_anchors(xs: &[f64], q: usize, delta: f64) -> Vec<Anchor> {
    let n = xs.len();
    let mut lo = 0;
    anchor_indices(xs, delta)
        .into_iter()
        .map(|i| {
            let xi = xs[i];
            while lo + q < n && xs[lo + q] - xi < xi - xs[lo] {
                lo += 1;
            }
            let radius = (xi - xs[lo]).max(xs[lo + q - 1] - xi).max(0.0);
            let a = xs.partition_point(|&v| xi - v > radius);
            let b = xs.partition_point(|&v| v - xi <= radius);
            Anchor {
                index: i,
                radius,
                lo: a,
                hi: b,
            }
        })
        .collect()
}

fn fit_anchor(xs: &[f64], ys: &[f64], anchor: &Anchor, robust: Option<&[f64]>) -> Option<f64> {
    let xi = xs[anchor.index];
    let range = anchor.lo..anchor.hi;
    let ws: Vec<f64> = range
        .clone()
        .map(|j| {
            let w = if anchor.radius > 0.0 {
                tricube_unchecked((xs[j] - xi).abs(), anchor.radius)
            } else {
                // every point in range sits exactly on xi
                1.0
            };
            robust.map_or(w, |r| w * r[j])
        })
        .collect();
    fit_line(&xs[range.clone()], &ys[range], &ws).map(|f| f.eval(xi))
}

fn smooth_sorted(xs: &[f64], ys: &[f64], cfg: &LowessConfig) -> Vec<f64> {
    let n = xs.len();
    let q = cfg.neighbours(n);
    let anchors = build_anchors(xs, q, cfg.delta);

    let mut at_anchor: Vec<f64> = anchors
        .par_iter()
        .map(|a| fit_anchor(xs, ys, a, None).expect("self weight is positive"))
        .collect();
    let mut fitted = interpolate(xs, &anchors, &at_anchor);

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
        at_anchor = anchors
            .par_iter()
            .zip(at_anchor.par_iter())
            // all neighbours robustly rejected: keep the previous estimate
            .map(|(a, &prev)| fit_anchor(xs, ys, a, Some(&robust)).unwrap_or(prev))
            .collect();
        fitted = interpolate(xs, &anchors, &at_anchor);
    }
    fitted
}

fn interpolate(xs: &[f64], anchors: &[Anchor], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    for (k, a) in anchors.iter().enumerate() {
        out[a.index] = values[k];
        if k + 1 == anchors.len() {
            break;
        }
        let b = &anchors[k + 1];
        let (x0, x1) = (xs[a.index], xs[b.index]);
        let (y0, y1) = (values[k], values[k + 1]);
        for j in a.index + 1..b.index {
            out[j] = if xs[j] == x0 {
                y0
            } else if xs[j] == x1 {
                y1
            } else {
                y0 + (xs[j] - x0) / (x1 - x0) * (y1 - y0)
            };
        }
    }
    out
}

/// True when the residual scale is zero up to rounding in `ys`, in which case
/// the fit is already exact and reweighting would only amplify noise.
pub(crate) fn negligible_scale(scale: f64, ys: &[f64]) -> bool {
    let magnitude = ys.iter().map(|y| y.abs()).sum::<f64>() / ys.len() as f64;
    scale <= RESIDUAL_TOL * magnitude
}

/// Element at position `(n - 1) / 2` of the sorted values.
pub(crate) fn lower_median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let mid = (buf.len() - 1) / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}
