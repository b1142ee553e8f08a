//! Independent reference implementations used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use reward_calib::synth::SynthRng;

/// `ceil(f * n)` clamped to `[2, n]`, snapping values within 1e-9 of an
/// integer first.
pub fn neighbour_count(f: f64, n: usize) -> usize {
    let raw = f * n as f64;
    let q = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (q as usize).max(2).min(n)
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        (1.0 - u.powi(3)).powi(3)
    }
}

/// Per-point weights from the q-th nearest neighbour distance, computed by
/// sorting every distance list.
fn local_weights(dist: &[f64], q: usize) -> Vec<f64> {
    let mut sorted = dist.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let radius = sorted[q - 1];
    dist.iter()
        .map(|&d| {
            if radius > 0.0 {
                if d <= radius {
                    tricube(d / radius)
                } else {
                    0.0
                }
            } else if d == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Solves the (p+1)x(p+1) weighted normal equations with an intercept by
/// Gaussian elimination with partial pivoting; returns the fitted value at
/// `at`, or the weighted mean when the system is singular.
fn weighted_affine(rows: &[Vec<f64>], ys: &[f64], ws: &[f64], at: &[f64]) -> f64 {
    let p = at.len() + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for ((row, &y), &w) in rows.iter().zip(ys).zip(ws) {
        // coordinates relative to the query point, so beta[0] is the fit
        let mut z = vec![1.0];
        z.extend(row.iter().zip(at).map(|(r, a)| r - a));
        for r in 0..p {
            for c in 0..p {
                a[r][c] += w * z[r] * z[c];
            }
            a[r][p] += w * z[r] * y;
        }
    }
    let sw: f64 = ws.iter().sum();
    let mean = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let scale = a[0][0].abs().max(1.0) * a.iter().map(|r| r[..p].iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(1.0, f64::max);
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        if a[col][col].abs() < 1e-10 * scale {
            return mean;
        }
        for r in 0..p {
            if r != col {
                let factor = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..1).map(|r| a[r][p] / a[r][r]).collect();
    beta[0]
}

/// Textbook robust LOWESS: every point refit from scratch on every pass.
pub fn lowess_oracle_multi(rows: &[Vec<f64>], ys: &[f64], f: f64, iterations: usize) -> Vec<f64> {
    let n = rows.len();
    let q = neighbour_count(f, n);
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
    };
    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let d: Vec<f64> = rows.iter().map(|r| dist(&rows[i], r)).collect();
            local_weights(&d, q)
        })
        .collect();
    let mut robust = vec![1.0; n];
    let mut fitted = vec![0.0; n];
    for pass in 0..=iterations {
        if pass > 0 {
            let mut res: Vec<f64> = ys.iter().zip(&fitted).map(|(y, f)| (y - f).abs()).collect();
            let abs = res.clone();
            res.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let s = res[(n - 1) / 2];
            let magnitude = ys.iter().map(|y| y.abs()).sum::<f64>() / n as f64;
            if s <= 1e-10 * magnitude {
                break;
            }
            robust = abs
                .iter()
                .map(|r| {
                    let u = r / (6.0 * s);
                    (1.0 - u * u).max(0.0).powi(2)
                })
                .collect();
        }
        let prev = fitted.clone();
        for i in 0..n {
            let ws: Vec<f64> = base[i].iter().zip(&robust).map(|(w, r)| w * r).collect();
            fitted[i] = if ws.iter().sum::<f64>() > 0.0 {
                weighted_affine(rows, ys, &ws, &rows[i])
            } else {
                prev[i]
            };
        }
    }
    fitted
}

pub fn lowess_oracle(xs: &[f64], ys: &[f64], f: f64, iterations: usize) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    lowess_oracle_multi(&rows, ys, f, iterations)
}

/// Ranks by counting smaller and equal values.
pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Line-by-line markdown counter written without regular expressions.
pub fn markdown_oracle(text: &str) -> usize {
    let mut count = 0;
    for line in text.split('\n') {
        let t = line.trim_start();
        let hashes = t.chars().take_while(|&c| c == '#').count();
        if (1..=6).contains(&hashes) && t[hashes..].starts_with(' ') {
            count += 1;
        } else {
            let mut chars = t.chars();
            match chars.next() {
                Some('-' | '*' | '+') if chars.next() == Some(' ') => count += 1,
                Some(c) if c.is_ascii_digit() => {
                    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
                    let rest = &t[digits..];
                    if rest.starts_with(". ") || rest.starts_with(") ") {
                        count += 1;
                    }
                }
                _ => {}
            }
        }
        // bold: leftmost "**", then the first "**" that leaves a non-empty
        // interior
        let bytes = line.as_bytes();
        let mut i = 0;
        while i + 1 < bytes.len() {
            if bytes[i] == b'*' && bytes[i + 1] == b'*' {
                // interior must hold at least one character
                let start = i + 2 + line[i + 2..].chars().next().map_or(1, char::len_utf8);
                match line.get(start..).and_then(|rest| rest.find("**")) {
                    Some(off) => {
                        count += 1;
                        i = start + off + 2;
                    }
                    None => break,
                }
            } else {
                i += 1;
            }
        }
    }
    count
}

pub fn random_points(rng: &mut SynthRng, n: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..n).map(|_| scale * rng.uniform()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (x / scale * 6.0).sin() + 0.3 * rng.normal()).collect();
    (xs, ys)
}
