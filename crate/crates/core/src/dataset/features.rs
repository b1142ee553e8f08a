use std::sync::LazyLock;

use regex::Regex;

use crate::matrix::Matrix;

static HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*#{1,6} ").unwrap());
static LIST_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*+]|[0-9]+[.)]) ").unwrap());
static BOLD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\*\*[^\n]+?\*\*").unwrap());

/// Length in Unicode scalar values.
pub fn char_length(text: &str) -> f64 {
    text.chars().count() as f64
}

/// Headers + list items + bold spans.
///
/// A header is a line whose first non-blank run is 1 to 6 `#` followed by a
/// space. A list item is a line starting (after indentation) with `-`, `*`
/// or `+`, or digits followed by `.` or `)`, and then a space. Bold spans are
/// non-overlapping `**...**` with a non-empty interior on a single line.
pub fn markdown_features(text: &str) -> f64 {
    let lines = text
        .lines()
        .filter(|l| HEADER.is_match(l) || LIST_ITEM.is_match(l))
        .count();
    let bold = BOLD.find_iter(text).count();
    (lines + bold) as f64
}

/// Column-wise z-scores using the population standard deviation. Constant
/// columns map to zeros.
pub fn zscore_normalize(m: &Matrix) -> Matrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = m.as_slice().to_vec();
    if rows == 0 {
        return m.clone();
    }
    let n = rows as f64;
    for c in 0..cols {
        let mean = (0..rows).map(|r| m.get(r, c)).sum::<f64>() / n;
        let var = (0..rows).map(|r| (m.get(r, c) - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for r in 0..rows {
            out[r * cols + c] = if std > 0.0 {
                (m.get(r, c) - mean) / std
            } else {
                0.0
            };
        }
    }
    Matrix::new(rows, cols, out).expect("shape preserved")
}
