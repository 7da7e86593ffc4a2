//! Paired two-sided Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero; the statistic is undefined.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Midranks of `|d|` (1-based, ties averaged).
pub fn midranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Tests `a − b` for symmetry about zero. Zero differences are dropped; at
/// most [`EXACT_MAX_N`] remaining differences use the exact null
/// distribution, larger samples the tie- and continuity-corrected normal
/// approximation.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if let Some(v) = d.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("paired difference {v}")));
    }
    if d.is_empty() {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    if d.len() < 5 {
        return Err(Error::range("non-zero paired differences", d.len(), ">= 5"));
    }
    if d.len() <= EXACT_MAX_N {
        exact(&d)
    } else {
        normal(&d)
    }
}

fn exact(d: &[f64]) -> Result<WilcoxonResult> {
    let ranks = midranks(d);
    // Doubled midranks are integers, so the null distribution of 2·W+ is a
    // subset-sum count over them.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2: usize = d.iter().zip(&doubled).filter(|(v, _)| **v > 0.0).map(|(_, &r)| r).sum();
    let all = 2f64.powi(d.len() as i32);
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    Ok(WilcoxonResult {
        n: d.len(),
        w_plus: w2 as f64 / 2.0,
        p_value: (2.0 * lower.min(upper)).min(1.0),
        method: WilcoxonMethod::Exact,
    })
}

fn normal(d: &[f64]) -> Result<WilcoxonResult> {
    let n = d.len() as f64;
    let ranks = midranks(d);
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum::<f64>()
        + 0.0;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let std = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
        (2.0 * (1.0 - std.cdf(z))).min(1.0)
    };
    Ok(WilcoxonResult {
        n: d.len(),
        w_plus,
        p_value,
        method: WilcoxonMethod::Normal,
    })
}
