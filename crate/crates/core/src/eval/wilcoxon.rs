//! Two-sided Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the exact null
/// distribution is used; above it the normal approximation applies.
pub const EXACT_MAX_N: usize = 25;

/// Smallest accepted number of pairs.
pub const MIN_PAIRS: usize = 6;

/// Which arm has the larger signed-rank sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AGreater,
    BGreater,
    Neither,
}

impl Direction {
    pub fn flipped(self) -> Direction {
        match self {
            Direction::AGreater => Direction::BGreater,
            Direction::BGreater => Direction::AGreater,
            Direction::Neither => Direction::Neither,
        }
    }
}

/// Outcome of [`wilcoxon_signed_rank`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonTest {
    /// Pairs left after dropping zero differences.
    pub n_nonzero: usize,
    /// Sum of the ranks of positive differences `a - b`.
    pub w_plus: f64,
    /// Sum of the ranks of negative differences.
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    /// Set when every difference is zero; the p-value is then 1.
    pub all_zero: bool,
    pub direction: Direction,
}

/// Midranks of `values` (ranks start at 1, ties share their mean rank),
/// returned doubled so they are integers, together with the tie group
/// sizes.
fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, their mean doubled is start + 1 + end
        let r2 = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            ranks[i] = r2;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Two-sided exact p-value of the doubled statistic `w2` under the
/// sign-flip null over the given doubled ranks.
fn exact_p(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all: f64 = counts.iter().sum();
    let w2 = w2 as usize;
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Two-sided normal-approximation p-value with tie-corrected variance and
/// no continuity correction.
fn normal_p(n: usize, w_plus: f64, ties: &[usize]) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean) / var.sqrt();
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Wilcoxon signed-rank test of `a` against `b`.
///
/// Zero differences are dropped. Ties among the remaining absolute
/// differences get midranks. With at most [`EXACT_MAX_N`] nonzero
/// differences the p-value comes from the exact sign-flip distribution of
/// the (mid)ranks; otherwise from the normal approximation.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonTest> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("wilcoxon: paired vectors differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::Eval(format!("wilcoxon: needs at least {MIN_PAIRS} pairs, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Eval("wilcoxon: non-finite value in the paired vectors".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonTest {
            n_nonzero: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
            all_zero: true,
            direction: Direction::Neither,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks2, ties) = doubled_midranks(&abs);
    let w2_plus: u64 = ranks2.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w2_total: u64 = ranks2.iter().sum();
    let w_plus = w2_plus as f64 / 2.0;
    let w_minus = (w2_total - w2_plus) as f64 / 2.0;
    let exact = n <= EXACT_MAX_N;
    let p_value = if exact { exact_p(&ranks2, w2_plus) } else { normal_p(n, w_plus, &ties) };
    let direction = if w_plus > w_minus {
        Direction::AGreater
    } else if w_minus > w_plus {
        Direction::BGreater
    } else {
        Direction::Neither
    };
    Ok(WilcoxonTest {
        n_nonzero: n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value,
        exact,
        all_zero: false,
        direction,
    })
}
