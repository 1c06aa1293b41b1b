use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;

use super::tables::{Choice, PreferenceTable};
use super::EvalError;

/// Largest sample size whose p value is computed exactly.
pub const EXACT_MAX_N: usize = 20;

/// Relative slack when comparing outcome probabilities, so that outcomes
/// equal to the observed one up to rounding are counted.
const MINLIKE_SLACK: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Wilcoxon {
    /// Rank sum of the positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    #[serde(rename = "W")]
    pub w: f64,
    pub p: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks of `|x|`, doubled so ties stay integral, and the tie
/// group sizes.
pub(crate) fn doubled_ranks(x: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()));
    let mut ranks = vec![0u64; x.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]].abs() == x[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. For `n ≤ 20` the p value is exact: the
/// null distribution of the positive rank sum over all `2ⁿ` sign
/// assignments (tied magnitudes share their average rank). Larger samples
/// use the normal approximation with tie-corrected variance and a
/// continuity correction.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon, EvalError> {
    if let Some(d) = diffs.iter().find(|d| !d.is_finite()) {
        return Err(EvalError::Invalid(format!("non-finite difference {d}")));
    }
    let x: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if x.is_empty() {
        return Err(EvalError::DegenerateSample);
    }
    let n = x.len();
    let (ranks, ties) = doubled_ranks(&x);
    let t_plus: u64 = x.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as u64;
    let (w_plus, w_minus) = (t_plus as f64 / 2.0, (total - t_plus) as f64 / 2.0);
    let (p, exact) = if n <= EXACT_MAX_N { (exact_p(&ranks, t_plus), true) } else { (normal_p(n, &ties, w_plus), false) };
    Ok(Wilcoxon { w_plus, w_minus, w: w_plus.min(w_minus), p, n, exact })
}

/// Counts sign assignments by their doubled positive rank sum.
pub(crate) fn exact_p(ranks: &[u64], t_plus: u64) -> f64 {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let t = t_plus as usize;
    let le: u64 = counts[..=t].iter().sum();
    let ge: u64 = counts[t..].iter().sum();
    let all = (1u64 << ranks.len()) as f64;
    (2.0 * le.min(ge) as f64 / all).min(1.0)
}

pub(crate) fn normal_p(n: usize, ties: &[usize], w_plus: f64) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Adjusted {
    pub p_adj: f64,
    pub significant: bool,
}

/// `p_adj = min(1, p·m)` over `m` tests; significant iff `p_adj < alpha`.
///
/// Panics if a p value lies outside `[0, 1]`.
pub fn bonferroni_adjust(p_values: &[f64], alpha: f64) -> Vec<Adjusted> {
    let m = p_values.len() as f64;
    p_values
        .iter()
        .map(|&p| {
            assert!((0.0..=1.0).contains(&p), "p value {p} outside [0, 1]");
            let p_adj = (p * m).min(1.0);
            Adjusted { p_adj, significant: p_adj < alpha }
        })
        .collect()
}

/// Exact two-sided binomial test: the total probability of every outcome
/// no more likely than `k` under `Binomial(n, p0)`.
pub fn binomial_test(k: u64, n: u64, p0: f64) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::Invalid("binomial test needs at least one trial".into()));
    }
    if k > n {
        return Err(EvalError::Invalid(format!("{k} successes out of {n} trials")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(EvalError::Invalid(format!("null probability {p0} outside (0, 1)")));
    }
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let mut pmf: Vec<f64> = (0..=n).map(|i| (ln_binomial(n, i) + i as f64 * lp + (n - i) as f64 * lq).exp()).collect();
    if p0 == 0.5 {
        for i in 0..pmf.len() / 2 {
            pmf[n as usize - i] = pmf[i];
        }
    }
    let bound = pmf[k as usize] * (1.0 + MINLIKE_SLACK);
    Ok(pmf.iter().filter(|&&q| q <= bound).sum::<f64>().min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tally {
    pub count_a: u64,
    pub count_b: u64,
    pub p: f64,
}

pub fn preference_tally(table: &PreferenceTable) -> Result<Tally, EvalError> {
    if table.trials.is_empty() {
        return Err(EvalError::Invalid("empty preference table".into()));
    }
    let count_a = table.trials.iter().filter(|t| t.choice == Choice::A).count() as u64;
    let count_b = table.trials.len() as u64 - count_a;
    Ok(Tally { count_a, count_b, p: binomial_test(count_a, count_a + count_b, 0.5)? })
}
