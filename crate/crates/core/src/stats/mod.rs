//! Nonparametric inter-model comparison: Kruskal-Wallis omnibus test,
//! Dunn's post-hoc pairwise comparisons with Bonferroni correction,
//! rank-based effect sizes, and Pearson correlation.
//!
//! All functions are pure over value inputs and safe for concurrent use.
//! Ties are always handled with mid-ranks and the tie-corrected H statistic,
//! since clipped scores frequently tie at zero.

mod special;

pub use special::{chi_squared_sf, ln_gamma, normal_two_sided_p, reg_gamma_lower, reg_gamma_upper};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("at least two groups are required, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} has no observations")]
    EmptyGroup(usize),
    #[error("at least {required} total observations are required, got {got}")]
    TooFewObservations { required: usize, got: usize },
    #[error("non-finite observation encountered")]
    NonFinite,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance in input series")]
    ZeroVariance,
    #[error("effect size requires n > k >= 2, got n={n}, k={k}")]
    InvalidEffectSizeInput { n: usize, k: usize },
    #[error("expected {expected} group labels, got {got}")]
    LabelMismatch { expected: usize, got: usize },
}

/// How to turn a Kruskal-Wallis H statistic into an effect size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EffectSizeMethod {
    /// H * (n + 1) / (n^2 - 1), the textbook epsilon-squared.
    EpsilonSquared,
    /// (H - k + 1) / (n - k), the eta-squared estimate based on H.
    #[default]
    EtaSquaredH,
}

impl EffectSizeMethod {
    /// The snake_case name used on the wire and in report columns.
    pub fn label(&self) -> &'static str {
        match self {
            EffectSizeMethod::EpsilonSquared => "epsilon_squared",
            EffectSizeMethod::EtaSquaredH => "eta_squared_h",
        }
    }
}

/// Outcome of the Kruskal-Wallis omnibus test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmnibusResult {
    pub h_statistic: f64,
    /// From the chi-squared survival function with `k_groups - 1` degrees
    /// of freedom.
    pub p_value: f64,
    pub n_total: usize,
    pub k_groups: usize,
    /// Absent in the degenerate case n == k (all groups singletons).
    pub effect_size: Option<f64>,
    pub effect_method: EffectSizeMethod,
}

/// One Dunn pairwise comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseResult {
    pub group_a: String,
    pub group_b: String,
    pub z_statistic: f64,
    pub p_raw: f64,
    /// Bonferroni: min(1, p_raw * k(k-1)/2).
    pub p_adjusted: f64,
}

fn check_groups(groups: &[Vec<f64>]) -> Result<usize, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    let mut n = 0;
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(StatsError::EmptyGroup(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        n += g.len();
    }
    if n < 3 {
        return Err(StatsError::TooFewObservations {
            required: 3,
            got: n,
        });
    }
    Ok(n)
}

/// Mid-ranks of `values` (1-based; tied observations share the average of
/// the positions they occupy).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the mid-rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Sum of t^3 - t over tie groups of the pooled sample.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut acc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        acc += t * t * t - t;
        i = j + 1;
    }
    acc
}

/// Kruskal-Wallis omnibus test with the default effect-size method.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<OmnibusResult, StatsError> {
    kruskal_wallis_with_method(groups, EffectSizeMethod::default())
}

/// Kruskal-Wallis omnibus test across `groups`.
///
/// Ties receive mid-ranks and H is divided by the tie correction
/// 1 - sum(t^3 - t) / (n^3 - n). When every pooled observation is identical
/// the correction degenerates and H is 0 by convention.
pub fn kruskal_wallis_with_method(
    groups: &[Vec<f64>],
    method: EffectSizeMethod,
) -> Result<OmnibusResult, StatsError> {
    let n = check_groups(groups)?;
    let k = groups.len();

    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = midranks(&pooled);

    let nf = n as f64;
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        offset += g.len();
    }
    h = 12.0 / (nf * (nf + 1.0)) * h - 3.0 * (nf + 1.0);

    let correction = 1.0 - tie_term(&pooled) / (nf * nf * nf - nf);
    let h = if correction <= 0.0 {
        0.0 // all pooled values identical
    } else {
        (h / correction).max(0.0)
    };

    let df = (k - 1) as f64;
    let p_value = chi_squared_sf(h, df);
    let effect = if n > k {
        Some(effect_size(h, n, k, method)?)
    } else {
        None
    };

    Ok(OmnibusResult {
        h_statistic: h,
        p_value,
        n_total: n,
        k_groups: k,
        effect_size: effect,
        effect_method: method,
    })
}

/// Dunn's post-hoc test for all group pairs, Bonferroni-corrected.
///
/// `labels` names the groups in order and must match `groups` in length.
pub fn dunn_posthoc(
    groups: &[Vec<f64>],
    labels: &[String],
) -> Result<Vec<PairwiseResult>, StatsError> {
    let n = check_groups(groups)?;
    if labels.len() != groups.len() {
        return Err(StatsError::LabelMismatch {
            expected: groups.len(),
            got: labels.len(),
        });
    }
    let k = groups.len();
    let nf = n as f64;

    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let ranks = midranks(&pooled);

    let mut mean_ranks = Vec::with_capacity(k);
    let mut offset = 0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        mean_ranks.push(r / g.len() as f64);
        offset += g.len();
    }

    // Pooled variance term with tie correction.
    let base_var = nf * (nf + 1.0) / 12.0 - tie_term(&pooled) / (12.0 * (nf - 1.0));
    let n_pairs = (k * (k - 1) / 2) as f64;

    let mut results = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let scale = base_var * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64);
            let z = if scale <= 0.0 {
                0.0 // degenerate: every pooled observation identical
            } else {
                (mean_ranks[i] - mean_ranks[j]) / scale.sqrt()
            };
            let p_raw = normal_two_sided_p(z);
            results.push(PairwiseResult {
                group_a: labels[i].clone(),
                group_b: labels[j].clone(),
                z_statistic: z,
                p_raw,
                p_adjusted: (p_raw * n_pairs).min(1.0),
            });
        }
    }
    Ok(results)
}

/// Effect size for a Kruskal-Wallis H statistic over n observations in k groups.
pub fn effect_size(
    h: f64,
    n: usize,
    k: usize,
    method: EffectSizeMethod,
) -> Result<f64, StatsError> {
    if k < 2 || n <= k {
        return Err(StatsError::InvalidEffectSizeInput { n, k });
    }
    let nf = n as f64;
    let kf = k as f64;
    Ok(match method {
        EffectSizeMethod::EpsilonSquared => h * (nf + 1.0) / (nf * nf - 1.0),
        EffectSizeMethod::EtaSquaredH => (h - kf + 1.0) / (nf - kf),
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewObservations {
            required: 2,
            got: x.len(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    // Single square root of the product: when x == y elementwise the
    // three sums agree bitwise and sqrt(s*s) round-trips to s, so
    // self-correlation is exactly 1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
