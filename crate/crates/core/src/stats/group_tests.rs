//! Unpaired two-group tests.

use serde::{Deserialize, Serialize};

use super::special::{normal_two_sided_p, student_t_two_sided_p};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchT> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::SampleSize(format!(
            "welch_t needs at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(WelchT { t, df, p_value: student_t_two_sided_p(t, df) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    /// Exact enumeration of all group assignments.
    Exact,
    /// Tie-corrected normal approximation with continuity correction.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first group: rank sum minus `n_a(n_a + 1)/2`.
    pub u: f64,
    pub p_value: f64,
    pub method: MwuMethod,
}

/// Largest group size for which the exact distribution is used.
pub const EXACT_MAX: usize = 8;

/// Midranks doubled so they are integers.
fn doubled_midranks(pooled: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && pooled[idx[end + 1]] == pooled[idx[start]] {
            end += 1;
        }
        // ranks are 1-based: average of (start+1)..=(end+1), doubled
        let r2 = (start + 1 + end + 1) as u64;
        for &i in &idx[start..=end] {
            ranks[i] = r2;
        }
        start = end + 1;
    }
    ranks
}

/// Mann–Whitney U test. Exact when both groups have at most
/// [`EXACT_MAX`] values, normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let method = if a.len() <= EXACT_MAX && b.len() <= EXACT_MAX { MwuMethod::Exact } else { MwuMethod::Normal };
    mann_whitney_u_with(a, b, method)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: MwuMethod) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::SampleSize("mann_whitney_u needs non-empty groups".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in mann_whitney_u input".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let rank_sum2: u64 = ranks[..na].iter().sum();
    let u = rank_sum2 as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    let p_value = match method {
        MwuMethod::Exact => exact_p(&ranks, na, rank_sum2),
        MwuMethod::Normal => {
            let mean = (na * nb) as f64 / 2.0;
            let mut tie_term = 0.0;
            let mut sorted = ranks.clone();
            sorted.sort_unstable();
            for group in sorted.chunk_by(|x, y| x == y) {
                let t = group.len() as f64;
                tie_term += t * t * t - t;
            }
            let nf = n as f64;
            let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
            if var <= 0.0 {
                1.0
            } else {
                let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
                normal_two_sided_p(z).min(1.0)
            }
        }
    };
    Ok(MannWhitney { u, p_value, method })
}

/// Two-sided exact p: the share of size-`na` subsets whose doubled rank sum
/// is at least as far from its mean as the observed one. Counts come from a
/// subset-sum dynamic program over (subset size, rank sum).
fn exact_p(ranks: &[u64], na: usize, observed2: u64) -> f64 {
    let n = ranks.len();
    let max_sum: u64 = ranks.iter().sum();
    let width = max_sum as usize + 1;
    let mut dp = vec![0f64; (na + 1) * width];
    dp[0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=na).rev() {
            for s in (r..width).rev() {
                let from = dp[(k - 1) * width + s - r];
                if from != 0.0 {
                    dp[k * width + s] += from;
                }
            }
        }
    }
    // expected doubled rank sum: na (n + 1)
    let centre2 = (na * (n + 1)) as i64;
    let obs_dev = (observed2 as i64 - centre2).abs();
    let (mut extreme, mut total) = (0.0, 0.0);
    for s in 0..width {
        let c = dp[na * width + s];
        if c == 0.0 {
            continue;
        }
        total += c;
        if (s as i64 - centre2).abs() >= obs_dev {
            extreme += c;
        }
    }
    (extreme / total).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_groups_give_t_zero_and_p_one() {
        let r = welch_t(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn shifted_groups_are_significant() {
        let r = welch_t(&[1.0, 2.0, 3.0], &[11.0, 12.0, 13.0]).unwrap();
        // scipy.stats.ttest_ind(equal_var=False)
        assert!((r.t + 12.247_448_713_915_89).abs() < 1e-12);
        assert!((r.df - 4.0).abs() < 1e-12);
        assert!((r.p_value - 2.552_167_494_419_268_7e-4).abs() < 1e-9);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn welch_degenerate_inputs() {
        assert!(matches!(welch_t(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::ZeroVariance)));
        assert!(matches!(welch_t(&[1.0], &[0.0, 2.0]), Err(Error::SampleSize(_))));
    }

    #[test]
    fn mwu_two_by_two_exact() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, MwuMethod::Exact);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn mwu_all_ties_gives_one() {
        let r = mann_whitney_u(&[5.0, 5.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_u_with(&[5.0; 10], &[5.0; 10], MwuMethod::Normal).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn mwu_normal_branch_for_large_groups() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 + 25.0).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, MwuMethod::Normal);
        assert!(r.p_value < 0.001);
    }

    #[test]
    fn u_is_symmetric() {
        let a = [1.0, 4.0, 4.0, 7.0];
        let b = [2.0, 4.0, 9.0];
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        assert_eq!(ab.u + ba.u, 12.0);
        assert!((ab.p_value - ba.p_value).abs() < 1e-15);
    }

    /// Two-sided p by listing every way to pick the first group's positions.
    fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let u_of = |mask: u32| -> f64 {
            let mut u = 0.0;
            for i in 0..n {
                if mask & (1 << i) == 0 {
                    continue;
                }
                for j in 0..n {
                    if mask & (1 << j) != 0 {
                        continue;
                    }
                    if pooled[i] > pooled[j] {
                        u += 1.0;
                    } else if pooled[i] == pooled[j] {
                        u += 0.5;
                    }
                }
            }
            u
        };
        let observed = u_of((1u32 << a.len()) - 1);
        let centre = (a.len() * b.len()) as f64 / 2.0;
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            total += 1;
            if (u_of(mask) - centre).abs() >= (observed - centre).abs() - 1e-9 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    proptest::proptest! {
        #[test]
        fn exact_branch_matches_enumeration(
            a in proptest::collection::vec(0u8..6, 1..=6),
            b in proptest::collection::vec(0u8..6, 1..=6),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let r = mann_whitney_u(&a, &b).unwrap();
            proptest::prop_assert_eq!(r.method, MwuMethod::Exact);
            proptest::prop_assert!((r.p_value - enumerate_p(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_branch_tracks_exact_on_size_eight() {
        let a: Vec<f64> = (0..8).map(|i| (i * 3) as f64).collect();
        let b: Vec<f64> = (0..8).map(|i| (i * 3 + 7) as f64).collect();
        let exact = mann_whitney_u_with(&a, &b, MwuMethod::Exact).unwrap();
        let approx = mann_whitney_u_with(&a, &b, MwuMethod::Normal).unwrap();
        // scipy.stats.mannwhitneyu, method="exact" and "asymptotic"
        assert!((exact.p_value - 0.082_983_682_983_682_97).abs() < 1e-12);
        assert!((approx.p_value - 0.083_122_936_959_903_33).abs() < 1e-7);
        assert_eq!(exact.u, 15.0);
    }
}
