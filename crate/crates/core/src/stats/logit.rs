//! Maximum-likelihood logistic regression by iteratively reweighted least
//! squares, with Wald inference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::special::{normal_two_sided_p, Z_975};
use crate::error::{Error, Result};

pub const INTERCEPT: &str = "intercept";
pub const MAX_ITER: usize = 100;
pub const LL_TOL: f64 = 1e-10;
/// A non-intercept coefficient beyond this magnitude while the likelihood is
/// still rising is treated as (quasi-)complete separation. Columns with a
/// standard deviation above one are measured per SD, so the rule does not
/// depend on the units of wide-range predictors.
pub const SEPARATION_LIMIT: f64 = 15.0;
/// Relative residual norm below which a column counts as a linear
/// combination of the preceding ones.
pub const COLLINEAR_TOL: f64 = 1e-10;

/// Row-major design with an intercept in column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    columns: Vec<String>,
    x: Vec<f64>,
    outcome: Vec<f64>,
    /// Rows dropped because a required cell was missing.
    pub dropped: usize,
}

impl DesignMatrix {
    /// `predictors` excludes the intercept; each row holds one value per
    /// predictor. Rows with any missing cell are dropped and counted.
    pub fn new<I>(predictors: &[&str], rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<Option<f64>>, bool)>,
    {
        let mut columns = vec![INTERCEPT.to_string()];
        columns.extend(predictors.iter().map(|s| s.to_string()));
        let mut x = Vec::new();
        let mut outcome = Vec::new();
        let mut dropped = 0;
        for (cells, y) in rows {
            if cells.len() != predictors.len() {
                return Err(Error::Shape(format!(
                    "design row has {} cells, expected {}",
                    cells.len(),
                    predictors.len()
                )));
            }
            if cells.iter().any(|c| c.is_none()) {
                dropped += 1;
                continue;
            }
            let vals: Vec<f64> = cells.into_iter().flatten().collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite value in design matrix".into()));
            }
            x.push(1.0);
            x.extend(vals);
            outcome.push(if y { 1.0 } else { 0.0 });
        }
        Ok(DesignMatrix { columns, x, outcome, dropped })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    /// Subset of rows (with repetition), as used by resampling.
    pub fn select(&self, rows: &[usize]) -> DesignMatrix {
        let mut x = Vec::with_capacity(rows.len() * self.n_cols());
        let mut outcome = Vec::with_capacity(rows.len());
        for &i in rows {
            x.extend_from_slice(self.row(i));
            outcome.push(self.outcome[i]);
        }
        DesignMatrix { columns: self.columns.clone(), x, outcome, dropped: 0 }
    }

    /// Population standard deviation of column `j`.
    fn column_sd(&self, j: usize) -> f64 {
        let n = self.n_rows() as f64;
        let p = self.n_cols();
        let col = || self.x.iter().skip(j).step_by(p);
        let mean = col().sum::<f64>() / n;
        (col().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows(), self.n_cols(), &self.x)
    }

    /// Columns that are (numerically) linear combinations of earlier ones,
    /// together with the earlier columns they load on.
    fn collinear_columns(&self) -> Option<Vec<String>> {
        let x = self.matrix();
        let p = x.ncols();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut independent: Vec<usize> = Vec::new();
        for j in 0..p {
            let col = x.column(j).into_owned();
            let norm = col.norm();
            let mut r = col.clone();
            for q in &basis {
                let c = q.dot(&r);
                r -= q * c;
            }
            if norm == 0.0 || r.norm() <= COLLINEAR_TOL.sqrt() * norm {
                // express column j through the independent columns found so far
                let mut names = Vec::new();
                if !independent.is_empty() {
                    let sub = x.select_columns(&independent);
                    if let Ok(coef) = sub.clone().svd(true, true).solve(&col, 1e-12) {
                        for (k, &c) in coef.iter().enumerate() {
                            if c.abs() > 1e-8 {
                                names.push(self.columns[independent[k]].clone());
                            }
                        }
                    }
                }
                names.push(self.columns[j].clone());
                return Some(names);
            }
            basis.push(r.normalize());
            independent.push(j);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    #[serde(with = "super::nonfinite")]
    pub beta: f64,
    #[serde(with = "super::nonfinite")]
    pub std_error: f64,
    #[serde(with = "super::nonfinite")]
    pub odds_ratio: f64,
    #[serde(with = "super::nonfinite::pair")]
    pub ci95: [f64; 2],
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub coefficients: Vec<Coefficient>,
    pub log_likelihood: f64,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl AssociationResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn betas(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.beta).collect()
    }

    /// Predicted probabilities for a design with the same columns.
    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        let names: Vec<&str> = self.coefficients.iter().map(|c| c.name.as_str()).collect();
        if names != x.columns().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "design columns {:?} do not match fitted columns {:?}",
                x.columns(),
                names
            )));
        }
        let beta = self.betas();
        Ok((0..x.n_rows()).map(|i| sigmoid(dot(x.row(i), &beta))).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn log_likelihood(x: &DesignMatrix, beta: &[f64]) -> f64 {
    (0..x.n_rows())
        .map(|i| {
            let eta = dot(x.row(i), beta);
            x.outcome[i] * eta - softplus(eta)
        })
        .sum()
}

/// Gradient and observed information at `beta`.
fn score_and_information(x: &DesignMatrix, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.n_cols();
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    for i in 0..x.n_rows() {
        let row = x.row(i);
        let mu = sigmoid(dot(row, beta));
        let w = mu * (1.0 - mu);
        let r = x.outcome[i] - mu;
        for a in 0..p {
            g[a] += row[a] * r;
            let wa = w * row[a];
            for b in 0..=a {
                h[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    (g, h)
}

pub fn logit_fit(x: &DesignMatrix) -> Result<AssociationResult> {
    let n = x.n_rows();
    let positives = x.outcome.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateOutcome);
    }
    if let Some(columns) = x.collinear_columns() {
        return Err(Error::Collinearity { columns });
    }
    let p = x.n_cols();
    let unit: Vec<f64> = (0..p).map(|j| x.column_sd(j).max(1.0)).collect();
    let mut beta = vec![0.0; p];
    let mut ll = log_likelihood(x, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let (g, h) = score_and_information(x, &beta);
        let chol = h.cholesky().ok_or_else(|| {
            Error::Convergence(format!("information matrix lost positive definiteness at iteration {iterations}"))
        })?;
        let step = chol.solve(&g);
        // Newton step, halved until the likelihood does not decrease.
        let mut scale = 1.0;
        let (mut candidate, mut cand_ll);
        loop {
            candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect::<Vec<_>>();
            cand_ll = log_likelihood(x, &candidate);
            if cand_ll >= ll - LL_TOL || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        let delta = cand_ll - ll;
        beta = candidate;
        ll = cand_ll;
        if delta.abs() < LL_TOL {
            converged = true;
            break;
        }
        let magnitude = |j: usize| beta[j].abs() * unit[j];
        if let Some(j) = (1..p).filter(|&j| magnitude(j) > SEPARATION_LIMIT).max_by(|&a, &b| magnitude(a).total_cmp(&magnitude(b))) {
            return Err(Error::Separation { column: x.columns[j].clone(), limit: SEPARATION_LIMIT });
        }
    }
    if !converged {
        log::warn!("logistic fit did not converge in {MAX_ITER} iterations");
    }
    let (_, h) = score_and_information(x, &beta);
    let cov = h
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Collinearity { columns: x.columns[1..].to_vec() })?;
    let coefficients = beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = cov[(j, j)].sqrt();
            Coefficient {
                name: x.columns[j].clone(),
                beta: b,
                std_error: se,
                odds_ratio: b.exp(),
                ci95: [(b - Z_975 * se).exp(), (b + Z_975 * se).exp()],
                p_value: normal_two_sided_p(b / se).clamp(f64::MIN_POSITIVE, 1.0),
            }
        })
        .collect();
    Ok(AssociationResult { coefficients, log_likelihood: ll, n, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two(a: usize, b: usize, c: usize, d: usize) -> DesignMatrix {
        let mut rows = Vec::new();
        rows.extend(std::iter::repeat_n((vec![Some(1.0)], true), a));
        rows.extend(std::iter::repeat_n((vec![Some(1.0)], false), b));
        rows.extend(std::iter::repeat_n((vec![Some(0.0)], true), c));
        rows.extend(std::iter::repeat_n((vec![Some(0.0)], false), d));
        DesignMatrix::new(&["x"], rows).unwrap()
    }

    #[test]
    fn saturated_two_by_two_matches_closed_form() {
        let fit = logit_fit(&two_by_two(6, 2, 2, 6)).unwrap();
        let x = fit.coefficient("x").unwrap();
        assert!((x.beta - 9f64.ln()).abs() < 1e-8);
        assert!((x.odds_ratio - 9.0).abs() < 1e-7);
        let se = (1.0 / 6.0 + 0.5 + 0.5 + 1.0 / 6.0f64).sqrt();
        assert!((x.std_error - se).abs() < 1e-6);
        assert!(fit.converged);
        // intercept = ln(c/d)
        assert!((fit.coefficients[0].beta - (2.0f64 / 6.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn duplicated_rows_shrink_se_by_root_two() {
        let base = two_by_two(6, 2, 2, 6);
        let dup = two_by_two(12, 4, 4, 12);
        let f1 = logit_fit(&base).unwrap();
        let f2 = logit_fit(&dup).unwrap();
        for (a, b) in f1.coefficients.iter().zip(&f2.coefficients) {
            assert!((a.beta - b.beta).abs() < 1e-8);
            assert!((b.std_error - a.std_error / 2f64.sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn one_class_outcome_is_degenerate() {
        let x = DesignMatrix::new(&["x"], (0..5).map(|i| (vec![Some(i as f64)], true))).unwrap();
        assert!(matches!(logit_fit(&x), Err(Error::DegenerateOutcome)));
    }

    #[test]
    fn separable_data_reports_separation() {
        let x = DesignMatrix::new(&["x"], (0..10).map(|i| (vec![Some(i as f64)], i >= 5))).unwrap();
        match logit_fit(&x) {
            Err(Error::Separation { column, .. }) => assert_eq!(column, "x"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn separation_on_a_wide_range_column_is_caught() {
        // raw slope stays far below the limit; the per-SD slope does not
        let x = DesignMatrix::new(&["abeta42"], (0..20).map(|i| (vec![Some(500.0 + 50.0 * i as f64)], i < 8))).unwrap();
        assert!(matches!(logit_fit(&x), Err(Error::Separation { .. })));
    }

    #[test]
    fn duplicate_column_is_collinear_and_named() {
        let rows = (0..20).map(|i| {
            let v = (i % 7) as f64;
            (vec![Some(v), Some((i % 3) as f64), Some(2.0 * v)], i % 2 == 0)
        });
        let x = DesignMatrix::new(&["a", "b", "a2"], rows).unwrap();
        match logit_fit(&x) {
            Err(Error::Collinearity { columns }) => assert_eq!(columns, vec!["a".to_string(), "a2".to_string()]),
            other => panic!("expected collinearity, got {other:?}"),
        }
    }

    #[test]
    fn missing_cells_are_dropped_and_counted() {
        let rows = vec![(vec![Some(1.0)], true), (vec![None], false), (vec![Some(0.0)], false)];
        let x = DesignMatrix::new(&["x"], rows).unwrap();
        assert_eq!(x.n_rows(), 2);
        assert_eq!(x.dropped, 1);
    }

    fn noisy_design(seed: u64, n: usize, scale: f64) -> DesignMatrix {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, &[99]);
        let rows: Vec<_> = (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(-2.0..2.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let y = rng.random::<f64>() < sigmoid(0.3 + 0.8 * a - 0.5 * b);
                (vec![Some(a * scale), Some(b)], y)
            })
            .collect();
        DesignMatrix::new(&["a", "b"], rows).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rescaling_a_column_rescales_beta(seed in 0u64..1000, c in 0.1f64..10.0) {
            let f1 = logit_fit(&noisy_design(seed, 120, 1.0)).unwrap();
            let fc = logit_fit(&noisy_design(seed, 120, c)).unwrap();
            let b1 = f1.coefficient("a").unwrap().beta;
            let bc = fc.coefficient("a").unwrap().beta;
            prop_assert!((bc - b1 / c).abs() < 1e-6, "{bc} vs {}", b1 / c);
            let p1 = f1.predict(&noisy_design(seed, 120, 1.0)).unwrap();
            let pc = fc.predict(&noisy_design(seed, 120, c)).unwrap();
            for (a, b) in p1.iter().zip(&pc) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn wald_interval_is_consistent(seed in 0u64..1000) {
            let fit = logit_fit(&noisy_design(seed, 60, 1.0)).unwrap();
            for c in &fit.coefficients {
                prop_assert!(c.ci95[0] <= c.odds_ratio && c.odds_ratio <= c.ci95[1]);
                prop_assert!(c.p_value > 0.0 && c.p_value <= 1.0);
                let excludes_one = c.ci95[0] > 1.0 || c.ci95[1] < 1.0;
                let z = (c.beta / c.std_error).abs();
                // skip the measure-zero boundary where rounding could go either way
                if (z - Z_975).abs() > 1e-9 {
                    prop_assert_eq!(c.p_value < 0.05, excludes_one);
                }
            }
        }
    }
}
