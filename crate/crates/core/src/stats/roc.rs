//! ROC analysis, fixed-FPR operating points and percentile bootstrap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive. The first point uses `+inf`,
    /// written as the string `"inf"` in JSON.
    #[serde(with = "super::nonfinite")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Twice the Mann–Whitney U of the positives: `2·concordant + ties`, computed
/// from doubled midranks so it is an exact integer.
fn doubled_u(scores: &[f64], labels: &[bool], pos: usize) -> u64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2 = 0u64;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[start]] {
            end += 1;
        }
        let r2 = (start + end + 2) as u64;
        rank_sum2 += r2 * idx[start..=end].iter().filter(|&&i| labels[i]).count() as u64;
        start = end + 1;
    }
    rank_sum2 - (pos * (pos + 1)) as u64
}

fn auc_only(scores: &[f64], labels: &[bool], pos: usize, neg: usize) -> f64 {
    doubled_u(scores, labels, pos) as f64 / (2 * pos * neg) as f64
}

/// AUC (the concordance probability, ties counting half) and the ROC points
/// at every distinct threshold.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateOutcome);
    }
    let idx = order_desc(scores);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let t = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == t {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: t });
    }
    Ok(RocCurve { auc: auc_only(scores, labels, pos, neg), points })
}

/// Area under a piecewise-linear ROC curve.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// TPR of the ROC curve at `fpr`, linearly interpolated; at a vertical
/// segment the upper end is used.
pub fn tpr_at(points: &[RocPoint], fpr: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.fpr <= fpr && fpr <= b.fpr {
            let v = if b.fpr == a.fpr { b.tpr.max(a.tpr) } else { a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr) };
            best = best.max(v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Positive call when `score > threshold`.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.sensitivity() + self.specificity()) / 2.0
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub achieved_fpr: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Smallest threshold whose false positive rate (with strict `>`) does not
/// exceed `fpr_cap`. The threshold is always one of the negative scores.
pub fn fixed_fpr_operating_point(scores: &[f64], labels: &[bool], fpr_cap: f64) -> Result<OperatingPoint> {
    if !(0.0..1.0).contains(&fpr_cap) {
        return Err(Error::Argument(format!("fpr_cap must be in [0, 1), got {fpr_cap}")));
    }
    let (_, neg) = check_inputs(scores, labels)?;
    if neg == 0 {
        return Err(Error::NoNegatives);
    }
    let mut negs: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    negs.sort_by(|a, b| b.total_cmp(a));
    // the tolerance absorbs rounding in cap·N (0.2·5 is not exactly 1)
    let allowed = fpr_cap * neg as f64 + 1e-9;
    // walk distinct negative scores downwards; #neg strictly above negs[k] is
    // the index of its first occurrence
    let mut threshold = negs[0];
    let mut k = 0;
    while k < negs.len() {
        if k as f64 > allowed {
            break;
        }
        threshold = negs[k];
        let v = negs[k];
        while k < negs.len() && negs[k] == v {
            k += 1;
        }
    }
    let confusion = Confusion::at(scores, labels, threshold);
    Ok(OperatingPoint {
        threshold,
        achieved_fpr: confusion.fpr(),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        balanced_accuracy: confusion.balanced_accuracy(),
        f1: confusion.f1(),
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    /// Individual rows (visits).
    #[default]
    Row,
    /// Whole clusters (subjects), keeping all of a subject's rows together.
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_iter: usize,
    pub seed: u64,
    pub fpr_cap: f64,
    pub unit: ResampleUnit,
    /// Grid size for the pointwise ROC band.
    pub band_points: usize,
}

impl BootstrapConfig {
    pub fn new(n_iter: usize, seed: u64) -> Self {
        BootstrapConfig { n_iter, seed, fpr_cap: 0.2, unit: ResampleUnit::Row, band_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub fpr: f64,
    pub tpr_lo: f64,
    pub tpr_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub auc_ci95: [f64; 2],
    pub balanced_accuracy_ci95: [f64; 2],
    pub f1_ci95: [f64; 2],
    pub roc_band: Vec<BandPoint>,
    pub n_iter: usize,
    /// Resamples discarded because they contained a single class.
    pub redrawn: usize,
}

/// Linearly interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn ci95(mut v: Vec<f64>) -> [f64; 2] {
    v.sort_by(f64::total_cmp);
    [percentile(&v, 0.025), percentile(&v, 0.975)]
}

const MAX_REDRAWS: usize = 10_000;

struct Draw {
    auc: f64,
    ba: f64,
    f1: f64,
    band: Vec<f64>,
    redrawn: usize,
}

/// Percentile bootstrap of AUC, balanced accuracy and F1 (operating point
/// re-derived in each resample) plus a pointwise ROC band. `clusters` gives
/// each row's subject and is required for subject-level resampling.
pub fn bootstrap(
    scores: &[f64],
    labels: &[bool],
    clusters: Option<&[usize]>,
    config: &BootstrapConfig,
    exec: Exec,
) -> Result<BootstrapResult> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateOutcome);
    }
    if config.n_iter == 0 || config.band_points < 2 {
        return Err(Error::Argument("bootstrap needs n_iter ≥ 1 and band_points ≥ 2".into()));
    }
    let groups: Vec<Vec<usize>> = match (config.unit, clusters) {
        (ResampleUnit::Row, _) => (0..scores.len()).map(|i| vec![i]).collect(),
        (ResampleUnit::Subject, Some(c)) => {
            if c.len() != scores.len() {
                return Err(Error::Shape("cluster ids do not match scores".into()));
            }
            let mut map = std::collections::BTreeMap::<usize, Vec<usize>>::new();
            for (i, &g) in c.iter().enumerate() {
                map.entry(g).or_default().push(i);
            }
            map.into_values().collect()
        }
        (ResampleUnit::Subject, None) => {
            return Err(Error::Argument("subject-level bootstrap needs cluster ids".into()));
        }
    };
    let grid: Vec<f64> = (0..config.band_points).map(|i| i as f64 / (config.band_points - 1) as f64).collect();

    let draws = exec.try_map_range(config.n_iter, |it| -> Result<Draw> {
        let mut rng = substream(config.seed, &[domain::BOOTSTRAP, it as u64]);
        let mut redrawn = 0;
        loop {
            let mut s = Vec::with_capacity(scores.len());
            let mut l = Vec::with_capacity(scores.len());
            for _ in 0..groups.len() {
                for &i in &groups[rng.random_range(0..groups.len())] {
                    s.push(scores[i]);
                    l.push(labels[i]);
                }
            }
            let p = l.iter().filter(|&&x| x).count();
            if p == 0 || p == l.len() {
                redrawn += 1;
                if redrawn > MAX_REDRAWS {
                    return Err(Error::SampleSize("bootstrap resamples keep containing a single class".into()));
                }
                continue;
            }
            let curve = roc_auc(&s, &l)?;
            let op = fixed_fpr_operating_point(&s, &l, config.fpr_cap)?;
            let band = grid.iter().map(|&f| tpr_at(&curve.points, f)).collect();
            return Ok(Draw { auc: curve.auc, ba: op.balanced_accuracy, f1: op.f1, band, redrawn });
        }
    })?;

    let redrawn: usize = draws.iter().map(|d| d.redrawn).sum();
    if redrawn as f64 > 0.01 * config.n_iter as f64 {
        log::warn!("{redrawn} of {} bootstrap resamples were redrawn (single class)", config.n_iter);
    }
    let roc_band = grid
        .iter()
        .enumerate()
        .map(|(g, &fpr)| {
            let [tpr_lo, tpr_hi] = ci95(draws.iter().map(|d| d.band[g]).collect());
            BandPoint { fpr, tpr_lo, tpr_hi }
        })
        .collect();
    Ok(BootstrapResult {
        auc_ci95: ci95(draws.iter().map(|d| d.auc).collect()),
        balanced_accuracy_ci95: ci95(draws.iter().map(|d| d.ba).collect()),
        f1_ci95: ci95(draws.iter().map(|d| d.f1).collect()),
        roc_band,
        n_iter: config.n_iter,
        redrawn,
    })
}

/// Row-level percentile interval for the AUC alone.
pub fn bootstrap_auc(scores: &[f64], labels: &[bool], n_iter: usize, seed: u64) -> Result<[f64; 2]> {
    Ok(bootstrap(scores, labels, None, &BootstrapConfig::new(n_iter, seed), Exec::default())?.auc_ci95)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split(neg: &[f64], pos: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut s = neg.to_vec();
        s.extend_from_slice(pos);
        let mut l = vec![false; neg.len()];
        l.extend(vec![true; pos.len()]);
        (s, l)
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut c, mut t, mut np, mut nn) = (0u64, 0u64, 0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                np += 1;
            } else {
                nn += 1;
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if !lj {
                    if scores[i] > scores[j] {
                        c += 1;
                    } else if scores[i] == scores[j] {
                        t += 1;
                    }
                }
            }
        }
        (c as f64 + 0.5 * t as f64) / (np * nn) as f64
    }

    #[test]
    fn spec_auc_examples() {
        let (s, l) = split(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(roc_auc(&s, &l).unwrap().auc, 1.0);
        let (s, l) = split(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(roc_auc(&s, &l).unwrap().auc, 0.5);
        let (s, l) = split(&[0.4, 0.8], &[0.6, 0.9]);
        assert_eq!(roc_auc(&s, &l).unwrap().auc, 0.75);
    }

    #[test]
    fn roc_points_start_at_origin_and_end_at_one() {
        let (s, l) = split(&[0.4, 0.8, 0.8], &[0.6, 0.8, 0.9]);
        let c = roc_auc(&s, &l).unwrap();
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(c.points.len(), 5);
    }

    #[test]
    fn spec_operating_point_examples() {
        let neg = [0.1, 0.2, 0.3, 0.4, 0.5];
        let (s, l) = split(&neg, &[0.45, 0.6]);
        let op = fixed_fpr_operating_point(&s, &l, 0.2).unwrap();
        assert_eq!(op.threshold, 0.4);
        assert_eq!(op.achieved_fpr, 0.2);
        let op0 = fixed_fpr_operating_point(&s, &l, 0.0).unwrap();
        assert_eq!(op0.threshold, 0.5);
        assert_eq!(op0.achieved_fpr, 0.0);
        assert!(matches!(fixed_fpr_operating_point(&[0.3], &[true], 0.2), Err(Error::NoNegatives)));
    }

    #[test]
    fn balanced_accuracy_definition() {
        let c = Confusion { tp: 7, fn_: 3, tn: 8, fp: 2 };
        assert_eq!(c.sensitivity(), 0.7);
        assert_eq!(c.specificity(), 0.8);
        assert!((c.balanced_accuracy() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation_interval_is_degenerate() {
        let (s, l) = split(&[0.1, 0.2, 0.3, 0.35], &[0.8, 0.9, 0.95]);
        assert_eq!(bootstrap_auc(&s, &l, 200, 3).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn bootstrap_is_seeded_and_schedule_invariant() {
        let s: Vec<f64> = (0..40).map(|i| ((i * 37) % 23) as f64).collect();
        let l: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let cfg = BootstrapConfig::new(300, 11);
        let a = bootstrap(&s, &l, None, &cfg, Exec::Sequential).unwrap();
        let b = bootstrap(&s, &l, None, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let other = bootstrap(&s, &l, None, &BootstrapConfig::new(300, 12), Exec::Sequential).unwrap();
        assert_ne!(a.auc_ci95, other.auc_ci95);
    }

    #[test]
    fn subject_bootstrap_needs_clusters() {
        let (s, l) = split(&[0.1, 0.2], &[0.8, 0.9]);
        let cfg = BootstrapConfig { unit: ResampleUnit::Subject, ..BootstrapConfig::new(10, 1) };
        assert!(bootstrap(&s, &l, None, &cfg, Exec::Sequential).is_err());
        let r = bootstrap(&s, &l, Some(&[0, 0, 1, 1]), &cfg, Exec::Sequential).unwrap();
        assert!(r.redrawn > 0 || r.auc_ci95 == [1.0, 1.0]);
    }

    #[test]
    fn roc_points_survive_json() {
        let (s, l) = split(&[0.1, 0.2], &[0.8, 0.9]);
        let c = roc_auc(&s, &l).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains(r#""threshold":"inf""#));
        assert_eq!(serde_json::from_str::<RocCurve>(&text).unwrap(), c);
    }

    #[test]
    fn perfect_roc_band_reaches_top_left() {
        let (s, l) = split(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]);
        let r = bootstrap(&s, &l, None, &BootstrapConfig::new(100, 5), Exec::Sequential).unwrap();
        assert_eq!(r.roc_band[0].tpr_lo, 1.0);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..12, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect()),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force_and_trapezoid((s, l) in instance()) {
            let c = roc_auc(&s, &l).unwrap();
            prop_assert_eq!(c.auc, brute_auc(&s, &l));
            prop_assert!((trapezoid_auc(&c.points) - c.auc).abs() < 1e-12);
            for w in c.points.windows(2) {
                prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform((s, l) in instance()) {
            let a = roc_auc(&s, &l).unwrap().auc;
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&t, &l).unwrap().auc, a);
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((roc_auc(&neg, &l).unwrap().auc - (1.0 - a)).abs() < 1e-15);
        }

        #[test]
        fn operating_point_is_maximal_under_cap((s, l) in instance(), cap in 0.0f64..0.99) {
            let op = fixed_fpr_operating_point(&s, &l, cap).unwrap();
            prop_assert!(op.achieved_fpr <= cap + 1e-9);
            let mut best = 0.0f64;
            for &t in &s {
                let c = Confusion::at(&s, &l, t);
                if c.fpr() <= cap + 1e-9 {
                    best = best.max(c.fpr());
                }
            }
            prop_assert_eq!(op.achieved_fpr, best);
            let c = op.confusion;
            prop_assert_eq!(c.tp + c.fn_, l.iter().filter(|&&x| x).count());
            prop_assert_eq!(c.fp + c.tn, l.iter().filter(|&&x| !x).count());
            prop_assert_eq!(op.f1, 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64);
        }
    }
}
