//! Subject-disjoint train/val/test splits that approximate exam-level
//! fractions per group, plus an audit that trusts only the artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{Label, VisitRecord};
use crate::deviation::DeviationRecord;
use crate::error::{Error, Result};
use crate::rng::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Exam fractions `[train, val, test]` per group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub non_converter: [f64; 3],
    pub converter: [f64; 3],
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions { non_converter: [0.62, 0.25, 0.13], converter: [0.0, 0.25, 0.75] }
    }
}

/// Warn when an achieved fraction misses its target by more than this.
pub const TOLERANCE: f64 = 0.05;

impl Fractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("non_converter", self.non_converter), ("converter", self.converter)] {
            if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Config(format!("{name} fractions must lie in [0, 1]: {f:?}")));
            }
            if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} fractions must sum to 1: {f:?}")));
            }
        }
        if self.converter[0] != 0.0 {
            return Err(Error::Config("converters may not be assigned to the training split".into()));
        }
        Ok(())
    }

    fn of(&self, label: Label) -> [f64; 3] {
        match label {
            Label::Converter => self.converter,
            Label::NonConverter => self.non_converter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub subject_id: String,
    pub visit_id: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: Label,
    pub exams: usize,
    pub target: [f64; 3],
    pub achieved: [f64; 3],
    pub counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub rng_seed: u64,
    pub fractions: Fractions,
    pub groups: Vec<GroupSummary>,
    /// One entry per visit, in cohort order.
    pub assignments: Vec<Assignment>,
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn split_of(&self, subject_id: &str, visit_id: &str) -> Option<Split> {
        self.assignments
            .iter()
            .find(|a| a.subject_id == subject_id && a.visit_id == visit_id)
            .map(|a| a.split)
    }

    pub fn visits_in(&self, split: Split) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().filter(move |a| a.split == split)
    }

    /// `subject_id/visit_id` keys of the training split.
    pub fn training_keys(&self) -> Vec<String> {
        self.visits_in(Split::Train).map(|a| crate::cohort::visit_key(&a.subject_id, &a.visit_id)).collect()
    }
}

/// Whole subjects are assigned greedily: larger subjects first (seeded order,
/// then subject_id, among equals), each to the split with the largest
/// remaining exam deficit. A subject with any converter visit belongs to the
/// converter group.
pub fn make_splits(cohort: &[VisitRecord], fractions: &Fractions, seed: u64) -> Result<SplitManifest> {
    fractions.validate()?;
    let mut subjects: BTreeMap<&str, (Label, usize)> = BTreeMap::new();
    for r in cohort {
        let e = subjects.entry(&r.subject_id).or_insert((Label::NonConverter, 0));
        e.1 += 1;
        if r.label.is_converter() {
            e.0 = Label::Converter;
        }
    }
    let mut order: Vec<&str> = subjects.keys().copied().collect();
    order.shuffle(&mut substream(seed, &[domain::SPLIT]));
    let rank: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (*s, i)).collect();

    let mut subject_split: BTreeMap<&str, Split> = BTreeMap::new();
    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    for label in [Label::NonConverter, Label::Converter] {
        let mut members: Vec<(&str, usize)> =
            subjects.iter().filter(|(_, (l, _))| *l == label).map(|(s, (_, n))| (*s, *n)).collect();
        members.sort_by(|a, b| b.1.cmp(&a.1).then(rank[a.0].cmp(&rank[b.0])).then(a.0.cmp(b.0)));
        let exams: usize = members.iter().map(|m| m.1).sum();
        let target = fractions.of(label);
        let mut counts = [0usize; 3];
        for (sid, n) in &members {
            let deficit = |k: usize| target[k] * exams as f64 - counts[k] as f64;
            let best = (0..3)
                .filter(|&k| target[k] > 0.0)
                .fold(None, |best: Option<usize>, k| match best {
                    Some(b) if deficit(b) >= deficit(k) => Some(b),
                    _ => Some(k),
                })
                .expect("fractions sum to 1");
            counts[best] += n;
            subject_split.insert(sid, Split::ALL[best]);
        }
        let achieved = counts.map(|c| if exams == 0 { 0.0 } else { c as f64 / exams as f64 });
        if exams > 0 {
            for k in 0..3 {
                if (achieved[k] - target[k]).abs() > TOLERANCE {
                    warnings.push(format!(
                        "{label} {}: achieved {:.1}% of exams, target {:.1}%",
                        Split::ALL[k],
                        100.0 * achieved[k],
                        100.0 * target[k]
                    ));
                }
            }
        }
        groups.push(GroupSummary { label, exams, target, achieved, counts });
    }
    for w in &warnings {
        log::warn!("split: {w}");
    }
    let assignments = cohort
        .iter()
        .map(|r| Assignment {
            subject_id: r.subject_id.clone(),
            visit_id: r.visit_id.clone(),
            label: r.label,
            split: subject_split[r.subject_id.as_str()],
        })
        .collect();
    Ok(SplitManifest { rng_seed: seed, fractions: *fractions, groups, assignments, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    /// Subjects whose visits appear in more than one split.
    pub subject_overlap: Vec<String>,
    /// Converter visits assigned to training.
    pub converter_in_train: Vec<String>,
    /// Scored visits that the manifest places in training.
    pub scored_training_visits: Vec<String>,
    /// Scored visits absent from the manifest.
    pub unknown_scored_visits: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.subject_overlap.is_empty()
            && self.converter_in_train.is_empty()
            && self.scored_training_visits.is_empty()
            && self.unknown_scored_visits.is_empty()
    }
}

/// Re-derives the leakage invariants from a manifest and a deviation table.
pub fn audit(manifest: &SplitManifest, scored: &[DeviationRecord]) -> AuditReport {
    let mut by_subject: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut split_of = BTreeMap::new();
    let mut report = AuditReport::default();
    for a in &manifest.assignments {
        by_subject.entry(&a.subject_id).or_default().insert(a.split);
        let key = crate::cohort::visit_key(&a.subject_id, &a.visit_id);
        if a.split == Split::Train && a.label.is_converter() {
            report.converter_in_train.push(key.clone());
        }
        split_of.insert(key, a.split);
    }
    report.subject_overlap = by_subject.into_iter().filter(|(_, s)| s.len() > 1).map(|(k, _)| k.to_string()).collect();
    for d in scored {
        match split_of.get(&d.key()) {
            Some(Split::Train) => report.scored_training_visits.push(d.key()),
            Some(_) => {}
            None => report.unknown_scored_visits.push(d.key()),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Gender;

    fn visit(s: &str, v: &str, label: Label) -> VisitRecord {
        VisitRecord {
            subject_id: s.into(),
            visit_id: v.into(),
            age: 70.0,
            gender: Gender::F,
            apoe4: None,
            cdr: 0.0,
            mmse: 29,
            npiq: 1.0,
            abeta42: None,
            amyloid_status: None,
            label,
            volume_ref: format!("{s}_{v}.f32"),
        }
    }

    #[test]
    fn single_subject_goes_to_train_with_warnings() {
        let m = make_splits(&[visit("S1", "V1", Label::NonConverter)], &Fractions::default(), 1).unwrap();
        assert_eq!(m.assignments[0].split, Split::Train);
        assert!(!m.warnings.is_empty());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let f = Fractions { non_converter: [0.5, 0.3, 0.1], ..Fractions::default() };
        assert!(matches!(make_splits(&[], &f, 1), Err(Error::Config(_))));
        let f = Fractions { converter: [0.1, 0.2, 0.7], ..Fractions::default() };
        assert!(matches!(make_splits(&[], &f, 1), Err(Error::Config(_))));
    }

    fn multi_visit_cohort() -> Vec<VisitRecord> {
        let mut c = Vec::new();
        for i in 0..212 {
            let label = if i % 4 == 0 { Label::Converter } else { Label::NonConverter };
            for v in 0..(1 + i % 4) {
                c.push(visit(&format!("S{i:03}"), &format!("V{v}"), label));
            }
        }
        c
    }

    #[test]
    fn deterministic_disjoint_and_converter_free_train() {
        let c = multi_visit_cohort();
        let a = make_splits(&c, &Fractions::default(), 7).unwrap();
        assert_eq!(a, make_splits(&c, &Fractions::default(), 7).unwrap());
        let r = audit(&a, &[]);
        assert!(r.is_clean(), "{r:?}");
        for g in &a.groups {
            for k in 0..3 {
                assert!((g.achieved[k] - g.target[k]).abs() <= TOLERANCE, "{g:?}");
            }
        }
    }

    #[test]
    fn audit_catches_overlap_and_scored_training_visits() {
        let c = vec![
            visit("S1", "V1", Label::NonConverter),
            visit("S1", "V2", Label::NonConverter),
            visit("S2", "V1", Label::Converter),
        ];
        let mut m = make_splits(&c, &Fractions::default(), 1).unwrap();
        m.assignments[1].split = Split::Test;
        m.assignments[2].split = Split::Train;
        let d = crate::deviation::DeviationRecord::new("S1", "V1", 1.0, 1.0, Default::default(), "x");
        let r = audit(&m, &[d]);
        assert_eq!(r.subject_overlap, vec!["S1".to_string()]);
        assert_eq!(r.converter_in_train, vec!["S2/V1".to_string()]);
        assert_eq!(r.scored_training_visits, vec!["S1/V1".to_string()]);
    }
}
