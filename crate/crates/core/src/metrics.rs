//! Micro-averaged precision, recall and F1 for span tagging and relation
//! classification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::labels::{RelationSet, Tag, TagSet, OUTSIDE};

/// Half-open token range `[start, end)` with an entity type index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Spans read off a BIO sequence. An `I-X` that does not continue an
/// `X` span opens a new one.
pub fn bio_to_spans(tags: &[usize], tag_set: &TagSet) -> Result<Vec<Span>> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &t) in tags.iter().enumerate() {
        let tag = tag_set.decode(t)?;
        let continues = matches!((tag, open), (Tag::Inside(e), Some(s)) if tag_set.entity_types()[s.label] == e);
        if continues {
            if let Some(s) = open.as_mut() {
                s.end = i + 1;
            }
            continue;
        }
        spans.extend(open.take());
        if t != OUTSIDE {
            let label = tag_set.entity_of(t).expect("non-O tag has an entity");
            open = Some(Span { start: i, end: i + 1, label });
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Inverse of [`bio_to_spans`] for non-overlapping in-bounds spans.
pub fn spans_to_bio(spans: &[Span], len: usize, tag_set: &TagSet) -> Result<Vec<usize>> {
    let mut tags = vec![OUTSIDE; len];
    let mut used = vec![false; len];
    for s in spans {
        if s.start >= s.end || s.end > len || s.label >= tag_set.num_types() {
            return Err(invalid!("span {s:?} invalid for length {len}"));
        }
        if used[s.start..s.end].iter().any(|&u| u) {
            return Err(invalid!("span {s:?} overlaps another span"));
        }
        used[s.start..s.end].fill(true);
        tags[s.start] = tag_set.begin(s.label);
        tags[s.start + 1..s.end].fill(tag_set.inside(s.label));
    }
    Ok(tags)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, TypeMetrics>,
}

fn report(total: Counts, by_type: BTreeMap<String, Counts>) -> MetricsReport {
    let p = total.prf();
    MetricsReport {
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        per_type: by_type
            .into_iter()
            .map(|(name, c)| {
                let q = c.prf();
                let m = TypeMetrics {
                    precision: q.precision,
                    recall: q.recall,
                    f1: q.f1,
                    support: c.tp + c.fn_,
                };
                (name, m)
            })
            .collect(),
    }
}

fn span_counts(gold: &[Span], pred: &[Span]) -> BTreeMap<usize, Counts> {
    let g: BTreeSet<&Span> = gold.iter().collect();
    let p: BTreeSet<&Span> = pred.iter().collect();
    let mut out: BTreeMap<usize, Counts> = BTreeMap::new();
    for s in &p {
        let c = out.entry(s.label).or_default();
        if g.contains(s) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for s in g.difference(&p) {
        out.entry(s.label).or_default().fn_ += 1;
    }
    out
}

/// Corpus-level exact-match counts over paired span sets.
pub fn micro_prf(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(shape_err!("{} gold and {} predicted sequences", gold.len(), pred.len()));
    }
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        span_counts(g, p).into_values().for_each(|c| total.add(c));
    }
    Ok(total.prf())
}

/// Span-level report over gold and predicted tag sequences.
pub fn ner_report(gold: &[Vec<usize>], pred: &[Vec<usize>], tag_set: &TagSet) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(shape_err!("{} gold and {} predicted sequences", gold.len(), pred.len()));
    }
    let mut total = Counts::default();
    let mut by_type: BTreeMap<String, Counts> =
        tag_set.entity_types().iter().map(|t| (t.clone(), Counts::default())).collect();
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(shape_err!("gold length {} vs predicted length {}", g.len(), p.len()));
        }
        let counts = span_counts(&bio_to_spans(g, tag_set)?, &bio_to_spans(p, tag_set)?);
        for (label, c) in counts {
            total.add(c);
            by_type.get_mut(&tag_set.entity_types()[label]).expect("known type").add(c);
        }
    }
    Ok(report(total, by_type))
}

/// One prediction per pair; the `None` relation never counts as a hit.
pub fn re_report(gold: &[usize], pred: &[usize], relations: &RelationSet) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(shape_err!("{} gold and {} predicted relations", gold.len(), pred.len()));
    }
    let none = relations.none_id();
    let mut total = Counts::default();
    let mut by_type: BTreeMap<String, Counts> = relations
        .names()
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != none)
        .map(|(_, n)| (n.clone(), Counts::default()))
        .collect();
    for (&g, &p) in gold.iter().zip(pred) {
        let (Some(gn), Some(pn)) = (relations.name(g), relations.name(p)) else {
            return Err(invalid!("relation id out of range: gold {g}, predicted {p}"));
        };
        if g == p {
            if Some(g) != none {
                total.tp += 1;
                by_type.get_mut(gn).expect("known relation").tp += 1;
            }
            continue;
        }
        if Some(p) != none {
            total.fp += 1;
            by_type.get_mut(pn).expect("known relation").fp += 1;
        }
        if Some(g) != none {
            total.fn_ += 1;
            by_type.get_mut(gn).expect("known relation").fn_ += 1;
        }
    }
    Ok(report(total, by_type))
}
