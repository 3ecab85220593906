//! Task heads: a BIO-constrained CRF for tagging and a pair classifier for
//! relations. Both accept mixed targets, scored as the weighted sum of the
//! two hard-target losses.

pub mod crf;

use rand::Rng;

use crate::attnmixup::TargetSpec;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::labels::TagSet;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use crf::CrfScores;

/// Additive score for transitions that break BIO.
pub const INVALID_TRANSITION: f64 = -1e4;

fn weighted_sum(g: &mut Graph, parts: Vec<(f64, Var)>) -> Var {
    if let [(w, v)] = parts[..] {
        if w == 1.0 {
            return v;
        }
    }
    let scaled: Vec<Var> = parts.into_iter().map(|(w, v)| g.scale(v, w)).collect();
    g.add_n(&scaled)
}

#[derive(Clone, Debug)]
pub struct CrfHead {
    pub emission: Linear,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    transition_penalty: Tensor,
    start_penalty: Tensor,
}

pub struct CrfPotentials {
    pub emissions: Var,
    pub transitions: Var,
    pub start: Var,
    pub end: Var,
}

impl CrfHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, tags: &TagSet, rng: &mut R) -> Self {
        let l = tags.num_tags();
        let mut transition_penalty = Tensor::zeros(l, l);
        let mut start_penalty = Tensor::zeros(1, l);
        for to in 0..l {
            if !tags.transition_allowed(None, to) {
                start_penalty.set(0, to, INVALID_TRANSITION);
            }
            for from in 0..l {
                if !tags.transition_allowed(Some(from), to) {
                    transition_penalty.set(from, to, INVALID_TRANSITION);
                }
            }
        }
        CrfHead {
            emission: Linear::new(store, &format!("{name}.emission"), dim, l, rng),
            transitions: store.add_zeros(format!("{name}.transitions"), l, l),
            start: store.add_zeros(format!("{name}.start"), 1, l),
            end: store.add_zeros(format!("{name}.end"), 1, l),
            transition_penalty,
            start_penalty,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start_penalty.cols()
    }

    pub fn potentials(&self, g: &mut Graph, states: Var) -> CrfPotentials {
        let emissions = self.emission.forward(g, states);
        let t = g.param(self.transitions);
        let tp = g.input(self.transition_penalty.clone());
        let s = g.param(self.start);
        let sp = g.input(self.start_penalty.clone());
        CrfPotentials {
            emissions,
            transitions: g.add(t, tp),
            start: g.add(s, sp),
            end: g.param(self.end),
        }
    }

    /// Negative log-likelihood of a hard or mixed tag-sequence target.
    pub fn nll(&self, g: &mut Graph, states: Var, target: &TargetSpec) -> Result<Var> {
        let n = g.shape(states).0;
        if n == 0 {
            return Err(shape_err!("CRF needs at least one token"));
        }
        let p = self.potentials(g, states);
        let mut parts = Vec::new();
        for (w, hard) in target.components() {
            let TargetSpec::HardSeq(tags) = hard else {
                return Err(invalid!("CRF head expects tag-sequence targets"));
            };
            parts.push((w, g.crf_nll(p.emissions, p.transitions, p.start, p.end, tags)?));
        }
        Ok(weighted_sum(g, parts))
    }

    /// Viterbi path, ties resolved toward the lowest tag id.
    pub fn decode(&self, g: &mut Graph, states: Var) -> Result<Vec<usize>> {
        if g.shape(states).0 == 0 {
            return Err(shape_err!("CRF needs at least one token"));
        }
        let p = self.potentials(g, states);
        let scores = CrfScores::new(
            g.value(p.emissions),
            g.value(p.transitions),
            g.value(p.start).data(),
            g.value(p.end).data(),
        )?;
        Ok(scores.viterbi().0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelationHead {
    pub classifier: Linear,
    pub num_relations: usize,
}

impl RelationHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, num_relations: usize, rng: &mut R) -> Result<Self> {
        if num_relations < 2 {
            return Err(invalid!("relation head needs at least two classes"));
        }
        Ok(RelationHead {
            classifier: Linear::new(store, &format!("{name}.classifier"), 2 * dim, num_relations, rng),
            num_relations,
        })
    }

    /// Concatenated mean states of the head span and the tail span.
    pub fn pair_rep(&self, g: &mut Graph, states: Var, head: (usize, usize), tail: (usize, usize)) -> Result<Var> {
        let n = g.shape(states).0;
        for (s, e) in [head, tail] {
            if s >= e || e > n {
                return Err(invalid!("span ({s}, {e}) out of range for {n} tokens"));
            }
        }
        let h = g.slice_rows(states, head.0, head.1);
        let h = g.mean_rows(h);
        let t = g.slice_rows(states, tail.0, tail.1);
        let t = g.mean_rows(t);
        Ok(g.concat_cols(&[h, t]))
    }

    pub fn logits(&self, g: &mut Graph, pair: Var) -> Var {
        self.classifier.forward(g, pair)
    }

    pub fn cross_entropy(&self, g: &mut Graph, pair: Var, target: &TargetSpec) -> Result<Var> {
        let logits = self.logits(g, pair);
        let mut parts = Vec::new();
        for (w, hard) in target.components() {
            let TargetSpec::HardClass(c) = hard else {
                return Err(invalid!("relation head expects class targets"));
            };
            parts.push((w, g.softmax_ce(logits, *c)?));
        }
        Ok(weighted_sum(g, parts))
    }

    /// Highest-scoring relation, lowest id on ties.
    pub fn predict(&self, g: &mut Graph, pair: Var) -> usize {
        let logits = self.logits(g, pair);
        argmax(g.value(logits).data())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `task + weight * semantic`; the semantic term is dropped when the weight is zero.
pub fn total_loss(g: &mut Graph, task: Var, semantic: Var, weight: f64) -> Var {
    if weight == 0.0 {
        return task;
    }
    let s = g.scale(semantic, weight);
    g.add(task, s)
}
