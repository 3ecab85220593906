//! Inter-sample modeling: batch attention, vicinal sampling, mixup synthesis
//! and training-set composition.
//!
//! Attention runs over the batch axis. Each head scores every ordered pair of
//! pooled sample vectors with an additive form `vᵀ tanh(W_q h_i + W_k h_j + b)`,
//! normalizes over `j`, and returns the weighted sum of the raw pooled
//! vectors. Heads are concatenated, projected back by `W_d`, dropped out,
//! added residually and layer-normalized. Token-level (NER) samples receive
//! their context vector at every real position before the layer norm.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, invalid, shape_err, Error, Result};
use crate::labels::OUTSIDE;
use crate::nn::{ForwardCtx, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    HardClass(usize),
    HardSeq(Vec<usize>),
    Mixed {
        lambda: f64,
        a: Box<TargetSpec>,
        b: Box<TargetSpec>,
    },
}

impl TargetSpec {
    pub fn mixed(lambda: f64, a: TargetSpec, b: TargetSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid!("mixing ratio {lambda} outside [0, 1]"));
        }
        if matches!(a, TargetSpec::Mixed { .. }) || matches!(b, TargetSpec::Mixed { .. }) {
            return Err(invalid!("mixed targets may only combine hard targets"));
        }
        Ok(TargetSpec::Mixed {
            lambda,
            a: Box::new(a),
            b: Box::new(b),
        })
    }

    pub fn is_hard(&self) -> bool {
        !matches!(self, TargetSpec::Mixed { .. })
    }

    /// `(weight, hard target)` pairs whose weighted losses make up this target's loss.
    pub fn components(&self) -> Vec<(f64, &TargetSpec)> {
        match self {
            TargetSpec::Mixed { lambda, a, b } => vec![(*lambda, a.as_ref()), (1.0 - lambda, b.as_ref())],
            hard => vec![(1.0, hard)],
        }
    }
}

/// A sample representation: a single vector (RE) or per-token states (NER).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rep {
    Vector(Var),
    Tokens(Var),
}

impl Rep {
    pub fn var(&self) -> Var {
        match *self {
            Rep::Vector(v) | Rep::Tokens(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub rep: Rep,
    pub target: TargetSpec,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BatchEmbeddings {
    pub rows: Vec<BatchRow>,
}

impl BatchEmbeddings {
    pub fn new(rows: Vec<BatchRow>) -> Self {
        BatchEmbeddings { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row `i` as the vector attention sees: itself, or its token mean.
    fn pooled(&self, g: &mut Graph, i: usize) -> Var {
        match self.rows[i].rep {
            Rep::Vector(v) => v,
            Rep::Tokens(t) => g.mean_rows(t),
        }
    }

    fn check(&self, g: &Graph) -> Result<()> {
        if self.rows.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let width = g.shape(self.rows[0].rep.var()).1;
        for r in &self.rows {
            let (n, c) = g.shape(r.rep.var());
            if c != width || n == 0 || (matches!(r.rep, Rep::Vector(_)) && n != 1) {
                return Err(shape_err!("batch row shape ({n}, {c}) inconsistent with width {width}"));
            }
            if !g.value(r.rep.var()).is_finite() {
                return Err(Error::NonFinite("batch representation".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnMixupConfig {
    pub num_heads: usize,
    pub dropout: f64,
    /// Share of the sampling set drawn from the original embeddings.
    pub delta: f64,
    /// Share of the composed set's extra rows drawn from the attended embeddings.
    pub big_delta: f64,
    pub beta_alpha: f64,
    pub seed: u64,
}

impl Default for AttnMixupConfig {
    fn default() -> Self {
        AttnMixupConfig {
            num_heads: 4,
            dropout: 0.2,
            delta: 0.7,
            big_delta: 0.6,
            beta_alpha: 0.2,
            seed: 0,
        }
    }
}

impl AttnMixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(config_err!("attention needs at least one head"));
        }
        if !(0.0..=1.0).contains(&self.delta) || !(0.0..=1.0).contains(&self.big_delta) {
            return Err(config_err!("delta and big_delta must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("attention dropout must lie in [0, 1)"));
        }
        if !(self.beta_alpha > 0.0 && self.beta_alpha.is_finite()) {
            return Err(config_err!("beta_alpha must be positive"));
        }
        Ok(())
    }
}

/// Rows of the sampling set taken from the original embeddings.
pub fn vicinal_count(batch: usize, delta: f64) -> usize {
    ((delta * batch as f64).round() as usize).min(batch)
}

/// `(from attended, from synthetic)` row counts added on top of the originals.
pub fn compose_counts(batch: usize, big_delta: f64) -> (usize, usize) {
    // the epsilon keeps e.g. 0.6 * 5 from flooring to 2
    let floor = |x: f64| ((x + 1e-9).floor() as usize).min(batch);
    (floor(big_delta * batch as f64), floor((1.0 - big_delta) * batch as f64))
}

#[derive(Clone, Debug)]
struct AdditiveHead {
    query: ParamId,
    key: ParamId,
    bias: ParamId,
    score: ParamId,
}

#[derive(Clone, Debug)]
pub struct BatchAttention {
    heads: Vec<AdditiveHead>,
    merge: ParamId,
    norm: LayerNorm,
    dim: usize,
    dropout: f64,
}

pub struct AttentionOutput {
    pub attended: BatchEmbeddings,
    /// One `B x B` row-stochastic matrix per head.
    pub weights: Vec<Tensor>,
}

impl BatchAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: &AttnMixupConfig, rng: &mut R) -> Self {
        let hidden = (dim / cfg.num_heads).max(1);
        let heads = (0..cfg.num_heads)
            .map(|h| {
                let p = format!("{name}.head{h}");
                AdditiveHead {
                    query: store.add_glorot(format!("{p}.query"), dim, hidden, rng),
                    key: store.add_glorot(format!("{p}.key"), dim, hidden, rng),
                    bias: store.add_zeros(format!("{p}.bias"), 1, hidden),
                    score: store.add_glorot(format!("{p}.score"), hidden, 1, rng),
                }
            })
            .collect();
        BatchAttention {
            heads,
            merge: store.add_glorot(format!("{name}.merge"), cfg.num_heads * dim, dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            dim,
            dropout: cfg.dropout,
        }
    }

    pub fn merge_weight(&self) -> ParamId {
        self.merge
    }

    pub fn score_weights(&self) -> Vec<ParamId> {
        self.heads.iter().map(|h| h.score).collect()
    }

    pub fn norm(&self) -> LayerNorm {
        self.norm
    }

    pub fn forward(&self, g: &mut Graph, batch: &BatchEmbeddings, ctx: &mut ForwardCtx) -> Result<AttentionOutput> {
        batch.check(g)?;
        let b = batch.len();
        let width = g.shape(batch.rows[0].rep.var()).1;
        if width != self.dim {
            return Err(shape_err!("batch width {width}, attention built for {}", self.dim));
        }
        let pooled: Vec<Var> = (0..b).map(|i| batch.pooled(g, i)).collect();
        let stacked = g.concat_rows(&pooled);

        let mut contexts = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = g.param(head.query);
            let wk = g.param(head.key);
            let bias = g.param(head.bias);
            let v = g.param(head.score);
            let q = g.matmul(stacked, wq);
            let k = g.matmul(stacked, wk);
            let k = g.add_row(k, bias);
            let pairs = g.pairwise_add(q, k);
            let act = g.tanh(pairs);
            let scores = g.matmul(act, v);
            let scores = g.reshape(scores, b, b);
            if !g.value(scores).is_finite() {
                return Err(Error::NonFinite("batch attention scores".into()));
            }
            let alpha = g.softmax_rows(scores);
            weights.push(g.value(alpha).clone());
            contexts.push(g.matmul(alpha, stacked));
        }
        let concat = if contexts.len() == 1 { contexts[0] } else { g.concat_cols(&contexts) };
        let wd = g.param(self.merge);
        let merged = g.matmul(concat, wd);
        let merged = ctx.dropout(g, merged, self.dropout);

        let mut rows = Vec::with_capacity(b);
        for (i, row) in batch.rows.iter().enumerate() {
            let ctx_i = g.slice_rows(merged, i, i + 1);
            let rep = match row.rep {
                Rep::Vector(x) => {
                    let sum = g.add(x, ctx_i);
                    Rep::Vector(self.norm.forward(g, sum))
                }
                Rep::Tokens(t) => {
                    let sum = g.add_row(t, ctx_i);
                    Rep::Tokens(self.norm.forward(g, sum))
                }
            };
            rows.push(BatchRow {
                rep,
                target: row.target.clone(),
            });
        }
        Ok(AttentionOutput {
            attended: BatchEmbeddings::new(rows),
            weights,
        })
    }
}

fn check_aligned(h: &BatchEmbeddings, h_star: &BatchEmbeddings) -> Result<()> {
    if h.len() != h_star.len() {
        return Err(shape_err!("sets have {} and {} rows", h.len(), h_star.len()));
    }
    if h.rows.iter().zip(&h_star.rows).any(|(a, b)| a.target != b.target) {
        return Err(invalid!("original and attended rows carry different targets"));
    }
    Ok(())
}

/// Exactly `round(delta * B)` rows (chosen uniformly) come from `h`, the rest
/// from `h_star`, in original row order.
pub fn vicinal_sampling_set<R: Rng + ?Sized>(
    h: &BatchEmbeddings,
    h_star: &BatchEmbeddings,
    delta: f64,
    rng: &mut R,
) -> Result<BatchEmbeddings> {
    check_aligned(h, h_star)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid!("delta {delta} outside [0, 1]"));
    }
    let b = h.len();
    let mut from_original = vec![false; b];
    for i in index::sample(rng, b, vicinal_count(b, delta)) {
        from_original[i] = true;
    }
    let rows = (0..b)
        .map(|i| if from_original[i] { h.rows[i].clone() } else { h_star.rows[i].clone() })
        .collect();
    Ok(BatchEmbeddings::new(rows))
}

fn pad_rows(g: &mut Graph, x: Var, rows: usize) -> Var {
    let (n, c) = g.shape(x);
    if n == rows {
        return x;
    }
    let zeros = g.input(Tensor::zeros(rows - n, c));
    g.concat_rows(&[x, zeros])
}

fn pad_target(t: &TargetSpec, len: usize) -> TargetSpec {
    match t {
        TargetSpec::HardSeq(seq) => {
            let mut s = seq.clone();
            s.resize(len, OUTSIDE);
            TargetSpec::HardSeq(s)
        }
        other => other.clone(),
    }
}

/// `lambda * a + (1 - lambda) * b`, with the target `Mixed(lambda, a, b)`.
///
/// Token matrices are zero-padded to the longer length; tag sequences are
/// padded with `O` to match.
pub fn mix_rows(g: &mut Graph, a: &BatchRow, b: &BatchRow, lambda: f64) -> Result<BatchRow> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid!("mixing ratio {lambda} outside [0, 1]"));
    }
    match (a.rep, b.rep) {
        (Rep::Vector(x), Rep::Vector(y)) => {
            if g.shape(x) != g.shape(y) {
                return Err(shape_err!("cannot mix vectors {:?} and {:?}", g.shape(x), g.shape(y)));
            }
            let xa = g.scale(x, lambda);
            let yb = g.scale(y, 1.0 - lambda);
            Ok(BatchRow {
                rep: Rep::Vector(g.add(xa, yb)),
                target: TargetSpec::mixed(lambda, a.target.clone(), b.target.clone())?,
            })
        }
        (Rep::Tokens(x), Rep::Tokens(y)) => {
            let ((nx, cx), (ny, cy)) = (g.shape(x), g.shape(y));
            if cx != cy {
                return Err(shape_err!("cannot mix token states of width {cx} and {cy}"));
            }
            let n = nx.max(ny);
            let xp = pad_rows(g, x, n);
            let yp = pad_rows(g, y, n);
            let xa = g.scale(xp, lambda);
            let yb = g.scale(yp, 1.0 - lambda);
            Ok(BatchRow {
                rep: Rep::Tokens(g.add(xa, yb)),
                target: TargetSpec::mixed(lambda, pad_target(&a.target, n), pad_target(&b.target, n))?,
            })
        }
        _ => Err(invalid!("cannot mix vector and token representations")),
    }
}

/// `B` synthetic rows, each from a uniformly drawn pair `i != j` and
/// `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_synthesize<R: Rng + ?Sized>(
    g: &mut Graph,
    h_tilde: &BatchEmbeddings,
    beta_alpha: f64,
    rng: &mut R,
) -> Result<BatchEmbeddings> {
    let b = h_tilde.len();
    if b < 2 {
        return Err(invalid!("mixup needs at least two rows, got {b}"));
    }
    let beta = Beta::new(beta_alpha, beta_alpha).map_err(|e| config_err!("beta distribution: {e}"))?;
    let mut rows = Vec::with_capacity(b);
    for _ in 0..b {
        let i = rng.random_range(0..b);
        let j = (i + rng.random_range(1..b)) % b;
        let lambda: f64 = beta.sample(rng).clamp(0.0, 1.0);
        rows.push(mix_rows(g, &h_tilde.rows[i], &h_tilde.rows[j], lambda)?);
    }
    Ok(BatchEmbeddings::new(rows))
}

/// All of `h`, then `floor(Δ·B)` rows of `h_star`, then `floor((1-Δ)·B)` rows
/// of `h_bar`, each subset drawn without replacement and kept in index order.
pub fn compose_training_set<R: Rng + ?Sized>(
    h: &BatchEmbeddings,
    h_star: &BatchEmbeddings,
    h_bar: &BatchEmbeddings,
    big_delta: f64,
    rng: &mut R,
) -> Result<BatchEmbeddings> {
    if !(0.0..=1.0).contains(&big_delta) {
        return Err(invalid!("big_delta {big_delta} outside [0, 1]"));
    }
    let b = h.len();
    if h_star.len() != b || h_bar.len() != b {
        return Err(shape_err!("sets have {}, {} and {} rows", b, h_star.len(), h_bar.len()));
    }
    let (n_star, n_bar) = compose_counts(b, big_delta);
    let mut rows = h.rows.clone();
    for (set, n) in [(h_star, n_star), (h_bar, n_bar)] {
        let mut picked = index::sample(rng, b, n).into_vec();
        picked.sort_unstable();
        rows.extend(picked.into_iter().map(|i| set.rows[i].clone()));
    }
    Ok(BatchEmbeddings::new(rows))
}

/// Evaluation path: embeddings go to the heads untouched.
pub fn eval_passthrough(h: BatchEmbeddings) -> BatchEmbeddings {
    h
}

/// The full training-time pipeline `H -> Ĥ`.
pub fn attn_mixup(
    g: &mut Graph,
    attention: &BatchAttention,
    cfg: &AttnMixupConfig,
    h: &BatchEmbeddings,
    ctx: &mut ForwardCtx,
) -> Result<BatchEmbeddings> {
    if !ctx.is_train() {
        return Ok(eval_passthrough(h.clone()));
    }
    let h_star = attention.forward(g, h, ctx)?.attended;
    if h.len() < 2 {
        // nothing to interpolate between
        let mut rows = h.rows.clone();
        rows.extend(h_star.rows);
        return Ok(BatchEmbeddings::new(rows));
    }
    let h_tilde = vicinal_sampling_set(h, &h_star, cfg.delta, ctx.rng())?;
    let h_bar = mixup_synthesize(g, &h_tilde, cfg.beta_alpha, ctx.rng())?;
    compose_training_set(h, &h_star, &h_bar, cfg.big_delta, ctx.rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vector_batch(g: &mut Graph, b: usize, c: usize, seed: u64) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BatchEmbeddings::new(
            (0..b)
                .map(|i| BatchRow {
                    rep: Rep::Vector(g.input(Tensor::uniform(1, c, 2.0, &mut rng))),
                    target: TargetSpec::HardClass(i % 3),
                })
                .collect(),
        )
    }

    fn token_batch(g: &mut Graph, lens: &[usize], c: usize, seed: u64) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BatchEmbeddings::new(
            lens.iter()
                .map(|&n| BatchRow {
                    rep: Rep::Tokens(g.input(Tensor::uniform(n, c, 2.0, &mut rng))),
                    target: TargetSpec::HardSeq((0..n).map(|t| t % 3).collect()),
                })
                .collect(),
        )
    }

    fn attention(store: &mut ParamStore, dim: usize) -> BatchAttention {
        BatchAttention::new(store, "attn", dim, &AttnMixupConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn zero_score_vector_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let att = attention(&mut store, 8);
        for id in att.score_weights() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 5, 8, 2);
        let out = att.forward(&mut g, &h, &mut ForwardCtx::eval()).unwrap();
        for w in &out.weights {
            assert!(w.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn single_row_attends_to_itself_and_normalizes() {
        let mut store = ParamStore::new();
        let att = attention(&mut store, 6);
        let merge = att.merge_weight();
        store.get_mut(merge).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store);
        for h in [vector_batch(&mut g, 1, 6, 3), token_batch(&mut g, &[4], 6, 4)] {
            let out = att.forward(&mut g, &h, &mut ForwardCtx::eval()).unwrap();
            assert!(out.weights.iter().all(|w| w.data() == [1.0]));
            let x = h.rows[0].rep.var();
            let expected = g.layer_norm(x, crate::nn::LN_EPS);
            let got = out.attended.rows[0].rep.var();
            assert!(g.value(got).max_abs_diff(g.value(expected)) < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_shapes_preserved() {
        let mut store = ParamStore::new();
        let att = attention(&mut store, 12);
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 8, 12, 5);
        let out = att.forward(&mut g, &h, &mut ForwardCtx::train(9)).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in &out.weights {
            for i in 0..8 {
                assert!(w.row(i).iter().all(|&x| x >= 0.0));
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for (a, b) in h.rows.iter().zip(&out.attended.rows) {
            assert_eq!(g.shape(a.rep.var()), g.shape(b.rep.var()));
            assert_eq!(a.target, b.target);
        }
        let t = token_batch(&mut g, &[3, 5, 1], 12, 6);
        let out = att.forward(&mut g, &t, &mut ForwardCtx::eval()).unwrap();
        for (a, b) in t.rows.iter().zip(&out.attended.rows) {
            assert_eq!(g.shape(a.rep.var()), g.shape(b.rep.var()));
        }
    }

    #[test]
    fn attention_rejects_bad_batches() {
        let mut store = ParamStore::new();
        let att = attention(&mut store, 4);
        let mut g = Graph::new(&store);
        assert!(att.forward(&mut g, &BatchEmbeddings::default(), &mut ForwardCtx::eval()).is_err());
        let wrong = vector_batch(&mut g, 3, 5, 7);
        assert!(att.forward(&mut g, &wrong, &mut ForwardCtx::eval()).is_err());
        let nan = BatchEmbeddings::new(vec![BatchRow {
            rep: Rep::Vector(g.input(Tensor::filled(1, 4, f64::NAN))),
            target: TargetSpec::HardClass(0),
        }]);
        assert!(matches!(att.forward(&mut g, &nan, &mut ForwardCtx::eval()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn vicinal_extremes_and_rounding() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 8, 3, 8);
        let mut h_star = vector_batch(&mut g, 8, 3, 9);
        for (s, o) in h_star.rows.iter_mut().zip(&h.rows) {
            s.target = o.target.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert_eq!(vicinal_sampling_set(&h, &h_star, 1.0, &mut rng).unwrap(), h);
        assert_eq!(vicinal_sampling_set(&h, &h_star, 0.0, &mut rng).unwrap(), h_star);
        let mixed = vicinal_sampling_set(&h, &h_star, 0.7, &mut rng).unwrap();
        let from_h = mixed.rows.iter().zip(&h.rows).filter(|(a, b)| a == b).count();
        assert_eq!(from_h, 6);
        assert_eq!(mixed.len(), 8);

        let short = vector_batch(&mut g, 7, 3, 11);
        assert!(vicinal_sampling_set(&h, &short, 0.5, &mut rng).is_err());
        assert!(vicinal_sampling_set(&h, &vector_batch(&mut g, 8, 3, 12), 0.5, &mut rng).is_ok());
        let mut wrong_target = h_star.clone();
        wrong_target.rows[0].target = TargetSpec::HardClass(99);
        assert!(vicinal_sampling_set(&h, &wrong_target, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mixing_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let row = |g: &mut Graph, v: Vec<f64>, c: usize| BatchRow {
            rep: Rep::Vector(g.input(Tensor::row_vector(v))),
            target: TargetSpec::HardClass(c),
        };
        let a = row(&mut g, vec![0.0, 2.0], 0);
        let b = row(&mut g, vec![2.0, 0.0], 1);
        let mid = mix_rows(&mut g, &a, &b, 0.5).unwrap();
        assert_eq!(g.value(mid.rep.var()).data(), &[1.0, 1.0]);
        assert_eq!(
            mid.target,
            TargetSpec::Mixed {
                lambda: 0.5,
                a: Box::new(TargetSpec::HardClass(0)),
                b: Box::new(TargetSpec::HardClass(1))
            }
        );
        let one = mix_rows(&mut g, &a, &b, 1.0).unwrap();
        assert_eq!(g.value(one.rep.var()), g.value(a.rep.var()));
        assert!(mix_rows(&mut g, &a, &b, 1.5).is_err());
        assert!(mix_rows(&mut g, &a, &mid, 0.3).is_err());
    }

    #[test]
    fn token_mixing_pads_states_and_tags() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = token_batch(&mut g, &[2, 4], 3, 13);
        let m = mix_rows(&mut g, &t.rows[0], &t.rows[1], 0.25).unwrap();
        assert_eq!(g.shape(m.rep.var()), (4, 3));
        let TargetSpec::Mixed { a, .. } = &m.target else { panic!() };
        assert_eq!(**a, TargetSpec::HardSeq(vec![0, 1, OUTSIDE, OUTSIDE]));
        let short = g.value(t.rows[1].rep.var()).row(3).to_vec();
        let got = g.value(m.rep.var()).row(3).to_vec();
        for (x, y) in got.iter().zip(&short) {
            assert!((x - 0.75 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn mixup_needs_two_rows() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 1, 3, 14);
        assert!(mixup_synthesize(&mut g, &h, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn composition_sizes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 8, 2, 15);
        let hs = vector_batch(&mut g, 8, 2, 16);
        let hb = vector_batch(&mut g, 8, 2, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let out = compose_training_set(&h, &hs, &hb, 0.6, &mut rng).unwrap();
        assert_eq!(out.len(), 15);
        assert_eq!(out.rows[..8], h.rows[..]);

        let all_star = compose_training_set(&h, &hs, &hb, 1.0, &mut rng).unwrap();
        assert_eq!(all_star.rows[8..], hs.rows[..]);
        let all_bar = compose_training_set(&h, &hs, &hb, 0.0, &mut rng).unwrap();
        assert_eq!(all_bar.rows[8..], hb.rows[..]);
        assert!(compose_training_set(&h, &hs, &hb, 1.2, &mut rng).is_err());
    }

    #[test]
    fn passthrough_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h = vector_batch(&mut g, 4, 3, 19);
        assert_eq!(eval_passthrough(h.clone()), h);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mixup_outputs_stay_in_pair_envelope(seed in 0u64..10_000, b in 2usize..10) {
                let store = ParamStore::new();
                let mut g = Graph::new(&store);
                let h = vector_batch(&mut g, b, 4, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let out = mixup_synthesize(&mut g, &h, 0.2, &mut rng).unwrap();
                prop_assert_eq!(out.len(), b);
                for row in &out.rows {
                    let TargetSpec::Mixed { lambda, a, b: tb } = &row.target else { panic!() };
                    let (TargetSpec::HardClass(_), TargetSpec::HardClass(_)) = (a.as_ref(), tb.as_ref()) else { panic!() };
                    prop_assert!((0.0..=1.0).contains(lambda));
                    let x = g.value(row.rep.var()).data().to_vec();
                    // some ordered pair of batch rows must bound x elementwise
                    let found = (0..h.len()).any(|i| (0..h.len()).any(|j| {
                        i != j && {
                            let (xi, xj) = (g.value(h.rows[i].rep.var()).data(), g.value(h.rows[j].rep.var()).data());
                            x.iter().enumerate().all(|(k, v)| {
                                let (lo, hi) = (xi[k].min(xj[k]), xi[k].max(xj[k]));
                                *v >= lo - 1e-12 && *v <= hi + 1e-12
                            }) && x.iter().enumerate().all(|(k, v)| (lambda * xi[k] + (1.0 - lambda) * xj[k] - v).abs() < 1e-12)
                        }
                    }));
                    prop_assert!(found);
                }
            }

            #[test]
            fn compose_counts_are_exact(b in 2usize..=64, tenths in prop::sample::select(vec![0u64, 4, 6, 8, 10])) {
                let big_delta = tenths as f64 / 10.0;
                let (s, m) = compose_counts(b, big_delta);
                prop_assert_eq!(s as u64, tenths * b as u64 / 10);
                prop_assert_eq!(m as u64, (10 - tenths) * b as u64 / 10);
            }
        }
    }
}
