//! Self-check suites run by `mmie verify`: brute-force CRF oracle, finite
//! difference gradients through the full training loss, Monte-Carlo KL and
//! structural properties of batch attention and mixup.
//!
//! Each check tracks its worst deviation and keeps the first failing case as
//! JSON so it can be replayed.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attnmixup::{
    compose_training_set, mixup_synthesize, vicinal_sampling_set, AttnMixupConfig, BatchAttention, BatchEmbeddings, BatchRow, Rep,
    TargetSpec,
};
use crate::autograd::{Gradients, Graph};
use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::heads::crf::CrfScores;
use crate::intrafusion::{kl_divergence, semantic_loss, GaussianParams, GaussianVars};
use crate::model::Model;
use crate::nn::ForwardCtx;
use crate::params::ParamStore;
use crate::synthgen::{generate_corpus, Sample, Task};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    CrfOracle,
    GradCheck,
    KlMc,
    AttnProps,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::CrfOracle, Suite::GradCheck, Suite::KlMc, Suite::AttnProps];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CrfOracle => "crf-oracle",
            Suite::GradCheck => "grad-check",
            Suite::KlMc => "kl-mc",
            Suite::AttnProps => "attn-props",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| config_err!("unknown suite {s:?}; expected one of crf-oracle, grad-check, kl-mc, attn-props"))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    /// Largest deviation seen.
    pub worst: f64,
    /// Deviations must stay strictly below this.
    pub tolerance: f64,
    pub passed: bool,
    /// First case that broke the tolerance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<Value>,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Check {
            name: name.to_owned(),
            cases: 0,
            worst: 0.0,
            tolerance,
            passed: true,
            failure: None,
        }
    }

    fn observe(&mut self, deviation: f64, case: impl FnOnce() -> Value) {
        self.cases += 1;
        if deviation.is_nan() || deviation > self.worst {
            self.worst = deviation;
        }
        if !(deviation < self.tolerance) {
            self.passed = false;
            if self.failure.is_none() {
                let mut c = case();
                c["deviation"] = json!(deviation.to_string());
                self.failure = Some(c);
            }
        }
    }

    fn require(&mut self, ok: bool, case: impl FnOnce() -> Value) {
        self.observe(if ok { 0.0 } else { 1.0 }, case);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per check.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}/{}: worst {:.3e} (tolerance {:.0e}, {} cases)",
                    if c.passed { "PASS" } else { "FAIL" },
                    self.suite,
                    c.name,
                    c.worst,
                    c.tolerance,
                    c.cases
                )
            })
            .collect()
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::CrfOracle => crf_oracle(seed, 200)?,
        Suite::GradCheck => grad_check(seed, 50)?,
        Suite::KlMc => kl_monte_carlo(seed, 20, 1_000_000)?,
        Suite::AttnProps => attn_props(seed)?,
    };
    Ok(SuiteReport {
        suite: suite.name().to_owned(),
        seed,
        checks,
    })
}

fn rows_json(t: &Tensor) -> Value {
    json!((0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn every_path(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![vec![]];
    for _ in 0..n {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..l).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    paths
}

/// Forward algorithm, Viterbi and the graph NLL against enumeration of every path.
pub fn crf_oracle(seed: u64, cases: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nll = Check::new("nll-vs-enumeration", 1e-8);
    let mut graph_nll = Check::new("graph-nll-vs-enumeration", 1e-8);
    let mut viterbi = Check::new("viterbi-vs-enumeration", 1e-8);
    let mut norm = Check::new("normalization", 1e-6);
    let empty = ParamStore::new();
    for _ in 0..cases {
        let n = rng.random_range(1..=4);
        let l = rng.random_range(1..=4);
        let e = Tensor::uniform(n, l, 3.0, &mut rng);
        let t = Tensor::uniform(l, l, 3.0, &mut rng);
        let s: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let en: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        let case = || json!({"emissions": rows_json(&e), "transitions": rows_json(&t), "start": s, "end": en});

        let paths = every_path(n, l);
        let direct: Vec<f64> = paths
            .iter()
            .map(|p| {
                let mut score = s[p[0]] + en[p[n - 1]];
                for i in 0..n {
                    score += e.get(i, p[i]);
                    if i > 0 {
                        score += t.get(p[i - 1], p[i]);
                    }
                }
                score
            })
            .collect();
        let log_z = log_sum_exp(&direct);
        let scores = CrfScores::new(&e, &t, &s, &en)?;

        let mut prob_sum = 0.0;
        for (p, &d) in paths.iter().zip(&direct) {
            let got = scores.nll(p)?;
            nll.observe((got - (log_z - d)).abs(), || {
                let mut c = case();
                c["tags"] = json!(p);
                c
            });
            prob_sum += (-got).exp();
        }
        norm.observe((prob_sum - 1.0).abs(), case);

        let idx = rng.random_range(0..paths.len());
        let target = &paths[idx];
        let mut g = Graph::new(&empty);
        let (ev, tv) = (g.input(e.clone()), g.input(t.clone()));
        let (sv, env) = (g.input(Tensor::row_vector(s.clone())), g.input(Tensor::row_vector(en.clone())));
        let node = g.crf_nll(ev, tv, sv, env, target)?;
        graph_nll.observe((g.scalar(node) - (log_z - direct[idx])).abs(), || {
            let mut c = case();
            c["tags"] = json!(target);
            c
        });

        let best = direct.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (path, score) = scores.viterbi();
        let path_idx = paths.iter().position(|p| *p == path);
        let dev = match path_idx {
            Some(i) => (score - best).abs().max((direct[i] - best).abs()),
            None => f64::INFINITY,
        };
        viterbi.observe(dev, || {
            let mut c = case();
            c["viterbi"] = json!(path);
            c
        });
    }
    Ok(vec![nll, graph_nll, viterbi, norm])
}

/// Small model and corpus that keep repeated forward passes cheap.
pub fn grad_check_config(task: Task, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(task);
    cfg.corpus.num_train = 4;
    cfg.corpus.num_val = 1;
    cfg.corpus.num_test = 1;
    cfg.corpus.min_len = 5;
    cfg.corpus.max_len = 7;
    cfg.corpus.seed = seed;
    cfg.text.d_model = 8;
    cfg.text.num_heads = 2;
    cfg.text.ffn_dim = 12;
    cfg.image.channels = vec![3, 4];
    cfg.image.pooled_dim = 5;
    cfg.latent_dim = 4;
    cfg.attn.num_heads = 2;
    cfg.seed = seed;
    cfg
}

/// Training loss of `samples` with the forward randomness fixed by `ctx_seed`.
pub fn training_loss(model: &Model, params: &ParamStore, samples: &[&Sample], ctx_seed: u64) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(params);
    let mut ctx = ForwardCtx::train(ctx_seed);
    let out = model.arch.batch_loss(&mut g, samples, &mut ctx)?;
    Ok((g.scalar(out.total), g.backward(out.total)))
}

fn loss_only(model: &Model, params: &ParamStore, samples: &[&Sample], ctx_seed: u64) -> Result<f64> {
    let mut g = Graph::new(params);
    let mut ctx = ForwardCtx::train(ctx_seed);
    let out = model.arch.batch_loss(&mut g, samples, &mut ctx)?;
    Ok(g.scalar(out.total))
}

/// Central differences of the full training loss (attention, mixup and the
/// semantic term included) against backpropagation, for both tasks.
pub fn grad_check(seed: u64, per_task: usize) -> Result<Vec<Check>> {
    const H: f64 = 1e-5;
    let mut checks = Vec::new();
    for task in [Task::Ner, Task::Re] {
        let cfg = grad_check_config(task, seed);
        let corpus = generate_corpus(&cfg.corpus)?;
        let model = Model::new(&cfg)?;
        let batch: Vec<&Sample> = corpus.train.iter().collect();
        let ctx_seed = seed ^ 0x5eed;
        let (_, grads) = training_loss(&model, &model.params, &batch, ctx_seed)?;

        let live: Vec<_> = model
            .params
            .ids()
            .filter(|&id| grads.param(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(task as u64 + 1));
        let mut check = Check::new(&format!("{task}-relative-error"), 1e-4);
        for _ in 0..per_task {
            let id = *live.choose(&mut rng).expect("some parameter has a gradient");
            let grad = grads.param(id).expect("live parameter");
            let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad.data()[i] != 0.0).collect();
            let k = *nonzero.choose(&mut rng).expect("non-zero entry");
            let mut plus = model.params.clone();
            plus.get_mut(id).data_mut()[k] += H;
            let mut minus = model.params.clone();
            minus.get_mut(id).data_mut()[k] -= H;
            let numeric = (loss_only(&model, &plus, &batch, ctx_seed)? - loss_only(&model, &minus, &batch, ctx_seed)?) / (2.0 * H);
            let analytic = grad.data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            check.observe(rel, || {
                json!({
                    "task": task.to_string(),
                    "config": cfg.to_text(),
                    "forward_seed": ctx_seed,
                    "parameter": model.params.name(id),
                    "index": k,
                    "analytic": analytic,
                    "numeric": numeric,
                })
            });
        }
        checks.push(check);
    }
    Ok(checks)
}

fn random_gaussian<R: Rng>(k: usize, rng: &mut R) -> GaussianParams {
    GaussianParams {
        mean: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        logvar: (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// `E_p[log p(x) - log q(x)]` from `samples` draws of `p`, taken as
/// antithetic pairs `z, -z`.
pub fn monte_carlo_kl<R: Rng>(p: &GaussianParams, q: &GaussianParams, samples: usize, rng: &mut R) -> f64 {
    let k = p.dim();
    let p_sd: Vec<f64> = p.logvar.iter().map(|v| (0.5 * v).exp()).collect();
    let q_inv_var: Vec<f64> = q.logvar.iter().map(|v| (-v).exp()).collect();
    let log_ratio = |i: usize, z: f64| {
        let dq = p.mean[i] + p_sd[i] * z - q.mean[i];
        0.5 * (q.logvar[i] - p.logvar[i]) - 0.5 * z * z + 0.5 * dq * dq * q_inv_var[i]
    };
    let pairs = samples.div_ceil(2);
    let mut total = 0.0;
    for _ in 0..pairs {
        for i in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            total += log_ratio(i, z) + log_ratio(i, -z);
        }
    }
    total / (2 * pairs) as f64
}

/// Closed-form KL (plain and in-graph) against sampling, plus `KL(p ‖ p) = 0`.
pub fn kl_monte_carlo(seed: u64, pairs: usize, samples: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identity = Check::new("self-divergence", 1e-12);
    let mut mc = Check::new("closed-form-vs-sampling", 1e-2);
    let mut graph = Check::new("graph-vs-closed-form", 1e-12);
    let empty = ParamStore::new();
    for _ in 0..pairs {
        let p = random_gaussian(8, &mut rng);
        let q = random_gaussian(8, &mut rng);
        let case = || json!({"p": {"mean": p.mean, "logvar": p.logvar}, "q": {"mean": q.mean, "logvar": q.logvar}});
        identity.observe(kl_divergence(&p, &p)?.abs(), case);
        let closed = kl_divergence(&p, &q)?;
        let sampled = monte_carlo_kl(&p, &q, samples, &mut rng);
        mc.observe((closed - sampled).abs(), || {
            let mut c = case();
            c["closed_form"] = json!(closed);
            c["monte_carlo"] = json!(sampled);
            c
        });
        let mut g = Graph::new(&empty);
        let vars = |g: &mut Graph, x: &GaussianParams| GaussianVars {
            mean: g.input(Tensor::row_vector(x.mean.clone())),
            logvar: g.input(Tensor::row_vector(x.logvar.clone())),
        };
        let (pv, qv) = (vars(&mut g, &p), vars(&mut g, &q));
        let node = semantic_loss(&mut g, &pv, &qv)?;
        graph.observe((g.scalar(node) - closed).abs(), case);
    }
    Ok(vec![identity, mc, graph])
}

fn vector_batch<R: Rng>(g: &mut Graph, b: usize, dim: usize, scale: f64, rng: &mut R) -> BatchEmbeddings {
    BatchEmbeddings::new(
        (0..b)
            .map(|i| BatchRow {
                rep: Rep::Vector(g.input(Tensor::uniform(1, dim, scale, rng))),
                target: TargetSpec::HardClass(i),
            })
            .collect(),
    )
}

fn token_batch<R: Rng>(g: &mut Graph, b: usize, dim: usize, scale: f64, rng: &mut R) -> BatchEmbeddings {
    BatchEmbeddings::new(
        (0..b)
            .map(|i| {
                let n = rng.random_range(1..=6);
                BatchRow {
                    rep: Rep::Tokens(g.input(Tensor::uniform(n, dim, scale, rng))),
                    target: TargetSpec::HardSeq(vec![i + 1; n]),
                }
            })
            .collect(),
    )
}

/// Source row of a hard target built by [`vector_batch`] or [`token_batch`].
fn source_row(t: &TargetSpec) -> Option<usize> {
    match t {
        TargetSpec::HardClass(i) => Some(*i),
        TargetSpec::HardSeq(s) => s.first().map(|&x| x - 1),
        TargetSpec::Mixed { .. } => None,
    }
}

/// Row-stochastic attention, normalized outputs, exact set sizes, convex
/// mixup and the two extremes of the sampling ratio.
pub fn attn_props(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stochastic = Check::new("attention-rows-sum-to-one", 1e-6);
    let mut normalized = Check::new("attended-rows-normalized", 1e-5);
    let mut sizes = Check::new("composed-set-size", 0.5);
    let mut convex = Check::new("mixup-convexity", 1e-12);
    let mut extremes = Check::new("sampling-ratio-extremes", 0.5);
    let empty = ParamStore::new();

    for &tokens in &[false, true] {
        for b in 1..=16 {
            let dim = 8;
            let cfg = AttnMixupConfig {
                num_heads: 4,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let attn = BatchAttention::new(&mut store, "attn", dim, &cfg, &mut rng);
            for id in store.ids().collect::<Vec<_>>() {
                let name = store.name(id);
                if name.contains(".head") && (name.ends_with(".score") || name.ends_with(".bias")) {
                    let (r, c) = store.get(id).shape();
                    *store.get_mut(id) = Tensor::uniform(r, c, 1.0, &mut rng);
                }
            }
            let mut g = Graph::new(&store);
            let h = if tokens {
                token_batch(&mut g, b, dim, 3.0, &mut rng)
            } else {
                vector_batch(&mut g, b, dim, 3.0, &mut rng)
            };
            let out = attn.forward(&mut g, &h, &mut ForwardCtx::eval())?;
            for w in &out.weights {
                let mut dev = 0.0f64;
                for i in 0..w.rows() {
                    let row = w.row(i);
                    dev = dev.max((row.iter().sum::<f64>() - 1.0).abs());
                    if row.iter().any(|&x| x < 0.0) {
                        dev = f64::INFINITY;
                    }
                }
                stochastic.observe(dev, || json!({"batch": b, "tokens": tokens, "weights": rows_json(w)}));
            }
            for row in &out.attended.rows {
                let v = g.value(row.rep.var());
                for i in 0..v.rows() {
                    let r = v.row(i);
                    let mean = r.iter().sum::<f64>() / r.len() as f64;
                    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64;
                    normalized.observe(mean.abs().max((var - 1.0).abs()), || json!({"batch": b, "tokens": tokens, "row": r}));
                }
            }
            let same_targets = h.rows.iter().zip(&out.attended.rows).all(|(a, b)| a.target == b.target);
            extremes.require(same_targets, || json!({"batch": b, "reason": "attention changed targets"}));
        }
    }

    // Δ in tenths keeps the expected sizes in integer arithmetic.
    for b in 2..=64usize {
        for tenths in [0usize, 4, 6, 8, 10] {
            let big_delta = tenths as f64 / 10.0;
            let mut g = Graph::new(&empty);
            let h = vector_batch(&mut g, b, 2, 1.0, &mut rng);
            let h_star = vector_batch(&mut g, b, 2, 1.0, &mut rng);
            let h_bar = vector_batch(&mut g, b, 2, 1.0, &mut rng);
            let composed = compose_training_set(&h, &h_star, &h_bar, big_delta, &mut rng)?;
            let expected = b + tenths * b / 10 + (10 - tenths) * b / 10;
            let prefix_ok = composed.rows[..b.min(composed.len())] == h.rows[..];
            let dev = composed.len().abs_diff(expected) as f64 + if prefix_ok { 0.0 } else { 1.0 };
            sizes.observe(dev, || json!({"batch": b, "big_delta": big_delta, "expected": expected, "got": composed.len()}));
        }
    }

    for round in 0..20 {
        let mut g = Graph::new(&empty);
        let b = rng.random_range(2..=12);
        let h = if round % 2 == 0 {
            vector_batch(&mut g, b, 6, 2.0, &mut rng)
        } else {
            token_batch(&mut g, b, 6, 2.0, &mut rng)
        };
        let mixed = mixup_synthesize(&mut g, &h, 0.2, &mut rng)?;
        for row in &mixed.rows {
            let TargetSpec::Mixed { lambda, a, b: other } = &row.target else {
                convex.require(false, || json!({"reason": "synthetic row without a mixed target"}));
                continue;
            };
            let (Some(i), Some(j)) = (source_row(a), source_row(other)) else {
                convex.require(false, || json!({"reason": "unrecognized source rows"}));
                continue;
            };
            let x = g.value(row.rep.var());
            let (xi, xj) = (g.value(h.rows[i].rep.var()), g.value(h.rows[j].rep.var()));
            let at = |t: &Tensor, r: usize, c: usize| if r < t.rows() { t.get(r, c) } else { 0.0 };
            let mut dev = if i == j { f64::INFINITY } else { 0.0f64 };
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let (u, v) = (at(xi, r, c), at(xj, r, c));
                    let lo = u.min(v) - x.get(r, c);
                    let hi = x.get(r, c) - u.max(v);
                    let interp = (x.get(r, c) - (lambda * u + (1.0 - lambda) * v)).abs();
                    dev = dev.max(lo).max(hi).max(interp);
                }
            }
            if x.rows() != xi.rows().max(xj.rows()) {
                dev = f64::INFINITY;
            }
            convex.observe(dev, || json!({"lambda": lambda, "i": i, "j": j, "mixed": rows_json(x), "x_i": rows_json(xi), "x_j": rows_json(xj)}));
        }

        let h_star = if round % 2 == 0 {
            vector_batch(&mut g, b, 6, 2.0, &mut rng)
        } else {
            token_batch(&mut g, b, 6, 2.0, &mut rng)
        };
        let h_star = BatchEmbeddings::new(
            h_star
                .rows
                .into_iter()
                .zip(&h.rows)
                .map(|(r, o)| BatchRow {
                    rep: r.rep,
                    target: o.target.clone(),
                })
                .collect(),
        );
        let all_original = vicinal_sampling_set(&h, &h_star, 1.0, &mut rng)?;
        let all_attended = vicinal_sampling_set(&h, &h_star, 0.0, &mut rng)?;
        extremes.require(all_original == h && all_attended == h_star, || json!({"batch": b, "reason": "delta extremes"}));
    }
    Ok(vec![stochastic, normalized, sizes, convex, extremes])
}
