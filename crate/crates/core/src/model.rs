//! The full extraction model: image backbone, prompt-fused text encoder,
//! semantic regularizer, batch attention and mixup, and a task head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attnmixup::{attn_mixup, BatchAttention, BatchEmbeddings, BatchRow, Rep, TargetSpec};
use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::encoders::{ImageBackbone, TextEncoder};
use crate::error::{invalid, Error, Result};
use crate::heads::{total_loss, CrfHead, RelationHead};
use crate::intrafusion::{semantic_loss, textual_prior, visual_posterior, GaussianHead, PromptProjector};
use crate::labels::{LabelManifest, RelationSet, TagSet};
use crate::nn::ForwardCtx;
use crate::params::ParamStore;
use crate::synthgen::{Sample, Task};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum TaskHead {
    Ner { crf: CrfHead, tags: TagSet },
    Re { classifier: RelationHead, relations: RelationSet },
}

/// Module layout; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub task: Task,
    pub backbone: ImageBackbone,
    pub text: TextEncoder,
    pub prompts: PromptProjector,
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
    pub attention: BatchAttention,
    pub head: TaskHead,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

/// Word states and semantic loss for one sample.
pub struct Encoded {
    pub states: Var,
    pub semantic: Var,
}

/// Scalar node plus its parts, for logging.
pub struct BatchLoss {
    pub total: Var,
    pub task: f64,
    pub semantic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Tags(Vec<usize>),
    Relation(usize),
}

/// Raw per-sample head outputs in eval mode: emissions (NER) or logits (RE).
pub type HeadScores = Tensor;

impl Model {
    /// Fresh parameters drawn from the run seed.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.text.d_model;
        let backbone = ImageBackbone::new(&mut store, &cfg.image, &mut rng);
        let text = TextEncoder::new(&mut store, &cfg.text, &mut rng);
        let prompts = PromptProjector::new(&mut store, &cfg.image.channels, d, &mut rng);
        let prior = GaussianHead::new(&mut store, "semantic.prior", d, cfg.latent_dim, &mut rng);
        let posterior = GaussianHead::new(&mut store, "semantic.posterior", cfg.image.pooled_dim, cfg.latent_dim, &mut rng);
        let head = match cfg.task {
            Task::Ner => TaskHead::Ner {
                crf: CrfHead::new(&mut store, "crf", d, &cfg.corpus.tag_set(), &mut rng),
                tags: cfg.corpus.tag_set(),
            },
            Task::Re => {
                let relations = cfg.corpus.relation_set();
                TaskHead::Re {
                    classifier: RelationHead::new(&mut store, "relation", d, relations.len(), &mut rng)?,
                    relations,
                }
            }
        };
        let attn_dim = match cfg.task {
            Task::Ner => d,
            Task::Re => 2 * d,
        };
        let attention = BatchAttention::new(&mut store, "batch_attention", attn_dim, &cfg.attn, &mut rng);
        Ok(Model {
            arch: Architecture {
                task: cfg.task,
                backbone,
                text,
                prompts,
                prior,
                posterior,
                attention,
                head,
                config: cfg.clone(),
            },
            params: store,
        })
    }

    pub fn labels(&self) -> LabelManifest {
        match &self.arch.head {
            TaskHead::Ner { tags, .. } => LabelManifest {
                tags: Some(tags.clone()),
                relations: None,
            },
            TaskHead::Re { relations, .. } => LabelManifest {
                tags: None,
                relations: Some(relations.clone()),
            },
        }
    }

    /// Replaces the parameters with checkpointed ones of identical layout.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.params.load_from(other)
    }
}

impl Architecture {
    /// Objects -> prompts -> fused word states; image -> semantic loss.
    pub fn encode(&self, g: &mut Graph, sample: &Sample, ctx: &mut ForwardCtx) -> Result<Encoded> {
        if sample.task != self.task {
            return Err(invalid!("{}: {} sample given to a {} model", sample.id, sample.task, self.task));
        }
        let objects = self.backbone.encode_objects(g, &sample.objects)?;
        let prompts = self.prompts.build_prompt_signal(g, &objects)?;
        let states = self.text.encode(g, &sample.tokens, Some(&prompts), ctx)?;
        let image = self.backbone.encode_image(g, &sample.image)?;
        let p_gamma = textual_prior(g, &self.prior, states)?;
        let p_beta = visual_posterior(g, &self.posterior, image)?;
        let semantic = semantic_loss(g, &p_gamma, &p_beta)?;
        Ok(Encoded { states, semantic })
    }

    fn target(&self, sample: &Sample) -> Result<TargetSpec> {
        match &self.head {
            TaskHead::Ner { tags, .. } => {
                let labels = sample
                    .ner_labels
                    .as_ref()
                    .ok_or_else(|| invalid!("{}: missing tag labels", sample.id))?;
                Ok(TargetSpec::HardSeq(labels.iter().map(|l| tags.id(l)).collect::<Result<_>>()?))
            }
            TaskHead::Re { relations, .. } => {
                let r = sample.relation.ok_or_else(|| invalid!("{}: missing relation", sample.id))?;
                if r >= relations.len() {
                    return Err(invalid!("{}: relation {r} out of range", sample.id));
                }
                Ok(TargetSpec::HardClass(r))
            }
        }
    }

    fn spans(sample: &Sample) -> Result<((usize, usize), (usize, usize))> {
        match (sample.head_span, sample.tail_span) {
            (Some(h), Some(t)) => Ok((h, t)),
            _ => Err(invalid!("{}: missing entity spans", sample.id)),
        }
    }

    /// The representation the batch modules operate on.
    fn representation(&self, g: &mut Graph, sample: &Sample, states: Var) -> Result<Rep> {
        match &self.head {
            TaskHead::Ner { .. } => Ok(Rep::Tokens(states)),
            TaskHead::Re { classifier, .. } => {
                let (h, t) = Self::spans(sample)?;
                Ok(Rep::Vector(classifier.pair_rep(g, states, h, t)?))
            }
        }
    }

    /// Embeddings `H` and the mean semantic loss of a batch.
    pub fn embed_batch(&self, g: &mut Graph, samples: &[&Sample], ctx: &mut ForwardCtx) -> Result<(BatchEmbeddings, Var)> {
        if samples.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let mut rows = Vec::with_capacity(samples.len());
        let mut sems = Vec::with_capacity(samples.len());
        for s in samples {
            let enc = self.encode(g, s, ctx)?;
            rows.push(BatchRow {
                rep: self.representation(g, s, enc.states)?,
                target: self.target(s)?,
            });
            sems.push(enc.semantic);
        }
        let sum = g.add_n(&sems);
        let semantic = g.scale(sum, 1.0 / samples.len() as f64);
        Ok((BatchEmbeddings::new(rows), semantic))
    }

    /// Mean head loss over the rows of `h`; tag losses are divided by length first.
    pub fn task_loss(&self, g: &mut Graph, h: &BatchEmbeddings) -> Result<Var> {
        let mut losses = Vec::with_capacity(h.len());
        for row in &h.rows {
            let l = match &self.head {
                TaskHead::Ner { crf, .. } => {
                    let n = g.shape(row.rep.var()).0;
                    let nll = crf.nll(g, row.rep.var(), &row.target)?;
                    g.scale(nll, 1.0 / n as f64)
                }
                TaskHead::Re { classifier, .. } => classifier.cross_entropy(g, row.rep.var(), &row.target)?,
            };
            losses.push(l);
        }
        let sum = g.add_n(&losses);
        Ok(g.scale(sum, 1.0 / h.len() as f64))
    }

    /// Training objective for one batch. In train mode the batch passes
    /// through attention and mixup unless disabled by the config.
    pub fn batch_loss(&self, g: &mut Graph, samples: &[&Sample], ctx: &mut ForwardCtx) -> Result<BatchLoss> {
        let (h, semantic) = self.embed_batch(g, samples, ctx)?;
        let h_hat = if ctx.is_train() && !self.config.no_attnmixup {
            attn_mixup(g, &self.attention, &self.config.attn, &h, ctx)?
        } else {
            h
        };
        let task = self.task_loss(g, &h_hat)?;
        let total = total_loss(g, task, semantic, self.config.effective_lambda_sem());
        let (tv, sv, lv) = (g.scalar(task), g.scalar(semantic), g.scalar(total));
        if !(tv.is_finite() && sv.is_finite() && lv.is_finite()) {
            return Err(Error::NonFinite(format!("loss: task {tv}, semantic {sv}")));
        }
        Ok(BatchLoss {
            total,
            task: tv,
            semantic: sv,
        })
    }

    /// Eval-mode head scores for each sample; batch modules are bypassed.
    pub fn scores(&self, g: &mut Graph, samples: &[&Sample]) -> Result<Vec<HeadScores>> {
        let mut ctx = ForwardCtx::eval();
        let (h, _) = self.embed_batch(g, samples, &mut ctx)?;
        let h = crate::attnmixup::eval_passthrough(h);
        h.rows
            .iter()
            .map(|row| {
                let v = match &self.head {
                    TaskHead::Ner { crf, .. } => crf.potentials(g, row.rep.var()).emissions,
                    TaskHead::Re { classifier, .. } => classifier.logits(g, row.rep.var()),
                };
                Ok(g.value(v).clone())
            })
            .collect()
    }

    /// Eval-mode predictions for a batch of samples.
    pub fn predict(&self, g: &mut Graph, samples: &[&Sample]) -> Result<Vec<Prediction>> {
        let mut ctx = ForwardCtx::eval();
        let (h, _) = self.embed_batch(g, samples, &mut ctx)?;
        let h = crate::attnmixup::eval_passthrough(h);
        h.rows
            .iter()
            .map(|row| match &self.head {
                TaskHead::Ner { crf, .. } => Ok(Prediction::Tags(crf.decode(g, row.rep.var())?)),
                TaskHead::Re { classifier, .. } => Ok(Prediction::Relation(classifier.predict(g, row.rep.var()))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_corpus;

    fn small(task: Task) -> (RunConfig, Vec<Sample>) {
        let mut cfg = RunConfig::new(task);
        cfg.corpus.num_train = 12;
        cfg.corpus.num_val = 2;
        cfg.corpus.num_test = 2;
        cfg.text.d_model = 16;
        cfg.text.ffn_dim = 16;
        cfg.image.channels = vec![4, 6];
        cfg.image.pooled_dim = 8;
        cfg.latent_dim = 4;
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        (cfg, corpus.train)
    }

    #[test]
    fn losses_are_finite_for_both_tasks() {
        for task in [Task::Ner, Task::Re] {
            let (cfg, data) = small(task);
            let model = Model::new(&cfg).unwrap();
            let batch: Vec<&Sample> = data.iter().take(5).collect();
            let mut g = Graph::new(&model.params);
            let loss = model.arch.batch_loss(&mut g, &batch, &mut ForwardCtx::train(3)).unwrap();
            assert!(g.scalar(loss.total).is_finite());
            assert!(loss.semantic >= 0.0);
            let expect = loss.task + 0.5 * loss.semantic;
            assert!((g.scalar(loss.total) - expect).abs() < 1e-9 * expect.max(1.0));
            let grads = g.backward(loss.total);
            assert!(model.params.ids().any(|id| grads.param(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0))));
        }
    }

    #[test]
    fn semantic_weight_zero_drops_the_term() {
        let (mut cfg, data) = small(Task::Re);
        cfg.no_semantic_loss = true;
        let model = Model::new(&cfg).unwrap();
        let batch: Vec<&Sample> = data.iter().take(4).collect();
        let mut g = Graph::new(&model.params);
        let loss = model.arch.batch_loss(&mut g, &batch, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.scalar(loss.total), loss.task);
        assert!(loss.semantic > 0.0);
    }

    #[test]
    fn eval_outputs_do_not_depend_on_batch() {
        for task in [Task::Ner, Task::Re] {
            let (cfg, data) = small(task);
            let model = Model::new(&cfg).unwrap();
            let all: Vec<&Sample> = data.iter().take(6).collect();
            let mut g = Graph::new(&model.params);
            let joint = model.arch.scores(&mut g, &all).unwrap();
            for (i, s) in all.iter().enumerate() {
                let mut g = Graph::new(&model.params);
                let alone = model.arch.scores(&mut g, &[s]).unwrap();
                assert_eq!(alone[0], joint[i]);
            }
        }
    }

    #[test]
    fn disabled_mixup_matches_eval_without_dropout() {
        let (mut cfg, data) = small(Task::Ner);
        cfg.no_attnmixup = true;
        cfg.text.dropout = 0.0;
        let model = Model::new(&cfg).unwrap();
        let batch: Vec<&Sample> = data.iter().take(4).collect();
        let mut g = Graph::new(&model.params);
        let train = model.arch.batch_loss(&mut g, &batch, &mut ForwardCtx::train(1)).unwrap();
        let eval = model.arch.batch_loss(&mut g, &batch, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.scalar(train.total), g.scalar(eval.total));
    }

    #[test]
    fn rejects_wrong_task_samples() {
        let (cfg, _) = small(Task::Ner);
        let (_, re_data) = small(Task::Re);
        let model = Model::new(&cfg).unwrap();
        let mut g = Graph::new(&model.params);
        assert!(model.arch.predict(&mut g, &[&re_data[0]]).is_err());
        assert!(model.arch.predict(&mut g, &[]).is_err());
    }
}
