//! Training loop, evaluation and the ablation matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::labels::{LabelManifest, OUTSIDE};
use crate::metrics::{ner_report, re_report, MetricsReport};
use crate::model::{Model, Prediction, TaskHead};
use crate::nn::ForwardCtx;
use crate::optim::{scheduled_lr, AdamW};
use crate::params::ParamStore;
use crate::synthgen::{read_corpus, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub semantic_loss: f64,
    pub val_f1: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} loss {:.12} task {:.12} semantic {:.12} val_f1 {:.6}",
            self.epoch, self.loss, self.task_loss, self.semantic_loss, self.val_f1
        )
    }
}

pub struct Trained {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Run facts stored next to the metrics in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub no_semantic_loss: bool,
    pub no_attnmixup: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub run: RunInfo,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub labels: PathBuf,
    pub report: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
    pub report_data: Report,
    pub epochs: Vec<EpochRecord>,
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let [train, val, test] = cfg.split_paths()?;
    let splits = Splits {
        train: read_corpus(&train)?,
        val: read_corpus(&val)?,
        test: read_corpus(&test)?,
    };
    for (name, s) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if s.is_empty() {
            return Err(invalid!("{name} corpus is empty"));
        }
        if let Some(bad) = s.iter().find(|x| x.task != cfg.task) {
            return Err(invalid!("{name} corpus holds {} sample {}", bad.task, bad.id));
        }
    }
    Ok(splits)
}

/// Eval-mode metrics over `samples`, processed `batch` at a time.
pub fn evaluate(model: &Model, samples: &[Sample], batch: usize) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new(&model.params);
        preds.extend(model.arch.predict(&mut g, &refs)?);
    }
    match &model.arch.head {
        TaskHead::Ner { tags, .. } => {
            let mut gold = Vec::with_capacity(samples.len());
            for s in samples {
                let labels = s.ner_labels.as_ref().ok_or_else(|| invalid!("{}: missing tag labels", s.id))?;
                gold.push(labels.iter().map(|l| tags.id(l)).collect::<Result<Vec<_>>>()?);
            }
            let pred: Vec<Vec<usize>> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Tags(t) => t,
                    Prediction::Relation(_) => vec![OUTSIDE],
                })
                .collect();
            ner_report(&gold, &pred, tags)
        }
        TaskHead::Re { relations, .. } => {
            let gold: Vec<usize> = samples
                .iter()
                .map(|s| s.relation.ok_or_else(|| invalid!("{}: missing relation", s.id)))
                .collect::<Result<_>>()?;
            let pred: Vec<usize> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Relation(r) => r,
                    Prediction::Tags(_) => usize::MAX,
                })
                .collect();
            re_report(&gold, &pred, relations)
        }
    }
}

/// Optimizes a fresh model, keeping the parameters of the best validation epoch.
/// `on_epoch` sees each record as it is produced.
pub fn train_model(cfg: &RunConfig, train: &[Sample], val: &[Sample], on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Trained> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("training needs non-empty train and validation sets"));
    }
    let mut model = Model::new(cfg)?;
    let mut opt = AdamW::new(cfg.optimizer(), &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut forward_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    forward_rng.set_stream(2);
    let mut ctx = ForwardCtx::train_with(forward_rng);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut task_sum, mut sem_sum) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (grads, loss, task, sem) = {
                let mut g = Graph::new(&model.params);
                let out = model.arch.batch_loss(&mut g, &batch, &mut ctx).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {}: {m}", step + 1)),
                    other => other,
                })?;
                (g.backward(out.total), g.scalar(out.total), out.task, out.semantic)
            };
            opt.step(&mut model.params, &grads, scheduled_lr(cfg.lr, step, total_steps, cfg.warmup_fraction));
            step += 1;
            loss_sum += loss;
            task_sum += task;
            sem_sum += sem;
        }
        let val_f1 = evaluate(&model, val, cfg.batch_size)?.f1;
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            task_loss: task_sum / n,
            semantic_loss: sem_sum / n,
            val_f1,
        };
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|b| val_f1 > b.1) {
            best = Some((epoch, val_f1, model.params.clone()));
        }
        if cfg.stop_at_val_f1 > 0.0 && val_f1 >= cfg.stop_at_val_f1 {
            break;
        }
    }
    let (best_epoch, best_val_f1, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(Trained {
        model,
        epochs,
        best_epoch,
        best_val_f1,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(format!("serializing report: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn run_info(cfg: &RunConfig, split: &str) -> RunInfo {
    RunInfo {
        task: cfg.task.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        split: split.to_owned(),
        no_semantic_loss: cfg.no_semantic_loss,
        no_attnmixup: cfg.no_attnmixup,
        best_epoch: None,
        best_val_f1: None,
    }
}

/// Trains, writes checkpoint, labels, config, log and test report to `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<RunArtifacts> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = cfg.run_stem();
    let trained = train_model(cfg, &splits.train, &splits.val, on_epoch)?;
    let metrics = evaluate(&trained.model, &splits.test, cfg.batch_size)?;

    let checkpoint = out.join(format!("{stem}.ckpt"));
    trained.model.params.save(&checkpoint)?;
    let labels = out.join(format!("{stem}.labels"));
    trained.model.labels().write(&labels)?;
    let config = out.join(format!("{stem}.cfg"));
    write_text(&config, &cfg.to_text())?;
    let log = out.join(format!("{stem}.log"));
    let mut log_text = String::new();
    for r in &trained.epochs {
        writeln!(log_text, "{}", r.log_line()).expect("writing to a string");
    }
    writeln!(log_text, "best epoch {} val_f1 {:.6}", trained.best_epoch, trained.best_val_f1).expect("writing to a string");
    write_text(&log, &log_text)?;

    let mut run = run_info(cfg, "test");
    run.best_epoch = Some(trained.best_epoch);
    run.best_val_f1 = Some(trained.best_val_f1);
    let report_data = Report { metrics, run };
    let report = out.join(format!("{stem}.metrics.json"));
    write_json(&report, &report_data)?;
    Ok(RunArtifacts {
        checkpoint,
        labels,
        report,
        log,
        config,
        report_data,
        epochs: trained.epochs,
    })
}

/// Loads a checkpoint for `cfg`, checking the label manifest beside it when present.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg)?;
    let stored = ParamStore::load(checkpoint)?;
    model
        .load_params(&stored)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", checkpoint.display())))?;
    let labels = checkpoint.with_extension("labels");
    if labels.exists() {
        let manifest = LabelManifest::read(&labels)?;
        if manifest != model.labels() {
            return Err(Error::Checkpoint(format!("{} does not match the configured labels", labels.display())));
        }
    }
    Ok(model)
}

/// Evaluates a checkpoint on one split and writes `<stem>.<split>.eval.json`.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str, out: &Path) -> Result<(PathBuf, Report)> {
    let stem = cfg.run_stem();
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(format!("{stem}.ckpt")));
    let model = load_model(cfg, &ckpt)?;
    let [train, val, test] = cfg.split_paths()?;
    let path = match split {
        "train" => train,
        "val" => val,
        "test" => test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let samples = read_corpus(&path)?;
    let metrics = evaluate(&model, &samples, cfg.batch_size)?;
    let report = Report {
        metrics,
        run: run_info(cfg, split),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dest = out.join(format!("{stem}.{split}.eval.json"));
    write_json(&dest, &report)?;
    Ok((dest, report))
}

/// `(name, config)` rows of the ablation matrix.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let full = RunConfig {
        no_semantic_loss: false,
        no_attnmixup: false,
        ..cfg.clone()
    };
    let no_sem = RunConfig {
        no_semantic_loss: true,
        ..full.clone()
    };
    let no_mix = RunConfig {
        no_attnmixup: true,
        ..full.clone()
    };
    vec![("full", full), ("no_semantic_loss", no_sem), ("no_attnmixup", no_mix)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_corpus, write_corpus};

    fn tiny(task: crate::synthgen::Task, dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::new(task);
        cfg.corpus.num_train = 10;
        cfg.corpus.num_val = 4;
        cfg.corpus.num_test = 4;
        cfg.text.d_model = 8;
        cfg.text.ffn_dim = 8;
        cfg.image.channels = vec![2, 2];
        cfg.image.pooled_dim = 4;
        cfg.latent_dim = 2;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.data_dir = Some(dir.to_path_buf());
        let c = generate_corpus(&cfg.corpus).unwrap();
        for (split, s) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
            write_corpus(s, &dir.join(format!("{task}_{split}.jsonl"))).unwrap();
        }
        cfg
    }

    #[test]
    fn artifacts_and_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(crate::synthgen::Task::Ner, dir.path());
        let out = dir.path().join("out");
        let mut seen = 0;
        let run = run_training(&cfg, &out, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        for p in [&run.checkpoint, &run.labels, &run.report, &run.log, &run.config] {
            assert!(p.exists(), "{}", p.display());
            assert!(p.file_name().unwrap().to_str().unwrap().contains(&cfg.hash()));
        }
        let (_, rep) = run_eval(&cfg, None, "test", &out).unwrap();
        assert_eq!(rep.metrics, run.report_data.metrics);
        let (_, again) = run_eval(&cfg, Some(&run.checkpoint), "test", &out).unwrap();
        assert_eq!(again, rep);
        assert!(run_eval(&cfg, None, "nope", &out).is_err());

        let mut other = cfg.clone();
        other.text.d_model = 12;
        other.text.ffn_dim = 12;
        assert!(matches!(load_model(&other, &run.checkpoint), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn ablation_rows() {
        let rows = ablation_configs(&RunConfig::new(crate::synthgen::Task::Re));
        let flags: Vec<_> = rows.iter().map(|(_, c)| (c.no_semantic_loss, c.no_attnmixup)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true)]);
    }
}
