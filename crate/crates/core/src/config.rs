//! Run configuration: a flat `key = value` text file.
//!
//! Every key is optional; unset keys take the task's defaults. `task` is
//! applied first so the batch size and epoch defaults follow it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attnmixup::AttnMixupConfig;
use crate::encoders::{ImageBackboneConfig, TextEncoderConfig};
use crate::error::{config_err, Error, Result};
use crate::optim::AdamWConfig;
use crate::synthgen::{CorpusSpec, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data_dir: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub text: TextEncoderConfig,
    pub image: ImageBackboneConfig,
    pub latent_dim: usize,
    pub attn: AttnMixupConfig,
    pub lambda_sem: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Stop once validation F1 reaches this value; 0 trains every epoch.
    pub stop_at_val_f1: f64,
    pub seed: u64,
    pub no_semantic_loss: bool,
    pub no_attnmixup: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("{key}: expected a boolean, got {v:?}")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        let corpus = CorpusSpec::new(task);
        let text = TextEncoderConfig {
            vocab_size: corpus.vocab_size,
            ..Default::default()
        };
        RunConfig {
            task,
            data_dir: None,
            train_path: None,
            val_path: None,
            test_path: None,
            corpus,
            text,
            image: ImageBackboneConfig::default(),
            latent_dim: 16,
            attn: AttnMixupConfig::default(),
            lambda_sem: 0.5,
            batch_size: match task {
                Task::Ner => 8,
                Task::Re => 16,
            },
            epochs: match task {
                Task::Ner => 30,
                Task::Re => 25,
            },
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.06,
            stop_at_val_f1: 0.0,
            seed: 42,
            no_semantic_loss: false,
            no_attnmixup: false,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = opt_path(v),
            "train_path" => self.train_path = opt_path(v),
            "val_path" => self.val_path = opt_path(v),
            "test_path" => self.test_path = opt_path(v),
            "vocab_size" => {
                self.corpus.vocab_size = parse_num(key, v)?;
                self.text.vocab_size = self.corpus.vocab_size;
            }
            "num_entity_types" => self.corpus.num_entity_types = parse_num(key, v)?,
            "num_relation_types" => self.corpus.num_relation_types = parse_num(key, v)?,
            "num_train" => self.corpus.num_train = parse_num(key, v)?,
            "num_val" => self.corpus.num_val = parse_num(key, v)?,
            "num_test" => self.corpus.num_test = parse_num(key, v)?,
            "data_seed" => self.corpus.seed = parse_num(key, v)?,
            "visual_dependency" => self.corpus.visual_dependency = parse_num(key, v)?,
            "min_len" => self.corpus.min_len = parse_num(key, v)?,
            "max_len" => self.corpus.max_len = parse_num(key, v)?,
            "image_size" => {
                self.corpus.image_size = parse_num(key, v)?;
                self.image.image_size = self.corpus.image_size;
            }
            "object_size" => {
                self.corpus.object_size = parse_num(key, v)?;
                self.image.object_size = self.corpus.object_size;
            }
            "d_model" => self.text.d_model = parse_num(key, v)?,
            "num_layers" => self.text.num_layers = parse_num(key, v)?,
            "text_heads" => self.text.num_heads = parse_num(key, v)?,
            "ffn_dim" => self.text.ffn_dim = parse_num(key, v)?,
            "max_tokens" => self.text.max_len = parse_num(key, v)?,
            "text_dropout" => self.text.dropout = parse_num(key, v)?,
            "image_channels" => self.image.channels = parse_list(key, v)?,
            "kernel_sizes" => self.image.kernel_sizes = parse_list(key, v)?,
            "strides" => self.image.strides = parse_list(key, v)?,
            "pooled_dim" => self.image.pooled_dim = parse_num(key, v)?,
            "latent_dim" => self.latent_dim = parse_num(key, v)?,
            "attn_heads" => self.attn.num_heads = parse_num(key, v)?,
            "attn_dropout" => self.attn.dropout = parse_num(key, v)?,
            "delta" => self.attn.delta = parse_num(key, v)?,
            "big_delta" => self.attn.big_delta = parse_num(key, v)?,
            "beta_alpha" => self.attn.beta_alpha = parse_num(key, v)?,
            "lambda_sem" => self.lambda_sem = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_num(key, v)?,
            "stop_at_val_f1" => self.stop_at_val_f1 = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "no_semantic_loss" => self.no_semantic_loss = parse_bool(key, v)?,
            "no_attnmixup" => self.no_attnmixup = parse_bool(key, v)?,
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key except `task`, in a fixed order.
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data_dir", path_text(&self.data_dir)),
            ("train_path", path_text(&self.train_path)),
            ("val_path", path_text(&self.val_path)),
            ("test_path", path_text(&self.test_path)),
            ("vocab_size", self.corpus.vocab_size.to_string()),
            ("num_entity_types", self.corpus.num_entity_types.to_string()),
            ("num_relation_types", self.corpus.num_relation_types.to_string()),
            ("num_train", self.corpus.num_train.to_string()),
            ("num_val", self.corpus.num_val.to_string()),
            ("num_test", self.corpus.num_test.to_string()),
            ("data_seed", self.corpus.seed.to_string()),
            ("visual_dependency", self.corpus.visual_dependency.to_string()),
            ("min_len", self.corpus.min_len.to_string()),
            ("max_len", self.corpus.max_len.to_string()),
            ("image_size", self.corpus.image_size.to_string()),
            ("object_size", self.corpus.object_size.to_string()),
            ("d_model", self.text.d_model.to_string()),
            ("num_layers", self.text.num_layers.to_string()),
            ("text_heads", self.text.num_heads.to_string()),
            ("ffn_dim", self.text.ffn_dim.to_string()),
            ("max_tokens", self.text.max_len.to_string()),
            ("text_dropout", self.text.dropout.to_string()),
            ("image_channels", join(&self.image.channels)),
            ("kernel_sizes", join(&self.image.kernel_sizes)),
            ("strides", join(&self.image.strides)),
            ("pooled_dim", self.image.pooled_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("attn_heads", self.attn.num_heads.to_string()),
            ("attn_dropout", self.attn.dropout.to_string()),
            ("delta", self.attn.delta.to_string()),
            ("big_delta", self.attn.big_delta.to_string()),
            ("beta_alpha", self.attn.beta_alpha.to_string()),
            ("lambda_sem", self.lambda_sem.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("stop_at_val_f1", self.stop_at_val_f1.to_string()),
            ("seed", self.seed.to_string()),
            ("no_semantic_loss", self.no_semantic_loss.to_string()),
            ("no_attnmixup", self.no_attnmixup.to_string()),
        ]
    }

    /// Parses config text. `task` overrides any `task` key in the text.
    pub fn parse(text: &str, path: &Path, task: Option<Task>) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut order = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if entries.insert(k.clone(), (i + 1, v)).is_some() {
                return Err(parse_err(format!("duplicate key {k:?}")));
            }
            order.push(k);
        }
        let task = match (task, entries.get("task")) {
            (Some(t), _) => t,
            (None, Some((line, v))) => v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("unknown task {v:?}"),
            })?,
            (None, None) => return Err(config_err!("{}: no task given", path.display())),
        };
        let mut cfg = RunConfig::new(task);
        for k in order.iter().filter(|k| *k != "task") {
            let (line, v) = &entries[k];
            cfg.set(k, v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, task: Option<Task>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, task)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("task = {}\n", self.task);
        for (k, v) in self.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.text.validate()?;
        self.image.validate(self.text.num_layers)?;
        self.attn.validate()?;
        if self.text.vocab_size != self.corpus.vocab_size {
            return Err(config_err!("text vocabulary must match the corpus vocabulary"));
        }
        if self.text.max_len < self.corpus.max_len {
            return Err(config_err!("max_tokens {} below sentence max_len {}", self.text.max_len, self.corpus.max_len));
        }
        if self.image.image_size != self.corpus.image_size || self.image.object_size != self.corpus.object_size {
            return Err(config_err!("image sizes disagree between corpus and backbone"));
        }
        if self.latent_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!("latent_dim, batch_size and epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("lr must be positive and weight_decay non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.stop_at_val_f1) {
            return Err(config_err!("warmup_fraction and stop_at_val_f1 must lie in [0, 1]"));
        }
        if !(self.lambda_sem >= 0.0 && self.lambda_sem.is_finite()) {
            return Err(config_err!("lambda_sem must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Weight actually applied to the semantic loss.
    pub fn effective_lambda_sem(&self) -> f64 {
        if self.no_semantic_loss {
            0.0
        } else {
            self.lambda_sem
        }
    }

    /// Short digest of everything but the seed and data locations.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("task={}\n", self.task));
        for (k, v) in self.pairs() {
            if !matches!(k, "seed" | "data_dir" | "train_path" | "val_path" | "test_path") {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// File stem shared by every artifact of this run.
    pub fn run_stem(&self) -> String {
        format!("{}-{}-s{}", self.task, self.hash(), self.seed)
    }

    /// `(train, val, test)` corpus locations.
    pub fn split_paths(&self) -> Result<[PathBuf; 3]> {
        let default = |split: &str| self.data_dir.as_ref().map(|d| d.join(format!("{}_{split}.jsonl", self.task)));
        let pick = |explicit: &Option<PathBuf>, split: &str| {
            explicit
                .clone()
                .or_else(|| default(split))
                .ok_or_else(|| config_err!("no {split} corpus: set data_dir or {split}_path"))
        };
        Ok([
            pick(&self.train_path, "train")?,
            pick(&self.val_path, "val")?,
            pick(&self.test_path, "test")?,
        ])
    }
}
