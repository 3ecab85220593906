use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mmie::config::RunConfig;
use mmie::synthgen::{generate_corpus, write_corpus, Task};
use mmie::train::{ablation_configs, run_eval, run_training, EpochRecord, RunArtifacts};
use mmie::verify::{run_suite, Suite};
use mmie::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;

#[derive(Parser)]
#[command(name = "mmie", version, about = "Train and check a multimodal information-extraction model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test corpora as `<out>/<task>_<split>.jsonl`.
    GenData(Common),
    /// Train, keep the best validation epoch and report test metrics.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to the run's own checkpoint in `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Run self-check suites; all of them when none are named.
    Verify {
        #[arg(value_name = "SUITE")]
        suites: Vec<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write one JSON report per suite here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model, then without the semantic loss, then without AttnMixup.
    Ablate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// `ner` or `re`; overrides the config file.
    #[arg(long)]
    task: Option<String>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (the corpus seed for `gen-data`).
    #[arg(long)]
    seed: Option<u64>,
    /// Repeat the run once per seed, e.g. `--seeds 1,2,3`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    no_semantic_loss: bool,
    #[arg(long)]
    no_attnmixup: bool,
    /// Output directory; also the corpus location when the config names none.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        let task = self.task.as_deref().map(str::parse::<Task>).transpose()?;
        let mut cfg = match (&self.config, task) {
            (Some(path), task) => RunConfig::load(path, task)?,
            (None, Some(task)) => RunConfig::new(task),
            (None, None) => return Err(Error::Config("give --task or --config".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.no_semantic_loss |= self.no_semantic_loss;
        cfg.no_attnmixup |= self.no_attnmixup;
        if cfg.data_dir.is_none() && cfg.train_path.is_none() {
            cfg.data_dir = Some(self.out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// One config per requested seed.
    fn configs(&self) -> Result<Vec<RunConfig>, Error> {
        let base = self.config()?;
        if self.seeds.is_empty() {
            return Ok(vec![base]);
        }
        Ok(self.seeds.iter().map(|&seed| RunConfig { seed, ..base.clone() }).collect())
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))
}

fn print_epoch(r: &EpochRecord) {
    println!("{}", r.log_line());
}

fn gen_data(common: &Common) -> Outcome {
    let mut cfg = common.config()?;
    if let Some(seed) = common.seed {
        cfg.corpus.seed = seed;
    }
    let corpus = generate_corpus(&cfg.corpus)?;
    fs::create_dir_all(&common.out).map_err(|e| Failure::Config(format!("{}: {e}", common.out.display())))?;
    for (split, samples) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let path = common.out.join(format!("{}_{split}.jsonl", cfg.task));
        write_corpus(samples, &path)?;
        println!("wrote {} samples to {}", samples.len(), path.display());
    }
    Ok(())
}

fn summarize(run: &RunArtifacts) {
    let m = &run.report_data.metrics;
    println!(
        "test precision {:.4} recall {:.4} f1 {:.4}; report {}",
        m.precision,
        m.recall,
        m.f1,
        run.report.display()
    );
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn train(common: &Common) -> Outcome {
    let cfgs = common.configs()?;
    let mut f1s = Vec::new();
    for cfg in &cfgs {
        println!("training {}", cfg.run_stem());
        let run = run_training(cfg, &common.out, &mut print_epoch)?;
        summarize(&run);
        f1s.push(run.report_data.metrics.f1);
    }
    if cfgs.len() > 1 {
        let (mean, std) = mean_std(&f1s);
        let seeds: Vec<u64> = cfgs.iter().map(|c| c.seed).collect();
        println!("f1 over seeds {seeds:?}: mean {mean:.4} std {std:.4}");
        let path = common.out.join(format!("{}-{}.seeds.json", cfgs[0].task, cfgs[0].hash()));
        write_json(&path, &json!({"seeds": seeds, "f1": f1s, "mean_f1": mean, "std_f1": std}))?;
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, split: &str) -> Outcome {
    for cfg in common.configs()? {
        let (path, report) = run_eval(&cfg, checkpoint, split, &common.out)?;
        let m = &report.metrics;
        println!(
            "{split} precision {:.4} recall {:.4} f1 {:.4}; report {}",
            m.precision,
            m.recall,
            m.f1,
            path.display()
        );
    }
    Ok(())
}

fn verify(names: &[String], seed: u64, out: Option<&Path>) -> Outcome {
    let suites: Vec<Suite> = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?
    };
    let mut failed = false;
    for suite in suites {
        let report = run_suite(suite, seed)?;
        for line in report.lines() {
            println!("{line}");
        }
        for check in report.checks.iter().filter(|c| !c.passed) {
            eprintln!(
                "{suite}/{} failing case: {}",
                check.name,
                check.failure.as_ref().map(|f| f.to_string()).unwrap_or_default()
            );
        }
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
            let value = serde_json::to_value(&report).expect("reports serialize");
            write_json(&dir.join(format!("verify-{suite}-s{seed}.json")), &value)?;
        }
        failed |= !report.passed();
    }
    if failed {
        Err(Failure::Verify)
    } else {
        Ok(())
    }
}

fn ablate(common: &Common) -> Outcome {
    for base in common.configs()? {
        let mut rows = Vec::new();
        for (name, cfg) in ablation_configs(&base) {
            println!("ablation {name}: {}", cfg.run_stem());
            let run = run_training(&cfg, &common.out, &mut print_epoch)?;
            summarize(&run);
            rows.push((name, run.report_data));
        }
        println!("{:<18} {:>9} {:>9} {:>9}", "row", "precision", "recall", "f1");
        for (name, r) in &rows {
            let m = &r.metrics;
            println!("{name:<18} {:>9.4} {:>9.4} {:>9.4}", m.precision, m.recall, m.f1);
        }
        let summary: serde_json::Map<_, _> = rows
            .iter()
            .map(|(name, r)| (name.to_string(), serde_json::to_value(r).expect("reports serialize")))
            .collect();
        let path = common.out.join(format!("{}.ablation.json", base.run_stem()));
        write_json(&path, &serde_json::Value::Object(summary))?;
        println!("ablation summary {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint, split } => eval(common, checkpoint.as_deref(), split),
        Command::Verify { suites, seed, out } => verify(suites, *seed, out.as_deref()),
        Command::Ablate(c) => ablate(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
