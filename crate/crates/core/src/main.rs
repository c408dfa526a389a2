use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sptrim::data::{generate_synthetic, load_features, save_features, Dataset, SyntheticSpec};
use sptrim::model::ModelConfig;
use sptrim::pipeline::{
    self, emit_report, load_checkpoint, save_checkpoint, Method, Stage, StageConfig, StageReport,
};
use sptrim::{Error, Result};

#[derive(Parser)]
#[command(name = "sptrim", version, about = "Channel pruning and binarization for keyword-spotting CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature file to <out>/features.bin.
    GenData(Opts),
    /// Unpruned float training from scratch.
    Baseline(Opts),
    /// Channel pruning (gl, rgsm or gsbc) from a cold start.
    Stage1(Opts),
    /// Float retraining under the stage-I mask; needs --checkpoint.
    Stage2(Opts),
    /// Binarization warm-started from stage II; needs --checkpoint.
    Stage3(Opts),
    /// All three stages in sequence.
    Pipeline(Opts),
    /// Validation accuracy of --checkpoint.
    Eval(Opts),
    /// Re-emit the report stored in --checkpoint into --out.
    Report(Opts),
}

#[derive(Args, Default)]
struct Opts {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Feature file; a synthetic dataset is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `toy` or `full`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    stage3_epochs: Option<usize>,
    #[arg(long)]
    stage3_lr: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Skip the full-batch Lagrangian and residual columns.
    #[arg(long)]
    no_diagnostics: bool,
}

const KEYS: &[&str] = &[
    "method", "lambda", "beta", "mu", "rho", "lr", "lr_drop_epoch", "epochs", "batch_size", "seed",
    "weight_decay", "data", "checkpoint", "out", "model", "stage2_epochs", "stage2_lr",
    "stage3_epochs", "stage3_lr", "classes", "per_class", "noise", "no_diagnostics",
];

/// Flags layered over an optional key = value file.
struct Settings {
    opts: Opts,
    file: HashMap<String, String>,
}

impl Settings {
    fn new(opts: Opts) -> Result<Self> {
        let file = match &opts.config {
            Some(path) => parse_config(&fs::read_to_string(path)?)?,
            None => HashMap::new(),
        };
        Ok(Self { opts, file })
    }

    fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}"))),
            None => Ok(None),
        }
    }

    fn path(&self, key: &str, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone().or_else(|| self.file.get(key).map(PathBuf::from))
    }

    fn out(&self) -> PathBuf {
        self.path("out", &self.opts.out).unwrap_or_else(|| PathBuf::from("out"))
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        self.path("checkpoint", &self.opts.checkpoint)
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.pick("seed", self.opts.seed)?.unwrap_or(0))
    }

    fn dataset(&self) -> Result<Dataset> {
        match self.path("data", &self.opts.data) {
            Some(path) => load_features(path),
            None => generate_synthetic(&self.synthetic_spec()?),
        }
    }

    fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let toy = SyntheticSpec::toy(self.seed()?);
        Ok(SyntheticSpec {
            num_classes: self.pick("classes", self.opts.classes)?.unwrap_or(toy.num_classes),
            per_class: self.pick("per_class", self.opts.per_class)?.unwrap_or(toy.per_class),
            noise_sigma: self.pick("noise", self.opts.noise)?.unwrap_or(toy.noise_sigma),
            ..toy
        })
    }

    fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let kind: String = self.pick("model", self.opts.model.clone())?.unwrap_or_else(|| "toy".into());
        let base = match kind.as_str() {
            "toy" => ModelConfig::toy(),
            "full" => ModelConfig::full_size(),
            other => return Err(Error::Config(format!("unknown model {other:?}"))),
        };
        let (t, f) = ds.dims();
        let cfg = ModelConfig {
            t,
            f,
            num_classes: ds.num_classes(),
            seed: self.seed()?,
            ..base
        };
        cfg.dims()?;
        Ok(cfg)
    }

    /// Stage config for `stage`, starting from the toy defaults. Inside a
    /// pipeline run, stages II and III take `stage{n}_epochs`/`stage{n}_lr`
    /// and ignore `method`, which then names the pruning method.
    fn stage_config(&self, stage: Stage, in_pipeline: bool) -> Result<StageConfig> {
        let o = &self.opts;
        let prefixed = in_pipeline && matches!(stage, Stage::II | Stage::III);
        let method = match self.pick::<String>("method", o.method.clone())? {
            Some(m) if matches!(stage, Stage::I | Stage::III) && !prefixed => Some(m.parse::<Method>()?),
            _ => None,
        };
        let (epochs_key, lr_key, epochs_flag, lr_flag) = match (prefixed, stage) {
            (true, Stage::II) => ("stage2_epochs", "stage2_lr", o.stage2_epochs, o.stage2_lr),
            (true, _) => ("stage3_epochs", "stage3_lr", o.stage3_epochs, o.stage3_lr),
            _ => ("epochs", "lr", o.epochs, o.lr),
        };
        let mut cfg = pipeline::toy_defaults(stage, method);
        if let Some(v) = self.pick(epochs_key, epochs_flag)? {
            cfg.epochs = v;
        }
        if let Some(v) = self.pick(lr_key, lr_flag)? {
            cfg.eta = v;
        }
        if stage == Stage::I {
            if let Some(v) = self.pick("lambda", o.lambda)? {
                cfg.lambda = v;
            }
            if let Some(v) = self.pick("beta", o.beta)? {
                cfg.beta = v;
            }
            if let Some(v) = self.pick("mu", o.mu)? {
                cfg.mu = v;
            }
        }
        if stage == Stage::III {
            if let Some(v) = self.pick("rho", o.rho)? {
                cfg.rho = v;
            }
        }
        if let Some(v) = self.pick("lr_drop_epoch", o.lr_drop_epoch)? {
            cfg.lr_drop_epoch = Some(v);
        }
        if let Some(v) = self.pick("batch_size", o.batch_size)? {
            cfg.batch_size = v;
        }
        if let Some(v) = self.pick("weight_decay", o.weight_decay)? {
            cfg.weight_decay = v;
        }
        cfg.seed = self.seed()?;
        cfg.diagnostics = !(o.no_diagnostics || self.pick("no_diagnostics", None::<bool>)? == Some(true));
        cfg.validate(stage)?;
        Ok(cfg)
    }
}

fn parse_config(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("config line {}: unknown key {key:?}", n + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn finish(report: &StageReport, ckpt: &pipeline::Checkpoint, dir: &Path, name: &str) -> Result<()> {
    emit_report(report, dir)?;
    save_checkpoint(dir.join(name), ckpt)?;
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(opts) => {
            let s = Settings::new(opts)?;
            let ds = generate_synthetic(&s.synthetic_spec()?)?;
            let out = s.out();
            fs::create_dir_all(&out)?;
            let path = out.join("features.bin");
            save_features(&ds, &path)?;
            println!("{}", json!({ "path": path, "examples": ds.len() }));
        }
        Command::Baseline(opts) => {
            let s = Settings::new(opts)?;
            let ds = s.dataset()?;
            let cfg = s.stage_config(Stage::Baseline, false)?;
            let (ckpt, report) = pipeline::train_baseline(&cfg, &s.model_config(&ds)?, &ds)?;
            finish(&report, &ckpt, &s.out(), "baseline.ckpt")?;
        }
        Command::Stage1(opts) => {
            let s = Settings::new(opts)?;
            let ds = s.dataset()?;
            let cfg = s.stage_config(Stage::I, false)?;
            let (ckpt, report) = pipeline::run_stage1(&cfg, &s.model_config(&ds)?, &ds)?;
            finish(&report, &ckpt, &s.out(), "stage1.ckpt")?;
        }
        Command::Stage2(opts) => {
            let s = Settings::new(opts)?;
            let input = load_checkpoint(s.checkpoint()?)?;
            let ds = s.dataset()?;
            let cfg = s.stage_config(Stage::II, false)?;
            let (ckpt, report) = pipeline::run_stage2(&input, &cfg, &ds)?;
            finish(&report, &ckpt, &s.out(), "stage2.ckpt")?;
        }
        Command::Stage3(opts) => {
            let s = Settings::new(opts)?;
            let input = load_checkpoint(s.checkpoint()?)?;
            let ds = s.dataset()?;
            let cfg = s.stage_config(Stage::III, false)?;
            let (ckpt, report) = pipeline::run_stage3(&input, &cfg, &ds)?;
            finish(&report, &ckpt, &s.out(), "stage3.ckpt")?;
        }
        Command::Pipeline(opts) => {
            let s = Settings::new(opts)?;
            let ds = s.dataset()?;
            let model_cfg = s.model_config(&ds)?;
            let c1 = s.stage_config(Stage::I, true)?;
            let c2 = s.stage_config(Stage::II, true)?;
            let c3 = s.stage_config(Stage::III, true)?;
            let run = pipeline::run_pipeline(&model_cfg, [&c1, &c2, &c3], &ds)?;
            let out = s.out();
            for (i, (report, ckpt)) in run.reports.iter().zip(&run.checkpoints).enumerate() {
                let dir = out.join(format!("stage{}", i + 1));
                emit_report(report, &dir)?;
                save_checkpoint(out.join(format!("stage{}.ckpt", i + 1)), ckpt)?;
            }
            let summaries: Vec<_> = run.reports.iter().map(|r| &r.summary).collect();
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
            fs::write(out.join("mask.json"), pipeline::mask_json(&run.reports[0].mask)?)?;
            for summary in summaries {
                println!("{}", serde_json::to_string(summary)?);
            }
        }
        Command::Eval(opts) => {
            let s = Settings::new(opts)?;
            let ckpt = load_checkpoint(s.checkpoint()?)?;
            let ds = s.dataset()?;
            let accuracy = pipeline::evaluate_checkpoint(&ckpt, &ds)?;
            let sparsity = ckpt.model.mask().map_or(0.0, |m| m.sparsity_percent());
            println!(
                "{}",
                json!({ "stage": ckpt.stage, "accuracy": accuracy, "channel_sparsity": sparsity })
            );
        }
        Command::Report(opts) => {
            let s = Settings::new(opts)?;
            let ckpt = load_checkpoint(s.checkpoint()?)?;
            let report = ckpt
                .report
                .ok_or_else(|| Error::Config("checkpoint carries no report".into()))?;
            emit_report(&report, s.out())?;
            println!("{}", serde_json::to_string(&report.summary)?);
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
