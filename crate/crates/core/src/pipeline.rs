//! The three-stage protocol: prune (stage I), retrain under a frozen channel
//! mask (stage II), binarize with a warm start (stage III). Also holds the
//! checkpoint format handed between stages and the report writers.
//!
//! Checkpoint layout, integers little-endian `u32`:
//!
//! ```text
//! "SPTRIMCK1\n"  version  json_len  json_block
//! tensor_count  tensor_count x ( name_len name rank dims.. f64 data.. )
//! has_mask:u8  [ mask_len  mask_len x u8 ]
//! ```
//!
//! The JSON block carries the model config, stage tag, RNG state, declared
//! tensor count, the stage-I hyperparameters and the stage report.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{Dataset, Reader};
use crate::error::{dim_err, Error, Result};
use crate::grouping::{channel_sparsity, group_lasso_norm, ChannelMask};
use crate::model::{Model, ModelConfig, CONV1_W, CONV2_W, DENSE_W, NUM_PARAMS, PARAM_NAMES};
use crate::optim::{self, BinConnectState, BinaryRole, SplitState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"SPTRIMCK1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Group-Lasso subgradient training never lands exactly on zero; groups
/// below this norm are treated as pruned.
pub const GL_ZERO_TOL: f64 = 1e-12;

pub const DEFAULT_RHO: f64 = 1e-5;

/// Stage-I threshold tuned for the toy network.
pub const TOY_LAMBDA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gl,
    Rgsm,
    Gsbc,
    Bc,
    BlendedBc,
    Sgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gl => "gl",
            Method::Rgsm => "rgsm",
            Method::Gsbc => "gsbc",
            Method::Bc => "bc",
            Method::BlendedBc => "blended_bc",
            Method::Sgd => "sgd",
        }
    }

    /// Name used in the summary's `Model` column.
    pub fn label(self) -> &'static str {
        match self {
            Method::Gl => "GL",
            Method::Rgsm => "RGSM",
            Method::Gsbc => "GSBC",
            Method::Bc => "BC",
            Method::BlendedBc => "Blended BC",
            Method::Sgd => "SGD",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gl" => Ok(Method::Gl),
            "rgsm" => Ok(Method::Rgsm),
            "gsbc" => Ok(Method::Gsbc),
            "bc" => Ok(Method::Bc),
            "blended_bc" => Ok(Method::BlendedBc),
            "sgd" => Ok(Method::Sgd),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Unpruned float training from scratch.
    #[serde(rename = "baseline")]
    Baseline,
    I,
    II,
    III,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Baseline => "baseline",
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First epoch (1-based) trained at `eta / 10`.
    pub lr_drop_epoch: Option<usize>,
    /// Seeds minibatch shuffling for cold starts. Warm-started stages
    /// continue the generator stored in their input checkpoint.
    pub seed: u64,
    pub weight_decay: f64,
    /// Record full-batch Lagrangian and equilibrium residuals each epoch.
    pub diagnostics: bool,
}

impl StageConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 0.0,
            beta: 0.0,
            mu: 0.0,
            rho: if method == Method::BlendedBc { DEFAULT_RHO } else { 0.0 },
            eta: 0.05,
            epochs: 30,
            batch_size: 32,
            lr_drop_epoch: None,
            seed: 0,
            weight_decay: 0.0,
            diagnostics: true,
        }
    }

    pub fn rgsm(lambda: f64, beta: f64) -> Self {
        Self { lambda, beta, ..Self::new(Method::Rgsm) }
    }

    pub fn gsbc(lambda: f64) -> Self {
        Self { lambda, ..Self::new(Method::Gsbc) }
    }

    pub fn gl(mu: f64) -> Self {
        Self { mu, ..Self::new(Method::Gl) }
    }

    pub fn sgd() -> Self {
        Self::new(Method::Sgd)
    }

    pub fn blended_bc(rho: f64) -> Self {
        Self { rho, ..Self::new(Method::BlendedBc) }
    }

    /// Step size in effect during `epoch` (1-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(drop) if epoch >= drop => self.eta / 10.0,
            _ => self.eta,
        }
    }

    /// Checks the method against `stage` and the penalty parameters against
    /// the method.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let allowed: &[Method] = match stage {
            Stage::Baseline | Stage::II => &[Method::Sgd],
            Stage::I => &[Method::Gl, Method::Rgsm, Method::Gsbc],
            Stage::III => &[Method::Bc, Method::BlendedBc],
        };
        if !allowed.contains(&self.method) {
            return Err(Error::Config(format!(
                "method {} cannot run stage {stage}",
                self.method
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.eta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.lr_drop_epoch == Some(0) {
            return Err(Error::Config("lr drop epoch counts from 1".into()));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("mu", self.mu),
            ("rho", self.rho),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.rho > 1.0 {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        let (l, b, m) = (self.lambda, self.beta, self.mu);
        let ok = match self.method {
            Method::Gl => m > 0.0 && l == 0.0 && b == 0.0,
            Method::Rgsm => l > 0.0 && b > 0.0 && m == 0.0,
            Method::Gsbc => l > 0.0 && b == 0.0 && m == 0.0,
            Method::Sgd | Method::Bc | Method::BlendedBc => l == 0.0 && b == 0.0 && m == 0.0,
        };
        if !ok {
            let rule = match self.method {
                Method::Gl => "mu > 0, lambda = 0, beta = 0",
                Method::Rgsm => "lambda > 0, beta > 0, mu = 0",
                Method::Gsbc => "lambda > 0, beta = 0, mu = 0",
                _ => "lambda = beta = mu = 0",
            };
            return Err(Error::Config(format!(
                "{} needs {rule} (got lambda={l}, beta={b}, mu={m})",
                self.method
            )));
        }
        Ok(())
    }
}

/// Defaults for the toy network on the synthetic dataset. `method` selects
/// the stage-I or stage-III method; other stages always use SGD.
pub fn toy_defaults(stage: Stage, method: Option<Method>) -> StageConfig {
    match stage {
        Stage::Baseline => StageConfig { epochs: 15, ..StageConfig::sgd() },
        Stage::I => {
            let base = match method.unwrap_or(Method::Rgsm) {
                Method::Gl => StageConfig::gl(0.6),
                Method::Gsbc => StageConfig::gsbc(TOY_LAMBDA),
                Method::Rgsm => StageConfig::rgsm(TOY_LAMBDA, 1.0),
                other => StageConfig::new(other),
            };
            StageConfig { epochs: 30, ..base }
        }
        Stage::II => StageConfig { epochs: 12, ..StageConfig::sgd() },
        Stage::III => {
            let base = match method.unwrap_or(Method::BlendedBc) {
                Method::BlendedBc => StageConfig::blended_bc(DEFAULT_RHO),
                other => StageConfig::new(other),
            };
            StageConfig { epochs: 12, eta: 0.01, ..base }
        }
    }
}

/// Serializable position of the shuffling generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub key: String,
    pub stream: u64,
    /// Word position, decimal (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            key: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("malformed rng state {self:?}"));
        if self.key.len() != 64 || !self.key.is_ascii() {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    #[serde(deserialize_with = "nan_if_null")]
    pub train_loss: f64,
    /// Percent.
    pub val_accuracy: f64,
    /// Percent, one decimal.
    pub channel_sparsity: f64,
    pub lagrangian: Option<f64>,
    pub r_prox: Option<f64>,
    pub r_grad: Option<f64>,
}

/// Final table-style row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "Model")]
    pub model: String,
    #[serde(rename = "β")]
    pub beta: f64,
    #[serde(rename = "λ")]
    pub lambda: f64,
    #[serde(rename = "μ")]
    pub mu: f64,
    #[serde(rename = "Accuracy", deserialize_with = "nan_if_null")]
    pub accuracy: f64,
    #[serde(rename = "Ch. Sparsity")]
    pub channel_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub method: Method,
    pub rows: Vec<EpochRow>,
    pub summary: Summary,
    pub mask: ChannelMask,
}

impl StageReport {
    pub fn final_accuracy(&self) -> f64 {
        self.summary.accuracy
    }

    pub fn final_sparsity(&self) -> f64 {
        self.summary.channel_sparsity
    }
}

/// Stage-I hyperparameters, carried forward into later summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningInfo {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub rng: RngState,
    pub pruning: Option<PruningInfo>,
    pub report: Option<StageReport>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    stage: Stage,
    model: ModelConfig,
    rng: RngState,
    tensor_count: usize,
    pruning: Option<PruningInfo>,
    report: Option<StageReport>,
}

fn check_dataset(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    if ds.dims() != (config.t, config.f) {
        return dim_err(format!(
            "dataset inputs are {:?}, model expects ({}, {})",
            ds.dims(),
            config.t,
            config.f
        ));
    }
    if ds.num_classes() != config.num_classes {
        return dim_err(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes(),
            config.num_classes
        ));
    }
    Ok(())
}

fn batch<'a>(ds: &'a Dataset, idx: &[usize]) -> (Vec<&'a Tensor>, Vec<usize>) {
    idx.iter()
        .map(|&i| {
            let ex = ds.example(i);
            (&ex.input, ex.label)
        })
        .unzip()
}

fn shuffled_batches(ds: &Dataset, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if ds.train_indices().is_empty() {
        return Err(Error::Degenerate("empty training split".into()));
    }
    let mut order = ds.train_indices().to_vec();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Top-1 accuracy in percent over the validation split.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    check_dataset(model.config(), ds)?;
    let idx = ds.validation_indices();
    if idx.is_empty() {
        return Err(Error::Degenerate("empty validation split".into()));
    }
    let mut correct = 0usize;
    for &i in idx {
        let ex = ds.example(i);
        if model.predict(&ex.input)? == ex.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / idx.len() as f64)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset) -> Result<f64> {
    evaluate(&ckpt.model, ds)
}

fn masked_model(config: &ModelConfig, params: Vec<Tensor>, mask: ChannelMask) -> Result<Model> {
    let mut model = Model::from_parts(config.clone(), params, Some(mask))?;
    model.enforce_mask()?;
    Ok(model)
}

fn summary(label: String, pruning: Option<PruningInfo>, rows: &[EpochRow], mask: &ChannelMask) -> Summary {
    let p = pruning.unwrap_or(PruningInfo {
        method: Method::Sgd,
        lambda: 0.0,
        beta: 0.0,
        mu: 0.0,
    });
    Summary {
        model: label,
        beta: p.beta,
        lambda: p.lambda,
        mu: p.mu,
        accuracy: rows.last().map_or(f64::NAN, |r| r.val_accuracy),
        channel_sparsity: mask.sparsity_percent(),
    }
}

/// Mean-loss and gradient over the whole training split.
fn full_batch(model: &Model, params: &[Tensor], ds: &Dataset) -> Result<(f64, Vec<Tensor>)> {
    let (x, y) = batch(ds, ds.train_indices());
    model.loss_and_grads_with(params, &x, &y)
}

enum PruneState {
    Subgradient(Vec<Tensor>),
    Split(SplitState),
}

/// Stage I: cold-start training with a channel penalty on the second
/// convolution. The returned checkpoint holds the sparse weights (`u` for
/// the splitting methods, `w` for GL) with the extracted mask frozen in.
pub fn run_stage1(cfg: &StageConfig, model_cfg: &ModelConfig, ds: &Dataset) -> Result<(Checkpoint, StageReport)> {
    cfg.validate(Stage::I)?;
    check_dataset(model_cfg, ds)?;
    let model = Model::build(model_cfg.clone())?;
    let parts = model.partitions();
    let channels = model.channel_partition();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = match cfg.method {
        Method::Gl => PruneState::Subgradient(model.params().to_vec()),
        _ => PruneState::Split(SplitState::new(
            model.params().to_vec(),
            parts.clone(),
            cfg.eta,
            cfg.beta,
            cfg.lambda,
        )?),
    };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut current = None;
    for epoch in 1..=cfg.epochs {
        let eta = cfg.learning_rate(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in shuffled_batches(ds, &mut rng, cfg.batch_size)? {
            let (x, y) = batch(ds, &idx);
            let loss = match &mut state {
                PruneState::Subgradient(w) => {
                    let (loss, mut g) = model.loss_and_grads_with(w, &x, &y)?;
                    optim::add_weight_decay(&mut g, w, cfg.weight_decay)?;
                    optim::gl_penalty_step(w, &g, &parts, cfg.mu, eta)?;
                    loss
                }
                PruneState::Split(s) => {
                    s.set_eta(eta);
                    let at = if cfg.method == Method::Gsbc { s.prox_point()? } else { s.w().to_vec() };
                    let (loss, mut g) = model.loss_and_grads_with(&at, &x, &y)?;
                    optim::add_weight_decay(&mut g, &at, cfg.weight_decay)?;
                    if cfg.method == Method::Gsbc {
                        s.gsbc_step(&g)?;
                    } else {
                        s.rgsm_step(&g)?;
                    }
                    loss
                }
            };
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }

        let (params, mask) = match &state {
            PruneState::Subgradient(w) => {
                let mask = ChannelMask::from_group_norms(&w[CONV2_W], &channels, GL_ZERO_TOL)?;
                (w.clone(), mask)
            }
            PruneState::Split(s) => {
                let p = s.prox_point()?;
                let mask = ChannelMask::from_group_norms(&p[CONV2_W], &channels, 0.0)?;
                (p, mask)
            }
        };
        let eval = masked_model(model_cfg, params, mask.clone())?;
        let val_accuracy = evaluate(&eval, ds)?;
        let (lagrangian, r_prox, r_grad) = if cfg.diagnostics {
            match &state {
                PruneState::Subgradient(w) => {
                    let (loss, _) = full_batch(&model, w, ds)?;
                    let pen = group_lasso_norm(&w[CONV2_W], &channels)?;
                    (Some(loss + cfg.mu * pen), None, None)
                }
                PruneState::Split(s) => {
                    let (loss, g) = full_batch(&model, s.w(), ds)?;
                    let res = s.equilibrium_residual(&g)?;
                    (Some(s.lagrangian(loss)?), Some(res.r_prox), Some(res.r_grad))
                }
            }
        } else {
            (None, None, None)
        };
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy,
            channel_sparsity: mask.sparsity_percent(),
            lagrangian,
            r_prox,
            r_grad,
        });
        current = Some((eval, mask));
    }
    let (model, mask) = current.expect("at least one epoch");
    let pruning = PruningInfo {
        method: cfg.method,
        lambda: cfg.lambda,
        beta: cfg.beta,
        mu: cfg.mu,
    };
    let report = StageReport {
        stage: Stage::I,
        method: cfg.method,
        summary: summary(cfg.method.label().to_string(), Some(pruning), &rows, &mask),
        rows,
        mask,
    };
    let ckpt = Checkpoint {
        stage: Stage::I,
        model,
        rng: RngState::capture(&rng),
        pruning: Some(pruning),
        report: Some(report.clone()),
    };
    Ok((ckpt, report))
}

/// Plain minibatch SGD on `model`, re-zeroing masked coordinates after
/// every step.
fn sgd_epochs(
    model: &mut Model,
    cfg: &StageConfig,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRow>> {
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let eta = cfg.learning_rate(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in shuffled_batches(ds, rng, cfg.batch_size)? {
            let (x, y) = batch(ds, &idx);
            let (loss, mut g) = model.loss_and_grads(&x, &y)?;
            optim::add_weight_decay(&mut g, model.params(), cfg.weight_decay)?;
            let mut params = model.params().to_vec();
            optim::sgd_step(&mut params, &g, eta)?;
            model.set_params(params)?;
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let sparsity = match model.mask() {
            Some(mask) => mask.sparsity_percent(),
            None => channel_sparsity(&model.params()[CONV2_W], &model.channel_partition())?,
        };
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: evaluate(model, ds)?,
            channel_sparsity: sparsity,
            lagrangian: None,
            r_prox: None,
            r_grad: None,
        });
    }
    Ok(rows)
}

/// Unpruned float training from a cold start, the reference accuracy.
pub fn train_baseline(cfg: &StageConfig, model_cfg: &ModelConfig, ds: &Dataset) -> Result<(Checkpoint, StageReport)> {
    cfg.validate(Stage::Baseline)?;
    check_dataset(model_cfg, ds)?;
    let mut model = Model::build(model_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = sgd_epochs(&mut model, cfg, ds, &mut rng)?;
    let mask = model.mask_from_weights();
    let report = StageReport {
        stage: Stage::Baseline,
        method: Method::Sgd,
        summary: summary("Baseline".into(), None, &rows, &mask),
        rows,
        mask,
    };
    let ckpt = Checkpoint {
        stage: Stage::Baseline,
        model,
        rng: RngState::capture(&rng),
        pruning: None,
        report: Some(report.clone()),
    };
    Ok((ckpt, report))
}

fn frozen_mask(ckpt: &Checkpoint, expected: Stage) -> Result<ChannelMask> {
    if ckpt.stage != expected {
        return Err(Error::Config(format!(
            "expected a stage {expected} checkpoint, got stage {}",
            ckpt.stage
        )));
    }
    let mask = ckpt
        .model
        .mask()
        .cloned()
        .ok_or_else(|| Error::Config("checkpoint carries no channel mask".into()))?;
    if mask.zeros() == mask.len() {
        return Err(Error::Degenerate("mask prunes every channel".into()));
    }
    Ok(mask)
}

fn stage_label(pruning: Option<PruningInfo>, suffix: &str) -> String {
    match pruning {
        Some(p) => format!("{} + {suffix}", p.method.label()),
        None => suffix.to_string(),
    }
}

/// Stage II: float retraining of the surviving channels with the stage-I
/// mask frozen. Shuffling continues the checkpoint's generator.
pub fn run_stage2(ckpt: &Checkpoint, cfg: &StageConfig, ds: &Dataset) -> Result<(Checkpoint, StageReport)> {
    cfg.validate(Stage::II)?;
    let mask = frozen_mask(ckpt, Stage::I)?;
    check_dataset(ckpt.model.config(), ds)?;
    let mut model = ckpt.model.clone();
    model.enforce_mask()?;
    let mut rng = ckpt.rng.restore()?;
    let rows = sgd_epochs(&mut model, cfg, ds, &mut rng)?;
    let report = StageReport {
        stage: Stage::II,
        method: cfg.method,
        summary: summary(stage_label(ckpt.pruning, "retrain"), ckpt.pruning, &rows, &mask),
        rows,
        mask,
    };
    let out = Checkpoint {
        stage: Stage::II,
        model,
        rng: RngState::capture(&rng),
        pruning: ckpt.pruning,
        report: Some(report.clone()),
    };
    Ok((out, report))
}

/// Binary roles for stage III: the three weight tensors are binarized over
/// their unmasked coordinates, biases stay float.
pub fn binary_roles(model: &Model) -> Result<Vec<BinaryRole>> {
    let keep = model.coordinate_keep()?;
    Ok((0..NUM_PARAMS)
        .map(|i| match i {
            CONV1_W | CONV2_W | DENSE_W => BinaryRole::Binary {
                keep: keep[i].clone().unwrap_or_else(|| vec![true; model.params()[i].len()]),
            },
            _ => BinaryRole::Float,
        })
        .collect())
}

/// Stage III: (blended) BinaryConnect with the float shadow warm-started
/// from the stage-II weights. The returned model holds the binary weights.
pub fn run_stage3(ckpt: &Checkpoint, cfg: &StageConfig, ds: &Dataset) -> Result<(Checkpoint, StageReport)> {
    cfg.validate(Stage::III)?;
    let mask = frozen_mask(ckpt, Stage::II)?;
    let config = ckpt.model.config().clone();
    check_dataset(&config, ds)?;
    let roles = binary_roles(&ckpt.model)?;
    let mut state = BinConnectState::new(ckpt.model.params().to_vec(), roles, cfg.eta, cfg.rho)?;
    let shape_model = ckpt.model.clone();
    let mut rng = ckpt.rng.restore()?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut current = None;
    for epoch in 1..=cfg.epochs {
        state.set_eta(cfg.learning_rate(epoch));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for idx in shuffled_batches(ds, &mut rng, cfg.batch_size)? {
            let (x, y) = batch(ds, &idx);
            let (loss, mut g) = shape_model.loss_and_grads_with(state.weights(), &x, &y)?;
            optim::add_weight_decay(&mut g, state.weights(), cfg.weight_decay)?;
            match cfg.method {
                Method::Bc => state.bc_step(&g)?,
                _ => state.blended_bc_step(&g)?,
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let eval = masked_model(&config, state.weights().to_vec(), mask.clone())?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: evaluate(&eval, ds)?,
            channel_sparsity: mask.sparsity_percent(),
            lagrangian: None,
            r_prox: None,
            r_grad: None,
        });
        current = Some(eval);
    }
    let model = current.expect("at least one epoch");
    let report = StageReport {
        stage: Stage::III,
        method: cfg.method,
        summary: summary(stage_label(ckpt.pruning, cfg.method.label()), ckpt.pruning, &rows, &mask),
        rows,
        mask,
    };
    let out = Checkpoint {
        stage: Stage::III,
        model,
        rng: RngState::capture(&rng),
        pruning: ckpt.pruning,
        report: Some(report.clone()),
    };
    Ok((out, report))
}

/// Checkpoints and reports of one full three-stage run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub checkpoints: [Checkpoint; 3],
    pub reports: [StageReport; 3],
}

pub fn run_pipeline(
    model_cfg: &ModelConfig,
    stages: [&StageConfig; 3],
    ds: &Dataset,
) -> Result<PipelineRun> {
    let (c1, r1) = run_stage1(stages[0], model_cfg, ds)?;
    let (c2, r2) = run_stage2(&c1, stages[1], ds)?;
    let (c3, r3) = run_stage3(&c2, stages[2], ds)?;
    Ok(PipelineRun {
        checkpoints: [c1, c2, c3],
        reports: [r1, r2, r3],
    })
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const CSV_HEADER: &str = "epoch,train_loss,val_accuracy,channel_sparsity,lagrangian,r_prox,r_grad";

pub fn report_csv(report: &StageReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.val_accuracy,
            r.channel_sparsity,
            csv_field(r.lagrangian),
            csv_field(r.r_prox),
            csv_field(r.r_grad),
        ));
    }
    out
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)? + "\n")
}

#[derive(Serialize)]
struct MaskFile<'a> {
    channels: usize,
    sparsity: f64,
    bars: &'a [u8],
}

pub fn mask_json(mask: &ChannelMask) -> Result<String> {
    let bars = mask.as_bars();
    Ok(serde_json::to_string(&MaskFile {
        channels: mask.len(),
        sparsity: mask.sparsity_percent(),
        bars: &bars,
    })? + "\n")
}

/// Writes `report.csv`, `summary.json` and `mask.json` into `dir`,
/// creating it if needed.
pub fn emit_report(report: &StageReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report_csv(report))?;
    fs::write(dir.join("summary.json"), summary_json(&report.summary)?)?;
    fs::write(dir.join("mask.json"), mask_json(&report.mask)?)?;
    Ok(())
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt.model.params();
    let meta = CheckpointMeta {
        stage: ckpt.stage,
        model: ckpt.model.config().clone(),
        rng: ckpt.rng.clone(),
        tensor_count: params.len(),
        pruning: ckpt.pruning,
        report: ckpt.report.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    push_u32(&mut buf, params.len())?;
    for (name, t) in PARAM_NAMES.iter().zip(params) {
        push_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.rank())?;
        for &d in t.shape() {
            push_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match ckpt.model.mask() {
        Some(mask) => {
            buf.push(1);
            push_u32(&mut buf, mask.len())?;
            buf.extend(mask.as_bars());
        }
        None => buf.push(0),
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = r.u32("config block length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len, "config block")?)?;
    let count = r.u32("tensor count")? as usize;
    if count != meta.tensor_count {
        return Err(Error::TensorCount {
            expected: meta.tensor_count,
            found: count,
        });
    }
    let mut params = Vec::with_capacity(count.min(NUM_PARAMS));
    for i in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = r.take(name_len, "tensor name")?;
        if PARAM_NAMES.get(i).map(|n| n.as_bytes()) != Some(name) {
            return Err(Error::Format(format!(
                "unexpected tensor {:?} at position {i}",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(r.f64("tensor data")?);
        }
        params.push(Tensor::new(&shape, data)?);
    }
    let mask = match r.u8("mask flag")? {
        0 => None,
        1 => {
            let n = r.u32("mask length")? as usize;
            let bits = r.take(n, "mask")?;
            if bits.iter().any(|&b| b > 1) {
                return Err(Error::Format("mask bytes must be 0 or 1".into()));
            }
            Some(ChannelMask::new(bits.iter().map(|&b| b == 1).collect()))
        }
        b => return Err(Error::Format(format!("bad mask flag {b}"))),
    };
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after the mask".into()));
    }
    Ok(Checkpoint {
        stage: meta.stage,
        model: Model::from_parts(meta.model, params, mask)?,
        rng: meta.rng,
        pruning: meta.pruning,
        report: meta.report,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
