//! Seeded training loops: pure SFT, pure RL, sequential SFT-then-RL, the performance-gated
//! switch, and its off-policy / mixed-loss variants — plus the optimizer and checkpointing.
//!
//! Determinism is the organizing constraint. A run owns one master ChaCha stream; each step
//! draws its question indices and one child seed per question from that stream, then does
//! all per-question work (rollouts, verification, gradients) in parallel from the child
//! seeds, reducing in question order. Identical configs therefore produce byte-identical
//! metric streams regardless of thread scheduling, and a checkpoint (parameters, optimizer
//! state, master stream position) resumes a run bit-identically.

use crate::algorithms::{sft_loss, sft_loss_gradient, AlgorithmError};
use crate::estimator::{
    unified_gradient, AdvantageInputs, EstimatorBatchItem, EstimatorComponents, EstimatorError,
};
use crate::hpt::{
    feedback_coefficients, hpt_step, rl_loss_gradient, sft_branch_gradient, Branch, DemoIndex,
    GateConfig, HptError, HptSettings, RolloutGroup, StepRecord,
};
use crate::metrics::{offline_ratio, AccuracyGrid, MetricsError};
use crate::policy::{
    mean_token_entropy, GradientVector, PolicyError, PolicyParams, TokenId, Vocabulary,
};
use crate::tasks::{builtin_task, DemonstrationRecord, Task, TaskError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config value for `{key}` is invalid: {value}")]
    BadValue { key: String, value: String },
    #[error("non-finite gradient at step {step}, question {question_id}")]
    NonFinite { step: u64, question_id: u64 },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Hpt(#[from] HptError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Which per-step routing a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Sft,
    Rl,
    SftThenRl,
    Hpt,
    OffOn,
    MixOn,
}

impl Paradigm {
    pub fn parse(s: &str) -> Result<Paradigm, TrainError> {
        match s {
            "sft" => Ok(Paradigm::Sft),
            "rl" => Ok(Paradigm::Rl),
            "sft_then_rl" => Ok(Paradigm::SftThenRl),
            "hpt" => Ok(Paradigm::Hpt),
            "off_on" => Ok(Paradigm::OffOn),
            "mix_on" => Ok(Paradigm::MixOn),
            other => Err(TrainError::BadValue { key: "paradigm".into(), value: other.into() }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::Sft => "sft",
            Paradigm::Rl => "rl",
            Paradigm::SftThenRl => "sft_then_rl",
            Paradigm::Hpt => "hpt",
            Paradigm::OffOn => "off_on",
            Paradigm::MixOn => "mix_on",
        }
    }
}

/// Gradient-to-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    AdamLike { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> OptimizerKind {
        OptimizerKind::AdamLike { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Mutable optimizer state, checkpointed alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd,
    Adam { t: u64, m: Vec<f64>, v: Vec<f64> },
}

impl OptState {
    fn new(kind: &OptimizerKind, param_count: usize) -> OptState {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::AdamLike { .. } => {
                OptState::Adam { t: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
            }
        }
    }
}

/// Applies one update `theta <- theta - lr * step(grad)` and returns `||delta theta||_2`.
fn apply_update(
    params: &mut PolicyParams,
    opt: &mut OptState,
    kind: &OptimizerKind,
    lr: f64,
    grad: &GradientVector,
) -> f64 {
    let g = grad.as_slice();
    let w = params.weights_mut();
    let mut delta_sq = 0.0;
    match (opt, kind) {
        (OptState::Sgd, OptimizerKind::Sgd) => {
            for i in 0..w.len() {
                let d = -lr * g[i];
                w[i] += d;
                delta_sq += d * d;
            }
        }
        (OptState::Adam { t, m, v }, OptimizerKind::AdamLike { beta1, beta2, eps }) => {
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let d = -lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                w[i] += d;
                delta_sq += d * d;
            }
        }
        _ => unreachable!("optimizer state constructed from its kind"),
    }
    delta_sq.sqrt()
}

/// Full specification of one training run. Every field is overridable from a key=value
/// config file or a CLI flag; [`TrainConfig::to_key_values`] echoes the resolved values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub task: String,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Estimator preset for the RL branch.
    pub preset: String,
    /// Gate threshold: route to SFT when at most this many of the rollouts verify.
    pub gate_gamma: usize,
    /// Rollouts sampled per question (both the gate's vote and the RL group size).
    pub n_rollouts: usize,
    /// Mixed-loss weight on the SFT term (mix_on low branch).
    pub w_sft: f64,
    /// Mixed-loss weight on the off-policy term (mix_on / off_on low branch).
    pub w_off: f64,
    pub temperature: f64,
    /// Fixed question pool size; questions are drawn from it with replacement.
    pub pool: usize,
    /// Policy context window (tokens of history the policy conditions on).
    pub window: usize,
    /// For sft_then_rl: how many leading steps are SFT.
    pub sft_steps: u64,
    /// Evaluate the whole pool every this many steps (0 = never).
    pub eval_every: u64,
    pub eval_rollouts: usize,
    /// Emit a checkpoint every this many steps (0 = never).
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            paradigm: Paradigm::Hpt,
            task: "modadd".into(),
            steps: 500,
            batch: 16,
            lr: 1e-2,
            optimizer: OptimizerKind::default(),
            seed: 0,
            preset: "grpo".into(),
            gate_gamma: 0,
            n_rollouts: 8,
            w_sft: 0.1,
            w_off: 1.0,
            temperature: 1.0,
            pool: 64,
            window: 4,
            sft_steps: 0,
            eval_every: 0,
            eval_rollouts: 8,
            ckpt_every: 0,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::BadValue { key: key.into(), value: value.into() })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.batch == 0 || self.pool == 0 || self.window == 0 || self.eval_rollouts == 0 {
            return Err(TrainError::Config(
                "batch, pool, window and eval_rollouts must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::Config("temperature must be positive".into()));
        }
        if !(self.w_sft >= 0.0 && self.w_sft.is_finite())
            || !(self.w_off >= 0.0 && self.w_off.is_finite())
        {
            return Err(TrainError::Config("mix weights must be finite and >= 0".into()));
        }
        if EstimatorComponents::preset(&self.preset).is_none() {
            return Err(TrainError::Config(format!("unknown preset `{}`", self.preset)));
        }
        if let OptimizerKind::AdamLike { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(TrainError::Config("adam needs betas in [0,1) and eps > 0".into()));
            }
        }
        // Delegates the gamma < n check.
        GateConfig::new(self.gate_gamma, self.n_rollouts)?;
        Ok(())
    }

    /// Sets one field from its config-file key. Unknown keys are an error so that typos in
    /// a config file cannot silently fall back to defaults.
    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "paradigm" => self.paradigm = Paradigm::parse(value)?,
            "task" => self.task = value.to_string(),
            "steps" => self.steps = parse_field(key, value)?,
            "batch" => self.batch = parse_field(key, value)?,
            "lr" => self.lr = parse_field(key, value)?,
            "optimizer" => match value {
                "sgd" => self.optimizer = OptimizerKind::Sgd,
                // Keep any betas already applied, so key order in a file never matters.
                "adam" => {
                    if !matches!(self.optimizer, OptimizerKind::AdamLike { .. }) {
                        self.optimizer = OptimizerKind::default();
                    }
                }
                other => {
                    return Err(TrainError::BadValue { key: key.into(), value: other.into() })
                }
            },
            "adam_beta1" | "adam_beta2" | "adam_eps" => {
                let parsed: f64 = parse_field(key, value)?;
                let (mut b1, mut b2, mut e) = match self.optimizer {
                    OptimizerKind::AdamLike { beta1, beta2, eps } => (beta1, beta2, eps),
                    OptimizerKind::Sgd => {
                        let OptimizerKind::AdamLike { beta1, beta2, eps } =
                            OptimizerKind::default()
                        else {
                            unreachable!()
                        };
                        (beta1, beta2, eps)
                    }
                };
                match key {
                    "adam_beta1" => b1 = parsed,
                    "adam_beta2" => b2 = parsed,
                    _ => e = parsed,
                }
                self.optimizer = OptimizerKind::AdamLike { beta1: b1, beta2: b2, eps: e };
            }
            "seed" => self.seed = parse_field(key, value)?,
            "preset" => self.preset = value.to_string(),
            "gate_gamma" => self.gate_gamma = parse_field(key, value)?,
            "n_rollouts" => self.n_rollouts = parse_field(key, value)?,
            "w_sft" => self.w_sft = parse_field(key, value)?,
            "w_off" => self.w_off = parse_field(key, value)?,
            "temperature" => self.temperature = parse_field(key, value)?,
            "pool" => self.pool = parse_field(key, value)?,
            "window" => self.window = parse_field(key, value)?,
            "sft_steps" => self.sft_steps = parse_field(key, value)?,
            "eval_every" => self.eval_every = parse_field(key, value)?,
            "eval_rollouts" => self.eval_rollouts = parse_field(key, value)?,
            "ckpt_every" => self.ckpt_every = parse_field(key, value)?,
            other => return Err(TrainError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a whole `key=value` config text (`#` comments and blank lines ignored).
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), TrainError> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("expected key=value, got `{line}`")))?;
            self.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every effective setting as ordered key/value pairs — the reproducibility echo.
    /// Feeding the echo back through [`TrainConfig::apply_config_text`] rebuilds the config.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("paradigm", self.paradigm.as_str().to_string()),
            ("task", self.task.clone()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
        ];
        match self.optimizer {
            OptimizerKind::Sgd => out.push(("optimizer", "sgd".into())),
            OptimizerKind::AdamLike { beta1, beta2, eps } => {
                out.push(("optimizer", "adam".into()));
                out.push(("adam_beta1", beta1.to_string()));
                out.push(("adam_beta2", beta2.to_string()));
                out.push(("adam_eps", eps.to_string()));
            }
        }
        out.extend([
            ("seed", self.seed.to_string()),
            ("preset", self.preset.clone()),
            ("gate_gamma", self.gate_gamma.to_string()),
            ("n_rollouts", self.n_rollouts.to_string()),
            ("w_sft", self.w_sft.to_string()),
            ("w_off", self.w_off.to_string()),
            ("temperature", self.temperature.to_string()),
            ("pool", self.pool.to_string()),
            ("window", self.window.to_string()),
            ("sft_steps", self.sft_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_rollouts", self.eval_rollouts.to_string()),
            ("ckpt_every", self.ckpt_every.to_string()),
        ]);
        out
    }
}

/// One entry of the fixed question pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolQuestion {
    pub id: u64,
    pub question: Vec<TokenId>,
    pub label: String,
}

/// Aggregate per-step line of `metrics.jsonl`. Fields that do not apply to the step kind
/// (e.g. rollout statistics on an SFT step) are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub grad_norm: f64,
    pub param_delta: f64,
    pub reward_mean: Option<f64>,
    pub offline_ratio: Option<f64>,
    pub demo_loss: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub resp_len_mean: Option<f64>,
}

/// One pool question's evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub id: u64,
    pub label: String,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// One whole-pool evaluation, a line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub mean_accuracy: f64,
    pub questions: Vec<EvalQuestion>,
}

/// Receives the run's streams as they are produced.
pub trait TrainSink {
    fn on_step(&mut self, _metrics: &StepMetrics, _records: &[StepRecord]) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_eval(&mut self, _eval: &EvalRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _ck: &CheckpointRecord) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;
impl TrainSink for NullSink {}

/// Collects everything in memory — the test and acceptance harness sink.
#[derive(Default)]
pub struct MemorySink {
    pub metrics: Vec<StepMetrics>,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl TrainSink for MemorySink {
    fn on_step(&mut self, metrics: &StepMetrics, records: &[StepRecord]) -> Result<(), TrainError> {
        self.metrics.push(metrics.clone());
        self.records.extend_from_slice(records);
        Ok(())
    }
    fn on_eval(&mut self, eval: &EvalRecord) -> Result<(), TrainError> {
        self.evals.push(eval.clone());
        Ok(())
    }
    fn on_checkpoint(&mut self, ck: &CheckpointRecord) -> Result<(), TrainError> {
        self.checkpoints.push(ck.clone());
        Ok(())
    }
}

/// Writes a run directory: `config.echo`, `metrics.jsonl`, `steps.jsonl`, `eval.jsonl`,
/// `checkpoints/step_NNNNNN.ck`, and on [`RunWriter::finish`] `pool.json` plus
/// `grids/accuracy.{csv,pgm}`.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    steps: BufWriter<File>,
    evals: BufWriter<File>,
}

impl RunWriter {
    pub fn create(dir: &Path, cfg: &TrainConfig) -> Result<RunWriter, TrainError> {
        fs::create_dir_all(dir)?;
        let mut echo = String::new();
        for (k, v) in cfg.to_key_values() {
            echo.push_str(&format!("{k}={v}\n"));
        }
        fs::write(dir.join("config.echo"), echo)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            steps: BufWriter::new(File::create(dir.join("steps.jsonl"))?),
            evals: BufWriter::new(File::create(dir.join("eval.jsonl"))?),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Flushes the streams and writes the end-of-run artifacts.
    pub fn finish(mut self, report: &TrainReport) -> Result<(), TrainError> {
        self.metrics.flush()?;
        self.steps.flush()?;
        self.evals.flush()?;
        let pool_file = File::create(self.dir.join("pool.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(pool_file), &report.pool)
            .map_err(|e| TrainError::Config(format!("pool serialization failed: {e}")))?;
        if let Some(grid) = &report.grid {
            let grids = self.dir.join("grids");
            fs::create_dir_all(&grids)?;
            let mut csv = BufWriter::new(File::create(grids.join("accuracy.csv"))?);
            grid.write_csv(&mut csv)?;
            csv.flush()?;
            let mut pgm = BufWriter::new(File::create(grids.join("accuracy.pgm"))?);
            grid.write_pgm(&mut pgm)?;
            pgm.flush()?;
        }
        Ok(())
    }
}

fn jsonl_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), TrainError> {
    let line = serde_json::to_string(value)
        .map_err(|e| TrainError::Config(format!("record serialization failed: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

impl TrainSink for RunWriter {
    fn on_step(&mut self, metrics: &StepMetrics, records: &[StepRecord]) -> Result<(), TrainError> {
        jsonl_line(&mut self.metrics, metrics)?;
        for record in records {
            jsonl_line(&mut self.steps, record)?;
        }
        Ok(())
    }

    fn on_eval(&mut self, eval: &EvalRecord) -> Result<(), TrainError> {
        jsonl_line(&mut self.evals, eval)
    }

    fn on_checkpoint(&mut self, ck: &CheckpointRecord) -> Result<(), TrainError> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        let file = File::create(dir.join(format!("step_{:06}.ck", ck.step)))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(ck, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

// -----------------------------------------------------------------------------------------
// Checkpoints.
// -----------------------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"PGLABCK1";

/// Everything mutable about a run: restoring it and continuing reproduces the uninterrupted
/// run bit for bit (under the same config, which supplies the task, pool seed and optimizer
/// hyperparameters).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub params: PolicyParams,
    pub opt: OptState,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>, TrainError> {
    let len = read_u64(r)? as usize;
    if len > (1 << 28) {
        return Err(TrainError::Checkpoint(format!("implausible vector length {len}")));
    }
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Serializes a checkpoint to the single-file binary format (`PGLABCK1` header).
pub fn write_checkpoint<W: Write>(ck: &CheckpointRecord, w: &mut W) -> Result<(), TrainError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&ck.step.to_le_bytes())?;
    let vocab = ck.params.vocab();
    for field in [vocab.size(), vocab.bos(), vocab.eos(), vocab.pad(), ck.params.window()] {
        w.write_all(&(field as u64).to_le_bytes())?;
    }
    write_f64s(w, ck.params.weights())?;
    match &ck.opt {
        OptState::Sgd => w.write_all(&[0u8])?,
        OptState::Adam { t, m, v } => {
            w.write_all(&[1u8])?;
            w.write_all(&t.to_le_bytes())?;
            write_f64s(w, m)?;
            write_f64s(w, v)?;
        }
    }
    w.write_all(&ck.rng_seed)?;
    w.write_all(&ck.rng_word_pos.to_le_bytes())?;
    w.write_all(&ck.rng_stream.to_le_bytes())?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<CheckpointRecord, TrainError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic header".into()));
    }
    let step = read_u64(r)?;
    let size = read_u64(r)? as usize;
    let bos = read_u64(r)? as usize;
    let eos = read_u64(r)? as usize;
    let pad = read_u64(r)? as usize;
    let window = read_u64(r)? as usize;
    let vocab = Vocabulary::new(size, bos, eos, pad)
        .map_err(|e| TrainError::Checkpoint(format!("stored vocabulary invalid: {e}")))?;
    let weights = read_f64s(r)?;
    let params = PolicyParams::from_weights(vocab, window, weights)
        .map_err(|e| TrainError::Checkpoint(format!("stored weights invalid: {e}")))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let opt = match tag[0] {
        0 => OptState::Sgd,
        1 => {
            let t = read_u64(r)?;
            let m = read_f64s(r)?;
            let v = read_f64s(r)?;
            OptState::Adam { t, m, v }
        }
        other => return Err(TrainError::Checkpoint(format!("unknown optimizer tag {other}"))),
    };
    let mut rng_seed = [0u8; 32];
    r.read_exact(&mut rng_seed)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let rng_word_pos = u128::from_le_bytes(pos);
    let rng_stream = read_u64(r)?;
    Ok(CheckpointRecord { step, params, opt, rng_seed, rng_word_pos, rng_stream })
}

// -----------------------------------------------------------------------------------------
// The mixed low-branch step.
// -----------------------------------------------------------------------------------------

/// Loss gradient of the off-policy term on one demonstration: the union-normalized
/// offline objective, with the demonstration's reward normalized against the union of the
/// already-sampled rollout scores and itself.
pub fn srft_offline_gradient(
    params: &PolicyParams,
    question: &[TokenId],
    demonstration: &[TokenId],
    group_rewards_on: &[f64],
) -> Result<GradientVector, TrainError> {
    let components = EstimatorComponents::preset("srft_off").expect("built-in preset");
    let inputs = AdvantageInputs::offline(1.0, group_rewards_on.to_vec(), vec![1.0]);
    let item =
        EstimatorBatchItem::from_params_pair(params, params, question, demonstration, inputs)?;
    let mut grad = unified_gradient(params, std::slice::from_ref(&item), &components)?;
    grad.scale(-1.0);
    Ok(grad)
}

fn group_step_record(
    params: &PolicyParams,
    question: &[TokenId],
    group: &RolloutGroup,
    branch: Branch,
    step: u64,
    question_id: u64,
) -> Result<StepRecord, TrainError> {
    let n = group.trajectories.len() as f64;
    let mut entropy_total = 0.0;
    let mut len_total = 0.0;
    for traj in &group.trajectories {
        entropy_total += mean_token_entropy(params, question, &traj.tokens)?;
        len_total += traj.tokens.len() as f64;
    }
    Ok(StepRecord {
        step,
        question_id,
        p: group.p,
        branch,
        reward_mean: group.p,
        entropy_mean: entropy_total / n,
        resp_len_mean: len_total / n,
    })
}

/// One gated question with a mixed low branch: high performance gets the on-policy RL
/// gradient; low performance gets `w_sft * sft + w_off * offline` instead of pure SFT.
/// With weights (1, 0) this is exactly [`hpt_step`]; `off_on` runs use (0, w_off).
#[allow(clippy::too_many_arguments)]
pub fn mix_on_step(
    params: &PolicyParams,
    question: &[TokenId],
    task: &dyn Task,
    demos: &DemoIndex,
    settings: &HptSettings,
    w_sft: f64,
    w_off: f64,
    step: u64,
    question_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(GradientVector, StepRecord), TrainError> {
    let group = RolloutGroup::sample(
        params,
        task,
        question,
        settings.gate.n(),
        settings.temperature,
        rng,
    )?;
    let decision = feedback_coefficients(group.p, &settings.gate);
    let grad = match decision.branch {
        Branch::Rl => rl_loss_gradient(params, &group, &settings.rl_components)?,
        Branch::Sft => {
            let demo = demos
                .get(question)
                .ok_or_else(|| HptError::MissingDemonstration { question: question.to_vec() })?;
            let mut grad = GradientVector::zeros(params.param_count());
            if w_sft != 0.0 {
                let sft = sft_branch_gradient(params, question, demo)?;
                grad.add_scaled(&sft, w_sft);
            }
            if w_off != 0.0 {
                let scores: Vec<f64> = group.scores.iter().map(|&s| s as f64).collect();
                let off = srft_offline_gradient(params, question, demo, &scores)?;
                grad.add_scaled(&off, w_off);
            }
            grad
        }
    };
    let record = group_step_record(params, question, &group, decision.branch, step, question_id)?;
    Ok((grad, record))
}

// -----------------------------------------------------------------------------------------
// The training loop.
// -----------------------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum StepKind {
    Demo,
    Plain,
    Gated { weights: Option<(f64, f64)> },
}

fn step_kind(cfg: &TrainConfig, step: u64) -> StepKind {
    match cfg.paradigm {
        Paradigm::Sft => StepKind::Demo,
        Paradigm::Rl => StepKind::Plain,
        Paradigm::SftThenRl => {
            if step <= cfg.sft_steps {
                StepKind::Demo
            } else {
                StepKind::Plain
            }
        }
        Paradigm::Hpt => StepKind::Gated { weights: None },
        Paradigm::MixOn => StepKind::Gated { weights: Some((cfg.w_sft, cfg.w_off)) },
        Paradigm::OffOn => StepKind::Gated { weights: Some((0.0, cfg.w_off)) },
    }
}

struct QuestionOutcome {
    grad: GradientVector,
    record: Option<StepRecord>,
    demo_loss: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_question(
    params: &PolicyParams,
    task: &dyn Task,
    demos: &DemoIndex,
    settings: &HptSettings,
    kind: StepKind,
    step: u64,
    question_id: u64,
    question: &[TokenId],
    child_seed: u64,
) -> Result<QuestionOutcome, TrainError> {
    let outcome = match kind {
        StepKind::Demo => {
            let demo = demos
                .get(question)
                .ok_or_else(|| HptError::MissingDemonstration { question: question.to_vec() })?;
            let record = DemonstrationRecord {
                question: question.to_vec(),
                demonstration: demo.to_vec(),
            };
            let grad = sft_loss_gradient(params, std::slice::from_ref(&record))?;
            let loss = sft_loss(params, std::slice::from_ref(&record))?.value;
            QuestionOutcome { grad, record: None, demo_loss: Some(loss) }
        }
        StepKind::Plain => {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed);
            let group = RolloutGroup::sample(
                params,
                task,
                question,
                settings.gate.n(),
                settings.temperature,
                &mut rng,
            )?;
            let grad = rl_loss_gradient(params, &group, &settings.rl_components)?;
            let record =
                group_step_record(params, question, &group, Branch::Rl, step, question_id)?;
            QuestionOutcome { grad, record: Some(record), demo_loss: None }
        }
        StepKind::Gated { weights } => {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed);
            let (grad, record) = match weights {
                None => hpt_step(params, question, task, demos, settings, step, question_id, &mut rng)?,
                Some((w_sft, w_off)) => mix_on_step(
                    params,
                    question,
                    task,
                    demos,
                    settings,
                    w_sft,
                    w_off,
                    step,
                    question_id,
                    &mut rng,
                )?,
            };
            QuestionOutcome { grad, record: Some(record), demo_loss: None }
        }
    };
    if !outcome.grad.is_finite() {
        return Err(TrainError::NonFinite { step, question_id });
    }
    Ok(outcome)
}

/// One completed step's outputs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub records: Vec<StepRecord>,
}

/// A paused run: parameters, optimizer, pool, master stream, and the step counter.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    task: &'a dyn Task,
    demos: DemoIndex,
    settings: HptSettings,
    pool: Vec<PoolQuestion>,
    params: PolicyParams,
    opt: OptState,
    rng: ChaCha8Rng,
    step: u64,
}

/// Stream id of the master step stream within the run's seed.
const STREAM_STEPS: u64 = 0;
/// Stream id used once at startup to generate the question pool.
const STREAM_POOL: u64 = 1;

fn generate_pool(cfg: &TrainConfig, task: &dyn Task) -> Vec<PoolQuestion> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_POOL);
    (0..cfg.pool as u64)
        .map(|id| {
            let question = task.generate_question(&mut rng);
            let label = task.difficulty_label(&question);
            PoolQuestion { id, question, label }
        })
        .collect()
}

impl<'a> Trainer<'a> {
    /// Fresh run: zero-initialized parameters, pool generated from the seed's pool stream,
    /// demonstrations from `demos` when given, else from the task's own demonstrator.
    pub fn new(
        cfg: TrainConfig,
        task: &'a dyn Task,
        demos: Option<&[DemonstrationRecord]>,
    ) -> Result<Trainer<'a>, TrainError> {
        cfg.validate()?;
        let pool = generate_pool(&cfg, task);
        let demos = match demos {
            Some(records) => DemoIndex::from_records(records),
            None => {
                let questions: Vec<Vec<TokenId>> =
                    pool.iter().map(|p| p.question.clone()).collect();
                DemoIndex::from_task(task, &questions)
            }
        };
        let settings = HptSettings {
            gate: GateConfig::new(cfg.gate_gamma, cfg.n_rollouts)?,
            rl_components: EstimatorComponents::preset(&cfg.preset)
                .ok_or_else(|| TrainError::Config(format!("unknown preset `{}`", cfg.preset)))?,
            temperature: cfg.temperature,
        };
        let params = PolicyParams::zeros(task.vocabulary().clone(), cfg.window);
        let opt = OptState::new(&cfg.optimizer, params.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_STEPS);
        Ok(Trainer { cfg, task, demos, settings, pool, params, opt, rng, step: 0 })
    }

    /// Resumes from a checkpoint taken under the same config (which regenerates the pool).
    pub fn from_checkpoint(
        cfg: TrainConfig,
        task: &'a dyn Task,
        demos: Option<&[DemonstrationRecord]>,
        ck: &CheckpointRecord,
    ) -> Result<Trainer<'a>, TrainError> {
        let mut trainer = Trainer::new(cfg, task, demos)?;
        if ck.params.vocab() != task.vocabulary() {
            return Err(TrainError::Checkpoint(
                "checkpoint vocabulary does not match the task".into(),
            ));
        }
        if ck.params.window() != trainer.cfg.window {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint window {} does not match configured window {}",
                ck.params.window(),
                trainer.cfg.window
            )));
        }
        let kind_matches = matches!(
            (&ck.opt, &trainer.cfg.optimizer),
            (OptState::Sgd, OptimizerKind::Sgd)
                | (OptState::Adam { .. }, OptimizerKind::AdamLike { .. })
        );
        if !kind_matches {
            return Err(TrainError::Checkpoint(
                "checkpoint optimizer state does not match the configured optimizer".into(),
            ));
        }
        trainer.params = ck.params.clone();
        trainer.opt = ck.opt.clone();
        trainer.rng = ChaCha8Rng::from_seed(ck.rng_seed);
        trainer.rng.set_stream(ck.rng_stream);
        trainer.rng.set_word_pos(ck.rng_word_pos);
        trainer.step = ck.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> CheckpointRecord {
        CheckpointRecord {
            step: self.step,
            params: self.params.clone(),
            opt: self.opt.clone(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            rng_stream: self.rng.get_stream(),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
    pub fn pool(&self) -> &[PoolQuestion] {
        &self.pool
    }
    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    /// Runs one step: draw the batch and its child seeds from the master stream, do the
    /// per-question work in parallel, reduce in question order, apply the optimizer.
    pub fn run_step(&mut self) -> Result<StepOutput, TrainError> {
        let step = self.step + 1;
        let kind = step_kind(&self.cfg, step);
        let jobs: Vec<(u64, u64)> = (0..self.cfg.batch)
            .map(|_| {
                let qi = self.rng.random_range(0..self.pool.len()) as u64;
                (qi, self.rng.next_u64())
            })
            .collect();
        let (params, task, demos, settings, pool) =
            (&self.params, self.task, &self.demos, &self.settings, &self.pool);
        let outcomes: Vec<Result<QuestionOutcome, TrainError>> = jobs
            .par_iter()
            .map(|&(qid, child_seed)| {
                run_question(
                    params,
                    task,
                    demos,
                    settings,
                    kind,
                    step,
                    qid,
                    &pool[qid as usize].question,
                    child_seed,
                )
            })
            .collect();
        let mut grad = GradientVector::zeros(self.params.param_count());
        let mut records = Vec::new();
        let mut demo_losses = Vec::new();
        for outcome in outcomes {
            let o = outcome?;
            grad.add_scaled(&o.grad, 1.0);
            records.extend(o.record);
            demo_losses.extend(o.demo_loss);
        }
        grad.scale(1.0 / self.cfg.batch as f64);
        let grad_norm = grad.l2_norm();
        let param_delta =
            apply_update(&mut self.params, &mut self.opt, &self.cfg.optimizer, self.cfg.lr, &grad);
        self.step = step;
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let metrics = StepMetrics {
            step,
            grad_norm,
            param_delta,
            reward_mean: (!records.is_empty()).then(|| {
                mean(&records.iter().map(|r| r.reward_mean).collect::<Vec<_>>())
            }),
            offline_ratio: if records.is_empty() {
                None
            } else {
                Some(offline_ratio(&records)?)
            },
            demo_loss: (!demo_losses.is_empty()).then(|| mean(&demo_losses)),
            entropy_mean: (!records.is_empty()).then(|| {
                mean(&records.iter().map(|r| r.entropy_mean).collect::<Vec<_>>())
            }),
            resp_len_mean: (!records.is_empty()).then(|| {
                mean(&records.iter().map(|r| r.resp_len_mean).collect::<Vec<_>>())
            }),
        };
        Ok(StepOutput { metrics, records })
    }

    /// Evaluates every pool question with fresh rollouts (child seeds drawn from the master
    /// stream, so evaluation cadence is part of the run's deterministic history).
    pub fn evaluate(&mut self) -> Result<EvalRecord, TrainError> {
        let seeds: Vec<u64> = (0..self.pool.len()).map(|_| self.rng.next_u64()).collect();
        let (params, task, cfg) = (&self.params, self.task, &self.cfg);
        let questions: Vec<Result<EvalQuestion, TrainError>> = self
            .pool
            .par_iter()
            .zip(&seeds)
            .map(|(entry, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let group = RolloutGroup::sample(
                    params,
                    task,
                    &entry.question,
                    cfg.eval_rollouts,
                    cfg.temperature,
                    &mut rng,
                )?;
                let correct = group.scores.iter().filter(|&&s| s == 1).count();
                Ok(EvalQuestion {
                    id: entry.id,
                    label: entry.label.clone(),
                    correct,
                    n: cfg.eval_rollouts,
                    accuracy: correct as f64 / cfg.eval_rollouts as f64,
                })
            })
            .collect();
        let questions: Vec<EvalQuestion> = questions.into_iter().collect::<Result<_, _>>()?;
        let mean_accuracy =
            questions.iter().map(|q| q.accuracy).sum::<f64>() / questions.len() as f64;
        Ok(EvalRecord { step: self.step, mean_accuracy, questions })
    }
}

/// End-of-run summary: final parameters, the question pool, and evaluation artifacts.
pub struct TrainReport {
    pub params: PolicyParams,
    pub pool: Vec<PoolQuestion>,
    pub grid: Option<AccuracyGrid>,
    pub final_eval: Option<EvalRecord>,
}

/// Runs a full training loop over a built-in task named by the config.
pub fn train(cfg: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainReport, TrainError> {
    let task = builtin_task(&cfg.task)?;
    train_with_task(cfg, task.as_ref(), None, sink)
}

/// Runs a full training loop with an explicit task and optional demonstration set.
pub fn train_with_task(
    cfg: &TrainConfig,
    task: &dyn Task,
    demos: Option<&[DemonstrationRecord]>,
    sink: &mut dyn TrainSink,
) -> Result<TrainReport, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), task, demos)?;
    let mut evals: Vec<EvalRecord> = Vec::new();
    while trainer.completed_steps() < cfg.steps {
        let out = trainer.run_step()?;
        sink.on_step(&out.metrics, &out.records)?;
        let s = trainer.completed_steps();
        if cfg.eval_every > 0 && (s % cfg.eval_every == 0 || s == cfg.steps) {
            let eval = trainer.evaluate()?;
            sink.on_eval(&eval)?;
            evals.push(eval);
        }
        if cfg.ckpt_every > 0 && (s % cfg.ckpt_every == 0 || s == cfg.steps) {
            sink.on_checkpoint(&trainer.checkpoint())?;
        }
    }
    let grid = if evals.is_empty() {
        None
    } else {
        let ids: Vec<u64> = trainer.pool().iter().map(|p| p.id).collect();
        let steps: Vec<u64> = evals.iter().map(|e| e.step).collect();
        let mut grid = AccuracyGrid::new(ids, steps);
        for (col, eval) in evals.iter().enumerate() {
            for (row, q) in eval.questions.iter().enumerate() {
                grid.set(row, col, q.accuracy)?;
            }
        }
        Some(grid)
    };
    Ok(TrainReport {
        pool: trainer.pool().to_vec(),
        final_eval: evals.last().cloned(),
        grid,
        params: trainer.params,
    })
}
