//! Command-line surface for the policy-gradient laboratory.
//!
//! Subcommands cover the full workflow: `train` runs a configured training loop and
//! writes its artifacts under an output directory, `gradcheck` and `enumcheck` verify
//! the gradient estimator against its oracles (and exit nonzero on any violation, so
//! they can gate CI), `ablate-gate` sweeps the routing threshold over identical-seed
//! runs, `passk` evaluates pass@k counts, and `report` renders a plain-text summary
//! table from finished run directories.
//!
//! Every command prints an effective-config header before doing any work; re-running
//! with the values from that header reproduces the command exactly. Exit codes: 0 on
//! success, 1 on a verification or runtime failure, 2 on a usage or config error.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pglab::algorithms::{
    check_preset, exact_estimator_expectation, finite_difference_grad, rel_error,
    trust_region_objective_exact, AlgorithmError, ToyEnumTask,
};
use pglab::estimator::{AdvantageKind, EstimatorComponents, MaskKind, RefKind, Shaping, PRESET_NAMES};
use pglab::metrics::{exclusive_solves, pass_at_k_bootstrap, pass_at_k_exact};
use pglab::policy::{PolicyParams, Vocabulary};
use pglab::tasks::{builtin_task, BehaviorPolicy, Task};
use pglab::trainer::{train, EvalRecord, RunWriter, StepMetrics, TrainConfig};

/// Marker for problems in how a command was invoked; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "pglab", version)]
#[command(about = "Desk-scale policy-gradient laboratory: training, verification, reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a training loop and write its artifacts under --out.
    Train(TrainArgs),
    /// Check every estimator preset against its independent loss-gradient oracle.
    Gradcheck(GradcheckArgs),
    /// Check estimator expectations against exact enumeration gradients.
    Enumcheck(EnumcheckArgs),
    /// Train once per gate threshold with identical seeds and compare offline ratios.
    AblateGate(AblateGateArgs),
    /// Evaluate pass@k from a correct/total count or an explicit outcome list.
    Passk(PasskArgs),
    /// Render a plain-text summary table from one or two run directories.
    Report(ReportArgs),
}

/// Training knobs shared by `train` and `ablate-gate`. Precedence: built-in defaults,
/// then the --config file, then flags.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Key=value config file applied over built-in defaults (flags win over the file).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Task name: modadd, reverse or sparse_parity.
    #[arg(long)]
    task: Option<String>,

    /// Training paradigm: sft, rl, sft_then_rl, hpt, off_on or mix_on.
    #[arg(long)]
    paradigm: Option<String>,

    /// Estimator preset for the on-policy branch.
    #[arg(long)]
    preset: Option<String>,

    /// Rollouts sampled per question.
    #[arg(long = "n-rollouts")]
    n_rollouts: Option<usize>,

    /// Optimizer steps to run.
    #[arg(long)]
    steps: Option<usize>,

    /// Questions per optimizer step.
    #[arg(long)]
    batch: Option<usize>,

    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,

    /// Master seed for pool generation and rollout sampling.
    #[arg(long)]
    seed: Option<u64>,

    /// Sampling temperature for rollouts.
    #[arg(long)]
    temperature: Option<f64>,

    /// Extra KEY=VALUE override for any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,

    /// Gate threshold: route a question to SFT when at most this many rollouts verify.
    #[arg(long = "gate-gamma")]
    gate_gamma: Option<usize>,

    /// Directory for run artifacts (config.echo, metrics.jsonl, grids/, checkpoints/).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Comma-separated preset names, or "all".
    #[arg(long, default_value = "all")]
    presets: String,

    /// Random instances per preset.
    #[arg(long, default_value_t = 20)]
    trials: usize,

    /// Base seed; each preset offsets it so presets draw independent instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Maximum allowed relative error against the oracle gradient.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct EnumcheckArgs {
    /// Comma-separated weights for the demonstrator-adherence term.
    #[arg(long, default_value = "0,0.5,2")]
    mu: String,

    /// Comma-separated weights for the trust-region term.
    #[arg(long, default_value = "0,0.1,0.5")]
    lambda: String,

    /// Seed for the random evaluation point.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Maximum allowed relative error against the finite-difference gradient.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,

    /// Response length cap for the enumerated trajectory space.
    #[arg(long = "max-len", default_value_t = 3)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct AblateGateArgs {
    #[command(flatten)]
    flags: TrainFlags,

    /// Comma-separated gate thresholds to sweep.
    #[arg(long, default_value = "0,1,2")]
    gamma: String,

    /// Parent directory; each threshold writes its run under gamma_<value>/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PasskArgs {
    /// Number of sampled rollouts.
    #[arg(long)]
    n: Option<usize>,

    /// Number of correct rollouts.
    #[arg(long)]
    c: Option<usize>,

    /// Comma-separated k values.
    #[arg(long, default_value = "1")]
    k: String,

    /// Explicit comma-separated 0/1 outcomes (alternative to --n/--c).
    #[arg(long)]
    scores: Option<String>,

    /// Bootstrap resamples to print alongside the exact value (0 = exact only).
    #[arg(long, default_value_t = 0)]
    resamples: usize,

    /// Seed for the bootstrap resampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One or two run directories (two enables the exclusive-solves comparison).
    #[arg(required = true, num_args = 1..=2)]
    runs: Vec<PathBuf>,

    /// Comma-separated k values for the pass@k columns.
    #[arg(long, default_value = "1,4,8")]
    k: String,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    process::exit(code);
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Enumcheck(args) => cmd_enumcheck(args),
        Command::AblateGate(args) => cmd_ablate_gate(args),
        Command::Passk(args) => cmd_passk(args),
        Command::Report(args) => cmd_report(args),
    }
}

// -----------------------------------------------------------------------------------------
// Config assembly.
// -----------------------------------------------------------------------------------------

/// Builds the effective training config: defaults, then the config file, then flags.
/// Cadence keys never mentioned by either source get CLI defaults — periodic evaluation
/// (so grids and reports have data) and one final checkpoint (so the run is resumable).
fn build_config(flags: &TrainFlags, gate_gamma: Option<usize>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("could not read config file {}: {e}", path.display())))?;
        cfg.apply_config_text(&text)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, _)) = line.split_once('=') {
                seen.insert(key.trim().to_string());
            }
        }
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    push("task", flags.task.clone());
    push("paradigm", flags.paradigm.clone());
    push("preset", flags.preset.clone());
    push("n_rollouts", flags.n_rollouts.map(|v| v.to_string()));
    push("steps", flags.steps.map(|v| v.to_string()));
    push("batch", flags.batch.map(|v| v.to_string()));
    push("lr", flags.lr.map(|v| v.to_string()));
    push("seed", flags.seed.map(|v| v.to_string()));
    push("temperature", flags.temperature.map(|v| v.to_string()));
    push("gate_gamma", gate_gamma.map(|v| v.to_string()));
    for entry in &flags.set {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        overrides.push((key.trim().to_string(), value.trim().to_string()));
    }
    for (key, value) in overrides {
        cfg.apply_key_value(&key, &value).map_err(|e| usage(e.to_string()))?;
        seen.insert(key);
    }
    if !seen.contains("eval_every") {
        cfg.eval_every = (cfg.steps / 20).max(1);
    }
    if !seen.contains("ckpt_every") {
        cfg.ckpt_every = cfg.steps;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    builtin_task(&cfg.task).map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn print_config_header(command: &str, cfg: &TrainConfig) {
    println!("# {command}: effective config");
    for (key, value) in cfg.to_key_values() {
        println!("{key}={value}");
    }
    println!();
}

// -----------------------------------------------------------------------------------------
// train
// -----------------------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = build_config(&args.flags, args.gate_gamma)?;
    print_config_header("train", &cfg);
    let mut writer = RunWriter::create(&args.out, &cfg)
        .with_context(|| format!("could not create run directory {}", args.out.display()))?;
    let report = train(&cfg, &mut writer)?;
    writer.finish(&report)?;
    if let Some(eval) = &report.final_eval {
        println!("final mean accuracy over the pool: {:.4}", eval.mean_accuracy);
    }
    println!("artifacts written under {}", args.out.display());
    Ok(())
}

// -----------------------------------------------------------------------------------------
// gradcheck
// -----------------------------------------------------------------------------------------

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let names: Vec<String> = if args.presets.trim() == "all" {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        args.presets.split(',').map(|s| s.trim().to_string()).collect()
    };
    for name in &names {
        if EstimatorComponents::preset(name).is_none() {
            return Err(usage(format!(
                "unknown preset `{name}` (known: {})",
                PRESET_NAMES.join(", ")
            )));
        }
    }
    println!(
        "# gradcheck: effective config\npresets={}\ntrials={}\nseed={}\ntolerance={:e}\n",
        names.join(","),
        args.trials,
        args.seed,
        args.tolerance
    );
    let mut failures = 0usize;
    for (i, name) in names.iter().enumerate() {
        let report = check_preset(name, args.trials, args.seed.wrapping_add(i as u64), args.tolerance)?;
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        match report.closed_form_gap {
            Some(gap) => println!(
                "{name:<10} max rel err {:.3e}   closed-form gap {:.3e}   {verdict}",
                report.max_rel_err, gap
            ),
            None => println!("{name:<10} max rel err {:.3e}   {verdict}", report.max_rel_err),
        }
        if !report.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(anyhow!("{failures} preset(s) exceeded tolerance {:e}", args.tolerance));
    }
    Ok(())
}

// -----------------------------------------------------------------------------------------
// enumcheck
// -----------------------------------------------------------------------------------------

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> anyhow::Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<T>().map_err(|_| usage(format!("{what}: `{s}` is not a valid value")))
        })
        .collect()
}

/// Evaluation-point parameters drawn uniformly from [-scale, scale].
fn uniform_params(vocab: Vocabulary, window: usize, seed: u64, scale: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::zeros(vocab, window);
    for w in params.weights_mut() {
        *w = scale * (2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0);
    }
    params
}

fn cmd_enumcheck(args: EnumcheckArgs) -> anyhow::Result<()> {
    let mus: Vec<f64> = parse_list(&args.mu, "--mu")?;
    let lambdas: Vec<f64> = parse_list(&args.lambda, "--lambda")?;
    if mus.is_empty() || lambdas.is_empty() {
        return Err(usage("--mu and --lambda need at least one value each"));
    }
    println!(
        "# enumcheck: effective config\nmu={}\nlambda={}\nseed={}\ntolerance={:e}\nmax_len={}\n",
        args.mu.trim(),
        args.lambda.trim(),
        args.seed,
        args.tolerance,
        args.max_len
    );
    let task = ToyEnumTask::new(1);
    let behavior = BehaviorPolicy::Demonstrator;
    let question = vec![task.vocabulary().bos()];
    let questions = vec![question.clone()];
    let params = uniform_params(task.vocabulary().clone(), 2, args.seed.wrapping_add(1), 0.8);
    let params_ref = uniform_params(task.vocabulary().clone(), 2, args.seed.wrapping_add(2), 0.8);
    let mut worst = 0.0f64;
    for &mu in &mus {
        for &lambda in &lambdas {
            let components = EstimatorComponents {
                mask: MaskKind::None,
                reference: RefKind::Current,
                advantage: AdvantageKind::TrustRegion { lambda, mu },
                shaping: Shaping::Identity,
            };
            let exact = exact_estimator_expectation(
                &params,
                &params_ref,
                &components,
                &task,
                &behavior,
                &question,
                args.max_len,
            )
            .map_err(|e| {
                if matches!(e, AlgorithmError::SpaceTooLarge { .. }) {
                    usage(e.to_string())
                } else {
                    anyhow::Error::new(e)
                }
            })?;
            let fd = finite_difference_grad(
                |p| {
                    trust_region_objective_exact(
                        p,
                        &params_ref,
                        &task,
                        &behavior,
                        &questions,
                        lambda,
                        mu,
                        args.max_len,
                    )
                    .expect("space was already checked enumerable")
                },
                &params,
                1e-5,
            )?;
            let err = rel_error(&exact, &fd);
            worst = worst.max(err);
            let verdict = if err <= args.tolerance { "ok" } else { "FAIL" };
            println!("mu={mu:<4} lambda={lambda:<4} rel err {err:.3e}   {verdict}");
        }
    }
    if worst > args.tolerance {
        return Err(anyhow!("worst rel err {worst:.3e} exceeds tolerance {:e}", args.tolerance));
    }
    Ok(())
}

// -----------------------------------------------------------------------------------------
// ablate-gate
// -----------------------------------------------------------------------------------------

fn read_metrics(path: &Path) -> anyhow::Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("could not read {}", path.display()))?;
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str::<StepMetrics>(line)
                .map_err(|e| anyhow!("malformed metrics record in {}: {e}", path.display()))
        })
        .collect()
}

fn mean_offline_ratio(metrics: &[StepMetrics]) -> Option<f64> {
    let ratios: Vec<f64> = metrics.iter().filter_map(|m| m.offline_ratio).collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn cmd_ablate_gate(args: AblateGateArgs) -> anyhow::Result<()> {
    let gammas: Vec<usize> = parse_list(&args.gamma, "--gamma")?;
    if gammas.is_empty() {
        return Err(usage("--gamma needs at least one value"));
    }
    let base = build_config(&args.flags, None)?;
    // Validate the whole sweep before training anything, so a bad threshold cannot
    // leave a half-finished directory tree behind.
    for &gamma in &gammas {
        let mut cfg = base.clone();
        cfg.gate_gamma = gamma;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
    }
    print_config_header("ablate-gate", &base);
    println!("gate thresholds: {gammas:?}\n");
    let mut results: Vec<(usize, Option<f64>, f64)> = Vec::new();
    for &gamma in &gammas {
        let mut cfg = base.clone();
        cfg.gate_gamma = gamma;
        let dir = args.out.join(format!("gamma_{gamma}"));
        let mut writer = RunWriter::create(&dir, &cfg)
            .with_context(|| format!("could not create run directory {}", dir.display()))?;
        let report = train(&cfg, &mut writer)?;
        writer.finish(&report)?;
        let metrics = read_metrics(&dir.join("metrics.jsonl"))?;
        let offline = mean_offline_ratio(&metrics);
        let final_acc = report.final_eval.as_ref().map_or(f64::NAN, |e| e.mean_accuracy);
        match offline {
            Some(ratio) => println!(
                "gamma={gamma}  mean offline ratio {ratio:.4}  final accuracy {final_acc:.4}  ({})",
                dir.display()
            ),
            None => println!(
                "gamma={gamma}  mean offline ratio -       final accuracy {final_acc:.4}  ({})",
                dir.display()
            ),
        }
        results.push((gamma, offline, final_acc));
    }
    let ratios: Vec<(usize, f64)> = results
        .iter()
        .filter_map(|(g, offline, _)| offline.map(|r| (*g, r)))
        .collect();
    if ratios.len() == results.len() && ratios.len() > 1 {
        let ordered = ratios.windows(2).all(|w| w[0].1 <= w[1].1);
        println!(
            "\nmean offline ratio is {} in gamma over this sweep",
            if ordered { "monotone nondecreasing" } else { "NOT monotone" }
        );
    }
    Ok(())
}

// -----------------------------------------------------------------------------------------
// passk
// -----------------------------------------------------------------------------------------

fn cmd_passk(args: PasskArgs) -> anyhow::Result<()> {
    let ks: Vec<usize> = parse_list(&args.k, "--k")?;
    let (n, c, scores): (usize, usize, Option<Vec<u8>>) = match (&args.scores, args.n, args.c) {
        (Some(raw), None, None) => {
            let scores: Vec<u8> = raw
                .split(',')
                .map(|s| match s.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(usage(format!("--scores entries must be 0 or 1, got `{other}`"))),
                })
                .collect::<anyhow::Result<_>>()?;
            let c = scores.iter().filter(|&&s| s > 0).count();
            (scores.len(), c, Some(scores))
        }
        (None, Some(n), Some(c)) => (n, c, None),
        _ => return Err(usage("pass either --scores, or both --n and --c")),
    };
    println!(
        "# passk: effective config\nn={n}\nc={c}\nk={}\nresamples={}\nseed={}\n",
        args.k.trim(),
        args.resamples,
        args.seed
    );
    for &k in &ks {
        let exact = pass_at_k_exact(n, c, k).map_err(|e| usage(e.to_string()))?;
        if args.resamples > 0 {
            let scores_vec = scores
                .clone()
                .unwrap_or_else(|| (0..n).map(|i| (i < c) as u8).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let est = pass_at_k_bootstrap(&scores_vec, k, args.resamples, &mut rng)
                .map_err(|e| usage(e.to_string()))?;
            println!(
                "pass@{k} = {exact:.10}   (bootstrap {:.10} over {} resamples)",
                est.estimate, args.resamples
            );
        } else {
            println!("pass@{k} = {exact:.10}");
        }
    }
    Ok(())
}

// -----------------------------------------------------------------------------------------
// report
// -----------------------------------------------------------------------------------------

struct RunSummary {
    dir: String,
    steps: usize,
    final_eval: EvalRecord,
    offline: Option<f64>,
}

fn load_run(dir: &Path) -> anyhow::Result<RunSummary> {
    let eval_path = dir.join("eval.jsonl");
    let text = fs::read_to_string(&eval_path).map_err(|e| {
        usage(format!(
            "could not read {}: {e} (was the run trained with eval_every > 0?)",
            eval_path.display()
        ))
    })?;
    let last = text
        .lines()
        .filter(|line| !line.trim().is_empty())
        .last()
        .ok_or_else(|| {
            usage(format!(
                "{} holds no evaluation records; train with eval_every > 0",
                eval_path.display()
            ))
        })?;
    let final_eval: EvalRecord = serde_json::from_str(last)
        .map_err(|e| anyhow!("malformed eval record in {}: {e}", eval_path.display()))?;
    let metrics = read_metrics(&dir.join("metrics.jsonl"))?;
    Ok(RunSummary {
        dir: dir.display().to_string(),
        steps: metrics.len(),
        final_eval,
        offline: mean_offline_ratio(&metrics),
    })
}

/// Mean over the evaluated pool of the per-question exact pass@k.
fn pool_pass_at_k(eval: &EvalRecord, k: usize) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for q in &eval.questions {
        total += pass_at_k_exact(q.n, q.correct, k).map_err(|e| usage(e.to_string()))?;
    }
    Ok(total / eval.questions.len() as f64)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let ks: Vec<usize> = parse_list(&args.k, "--k")?;
    println!(
        "# report: effective config\nruns={}\nk={}\n",
        args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        args.k.trim()
    );
    let summaries: Vec<RunSummary> =
        args.runs.iter().map(|dir| load_run(dir)).collect::<anyhow::Result<_>>()?;

    let name_width = summaries.iter().map(|s| s.dir.len()).max().unwrap_or(3).max(3);
    let mut header = format!("{:<name_width$}  {:>6}  {:>8}", "run", "steps", "accuracy");
    for &k in &ks {
        header.push_str(&format!("  {:>8}", format!("pass@{k}")));
    }
    header.push_str(&format!("  {:>8}", "offline"));
    println!("{header}");
    for s in &summaries {
        let mut row = format!(
            "{:<name_width$}  {:>6}  {:>8.4}",
            s.dir, s.steps, s.final_eval.mean_accuracy
        );
        for &k in &ks {
            row.push_str(&format!("  {:>8.4}", pool_pass_at_k(&s.final_eval, k)?));
        }
        match s.offline {
            Some(ratio) => row.push_str(&format!("  {:>8.4}", ratio)),
            None => row.push_str(&format!("  {:>8}", "-")),
        }
        println!("{row}");
    }

    if let [a, b] = &summaries[..] {
        let qa = &a.final_eval.questions;
        let qb = &b.final_eval.questions;
        let matched = qa.len() == qb.len()
            && qa.iter().zip(qb).all(|(x, y)| x.id == y.id && x.label == y.label);
        if !matched {
            return Err(usage(
                "the two runs evaluate different question pools; exclusive solves need \
                 identical task, pool size and seed"
                    .to_string(),
            ));
        }
        let bits_a: Vec<u8> = qa.iter().map(|q| (q.correct > 0) as u8).collect();
        let bits_b: Vec<u8> = qb.iter().map(|q| (q.correct > 0) as u8).collect();
        let labels: Vec<String> = qa.iter().map(|q| q.label.clone()).collect();
        let ex = exclusive_solves(&bits_a, &bits_b, &labels).map_err(|e| anyhow!(e))?;
        println!("\nexclusive solves (+ solved only by {}, - solved only by {}):", a.dir, b.dir);
        println!("  overall: +{} -{}", ex.overall.plus, ex.overall.minus);
        for (label, counts) in &ex.per_label {
            println!("  {label}: +{} -{}", counts.plus, counts.minus);
        }
    }
    Ok(())
}
