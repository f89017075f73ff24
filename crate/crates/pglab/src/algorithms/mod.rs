//! Independent loss-based implementations of each training objective.
//!
//! Every preset in [`crate::estimator`] has a counterpart here written the conventional
//! way — as a scalar loss whose negative gradient the estimator must reproduce. The
//! losses are deliberately implemented from their textbook definitions (clipped
//! surrogates, frozen coefficients, probability sums) rather than through the estimator,
//! so the two sides can be differentially tested against each other via the
//! finite-difference engine in this module. [`enumeration`] adds exact expectations over
//! small trajectory spaces; [`gradcheck`] packages the preset-vs-loss comparisons.

pub mod enumeration;
pub mod gradcheck;

pub use enumeration::{
    common_objective_exact, enumerate_trajectories, exact_estimator_expectation,
    measure_change_gap, score_identity_gap, trajectory_prob, trust_region_objective_exact,
    ToyEnumTask,
};
pub use gradcheck::{check_preset, GradCheckReport};

use crate::estimator::{EstimatorError, RefKind};
use crate::policy::{
    token_distribution, GradientVector, PolicyError, PolicyParams, TokenId, Trajectory,
    PROB_FLOOR,
};
use crate::tasks::DemonstrationRecord;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("{what} must be non-empty")]
    EmptyInput { what: &'static str },
    #[error("{what}: got {left} items on one side and {right} on the other")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("reference kind {found} is not a per-token ratio reference")]
    UnsupportedReference { found: &'static str },
    #[error("loss evaluation returned a non-finite value at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
    #[error("could not draw a clip-margin-safe instance for `{preset}` (trial {trial})")]
    MarginExhausted { preset: String, trial: usize },
    #[error("trajectory space holds about {trajectories:.3e} sequences; enumeration refuses above {limit:.0e}")]
    SpaceTooLarge { trajectories: f64, limit: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// A scalar loss together with the per-trajectory terms it averages.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub per_trajectory_terms: Vec<f64>,
}

impl LossValue {
    fn from_terms(per_trajectory_terms: Vec<f64>) -> LossValue {
        let value =
            per_trajectory_terms.iter().sum::<f64>() / per_trajectory_terms.len() as f64;
        LossValue { value, per_trajectory_terms }
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Teacher-forced probabilities of each response token under `params`.
pub fn response_token_probs(
    params: &PolicyParams,
    question: &[TokenId],
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    let mut history: Vec<TokenId> = question.to_vec();
    let mut probs = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let ctx = params.context_for(&history);
        probs.push(token_distribution(params, &ctx)?[tok]);
        history.push(tok);
    }
    Ok(probs)
}

fn check_lengths(what: &'static str, left: usize, right: usize) -> Result<(), AlgorithmError> {
    if left == right {
        Ok(())
    } else {
        Err(AlgorithmError::LengthMismatch { what, left, right })
    }
}

/// Length-normalized negative log-likelihood of the demonstrations.
pub fn sft_loss(
    params: &PolicyParams,
    demos: &[DemonstrationRecord],
) -> Result<LossValue, AlgorithmError> {
    if demos.is_empty() {
        return Err(AlgorithmError::EmptyInput { what: "demonstrations" });
    }
    let mut terms = Vec::with_capacity(demos.len());
    for demo in demos {
        let probs = response_token_probs(params, &demo.question, &demo.demonstration)?;
        let nll: f64 = probs.iter().map(|&p| -floored_ln(p)).sum();
        terms.push(nll / probs.len() as f64);
    }
    Ok(LossValue::from_terms(terms))
}

/// Closed-form gradient of [`sft_loss`]: the mean over demonstrations of the
/// length-normalized negative score `-(1/|d|) sum_t grad ln pi(d_t | ctx)`.
pub fn sft_loss_gradient(
    params: &PolicyParams,
    demos: &[DemonstrationRecord],
) -> Result<GradientVector, AlgorithmError> {
    if demos.is_empty() {
        return Err(AlgorithmError::EmptyInput { what: "demonstrations" });
    }
    let mut out = GradientVector::zeros(params.param_count());
    let f_dim = params.feature_dim();
    let demo_scale = 1.0 / demos.len() as f64;
    for demo in demos {
        let mut history = demo.question.clone();
        let token_scale = demo_scale / demo.demonstration.len() as f64;
        for &tok in &demo.demonstration {
            let ctx = params.context_for(&history);
            let dist = token_distribution(params, &ctx)?;
            let slice = out.as_mut_slice();
            for (row, &p_row) in dist.iter().enumerate() {
                let indicator = if row == tok { 1.0 } else { 0.0 };
                let coef = -token_scale * (indicator - p_row);
                let base = row * f_dim;
                for feat in ctx.active_features() {
                    slice[base + feat] += coef;
                }
            }
            history.push(tok);
        }
    }
    Ok(out)
}

/// Sign-weighted negative log-likelihood of sampled trajectories.
pub fn reinforce_loss(
    params: &PolicyParams,
    rollouts: &[Trajectory],
    advantages: &[f64],
) -> Result<LossValue, AlgorithmError> {
    check_lengths("rollouts vs advantages", rollouts.len(), advantages.len())?;
    let mut terms = Vec::with_capacity(rollouts.len());
    for (traj, &adv) in rollouts.iter().zip(advantages) {
        let probs = response_token_probs(params, &traj.question, &traj.tokens)?;
        let logprob: f64 = probs.iter().map(|&p| floored_ln(p)).sum();
        terms.push(-adv * logprob / probs.len() as f64);
    }
    Ok(LossValue::from_terms(terms))
}

/// Clipped-surrogate loss over importance ratios against the rollout policy:
/// `-mean_j (1/|tau_j|) sum_t min(rho_t A_j, clamp(rho_t, 1-eps_low, 1+eps_high) A_j)`.
///
/// `ref_kind` selects the ratio denominator: `Rollout` uses the stored generation
/// probabilities (the ordinary surrogate); `Current` pins every ratio to 1 (the trivial
/// boundary case). Sequence-level and unit references have no per-token ratio and are
/// rejected.
pub fn ppo_style_loss(
    params: &PolicyParams,
    rollouts: &[Trajectory],
    advantages: &[f64],
    ref_kind: RefKind,
    eps_low: f64,
    eps_high: f64,
) -> Result<LossValue, AlgorithmError> {
    check_lengths("rollouts vs advantages", rollouts.len(), advantages.len())?;
    match ref_kind {
        RefKind::Rollout | RefKind::Current => {}
        RefKind::Unit => return Err(AlgorithmError::UnsupportedReference { found: "unit" }),
        RefKind::GspoGeometric => {
            return Err(AlgorithmError::UnsupportedReference { found: "gspo_geometric" })
        }
    }
    let mut terms = Vec::with_capacity(rollouts.len());
    for (traj, &adv) in rollouts.iter().zip(advantages) {
        let probs = response_token_probs(params, &traj.question, &traj.tokens)?;
        let mut acc = 0.0;
        for (t, &p_cur) in probs.iter().enumerate() {
            let ratio = match ref_kind {
                RefKind::Rollout => p_cur / traj.gen_token_probs[t],
                _ => 1.0,
            };
            let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
            acc += (ratio * adv).min(clipped * adv);
        }
        terms.push(-acc / probs.len() as f64);
    }
    Ok(LossValue::from_terms(terms))
}

/// Per-token surrogate coefficients with the ratio clamp frozen at `params_at`:
/// `K_{j,t} = clamp(rho_t, 1-eps_low, 1+eps_high) * A_j`.
pub fn cispo_frozen_coefficients(
    params_at: &PolicyParams,
    rollouts: &[Trajectory],
    advantages: &[f64],
    eps_low: f64,
    eps_high: f64,
) -> Result<Vec<Vec<f64>>, AlgorithmError> {
    check_lengths("rollouts vs advantages", rollouts.len(), advantages.len())?;
    let mut all = Vec::with_capacity(rollouts.len());
    for (traj, &adv) in rollouts.iter().zip(advantages) {
        let probs = response_token_probs(params_at, &traj.question, &traj.tokens)?;
        let coefs: Vec<f64> = probs
            .iter()
            .zip(&traj.gen_token_probs)
            .map(|(&p_cur, &p_gen)| (p_cur / p_gen).clamp(1.0 - eps_low, 1.0 + eps_high) * adv)
            .collect();
        all.push(coefs);
    }
    Ok(all)
}

/// Frozen-coefficient surrogate `-mean_j (1/|tau_j|) sum_t K_{j,t} ln pi(tau_t)`. Its
/// gradient at the freeze point equals the clamped-ratio estimator there (the clamp sits
/// under a stop-gradient, so the coefficients are data, not functions of `params`).
pub fn cispo_surrogate_loss(
    params: &PolicyParams,
    rollouts: &[Trajectory],
    coefficients: &[Vec<f64>],
) -> Result<LossValue, AlgorithmError> {
    check_lengths("rollouts vs coefficients", rollouts.len(), coefficients.len())?;
    let mut terms = Vec::with_capacity(rollouts.len());
    for (traj, coefs) in rollouts.iter().zip(coefficients) {
        check_lengths("tokens vs coefficients", traj.tokens.len(), coefs.len())?;
        let probs = response_token_probs(params, &traj.question, &traj.tokens)?;
        let acc: f64 =
            probs.iter().zip(coefs).map(|(&p, &k)| k * floored_ln(p)).sum();
        terms.push(-acc / probs.len() as f64);
    }
    Ok(LossValue::from_terms(terms))
}

/// Keep/drop flags for the sequence-ratio clip, frozen at `params_at`: a trajectory is
/// kept when `exp((ln pi_at(tau) - ln pi_gen(tau)) / |tau|)` lies in `[1-eps, 1+eps]`.
pub fn gspo_keep_mask(
    params_at: &PolicyParams,
    rollouts: &[Trajectory],
    eps: f64,
) -> Result<Vec<bool>, AlgorithmError> {
    let mut keep = Vec::with_capacity(rollouts.len());
    for traj in rollouts {
        let probs = response_token_probs(params_at, &traj.question, &traj.tokens)?;
        let logprob: f64 = probs.iter().map(|&p| floored_ln(p)).sum();
        let seq_ratio = ((logprob - traj.gen_logprob_sum) / traj.tokens.len() as f64).exp();
        keep.push((1.0 - eps..=1.0 + eps).contains(&seq_ratio));
    }
    Ok(keep)
}

/// Sequence-ratio surrogate with a frozen keep mask:
/// `-mean_j keep_j * A_j * exp((ln pi(tau_j) - ln pi_gen(tau_j)) / |tau_j|)`.
pub fn gspo_surrogate_loss(
    params: &PolicyParams,
    rollouts: &[Trajectory],
    advantages: &[f64],
    keep: &[bool],
) -> Result<LossValue, AlgorithmError> {
    check_lengths("rollouts vs advantages", rollouts.len(), advantages.len())?;
    check_lengths("rollouts vs keep flags", rollouts.len(), keep.len())?;
    let mut terms = Vec::with_capacity(rollouts.len());
    for ((traj, &adv), &kept) in rollouts.iter().zip(advantages).zip(keep) {
        if !kept {
            terms.push(0.0);
            continue;
        }
        let probs = response_token_probs(params, &traj.question, &traj.tokens)?;
        let logprob: f64 = probs.iter().map(|&p| floored_ln(p)).sum();
        let seq_ratio = ((logprob - traj.gen_logprob_sum) / traj.tokens.len() as f64).exp();
        terms.push(-adv * seq_ratio);
    }
    Ok(LossValue::from_terms(terms))
}

/// Offline probability-sum loss `-mean_j A_j (1/|d_j|) sum_t pi(d_t | ctx)` — the
/// unit-reference, unclipped objective whose gradient is `A * grad pi` per token.
pub fn srft_offline_loss(
    params: &PolicyParams,
    demos: &[DemonstrationRecord],
    advantages: &[f64],
) -> Result<LossValue, AlgorithmError> {
    check_lengths("demonstrations vs advantages", demos.len(), advantages.len())?;
    let mut terms = Vec::with_capacity(demos.len());
    for (demo, &adv) in demos.iter().zip(advantages) {
        let probs = response_token_probs(params, &demo.question, &demo.demonstration)?;
        let mean_prob = probs.iter().sum::<f64>() / probs.len() as f64;
        terms.push(-adv * mean_prob);
    }
    Ok(LossValue::from_terms(terms))
}

/// Offline loss through the saturating map `p -> p / (p + gamma)`; its gradient weights
/// each token by `gamma / (p + gamma)^2`.
pub fn luffy_offline_loss(
    params: &PolicyParams,
    demos: &[DemonstrationRecord],
    advantages: &[f64],
    gamma: f64,
) -> Result<LossValue, AlgorithmError> {
    check_lengths("demonstrations vs advantages", demos.len(), advantages.len())?;
    let mut terms = Vec::with_capacity(demos.len());
    for (demo, &adv) in demos.iter().zip(advantages) {
        let probs = response_token_probs(params, &demo.question, &demo.demonstration)?;
        let mean_shaped = probs.iter().map(|&p| p / (p + gamma)).sum::<f64>() / probs.len() as f64;
        terms.push(-adv * mean_shaped);
    }
    Ok(LossValue::from_terms(terms))
}

/// Weighted combination of an RL loss and an SFT loss.
pub fn mixed_loss(alpha: f64, beta: f64, rl: &LossValue, sft: &LossValue) -> f64 {
    alpha * rl.value + beta * sft.value
}

/// Central finite differences of `f` at `params`, one coordinate at a time (in parallel;
/// the collected order is the coordinate order, so the result is deterministic).
pub fn finite_difference_grad<F>(
    f: F,
    params: &PolicyParams,
    h: f64,
) -> Result<GradientVector, AlgorithmError>
where
    F: Fn(&PolicyParams) -> f64 + Sync,
{
    assert!(h > 0.0, "step size must be positive");
    let n = params.param_count();
    let values: Result<Vec<f64>, AlgorithmError> = (0..n)
        .into_par_iter()
        .map(|coordinate| {
            let mut plus = params.clone();
            plus.weights_mut()[coordinate] += h;
            let mut minus = params.clone();
            minus.weights_mut()[coordinate] -= h;
            let d = (f(&plus) - f(&minus)) / (2.0 * h);
            if d.is_finite() {
                Ok(d)
            } else {
                Err(AlgorithmError::NonFiniteEvaluation { coordinate })
            }
        })
        .collect();
    Ok(GradientVector::from_values(values?))
}

/// `||a - b||_2 / max(||a||_2, ||b||_2, 1e-12)`.
pub fn rel_error(a: &GradientVector, b: &GradientVector) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient dimensions must agree");
    let mut diff = a.clone();
    diff.add_scaled(b, -1.0);
    diff.l2_norm() / a.l2_norm().max(b.l2_norm()).max(1e-12)
}
