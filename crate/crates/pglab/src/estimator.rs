//! One gradient estimator, four swappable components.
//!
//! Every algorithm here optimizes a gradient of the shape
//! `mask * shaping * advantage * grad pi / reference_prob`, accumulated per token with a
//! per-trajectory length normalization and a batch mean. Choosing the stabilization mask,
//! the reference probability, the advantage estimate and the gradient shaping recovers
//! SFT, REINFORCE, PPO, GRPO, Dr.GRPO, CISPO, GSPO and the offline SRFT/LUFFY updates —
//! the named presets at the bottom of this module.

use crate::policy::{
    sequence_log_prob, token_distribution, Context, GradientVector, PolicyParams, TokenId,
    Trajectory, PROB_FLOOR,
};
use thiserror::Error;

/// Guard added to group standard deviations before dividing.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("advantage kind `{kind}` needs a non-empty reward group")]
    EmptyGroup { kind: &'static str },
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// Stabilization mask: decides whether (and with what weight) a token's gradient flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Keep everything.
    None,
    /// Drop a token exactly when the clipped surrogate would stop its gradient:
    /// ratio above `1 + eps_high` with positive advantage, or below `1 - eps_low`
    /// with negative advantage.
    PpoClip { eps_low: f64, eps_high: f64 },
    /// Reweight by `clamp(ratio, 1-eps_low, 1+eps_high) / ratio`; never drops.
    CispoClamp { eps_low: f64, eps_high: f64 },
    /// Sequence-level two-sided clip on the per-token geometric-mean ratio: the whole
    /// sequence is kept or dropped as one unit.
    GspoSeqClip { eps: f64 },
}

/// Which policy's probability sits in the estimator's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    /// The policy being optimized; turns `grad pi / ref` into `grad ln pi`.
    Current,
    /// The rollout-time policy; yields importance-ratio updates.
    Rollout,
    /// Constant 1; yields raw `grad pi` updates (offline objectives).
    Unit,
    /// Current policy times the sequence-level geometric mean of rollout/current —
    /// the per-token denominator that makes sequence-ratio updates token-decomposable.
    GspoGeometric,
}

/// Per-trajectory advantage estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvantageKind {
    /// Constant 1 (pure likelihood training).
    SftOne,
    /// +1 for verified responses, -1 otherwise.
    FixedSign,
    /// Group-normalized: `(r - mean) / (std + eps)` over the on-policy group.
    Grpo,
    /// Group-centered only: `r - mean` (no scale normalization).
    DrGrpo,
    /// Group-normalized over the union of on-policy and offline reward groups.
    SrftUnion,
    /// `r + mu * behavior_ratio`: reward plus the weighted behavior-over-current ratio
    /// that makes the estimator's expectation equal the KL-regularized objective's gradient.
    Unified { mu: f64 },
    /// `r - lambda * (ln pi_current(tau) - ln pi_ref(tau)) + mu * behavior_ratio`:
    /// the unified advantage extended with a reverse-KL trust-region term.
    TrustRegion { lambda: f64, mu: f64 },
}

/// Optional reweighting of each token's contribution as a function of its probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shaping {
    Identity,
    /// Derivative of the saturating map `p / (p + gamma)`: weight `gamma / (p + gamma)^2`,
    /// which damps tokens the policy already assigns high probability.
    Luffy { gamma: f64 },
}

/// The four components that select an algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorComponents {
    pub mask: MaskKind,
    pub reference: RefKind,
    pub advantage: AdvantageKind,
    pub shaping: Shaping,
}

/// Everything the estimator needs to know about one generated token.
#[derive(Debug, Clone)]
pub struct TokenRecord {
    pub context: Context,
    pub token: TokenId,
    /// Probability under the policy being optimized.
    pub p_current: f64,
    /// Probability under the policy that generated the trajectory.
    pub p_rollout: f64,
    pub seq_len: usize,
    pub seq_logprob_current: f64,
    pub seq_logprob_rollout: f64,
}

/// Behavior-policy-over-current probability ratio for a whole trajectory, or a flag that
/// the trajectory is outside the behavior policy's support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorRatio {
    Known(f64),
    OutOfSupport,
}

impl BehaviorRatio {
    fn value_or_zero(self) -> f64 {
        match self {
            BehaviorRatio::Known(r) => r,
            BehaviorRatio::OutOfSupport => 0.0,
        }
    }
}

/// Trajectory-level inputs for the advantage computation. The sequence log-probabilities
/// are filled in by the batch-item constructors so they always match the token records.
#[derive(Debug, Clone)]
pub struct AdvantageInputs {
    pub reward: f64,
    pub group_rewards_on: Vec<f64>,
    pub group_rewards_off: Vec<f64>,
    pub behavior_ratio: BehaviorRatio,
    pub seq_logprob_current: f64,
    pub seq_logprob_rollout: f64,
}

impl AdvantageInputs {
    /// On-policy inputs: the trajectory's reward plus its rollout group's rewards.
    pub fn on_policy(reward: f64, group_rewards_on: Vec<f64>) -> AdvantageInputs {
        AdvantageInputs {
            reward,
            group_rewards_on,
            group_rewards_off: Vec::new(),
            behavior_ratio: BehaviorRatio::OutOfSupport,
            seq_logprob_current: 0.0,
            seq_logprob_rollout: 0.0,
        }
    }

    /// Offline inputs: a demonstration's reward with both reward groups available.
    pub fn offline(
        reward: f64,
        group_rewards_on: Vec<f64>,
        group_rewards_off: Vec<f64>,
    ) -> AdvantageInputs {
        AdvantageInputs {
            reward,
            group_rewards_on,
            group_rewards_off,
            behavior_ratio: BehaviorRatio::OutOfSupport,
            seq_logprob_current: 0.0,
            seq_logprob_rollout: 0.0,
        }
    }

    pub fn with_behavior_ratio(mut self, ratio: BehaviorRatio) -> AdvantageInputs {
        self.behavior_ratio = ratio;
        self
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// An all-equal group ranks nothing, so group-centered advantages are defined as exactly
/// zero. Computing `reward - mean` instead would leave one-ulp rounding noise whenever
/// the shared value has no exact binary representation.
fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Population standard deviation (divide by the group size, not size - 1).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Computes the per-trajectory advantage for `kind`.
pub fn advantage(kind: AdvantageKind, inputs: &AdvantageInputs) -> Result<f64, EstimatorError> {
    match kind {
        AdvantageKind::SftOne => Ok(1.0),
        AdvantageKind::FixedSign => Ok(if inputs.reward > 0.0 { 1.0 } else { -1.0 }),
        AdvantageKind::Grpo => {
            let group = &inputs.group_rewards_on;
            if group.is_empty() {
                return Err(EstimatorError::EmptyGroup { kind: "grpo" });
            }
            if all_equal(group) {
                return Ok(0.0);
            }
            Ok((inputs.reward - mean(group)) / (population_std(group) + STD_EPSILON))
        }
        AdvantageKind::DrGrpo => {
            let group = &inputs.group_rewards_on;
            if group.is_empty() {
                return Err(EstimatorError::EmptyGroup { kind: "dr_grpo" });
            }
            if all_equal(group) {
                return Ok(0.0);
            }
            Ok(inputs.reward - mean(group))
        }
        AdvantageKind::SrftUnion => {
            let union: Vec<f64> = inputs
                .group_rewards_on
                .iter()
                .chain(&inputs.group_rewards_off)
                .copied()
                .collect();
            if union.is_empty() {
                return Err(EstimatorError::EmptyGroup { kind: "srft_union" });
            }
            if all_equal(&union) {
                return Ok(0.0);
            }
            Ok((inputs.reward - mean(&union)) / (population_std(&union) + STD_EPSILON))
        }
        AdvantageKind::Unified { mu } => {
            Ok(inputs.reward + mu * inputs.behavior_ratio.value_or_zero())
        }
        AdvantageKind::TrustRegion { lambda, mu } => Ok(inputs.reward
            - lambda * (inputs.seq_logprob_current - inputs.seq_logprob_rollout)
            + mu * inputs.behavior_ratio.value_or_zero()),
    }
}

/// The denominator probability for one token under the chosen reference.
pub fn reference_prob(kind: RefKind, record: &TokenRecord) -> f64 {
    match kind {
        RefKind::Current => record.p_current,
        RefKind::Rollout => record.p_rollout,
        RefKind::Unit => 1.0,
        RefKind::GspoGeometric => {
            let exponent =
                (record.seq_logprob_rollout - record.seq_logprob_current) / record.seq_len as f64;
            record.p_current * exponent.exp()
        }
    }
}

/// Mask decision for one token: `(weight, dropped)`.
pub fn stabilization_mask(kind: MaskKind, record: &TokenRecord, advantage: f64) -> (f64, bool) {
    match kind {
        MaskKind::None => (1.0, false),
        MaskKind::PpoClip { eps_low, eps_high } => {
            let ratio = record.p_current / record.p_rollout;
            let dropped = (ratio > 1.0 + eps_high && advantage > 0.0)
                || (ratio < 1.0 - eps_low && advantage < 0.0);
            (if dropped { 0.0 } else { 1.0 }, dropped)
        }
        MaskKind::CispoClamp { eps_low, eps_high } => {
            let ratio = record.p_current / record.p_rollout;
            let clamped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
            (clamped / ratio, false)
        }
        MaskKind::GspoSeqClip { eps } => {
            let seq_ratio = ((record.seq_logprob_current - record.seq_logprob_rollout)
                / record.seq_len as f64)
                .exp();
            let dropped = seq_ratio < 1.0 - eps || seq_ratio > 1.0 + eps;
            (if dropped { 0.0 } else { 1.0 }, dropped)
        }
    }
}

/// Gradient-shaping weight as a function of the token's current probability.
pub fn shaping_weight(kind: Shaping, p_current: f64) -> f64 {
    match kind {
        Shaping::Identity => 1.0,
        Shaping::Luffy { gamma } => gamma / ((p_current + gamma) * (p_current + gamma)),
    }
}

/// One trajectory prepared for the estimator: token records plus advantage inputs.
#[derive(Debug, Clone)]
pub struct EstimatorBatchItem {
    pub records: Vec<TokenRecord>,
    pub inputs: AdvantageInputs,
}

fn build_records(
    params: &PolicyParams,
    question: &[TokenId],
    tokens: &[TokenId],
    rollout_probs: &[f64],
    seq_logprob_rollout: f64,
) -> Result<Vec<TokenRecord>, EstimatorError> {
    let mut history: Vec<TokenId> = question.to_vec();
    let mut current_probs = Vec::with_capacity(tokens.len());
    let mut contexts = Vec::with_capacity(tokens.len());
    let mut seq_logprob_current = 0.0;
    for &tok in tokens {
        let ctx = params.context_for(&history);
        let dist = token_distribution(params, &ctx)?;
        let p = dist[tok];
        seq_logprob_current += p.max(PROB_FLOOR).ln();
        current_probs.push(p);
        contexts.push(ctx);
        history.push(tok);
    }
    let seq_len = tokens.len();
    Ok(tokens
        .iter()
        .zip(contexts)
        .zip(current_probs)
        .zip(rollout_probs)
        .map(|(((&token, context), p_current), &p_rollout)| TokenRecord {
            context,
            token,
            p_current,
            p_rollout,
            seq_len,
            seq_logprob_current,
            seq_logprob_rollout,
        })
        .collect())
}

impl EstimatorBatchItem {
    /// Prepares a sampled trajectory: rollout probabilities come from sampling time.
    pub fn from_trajectory(
        params: &PolicyParams,
        trajectory: &Trajectory,
        inputs: AdvantageInputs,
    ) -> Result<EstimatorBatchItem, EstimatorError> {
        let records = build_records(
            params,
            &trajectory.question,
            &trajectory.tokens,
            &trajectory.gen_token_probs,
            trajectory.gen_logprob_sum,
        )?;
        Ok(Self::finish(records, inputs))
    }

    /// Prepares a token sequence whose rollout probabilities are recomputed under an
    /// explicit rollout policy (offline data, or oracle checks at arbitrary parameters).
    pub fn from_params_pair(
        params_current: &PolicyParams,
        params_rollout: &PolicyParams,
        question: &[TokenId],
        tokens: &[TokenId],
        inputs: AdvantageInputs,
    ) -> Result<EstimatorBatchItem, EstimatorError> {
        let mut history: Vec<TokenId> = question.to_vec();
        let mut rollout_probs = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let ctx = params_rollout.context_for(&history);
            let dist = token_distribution(params_rollout, &ctx)?;
            rollout_probs.push(dist[tok]);
            history.push(tok);
        }
        let seq_logprob_rollout = sequence_log_prob(params_rollout, question, tokens)?;
        let records =
            build_records(params_current, question, tokens, &rollout_probs, seq_logprob_rollout)?;
        Ok(Self::finish(records, inputs))
    }

    fn finish(records: Vec<TokenRecord>, mut inputs: AdvantageInputs) -> EstimatorBatchItem {
        if let Some(first) = records.first() {
            inputs.seq_logprob_current = first.seq_logprob_current;
            inputs.seq_logprob_rollout = first.seq_logprob_rollout;
        }
        EstimatorBatchItem { records, inputs }
    }
}

/// How token contributions are aggregated within a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthNorm {
    /// Divide by the trajectory length (the training convention).
    MeanOverTokens,
    /// Plain sum (the convention of exact objective gradients).
    SumOverTokens,
}

/// Adds `scale * grad pi(token | ctx)` into `out` without materializing the vector.
fn accumulate_prob_grad(
    out: &mut GradientVector,
    params: &PolicyParams,
    context: &Context,
    token: TokenId,
    scale: f64,
) -> Result<(), EstimatorError> {
    let dist = token_distribution(params, context)?;
    let p_tok = dist[token];
    let f_dim = params.feature_dim();
    let slice = out.as_mut_slice();
    for (row, &p_row) in dist.iter().enumerate() {
        let indicator = if row == token { 1.0 } else { 0.0 };
        let coef = scale * p_tok * (indicator - p_row);
        let base = row * f_dim;
        for feat in context.active_features() {
            slice[base + feat] += coef;
        }
    }
    Ok(())
}

/// The masked, shaped, reference-normalized gradient contribution of one trajectory.
pub fn trajectory_estimand(
    params: &PolicyParams,
    item: &EstimatorBatchItem,
    components: &EstimatorComponents,
    norm: LengthNorm,
) -> Result<GradientVector, EstimatorError> {
    let mut out = GradientVector::zeros(params.param_count());
    accumulate_trajectory(&mut out, params, item, components, norm, 1.0)?;
    Ok(out)
}

fn accumulate_trajectory(
    out: &mut GradientVector,
    params: &PolicyParams,
    item: &EstimatorBatchItem,
    components: &EstimatorComponents,
    norm: LengthNorm,
    outer_scale: f64,
) -> Result<(), EstimatorError> {
    if item.records.is_empty() {
        return Ok(());
    }
    let adv = advantage(components.advantage, &item.inputs)?;
    let length_scale = match norm {
        LengthNorm::MeanOverTokens => 1.0 / item.records.len() as f64,
        LengthNorm::SumOverTokens => 1.0,
    };
    for record in &item.records {
        let (mask_weight, dropped) = stabilization_mask(components.mask, record, adv);
        if dropped || mask_weight == 0.0 {
            continue;
        }
        let shape = shaping_weight(components.shaping, record.p_current);
        let denom = reference_prob(components.reference, record);
        let scale = outer_scale * length_scale * mask_weight * shape * adv / denom;
        if scale == 0.0 {
            continue;
        }
        accumulate_prob_grad(out, params, &record.context, record.token, scale)?;
    }
    Ok(())
}

/// Batch gradient: per-trajectory token means, then the mean over trajectories, accumulated
/// in batch order so results are bit-reproducible.
pub fn unified_gradient(
    params: &PolicyParams,
    batch: &[EstimatorBatchItem],
    components: &EstimatorComponents,
) -> Result<GradientVector, EstimatorError> {
    let mut out = GradientVector::zeros(params.param_count());
    if batch.is_empty() {
        return Ok(out);
    }
    let batch_scale = 1.0 / batch.len() as f64;
    for item in batch {
        accumulate_trajectory(&mut out, params, item, components, LengthNorm::MeanOverTokens, batch_scale)?;
    }
    Ok(out)
}

/// Names of the built-in component selections, in presentation order.
pub const PRESET_NAMES: [&str; 9] =
    ["sft", "reinforce", "ppo", "grpo", "dr_grpo", "cispo", "gspo", "srft_off", "luffy_off"];

impl EstimatorComponents {
    /// Looks up a named component selection. Clip bounds default to 0.2 on each side and
    /// the shaping constant to 0.1 where the source algorithms leave them free.
    pub fn preset(name: &str) -> Option<EstimatorComponents> {
        let ppo_clip = MaskKind::PpoClip { eps_low: 0.2, eps_high: 0.2 };
        let c = match name {
            "sft" => EstimatorComponents {
                mask: MaskKind::None,
                reference: RefKind::Current,
                advantage: AdvantageKind::SftOne,
                shaping: Shaping::Identity,
            },
            "reinforce" => EstimatorComponents {
                mask: MaskKind::None,
                reference: RefKind::Current,
                advantage: AdvantageKind::FixedSign,
                shaping: Shaping::Identity,
            },
            "ppo" => EstimatorComponents {
                mask: ppo_clip,
                reference: RefKind::Rollout,
                advantage: AdvantageKind::Unified { mu: 0.0 },
                shaping: Shaping::Identity,
            },
            "grpo" => EstimatorComponents {
                mask: ppo_clip,
                reference: RefKind::Rollout,
                advantage: AdvantageKind::Grpo,
                shaping: Shaping::Identity,
            },
            "dr_grpo" => EstimatorComponents {
                mask: ppo_clip,
                reference: RefKind::Rollout,
                advantage: AdvantageKind::DrGrpo,
                shaping: Shaping::Identity,
            },
            "cispo" => EstimatorComponents {
                mask: MaskKind::CispoClamp { eps_low: 0.2, eps_high: 0.2 },
                reference: RefKind::Rollout,
                advantage: AdvantageKind::Grpo,
                shaping: Shaping::Identity,
            },
            "gspo" => EstimatorComponents {
                mask: MaskKind::GspoSeqClip { eps: 0.2 },
                reference: RefKind::GspoGeometric,
                advantage: AdvantageKind::Grpo,
                shaping: Shaping::Identity,
            },
            "srft_off" => EstimatorComponents {
                mask: MaskKind::None,
                reference: RefKind::Unit,
                advantage: AdvantageKind::SrftUnion,
                shaping: Shaping::Identity,
            },
            "luffy_off" => EstimatorComponents {
                mask: MaskKind::None,
                reference: RefKind::Unit,
                advantage: AdvantageKind::SrftUnion,
                shaping: Shaping::Luffy { gamma: 0.1 },
            },
            _ => return None,
        };
        Some(c)
    }
}
