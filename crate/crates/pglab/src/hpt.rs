//! Hybrid post-training: per-question routing between SFT and RL updates.
//!
//! Each step samples a group of rollouts for the question, scores them with the task's
//! verifier, and converts the mean score into a binary routing decision: questions the
//! policy all-but-fails get a supervised update on the demonstration, questions it can
//! already sometimes solve get the group-normalized RL update over the rollouts it just
//! drew. Exactly one branch contributes gradient per question per step.

use crate::algorithms::sft_loss_gradient;
use crate::estimator::{
    advantage, unified_gradient, AdvantageInputs, EstimatorBatchItem, EstimatorComponents,
    EstimatorError,
};
use crate::policy::{
    mean_token_entropy, sample_trajectory, GradientVector, PolicyError, PolicyParams, TokenId,
    Trajectory,
};
use crate::tasks::{DemonstrationRecord, Task};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HptError {
    #[error("scores must be non-empty")]
    EmptyScores,
    #[error("gate config invalid: {0}")]
    InvalidGate(String),
    #[error("no demonstration available for question {question:?}")]
    MissingDemonstration { question: Vec<TokenId> },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Algorithm(#[from] crate::algorithms::AlgorithmError),
}

/// Which update a question receives this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Sft,
    Rl,
}

/// How the per-question correct count is turned into a branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateRule {
    /// SFT when at most `gamma` of the `n` rollouts verify.
    Switch,
    /// Explicit routing table indexed by correct count (length `n + 1`).
    Table(Vec<Branch>),
}

/// Routing configuration: rollouts per question and the failure threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateConfig {
    gamma: usize,
    n: usize,
    rule: GateRule,
}

impl GateConfig {
    /// `gamma` counts correct rollouts: a question falls back to SFT when its correct
    /// count is at most `gamma`. Requires `gamma < n`.
    pub fn new(gamma: usize, n: usize) -> Result<GateConfig, HptError> {
        if n == 0 {
            return Err(HptError::InvalidGate("need at least one rollout".into()));
        }
        if gamma >= n {
            return Err(HptError::InvalidGate(format!(
                "gamma {gamma} must be below the rollout count {n}"
            )));
        }
        Ok(GateConfig { gamma, n, rule: GateRule::Switch })
    }

    /// Replaces the switch rule with an explicit per-count table (length `n + 1`).
    pub fn with_table(mut self, table: Vec<Branch>) -> Result<GateConfig, HptError> {
        if table.len() != self.n + 1 {
            return Err(HptError::InvalidGate(format!(
                "routing table needs {} entries (counts 0..={}), got {}",
                self.n + 1,
                self.n,
                table.len()
            )));
        }
        self.rule = GateRule::Table(table);
        Ok(self)
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }
    pub fn n(&self) -> usize {
        self.n
    }
}

impl Default for GateConfig {
    /// The strictest gate: SFT only on questions where every rollout fails.
    fn default() -> GateConfig {
        GateConfig::new(0, 8).expect("default gate is valid")
    }
}

/// One question's sampled rollouts with their verifier scores.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub question: Vec<TokenId>,
    pub trajectories: Vec<Trajectory>,
    pub scores: Vec<u8>,
    pub p: f64,
}

impl RolloutGroup {
    /// Draws `n` rollouts for `question` at `temperature` and verifies each.
    pub fn sample(
        params: &PolicyParams,
        task: &dyn Task,
        question: &[TokenId],
        n: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<RolloutGroup, HptError> {
        let max_len = task.max_response_len();
        let trajectories: Vec<Trajectory> = (0..n)
            .map(|_| sample_trajectory(params, question, max_len, temperature, rng))
            .collect();
        let scores: Vec<u8> =
            trajectories.iter().map(|t| task.verify_tokens(question, &t.tokens)).collect();
        let p = performance(&scores)?;
        Ok(RolloutGroup { question: question.to_vec(), trajectories, scores, p })
    }
}

/// The binary feedback coefficients and the branch they select.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingDecision {
    /// Weight on the RL loss (0 or 1).
    pub alpha: f64,
    /// Weight on the SFT loss (0 or 1).
    pub beta: f64,
    pub branch: Branch,
}

/// Mean verifier score of a rollout group.
pub fn performance(scores: &[u8]) -> Result<f64, HptError> {
    if scores.is_empty() {
        return Err(HptError::EmptyScores);
    }
    Ok(scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64)
}

/// Routes a question from its mean rollout score. The score is converted back to a
/// correct count (`round(p * n)`) so the gate compares integers, immune to float noise.
pub fn feedback_coefficients(p: f64, cfg: &GateConfig) -> RoutingDecision {
    let correct_count = (p * cfg.n as f64).round() as usize;
    let branch = match &cfg.rule {
        GateRule::Switch => {
            if correct_count <= cfg.gamma {
                Branch::Sft
            } else {
                Branch::Rl
            }
        }
        GateRule::Table(table) => table[correct_count.min(table.len() - 1)],
    };
    match branch {
        Branch::Sft => RoutingDecision { alpha: 0.0, beta: 1.0, branch },
        Branch::Rl => RoutingDecision { alpha: 1.0, beta: 0.0, branch },
    }
}

/// Demonstration lookup keyed by the exact question token sequence.
#[derive(Debug, Clone, Default)]
pub struct DemoIndex {
    by_question: HashMap<Vec<TokenId>, Vec<TokenId>>,
}

impl DemoIndex {
    pub fn from_records(records: &[DemonstrationRecord]) -> DemoIndex {
        let mut by_question = HashMap::new();
        for rec in records {
            by_question.insert(rec.question.clone(), rec.demonstration.clone());
        }
        DemoIndex { by_question }
    }

    /// Index answering every question with the task's own demonstrator.
    pub fn from_task(task: &dyn Task, questions: &[Vec<TokenId>]) -> DemoIndex {
        let mut by_question = HashMap::new();
        for q in questions {
            by_question.insert(q.clone(), task.demonstrate(q));
        }
        DemoIndex { by_question }
    }

    pub fn get(&self, question: &[TokenId]) -> Option<&[TokenId]> {
        self.by_question.get(question).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_question.len()
    }
    pub fn is_empty(&self) -> bool {
        self.by_question.is_empty()
    }
}

/// Per-question log entry, one JSON line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub question_id: u64,
    #[serde(rename = "P")]
    pub p: f64,
    pub branch: Branch,
    pub reward_mean: f64,
    pub entropy_mean: f64,
    pub resp_len_mean: f64,
}

/// Behavioral knobs of one routed step.
#[derive(Debug, Clone)]
pub struct HptSettings {
    pub gate: GateConfig,
    /// Estimator components for the RL branch (the group-normalized clipped preset by
    /// default).
    pub rl_components: EstimatorComponents,
    pub temperature: f64,
}

impl Default for HptSettings {
    fn default() -> HptSettings {
        HptSettings {
            gate: GateConfig::default(),
            rl_components: EstimatorComponents::preset("grpo").expect("built-in preset"),
            temperature: 1.0,
        }
    }
}

/// Loss gradient of the RL branch over an already-sampled group: advantages from the
/// group's scores, the estimator over its trajectories, negated into descent direction.
pub fn rl_loss_gradient(
    params: &PolicyParams,
    group: &RolloutGroup,
    components: &EstimatorComponents,
) -> Result<GradientVector, HptError> {
    let group_rewards: Vec<f64> = group.scores.iter().map(|&s| s as f64).collect();
    let mut items = Vec::with_capacity(group.trajectories.len());
    for (traj, &score) in group.trajectories.iter().zip(&group.scores) {
        let inputs = AdvantageInputs::on_policy(score as f64, group_rewards.clone());
        items.push(EstimatorBatchItem::from_trajectory(params, traj, inputs)?);
    }
    let mut grad = unified_gradient(params, &items, components)?;
    grad.scale(-1.0);
    Ok(grad)
}

/// Loss gradient of the SFT branch: the closed-form gradient on the single demonstration.
pub fn sft_branch_gradient(
    params: &PolicyParams,
    question: &[TokenId],
    demonstration: &[TokenId],
) -> Result<GradientVector, HptError> {
    let record = DemonstrationRecord {
        question: question.to_vec(),
        demonstration: demonstration.to_vec(),
    };
    Ok(sft_loss_gradient(params, std::slice::from_ref(&record))?)
}

/// One routed question: sample the group, gate on its performance, and return the loss
/// gradient of whichever branch the gate selected, plus the log record.
pub fn hpt_step(
    params: &PolicyParams,
    question: &[TokenId],
    task: &dyn Task,
    demos: &DemoIndex,
    settings: &HptSettings,
    step: u64,
    question_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(GradientVector, StepRecord), HptError> {
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
            sft_branch_gradient(params, question, demo)?
        }
    };
    let n = group.trajectories.len() as f64;
    let mut entropy_total = 0.0;
    let mut len_total = 0.0;
    for traj in &group.trajectories {
        entropy_total += mean_token_entropy(params, question, &traj.tokens)?;
        len_total += traj.tokens.len() as f64;
    }
    let record = StepRecord {
        step,
        question_id,
        p: group.p,
        branch: decision.branch,
        reward_mean: group.p,
        entropy_mean: entropy_total / n,
        resp_len_mean: len_total / n,
    };
    Ok((grad, record))
}

/// Group-normalized advantages of a score vector — a convenience for tests and reports.
pub fn group_advantages(scores: &[u8]) -> Result<Vec<f64>, HptError> {
    let rewards: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    let mut advs = Vec::with_capacity(rewards.len());
    for &r in &rewards {
        let inputs = AdvantageInputs::on_policy(r, rewards.clone());
        advs.push(advantage(crate::estimator::AdvantageKind::Grpo, &inputs)?);
    }
    Ok(advs)
}
