//! Differential testing of every estimator preset against its loss-based oracle.
//!
//! Each trial builds a small random instance — a 5-token vocabulary, window 2 (50
//! parameters), a rollout policy perturbed away from the evaluation point, a handful of
//! sampled trajectories with mixed rewards — then compares `unified_gradient` with the
//! negated finite-difference gradient of the preset's independent loss. Instances whose
//! importance ratios land within a small margin of a clip boundary are redrawn: the
//! clipped losses are non-differentiable exactly at the boundary, so finite differences
//! are only trustworthy away from it.

use super::{
    cispo_frozen_coefficients, cispo_surrogate_loss, finite_difference_grad, gspo_keep_mask,
    gspo_surrogate_loss, luffy_offline_loss, ppo_style_loss, reinforce_loss, rel_error,
    response_token_probs, sft_loss, sft_loss_gradient, srft_offline_loss, AlgorithmError,
};
use crate::estimator::{
    advantage, unified_gradient, AdvantageInputs, AdvantageKind, EstimatorBatchItem,
    EstimatorComponents, RefKind,
};
use crate::policy::{sample_trajectory, PolicyParams, Trajectory, Vocabulary};
use crate::tasks::DemonstrationRecord;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step shared by all oracle comparisons.
pub const FD_STEP: f64 = 1e-5;
/// Instances closer than this to a clip boundary are redrawn.
pub const CLIP_MARGIN: f64 = 1e-3;

const CLIP_LOW: f64 = 0.2;
const CLIP_HIGH: f64 = 0.2;
const LUFFY_GAMMA: f64 = 0.1;

/// Outcome of checking one preset over a number of random instances.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub preset: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// SFT only: worst relative gap between the estimator and the closed-form gradient,
    /// held to a far tighter bound than the finite-difference comparison.
    pub closed_form_gap: Option<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
            && self.closed_form_gap.map_or(true, |gap| gap <= 1e-10)
    }
}

struct Instance {
    params: PolicyParams,
    rollouts: Vec<Trajectory>,
    rewards: Vec<f64>,
}

fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let vocab = Vocabulary::new(5, 1, 2, 0).unwrap();
    let mut p = PolicyParams::zeros(vocab, 2);
    for w in p.weights_mut() {
        *w = scale * (2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0);
    }
    p
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Instance {
    let params = random_params(rng, 1.0);
    let mut params_old = params.clone();
    for w in params_old.weights_mut() {
        *w += rng.random_range(-0.1..0.1);
    }
    let question = vec![1usize, rng.random_range(0..5)];
    let n_traj = rng.random_range(2..=4);
    let rollouts: Vec<Trajectory> = (0..n_traj)
        .map(|_| sample_trajectory(&params_old, &question, 5, 1.0, rng))
        .collect();
    // Alternating rewards keep every group mixed, so normalized advantages are nonzero.
    let rewards: Vec<f64> = (0..n_traj).map(|j| (j % 2 == 0) as u8 as f64).collect();
    Instance { params, rollouts, rewards }
}

fn token_ratio_margins_ok(instance: &Instance) -> Result<bool, AlgorithmError> {
    for traj in &instance.rollouts {
        let probs = response_token_probs(&instance.params, &traj.question, &traj.tokens)?;
        for (p_cur, p_gen) in probs.iter().zip(&traj.gen_token_probs) {
            let ratio = p_cur / p_gen;
            if (ratio - (1.0 - CLIP_LOW)).abs() <= CLIP_MARGIN
                || (ratio - (1.0 + CLIP_HIGH)).abs() <= CLIP_MARGIN
            {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn seq_ratio_margins_ok(instance: &Instance) -> Result<bool, AlgorithmError> {
    let keep_low = 1.0 - CLIP_LOW;
    let keep_high = 1.0 + CLIP_HIGH;
    for traj in &instance.rollouts {
        let probs = response_token_probs(&instance.params, &traj.question, &traj.tokens)?;
        let logprob: f64 = probs.iter().map(|&p| p.max(crate::policy::PROB_FLOOR).ln()).sum();
        let seq_ratio = ((logprob - traj.gen_logprob_sum) / traj.tokens.len() as f64).exp();
        if (seq_ratio - keep_low).abs() <= CLIP_MARGIN
            || (seq_ratio - keep_high).abs() <= CLIP_MARGIN
        {
            return Ok(false);
        }
    }
    Ok(true)
}

fn demos_of(instance: &Instance) -> Vec<DemonstrationRecord> {
    instance
        .rollouts
        .iter()
        .map(|t| DemonstrationRecord { question: t.question.clone(), demonstration: t.tokens.clone() })
        .collect()
}

fn group_advantages(
    kind: AdvantageKind,
    rewards: &[f64],
) -> Result<(Vec<AdvantageInputs>, Vec<f64>), AlgorithmError> {
    let mut inputs_list = Vec::with_capacity(rewards.len());
    let mut values = Vec::with_capacity(rewards.len());
    for &r in rewards {
        let inputs = AdvantageInputs::on_policy(r, rewards.to_vec());
        values.push(advantage(kind, &inputs)?);
        inputs_list.push(inputs);
    }
    Ok((inputs_list, values))
}

fn offline_advantages(
    rewards_off: &[f64],
    rewards_on: &[f64],
) -> Result<(Vec<AdvantageInputs>, Vec<f64>), AlgorithmError> {
    let mut inputs_list = Vec::with_capacity(rewards_off.len());
    let mut values = Vec::with_capacity(rewards_off.len());
    for &r in rewards_off {
        let inputs = AdvantageInputs::offline(r, rewards_on.to_vec(), rewards_off.to_vec());
        values.push(advantage(AdvantageKind::SrftUnion, &inputs)?);
        inputs_list.push(inputs);
    }
    Ok((inputs_list, values))
}

fn on_policy_items(
    instance: &Instance,
    inputs_list: &[AdvantageInputs],
) -> Result<Vec<EstimatorBatchItem>, AlgorithmError> {
    instance
        .rollouts
        .iter()
        .zip(inputs_list)
        .map(|(traj, inputs)| {
            EstimatorBatchItem::from_trajectory(&instance.params, traj, inputs.clone())
                .map_err(AlgorithmError::from)
        })
        .collect()
}

/// One preset, one instance: relative error between the estimator and its oracle, plus
/// the closed-form gap where one exists.
fn run_trial(
    preset: &str,
    components: &EstimatorComponents,
    instance: &Instance,
) -> Result<(f64, Option<f64>), AlgorithmError> {
    let params = &instance.params;
    let rollouts = &instance.rollouts;
    let rewards = &instance.rewards;
    match preset {
        "sft" => {
            let demos = demos_of(instance);
            let inputs_list: Vec<AdvantageInputs> =
                rewards.iter().map(|_| AdvantageInputs::on_policy(1.0, vec![1.0])).collect();
            let items = on_policy_items(instance, &inputs_list)?;
            let est = unified_gradient(params, &items, components)?;
            let fd = finite_difference_grad(
                |p| sft_loss(p, &demos).unwrap().value,
                params,
                FD_STEP,
            )?;
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            let mut neg_closed = sft_loss_gradient(params, &demos)?;
            neg_closed.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), Some(rel_error(&est, &neg_closed))))
        }
        "reinforce" => {
            let advs: Vec<f64> = rewards.iter().map(|&r| if r > 0.0 { 1.0 } else { -1.0 }).collect();
            let inputs_list: Vec<AdvantageInputs> =
                rewards.iter().map(|&r| AdvantageInputs::on_policy(r, vec![r])).collect();
            let items = on_policy_items(instance, &inputs_list)?;
            let est = unified_gradient(params, &items, components)?;
            let fd = finite_difference_grad(
                |p| reinforce_loss(p, rollouts, &advs).unwrap().value,
                params,
                FD_STEP,
            )?;
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), None))
        }
        "ppo" | "grpo" | "dr_grpo" => {
            let kind = match preset {
                "ppo" => AdvantageKind::Unified { mu: 0.0 },
                "grpo" => AdvantageKind::Grpo,
                _ => AdvantageKind::DrGrpo,
            };
            let (inputs_list, advs) = group_advantages(kind, rewards)?;
            let items = on_policy_items(instance, &inputs_list)?;
            let est = unified_gradient(params, &items, components)?;
            let fd = finite_difference_grad(
                |p| {
                    ppo_style_loss(p, rollouts, &advs, RefKind::Rollout, CLIP_LOW, CLIP_HIGH)
                        .unwrap()
                        .value
                },
                params,
                FD_STEP,
            )?;
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), None))
        }
        "cispo" => {
            let (inputs_list, advs) = group_advantages(AdvantageKind::Grpo, rewards)?;
            let items = on_policy_items(instance, &inputs_list)?;
            let est = unified_gradient(params, &items, components)?;
            let coefs = cispo_frozen_coefficients(params, rollouts, &advs, CLIP_LOW, CLIP_HIGH)?;
            let fd = finite_difference_grad(
                |p| cispo_surrogate_loss(p, rollouts, &coefs).unwrap().value,
                params,
                FD_STEP,
            )?;
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), None))
        }
        "gspo" => {
            let (inputs_list, advs) = group_advantages(AdvantageKind::Grpo, rewards)?;
            let items = on_policy_items(instance, &inputs_list)?;
            let est = unified_gradient(params, &items, components)?;
            let keep = gspo_keep_mask(params, rollouts, CLIP_LOW)?;
            let fd = finite_difference_grad(
                |p| gspo_surrogate_loss(p, rollouts, &advs, &keep).unwrap().value,
                params,
                FD_STEP,
            )?;
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), None))
        }
        "srft_off" | "luffy_off" => {
            // The sampled trajectories play the role of offline expert data; a fixed
            // mixed on-policy reward group completes the union normalization.
            let demos = demos_of(instance);
            let rewards_on = [1.0, 0.0, 0.0];
            let (inputs_list, advs) = offline_advantages(rewards, &rewards_on)?;
            let items: Vec<EstimatorBatchItem> = rollouts
                .iter()
                .zip(&inputs_list)
                .map(|(traj, inputs)| {
                    EstimatorBatchItem::from_params_pair(
                        params,
                        params,
                        &traj.question,
                        &traj.tokens,
                        inputs.clone(),
                    )
                })
                .collect::<Result<_, _>>()?;
            let est = unified_gradient(params, &items, components)?;
            let fd = if preset == "srft_off" {
                finite_difference_grad(
                    |p| srft_offline_loss(p, &demos, &advs).unwrap().value,
                    params,
                    FD_STEP,
                )?
            } else {
                finite_difference_grad(
                    |p| luffy_offline_loss(p, &demos, &advs, LUFFY_GAMMA).unwrap().value,
                    params,
                    FD_STEP,
                )?
            };
            let mut neg_fd = fd;
            neg_fd.scale(-1.0);
            Ok((rel_error(&est, &neg_fd), None))
        }
        other => unreachable!("preset `{other}` resolved but has no oracle wired"),
    }
}

/// Runs `trials` random instances of `preset` against its oracle.
pub fn check_preset(
    preset: &str,
    trials: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, AlgorithmError> {
    let components = EstimatorComponents::preset(preset).ok_or(
        AlgorithmError::UnsupportedReference { found: "unknown preset" },
    )?;
    let needs_token_margin = matches!(preset, "ppo" | "grpo" | "dr_grpo");
    let needs_seq_margin = preset == "gspo";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut worst_closed_form: Option<f64> = None;
    for trial in 0..trials {
        let mut attempts = 0;
        let instance = loop {
            let candidate = draw_instance(&mut rng);
            let ok = (!needs_token_margin || token_ratio_margins_ok(&candidate)?)
                && (!needs_seq_margin || seq_ratio_margins_ok(&candidate)?);
            if ok {
                break candidate;
            }
            attempts += 1;
            if attempts > 200 {
                return Err(AlgorithmError::MarginExhausted {
                    preset: preset.to_string(),
                    trial,
                });
            }
        };
        let (err, closed) = run_trial(preset, &components, &instance)?;
        max_rel_err = max_rel_err.max(err);
        if let Some(gap) = closed {
            worst_closed_form =
                Some(worst_closed_form.map_or(gap, |previous: f64| previous.max(gap)));
        }
    }
    Ok(GradCheckReport {
        preset: preset.to_string(),
        trials,
        max_rel_err,
        tolerance,
        closed_form_gap: worst_closed_form,
    })
}
