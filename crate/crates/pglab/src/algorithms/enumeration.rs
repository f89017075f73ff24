//! Exact expectations by enumerating a small trajectory space.
//!
//! On a vocabulary of a few tokens and a short length cap the set of possible responses
//! is tiny, so expectations, KL terms and estimator means can be computed exactly — no
//! sampling noise, no confidence intervals. These evaluators are the ground truth for
//! the objective-gradient and score-identity checks.

use super::AlgorithmError;
use crate::estimator::{
    trajectory_estimand, AdvantageInputs, BehaviorRatio, EstimatorBatchItem,
    EstimatorComponents, LengthNorm,
};
use crate::policy::{
    sequence_log_prob, token_distribution, GradientVector, PolicyParams, TokenId, Trajectory,
    Vocabulary,
};
use crate::tasks::{behavior_log_prob, BehaviorLogProb, BehaviorPolicy, Task};
use rand_chacha::ChaCha8Rng;

/// Refuse enumeration when the naive sequence-space estimate `V^max_len` crosses this.
pub const ENUMERATION_LIMIT: f64 = 1e6;

fn ensure_enumerable(vocab_size: usize, max_len: usize) -> Result<(), AlgorithmError> {
    let trajectories = (vocab_size as f64).powi(max_len as i32);
    if trajectories > ENUMERATION_LIMIT {
        Err(AlgorithmError::SpaceTooLarge { trajectories, limit: ENUMERATION_LIMIT })
    } else {
        Ok(())
    }
}

/// Every response the sampler can produce: token sequences over the full vocabulary in
/// which EOS appears only at the end, terminated either by EOS or by hitting `max_len`.
/// Lexicographic order, so the listing is deterministic.
pub fn enumerate_trajectories(vocab: &Vocabulary, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut prefix: Vec<TokenId> = Vec::new();
    fn extend(
        vocab: &Vocabulary,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        out: &mut Vec<Vec<TokenId>>,
    ) {
        for tok in 0..vocab.size() {
            prefix.push(tok);
            if tok == vocab.eos() || prefix.len() == max_len {
                out.push(prefix.clone());
            } else {
                extend(vocab, max_len, prefix, out);
            }
            prefix.pop();
        }
    }
    extend(vocab, max_len, &mut prefix, &mut out);
    out
}

/// Probability of generating exactly `tokens` after `question`: the product of the true
/// (unfloored) per-token probabilities.
pub fn trajectory_prob(
    params: &PolicyParams,
    question: &[TokenId],
    tokens: &[TokenId],
) -> Result<f64, AlgorithmError> {
    let mut history: Vec<TokenId> = question.to_vec();
    let mut prob = 1.0;
    for &tok in tokens {
        let ctx = params.context_for(&history);
        prob *= token_distribution(params, &ctx)?[tok];
        history.push(tok);
    }
    Ok(prob)
}

fn kl_behavior_vs_current(
    params: &PolicyParams,
    task: &dyn Task,
    behavior: &BehaviorPolicy,
    question: &[TokenId],
    max_len: usize,
) -> Result<f64, AlgorithmError> {
    match behavior {
        BehaviorPolicy::Demonstrator => {
            let demo = task.demonstrate(question);
            Ok(-trajectory_prob(params, question, &demo)?.ln())
        }
        BehaviorPolicy::Explicit(beta) => {
            let mut kl = 0.0;
            for tokens in enumerate_trajectories(task.vocabulary(), max_len) {
                let p_beta = trajectory_prob(beta, question, &tokens)?;
                let p_theta = trajectory_prob(params, question, &tokens)?;
                kl += p_beta * (p_beta.ln() - p_theta.ln());
            }
            Ok(kl)
        }
    }
}

/// The KL-regularized success objective, exactly:
/// mean over `questions` of `sum_tau pi(tau|q) r(tau|q) - mu * KL(pi_beta || pi_theta)`.
pub fn common_objective_exact(
    params: &PolicyParams,
    task: &dyn Task,
    behavior: &BehaviorPolicy,
    questions: &[Vec<TokenId>],
    mu: f64,
    max_len: usize,
) -> Result<f64, AlgorithmError> {
    ensure_enumerable(task.vocabulary().size(), max_len)?;
    if questions.is_empty() {
        return Err(AlgorithmError::EmptyInput { what: "questions" });
    }
    let space = enumerate_trajectories(task.vocabulary(), max_len);
    let mut total = 0.0;
    for question in questions {
        let mut expected_reward = 0.0;
        for tokens in &space {
            let reward = task.verify_tokens(question, tokens) as f64;
            if reward != 0.0 {
                expected_reward += trajectory_prob(params, question, tokens)? * reward;
            }
        }
        let kl = if mu == 0.0 {
            0.0
        } else {
            kl_behavior_vs_current(params, task, behavior, question, max_len)?
        };
        total += expected_reward - mu * kl;
    }
    Ok(total / questions.len() as f64)
}

/// The trust-region variant: expected reward minus `lambda * KL(pi_theta || pi_ref)`
/// minus `mu * KL(pi_beta || pi_theta)`, averaged over questions. The reverse-direction
/// KL uses the same floored sequence log-probabilities as the estimator's advantage so
/// the two sides of the gradient check see identical numbers.
pub fn trust_region_objective_exact(
    params: &PolicyParams,
    params_ref: &PolicyParams,
    task: &dyn Task,
    behavior: &BehaviorPolicy,
    questions: &[Vec<TokenId>],
    lambda: f64,
    mu: f64,
    max_len: usize,
) -> Result<f64, AlgorithmError> {
    ensure_enumerable(task.vocabulary().size(), max_len)?;
    if questions.is_empty() {
        return Err(AlgorithmError::EmptyInput { what: "questions" });
    }
    let space = enumerate_trajectories(task.vocabulary(), max_len);
    let mut total = 0.0;
    for question in questions {
        let mut value = 0.0;
        for tokens in &space {
            let p_theta = trajectory_prob(params, question, tokens)?;
            let reward = task.verify_tokens(question, tokens) as f64;
            let lp_cur = sequence_log_prob(params, question, tokens)?;
            let lp_ref = sequence_log_prob(params_ref, question, tokens)?;
            value += p_theta * (reward - lambda * (lp_cur - lp_ref));
        }
        if mu != 0.0 {
            value -= mu * kl_behavior_vs_current(params, task, behavior, question, max_len)?;
        }
        total += value;
    }
    Ok(total / questions.len() as f64)
}

/// The estimator's exact expectation under the current policy:
/// `sum_tau pi_theta(tau) * estimand(tau)`, with rewards from the task's verifier and
/// behavior ratios from `behavior`. Token contributions are summed (not length-averaged),
/// matching the convention of the exact objectives above.
pub fn exact_estimator_expectation(
    params: &PolicyParams,
    params_rollout: &PolicyParams,
    components: &EstimatorComponents,
    task: &dyn Task,
    behavior: &BehaviorPolicy,
    question: &[TokenId],
    max_len: usize,
) -> Result<GradientVector, AlgorithmError> {
    ensure_enumerable(task.vocabulary().size(), max_len)?;
    let mut out = GradientVector::zeros(params.param_count());
    for tokens in enumerate_trajectories(task.vocabulary(), max_len) {
        let p_theta = trajectory_prob(params, question, &tokens)?;
        let reward = task.verify_tokens(question, &tokens) as f64;
        let ratio = match behavior_log_prob(behavior, task, question, &tokens) {
            BehaviorLogProb::Finite(lp_beta) => {
                BehaviorRatio::Known((lp_beta - p_theta.ln()).exp())
            }
            BehaviorLogProb::Impossible => BehaviorRatio::OutOfSupport,
        };
        let inputs = AdvantageInputs::on_policy(reward, Vec::new()).with_behavior_ratio(ratio);
        let item =
            EstimatorBatchItem::from_params_pair(params, params_rollout, question, &tokens, inputs)?;
        let estimand =
            trajectory_estimand(params, &item, components, LengthNorm::SumOverTokens)?;
        out.add_scaled(&estimand, p_theta);
    }
    Ok(out)
}

/// L2 norm of the enumerated `E_pi[grad ln pi]` — identically zero in exact arithmetic.
pub fn score_identity_gap(
    params: &PolicyParams,
    question: &[TokenId],
    max_len: usize,
) -> Result<f64, AlgorithmError> {
    ensure_enumerable(params.vocab().size(), max_len)?;
    let components = EstimatorComponents {
        mask: crate::estimator::MaskKind::None,
        reference: crate::estimator::RefKind::Current,
        advantage: crate::estimator::AdvantageKind::SftOne,
        shaping: crate::estimator::Shaping::Identity,
    };
    let mut sum = GradientVector::zeros(params.param_count());
    for tokens in enumerate_trajectories(params.vocab(), max_len) {
        let p = trajectory_prob(params, question, &tokens)?;
        let inputs = AdvantageInputs::on_policy(1.0, Vec::new());
        let item = EstimatorBatchItem::from_params_pair(params, params, question, &tokens, inputs)?;
        let estimand =
            trajectory_estimand(params, &item, &components, LengthNorm::SumOverTokens)?;
        sum.add_scaled(&estimand, p);
    }
    Ok(sum.l2_norm())
}

/// Relative gap between the reward-weighted score expectation computed two ways: under
/// the sampling law `params_old` reweighted by the probability ratio, and directly under
/// `params`. Equal in exact arithmetic by the change-of-measure identity.
pub fn measure_change_gap(
    params: &PolicyParams,
    params_old: &PolicyParams,
    task: &dyn Task,
    question: &[TokenId],
    max_len: usize,
) -> Result<f64, AlgorithmError> {
    ensure_enumerable(task.vocabulary().size(), max_len)?;
    let components = EstimatorComponents {
        mask: crate::estimator::MaskKind::None,
        reference: crate::estimator::RefKind::Current,
        advantage: crate::estimator::AdvantageKind::Unified { mu: 0.0 },
        shaping: crate::estimator::Shaping::Identity,
    };
    let mut reweighted = GradientVector::zeros(params.param_count());
    let mut direct = GradientVector::zeros(params.param_count());
    for tokens in enumerate_trajectories(task.vocabulary(), max_len) {
        let reward = task.verify_tokens(question, &tokens) as f64;
        if reward == 0.0 {
            continue;
        }
        let inputs = AdvantageInputs::on_policy(reward, Vec::new());
        let item = EstimatorBatchItem::from_params_pair(params, params_old, question, &tokens, inputs)?;
        let estimand =
            trajectory_estimand(params, &item, &components, LengthNorm::SumOverTokens)?;
        let p_theta = trajectory_prob(params, question, &tokens)?;
        let p_old = trajectory_prob(params_old, question, &tokens)?;
        let ratio = (p_theta.ln() - p_old.ln()).exp();
        reweighted.add_scaled(&estimand, p_old * ratio);
        direct.add_scaled(&estimand, p_theta);
    }
    Ok(super::rel_error(&reweighted, &direct))
}

/// Minimal task over the three structural tokens, built for enumeration checks: the
/// response is correct when its first token equals `target`. There is no room for an
/// answer-marker token in this vocabulary, so verification reads the response directly
/// and the marker accessor returns EOS as an unused placeholder.
pub struct ToyEnumTask {
    vocab: Vocabulary,
    target: TokenId,
}

impl ToyEnumTask {
    /// `target` may be PAD (0) or BOS (1) — EOS would terminate the response before it
    /// could be inspected.
    pub fn new(target: TokenId) -> ToyEnumTask {
        assert!(target < 3 && target != 2, "target must be token 0 or 1");
        ToyEnumTask { vocab: Vocabulary::new(3, 1, 2, 0).unwrap(), target }
    }

    pub fn target(&self) -> TokenId {
        self.target
    }
}

impl Task for ToyEnumTask {
    fn name(&self) -> &str {
        "toy_enum"
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn answer_marker(&self) -> TokenId {
        self.vocab.eos()
    }
    fn generate_question(&self, _rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        vec![self.vocab.bos()]
    }
    fn expected_answer(&self, _question: &[TokenId]) -> Vec<TokenId> {
        vec![self.target]
    }
    fn max_response_len(&self) -> usize {
        3
    }
    fn verify_tokens(&self, _question: &[TokenId], tokens: &[TokenId]) -> u8 {
        (tokens.first() == Some(&self.target)) as u8
    }
}

/// Convenience for tests: wraps enumerated tokens as a [`Trajectory`] with generation
/// probabilities taken from `params`.
pub fn trajectory_from_tokens(
    params: &PolicyParams,
    question: &[TokenId],
    tokens: &[TokenId],
) -> Result<Trajectory, AlgorithmError> {
    let probs = super::response_token_probs(params, question, tokens)?;
    let logprob: f64 = probs.iter().map(|&p| p.max(crate::policy::PROB_FLOOR).ln()).sum();
    Ok(Trajectory {
        question: question.to_vec(),
        tokens: tokens.to_vec(),
        gen_token_probs: probs,
        gen_logprob_sum: logprob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{finite_difference_grad, rel_error};
    use rand::{RngCore, SeedableRng};

    fn random_params(vocab: Vocabulary, window: usize, seed: u64, scale: f64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros(vocab, window);
        for w in p.weights_mut() {
            *w = scale * (2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0);
        }
        p
    }

    struct ConstantTask {
        vocab: Vocabulary,
        reward: u8,
    }

    impl Task for ConstantTask {
        fn name(&self) -> &str {
            "constant"
        }
        fn vocabulary(&self) -> &Vocabulary {
            &self.vocab
        }
        fn answer_marker(&self) -> TokenId {
            self.vocab.eos()
        }
        fn generate_question(&self, _rng: &mut ChaCha8Rng) -> Vec<TokenId> {
            vec![self.vocab.bos()]
        }
        fn expected_answer(&self, _question: &[TokenId]) -> Vec<TokenId> {
            vec![self.vocab.bos()]
        }
        fn max_response_len(&self) -> usize {
            3
        }
        fn verify_tokens(&self, _question: &[TokenId], _tokens: &[TokenId]) -> u8 {
            self.reward
        }
    }

    #[test]
    fn three_token_space_with_length_cap_three_has_fifteen_trajectories() {
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let space = enumerate_trajectories(&vocab, 3);
        assert_eq!(space.len(), 15);
        // EOS appears only terminally, and only length-3 sequences may omit it.
        for tokens in &space {
            let (last, body) = tokens.split_last().unwrap();
            assert!(body.iter().all(|&t| t != 2));
            assert!(*last == 2 || tokens.len() == 3);
        }
    }

    #[test]
    fn trajectory_probabilities_sum_to_one_over_the_space() {
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let params = random_params(vocab.clone(), 2, 9, 1.2);
        let question = vec![1usize];
        let total: f64 = enumerate_trajectories(&vocab, 3)
            .iter()
            .map(|tokens| trajectory_prob(&params, &question, tokens).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "total probability {total}");
    }

    #[test]
    fn objective_equals_total_probability_under_constant_verifiers() {
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let params = random_params(vocab.clone(), 2, 10, 1.0);
        let questions = vec![vec![1usize]];
        let always = ConstantTask { vocab: vocab.clone(), reward: 1 };
        let never = ConstantTask { vocab, reward: 0 };
        let one = common_objective_exact(
            &params,
            &always,
            &BehaviorPolicy::Demonstrator,
            &questions,
            0.0,
            3,
        )
        .unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let zero = common_objective_exact(
            &params,
            &never,
            &BehaviorPolicy::Demonstrator,
            &questions,
            0.0,
            3,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn objective_rises_with_adherence_when_mu_is_positive() {
        // Constant reward isolates the KL term: more probability on the demonstrated
        // response must mean a higher objective.
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let task = ConstantTask { vocab: vocab.clone(), reward: 1 };
        let questions = vec![vec![1usize]];
        let base = random_params(vocab.clone(), 2, 11, 0.5);
        let mut adherent = base.clone();
        // The demonstration is [1, 2] after question [1]: its two steps see contexts
        // [PAD, 1] and [1, 1], which differ in the slot-0 feature. Raising token 1's
        // logit only where slot 0 is PAD, and token 2's only where slot 0 is 1, raises
        // both factors of pi(demo) without touching each other's denominators.
        let f_dim = adherent.feature_dim();
        adherent.weights_mut()[f_dim] += 1.0; // row 1 (token 1), feature 0 (slot 0 = PAD)
        adherent.weights_mut()[2 * f_dim + 1] += 1.0; // row 2 (token 2), feature 1 (slot 0 = 1)
        let demo = task.demonstrate(&questions[0]);
        let p_base = trajectory_prob(&base, &questions[0], &demo).unwrap();
        let p_adh = trajectory_prob(&adherent, &questions[0], &demo).unwrap();
        assert!(p_adh > p_base);
        let behavior = BehaviorPolicy::Demonstrator;
        let j_base =
            common_objective_exact(&base, &task, &behavior, &questions, 0.5, 3).unwrap();
        let j_adh =
            common_objective_exact(&adherent, &task, &behavior, &questions, 0.5, 3).unwrap();
        assert!(j_adh > j_base);
    }

    #[test]
    fn oversized_spaces_are_refused_with_an_estimate() {
        let vocab = Vocabulary::new(10, 1, 2, 0).unwrap();
        let params = PolicyParams::zeros(vocab.clone(), 2);
        let task = ConstantTask { vocab, reward: 1 };
        let err = common_objective_exact(
            &params,
            &task,
            &BehaviorPolicy::Demonstrator,
            &[vec![1]],
            0.0,
            7,
        )
        .unwrap_err();
        match err {
            AlgorithmError::SpaceTooLarge { trajectories, .. } => {
                assert!((trajectories - 1e7).abs() < 1.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn score_identity_holds_under_enumeration() {
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let params = random_params(vocab, 2, 12, 1.0);
        let gap = score_identity_gap(&params, &[1], 3).unwrap();
        assert!(gap < 1e-9, "score identity gap {gap}");
    }

    #[test]
    fn measure_change_holds_under_enumeration() {
        let vocab = Vocabulary::new(3, 1, 2, 0).unwrap();
        let params = random_params(vocab.clone(), 2, 13, 1.0);
        let params_old = random_params(vocab, 2, 14, 1.0);
        let task = ToyEnumTask::new(1);
        let gap = measure_change_gap(&params, &params_old, &task, &[1], 3).unwrap();
        assert!(gap < 1e-9, "measure change gap {gap}");
    }

    #[test]
    fn toy_task_verifies_the_first_response_token() {
        let task = ToyEnumTask::new(1);
        assert_eq!(task.demonstrate(&[1]), vec![1, 2]);
        assert_eq!(task.verify_tokens(&[1], &[1, 2]), 1);
        assert_eq!(task.verify_tokens(&[1], &[1, 0, 0]), 1);
        assert_eq!(task.verify_tokens(&[1], &[0, 2]), 0);
        assert_eq!(task.verify_tokens(&[1], &[2]), 0);
        assert_eq!(task.verify_tokens(&[1], &[]), 0);
    }

    #[test]
    fn estimator_expectation_matches_objective_gradient_on_the_toy_task() {
        let task = ToyEnumTask::new(1);
        let params = random_params(task.vocabulary().clone(), 2, 15, 0.8);
        let behavior = BehaviorPolicy::Demonstrator;
        let question = vec![1usize];
        let mu = 0.5;
        let components = EstimatorComponents {
            mask: crate::estimator::MaskKind::None,
            reference: crate::estimator::RefKind::Current,
            advantage: crate::estimator::AdvantageKind::Unified { mu },
            shaping: crate::estimator::Shaping::Identity,
        };
        let exact = exact_estimator_expectation(
            &params, &params, &components, &task, &behavior, &question, 3,
        )
        .unwrap();
        let questions = vec![question];
        let fd = finite_difference_grad(
            |p| common_objective_exact(p, &task, &behavior, &questions, mu, 3).unwrap(),
            &params,
            1e-5,
        )
        .unwrap();
        let err = rel_error(&exact, &fd);
        assert!(err <= 1e-4, "rel err {err}");
    }
}
