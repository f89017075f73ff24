//! Synthetic tasks with programmatic verifiers and demonstrators.
//!
//! Every task speaks the same protocol: a seeded question generator, a binary verifier that
//! extracts the answer span between the task's ANSWER marker and EOS, and a demonstrator
//! producing a reference response the verifier accepts. Questions end with the ANSWER
//! marker, so a response is just the answer span followed by EOS.

use crate::policy::{sequence_log_prob, PolicyParams, TokenId, Trajectory, Vocabulary};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task `{0}` (builtins: modadd, reverse, sparse_parity)")]
    UnknownTask(String),
    #[error("line {line}: {message}")]
    InvalidRecord { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A verifiable task: question generation, answer checking, and demonstration.
pub trait Task: Send + Sync {
    fn name(&self) -> &str;
    fn vocabulary(&self) -> &Vocabulary;
    /// The marker token separating the problem statement from the answer span.
    fn answer_marker(&self) -> TokenId;
    /// Draws one question (a token sequence ending with the answer marker).
    fn generate_question(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId>;
    /// The exact answer span the verifier accepts for `question`.
    fn expected_answer(&self, question: &[TokenId]) -> Vec<TokenId>;
    /// Generation budget that comfortably fits a correct response.
    fn max_response_len(&self) -> usize;

    /// Reference response: the expected answer span terminated by EOS.
    fn demonstrate(&self, question: &[TokenId]) -> Vec<TokenId> {
        let mut t = self.expected_answer(question);
        t.push(self.vocabulary().eos());
        t
    }

    /// Difficulty bucket label for reporting; tasks without a natural split use one bucket.
    fn difficulty_label(&self, _question: &[TokenId]) -> String {
        "all".to_string()
    }

    /// 1 if the span between the last answer marker and the first EOS after it equals the
    /// expected answer exactly, else 0. Emitting extra tokens around the span fails.
    fn verify_tokens(&self, question: &[TokenId], tokens: &[TokenId]) -> u8 {
        match answer_span(self.answer_marker(), self.vocabulary().eos(), question, tokens) {
            Some(span) if span == self.expected_answer(question) => 1,
            _ => 0,
        }
    }
}

/// Extracts the answer span from `question ++ tokens`: everything after the last answer
/// marker, up to (excluding) the first EOS that follows it. `None` when either is missing.
pub fn answer_span(
    marker: TokenId,
    eos: TokenId,
    question: &[TokenId],
    tokens: &[TokenId],
) -> Option<Vec<TokenId>> {
    let full: Vec<TokenId> = question.iter().chain(tokens.iter()).copied().collect();
    let marker_pos = full.iter().rposition(|&t| t == marker)?;
    let rest = &full[marker_pos + 1..];
    let eos_pos = rest.iter().position(|&t| t == eos)?;
    Some(rest[..eos_pos].to_vec())
}

/// Verifier entry point over a sampled trajectory.
pub fn verify(task: &dyn Task, question: &[TokenId], trajectory: &Trajectory) -> u8 {
    task.verify_tokens(question, &trajectory.tokens)
}

// ---------------------------------------------------------------------------------------
// Built-in tasks. Shared token layout: PAD=0, BOS=1, EOS=2, ANSWER=3, payload from 4 up.
// ---------------------------------------------------------------------------------------

const PAD: TokenId = 0;
const BOS: TokenId = 1;
const EOS: TokenId = 2;
const ANSWER: TokenId = 3;
const PAYLOAD_BASE: TokenId = 4;

/// Modular addition: the question names an operand pair, the answer is one digit token.
///
/// Each (a, b) pair is a single composite token, so the answer is a direct function of one
/// window slot — the task a from-scratch RL run can actually discover and represent.
pub struct ModAddTask {
    modulus: usize,
    vocab: Vocabulary,
}

impl ModAddTask {
    pub fn new(modulus: usize) -> ModAddTask {
        assert!((2..=9).contains(&modulus), "modulus must be in 2..=9");
        let size = PAYLOAD_BASE + modulus + modulus * modulus;
        ModAddTask { modulus, vocab: Vocabulary::new(size, BOS, EOS, PAD).unwrap() }
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    pub fn digit_token(&self, d: usize) -> TokenId {
        PAYLOAD_BASE + d
    }

    pub fn pair_token(&self, a: usize, b: usize) -> TokenId {
        PAYLOAD_BASE + self.modulus + a * self.modulus + b
    }

    /// The question asking for `a + b (mod m)`.
    pub fn question_for(&self, a: usize, b: usize) -> Vec<TokenId> {
        assert!(a < self.modulus && b < self.modulus);
        vec![BOS, self.pair_token(a, b), ANSWER]
    }

    fn operands(&self, question: &[TokenId]) -> (usize, usize) {
        let pair = question[1] - PAYLOAD_BASE - self.modulus;
        (pair / self.modulus, pair % self.modulus)
    }
}

impl Task for ModAddTask {
    fn name(&self) -> &str {
        "modadd"
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn answer_marker(&self) -> TokenId {
        ANSWER
    }
    fn generate_question(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let a = rng.random_range(0..self.modulus);
        let b = rng.random_range(0..self.modulus);
        self.question_for(a, b)
    }
    fn expected_answer(&self, question: &[TokenId]) -> Vec<TokenId> {
        let (a, b) = self.operands(question);
        vec![self.digit_token((a + b) % self.modulus)]
    }
    fn max_response_len(&self) -> usize {
        4
    }
    fn difficulty_label(&self, question: &[TokenId]) -> String {
        let (a, b) = self.operands(question);
        if a + b >= self.modulus { "wrap".into() } else { "plain".into() }
    }
}

/// String reversal: the question carries a symbol string, the answer is its reversal.
pub struct ReverseTask {
    alphabet: usize,
    min_len: usize,
    max_len: usize,
    vocab: Vocabulary,
}

impl ReverseTask {
    pub fn new(alphabet: usize, min_len: usize, max_len: usize) -> ReverseTask {
        assert!(alphabet >= 2 && min_len >= 1 && min_len <= max_len);
        let size = PAYLOAD_BASE + alphabet;
        ReverseTask { alphabet, min_len, max_len, vocab: Vocabulary::new(size, BOS, EOS, PAD).unwrap() }
    }

    pub fn symbol_token(&self, i: usize) -> TokenId {
        assert!(i < self.alphabet);
        PAYLOAD_BASE + i
    }

    pub fn question_for(&self, symbols: &[usize]) -> Vec<TokenId> {
        let mut q = vec![BOS];
        q.extend(symbols.iter().map(|&s| self.symbol_token(s)));
        q.push(ANSWER);
        q
    }
}

impl Task for ReverseTask {
    fn name(&self) -> &str {
        "reverse"
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn answer_marker(&self) -> TokenId {
        ANSWER
    }
    fn generate_question(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..self.alphabet)).collect();
        self.question_for(&symbols)
    }
    fn expected_answer(&self, question: &[TokenId]) -> Vec<TokenId> {
        // Strip BOS and the trailing marker, then reverse the payload.
        question[1..question.len() - 1].iter().rev().copied().collect()
    }
    fn max_response_len(&self) -> usize {
        self.max_len + 2
    }
    fn difficulty_label(&self, question: &[TokenId]) -> String {
        format!("len{}", question.len() - 2)
    }
}

/// Sparse parity: the answer repeats the bit at a hidden question position four times.
///
/// Correct responses are an exact multi-token pattern, so a uniform policy almost never
/// earns reward. A seeded fraction of questions pad the bit string with noise tokens,
/// pushing the hidden bit out of a small context window — those stay hard for any
/// window-limited policy and carry the "hard" difficulty label.
pub struct SparseParityTask {
    bits: usize,
    repeat: usize,
    noise_symbols: usize,
    hard_fraction: f64,
    /// Offset of the hidden bit from the end of the bit string (0 = last bit).
    hidden_offset: usize,
    /// Vocabulary entries that no question or answer ever uses. They model the huge
    /// token space of a real model: an untrained policy spreads mass over all of them,
    /// making a blind-luck correct response astronomically unlikely.
    distractors: usize,
    vocab: Vocabulary,
}

impl SparseParityTask {
    pub fn new(
        bits: usize,
        repeat: usize,
        noise_symbols: usize,
        hard_fraction: f64,
        hidden_offset: usize,
    ) -> SparseParityTask {
        assert!(bits >= 3 && hidden_offset < 3 && repeat >= 1 && noise_symbols >= 1);
        assert!((0.0..1.0).contains(&hard_fraction));
        let size = PAYLOAD_BASE + 2 + noise_symbols;
        SparseParityTask {
            bits,
            repeat,
            noise_symbols,
            hard_fraction,
            hidden_offset,
            distractors: 0,
            vocab: Vocabulary::new(size, BOS, EOS, PAD).unwrap(),
        }
    }

    /// Pads the vocabulary with `count` never-emitted tokens.
    pub fn with_distractors(mut self, count: usize) -> SparseParityTask {
        self.distractors = count;
        let size = PAYLOAD_BASE + 2 + self.noise_symbols + count;
        self.vocab = Vocabulary::new(size, BOS, EOS, PAD).unwrap();
        self
    }

    pub fn bit_token(&self, bit: usize) -> TokenId {
        PAYLOAD_BASE + bit
    }

    fn noise_token_base(&self) -> TokenId {
        PAYLOAD_BASE + 2
    }

    fn is_noise(&self, t: TokenId) -> bool {
        t >= self.noise_token_base()
    }

    /// A question is hard when noise tokens sit between the bits and the answer marker.
    pub fn is_hard(&self, question: &[TokenId]) -> bool {
        question.len() >= 2 && self.is_noise(question[question.len() - 2])
    }

    pub fn question_for(&self, bits: &[usize], hard_noise: Option<[usize; 3]>) -> Vec<TokenId> {
        assert_eq!(bits.len(), self.bits);
        let mut q = vec![BOS];
        q.extend(bits.iter().map(|&b| self.bit_token(b)));
        if let Some(noise) = hard_noise {
            q.extend(noise.iter().map(|&n| self.noise_token_base() + n % self.noise_symbols));
        }
        q.push(ANSWER);
        q
    }
}

impl Task for SparseParityTask {
    fn name(&self) -> &str {
        "sparse_parity"
    }
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn answer_marker(&self) -> TokenId {
        ANSWER
    }
    fn generate_question(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let bits: Vec<usize> = (0..self.bits).map(|_| rng.random_range(0..2usize)).collect();
        let hard = rng.random::<f64>() < self.hard_fraction;
        let noise = if hard {
            Some([
                rng.random_range(0..self.noise_symbols),
                rng.random_range(0..self.noise_symbols),
                rng.random_range(0..self.noise_symbols),
            ])
        } else {
            None
        };
        self.question_for(&bits, noise)
    }
    fn expected_answer(&self, question: &[TokenId]) -> Vec<TokenId> {
        // The hidden bit counts from the end of the bit string, independent of noise.
        let bit_tokens: Vec<TokenId> = question
            .iter()
            .copied()
            .filter(|&t| t == self.bit_token(0) || t == self.bit_token(1))
            .collect();
        let hidden = bit_tokens[bit_tokens.len() - 1 - self.hidden_offset];
        vec![hidden; self.repeat]
    }
    fn max_response_len(&self) -> usize {
        self.repeat + 4
    }
    fn difficulty_label(&self, question: &[TokenId]) -> String {
        if self.is_hard(question) { "hard".into() } else { "easy".into() }
    }
}

/// Builds one of the built-in tasks by name with its default configuration.
pub fn builtin_task(name: &str) -> Result<Box<dyn Task>, TaskError> {
    match name {
        "modadd" => Ok(Box::new(ModAddTask::new(5))),
        "reverse" => Ok(Box::new(ReverseTask::new(10, 2, 2))),
        // One noise symbol: every hard question shows the policy the same visible context,
        // so a fixed training pool cannot be beaten by memorizing noise patterns — hard
        // questions stay a coin flip for any window-limited policy. The hard fraction
        // leaves headroom between the learnable ceiling and full accuracy. The
        // distractor padding keeps an untrained policy from ever guessing a full
        // answer: a blind rollout succeeds with probability about (1/20)^5, so pure
        // on-policy training gets no reward signal to start from, while supervision
        // is unaffected.
        "sparse_parity" => Ok(Box::new(
            SparseParityTask::new(6, 4, 1, 0.1, 1).with_distractors(13),
        )),
        other => Err(TaskError::UnknownTask(other.to_string())),
    }
}

// ---------------------------------------------------------------------------------------
// Behavior policies and demonstrations.
// ---------------------------------------------------------------------------------------

/// The data-generating policy for offline objectives.
pub enum BehaviorPolicy {
    /// Puts probability 1 on the task demonstrator's response.
    Demonstrator,
    /// An explicit softmax policy with its own parameters.
    Explicit(PolicyParams),
}

/// Log-probability of a response under a behavior policy. Out-of-support responses are a
/// flagged value, never a raw negative-infinity float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorLogProb {
    Finite(f64),
    Impossible,
}

pub fn behavior_log_prob(
    beta: &BehaviorPolicy,
    task: &dyn Task,
    question: &[TokenId],
    tokens: &[TokenId],
) -> BehaviorLogProb {
    match beta {
        BehaviorPolicy::Demonstrator => {
            if tokens == task.demonstrate(question).as_slice() {
                BehaviorLogProb::Finite(0.0)
            } else {
                BehaviorLogProb::Impossible
            }
        }
        BehaviorPolicy::Explicit(params) => match sequence_log_prob(params, question, tokens) {
            Ok(lp) => BehaviorLogProb::Finite(lp),
            Err(_) => BehaviorLogProb::Impossible,
        },
    }
}

/// One question paired with a verified reference response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationRecord {
    pub question: Vec<TokenId>,
    pub demonstration: Vec<TokenId>,
}

/// Demonstrations for a batch of questions, via the task's demonstrator.
pub fn demonstrations_for(task: &dyn Task, questions: &[Vec<TokenId>]) -> Vec<DemonstrationRecord> {
    questions
        .iter()
        .map(|q| DemonstrationRecord { question: q.clone(), demonstration: task.demonstrate(q) })
        .collect()
}

/// Parses JSON-Lines demonstrations, validating every token id against `vocab`.
pub fn parse_demonstrations(
    reader: impl BufRead,
    vocab: &Vocabulary,
) -> Result<Vec<DemonstrationRecord>, TaskError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemonstrationRecord = serde_json::from_str(&line)
            .map_err(|e| TaskError::InvalidRecord { line: lineno, message: e.to_string() })?;
        if rec.demonstration.is_empty() {
            return Err(TaskError::InvalidRecord {
                line: lineno,
                message: "empty demonstration".into(),
            });
        }
        for &t in rec.question.iter().chain(&rec.demonstration) {
            if !vocab.contains(t) {
                return Err(TaskError::InvalidRecord {
                    line: lineno,
                    message: format!("token id {t} out of range (vocabulary size {})", vocab.size()),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_demonstrations(
    path: &std::path::Path,
    vocab: &Vocabulary,
) -> Result<Vec<DemonstrationRecord>, TaskError> {
    let file = std::fs::File::open(path)?;
    parse_demonstrations(std::io::BufReader::new(file), vocab)
}

pub fn write_demonstrations(
    mut writer: impl Write,
    records: &[DemonstrationRecord],
) -> Result<(), TaskError> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)
            .map_err(|e| TaskError::InvalidRecord { line: 0, message: e.to_string() })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sample_trajectory;
    use rand::SeedableRng;

    #[test]
    fn builtin_names_resolve_and_unknown_is_rejected() {
        for name in ["modadd", "reverse", "sparse_parity"] {
            assert_eq!(builtin_task(name).unwrap().name(), name);
        }
        assert!(matches!(builtin_task("nope"), Err(TaskError::UnknownTask(_))));
    }

    #[test]
    fn modadd_three_plus_four_mod_five_is_two() {
        let task = ModAddTask::new(5);
        let q = task.question_for(3, 4);
        assert_eq!(task.expected_answer(&q), vec![task.digit_token(2)]);
        let demo = task.demonstrate(&q);
        assert_eq!(demo, vec![task.digit_token(2), EOS]);
        assert_eq!(task.verify_tokens(&q, &demo), 1);
        // A wrong digit fails.
        assert_eq!(task.verify_tokens(&q, &[task.digit_token(1), EOS]), 0);
    }

    #[test]
    fn reversal_rule_on_a_three_symbol_string() {
        let task = ReverseTask::new(10, 1, 3);
        let q = task.question_for(&[2, 7, 1]);
        let expect: Vec<TokenId> =
            vec![task.symbol_token(1), task.symbol_token(7), task.symbol_token(2)];
        assert_eq!(task.expected_answer(&q), expect);
        assert_eq!(task.verify_tokens(&q, &task.demonstrate(&q)), 1);
    }

    #[test]
    fn verifier_requires_the_exact_span() {
        let task = ModAddTask::new(5);
        let q = task.question_for(1, 1);
        let good = task.digit_token(2);
        // Empty response: no EOS, no span.
        assert_eq!(task.verify_tokens(&q, &[]), 0);
        // Right answer, then junk before EOS.
        assert_eq!(task.verify_tokens(&q, &[good, good, EOS]), 0);
        // No EOS at all.
        assert_eq!(task.verify_tokens(&q, &[good]), 0);
        // Re-emitting the marker restarts the span: still exact afterwards.
        assert_eq!(task.verify_tokens(&q, &[good, ANSWER, good, EOS]), 1);
        assert_eq!(task.verify_tokens(&q, &[ANSWER, EOS]), 0);
    }

    #[test]
    fn answer_span_extraction() {
        assert_eq!(answer_span(3, 2, &[1, 3], &[4, 5, 2]), Some(vec![4, 5]));
        assert_eq!(answer_span(3, 2, &[1, 3], &[4, 5]), None);
        assert_eq!(answer_span(3, 2, &[1], &[4, 2]), None);
        assert_eq!(answer_span(3, 2, &[1, 3], &[2]), Some(vec![]));
    }

    #[test]
    fn demonstrations_verify_across_a_thousand_questions_per_task() {
        for name in ["modadd", "reverse", "sparse_parity"] {
            let task = builtin_task(name).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..1000 {
                let q = task.generate_question(&mut rng);
                let demo = task.demonstrate(&q);
                assert_eq!(task.verify_tokens(&q, &demo), 1, "task {name} q {q:?}");
            }
        }
    }

    #[test]
    fn sparse_parity_answer_tracks_the_hidden_bit() {
        let task = SparseParityTask::new(6, 4, 6, 0.0, 1);
        // hidden_offset 1: second-to-last bit.
        let q = task.question_for(&[0, 0, 0, 0, 1, 0], None);
        assert_eq!(task.expected_answer(&q), vec![task.bit_token(1); 4]);
        let q = task.question_for(&[1, 1, 1, 1, 0, 1], None);
        assert_eq!(task.expected_answer(&q), vec![task.bit_token(0); 4]);
        // Hard variant: noise between bits and marker does not change the answer.
        let qh = task.question_for(&[0, 0, 0, 0, 1, 0], Some([0, 3, 5]));
        assert!(task.is_hard(&qh));
        assert_eq!(task.difficulty_label(&qh), "hard");
        assert_eq!(task.expected_answer(&qh), vec![task.bit_token(1); 4]);
    }

    #[test]
    fn sparse_parity_reward_is_sparse_under_a_uniform_policy() {
        let task = builtin_task("sparse_parity").unwrap();
        let params = PolicyParams::zeros(task.vocabulary().clone(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 20_000;
        let mut hits = 0u32;
        for _ in 0..samples {
            let q = task.generate_question(&mut rng);
            let t = sample_trajectory(&params, &q, task.max_response_len(), 1.0, &mut rng);
            hits += verify(task.as_ref(), &q, &t) as u32;
        }
        let rate = hits as f64 / samples as f64;
        // Exact-pattern answers of length 4 bound the uniform pass rate by (1/4)^4.
        assert!(rate <= 0.25_f64.powi(4), "rate {rate}");
    }

    #[test]
    fn distractor_tokens_inflate_the_vocabulary_but_never_appear() {
        let base = SparseParityTask::new(6, 4, 1, 0.1, 1);
        let padded = SparseParityTask::new(6, 4, 1, 0.1, 1).with_distractors(13);
        assert_eq!(padded.vocabulary().size(), base.vocabulary().size() + 13);
        // Every token a question or demonstration can contain fits in the base vocab.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let q = padded.generate_question(&mut rng);
            let demo = padded.demonstrate(&q);
            for &t in q.iter().chain(demo.iter()) {
                assert!(t < base.vocabulary().size(), "token {t} is a distractor");
            }
        }
    }

    #[test]
    fn difficulty_labels_split_modadd_by_wraparound() {
        let task = ModAddTask::new(5);
        assert_eq!(task.difficulty_label(&task.question_for(1, 2)), "plain");
        assert_eq!(task.difficulty_label(&task.question_for(4, 3)), "wrap");
    }

    #[test]
    fn behavior_log_prob_demonstrator_is_zero_or_impossible() {
        let task = ModAddTask::new(5);
        let q = task.question_for(2, 2);
        let demo = task.demonstrate(&q);
        assert_eq!(
            behavior_log_prob(&BehaviorPolicy::Demonstrator, &task, &q, &demo),
            BehaviorLogProb::Finite(0.0)
        );
        assert_eq!(
            behavior_log_prob(&BehaviorPolicy::Demonstrator, &task, &q, &[EOS]),
            BehaviorLogProb::Impossible
        );
    }

    #[test]
    fn behavior_log_prob_explicit_uniform() {
        let task = ModAddTask::new(5);
        let q = task.question_for(0, 1);
        let v = task.vocabulary().clone();
        let size = v.size() as f64;
        let params = PolicyParams::zeros(v, 2);
        let lp = behavior_log_prob(&BehaviorPolicy::Explicit(params), &task, &q, &[4, 2]);
        match lp {
            BehaviorLogProb::Finite(x) => assert!((x - 2.0 * (1.0 / size).ln()).abs() < 1e-9),
            BehaviorLogProb::Impossible => panic!("expected finite"),
        }
    }

    #[test]
    fn demonstration_jsonl_round_trips_bit_identically() {
        let task = builtin_task("reverse").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let questions: Vec<Vec<TokenId>> =
            (0..5).map(|_| task.generate_question(&mut rng)).collect();
        let records = demonstrations_for(task.as_ref(), &questions);
        let mut buf = Vec::new();
        write_demonstrations(&mut buf, &records).unwrap();
        let parsed = parse_demonstrations(buf.as_slice(), task.vocabulary()).unwrap();
        assert_eq!(parsed, records);
        let mut buf2 = Vec::new();
        write_demonstrations(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn demonstration_loader_names_the_offending_line() {
        let vocab = Vocabulary::new(6, 1, 2, 0).unwrap();
        let text = "{\"question\":[1,3],\"demonstration\":[4,2]}\n{\"question\":[1,9],\"demonstration\":[4,2]}\n";
        let err = parse_demonstrations(text.as_bytes(), &vocab).unwrap_err();
        match err {
            TaskError::InvalidRecord { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("9"), "message: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn demonstration_loader_rejects_empty_demonstrations_and_bad_json() {
        let vocab = Vocabulary::new(6, 1, 2, 0).unwrap();
        let text = "{\"question\":[1],\"demonstration\":[]}\n";
        assert!(matches!(
            parse_demonstrations(text.as_bytes(), &vocab),
            Err(TaskError::InvalidRecord { line: 1, .. })
        ));
        let text = "not json\n";
        assert!(matches!(
            parse_demonstrations(text.as_bytes(), &vocab),
            Err(TaskError::InvalidRecord { line: 1, .. })
        ));
    }
}
