//! Measurement apparatus: pass@k, routing ratios, accuracy grids, exclusive solves.
//!
//! Everything here is pure aggregation over already-collected records. pass@k has two
//! estimators — an exact combinatorial one and a seeded bootstrap — which must agree;
//! the exact path mirrors the brute-force subset count digit for digit so tests can
//! demand bitwise equality, falling back to a product-of-ratios form only when the
//! binomial coefficients overflow 128-bit integers.

use crate::hpt::{Branch, StepRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("pass@k needs 1 <= k <= n and c <= n (n={n}, c={c}, k={k})")]
    InvalidPassK { n: usize, c: usize, k: usize },
    #[error("{what} must be non-empty")]
    EmptyInput { what: &'static str },
    #[error("{what}: {left} vs {right}")]
    DimensionMismatch { what: &'static str, left: usize, right: usize },
    #[error("grid value {value} outside [{low}, {high}]")]
    ValueOutOfRange { value: f64, low: f64, high: f64 },
    #[error("grid index ({row}, {col}) outside {rows} x {cols}")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `C(n, k)` in 128-bit integers; `None` when an intermediate product overflows.
fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// How a [`PassKEstimate`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassKMethod {
    ExactCombinatorial,
    Bootstrap { resamples: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassKEstimate {
    pub k: usize,
    pub estimate: f64,
    pub method: PassKMethod,
}

/// Probability that a uniformly drawn size-`k` subset of `n` samples (of which `c` are
/// correct) contains at least one correct sample: `1 - C(n-c, k)/C(n, k)`.
///
/// When the binomials fit in 128 bits this divides the exact subset counts in one float
/// operation — bit-identical to brute-force subset enumeration. Otherwise it falls back
/// to the overflow-safe product `1 - prod_i (n-c-i)/(n-i)`.
pub fn pass_at_k_exact(n: usize, c: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 || k > n || c > n {
        return Err(MetricsError::InvalidPassK { n, c, k });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if k > n - c {
        // Every size-k subset must include a correct sample.
        return Ok(1.0);
    }
    let total = binomial_u128(n as u64, k as u64);
    let misses = binomial_u128((n - c) as u64, k as u64);
    if let (Some(total), Some(misses)) = (total, misses) {
        return Ok((total - misses) as f64 / total as f64);
    }
    let mut miss_fraction = 1.0;
    for i in 0..k {
        miss_fraction *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss_fraction)
}

/// Monte-Carlo pass@k: the success fraction over `resamples` uniformly drawn size-`k`
/// subsets (without replacement) of `scores`.
pub fn pass_at_k_bootstrap(
    scores: &[u8],
    k: usize,
    resamples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PassKEstimate, MetricsError> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(MetricsError::InvalidPassK { n, c: 0, k });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut hits = 0usize;
    for _ in 0..resamples {
        // Partial Fisher-Yates: the first k entries become a uniform size-k subset.
        let mut any = false;
        for i in 0..k {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
            any |= scores[indices[i]] == 1;
        }
        hits += any as usize;
    }
    Ok(PassKEstimate {
        k,
        estimate: hits as f64 / resamples as f64,
        method: PassKMethod::Bootstrap { resamples },
    })
}

/// Fraction of one step's questions that the gate routed to the SFT branch.
pub fn offline_ratio(records: &[StepRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput { what: "step records" });
    }
    let sft = records.iter().filter(|r| r.branch == Branch::Sft).count();
    Ok(sft as f64 / records.len() as f64)
}

fn write_grid_csv<W: Write>(
    writer: &mut W,
    questions: &[u64],
    steps: &[u64],
    values: &[Vec<f64>],
) -> Result<(), MetricsError> {
    write!(writer, "question_id")?;
    for s in steps {
        write!(writer, ",step_{s}")?;
    }
    writeln!(writer)?;
    for (q, row) in questions.iter().zip(values) {
        write!(writer, "{q}")?;
        for v in row {
            write!(writer, ",{v}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Binary portable graymap (P5): one pixel per cell, rows = questions, columns = steps.
/// `low`/`high` are the values mapped to black/white.
fn write_grid_pgm<W: Write>(
    writer: &mut W,
    steps: usize,
    values: &[Vec<f64>],
    low: f64,
    high: f64,
) -> Result<(), MetricsError> {
    write!(writer, "P5\n{} {}\n255\n", steps, values.len())?;
    let mut row_bytes = Vec::with_capacity(steps);
    for row in values {
        row_bytes.clear();
        for &v in row {
            let unit = ((v - low) / (high - low)).clamp(0.0, 1.0);
            row_bytes.push((unit * 255.0).round() as u8);
        }
        writer.write_all(&row_bytes)?;
    }
    Ok(())
}

/// Per-question rollout accuracy over training steps; rows are questions, columns steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyGrid {
    questions: Vec<u64>,
    steps: Vec<u64>,
    values: Vec<Vec<f64>>,
}

impl AccuracyGrid {
    pub fn new(questions: Vec<u64>, steps: Vec<u64>) -> AccuracyGrid {
        let values = vec![vec![0.0; steps.len()]; questions.len()];
        AccuracyGrid { questions, steps, values }
    }

    pub fn questions(&self) -> &[u64] {
        &self.questions
    }
    pub fn steps(&self) -> &[u64] {
        &self.steps
    }
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<(), MetricsError> {
        if row >= self.questions.len() || col >= self.steps.len() {
            return Err(MetricsError::IndexOutOfRange {
                row,
                col,
                rows: self.questions.len(),
                cols: self.steps.len(),
            });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::ValueOutOfRange { value, low: 0.0, high: 1.0 });
        }
        self.values[row][col] = value;
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    pub fn write_csv<W: Write>(&self, writer: &mut W) -> Result<(), MetricsError> {
        write_grid_csv(writer, &self.questions, &self.steps, &self.values)
    }

    /// Heatmap with 0 rendered black and 1 white.
    pub fn write_pgm<W: Write>(&self, writer: &mut W) -> Result<(), MetricsError> {
        write_grid_pgm(writer, self.steps.len(), &self.values, 0.0, 1.0)
    }
}

/// Elementwise difference of two accuracy grids; values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SignedGrid {
    questions: Vec<u64>,
    steps: Vec<u64>,
    values: Vec<Vec<f64>>,
}

impl SignedGrid {
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, writer: &mut W) -> Result<(), MetricsError> {
        write_grid_csv(writer, &self.questions, &self.steps, &self.values)
    }

    /// Heatmap with -1 rendered black, 0 mid-gray, +1 white.
    pub fn write_pgm<W: Write>(&self, writer: &mut W) -> Result<(), MetricsError> {
        write_grid_pgm(writer, self.steps.len(), &self.values, -1.0, 1.0)
    }
}

/// `a - b` at matched questions and steps.
pub fn difference_grid(a: &AccuracyGrid, b: &AccuracyGrid) -> Result<SignedGrid, MetricsError> {
    if a.questions != b.questions {
        return Err(MetricsError::DimensionMismatch {
            what: "grid question axes",
            left: a.questions.len(),
            right: b.questions.len(),
        });
    }
    if a.steps != b.steps {
        return Err(MetricsError::DimensionMismatch {
            what: "grid step axes",
            left: a.steps.len(),
            right: b.steps.len(),
        });
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect();
    Ok(SignedGrid { questions: a.questions.clone(), steps: a.steps.clone(), values })
}

/// Solved-by-one-side-only counts: `plus` = solved by A but not B, `minus` = the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusiveCounts {
    pub plus: usize,
    pub minus: usize,
}

/// Exclusive-solve accounting per difficulty bucket plus the overall totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusiveSolves {
    pub overall: ExclusiveCounts,
    pub per_label: BTreeMap<String, ExclusiveCounts>,
}

/// Compares two per-question evaluations (1 = solved) across matched question sets.
pub fn exclusive_solves(
    eval_a: &[u8],
    eval_b: &[u8],
    labels: &[String],
) -> Result<ExclusiveSolves, MetricsError> {
    if eval_a.len() != eval_b.len() {
        return Err(MetricsError::DimensionMismatch {
            what: "evaluation lengths",
            left: eval_a.len(),
            right: eval_b.len(),
        });
    }
    if eval_a.len() != labels.len() {
        return Err(MetricsError::DimensionMismatch {
            what: "evaluations vs labels",
            left: eval_a.len(),
            right: labels.len(),
        });
    }
    let mut overall = ExclusiveCounts::default();
    let mut per_label: BTreeMap<String, ExclusiveCounts> = BTreeMap::new();
    for ((&a, &b), label) in eval_a.iter().zip(eval_b).zip(labels) {
        let entry = per_label.entry(label.clone()).or_default();
        if a == 1 && b == 0 {
            overall.plus += 1;
            entry.plus += 1;
        } else if a == 0 && b == 1 {
            overall.minus += 1;
            entry.minus += 1;
        }
    }
    Ok(ExclusiveSolves { overall, per_label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn record(branch: Branch) -> StepRecord {
        StepRecord {
            step: 0,
            question_id: 0,
            p: 0.0,
            branch,
            reward_mean: 0.0,
            entropy_mean: 0.0,
            resp_len_mean: 0.0,
        }
    }

    #[test]
    fn four_choose_two_with_two_correct() {
        assert_eq!(pass_at_k_exact(4, 2, 2).unwrap(), 5.0 / 6.0);
    }

    #[test]
    fn no_correct_samples_means_zero_everywhere() {
        for k in 1..=6 {
            assert_eq!(pass_at_k_exact(6, 0, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_draw_with_any_correct_sample_is_certain() {
        for c in 1..=6 {
            assert_eq!(pass_at_k_exact(6, c, 6).unwrap(), 1.0);
        }
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(pass_at_k_exact(4, 2, 5).is_err());
        assert!(pass_at_k_exact(4, 2, 0).is_err());
        assert!(pass_at_k_exact(4, 5, 2).is_err());
    }

    #[test]
    fn pass_at_one_is_the_plain_accuracy() {
        for n in 1..=20usize {
            for c in 0..=n {
                assert_eq!(pass_at_k_exact(n, c, 1).unwrap(), c as f64 / n as f64);
            }
        }
    }

    #[test]
    fn exact_estimator_equals_brute_force_subset_enumeration() {
        // Enumerate every size-k subset of n <= 8 samples (first c correct) and compare
        // the hit fraction bit for bit.
        for n in 1..=8usize {
            for c in 0..=n {
                for k in 1..=n {
                    let mut hits = 0u64;
                    let mut total = 0u64;
                    for mask in 0u32..(1 << n) {
                        if mask.count_ones() as usize != k {
                            continue;
                        }
                        total += 1;
                        if (0..c).any(|i| mask & (1 << i) != 0) {
                            hits += 1;
                        }
                    }
                    let brute = hits as f64 / total as f64;
                    let exact = pass_at_k_exact(n, c, k).unwrap();
                    assert_eq!(exact, brute, "n={n} c={c} k={k}");
                }
            }
        }
    }

    #[test]
    fn exact_estimator_is_monotone_in_k_and_c() {
        for n in 1..=10usize {
            for c in 0..=n {
                let mut prev = 0.0;
                for k in 1..=n {
                    let v = pass_at_k_exact(n, c, k).unwrap();
                    assert!(v >= prev, "k-monotonicity n={n} c={c} k={k}");
                    prev = v;
                }
            }
            for k in 1..=n {
                let mut prev = 0.0;
                for c in 0..=n {
                    let v = pass_at_k_exact(n, c, k).unwrap();
                    assert!(v >= prev, "c-monotonicity n={n} c={c} k={k}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn huge_sample_counts_fall_back_without_panicking() {
        // 2000 samples forces the product-of-ratios path for mid-range k.
        let v = pass_at_k_exact(2000, 10, 1000).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(v > 0.99, "half the pool with 10 correct is nearly certain, got {v}");
    }

    #[test]
    fn bootstrap_tracks_the_exact_value() {
        let mut scores = vec![0u8; 64];
        for s in scores.iter_mut().take(5) {
            *s = 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let est = pass_at_k_bootstrap(&scores, 8, 10_000, &mut rng).unwrap();
        let exact = pass_at_k_exact(64, 5, 8).unwrap();
        assert!((est.estimate - exact).abs() < 0.02, "bootstrap {} vs exact {exact}", est.estimate);
        assert_eq!(est.method, PassKMethod::Bootstrap { resamples: 10_000 });
    }

    #[test]
    fn bootstrap_is_deterministic_under_a_fixed_seed() {
        let scores = vec![1, 0, 0, 1, 0, 0, 0, 0];
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let a = pass_at_k_bootstrap(&scores, 3, 500, &mut rng_a).unwrap();
        let b = pass_at_k_bootstrap(&scores, 3, 500, &mut rng_b).unwrap();
        assert_eq!(a.estimate, b.estimate);
    }

    #[test]
    fn bootstrap_with_all_correct_is_always_one() {
        let scores = vec![1u8; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 4, 16] {
            let est = pass_at_k_bootstrap(&scores, k, 200, &mut rng).unwrap();
            assert_eq!(est.estimate, 1.0);
        }
    }

    #[test]
    fn offline_ratio_counts_sft_routed_questions() {
        let mut records: Vec<StepRecord> = (0..6).map(|_| record(Branch::Sft)).collect();
        records.extend((0..10).map(|_| record(Branch::Rl)));
        assert_eq!(offline_ratio(&records).unwrap(), 0.375);
        let all_rl: Vec<StepRecord> = (0..4).map(|_| record(Branch::Rl)).collect();
        assert_eq!(offline_ratio(&all_rl).unwrap(), 0.0);
        let all_sft: Vec<StepRecord> = (0..4).map(|_| record(Branch::Sft)).collect();
        assert_eq!(offline_ratio(&all_sft).unwrap(), 1.0);
        assert!(matches!(offline_ratio(&[]), Err(MetricsError::EmptyInput { .. })));
    }

    #[test]
    fn grids_store_and_reject_out_of_band_values() {
        let mut grid = AccuracyGrid::new(vec![10, 11], vec![0, 5, 10]);
        grid.set(0, 1, 0.5).unwrap();
        grid.set(1, 2, 1.0).unwrap();
        assert_eq!(grid.get(0, 1), 0.5);
        assert!(grid.set(0, 0, 1.5).is_err());
        assert!(grid.set(2, 0, 0.5).is_err());
    }

    #[test]
    fn grid_csv_layout_is_questions_by_steps() {
        let mut grid = AccuracyGrid::new(vec![7, 8], vec![0, 100]);
        grid.set(0, 0, 0.25).unwrap();
        grid.set(1, 1, 1.0).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "question_id,step_0,step_100\n7,0.25,0\n8,0,1\n");
    }

    #[test]
    fn difference_grids_are_antisymmetric() {
        let mut a = AccuracyGrid::new(vec![1, 2], vec![0, 1]);
        let mut b = AccuracyGrid::new(vec![1, 2], vec![0, 1]);
        a.set(0, 0, 1.0).unwrap();
        b.set(1, 1, 0.75).unwrap();
        let ab = difference_grid(&a, &b).unwrap();
        let ba = difference_grid(&b, &a).unwrap();
        assert_eq!(ab.values()[0][0], 1.0);
        assert_eq!(ab.values()[1][1], -0.75);
        for (ra, rb) in ab.values().iter().zip(ba.values()) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(*x, -*y);
            }
        }
        let self_diff = difference_grid(&a, &a).unwrap();
        assert!(self_diff.values().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = AccuracyGrid::new(vec![1, 2], vec![0, 1]);
        let b = AccuracyGrid::new(vec![1, 2, 3], vec![0, 1]);
        assert!(matches!(
            difference_grid(&a, &b),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pgm_header_and_payload_have_the_right_shape() {
        let mut grid = AccuracyGrid::new(vec![1, 2], vec![0, 1, 2]);
        grid.set(0, 0, 1.0).unwrap();
        let mut buf = Vec::new();
        grid.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        let header_len = b"P5\n3 2\n255\n".len();
        assert_eq!(buf.len(), header_len + 6);
        assert_eq!(buf[header_len], 255);
        assert_eq!(buf[header_len + 1], 0);
    }

    #[test]
    fn exclusive_solves_count_set_differences_per_label() {
        let labels: Vec<String> =
            ["easy", "easy", "hard"].iter().map(|s| s.to_string()).collect();
        // A solves questions 0 and 1; B solves questions 1 and 2.
        let a = [1, 1, 0];
        let b = [0, 1, 1];
        let result = exclusive_solves(&a, &b, &labels).unwrap();
        assert_eq!(result.overall, ExclusiveCounts { plus: 1, minus: 1 });
        assert_eq!(result.per_label["easy"], ExclusiveCounts { plus: 1, minus: 0 });
        assert_eq!(result.per_label["hard"], ExclusiveCounts { plus: 0, minus: 1 });
        let plus_sum: usize = result.per_label.values().map(|c| c.plus).sum();
        let minus_sum: usize = result.per_label.values().map(|c| c.minus).sum();
        assert_eq!(plus_sum, result.overall.plus);
        assert_eq!(minus_sum, result.overall.minus);
        let same = exclusive_solves(&a, &a, &labels).unwrap();
        assert_eq!(same.overall, ExclusiveCounts::default());
        assert!(exclusive_solves(&a, &b[..2], &labels).is_err());
    }
}
