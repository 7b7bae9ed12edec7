//! Synthetic countdown sequences: each token decrements its left neighbor
//! until zero, then restarts uniformly. Strong position-wise correlation
//! makes parallel-sampling error visible at desk scale.
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataDistribution;
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownSpec {
    pub seq_len: usize,
    pub value_count: usize,
}

impl Default for CountdownSpec {
    fn default() -> Self {
        CountdownSpec { seq_len: 16, value_count: 8 }
    }
}

impl CountdownSpec {
    pub fn new(seq_len: usize, value_count: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Domain("seq_len must be >= 2".into()));
        }
        if value_count < 2 {
            return Err(Error::Domain("value_count must be >= 2".into()));
        }
        Ok(CountdownSpec { seq_len, value_count })
    }
}

/// Draw one sequence: the first token uniform on `{1, …, V−1}`, then each
/// token is its predecessor minus one, restarting uniformly after a zero.
/// Zero is reachable only by counting down.
pub fn generate_one<R: Rng>(spec: CountdownSpec, rng: &mut R) -> Vec<usize> {
    let v = spec.value_count;
    let mut seq = Vec::with_capacity(spec.seq_len);
    let mut cur = rng.random_range(1..v);
    seq.push(cur);
    for _ in 1..spec.seq_len {
        cur = if cur != 0 { cur - 1 } else { rng.random_range(1..v) };
        seq.push(cur);
    }
    seq
}

pub fn generate<R: Rng>(spec: CountdownSpec, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n).map(|_| generate_one(spec, rng)).collect()
}

/// The generator's law in Markov form: uniform initial over `{1, …, V−1}`,
/// deterministic decrement rows, and a uniform restart row at zero.
pub fn exact_distribution(spec: CountdownSpec) -> DataDistribution {
    let v = spec.value_count;
    let mut initial = vec![0.0; v];
    for slot in initial.iter_mut().skip(1) {
        *slot = 1.0 / (v - 1) as f64;
    }
    let mut rows = vec![vec![0.0; v]; v];
    for val in 1..v {
        rows[val][val - 1] = 1.0;
    }
    for target in 1..v {
        rows[0][target] = 1.0 / (v - 1) as f64;
    }
    let shared = Mat::from_rows(&rows);
    let transitions = vec![shared; spec.seq_len - 1];
    DataDistribution::markov(initial, transitions).expect("countdown chain is stochastic")
}

/// Fraction of adjacent pairs violating the countdown rule, over all pairs
/// in all sequences. A pair `(a, b)` violates when `a != 0` and `b != a−1`;
/// pairs led by zero are free; any token outside the value range (a mask
/// that survived sampling) makes its pairs violations.
pub fn violation_rate(sequences: &[Vec<usize>], value_count: usize) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::DegenerateInput("no sequences".into()));
    }
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for seq in sequences {
        for w in seq.windows(2) {
            let (a, b) = (w[0], w[1]);
            pairs += 1;
            let violated = if a >= value_count || b >= value_count {
                true
            } else if a == 0 {
                false
            } else {
                b != a - 1
            };
            if violated {
                violations += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateInput("sequences too short for pairs".into()));
    }
    Ok(violations as f64 / pairs as f64)
}

/// Per-sequence violation fraction: share of sequences containing at least
/// one violating pair. Reported alongside the per-pair metric.
pub fn sequence_violation_rate(sequences: &[Vec<usize>], value_count: usize) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::DegenerateInput("no sequences".into()));
    }
    let bad = sequences
        .iter()
        .filter(|seq| {
            seq.windows(2).any(|w| {
                let (a, b) = (w[0], w[1]);
                a >= value_count || b >= value_count || (a != 0 && b != a - 1)
            })
        })
        .count();
    Ok(bad as f64 / sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::path_rng;

    #[test]
    fn v2_sequences_alternate() {
        let spec = CountdownSpec::new(6, 2).unwrap();
        let mut rng = path_rng(1, 0);
        for seq in generate(spec, 20, &mut rng) {
            assert_eq!(seq, vec![1, 0, 1, 0, 1, 0]);
        }
    }

    #[test]
    fn generated_sequences_never_violate() {
        let spec = CountdownSpec::default();
        let mut rng = path_rng(2, 0);
        let seqs = generate(spec, 500, &mut rng);
        assert_eq!(violation_rate(&seqs, spec.value_count).unwrap(), 0.0);
    }

    #[test]
    fn first_token_marginal_is_uniform_on_nonzero() {
        let spec = CountdownSpec::new(4, 8).unwrap();
        let mut rng = path_rng(3, 0);
        let n = 100_000usize;
        let mut counts = vec![0usize; 8];
        for _ in 0..n {
            counts[generate_one(spec, &mut rng)[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        // χ² over 7 uniform cells; 18.48 is the 0.99 quantile at 6 dof.
        let expect = n as f64 / 7.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        assert!(chi2 < 18.48, "chi2 {chi2}");
    }

    #[test]
    fn exact_distribution_matches_generator() {
        let spec = CountdownSpec::new(4, 3).unwrap();
        let dist = exact_distribution(spec);
        let joint = dist.to_explicit().unwrap();
        let mut rng = path_rng(4, 0);
        let n = 100_000usize;
        let space = joint.space();
        let mut counts = vec![0.0; joint.len()];
        for _ in 0..n {
            let seq = generate_one(spec, &mut rng);
            counts[space.state_index(&seq).unwrap()] += 1.0;
        }
        let empirical =
            crate::dist::Pmf::normalized(space, counts).unwrap();
        assert!(empirical.total_variation(&joint).unwrap() <= 0.01);
    }

    #[test]
    fn constant_nonzero_sequences_always_violate() {
        let seqs = vec![vec![3usize; 5]];
        assert_eq!(violation_rate(&seqs, 8).unwrap(), 1.0);
    }

    #[test]
    fn uniform_random_pairs_match_enumerated_rate() {
        // Enumerate all (a, b) pairs of independent uniform tokens to get the
        // exact expected violation probability, then check empirically.
        let v = 8usize;
        let mut num = 0usize;
        let mut den = 0usize;
        for a in 0..v {
            for b in 0..v {
                den += 1;
                if a != 0 && b != a - 1 {
                    num += 1;
                }
            }
        }
        let exact = num as f64 / den as f64;
        assert!((exact - 0.765625).abs() < 1e-12);

        let mut rng = path_rng(5, 0);
        let seqs: Vec<Vec<usize>> = (0..50_000)
            .map(|_| vec![rng.random_range(0..v), rng.random_range(0..v)])
            .collect();
        let emp = violation_rate(&seqs, v).unwrap();
        assert!((emp - exact).abs() < 0.01, "empirical {emp} vs exact {exact}");
    }

    #[test]
    fn masks_count_as_violations() {
        let seqs = vec![vec![8usize, 7], vec![0, 8]];
        assert_eq!(violation_rate(&seqs, 8).unwrap(), 1.0);
    }
}
