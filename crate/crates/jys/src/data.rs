//! Clean-data distributions feeding the exact reverse oracle.
//!
//! Two representations: an explicit joint pmf for brute-force work, and a
//! first-order Markov chain over positions for sequence lengths where
//! enumeration is impossible.

use serde::{Deserialize, Serialize};

use crate::dist::{Pmf, StateSpace};
use crate::error::{Error, Result};
use crate::linalg::Mat;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum DataDistribution {
    /// Full joint over `vocab^dims` states.
    Explicit(Pmf),
    /// Position chain: initial token distribution and `dims − 1` transition
    /// matrices (row-stochastic).
    Markov { initial: Vec<f64>, transitions: Vec<Mat> },
}

impl DataDistribution {
    pub fn explicit(pmf: Pmf) -> Self {
        DataDistribution::Explicit(pmf)
    }

    pub fn markov(initial: Vec<f64>, transitions: Vec<Mat>) -> Result<Self> {
        let s = initial.len();
        if s < 2 {
            return Err(Error::Domain("markov vocab must be >= 2".into()));
        }
        let sum: f64 = initial.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL || initial.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain("markov initial pmf invalid".into()));
        }
        if transitions.is_empty() {
            return Err(Error::Domain("markov needs at least one transition".into()));
        }
        for (i, m) in transitions.iter().enumerate() {
            if m.rows() != s || m.cols() != s {
                return Err(Error::Domain(format!("transition {i} has wrong shape")));
            }
            for r in 0..s {
                let row_sum: f64 = m.row(r).iter().sum();
                if (row_sum - 1.0).abs() > ROW_TOL || m.row(r).iter().any(|&p| p < 0.0) {
                    return Err(Error::Domain(format!(
                        "transition {i} row {r} is not stochastic"
                    )));
                }
            }
        }
        Ok(DataDistribution::Markov { initial, transitions })
    }

    /// Number of sequence positions.
    pub fn num_dims(&self) -> usize {
        match self {
            DataDistribution::Explicit(p) => p.space().num_dims(),
            DataDistribution::Markov { transitions, .. } => transitions.len() + 1,
        }
    }

    /// Token vocabulary of the clean data (mask excluded).
    pub fn vocab_size(&self) -> usize {
        match self {
            DataDistribution::Explicit(p) => p.space().vocab_size(),
            DataDistribution::Markov { initial, .. } => initial.len(),
        }
    }

    /// Joint probability of a clean sequence.
    pub fn prob(&self, values: &[usize]) -> Result<f64> {
        match self {
            DataDistribution::Explicit(p) => {
                Ok(p.prob(p.space().state_index(values)?))
            }
            DataDistribution::Markov { initial, transitions } => {
                if values.len() != transitions.len() + 1 {
                    return Err(Error::Domain("sequence length mismatch".into()));
                }
                let mut acc = initial[values[0]];
                for (d, m) in transitions.iter().enumerate() {
                    acc *= m[(values[d], values[d + 1])];
                }
                Ok(acc)
            }
        }
    }

    /// Expand to an explicit joint pmf; fails above the enumeration cap.
    pub fn to_explicit(&self) -> Result<Pmf> {
        match self {
            DataDistribution::Explicit(p) => Ok(p.clone()),
            DataDistribution::Markov { initial, .. } => {
                let space = StateSpace::new(self.num_dims(), initial.len())?;
                let n = space.total_states()?;
                let mut probs = vec![0.0; n];
                for (idx, slot) in probs.iter_mut().enumerate() {
                    *slot = self.prob(&space.state_values(idx))?;
                }
                Pmf::normalized(space, probs)
            }
        }
    }

    /// Draw one clean sequence.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<usize> {
        match self {
            DataDistribution::Explicit(p) => {
                let idx = sample_categorical(p.probs(), rng);
                p.space().state_values(idx)
            }
            DataDistribution::Markov { initial, transitions } => {
                let mut seq = Vec::with_capacity(transitions.len() + 1);
                let mut cur = sample_categorical(initial, rng);
                seq.push(cur);
                for m in transitions {
                    cur = sample_categorical(m.row(cur), rng);
                    seq.push(cur);
                }
                seq
            }
        }
    }
}

/// Inverse-CDF draw from unnormalized nonnegative weights.
pub fn sample_categorical<R: rand::Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "zero-mass categorical");
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// On-disk representation.
#[derive(Debug, Serialize, Deserialize)]
pub struct DataFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ExplicitData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markov: Option<MarkovData>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExplicitData {
    pub dims: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MarkovData {
    pub initial: Vec<f64>,
    /// One matrix per adjacent position pair, each `vocab × vocab` row-major
    /// as nested arrays.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

/// Parse the on-disk data-distribution JSON.
pub fn parse_data_file(text: &str) -> Result<DataFile> {
    serde_json::from_str(text).map_err(Error::from)
}

impl DataFile {
    pub fn from_distribution(data: &DataDistribution) -> Self {
        match data {
            DataDistribution::Explicit(p) => DataFile {
                explicit: Some(ExplicitData {
                    dims: p.space().num_dims(),
                    vocab: p.space().vocab_size(),
                    probs: p.probs().to_vec(),
                }),
                markov: None,
            },
            DataDistribution::Markov { initial, transitions } => DataFile {
                explicit: None,
                markov: Some(MarkovData {
                    initial: initial.clone(),
                    transitions: transitions
                        .iter()
                        .map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect())
                        .collect(),
                }),
            },
        }
    }

    pub fn into_distribution(self) -> Result<DataDistribution> {
        match (self.explicit, self.markov) {
            (Some(e), None) => {
                let space = StateSpace::new(e.dims, e.vocab)?;
                Ok(DataDistribution::Explicit(Pmf::new(space, e.probs)?))
            }
            (None, Some(m)) => {
                let transitions =
                    m.transitions.iter().map(|rows| Mat::from_rows(rows)).collect();
                DataDistribution::markov(m.initial, transitions)
            }
            _ => Err(Error::Config(
                "data file must contain exactly one of `explicit` or `markov`".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_markov() -> DataDistribution {
        // Two positions over 3 tokens.
        let initial = vec![0.5, 0.3, 0.2];
        let t = Mat::from_rows(&[
            vec![0.1, 0.6, 0.3],
            vec![0.4, 0.4, 0.2],
            vec![0.25, 0.25, 0.5],
        ]);
        DataDistribution::markov(initial, vec![t]).unwrap()
    }

    #[test]
    fn markov_expansion_matches_chain_probabilities() {
        let data = toy_markov();
        let joint = data.to_explicit().unwrap();
        let space = joint.space();
        for idx in 0..joint.len() {
            let seq = space.state_values(idx);
            assert!((joint.prob(idx) - data.prob(&seq).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn markov_rejects_bad_rows() {
        let initial = vec![0.5, 0.5];
        let t = Mat::from_rows(&[vec![0.9, 0.2], vec![0.5, 0.5]]);
        assert!(DataDistribution::markov(initial, vec![t]).is_err());
    }

    #[test]
    fn sampling_matches_distribution() {
        let data = toy_markov();
        let joint = data.to_explicit().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let mut counts = vec![0usize; joint.len()];
        for _ in 0..n {
            let seq = data.sample(&mut rng);
            counts[joint.space().state_index(&seq).unwrap()] += 1;
        }
        for (idx, &c) in counts.iter().enumerate() {
            let emp = c as f64 / n as f64;
            assert!((emp - joint.prob(idx)).abs() < 0.01);
        }
    }

    #[test]
    fn file_round_trip() {
        let data = toy_markov();
        let json = serde_json::to_string(&DataFile::from_distribution(&data)).unwrap();
        let back: DataFile = serde_json::from_str(&json).unwrap();
        let dist = back.into_distribution().unwrap();
        let a = data.to_explicit().unwrap();
        let b = dist.to_explicit().unwrap();
        assert!(a.total_variation(&b).unwrap() < 1e-15);
    }
}
