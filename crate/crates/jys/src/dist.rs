//! Finite probability distributions over factorized state spaces.
//!
//! The product space has `vocab_size^num_dims` states addressed by a
//! mixed-radix index with dimension 0 least significant. All divergences
//! are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on enumerable product spaces (keeps brute-force vectors < ~1 GB).
pub const STATE_CAP: u64 = 10_000_000;

/// Mass-conservation tolerance for a valid pmf.
pub const PMF_TOL: f64 = 1e-12;

/// A factorized state space: `num_dims` positions over a shared vocabulary.
///
/// Absorbing kernels reserve index `vocab_size - 1` as the mask token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    num_dims: usize,
    vocab_size: usize,
}

impl StateSpace {
    pub fn new(num_dims: usize, vocab_size: usize) -> Result<Self> {
        if num_dims < 1 {
            return Err(Error::Domain("num_dims must be >= 1".into()));
        }
        if vocab_size < 2 {
            return Err(Error::Domain("vocab_size must be >= 2".into()));
        }
        Ok(StateSpace { num_dims, vocab_size })
    }

    pub fn num_dims(&self) -> usize {
        self.num_dims
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Total number of product states, enforcing the enumeration cap.
    pub fn total_states(&self) -> Result<usize> {
        let mut total: u128 = 1;
        for _ in 0..self.num_dims {
            total *= self.vocab_size as u128;
            if total > STATE_CAP as u128 {
                return Err(Error::SpaceTooLarge { states: total, cap: STATE_CAP });
            }
        }
        Ok(total as usize)
    }

    /// Whether the space fits under the brute-force enumeration cap.
    pub fn is_enumerable(&self) -> bool {
        self.total_states().is_ok()
    }

    /// Mixed-radix encoding of per-dimension values; dim 0 least significant.
    pub fn state_index(&self, values: &[usize]) -> Result<usize> {
        if values.len() != self.num_dims {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                self.num_dims,
                values.len()
            )));
        }
        let mut idx: usize = 0;
        let mut stride: usize = 1;
        for (d, &v) in values.iter().enumerate() {
            if v >= self.vocab_size {
                return Err(Error::Domain(format!(
                    "value {v} at dim {d} out of range (vocab {})",
                    self.vocab_size
                )));
            }
            idx += v * stride;
            stride *= self.vocab_size;
        }
        Ok(idx)
    }

    /// Inverse of [`state_index`](Self::state_index).
    pub fn state_values(&self, mut index: usize) -> Vec<usize> {
        let mut values = Vec::with_capacity(self.num_dims);
        for _ in 0..self.num_dims {
            values.push(index % self.vocab_size);
            index /= self.vocab_size;
        }
        values
    }

    /// The single-token marginal space.
    pub fn single_dim(&self) -> StateSpace {
        StateSpace { num_dims: 1, vocab_size: self.vocab_size }
    }
}

/// Explicit probability mass function over a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    space: StateSpace,
    probs: Vec<f64>,
}

impl Pmf {
    /// Validates nonnegativity and unit mass (within [`PMF_TOL`]).
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        let n = space.total_states()?;
        if probs.len() != n {
            return Err(Error::Domain(format!(
                "pmf length {} does not match space size {n}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(Error::Domain(format!("negative probability {p} at state {i}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PMF_TOL {
            return Err(Error::Domain(format!("pmf sums to {sum}, expected 1")));
        }
        Ok(Pmf { space, probs })
    }

    /// Like [`new`](Self::new) but rescales to unit mass first. Still rejects
    /// negatives and zero total mass.
    pub fn normalized(space: StateSpace, mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Domain("cannot normalize zero or invalid mass".into()));
        }
        for p in &mut probs {
            *p /= sum;
        }
        Pmf::new(space, probs)
    }

    pub fn uniform(space: StateSpace) -> Result<Self> {
        let n = space.total_states()?;
        Ok(Pmf { space, probs: vec![1.0 / n as f64; n] })
    }

    pub fn point_mass(space: StateSpace, index: usize) -> Result<Self> {
        let n = space.total_states()?;
        if index >= n {
            return Err(Error::Domain(format!("state {index} out of range {n}")));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(Pmf { space, probs })
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Marginal over one dimension.
    pub fn marginal(&self, dim: usize) -> Result<Pmf> {
        if dim >= self.space.num_dims {
            return Err(Error::Domain(format!("dim {dim} out of range")));
        }
        let s = self.space.vocab_size;
        let mut out = vec![0.0; s];
        for (idx, &p) in self.probs.iter().enumerate() {
            let v = (idx / s.pow(dim as u32)) % s;
            out[v] += p;
        }
        Pmf::new(self.space.single_dim(), out)
    }

    /// Total variation distance to another pmf on the same space.
    pub fn total_variation(&self, other: &Pmf) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::Domain("total variation across different spaces".into()));
        }
        let sum: f64 =
            self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum();
        Ok(0.5 * sum)
    }
}

/// `Σ_x p(x) ln(p(x)/q(x))` in nats; terms with `p(x) = 0` contribute 0.
///
/// A state with `p(x) > 0` and `q(x) = 0` is a support violation and is an
/// explicit error rather than a silent `+inf`.
pub fn kl_divergence(p: &Pmf, q: &Pmf) -> Result<f64> {
    if p.space != q.space {
        return Err(Error::Domain("KL divergence across different spaces".into()));
    }
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::SupportMismatch(format!(
                "q({i}) = 0 but p({i}) = {pi} > 0"
            )));
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}

/// Factorized pmf whose per-dimension marginals match the joint's.
pub fn product_of_marginals(joint: &Pmf) -> Result<Pmf> {
    let space = joint.space();
    let marginals: Vec<Pmf> =
        (0..space.num_dims()).map(|d| joint.marginal(d)).collect::<Result<_>>()?;
    let n = space.total_states()?;
    let mut probs = vec![0.0; n];
    for (idx, slot) in probs.iter_mut().enumerate() {
        let values = space.state_values(idx);
        *slot = values.iter().enumerate().map(|(d, &v)| marginals[d].prob(v)).product();
    }
    Pmf::normalized(space, probs)
}

/// Total correlation of a joint distribution: `KL(joint ‖ ⊗_d marginal_d)`.
///
/// For two dimensions this is the mutual information between the tokens;
/// in general it measures all the information shared across positions.
pub fn mutual_information(joint: &Pmf) -> Result<f64> {
    if joint.space().num_dims() < 2 {
        return Err(Error::DegenerateInput(
            "mutual information needs at least 2 dimensions".into(),
        ));
    }
    let product = product_of_marginals(joint)?;
    kl_divergence(joint, &product)
}

/// On-disk pmf representation: header plus flat probability array.
#[derive(Debug, Serialize, Deserialize)]
pub struct PmfFile {
    pub dims: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl PmfFile {
    pub fn from_pmf(pmf: &Pmf) -> Self {
        PmfFile {
            dims: pmf.space().num_dims(),
            vocab: pmf.space().vocab_size(),
            probs: pmf.probs().to_vec(),
        }
    }

    pub fn into_pmf(self) -> Result<Pmf> {
        let space = StateSpace::new(self.dims, self.vocab)?;
        Pmf::new(space, self.probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pmf(space: StateSpace, rng: &mut ChaCha8Rng) -> Pmf {
        let n = space.total_states().unwrap();
        let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        Pmf::normalized(space, raw).unwrap()
    }

    #[test]
    fn state_index_known_values() {
        let s4 = StateSpace::new(3, 4).unwrap();
        assert_eq!(s4.state_index(&[0, 0, 0]).unwrap(), 0);
        let s3 = StateSpace::new(2, 3).unwrap();
        assert_eq!(s3.state_index(&[1, 0]).unwrap(), 1);
        assert_eq!(s3.state_index(&[2, 1]).unwrap(), 5);
    }

    #[test]
    fn state_index_bijective_on_3x3() {
        let space = StateSpace::new(2, 3).unwrap();
        let mut seen = vec![false; 9];
        for a in 0..3 {
            for b in 0..3 {
                let idx = space.state_index(&[a, b]).unwrap();
                assert!(!seen[idx]);
                seen[idx] = true;
                assert_eq!(space.state_values(idx), vec![a, b]);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn state_index_rejects_out_of_range() {
        let space = StateSpace::new(2, 3).unwrap();
        assert!(space.state_index(&[3, 0]).is_err());
    }

    #[test]
    fn space_cap_enforced() {
        let space = StateSpace::new(16, 9).unwrap();
        assert!(matches!(space.total_states(), Err(Error::SpaceTooLarge { .. })));
        assert!(!space.is_enumerable());
    }

    #[test]
    fn kl_matches_frozen_values() {
        let space = StateSpace::new(1, 2).unwrap();
        let p = Pmf::new(space, vec![0.5, 0.5]).unwrap();
        let q = Pmf::new(space, vec![0.25, 0.75]).unwrap();
        // 0.5 ln 2 + 0.5 ln(2/3)
        assert!((kl_divergence(&p, &q).unwrap() - 0.143841).abs() < 1e-6);

        let p = Pmf::new(space, vec![1.0, 0.0]).unwrap();
        let q = Pmf::new(space, vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let space = StateSpace::new(2, 3).unwrap();
        let p = random_pmf(space, &mut rng);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_support_violation_is_error() {
        let space = StateSpace::new(1, 2).unwrap();
        let p = Pmf::new(space, vec![0.5, 0.5]).unwrap();
        let q = Pmf::new(space, vec![1.0, 0.0]).unwrap();
        assert!(matches!(kl_divergence(&p, &q), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn kl_nonnegative_zero_iff_equal_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let space = StateSpace::new(2, 3).unwrap();
        for _ in 0..100 {
            let p = random_pmf(space, &mut rng);
            let q = random_pmf(space, &mut rng);
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= 0.0);
            // Distinct random pmfs should have strictly positive divergence.
            assert!(kl > 0.0);
            assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn mi_of_independent_product_is_zero() {
        let space = StateSpace::new(2, 2).unwrap();
        let mx = [0.3, 0.7];
        let my = [0.6, 0.4];
        let mut probs = vec![0.0; 4];
        for (idx, slot) in probs.iter_mut().enumerate() {
            let v = space.state_values(idx);
            *slot = mx[v[0]] * my[v[1]];
        }
        let joint = Pmf::new(space, probs).unwrap();
        assert!(mutual_information(&joint).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn mi_of_correlated_pair_is_ln2() {
        let space = StateSpace::new(2, 2).unwrap();
        let mut probs = vec![0.0; 4];
        probs[space.state_index(&[0, 0]).unwrap()] = 0.5;
        probs[space.state_index(&[1, 1]).unwrap()] = 0.5;
        let joint = Pmf::new(space, probs).unwrap();
        let mi = mutual_information(&joint).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mi_rejects_single_dimension() {
        let space = StateSpace::new(1, 3).unwrap();
        let p = Pmf::uniform(space).unwrap();
        assert!(matches!(mutual_information(&p), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn mi_equals_kl_to_product_of_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = StateSpace::new(2, 3).unwrap();
        for _ in 0..20 {
            let joint = random_pmf(space, &mut rng);
            let product = product_of_marginals(&joint).unwrap();
            let lhs = mutual_information(&joint).unwrap();
            let rhs = kl_divergence(&joint, &product).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_of_marginals_idempotent_and_marginal_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let space = StateSpace::new(2, 3).unwrap();
        let joint = random_pmf(space, &mut rng);
        let prod = product_of_marginals(&joint).unwrap();
        let prod2 = product_of_marginals(&prod).unwrap();
        for d in 0..2 {
            let a = joint.marginal(d).unwrap();
            let b = prod.marginal(d).unwrap();
            assert!(a.total_variation(&b).unwrap() < 1e-12);
        }
        assert!(prod.total_variation(&prod2).unwrap() < 1e-12);
    }

    #[test]
    fn correlated_diag_product_is_uniform() {
        let space = StateSpace::new(2, 2).unwrap();
        let mut probs = vec![0.0; 4];
        probs[space.state_index(&[0, 0]).unwrap()] = 0.5;
        probs[space.state_index(&[1, 1]).unwrap()] = 0.5;
        let joint = Pmf::new(space, probs).unwrap();
        let prod = product_of_marginals(&joint).unwrap();
        for &p in prod.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn pmf_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let space = StateSpace::new(2, 3).unwrap();
        let pmf = random_pmf(space, &mut rng);
        let json = serde_json::to_string(&PmfFile::from_pmf(&pmf)).unwrap();
        assert!(json.starts_with("{\"dims\":2,\"vocab\":3"));
        let back: PmfFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_pmf().unwrap(), pmf);
    }

    proptest! {
        #[test]
        fn mixed_radix_round_trip(dims in 1usize..5, vocab in 2usize..6, seed in any::<u64>()) {
            let space = StateSpace::new(dims, vocab).unwrap();
            let n = space.total_states().unwrap();
            let idx = (seed as usize) % n;
            let values = space.state_values(idx);
            prop_assert_eq!(space.state_index(&values).unwrap(), idx);
        }

        #[test]
        fn normalized_pmf_is_valid(raw in proptest::collection::vec(0.0f64..10.0, 9)) {
            let space = StateSpace::new(2, 3).unwrap();
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let pmf = Pmf::normalized(space, raw).unwrap();
            let total: f64 = pmf.probs().iter().sum();
            prop_assert!((total - 1.0).abs() <= PMF_TOL);
        }
    }
}
