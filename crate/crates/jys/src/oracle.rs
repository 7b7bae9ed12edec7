//! Exact reverse-process oracle.
//!
//! Replaces a learned denoiser with exact computation from an explicit or
//! Markov-structured data distribution: noisy marginals `q_t`, score ratios,
//! denoising posteriors, and the backward rate rows used by every sampler
//! and estimator.
//!
//! The backward rate for a single-token change `x → y` (dim `d`: `x^d → v`) is
//! `R̃_t(x, y) = R_t(y, x) · q_t(y) / q_t(x)`; multi-token changes carry rate
//! zero because the forward process is factorized.

use crate::data::DataDistribution;
use crate::dist::{Pmf, StateSpace};
use crate::error::{Error, Result};
use crate::kernels::{FactorizedKernel, KernelFamily};
use crate::linalg::Mat;

/// Backward rate row at a base state: for each dimension and target value the
/// rate of jumping there, zero at the base value itself.
#[derive(Debug, Clone)]
pub struct ReverseRates {
    pub state: Vec<usize>,
    pub time: f64,
    /// `rates[d][v]` = rate of setting dim `d` to `v`; `rates[d][state[d]] = 0`.
    pub rates: Vec<Vec<f64>>,
    pub per_dim_exit: Vec<f64>,
    pub total_exit: f64,
}

impl ReverseRates {
    pub fn rate(&self, dim: usize, target: usize) -> f64 {
        self.rates[dim][target]
    }
}

/// Exact oracle over `(kernel, data)`. Immutable after construction; all
/// queries are pure.
#[derive(Debug, Clone)]
pub struct ReverseOracle {
    kernel: FactorizedKernel,
    data: DataDistribution,
    obs_space_dims: usize,
    /// Mixing weight toward the uniform product data law when evaluating
    /// probabilities and rates. Zero keeps the strict contract (zero-support
    /// states raise errors); a tiny positive value keeps rate rows defined at
    /// the contradictory contexts parallel sampling can produce, standing in
    /// for a learned model's graceful extrapolation.
    smoothing: f64,
}

impl ReverseOracle {
    pub fn new(kernel: FactorizedKernel, data: DataDistribution) -> Result<Self> {
        let expected = match kernel.family {
            KernelFamily::Absorbing => kernel.vocab_size - 1,
            _ => kernel.vocab_size,
        };
        if data.vocab_size() != expected {
            return Err(Error::Config(format!(
                "data vocab {} incompatible with {} kernel vocab {} (expected {expected})",
                data.vocab_size(),
                kernel.family,
                kernel.vocab_size
            )));
        }
        let obs_space_dims = data.num_dims();
        Ok(ReverseOracle { kernel, data, obs_space_dims, smoothing: 0.0 })
    }

    /// Same oracle with support smoothing enabled: the data law is blended
    /// toward uniform locally (per transition for Markov chains, per state
    /// for explicit joints), so contradictory contexts cost a factor `eps`
    /// where the contradiction sits instead of zeroing every position.
    pub fn with_smoothing(mut self, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Domain(format!("smoothing must be in [0,1), got {eps}")));
        }
        if eps == 0.0 {
            return Ok(self);
        }
        self.data = match self.data {
            DataDistribution::Explicit(p) => {
                let n = p.len() as f64;
                let probs =
                    p.probs().iter().map(|&v| (1.0 - eps) * v + eps / n).collect();
                DataDistribution::Explicit(crate::dist::Pmf::new(p.space(), probs)?)
            }
            DataDistribution::Markov { initial, transitions } => {
                let s = initial.len() as f64;
                let initial =
                    initial.iter().map(|&v| (1.0 - eps) * v + eps / s).collect();
                let transitions = transitions
                    .into_iter()
                    .map(|m| {
                        let rows: Vec<Vec<f64>> = (0..m.rows())
                            .map(|r| {
                                m.row(r)
                                    .iter()
                                    .map(|&v| (1.0 - eps) * v + eps / s)
                                    .collect()
                            })
                            .collect();
                        crate::linalg::Mat::from_rows(&rows)
                    })
                    .collect();
                DataDistribution::Markov { initial, transitions }
            }
        };
        self.smoothing = eps;
        Ok(self)
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn kernel(&self) -> &FactorizedKernel {
        &self.kernel
    }

    pub fn data(&self) -> &DataDistribution {
        &self.data
    }

    pub fn num_dims(&self) -> usize {
        self.obs_space_dims
    }

    /// Observed state space (mask token included for absorbing kernels).
    pub fn observed_space(&self) -> StateSpace {
        StateSpace::new(self.obs_space_dims, self.kernel.vocab_size).expect("valid space")
    }

    /// Clean-data state space.
    pub fn data_space(&self) -> StateSpace {
        StateSpace::new(self.obs_space_dims, self.data.vocab_size()).expect("valid space")
    }

    pub fn horizon(&self) -> f64 {
        self.kernel.horizon()
    }

    /// Per-token corruption kernel rows for clean tokens: `K[a][y] = q_{t|0}(y|a)`.
    fn clean_token_kernel(&self, t: f64) -> Result<Mat> {
        let dsigma = self.kernel.schedule.sigma(t)?;
        let full = self.kernel.transition_kernel_dsigma(dsigma)?;
        let s_dat = self.data.vocab_size();
        let s_obs = self.kernel.vocab_size;
        let mut rows = Vec::with_capacity(s_dat);
        for a in 0..s_dat {
            rows.push(full.row(a)[..s_obs].to_vec());
        }
        Ok(Mat::from_rows(&rows))
    }

    /// Full noisy marginal `q_t` as a pmf over the observed space.
    ///
    /// Needs an enumerable space; Markov data of any length still works
    /// through the per-query path ([`qt_prob`](Self::qt_prob)).
    pub fn qt_full(&self, t: f64) -> Result<Pmf> {
        let space = self.observed_space();
        let n = space.total_states()?;
        let k = self.clean_token_kernel(t)?;
        let s_obs = space.vocab_size();
        let s_dat = self.data.vocab_size();

        // Start from the clean joint embedded in observed vocabulary, then
        // contract one dimension at a time with K.
        let data_space = self.data_space();
        let dims = self.obs_space_dims;
        let mut cur = vec![0.0; n];
        for idx in 0..data_space.total_states()? {
            let values = data_space.state_values(idx);
            let p = self.data.prob(&values)?;
            if p > 0.0 {
                cur[space.state_index(&values)?] += p;
            }
        }
        for d in 0..dims {
            let stride = s_obs.pow(d as u32);
            let mut next = vec![0.0; n];
            for (idx, &p) in cur.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let a = (idx / stride) % s_obs;
                if a >= s_dat {
                    // Mask has zero clean mass; nothing to corrupt.
                    continue;
                }
                let base = idx - a * stride;
                for (y, &kay) in k.row(a).iter().enumerate() {
                    if kay > 0.0 {
                        next[base + y * stride] += p * kay;
                    }
                }
            }
            cur = next;
        }
        Pmf::normalized(space, cur)
    }

    /// `q_t(x)` for one observed state.
    pub fn qt_prob(&self, x: &[usize], t: f64) -> Result<f64> {
        Ok(self.single_site_table(x, t)?.0)
    }

    /// `q_t(x)` together with every single-site modification
    /// `q_t(x with dim d set to v)`, as `table[d][v]`.
    pub fn single_site_table(&self, x: &[usize], t: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        if x.len() != self.obs_space_dims {
            return Err(Error::Domain("state length mismatch".into()));
        }
        let s_obs = self.kernel.vocab_size;
        for (d, &v) in x.iter().enumerate() {
            if v >= s_obs {
                return Err(Error::Domain(format!("token {v} at dim {d} out of range")));
            }
        }
        let k = self.clean_token_kernel(t)?;
        let (qx, table) = match &self.data {
            DataDistribution::Explicit(p) => self.single_site_table_explicit(p, &k, x),
            DataDistribution::Markov { initial, transitions } => {
                self.single_site_table_markov(initial, transitions, &k, x)
            }
        };
        Ok((qx, table))
    }

    fn single_site_table_explicit(
        &self,
        p: &Pmf,
        k: &Mat,
        x: &[usize],
    ) -> (f64, Vec<Vec<f64>>) {
        let dims = self.obs_space_dims;
        let s_obs = self.kernel.vocab_size;
        let space = p.space();
        let mut qx = 0.0;
        let mut table = vec![vec![0.0; s_obs]; dims];
        let mut factors = vec![0.0; dims];
        let mut prefix = vec![0.0; dims + 1];
        let mut suffix = vec![0.0; dims + 1];
        for idx in 0..p.len() {
            let w = p.prob(idx);
            if w == 0.0 {
                continue;
            }
            let x0 = space.state_values(idx);
            for d in 0..dims {
                factors[d] = k[(x0[d], x[d])];
            }
            prefix[0] = 1.0;
            for d in 0..dims {
                prefix[d + 1] = prefix[d] * factors[d];
            }
            suffix[dims] = 1.0;
            for d in (0..dims).rev() {
                suffix[d] = suffix[d + 1] * factors[d];
            }
            qx += w * prefix[dims];
            for d in 0..dims {
                let rest = w * prefix[d] * suffix[d + 1];
                if rest == 0.0 {
                    continue;
                }
                for (v, slot) in table[d].iter_mut().enumerate() {
                    *slot += rest * k[(x0[d], v)];
                }
            }
        }
        (qx, table)
    }

    fn single_site_table_markov(
        &self,
        initial: &[f64],
        transitions: &[Mat],
        k: &Mat,
        x: &[usize],
    ) -> (f64, Vec<Vec<f64>>) {
        let dims = self.obs_space_dims;
        let s_dat = initial.len();
        let s_obs = self.kernel.vocab_size;

        // Forward sweep: f[d][a] sums the chain over positions < d with the
        // observation factors applied, landing on clean token a at position d.
        let mut f = vec![vec![0.0; s_dat]; dims];
        f[0].copy_from_slice(initial);
        for d in 1..dims {
            let m = &transitions[d - 1];
            for a in 0..s_dat {
                let w = f[d - 1][a] * k[(a, x[d - 1])];
                if w == 0.0 {
                    continue;
                }
                for b in 0..s_dat {
                    f[d][b] += w * m[(a, b)];
                }
            }
        }
        // Backward sweep: g[d][a] sums the chain over positions > d.
        let mut g = vec![vec![0.0; s_dat]; dims];
        g[dims - 1].iter_mut().for_each(|v| *v = 1.0);
        for d in (0..dims - 1).rev() {
            let m = &transitions[d];
            for a in 0..s_dat {
                let mut acc = 0.0;
                for b in 0..s_dat {
                    acc += m[(a, b)] * k[(b, x[d + 1])] * g[d + 1][b];
                }
                g[d][a] = acc;
            }
        }

        let mut table = vec![vec![0.0; s_obs]; dims];
        let mut qx = 0.0;
        for d in 0..dims {
            for a in 0..s_dat {
                let w = f[d][a] * g[d][a];
                if w == 0.0 {
                    continue;
                }
                for (v, slot) in table[d].iter_mut().enumerate() {
                    *slot += w * k[(a, v)];
                }
            }
            if d == 0 {
                qx = table[0][x[0]];
            }
        }
        (qx, table)
    }

    /// Score ratio `q_t(y)/q_t(x)` where `y = x` with dim `d` set to `v`.
    pub fn score_ratio(&self, x: &[usize], dim: usize, v: usize, t: f64) -> Result<f64> {
        if dim >= self.obs_space_dims {
            return Err(Error::Domain(format!("dim {dim} out of range")));
        }
        if x[dim] == v {
            return Ok(1.0);
        }
        let (qx, table) = self.single_site_table(x, t)?;
        if qx <= 0.0 {
            return Err(Error::ZeroSupport { t, state: x.to_vec() });
        }
        Ok(table[dim][v] / qx)
    }

    /// Exact denoising posterior `q_{0|t}(x0 | x)` over the clean joint space.
    /// Explicit data only; use
    /// [`denoising_token_marginals`](Self::denoising_token_marginals) for
    /// Markov data.
    pub fn denoising_posterior(&self, x: &[usize], t: f64) -> Result<Pmf> {
        let p = match &self.data {
            DataDistribution::Explicit(p) => p,
            DataDistribution::Markov { .. } => {
                return Err(Error::Domain(
                    "joint denoising posterior requires explicit data".into(),
                ))
            }
        };
        let k = self.clean_token_kernel(t)?;
        let space = p.space();
        let mut weights = vec![0.0; p.len()];
        let mut total = 0.0;
        for (idx, slot) in weights.iter_mut().enumerate() {
            let prior = p.prob(idx);
            if prior == 0.0 {
                continue;
            }
            let x0 = space.state_values(idx);
            let like: f64 = (0..x.len()).map(|d| k[(x0[d], x[d])]).product();
            *slot = prior * like;
            total += *slot;
        }
        if total <= 0.0 {
            return Err(Error::ZeroSupport { t, state: x.to_vec() });
        }
        Pmf::normalized(space, weights)
    }

    /// Per-position posterior marginals `P(x0^d = a | x_t = x)`, `dims × data_vocab`.
    pub fn denoising_token_marginals(&self, x: &[usize], t: f64) -> Result<Vec<Vec<f64>>> {
        let s_dat = self.data.vocab_size();
        let k = self.clean_token_kernel(t)?;
        match &self.data {
            DataDistribution::Explicit(p) => {
                let space = p.space();
                let dims = self.obs_space_dims;
                let mut acc = vec![vec![0.0; s_dat]; dims];
                let mut total = 0.0;
                for idx in 0..p.len() {
                    let prior = p.prob(idx);
                    if prior == 0.0 {
                        continue;
                    }
                    let x0 = space.state_values(idx);
                    let w: f64 =
                        prior * (0..dims).map(|d| k[(x0[d], x[d])]).product::<f64>();
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    for d in 0..dims {
                        acc[d][x0[d]] += w;
                    }
                }
                if total <= 0.0 {
                    return Err(Error::ZeroSupport { t, state: x.to_vec() });
                }
                for row in &mut acc {
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                Ok(acc)
            }
            DataDistribution::Markov { initial, transitions } => {
                let dims = self.obs_space_dims;
                let (qx, _) = self.single_site_table(x, t)?;
                if qx <= 0.0 {
                    return Err(Error::ZeroSupport { t, state: x.to_vec() });
                }
                // Reuse the sweeps: posterior(d, a) ∝ f[d][a]·K(a, x^d)·g[d][a].
                let s_dat = initial.len();
                let mut f = vec![vec![0.0; s_dat]; dims];
                f[0].copy_from_slice(initial);
                for d in 1..dims {
                    let m = &transitions[d - 1];
                    for a in 0..s_dat {
                        let w = f[d - 1][a] * k[(a, x[d - 1])];
                        if w == 0.0 {
                            continue;
                        }
                        for b in 0..s_dat {
                            f[d][b] += w * m[(a, b)];
                        }
                    }
                }
                let mut g = vec![vec![0.0; s_dat]; dims];
                g[dims - 1].iter_mut().for_each(|v| *v = 1.0);
                for d in (0..dims - 1).rev() {
                    let m = &transitions[d];
                    for a in 0..s_dat {
                        let mut acc = 0.0;
                        for b in 0..s_dat {
                            acc += m[(a, b)] * k[(b, x[d + 1])] * g[d + 1][b];
                        }
                        g[d][a] = acc;
                    }
                }
                let mut out = vec![vec![0.0; s_dat]; dims];
                for d in 0..dims {
                    let mut total = 0.0;
                    for a in 0..s_dat {
                        let w = f[d][a] * k[(a, x[d])] * g[d][a];
                        out[d][a] = w;
                        total += w;
                    }
                    if total <= 0.0 {
                        return Err(Error::ZeroSupport { t, state: x.to_vec() });
                    }
                    for v in &mut out[d] {
                        *v /= total;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Backward rate row at `(x, t)`.
    pub fn reverse_rates(&self, x: &[usize], t: f64) -> Result<ReverseRates> {
        let (qx, table) = self.single_site_table(x, t)?;
        if qx <= 0.0 {
            return Err(Error::ZeroSupport { t, state: x.to_vec() });
        }
        let beta = self.kernel.schedule.beta(t)?;
        let s_obs = self.kernel.vocab_size;
        let dims = self.obs_space_dims;
        let mut rates = vec![vec![0.0; s_obs]; dims];
        let mut per_dim_exit = vec![0.0; dims];
        for d in 0..dims {
            for v in 0..s_obs {
                if v == x[d] {
                    continue;
                }
                // Forward rate of the token moving v -> x^d, times the score.
                let fwd = beta * self.kernel.unit_rate_entry(v, x[d]);
                if fwd == 0.0 {
                    continue;
                }
                let r = fwd * table[d][v] / qx;
                rates[d][v] = r;
                per_dim_exit[d] += r;
            }
        }
        let total_exit = per_dim_exit.iter().sum();
        Ok(ReverseRates { state: x.to_vec(), time: t, rates, per_dim_exit, total_exit })
    }

    /// Corrupt a clean sequence forward to time `t`.
    pub fn corrupt<R: rand::Rng>(&self, x0: &[usize], t: f64, rng: &mut R) -> Result<Vec<usize>> {
        let k = self.clean_token_kernel(t)?;
        Ok(x0.iter().map(|&a| crate::data::sample_categorical(k.row(a), rng)).collect())
    }

    /// Draw `X_0 ~ p_data` and corrupt it to time `t`.
    pub fn sample_qt<R: rand::Rng>(&self, t: f64, rng: &mut R) -> Result<Vec<usize>> {
        let x0 = self.data.sample(rng);
        self.corrupt(&x0, t, rng)
    }

    /// Draw an initial reverse-process state from the factorized stationary
    /// distribution `Π_d π`.
    pub fn sample_stationary<R: rand::Rng>(&self, rng: &mut R) -> Vec<usize> {
        let pi = self.kernel.stationary_distribution();
        (0..self.obs_space_dims)
            .map(|_| crate::data::sample_categorical(pi.probs(), rng))
            .collect()
    }

    /// Most likely clean token per position given `x`; the final readout that
    /// replaces the singular hop from `t_min` to exactly zero.
    pub fn denoising_argmax(&self, x: &[usize], t: f64) -> Result<Vec<usize>> {
        let marg = self.denoising_token_marginals(x, t)?;
        Ok(marg
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect())
    }
}
