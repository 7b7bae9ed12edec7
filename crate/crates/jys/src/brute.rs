//! Ground truth on small product spaces: exact reverse marginals by ODE
//! integration, exact schedule-induced distributions, compounding-error
//! reports, and numerical verification of the two KL bounds.

use rand::Rng;

use crate::dist::{kl_divergence, product_of_marginals, Pmf, StateSpace};
use crate::error::{Error, Result};
use crate::klub::{path_kl_functional, KlubEstimate, RateEvaluator};
use crate::linalg::Mat;
use crate::oracle::ReverseOracle;
use crate::samplers::{Path, PathEvent};

/// Forward-marginal identity tolerance: integrated reverse marginals must
/// reproduce `q_t` within this total variation.
pub const MARGINAL_IDENTITY_TV: f64 = 1e-6;

const ODE_TOL: f64 = 1e-10;

/// Reverse-generator data at a fixed time: noisy marginal plus rate scale.
struct GeneratorAt {
    q: Vec<f64>,
    beta: f64,
}

fn generator_at(oracle: &ReverseOracle, t: f64) -> Result<GeneratorAt> {
    let q = oracle.qt_full(t)?.probs().to_vec();
    let beta = oracle.kernel().schedule.beta(t)?;
    Ok(GeneratorAt { q, beta })
}

/// Apply the reverse generator to each row of `rows` in place of a matvec:
/// `out = row · R̃_t` on the full product space.
fn apply_reverse_generator(
    oracle: &ReverseOracle,
    gen: &GeneratorAt,
    space: StateSpace,
    row: &[f64],
    out: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|v| *v = 0.0);
    let s_obs = space.vocab_size();
    let dims = space.num_dims();
    let kernel = oracle.kernel();
    let mut strides = Vec::with_capacity(dims);
    let mut stride = 1usize;
    for _ in 0..dims {
        strides.push(stride);
        stride *= s_obs;
    }
    for (xi, &px) in row.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        if gen.q[xi] <= 0.0 {
            if px.abs() > 1e-9 {
                return Err(Error::Integration(format!(
                    "mass {px} on zero-support state {xi}"
                )));
            }
            continue;
        }
        let values = space.state_values(xi);
        for d in 0..dims {
            let base = xi - values[d] * strides[d];
            for v in 0..s_obs {
                if v == values[d] {
                    continue;
                }
                let fwd = kernel.unit_rate_entry(v, values[d]);
                if fwd == 0.0 {
                    continue;
                }
                let yi = base + v * strides[d];
                let rate = gen.beta * fwd * gen.q[yi] / gen.q[xi];
                if rate == 0.0 {
                    continue;
                }
                out[yi] += px * rate;
                out[xi] -= px * rate;
            }
        }
    }
    Ok(())
}

/// Integrate several reverse-marginal rows simultaneously from `t_hi` down to
/// `t_lo` with adaptive RK4 (step doubling, shared steps across rows).
fn integrate_reverse_rows(
    oracle: &ReverseOracle,
    t_hi: f64,
    t_lo: f64,
    rows: Vec<Vec<f64>>,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(t_hi > t_lo) {
        return Err(Error::Interval { s: t_lo, t: t_hi });
    }
    let space = oracle.observed_space();
    let span = t_hi - t_lo;
    let mut state = rows;
    let mut tau = 0.0;
    let mut h = span / 16.0;
    let min_h = span * 1e-12;
    let n_rows = state.len();
    let n = state[0].len();

    let derivative = |tau: f64, m: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let gen = generator_at(oracle, t_hi - tau)?;
        let mut out = vec![vec![0.0; n]; n_rows];
        for (r, row) in m.iter().enumerate() {
            apply_reverse_generator(oracle, &gen, space, row, &mut out[r])?;
        }
        Ok(out)
    };

    let rk4 = |tau: f64, m: &[Vec<f64>], h: f64| -> Result<Vec<Vec<f64>>> {
        let k1 = derivative(tau, m)?;
        let m2 = add_scaled(m, &k1, 0.5 * h);
        let k2 = derivative(tau + 0.5 * h, &m2)?;
        let m3 = add_scaled(m, &k2, 0.5 * h);
        let k3 = derivative(tau + 0.5 * h, &m3)?;
        let m4 = add_scaled(m, &k3, h);
        let k4 = derivative(tau + h, &m4)?;
        let mut out = m.to_vec();
        for r in 0..m.len() {
            for i in 0..m[0].len() {
                out[r][i] +=
                    h / 6.0 * (k1[r][i] + 2.0 * k2[r][i] + 2.0 * k3[r][i] + k4[r][i]);
            }
        }
        Ok(out)
    };

    while tau < span {
        if tau + h > span {
            h = span - tau;
        }
        let full = rk4(tau, &state, h)?;
        let half = rk4(tau, &state, 0.5 * h)?;
        let two_half = rk4(tau + 0.5 * h, &half, 0.5 * h)?;
        let mut err: f64 = 0.0;
        for r in 0..state.len() {
            for i in 0..n {
                err = err.max((two_half[r][i] - full[r][i]).abs() / 15.0);
            }
        }
        if err <= tol {
            state = two_half;
            tau += h;
            let grow = if err == 0.0 { 5.0 } else { 0.9 * (tol / err).powf(0.2) };
            h *= grow.clamp(0.2, 5.0);
        } else {
            h *= (0.9 * (tol / err).powf(0.2)).clamp(0.05, 0.9);
            if h < min_h {
                return Err(Error::Integration(format!(
                    "step size underflow at tau={tau} (err {err})"
                )));
            }
        }
    }
    Ok(state)
}

fn add_scaled(m: &[Vec<f64>], k: &[Vec<f64>], a: f64) -> Vec<Vec<f64>> {
    m.iter()
        .zip(k)
        .map(|(row, krow)| row.iter().zip(krow).map(|(x, dx)| x + a * dx).collect())
        .collect()
}

fn clamp_to_pmf(space: StateSpace, mut probs: Vec<f64>) -> Result<Pmf> {
    for p in &mut probs {
        if *p < 0.0 {
            if *p < -1e-8 {
                return Err(Error::Integration(format!("negative probability {p}")));
            }
            *p = 0.0;
        }
    }
    Pmf::normalized(space, probs)
}

/// Integrate the exact reverse equation from an arbitrary start law at
/// `t_hi` down to `t_lo`.
pub fn reverse_endpoint_from(
    oracle: &ReverseOracle,
    t_hi: f64,
    t_lo: f64,
    start: &Pmf,
) -> Result<Pmf> {
    let rows =
        integrate_reverse_rows(oracle, t_hi, t_lo, vec![start.probs().to_vec()], ODE_TOL)?;
    clamp_to_pmf(oracle.observed_space(), rows.into_iter().next().unwrap())
}

/// Exact reverse marginals along a decreasing time grid, starting from
/// `q_{grid[0]}`. Because the reverse CTMC is exact, each integrated marginal
/// must reproduce `q_t`; a deviation beyond [`MARGINAL_IDENTITY_TV`] is an
/// integration error.
pub fn exact_reverse_marginals(oracle: &ReverseOracle, grid: &[f64]) -> Result<Vec<Pmf>> {
    if grid.len() < 2 {
        return Err(Error::Domain("grid needs at least two times".into()));
    }
    for w in grid.windows(2) {
        if !(w[0] > w[1]) {
            return Err(Error::Domain("grid must strictly decrease".into()));
        }
    }
    let space = oracle.observed_space();
    let mut out = Vec::with_capacity(grid.len());
    let mut cur = oracle.qt_full(grid[0])?.probs().to_vec();
    out.push(Pmf::normalized(space, cur.clone())?);
    for w in grid.windows(2) {
        let rows = integrate_reverse_rows(oracle, w[0], w[1], vec![cur], ODE_TOL)?;
        cur = rows.into_iter().next().unwrap();
        let pmf = clamp_to_pmf(space, cur.clone())?;
        let reference = oracle.qt_full(w[1])?;
        let tv = pmf.total_variation(&reference)?;
        if tv > MARGINAL_IDENTITY_TV {
            return Err(Error::Integration(format!(
                "reverse integration drifted from q_t at t={}: TV {tv:.3e}",
                w[1]
            )));
        }
        out.push(pmf);
    }
    Ok(out)
}

/// All exact conditionals `ℙ_{t|s}(· | x_s)` as rows, for start states marked
/// in `active`. Inactive rows are returned as zeros.
fn conditional_rows(
    oracle: &ReverseOracle,
    s: f64,
    t: f64,
    active: &[bool],
) -> Result<Vec<Vec<f64>>> {
    let space = oracle.observed_space();
    let n = space.total_states()?;
    let mut rows = Vec::new();
    let mut which = Vec::new();
    for (x, &on) in active.iter().enumerate() {
        if on {
            let mut row = vec![0.0; n];
            row[x] = 1.0;
            rows.push(row);
            which.push(x);
        }
    }
    let integrated = integrate_reverse_rows(oracle, s, t, rows, ODE_TOL)?;
    let mut out = vec![vec![0.0; n]; n];
    for (row, x) in integrated.into_iter().zip(which) {
        out[x] = row;
    }
    Ok(out)
}

/// Schedule step kernel for exact distribution propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleStep {
    /// First-order τ-leap rows.
    Euler,
    /// Hold-rate τ-leap rows (at most one jump per dimension).
    ExactHold,
    /// The idealized parallel kernel: the product of the exact conditional
    /// per-dimension marginals. This is the step the telescoped CDE bound
    /// speaks about; the τ-leap kernels add marginal error on top of it.
    ProductMarginal,
}

/// Per-dimension step distributions for a τ-leap step from state `x`.
fn tau_leap_row_dists(
    oracle: &ReverseOracle,
    gen: &GeneratorAt,
    space: StateSpace,
    x: &[usize],
    xi: usize,
    delta: f64,
    step: ScheduleStep,
) -> Vec<Vec<f64>> {
    let s_obs = space.vocab_size();
    let dims = space.num_dims();
    let kernel = oracle.kernel();
    let mut strides = Vec::with_capacity(dims);
    let mut stride = 1usize;
    for _ in 0..dims {
        strides.push(stride);
        stride *= s_obs;
    }
    let mut dists = vec![vec![0.0; s_obs]; dims];
    for d in 0..dims {
        let base = xi - x[d] * strides[d];
        let mut rates = vec![0.0; s_obs];
        let mut lambda = 0.0;
        for v in 0..s_obs {
            if v == x[d] {
                continue;
            }
            let fwd = kernel.unit_rate_entry(v, x[d]);
            if fwd == 0.0 {
                continue;
            }
            let r = gen.beta * fwd * gen.q[base + v * strides[d]] / gen.q[xi];
            rates[v] = r;
            lambda += r;
        }
        let dist = &mut dists[d];
        if lambda <= 0.0 {
            dist[x[d]] = 1.0;
            continue;
        }
        match step {
            ScheduleStep::Euler => {
                let mass = lambda * delta;
                if mass >= 1.0 {
                    for v in 0..s_obs {
                        dist[v] = rates[v] / lambda;
                    }
                } else {
                    for v in 0..s_obs {
                        dist[v] = rates[v] * delta;
                    }
                    dist[x[d]] = 1.0 - mass;
                }
            }
            ScheduleStep::ExactHold => {
                let stay = (-lambda * delta).exp();
                for v in 0..s_obs {
                    dist[v] = rates[v] / lambda * (1.0 - stay);
                }
                dist[x[d]] = stay;
            }
            ScheduleStep::ProductMarginal => unreachable!("handled by caller"),
        }
    }
    dists
}

fn scatter_product(
    space: StateSpace,
    weight: f64,
    dists: &[Vec<f64>],
    out: &mut [f64],
) {
    let s = space.vocab_size();
    let dims = space.num_dims();
    // Iterative outer product over dimensions, dim 0 least significant.
    let mut acc = vec![weight];
    for dist in dists.iter().take(dims) {
        let mut next = vec![0.0; acc.len() * s];
        for (i, &a) in acc.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (v, &p) in dist.iter().enumerate() {
                next[v * acc.len() + i] = a * p;
            }
        }
        acc = next;
    }
    for (i, &a) in acc.iter().enumerate() {
        if a != 0.0 {
            out[i] += a;
        }
    }
}

fn marginals_of_row(space: StateSpace, row: &[f64]) -> Vec<Vec<f64>> {
    let s = space.vocab_size();
    let dims = space.num_dims();
    let mut out = vec![vec![0.0; s]; dims];
    for (idx, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut rest = idx;
        for dist in out.iter_mut().take(dims) {
            dist[rest % s] += p;
            rest /= s;
        }
    }
    // Normalize each marginal against integration round-off.
    for dist in &mut out {
        let sum: f64 = dist.iter().sum();
        if sum > 0.0 {
            for v in dist.iter_mut() {
                *v = (*v).max(0.0) / sum;
            }
        }
    }
    out
}

/// Exact law of the schedule-driven parallel sampler: per-step product
/// kernels propagated by full matrix-vector products.
pub fn schedule_distribution(
    oracle: &ReverseOracle,
    schedule: &crate::scheduler::Schedule,
    step: ScheduleStep,
) -> Result<Pmf> {
    let space = oracle.observed_space();
    let n = space.total_states()?;
    let times = schedule.timesteps();
    let mut cur = oracle.qt_full(times[0])?.probs().to_vec();
    for w in times.windows(2) {
        let (s, t) = (w[0], w[1]);
        let mut next = vec![0.0; n];
        match step {
            ScheduleStep::ProductMarginal => {
                let active: Vec<bool> = cur.iter().map(|&p| p > 0.0).collect();
                let cond = conditional_rows(oracle, s, t, &active)?;
                for (xi, &px) in cur.iter().enumerate() {
                    if px == 0.0 {
                        continue;
                    }
                    let dists = marginals_of_row(space, &cond[xi]);
                    scatter_product(space, px, &dists, &mut next);
                }
            }
            _ => {
                let gen = generator_at(oracle, s)?;
                for (xi, &px) in cur.iter().enumerate() {
                    if px == 0.0 {
                        continue;
                    }
                    let x = space.state_values(xi);
                    let dists =
                        tau_leap_row_dists(oracle, &gen, space, &x, xi, s - t, step);
                    scatter_product(space, px, &dists, &mut next);
                }
            }
        }
        cur = next;
    }
    clamp_to_pmf(space, cur)
}

/// Compounding-error report for one parallel step `s → t`.
#[derive(Debug, Clone)]
pub struct CdeReport {
    pub s: f64,
    pub t: f64,
    /// `(state index, CDE)` for every start state with positive mass.
    pub conditional: Vec<(usize, f64)>,
    /// Expectation of the conditional CDE under the exact marginal at `s`.
    pub marginal: f64,
    /// Largest deviation between the divergence form and the
    /// entropy-difference form of the conditional total correlation.
    pub max_mi_deviation: f64,
}

/// Total correlation through entropies: `Σ_d H(marginal_d) − H(joint)`.
/// Independent route from the KL-to-product form.
fn total_correlation_entropy(joint: &Pmf) -> Result<f64> {
    fn entropy(probs: &[f64]) -> f64 {
        probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
    let mut acc = -entropy(joint.probs());
    for d in 0..joint.space().num_dims() {
        acc += entropy(joint.marginal(d)?.probs());
    }
    Ok(acc)
}

/// Conditional and marginal compounding decoding error over `[s, t]`:
/// for each start state the KL between the exact conditional joint and the
/// product of its per-dimension marginals, cross-checked against the
/// entropy route.
pub fn cde(oracle: &ReverseOracle, s: f64, t: f64) -> Result<CdeReport> {
    if !(s > t) {
        return Err(Error::Interval { s: t, t: s });
    }
    let space = oracle.observed_space();
    let p_s = oracle.qt_full(s)?;
    let active: Vec<bool> = p_s.probs().iter().map(|&p| p > 0.0).collect();
    let cond = conditional_rows(oracle, s, t, &active)?;
    let mut conditional = Vec::new();
    let mut marginal = 0.0;
    let mut max_dev: f64 = 0.0;
    for (xi, &px) in p_s.probs().iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        let joint = clamp_to_pmf(space, cond[xi].clone())?;
        let product = product_of_marginals(&joint)?;
        let value = kl_divergence(&joint, &product)?;
        let mi = total_correlation_entropy(&joint)?;
        max_dev = max_dev.max((value - mi).abs());
        conditional.push((xi, value));
        marginal += px * value;
    }
    Ok(CdeReport { s, t, conditional, marginal, max_mi_deviation: max_dev })
}

/// Numerical check of the telescoped CDE bound for one schedule.
#[derive(Debug, Clone)]
pub struct CdeBoundReport {
    /// `KL(ℙ_end ‖ ℚ_end)` with the idealized product-marginal step.
    pub lhs: f64,
    /// Cumulative marginal CDE along the schedule.
    pub rhs: f64,
    pub holds: bool,
    /// Same endpoint KL with hold-rate τ-leap steps (diagnostic; the bound
    /// does not cover the extra per-dimension marginal error of that kernel,
    /// so this may exceed `rhs`).
    pub lhs_exact_hold: f64,
    pub per_segment_cde: Vec<f64>,
}

pub fn verify_cde_bound(
    oracle: &ReverseOracle,
    schedule: &crate::scheduler::Schedule,
    slack: f64,
) -> Result<CdeBoundReport> {
    let times = schedule.timesteps();
    let p_end = oracle.qt_full(*times.last().unwrap())?;

    let q_pm = schedule_distribution(oracle, schedule, ScheduleStep::ProductMarginal)?;
    let lhs = kl_divergence(&p_end, &q_pm)?;

    let lhs_exact_hold =
        match schedule_distribution(oracle, schedule, ScheduleStep::ExactHold)
            .and_then(|q| kl_divergence(&p_end, &q))
        {
            Ok(v) => v,
            Err(_) => f64::INFINITY,
        };

    let mut per_segment_cde = Vec::new();
    for w in times.windows(2) {
        per_segment_cde.push(cde(oracle, w[0], w[1])?.marginal);
    }
    let rhs: f64 = per_segment_cde.iter().sum();
    Ok(CdeBoundReport { lhs, rhs, holds: lhs <= rhs + slack, lhs_exact_hold, per_segment_cde })
}

/// Deterministic path KL between the exact reverse process and the
/// frozen-channel τ-leap over one segment `[a, b]` (`a > b`), for enumerable
/// spaces: the occupancy integral of the rate relative entropy, joint over
/// the segment-start state (which fixes the frozen row) and the current
/// state. Channels the frozen row cannot serve are clamped like the
/// refinement estimator. Quadrature is composite Simpson over `panels`
/// sub-intervals sharing one conditional-matrix integration.
pub fn exact_segment_klub(
    oracle: &ReverseOracle,
    a: f64,
    b: f64,
    panels: usize,
    zero_ratio_clamp: f64,
) -> Result<f64> {
    if !(a > b) {
        return Err(Error::Interval { s: b, t: a });
    }
    let space = oracle.observed_space();
    let n = space.total_states()?;
    let q_a = oracle.qt_full(a)?;
    let gen_a = generator_at(oracle, a)?;
    let kernel = oracle.kernel();
    let s_obs = space.vocab_size();
    let dims = space.num_dims();

    // Frozen rate rows per start state.
    let mut frozen: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for xi in 0..n {
        let x = space.state_values(xi);
        let mut rows = vec![vec![0.0; s_obs]; dims];
        if q_a.prob(xi) > 0.0 {
            let mut strides = Vec::with_capacity(dims);
            let mut stride = 1usize;
            for _ in 0..dims {
                strides.push(stride);
                stride *= s_obs;
            }
            for d in 0..dims {
                let base = xi - x[d] * strides[d];
                for v in 0..s_obs {
                    if v == x[d] {
                        continue;
                    }
                    let fwd = kernel.unit_rate_entry(v, x[d]);
                    if fwd == 0.0 {
                        continue;
                    }
                    rows[d][v] = gen_a.beta * fwd * gen_a.q[base + v * strides[d]]
                        / gen_a.q[xi];
                }
            }
        }
        frozen.push(rows);
    }

    let panels = panels.max(1) * 2; // Simpson needs an even panel count
    let h = (a - b) / panels as f64;

    // March the conditional rows down node by node, evaluating the density.
    let mut cond: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let mut row = vec![0.0; n];
            row[x] = 1.0;
            row
        })
        .collect();

    let density = |u: f64, cond: &[Vec<f64>]| -> Result<f64> {
        let gen_u = generator_at(oracle, u)?;
        let mut strides = Vec::with_capacity(dims);
        let mut stride = 1usize;
        for _ in 0..dims {
            strides.push(stride);
            stride *= s_obs;
        }
        let mut total = 0.0;
        for xa in 0..n {
            let w_a = q_a.prob(xa);
            if w_a == 0.0 {
                continue;
            }
            for (xu, &w_cond) in cond[xa].iter().enumerate() {
                let w = w_a * w_cond;
                if w <= 0.0 || gen_u.q[xu] <= 0.0 {
                    continue;
                }
                let xvals = space.state_values(xu);
                let mut relent = 0.0;
                for d in 0..dims {
                    let base = xu - xvals[d] * strides[d];
                    for v in 0..s_obs {
                        if v == xvals[d] {
                            continue;
                        }
                        let fwd = kernel.unit_rate_entry(v, xvals[d]);
                        if fwd == 0.0 {
                            continue;
                        }
                        let r1 = gen_u.beta * fwd * gen_u.q[base + v * strides[d]]
                            / gen_u.q[xu];
                        if r1 <= 0.0 {
                            continue;
                        }
                        let r2 = frozen[xa][d][v].max(zero_ratio_clamp);
                        relent += r1 * (r1 / r2).ln() - r1 + r2;
                    }
                }
                total += w * relent;
            }
        }
        Ok(total)
    };

    let mut acc = density(a, &cond)?;
    for p in 1..=panels {
        let hi = a - (p - 1) as f64 * h;
        let lo = a - p as f64 * h;
        let rows = integrate_reverse_rows(oracle, hi, lo, cond, ODE_TOL)?;
        cond = rows;
        let weight = if p == panels {
            1.0
        } else if p % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += weight * density(lo, &cond)?;
    }
    Ok((acc * h / 3.0).max(0.0))
}

/// A time-homogeneous CTMC on a factorized space with arbitrary
/// single-token rates, for endpoint-versus-path-KL experiments.
#[derive(Debug, Clone)]
pub struct ConstantCtmc {
    space: StateSpace,
    /// `rates[state][dim][target]`, zero at the state's own token.
    rates: Vec<Vec<Vec<f64>>>,
    exit: Vec<f64>,
}

impl ConstantCtmc {
    pub fn new(space: StateSpace, rates: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = space.total_states()?;
        if rates.len() != n {
            return Err(Error::Domain("rate table size mismatch".into()));
        }
        let mut exit = vec![0.0; n];
        for (xi, per_dim) in rates.iter().enumerate() {
            let values = space.state_values(xi);
            if per_dim.len() != space.num_dims() {
                return Err(Error::Domain("rate table dims mismatch".into()));
            }
            for (d, row) in per_dim.iter().enumerate() {
                if row.len() != space.vocab_size() {
                    return Err(Error::Domain("rate table vocab mismatch".into()));
                }
                for (v, &r) in row.iter().enumerate() {
                    if r < 0.0 {
                        return Err(Error::Domain("negative rate".into()));
                    }
                    if v == values[d] && r != 0.0 {
                        return Err(Error::Domain("self-rate must be zero".into()));
                    }
                    exit[xi] += r;
                }
            }
        }
        Ok(ConstantCtmc { space, rates, exit })
    }

    /// Full-support random rates in `[lo, hi]` on every single-token edge.
    pub fn random<R: Rng>(space: StateSpace, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let n = space.total_states()?;
        let mut rates = Vec::with_capacity(n);
        for xi in 0..n {
            let values = space.state_values(xi);
            let mut per_dim = Vec::with_capacity(space.num_dims());
            for d in 0..space.num_dims() {
                let mut row = vec![0.0; space.vocab_size()];
                for (v, slot) in row.iter_mut().enumerate() {
                    if v != values[d] {
                        *slot = lo + (hi - lo) * rng.random::<f64>();
                    }
                }
                per_dim.push(row);
            }
            rates.push(per_dim);
        }
        ConstantCtmc::new(space, rates)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn generator(&self) -> Result<Mat> {
        let n = self.space.total_states()?;
        let s = self.space.vocab_size();
        let mut g = Mat::zeros(n, n);
        let mut strides = Vec::new();
        let mut stride = 1usize;
        for _ in 0..self.space.num_dims() {
            strides.push(stride);
            stride *= s;
        }
        for xi in 0..n {
            let values = self.space.state_values(xi);
            for d in 0..self.space.num_dims() {
                let base = xi - values[d] * strides[d];
                for v in 0..s {
                    if v == values[d] {
                        continue;
                    }
                    let r = self.rates[xi][d][v];
                    if r > 0.0 {
                        g[(xi, base + v * strides[d])] += r;
                        g[(xi, xi)] -= r;
                    }
                }
            }
        }
        Ok(g)
    }

    /// Distribution after driving the chain for `dt` from `p0`.
    pub fn endpoint(&self, p0: &Pmf, dt: f64) -> Result<Pmf> {
        let kernel = self.generator()?.scale(dt).expm()?;
        let out = kernel.vecmul_left(p0.probs());
        clamp_to_pmf(self.space, out)
    }

    /// Time-integrated occupancy `∫_0^dt p_u du` per state.
    pub fn occupancy(&self, p0: &Pmf, dt: f64) -> Result<Vec<f64>> {
        let integral = self.generator()?.expm_integral(dt)?;
        Ok(integral.vecmul_left(p0.probs()))
    }

    /// Expected number of `state → state[dim→to]` transitions in `[0, dt]`.
    pub fn expected_event_count(
        &self,
        p0: &Pmf,
        state: &[usize],
        dim: usize,
        to: usize,
        dt: f64,
    ) -> Result<f64> {
        let xi = self.space.state_index(state)?;
        let occ = self.occupancy(p0, dt)?;
        Ok(occ[xi] * self.rates[xi][dim][to])
    }

    /// Exact path KL against another chain over `[0, dt]`:
    /// `∫ Σ_x p_u(x) Σ_y [r¹ ln(r¹/r²) − r¹ + r²](x,y) du`, the occupancy
    /// integral of the rate relative entropy. Events-only form available for
    /// audit via `include_compensator = false`.
    pub fn exact_path_kl(
        &self,
        other: &ConstantCtmc,
        p0: &Pmf,
        dt: f64,
        include_compensator: bool,
    ) -> Result<f64> {
        let n = self.space.total_states()?;
        let occ = self.occupancy(p0, dt)?;
        let mut acc = 0.0;
        for xi in 0..n {
            if occ[xi] == 0.0 {
                continue;
            }
            let mut c = 0.0;
            for d in 0..self.space.num_dims() {
                for v in 0..self.space.vocab_size() {
                    let r1 = self.rates[xi][d][v];
                    let r2 = other.rates[xi][d][v];
                    if r1 > 0.0 {
                        if r2 <= 0.0 {
                            return Err(Error::SupportMismatch(format!(
                                "rate2 vanishes on a live edge of state {xi}"
                            )));
                        }
                        c += r1 * (r1 / r2).ln();
                        if include_compensator {
                            c += r2 - r1;
                        }
                    } else if include_compensator {
                        c += r2;
                    }
                }
            }
            acc += occ[xi] * c;
        }
        Ok(acc)
    }

    /// Simulate one reverse-time path from `start_time` down to `end_time`.
    pub fn simulate<R: Rng>(
        &self,
        init: &[usize],
        start_time: f64,
        end_time: f64,
        rng: &mut R,
    ) -> Result<Path> {
        let mut xi = self.space.state_index(init)?;
        let mut state = init.to_vec();
        let mut t = start_time;
        let mut events = Vec::new();
        loop {
            let lambda = self.exit[xi];
            if lambda <= 0.0 {
                break;
            }
            let u: f64 = rng.random();
            let gap = -(1.0 - u).max(f64::MIN_POSITIVE).ln() / lambda;
            if t - gap <= end_time {
                break;
            }
            t -= gap;
            // Choose the channel proportional to its rate.
            let mut pick = rng.random::<f64>() * lambda;
            let mut chosen = None;
            'outer: for d in 0..self.space.num_dims() {
                for (v, &r) in self.rates[xi][d].iter().enumerate() {
                    if r <= 0.0 {
                        continue;
                    }
                    pick -= r;
                    if pick <= 0.0 {
                        chosen = Some((d, v));
                        break 'outer;
                    }
                }
            }
            let (d, v) = chosen.unwrap_or_else(|| {
                // Round-off fallback: last positive channel.
                for d in (0..self.space.num_dims()).rev() {
                    for v in (0..self.space.vocab_size()).rev() {
                        if self.rates[xi][d][v] > 0.0 {
                            return (d, v);
                        }
                    }
                }
                unreachable!("positive exit rate implies a positive channel")
            });
            events.push(PathEvent { time: t, dim: d, from: state[d], to: v });
            state[d] = v;
            xi = self.space.state_index(&state)?;
        }
        Ok(Path { start_time, end_time, init: init.to_vec(), events })
    }
}

impl RateEvaluator for ConstantCtmc {
    fn event_rate(&self, state: &[usize], dim: usize, to: usize, _u: f64) -> Result<f64> {
        let xi = self.space.state_index(state)?;
        Ok(self.rates[xi][dim][to])
    }

    fn exit_rate(&self, state: &[usize], _u: f64) -> Result<f64> {
        let xi = self.space.state_index(state)?;
        Ok(self.exit[xi])
    }
}

/// Endpoint-KL versus path-KL comparison for a pair of chains started from
/// the same distribution.
#[derive(Debug, Clone)]
pub struct PathKlBoundReport {
    pub endpoint_kl: f64,
    pub path_klub: KlubEstimate,
    /// Closed-form path KL through the occupancy integral.
    pub exact_path_kl: f64,
    pub holds: bool,
}

pub fn verify_path_kl_bound<R: Rng>(
    chain1: &ConstantCtmc,
    chain2: &ConstantCtmc,
    p0: &Pmf,
    horizon: f64,
    num_paths: usize,
    rng: &mut R,
) -> Result<PathKlBoundReport> {
    let end1 = chain1.endpoint(p0, horizon)?;
    let end2 = chain2.endpoint(p0, horizon)?;
    let endpoint_kl = kl_divergence(&end1, &end2)?;

    let space = chain1.space();
    let mut paths = Vec::with_capacity(num_paths);
    for _ in 0..num_paths {
        let init_idx = crate::data::sample_categorical(p0.probs(), rng);
        let init = space.state_values(init_idx);
        paths.push(chain1.simulate(&init, horizon, 0.0, rng)?);
    }
    let path_klub = path_kl_functional(&paths, chain1, chain2, true)?;
    let exact = chain1.exact_path_kl(chain2, p0, horizon, true)?;
    let holds = endpoint_kl <= path_klub.value + 3.0 * path_klub.standard_error;
    Ok(PathKlBoundReport { endpoint_kl, path_klub, exact_path_kl: exact, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataDistribution;
    use crate::kernels::{FactorizedKernel, NoiseSchedule};
    use crate::samplers::path_rng;
    use crate::scheduler::Schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_oracle(
        family: &str,
        dims: usize,
        values: usize,
        seed: u64,
    ) -> ReverseOracle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = StateSpace::new(dims, values).unwrap();
        let n = space.total_states().unwrap();
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let data = DataDistribution::Explicit(Pmf::normalized(space, raw).unwrap());
        let sched = NoiseSchedule::default();
        let kernel = match family {
            "uniform" => FactorizedKernel::uniform(values, sched).unwrap(),
            "absorbing" => FactorizedKernel::absorbing(values + 1, sched).unwrap(),
            "gaussian" => FactorizedKernel::gaussian(values, sched, 1.0, 3).unwrap(),
            _ => unreachable!(),
        };
        ReverseOracle::new(kernel, data).unwrap()
    }

    #[test]
    fn reverse_integration_reproduces_marginals() {
        for family in ["uniform", "absorbing", "gaussian"] {
            let oracle = random_oracle(family, 2, 3, 5);
            let grid = [1.0, 0.6, 0.3, 0.05];
            let marginals = exact_reverse_marginals(&oracle, &grid).unwrap();
            for (pmf, &t) in marginals.iter().zip(&grid) {
                let reference = oracle.qt_full(t).unwrap();
                assert!(
                    pmf.total_variation(&reference).unwrap() <= MARGINAL_IDENTITY_TV,
                    "family {family} t={t}"
                );
            }
        }
    }

    #[test]
    fn single_dim_uniform_matches_closed_form_mixing() {
        // D=1 uniform kernel: reverse marginal equals q_t which has the
        // e^{−Δσ} closed form; integration must match it.
        let oracle = random_oracle("uniform", 1, 3, 6);
        let grid = [1.0, 0.5, 0.1];
        let marginals = exact_reverse_marginals(&oracle, &grid).unwrap();
        let sched = NoiseSchedule::default();
        let p_data = oracle.data().to_explicit().unwrap();
        for (pmf, &t) in marginals.iter().zip(&grid) {
            let stay = (-sched.sigma(t).unwrap()).exp();
            for v in 0..3 {
                let expect = stay * p_data.prob(v) + (1.0 - stay) / 3.0;
                assert!((pmf.prob(v) - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn independent_data_has_zero_cde_and_exact_schedules() {
        // Product data: no inter-token information, so CDE ≡ 0 and the
        // product-marginal schedule law equals the exact law for any schedule.
        let space = StateSpace::new(2, 3).unwrap();
        let mx = [0.2, 0.5, 0.3];
        let my = [0.6, 0.1, 0.3];
        let mut probs = vec![0.0; 9];
        for (idx, slot) in probs.iter_mut().enumerate() {
            let v = space.state_values(idx);
            *slot = mx[v[0]] * my[v[1]];
        }
        let data = DataDistribution::Explicit(Pmf::new(space, probs).unwrap());
        let kernel = FactorizedKernel::uniform(3, NoiseSchedule::default()).unwrap();
        let oracle = ReverseOracle::new(kernel, data).unwrap();

        let report = cde(&oracle, 0.8, 0.2).unwrap();
        assert!(report.marginal < 1e-9);

        let schedule = Schedule::uniform(1.0, 1e-3, 2).unwrap();
        let q = schedule_distribution(&oracle, &schedule, ScheduleStep::ProductMarginal)
            .unwrap();
        let p = oracle.qt_full(1e-3).unwrap();
        assert!(q.total_variation(&p).unwrap() < 1e-7);
    }

    #[test]
    fn cde_equals_conditional_mutual_information() {
        let oracle = random_oracle("uniform", 2, 3, 9);
        let report = cde(&oracle, 0.9, 0.3).unwrap();
        assert!(report.max_mi_deviation <= 1e-12, "dev {}", report.max_mi_deviation);
        assert!(report.marginal >= 0.0);
        // Marginal CDE is the mass-weighted sum of conditionals.
        let p_s = oracle.qt_full(0.9).unwrap();
        let weighted: f64 =
            report.conditional.iter().map(|&(xi, v)| p_s.prob(xi) * v).sum();
        assert!((weighted - report.marginal).abs() <= 1e-12);
    }

    #[test]
    fn fine_schedules_approach_exact_law() {
        let oracle = random_oracle("uniform", 2, 3, 11);
        let exact = oracle.qt_full(1e-3).unwrap();
        let coarse = schedule_distribution(
            &oracle,
            &Schedule::uniform(1.0, 1e-3, 4).unwrap(),
            ScheduleStep::ExactHold,
        )
        .unwrap();
        let fine = schedule_distribution(
            &oracle,
            &Schedule::uniform(1.0, 1e-3, 256).unwrap(),
            ScheduleStep::ExactHold,
        )
        .unwrap();
        let tv_coarse = coarse.total_variation(&exact).unwrap();
        let tv_fine = fine.total_variation(&exact).unwrap();
        assert!(tv_fine < tv_coarse, "refinement must help: {tv_fine} vs {tv_coarse}");
        assert!(tv_fine < 0.02, "fine discretization TV {tv_fine}");
    }

    #[test]
    fn cde_bound_holds_on_random_instances() {
        let mut idx = 0;
        for family in ["uniform", "absorbing", "gaussian"] {
            for &n in &[1usize, 2, 4] {
                idx += 1;
                let oracle = random_oracle(family, 2, 3, 100 + idx);
                let schedule = Schedule::uniform(1.0, 1e-3, n).unwrap();
                let report = verify_cde_bound(&oracle, &schedule, 1e-9).unwrap();
                assert!(
                    report.holds,
                    "family {family} N={n}: lhs {} vs rhs {}",
                    report.lhs, report.rhs
                );
            }
        }
    }

    #[test]
    fn exact_segment_klub_behaves() {
        let oracle = random_oracle("uniform", 2, 3, 15);
        // Nonnegative, and a longer frozen leg diverges more.
        let narrow = exact_segment_klub(&oracle, 0.5, 0.45, 2, 1e-12).unwrap();
        let wide = exact_segment_klub(&oracle, 0.5, 0.1, 2, 1e-12).unwrap();
        assert!(narrow >= 0.0);
        assert!(wide > narrow, "wide {wide} vs narrow {narrow}");
        assert!(exact_segment_klub(&oracle, 0.2, 0.5, 2, 1e-12).is_err());
    }

    #[test]
    fn exact_objectives_drive_refinement() {
        use crate::klub::KlubConfig;
        use crate::scheduler::{refine_segment, RefineObjective, SearchConfig};
        let oracle = random_oracle("uniform", 2, 3, 16);
        let cfg = KlubConfig { num_samples: 32, ..KlubConfig::default() };
        for objective in [RefineObjective::ExactPathKl, RefineObjective::EndpointKl] {
            let search = SearchConfig {
                tol: 1.0 / 128.0,
                max_iter: 12,
                margin_rel: 1e-3,
                objective,
            };
            let (t, gs) = refine_segment(&oracle, 0.9, 0.05, &search, &cfg, 1).unwrap();
            assert!(t > 0.05 && t < 0.9);
            assert!(gs.f_star.is_finite());
        }
    }

    #[test]
    fn constant_ctmc_two_state_closed_forms() {
        let space = StateSpace::new(1, 2).unwrap();
        let c1 = ConstantCtmc::new(
            space,
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
        )
        .unwrap();
        let c2 = ConstantCtmc::new(
            space,
            vec![vec![vec![0.0, 2.0]], vec![vec![2.0, 0.0]]],
        )
        .unwrap();
        let p0 = Pmf::point_mass(space, 0).unwrap();

        // Occupancy sums to the horizon.
        let occ = c1.occupancy(&p0, 1.0).unwrap();
        assert!((occ.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // Expected event count: symmetric unit-rate chain fires once per
        // unit time regardless of state.
        let e01 = c1.expected_event_count(&p0, &[0], 0, 1, 1.0).unwrap();
        let e10 = c1.expected_event_count(&p0, &[1], 0, 0, 1.0).unwrap();
        assert!((e01 + e10 - 1.0).abs() < 1e-12);

        // Exact path KL: λ₁Δ ln(λ₁/λ₂) + (λ₂−λ₁)Δ.
        let kl = c1.exact_path_kl(&c2, &p0, 1.0, true).unwrap();
        assert!((kl - (1.0f64 * (0.5f64).ln() + 1.0)).abs() < 1e-12);

        // Endpoint distributions from the matrix exponential.
        let end = c1.endpoint(&p0, 1.0).unwrap();
        let expect0 = 0.5 * (1.0 + (-2.0f64).exp());
        assert!((end.prob(0) - expect0).abs() < 1e-12);
    }

    #[test]
    fn path_kl_bound_holds_and_mc_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let space = StateSpace::new(1, 3).unwrap();
        let c1 = ConstantCtmc::random(space, 0.3, 1.5, &mut rng).unwrap();
        let c2 = ConstantCtmc::random(space, 0.3, 1.5, &mut rng).unwrap();
        let p0 = Pmf::uniform(space).unwrap();
        let mut sim_rng = path_rng(7, 0);
        let report = verify_path_kl_bound(&c1, &c2, &p0, 0.8, 20_000, &mut sim_rng).unwrap();
        assert!(report.holds, "endpoint {} vs klub {}", report.endpoint_kl, report.path_klub.value);
        assert!(
            (report.path_klub.value - report.exact_path_kl).abs()
                <= 4.0 * report.path_klub.standard_error,
            "MC {} vs exact {}",
            report.path_klub.value,
            report.exact_path_kl
        );
        assert!(report.exact_path_kl >= 0.0);
    }

    #[test]
    fn path_kl_bound_detects_injected_rate_bug() {
        // Negative control: corrupt the comparison rates so the reported
        // functional undershoots the endpoint divergence.
        let space = StateSpace::new(1, 2).unwrap();
        let c1 = ConstantCtmc::new(
            space,
            vec![vec![vec![0.0, 2.0]], vec![vec![2.0, 0.0]]],
        )
        .unwrap();
        // Bugged chain 2: claims the same law as chain 1 (ratio 1 at every
        // event, zero compensator) even though the real comparison target
        // has a very different rate, so KLUB collapses to zero while the
        // endpoint KL against the real chain stays positive.
        let real_c2 = ConstantCtmc::new(
            space,
            vec![vec![vec![0.0, 30.0]], vec![vec![30.0, 0.0]]],
        )
        .unwrap();
        let p0 = Pmf::point_mass(space, 0).unwrap();
        let end1 = c1.endpoint(&p0, 1.0).unwrap();
        let end2 = real_c2.endpoint(&p0, 1.0).unwrap();
        let endpoint_kl = kl_divergence(&end1, &end2).unwrap();
        let mut rng = path_rng(8, 0);
        let paths: Vec<Path> = (0..4000)
            .map(|_| c1.simulate(&[0], 1.0, 0.0, &mut rng).unwrap())
            .collect();
        // "Sign bug": the evaluator for chain 2 accidentally returns chain 1.
        let klub = path_kl_functional(&paths, &c1, &c1, true).unwrap();
        let holds = endpoint_kl <= klub.value + 3.0 * klub.standard_error;
        assert!(!holds, "the corrupted check must fail (endpoint {endpoint_kl})");
    }
}
