//! Reverse-time generation: exact event-driven simulation (Gillespie with
//! thinning against a local rate bound), τ-leaping under a schedule, and
//! k-Gillespie for absorbing kernels.
//!
//! Times decrease along a path: a reverse interval `[s, t]` has `s > t` and
//! every event time lies in `(end, start]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sample_categorical;
use crate::dist::Pmf;
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::oracle::{ReverseOracle, ReverseRates};
use crate::scheduler::Schedule;

/// One single-token transition on a reverse trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEvent {
    pub time: f64,
    pub dim: usize,
    pub from: usize,
    pub to: usize,
}

/// A reverse trajectory: initial state plus ordered transition events with
/// strictly decreasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub start_time: f64,
    pub end_time: f64,
    pub init: Vec<usize>,
    pub events: Vec<PathEvent>,
}

impl Path {
    /// Replay events from the initial state, checking consistency: each
    /// event's `from` must match the current token and times must not
    /// increase within `[end, start]`. Event-driven samplers produce strictly
    /// decreasing times; τ-leap steps stamp their events at the step's end,
    /// so ties and the closed lower endpoint are allowed. Returns the final
    /// state.
    pub fn replay(&self) -> Result<Vec<usize>> {
        let mut state = self.init.clone();
        let mut prev = self.start_time;
        for (i, ev) in self.events.iter().enumerate() {
            if !(ev.time <= prev && ev.time >= self.end_time && ev.time <= self.start_time) {
                return Err(Error::Domain(format!(
                    "event {i} at time {} outside [{}, {}] or not decreasing",
                    ev.time, self.end_time, self.start_time
                )));
            }
            if ev.dim >= state.len() || state[ev.dim] != ev.from {
                return Err(Error::Domain(format!(
                    "event {i} replays from token {} but state has {}",
                    ev.from, state[ev.dim]
                )));
            }
            state[ev.dim] = ev.to;
            prev = ev.time;
        }
        Ok(state)
    }

    pub fn final_state(&self) -> Vec<usize> {
        let mut state = self.init.clone();
        for ev in &self.events {
            state[ev.dim] = ev.to;
        }
        state
    }

    /// One-line JSON record (`{"init": [...], "events": [[u,d,from,to], ...]}`).
    pub fn to_json_line(&self) -> String {
        let events: Vec<serde_json::Value> = self
            .events
            .iter()
            .map(|e| serde_json::json!([e.time, e.dim, e.from, e.to]))
            .collect();
        serde_json::json!({ "init": self.init, "events": events }).to_string()
    }
}

/// Step kernel for τ-leaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKernel {
    /// First-order move probabilities `rate·δ`, renormalized if a dimension's
    /// mass exceeds one.
    Euler,
    /// Hold-rate kernel: at most one jump per dimension, exponential timing
    /// under the frozen row.
    ExactHold,
}

/// Sampling method selector for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum SamplerMethod {
    GillespieExact,
    TauLeap,
    KGillespie { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub method: SamplerMethod,
    pub step_kernel: StepKernel,
    pub seed: u64,
    /// Smallest time the reverse process reaches; rates blow up at exactly 0.
    pub t_min: f64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if let SamplerMethod::KGillespie { k } = self.method {
            if k < 1 {
                return Err(Error::Domain("k must be >= 1".into()));
            }
        }
        if !(self.t_min > 0.0) {
            return Err(Error::Domain("t_min must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-path RNG derived from a base seed and path index on separate streams.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const MAX_BOUND_DOUBLINGS: u32 = 60;
const SEGMENT_SHRINK: f64 = 0.7;

/// Exact simulation of the time-inhomogeneous reverse CTMC over
/// `[start_time, end_time]` by thinning.
///
/// The thinning bound starts at twice the current exit rate and doubles on a
/// detected violation (logged); candidates are accepted with probability
/// `λ(u)/bound` and the transition is drawn from the rate row at the event
/// time, so accepted paths follow the exact law up to the bound check.
pub fn gillespie_exact<R: Rng>(
    oracle: &ReverseOracle,
    start_time: f64,
    end_time: f64,
    init: Option<&[usize]>,
    rng: &mut R,
) -> Result<Path> {
    if !(start_time > end_time) {
        return Err(Error::Interval { s: end_time, t: start_time });
    }
    if !(end_time > 0.0) {
        return Err(Error::Domain(
            "event-driven simulation needs end_time > 0; clamp at t_min".into(),
        ));
    }
    let mut state = match init {
        Some(s) => s.to_vec(),
        None => oracle.sample_stationary(rng),
    };
    let init_state = state.clone();
    let mut events = Vec::new();
    let mut t_cur = start_time;

    // Reverse rates can grow sharply toward small times (absorbing kernels
    // behave like 1/t), so the thinning horizon is segmented geometrically
    // and the bound refreshed from both segment endpoints; a candidate that
    // still exceeds the bound doubles it and retries.
    'outer: loop {
        let rates = oracle.reverse_rates(&state, t_cur)?;
        if rates.total_exit <= 0.0 {
            // Zero exit stays zero for these kernels: forward entries are
            // fixed and the score factors cannot resurrect a dead row.
            break;
        }
        let mut t_probe = t_cur;
        let mut lam_hi = rates.total_exit;
        'segment: loop {
            let seg_lo = (SEGMENT_SHRINK * t_probe).max(end_time);
            let lam_lo = oracle.reverse_rates(&state, seg_lo)?.total_exit;
            let mut bound = 2.0 * lam_hi.max(lam_lo);
            let mut doublings = 0u32;
            loop {
                let gap = exp_draw(rng) / bound;
                let u = t_probe - gap;
                if u <= seg_lo {
                    if seg_lo <= end_time {
                        break 'outer;
                    }
                    t_probe = seg_lo;
                    lam_hi = lam_lo;
                    continue 'segment;
                }
                let here = oracle.reverse_rates(&state, u)?;
                if here.total_exit > bound {
                    doublings += 1;
                    if doublings > MAX_BOUND_DOUBLINGS {
                        return Err(Error::BoundViolation { t: u, retries: doublings });
                    }
                    log::debug!(
                        "thinning bound {bound:.6} exceeded by rate {:.6} at t={u:.6}; doubling",
                        here.total_exit
                    );
                    bound *= 2.0;
                    continue;
                }
                if rng.random::<f64>() * bound < here.total_exit {
                    // Accept: pick the transition from the row at the event time.
                    let (dim, to) = sample_transition(&here, rng);
                    events.push(PathEvent { time: u, dim, from: state[dim], to });
                    state[dim] = to;
                    t_cur = u;
                    continue 'outer;
                }
                t_probe = u;
            }
        }
    }

    Ok(Path { start_time, end_time, init: init_state, events })
}

fn exp_draw<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).max(f64::MIN_POSITIVE).ln()
}

fn sample_transition<R: Rng>(rates: &ReverseRates, rng: &mut R) -> (usize, usize) {
    let dim = sample_categorical(&rates.per_dim_exit, rng);
    let to = sample_categorical(&rates.rates[dim], rng);
    (dim, to)
}

/// One τ-leap step: every dimension updates independently under the frozen
/// rate row.
///
/// Exactly two uniforms are consumed per dimension regardless of the
/// outcome, so estimators driving this step under common random numbers
/// stay draw-aligned across nearby time arguments.
pub fn tau_leap_step<R: Rng>(
    state: &[usize],
    rates: &ReverseRates,
    delta: f64,
    rng: &mut R,
    kernel: StepKernel,
) -> Vec<usize> {
    debug_assert!(delta >= 0.0);
    let mut next = state.to_vec();
    for d in 0..state.len() {
        let u_move: f64 = rng.random();
        let u_target: f64 = rng.random();
        let lambda = rates.per_dim_exit[d];
        if lambda <= 0.0 || delta == 0.0 {
            continue;
        }
        let moves = match kernel {
            StepKernel::Euler => {
                // Over-committed rows renormalize to a move-only categorical.
                let mass = lambda * delta;
                mass >= 1.0 || u_move < mass
            }
            StepKernel::ExactHold => u_move >= (-lambda * delta).exp(),
        };
        if moves {
            next[d] = pick_categorical(&rates.rates[d], u_target);
        }
    }
    next
}

/// Inverse-CDF pick from unnormalized weights using a supplied uniform.
fn pick_categorical(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = u * total;
    for (i, &w) in weights.iter().enumerate() {
        acc -= w;
        if acc <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// τ-leaping along a schedule. The rate row is evaluated once per timestep
/// (NFE = number of schedule intervals); step events are stamped at the
/// step's end time.
pub fn tau_leap_sample<R: Rng>(
    oracle: &ReverseOracle,
    schedule: &Schedule,
    init: Option<&[usize]>,
    rng: &mut R,
    kernel: StepKernel,
) -> Result<Path> {
    let times = schedule.timesteps();
    let mut state = match init {
        Some(s) => s.to_vec(),
        None => oracle.sample_stationary(rng),
    };
    let init_state = state.clone();
    let mut events = Vec::new();
    for w in times.windows(2) {
        let (s, t) = (w[0], w[1]);
        let rates = oracle.reverse_rates(&state, s)?;
        let next = tau_leap_step(&state, &rates, s - t, rng, kernel);
        for d in 0..state.len() {
            if next[d] != state[d] {
                events.push(PathEvent { time: t, dim: d, from: state[d], to: next[d] });
            }
        }
        state = next;
    }
    Ok(Path {
        start_time: times[0],
        end_time: *times.last().unwrap(),
        init: init_state,
        events,
    })
}

/// k-Gillespie for absorbing kernels: each round evaluates the rate row once
/// and commits the next `k` unmasking events in parallel, with event times
/// drawn as ordered exponentials under the frozen rates (conditioned to land
/// inside the remaining interval so the path stays well-formed).
pub fn k_gillespie_sample<R: Rng>(
    oracle: &ReverseOracle,
    k: usize,
    start_time: f64,
    end_time: f64,
    init: Option<&[usize]>,
    rng: &mut R,
) -> Result<Path> {
    if oracle.kernel().family != KernelFamily::Absorbing {
        return Err(Error::UnsupportedFamily(format!(
            "k-Gillespie needs a fixed transition count; {} kernels do not have one",
            oracle.kernel().family
        )));
    }
    if k < 1 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if !(start_time > end_time) {
        return Err(Error::Interval { s: end_time, t: start_time });
    }
    let mask = oracle.kernel().mask_token().expect("absorbing kernel");
    let mut state = match init {
        Some(s) => s.to_vec(),
        None => oracle.sample_stationary(rng),
    };
    let init_state = state.clone();
    let mut events: Vec<PathEvent> = Vec::new();
    let mut t_cur = start_time;

    loop {
        let masked: Vec<usize> = (0..state.len()).filter(|&d| state[d] == mask).collect();
        if masked.is_empty() {
            break;
        }
        let rates = oracle.reverse_rates(&state, t_cur)?;
        let window = t_cur - end_time;
        // Truncated exponential draw per masked dim under its frozen exit rate.
        let mut draws: Vec<(f64, usize)> = masked
            .iter()
            .map(|&d| {
                let lambda = rates.per_dim_exit[d].max(f64::MIN_POSITIVE);
                let cap = 1.0 - (-lambda * window).exp();
                let u: f64 = rng.random::<f64>() * cap;
                let tau = (-(1.0 - u).ln() / lambda).min(window * (1.0 - 1e-12));
                (tau, d)
            })
            .collect();
        draws.sort_by(|a, b| a.0.total_cmp(&b.0));
        let commit = k.min(draws.len());
        for &(tau, d) in draws.iter().take(commit) {
            let to = sample_categorical(&rates.rates[d], rng);
            events.push(PathEvent { time: t_cur - tau, dim: d, from: mask, to });
            state[d] = to;
        }
        t_cur -= draws[commit - 1].0;
    }

    Ok(Path { start_time, end_time, init: init_state, events })
}

/// Empirical distribution of an ensemble's final states over an enumerable
/// observed space.
pub fn ensemble_distribution(oracle: &ReverseOracle, paths: &[Path]) -> Result<Pmf> {
    let space = oracle.observed_space();
    let n = space.total_states()?;
    let mut counts = vec![0.0; n];
    for p in paths {
        counts[space.state_index(&p.final_state())?] += 1.0;
    }
    Pmf::normalized(space, counts)
}
