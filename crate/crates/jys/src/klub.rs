//! Path-space KL divergence between CTMCs and the practical refinement
//! estimator used for schedule search.
//!
//! For two jump processes with rates `R¹` and `R²` driven over the same
//! interval, the exact path KL is
//!
//! ```text
//! E₁[ Σ_events ln(R¹/R²) + ∫ (λ²(X_u) − λ¹(X_u)) du ]
//! ```
//!
//! (log likelihood ratio of the path measures: event terms plus the exit-rate
//! compensator). The compensator vanishes only when total exit rates agree;
//! keeping it makes every estimate a true KL — nonnegative and an upper
//! bound on the endpoint divergence. `include_compensator = false` drops it
//! for auditing the event-only functional.
//!
//! The refinement estimator compares a fine two-step τ-leap `s → t → u`
//! against the coarse single step `s → u` per (dimension, target) channel:
//! the closed form per sample is `Σ Δ·(r_t·ln(r_t/r_s) − r_t + r_s)` over
//! channels alive at `X_t`, with `Δ` the fine-leg length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{ReverseOracle, ReverseRates};
use crate::samplers::{gillespie_exact, path_rng, tau_leap_step, Path, StepKernel};
use crate::scheduler::Schedule;

/// How the mid state `X_t` is drawn in the refinement estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlubVariant {
    /// One reverse τ-leap step from `X_s` over `[s, t]`.
    QPath,
    /// Forward corruption of the clean sample to time `t`.
    PForward,
}

/// Which leg's length multiplies the closed-form transition count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaConvention {
    /// `Δ = t − u`: the leg where fine and coarse rates differ.
    FineLeg,
    /// `Δ = s − t`: the literal coarse-leg reading, kept for audit.
    CoarseLeg,
}

/// State at which the coarse (frozen) rate row is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseRateState {
    /// Row at `(X_s, s)` — what the coarse sampler actually freezes.
    AtStepStart,
    /// Row at `(X_t, s)` — same state as the fine row, frozen time only.
    /// Avoids dead channels for kernels where dimensions move during the
    /// first leg and can move back.
    AtSampleState,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlubConfig {
    pub num_samples: usize,
    pub variant: KlubVariant,
    pub delta_convention: DeltaConvention,
    pub coarse_rate_state: CoarseRateState,
    pub include_compensator: bool,
    pub step_kernel: StepKernel,
    /// Floor for a zero coarse rate under a live fine channel; the true bound
    /// is unbounded there, the floor keeps search values finite and strongly
    /// penalizing. Estimates that hit it are flagged.
    pub zero_ratio_clamp: f64,
}

impl Default for KlubConfig {
    fn default() -> Self {
        KlubConfig {
            num_samples: 2048,
            variant: KlubVariant::QPath,
            delta_convention: DeltaConvention::FineLeg,
            coarse_rate_state: CoarseRateState::AtStepStart,
            include_compensator: true,
            step_kernel: StepKernel::Euler,
            zero_ratio_clamp: 1e-12,
        }
    }
}

/// Monte-Carlo estimate of a path-space KL quantity.
#[derive(Debug, Clone)]
pub struct KlubEstimate {
    pub value: f64,
    pub num_samples: usize,
    pub standard_error: f64,
    pub variant: Option<KlubVariant>,
    /// `[s, t, u]` for refinement estimates, `[start, end]` otherwise.
    pub segment: Vec<f64>,
    pub clamped: bool,
}

impl KlubEstimate {
    fn from_samples(
        samples: &[f64],
        variant: Option<KlubVariant>,
        segment: Vec<f64>,
        clamped: bool,
    ) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var =
                samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        KlubEstimate { value: mean, num_samples: n, standard_error: stderr, variant, segment, clamped }
    }

    pub fn to_json(&self) -> String {
        let variant = match self.variant {
            Some(KlubVariant::QPath) => "\"qpath\"".to_string(),
            Some(KlubVariant::PForward) => "\"pforward\"".to_string(),
            None => "null".to_string(),
        };
        let segment: Vec<String> = self.segment.iter().map(|t| format!("{t:.16e}")).collect();
        format!(
            "{{\"value\":{:.16e},\"stderr\":{:.16e},\"n\":{},\"variant\":{},\"clamped\":{},\"segment\":[{}]}}",
            self.value,
            self.standard_error,
            self.num_samples,
            variant,
            self.clamped,
            segment.join(",")
        )
    }
}

/// Rate evaluator over single-token transitions, for path functionals.
pub trait RateEvaluator {
    /// Rate of `state → state[dim → to]` at time `u` (`to != state[dim]`).
    fn event_rate(&self, state: &[usize], dim: usize, to: usize, u: f64) -> Result<f64>;
    /// Total exit rate at `(state, u)`.
    fn exit_rate(&self, state: &[usize], u: f64) -> Result<f64>;
}

/// The exact reverse process as a rate evaluator.
pub struct OracleRates<'a>(pub &'a ReverseOracle);

impl RateEvaluator for OracleRates<'_> {
    fn event_rate(&self, state: &[usize], dim: usize, to: usize, u: f64) -> Result<f64> {
        Ok(self.0.reverse_rates(state, u)?.rate(dim, to))
    }

    fn exit_rate(&self, state: &[usize], u: f64) -> Result<f64> {
        Ok(self.0.reverse_rates(state, u)?.total_exit)
    }
}

/// Frozen per-(dimension, target) channel intensities: the τ-leap sampler
/// seen as a CTMC. A channel pointing at the dimension's current value is a
/// no-op and contributes no exit rate.
#[derive(Debug, Clone)]
pub struct FrozenChannels {
    pub rates: Vec<Vec<f64>>,
}

impl FrozenChannels {
    pub fn from_rates(rates: &ReverseRates) -> Self {
        FrozenChannels { rates: rates.rates.clone() }
    }
}

impl RateEvaluator for FrozenChannels {
    fn event_rate(&self, state: &[usize], dim: usize, to: usize, _u: f64) -> Result<f64> {
        if state[dim] == to {
            return Ok(0.0);
        }
        Ok(self.rates[dim][to])
    }

    fn exit_rate(&self, state: &[usize], _u: f64) -> Result<f64> {
        let mut acc = 0.0;
        for (d, row) in self.rates.iter().enumerate() {
            for (v, &r) in row.iter().enumerate() {
                if v != state[d] {
                    acc += r;
                }
            }
        }
        Ok(acc)
    }
}

/// Adaptive Simpson quadrature for the compensator integrals.
fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse<F>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64>
    where
        F: Fn(f64) -> Result<f64>,
    {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return Ok(left + right + err / 15.0);
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let fb = f(b)?;
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 30)
}

/// Girsanov log-likelihood ratio of one path under `rate1` versus `rate2`:
/// event log-ratios plus (optionally) the exit-rate compensator accumulated
/// over holding intervals.
pub fn path_log_ratio(
    path: &Path,
    rate1: &dyn RateEvaluator,
    rate2: &dyn RateEvaluator,
    include_compensator: bool,
) -> Result<f64> {
    let mut state = path.init.clone();
    let mut t_hi = path.start_time;
    let mut acc = 0.0;
    for ev in &path.events {
        if include_compensator {
            let s = &state;
            acc += adaptive_simpson(
                &|u| Ok(rate2.exit_rate(s, u)? - rate1.exit_rate(s, u)?),
                ev.time,
                t_hi,
                1e-10,
            )?;
        }
        let r1 = rate1.event_rate(&state, ev.dim, ev.to, ev.time)?;
        let r2 = rate2.event_rate(&state, ev.dim, ev.to, ev.time)?;
        if r1 <= 0.0 {
            return Err(Error::SupportMismatch(format!(
                "path event at t={} has zero rate under its own law",
                ev.time
            )));
        }
        if r2 <= 0.0 {
            return Err(Error::SupportMismatch(format!(
                "comparison rate vanishes at t={} (dim {}, to {}): path KL is unbounded",
                ev.time, ev.dim, ev.to
            )));
        }
        acc += (r1 / r2).ln();
        state[ev.dim] = ev.to;
        t_hi = ev.time;
    }
    if include_compensator {
        let s = &state;
        acc += adaptive_simpson(
            &|u| Ok(rate2.exit_rate(s, u)? - rate1.exit_rate(s, u)?),
            path.end_time,
            t_hi,
            1e-10,
        )?;
    }
    Ok(acc)
}

/// Monte-Carlo path KL: mean of [`path_log_ratio`] over an ensemble drawn
/// from the law of `rate1`.
pub fn path_kl_functional(
    paths: &[Path],
    rate1: &dyn RateEvaluator,
    rate2: &dyn RateEvaluator,
    include_compensator: bool,
) -> Result<KlubEstimate> {
    if paths.is_empty() {
        return Err(Error::Domain("need at least one path".into()));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for p in paths {
        samples.push(path_log_ratio(p, rate1, rate2, include_compensator)?);
    }
    let segment = vec![paths[0].start_time, paths[0].end_time];
    Ok(KlubEstimate::from_samples(&samples, None, segment, false))
}

/// Refinement KLUB: how much the two-step schedule `s → t → u` diverges from
/// the single coarse step `s → u`, estimated per sample in closed form over
/// (dimension, target) channels.
///
/// Per sample: draw `X_0` from the data, corrupt it to `X_s`, obtain `X_t`
/// per the configured variant, then sum
/// `Δ·(r_t·ln(r_t/r_coarse) − r_t + r_coarse)` over channels with `r_t > 0`.
/// The same seed gives the same value for any `t` (common random numbers).
pub fn klub_refinement(
    oracle: &ReverseOracle,
    s: f64,
    t: f64,
    u: f64,
    cfg: &KlubConfig,
    seed: u64,
) -> Result<KlubEstimate> {
    if !(s > t && t > u && u >= 0.0) {
        return Err(Error::Domain(format!("need s > t > u >= 0, got {s} > {t} > {u}")));
    }
    if cfg.num_samples < 1 {
        return Err(Error::Domain("num_samples must be >= 1".into()));
    }
    let delta = match cfg.delta_convention {
        DeltaConvention::FineLeg => t - u,
        DeltaConvention::CoarseLeg => s - t,
    };
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut clamped = false;
    for i in 0..cfg.num_samples {
        let mut rng = path_rng(seed, i as u64);
        let x0 = oracle.data().sample(&mut rng);
        let x_s = oracle.corrupt(&x0, s, &mut rng)?;
        let rates_s = oracle.reverse_rates(&x_s, s)?;
        let x_t = match cfg.variant {
            KlubVariant::QPath => {
                tau_leap_step(&x_s, &rates_s, s - t, &mut rng, cfg.step_kernel)
            }
            KlubVariant::PForward => oracle.corrupt(&x0, t, &mut rng)?,
        };
        let rates_t = oracle.reverse_rates(&x_t, t)?;
        let coarse: ReverseRates = match cfg.coarse_rate_state {
            CoarseRateState::AtStepStart => rates_s.clone(),
            CoarseRateState::AtSampleState => oracle.reverse_rates(&x_t, s)?,
        };
        let mut acc = 0.0;
        for d in 0..x_t.len() {
            for v in 0..oracle.kernel().vocab_size {
                if v == x_t[d] {
                    continue;
                }
                let fine = rates_t.rate(d, v);
                if fine <= 0.0 {
                    continue;
                }
                let raw = match cfg.coarse_rate_state {
                    CoarseRateState::AtStepStart => {
                        if v == coarse.state[d] {
                            0.0
                        } else {
                            coarse.rate(d, v)
                        }
                    }
                    CoarseRateState::AtSampleState => coarse.rate(d, v),
                };
                let cr = if raw > 0.0 {
                    raw
                } else {
                    clamped = true;
                    cfg.zero_ratio_clamp
                };
                let mut term = fine * (fine / cr).ln();
                if cfg.include_compensator {
                    term += cr - fine;
                }
                acc += delta * term;
            }
        }
        samples.push(acc);
    }
    Ok(KlubEstimate::from_samples(
        &samples,
        Some(cfg.variant),
        vec![s, t, u],
        clamped,
    ))
}

/// Diagnostic total along a schedule: the summed per-segment path KL between
/// the exact reverse process and the τ-leap frozen-channel process, each
/// segment started from the exact marginal at its left endpoint.
pub fn klub_schedule_total(
    oracle: &ReverseOracle,
    schedule: &Schedule,
    num_samples: usize,
    include_compensator: bool,
    seed: u64,
) -> Result<KlubEstimate> {
    if num_samples < 1 {
        return Err(Error::Domain("num_samples must be >= 1".into()));
    }
    let times = schedule.timesteps();
    let mut samples = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let mut rng = path_rng(seed, i as u64);
        let mut state = oracle.sample_qt(times[0], &mut rng)?;
        let mut acc = 0.0;
        for w in times.windows(2) {
            let (seg_s, seg_u) = (w[0], w[1]);
            let frozen = FrozenChannels::from_rates(&oracle.reverse_rates(&state, seg_s)?);
            let path = gillespie_exact(oracle, seg_s, seg_u, Some(&state), &mut rng)?;
            let exact = OracleRates(oracle);
            acc += path_log_ratio(&path, &exact, &frozen, include_compensator)?;
            state = path.final_state();
        }
        samples.push(acc);
    }
    Ok(KlubEstimate::from_samples(
        &samples,
        None,
        vec![times[0], *times.last().unwrap()],
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::data::DataDistribution;
    use crate::dist::{Pmf, StateSpace};
    use crate::kernels::{FactorizedKernel, NoiseSchedule};

    fn uniform_oracle(dims: usize, vocab: usize) -> ReverseOracle {
        let space = StateSpace::new(dims, vocab).unwrap();
        let data = DataDistribution::Explicit(Pmf::uniform(space).unwrap());
        let kernel = FactorizedKernel::uniform(vocab, NoiseSchedule::default()).unwrap();
        ReverseOracle::new(kernel, data).unwrap()
    }

    /// Constant-rate two-state chain as a rate evaluator.
    struct FlipRate(f64);

    impl RateEvaluator for FlipRate {
        fn event_rate(&self, _s: &[usize], _d: usize, _to: usize, _u: f64) -> Result<f64> {
            Ok(self.0)
        }
        fn exit_rate(&self, _s: &[usize], _u: f64) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn simulate_flip_chain(rate: f64, horizon: f64, seed: u64, index: u64) -> Path {
        let mut rng = path_rng(seed, index);
        let mut t = horizon;
        let mut state = 0usize;
        let mut events = Vec::new();
        loop {
            let u: f64 = rng.random();
            let gap = -(1.0 - u).ln() / rate;
            if t - gap <= 0.0 {
                break;
            }
            t -= gap;
            events.push(crate::samplers::PathEvent {
                time: t,
                dim: 0,
                from: state,
                to: 1 - state,
            });
            state = 1 - state;
        }
        Path { start_time: horizon, end_time: 0.0, init: vec![0], events }
    }

    #[test]
    fn identical_rates_give_zero() {
        let paths: Vec<Path> =
            (0..200).map(|i| simulate_flip_chain(1.0, 1.0, 5, i)).collect();
        let e = path_kl_functional(&paths, &FlipRate(1.0), &FlipRate(1.0), true).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.standard_error, 0.0);
    }

    #[test]
    fn two_state_closed_form_with_compensator() {
        // Symmetric flip chain, rate 1 vs rate 2, horizon 1, started at 0.
        // Exact path KL = λ₁Δ·ln(λ₁/λ₂) + (λ₂ − λ₁)Δ = 1 − ln 2.
        let n = 100_000;
        let paths: Vec<Path> =
            (0..n).map(|i| simulate_flip_chain(1.0, 1.0, 77, i)).collect();
        let e = path_kl_functional(&paths, &FlipRate(1.0), &FlipRate(2.0), true).unwrap();
        let expect = 1.0 - std::f64::consts::LN_2;
        assert!(
            (e.value - expect).abs() <= 3.0 * e.standard_error,
            "value {} vs closed form {expect} (stderr {})",
            e.value,
            e.standard_error
        );
        // The event-only functional drops the compensator and lands at
        // E[#events]·ln(λ₁/λ₂) = −ln 2.
        let bare = path_kl_functional(&paths, &FlipRate(1.0), &FlipRate(2.0), false).unwrap();
        assert!(
            (bare.value + std::f64::consts::LN_2).abs() <= 3.0 * bare.standard_error,
            "event-only value {}",
            bare.value
        );
    }

    #[test]
    fn support_mismatch_is_an_error() {
        let paths: Vec<Path> = (0..10).map(|i| simulate_flip_chain(2.0, 1.0, 3, i)).collect();
        assert!(paths.iter().any(|p| !p.events.is_empty()));
        let res = path_kl_functional(&paths, &FlipRate(2.0), &FlipRate(0.0), true);
        assert!(matches!(res, Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn refinement_vanishing_cases() {
        let oracle = uniform_oracle(2, 3);
        // Degenerate gap: Δ → 0 means value → 0 linearly (FineLeg convention).
        let cfg = KlubConfig { num_samples: 64, ..KlubConfig::default() };
        let tiny = klub_refinement(&oracle, 0.8, 0.4, 0.4 - 1e-9, &cfg, 1).unwrap();
        assert!(tiny.value.abs() < 1e-6);
        // s > t > u ordering enforced.
        assert!(klub_refinement(&oracle, 0.4, 0.8, 0.1, &cfg, 1).is_err());
    }

    #[test]
    fn refinement_is_deterministic_in_seed() {
        let oracle = uniform_oracle(2, 3);
        let cfg = KlubConfig { num_samples: 128, ..KlubConfig::default() };
        let a = klub_refinement(&oracle, 0.9, 0.5, 0.1, &cfg, 42).unwrap();
        let b = klub_refinement(&oracle, 0.9, 0.5, 0.1, &cfg, 42).unwrap();
        assert_eq!(a.value, b.value);
        let c = klub_refinement(&oracle, 0.9, 0.5, 0.1, &cfg, 43).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn refinement_nonnegative_with_compensator() {
        let oracle = uniform_oracle(2, 3);
        let cfg = KlubConfig { num_samples: 256, ..KlubConfig::default() };
        let e = klub_refinement(&oracle, 0.9, 0.5, 0.1, &cfg, 9).unwrap();
        assert!(e.value >= 0.0, "rate relative entropy must be nonnegative, got {}", e.value);
    }

    #[test]
    fn estimate_json_shape() {
        let e = KlubEstimate {
            value: 0.5,
            num_samples: 10,
            standard_error: 0.01,
            variant: Some(KlubVariant::QPath),
            segment: vec![1.0, 0.5, 0.0],
            clamped: false,
        };
        let json = e.to_json();
        assert!(json.contains("\"variant\":\"qpath\""));
        assert!(json.contains("\"clamped\":false"));
        assert!(json.contains("\"n\":10"));
    }
}
