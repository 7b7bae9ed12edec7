//! Command-line interface: data generation, schedule optimization, sampling,
//! schedule comparison, and the verification suite.
//!
//! Every output embeds the configuration hash and seed, and a rerun with the
//! same seed is byte-identical. Exit codes: 0 ok, 1 usage error,
//! 2 verification failure, 3 numerical error.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{config_hash_hex, DataSource, ExperimentConfig, KernelConfig};
use crate::countdown::{self, CountdownSpec};
use crate::data::DataFile;
use crate::dist::kl_divergence;
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::klub::{CoarseRateState, DeltaConvention, KlubVariant};
use crate::oracle::ReverseOracle;
use crate::samplers::{
    gillespie_exact, k_gillespie_sample, path_rng, tau_leap_sample, StepKernel,
};
use crate::scheduler::{jump_your_steps, RefineObjective, Schedule, SearchConfig};

#[derive(Parser)]
#[command(
    name = "jys",
    about = "Sampling-schedule optimization for discrete diffusion CTMCs",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate countdown sequences and the matching exact data law.
    GenData(GenDataArgs),
    /// Optimize a sampling schedule by hierarchical breakdown.
    Optimize(OptimizeArgs),
    /// Draw an ensemble from a schedule and report quality metrics.
    Sample(SampleArgs),
    /// Compare two schedules under a shared oracle.
    Evaluate(EvaluateArgs),
    /// Run the verification suite (nonzero exit on failure).
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Uniform,
    Absorbing,
    Gaussian,
}

impl From<FamilyArg> for KernelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Uniform => KernelFamily::Uniform,
            FamilyArg::Absorbing => KernelFamily::Absorbing,
            FamilyArg::Gaussian => KernelFamily::Gaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StepKernelArg {
    Euler,
    ExactHold,
}

impl From<StepKernelArg> for StepKernel {
    fn from(s: StepKernelArg) -> Self {
        match s {
            StepKernelArg::Euler => StepKernel::Euler,
            StepKernelArg::ExactHold => StepKernel::ExactHold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Qpath,
    Pforward,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaArg {
    FineLeg,
    CoarseLeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoarseStateArg {
    AtStepStart,
    AtSampleState,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    CoarseRefinement,
    ExactPathKl,
    EndpointKl,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    TauLeap,
    Gillespie,
    KGillespie,
}

/// Config-file plus per-key override flags shared by the experiment commands.
#[derive(Args)]
struct ConfigArgs {
    /// Structured JSON configuration file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<FamilyArg>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    eps_min: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    gaussian_bandwidth: Option<f64>,
    #[arg(long)]
    gaussian_truncation: Option<usize>,
    /// Countdown data with this sequence length (pairs with --values).
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    values: Option<usize>,
    /// JSON data-distribution file (overrides the countdown source).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    eval_ensemble: Option<usize>,
    /// Seed; falls back to JYS_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    step_kernel: Option<StepKernelArg>,
    #[arg(long)]
    variant: Option<VariantArg>,
    #[arg(long)]
    delta_convention: Option<DeltaArg>,
    #[arg(long)]
    coarse_rate_state: Option<CoarseStateArg>,
    #[arg(long)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    support_smoothing: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(f) = self.family {
            cfg.kernel.family = f.into();
        }
        if let Some(v) = self.vocab_size {
            cfg.kernel.vocab_size = v;
        }
        if let Some(v) = self.eps_min {
            cfg.kernel.eps_min = v;
        }
        if let Some(v) = self.horizon {
            cfg.kernel.horizon = v;
        }
        if let Some(v) = self.gaussian_bandwidth {
            cfg.kernel.gaussian_bandwidth = v;
        }
        if let Some(v) = self.gaussian_truncation {
            cfg.kernel.gaussian_truncation = v;
        }
        if let Some(path) = &self.data {
            cfg.data = DataSource::File { path: path.clone() };
        } else if self.seq_len.is_some() || self.values.is_some() {
            let default = CountdownSpec::default();
            let (mut sl, mut vc) = match cfg.data {
                DataSource::Countdown { seq_len, value_count } => (seq_len, value_count),
                _ => (default.seq_len, default.value_count),
            };
            if let Some(v) = self.seq_len {
                sl = v;
            }
            if let Some(v) = self.values {
                vc = v;
            }
            cfg.data = DataSource::Countdown { seq_len: sl, value_count: vc };
        }
        if let Some(v) = self.num_samples {
            cfg.num_samples = v;
        }
        if let Some(v) = self.eval_ensemble {
            cfg.eval_ensemble = v;
        }
        cfg.seed = self.seed.or_else(env_seed).unwrap_or(cfg.seed);
        if let Some(v) = self.t_min {
            cfg.t_min = v;
        }
        if let Some(v) = self.step_kernel {
            cfg.step_kernel = v.into();
        }
        if let Some(v) = self.variant {
            cfg.variant = match v {
                VariantArg::Qpath => KlubVariant::QPath,
                VariantArg::Pforward => KlubVariant::PForward,
            };
        }
        if let Some(v) = self.delta_convention {
            cfg.delta_convention = match v {
                DeltaArg::FineLeg => DeltaConvention::FineLeg,
                DeltaArg::CoarseLeg => DeltaConvention::CoarseLeg,
            };
        }
        if let Some(v) = self.coarse_rate_state {
            cfg.coarse_rate_state = match v {
                CoarseStateArg::AtStepStart => CoarseRateState::AtStepStart,
                CoarseStateArg::AtSampleState => CoarseRateState::AtSampleState,
            };
        }
        if let Some(v) = self.objective {
            cfg.objective = match v {
                ObjectiveArg::CoarseRefinement => RefineObjective::CoarseRefinement,
                ObjectiveArg::ExactPathKl => RefineObjective::ExactPathKl,
                ObjectiveArg::EndpointKl => RefineObjective::EndpointKl,
            };
        }
        if let Some(v) = self.support_smoothing {
            cfg.support_smoothing = v;
        }
        Ok(cfg)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("JYS_SEED").ok().and_then(|s| s.parse().ok())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    values: usize,
    #[arg(short = 'n', long, default_value_t = 1000)]
    num: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path (one sequence per line); a `.spec.json` sidecar
    /// with the exact law is written next to it.
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Breakdown rounds; the schedule gets 2^k intervals.
    #[arg(short = 'k', long, default_value_t = 2)]
    rounds: u32,
    /// Output schedule JSON.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Per-segment search trace CSV (segment, probed t, value).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Schedule JSON produced by `optimize`, or `uniform:N` for an N-step
    /// uniform schedule.
    #[arg(long)]
    schedule: String,
    #[arg(long, value_enum, default_value_t = MethodArg::TauLeap)]
    method: MethodArg,
    /// Tokens committed per rate evaluation (k-Gillespie only).
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Skip the final most-likely-token readout at t_min.
    #[arg(long, default_value_t = false)]
    no_final_readout: bool,
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Debug dump of the raw trajectories, one JSON record per line.
    #[arg(long)]
    paths: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    schedule_a: String,
    #[arg(long)]
    schedule_b: String,
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller ensembles, same checks.
    #[arg(long, default_value_t = false)]
    quick: bool,
    /// Optional JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendering but normalize the exit code contract:
            // help/version print to stdout with code 0, usage errors exit 1.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Domain(_) => 1,
        _ => 3,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn write_if_changed(path: &PathBuf, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32> {
    let spec = CountdownSpec::new(args.seq_len, args.values)?;
    let seed = args.seed.or_else(env_seed).unwrap_or(0);
    let mut rng = path_rng(seed, 0);
    let sequences = countdown::generate(spec, args.num, &mut rng);
    let mut text = String::new();
    for seq in &sequences {
        let line: Vec<String> = seq.iter().map(|v| v.to_string()).collect();
        writeln!(text, "{}", line.join(" ")).expect("string write");
    }
    write_if_changed(&args.out, &text)?;

    let hash = config_hash_hex(&(spec, args.num, seed));
    let data = countdown::exact_distribution(spec);
    let mut sidecar = serde_json::to_value(DataFile::from_distribution(&data))?;
    sidecar["spec"] = serde_json::json!({
        "seq_len": spec.seq_len,
        "value_count": spec.value_count,
        "num_sequences": args.num,
        "config_hash": hash,
        "seed": seed,
    });
    let sidecar_path = args.out.with_extension("spec.json");
    write_if_changed(&sidecar_path, &serde_json::to_string_pretty(&sidecar)?)?;
    println!(
        "wrote {} sequences to {} (law in {})",
        args.num,
        args.out.display(),
        sidecar_path.display()
    );
    Ok(0)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let oracle = cfg.build_oracle()?;
    let horizon = oracle.horizon();
    let search = SearchConfig::for_horizon(horizon).with_objective(cfg.objective);
    let klub_cfg = cfg.klub_config();
    let t_min = cfg.t_min * horizon;
    let started = std::time::Instant::now();
    let (schedule, trace) =
        jump_your_steps(&oracle, args.rounds, t_min, &search, &klub_cfg, cfg.seed)?;
    log::info!("optimized {} intervals in {:.1?}", schedule.nfe(), started.elapsed());

    let hash = cfg.hash();
    write_if_changed(&args.out, &schedule.to_json(Some(oracle.kernel()), &hash, cfg.seed))?;
    if let Some(trace_path) = &args.trace {
        let mut csv = format!("# config_hash={hash} seed={}\n", cfg.seed);
        csv.push_str(&trace.to_csv());
        write_if_changed(trace_path, &csv)?;
    }

    // Schedule-shape diagnostic: interval widths and where the bulk sits.
    let widths = schedule.interval_widths();
    let widest = widths
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let half = if schedule.timesteps()[widest] > horizon / 2.0 {
        "upper (early, near the horizon)"
    } else {
        "lower (late, near zero)"
    };
    println!("schedule: {} intervals over [{:.3e}, {horizon}]", schedule.nfe(), t_min);
    let rendered: Vec<String> = widths.iter().map(|w| format!("{w:.4}")).collect();
    println!("interval widths (from the horizon down): {}", rendered.join(" "));
    println!("largest interval sits in the {half} half");
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Parse `uniform:N` or load a schedule file, returning the schedule and the
/// kernel embedded in it (if any).
fn load_schedule(
    spec: &str,
    cfg: &ExperimentConfig,
) -> Result<(Schedule, Option<KernelConfig>)> {
    if let Some(n) = spec.strip_prefix("uniform:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad uniform schedule spec {spec}")))?;
        let horizon = cfg.kernel.horizon;
        return Ok((Schedule::uniform(horizon, cfg.t_min * horizon, n)?, None));
    }
    let text = std::fs::read_to_string(spec)?;
    let (schedule, kernel) = Schedule::from_json(&text)?;
    Ok((schedule, kernel.map(|k| KernelConfig::from_kernel(&k))))
}

struct EnsembleMetrics {
    sequences: Vec<Vec<usize>>,
    paths: Vec<crate::samplers::Path>,
    mean_events: f64,
    nfe: usize,
}

fn run_ensemble(
    oracle: &ReverseOracle,
    cfg: &ExperimentConfig,
    schedule: &Schedule,
    method: MethodArg,
    k: usize,
    readout: bool,
    eval_seed: u64,
) -> Result<EnsembleMetrics> {
    let mut sequences = Vec::with_capacity(cfg.eval_ensemble);
    let mut paths = Vec::with_capacity(cfg.eval_ensemble);
    let mut events = 0usize;
    let mut nfe = 0usize;
    for i in 0..cfg.eval_ensemble {
        let mut rng = path_rng(eval_seed, i as u64);
        let path = match method {
            MethodArg::TauLeap => {
                nfe = schedule.nfe();
                tau_leap_sample(oracle, schedule, None, &mut rng, cfg.step_kernel)?
            }
            MethodArg::Gillespie => {
                let p = gillespie_exact(
                    oracle,
                    schedule.horizon(),
                    schedule.t_min().max(f64::MIN_POSITIVE),
                    None,
                    &mut rng,
                )?;
                nfe = nfe.max(p.events.len());
                p
            }
            MethodArg::KGillespie => {
                let p = k_gillespie_sample(
                    oracle,
                    k,
                    schedule.horizon(),
                    schedule.t_min().max(f64::MIN_POSITIVE),
                    None,
                    &mut rng,
                )?;
                nfe = nfe.max(p.events.len().div_ceil(k));
                p
            }
        };
        events += path.events.len();
        let state = path.final_state();
        let cleaned = if readout {
            oracle.denoising_argmax(&state, schedule.t_min().max(1e-12))?
        } else {
            state
        };
        sequences.push(cleaned);
        paths.push(path);
    }
    Ok(EnsembleMetrics {
        mean_events: events as f64 / sequences.len().max(1) as f64,
        sequences,
        paths,
        nfe,
    })
}

fn cmd_sample(args: SampleArgs) -> Result<i32> {
    let mut cfg = args.config.resolve()?;
    let (schedule, kernel_from_file) = load_schedule(&args.schedule, &cfg)?;
    if let Some(k) = kernel_from_file {
        cfg.kernel = k;
    }
    let oracle = cfg.build_oracle()?;
    let started = std::time::Instant::now();
    let metrics = run_ensemble(
        &oracle,
        &cfg,
        &schedule,
        args.method,
        args.k,
        !args.no_final_readout,
        cfg.seed,
    )?;
    log::info!(
        "sampled {} sequences in {:.1?}",
        metrics.sequences.len(),
        started.elapsed()
    );

    let mut text = String::new();
    for seq in &metrics.sequences {
        let line: Vec<String> = seq.iter().map(|v| v.to_string()).collect();
        writeln!(text, "{}", line.join(" ")).expect("string write");
    }
    write_if_changed(&args.out, &text)?;

    if let Some(paths_path) = &args.paths {
        let mut dump = String::new();
        for path in &metrics.paths {
            writeln!(dump, "{}", path.to_json_line()).expect("string write");
        }
        write_if_changed(paths_path, &dump)?;
    }
    if let Some(metrics_path) = &args.metrics {
        let hash = cfg.hash();
        let mut csv = format!("# config_hash={hash} seed={}\nmetric,value\n", cfg.seed);
        writeln!(csv, "ensemble,{}", metrics.sequences.len()).expect("write");
        writeln!(csv, "nfe,{}", metrics.nfe).expect("write");
        writeln!(csv, "mean_events,{:.6}", metrics.mean_events).expect("write");
        if let DataSource::Countdown { value_count, .. } = cfg.data {
            let vr = countdown::violation_rate(&metrics.sequences, value_count)?;
            let svr = countdown::sequence_violation_rate(&metrics.sequences, value_count)?;
            writeln!(csv, "violation_rate,{vr:.6}").expect("write");
            writeln!(csv, "sequence_violation_rate,{svr:.6}").expect("write");
        }
        write_if_changed(metrics_path, &csv)?;
    }
    println!("wrote {} sequences to {}", metrics.sequences.len(), args.out.display());
    Ok(0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32> {
    let cfg = args.config.resolve()?;
    let (schedule_a, kernel_a) = load_schedule(&args.schedule_a, &cfg)?;
    let (schedule_b, kernel_b) = load_schedule(&args.schedule_b, &cfg)?;
    let mut cfg = cfg;
    match (kernel_a, kernel_b) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(
                "schedules carry different kernels; comparison needs a shared oracle"
                    .into(),
            ));
        }
        (Some(a), _) => cfg.kernel = a,
        (None, Some(b)) => cfg.kernel = b,
        (None, None) => {}
    }
    let oracle = cfg.build_oracle()?;
    let hash = cfg.hash();
    let mut csv = format!("# config_hash={hash} seed={}\nschedule,metric,value\n", cfg.seed);

    let enumerable = oracle.observed_space().is_enumerable();
    for (label, schedule) in [("a", &schedule_a), ("b", &schedule_b)] {
        writeln!(csv, "{label},nfe,{}", schedule.nfe()).expect("write");
        if enumerable {
            let step = match cfg.step_kernel {
                StepKernel::Euler => crate::brute::ScheduleStep::Euler,
                StepKernel::ExactHold => crate::brute::ScheduleStep::ExactHold,
            };
            let p_end = oracle.qt_full(schedule.t_min().max(1e-12))?;
            let q = crate::brute::schedule_distribution(&oracle, schedule, step)?;
            let kl = kl_divergence(&p_end, &q)?;
            writeln!(csv, "{label},endpoint_kl,{kl:.12e}").expect("write");
        } else {
            let metrics = run_ensemble(
                &oracle,
                &cfg,
                schedule,
                MethodArg::TauLeap,
                1,
                true,
                cfg.seed,
            )?;
            if let DataSource::Countdown { value_count, .. } = cfg.data {
                let vr = countdown::violation_rate(&metrics.sequences, value_count)?;
                writeln!(csv, "{label},violation_rate,{vr:.6}").expect("write");
            }
            let tv = mean_position_marginal_tv(&oracle, &metrics.sequences)?;
            writeln!(csv, "{label},mean_position_marginal_tv,{tv:.6}").expect("write");
        }
    }
    write_if_changed(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Mean over positions of the total variation between empirical per-position
/// token distributions and the data law's position marginals.
fn mean_position_marginal_tv(
    oracle: &ReverseOracle,
    sequences: &[Vec<usize>],
) -> Result<f64> {
    let dims = oracle.num_dims();
    let s_dat = oracle.data().vocab_size();
    let marginals = position_marginals(oracle.data());
    let mut tv_sum = 0.0;
    for d in 0..dims {
        let mut counts = vec![0.0; s_dat + 1];
        for seq in sequences {
            let v = seq[d].min(s_dat);
            counts[v] += 1.0;
        }
        let n: f64 = counts.iter().sum();
        let mut tv = 0.0;
        for v in 0..s_dat {
            tv += (counts[v] / n - marginals[d][v]).abs();
        }
        tv += counts[s_dat] / n; // out-of-vocabulary mass
        tv_sum += 0.5 * tv;
    }
    Ok(tv_sum / dims as f64)
}

fn position_marginals(data: &crate::data::DataDistribution) -> Vec<Vec<f64>> {
    match data {
        crate::data::DataDistribution::Markov { initial, transitions } => {
            let mut out = vec![initial.clone()];
            for m in transitions {
                let prev = out.last().unwrap();
                out.push(m.vecmul_left(prev));
            }
            out
        }
        crate::data::DataDistribution::Explicit(p) => (0..p.space().num_dims())
            .map(|d| p.marginal(d).expect("marginal").probs().to_vec())
            .collect(),
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let results = crate::verify::run_suite(args.quick)?;
    let mut all_pass = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.details);
        all_pass &= r.passed;
    }
    if let Some(path) = &args.json {
        let json: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "name": r.name,
                    "passed": r.passed,
                    "details": r.details,
                })
            })
            .collect();
        write_if_changed(path, &serde_json::to_string_pretty(&json)?)?;
    }
    Ok(if all_pass { 0 } else { 2 })
}
