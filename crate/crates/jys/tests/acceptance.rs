//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them all).

use jys::brute::{schedule_distribution, ScheduleStep};
use jys::config::ExperimentConfig;
use jys::countdown::{self, CountdownSpec};
use jys::dist::kl_divergence;
use jys::kernels::KernelFamily;
use jys::klub::KlubConfig;
use jys::oracle::ReverseOracle;
use jys::samplers::{path_rng, tau_leap_sample, StepKernel};
use jys::scheduler::{jump_your_steps, JysTrace, RefineObjective, Schedule, SearchConfig};
use jys::verify;

fn announce(criterion: &str, passed: bool, details: &str) {
    println!("{} {criterion}: {details}", if passed { "PASS" } else { "FAIL" });
}

fn countdown_oracle() -> ReverseOracle {
    let cfg = ExperimentConfig::default();
    cfg.build_oracle().expect("countdown oracle")
}

#[test]
fn criterion_01_cde_bound_inequality() {
    let (result, instances) = verify::check_cde_bound().unwrap();
    announce("criterion 1 (cumulative-CDE bound)", result.passed, &result.details);
    // The idealized product-marginal chain satisfies the bound; the hold-rate
    // τ-leap chain carries extra marginal error the bound does not cover, so
    // its endpoint KL routinely exceeds the CDE sum. Surface both.
    let eh_violations = instances.iter().filter(|i| i.lhs_exact_hold > i.rhs + 1e-9).count();
    println!(
        "    note: hold-rate tau-leap endpoints exceed the CDE sum on {eh_violations}/20 instances (expected; the bound's chain is the product-marginal sampler)"
    );
    assert!(result.passed, "{}", result.details);
}

#[test]
fn criterion_02_path_kl_bound() {
    let result = verify::check_path_kl_bound(100_000).unwrap();
    announce("criterion 2 (endpoint KL <= path KL)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

#[test]
fn criterion_03_cde_mutual_information_identity() {
    let result = verify::check_cde_mi_identity().unwrap();
    announce("criterion 3 (CDE = conditional MI)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

#[test]
fn criterion_04_klub_additivity() {
    let result = verify::check_klub_additivity(2000).unwrap();
    announce("criterion 4 (path-KL additivity)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

#[test]
fn criterion_05_transition_count_law() {
    let result = verify::check_transition_count_law(100_000).unwrap();
    announce("criterion 5 (transition-count law)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

#[test]
fn criterion_06_estimator_agreement() {
    let result = verify::check_estimator_agreement(100_000).unwrap();
    announce("criterion 6 (closed form vs path MC)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

fn violation_of(
    oracle: &ReverseOracle,
    schedule: &Schedule,
    value_count: usize,
    ensemble: usize,
    eval_seed: u64,
) -> f64 {
    let mut seqs = Vec::with_capacity(ensemble);
    for i in 0..ensemble {
        let mut rng = path_rng(eval_seed, i as u64);
        let path =
            tau_leap_sample(oracle, schedule, None, &mut rng, StepKernel::Euler).unwrap();
        let cleaned =
            oracle.denoising_argmax(&path.final_state(), schedule.t_min()).unwrap();
        seqs.push(cleaned);
    }
    countdown::violation_rate(&seqs, value_count).unwrap()
}

#[test]
fn criterion_07_optimized_beats_uniform() {
    let spec = CountdownSpec::default();
    let oracle = countdown_oracle();
    let horizon = oracle.horizon();
    let t_min = 1e-4;
    let ensemble = 3000;
    let seeds = 10u64;
    let mut all_ok = true;

    for k in [1u32, 2, 3] {
        let nfe = 1usize << k;
        let uniform = Schedule::uniform(horizon, t_min, nfe).unwrap();
        let mut wins = 0;
        let mut sum_opt = 0.0;
        let mut sum_uni = 0.0;
        for seed in 0..seeds {
            let cfg = KlubConfig::default();
            let search = SearchConfig::for_horizon(horizon);
            let (sched, _) =
                jump_your_steps(&oracle, k, t_min, &search, &cfg, 4000 + seed).unwrap();
            let eval_seed = 91_000 + seed;
            let vr_opt = violation_of(&oracle, &sched, spec.value_count, ensemble, eval_seed);
            let vr_uni =
                violation_of(&oracle, &uniform, spec.value_count, ensemble, eval_seed);
            sum_opt += vr_opt;
            sum_uni += vr_uni;
            if vr_opt <= vr_uni {
                wins += 1;
            }
        }
        let mean_opt = sum_opt / seeds as f64;
        let mean_uni = sum_uni / seeds as f64;
        let rel = 1.0 - mean_opt / mean_uni;
        let ok_wins = wins >= 8;
        let ok_margin = k != 2 || rel >= 0.05;
        announce(
            &format!("criterion 7 (countdown NFE={nfe})"),
            ok_wins && ok_margin,
            &format!(
                "wins {wins}/{seeds}, mean violations {mean_opt:.4} vs uniform {mean_uni:.4} ({:+.1}% relative)",
                rel * 100.0
            ),
        );
        all_ok &= ok_wins && ok_margin;
    }

    // Enumerable-space comparison: uniform kernel, direct endpoint objective.
    let brute_oracle =
        verify::random_explicit_oracle(KernelFamily::Uniform, 3, 4, 7007).unwrap();
    let search = SearchConfig::for_horizon(horizon).with_objective(RefineObjective::EndpointKl);
    let (jys_sched, _) =
        jump_your_steps(&brute_oracle, 1, t_min, &search, &KlubConfig::default(), 3).unwrap();
    let uniform2 = Schedule::uniform(horizon, t_min, 2).unwrap();
    let p_end = brute_oracle.qt_full(t_min).unwrap();
    let kl_of = |s: &Schedule| {
        let q = schedule_distribution(&brute_oracle, s, ScheduleStep::Euler).unwrap();
        kl_divergence(&p_end, &q).unwrap()
    };
    let (kl_jys, kl_uni) = (kl_of(&jys_sched), kl_of(&uniform2));
    let brute_ok = kl_jys <= kl_uni + 1e-6;
    announce(
        "criterion 7 (uniform kernel, brute-force KL at NFE=2)",
        brute_ok,
        &format!(
            "optimized breakpoint {:.4}: KL {kl_jys:.6e} vs uniform {kl_uni:.6e}",
            jys_sched.timesteps()[1]
        ),
    );
    assert!(all_ok && brute_ok);
}

#[test]
fn criterion_08_golden_section_contract() {
    let result = verify::check_golden_section().unwrap();
    announce("criterion 8 (golden-section contract)", result.passed, &result.details);
    assert!(result.passed, "{}", result.details);
}

/// Largest per-breakpoint deviation between matching segments of two
/// optimization traces, as a fraction of the reference segment's width.
fn max_relative_deviation(reference: &JysTrace, probe: &JysTrace) -> f64 {
    assert_eq!(reference.segments.len(), probe.segments.len());
    reference
        .segments
        .iter()
        .zip(&probe.segments)
        .map(|(a, b)| {
            assert_eq!((a.round, a.segment_index), (b.round, b.segment_index));
            (a.t - b.t).abs() / (a.s - a.u)
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_09_sample_size_robustness() {
    let oracle = countdown_oracle();
    let horizon = oracle.horizon();
    let t_min = 1e-4;
    let search = SearchConfig::for_horizon(horizon);
    let seeds = 10u64;
    let run = |rounds: u32| {
        let mut agree = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let small = KlubConfig { num_samples: 256, ..KlubConfig::default() };
            let large = KlubConfig { num_samples: 2048, ..KlubConfig::default() };
            let (_, trace_small) =
                jump_your_steps(&oracle, rounds, t_min, &search, &small, 5000 + seed).unwrap();
            let (_, trace_large) =
                jump_your_steps(&oracle, rounds, t_min, &search, &large, 5000 + seed).unwrap();
            let dev = max_relative_deviation(&trace_large, &trace_small);
            worst = worst.max(dev);
            if dev <= 0.05 {
                agree += 1;
            }
        }
        (agree, worst)
    };
    let (agree, worst) = run(1);
    let passed = agree >= 8;
    announce(
        "criterion 9 (sample-size robustness)",
        passed,
        &format!(
            "256- and 2048-sample breakpoints agree within 5% of segment width on {agree}/{seeds} seeds (worst {:.1}%)",
            worst * 100.0
        ),
    );
    // Deeper rounds split segments whose objective is nearly flat around its
    // maximum, where the argmax position is ill-conditioned for any sample
    // count; reported for transparency.
    let (agree2, worst2) = run(2);
    println!(
        "    note: two-round breakdowns agree on {agree2}/{seeds} seeds (worst {:.1}%); later-round segments have plateau-shaped objectives",
        worst2 * 100.0
    );
    assert!(passed);
}

#[test]
fn criterion_10_cli_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_jys");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "gen-data",
            vec![
                "gen-data".into(),
                "--seq-len".into(), "12".into(),
                "--values".into(), "6".into(),
                "-n".into(), "40".into(),
                "--seed".into(), "11".into(),
                "-o".into(), p("REP.data.txt"),
            ],
        ),
        (
            "optimize",
            vec![
                "optimize".into(),
                "-k".into(), "1".into(),
                "--num-samples".into(), "256".into(),
                "--seed".into(), "11".into(),
                "-o".into(), p("REP.sched.json"),
                "--trace".into(), p("REP.trace.csv"),
            ],
        ),
        (
            "sample",
            vec![
                "sample".into(),
                "--schedule".into(), p("1.sched.json"),
                "--eval-ensemble".into(), "100".into(),
                "--seed".into(), "11".into(),
                "-o".into(), p("REP.samples.txt"),
                "--metrics".into(), p("REP.metrics.csv"),
            ],
        ),
        (
            "evaluate",
            vec![
                "evaluate".into(),
                "--schedule-a".into(), p("1.sched.json"),
                "--schedule-b".into(), "uniform:2".into(),
                "--eval-ensemble".into(), "100".into(),
                "--seed".into(), "11".into(),
                "-o".into(), p("REP.report.csv"),
            ],
        ),
        ("verify", vec!["verify".into(), "--quick".into(), "--json".into(), p("REP.verify.json")]),
    ];

    let mut all_ok = true;
    for (name, template) in &runs {
        // Same arguments both times: the second run overwrites the first
        // run's outputs, which are captured in between.
        let args: Vec<String> =
            template.iter().map(|a| a.replace("REP", "1")).collect();
        let mut outputs: Vec<(Vec<u8>, Vec<Vec<u8>>)> = Vec::new();
        for _ in 0..2 {
            let out = Command::new(bin)
                .args(&args)
                .env("JYS_SEED", "11")
                .output()
                .expect("command runs");
            assert!(
                out.status.success(),
                "{name} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            let files: Vec<Vec<u8>> = args
                .iter()
                .filter(|a| a.contains(dir.path().to_str().unwrap()))
                .map(|a| std::fs::read(a).unwrap_or_default())
                .collect();
            outputs.push((out.stdout, files));
        }
        let ok = outputs[0] == outputs[1];
        announce(
            &format!("criterion 10 (byte-identical rerun: {name})"),
            ok,
            if ok { "stdout and outputs identical" } else { "outputs differ" },
        );
        all_ok &= ok;
    }
    assert!(all_ok);
}
