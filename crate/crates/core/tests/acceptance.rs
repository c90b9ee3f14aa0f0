//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sparsegrow::config::{DataSource, ExperimentConfig};
use sparsegrow::experiment::{run_baseline, run_experiment, Baseline, RunOutcome};
use sparsegrow::fit::{curve, fit_logistic, plateau_density, DensityTrace, PlateauRule};
use sparsegrow::growth::{grow, growth_amount, Batch, GrowthMethod};
use sparsegrow::model::{ArchSpec, MaskedNetwork};
use sparsegrow::oracle::path_suite;
use sparsegrow::seed::{imp_c_step, init_uniform};
use sparsegrow::suites::{
    fit_grid, run_suite, SuiteResult, FIT_BETA_TOL, FIT_NOISE, FIT_NOISY_TOL, FIT_PLATEAU_TOL, PATH_TOL,
};
use sparsegrow::tensor::Tensor;
use sparsegrow::train::RoughTrainPolicy;

const PATH_NETS: usize = 100;
const PATH_SECONDS: f64 = 10.0;
const GROWTH_OPS: usize = 1000;
const GROWTH_SECONDS: f64 = 5.0;
const DESK_MINUTES: f64 = 60.0;
const DESK_DENSITY: f64 = 0.13;

type Check = fn() -> sparsegrow::Result<(bool, String)>;

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, r: sparsegrow::Result<(bool, String)>) -> Verdict {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    Verdict {
        id,
        name,
        passed,
        detail,
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn suite_line(s: &SuiteResult) -> (bool, String) {
    let mut d = format!(
        "{} cases, worst {:.3e} vs tolerance {:.0e}, {:.2} s",
        s.cases, s.worst, s.tolerance, s.seconds
    );
    if !s.failures.is_empty() {
        d.push_str(&format!("; {}", s.failures.join("; ")));
    }
    (s.passed, d)
}

fn path_scoring() -> sparsegrow::Result<(bool, String)> {
    let t = Instant::now();
    let c = path_suite(PATH_NETS, 0xACCE_0001, 0.0)?;
    let secs = t.elapsed().as_secs_f64();
    let scores = [c.phi, c.psi, c.pwmp, c.total, c.centrality];
    let worst = scores.into_iter().fold(0.0, f64::max);
    Ok((
        worst <= PATH_TOL && secs < PATH_SECONDS,
        format!(
            "{PATH_NETS} nets, worst rel err phi {:.1e} psi {:.1e} S {:.1e} total {:.1e} C {:.1e} (tol {PATH_TOL:.0e}), {secs:.2} s (limit {PATH_SECONDS} s)",
            c.phi, c.psi, c.pwmp, c.total, c.centrality
        ),
    ))
}

fn delta_trace() -> sparsegrow::Result<(bool, String)> {
    let c = path_suite(50, 0xACCE_0003, 0.0)?;
    Ok((
        c.delta_trace <= PATH_TOL && c.pwmp <= PATH_TOL,
        format!(
            "50 tiny nets, reference vs enumerated delta-trace {:.1e}, S vs L1 enumeration {:.1e} (tol {PATH_TOL:.0e})",
            c.delta_trace, c.pwmp
        ),
    ))
}

fn random_net(rng: &mut ChaCha8Rng) -> sparsegrow::Result<MaskedNetwork<f64>> {
    let depth = rng.random_range(2..=4);
    let widths: Vec<String> = (0..=depth).map(|_| rng.random_range(2..=9).to_string()).collect();
    let arch = ArchSpec::from_id(&format!("mlp-{}", widths.join("-")))?;
    let mut net = MaskedNetwork::<f64>::from_arch(&arch, rng.random())?;
    init_uniform(&mut net, rng.random_range(0.1..0.6), rng.random())?;
    Ok(net)
}

fn snapshot(net: &MaskedNetwork<f64>) -> Vec<(Vec<bool>, Vec<f64>)> {
    net.layers()
        .iter()
        .map(|l| (l.mask().bits().to_vec(), l.weight().data().to_vec()))
        .collect()
}

#[derive(Default)]
struct OpCounts {
    grows: usize,
    prunes: usize,
    added: usize,
    removed: usize,
}

/// One random grow or prune applied to `net`, with every invariant checked.
fn operation(net: &mut MaskedNetwork<f64>, rng: &mut ChaCha8Rng, counts: &mut OpCounts) -> Result<(), TestCaseError> {
    let before = snapshot(net);
    let n = net.prunable_params();
    let nnz = net.prunable_nnz();
    let prunable = net.prunable_flags();
    let grow_now = net.missing_edges() > 0 && (nnz < 2 || rng.random_bool(0.6));
    if grow_now {
        let gamma = rng.random_range(0.05..1.5);
        let rho = net.density();
        let amount = growth_amount(rho, gamma, None, n).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(amount.edges, (n as f64 * gamma * rho + 1e-9).floor() as usize);
        let method = [GrowthMethod::Random, GrowthMethod::Pwmpr, GrowthMethod::Pwmp, GrowthMethod::Gradient]
            [rng.random_range(0..4)];
        let inputs = net.input_shape().iter().product::<usize>();
        let x = Tensor::from_f64(
            vec![3, inputs],
            &(0..3 * inputs).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..net.output_width())).collect();
        let batch = Batch { x: &x, labels: &labels };
        let ev = grow(net, method, amount.edges, rng.random(), Some(&batch))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let expected = amount.edges.min(n - nnz);
        prop_assert_eq!(ev.added.len(), expected);
        counts.grows += 1;
        counts.added += expected;
        prop_assert_eq!(net.prunable_nnz(), nnz + expected);
        for (l, (bits, w)) in before.iter().enumerate() {
            let layer = net.layer(l);
            for (i, &was) in bits.iter().enumerate() {
                let now = layer.mask().bits()[i];
                prop_assert!(!was || now, "grow removed edge {l}/{i}");
                if was {
                    prop_assert_eq!(layer.weight().data()[i], w[i]);
                } else if now {
                    prop_assert!(prunable[l]);
                    prop_assert_eq!(layer.weight().data()[i], 0.0, "new edge {}/{} not zero", l, i);
                }
            }
        }
    } else {
        let ratio = rng.random_range(0.05..0.6);
        let removed = imp_c_step(net, ratio).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(removed, (ratio * nnz as f64).round() as usize);
        counts.prunes += 1;
        counts.removed += removed;
        prop_assert_eq!(net.prunable_nnz(), nnz - removed);
        for (l, (bits, w)) in before.iter().enumerate() {
            let layer = net.layer(l);
            for (i, &was) in bits.iter().enumerate() {
                let now = layer.mask().bits()[i];
                prop_assert!(was || !now, "prune added edge {l}/{i}");
                if now {
                    prop_assert_eq!(layer.weight().data()[i], w[i]);
                } else {
                    prop_assert_eq!(layer.weight().data()[i], 0.0);
                }
            }
        }
    }
    prop_assert_eq!(net.density(), net.prunable_nnz() as f64 / n as f64);
    Ok(())
}

fn growth_invariants() -> sparsegrow::Result<(bool, String)> {
    const PER_CASE: usize = 10;
    let cases = GROWTH_OPS / PER_CASE;
    let t = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: cases as u32,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let counts = std::cell::RefCell::new(OpCounts::default());
    let res = runner.run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = random_net(&mut rng).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for _ in 0..PER_CASE {
            operation(&mut net, &mut rng, &mut counts.borrow_mut())?;
        }
        Ok(())
    });
    let c = counts.into_inner();
    let secs = t.elapsed().as_secs_f64();
    Ok(match res {
        Ok(()) => (
            secs < GROWTH_SECONDS,
            format!(
                "{} grows (+{} edges) and {} prunes (-{} edges) on {cases} networks, {secs:.2} s (limit {GROWTH_SECONDS} s)",
                c.grows, c.added, c.prunes, c.removed
            ),
        ),
        Err(e) => (false, format!("{e}")),
    })
}

fn stopping_rule() -> sparsegrow::Result<(bool, String)> {
    let mut beta_err: f64 = 0.0;
    let mut plateau_err: f64 = 0.0;
    let curves = [(0.5, 0.4, 10.0), (0.3, 0.6, 4.0), (0.1, 0.85, 20.0), (0.6, 0.3, 8.0)];
    for &(p0, a, beta) in &curves {
        let pts: Vec<(f64, f64)> = fit_grid().into_iter().map(|r| (r, curve(p0, a, beta, r))).collect();
        let Some(f) = fit_logistic(&DensityTrace::from_points(&pts)?, PlateauRule::OfAsymptote) else {
            return Ok((false, format!("no fit for noiseless curve ({p0}, {a}, {beta})")));
        };
        beta_err = beta_err.max((f.beta - beta).abs() / beta);
        plateau_err = plateau_err.max((f.plateau - plateau_density(p0, a, beta, PlateauRule::OfAsymptote)).abs());
    }
    let noise = Normal::new(0.0, FIT_NOISE).expect("valid deviation");
    let truth = plateau_density(0.5, 0.4, 10.0, PlateauRule::OfAsymptote);
    let mut noisy: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF17 + seed);
        let pts: Vec<(f64, f64)> = fit_grid()
            .into_iter()
            .map(|r| (r, curve(0.5, 0.4, 10.0, r) + noise.sample(&mut rng)))
            .collect();
        noisy = noisy.max(match fit_logistic(&DensityTrace::from_points(&pts)?, PlateauRule::OfAsymptote) {
            Some(f) => (f.plateau - truth).abs() / truth,
            None => f64::INFINITY,
        });
    }
    Ok((
        beta_err < FIT_BETA_TOL && plateau_err < FIT_PLATEAU_TOL && noisy < FIT_NOISY_TOL,
        format!(
            "noiseless beta rel err {beta_err:.1e} (tol {FIT_BETA_TOL}), plateau abs err {plateau_err:.1e} (tol {FIT_PLATEAU_TOL:.0e}); noisy sigma {FIT_NOISE} worst plateau rel err {:.1}% over 20 seeds (tol {:.0}%)",
            100.0 * noisy,
            100.0 * FIT_NOISY_TOL
        ),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_pipeline() -> sparsegrow::Result<(bool, String)> {
    let t = Instant::now();
    let root = workspace();
    let mut cfg = ExperimentConfig::load(&root.join("configs/mnist_mlp.toml"))?;
    if let DataSource::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
    } = &mut cfg.data.source
    {
        for p in [Some(train_images), Some(train_labels), test_images.as_mut(), test_labels.as_mut()]
            .into_iter()
            .flatten()
        {
            *p = root.join(&*p);
        }
    }
    let tmp = tempfile::tempdir().map_err(|e| sparsegrow::Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    cfg.output = tmp.path().to_path_buf();
    assert_eq!(cfg.seeds.len(), 3);
    assert!((cfg.init.density - 0.05).abs() < 1e-12 && (cfg.growth.gamma - 0.25).abs() < 1e-12);
    assert!(matches!(cfg.rough, RoughTrainPolicy::Adaptive { patience: 3, .. }));

    let mut runs: Vec<(GrowthMethod, Vec<RunOutcome>)> = Vec::new();
    for m in [GrowthMethod::Pwmpr, GrowthMethod::Random, GrowthMethod::Pwmp] {
        let outs = cfg
            .seeds
            .iter()
            .map(|&s| run_baseline(&cfg, Baseline::Growth(m), s, None))
            .collect::<sparsegrow::Result<Vec<_>>>()?;
        runs.push((m, outs));
    }
    let acc = |outs: &[RunOutcome]| {
        mean(&outs
            .iter()
            .map(|o| o.report.test_acc.unwrap_or(o.report.final_val_acc))
            .collect::<Vec<_>>())
    };
    let low_core = |outs: &[RunOutcome]| {
        let v: Vec<f64> = outs
            .iter()
            .flat_map(|o| o.rows.iter())
            .filter(|r| r.density < DESK_DENSITY)
            .map(|r| r.avg_core_ratio)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean(&v)
        }
    };
    let (pwmpr, rg, pwmp) = (&runs[0].1, &runs[1].1, &runs[2].1);
    let (acc_pwmpr, acc_rg) = (acc(pwmpr), acc(rg));
    let (core_pwmpr, core_pwmp) = (low_core(pwmpr), low_core(pwmp));
    let a = acc_pwmpr >= acc_rg;
    let b = core_pwmpr >= core_pwmp;

    // IMP-C cost is a function of the density schedule alone, so one seed suffices.
    let stop = pwmpr.iter().map(|o| o.report.stop_density).fold(f64::INFINITY, f64::min);
    cfg.baseline.prune_target = stop;
    let imp = run_baseline(&cfg, Baseline::ImpC, cfg.seeds[0], None)?;
    let pipeline_cost = mean(&pwmpr.iter().map(|o| o.report.relative_cost).collect::<Vec<_>>());
    let mut worst_margin = f64::INFINITY;
    for o in pwmpr {
        let imp_cost = imp
            .rows
            .iter()
            .find(|r| r.density <= o.report.stop_density + 1e-12)
            .map(|r| r.relative_cost)
            .unwrap_or(f64::NAN);
        worst_margin = worst_margin.min(imp_cost - o.report.relative_cost);
    }
    let c = worst_margin > 0.0;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    Ok((
        a && b && c && minutes < DESK_MINUTES,
        format!(
            "(a) {} accuracy pwmpr {acc_pwmpr:.4} vs rg {acc_rg:.4}; (b) {} core ratio below {DESK_DENSITY} pwmpr {core_pwmpr:.4} vs pwmp {core_pwmp:.4}; (c) {} cost pwmpr {pipeline_cost:.3} vs imp-c {:.3} at density {stop:.4}; {minutes:.1} min (limit {DESK_MINUTES})",
            if a { "ok" } else { "FAILED" },
            if b { "ok" } else { "FAILED" },
            if c { "ok" } else { "FAILED" },
            pipeline_cost + worst_margin.max(0.0),
        ),
    ))
}

fn determinism() -> sparsegrow::Result<(bool, String)> {
    let root = workspace();
    let tmp = tempfile::tempdir().map_err(|e| sparsegrow::Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    let mut cfg = ExperimentConfig::load(&root.join("configs/synthetic_smoke.toml"))?;
    let mut checked = 0;
    for m in [GrowthMethod::Pwmpr, GrowthMethod::Gradient] {
        cfg.growth.method = m;
        let mut files = Vec::new();
        for run in ["a", "b"] {
            cfg.output = tmp.path().join(run);
            let out = run_experiment(&cfg, 11)?;
            let read = |f: &str| std::fs::read(out.dir.join(f)).unwrap_or_default();
            files.push((read("metrics.csv"), read("trace.csv")));
        }
        if files[0] != files[1] || files[0].0.is_empty() {
            return Ok((false, format!("{} metrics differ between identical runs", m.tag())));
        }
        checked += 2;
    }
    Ok((true, format!("{checked} CSV pairs bit-identical across repeated runs")))
}

fn defaults() -> sparsegrow::Result<(bool, String)> {
    let d = ExperimentConfig::default();
    let parsed = ExperimentConfig::from_toml("")?;
    let patience = match d.rough {
        RoughTrainPolicy::Adaptive { patience, .. } => Some(patience),
        RoughTrainPolicy::Fixed { .. } => None,
    };
    let ok = d.growth.gamma == 0.25
        && d.baseline.prune_ratio == 0.2
        && d.stopping.tau == 0.9
        && patience == Some(3)
        && d.data.val_fraction == 0.1
        && parsed == d;
    Ok((
        ok,
        format!(
            "gamma {}, prune ratio {}, tau {}, patience {:?}, val fraction {}, empty file parses to defaults: {}",
            d.growth.gamma,
            d.baseline.prune_ratio,
            d.stopping.tau,
            patience,
            d.data.val_fraction,
            parsed == d
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let checks: Vec<(u32, &'static str, Check)> = vec![
        (1, "path-scoring oracle", path_scoring),
        (2, "conv scoring", || run_suite("conv", 0.0).map(|s| suite_line(&s))),
        (3, "delta-trace oracle", delta_trace),
        (4, "sampling", || run_suite("sampling", 0.0).map(|s| suite_line(&s))),
        (5, "growth invariants", growth_invariants),
        (6, "gradient check", || run_suite("gradient", 0.0).map(|s| suite_line(&s))),
        (7, "stopping-rule recovery", stopping_rule),
        (8, "desk-scale pipeline", desk_pipeline),
        (9, "determinism", determinism),
        (10, "config defaults", defaults),
    ];
    let mut failed = 0;
    for (id, name, f) in checks {
        let v = verdict(id, name, f());
        println!(
            "[{}] {:>2} {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    println!(
        "acceptance: {}/10 passed in {:.1} s",
        10 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
