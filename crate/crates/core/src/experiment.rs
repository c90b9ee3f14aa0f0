//! Config-driven runs: data loading, network construction and artifact output.

use std::path::PathBuf;
use std::str::FromStr;

use crate::artifacts::{RunDir, RunReport, VERSION};
use crate::config::{ExperimentConfig, Precision, Splits};
use crate::error::{Error, Result};
use crate::growth::GrowthMethod;
use crate::model::MaskedNetwork;
use crate::pipeline::{
    derive_seed, run_growth_pipeline, run_imp_c, run_static, PipelineSettings, StopReason, TraceRow,
};
use crate::tensor::Scalar;
use crate::train::{evaluate, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    ImpC,
    Growth(GrowthMethod),
    PhewStatic,
}

impl Baseline {
    pub fn tag(self) -> &'static str {
        match self {
            Baseline::ImpC => "imp-c",
            Baseline::Growth(m) => m.tag(),
            Baseline::PhewStatic => "phew-static",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "imp-c" => Baseline::ImpC,
            "rg" => Baseline::Growth(GrowthMethod::Random),
            "gg" => Baseline::Growth(GrowthMethod::Gradient),
            "pwmp" => Baseline::Growth(GrowthMethod::Pwmp),
            "pwmpr" => Baseline::Growth(GrowthMethod::Pwmpr),
            "phew-static" => Baseline::PhewStatic,
            other => {
                return Err(Error::Usage(format!(
                    "unknown baseline `{other}` (expected imp-c, rg, gg, pwmp, pwmpr or phew-static)"
                )))
            }
        })
    }
}

/// What a finished run leaves behind, besides its directory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
    pub rows: Vec<TraceRow>,
}

/// Budget for a static-density run, usually read off a growth run's report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StaticBudget {
    pub density: f64,
    pub flops: f64,
}

impl StaticBudget {
    pub fn from_report(r: &RunReport) -> Self {
        StaticBudget {
            density: r.stop_density,
            flops: r.cumulative_flops,
        }
    }
}

/// Runs the growth pipeline with the configured method.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    run_baseline(cfg, Baseline::Growth(cfg.growth.method), seed, None)
}

/// Runs `kind` under `cfg`; growth baselines differ from the main run only in the
/// method tag.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    kind: Baseline,
    seed: u64,
    budget: Option<StaticBudget>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Baseline::Growth(m) = kind {
        cfg.growth.method = m;
    }
    if let (Baseline::PhewStatic, Some(b)) = (kind, budget) {
        cfg.baseline.static_density = Some(b.density);
        cfg.baseline.static_flops = Some(b.flops);
    }
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(&cfg, kind, seed),
        Precision::F64 => run_typed::<f64>(&cfg, kind, seed),
    }
}

fn accuracy<T: Scalar>(net: &MaskedNetwork<T>, splits: &Splits, batch: usize) -> Result<Option<f64>> {
    splits
        .test
        .as_ref()
        .map(|t| evaluate(net, t, batch).map(|(_, acc)| acc))
        .transpose()
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, kind: Baseline, seed: u64) -> Result<RunOutcome> {
    let splits = cfg.data.load(&cfg.arch.input_shape(), derive_seed(seed, 2))?;
    let mut net = MaskedNetwork::<T>::from_arch(&cfg.arch, derive_seed(seed, 3))?;
    let mut trainer = Trainer::<T>::new(&splits.train, &splits.val, cfg.train.clone(), derive_seed(seed, 4))?;
    let dir_path = cfg.run_dir(kind.tag(), seed);
    let mut dir = RunDir::create(&dir_path, cfg, kind.tag(), seed)?;
    log::info!("{} seed {seed} -> {}", kind.tag(), dir_path.display());

    let (report, rows) = match kind {
        Baseline::Growth(_) => {
            let settings = PipelineSettings::from_config(cfg, seed);
            let res = run_growth_pipeline(&mut net, &mut trainer, &settings, &mut dir)?;
            let report = RunReport {
                version: VERSION.into(),
                method: kind.tag().into(),
                seed,
                arch: cfg.arch.to_string(),
                stop_density: res.stop_density,
                stop_reason: Some(res.stop),
                growth_steps: res.growth_steps,
                final_val_acc: res.final_phase.val_acc,
                test_acc: accuracy(&net, &splits, cfg.train.eval_batch)?,
                cumulative_flops: res.ledger.cumulative,
                normalizer_flops: res.ledger.normalizer,
                relative_cost: res.ledger.relative(),
            };
            (report, res.rows)
        }
        Baseline::ImpC => {
            let res = run_imp_c(
                &mut net,
                &mut trainer,
                cfg.baseline.prune_ratio,
                cfg.baseline.prune_target,
                cfg.extensive.epochs,
                cfg.stopping.tau,
                &mut dir,
            )?;
            let report = RunReport {
                version: VERSION.into(),
                method: kind.tag().into(),
                seed,
                arch: cfg.arch.to_string(),
                stop_density: net.density(),
                stop_reason: Some(StopReason::Target),
                growth_steps: res.rows.len() - 1,
                final_val_acc: res.final_phase.val_acc,
                test_acc: accuracy(&net, &splits, cfg.train.eval_batch)?,
                cumulative_flops: res.ledger.cumulative,
                normalizer_flops: res.ledger.normalizer,
                relative_cost: res.ledger.relative(),
            };
            (report, res.rows)
        }
        Baseline::PhewStatic => {
            let (density, flops) = match (cfg.baseline.static_density, cfg.baseline.static_flops) {
                (Some(d), Some(f)) => (d, f),
                _ => {
                    return Err(Error::Config(
                        "baseline.static_density and baseline.static_flops are required for phew-static".into(),
                    ))
                }
            };
            let res = run_static(
                &mut net,
                &mut trainer,
                crate::seed::InitMethod::Phew,
                density,
                seed,
                flops,
                cfg.extensive.epochs,
                &mut dir,
            )?;
            let report = RunReport {
                version: VERSION.into(),
                method: kind.tag().into(),
                seed,
                arch: cfg.arch.to_string(),
                stop_density: net.density(),
                stop_reason: None,
                growth_steps: 0,
                final_val_acc: res.final_phase.val_acc,
                test_acc: accuracy(&net, &splits, cfg.train.eval_batch)?,
                cumulative_flops: res.ledger.cumulative,
                normalizer_flops: res.ledger.normalizer,
                relative_cost: res.ledger.relative(),
            };
            (report, Vec::new())
        }
    };
    dir.write_report(&report)?;
    Ok(RunOutcome {
        dir: dir_path,
        report,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::read_metrics;
    use crate::train::RoughTrainPolicy;

    fn smoke(out: &std::path::Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.output = out.to_path_buf();
        cfg.rough = RoughTrainPolicy::Fixed { epochs: 1 };
        cfg.growth.max_steps = 3;
        cfg.extensive.epochs = 2;
        cfg.init.density = 0.1;
        cfg
    }

    #[test]
    fn growth_run_writes_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = smoke(tmp.path());
        let out = run_experiment(&cfg, 1).unwrap();
        for f in ["config.toml", "run.json", "metrics.csv", "trace.csv", "events.jsonl", "report.json", "final.snap"] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
        assert_eq!(out.report.growth_steps, 3);
        assert!(out.report.relative_cost > 0.0);
        assert_eq!(read_metrics(&out.dir).unwrap().len(), 4 + 2);
    }

    #[test]
    fn same_seed_same_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = smoke(&tmp.path().join("a"));
        let a = run_experiment(&cfg, 5).unwrap();
        cfg.output = tmp.path().join("b");
        let b = run_experiment(&cfg, 5).unwrap();
        assert_eq!(
            std::fs::read(a.dir.join("metrics.csv")).unwrap(),
            std::fs::read(b.dir.join("metrics.csv")).unwrap()
        );
    }

    #[test]
    fn static_baseline_needs_a_budget() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = smoke(tmp.path());
        assert!(matches!(
            run_baseline(&cfg, Baseline::PhewStatic, 1, None),
            Err(Error::Config(_))
        ));
        let out = run_baseline(
            &cfg,
            Baseline::PhewStatic,
            1,
            Some(StaticBudget {
                density: 0.2,
                flops: 1e7,
            }),
        )
        .unwrap();
        assert!((out.report.stop_density - 0.2).abs() < 0.01);
    }

    #[test]
    fn unknown_baseline_is_usage_error() {
        assert!(matches!("sgd".parse::<Baseline>(), Err(Error::Usage(_))));
        assert_eq!("imp-c".parse::<Baseline>().unwrap(), Baseline::ImpC);
    }
}
