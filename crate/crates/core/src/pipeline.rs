//! The rough-train → grow loop, its stopping rule, and the comparison harnesses.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::epoch_batches;
use crate::error::{Error, Result};
use crate::fit::{fit_logistic, DensityTrace, LogisticFit, PlateauRule, MIN_POINTS};
use crate::flops::{dense_forward_flops, flops_estimate, CostLedger, Phase, TRAIN_MULTIPLIER};
use crate::growth::{grow, growth_amount, Batch, GrowthEvent, GrowthMethod};
use crate::model::{encode_snapshot, MaskedNetwork};
use crate::pathscore::centrality_report;
use crate::seed::{imp_c_step, initialize, InitMethod};
use crate::tensor::{Scalar, Tensor};
use crate::train::{EpochStats, PhaseOutcome, RoughTrainPolicy, Trainer};

/// Independent seed for one purpose (`stream`) derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training backend used by the controller. Tests substitute a stub that reads
/// accuracy off a synthetic curve.
pub trait PhaseRunner<T: Scalar> {
    fn rough(
        &mut self,
        net: &mut MaskedNetwork<T>,
        policy: &RoughTrainPolicy,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome>;

    fn extensive(
        &mut self,
        net: &mut MaskedNetwork<T>,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome>;

    fn reset_optimizer(&mut self);

    fn train_examples(&self) -> usize;

    /// A labelled training batch for gradient-based growth.
    fn probe_batch(&self, seed: u64) -> Result<Option<(Tensor<T>, Vec<usize>)>>;
}

impl<T: Scalar> PhaseRunner<T> for Trainer<'_, T> {
    fn rough(
        &mut self,
        net: &mut MaskedNetwork<T>,
        policy: &RoughTrainPolicy,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        Trainer::rough(self, net, policy, on_epoch)
    }

    fn extensive(
        &mut self,
        net: &mut MaskedNetwork<T>,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        Trainer::extensive(self, net, epochs, on_epoch)
    }

    fn reset_optimizer(&mut self) {
        Trainer::reset_optimizer(self)
    }

    fn train_examples(&self) -> usize {
        self.train.len()
    }

    fn probe_batch(&self, seed: u64) -> Result<Option<(Tensor<T>, Vec<usize>)>> {
        let idx = epoch_batches(self.train.len(), self.config().optimizer.batch_size, seed, 0);
        Ok(Some(self.train.batch::<T>(&idx[0], None)?))
    }
}

/// Stub backend: validation accuracy is `curve(density)`; costs follow the real
/// accounting for `epochs` epochs over `examples` examples.
pub struct CurveRunner<F> {
    pub curve: F,
    pub examples: usize,
    pub epochs: usize,
}

impl<T: Scalar, F: Fn(f64) -> f64> PhaseRunner<T> for CurveRunner<F> {
    fn rough(
        &mut self,
        net: &mut MaskedNetwork<T>,
        _policy: &RoughTrainPolicy,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        let epochs = self.epochs;
        self.extensive(net, epochs, on_epoch)
    }

    fn extensive(
        &mut self,
        net: &mut MaskedNetwork<T>,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        let acc = (self.curve)(net.density());
        let per = flops_estimate(net, self.examples, Phase::Train);
        for epoch in 0..epochs {
            on_epoch(&EpochStats {
                epoch,
                density: net.density(),
                train_loss: 1.0 - acc,
                val_loss: 1.0 - acc,
                val_acc: acc,
                flops: per,
            })?;
        }
        Ok(PhaseOutcome {
            epochs,
            train_loss: 1.0 - acc,
            val_loss: 1.0 - acc,
            val_acc: acc,
            flops: per * epochs as f64,
        })
    }

    fn reset_optimizer(&mut self) {}

    fn train_examples(&self) -> usize {
        self.examples
    }

    fn probe_batch(&self, _seed: u64) -> Result<Option<(Tensor<T>, Vec<usize>)>> {
        Ok(None)
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub step: usize,
    pub epoch: usize,
    pub density: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub cumulative_flops: f64,
}

/// Per-density summary recorded after each rough phase (or pruning cycle).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub density: f64,
    pub nnz: usize,
    pub val_acc: f64,
    pub val_loss: f64,
    pub cumulative_flops: f64,
    pub relative_cost: f64,
    pub total_pwmp: f64,
    pub global_core: usize,
    pub avg_core_ratio: f64,
    pub isolated_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum StopReason {
    /// Current density reached the fitted plateau onset.
    Plateau { estimate: f64 },
    /// Growth would pass the configured density cap.
    Cap,
    /// No missing edges remain.
    Dense,
    MaxSteps,
    /// Magnitude pruning reached its target.
    Target,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum PipelineEvent {
    Init {
        method: InitMethod,
        target_density: f64,
        density: f64,
        nnz: usize,
        seed: u64,
        isolated_fraction: f64,
    },
    Rough {
        step: usize,
        density: f64,
        epochs: usize,
        val_loss: f64,
        val_acc: f64,
        flops: f64,
        cumulative_flops: f64,
    },
    Fit {
        step: usize,
        points: usize,
        fit: Option<LogisticFit>,
    },
    Grow {
        step: usize,
        #[serde(flatten)]
        growth: GrowthEvent,
    },
    Stop {
        step: usize,
        density: f64,
        #[serde(flatten)]
        reason: StopReason,
    },
    Extensive {
        epochs: usize,
        density: f64,
        val_loss: f64,
        val_acc: f64,
        flops: f64,
        cumulative_flops: f64,
    },
    Prune {
        cycle: usize,
        removed: usize,
        density: f64,
    },
    StaticPlan {
        density: f64,
        epochs: usize,
        epoch_flops: f64,
        target_flops: f64,
    },
    Abort {
        message: String,
    },
}

/// Destination for everything a run records. Writers are append-only so an aborted
/// run leaves its partial history behind.
pub trait RunSink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()>;
    fn event(&mut self, event: &PipelineEvent) -> Result<()>;
    fn trace(&mut self, row: &TraceRow) -> Result<()>;
    fn snapshot(&mut self, name: &str, bytes: &[u8]) -> Result<()>;
}

/// Keeps every record in memory; snapshots are kept by name only.
#[derive(Default)]
pub struct MemorySink {
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<String>,
}

impl RunSink for MemorySink {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.push(row.clone());
        Ok(())
    }

    fn event(&mut self, event: &PipelineEvent) -> Result<()> {
        self.events.push(serde_json::to_string(event).map_err(|e| Error::Data(e.to_string()))?);
        Ok(())
    }

    fn trace(&mut self, row: &TraceRow) -> Result<()> {
        self.trace.push(row.clone());
        Ok(())
    }

    fn snapshot(&mut self, name: &str, _bytes: &[u8]) -> Result<()> {
        self.snapshots.push(name.to_string());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSettings {
    pub init: InitMethod,
    pub rho_init: f64,
    pub method: GrowthMethod,
    pub gamma: f64,
    pub cap: Option<f64>,
    pub max_steps: usize,
    pub tau: f64,
    pub plateau: PlateauRule,
    pub rough: RoughTrainPolicy,
    pub extensive_epochs: usize,
    pub seed: u64,
}

impl PipelineSettings {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            init: cfg.init.method,
            rho_init: cfg.init.density,
            method: cfg.growth.method,
            gamma: cfg.growth.gamma,
            cap: cfg.growth.cap,
            max_steps: cfg.growth.max_steps,
            tau: cfg.stopping.tau,
            plateau: cfg.stopping.plateau,
            rough: cfg.rough.clone(),
            extensive_epochs: cfg.extensive.epochs,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub trace: DensityTrace,
    pub rows: Vec<TraceRow>,
    pub ledger: CostLedger,
    pub growth_steps: usize,
    pub stop: StopReason,
    pub stop_density: f64,
    pub last_fit: Option<LogisticFit>,
    pub final_phase: PhaseOutcome,
}

/// FLOPs of one extensive training run of the dense network.
pub fn dense_training_flops<T: Scalar>(net: &MaskedNetwork<T>, examples: usize, epochs: usize) -> f64 {
    TRAIN_MULTIPLIER * dense_forward_flops(net) * examples as f64 * epochs as f64
}

fn record_abort<R>(sink: &mut dyn RunSink, res: Result<R>) -> Result<R> {
    if let Err(e) = &res {
        let _ = sink.event(&PipelineEvent::Abort { message: e.to_string() });
    }
    res
}

fn trace_row<T: Scalar>(
    net: &MaskedNetwork<T>,
    step: usize,
    out: &PhaseOutcome,
    ledger: &CostLedger,
    tau: f64,
) -> Result<TraceRow> {
    let report = centrality_report(net, tau)?;
    Ok(TraceRow {
        step,
        density: net.density(),
        nnz: net.prunable_nnz(),
        val_acc: out.val_acc,
        val_loss: out.val_loss,
        cumulative_flops: ledger.cumulative,
        relative_cost: ledger.relative(),
        total_pwmp: report.total_pwmp,
        global_core: report.global_core_size,
        avg_core_ratio: report.avg_core_ratio,
        isolated_fraction: net.isolated_node_fraction(),
    })
}

fn metrics_row(phase: &str, step: usize, e: &EpochStats, ledger: &CostLedger) -> MetricsRow {
    MetricsRow {
        phase: phase.to_string(),
        step,
        epoch: e.epoch,
        density: e.density,
        train_loss: e.train_loss,
        val_loss: e.val_loss,
        val_acc: e.val_acc,
        cumulative_flops: ledger.cumulative,
    }
}

/// Seeds the network, then alternates rough training and growth until the fitted
/// performance curve says the current density has reached its plateau, and finally
/// trains the grown network with the extensive budget.
pub fn run_growth_pipeline<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    runner: &mut dyn PhaseRunner<T>,
    s: &PipelineSettings,
    sink: &mut dyn RunSink,
) -> Result<PipelineResult> {
    let res = growth_loop(net, runner, s, sink);
    record_abort(sink, res)
}

fn growth_loop<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    runner: &mut dyn PhaseRunner<T>,
    s: &PipelineSettings,
    sink: &mut dyn RunSink,
) -> Result<PipelineResult> {
    if !(s.gamma > 0.0) {
        return Err(Error::Config(format!("growth.gamma must be positive, got {}", s.gamma)));
    }
    let init_seed = derive_seed(s.seed, 1);
    initialize(net, s.init, s.rho_init, init_seed)?;
    sink.event(&PipelineEvent::Init {
        method: s.init,
        target_density: s.rho_init,
        density: net.density(),
        nnz: net.prunable_nnz(),
        seed: init_seed,
        isolated_fraction: net.isolated_node_fraction(),
    })?;
    sink.snapshot("init", &encode_snapshot(net)?)?;

    let mut ledger = CostLedger::new(dense_training_flops(net, runner.train_examples(), s.extensive_epochs));
    let mut trace = DensityTrace::new();
    let mut rows = Vec::new();
    let mut last_fit = None;
    let mut step = 0;
    let stop = loop {
        let out = runner.rough(net, &s.rough, &mut |e| {
            ledger.add(e.flops);
            sink.metrics(&metrics_row("rough", step, e, &ledger))
        })?;
        let density = net.density();
        trace.push(density, out.val_acc)?;
        let row = trace_row(net, step, &out, &ledger, s.tau)?;
        sink.trace(&row)?;
        rows.push(row);
        sink.event(&PipelineEvent::Rough {
            step,
            density,
            epochs: out.epochs,
            val_loss: out.val_loss,
            val_acc: out.val_acc,
            flops: out.flops,
            cumulative_flops: ledger.cumulative,
        })?;

        let fit = if trace.len() >= MIN_POINTS {
            fit_logistic(&trace, s.plateau)
        } else {
            None
        };
        sink.event(&PipelineEvent::Fit {
            step,
            points: trace.len(),
            fit: fit.clone(),
        })?;
        if fit.is_some() {
            last_fit = fit.clone();
        }
        if let Some(f) = &fit {
            if density >= f.plateau {
                break StopReason::Plateau { estimate: f.plateau };
            }
        }
        if net.missing_edges() == 0 {
            break StopReason::Dense;
        }
        if s.cap.is_some_and(|c| density >= c - 1e-12) {
            break StopReason::Cap;
        }
        if step >= s.max_steps {
            break StopReason::MaxSteps;
        }

        let amount = growth_amount(density, s.gamma, s.cap, net.prunable_params())?;
        let m = amount.edges.max(1);
        let probe = if s.method == GrowthMethod::Gradient {
            runner.probe_batch(derive_seed(s.seed, 10_000 + step as u64))?
        } else {
            None
        };
        let batch = probe.as_ref().map(|(x, labels)| Batch { x, labels });
        let growth = grow(net, s.method, m, derive_seed(s.seed, 1_000 + step as u64), batch.as_ref())?;
        ledger.add(growth.scoring_flops);
        sink.event(&PipelineEvent::Grow { step, growth })?;
        step += 1;
    };
    let stop_density = net.density();
    sink.event(&PipelineEvent::Stop {
        step,
        density: stop_density,
        reason: stop.clone(),
    })?;
    sink.snapshot("grown", &encode_snapshot(net)?)?;

    runner.reset_optimizer();
    let final_phase = runner.extensive(net, s.extensive_epochs, &mut |e| {
        ledger.add(e.flops);
        sink.metrics(&metrics_row("extensive", step, e, &ledger))
    })?;
    sink.event(&PipelineEvent::Extensive {
        epochs: final_phase.epochs,
        density: net.density(),
        val_loss: final_phase.val_loss,
        val_acc: final_phase.val_acc,
        flops: final_phase.flops,
        cumulative_flops: ledger.cumulative,
    })?;
    sink.snapshot("final", &encode_snapshot(net)?)?;

    Ok(PipelineResult {
        trace,
        rows,
        ledger,
        growth_steps: step,
        stop,
        stop_density,
        last_fit,
        final_phase,
    })
}

#[derive(Clone, Debug)]
pub struct ImpResult {
    pub rows: Vec<TraceRow>,
    pub ledger: CostLedger,
    pub final_phase: PhaseOutcome,
}

impl ImpResult {
    pub fn densities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.density).collect()
    }

    /// Relative cost accumulated by the first cycle whose density is at most `rho`.
    pub fn relative_cost_at(&self, rho: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.density <= rho + 1e-12)
            .map(|r| r.relative_cost)
    }
}

/// Magnitude pruning with continued training: train the dense network for the full
/// budget, then repeatedly remove `ratio` of the remaining weights and train again
/// from the surviving weights, until density is at most `target`.
pub fn run_imp_c<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    runner: &mut dyn PhaseRunner<T>,
    ratio: f64,
    target: f64,
    epochs_per_cycle: usize,
    tau: f64,
    sink: &mut dyn RunSink,
) -> Result<ImpResult> {
    let res = imp_loop(net, runner, ratio, target, epochs_per_cycle, tau, sink);
    record_abort(sink, res)
}

fn imp_loop<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    runner: &mut dyn PhaseRunner<T>,
    ratio: f64,
    target: f64,
    epochs_per_cycle: usize,
    tau: f64,
    sink: &mut dyn RunSink,
) -> Result<ImpResult> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("pruning target must lie in (0, 1), got {target}")));
    }
    sink.snapshot("init", &encode_snapshot(net)?)?;
    let mut ledger = CostLedger::new(dense_training_flops(net, runner.train_examples(), epochs_per_cycle));
    let mut rows = Vec::new();
    let mut cycle = 0;
    loop {
        runner.reset_optimizer();
        let out = runner.extensive(net, epochs_per_cycle, &mut |e| {
            ledger.add(e.flops);
            sink.metrics(&metrics_row("imp", cycle, e, &ledger))
        })?;
        let row = trace_row(net, cycle, &out, &ledger, tau)?;
        sink.trace(&row)?;
        rows.push(row);
        if net.density() <= target + 1e-12 {
            sink.event(&PipelineEvent::Stop {
                step: cycle,
                density: net.density(),
                reason: StopReason::Target,
            })?;
            sink.snapshot("final", &encode_snapshot(net)?)?;
            return Ok(ImpResult {
                rows,
                ledger,
                final_phase: out,
            });
        }
        let removed = imp_c_step(net, ratio)?;
        cycle += 1;
        sink.event(&PipelineEvent::Prune {
            cycle,
            removed,
            density: net.density(),
        })?;
        if removed == 0 {
            return Err(Error::Config(format!(
                "pruning ratio {ratio} removes nothing at density {:.6}",
                net.density()
            )));
        }
    }
}

#[derive(Clone, Debug)]
pub struct StaticResult {
    pub epochs: usize,
    pub ledger: CostLedger,
    pub final_phase: PhaseOutcome,
}

/// Trains a fixed-density network for as many epochs as it takes to spend
/// `target_flops` (rounded to whole epochs, at least one).
#[allow(clippy::too_many_arguments)]
pub fn run_static<T: Scalar>(
    net: &mut MaskedNetwork<T>,
    runner: &mut dyn PhaseRunner<T>,
    init: InitMethod,
    rho: f64,
    seed: u64,
    target_flops: f64,
    normalizer_epochs: usize,
    sink: &mut dyn RunSink,
) -> Result<StaticResult> {
    let res = (|| {
        let normalizer = dense_training_flops(net, runner.train_examples(), normalizer_epochs);
        initialize(net, init, rho, derive_seed(seed, 1))?;
        sink.snapshot("init", &encode_snapshot(net)?)?;
        let epoch_flops = flops_estimate(net, runner.train_examples(), Phase::Train);
        if !(target_flops > 0.0) || epoch_flops <= 0.0 {
            return Err(Error::Config("static baseline needs a positive FLOP budget".into()));
        }
        let epochs = ((target_flops / epoch_flops).round() as usize).max(1);
        sink.event(&PipelineEvent::StaticPlan {
            density: net.density(),
            epochs,
            epoch_flops,
            target_flops,
        })?;
        let mut ledger = CostLedger::new(normalizer);
        let out = runner.extensive(net, epochs, &mut |e| {
            ledger.add(e.flops);
            sink.metrics(&metrics_row("static", 0, e, &ledger))
        })?;
        sink.event(&PipelineEvent::Extensive {
            epochs: out.epochs,
            density: net.density(),
            val_loss: out.val_loss,
            val_acc: out.val_acc,
            flops: out.flops,
            cumulative_flops: ledger.cumulative,
        })?;
        sink.snapshot("final", &encode_snapshot(net)?)?;
        Ok(StaticResult {
            epochs,
            ledger,
            final_phase: out,
        })
    })();
    record_abort(sink, res)
}
