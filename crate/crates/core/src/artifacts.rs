//! Run directories, per-run reports and cross-run aggregation.
//!
//! A run directory holds:
//!
//! | file            | content                                             |
//! |-----------------|-----------------------------------------------------|
//! | `config.toml`   | the exact configuration used                        |
//! | `run.json`      | build version, method tag, seed and all seeds       |
//! | `metrics.csv`   | one row per training epoch                          |
//! | `trace.csv`     | one row per density reached (accuracy, cost, cores) |
//! | `events.jsonl`  | structured pipeline events                          |
//! | `*.snap`        | network snapshots                                   |
//! | `report.json`   | final summary                                       |

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::growth::GrowthMethod;
use crate::pipeline::{MetricsRow, PipelineEvent, RunSink, StopReason, TraceRow};

pub const VERSION: &str = concat!("sparsegrow ", env!("CARGO_PKG_VERSION"));

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub method: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
}

/// File-backed [`RunSink`]. Every record is flushed as soon as it is written.
pub struct RunDir {
    path: PathBuf,
    metrics: csv::Writer<File>,
    trace: csv::Writer<File>,
    events: File,
}

impl RunDir {
    /// Creates (or truncates) the run directory and writes its provenance files.
    pub fn create(path: &Path, cfg: &ExperimentConfig, method: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let write = |name: &str, text: &str| {
            let p = path.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("config.toml", &cfg.to_toml()?)?;
        let info = RunInfo {
            version: VERSION.to_string(),
            method: method.to_string(),
            seed,
            seeds: cfg.seeds.clone(),
        };
        write("run.json", &serde_json::to_string_pretty(&info).expect("serializable"))?;
        let _ = fs::remove_file(path.join("report.json"));
        let open = |name: &str| {
            let p = path.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            path: path.to_path_buf(),
            metrics: csv::Writer::from_writer(open("metrics.csv")?),
            trace: csv::Writer::from_writer(open("trace.csv")?),
            events: open("events.jsonl")?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        let p = self.path.join("report.json");
        let text = serde_json::to_string_pretty(report).map_err(|e| json_err(&p, e))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

impl RunSink for RunDir {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        let p = self.path.join("metrics.csv");
        self.metrics.serialize(row).map_err(|e| csv_err(&p, e))?;
        self.metrics.flush().map_err(|e| Error::io(&p, e))
    }

    fn event(&mut self, event: &PipelineEvent) -> Result<()> {
        let p = self.path.join("events.jsonl");
        let mut line = serde_json::to_string(event).map_err(|e| json_err(&p, e))?;
        line.push('\n');
        self.events.write_all(line.as_bytes()).map_err(|e| Error::io(&p, e))
    }

    fn trace(&mut self, row: &TraceRow) -> Result<()> {
        let p = self.path.join("trace.csv");
        self.trace.serialize(row).map_err(|e| csv_err(&p, e))?;
        self.trace.flush().map_err(|e| Error::io(&p, e))
    }

    fn snapshot(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path.join(format!("{name}.snap"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    /// Method tag: a growth method, `imp-c` or `phew-static`.
    pub method: String,
    pub seed: u64,
    pub arch: String,
    pub stop_density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    pub growth_steps: usize,
    pub final_val_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    pub cumulative_flops: f64,
    pub normalizer_flops: f64,
    pub relative_cost: f64,
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let p = dir.join("report.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(&p, e))
}

pub fn read_trace(dir: &Path) -> Result<Vec<TraceRow>> {
    let p = dir.join("trace.csv");
    let mut r = csv::Reader::from_path(&p).map_err(|e| csv_err(&p, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(&p, e))).collect()
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>> {
    let p = dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&p).map_err(|e| csv_err(&p, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(&p, e))).collect()
}

/// Mean and sample standard deviation; the deviation is absent for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityRow {
    pub method: String,
    pub density: f64,
    pub runs: usize,
    pub val_acc: Stat,
    pub relative_cost: Stat,
    pub total_pwmp: Stat,
    pub global_core: Stat,
    pub avg_core_ratio: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub runs: usize,
    pub stop_density: Stat,
    pub final_val_acc: Stat,
    pub test_acc: Option<Stat>,
    pub relative_cost: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub densities: Vec<DensityRow>,
    pub methods: Vec<MethodRow>,
}

/// The part of a configuration that must agree across aggregated runs.
fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seeds.clear();
    c.output = PathBuf::new();
    c.growth.method = GrowthMethod::Pwmpr;
    c.baseline.static_density = None;
    c.baseline.static_flops = None;
    c
}

/// Groups runs by method and density (mean ± std over seeds). Refuses runs whose
/// configurations differ in anything other than seed, method and output location.
pub fn aggregate(dirs: &[PathBuf]) -> Result<Aggregate> {
    if dirs.is_empty() {
        return Err(Error::Usage("no run directories given".into()));
    }
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    let mut by_density: BTreeMap<(String, i64), Vec<TraceRow>> = BTreeMap::new();
    let mut by_method: BTreeMap<String, Vec<RunReport>> = BTreeMap::new();
    for dir in dirs {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        let cmp = comparable(&cfg);
        match &reference {
            None => reference = Some((dir.clone(), cmp)),
            Some((first, r)) if *r != cmp => {
                return Err(Error::Config(format!(
                    "inconsistent configs: {} and {} differ beyond seed and method",
                    first.display(),
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let report = read_report(dir)?;
        for row in read_trace(dir)? {
            let key = (row.density * 1e6).round() as i64;
            by_density.entry((report.method.clone(), key)).or_default().push(row);
        }
        by_method.entry(report.method.clone()).or_default().push(report);
    }
    let densities = by_density
        .into_iter()
        .map(|((method, _), rows)| {
            let col = |f: fn(&TraceRow) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>());
            DensityRow {
                method,
                density: rows.iter().map(|r| r.density).sum::<f64>() / rows.len() as f64,
                runs: rows.len(),
                val_acc: col(|r| r.val_acc),
                relative_cost: col(|r| r.relative_cost),
                total_pwmp: col(|r| r.total_pwmp),
                global_core: col(|r| r.global_core as f64),
                avg_core_ratio: col(|r| r.avg_core_ratio),
            }
        })
        .collect();
    let methods = by_method
        .into_iter()
        .map(|(method, reps)| {
            let col = |f: fn(&RunReport) -> f64| Stat::of(&reps.iter().map(f).collect::<Vec<_>>());
            let tests: Vec<f64> = reps.iter().filter_map(|r| r.test_acc).collect();
            MethodRow {
                method,
                runs: reps.len(),
                stop_density: col(|r| r.stop_density),
                final_val_acc: col(|r| r.final_val_acc),
                test_acc: (tests.len() == reps.len()).then(|| Stat::of(&tests)),
                relative_cost: col(|r| r.relative_cost),
            }
        })
        .collect();
    Ok(Aggregate { densities, methods })
}

fn fmt_std(s: &Stat) -> String {
    s.std.map(|v| format!("{v}")).unwrap_or_default()
}

impl Aggregate {
    /// Plot-ready CSVs: `density_table.csv` and `method_table.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("density_table.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
        let cols = ["val_acc", "relative_cost", "total_pwmp", "global_core", "avg_core_ratio"];
        let mut header = vec!["method".to_string(), "density".into(), "runs".into()];
        for c in cols {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        w.write_record(&header).map_err(|e| csv_err(&p, e))?;
        for r in &self.densities {
            let mut rec = vec![r.method.clone(), r.density.to_string(), r.runs.to_string()];
            for s in [&r.val_acc, &r.relative_cost, &r.total_pwmp, &r.global_core, &r.avg_core_ratio] {
                rec.push(s.mean.to_string());
                rec.push(fmt_std(s));
            }
            w.write_record(&rec).map_err(|e| csv_err(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;

        let p = dir.join("method_table.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
        w.write_record([
            "method",
            "runs",
            "stop_density_mean",
            "stop_density_std",
            "final_val_acc_mean",
            "final_val_acc_std",
            "test_acc_mean",
            "test_acc_std",
            "relative_cost_mean",
            "relative_cost_std",
        ])
        .map_err(|e| csv_err(&p, e))?;
        for r in &self.methods {
            let (tm, ts) = match &r.test_acc {
                Some(s) => (s.mean.to_string(), fmt_std(s)),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.method.clone(),
                r.runs.to_string(),
                r.stop_density.mean.to_string(),
                fmt_std(&r.stop_density),
                r.final_val_acc.mean.to_string(),
                fmt_std(&r.final_val_acc),
                tm,
                ts,
                r.relative_cost.mean.to_string(),
                fmt_std(&r.relative_cost),
            ])
            .map_err(|e| csv_err(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    /// Human-readable tables.
    pub fn render(&self) -> String {
        let pm = |s: &Stat, prec: usize| match s.std {
            Some(d) => format!("{:.prec$} ± {:.prec$}", s.mean, d),
            None => format!("{:.prec$}", s.mean),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>9} {:>4} {:>18} {:>18} {:>18} {:>18}\n",
            "method", "density", "runs", "val_acc", "rel_cost", "total_pwmp", "avg_core_ratio"
        ));
        for r in &self.densities {
            out.push_str(&format!(
                "{:<12} {:>9.5} {:>4} {:>18} {:>18} {:>18} {:>18}\n",
                r.method,
                r.density,
                r.runs,
                pm(&r.val_acc, 4),
                pm(&r.relative_cost, 3),
                pm(&r.total_pwmp, 3),
                pm(&r.avg_core_ratio, 4)
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<12} {:>4} {:>20} {:>18} {:>18} {:>18}\n",
            "method", "runs", "stop_density", "final_val_acc", "test_acc", "rel_cost"
        ));
        for r in &self.methods {
            out.push_str(&format!(
                "{:<12} {:>4} {:>20} {:>18} {:>18} {:>18}\n",
                r.method,
                r.runs,
                pm(&r.stop_density, 5),
                pm(&r.final_val_acc, 4),
                r.test_acc.as_ref().map(|s| pm(s, 4)).unwrap_or_else(|| "-".into()),
                pm(&r.relative_cost, 3)
            ));
        }
        out
    }
}
