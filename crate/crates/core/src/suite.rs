//! Paired-seed suite runner, milestone tables, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{
    read_run, run_training_on, write_run, Mode, RunConfig, RunOutcome, RunSummary, SUMMARY_FILE,
};
use crate::stats::{mean, mean_ci95, paired_t_test, sample_std, PairedResult};

pub const MANIFEST_FILE: &str = "suite.json";

/// Run labels and seeds used by the reference protocol.
pub const DEFAULT_SEEDS: [(&str, u64); 10] = [
    ("run01", 2746317213),
    ("run02", 1181241943),
    ("run03", 958682846),
    ("run04", 3163119785),
    ("run05", 1812140441),
    ("run06", 127978094),
    ("run07", 939042955),
    ("run08", 2340505846),
    ("run09", 946785248),
    ("run10", 2530876844),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedEntry {
    pub label: String,
    pub seed: u64,
}

pub fn default_seed_table() -> Vec<SeedEntry> {
    DEFAULT_SEEDS
        .iter()
        .map(|&(label, seed)| SeedEntry {
            label: label.to_string(),
            seed,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub name: String,
    pub dataset: String,
    pub seeds: Vec<SeedEntry>,
    pub modes: Vec<Mode>,
    /// Shared by every run; `mode` and `seed` are overwritten per run.
    pub template: RunConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            name: "suite".to_string(),
            dataset: "blobs".to_string(),
            seeds: default_seed_table(),
            modes: Mode::BOTH.to_vec(),
            template: RunConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("suite.seeds", "seed table is empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if s.label.is_empty() || s.label.contains(['/', '\\']) || s.label.starts_with('.') {
                return Err(Error::config(
                    "suite.seeds",
                    format!("bad run label `{}`", s.label),
                ));
            }
            if !seen.insert(s.label.as_str()) {
                return Err(Error::config(
                    "suite.seeds",
                    format!("duplicate run label `{}`", s.label),
                ));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::config("suite.modes", "no modes selected"));
        }
        self.template.validate()
    }

    /// Every (label, mode, config) the suite executes, labels outermost.
    pub fn run_configs(&self) -> Vec<(String, Mode, RunConfig)> {
        let mut out = Vec::new();
        for entry in &self.seeds {
            for &mode in &self.modes {
                let mut config = self.template.clone();
                config.mode = mode;
                config.seed = entry.seed;
                out.push((entry.label.clone(), mode, config));
            }
        }
        out
    }

    pub fn manifest(&self) -> SuiteManifest {
        SuiteManifest {
            name: self.name.clone(),
            dataset: self.dataset.clone(),
            seeds: self.seeds.clone(),
            modes: self.modes.clone(),
            max_epochs: self.template.max_epochs,
            milestone_targets: self.template.milestone_targets.clone(),
        }
    }
}

/// Suite-level metadata written next to the runs; enough to rebuild reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub name: String,
    pub dataset: String,
    pub seeds: Vec<SeedEntry>,
    pub modes: Vec<Mode>,
    pub max_epochs: u32,
    pub milestone_targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub label: String,
    pub mode: Mode,
    pub seed: u64,
    /// `Err` holds the diagnostic of a run that could not complete.
    pub result: std::result::Result<RunOutcome, String>,
}

impl SuiteRun {
    pub fn summary(&self) -> Option<&RunSummary> {
        self.result.as_ref().ok().map(|o| &o.summary)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutputs {
    pub manifest: SuiteManifest,
    pub runs: Vec<SuiteRun>,
}

impl SuiteOutputs {
    pub fn summaries(&self, mode: Mode) -> Vec<&RunSummary> {
        self.runs
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(SuiteRun::summary)
            .collect()
    }

    pub fn failures(&self) -> Vec<(&str, Mode, &str)> {
        self.runs
            .iter()
            .filter_map(|r| match &r.result {
                Err(e) => Some((r.label.as_str(), r.mode, e.as_str())),
                Ok(o) => o
                    .summary
                    .failure
                    .as_deref()
                    .map(|f| (r.label.as_str(), r.mode, f)),
            })
            .collect()
    }
}

/// Executes every (label, mode) pair on up to `jobs` worker threads.
/// Output order follows the seed table regardless of scheduling.
pub fn run_paired_suite(suite: &SuiteConfig, jobs: usize) -> Result<SuiteOutputs> {
    suite.validate()?;
    let data = suite.template.task.build()?;
    let configs = suite.run_configs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let runs = pool.install(|| {
        configs
            .into_par_iter()
            .map(|(label, mode, config)| SuiteRun {
                result: run_training_on(&config, &data, &mut |_, _| {}).map_err(|e| e.to_string()),
                label,
                mode,
                seed: config.seed,
            })
            .collect()
    });
    Ok(SuiteOutputs {
        manifest: suite.manifest(),
        runs,
    })
}

pub fn run_dir(root: &Path, label: &str, mode: Mode) -> PathBuf {
    root.join(label).join(mode.as_str())
}

/// Writes the manifest and every run's files. Runs that could not complete
/// leave an `error.txt` instead of a summary.
pub fn write_suite(outputs: &SuiteOutputs, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&outputs.manifest).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    for run in &outputs.runs {
        let dir = run_dir(root, &run.label, run.mode);
        match &run.result {
            Ok(outcome) => write_run(&dir, outcome)?,
            Err(msg) => {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("error.txt");
                fs::write(&path, format!("{msg}\n")).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

/// Reads a suite directory back. Every run listed in the manifest must be
/// present, otherwise the missing `label/mode` pairs are reported.
pub fn load_suite(root: &Path) -> Result<SuiteOutputs> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SuiteManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut missing = Vec::new();
    let mut runs = Vec::new();
    for entry in &manifest.seeds {
        for &mode in &manifest.modes {
            let dir = run_dir(root, &entry.label, mode);
            if !dir.join(SUMMARY_FILE).is_file() {
                missing.push(format!("{}/{}", entry.label, mode));
                continue;
            }
            runs.push(SuiteRun {
                label: entry.label.clone(),
                mode,
                seed: entry.seed,
                result: Ok(read_run(&dir)?),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteSuite(missing));
    }
    Ok(SuiteOutputs { manifest, runs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneRow {
    pub dataset: String,
    pub mode: Mode,
    pub target: f64,
    pub reached: usize,
    pub runs: usize,
    /// Means over reached runs only.
    pub mean_first_epoch: Option<f64>,
    pub mean_first_seconds: Option<f64>,
}

impl MilestoneRow {
    pub fn reach_rate(&self) -> String {
        format!("{}/{}", self.reached, self.runs)
    }

    pub fn epoch_cell(&self) -> String {
        self.mean_first_epoch
            .map_or_else(|| "--".to_string(), |e| format!("{e:.1}"))
    }

    pub fn seconds_cell(&self) -> String {
        self.mean_first_seconds
            .map_or_else(|| "--".to_string(), |s| format!("{s:.3}"))
    }
}

/// Reach rate and conditional mean time-to-target, per target and mode.
pub fn milestone_table(outputs: &SuiteOutputs, targets: &[f64]) -> Vec<MilestoneRow> {
    let mut rows = Vec::new();
    for &target in targets {
        for &mode in &outputs.manifest.modes {
            let summaries = outputs.summaries(mode);
            let hits: Vec<(f64, f64)> = summaries
                .iter()
                .filter_map(|s| {
                    let m = s.milestones.iter().find(|m| m.target == target)?;
                    Some((f64::from(m.first_epoch?), m.first_seconds?))
                })
                .collect();
            let (epochs, seconds): (Vec<f64>, Vec<f64>) = hits.iter().copied().unzip();
            rows.push(MilestoneRow {
                dataset: outputs.manifest.dataset.clone(),
                mode,
                target,
                reached: hits.len(),
                runs: summaries.len(),
                mean_first_epoch: (!epochs.is_empty()).then(|| mean(&epochs)),
                mean_first_seconds: (!seconds.is_empty()).then(|| mean(&seconds)),
            });
        }
    }
    rows
}

type Metric = fn(&RunSummary) -> f64;

/// Per-metric paired tests, roulette minus simple, over labels where both
/// modes completed.
pub fn paired_results(outputs: &SuiteOutputs) -> Vec<PairedResult> {
    let by_key: BTreeMap<(&str, Mode), &RunSummary> = outputs
        .runs
        .iter()
        .filter_map(|r| Some(((r.label.as_str(), r.mode), r.summary()?)))
        .collect();
    let pairs: Vec<(&RunSummary, &RunSummary)> = outputs
        .manifest
        .seeds
        .iter()
        .filter_map(|s| {
            Some((
                *by_key.get(&(s.label.as_str(), Mode::Roulette))?,
                *by_key.get(&(s.label.as_str(), Mode::Simple))?,
            ))
        })
        .collect();
    let metrics: [(&str, Metric); 4] = [
        ("val_acc", |s| s.best_val_acc),
        ("test_acc", |s| s.test_acc),
        ("final_val_loss", |s| s.final_val_loss),
        ("duration_seconds", |s| s.duration_seconds),
    ];
    metrics
        .iter()
        .filter_map(|(name, get)| {
            let a: Vec<f64> = pairs.iter().map(|(r, _)| get(r)).collect();
            let b: Vec<f64> = pairs.iter().map(|(_, s)| get(s)).collect();
            paired_t_test(name, &a, &b).ok()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    SummaryCsv,
    MilestonesCsv,
    PairedJson,
    PlotdataCsv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [
        ReportFormat::SummaryCsv,
        ReportFormat::MilestonesCsv,
        ReportFormat::PairedJson,
        ReportFormat::PlotdataCsv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportFormat::SummaryCsv => "summary_csv",
            ReportFormat::MilestonesCsv => "milestones_csv",
            ReportFormat::PairedJson => "paired_json",
            ReportFormat::PlotdataCsv => "plotdata_csv",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::SummaryCsv => "summary.csv",
            ReportFormat::MilestonesCsv => "milestones.csv",
            ReportFormat::PairedJson => "paired.json",
            ReportFormat::PlotdataCsv => "plotdata.csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReportFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown report format `{s}` (expected summary_csv, milestones_csv, paired_json or plotdata_csv)"
                ))
            })
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Mean and CI half-width of a per-mode metric; the half-width is blank
/// with fewer than two runs.
fn mean_and_ci(values: &[f64]) -> (String, String) {
    match mean_ci95(values) {
        Ok((m, hw)) => (num(m), num(hw)),
        Err(_) if values.len() == 1 => (num(values[0]), String::new()),
        Err(_) => (String::new(), String::new()),
    }
}

pub fn summary_csv(outputs: &SuiteOutputs) -> Result<Vec<u8>> {
    let rows = outputs
        .manifest
        .modes
        .iter()
        .map(|&mode| {
            let s = outputs.summaries(mode);
            let val: Vec<f64> = s.iter().map(|r| r.best_val_acc).collect();
            let test: Vec<f64> = s.iter().map(|r| r.test_acc).collect();
            let dur: Vec<f64> = s.iter().map(|r| r.duration_seconds).collect();
            let (val_mean, val_ci) = mean_and_ci(&val);
            let (test_mean, test_ci) = mean_and_ci(&test);
            let (dur_mean, dur_std) = match dur.len() {
                0 => (String::new(), String::new()),
                1 => (num(dur[0]), String::new()),
                _ => (num(mean(&dur)), num(sample_std(&dur))),
            };
            vec![
                outputs.manifest.dataset.clone(),
                mode.to_string(),
                val_mean,
                val_ci,
                test_mean,
                test_ci,
                dur_mean,
                dur_std,
            ]
        })
        .collect();
    csv_bytes(
        &[
            "dataset",
            "mode",
            "val_acc_mean",
            "val_acc_ci95",
            "test_acc_mean",
            "test_acc_ci95",
            "duration_mean",
            "duration_std",
        ],
        rows,
    )
}

pub fn milestones_csv(outputs: &SuiteOutputs) -> Result<Vec<u8>> {
    let rows = milestone_table(outputs, &outputs.manifest.milestone_targets)
        .into_iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.mode.to_string(),
                format!("{}", r.target),
                r.reach_rate(),
                r.epoch_cell(),
                r.seconds_cell(),
            ]
        })
        .collect();
    csv_bytes(
        &[
            "dataset",
            "mode",
            "target",
            "reach_rate",
            "mean_first_epoch",
            "mean_first_seconds",
        ],
        rows,
    )
}

#[derive(Serialize)]
struct PairedReport<'a> {
    dataset: &'a str,
    comparison: &'static str,
    pairs: usize,
    metrics: Vec<PairedResult>,
}

pub fn paired_json(outputs: &SuiteOutputs) -> Result<Vec<u8>> {
    let metrics = paired_results(outputs);
    let report = PairedReport {
        dataset: &outputs.manifest.dataset,
        comparison: "roulette - simple",
        pairs: metrics.first().map_or(0, |m| m.deltas.len()),
        metrics,
    };
    let mut json =
        serde_json::to_vec_pretty(&report).map_err(|e| Error::invalid(format!("json: {e}")))?;
    json.push(b'\n');
    Ok(json)
}

pub fn plotdata_csv(outputs: &SuiteOutputs) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for &mode in &outputs.manifest.modes {
        let logs: Vec<&RunOutcome> = outputs
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        let epochs = logs.iter().map(|o| o.log.len()).max().unwrap_or(0);
        for e in 0..epochs {
            let recs: Vec<_> = logs.iter().filter_map(|o| o.log.get(e)).collect();
            let avg = |f: fn(&crate::harness::EpochRecord) -> f64| {
                num(recs.iter().map(|r| f(r)).sum::<f64>() / recs.len() as f64)
            };
            rows.push(vec![
                mode.to_string(),
                (e + 1).to_string(),
                recs.len().to_string(),
                avg(|r| r.train_loss),
                avg(|r| r.train_acc),
                avg(|r| r.val_loss),
                avg(|r| r.val_acc),
            ]);
        }
    }
    csv_bytes(
        &[
            "mode",
            "epoch",
            "runs",
            "train_loss_mean",
            "train_acc_mean",
            "val_loss_mean",
            "val_acc_mean",
        ],
        rows,
    )
}

pub fn render_report(outputs: &SuiteOutputs, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::SummaryCsv => summary_csv(outputs),
        ReportFormat::MilestonesCsv => milestones_csv(outputs),
        ReportFormat::PairedJson => paired_json(outputs),
        ReportFormat::PlotdataCsv => plotdata_csv(outputs),
    }
}

/// Writes one report file into `dir` and returns its path.
pub fn emit_report(outputs: &SuiteOutputs, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    let bytes = render_report(outputs, format)?;
    let path = dir.join(format.file_name());
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn emit_all_reports(outputs: &SuiteOutputs, dir: &Path) -> Result<Vec<PathBuf>> {
    ReportFormat::ALL
        .iter()
        .map(|&f| emit_report(outputs, f, dir))
        .collect()
}

/// Short human-readable digest of a finished suite.
pub fn describe(outputs: &SuiteOutputs) -> String {
    let mut out = String::new();
    for &mode in &outputs.manifest.modes {
        let s = outputs.summaries(mode);
        let val: Vec<f64> = s.iter().map(|r| r.best_val_acc).collect();
        let test: Vec<f64> = s.iter().map(|r| r.test_acc).collect();
        let _ = writeln!(
            out,
            "{mode:<8} runs={} best_val_acc={} test_acc={}",
            s.len(),
            if val.is_empty() {
                "--".into()
            } else {
                format!("{:.4}", mean(&val))
            },
            if test.is_empty() {
                "--".into()
            } else {
                format!("{:.4}", mean(&test))
            },
        );
    }
    for p in paired_results(outputs) {
        let _ = writeln!(
            out,
            "paired {:<16} delta={:+.4} t={:.3} p={:.4}",
            p.metric, p.delta_mean, p.t, p.p
        );
    }
    out
}
