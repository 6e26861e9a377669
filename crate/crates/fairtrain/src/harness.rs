//! Experiment orchestration: early stopping, final evaluation, run
//! manifests, fraction x algorithm x seed sweeps with resume, and report
//! emission (CSV plus an aligned text table).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    adult_schema, bank_schema, hex_lower, inject_label_noise, load_table, mask_demographics,
    split_and_encode, DataSplits, RawTable, Schema,
};
use crate::error::{Error, Result};
use crate::fairness::{bias_report, BiasReport};
use crate::model::{forward, predict, tuned_threshold, ModelParams};
use crate::trainers::{run_algorithm, Algorithm, TrainConfig};

/// Patience-based stopping on a validation value: stop once `patience`
/// epochs have passed without a new strict minimum. Epochs are 1-based.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStop {
    pub fn new(patience: usize) -> EarlyStop {
        EarlyStop { patience, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    pub fn observe(&mut self, validation_value: f64) -> StopDecision {
        self.epoch += 1;
        let improved = validation_value < self.best;
        if improved {
            self.best = validation_value;
            self.best_epoch = self.epoch;
        }
        StopDecision { improved, stop: self.epoch - self.best_epoch >= self.patience }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }

    pub fn epochs(&self) -> usize {
        self.epoch
    }
}

/// Decision threshold (tuned on validation unless disabled) and the bias
/// report of the thresholded model on the test split.
pub fn evaluate(params: &ModelParams, splits: &DataSplits, cfg: &TrainConfig) -> Result<(f64, BiasReport)> {
    let threshold = if cfg.tuned_threshold {
        let probs = forward(params, &splits.validation.x);
        tuned_threshold(&probs, &splits.validation.y)
    } else {
        0.5
    };
    let probs = forward(params, &splits.test.x);
    let yhat = predict(&probs, threshold);
    let report = bias_report(&splits.test.y, &yhat, splits.test.s_full()?)?;
    Ok((threshold, report))
}

/// Built-in dataset registry: name -> (schema, file inside the data dir).
pub fn resolve_dataset(name: &str, data_dir: &Path) -> Result<(Schema, PathBuf)> {
    match name {
        "adult" => Ok((adult_schema(), data_dir.join("adult.data"))),
        "bank" => Ok((bank_schema(), data_dir.join("bank-full.csv"))),
        other => Err(Error::Harness(format!(
            "unknown dataset '{other}' (expected 'adult' or 'bank')"
        ))),
    }
}

/// Everything that identifies one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub dataset: String,
    pub algorithm: Algorithm,
    /// Fraction of train rows keeping their sensitive attribute.
    pub dem_fraction: f64,
    /// Flip probability applied to labels outside the demographic subset.
    pub label_noise: f64,
    pub train: TrainConfig,
}

impl RunSpec {
    /// Content hash of the spec; manifests carry it so finished runs are
    /// reused only when nothing about the configuration changed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex_lower(&Sha256::digest(json.as_bytes()))
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_f{}_n{}_s{}.json",
            self.algorithm, self.dem_fraction, self.label_noise, self.train.seed
        )
    }
}

/// Output of one run. Contains no timestamps or host details, so rerunning
/// the same spec writes byte-identical files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: RunSpec,
    pub config_hash: String,
    pub epochs_run: usize,
    pub early_stop_epoch: usize,
    pub skipped_outer_steps: usize,
    pub imputation_accuracy: Option<f64>,
    pub threshold: f64,
    pub report: BiasReport,
}

fn run_prepared(raw: &RawTable, schema: &Schema, spec: &RunSpec) -> Result<RunManifest> {
    spec.train.validate()?;
    let splits = split_and_encode(raw, schema, spec.train.seed)?;
    let splits = mask_demographics(&splits, spec.dem_fraction, spec.train.seed)?;
    let splits = if spec.label_noise > 0.0 {
        inject_label_noise(&splits, spec.label_noise, spec.train.seed)?
    } else {
        splits
    };
    let outcome = run_algorithm(spec.algorithm, &splits, &spec.train)?;
    let (threshold, report) = evaluate(&outcome.params, &splits, &spec.train)?;
    Ok(RunManifest {
        spec: spec.clone(),
        config_hash: spec.hash(),
        epochs_run: outcome.epochs_run,
        early_stop_epoch: outcome.best_epoch,
        skipped_outer_steps: outcome.skipped_outer_steps,
        imputation_accuracy: outcome.imputation_accuracy,
        threshold,
        report,
    })
}

/// Load, split, train, and evaluate one run.
pub fn run_once(spec: &RunSpec, data_dir: &Path) -> Result<RunManifest> {
    let (schema, path) = resolve_dataset(&spec.dataset, data_dir)?;
    let raw = load_table(&path, &schema)?;
    run_prepared(&raw, &schema, spec)
}

pub fn manifest_to_json(manifest: &RunManifest) -> String {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    text
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    fs::write(path, manifest_to_json(manifest))?;
    Ok(())
}

fn load_manifest_if_current(path: &Path, spec: &RunSpec) -> Option<RunManifest> {
    let text = fs::read_to_string(path).ok()?;
    let manifest: RunManifest = serde_json::from_str(&text).ok()?;
    (manifest.config_hash == spec.hash()).then_some(manifest)
}

/// A sweep over algorithms x demographic fractions x seeds on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub algorithms: Vec<Algorithm>,
    pub dem_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub label_noise: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            dataset: "adult".into(),
            algorithms: Algorithm::ALL.to_vec(),
            dem_fractions: vec![1.0, 0.1, 0.01, 0.0075, 0.005, 0.0025, 0.001],
            seeds: (0..10).collect(),
            label_noise: 0.0,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentPlan {
    /// The label-noise stress protocol: smallest demographic fraction, half
    /// the unprotected labels flipped, utility term enabled for the bilevel
    /// trainer (other trainers ignore lambda).
    pub fn noisy(dataset: &str) -> ExperimentPlan {
        ExperimentPlan {
            dataset: dataset.into(),
            dem_fractions: vec![0.001],
            label_noise: 0.5,
            train: TrainConfig { lambda: 1.0, ..TrainConfig::default() },
            ..ExperimentPlan::default()
        }
    }

    pub fn runs(&self) -> Vec<RunSpec> {
        let mut specs = Vec::new();
        for &fraction in &self.dem_fractions {
            for &algorithm in &self.algorithms {
                for &seed in &self.seeds {
                    specs.push(RunSpec {
                        dataset: self.dataset.clone(),
                        algorithm,
                        dem_fraction: fraction,
                        label_noise: self.label_noise,
                        train: TrainConfig { seed, ..self.train.clone() },
                    });
                }
            }
        }
        specs
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() || self.dem_fractions.is_empty() || self.seeds.is_empty() {
            return Err(Error::Harness("plan has an empty axis".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Harness(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        for &f in &self.dem_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Harness(format!("dem_fraction {f} outside (0, 1]")));
            }
        }
        self.train.validate()
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn stat(values: &[f64]) -> Stat {
    assert!(!values.is_empty(), "stat of empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-(algorithm, fraction) aggregate over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub algorithm: Algorithm,
    pub dem_fraction: f64,
    pub seeds: usize,
    pub bacc: Stat,
    pub aod: Stat,
    pub eod: Stat,
    pub spd: Stat,
}

fn algorithm_rank(a: Algorithm) -> usize {
    Algorithm::ALL.iter().position(|&x| x == a).unwrap()
}

/// Group manifests into cells ordered by fraction (descending), then
/// algorithm, and aggregate the four headline metrics over seeds.
pub fn summarize(manifests: &[RunManifest]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(u64, usize), Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        // descending fraction: flip the bit pattern of a nonnegative float
        let key = (!m.spec.dem_fraction.to_bits(), algorithm_rank(m.spec.algorithm));
        groups.entry(key).or_default().push(m);
    }
    groups
        .into_values()
        .map(|mut runs| {
            runs.sort_by_key(|m| m.spec.train.seed);
            let collect = |f: fn(&BiasReport) -> f64| -> Vec<f64> {
                runs.iter().map(|m| f(&m.report)).collect()
            };
            CellSummary {
                algorithm: runs[0].spec.algorithm,
                dem_fraction: runs[0].spec.dem_fraction,
                seeds: runs.len(),
                bacc: stat(&collect(|r| r.balanced_accuracy)),
                aod: stat(&collect(|r| r.aod)),
                eod: stat(&collect(|r| r.eod)),
                spd: stat(&collect(|r| r.spd)),
            }
        })
        .collect()
}

/// One failed run, kept so a long sweep survives isolated errors.
#[derive(Clone, Debug)]
pub struct RunFailure {
    pub file_name: String,
    pub error: String,
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub manifests: Vec<RunManifest>,
    pub failures: Vec<RunFailure>,
    pub cells: Vec<CellSummary>,
    pub csv_path: PathBuf,
    pub table_path: PathBuf,
}

/// Run every cell of the plan, reusing manifests whose config hash still
/// matches, and write `results.csv`, `results.txt`, and per-run manifests
/// under `out_dir`. Individual failures are collected, not fatal.
pub fn run_suite(plan: &ExperimentPlan, data_dir: &Path, out_dir: &Path) -> Result<SuiteOutcome> {
    plan.validate()?;
    let (schema, path) = resolve_dataset(&plan.dataset, data_dir)?;
    let raw = load_table(&path, &schema)?;
    let manifest_dir = out_dir.join("manifests");
    fs::create_dir_all(&manifest_dir)?;
    let specs = plan.runs();
    let results: Vec<(RunSpec, std::result::Result<RunManifest, String>)> = specs
        .par_iter()
        .map(|spec| {
            let manifest_path = manifest_dir.join(spec.file_name());
            if let Some(m) = load_manifest_if_current(&manifest_path, spec) {
                return (spec.clone(), Ok(m));
            }
            let outcome = run_prepared(&raw, &schema, spec)
                .and_then(|m| write_manifest(&manifest_path, &m).map(|()| m))
                .map_err(|e| e.to_string());
            (spec.clone(), outcome)
        })
        .collect();
    let mut manifests = Vec::new();
    let mut failures = Vec::new();
    for (spec, result) in results {
        match result {
            Ok(m) => manifests.push(m),
            Err(error) => failures.push(RunFailure { file_name: spec.file_name(), error }),
        }
    }
    let cells = summarize(&manifests);
    let csv_path = out_dir.join("results.csv");
    write_results_csv(&csv_path, &manifests, &cells)?;
    let table_path = out_dir.join("results.txt");
    fs::write(&table_path, render_table(&cells))?;
    Ok(SuiteOutcome { manifests, failures, cells, csv_path, table_path })
}

/// Per-seed rows (ordered like the summary cells) followed by one `mean`
/// row per cell.
pub fn write_results_csv(path: &Path, manifests: &[RunManifest], cells: &[CellSummary]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["algorithm", "dem_fraction", "seed", "bacc", "aod", "eod", "spd"])?;
    let mut ordered: Vec<&RunManifest> = manifests.iter().collect();
    ordered.sort_by_key(|m| {
        (!m.spec.dem_fraction.to_bits(), algorithm_rank(m.spec.algorithm), m.spec.train.seed)
    });
    for m in ordered {
        writer.write_record([
            m.spec.algorithm.to_string(),
            m.spec.dem_fraction.to_string(),
            m.spec.train.seed.to_string(),
            format!("{:.6}", m.report.balanced_accuracy),
            format!("{:.6}", m.report.aod),
            format!("{:.6}", m.report.eod),
            format!("{:.6}", m.report.spd),
        ])?;
    }
    for c in cells {
        writer.write_record([
            c.algorithm.to_string(),
            c.dem_fraction.to_string(),
            "mean".to_string(),
            format!("{:.6}", c.bacc.mean),
            format!("{:.6}", c.aod.mean),
            format!("{:.6}", c.eod.mean),
            format!("{:.6}", c.spd.mean),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Aligned text table of the cell summaries, mean +/- population std.
pub fn render_table(cells: &[CellSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>9} {:>17} {:>17} {:>17} {:>17}\n",
        "algorithm", "fraction", "bacc", "aod", "eod", "spd"
    ));
    for c in cells {
        let fmt = |s: Stat| format!("{:.4} +/- {:.4}", s.mean, s.std);
        out.push_str(&format!(
            "{:<14} {:>9} {:>17} {:>17} {:>17} {:>17}\n",
            c.algorithm.to_string(),
            c.dem_fraction,
            fmt(c.bacc),
            fmt(c.aod),
            fmt(c.eod),
            fmt(c.spd)
        ));
    }
    out
}

/// Statistics over the three splits pooled back together, i.e. the whole
/// file as loaded (splits partition it and evaluation splits keep s).
pub fn full_dataset_stats(splits: &DataSplits) -> Result<crate::dataset::StatsReport> {
    let mut y = splits.train.y.clone();
    y.extend_from_slice(&splits.validation.y);
    y.extend_from_slice(&splits.test.y);
    let mut s = splits.train.s_full()?.to_vec();
    s.extend_from_slice(splits.validation.s_full()?);
    s.extend_from_slice(splits.test.s_full()?);
    crate::dataset::stats_from(&y, &s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckOutcome {
    Pass,
    Fail,
    /// The manifests at hand do not contain the cells the check needs.
    Skip,
}

/// One acceptance-tagged check over a set of finished runs.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: CheckOutcome,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: String) -> CheckResult {
        CheckResult { name, outcome: CheckOutcome::Pass, detail }
    }

    fn fail(name: &'static str, detail: String) -> CheckResult {
        CheckResult { name, outcome: CheckOutcome::Fail, detail }
    }

    fn skip(name: &'static str, detail: String) -> CheckResult {
        CheckResult { name, outcome: CheckOutcome::Skip, detail }
    }

    fn of(name: &'static str, passed: bool, detail: String) -> CheckResult {
        if passed {
            CheckResult::pass(name, detail)
        } else {
            CheckResult::fail(name, detail)
        }
    }
}

fn cell_runs<'a>(
    manifests: &'a [RunManifest],
    dataset: &str,
    algorithm: Algorithm,
    fraction: f64,
    noise: f64,
) -> Vec<&'a RunManifest> {
    let mut runs: Vec<&RunManifest> = manifests
        .iter()
        .filter(|m| {
            m.spec.dataset == dataset
                && m.spec.algorithm == algorithm
                && m.spec.dem_fraction == fraction
                && m.spec.label_noise == noise
        })
        .collect();
    runs.sort_by_key(|m| m.spec.train.seed);
    runs
}

fn metric_values(runs: &[&RunManifest], f: fn(&BiasReport) -> f64) -> Vec<f64> {
    runs.iter().map(|m| f(&m.report)).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

const FULL_SEEDS: usize = 10;

/// The published-number checks, evaluated against whatever runs exist.
/// Checks whose cells are missing (or hold fewer than ten seeds) are
/// reported as skipped rather than failed.
pub fn acceptance_checks(manifests: &[RunManifest]) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let bacc = |r: &BiasReport| r.balanced_accuracy;
    let aod = |r: &BiasReport| r.aod;
    let spd = |r: &BiasReport| r.spd;
    let need = |runs: &[&RunManifest]| runs.len() >= FULL_SEEDS;

    {
        let name = "unconstrained_adult_reference_bands";
        let runs = cell_runs(manifests, "adult", Algorithm::Unconstrained, 1.0, 0.0);
        if need(&runs) {
            let mb = mean(&metric_values(&runs, bacc));
            let ma = mean(&metric_values(&runs, aod));
            let ms = mean(&metric_values(&runs, spd));
            let ok = (mb - 0.822).abs() <= 0.03 && (ma - 0.156).abs() <= 0.04 && (ms - 0.303).abs() <= 0.05;
            out.push(CheckResult::of(
                name,
                ok,
                format!("mean bacc {mb:.4} (0.822 +/- 0.03), aod {ma:.4} (0.156 +/- 0.04), spd {ms:.4} (0.303 +/- 0.05)"),
            ));
        } else {
            out.push(CheckResult::skip(name, format!("needs 10 adult unconstrained runs at fraction 1, found {}", runs.len())));
        }
    }

    {
        let name = "imputed_reweigh_beats_arl_at_small_fraction";
        let rw = cell_runs(manifests, "adult", Algorithm::Reweigh, 0.001, 0.0);
        let arl = cell_runs(manifests, "adult", Algorithm::Arl, 0.001, 0.0);
        if need(&rw) && need(&arl) {
            let m_rw = median(&metric_values(&rw, aod));
            let m_arl = median(&metric_values(&arl, aod));
            out.push(CheckResult::of(
                name,
                m_rw < m_arl,
                format!("median aod: reweigh {m_rw:.4} vs arl {m_arl:.4}"),
            ));
        } else {
            out.push(CheckResult::skip(name, "needs 10-seed adult reweigh and arl cells at fraction 0.001".into()));
        }
    }

    {
        let name = "bilevel_beats_imputed_reweigh_at_small_fraction";
        let bl = cell_runs(manifests, "adult", Algorithm::Bilevel, 0.001, 0.0);
        let rw = cell_runs(manifests, "adult", Algorithm::Reweigh, 0.001, 0.0);
        if need(&bl) && need(&rw) {
            let m_bl = median(&metric_values(&bl, aod));
            let m_rw = median(&metric_values(&rw, aod));
            out.push(CheckResult::of(
                name,
                m_bl < m_rw,
                format!("median aod: bilevel {m_bl:.4} vs reweigh {m_rw:.4}"),
            ));
        } else {
            out.push(CheckResult::skip(name, "needs 10-seed adult bilevel and reweigh cells at fraction 0.001".into()));
        }
    }

    {
        let name = "fair_trainers_cut_bias_forty_percent";
        let unc = cell_runs(manifests, "adult", Algorithm::Unconstrained, 1.0, 0.0);
        let fair = [Algorithm::Bilevel, Algorithm::Reweigh, Algorithm::Prejudice];
        let cells: Vec<Vec<&RunManifest>> = fair
            .iter()
            .map(|&a| cell_runs(manifests, "adult", a, 1.0, 0.0))
            .collect();
        if need(&unc) && cells.iter().all(|c| need(c)) {
            let bound = 0.6 * median(&metric_values(&unc, aod));
            let mut details = Vec::new();
            let mut ok = true;
            for (a, runs) in fair.iter().zip(&cells) {
                let m = median(&metric_values(runs, aod));
                ok &= m < bound;
                details.push(format!("{a} {m:.4}"));
            }
            out.push(CheckResult::of(
                name,
                ok,
                format!("median aod vs bound {bound:.4}: {}", details.join(", ")),
            ));
        } else {
            out.push(CheckResult::skip(name, "needs 10-seed adult cells at fraction 1 for unconstrained and every fair trainer".into()));
        }
    }

    {
        let name = "bilevel_full_demographics_quality";
        let runs = cell_runs(manifests, "adult", Algorithm::Bilevel, 1.0, 0.0);
        if need(&runs) {
            let ma = mean(&metric_values(&runs, aod));
            let mb = mean(&metric_values(&runs, bacc));
            out.push(CheckResult::of(
                name,
                ma <= 0.09 && mb >= 0.79,
                format!("mean aod {ma:.4} (<= 0.09), mean bacc {mb:.4} (>= 0.79)"),
            ));
        } else {
            out.push(CheckResult::skip(name, format!("needs 10 adult bilevel runs at fraction 1, found {}", runs.len())));
        }
    }

    {
        let name = "noisy_adult_only_bilevel_survives";
        let bl = cell_runs(manifests, "adult", Algorithm::Bilevel, 0.001, 0.5);
        let baselines = [
            Algorithm::Unconstrained,
            Algorithm::Reweigh,
            Algorithm::Prejudice,
            Algorithm::Arl,
        ];
        let cells: Vec<Vec<&RunManifest>> = baselines
            .iter()
            .map(|&a| cell_runs(manifests, "adult", a, 0.001, 0.5))
            .collect();
        if need(&bl) && cells.iter().all(|c| need(c)) {
            let mb = mean(&metric_values(&bl, bacc));
            let mut ok = mb >= 0.68;
            let mut details = vec![format!("bilevel {mb:.4} (>= 0.68)")];
            for (a, runs) in baselines.iter().zip(&cells) {
                let m = mean(&metric_values(runs, bacc));
                ok &= m <= 0.60;
                details.push(format!("{a} {m:.4}"));
            }
            out.push(CheckResult::of(
                name,
                ok,
                format!("mean bacc: {} (baselines <= 0.60)", details.join(", ")),
            ));
        } else {
            out.push(CheckResult::skip(name, "needs the 10-seed noisy adult suite (fraction 0.001, noise 0.5)".into()));
        }
    }

    {
        let name = "noisy_bank_bilevel_survives";
        let runs = cell_runs(manifests, "bank", Algorithm::Bilevel, 0.001, 0.5);
        if need(&runs) {
            let mb = mean(&metric_values(&runs, bacc));
            out.push(CheckResult::of(name, mb >= 0.62, format!("mean bacc {mb:.4} (>= 0.62)")));
        } else {
            out.push(CheckResult::skip(name, format!("needs 10 noisy bank bilevel runs, found {}", runs.len())));
        }
    }

    out
}

/// Reference check on the Bank file's conditional favorable rates.
pub fn bank_stats_check(stats: &crate::dataset::StatsReport) -> CheckResult {
    let name = "bank_conditional_favorable_rates";
    let ok = (stats.p_fav_given_priv - 0.12).abs() <= 0.01 && (stats.p_fav_given_unpriv - 0.23).abs() <= 0.01;
    CheckResult::of(
        name,
        ok,
        format!(
            "P(fav|priv) {:.4} (0.12 +/- 0.01), P(fav|unpriv) {:.4} (0.23 +/- 0.01)",
            stats.p_fav_given_priv, stats.p_fav_given_unpriv
        ),
    )
}

/// Read every manifest under `dir` (as written by `run_suite`), sorted by
/// file name.
pub fn collect_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut manifests = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p)?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Harness(format!("{}: {e}", p.display())))?;
        manifests.push(m);
    }
    Ok(manifests)
}
