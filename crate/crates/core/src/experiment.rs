//! Experiment runner: seeds × modality sets, baseline against SAL, with
//! diagnostics and a deterministic report.
//!
//! Each cell generates data for its seed, holds out a fraction of the
//! training-identity utterances for validation, trains the base model,
//! records it, runs the selection and addition phases and evaluates both
//! models on validation rows (seen identities) and test rows (unseen
//! identities). Cells are independent and may run in parallel; the report is
//! assembled in canonical order afterwards.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerKind;
use crate::sal::{self, ConvEncoder, PhaseTrace, SalConfig, SalModel};
use crate::stats::{self, TestResult};
use crate::synthdata::{self, GenSpec, LabeledDataset};
use crate::tensor::{Matrix, Rng};

/// Thread cap for parallel cells.
pub const THREADS_ENV: &str = "DESAL_THREADS";

const STREAM_SPLIT: u64 = 11;
const STREAM_PERMUTATION: u64 = 12;
const STREAM_NOISE: u64 = 13;

/// Threshold on mean `|h(Z)|` for counting a dimension as selected.
pub const ACTIVE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gen: GenSpec,
    pub sal: SalConfig,
    pub seeds: Vec<u64>,
    /// Channel-name subsets; `["all"]` selects every channel.
    pub modality_sets: Vec<Vec<String>>,
    pub output_dir: PathBuf,
    /// Fraction of training-identity utterances held out for validation.
    pub val_frac: f64,
    /// Monte-Carlo budget of the pooled permutation test.
    pub n_permutations: u64,
    pub heatmap_rows: usize,
    pub heatmap_cols: usize,
}

/// SAL settings for the synthetic benchmark. The dense default encoder
/// mixes confound and signal columns in every unit, and the selector then
/// cannot isolate either; a per-column tanh encoder keeps them apart. The
/// selector gets a larger step because each identity's weights only see that
/// identity's share of the mean loss.
pub fn benchmark_sal() -> SalConfig {
    SalConfig {
        encoder: Some(ConvEncoder {
            window: 1,
            channels: 4,
            activation: LayerKind::Tanh,
        }),
        lambda_sparsity: 0.003,
        noise_sigma: 5.0,
        lr_select: 1.0,
        ..SalConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GenSpec::default(),
            sal: benchmark_sal(),
            seeds: vec![0, 1, 2],
            modality_sets: vec![
                vec!["verbal".into()],
                vec!["acoustic".into()],
                vec!["visual".into()],
                vec!["verbal".into(), "visual".into()],
                vec!["all".into()],
            ],
            output_dir: PathBuf::from("out"),
            val_frac: 0.2,
            n_permutations: 10_000,
            heatmap_rows: 50,
            heatmap_cols: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate().map_err(as_config)?;
        self.sal.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.modality_sets.is_empty() {
            return Err(Error::Config("modality_sets must not be empty".into()));
        }
        let declared: Vec<&str> = self.gen.channels.iter().map(|c| c.name.as_str()).collect();
        for set in &self.modality_sets {
            if set.is_empty() {
                return Err(Error::Config("empty modality set".into()));
            }
            for name in set {
                if name != "all" && !declared.contains(&name.as_str()) {
                    return Err(Error::Config(format!("modality set names unknown channel {name:?}")));
                }
            }
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Config(format!("val_frac must be in (0, 1), got {}", self.val_frac)));
        }
        if self.n_permutations == 0 {
            return Err(Error::Config("n_permutations must be >= 1".into()));
        }
        Ok(())
    }

    /// Same config with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Label used for a modality set in tables and reports.
pub fn modality_name(set: &[String]) -> String {
    set.join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Held-out utterances of training identities.
    pub validation: f64,
    /// Utterances of unseen identities.
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRatios {
    pub label: f64,
    pub identity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub baseline: Accuracies,
    pub sal: Accuracies,
    /// `f` refit on the addition schedule without noise.
    pub control: Accuracies,
    pub ratios_before: ClusterRatios,
    pub ratios_after: ClusterRatios,
    pub active_dims: usize,
    pub identity_label_chi_square: Option<TestResult>,
    pub trace: PhaseTrace,
    /// Per-row correctness on the test split, used for pooled testing.
    pub baseline_correct: Vec<u8>,
    pub sal_correct: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CellMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: String,
    pub completed: usize,
    pub failed: usize,
    pub median_baseline_validation: Option<f64>,
    pub median_baseline_test: Option<f64>,
    pub median_sal_validation: Option<f64>,
    pub median_sal_test: Option<f64>,
    pub median_control_test: Option<f64>,
    /// One-sided test that SAL is more often correct than the baseline,
    /// pooled over the test rows of every completed seed.
    pub permutation: Option<TestResult>,
    pub median_label_ratio_gain: Option<f64>,
    pub median_identity_ratio_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub seed: u64,
    pub modality: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub summaries: Vec<ModalitySummary>,
    pub selection_heatmap: Option<Heatmap>,
}

impl ExperimentReport {
    pub fn summary(&self, modality: &str) -> Option<&ModalitySummary> {
        self.summaries.iter().find(|s| s.modality == modality)
    }

    /// Canonical JSON: sorted keys, shortest round-trip floats.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Relative change `after / before − 1`.
pub fn relative_gain(before: f64, after: f64) -> f64 {
    after / before - 1.0
}

struct Prepared {
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let gen = GenSpec {
        seed,
        ..cfg.gen.clone()
    };
    let (pool, test) = synthdata::generate(&gen)?;
    let mut rng = Rng::derive(seed, STREAM_SPLIT);
    let (train, val) = synthdata::utterance_split(&pool, cfg.val_frac, &mut rng)?;
    Ok(Prepared { train, val, test })
}

fn evaluate(model: &SalModel<f64>, val: &LabeledDataset, test: &LabeledDataset) -> Result<(Accuracies, Vec<u8>)> {
    let val_pred = sal::predict(model, &val.features)?;
    let test_pred = sal::predict(model, &test.features)?;
    let truth = test.label_bits();
    Ok((
        Accuracies {
            validation: stats::accuracy(&val_pred, &val.label_bits())?,
            test: stats::accuracy(&test_pred, &truth)?,
        },
        stats::correctness(&test_pred, &truth),
    ))
}

fn ratios(model: &SalModel<f64>, data: &LabeledDataset) -> Result<ClusterRatios> {
    let view = sal::classifier_view(&model.f, &model.represent(&data.features)?)?;
    let labels: Vec<usize> = data.label_bits().into_iter().map(usize::from).collect();
    Ok(ClusterRatios {
        label: stats::cluster_ratio(&view, &labels)?,
        identity: stats::cluster_ratio(&view, &data.identities)?,
    })
}

/// All three stages on one dataset, with the noise stream the experiment
/// runner uses.
pub fn train_sal(data: &LabeledDataset, cfg: &SalConfig) -> Result<SalModel<f64>> {
    let base = sal::pretrain_base(data, cfg)?;
    let selected = sal::selection_phase(base, data, cfg)?;
    sal::addition_phase(selected, data, cfg, &mut Rng::derive(cfg.seed, STREAM_NOISE))
}

/// Runs one (seed, modality set) cell.
pub fn run_cell(cfg: &ExperimentConfig, seed: u64, modality: &[String]) -> Result<(CellMetrics, Matrix<f64>)> {
    let data = prepare(cfg, seed)?;
    let train = data.train.select_channels(modality)?;
    let val = data.val.select_channels(modality)?;
    let test = data.test.select_channels(modality)?;
    let sal_cfg = SalConfig {
        seed,
        ..cfg.sal.clone()
    };

    let base = sal::pretrain_base::<f64>(&train, &sal_cfg)?;
    let (baseline, baseline_correct) = evaluate(&base, &val, &test)?;
    let ratios_before = ratios(&base, &test)?;
    let control_model = sal::retrain_classifier(base.clone(), &train, &sal_cfg)?;
    let (control, _) = evaluate(&control_model, &val, &test)?;

    let selected = sal::selection_phase(base, &train, &sal_cfg)?;
    let mask = selected.selection_matrix(&train.identities)?;
    let mut rng = Rng::derive(seed, STREAM_NOISE);
    let added = sal::addition_phase(selected, &train, &sal_cfg, &mut rng)?;
    let (sal_acc, sal_correct) = evaluate(&added, &val, &test)?;
    let ratios_after = ratios(&added, &test)?;

    let chi = train
        .identity_label_table()
        .and_then(|t| stats::chi_square_independence(&t.compact()))
        .ok();
    let metrics = CellMetrics {
        baseline,
        sal: sal_acc,
        control,
        ratios_before,
        ratios_after,
        active_dims: sal::active_dimensions(&mask, ACTIVE_TOL),
        identity_label_chi_square: chi,
        trace: added.trace,
        baseline_correct,
        sal_correct,
    };
    Ok((metrics, mask))
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs every cell and assembles the report. Cell failures are recorded and
/// do not stop the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(u64, &Vec<String>)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.modality_sets.iter().map(move |m| (s, m)))
        .collect();
    let work = || -> Vec<(Cell, Option<Matrix<f64>>)> {
        jobs.par_iter()
            .map(|&(seed, set)| {
                let modality = modality_name(set);
                match run_cell(cfg, seed, set) {
                    Ok((metrics, mask)) => (
                        Cell {
                            seed,
                            modality,
                            metrics: Some(metrics),
                            failure: None,
                        },
                        Some(mask),
                    ),
                    Err(e) => {
                        log::warn!("cell seed={seed} modality={modality} failed: {e}");
                        (
                            Cell {
                                seed,
                                modality,
                                metrics: None,
                                failure: Some(e.to_string()),
                            },
                            None,
                        )
                    }
                }
            })
            .collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))?
            .install(work),
        None => work(),
    };

    let selection_heatmap = results.iter().find_map(|(cell, mask)| {
        mask.as_ref().map(|m| Heatmap {
            seed: cell.seed,
            modality: cell.modality.clone(),
            rows: truncate(m, cfg.heatmap_rows, cfg.heatmap_cols),
        })
    });
    let cells: Vec<Cell> = results.into_iter().map(|(c, _)| c).collect();
    let summaries = cfg
        .modality_sets
        .iter()
        .map(|set| summarize(cfg, &modality_name(set), &cells))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: cfg.clone(),
        cells,
        summaries,
        selection_heatmap,
    })
}

fn truncate(m: &Matrix<f64>, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    m.iter_rows()
        .take(rows)
        .map(|r| r.iter().take(cols).copied().collect())
        .collect()
}

fn summarize(cfg: &ExperimentConfig, modality: &str, cells: &[Cell]) -> Result<ModalitySummary> {
    let mine: Vec<&Cell> = cells.iter().filter(|c| c.modality == modality).collect();
    let done: Vec<&CellMetrics> = mine.iter().filter_map(|c| c.metrics.as_ref()).collect();
    let med = |f: &dyn Fn(&CellMetrics) -> f64| stats::median(&done.iter().map(|m| f(m)).collect::<Vec<_>>());
    let permutation = if done.is_empty() {
        None
    } else {
        let a: Vec<u8> = done.iter().flat_map(|m| m.baseline_correct.iter().copied()).collect();
        let b: Vec<u8> = done.iter().flat_map(|m| m.sal_correct.iter().copied()).collect();
        let mut rng = Rng::derive(cfg.seeds[0], STREAM_PERMUTATION);
        Some(stats::permutation_test(&a, &b, cfg.n_permutations, &mut rng)?)
    };
    Ok(ModalitySummary {
        modality: modality.to_string(),
        completed: done.len(),
        failed: mine.len() - done.len(),
        median_baseline_validation: med(&|m| m.baseline.validation),
        median_baseline_test: med(&|m| m.baseline.test),
        median_sal_validation: med(&|m| m.sal.validation),
        median_sal_test: med(&|m| m.sal.test),
        median_control_test: med(&|m| m.control.test),
        permutation,
        median_label_ratio_gain: med(&|m| relative_gain(m.ratios_before.label, m.ratios_after.label)),
        median_identity_ratio_gain: med(&|m| relative_gain(m.ratios_before.identity, m.ratios_after.identity)),
    })
}

/// Writes `report.json`, `accuracy_table.csv` and `selection_matrix.csv`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    write_accuracy_table(report, &dir.join("accuracy_table.csv"))?;
    write_selection_matrix(report, &dir.join("selection_matrix.csv"))?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_accuracy_table(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header = ["modality", "baseline", "sal", "baseline_validation", "sal_validation", "p_value", "completed"];
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for s in &report.summaries {
        w.write_record([
            s.modality.clone(),
            fmt_opt(s.median_baseline_test),
            fmt_opt(s.median_sal_test),
            fmt_opt(s.median_baseline_validation),
            fmt_opt(s.median_sal_validation),
            fmt_opt(s.permutation.as_ref().map(|p| p.p_value)),
            s.completed.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per shown training utterance, one column per representation
/// dimension. Empty when no cell completed.
pub fn write_selection_matrix(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    if let Some(h) = &report.selection_heatmap {
        for row in &h.rows {
            w.write_record(row.iter().map(|v| format!("{v:?}")))
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seeds: vec![3],
            modality_sets: vec![vec!["all".into()]],
            n_permutations: 200,
            ..ExperimentConfig::default()
        };
        cfg.gen.n_train_ids = 6;
        cfg.gen.n_test_ids = 4;
        cfg.gen.utt_per_id = 10;
        cfg.sal.epochs_base = 5;
        cfg.sal.epochs_select = 5;
        cfg.sal.epochs_add = 5;
        cfg
    }

    #[test]
    fn smoke_run_fills_every_section() {
        let report = run_experiment(&tiny()).unwrap();
        assert_eq!(report.cells.len(), 1);
        let m = report.cells[0].metrics.as_ref().expect("cell completed");
        assert_eq!(m.trace.base.len(), 5);
        assert_eq!(m.trace.selection.len(), 5);
        assert_eq!(m.trace.addition.len(), 5);
        assert_eq!(m.sal_correct.len(), 4 * 10);
        let s = report.summary("all").unwrap();
        assert_eq!((s.completed, s.failed), (1, 0));
        assert!(s.permutation.is_some());
        let h = report.selection_heatmap.as_ref().unwrap();
        assert_eq!(h.rows.len(), 48);
        assert_eq!(h.rows[0].len(), 100);
    }

    #[test]
    fn unknown_channel_is_a_config_error() {
        let mut cfg = tiny();
        cfg.modality_sets = vec![vec!["smell".into()]];
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut cfg = tiny();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn diverging_cell_is_isolated() {
        let mut cfg = tiny();
        cfg.seeds = vec![1, 2];
        cfg.modality_sets = vec![vec!["all".into()], vec!["verbal".into()]];
        let good = run_experiment(&cfg).unwrap();
        // a linear head with a huge step overflows; other cells are unaffected
        cfg.sal.lr_base = 1e3;
        cfg.sal.encoder = None;
        cfg.sal.arch_f = Some(vec![crate::nn::LayerSpec::dense(16, 1)]);
        let bad = run_experiment(&cfg).unwrap();
        assert!(bad.cells.iter().all(|c| c.failure.is_some()));
        assert_eq!(bad.summary("all").unwrap().failed, 2);
        assert!(good.cells.iter().all(|c| c.metrics.is_some()));
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&tiny()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = ExperimentReport::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn relative_gain_basics() {
        assert_eq!(relative_gain(2.0, 3.0), 0.5);
        assert_eq!(relative_gain(2.0, 2.0), 0.0);
    }
}
