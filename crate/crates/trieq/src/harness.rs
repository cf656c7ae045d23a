//! Experiment plans: multi-seed training cells, SNR-grid evaluation,
//! seed-averaged aggregation, trend verdicts, and plot-data emission.
//!
//! A plan is a TOML file naming a dataset, a list of modality
//! configurations, seeds, and a training budget. Each (configuration, seed)
//! cell trains one model and evaluates it on the full SNR grid; completed
//! cells are skipped on rerun by artifact hash, so a bundle directory is
//! fully resumable.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{ModalitySet, Vocabulary};
use crate::dataset::{self, OcrVariant, Snr, SNR_GRID, SNR_GRID_FINITE};
use crate::evalkit::{relative_benefit, EvalCell};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::trainer::{self, TrainConfig, TrainError};
use crate::util::{derive_seed, fnv1a64};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad plan: {0}")]
    BadPlan(String),
    #[error("io error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalRunError),
    #[error("incomplete grid, missing cells: {0:?}")]
    IncompleteGrid(Vec<String>),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// One modality configuration row of a plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellConfig {
    pub label: String,
    pub modalities: ModalitySet,
    #[serde(default = "default_variant")]
    pub ocr_variant: OcrVariant,
}

fn default_variant() -> OcrVariant {
    OcrVariant::None
}

/// Training hyperparameters as written in a plan file. `max_steps` is
/// deliberately required: the fine-tuning budget is an explicit choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanTrain {
    pub max_steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_max_new")]
    pub max_new_tokens: usize,
}

fn d_lr() -> f64 {
    3e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_wd() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    4
}
fn d_patience() -> usize {
    5
}
fn d_eval_every() -> usize {
    500
}
fn d_clip() -> f64 {
    1.0
}
fn d_max_new() -> usize {
    48
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanModel {
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "d_seq")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn d_layers() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_model() -> usize {
    128
}
fn d_ff() -> usize {
    512
}
fn d_seq() -> usize {
    768
}

impl Default for PlanModel {
    fn default() -> Self {
        PlanModel {
            n_layers: d_layers(),
            n_heads: d_heads(),
            d_model: d_model(),
            d_ff: d_ff(),
            max_seq_len: d_seq(),
            dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// One of exp1_modality_ablation, exp2_noise_curves, exp3_irrelevance.
    pub experiment: String,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub configs: Vec<CellConfig>,
    pub train: PlanTrain,
    #[serde(default)]
    pub model: PlanModel,
    /// Where per-cell artifacts live; defaults to `<out_dir>/cells`. Plans
    /// that share configurations can point at one directory and reuse each
    /// other's trained cells (the cell hash guards against mismatches).
    #[serde(default)]
    pub cells_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn from_toml_file(path: &Path) -> Result<ExperimentPlan, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let plan: ExperimentPlan =
            toml::from_str(&text).map_err(|e| HarnessError::BadPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::BadPlan("plan needs at least one seed".into()));
        }
        if !self.configs.iter().any(|c| c.modalities == ModalitySet::AUDIO_ONLY) {
            return Err(HarnessError::BadPlan("every plan includes the audio-only baseline".into()));
        }
        let known = [
            "exp1_modality_ablation",
            "exp2_noise_curves",
            "exp3_irrelevance",
        ];
        if !known.contains(&self.experiment.as_str()) {
            return Err(HarnessError::BadPlan(format!(
                "unknown experiment {:?}, expected one of {known:?}",
                self.experiment
            )));
        }
        if self.experiment == "exp3_irrelevance"
            && !self.configs.iter().any(|c| {
                matches!(c.ocr_variant, OcrVariant::Oracle10 | OcrVariant::Filtered(_))
            })
        {
            return Err(HarnessError::BadPlan(
                "exp3 plans include at least one 10-sentence or filtered OCR config".into(),
            ));
        }
        let mut labels: Vec<&str> = self.configs.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.configs.len() {
            return Err(HarnessError::BadPlan("config labels must be unique".into()));
        }
        Ok(())
    }

    fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            max_seq_len: self.model.max_seq_len,
            vocab_size,
            dropout_rate: self.model.dropout_rate,
        }
    }

    fn train_config(&self, cell: &CellConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
            eps: 1e-8,
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            max_steps: self.train.max_steps,
            eval_every: self.train.eval_every,
            seed,
            modality_set: cell.modalities,
            ocr_variant: cell.ocr_variant,
            grad_clip: self.train.grad_clip,
            max_new_tokens: self.train.max_new_tokens,
        }
    }

    /// Fingerprint of everything that determines a cell's artifacts.
    fn cell_hash(&self, cell: &CellConfig, seed: u64, dataset_hash: &str) -> String {
        let desc = format!(
            "{}|{}|{}|{}|{}|{}",
            serde_json::to_string(&self.train).unwrap(),
            serde_json::to_string(&self.model).unwrap(),
            cell.modalities.label(),
            cell.ocr_variant.label(),
            seed,
            dataset_hash,
        );
        format!("{:016x}", fnv1a64(desc.as_bytes()))
    }
}

/// Persisted per-cell summary; also the resumability marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub cell_hash: String,
    pub rows: Vec<EvalCell>,
    pub best_dev_wer: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub result: Option<CellResult>,
    pub error: Option<String>,
    /// False when the cell was skipped because its artifacts already match.
    pub executed: bool,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn cell_dir(plan: &ExperimentPlan, label: &str, seed: u64) -> PathBuf {
    let base = plan.cells_dir.clone().unwrap_or_else(|| plan.out_dir.join("cells"));
    base.join(format!("{}_seed{}", sanitize(label), seed))
}

/// Evaluate one checkpoint over the full SNR grid on the test split.
pub fn evaluate_grid(
    model: &Model,
    dataset_dir: &Path,
    cell: &CellConfig,
    max_new: usize,
) -> Result<Vec<EvalCell>, HarnessError> {
    crate::evalkit::evaluate(model, dataset_dir, &cell.label, cell.modalities, cell.ocr_variant, max_new)
        .map_err(HarnessError::from)
}

fn run_cell(
    plan: &ExperimentPlan,
    cell: &CellConfig,
    seed: u64,
    dataset_hash: &str,
    vocab_size: usize,
) -> Result<(CellResult, bool), HarnessError> {
    let dir = cell_dir(plan, &cell.label, seed);
    let hash = plan.cell_hash(cell, seed, dataset_hash);
    let done_path = dir.join("done.json");

    if let Ok(text) = fs::read_to_string(&done_path) {
        if let Ok(mut prev) = serde_json::from_str::<CellResult>(&text) {
            if prev.cell_hash == hash && dir.join("best.ckpt").exists() {
                prev.label = cell.label.clone();
                for row in prev.rows.iter_mut() {
                    row.config = cell.label.clone();
                }
                return Ok((prev, false));
            }
        }
    }

    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let model_cfg = plan.model_config(vocab_size);
    let model = Model::init(model_cfg, derive_seed(seed, "model-init"));
    let tcfg = plan.train_config(cell, seed);
    let outcome = trainer::train(model, &plan.dataset_dir, &dir, &tcfg)?;

    // Always evaluate the checkpoint as persisted (f32 on disk), so fresh
    // and resumed runs score the same weights.
    let best = checkpoint::load(&outcome.best_ckpt)?;
    let rows = evaluate_grid(&best.model, &plan.dataset_dir, cell, tcfg.max_new_tokens)?;
    let result = CellResult {
        label: cell.label.clone(),
        seed,
        cell_hash: hash,
        rows,
        best_dev_wer: outcome.best_dev_wer,
        best_step: outcome.best_step,
        steps_run: outcome.steps_run,
        stopped_early: outcome.stopped_early,
    };
    let tmp = done_path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&result).unwrap()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &done_path).map_err(io_err(&done_path))?;
    Ok((result, true))
}

/// Seed-aggregated numbers for one configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub label: String,
    /// Mean WER per grid SNR across seeds.
    pub wer_mean: Vec<(Snr, f64)>,
    /// Mean and spread (sample standard deviation) of the per-seed relative
    /// benefit vs the audio-only baseline, per grid SNR.
    pub benefit_mean: Vec<(Snr, f64, f64)>,
    /// Mean across seeds of grid-averaged WER.
    pub avg_wer_mean: f64,
    /// Per-seed benefit computed from grid-averaged WERs, then averaged.
    pub avg_benefit_mean: f64,
    pub avg_benefit_spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub name: String,
    pub holds: bool,
    pub details: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultBundle {
    pub experiment: String,
    pub plan: ExperimentPlan,
    pub cells: Vec<CellOutcome>,
    pub aggregates: Vec<ConfigAggregate>,
    pub verdicts: Vec<TrendVerdict>,
}

/// The verdicts each experiment is expected to produce.
pub fn expected_verdicts(experiment: &str) -> &'static [&'static str] {
    match experiment {
        "exp1_modality_ablation" => &["representation_quality_ladder"],
        "exp2_noise_curves" => &[
            "lip_amplifies_with_noise",
            "interior_sweet_spot_ocr",
            "interior_sweet_spot_image",
        ],
        "exp3_irrelevance" => &["irrelevance_penalty", "filtering_helps"],
        _ => &[],
    }
}

impl ResultBundle {
    pub fn all_cells_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn all_trends_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    /// True when every verdict the experiment defines was computable.
    pub fn verdicts_complete(&self) -> bool {
        expected_verdicts(&self.experiment)
            .iter()
            .all(|name| self.verdicts.iter().any(|v| v.name == *name))
    }

    pub fn aggregate(&self, label: &str) -> Option<&ConfigAggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }
}

fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, spread)
}

fn aggregate_results(
    plan: &ExperimentPlan,
    results: &[CellResult],
) -> Result<Vec<ConfigAggregate>, HarnessError> {
    let baseline_label = plan
        .configs
        .iter()
        .find(|c| c.modalities == ModalitySet::AUDIO_ONLY)
        .map(|c| c.label.clone())
        .expect("validated");
    let wer_of = |label: &str, seed: u64, snr: f64| -> Option<f64> {
        results
            .iter()
            .find(|r| r.label == label && r.seed == seed)?
            .rows
            .iter()
            .find(|row| row.snr_db.0.to_bits() == snr.to_bits())
            .map(|row| row.wer)
    };
    let mut aggregates = Vec::new();
    for cfg in &plan.configs {
        let mut wer_mean = Vec::new();
        let mut benefit_mean = Vec::new();
        for &snr in SNR_GRID.iter() {
            let wers: Vec<f64> = plan
                .seeds
                .iter()
                .filter_map(|&s| wer_of(&cfg.label, s, snr))
                .collect();
            if wers.is_empty() {
                continue;
            }
            let (wm, _) = mean_and_spread(&wers);
            wer_mean.push((Snr(snr), wm));
            let benefits: Vec<f64> = plan
                .seeds
                .iter()
                .filter_map(|&s| {
                    relative_benefit(wer_of(&baseline_label, s, snr)?, wer_of(&cfg.label, s, snr)?)
                })
                .collect();
            if !benefits.is_empty() {
                let (bm, bs) = mean_and_spread(&benefits);
                benefit_mean.push((Snr(snr), bm, bs));
            }
        }
        // Per-seed grid-average WER, then per-seed benefit from averages.
        let avg_wers: Vec<f64> = plan
            .seeds
            .iter()
            .filter_map(|&s| {
                let cells: Vec<f64> =
                    SNR_GRID.iter().filter_map(|&snr| wer_of(&cfg.label, s, snr)).collect();
                if cells.len() == SNR_GRID.len() {
                    Some(cells.iter().sum::<f64>() / cells.len() as f64)
                } else {
                    None
                }
            })
            .collect();
        let avg_benefits: Vec<f64> = plan
            .seeds
            .iter()
            .filter_map(|&s| {
                let avg = |label: &str| -> Option<f64> {
                    let cells: Vec<f64> =
                        SNR_GRID.iter().filter_map(|&snr| wer_of(label, s, snr)).collect();
                    (cells.len() == SNR_GRID.len())
                        .then(|| cells.iter().sum::<f64>() / cells.len() as f64)
                };
                relative_benefit(avg(&baseline_label)?, avg(&cfg.label)?)
            })
            .collect();
        if avg_wers.is_empty() {
            continue;
        }
        let (avg_wer_mean, _) = mean_and_spread(&avg_wers);
        let (avg_benefit_mean, avg_benefit_spread) = if avg_benefits.is_empty() {
            (0.0, 0.0)
        } else {
            mean_and_spread(&avg_benefits)
        };
        aggregates.push(ConfigAggregate {
            label: cfg.label.clone(),
            wer_mean,
            benefit_mean,
            avg_wer_mean,
            avg_benefit_mean,
            avg_benefit_spread,
        });
    }
    Ok(aggregates)
}

/// Find a config by role rather than by label text.
fn find_config<'a>(
    plan: &'a ExperimentPlan,
    modalities: &str,
    variant: Option<OcrVariant>,
) -> Option<&'a CellConfig> {
    let set: ModalitySet = modalities.parse().ok()?;
    plan.configs.iter().find(|c| {
        c.modalities == set
            && match variant {
                None => true,
                Some(v) => c.ocr_variant == v,
            }
    })
}

fn smallest_filtered(plan: &ExperimentPlan) -> Option<&CellConfig> {
    plan.configs
        .iter()
        .filter(|c| matches!(c.ocr_variant, OcrVariant::Filtered(_)))
        .min_by_key(|c| match c.ocr_variant {
            OcrVariant::Filtered(k) => k,
            _ => usize::MAX,
        })
}

fn benefit_at(agg: &[ConfigAggregate], label: &str, snr: f64) -> Option<f64> {
    agg.iter()
        .find(|a| a.label == label)?
        .benefit_mean
        .iter()
        .find(|(s, _, _)| s.0.to_bits() == snr.to_bits())
        .map(|(_, b, _)| *b)
}

fn avg_benefit(agg: &[ConfigAggregate], label: &str) -> Option<f64> {
    agg.iter().find(|a| a.label == label).map(|a| a.avg_benefit_mean)
}

/// Argmax SNR of a config's seed-mean benefit over the finite grid.
fn argmax_snr_finite(agg: &[ConfigAggregate], label: &str) -> Option<f64> {
    let a = agg.iter().find(|a| a.label == label)?;
    let mut best: Option<(f64, f64)> = None;
    for &snr in SNR_GRID_FINITE.iter() {
        let b = a
            .benefit_mean
            .iter()
            .find(|(s, _, _)| s.0.to_bits() == snr.to_bits())
            .map(|(_, b, _)| *b)?;
        if best.map(|(_, bb)| b > bb).unwrap_or(true) {
            best = Some((snr, b));
        }
    }
    best.map(|(s, _)| s)
}

/// The trend checks, named for the qualitative findings they reproduce.
pub fn compute_verdicts(plan: &ExperimentPlan, agg: &[ConfigAggregate]) -> Vec<TrendVerdict> {
    let mut verdicts = Vec::new();
    let mut push = |name: &str, value: Option<(bool, String)>| {
        if let Some((holds, details)) = value {
            verdicts.push(TrendVerdict { name: name.into(), holds, details });
        }
    };

    match plan.experiment.as_str() {
        "exp2_noise_curves" => {
            push(
                "lip_amplifies_with_noise",
                find_config(plan, "L+A", Some(OcrVariant::None)).and_then(|c| {
                    let lo = benefit_at(agg, &c.label, -10.0)?;
                    let hi = benefit_at(agg, &c.label, 20.0)?;
                    Some((lo > hi, format!("benefit@-10dB {lo:.4} vs benefit@+20dB {hi:.4}")))
                }),
            );
            push(
                "interior_sweet_spot_ocr",
                find_config(plan, "O+A", Some(OcrVariant::Real)).and_then(|c| {
                    let peak = argmax_snr_finite(agg, &c.label)?;
                    Some((
                        peak != 20.0 && peak != -20.0,
                        format!("benefit argmax over finite grid at {peak} dB"),
                    ))
                }),
            );
            push(
                "interior_sweet_spot_image",
                find_config(plan, "I+A", Some(OcrVariant::None)).and_then(|c| {
                    let peak = argmax_snr_finite(agg, &c.label)?;
                    Some((
                        peak != 20.0 && peak != -20.0,
                        format!("benefit argmax over finite grid at {peak} dB"),
                    ))
                }),
            );
        }
        "exp1_modality_ablation" => {
            push(
                "representation_quality_ladder",
                (|| {
                    let i = avg_benefit(agg, &find_config(plan, "I+A", Some(OcrVariant::None))?.label)?;
                    let o = avg_benefit(agg, &find_config(plan, "O+A", Some(OcrVariant::Real))?.label)?;
                    let oo =
                        avg_benefit(agg, &find_config(plan, "O+A", Some(OcrVariant::Oracle3))?.label)?;
                    Some((
                        i < o && o < oo,
                        format!("avg benefit image {i:.4} < real OCR {o:.4} < oracle OCR {oo:.4}"),
                    ))
                })(),
            );
        }
        "exp3_irrelevance" => {
            push(
                "irrelevance_penalty",
                (|| {
                    let ten =
                        avg_benefit(agg, &find_config(plan, "O+A", Some(OcrVariant::Oracle10))?.label)?;
                    let three =
                        avg_benefit(agg, &find_config(plan, "O+A", Some(OcrVariant::Oracle3))?.label)?;
                    Some((
                        ten < three,
                        format!("avg benefit with 7 distractors {ten:.4} < without {three:.4}"),
                    ))
                })(),
            );
            push(
                "filtering_helps",
                (|| {
                    let f = avg_benefit(agg, &smallest_filtered(plan)?.label)?;
                    let ten =
                        avg_benefit(agg, &find_config(plan, "O+A", Some(OcrVariant::Oracle10))?.label)?;
                    Some((f >= ten, format!("avg benefit filtered {f:.4} >= distractors {ten:.4}")))
                })(),
            );
        }
        _ => {}
    }
    verdicts
}

/// Run every (config, seed) cell of a plan, aggregate, verdict, and persist
/// the bundle. Cells that fail are reported without aborting the others;
/// completed cells are skipped by artifact hash.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ResultBundle, HarnessError> {
    plan.validate()?;
    let manifest = dataset::load_manifest(&plan.dataset_dir)?;
    let vocab = Vocabulary::new();
    fs::create_dir_all(&plan.out_dir).map_err(io_err(&plan.out_dir))?;

    let jobs: Vec<(CellConfig, u64)> = plan
        .configs
        .iter()
        .flat_map(|c| plan.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let outcomes: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|(cell, seed)| match run_cell(plan, cell, *seed, &manifest.config_hash, vocab.size() as usize) {
            Ok((result, executed)) => CellOutcome { result: Some(result), error: None, executed },
            Err(e) => CellOutcome { result: None, error: Some(e.to_string()), executed: true },
        })
        .collect();

    let results: Vec<CellResult> =
        outcomes.iter().filter_map(|o| o.result.clone()).collect();
    let aggregates = aggregate_results(plan, &results)?;
    let verdicts = compute_verdicts(plan, &aggregates);
    let bundle = ResultBundle {
        experiment: plan.experiment.clone(),
        plan: plan.clone(),
        cells: outcomes,
        aggregates,
        verdicts,
    };
    write_bundle(&bundle)?;
    Ok(bundle)
}

fn write_bundle(bundle: &ResultBundle) -> Result<(), HarnessError> {
    let dir = &bundle.plan.out_dir;
    let report_json = dir.join("report.json");
    let tmp = report_json.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(bundle).unwrap()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &report_json).map_err(io_err(&report_json))?;
    let txt = render_report(bundle);
    fs::write(dir.join("report.txt"), txt).map_err(io_err(dir))?;
    fs::write(
        dir.join("trends.json"),
        serde_json::to_string_pretty(&bundle.verdicts).unwrap(),
    )
    .map_err(io_err(dir))?;
    emit_plots(bundle)?;
    Ok(())
}

/// Aligned plain-text table: rows are configs, columns are the SNR grid plus
/// grid-average WER and average relative benefit vs the audio-only baseline.
pub fn render_report(bundle: &ResultBundle) -> String {
    let mut out = String::new();
    out.push_str(&format!("experiment: {}\n", bundle.experiment));
    out.push_str(&format!("seeds: {:?}\n\n", bundle.plan.seeds));
    out.push_str("WER (mean over seeds)\n");
    out.push_str(&format!("{:<16}", "config"));
    for &snr in SNR_GRID.iter() {
        out.push_str(&format!("{:>8}", dataset::snr_label(snr)));
    }
    out.push_str(&format!("{:>8}{:>10}\n", "Avg", "Benefit"));
    for agg in &bundle.aggregates {
        out.push_str(&format!("{:<16}", agg.label));
        for &snr in SNR_GRID.iter() {
            let w = agg
                .wer_mean
                .iter()
                .find(|(s, _)| s.0.to_bits() == snr.to_bits())
                .map(|(_, w)| format!("{w:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{w:>8}"));
        }
        let benefit = if agg.label
            == bundle
                .plan
                .configs
                .iter()
                .find(|c| c.modalities == ModalitySet::AUDIO_ONLY)
                .map(|c| c.label.clone())
                .unwrap_or_default()
        {
            "-".to_string()
        } else {
            format!("{:+.1}%", agg.avg_benefit_mean * 100.0)
        };
        out.push_str(&format!("{:>8.3}{benefit:>10}\n", agg.avg_wer_mean));
    }
    out.push_str("\ntrend verdicts\n");
    for v in &bundle.verdicts {
        out.push_str(&format!(
            "  [{}] {} ({})\n",
            if v.holds { "pass" } else { "FAIL" },
            v.name,
            v.details
        ));
    }
    let failed: Vec<&CellOutcome> = bundle.cells.iter().filter(|c| c.error.is_some()).collect();
    if !failed.is_empty() {
        out.push_str("\nfailed cells\n");
        for c in failed {
            out.push_str(&format!("  {}\n", c.error.as_deref().unwrap_or("?")));
        }
    }
    out
}

/// Emit one columnar text file of benefit curves: one row per (config, snr),
/// fixed column order `config snr_db benefit_mean benefit_spread`, infinities
/// spelled "inf"/"-inf". Refuses when any (config, snr) cell is missing.
pub fn emit_plots(bundle: &ResultBundle) -> Result<PathBuf, HarnessError> {
    let dir = bundle.plan.out_dir.join("plots");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let baseline_label = bundle
        .plan
        .configs
        .iter()
        .find(|c| c.modalities == ModalitySet::AUDIO_ONLY)
        .map(|c| c.label.clone())
        .unwrap_or_default();
    let mut missing = Vec::new();
    let mut lines = Vec::new();
    for agg in &bundle.aggregates {
        if agg.label == baseline_label {
            continue;
        }
        for &snr in SNR_GRID.iter() {
            match agg.benefit_mean.iter().find(|(s, _, _)| s.0.to_bits() == snr.to_bits()) {
                Some((s, b, spread)) => lines.push(format!(
                    "{}\t{}\t{:.6}\t{:.6}",
                    agg.label,
                    dataset::snr_label(s.0),
                    b,
                    spread
                )),
                None => missing.push(format!("{}@{}", agg.label, dataset::snr_label(snr))),
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::IncompleteGrid(missing));
    }
    let path = dir.join("benefit_curves.tsv");
    let mut text = String::from("# relative WER benefit vs audio-only baseline, mean and sample std over seeds\n");
    text.push_str("config\tsnr_db\tbenefit_mean\tbenefit_spread\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}

/// Reload a bundle from its directory (for `report`/`emit-plots` commands).
pub fn load_bundle(out_dir: &Path) -> Result<ResultBundle, HarnessError> {
    let path = out_dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::BadPlan(e.to_string()))
}
