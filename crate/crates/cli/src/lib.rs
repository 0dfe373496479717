//! Library behind the `sparcl-kit` binary: config-file handling, the five
//! command implementations, and the CSV/JSON artifact writers.
//!
//! Every command is deterministic given its config and seed; the one
//! exception is the wall-time field inside `results.json`. CSV floats are
//! printed with 17 significant digits so logged values round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sparcl_core::geninject::{
    inject_image_features, read_sequence, write_sequence, GenError, ImageEmbedding,
};
use sparcl_core::losses::{adaptive_margin, LossConfig, MarginMode};
use sparcl_core::toyworld::{
    write_dataset, DatasetMeta, World, WorldConfig, WorldError, ALL_EDIT_KINDS,
};
use sparcl_core::trainer::{
    ablate, train, AblationTable, EncoderParams, EvalReport, StepRecord, TrainConfig, TrainError,
};

pub const RESULTS_VERSION: u32 = 1;
pub const PARAMS_VERSION: u32 = 1;

/// Errors of the command layer, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags, or input values. Exit code 1.
    #[error("{0}")]
    Config(String),
    /// Failed file access or a damaged input file. Exit code 2.
    #[error("{0}")]
    Io(String),
    /// Training produced a non-finite loss. Exit code 3.
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

fn io_err(context: &str, err: std::io::Error) -> CliError {
    CliError::Io(format!("{context}: {err}"))
}

fn world_err(err: WorldError) -> CliError {
    match err {
        WorldError::Io(_) | WorldError::CorruptHeader(_) => CliError::Io(err.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn train_err(err: TrainError) -> CliError {
    match err {
        TrainError::DivergenceDetected { .. } => CliError::Divergence(err.to_string()),
        TrainError::World(inner) => world_err(inner),
        other => CliError::Config(other.to_string()),
    }
}

fn gen_err(err: GenError) -> CliError {
    match err {
        GenError::Io(_) | GenError::CorruptHeader(_) | GenError::ChecksumMismatch { .. } => {
            CliError::Io(err.to_string())
        }
        other => CliError::Config(other.to_string()),
    }
}

/// On-disk run configuration with `[world]`, `[loss]`, and `[train]`
/// sections, all optional and all rejecting unknown keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub world: WorldConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfigFile {
    /// Assembles the flat training configuration the core trainer takes.
    pub fn training_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.loss = self.loss.clone();
        cfg.world = self.world.clone();
        cfg
    }
}

/// Loads a config file and applies the seed override to both the world and
/// the trainer seed.
pub fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| io_err(&format!("cannot read config {}", path.display()), e))?;
    let mut file: RunConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
    if let Some(s) = seed {
        file.world.seed = s;
        file.train.seed = s;
    }
    Ok(file)
}

/// Reads the parallelism cap from `SPARCL_KIT_THREADS`; absent means 1.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("SPARCL_KIT_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "SPARCL_KIT_THREADS must be a positive integer, got '{raw}'"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(CliError::Config(format!("SPARCL_KIT_THREADS unreadable: {e}"))),
    }
}

fn ensure_parent_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| io_err(&format!("cannot create {}", parent.display()), e))?;
        }
    }
    Ok(())
}

fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Stdout summary of a dataset generation run.
#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub out: String,
    pub count: u64,
    pub n_pos_corrupted: u64,
    pub n_neg_easy: u64,
}

/// Generates a dataset file (and its companion metadata) from the `[world]`
/// section of the config.
pub fn cmd_gen_data(
    config: &Path,
    out: &Path,
    count: u64,
    seed: Option<u64>,
) -> Result<GenSummary, CliError> {
    let file = load_run_config(config, seed)?;
    let world = World::new(file.world).map_err(world_err)?;
    ensure_parent_dir(out)?;
    let meta: DatasetMeta = write_dataset(out, &world, count).map_err(world_err)?;
    Ok(GenSummary {
        out: out.display().to_string(),
        count: meta.count,
        n_pos_corrupted: meta.n_pos_corrupted,
        n_neg_easy: meta.n_neg_easy,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Contents of `results.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResults {
    pub version: u32,
    pub seed: u64,
    pub world_seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Largest margin-loss magnitudes seen over the run; both stay 0 for a
    /// contrastive-only configuration.
    pub max_loss_mar_img: f64,
    pub max_loss_mar_txt: f64,
    pub eval: EvalReport,
    pub config: RunConfigFile,
    pub wall_time_s: f64,
}

/// Trains with the config and writes `metrics.csv`, `results.json`, and
/// `params.json` into the output directory.
pub fn cmd_train(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<TrainResults, CliError> {
    let file = load_run_config(config, seed)?;
    let cfg = file.training_config();
    let started = Instant::now();
    let (params, log) = train(&cfg).map_err(train_err)?;
    let wall_time_s = started.elapsed().as_secs_f64();

    fs::create_dir_all(out_dir)
        .map_err(|e| io_err(&format!("cannot create {}", out_dir.display()), e))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &log.records)?;

    let results = TrainResults {
        version: RESULTS_VERSION,
        seed: cfg.seed,
        world_seed: cfg.world.seed,
        steps: cfg.total_steps,
        final_loss: log.records.last().map(|r| r.loss_total),
        max_loss_mar_img: log
            .records
            .iter()
            .fold(0.0, |acc, r| acc.max(r.loss_mar_img.abs())),
        max_loss_mar_txt: log
            .records
            .iter()
            .fold(0.0, |acc, r| acc.max(r.loss_mar_txt.abs())),
        eval: log.eval.clone(),
        config: file,
        wall_time_s,
    };
    write_results_json(&out_dir.join("results.json"), &results)?;
    write_params_json(&out_dir.join("params.json"), &params)?;
    Ok(results)
}

/// Writes step records as CSV with exact-round-trip floats.
pub fn write_metrics_csv(path: &Path, records: &[StepRecord]) -> Result<(), CliError> {
    let mut out = String::from("step,lr,loss_con,loss_mar_img,loss_mar_txt,loss_total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            csv_float(r.lr),
            csv_float(r.loss_con),
            csv_float(r.loss_mar_img),
            csv_float(r.loss_mar_txt),
            csv_float(r.loss_total),
        ));
    }
    fs::write(path, out).map_err(|e| io_err(&format!("cannot write {}", path.display()), e))
}

/// Writes the run summary as pretty-printed JSON.
pub fn write_results_json(path: &Path, results: &TrainResults) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(results)
        .expect("results serialization cannot fail");
    fs::write(path, json + "\n")
        .map_err(|e| io_err(&format!("cannot write {}", path.display()), e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsFile {
    version: u32,
    d_emb: usize,
    w_img: Vec<Vec<f64>>,
    w_txt: Vec<Vec<f64>>,
}

fn matrix_rows(m: &sparcl_core::numkit::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Writes both weight matrices as JSON row arrays.
pub fn write_params_json(path: &Path, params: &EncoderParams) -> Result<(), CliError> {
    let file = ParamsFile {
        version: PARAMS_VERSION,
        d_emb: params.d_emb(),
        w_img: matrix_rows(&params.w_img),
        w_txt: matrix_rows(&params.w_txt),
    };
    let json = serde_json::to_string_pretty(&file)
        .expect("params serialization cannot fail");
    fs::write(path, json + "\n")
        .map_err(|e| io_err(&format!("cannot write {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Parses a comma-separated margin-mode list.
pub fn parse_modes(raw: &str) -> Result<Vec<MarginMode>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            MarginMode::parse(s)
                .ok_or_else(|| CliError::Config(format!("unknown margin mode '{s}'")))
        })
        .collect()
}

/// Parses a comma-separated seed list.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed '{s}'")))
        })
        .collect()
}

/// Runs the margin-mode sweep and writes `ablation.csv` into the output
/// directory.
pub fn cmd_ablate(
    config: &Path,
    out_dir: &Path,
    modes_csv: &str,
    seeds_csv: &str,
    seed: Option<u64>,
    threads: usize,
) -> Result<AblationTable, CliError> {
    let file = load_run_config(config, seed)?;
    let modes = parse_modes(modes_csv)?;
    let seeds = parse_seeds(seeds_csv)?;
    let base = file.training_config();
    let table = ablate(&base, &modes, &seeds, threads).map_err(train_err)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| io_err(&format!("cannot create {}", out_dir.display()), e))?;
    write_ablation_csv(&out_dir.join("ablation.csv"), &table)?;
    Ok(table)
}

fn sanitize_cell(text: &str) -> String {
    text.replace(['\n', '\r'], " ").replace(',', ";")
}

/// Writes per-cell rows followed by per-mode summary rows.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<(), CliError> {
    let mut out = String::from(
        "row,mode,seed,status,overall,attribute,relation,object_swap,mean_overall,std_overall,n_ok\n",
    );
    for cell in &table.cells {
        match &cell.outcome {
            Ok(report) => {
                let kinds: Vec<String> = ALL_EDIT_KINDS
                    .iter()
                    .map(|&k| {
                        report
                            .accuracy_for(k)
                            .map(csv_float)
                            .unwrap_or_default()
                    })
                    .collect();
                out.push_str(&format!(
                    "cell,{},{},ok,{},{},{},{},,,\n",
                    cell.mode,
                    cell.seed,
                    csv_float(report.overall),
                    kinds[0],
                    kinds[1],
                    kinds[2],
                ));
            }
            Err(message) => {
                out.push_str(&format!(
                    "cell,{},{},error: {},,,,,,,\n",
                    cell.mode,
                    cell.seed,
                    sanitize_cell(message),
                ));
            }
        }
    }
    for summary in &table.summaries {
        let (mean, std) = if summary.n_ok > 0 {
            (
                csv_float(summary.mean_overall),
                csv_float(summary.std_overall),
            )
        } else {
            (String::new(), String::new())
        };
        out.push_str(&format!(
            "summary,{},,,,,,,{},{},{}\n",
            summary.mode, mean, std, summary.n_ok,
        ));
    }
    fs::write(path, out).map_err(|e| io_err(&format!("cannot write {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// margin-plot
// ---------------------------------------------------------------------------

/// Tick spacing of the margin curve export.
pub const PLOT_SPACING: f64 = 1e-4;

/// Writes the margin schedule curve over `d` in `[beta - 2 m0, m0 + 2 m0]`
/// and returns the number of data rows.
pub fn cmd_margin_plot(m0: f64, beta: f64, gamma: f64, out: &Path) -> Result<usize, CliError> {
    let cfg = LossConfig {
        m0,
        beta,
        gamma,
        margin_mode: MarginMode::Adaptive,
        ..LossConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let start_tick = ((beta - 2.0 * m0) / PLOT_SPACING).round() as i64;
    let end_tick = ((m0 + 2.0 * m0) / PLOT_SPACING).round() as i64;
    ensure_parent_dir(out)?;
    let mut body = String::from("d,m_adaptive,hinge_value\n");
    for tick in start_tick..=end_tick {
        let d = tick as f64 * PLOT_SPACING;
        let m = adaptive_margin(d, &cfg);
        let hinge = (m - d).max(0.0);
        body.push_str(&format!(
            "{},{},{}\n",
            csv_float(d),
            csv_float(m),
            csv_float(hinge)
        ));
    }
    fs::write(out, body).map_err(|e| io_err(&format!("cannot write {}", out.display()), e))?;
    Ok((end_tick - start_tick + 1) as usize)
}

// ---------------------------------------------------------------------------
// inject-demo
// ---------------------------------------------------------------------------

/// Stdout summary of an injection run.
#[derive(Debug, Clone, Serialize)]
pub struct InjectSummary {
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub replaced: usize,
}

/// Reads a sequence file and a single-row embedding file, injects the
/// embedding into the padding rows, and writes the result.
pub fn cmd_inject_demo(
    sequence: &Path,
    image: &Path,
    out: &Path,
) -> Result<InjectSummary, CliError> {
    let seq = read_sequence(sequence).map_err(gen_err)?;
    let img_seq = read_sequence(image).map_err(gen_err)?;
    if img_seq.length() != 1 {
        return Err(CliError::Config(format!(
            "image embedding file must hold exactly 1 row, found {}",
            img_seq.length()
        )));
    }
    let img = ImageEmbedding::new(img_seq.rows().row(0).to_vec()).map_err(gen_err)?;
    let injected = inject_image_features(&seq, &img).map_err(gen_err)?;
    ensure_parent_dir(out)?;
    write_sequence(&injected, out).map_err(gen_err)?;
    Ok(InjectSummary {
        k: seq.eos_index(),
        l: seq.length(),
        replaced: seq.length() - seq.eos_index(),
    })
}

// ---------------------------------------------------------------------------
// stdout helpers
// ---------------------------------------------------------------------------

/// Prints a value as one line of JSON on stdout.
pub fn print_json<T: Serialize>(value: &T) {
    let line = serde_json::to_string(value).expect("summary serialization cannot fail");
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{line}");
}

/// Compact training summary for stdout; free of timing so reruns print
/// identically.
#[derive(Debug, Clone, Serialize)]
pub struct TrainStdout {
    pub out: String,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub overall_accuracy: f64,
}

/// Compact ablation summary line for stdout.
#[derive(Debug, Clone, Serialize)]
pub struct AblateStdout {
    pub out: String,
    pub cells: usize,
    pub failed_cells: usize,
}
