//! `tdn` command-line frontend.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 budget constraint failed,
//! 3 numeric failure (divergence, non-finite values, undefined score).

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{load_config, AppConfig, ConfigError, DataSettings, SearchSettings};

use crate::archdsl::{parse_arch, serialize_arch, ArchGraph, TensorShape};
use crate::complexity::{analyze, compare_reports, ComplexityReport};
use crate::data::{
    class_from_name, load_gray, load_mask, load_neu, mean_std, split_neu, synth, write_dataset, DatasetSplit,
    LabeledImage, SynthConfig, CLASS_NAMES,
};
use crate::explain::{
    dilate, mass_in_mask, occlusion_map, render_overlay, Baseline, ExplainError, ExplainSidecar, OcclusionConfig,
};
use crate::genesis::{search, GenesisError, ProxyEval, SearchConfig, SearchSpace};
use crate::objective::{budget_deviation, indicator, netscore, Metrics, ObjectiveError};
use crate::runtime::weights::{load_weights, save_weights};
use crate::runtime::{bench, ExecutionPlan, RuntimeError};
use crate::train::{evaluate, fit, ModelParams, TrainError};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Constraint(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Constraint(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Constraint(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        usage(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => usage(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence => CliError::Numeric(e.to_string()),
            TrainError::Runtime(r) => r.into(),
            _ => usage(e),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Runtime(r) => r.into(),
            _ => usage(e),
        }
    }
}

impl From<GenesisError> for CliError {
    fn from(e: GenesisError) -> Self {
        match e {
            GenesisError::NoFeasible => CliError::Constraint(e.to_string()),
            GenesisError::Train(t) => t.into(),
            GenesisError::Objective(o) => o.into(),
            _ => usage(e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tdn", version, about = "Compact defect-inspection CNN toolkit")]
pub struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Complexity report of a .tdn graph or a report JSON
    Analyze {
        input: PathBuf,
        /// Second graph or report; prints size and compute ratios input/compare
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Accuracy in percent; adds the objective score
        #[arg(long)]
        acc: Option<f64>,
        /// Write the report JSON here instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP budget gate (exit 2 when outside the budget)
    Check {
        input: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Generator/inquisitor architecture search
    Search {
        #[arg(long, default_value = "search_out")]
        out: PathBuf,
    },
    /// Train a graph; writes model.tdnw and curves.csv
    Train {
        arch: PathBuf,
        /// `synthetic` or a NEU-format directory
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Test accuracy and confusion matrix
    Eval {
        arch: PathBuf,
        weights: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference latency; weights default to a seeded initialisation
    Bench {
        arch: PathBuf,
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value = "bench.json")]
        out: PathBuf,
    },
    /// Occlusion attribution for one image
    Explain {
        arch: PathBuf,
        weights: PathBuf,
        image: PathBuf,
        /// Defaults to the predicted class
        #[arg(long)]
        target: Option<usize>,
        /// Ground-truth defect mask; adds mass_in_mask to the sidecar
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        /// `dataset-mean`, `image-mean` or a constant pixel value
        #[arg(long, default_value = "dataset-mean")]
        baseline: String,
        /// Mean pixel value used by the dataset-mean baseline
        #[arg(long)]
        dataset_mean: Option<f32>,
        #[arg(long, default_value_t = 5)]
        dilation: usize,
        #[arg(long, default_value_t = 0.1)]
        top_fraction: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render a synthetic defect dataset as PGM files
    Synth {
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "synthetic_data")]
        out: PathBuf,
    },
}

/// Complexity numbers read from JSON; fields other than params and flops may
/// be omitted.
#[derive(Debug, Deserialize)]
struct LooseReport {
    params: u64,
    flops: u64,
    #[serde(default)]
    macs: u64,
    #[serde(default)]
    peak_activation_bytes: u64,
    #[serde(default)]
    per_layer: Vec<crate::complexity::LayerCost>,
}

fn read_graph(path: &Path) -> Result<ArchGraph, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let graph = parse_arch(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    graph.infer_shapes().map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_report(path: &Path) -> Result<ComplexityReport, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let r: LooseReport = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        return Ok(ComplexityReport {
            params: r.params,
            macs: r.macs,
            flops: r.flops,
            peak_activation_bytes: r.peak_activation_bytes,
            per_layer: r.per_layer,
        });
    }
    analyze(&read_graph(path)?).map_err(usage)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn load_data(source: &str, input: TensorShape, cfg: &AppConfig, err: &mut impl Write) -> Result<DatasetSplit, CliError> {
    if input.channels != 1 || input.height != input.width {
        return Err(usage(format!("data needs a square single-channel input, graph takes {input:?}")));
    }
    if source == "synthetic" {
        let sc = SynthConfig { per_class: cfg.data.per_class, size: input.height, seed: cfg.data.seed };
        return synth(&sc).map_err(usage);
    }
    let report = load_neu(Path::new(source), input.height, input.width).map_err(usage)?;
    for f in &report.failures {
        writeln!(err, "skipped: {f}")?;
    }
    split_neu(report.images).map_err(usage)
}

fn plan_for(graph: &ArchGraph, params: &ModelParams, cfg: &AppConfig) -> Result<ExecutionPlan, CliError> {
    Ok(ExecutionPlan::build(graph, params, &cfg.runtime)?)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    accuracy_pct: f64,
    class_names: &'a [&'a str],
    confusion: Vec<Vec<u64>>,
}

/// Runs one parsed command, writing human-readable output to `out` and
/// diagnostics to `err`.
pub fn execute(cli: Cli, out: &mut impl Write, err: &mut impl Write) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Analyze { input, compare, acc, out: path } => {
            let report = read_report(&input)?;
            match path {
                Some(p) => fs::write(p, json(&report))?,
                None => writeln!(out, "{}", json(&report))?,
            }
            if let Some(other) = compare {
                let r = compare_reports(&report, &read_report(&other)?).map_err(usage)?;
                writeln!(out, "params ratio: {} ({:.2})", r.params_display, r.params_ratio)?;
                writeln!(out, "flops ratio: {} ({:.2})", r.flops_display, r.flops_ratio)?;
            }
            if let Some(a) = acc {
                let score = netscore(&Metrics::from_counts(a, report.params, report.flops), &cfg.objective)?;
                writeln!(out, "netscore: {score:.2}")?;
            }
        }
        Command::Check { input, budget, tol } => {
            let mut o = cfg.objective;
            o.budget_flops = budget.unwrap_or(o.budget_flops);
            o.tolerance = tol.unwrap_or(o.tolerance);
            o.validate().map_err(usage)?;
            let flops = read_report(&input)?.flops;
            let pass = indicator(flops, &o);
            let line = format!(
                "flops {flops} budget {} tolerance {:.2}% deviation {:.2}%: {}",
                o.budget_flops,
                o.tolerance * 100.0,
                budget_deviation(flops, &o) * 100.0,
                if pass { "pass" } else { "fail" }
            );
            writeln!(out, "{line}")?;
            if !pass {
                return Err(CliError::Constraint(line));
            }
        }
        Command::Search { out: dir } => {
            let s = &cfg.search;
            let input = TensorShape::new(s.input_size, s.input_size, 1);
            let mut space = SearchSpace::new(input);
            space.stages = (s.stages_min, s.stages_max);
            let split = if cfg.data.source == "synthetic" {
                synth(&SynthConfig { per_class: s.proxy_per_class, size: s.input_size, seed: cfg.data.seed }).map_err(usage)?
            } else {
                load_data(&cfg.data.source, input, &cfg, err)?
            };
            let train = crate::train::TrainConfig {
                epochs: s.proxy_epochs,
                batch_size: s.proxy_batch_size,
                learning_rate: s.proxy_learning_rate,
                seed: s.seed,
                ..cfg.train.clone()
            };
            let sc = SearchConfig {
                space,
                objective: cfg.objective,
                population: s.population,
                generations: s.generations,
                elite_frac: s.elite_frac,
                alpha: s.alpha,
                floor: s.floor,
                master_seed: s.seed,
                eval: ProxyEval { split, train },
                parallel: s.parallel,
            };
            let result = search(&sc)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("best.tdn"), serialize_arch(&result.best.arch))?;
            fs::write(dir.join("history.json"), json(&result.history))?;
            fs::write(dir.join("best.json"), json(&result.best.report))?;
            writeln!(
                out,
                "best score {:.2} flops {} params {} ({} candidates trained)",
                result.best.rank_score(),
                result.best.report.flops,
                result.best.report.params,
                result.evaluated
            )?;
        }
        Command::Train { arch, data, out: dir, epochs, seed } => {
            let graph = read_graph(&arch)?;
            let split = load_data(data.as_deref().unwrap_or(&cfg.data.source), graph.input_shape(), &cfg, err)?;
            let mut tc = cfg.train.clone();
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.seed = seed.unwrap_or(tc.seed);
            let result = fit(&graph, &split, &tc)?;
            fs::create_dir_all(&dir)?;
            save_weights(&dir.join("model.tdnw"), &graph, &result.params)?;
            result.write_curve_csv(&dir.join("curves.csv"))?;
            writeln!(out, "best test accuracy {:.2}% at epoch {}", result.best_accuracy, result.best_epoch)?;
            if result.diverged {
                return Err(CliError::Numeric("training diverged (non-finite loss); kept the best checkpoint".into()));
            }
        }
        Command::Eval { arch, weights, data, out: path } => {
            let graph = read_graph(&arch)?;
            let params = load_weights(&weights, &graph)?;
            let split = load_data(data.as_deref().unwrap_or(&cfg.data.source), graph.input_shape(), &cfg, err)?;
            let e = evaluate(&graph, &params, &split.test)?;
            let report = EvalReport { accuracy_pct: e.accuracy_pct, class_names: &CLASS_NAMES, confusion: e.confusion };
            writeln!(out, "accuracy {:.2}%", report.accuracy_pct)?;
            for (name, row) in CLASS_NAMES.iter().zip(&report.confusion) {
                writeln!(out, "{name:>16} {row:?}")?;
            }
            if let Some(p) = path {
                fs::write(p, json(&report))?;
            }
        }
        Command::Bench { arch, weights, batch, iters, warmup, out: path } => {
            let graph = read_graph(&arch)?;
            let params = match weights {
                Some(w) => load_weights(&w, &graph)?,
                None => ModelParams::init(&graph, cfg.train.seed).map_err(usage)?,
            };
            let report = bench(&plan_for(&graph, &params, &cfg)?, batch, warmup, iters)?;
            fs::write(&path, json(&report))?;
            writeln!(
                out,
                "median {:.4} s per batch of {batch}, {:.3} ms per image, {:.1} images/s",
                report.median,
                report.per_image_seconds * 1e3,
                report.throughput
            )?;
        }
        Command::Explain {
            arch,
            weights,
            image,
            target,
            mask,
            patch,
            stride,
            baseline,
            dataset_mean,
            dilation,
            top_fraction,
            out: dir,
        } => {
            let graph = read_graph(&arch)?;
            let params = load_weights(&weights, &graph)?;
            let plan = plan_for(&graph, &params, &cfg)?;
            let shape = graph.input_shape();
            let pixels = load_gray(&image, shape.height, shape.width).map_err(usage)?;
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let img = LabeledImage {
                pixels,
                height: shape.height,
                width: shape.width,
                label: class_from_name(&stem).unwrap_or(0),
                source_id: stem.clone(),
                mask: None,
            };
            let baseline = match baseline.as_str() {
                "dataset-mean" => Baseline::DatasetMean(dataset_mean.ok_or_else(|| {
                    usage("the dataset-mean baseline needs --dataset-mean (or use --baseline image-mean)")
                })?),
                "image-mean" => Baseline::ImageMean,
                v => Baseline::Constant(v.parse().map_err(|_| usage(format!("bad baseline `{v}`")))?),
            };
            let target = match target {
                Some(t) => t,
                None => {
                    let logits = plan.infer_logits(&crate::runtime::Tensor::new(
                        [1, img.height, img.width, 1],
                        img.pixels.clone(),
                    ))?;
                    crate::train::argmax(&logits)
                }
            };
            let map = occlusion_map(&plan, &img, target, &OcclusionConfig { patch, stride, baseline })?;
            let mass = match mask {
                Some(m) => {
                    let m = load_mask(&m, img.height, img.width).map_err(usage)?;
                    Some(mass_in_mask(&map, &dilate(&m, img.height, img.width, dilation), top_fraction)?)
                }
                None => None,
            };
            fs::create_dir_all(&dir)?;
            let explain_path = dir.join(format!("{stem}.explain.pgm"));
            render_overlay(&map, &img, &dir.join(format!("{stem}.input.pgm")), &explain_path)?;
            fs::write(dir.join(format!("{stem}.explain.json")), json(&ExplainSidecar::new(&map, mass)))?;
            writeln!(out, "target {target} ({}) base logit {:.4}", CLASS_NAMES.get(target).unwrap_or(&"?"), map.base_score)?;
            if let Some(m) = mass {
                writeln!(out, "mass in mask {m:.3}")?;
            }
        }
        Command::Synth { per_class, size, seed, out: dir } => {
            let split = synth(&SynthConfig { per_class, size, seed }).map_err(usage)?;
            write_dataset(&dir, &split).map_err(usage)?;
            let (mean, std) = mean_std(&split.train).map_err(usage)?;
            writeln!(
                out,
                "wrote {} train and {} test images to {} (train mean {mean:.4}, std {std:.4})",
                split.train.len(),
                split.test.len(),
                dir.display()
            )?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
