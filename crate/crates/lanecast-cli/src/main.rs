//! Command-line pipeline: scene generation, preprocessing, training,
//! evaluation, and single-agent prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use lanecast::augment::{augment_scene, AugmentConfig};
use lanecast::data::generate::{generate, GeneratorConfig};
use lanecast::data::{assign_split, load_scenes, save_scenes, DataError};
use lanecast::dataset::{
    build_samples, load_samples, save_samples, DatasetConfig, FilterStats, ModelSample,
};
use lanecast::metrics::MetricsError;
use lanecast::model::{
    evaluate, MapMode, Model, ModelConfig, ModelError, RegressionMode,
};
use lanecast::scene::{Scene, Split};
use lanecast::tensor::Optimizer;

const DEFAULT_SEED: u64 = 42;
const SPLIT_DIRS: [(Split, &str); 3] = [
    (Split::Train, "train"),
    (Split::Val, "val"),
    (Split::Test, "test"),
];

// -- errors and exit codes --------------------------------------------------

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => CliError::Numeric(t.to_string()),
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

// -- argument surface -------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "lanecast",
    version,
    about = "Lane-aware trajectory prediction pipeline"
)]
struct Cli {
    /// Worker threads for data preparation; defaults to available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Ar,
    Nar,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapArg {
    None,
    Occupancy,
    Lane,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes, assign splits, write them plus a manifest.
    GenSynth {
        /// Generator config as JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed; LANECAST_SEED overrides the default.
        #[arg(long, env = "LANECAST_SEED")]
        seed: Option<u64>,
    },
    /// Smooth, augment the train split, and build cached model samples.
    Preprocess {
        #[arg(long, value_name = "DIR")]
        r#in: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip rotation/turn-upsampling augmentation of the train split.
        #[arg(long)]
        no_augment: bool,
        /// Skip Kalman smoothing of observed histories.
        #[arg(long)]
        no_smooth: bool,
        /// Skip per-agent occupancy rasters (saves space; the occupancy
        /// model variant then cannot train on this dataset).
        #[arg(long)]
        no_raster: bool,
        /// Occupancy raster resolution, meters per cell.
        #[arg(long, default_value_t = 1.0)]
        raster_cell_m: f64,
        /// Degrees between rotated scene copies.
        #[arg(long, default_value_t = 15.0)]
        rotation_step: f64,
        /// Number of rotated copies; step x count must be 360.
        #[arg(long, default_value_t = 24)]
        rotation_count: usize,
        /// Copies of each turning agent per rotated scene.
        #[arg(long, default_value_t = 6)]
        turn_upsample: usize,
        /// Cumulative future turn, degrees, that counts as turning.
        #[arg(long, default_value_t = 30.0)]
        turn_threshold: f64,
    },
    /// Train a model variant; saves the best-validation-loss checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Ar)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = MapArg::Lane)]
        map: MapArg,
        /// Loss blend: alpha * mse + (1 - alpha) * ce.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        /// Per-step multiplicative learning-rate decay.
        #[arg(long, default_value_t = 0.9999)]
        decay: f64,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 2)]
        enc_layers: usize,
        #[arg(long, default_value_t = 2)]
        dec_layers: usize,
        #[arg(long, default_value_t = 128)]
        ff_dim: usize,
        #[arg(long, env = "LANECAST_SEED")]
        seed: Option<u64>,
        /// Cap on training samples per epoch, for quick runs.
        #[arg(long)]
        max_train_samples: Option<usize>,
    },
    /// Evaluate a checkpoint on one split and write an ADE/FDE CSV report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Predict one agent in one scene file; writes candidates as JSON.
    Predict {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn dir(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("config error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        // A second initialization (e.g. in tests) is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenSynth { config, out, seed } => gen_synth(config.as_deref(), &out, seed),
        Command::Preprocess {
            r#in,
            out,
            no_augment,
            no_smooth,
            no_raster,
            raster_cell_m,
            rotation_step,
            rotation_count,
            turn_upsample,
            turn_threshold,
        } => {
            let augment = if no_augment {
                None
            } else {
                Some(AugmentConfig {
                    rotation_step_deg: rotation_step,
                    rotation_count,
                    turn_upsample_factor: turn_upsample,
                    turn_threshold_deg: turn_threshold,
                })
            };
            if raster_cell_m <= 0.0 {
                return Err(CliError::Config("--raster-cell-m must be positive".into()));
            }
            let dataset = DatasetConfig {
                smooth_history: !no_smooth,
                with_raster: !no_raster,
                raster_cell_m,
                ..DatasetConfig::default()
            };
            preprocess(&r#in, &out, augment, &dataset)
        }
        Command::Train {
            data,
            mode,
            map,
            alpha,
            epochs,
            out,
            batch_size,
            lr,
            decay,
            d_model,
            n_heads,
            enc_layers,
            dec_layers,
            ff_dim,
            seed,
            max_train_samples,
        } => {
            let cfg = ModelConfig {
                d_model,
                n_heads,
                enc_layers,
                dec_layers,
                ff_dim,
                map_mode: match map {
                    MapArg::None => MapMode::None,
                    MapArg::Occupancy => MapMode::Occupancy,
                    MapArg::Lane => MapMode::Lane,
                },
                regression_mode: match mode {
                    ModeArg::Ar => RegressionMode::Ar,
                    ModeArg::Nar => RegressionMode::Nar,
                },
                alpha,
                seed: seed.unwrap_or(DEFAULT_SEED),
                ..ModelConfig::default()
            };
            train(
                &data,
                cfg,
                epochs,
                &out,
                batch_size,
                lr,
                decay,
                max_train_samples,
            )
        }
        Command::Eval {
            data,
            ckpt,
            report,
            split,
        } => eval(&data, &ckpt, &report, split),
        Command::Predict {
            scene,
            agent,
            ckpt,
            out,
        } => predict(&scene, &agent, &ckpt, &out),
    }
}

// -- gen-synth --------------------------------------------------------------

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    seed: u64,
    config: &'a GeneratorConfig,
    scene_counts: [usize; 3],
}

fn gen_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !cfg.is_valid() {
        return Err(CliError::Config("invalid generator config".into()));
    }

    let mut scenes = generate(&cfg);
    assign_split(&mut scenes, cfg.seed)?;

    let mut counts = [0usize; 3];
    for (i, (split, dir)) in SPLIT_DIRS.iter().enumerate() {
        let subset: Vec<Scene> = scenes
            .iter()
            .filter(|s| s.split_tag == Some(*split))
            .cloned()
            .collect();
        counts[i] = subset.len();
        save_scenes(&subset, &out.join(dir))?;
    }

    let manifest = Manifest {
        schema_version: lanecast::data::SCHEMA_VERSION,
        seed: cfg.seed,
        config: &cfg,
        scene_counts: counts,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    println!(
        "wrote {} scenes (train {}, val {}, test {}) to {}",
        scenes.len(),
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

// -- preprocess -------------------------------------------------------------

fn preprocess(
    input: &Path,
    out: &Path,
    augment: Option<AugmentConfig>,
    dataset: &DatasetConfig,
) -> Result<(), CliError> {
    if let Some(a) = &augment {
        if !a.is_valid() {
            return Err(CliError::Config(
                "rotation step x count must cover 360 degrees".into(),
            ));
        }
    }
    fs::create_dir_all(out)?;
    for (split, dir) in SPLIT_DIRS {
        let mut scenes = load_scenes(&input.join(dir))?;
        for s in &mut scenes {
            s.split_tag = Some(split);
        }
        if split == Split::Train {
            if let Some(a) = &augment {
                scenes = scenes
                    .par_iter()
                    .flat_map_iter(|s| augment_scene(s, a))
                    .collect();
            }
        }
        // Per-scene parallelism with an in-order merge keeps the output
        // independent of thread count.
        let per_scene: Vec<(Vec<ModelSample>, FilterStats)> = scenes
            .par_iter()
            .map(|s| build_samples(std::slice::from_ref(s), dataset))
            .collect();
        let mut samples = Vec::new();
        let mut stats = FilterStats::default();
        for (mut s, st) in per_scene {
            samples.append(&mut s);
            stats.total += st.total;
            stats.kept += st.kept;
            stats.stationary += st.stationary;
            stats.no_lane += st.no_lane;
            stats.wrong_direction += st.wrong_direction;
            stats.extension_failed += st.extension_failed;
        }
        save_samples(&samples, &out.join(format!("{dir}.samples.json")))?;
        println!(
            "{dir}: kept {}/{} agents (stationary {}, wrong-direction {}, no-lane {}, extension-failed {})",
            stats.kept,
            stats.total,
            stats.stationary,
            stats.wrong_direction,
            stats.no_lane,
            stats.extension_failed
        );
    }
    Ok(())
}

// -- train ------------------------------------------------------------------

fn load_split_samples(data: &Path, dir: &str) -> Result<Vec<ModelSample>, CliError> {
    Ok(load_samples(&data.join(format!("{dir}.samples.json")))?)
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    cfg: ModelConfig,
    epochs: usize,
    out: &Path,
    batch_size: usize,
    lr: f64,
    decay: f64,
    max_train_samples: Option<usize>,
) -> Result<(), CliError> {
    if batch_size == 0 {
        return Err(CliError::Config("--batch-size must be >= 1".into()));
    }
    let mut train_samples = load_split_samples(data, "train")?;
    if let Some(cap) = max_train_samples {
        train_samples.truncate(cap);
    }
    let val_samples = load_split_samples(data, "val")?;
    if train_samples.is_empty() {
        return Err(CliError::Data("train split has no samples".into()));
    }

    let model = Model::new(cfg)?;
    let mut optimizer = Optimizer::new(lr, decay);
    let mut best_val = f64::INFINITY;
    model.save(out)?; // epoch 0 baseline; overwritten on improvement

    for epoch in 0..epochs {
        let shuffle_seed = model.cfg.seed.wrapping_add(epoch as u64);
        let train_loss =
            model.train_epoch(&train_samples, &mut optimizer, batch_size, shuffle_seed)?;
        if !train_loss.total.is_finite() {
            return Err(CliError::Numeric(format!(
                "training diverged at epoch {epoch}: loss {}",
                train_loss.total
            )));
        }

        let mut val_loss = 0.0;
        for s in &val_samples {
            val_loss += model.compute_loss(s)?.1.total;
        }
        val_loss /= val_samples.len().max(1) as f64;
        let val_fde6 = if val_samples.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, &val_samples)?.fde_at(6)
        };

        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            model.save(out)?;
        }
        println!(
            "epoch {epoch}: train {:.4} (mse {:.4}, ce {:.4}) | val {:.4} | val FDE@6s {:.3}{}",
            train_loss.total,
            train_loss.mse,
            train_loss.ce,
            val_loss,
            val_fde6,
            if improved { " *" } else { "" }
        );
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

// -- eval -------------------------------------------------------------------

fn variant_name(cfg: &ModelConfig) -> String {
    let map = match cfg.map_mode {
        MapMode::None => "none",
        MapMode::Occupancy => "occupancy",
        MapMode::Lane => "lane",
    };
    let mode = match cfg.regression_mode {
        RegressionMode::Ar => "ar",
        RegressionMode::Nar => "nar",
    };
    format!("{map}-{mode}")
}

fn eval(data: &Path, ckpt: &Path, report: &Path, split: SplitArg) -> Result<(), CliError> {
    let samples = load_split_samples(data, split.dir())?;
    let model = Model::load(ckpt)?;
    let summary = evaluate(&model, &samples)?;
    let variant = variant_name(&model.cfg);
    let csv = format!(
        "{}{}",
        lanecast::metrics::HorizonReport::csv_header(),
        summary.csv_rows(&variant)
    );
    fs::write(report, &csv)?;
    print!("{csv}");
    Ok(())
}

// -- predict ----------------------------------------------------------------

#[derive(Serialize)]
struct PredictionFile {
    scene_id: String,
    agent_id: String,
    mask: [bool; 3],
    probabilities: [f64; 3],
    selected: usize,
    /// Global-frame candidate trajectories, slot order left/middle/right;
    /// masked slots are null.
    candidates: [Option<Vec<(f64, f64)>>; 3],
    selected_trajectory: Vec<(f64, f64)>,
}

fn predict(scene: &Path, agent: &str, ckpt: &Path, out: &Path) -> Result<(), CliError> {
    let scene = lanecast::data::load_scene(scene)?;
    let model = Model::load(ckpt)?;
    let (samples, _) = build_samples(std::slice::from_ref(&scene), &DatasetConfig::default());
    let sample = samples
        .iter()
        .find(|s| s.agent_id == agent)
        .ok_or_else(|| {
            CliError::Data(format!(
                "agent {agent} not found in scene {} (or filtered out)",
                scene.scene_id
            ))
        })?;
    let output = model.predict(sample)?;

    let to_global = |rel: &Vec<lanecast::Point2>| {
        rel.iter()
            .map(|p| {
                let g = lanecast::lane::from_agent_frame(p, &sample.origin, &sample.heading);
                (g.x, g.y)
            })
            .collect::<Vec<(f64, f64)>>()
    };
    let candidates = [
        output.trajectories_rel[0].as_ref().map(to_global),
        output.trajectories_rel[1].as_ref().map(to_global),
        output.trajectories_rel[2].as_ref().map(to_global),
    ];
    let file = PredictionFile {
        scene_id: sample.scene_id.clone(),
        agent_id: sample.agent_id.clone(),
        mask: sample.lane_input.mask.as_array(),
        probabilities: output.lane_probs,
        selected: output.selected,
        candidates,
        selected_trajectory: output.selected_global.iter().map(|p| (p.x, p.y)).collect(),
    };
    fs::write(
        out,
        serde_json::to_string_pretty(&file).expect("prediction serializes") + "\n",
    )?;
    println!(
        "agent {} in {}: selected lane slot {} (p = {:.3})",
        file.agent_id, file.scene_id, file.selected, file.probabilities[file.selected]
    );
    Ok(())
}
