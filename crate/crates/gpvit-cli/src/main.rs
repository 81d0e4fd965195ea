//! `gpvit` command-line harness: cost analysis, gradient checking, smoke
//! training, group-map export, and the mechanism invariant suite. Every run
//! writes a `manifest.json` describing the command, configuration, seed, and
//! produced artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gpvit::checkpoint;
use gpvit::config::{preset, ModelConfig, PRESET_NAMES};
use gpvit::cost::{emit_report, scaling_csv, ScalingKind};
use gpvit::data::SyntheticDataset;
use gpvit::gradcheck::{gradcheck, zero_head_control};
use gpvit::imageio::{read_ppm, write_pgm, write_ppm, GrayImage, RgbImage};
use gpvit::invariants::{all_passed, run_suite, SuiteOptions};
use gpvit::model::{image_token_map, Model};
use gpvit::nn::Pass;
use gpvit::train::{stats_csv, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gpvit",
    about = "Group-propagation vision transformer analysis and verification harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    /// Built-in configuration name (see `--preset list`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a TOML model configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for parameter initialization and synthetic inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Floating-point precision for model evaluation.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Directory for artifacts (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic parameter and FLOP report, plus token-count scaling curves.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Input resolution to analyze (defaults to the configured size).
        #[arg(long)]
        input: Option<usize>,
    },
    /// Finite-difference check of every parameter gradient (f64 only).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Refuse models with more parameters than this.
        #[arg(long, default_value_t = 20_000)]
        cap: usize,
        /// Maximum acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Overfit a small synthetic dataset to demonstrate trainability.
    TrainSmoke {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Samples per class (classes come from the model configuration).
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        /// Stop early once train accuracy reaches this fraction.
        #[arg(long)]
        target_accuracy: Option<f64>,
    },
    /// Render per-block group assignment maps for one input image.
    ExportGroups {
        #[command(flatten)]
        common: Common,
        /// Load weights from this checkpoint (defaults to seeded init).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input image (binary PPM); defaults to a synthetic sample.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Run the mechanism invariant suite; nonzero exit on any failure.
    Invariants {
        #[command(flatten)]
        common: Common,
        /// Corrupt the grouping-weight axis to prove the suite can fail.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// List built-in configuration names.
    Presets,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_name: String,
    config_toml: String,
    seed: u64,
    precision: String,
    out_dir: String,
    git: String,
    wall_time_ms: u128,
    artifacts: Vec<String>,
}

fn resolve_config(common: &Common) -> Result<ModelConfig> {
    match (&common.preset, &common.config) {
        (Some(name), None) => Ok(preset(name)?),
        (None, Some(path)) => Ok(ModelConfig::load(path)?),
        (None, None) => bail!("pass --preset NAME or --config FILE (see `gpvit presets`)"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

struct Run {
    out: PathBuf,
    started: Instant,
    artifacts: Vec<String>,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        std::fs::create_dir_all(&common.out)
            .with_context(|| format!("create {}", common.out.display()))?;
        Ok(Run { out: common.out.clone(), started: Instant::now(), artifacts: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("write {}", path.display()))
    }

    fn finish(self, command: &str, common: &Common, cfg: &ModelConfig) -> Result<()> {
        let manifest = RunManifest {
            command: command.into(),
            config_name: cfg.name.clone(),
            config_toml: cfg.to_toml_string()?,
            seed: common.seed,
            precision: format!("{:?}", common.precision).to_lowercase(),
            out_dir: self.out.display().to_string(),
            git: git_describe(),
            wall_time_ms: self.started.elapsed().as_millis(),
            artifacts: self.artifacts,
        };
        let path = self.out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("write {}", path.display()))
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("GPVIT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { common, input } => cmd_analyze(&common, input),
        Command::Gradcheck { common, cap, tolerance } => cmd_gradcheck(&common, cap, tolerance),
        Command::TrainSmoke { common, epochs, lr, batch_size, per_class, target_accuracy } => {
            cmd_train_smoke(&common, epochs, lr, batch_size, per_class, target_accuracy)
        }
        Command::ExportGroups { common, checkpoint, image } => {
            cmd_export_groups(&common, checkpoint.as_deref(), image.as_deref())
        }
        Command::Invariants { common, inject_fault } => cmd_invariants(&common, inject_fault),
    }
}

fn cmd_analyze(common: &Common, input: Option<usize>) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let mut run = Run::new(common)?;
    let input = input.unwrap_or(cfg.input_size);
    let report = emit_report(&cfg, input)?;
    run.write("cost_report.json", &report.to_json())?;
    run.write("cost_report.csv", &report.to_csv())?;

    let counts = [196, 784, 1568, 3136, 4096, 8192];
    let kinds = [
        ScalingKind::SelfAttn,
        ScalingKind::Window { w: cfg.window_size },
        ScalingKind::Lepe { s: cfg.strip_size },
        ScalingKind::Gp { m: 64 },
        ScalingKind::Gp { m: 32 },
        ScalingKind::Gp { m: 16 },
    ];
    run.write("scaling.csv", &scaling_csv(cfg.channels, &counts, &kinds))?;

    println!(
        "{} @ {input}px: {} params, {:.3} GFLOPs",
        cfg.name,
        report.total_params,
        report.total_flops as f64 / 1e9
    );
    run.finish("analyze", common, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(common: &Common, cap: usize, tolerance: f64) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    if common.precision != Precision::F64 {
        bail!("gradcheck requires --precision f64");
    }
    let mut run = Run::new(common)?;
    let model = Model::<f64>::build(&cfg, common.seed)?;
    let image = synthetic_image::<f64>(&cfg, common.seed);
    let report = gradcheck(&model, &image, cap)?;
    let control = zero_head_control(&model, &image)?;
    run.write("gradcheck.json", &serde_json::to_string_pretty(&report)?)?;
    for b in &report.blocks {
        println!("{:<16} {:>8} params  max rel err {:.3e}", b.block, b.params, b.max_rel_err);
    }
    println!(
        "overall max rel err {:.3e} over {} params; zero-head control {:.3e}",
        report.max_rel_err, report.total_params, control
    );
    run.finish("gradcheck", common, &cfg)?;
    if report.max_rel_err < tolerance && control < 1e-12 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck FAILED (tolerance {tolerance:.1e})");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_train_smoke(
    common: &Common,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    per_class: usize,
    target_accuracy: Option<f64>,
) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let mut run = Run::new(common)?;
    let data = SyntheticDataset::generate(cfg.num_classes, per_class, cfg.input_size, common.seed);
    let tc = TrainConfig { epochs, lr, batch_size, seed: common.seed, stop_at_accuracy: target_accuracy };
    let stats = match common.precision {
        Precision::F32 => {
            let model = Model::<f32>::build(&cfg, common.seed)?;
            let stats = train(&model, &data, &tc)?;
            checkpoint::save(&run.path("final.ckpt"), &cfg, &model.params)?;
            stats
        }
        Precision::F64 => {
            let model = Model::<f64>::build(&cfg, common.seed)?;
            let stats = train(&model, &data, &tc)?;
            checkpoint::save(&run.path("final.ckpt"), &cfg, &model.params)?;
            stats
        }
    };
    run.write("train_stats.csv", &stats_csv(&stats))?;
    let last = stats.last().expect("at least one epoch");
    println!(
        "{} epochs on {} samples: loss {:.4}, accuracy {:.1}%",
        stats.len(),
        data.len(),
        last.loss,
        100.0 * last.accuracy
    );
    run.finish("train-smoke", common, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

/// Evenly spaced hue for group `m` of `groups`.
fn group_color(m: usize, groups: usize) -> [u8; 3] {
    let h = 6.0 * m as f64 / groups.max(1) as f64;
    let sector = h.floor() as usize % 6;
    let f = ((h - h.floor()) * 255.0) as u8;
    match sector {
        0 => [255, f, 0],
        1 => [255 - f, 255, 0],
        2 => [0, 255, f],
        3 => [0, 255 - f, 255],
        4 => [f, 0, 255],
        _ => [255, 0, 255 - f],
    }
}

fn synthetic_image<E: gpvit::Scalar>(cfg: &ModelConfig, seed: u64) -> gpvit::gp_block::TokenMap<E> {
    let data = SyntheticDataset::generate(1, 1, cfg.input_size, seed);
    image_token_map(&data.samples[0].pixels, cfg.input_size, cfg.input_size)
}

fn cmd_export_groups(
    common: &Common,
    ckpt: Option<&Path>,
    image: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    if common.precision != Precision::F32 {
        bail!("export-groups runs at --precision f32");
    }
    let mut run = Run::new(common)?;
    let model = Model::<f32>::build(&cfg, common.seed)?;
    if let Some(path) = ckpt {
        checkpoint::load(path, &cfg, &model.params)?;
    }
    let input = match image {
        Some(path) => {
            let img = read_ppm(path)?;
            image_token_map(&img.to_unit_floats(), img.height, img.width)
        }
        None => synthetic_image(&cfg, common.seed),
    };
    let pass = Pass::new(false);
    let (_, assignments) = model.forward_with_groups(&pass, &input)?;
    if assignments.is_empty() {
        bail!("configuration '{}' has no group-propagation blocks", cfg.name);
    }
    for (i, asg) in assignments.iter().enumerate() {
        let (h, w) = asg.grid;
        let bins = asg.groups.max(2) - 1;
        let gray: Vec<u8> =
            asg.argmax.iter().map(|&m| ((m * 255) / bins).min(255) as u8).collect();
        write_pgm(
            &run.path(&format!("groups_{i}.pgm")),
            &GrayImage { width: w, height: h, pixels: gray },
        )?;
        let rgb: Vec<u8> = asg
            .argmax
            .iter()
            .flat_map(|&m| group_color(m, asg.groups))
            .collect();
        write_ppm(
            &run.path(&format!("groups_{i}.ppm")),
            &RgbImage { width: w, height: h, pixels: rgb },
        )?;
        let avg = asg.head_average();
        let mut csv = String::new();
        for m in 0..asg.groups {
            let row: Vec<String> = (0..asg.tokens)
                .map(|t| format!("{:.6}", avg[m * asg.tokens + t]))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        run.write(&format!("weights_{i}.csv"), &csv)?;
        println!("block {i}: {} groups over {h}x{w} tokens", asg.groups);
    }
    run.finish("export-groups", common, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_invariants(common: &Common, inject_fault: bool) -> Result<ExitCode> {
    let cfg = resolve_config(common)?;
    let mut run = Run::new(common)?;
    let results = run_suite(&cfg, common.seed, SuiteOptions { fault_softmax_axis: inject_fault })?;
    run.write("invariants.json", &serde_json::to_string_pretty(&results)?)?;
    for r in &results {
        println!("{} {:<32} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let ok = all_passed(&results);
    run.finish("invariants", common, &cfg)?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
