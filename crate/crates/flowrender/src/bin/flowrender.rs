//! Command-line front end: synthetic dataset generation, two-phase
//! training, re-enactment, and the evaluation battery.
//!
//! Exit codes: 0 success, 1 I/O, 2 validation/config, 3 numerical failure.

use clap::{Parser, Subcommand, ValueEnum};
use flowrender::datamodel::io::{
    load_dataset, load_frame_png, load_mask_png, load_sequence, save_dataset, save_frame_png,
};
use flowrender::datamodel::synth::make_synthetic_dataset;
use flowrender::error::{FlowError, Result};
use flowrender::losses::PerceptualFeatureExtractor;
use flowrender::metrics::{evaluate, write_csv, EvalMode, EvalOptions, PooledPhiEmbedder};
use flowrender::pipeline::{frame_filename, triptych, ModelBundle};
use flowrender::training::{run_training, PhaseSelect, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "flowrender", version, about = "One-shot face re-enactment via dense 3D feature-space flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "self")]
    SelfId,
    Cross,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic face dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Defaults to FLOWRENDERER_SEED or 0.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train per a TOML config, one or both phases.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Animate a source portrait with a driving sequence's motion.
    Reenact {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        source_mask: PathBuf,
        /// A sequence directory (frames/, masks/, params.jsonl, identity.json).
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write source | driving | output strips.
        #[arg(long, default_value_t = false)]
        triptych: bool,
    },
    /// Run the metric battery over a dataset and write a CSV report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "self")]
        mode: ModeArg,
        #[arg(long)]
        report: PathBuf,
        /// Pairing/protocol seed; defaults to FLOWRENDERER_SEED or 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Cap driving frames per sequence (0 = all).
        #[arg(long, default_value_t = 0)]
        max_frames: usize,
    },
}

fn env_seed() -> u64 {
    std::env::var("FLOWRENDERER_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn write_run_json(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FlowError::io(dir, e))?;
    let run = serde_json::json!({
        "command": command,
        "seed": seed,
        "build": env!("FLOWRENDER_BUILD"),
        "config": config,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run).expect("json"))
        .map_err(|e| FlowError::io(&path, e))
}

fn cmd_synth(out: &Path, sequences: usize, frames: usize, resolution: usize, seed: u64) -> Result<()> {
    if !resolution.is_power_of_two() || resolution % 32 != 0 {
        return Err(FlowError::validation(format!(
            "resolution {resolution} must be a power of two divisible by 32"
        )));
    }
    let dataset = make_synthetic_dataset(seed, sequences, frames, resolution)?;
    save_dataset(&dataset, out)?;
    write_run_json(
        out,
        "synth",
        seed,
        serde_json::json!({
            "out": out, "sequences": sequences, "frames": frames, "resolution": resolution,
        }),
    )?;
    println!(
        "wrote {sequences} sequences x {frames} frames at {resolution}px to {}",
        out.display()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, phase: PhaseArg, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::from_toml_file(config_path)?;
    let select = match phase {
        PhaseArg::One => PhaseSelect::One,
        PhaseArg::Two => PhaseSelect::Two,
        PhaseArg::Both => PhaseSelect::Both,
    };
    write_run_json(
        &cfg.out_dir.clone(),
        "train",
        cfg.seed,
        serde_json::to_value(&cfg).expect("config serializes"),
    )?;
    let outcome = run_training(&cfg, select, resume)?;
    println!(
        "trained {} epochs; checkpoint {}; losses {}",
        outcome.epochs_run,
        outcome.checkpoint.display(),
        outcome.loss_csv.display()
    );
    Ok(())
}

/// PNG writer for non-square tensors like triptych strips.
fn save_rgb_png(rgb: &flowrender::Tensor, path: &Path) -> Result<()> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let hw = h * w;
    let d = rgb.data();
    let mut bytes = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push((d[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    img.save(path)
        .map_err(|e| FlowError::Image { path: path.to_path_buf(), message: e.to_string() })
}

fn cmd_reenact(
    ckpt: &Path,
    source: &Path,
    source_mask: &Path,
    driving_dir: &Path,
    out: &Path,
    with_triptych: bool,
) -> Result<()> {
    let (bundle, _) = ModelBundle::load(ckpt)?;
    let src = load_frame_png(source)?;
    let mask = load_mask_png(source_mask)?;
    if src.resolution() != bundle.config.resolution || mask.resolution() != src.resolution() {
        return Err(FlowError::validation(format!(
            "source is {}px (mask {}px) but the checkpoint wants {}px",
            src.resolution(),
            mask.resolution(),
            bundle.config.resolution
        )));
    }
    let driving = load_sequence(driving_dir)?;
    if driving.resolution() != bundle.config.resolution {
        return Err(FlowError::validation(format!(
            "driving frames are {}px but the checkpoint wants {}px",
            driving.resolution(),
            bundle.config.resolution
        )));
    }
    let outputs = bundle.reenact_sequence(&src, &mask, &driving, bundle.config.window_radius)?;
    std::fs::create_dir_all(out).map_err(|e| FlowError::io(out, e))?;
    for (i, frame) in outputs.iter().enumerate() {
        save_frame_png(frame, &out.join(frame_filename(i)))?;
    }
    if with_triptych {
        let tdir = out.join("triptych");
        std::fs::create_dir_all(&tdir).map_err(|e| FlowError::io(&tdir, e))?;
        for (i, frame) in outputs.iter().enumerate() {
            let strip = triptych(&src, &driving.frames[i], frame)?;
            save_rgb_png(&strip, &tdir.join(frame_filename(i)))?;
        }
    }
    write_run_json(
        out,
        "reenact",
        0,
        serde_json::json!({
            "ckpt": ckpt, "source": source, "source_mask": source_mask,
            "driving": driving_dir, "frames": outputs.len(),
            "model": serde_json::to_value(&bundle.config).expect("config serializes"),
        }),
    )?;
    println!("wrote {} frames to {}", outputs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(
    ckpt: &Path,
    data: &Path,
    mode: ModeArg,
    report: &Path,
    seed: u64,
    max_frames: usize,
) -> Result<()> {
    let (bundle, _) = ModelBundle::load(ckpt)?;
    let dataset = load_dataset(data)?;
    let mode = match mode {
        ModeArg::SelfId => EvalMode::SelfId,
        ModeArg::Cross => EvalMode::CrossId,
    };
    let embedder = PooledPhiEmbedder::new(PerceptualFeatureExtractor::from_config(&bundle.config));
    let opts = EvalOptions { mode, seed, max_frames };
    let result = evaluate(&bundle, &dataset, &embedder, &opts)?;
    write_csv(&result, report)?;
    let run_dir = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_run_json(
        run_dir,
        "evaluate",
        seed,
        serde_json::json!({
            "ckpt": ckpt, "data": data, "mode": result.mode.label(),
            "report": report, "max_frames": max_frames,
            "model": serde_json::to_value(&bundle.config).expect("config serializes"),
        }),
    )?;
    println!(
        "evaluated {} rows ({} mode); summary fid {:.4} psnr {:.2}; report {}",
        result.rows.len(),
        result.mode.label(),
        result.summary.fid,
        result.summary.psnr,
        report.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, sequences, frames, resolution, seed } => {
            cmd_synth(&out, sequences, frames, resolution, seed.unwrap_or_else(env_seed))
        }
        Command::Train { config, phase, resume } => cmd_train(&config, phase, resume.as_deref()),
        Command::Reenact { ckpt, source, source_mask, driving, out, triptych } => {
            cmd_reenact(&ckpt, &source, &source_mask, &driving, &out, triptych)
        }
        Command::Evaluate { ckpt, data, mode, report, seed, max_frames } => {
            cmd_evaluate(&ckpt, &data, mode, &report, seed.unwrap_or_else(env_seed), max_frames)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
