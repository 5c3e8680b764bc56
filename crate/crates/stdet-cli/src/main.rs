//! `stdet`: synthetic scene generation, training, inference, evaluation
//! and ablation studies for the scene-text detection pipeline.

mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stdet_core::ablate;
use stdet_core::gradcheck;
use stdet_core::backbone::{count_params_flops, BackboneConfig, Version};
use stdet_core::eval::{bucketed_report, impulse_noise, match_detections, ImageMatches};
use stdet_core::io::{
    load_gray_png, save_gray_png, write_jsonl, write_overlay_svg, Entry, Record,
};
use stdet_core::pipeline::{infer, train, Model, TrainConfig};
use stdet_core::profile::Profile;
use stdet_core::synth::make_dataset;

#[derive(Parser)]
#[command(name = "stdet", version, about = "Scene text detection: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PNG scenes + ground truth).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Detect text instances in one PNG image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write detections as one JSONL record.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an SVG overlay (rough, center, refined layers).
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a model against a dataset's ground truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Impulse-noise fraction applied to inputs before inference.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-image match records to this JSON file.
        #[arg(long)]
        matches: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Corrupt a PNG with salt-and-pepper noise.
    Noise {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a train/eval ablation study.
    Ablate {
        #[arg(long, value_enum)]
        study: Study,
        /// Study results are written here as JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        train_scenes: usize,
        #[arg(long, default_value_t = 30)]
        eval_scenes: usize,
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
        #[arg(long)]
        json: bool,
    },
    /// Check analytic gradients against central differences, per op.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long)]
        json: bool,
    },
    /// Parameter and multiply-accumulate accounting per layer.
    ArchReport {
        #[arg(long, value_enum, default_value_t = VersionArg::V3)]
        version: VersionArg,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        stem: usize,
        /// Square input extent.
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Summarize all four depth presets instead of one table.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Study {
    Shuffle,
    Noise,
    Nsweep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VersionArg {
    V1,
    V2,
    V3,
    V4,
}

impl From<VersionArg> for Version {
    fn from(v: VersionArg) -> Version {
        match v {
            VersionArg::V1 => Version::V1,
            VersionArg::V2 => Version::V2,
            VersionArg::V3 => Version::V3,
            VersionArg::V4 => Version::V4,
        }
    }
}

fn load_profile(path: &Option<PathBuf>) -> Result<Profile> {
    match path {
        Some(p) => Profile::load(p).with_context(|| format!("loading profile {}", p.display())),
        None => Ok(Profile::toy()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            count,
            profile,
            seed,
            width,
            height,
            json,
        } => {
            let p = load_profile(&profile)?;
            let mut spec = p.scene;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(w) = width {
                spec.width = w;
            }
            if let Some(h) = height {
                spec.height = h;
            }
            let manifest = make_dataset(&spec, count, &out)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&manifest)?);
            } else {
                println!(
                    "wrote {} scenes ({}x{}, seed {}) to {}",
                    manifest.images.len(),
                    spec.width,
                    spec.height,
                    spec.seed,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Train {
            data,
            out,
            profile,
            epochs,
            seed,
            json,
        } => {
            let p = load_profile(&profile)?;
            let scenes = data::load_dataset(&data)?;
            if scenes.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let samples = data::to_samples(&scenes);
            let seed = seed.unwrap_or(p.train.seed);
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(p.train.epochs),
                seed,
                ..p.train.clone()
            };
            let mut model = Model::new(p.model.clone(), seed)?;
            train(&mut model, &samples, &cfg, |s| {
                if json {
                    println!("{}", serde_json::to_string(s).expect("epoch stats"));
                } else {
                    println!(
                        "epoch {:>3}  lr {:.5}  total {:.4}  cls {:.4}  dist {:.4}  orient {:.4}  embed {:.4}  refine {:.4}",
                        s.epoch, s.lr, s.total, s.cls, s.dist, s.orient, s.embed, s.refine
                    );
                }
            })?;
            model.save(&out)?;
            p.save(&out.join("profile.toml"))?;
            if !json {
                println!(
                    "saved model ({} parameters) to {}",
                    model.store.total_values(),
                    out.display()
                );
            }
            Ok(())
        }
        Command::Infer {
            model,
            image,
            out,
            overlay,
            json,
        } => {
            let m = Model::load(&model)?;
            let (pixels, height, width) = load_gray_png(&image)?;
            let infer_cfg = infer_config_for(&model)?;
            let result = infer(&m, &pixels, height, width, &infer_cfg)?;
            let image_id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".to_string());
            let record = Record {
                image_id,
                detections: result
                    .detections
                    .iter()
                    .map(|d| Entry::from_polygon(&d.polygon, Some(d.score)))
                    .collect(),
            };
            if let Some(path) = &out {
                write_jsonl(path, std::slice::from_ref(&record))?;
            }
            if let Some(path) = &overlay {
                let png = std::fs::read(&image)?;
                write_overlay_svg(path, width, height, Some(&png), &result.instances)?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&record)?);
            } else {
                println!("{} detections", record.detections.len());
                for (i, d) in result.detections.iter().enumerate() {
                    println!(
                        "  #{i}: score {:.3}, area {:.0} px",
                        d.score,
                        d.polygon.area()
                    );
                }
            }
            Ok(())
        }
        Command::Eval {
            model,
            data,
            iou,
            noise,
            seed,
            matches,
            json,
        } => {
            let m = Model::load(&model)?;
            let infer_cfg = infer_config_for(&model)?;
            let scenes = data::load_dataset(&data)?;
            let mut all: Vec<ImageMatches> = Vec::with_capacity(scenes.len());
            for scene in &scenes {
                let mut pixels = scene.pixels.clone();
                if let Some(p) = noise {
                    impulse_noise(&mut pixels, scene.width, scene.height, 1, p, seed);
                }
                let result = infer(&m, &pixels, scene.height, scene.width, &infer_cfg)?;
                all.push(match_detections(
                    &scene.image_id,
                    &result.detections,
                    &scene.polygons,
                    iou,
                ));
            }
            let report = bucketed_report(&all);
            if let Some(path) = &matches {
                std::fs::write(path, serde_json::to_string_pretty(&all)?)?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.table());
            }
            Ok(())
        }
        Command::Noise {
            image,
            out,
            prob,
            seed,
        } => {
            if !(0.0..=1.0).contains(&prob) {
                bail!("--prob must be in [0, 1], got {prob}");
            }
            let (mut pixels, height, width) = load_gray_png(&image)?;
            impulse_noise(&mut pixels, width, height, 1, prob, seed);
            save_gray_png(&out, &pixels, height, width)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Ablate {
            study,
            out,
            profile,
            seeds,
            epochs,
            train_scenes,
            eval_scenes,
            noise,
            json,
        } => {
            let p = load_profile(&profile)?;
            let opts = ablate::StudyOptions {
                seeds,
                epochs,
                train_scenes,
                eval_scenes,
                noise,
            };
            let (payload, verdict) = match study {
                Study::Shuffle => {
                    let s = ablate::shuffle_study(&p, &opts)?;
                    print_shuffle(&s, json);
                    (serde_json::to_value(&s)?, s.verdict)
                }
                Study::Noise => {
                    let s = ablate::noise_study(&p, &opts, None)?;
                    print_noise(&s, json);
                    (serde_json::to_value(&s)?, s.verdict)
                }
                Study::Nsweep => {
                    let s = ablate::nsweep_study(&p, &opts)?;
                    print_nsweep(&s, json);
                    (serde_json::to_value(&s)?, s.verdict)
                }
            };
            std::fs::create_dir_all(&out)?;
            let path = out.join("study.json");
            std::fs::write(&path, serde_json::to_string_pretty(&payload)?)?;
            if !json {
                println!("verdict: {verdict}");
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Gradcheck { epsilon, json } => {
            let results = gradcheck::run(epsilon)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                gradcheck::print_table(&results);
            }
            let failed = gradcheck::failures(&results);
            if !failed.is_empty() {
                anyhow::bail!("gradient check failed for: {}", failed.join(", "));
            }
            Ok(())
        }
        Command::ArchReport {
            version,
            width,
            stem,
            size,
            all,
            json,
        } => {
            if all {
                let mut rows = Vec::new();
                for v in [Version::V1, Version::V2, Version::V3, Version::V4] {
                    let cfg = BackboneConfig::with_version(v, width, stem);
                    cfg.validate()?;
                    let report = count_params_flops(&cfg, size, size);
                    rows.push((v, report.total_params, report.total_macs));
                }
                if json {
                    let items: Vec<serde_json::Value> = rows
                        .iter()
                        .map(|(v, p, m)| {
                            serde_json::json!({"version": format!("{v:?}"), "params": p, "macs": m})
                        })
                        .collect();
                    println!("{}", serde_json::to_string_pretty(&items)?);
                } else {
                    println!("{:<8} {:>12} {:>16}", "version", "params", "macs");
                    for (v, p, m) in rows {
                        println!("{:<8} {:>12} {:>16}", format!("{v:?}"), p, m);
                    }
                }
            } else {
                let cfg = BackboneConfig::with_version(version.into(), width, stem);
                cfg.validate()?;
                let report = count_params_flops(&cfg, size, size);
                if json {
                    println!("{}", serde_json::to_string_pretty(&report)?);
                } else {
                    println!("{}", report.table());
                }
            }
            Ok(())
        }
    }
}

/// Inference thresholds travel with the model when training stored a
/// profile next to the checkpoint.
fn infer_config_for(model_dir: &Path) -> Result<stdet_core::pipeline::InferConfig> {
    let path = model_dir.join("profile.toml");
    if path.exists() {
        Ok(Profile::load(&path)?.infer)
    } else {
        Ok(stdet_core::pipeline::InferConfig::default())
    }
}

fn print_shuffle(s: &ablate::ShuffleStudy, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(s).expect("study"));
        return;
    }
    println!(
        "{:<8} {:>18} {:>18}   (noise p={})",
        "fusion", "clean f1", "noisy f1", s.noise
    );
    for m in &s.modes {
        println!(
            "{:<8} {:>9.3} ±{:.3} {:>10.3} ±{:.3}",
            m.mode, m.clean_mean, m.clean_sd, m.noisy_mean, m.noisy_sd
        );
    }
}

fn print_noise(s: &ablate::NoiseStudy, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(s).expect("study"));
        return;
    }
    let fmt = |o: Option<f64>| o.map_or("N/A".to_string(), |v| format!("{v:.3}"));
    println!(
        "{:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "p", "f1", "recall", "small", "medium", "large"
    );
    for l in &s.levels {
        println!(
            "{:>6.2} {:>8.3} {:>8.3} {:>8} {:>8} {:>8}",
            l.p,
            l.f1,
            l.recall,
            fmt(l.small_recall),
            fmt(l.medium_recall),
            fmt(l.large_recall)
        );
    }
}

fn print_nsweep(s: &ablate::NsweepStudy, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(s).expect("study"));
        return;
    }
    for seed in &s.seeds {
        println!("seed {}", seed.seed);
        println!("{:>4} {:>8} {:>14}", "n", "f1", "instances/s");
        for r in &seed.rows {
            println!("{:>4} {:>8.3} {:>14.1}", r.n_contour, r.f1, r.instances_per_sec);
        }
    }
}
