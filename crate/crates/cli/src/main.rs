//! Pipeline entry point: synthesize data, train, generate samples,
//! evaluate, and inspect checkpoints. All randomness flows from
//! `--seed`; `--threads 1` and `--threads k` produce identical bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajgen_core::autodiff::checkpoint;
use trajgen_core::config::Config;
use trajgen_core::data::{self, leave_one_out, Scene};
use trajgen_core::exec::{maybe_par_map_indexed, with_threads};
use trajgen_core::generation;
use trajgen_core::metrics;
use trajgen_core::model::GeneratorModel;
use trajgen_core::training;

const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint-format 1, report-format 1)"
);

/// Keys that define the trained architecture; they cannot be overridden
/// when a model is restored from a checkpoint.
const FROZEN_AFTER_RESTORE: &[&str] = &[
    "data.h",
    "data.f",
    "data.dt",
    "encoder.node_hidden",
    "encoder.edge_hidden",
    "encoder.radius",
    "gmm.k",
    "decoder.hidden",
    "decoder.init_from_context",
];

#[derive(Parser)]
#[command(name = "trajgen", version = VERSION_LINE, about = "Multi-agent trajectory generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; every random stream derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for data-parallel stages (1 = sequential).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Config file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config overrides, repeatable: --set gmm.k=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset from a named generator.
    Synth {
        /// Generator name: two-goal, straight, crossing, scatter.
        #[arg(long)]
        spec: String,
        /// Output directory for the scene file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        /// Directory of whitespace-text scene files.
        #[arg(long)]
        data: PathBuf,
        /// Subset (file stem) to hold out from training.
        #[arg(long)]
        holdout: Option<String>,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Epoch override (config: train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample futures from a trained model.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per window (config: gen.samples).
        #[arg(long)]
        samples: Option<usize>,
        /// Output directory; one file per window.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare generated samples (or a second dataset) against a
    /// reference dataset.
    Evaluate {
        /// Reference dataset directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Generated-sample directory, or a dataset directory for
        /// self-comparison.
        #[arg(long)]
        gen: PathBuf,
        /// Output directory for the report and histogram tables.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print a checkpoint's header.
    InspectCkpt {
        ckpt: PathBuf,
    },
}

#[derive(Debug)]
struct CliError(String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("bad arguments").to_string();
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let one_line = e.0.replace('\n', "; ");
            eprintln!("error: {one_line}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for pair in &common.sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError(format!("bad --set (expected key=value): {pair}")))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scenes(dir: &Path, cfg: &Config) -> Result<Vec<Scene>, CliError> {
    let scenes = data::load_dataset_dir(dir, cfg.data_dt)?;
    if scenes.is_empty() {
        return Err(CliError(format!("no .txt scene files in {}", dir.display())));
    }
    Ok(scenes)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, out, common } => {
            let synth_spec = data::preset(&spec)?;
            let scene = data::synth_scene(&synth_spec, common.seed)?;
            fs::create_dir_all(&out)?;
            let mut text = format!("# trajgen-synth spec={} seed={}\n", spec, common.seed);
            text.push_str(&scene.serialize());
            let path = out.join(format!("{}.txt", scene.name));
            fs::write(&path, text)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train {
            data: data_dir,
            holdout,
            out,
            epochs,
            common,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(e) = epochs {
                cfg.apply("train.epochs", &e.to_string())?;
            }
            cfg.validate()?;
            let scenes = load_scenes(&data_dir, &cfg)?;
            let training_scenes: Vec<Scene> = match &holdout {
                Some(name) => {
                    let names: Vec<String> = scenes.iter().map(|s| s.name.clone()).collect();
                    let plan = leave_one_out(&names, name)?;
                    scenes
                        .into_iter()
                        .filter(|s| plan.training.contains(&s.name))
                        .collect()
                }
                None => scenes,
            };
            let windows = with_threads(common.threads, |parallel| {
                data::windows_for_scenes(
                    &training_scenes,
                    cfg.data_h,
                    cfg.data_f,
                    cfg.encoder_radius,
                    parallel,
                )
            });
            if windows.is_empty() {
                return Err(CliError("no training windows (scenes too short?)".into()));
            }
            let mut model = GeneratorModel::new(&cfg, common.seed);
            let every = cfg.train_checkpoint_every;
            let out_hook = out.clone();
            let seed = common.seed;
            let log = training::train(&mut model, &windows, seed, move |epoch, m| {
                if every > 0 && (epoch + 1) % every == 0 {
                    let path = out_hook.with_extension(format!("epoch{}.ckpt", epoch + 1));
                    let _ = m.save_checkpoint(&path, seed);
                }
            })?;
            model.save_checkpoint(&out, common.seed)?;
            let log_path = out.with_extension("log");
            fs::write(&log_path, log.render())?;
            println!(
                "trained {} windows for {} epochs; checkpoint {}",
                windows.len(),
                cfg.train_epochs,
                out.display()
            );
            Ok(())
        }
        Command::Generate {
            ckpt,
            data: data_dir,
            samples,
            out,
            common,
        } => {
            let (mut model, _ckpt_seed) = GeneratorModel::from_checkpoint(&ckpt)?;
            let frozen = model.config.clone();
            for pair in &common.sets {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| CliError(format!("bad --set (expected key=value): {pair}")))?;
                model.config.apply(key.trim(), value.trim())?;
            }
            if let Some(l) = samples {
                model.config.apply("gen.samples", &l.to_string())?;
            }
            model.config.validate()?;
            for key in FROZEN_AFTER_RESTORE {
                if model.config.get(key) != frozen.get(key) {
                    return Err(CliError(format!(
                        "{key} is fixed by the checkpoint (was {}, got {})",
                        frozen.get(key),
                        model.config.get(key)
                    )));
                }
            }
            let cfg = model.config.clone();
            let scenes = load_scenes(&data_dir, &cfg)?;
            let windows = with_threads(common.threads, |parallel| {
                data::windows_for_scenes(
                    &scenes,
                    cfg.data_h,
                    cfg.data_f,
                    cfg.encoder_radius,
                    parallel,
                )
            });
            if windows.is_empty() {
                return Err(CliError("no windows to generate from".into()));
            }
            fs::create_dir_all(&out)?;
            let seed = common.seed;
            let l = cfg.gen_samples;
            let sets = with_threads(common.threads, |parallel| {
                maybe_par_map_indexed(&windows, parallel, |idx, win| {
                    generation::sample_set(&model, win, idx, l, seed)
                })
            });
            let config_lines = cfg.to_lines();
            let mut degraded = 0usize;
            for (set, win) in sets.into_iter().zip(&windows) {
                let set = set?;
                if set.degraded {
                    degraded += 1;
                }
                generation::write_samples(&out, &set, win, &config_lines, seed)?;
            }
            println!(
                "generated {} samples for {} windows into {} ({} degraded)",
                l,
                windows.len(),
                out.display(),
                degraded
            );
            Ok(())
        }
        Command::Evaluate {
            reference,
            gen,
            out,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let scenes = load_scenes(&reference, &cfg)?;
            let windows = with_threads(common.threads, |parallel| {
                data::raw_windows_for_scenes(&scenes, cfg.data_h, cfg.data_f, parallel)
            });
            let samples = load_generated(&gen, &cfg)?;
            let report = with_threads(common.threads, |parallel| {
                metrics::evaluate(&windows, &samples, &cfg, common.seed, parallel)
            });
            fs::create_dir_all(&out)?;
            let text = report.render();
            fs::write(out.join("report.txt"), &text)?;
            for (name, table) in report.histogram_tables() {
                fs::write(out.join(format!("hist_{name}.txt")), table)?;
            }
            print!("{text}");
            Ok(())
        }
        Command::InspectCkpt { ckpt } => {
            let loaded = checkpoint::load(&ckpt)?;
            let mut out = String::new();
            out.push_str(&format!("checkpoint-format {}\n", loaded.meta.version));
            out.push_str(&format!("seed {}\n", loaded.meta.seed));
            out.push_str(&format!("config {}\n", loaded.meta.config.len()));
            for line in &loaded.meta.config {
                out.push_str(&format!("  {line}\n"));
            }
            out.push_str(&format!("params {}\n", loaded.params.len()));
            let mut total = 0usize;
            for (name, rows, cols, _) in &loaded.params {
                out.push_str(&format!("  {name} {rows} {cols}\n"));
                total += rows * cols;
            }
            out.push_str(&format!("total-values {total}\n"));
            // Tolerate closed pipes (e.g. piping into head).
            use std::io::Write;
            let _ = std::io::stdout().write_all(out.as_bytes());
            Ok(())
        }
    }
}

/// A `--gen` directory holds either `win_*.txt` sample files or plain
/// dataset files; the latter are evaluated as one-sample pseudo sets
/// (self-comparison closes the loop).
fn load_generated(
    dir: &Path,
    cfg: &Config,
) -> Result<Vec<generation::LoadedSamples>, CliError> {
    let has_sample_files = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().starts_with("win_"));
    if has_sample_files {
        return Ok(generation::read_samples_dir(dir)?);
    }
    let scenes = data::load_dataset_dir(dir, cfg.data_dt)?;
    let windows = data::raw_windows_for_scenes(&scenes, cfg.data_h, cfg.data_f, false);
    Ok(windows
        .iter()
        .enumerate()
        .map(|(idx, w)| generation::LoadedSamples {
            window_idx: idx,
            agent_ids: w.agent_ids.clone(),
            trajectories: vec![w.future.clone()],
        })
        .collect())
}
