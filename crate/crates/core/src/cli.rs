//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_annotations, write_predictions, SyntheticSpec};
use crate::error::{Result, TslError};
use crate::model::{Localizer, ParamStore};
use crate::pipeline::{evaluate_files, gen_data, predict_dir, prepare_out_dir, save_report};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "tsl",
    version,
    about = "Temporal sound localization on audio-visual feature sequences"
)]
pub struct Cli {
    /// Compute device; only the CPU is supported.
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Print a training configuration as TOML.
    Config(ConfigArgs),
    /// Train a model and write checkpoints plus a run manifest.
    Train(TrainArgs),
    /// Run a checkpoint over a directory of feature files.
    Predict(PredictArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with a full synthetic spec; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d_visual: Option<usize>,
    #[arg(long)]
    pub d_audio: Option<usize>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Start from the CPU-sized settings instead of the full-size ones.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for checkpoints and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; overrides `data_dir` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Configuration the checkpoint was trained with.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of `<id>.visual.tslf` (and optional `<id>.audio.tslf`) files.
    #[arg(long)]
    pub features: PathBuf,
    /// Only predict videos listed in this annotation file.
    #[arg(long)]
    pub subset: Option<PathBuf>,
    /// Prediction JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub ann: PathBuf,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in the printed table.
    #[arg(long, default_value = "model")]
    pub label: String,
    #[arg(long)]
    pub force: bool,
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(TslError::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TslError::io(path, e))
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| TslError::io("<stdout>", e);
    match cli.command {
        Command::GenData(a) => {
            let mut spec = match &a.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| TslError::io(path, e))?;
                    toml::from_str(&text).map_err(|e| TslError::Config(e.to_string()))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(v) = a.videos {
                spec.num_videos = v;
            }
            if let Some(v) = a.classes {
                spec.num_classes = v;
            }
            if let Some(v) = a.d_visual {
                spec.d_visual = v;
            }
            if let Some(v) = a.d_audio {
                spec.d_audio = v;
            }
            if let Some(v) = a.duration {
                spec.duration_sec = v;
            }
            if let Some(v) = a.snr {
                spec.snr = v;
            }
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            let m = gen_data(&spec, &a.out, a.force)?;
            writeln!(
                stdout,
                "wrote {} videos to {} (train {}, val {}, test {})",
                m.num_videos,
                a.out.display(),
                m.split_sizes[0],
                m.split_sizes[1],
                m.split_sizes[2]
            )
            .map_err(io)?;
        }
        Command::Config(a) => {
            let input_dim = a
                .input_dim
                .unwrap_or(SyntheticSpec::default().d_visual + SyntheticSpec::default().d_audio);
            let classes = a.classes.unwrap_or(SyntheticSpec::default().num_classes);
            let mut cfg = if a.desk {
                TrainConfig::desk(input_dim, classes)
            } else {
                let mut cfg = TrainConfig::default();
                if let Some(d) = a.input_dim {
                    cfg.model.input_dim = d;
                }
                if let Some(c) = a.classes {
                    cfg.model.num_classes = c;
                }
                cfg
            };
            cfg.data_dir = a.data;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let text = cfg.to_toml();
            match &a.out {
                Some(path) => {
                    refuse_existing_file(path, a.force)?;
                    write_text(path, &text)?;
                }
                None => stdout.write_all(text.as_bytes()).map_err(io)?,
            }
        }
        Command::Train(a) => {
            let mut cfg = TrainConfig::load(&a.config)?;
            if let Some(d) = a.data {
                cfg.data_dir = Some(d);
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            prepare_out_dir(&a.out, a.force)?;
            let manifest = train(&cfg, &a.out)?;
            for e in &manifest.epochs {
                let val = e
                    .val_average_map
                    .map(crate::eval::percent)
                    .unwrap_or_else(|| "-".into());
                writeln!(
                    stdout,
                    "epoch {:>3}  loss {:.6}  cls {:.6}  reg {:.6}  lr {:.3e}  val mAP {}",
                    e.epoch, e.loss.total, e.loss.cls, e.loss.reg, e.learning_rate, val
                )
                .map_err(io)?;
            }
            writeln!(stdout, "checkpoint {}", manifest.final_checkpoint.display()).map_err(io)?;
            if let Some(r) = &manifest.final_report {
                write!(stdout, "{}", r.table("val")).map_err(io)?;
            }
        }
        Command::Predict(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            refuse_existing_file(&a.out, a.force)?;
            let params = ParamStore::load(&a.checkpoint)?;
            let model = Localizer::from_params(cfg.model.clone(), params)?;
            let subset = match &a.subset {
                Some(path) => Some(
                    load_annotations(path)?
                        .videos
                        .into_iter()
                        .map(|v| v.video_id)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let preds = predict_dir(&model, &a.features, subset.as_deref(), &cfg.decode)?;
            write_predictions(&preds, &a.out)?;
            let n: usize = preds.videos.iter().map(|v| v.detections.len()).sum();
            writeln!(
                stdout,
                "wrote {n} detections for {} videos",
                preds.videos.len()
            )
            .map_err(io)?;
        }
        Command::Eval(a) => {
            let report = evaluate_files(&a.pred, &a.ann)?;
            if let Some(path) = &a.out {
                refuse_existing_file(path, a.force)?;
                save_report(&report, path)?;
            }
            write!(stdout, "{}", report.table(&a.label)).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code. Errors are
/// reported on `stderr` as a single `error[CODE]: message` line.
pub fn main_with(
    args: impl IntoIterator<Item = std::ffi::OsString>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let msg = e.kind().as_str().unwrap_or("invalid arguments").to_owned();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            let _ = writeln!(stderr, "error[E_USAGE]: {first}");
            return 2;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error[{}]: {line}", e.code());
            e.exit_code()
        }
    }
}
