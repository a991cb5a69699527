//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::imageio::{flow_to_rgb8, read_png, to_rgb8, write_field, write_png, write_rgb8, Rgb8};
use crate::synthdata::{read_dataset, write_dataset, Sample, SynthSpec};
use crate::tensor::Tensor;
use crate::trainer::{Model, LOSS_CSV};

#[derive(Debug, Parser)]
#[command(name = "printer", version, about = "Stain translation with learned registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenData {
        /// Generator settings (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
    },
    /// Train on a dataset directory, checkpointing every epoch.
    Train {
        /// Training settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `run.ablation`.
        #[arg(long)]
        ablation: Option<String>,
        /// Overrides `run.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `<out>/last` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset split; writes a CSV and prints a summary.
    Eval {
        /// Checkpoint file or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// CSV path; defaults to `eval-<split>.csv` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate every PNG in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Same-named reference targets, needed by `direct_encoding` runs.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Predict fields for same-named pairs in two directories.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render source / generated / warped / target / flow panels.
    ExportFigs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Integer upscaling of each panel.
        #[arg(long, default_value_t = 3)]
        scale: usize,
    },
}

/// Usage problems (bad flags, missing inputs, malformed config) exit with 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn split_of(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    require(dir)?;
    let data = read_dataset(dir)?;
    Ok(match split {
        Split::Train => data.train,
        Split::Test => data.test,
    })
}

fn batch_of(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    Ok(image.reshape(&[1, s[0], s[1], s[2]])?)
}

/// Sorted `*.png` files of a directory.
fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Argument(format!("no PNG files in {}", dir.display())));
    }
    Ok(out)
}

fn file_name(path: &Path) -> &std::ffi::OsStr {
    path.file_name().expect("listed files have names")
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            spec,
            out,
            train,
            test,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    SynthSpec::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthSpec::default(),
            };
            let m = write_dataset(&spec, train, test, &out)?;
            println!("wrote {} train and {} test pairs to {}", m.n_train, m.n_test, out.display());
        }
        Command::Train {
            config,
            data,
            out,
            ablation,
            epochs,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    require(p)?;
                    TrainConfig::load(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(a) = ablation {
                cfg.run.ablation = a.parse::<Ablation>()?;
            }
            if let Some(e) = epochs {
                cfg.run.epochs = e;
            }
            cfg.validate()?;
            require(&data)?;
            let train = read_dataset(&data)?.train;
            let last = out.join(crate::trainer::LAST_CHECKPOINT);
            let mut model = if resume && last.exists() {
                let mut m = Model::load(&last)?;
                if m.config().run.ablation != cfg.run.ablation {
                    return Err(Error::Version(format!(
                        "run in {} uses {}, not {}",
                        out.display(),
                        m.config().run.ablation,
                        cfg.run.ablation
                    )));
                }
                m.set_epochs(cfg.run.epochs);
                m
            } else {
                if out.join(LOSS_CSV).exists() {
                    return Err(Error::Argument(format!(
                        "{} already holds a run; pass --resume or pick another --out",
                        out.display()
                    )));
                }
                Model::new(cfg)?
            };
            let total = model.config().run.epochs;
            model.train(&train, Some(&out), |epoch, reports| {
                let last = reports.last().expect("non-empty epoch");
                let summary: Vec<String> = last.losses.iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
                println!("epoch {epoch}/{total} {}", summary.join(" "));
            })?;
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
        } => {
            require(&ckpt)?;
            let model = Model::load(&ckpt)?;
            let samples = split_of(&data, split)?;
            let ev = model.evaluate(&samples)?;
            let name = match split {
                Split::Train => "eval-train.csv",
                Split::Test => "eval-test.csv",
            };
            let path = out.unwrap_or_else(|| {
                let dir = if ckpt.is_dir() { ckpt.clone() } else { ckpt.parent().unwrap_or(Path::new(".")).to_path_buf() };
                dir.join(name)
            });
            fs::write(&path, ev.report.to_csv()).map_err(|e| Error::io(&path, e))?;
            println!("{}", ev.report.summary());
            println!("per-pair metrics written to {}", path.display());
        }
        Command::Infer {
            ckpt,
            input,
            out,
            reference,
        } => {
            require(&ckpt)?;
            let model = Model::load(&ckpt)?;
            let files = pngs(&input)?;
            if let Some(r) = &reference {
                require(r)?;
            }
            create_dir(&out)?;
            for f in &files {
                let x = batch_of(&read_png(f)?)?;
                let y = match &reference {
                    Some(r) => Some(batch_of(&read_png(&r.join(file_name(f)))?)?),
                    None => None,
                };
                let t = model.translate(&x, y.as_ref())?;
                write_png(&out.join(file_name(f)), &t.generated)?;
            }
            println!("translated {} images into {}", files.len(), out.display());
        }
        Command::Register { ckpt, x, y, out } => {
            require(&ckpt)?;
            require(&y)?;
            let model = Model::load(&ckpt)?;
            let files = pngs(&x)?;
            for sub in ["field", "warped", "flow"] {
                create_dir(&out.join(sub))?;
            }
            for f in &files {
                let xs = batch_of(&read_png(f)?)?;
                let ys = batch_of(&read_png(&y.join(file_name(f)))?)?;
                let t = model.translate(&xs, Some(&ys))?;
                let stem = Path::new(file_name(f)).with_extension("");
                write_field(&out.join("field").join(stem.with_extension("f32raw")), &t.field)?;
                write_png(&out.join("warped").join(file_name(f)), &t.warped)?;
                write_rgb8(&out.join("flow").join(file_name(f)), &flow_to_rgb8(&t.field, None)?)?;
            }
            println!("registered {} pairs into {}", files.len(), out.display());
        }
        Command::ExportFigs {
            ckpt,
            data,
            out,
            split,
            count,
            scale,
        } => {
            require(&ckpt)?;
            if scale == 0 {
                return Err(Error::Argument("--scale must be at least 1".into()));
            }
            let model = Model::load(&ckpt)?;
            let samples = split_of(&data, split)?;
            let chosen = &samples[..count.min(samples.len())];
            create_dir(&out)?;
            let mut rows = Vec::with_capacity(chosen.len());
            for s in chosen {
                let x = batch_of(&s.x)?;
                let y = batch_of(&s.y)?;
                let t = model.translate(&x, Some(&y))?;
                let panel = Rgb8::hstack(
                    &[
                        to_rgb8(&s.x)?,
                        to_rgb8(&t.generated)?,
                        to_rgb8(&t.warped)?,
                        to_rgb8(&s.y)?,
                        flow_to_rgb8(&t.field, None)?,
                    ],
                    2,
                )
                .scaled(scale);
                write_rgb8(&out.join(format!("panel-{}.png", s.name)), &panel)?;
                rows.push(panel);
            }
            if !rows.is_empty() {
                write_rgb8(&out.join("panels.png"), &Rgb8::vstack(&rows, 2 * scale))?;
            }
            println!(
                "wrote {} panels (source | generated | warped | target | flow) to {}",
                rows.len(),
                out.display()
            );
        }
    }
    Ok(())
}
