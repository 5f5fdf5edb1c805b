//! `dbswin`: synthetic data, training, evaluation, prediction, gradient
//! checks and the branch-count ablation.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dbswin::ablation::{run_ablation, AblationRow};
use dbswin::data::{generate_synthetic, load_dataset, load_image, save_mask, write_synthetic_dataset, Raster, Sample};
use dbswin::gradcheck::{model_gradcheck, MODEL_FD_STEP};
use dbswin::metrics::{predict, MetricReport};
use dbswin::training::{evaluate, infer, EpochLog, Trainer};
use dbswin::{Checkpoint, DbSwin, Error, RunConfig};
use dbswin_tensor::BackwardFault;

#[derive(Parser)]
#[command(name = "dbswin", version, about = "Dual-branch Swin Transformer road segmentation")]
#[command(after_long_help = RunConfig::schema())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic occluded-road samples and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Image side in pixels (config image_size when omitted).
        #[arg(long)]
        size: Option<usize>,
        /// Generator seed (config synth_seed when omitted).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes log.csv and one checkpoint per epoch to out_dir.
    Train {
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        /// Continue from a checkpoint, with the configuration stored in it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total epoch count, e.g. to extend a resumed run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print precision, recall, F1 and IoU (percent) of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to score; defaults to the checkpoint's own split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Segment one image and write a 0/255 mask of the same size.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck {
        /// Model to check (the pinned 32×32 tiny model when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Parameter entries to sample (config gradcheck_samples when omitted).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule, to confirm the check can fail.
        #[arg(long, value_enum, hide = true)]
        fault: Option<Fault>,
    },
    /// Train each branch configuration on the same data and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Patch-size lists separated by `|`.
        #[arg(long, default_value = "4|4,8|4,8,12")]
        branches: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Gelu,
    Softmax,
    Matmul,
    Layernorm,
}

impl From<Fault> for BackwardFault {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Gelu => BackwardFault::Gelu,
            Fault::Softmax => BackwardFault::Softmax,
            Fault::Matmul => BackwardFault::MatMul,
            Fault::Layernorm => BackwardFault::LayerNorm,
        }
    }
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        msg: format!("{}: {e}", path.display()),
    }
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(fallback),
    }
}

fn synth(out: &Path, count: usize, size: Option<usize>, seed: Option<u64>, config: Option<&Path>) -> CmdResult {
    let mut synth = load_config(config, RunConfig::default())?.synth;
    if let Some(s) = size {
        synth.size = s;
    }
    if let Some(s) = seed {
        synth.seed = s;
    }
    synth.validate()?;
    let manifest = write_synthetic_dataset(out, &synth, count)?;
    println!("wrote {count} samples to {}", manifest.display());
    Ok(())
}

fn train(config: Option<&Path>, resume: Option<&Path>, epochs: Option<usize>) -> CmdResult {
    let (mut trainer, mut run) = match resume {
        Some(ck) => Checkpoint::load(ck)?.trainer()?,
        None => {
            let run = load_config(config, RunConfig::default())?;
            let model = DbSwin::new(run.model.clone(), run.train.seed)?;
            (Trainer::new(model, run.train.clone())?, run)
        }
    };
    if let Some(e) = epochs {
        run.train.epochs = e;
        trainer.cfg.epochs = e;
        run.validate()?;
    }
    let (train, val, _) = run.datasets()?;
    let dir = &run.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let log_path = dir.join("log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path).and_then(|mut f| writeln!(f, "{}", EpochLog::CSV_HEADER).map(|_| f))
    }
    .map_err(|e| io_failure(&log_path, e))?;
    eprintln!(
        "training {} ({} parameters) on {} samples, validating on {}",
        run.model.patch_label(),
        trainer.model.params().numel(),
        train.len(),
        val.len()
    );
    trainer.fit(&train, &val, |t, entry| {
        writeln!(log, "{}", entry.csv_row()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let ck = dir.join(format!("epoch_{:04}.ckpt", entry.epoch));
        Checkpoint::capture(t, &run)?.save(&ck)?;
        eprintln!("epoch {} lr {:e} loss {:.5}", entry.epoch, entry.lr, entry.train_loss);
        Ok(())
    })?;
    Ok(())
}

fn print_report(r: &MetricReport) {
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", r.csv_row());
}

fn eval(checkpoint: &Path, data: Option<&Path>, split: Split) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let samples: Vec<Sample> = match data {
        Some(m) => load_dataset(m)?,
        None => {
            let (train, val, test) = ck.run_config()?.datasets()?;
            match split {
                Split::Train => train,
                Split::Val => val,
                Split::Test => test,
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()).into());
    }
    print_report(&evaluate(&model, &samples)?.report());
    Ok(())
}

fn predict_cmd(checkpoint: &Path, image: &Path, out: &Path, threshold: f64) -> CmdResult {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let img = load_image(image)?;
    let logits = infer(&model, &img.to_tensor())?;
    let mask: Vec<u8> = predict(&logits, threshold).into_iter().map(u8::from).collect();
    save_mask(&Raster::new(img.height(), img.width(), 1, mask)?, out)?;
    println!("wrote {}x{} mask to {}", img.width(), img.height(), out.display());
    Ok(())
}

fn gradcheck(
    config: Option<&Path>,
    tolerance: f64,
    samples: Option<usize>,
    seed: u64,
    fault: Option<Fault>,
) -> CmdResult {
    let run = load_config(config, RunConfig::tiny())?;
    let model = DbSwin::new(run.model.clone(), run.train.seed)?;
    let mut synth = run.synth.clone();
    synth.size = run.image_size;
    let sample = generate_synthetic(&synth)?;
    let count = samples.unwrap_or(run.gradcheck_samples);
    let report = model_gradcheck(&model, &sample, count, seed, MODEL_FD_STEP, fault.map(Into::into))?;
    for e in &report.entries {
        println!(
            "{}[{}] analytic {:+.6e} numeric {:+.6e} rel_err {:.3e}",
            e.name, e.index, e.analytic, e.numeric, e.rel_err
        );
    }
    let max = report.max_rel_err();
    println!("max_rel_err {max:.3e} over {count} entries (tolerance {tolerance:e})");
    if max <= tolerance {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            msg: format!("gradient check failed: max rel err {max:.3e} > {tolerance:e}"),
        })
    }
}

fn parse_branches(list: &str) -> Result<Vec<Vec<usize>>, Failure> {
    list.split('|')
        .map(|group| {
            group
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Failure {
                    code: 1,
                    msg: format!("--branches: cannot parse {group:?}"),
                })
        })
        .collect()
}

fn ablate(config: Option<&Path>, branches: &str, out: &Path) -> CmdResult {
    let run = load_config(config, RunConfig::default())?;
    let variants = parse_branches(branches)?;
    let refs: Vec<&[usize]> = variants.iter().map(Vec::as_slice).collect();
    let (train, val, test) = run.datasets()?;
    let rows = run_ablation(&run, &refs, &train, &val, &test, |name, log| {
        eprintln!("{name} epoch {} loss {:.5}", log.epoch, log.train_loss);
    })?;
    let mut text = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(out, &text).map_err(|e| io_failure(out, e))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            config,
        } => synth(&out, count, size, seed, config.as_deref()),
        Command::Train { config, resume, epochs } => train(config.as_deref(), resume.as_deref(), epochs),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(&checkpoint, data.as_deref(), split),
        Command::Predict {
            checkpoint,
            image,
            out,
            threshold,
        } => predict_cmd(&checkpoint, &image, &out, threshold),
        Command::Gradcheck {
            config,
            tolerance,
            samples,
            seed,
            fault,
        } => gradcheck(config.as_deref(), tolerance, samples, seed, fault),
        Command::Ablate { config, branches, out } => ablate(config.as_deref(), &branches, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
