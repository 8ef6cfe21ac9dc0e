//! `cdnet`: synthesize scenes, train, infer, evaluate, and run the C2C baseline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdnet_autodiff::Precision;
use cdnet_core::cloud::CloudFormat;
use cdnet_core::config::RunConfig;
use cdnet_core::eval::{c2c_baseline, color_export, confusion, metrics};
use cdnet_core::synthgen::{generate_scene, manifest, ScenePair};
use cdnet_core::training::{fit, predict_scene};
use cdnet_core::verify::gradient_suite;
use cdnet_core::{load_cloud, save_cloud, ChangeNet, Epoch, Error, LabeledPointCloud, Result};
use clap::{Parser, Subcommand, ValueEnum};

const RESOLVED: &str = "config.resolved";

#[derive(Parser)]
#[command(name = "cdnet", version, about = "Change detection between two point-cloud epochs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test scenes from a config.
    Synth {
        /// Config file (`key = value` lines); defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; receives `train/` and `test/` scene folders.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on scenes written by `synth`.
    Train {
        /// Config file (`key = value` lines); defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, `metrics.csv` and the resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict per-point change labels for a T2 cloud.
    Infer {
        /// Checkpoint written by `train` (its `.manifest` must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier epoch, `.xyz` or `.xyzl`.
        #[arg(long)]
        t1: PathBuf,
        /// Later epoch, `.xyz` or `.xyzl`.
        #[arg(long)]
        t2: PathBuf,
        /// Output `.xyzl`: T2 points with predicted labels.
        #[arg(long)]
        out: PathBuf,
        /// Points per crop.
        #[arg(long, default_value_t = 1024)]
        chunk: usize,
        /// Seed for the crop order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Arithmetic precision of the forward pass.
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Predicted labels, `.xyzl`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth labels, `.xyzl`.
        #[arg(long)]
        truth: PathBuf,
        /// Write `x y z pred r g b` lines colored by outcome (TP red, TN purple, FN blue, FP yellow).
        #[arg(long)]
        colors: Option<PathBuf>,
        /// Also write the metrics as `key = value` lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label T2 points farther than a threshold from T1 as changed.
    Baseline {
        /// Earlier epoch, `.xyz` or `.xyzl`.
        #[arg(long)]
        t1: PathBuf,
        /// Later epoch, `.xyz` or `.xyzl`.
        #[arg(long)]
        t2: PathBuf,
        /// Distance threshold in meters.
        #[arg(long)]
        threshold: f64,
        /// Output `.xyzl`: T2 points with baseline labels.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; exits 4 if any check fails.
    Gradcheck,
}

fn read_cloud(path: &Path, epoch: Epoch) -> Result<LabeledPointCloud> {
    let format = CloudFormat::from_path(path)
        .ok_or_else(|| Error::InvalidArgument(format!("{}: expected a .xyz or .xyzl file", path.display())))?;
    load_cloud(path, format, epoch).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{msg} ({})", path.display()),
        },
        other => other,
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    for (is_train, spec) in cfg.scene.scene_specs() {
        let pair = generate_scene(&spec)?;
        let dir = out.join(if is_train { "train" } else { "test" }).join(&spec.id);
        fs::create_dir_all(&dir)?;
        save_cloud(&pair.t1, dir.join("t1.xyz"))?;
        save_cloud(&pair.t2, dir.join("t2.xyzl"))?;
        fs::write(dir.join("manifest"), manifest(&spec))?;
        println!("{}: {} / {} points", dir.display(), pair.t1.len(), pair.t2.len());
    }
    fs::write(out.join(RESOLVED), cfg.resolved())?;
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<ScenePair>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.is_dir());
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let t1 = read_cloud(&p.join("t1.xyz"), Epoch::T1)?;
            let t2 = read_cloud(&p.join("t2.xyzl"), Epoch::T2)?;
            if t2.labels().is_none() {
                return Err(Error::Validation(format!("{}: T2 has no labels", p.display())));
            }
            Ok(ScenePair { id, t1, t2 })
        })
        .collect()
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let train = read_split(&data.join("train"))?;
    let test = read_split(&data.join("test"))?;
    if train.is_empty() {
        return Err(Error::Validation(format!("{}: no scenes under train/", data.display())));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED), cfg.resolved())?;
    let mut net = ChangeNet::new(cfg.net.clone())?;
    let result = fit(&mut net, &cfg.train, &train, &test, Some(out))?;
    print!("{}", result.csv());
    println!("best epoch {} -> {}", result.best_epoch, out.join("best.ckpt").display());
    Ok(())
}

fn infer(checkpoint: &Path, t1: &Path, t2: &Path, out: &Path, chunk: usize, seed: u64, precision: Precision) -> Result<()> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("--chunk must be positive".into()));
    }
    let net = ChangeNet::load(checkpoint)?;
    let t1 = read_cloud(t1, Epoch::T1)?;
    let t2 = read_cloud(t2, Epoch::T2)?;
    let pair = ScenePair {
        id: t2.id.clone(),
        t1,
        t2,
    };
    let pred = predict_scene(&net, &pair, chunk, seed, precision)?;
    let labeled = LabeledPointCloud::new("pred", Epoch::T2, pair.t2.points().to_vec(), Some(pred))?;
    save_cloud(&labeled, out)
}

fn labels_of<'a>(cloud: &'a LabeledPointCloud, path: &Path) -> Result<&'a [u8]> {
    cloud
        .labels()
        .ok_or_else(|| Error::Validation(format!("{}: no labels", path.display())))
}

fn eval(pred_path: &Path, truth_path: &Path, colors: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let pred = read_cloud(pred_path, Epoch::T2)?;
    let truth = read_cloud(truth_path, Epoch::T2)?;
    let (p, t) = (labels_of(&pred, pred_path)?, labels_of(&truth, truth_path)?);
    let r = metrics(&confusion(p, t)?)?;
    print!("{}", r.table());
    if !r.undefined.is_empty() {
        println!("undefined (counted as 0): {}", r.undefined.join(", "));
    }
    if let Some(path) = colors {
        fs::write(path, color_export(truth.points(), p, t)?)?;
    }
    if let Some(path) = report {
        fs::write(path, r.key_values())?;
    }
    Ok(())
}

fn baseline(t1: &Path, t2: &Path, threshold: f64, out: &Path) -> Result<()> {
    let a = read_cloud(t1, Epoch::T1)?;
    let b = read_cloud(t2, Epoch::T2)?;
    let pred = c2c_baseline(&a, &b, threshold)?;
    if let Some(truth) = b.labels() {
        print!("{}", metrics(&confusion(&pred, truth)?)?.table());
    }
    let labeled = LabeledPointCloud::new("c2c", Epoch::T2, b.points().to_vec(), Some(pred))?;
    save_cloud(&labeled, out)
}

fn gradcheck() -> Result<()> {
    let cases = gradient_suite()?;
    let mut failed = Vec::new();
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<26} {:>10.3e} < {:.0e} {verdict}", c.name, c.max_rel_error, c.tolerance);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Infer {
            checkpoint,
            t1,
            t2,
            out,
            chunk,
            seed,
            precision,
        } => {
            let precision = match precision {
                PrecisionArg::F64 => Precision::F64,
                PrecisionArg::F32 => Precision::F32,
            };
            infer(&checkpoint, &t1, &t2, &out, chunk, seed, precision)
        }
        Command::Eval {
            pred,
            truth,
            colors,
            report,
        } => eval(&pred, &truth, colors.as_deref(), report.as_deref()),
        Command::Baseline { t1, t2, threshold, out } => baseline(&t1, &t2, threshold, &out),
        Command::Gradcheck => gradcheck(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
