//! The `mrflow` command line. Every subcommand only reads and writes files;
//! exit code 0 is success, 2 a usage, config or data error, 3 divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::dataio::rng::sub_seed;
use crate::dataio::{bin_centres, load_image, quantize, save_float_image, save_image, Config, Dataset};
use crate::error::{Error, Result};
use crate::mrcnf::checkpoint::{apply_block, encode_block, level_path, load_level, load_model, write_level, write_train_log};
use crate::mrcnf::train::{train_epoch, TrainOptions, TrainState};
use crate::mrcnf::{MrcnfModel, SampleSpec};
use crate::multires::{compose, decompose, downsample_avg, TransformKind};
use crate::ood::{default_patch_sizes, ood_report, shuffle_study, write_ood_report, write_shuffle_study, Detector};
use crate::tensor::{write_mrtf, AnyTensor, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Caps the worker pool when set.
pub const THREADS_ENV: &str = "MRFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mrflow", version, about = "Multi-resolution continuous normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one level, or all levels concurrently.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image directory or `builtin:NAME[:k=v,...]`.
        #[arg(long)]
        data: String,
        /// Level number (1 is finest) or `all`.
        #[arg(long)]
        level: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoints already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Bits per dimension of every image in a dataset.
    Bpd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where `bpd.csv` goes; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample images.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upsample an image from a coarse level to a finer one.
    Superres {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        from_level: usize,
        #[arg(long)]
        to_level: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score in-distribution against out-of-distribution data.
    Ood {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        in_data: String,
        #[arg(long)]
        ood_data: String,
        #[arg(long, value_enum, default_value_t = DetectorArg::NegBpd)]
        detector: DetectorArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `shuffle_bpd.csv` for the in-distribution data.
        #[arg(long)]
        shuffle_study: bool,
    },
    /// Split an image into its resolution stack.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long, value_enum, default_value_t = TransformArg::Unimodular)]
        transform: TransformArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DetectorArg {
    NegBpd,
    SScore,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransformArg {
    Unimodular,
    Haar,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("mrflow: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mrflow: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data,
            level,
            out,
            resume,
        } => train(&config, &data, &level, &out, resume),
        Command::Bpd { ckpt, data, seed, out } => bpd(&ckpt, &data, seed, out.as_deref()),
        Command::Generate {
            ckpt,
            num,
            temperature,
            seed,
            out,
        } => generate(&ckpt, num, temperature, seed, &out),
        Command::Superres {
            ckpt,
            input,
            from_level,
            to_level,
            out,
            temperature,
            seed,
        } => superres(&ckpt, &input, from_level, to_level, &out, temperature, seed),
        Command::Ood {
            ckpt,
            in_data,
            ood_data,
            detector,
            out,
            seed,
            shuffle_study,
        } => {
            let detector = match detector {
                DetectorArg::NegBpd => Detector::NegBpd,
                DetectorArg::SScore => Detector::SScore,
            };
            ood(&ckpt, &in_data, &ood_data, detector, &out, seed, shuffle_study)
        }
        Command::Decompose {
            input,
            levels,
            transform,
            out,
        } => {
            let kind = match transform {
                TransformArg::Unimodular => TransformKind::Unimodular,
                TransformArg::Haar => TransformKind::Haar,
            };
            decompose_cmd(&input, levels, kind, &out)
        }
    }
}

fn parse_levels(spec: &str, levels: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((1..=levels).collect());
    }
    match spec.parse::<usize>() {
        Ok(s) if (1..=levels).contains(&s) => Ok(vec![s]),
        _ => Err(Error::Config(format!("--level must be `all` or 1..={levels}, got {spec:?}"))),
    }
}

fn train(config: &Path, data: &str, level: &str, out: &Path, resume: bool) -> Result<()> {
    let config = Config::load(config)?;
    let data = Dataset::load(data)?;
    let mut model = MrcnfModel::new(&config, data.shape)?;
    let levels = parse_levels(level, model.levels())?;
    let opts = TrainOptions::from_config(&config);
    fs::create_dir_all(out)?;
    let layout = model.layout.clone();
    let shape = layout.image_shape;
    let mut blocks: Vec<_> = model
        .blocks
        .iter_mut()
        .enumerate()
        .map(|(i, b)| (i + 1, b))
        .filter(|(s, _)| levels.contains(s))
        .collect();
    // one worker per level; each owns its block and its checkpoint file
    let results: Vec<Result<()>> = blocks
        .par_iter_mut()
        .map(|(s, block)| -> Result<()> {
            let s = *s;
            let path = level_path(out, s);
            let mut state = if resume && path.exists() {
                apply_block(&config, shape, block, load_level(&path)?)?
            } else {
                let st = TrainState::new(block, opts.lr);
                write_level(out, s, &encode_block(&config, shape, s, block, &st)?)?;
                st
            };
            while state.epoch < opts.epochs {
                let log = train_epoch(&layout, s, block, &data, &opts, &mut state)?;
                write_level(out, s, &encode_block(&config, shape, s, block, &state)?)?;
                eprintln!(
                    "level {s} epoch {}: loss {:.5} bpd_contrib {:.5} grad_norm {:.4}",
                    log.epoch, log.loss, log.bpd_contrib, log.grad_norm
                );
            }
            Ok(())
        })
        .collect();
    write_train_log(out, model.levels())?;
    results.into_iter().collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn bpd(ckpt: &Path, data: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let data = Dataset::load(data)?;
    let values: Vec<f64> = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, x)| model.bpd(x, sub_seed(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let mut csv = String::from("image_id,bpd\n");
    for (i, b) in values.iter().enumerate() {
        let _ = writeln!(csv, "{i},{b}");
    }
    let dir = out.unwrap_or(ckpt);
    fs::create_dir_all(dir)?;
    fs::write(dir.join("bpd.csv"), csv)?;
    let (mean, std) = mean_std(&values);
    println!("bpd {mean:.6} ± {std:.6} (n = {})", values.len());
    Ok(())
}

fn generate(ckpt: &Path, num: usize, temperature: f64, seed: u64, out: &Path) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let samples = model.generate(&SampleSpec {
        count: num,
        temperature,
        seed,
    })?;
    fs::create_dir_all(out)?;
    for (i, x) in samples.iter().enumerate() {
        save_float_image(&out.join(format!("sample_{i:05}.png")), x)?;
    }
    let mut manifest = String::from("seed,temperature,level,role,variance,sample_std\n");
    for s in 1..=model.levels() {
        let var = model.layout.prior_variance(s)?;
        let role = if s == model.levels() { "base" } else { "detail" };
        let _ = writeln!(manifest, "{seed},{temperature},{s},{role},{var},{}", temperature * var.sqrt());
    }
    fs::write(out.join("noise_manifest.csv"), manifest)?;
    println!("wrote {num} samples to {}", out.display());
    Ok(())
}

/// Largest deviation between `coarse` and `fine` averaged down `steps` times.
fn mean_consistency(fine: &Tensor, coarse: &Tensor, steps: usize) -> Result<f64> {
    let mut x = fine.clone();
    for _ in 0..steps {
        x = downsample_avg(&x)?;
    }
    Ok(x.data().iter().zip(coarse.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn superres(ckpt: &Path, input: &Path, from: usize, to: usize, out: &Path, temperature: f64, seed: u64) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let coarse = bin_centres(&load_image(input)?);
    let fine = model.super_resolve(&coarse, from, to, temperature, seed)?;
    let err = mean_consistency(&fine, &coarse, from - to)?;
    println!("mean_consistency_max_error = {err:e}");
    if err >= 1e-6 {
        return Err(Error::contract(format!("mean consistency violated: {err:e}")));
    }
    if from == to {
        // bin centres quantize back to the input codes exactly
        save_image(out, &quantize(&fine))
    } else {
        save_float_image(out, &fine)
    }
}

fn ood(ckpt: &Path, in_data: &str, ood_data: &str, detector: Detector, out: &Path, seed: u64, shuffle: bool) -> Result<()> {
    let in_data = Dataset::load(in_data)?;
    let ood_data = Dataset::load(ood_data)?;
    let (model, _) = load_model(ckpt)?;
    let report = ood_report(&model, &in_data, &ood_data, detector, seed)?;
    write_ood_report(out, &report)?;
    for (d, v) in &report.auroc {
        println!("auroc {} = {v:.6}", d.name());
    }
    if shuffle {
        let [_, h, w] = in_data.shape;
        let rows = shuffle_study(&model, &in_data, &default_patch_sizes(h, w), seed)?;
        write_shuffle_study(&out.join("shuffle_bpd.csv"), &rows)?;
    }
    Ok(())
}

/// Maps coefficients around zero into a viewable range.
fn detail_preview(y: &Tensor) -> Tensor {
    y.map(|v| 0.5 + v)
}

fn decompose_cmd(input: &Path, levels: usize, kind: TransformKind, out: &Path) -> Result<()> {
    let x = bin_centres(&load_image(input)?);
    let stack = decompose(&x, levels, kind)?;
    fs::create_dir_all(out)?;
    let c = x.shape()[0];
    for (i, y) in stack.details.iter().enumerate() {
        let s = i + 1;
        write_mrtf(out.join(format!("detail_{s}.mrtf")), &AnyTensor::F64(y.clone()))?;
        let [_, h, w] = [y.shape()[0], y.shape()[1], y.shape()[2]];
        for k in 0..3 {
            let part = Tensor::new(&[c, h, w], y.data()[k * c * h * w..(k + 1) * c * h * w].to_vec())?;
            save_float_image(&out.join(format!("detail_{s}_{k}.png")), &detail_preview(&part))?;
        }
    }
    write_mrtf(out.join("base.mrtf"), &AnyTensor::F64(stack.base.clone()))?;
    let scale = stack.base.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    save_float_image(&out.join("base.png"), &stack.base.map(|v| v / scale))?;
    // the emitted stack must rebuild the input
    let back = compose(&stack)?;
    let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > 1e-9 {
        return Err(Error::contract(format!("decomposition does not round-trip: {err:e}")));
    }
    println!("logdet_total = {}", stack.logdet_total);
    Ok(())
}
