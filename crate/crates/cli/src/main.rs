//! `irdet`: synthetic data, training, evaluation, ROC export, gradient
//! checks and attention benchmarks.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O or data,
//! 4 numeric check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irdet_core::bench::{bench_csv, bench_serank};
use irdet_core::checkpoint::{load_checkpoint, save_checkpoint};
use irdet_core::checks::run_gradcheck;
use irdet_core::config::RunConfig;
use irdet_core::data::{read_dataset, synth_dataset, write_dataset, Dataset, SynthParams};
use irdet_core::metrics::{predict_dataset, roc_csv, roc_thresholds};
use irdet_core::train::{train, AdamW};
use irdet_core::{Error, Model};

#[derive(Parser)]
#[command(name = "irdet", version, about = "Infrared small-target segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Noise standard deviation on the 0–255 scale.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus `<out>.trace.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint's weights and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute IoU, nIoU, Pd and Fa.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep thresholds and write `threshold,fa,pd` rows.
    Roc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Compare tape gradients with finite differences.
    Gradcheck {
        /// all, ops, ddc, serank, lsff or net.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Count attention operations and time the block across sizes.
    Bench {
        #[arg(long, default_value = "serank")]
        module: String,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        offset: i32,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::UnknownStrategy { .. } | Error::InvalidNetwork(_) | Error::InvalidArgument { .. } => {
                Failure::Usage(msg)
            }
            Error::Dataset(_) | Error::Checkpoint(_) | Error::Io { .. } => Failure::Data(msg),
            Error::Tensor(_) => Failure::Numeric(msg),
        }
    }
}

impl From<irdet_core::data::DatasetError> for Failure {
    fn from(e: irdet_core::data::DatasetError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    let data = read_dataset(dir)?;
    data.size()?;
    Ok(data)
}

fn synth(out: &Path, count: usize, size: usize, noise_sigma: f64, seed: u64) -> Result<(), Failure> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Failure::Usage(format!("--size {size} is not a positive multiple of 16")));
    }
    let data = synth_dataset(&SynthParams {
        count,
        size,
        noise_sigma,
        seed,
        ..SynthParams::default()
    })?;
    write_dataset(out, &data)?;
    println!("wrote {count} samples of {size}×{size}, noise σ {noise_sigma}, to {}", out.display());
    Ok(())
}

fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

fn run_train(data: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", config.display())))?;
    let cfg = RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let data = load_data(data)?;
    let (h, w) = data.size()?;
    if (h, w) != (cfg.resolution, cfg.resolution) {
        return Err(Failure::Usage(format!(
            "config resolution {} conflicts with dataset frames of {h}×{w}",
            cfg.resolution
        )));
    }
    let hp = cfg.train_params();
    let (mut model, mut opt) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path, hp.weight_decay)?;
            if *ckpt.model.config() != cfg.net_config() {
                return Err(Failure::Usage(format!(
                    "{} describes a different network than {}",
                    config.display(),
                    path.display()
                )));
            }
            let opt = ckpt.optimizer.unwrap_or_else(|| AdamW::new(hp.weight_decay));
            (ckpt.model, opt)
        }
        None => (Model::<f32>::build(cfg.net_config(), cfg.seed)?, AdamW::new(hp.weight_decay)),
    };
    let trace = train(&mut model, &data, &hp, &mut opt)?;
    save_checkpoint(&model, Some(&opt), out)?;
    write(&trace_path(out), trace.to_csv())?;
    let last = trace.final_loss().unwrap_or(f64::NAN);
    if trace.steps.iter().any(|s| !s.loss.is_finite()) {
        return Err(Failure::Numeric(format!("loss diverged; last value {last}")));
    }
    println!(
        "trained {} steps (through step {}), final loss {last:.4}; wrote {}",
        trace.steps.len(),
        opt.step,
        out.display()
    );
    Ok(())
}

fn eval(data: &Path, ckpt: &Path, threshold: f64, report: Option<&Path>) -> Result<(), Failure> {
    let model = load_checkpoint::<f32>(ckpt, 0.0)?.model;
    let data = load_data(data)?;
    let text = predict_dataset(&model, &data, 4)?.evaluate(threshold).to_text();
    print!("{text}");
    if let Some(path) = report {
        write(path, &text)?;
    }
    Ok(())
}

fn roc(data: &Path, ckpt: &Path, out: &Path, steps: usize) -> Result<(), Failure> {
    let model = load_checkpoint::<f32>(ckpt, 0.0)?.model;
    let data = load_data(data)?;
    let points = predict_dataset(&model, &data, 4)?.roc(&roc_thresholds(steps));
    write(out, roc_csv(&points))?;
    println!("wrote {} ROC points to {}", points.len(), out.display());
    Ok(())
}

fn gradcheck(module: &str, seed: u64) -> Result<(), Failure> {
    let results = run_gradcheck(module, seed)?;
    println!("{:<8} {:<28} {:>10} {:>10}  status", "module", "check", "rel_err", "tolerance");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<8} {:<28} {:>10.2e} {:>10.0e}  {status}", r.suite, r.name, r.rel_error, r.tolerance);
    }
    let mut suites: Vec<&str> = results.iter().map(|r| r.suite).collect();
    suites.dedup();
    println!();
    for s in suites {
        let worst = results.iter().filter(|r| r.suite == s).map(|r| r.rel_error).fold(0.0, f64::max);
        println!("{s:<8} max rel_err {worst:.2e}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks exceed tolerance")));
    }
    Ok(())
}

fn bench(
    module: &str,
    sizes: &[usize],
    channels: usize,
    offset: i32,
    repeats: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if module != "serank" {
        return Err(Failure::Usage(format!("unknown bench module `{module}`; known: serank")));
    }
    let rows = bench_serank(channels, offset, 1, sizes, repeats, 0)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(path) = out {
        write(path, &csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            noise_sigma,
            seed,
        } => synth(&out, count, size, noise_sigma, seed),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => run_train(&data, &config, &out, resume.as_deref()),
        Command::Eval {
            data,
            ckpt,
            threshold,
            report,
        } => eval(&data, &ckpt, threshold, report.as_deref()),
        Command::Roc { data, ckpt, out, steps } => roc(&data, &ckpt, &out, steps),
        Command::Gradcheck { module, seed } => gradcheck(&module, seed),
        Command::Bench {
            module,
            sizes,
            channels,
            offset,
            repeats,
            out,
        } => bench(&module, &sizes, channels, offset, repeats, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
