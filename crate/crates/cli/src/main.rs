use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fat_core::badgen::{bad_samples_csv, bad_samples_pgm, generate_bad_samples, BadSample};
use fat_core::config::{build_dataset, code_version, parse_config, RunConfig, RunManifest};
use fat_core::nn::checkpoint;
use fat_core::trainer::{direction_seed, evaluate, metrics_csv, train, train_with, EpochMetrics, Method};
use fat_core::verify::{run_suite, Suite};
use fat_core::{Dataset, FatError, Mlp};

/// Environment variable naming the default MNIST directory.
const DATA_DIR_ENV: &str = "FAT_DATA_DIR";

#[derive(Parser)]
#[command(name = "fat", version, about = "Semi-supervised training with adversarial bad samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long, default_value = "fat-run")]
        out: PathBuf,
        /// Also time a supervised-only run of the same architecture and report the ratio.
        #[arg(long)]
        time_ratio: bool,
    },
    /// Run a built-in property suite (or `all`).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate bad samples for a dataset's unlabeled set from a checkpoint.
    Genbad {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Configuration file plus overrides; any flag given wins over the file.
#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["supervised", "vat", "fat"])]
    method: Option<String>,
    #[arg(long, value_parser = ["moons", "blobs3", "blobs4", "ring", "mnist"])]
    dataset: Option<String>,
    /// Total labeled examples, balanced over classes.
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    capital_c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    power_iters: Option<usize>,
    #[arg(long)]
    lambda_step: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Unlabeled minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// MNIST directory (defaults to $FAT_DATA_DIR).
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("method", self.method.clone());
        push("dataset", self.dataset.clone());
        push("labels", self.labels.map(|v| v.to_string()));
        push("epsilon", self.epsilon.map(|v| v.to_string()));
        push("capital_c", self.capital_c.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("xi", self.xi.map(|v| v.to_string()));
        push("power_iters", self.power_iters.map(|v| v.to_string()));
        push("lambda_step", self.lambda_step.map(|v| v.to_string()));
        push("lambda_max", self.lambda_max.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("mnist_dir", self.mnist_dir.as_ref().map(|p| p.display().to_string()));
        out
    }

    /// Resolved configuration and its dataset, with `xi` and the MNIST
    /// directory filled in.
    fn resolve(&self) -> Result<(RunConfig, Dataset)> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = parse_config(&text, &self.overrides())?;
        let default_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        let data = build_dataset(&cfg.dataset, cfg.fat.seed, default_dir.as_deref())?;
        if !cfg.dataset.kind.is_synthetic() && cfg.dataset.mnist_dir.is_none() {
            cfg.dataset.mnist_dir = default_dir;
        }
        cfg.resolve_xi(&data);
        Ok((cfg, data))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes a bad-sample dump for `samples`: CSV for 2D inputs, a PGM grid for
/// square images, CSV otherwise. Returns the file name used.
fn dump_bad_samples(dir: &Path, stem: &str, samples: &[BadSample<f64>], data: &Dataset) -> Result<String> {
    let square = {
        let side = (data.input_dim as f64).sqrt().round() as usize;
        side * side == data.input_dim && data.input_dim > 2
    };
    let name = if square {
        let name = format!("{stem}.pgm");
        write(&dir.join(&name), bad_samples_pgm(samples, &data.normalization)?)?;
        name
    } else {
        let name = format!("{stem}.csv");
        write(&dir.join(&name), bad_samples_csv(samples))?;
        name
    };
    Ok(name)
}

fn bad_samples_for(model: &Mlp, cfg: &RunConfig, data: &Dataset) -> Result<Vec<BadSample<f64>>> {
    let seeds: Vec<u64> = (0..data.unlabeled.rows())
        .map(|i| direction_seed(cfg.fat.seed, u64::MAX, i))
        .collect();
    Ok(generate_bad_samples(model, &data.unlabeled, &cfg.fat.vat, &cfg.fat.badgen, &seeds)?)
}

fn kept_fraction(samples: &[BadSample<f64>]) -> f64 {
    if samples.is_empty() {
        0.0
    } else {
        samples.iter().filter(|s| s.kept).count() as f64 / samples.len() as f64
    }
}

fn unlabeled_trace(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,unlabeled_acc\n");
    for m in rows {
        let _ = writeln!(out, "{},{}", m.epoch, m.unlabeled_acc.map(|v| v.to_string()).unwrap_or_default());
    }
    out
}

fn cmd_train(run: &RunArgs, out: &Path, time_ratio: bool) -> Result<()> {
    let (cfg, data) = run.resolve()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = vec!["metrics.csv".to_string(), "best.ckpt".into(), "last.ckpt".into()];
    if data.unlabeled_truth.is_some() {
        outputs.push("unlabeled.csv".into());
    }
    let ext = if data.input_dim == 2 { "csv" } else { "pgm" };
    outputs.extend(cfg.dump_epochs.iter().map(|e| format!("bad-epoch{e}.{ext}")));
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_descriptor: data.descriptor.clone(),
        code_version: code_version(),
        outputs,
    };
    write(&out.join("manifest.txt"), manifest.to_text())?;
    eprintln!("training {} on {}", cfg.fat.method.name(), data.descriptor);

    let mut rows: Vec<EpochMetrics> = Vec::new();
    let result = train_with(&cfg.fat, &data, |model, m| {
        rows.push(m.clone());
        eprintln!(
            "epoch {:>3}  lambda {:<4} ce {:.4} vat {:.4} val {} test {}",
            m.epoch,
            m.lambda,
            m.loss_ce,
            m.loss_vat,
            m.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            m.test_acc.map_or("-".into(), |v| format!("{v:.4}")),
        );
        if cfg.dump_epochs.contains(&m.epoch) {
            let samples = bad_samples_for(model, &cfg, &data).map_err(|e| FatError::Contract(e.to_string()))?;
            dump_bad_samples(out, &format!("bad-epoch{}", m.epoch), &samples, &data)
                .map_err(|e| FatError::Contract(e.to_string()))?;
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(FatError::Divergence {
            epoch,
            step,
            detail,
            snapshot,
        }) => {
            write(&out.join("metrics.csv"), metrics_csv(&rows))?;
            write(&out.join("diverged.ckpt"), &snapshot)?;
            bail!("training diverged at epoch {epoch}, step {step}: {detail}; parameters saved to diverged.ckpt");
        }
        Err(e) => return Err(e.into()),
    };
    write(&out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    if data.unlabeled_truth.is_some() {
        write(&out.join("unlabeled.csv"), unlabeled_trace(&outcome.metrics))?;
    }
    checkpoint::save(&outcome.best, out.join("best.ckpt"))?;
    checkpoint::save(&outcome.last, out.join("last.ckpt"))?;

    if !data.test.is_empty() {
        let acc = evaluate(&outcome.best, &data.test.x, &data.test.y)?;
        match outcome.best_epoch {
            Some(e) => println!("final test accuracy {acc:.4} (best validation epoch {e})"),
            None => println!("final test accuracy {acc:.4}"),
        }
    } else {
        println!("no test set; artifacts in {}", out.display());
    }

    if time_ratio && cfg.fat.method != Method::Supervised {
        let mut sup = cfg.fat.clone();
        sup.method = Method::Supervised;
        let base = train(&sup, &data)?;
        let t: f64 = outcome.elapsed.iter().sum();
        let s: f64 = base.elapsed.iter().sum();
        if s > 0.0 {
            println!("time ratio vs supervised: {:.2} ({t:.2}s / {s:.2}s)", t / s);
        }
    }
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64) -> Result<bool> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let mut all = true;
    for s in suites {
        let report = run_suite(s, seed)?;
        print!("{}", report.render());
        all &= report.passed();
    }
    Ok(all)
}

fn cmd_genbad(ckpt: &Path, run: &RunArgs, out: &Path) -> Result<()> {
    let model: Mlp = checkpoint::load(ckpt)?;
    let (cfg, data) = run.resolve()?;
    if model.input_dim() != data.input_dim || model.output_dim() != data.class_count {
        return Err(FatError::Shape {
            context: "genbad checkpoint vs dataset",
            expected: format!("{} inputs, {} classes", data.input_dim, data.class_count),
            actual: format!("{} inputs, {} classes", model.input_dim(), model.output_dim()),
        }
        .into());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let samples = bad_samples_for(&model, &cfg, &data)?;
    let name = dump_bad_samples(out, "bad-samples", &samples, &data)?;
    println!(
        "kept {} of {} candidates ({:.4}); wrote {}",
        samples.iter().filter(|s| s.kept).count(),
        samples.len(),
        kept_fraction(&samples),
        out.join(name).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, out, time_ratio } => cmd_train(run, out, *time_ratio).map(|_| true),
        Command::Verify { suite, seed } => cmd_verify(suite, *seed),
        Command::Genbad { checkpoint, run, out } => cmd_genbad(checkpoint, run, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
