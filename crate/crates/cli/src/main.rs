//! `semicap`: run experiments and ablations, and verify the minimax theory.
//!
//! Exit codes: 0 success, 1 usage error, 2 a check failed, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use semicap_core::ablation::run_ablation;
use semicap_core::dist::{verify_theory, TheoryConfig};
use semicap_core::losses::Variant;
use semicap_core::models::save_checkpoint;
use semicap_core::trainer::{ExperimentConfig, Trainer};

const USAGE: u8 = 1;
const CHECK_FAILED: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "semicap", version, about = "Semi-supervised captioning from scarce pairs on a synthetic scene world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the optimal-discriminator, value and equilibrium results on random discrete joints.
    VerifyTheory(TheoryArgs),
    /// Train one variant and write its manifest, metrics, checkpoint and samples.
    Run(RunArgs),
    /// Train every variant on shared seeds and compare final BLEU-4.
    Ablate(AblateArgs),
    /// Write the generated dataset splits for a config and seed as text.
    DumpData(DumpArgs),
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Side length of the square joint tables.
    #[arg(long, default_value_t = 16)]
    support: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Flat `key = value` file; flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    paired_fraction: Option<f64>,
    #[arg(long)]
    pool_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated seeds shared by every variant.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    /// Destination file.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: RUNTIME, error: e.into() }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: USAGE, error }
}

fn resolve(o: &Overrides, seed: Option<u64>, variant: Option<Variant>) -> Result<ExperimentConfig, Failure> {
    let mut c = ExperimentConfig::default();
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
        c.apply_text(&text).map_err(|e| usage(e.into()))?;
    }
    if let Some(v) = seed {
        c.seed = v;
    }
    if let Some(v) = variant {
        c.variant = v;
    }
    if let Some(v) = o.paired_fraction {
        c.data.paired_fraction = v;
    }
    if let Some(v) = o.pool_fraction {
        c.pool_fraction = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    for kv in &o.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v).map_err(|e| usage(e.into()))?;
    }
    c.validate().map_err(|e| usage(e.into()))?;
    Ok(c)
}

fn out_dir(o: &Overrides, default: &str) -> Result<PathBuf> {
    let dir = o.out_dir.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn verify(a: &TheoryArgs) -> Result<(), Failure> {
    let cfg = TheoryConfig { trials: a.trials, support: a.support, tol: a.tol, seed: a.seed, ..TheoryConfig::default() };
    if a.trials == 0 || a.support < 2 {
        return Err(usage(anyhow::anyhow!("trials must be >= 1 and support >= 2")));
    }
    let report = verify_theory(&cfg)?;
    print!("{report}");
    if !report.passed() {
        return Err(Failure { code: CHECK_FAILED, error: anyhow::anyhow!("theory checks failed") });
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common, a.seed, a.variant)?;
    let dir = out_dir(&a.common, "runs")?;
    let paths = ["metrics.csv", "model.ckpt", "samples.txt"].map(|f| dir.join(f));
    let mut manifest = format!("# semicap {}\n", env!("CARGO_PKG_VERSION"));
    for p in &paths {
        manifest.push_str(&format!("# output {}\n", p.display()));
    }
    manifest.push_str(&cfg.to_text());
    write(&dir.join("manifest.txt"), &manifest)?;

    let out = Trainer::new(cfg)?.run()?;
    write(&paths[0], &out.log.to_csv())?;
    save_checkpoint(&out.model, &paths[1])?;
    let samples: String = out.samples.iter().map(|(r, g)| format!("reference: {r}\ngenerated: {g}\n\n")).collect();
    write(&paths[2], &samples)?;
    if let Some(r) = out.log.last() {
        println!("epoch {} bleu4 {:.4} recall@1 {:.3} pseudo_acc {:.4}", r.epoch, r.bleu[3], r.recall_at_1, r.pseudo_acc);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let base = resolve(&a.common, None, None)?;
    let dir = out_dir(&a.common, "ablation")?;
    write(&dir.join("manifest.txt"), &base.to_text())?;
    let report = run_ablation(&base, &Variant::ALL, &a.seeds, |r| {
        eprintln!("{} seed {}: bleu4 {:.4}", r.variant, r.seed, r.last.bleu[3]);
    })?;
    write(&dir.join("ablation.csv"), &report.to_csv())?;
    let checks = report.ordering_checks();
    for c in &checks {
        println!("{} {} >= {} margin {:+.4}", if c.passed() { "PASS" } else { "FAIL" }, c.lhs, c.rhs, c.margin);
    }
    println!("wrote {}", dir.join("ablation.csv").display());
    if checks.iter().any(|c| !c.passed()) {
        return Err(Failure { code: CHECK_FAILED, error: anyhow::anyhow!("ablation ordering not met") });
    }
    Ok(())
}

fn dump(a: &DumpArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.common, a.seed, None)?;
    let t = Trainer::new(cfg)?;
    write(&a.out, &t.splits().to_text())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::VerifyTheory(a) => verify(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::DumpData(a) => dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
