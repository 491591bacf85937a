//! `blt`: forward solves, reconstructions, CGO decay studies and the built-in
//! examples from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use blt_core::cgo::{decay_study, DecayConfig};
use blt_core::experiment::{
    build_mesh, default_output_dir, example, load_config, run_experiment, run_forward, DomainConfig,
    ExperimentConfig, ForwardConfig, MediaConfig, MeshInfo, EXAMPLES,
};
use blt_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "blt", version, about = "Bioluminescence tomography source reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one forward problem and write the boundary data.
    Forward(RunArgs),
    /// Reconstruct a source from synthetic or recorded data.
    Invert(RunArgs),
    /// Run a CGO decay study on a truncated cone.
    CgoVerify(CgoArgs),
    /// Run one of the built-in examples.
    Example(ExampleArgs),
    /// Build the mesh of a config and print its statistics.
    MeshInfo(MeshArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory (default: $BLT_OUTPUT_ROOT/<name> or runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the inversion mesh size.
    #[arg(long = "mesh-h")]
    mesh_h: Option<f64>,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CgoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed of the harmonicity sample points.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ExampleArgs {
    /// Example name, e.g. ex6_1.
    #[arg(required_unless_present = "list")]
    name: Option<String>,
    /// List the example names.
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "mesh-h")]
    mesh_h: Option<f64>,
}

/// The parts of either config kind needed to build a mesh.
#[derive(Deserialize)]
struct MeshOnly {
    domain: DomainConfig,
    media: MediaConfig,
}

fn output_dir(flag: &Option<PathBuf>, configured: &Option<String>, name: &str) -> PathBuf {
    flag.clone()
        .or_else(|| configured.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_output_dir(name))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.noise.seed = s;
    }
    if let Some(h) = c.mesh_h {
        cfg.domain.h = h;
    }
}

fn invert(mut cfg: ExperimentConfig, c: &Common) -> Result<()> {
    apply_overrides(&mut cfg, c);
    let dir = output_dir(&c.out, &cfg.output, &cfg.name);
    let record = run_experiment(&cfg, Some(&dir))?;
    if !c.quiet {
        let s = record.summary();
        println!("{}: {:?} after {} iterations", s.name, s.termination, s.iterations);
        for (n, v) in s.param_names.iter().zip(&s.final_theta) {
            println!("  {n} = {v:.6}");
        }
        if let Some(e) = s.final_rel_error {
            println!("  e_r = {e:.4}");
        }
        println!("  residual {:.4e} -> {:.4e}", s.initial_residual_norm, s.final_residual_norm);
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn forward(args: &RunArgs) -> Result<()> {
    let mut cfg: ForwardConfig = load_config(&args.config)?;
    let c = &args.common;
    if let Some(s) = c.seed {
        let mut noise = cfg.noise.unwrap_or_default();
        noise.seed = s;
        cfg.noise = Some(noise);
    }
    if let Some(h) = c.mesh_h {
        cfg.domain.h = h;
    }
    let dir = output_dir(&c.out, &cfg.output, &cfg.name);
    let record = run_forward(&cfg, Some(&dir))?;
    if !c.quiet {
        print_json(&record)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cgo_verify(args: &CgoArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config::<DecayConfig>(p)?,
        None => DecayConfig::sector_default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = decay_study(&cfg)?;
    let dir = args.out.clone().unwrap_or_else(|| default_output_dir("cgo"));
    report.write(&dir)?;
    if !args.quiet {
        print!("{}", report.to_csv());
        let e = &report.integral_exponent;
        println!(
            "|int w| exponent {:.3} (nearest {}, lower bound {}, scaling {}): matches {}",
            e.measured, e.nearest_integer, e.lower_bound_exponent, e.scaling_exponent, e.matches
        );
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn mesh_info(args: &MeshArgs) -> Result<()> {
    let mut cfg: MeshOnly = {
        let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
        let pick = |key: &str| value.get(key).cloned().unwrap_or(serde_json::Value::Null);
        let part = serde_json::json!({ "domain": pick("domain"), "media": pick("media") });
        serde_json::from_value(part).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?
    };
    if let Some(h) = args.mesh_h {
        cfg.domain.h = h;
    }
    if !(cfg.domain.h > 0.0 && cfg.domain.h < cfg.domain.radius) {
        return Err(Error::Config(format!("mesh size h = {} outside (0, R)", cfg.domain.h)));
    }
    let media = cfg.media.resolve()?;
    let mesh = build_mesh(&cfg.domain, &media)?;
    print_json(&MeshInfo::of(&mesh))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Forward(a) => forward(&a),
        Command::Invert(a) => {
            let cfg: ExperimentConfig = load_config(&a.config)?;
            invert(cfg, &a.common)
        }
        Command::CgoVerify(a) => cgo_verify(&a),
        Command::Example(a) => {
            if a.list {
                for n in EXAMPLES {
                    println!("{n}");
                }
                return Ok(());
            }
            let name = a.name.as_deref().unwrap_or_default();
            invert(example(name)?, &a.common)
        }
        Command::MeshInfo(a) => mesh_info(&a),
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("BLT_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("BLT_THREADS = {v:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
