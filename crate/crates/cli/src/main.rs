use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdmr_core::sequence::protocols::{CcdmrParams, EchoParams, ProtocolKind, RabiParams, Sweep};
use ccdmr_core::sequence::Protocol;
use ccdmr_core::units::{Field, Quantity};
use ccdmr_io::config::{BlockConfig, ExperimentConfig};
use ccdmr_io::fitcsv::{fit_csv, FitModel};
use ccdmr_io::orchestrate::OUT_ENV;
use ccdmr_io::{load_config, orchestrate, parse_config, validate, Error, RunManifest, RunOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ccdmr", version, about = "Charge-capture detected magnetic resonance simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output_dir`, then $CCDMR_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write 0–255 integer matrices for every map.
    #[arg(long)]
    png_data: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanKind {
    Image,
    Readout,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every block of a configuration file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-field (or split, with --field) CCDMR spectrum of the reference NV.
    Ccdmr {
        /// Static field, e.g. 4G.
        #[arg(long, default_value = "0G")]
        field: String,
        #[command(flatten)]
        common: Common,
    },
    /// Rabi nutation of the reference NV.
    Rabi {
        #[command(flatten)]
        common: Common,
    },
    /// Hahn echo of the reference NV.
    Echo {
        #[command(flatten)]
        common: Common,
    },
    /// Image scan around the reference NV, or a read-spot map of the pad.
    Scan {
        #[arg(long, value_enum, default_value = "image")]
        kind: ScanKind,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a trace or sweep CSV and print the report as JSON.
    Fit {
        csv: PathBuf,
        /// auto, lorentzian, lorentzian2, gaussian, sinusoid, echo, double_exponential, exponential
        #[arg(long, default_value = "auto")]
        model: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))
}

fn report(m: &RunManifest, dir: &Path) -> ExitCode {
    for b in &m.blocks {
        match &b.error {
            None => println!("ok     {} ({}): {} files", b.name, b.kind, b.outputs.len()),
            Some(e) => println!("FAILED {} ({}): {e}", b.name, b.kind),
        }
    }
    println!("manifest: {}", dir.join(ccdmr_io::manifest::MANIFEST_FILE).display());
    if m.failures().next().is_some() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn execute(mut cfg: ExperimentConfig, common: Common) -> Result<ExitCode, Error> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let dir = out_dir(common.out, &cfg);
    let m = orchestrate(&cfg, &RunOptions { out_dir: dir.clone(), png_data: common.png_data })?;
    Ok(report(&m, &dir))
}

fn quick(blocks: Vec<BlockConfig>, preset: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(1, blocks);
    cfg.photophysics.preset = preset.into();
    cfg
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Run { config, common } => execute(parse_config(&read(&config)?)?, common),
        Cmd::Ccdmr { field, common } => {
            let b: Field = Quantity::parse(&field).map_err(|e| Error::Usage(e.to_string()))?;
            let p = if b.value() == 0.0 {
                CcdmrParams::default()
            } else {
                CcdmrParams {
                    frequencies: Sweep::linear(2.84e9, 2.90e9, 61),
                    dips: 2,
                    ..CcdmrParams::default()
                }
            };
            let mut cfg = quick(vec![BlockConfig::new("ccdmr", Protocol::Ccdmr(p))], "default");
            cfg.spin.field = b;
            execute(cfg, common)
        }
        Cmd::Rabi { common } => execute(quick(vec![BlockConfig::new("rabi", Protocol::Rabi(RabiParams::default()))], "rabi"), common),
        Cmd::Echo { common } => execute(quick(vec![BlockConfig::new("echo", Protocol::Echo(EchoParams::default()))], "rabi"), common),
        Cmd::Scan { kind, common } => {
            let (name, k) = match kind {
                ScanKind::Image => ("image_scan", ProtocolKind::ImageScan),
                ScanKind::Readout => ("readout_map", ProtocolKind::ReadoutMap),
            };
            execute(quick(vec![BlockConfig::new(name, Protocol::default_for(k))], "default"), common)
        }
        Cmd::Fit { csv, model, out } => {
            let rep = fit_csv(&read(&csv)?, FitModel::parse(&model)?)?;
            let text = serde_json::to_string_pretty(&rep)? + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate { config } => {
            let text = read(&config)?;
            let cfg = load_config(&text)?;
            debug_assert!(validate(&cfg).is_empty());
            println!("{}: ok ({} blocks)", config.display(), cfg.blocks.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(c) => c,
        Err(Error::Config(e)) => {
            eprintln!("configuration error:\n{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
