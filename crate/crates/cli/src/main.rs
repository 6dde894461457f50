use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wfse_core::bounds::BoundRegion;
use wfse_core::defenses::{apply_defense, merged_theoretical_error, DefenseSpec};
use wfse_core::pipeline::{self, emit_report, read_report, run_estimation, summary_csv, DatasetSource, PipelineError, RunConfig};
use wfse_core::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "wfse", version, about = "Security estimation for website-fingerprinting defenses")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory or file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth BER/MI.
    Synth,
    /// Apply a defense to a trace directory or manifest.
    Defend {
        /// Trace root directory or manifest file.
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the estimation pipeline.
    Estimate,
    /// Write the Fano/Kovalevskij region as CSV.
    Bounds {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 400)]
        points: usize,
    },
    /// Theoretical Bayes error of the merged-trace defense.
    MergedOracle {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        m: Vec<usize>,
        /// Reject M above the number of classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Summarise a report written by `estimate`.
    Report {
        /// Path to report.json.
        #[arg(long)]
        input: PathBuf,
    },
}

fn config_text(global: &Global) -> Result<String, PipelineError> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::Config("--config is required".into()))?;
    fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn parse_toml<T: serde::de::DeserializeOwned>(global: &Global) -> Result<T, PipelineError> {
    toml::from_str(&config_text(global)?).map_err(|e| PipelineError::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn out_dir(global: &Global) -> Result<&Path, PipelineError> {
    let dir = global
        .out
        .as_deref()
        .ok_or_else(|| PipelineError::Config("--out is required".into()))?;
    fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn synth_cmd(global: &Global) -> Result<(), PipelineError> {
    let mut spec: SynthSpec = parse_toml(global)?;
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    let dir = out_dir(global)?;
    let data = synth::generate(&spec)?;
    match &data.traces {
        Some(ds) => ds.write_dir(&dir.join("traces"))?,
        None => {
            let mut csv = String::from("label");
            for j in 0..data.features.cols() {
                csv += &format!(",x{j}");
            }
            csv.push('\n');
            for i in 0..data.features.rows() {
                csv += &data.features.labels()[i].to_string();
                for v in data.features.row(i) {
                    csv += &format!(",{v}");
                }
                csv.push('\n');
            }
            let path = dir.join("features.csv");
            fs::write(&path, csv).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        }
    }
    #[derive(Serialize)]
    struct Oracles {
        spec: SynthSpec,
        ber: synth::Oracle,
        mi_bits: synth::Oracle,
    }
    let oracles = Oracles {
        ber: synth::oracle_ber(&spec)?,
        mi_bits: synth::oracle_mi(&spec)?,
        spec,
    };
    write_json(&dir.join("oracle.json"), &oracles)?;
    println!("BER {:.6}  MI {:.6} bits", oracles.ber.value, oracles.mi_bits.value);
    Ok(())
}

fn defend_cmd(global: &Global, input: &Path) -> Result<(), PipelineError> {
    let mut spec: DefenseSpec = parse_toml(global)?;
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    let source = if input.is_dir() {
        DatasetSource::Dir { root: input.into() }
    } else {
        DatasetSource::Manifest { path: input.into() }
    };
    let (dataset, summary) = pipeline::load_dataset(&source)?.sanitized();
    dataset.validate()?;
    let dir = out_dir(global)?;
    let (defended, stats) = apply_defense(&dataset, &spec)?;
    defended.write_dir(&dir.join("traces"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        defense: &'a DefenseSpec,
        sanitize: wfse_core::traces::SanitizeSummary,
        overhead: wfse_core::defenses::OverheadStats,
    }
    write_json(
        &dir.join("overhead.json"),
        &Summary {
            defense: &spec,
            sanitize: summary,
            overhead: stats.clone(),
        },
    )?;
    println!(
        "{} traces, bandwidth overhead {:.4}, mean delay {:.4}s",
        stats.traces, stats.bandwidth_overhead, stats.mean_delay_per_trace
    );
    Ok(())
}

fn estimate_cmd(global: &Global) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::from_toml(&config_text(global)?)?;
    if let Some(seed) = global.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output = out.clone();
    }
    let report = run_estimation(&cfg)?;
    let (json, csv) = emit_report(&report, &cfg.output)?;
    log::info!("wrote {} and {}", json.display(), csv.display());
    print_aggregate(&report);
    Ok(())
}

fn print_aggregate(report: &pipeline::EstimateReport) {
    let failed = report.folds.iter().filter(|f| f.success().is_none()).count();
    println!(
        "{} classes, {} traces, {} folds ({} failed)",
        report.num_classes,
        report.num_traces,
        report.folds.len(),
        failed
    );
    if let Some(a) = &report.aggregate {
        let pm = |s: Option<f64>| s.map(|v| format!(" +- {v:.4}")).unwrap_or_default();
        println!("BER lower bound {:.4}{}", a.ber.mean, pm(a.ber.std));
        println!("MI {:.4}{} bits", a.mi_bits.mean, pm(a.mi_bits.std));
        if let Some(e) = &a.classifier_error {
            println!("classifier error {:.4}{}", e.mean, pm(e.std));
        }
        println!("bounds: {:?}", a.consistency);
    }
}

fn bounds_cmd(global: &Global, classes: usize, points: usize) -> Result<(), PipelineError> {
    let region = BoundRegion::grid(classes, points).map_err(|e| PipelineError::Config(e.to_string()))?;
    let io_err = |e: io::Error| PipelineError::Data(e.to_string());
    match &global.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(io_err)?;
            region.write_csv(io::BufWriter::new(file)).map_err(io_err)
        }
        None => region.write_csv(io::stdout().lock()).map_err(io_err),
    }
}

fn merged_oracle_cmd(ms: &[usize], classes: Option<usize>) -> Result<(), PipelineError> {
    let mut out = io::stdout().lock();
    let io_err = |e: io::Error| PipelineError::Data(e.to_string());
    writeln!(out, "M,bayes_error").map_err(io_err)?;
    for &m in ms {
        if let Some(c) = classes {
            if m > c {
                return Err(PipelineError::Config(format!("M={m} exceeds {c} classes")));
            }
        }
        let e = merged_theoretical_error(m)?;
        writeln!(out, "{m},{e}").map_err(io_err)?;
    }
    Ok(())
}

fn report_cmd(global: &Global, input: &Path) -> Result<(), PipelineError> {
    let report = read_report(input)?;
    print_aggregate(&report);
    if let Some(path) = &global.out {
        fs::write(path, summary_csv(&report)).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth => synth_cmd(g),
        Command::Defend { input } => defend_cmd(g, input),
        Command::Estimate => estimate_cmd(g),
        Command::Bounds { classes, points } => bounds_cmd(g, *classes, *points),
        Command::MergedOracle { m, classes } => merged_oracle_cmd(m, *classes),
        Command::Report { input } => report_cmd(g, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
