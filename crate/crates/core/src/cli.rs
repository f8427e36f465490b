//! `windhmm` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::gibbs::run_chain;
use crate::io::{
    ingest_csv, read_draws, write_atomically, write_observations_csv, write_truth_csv, DrawHeader, DrawWriter,
};
use crate::simulate::{builtin_example, simulate_seeded, CensorRule, Dropout};
use crate::summary::{predictive_density, summarize, DEFAULT_Y_PLOT_MAX};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "WINDHMM_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "windhmm", version, about = "Sticky HDP-HMM for discrete wind speed and direction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one of the built-in three-regime datasets.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
        example: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the sequence length.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, value_enum, default_value_t = CensorRule::Identity)]
        censor: CensorRule,
        #[arg(long, default_value_t = 0.0)]
        speed_dropout: f64,
        #[arg(long, default_value_t = 0.0)]
        direction_dropout: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Truth sidecar; defaults to `<output stem>.truth.csv`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run one or more chains and write their draw files.
    Fit {
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Directory for `chain-<i>.jsonl`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a JSON posterior summary of draw files or directories.
    Summarize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Defaults to standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write per-regime predictive density tables.
    Predict {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_Y_PLOT_MAX)]
        y_max: u32,
    },
}

fn output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn simulate_cmd(
    example: u32,
    seed: u64,
    length: Option<usize>,
    censor: CensorRule,
    dropout: Dropout,
    output: Option<PathBuf>,
    truth: Option<PathBuf>,
) -> Result<()> {
    let mut spec = builtin_example(example)?;
    spec.seed = seed;
    spec.censor = censor;
    spec.dropout = dropout;
    if let Some(len) = length {
        spec.len = len;
    }
    let data = simulate_seeded(&spec)?;
    let output = output.unwrap_or_else(|| output_dir().join(format!("example-{example}.csv")));
    let truth = truth.unwrap_or_else(|| output.with_extension("truth.csv"));
    for path in [&output, &truth] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }
    write_atomically(&output, |w| write_observations_csv(w, &data.observations, &spec.circle))?;
    write_atomically(&truth, |w| write_truth_csv(w, &data.truth, &spec.circle))?;
    eprintln!("wrote {} and {}", output.display(), truth.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit_cmd(
    data: PathBuf,
    config: Option<PathBuf>,
    iters: Option<usize>,
    burnin: Option<usize>,
    thin: Option<usize>,
    seed: Option<u64>,
    chains: usize,
    output: Option<PathBuf>,
) -> Result<()> {
    let mut file = match config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(v) = iters {
        file.n_iter = v;
    }
    if let Some(v) = burnin {
        file.burn_in = v;
    }
    if let Some(v) = thin {
        file.thin = v;
    }
    if let Some(v) = seed {
        file.seed = v;
    }
    if chains == 0 {
        return Err(Error::Config("at least one chain is required".into()));
    }
    let base = file.chain_config()?;
    let obs = ingest_csv(&data, &base.circle)?;
    let dir = output.unwrap_or_else(output_dir);
    create_dir(&dir)?;
    let results: Vec<Result<(PathBuf, usize)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..chains)
            .map(|chain| {
                let mut config = base.clone();
                config.seed = base.seed.wrapping_add(chain as u64);
                let obs = obs.clone();
                let path = dir.join(format!("chain-{chain}.jsonl"));
                scope.spawn(move || -> Result<(PathBuf, usize)> {
                    let mut writer = DrawWriter::create(&path, &DrawHeader::new(chain, obs.len(), &config))?;
                    let kept = run_chain(obs, &config, |d| writer.write(d))?;
                    Ok((writer.finish()?, kept))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Degenerate("chain thread panicked".into()))))
            .collect()
    });
    for r in results {
        let (path, kept) = r?;
        eprintln!("wrote {kept} draws to {}", path.display());
    }
    Ok(())
}

fn summarize_cmd(inputs: Vec<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let (headers, draws) = read_draws(&inputs)?;
    let summary = summarize(&draws, &headers[0].config.circle)?;
    let json = serde_json::to_string_pretty(&summary)?;
    match output {
        Some(path) => write_atomically(&path, |w| {
            writeln!(w, "{json}").map_err(|e| Error::io(&path, e))
        }),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn predict_cmd(inputs: Vec<PathBuf>, output: Option<PathBuf>, y_max: u32) -> Result<()> {
    let (headers, draws) = read_draws(&inputs)?;
    let config = &headers[0].config;
    let densities = predictive_density(&draws, &config.circle, &config.winding()?, y_max)?;
    let dir = output.unwrap_or_else(output_dir);
    create_dir(&dir)?;
    for (r, d) in densities.iter().enumerate() {
        let circ = dir.join(format!("regime-{}-circular.tsv", r + 1));
        write_atomically(&circ, |w| {
            let mut lines = vec!["direction\tprobability".to_string(), format!("calm\t{:.12e}", d.calm)];
            lines.extend(
                config
                    .circle
                    .iter()
                    .zip(&d.circular)
                    .map(|(x, p)| format!("{:.6}\t{:.12e}", config.circle.angle(x), p)),
            );
            writeln!(w, "{}", lines.join("\n")).map_err(|e| Error::io(&circ, e))
        })?;
        let lin = dir.join(format!("regime-{}-linear.tsv", r + 1));
        write_atomically(&lin, |w| {
            let mut lines = vec!["speed\tprobability".to_string()];
            lines.extend(d.linear.iter().enumerate().map(|(y, p)| format!("{y}\t{p:.12e}")));
            writeln!(w, "{}", lines.join("\n")).map_err(|e| Error::io(&lin, e))
        })?;
    }
    eprintln!("wrote {} regime tables to {}", densities.len(), dir.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            example,
            seed,
            length,
            censor,
            speed_dropout,
            direction_dropout,
            output,
            truth,
        } => simulate_cmd(
            example,
            seed,
            length,
            censor,
            Dropout {
                speed: speed_dropout,
                direction: direction_dropout,
            },
            output,
            truth,
        ),
        Command::Fit {
            data,
            config,
            iters,
            burnin,
            thin,
            seed,
            chains,
            output,
        } => fit_cmd(data, config, iters, burnin, thin, seed, chains, output),
        Command::Summarize { inputs, output } => summarize_cmd(inputs, output),
        Command::Predict { inputs, output, y_max } => predict_cmd(inputs, output, y_max),
    }
}

/// Parse `args` (program name first) and run; returns the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
