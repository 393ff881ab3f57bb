use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tdoa_core::removal::Mode;
use tdoa_core::simharness::CampaignConfig;
use tdoa_core::SensorArray;

use tdoa_cli::files::{read_json, to_json, ArrayFile, MeasurementFile, Measurements};
use tdoa_cli::{
    detect, localize_measurements, parse_modes, parse_point, parse_z_range, preset_or_array,
    simulate, CliError,
};

#[derive(Parser)]
#[command(
    name = "tdoa",
    version,
    about = "TDOA outlier detection, simulation and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Remove outlier TDOAs from a measurement file.
    Detect {
        #[arg(long)]
        array: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "g2g3")]
        mode: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run a Monte-Carlo campaign and write one CSV row per (mode, Z).
    Simulate {
        #[arg(long, conflicts_with = "array")]
        preset: Option<String>,
        #[arg(long)]
        array: Option<PathBuf>,
        /// Outlier counts as A:B or A:B:STEP, inclusive.
        #[arg(long, default_value = "0:10:2")]
        z_range: String,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 20)]
        positions: usize,
        #[arg(long, default_value_t = 0.007)]
        sigma: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "g2,g3,g2g3,g3g2")]
        modes: String,
        /// Master seed; a fresh one is generated and printed when absent.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; all cores when absent.
        #[arg(long, env = "TDOA_THREADS")]
        threads: Option<usize>,
    },
    /// Maximum-likelihood source position from a measurement file.
    Localize {
        #[arg(long)]
        array: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Remove outliers before localizing.
        #[arg(long)]
        detect_first: bool,
        #[arg(long, default_value = "g3")]
        mode: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Starting point x,y,z; the sensor centroid when absent.
        #[arg(long, allow_hyphen_values = true)]
        init: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_array(path: &Path) -> Result<SensorArray, CliError> {
    read_json::<ArrayFile>(path)?.to_array()
}

fn load_measurements(path: &Path, array: &SensorArray) -> Result<Measurements, CliError> {
    let m = read_json::<MeasurementFile>(path)?.resolve(array)?;
    for w in &m.warnings {
        eprintln!("{w}");
    }
    Ok(m)
}

fn parse_mode(text: &str) -> Result<Mode, CliError> {
    text.parse()
        .map_err(|e| CliError::validation(format!("mode: {e}")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Detect {
            array,
            measurements,
            alpha,
            mode,
            out,
            format,
        } => {
            let mode = parse_mode(&mode)?;
            let array = load_array(&array)?;
            let m = load_measurements(&measurements, &array)?;
            let report = detect(&array, &m, mode, alpha)?;
            let text = match format {
                Format::Json => to_json(&report),
                Format::Csv => report.to_csv(),
            };
            emit(out.as_deref(), &text)
        }
        Command::Simulate {
            preset,
            array,
            z_range,
            runs,
            positions,
            sigma,
            alpha,
            modes,
            seed,
            out,
            threads,
        } => {
            let custom = array.as_deref().map(load_array).transpose()?;
            let master_seed = seed.unwrap_or_else(|| {
                let s = rand::random::<u64>();
                eprintln!("seed: {s}");
                s
            });
            let config = CampaignConfig {
                preset: preset_or_array(preset.as_deref(), custom)?,
                z_values: parse_z_range(&z_range)?,
                runs,
                positions,
                sigma,
                alpha,
                modes: parse_modes(&modes)?,
                master_seed,
            };
            let csv = match threads {
                Some(0) => return Err(CliError::validation("threads: must be >= 1")),
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::validation(format!("threads: {e}")))?
                    .install(|| simulate(&config))?,
                None => simulate(&config)?,
            };
            emit(out.as_deref(), &csv)
        }
        Command::Localize {
            array,
            measurements,
            detect_first,
            mode,
            alpha,
            init,
            out,
        } => {
            let mode = parse_mode(&mode)?;
            let array = load_array(&array)?;
            let m = load_measurements(&measurements, &array)?;
            let init = init.as_deref().map(parse_point).transpose()?;
            let result =
                localize_measurements(&array, &m, detect_first.then_some((mode, alpha)), init)?;
            emit(out.as_deref(), &to_json(&result))?;
            if result.converged {
                Ok(())
            } else {
                Err(CliError::numeric(
                    "localization did not converge; best iterate written",
                ))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
