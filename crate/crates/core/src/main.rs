// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ephemera::config::{parse_variants, ExperimentConfig};
use ephemera::experiment::{self, ExperimentError, Options};
use ephemera::query::parse_for_device_stream;

/// Simulated ephemeral federated analytics with DP Group-By-Sum releases.
#[derive(Parser)]
#[command(name = "ephemera", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a deployment and write releases, events and reports.
    Run(Common),
    /// Run the epsilon sweep and write results.csv and summary.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of variants.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Parse and validate a query file, printing its plans.
    ValidateQuery {
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = match &common.out {
        Some(o) => o.clone(),
        None => cfg.resolve(&cfg.output_dir),
    };
    Ok((cfg, out))
}

fn validate_query(path: &Path) -> Result<(), ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    match parse_for_device_stream(&text) {
        Ok(q) => {
            println!("{q}");
            Ok(())
        }
        Err(d) => Err(ExperimentError::Validation(d.to_string())),
    }
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = load(&common)?;
            experiment::cmd_run(&cfg, &out, &Options { jobs: common.jobs, variants: None })?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Sweep { common, variants } => {
            let (cfg, out) = load(&common)?;
            let variants = variants.map(|v| parse_variants(&v)).transpose()?;
            experiment::cmd_sweep(&cfg, &out, &Options { jobs: common.jobs, variants })?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::ValidateQuery { path } => validate_query(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
