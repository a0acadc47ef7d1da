//! `nimc` command-line interface. Every run prints one JSON report on stdout
//! (also written to `<out>/report.json`). Exit status: 0 success, 2 usage
//! error, 1 runtime error.

mod args;
mod commands;
mod config;
mod report;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{Cli, Command, Common};
use nimc_core::NimcError;
use report::RunReport;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<NimcError> for CliError {
    fn from(e: NimcError) -> Self {
        match e {
            NimcError::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn run<A, F>(name: &str, args: A, common: impl Fn(&A) -> &Common, f: F) -> Result<RunReport, CliError>
where
    A: Serialize + DeserializeOwned,
    F: Fn(&A, &mut RunReport) -> Result<(), CliError>,
{
    let config_path = common(&args).config.clone();
    let args = config::merge_config(args, config_path.as_deref()).map_err(CliError::Usage)?;
    let c = common(&args);
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot start thread pool: {e}")))?;
    }
    let echo = serde_json::to_value(&args).unwrap_or(serde_json::Value::Null);
    let mut report = RunReport::new(name, echo, c.seed.unwrap_or(0));
    let start = Instant::now();
    f(&args, &mut report)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(dir) = &common(&args).out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("report.json");
        report.output(&path);
        std::fs::write(&path, report.to_json()).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(report)
}

fn dispatch(cmd: Command) -> Result<RunReport, CliError> {
    match cmd {
        Command::Moments(a) => run("moments", a, |a| &a.common, commands::moments),
        Command::GenSynthetic(a) => run("gen-synthetic", a, |a| &a.common, commands::gen_synthetic),
        Command::Train(a) => run("train", a, |a| &a.common, commands::train_cmd),
        Command::HessianProbe(a) => run("hessian-probe", a, |a| &a.common, commands::hessian_probe),
        Command::PopulationHessian(a) => run("population-hessian", a, |a| &a.common, commands::population_hessian),
        Command::TensorInit(a) => run("tensor-init", a, |a| &a.common, commands::tensor_init_cmd),
        Command::RecoveryGrid(a) => run("recovery-grid", a, |a| &a.common, commands::recovery_grid_cmd),
        Command::Cluster(a) => run("cluster", a, |a| &a.common, commands::cluster_cmd),
        Command::RmseEval(a) => run("rmse-eval", a, |a| &a.common, commands::rmse_cmd),
        Command::PuEval(a) => run("pu-eval", a, |a| &a.common, commands::pu_cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NIMC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            print!("{}", report.to_json());
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
