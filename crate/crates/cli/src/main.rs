use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradpot::scenario::{self, RunOptions, Scenario};
use gradpot::spaces::{norm, Space};
use gradpot::{Error, GridField};

#[derive(Parser)]
#[command(name = "gradpot", version, about = "Gradient potential estimates for fully nonlinear elliptic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario on its grid ladder and run its audits.
    Run {
        /// Scenario TOML file, or the name of a built-in scenario.
        file: String,
        /// Override the grid ladder, e.g. 64,128,256.
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<usize>>,
        /// Worker threads for the audits.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// List the built-in scenarios.
    List {
        /// Print the TOML source of one scenario.
        #[arg(long)]
        show: Option<String>,
    },
    /// Evaluate a norm functional of a binary field file.
    Norms {
        field: PathBuf,
        /// lorentz:q,gamma | marcinkiewicz:q | morrey:q,s | bmo:R
        #[arg(long)]
        space: String,
    },
}

fn code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) => 2,
        Error::Convergence { .. } => 3,
        Error::Resolution(_) => 4,
        _ => 1,
    }
}

fn load(file: &str) -> gradpot::Result<Scenario> {
    let path = Path::new(file);
    if !path.exists() {
        if let Some(s) = scenario::builtin(file) {
            return Ok(s);
        }
    }
    Scenario::from_file(path)
}

fn run(file: &str, grids: Option<Vec<usize>>, jobs: Option<usize>, out: &Path) -> gradpot::Result<bool> {
    let s = load(file)?;
    let summary = s.run(out, &RunOptions { grids, jobs })?;
    for v in &summary.verdicts {
        println!("{:<32} {}", v.audit, serde_json::to_value(v.verdict)?.as_str().unwrap_or("?"));
    }
    println!("artifacts in {}", out.display());
    Ok(summary.all_reached())
}

fn norms(field: &Path, space: &str) -> gradpot::Result<()> {
    let space = Space::parse(space)?;
    let g = GridField::read_binary(field)?;
    let report = norm(&g, &space).map_err(|e| match e {
        Error::Argument(m) => Error::Parse(m),
        other => other,
    })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { file, grids, jobs, out } => run(&file, grids, jobs, &out),
        Command::List { show: Some(name) } => match scenario::builtin_source(&name) {
            Some(text) => {
                print!("{text}");
                Ok(true)
            }
            None => Err(Error::Parse(format!("no built-in scenario `{name}`"))),
        },
        Command::List { show: None } => {
            for (name, about) in scenario::builtins() {
                println!("{name:<28} {about}");
            }
            Ok(true)
        }
        Command::Norms { field, space } => norms(&field, &space).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradpot: an audit failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("gradpot: {e}");
            ExitCode::from(code(&e))
        }
    }
}
