use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfswitch_cli::check::check;
use mfswitch_cli::output::{convergence_to_dir, ladder_csv, parse_ladder, solve_to_dir};
use mfswitch_cli::run::RunOptions;
use mfswitch_cli::{spec, CliError, EXIT_NO_CONVERGENCE, EXIT_OK, EXIT_VALIDATION};

#[derive(Parser)]
#[command(name = "mfswitch", version, about = "Mean-field FBSDEs with regime switching: check, solve, refine")]
struct Cli {
    /// worker threads (results do not depend on this)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// problem spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// replace numerics.seed
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a spec and print the report as JSON.
    Check {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Solve and write results, CSVs and a manifest.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// solve even if the check fails
        #[arg(long)]
        force: bool,
    },
    /// Solve along a refinement ladder and write convergence.csv.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// comma-separated `dt:N` rungs
        #[arg(long)]
        ladder: String,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<u8, CliError> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| CliError::malformed(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Check { spec } => {
            let (s, _) = spec::load(&spec)?;
            let checked = check(&s);
            println!("{}", serde_json::to_string_pretty(&checked.report).expect("report serializes"));
            Ok(if checked.report.pass { EXIT_OK } else { EXIT_VALIDATION })
        }
        Command::Solve { common, out, force } => {
            let (s, bytes) = spec::load(&common.spec)?;
            let opts = RunOptions { force, seed_override: common.seed_override };
            let o = solve_to_dir(&s, &bytes, &out, opts)?;
            let r = &o.results;
            eprintln!("J = {} (SE {}), converged = {}, {} sweeps", r.j, r.se, r.converged, r.iterations.picard_sweeps);
            if let Some(f) = &r.failure {
                eprintln!("{f}");
            }
            Ok(if o.converged() { EXIT_OK } else { EXIT_NO_CONVERGENCE })
        }
        Command::Convergence { common, out, ladder, force } => {
            let (s, bytes) = spec::load(&common.spec)?;
            let ladder = parse_ladder(&ladder)?;
            let opts = RunOptions { force, seed_override: common.seed_override };
            let rows = convergence_to_dir(&s, &bytes, &ladder, &out, opts)?;
            print!("{}", ladder_csv(&rows));
            Ok(if rows.iter().all(|r| r.converged) { EXIT_OK } else { EXIT_NO_CONVERGENCE })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { mfswitch_cli::EXIT_MALFORMED } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
