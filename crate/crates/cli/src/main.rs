use clap::{Args, Parser, Subcommand};
use mmlqg_cli::commands::{gap_table, CliError, CliResult};
use mmlqg_cli::{cmd_nash_gap, cmd_reproduce_paper, cmd_simulate, cmd_solve, ReproduceOptions, RunConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmlqg", version, about = "Major-minor partially observed LQG mean field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Number of worker threads for Monte Carlo paths.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the `out` key of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of minor agents.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
    stationary_gains: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean field fixed point and write the solution archive.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate realizations and write trajectory CSVs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Solution archive from `solve`; solved in process when omitted.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Minor agents whose series are written.
        #[arg(long, default_value_t = 10)]
        record: usize,
    },
    /// Estimate Nash gaps over a schedule of population sizes.
    NashGap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Run the built-in reference scenario end to end.
    ReproducePaper {
        #[arg(long, default_value = "paper_reproduction")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
        stationary_gains: Option<bool>,
    },
}

fn load(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.n {
        cfg.simulation.n = n;
        cfg.nash_gap.n_schedule = vec![n];
    }
    if let Some(p) = common.paths {
        cfg.simulation.paths = p;
        cfg.nash_gap.paths = p;
    }
    if let Some(sg) = common.stationary_gains {
        cfg.simulation.stationary_gains = sg;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Solve { common } => {
            let (cfg, out) = load(&common)?;
            let res = cmd_solve(&cfg, &out)?;
            print!("{}", res.report);
            println!(
                "converged in {} iterations, residual {:e}; archive {}",
                res.solution.iterations,
                res.solution.residual,
                res.archive_path.display()
            );
        }
        Command::Simulate { common, solution, record } => {
            let (cfg, out) = load(&common)?;
            let res = cmd_simulate(&cfg, solution.as_deref(), &out, record)?;
            for (dir, (major, minors)) in res.directories.iter().zip(&res.costs) {
                let mean = minors.iter().sum::<f64>() / minors.len().max(1) as f64;
                println!("{}: major cost {major:.6e}, mean minor cost {mean:.6e}", dir.display());
            }
        }
        Command::NashGap { common, solution } => {
            let (cfg, out) = load(&common)?;
            let reports = cmd_nash_gap(&cfg, solution.as_deref(), &out)?;
            print!("{}", gap_table(&reports));
        }
        Command::ReproducePaper { out, seed, n, paths, stationary_gains } => {
            let opts = ReproduceOptions { n, seed, paths, stationary_gains };
            let res = cmd_reproduce_paper(Path::new(&out), &opts)?;
            for c in &res.checks {
                println!("{c}");
            }
            println!("outputs in {}", res.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(CliError::new(1, format!("cannot start thread pool: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
