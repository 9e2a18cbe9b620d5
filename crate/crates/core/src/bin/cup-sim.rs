use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cup_core::experiments::{Experiment, ExperimentError, Overrides};
use cup_core::simulator::{run, Scenario};

#[derive(Parser)]
#[command(name = "cup-sim", version, about = "Controlled update propagation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario sweep and write <out>/<scenario>.csv.
    Run(Flags),
    /// Check a configuration without running it.
    Validate(Flags),
    /// One run with the event trace dumped to stdout or <out>/trace.txt.
    Trace(Flags),
}

#[derive(Args, Default)]
struct Flags {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Queries per second across the network.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    keys_per_node: Option<u32>,
    /// How many keys receive queries.
    #[arg(long)]
    queried_keys: Option<u32>,
    #[arg(long)]
    replicas: Option<u32>,
    #[arg(long)]
    lifetime: Option<f64>,
    /// standard, all-out, second-chance, linear, log, push, log-based:<n>.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    push_level: Option<u32>,
    /// naive or replica-independent.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    capacity_pattern: Option<String>,
    #[arg(long)]
    capacity_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat TOML file with workload field names; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 22000 s runs with 3000 s of querying, 1024 nodes and sizes up to 4096.
    #[arg(long)]
    full_scale: bool,
}

impl Flags {
    fn overrides(&self) -> Result<Overrides, ExperimentError> {
        let file = match &self.config {
            Some(p) => Overrides::from_toml(&fs::read_to_string(p)?)?,
            None => Overrides::default(),
        };
        let cli = Overrides {
            scenario: self.scenario.clone(),
            n_nodes: self.nodes,
            keys_per_node: self.keys_per_node,
            queried_keys: self.queried_keys,
            query_rate: self.rate,
            replicas_per_key: self.replicas,
            replica_lifetime: self.lifetime,
            rng_seed: self.seed,
            policy: self.policy.clone(),
            alpha: self.alpha,
            push_level: self.push_level,
            popularity_mode: self.mode.clone(),
            capacity_pattern: self.capacity_pattern.clone(),
            capacity_fraction: self.capacity_fraction,
            reps: self.reps,
            levels: self.levels.clone(),
            sizes: self.sizes.clone(),
            full_scale: self.full_scale.then_some(true),
            ..Overrides::default()
        };
        Ok(file.merge(cli))
    }

    fn experiment(&self) -> Result<Experiment, ExperimentError> {
        Experiment::from_overrides(&self.overrides()?)
    }
}

fn out_file(dir: &Path, name: &str) -> Result<fs::File, ExperimentError> {
    fs::create_dir_all(dir)?;
    Ok(fs::File::create(dir.join(name))?)
}

fn run_cmd(flags: &Flags) -> Result<(), ExperimentError> {
    let e = flags.experiment()?;
    let table = e.run()?;
    let dir = flags.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let name = format!("{}.csv", e.scenario);
    table.write_csv(out_file(&dir, &name)?)?;
    print!("{}", table.summary());
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn trace_cmd(flags: &Flags) -> Result<(), ExperimentError> {
    let e = flags.experiment()?;
    let mut cfg = e.base.clone();
    cfg.trace = true;
    let out = run(&cfg, &Scenario::default())?;
    let trace = out.trace.unwrap_or_default();
    match &flags.out {
        Some(dir) => out_file(dir, "trace.txt")?.write_all(trace.as_bytes())?,
        None => std::io::stdout().write_all(trace.as_bytes())?,
    }
    eprintln!("{} events, total cost {}", out.events, out.ledger.total_cost());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(f) => run_cmd(f),
        Command::Validate(f) => f.experiment().map(|e| println!("ok: {} with {} points", e.scenario, e.points().len())),
        Command::Trace(f) => trace_cmd(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ (ExperimentError::Config(_) | ExperimentError::Parse(_) | ExperimentError::UnknownScenario(_))) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
