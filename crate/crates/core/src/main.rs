use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tndipw::data::{read_sample_csv, write_population_csv};
use tndipw::estimators::{self, bootstrap_ci, IntervalMethod, IpwSpec, Method};
use tndipw::harness::{self, ExperimentConfig, Profile};
use tndipw::simulator::generate_population;

/// Simulation testbed for test-site studies with population controls.
#[derive(Parser, Debug)]
#[command(name = "tndipw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a complete-data population and write it as CSV.
    Simulate(Common),
    /// Draw one sample (or read one) and run a single method.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ipw-correct")]
        method: Method,
        /// Observed-sample CSV to analyse instead of a simulated draw.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Assumed testing prevalence for IPW on an input CSV.
        #[arg(long)]
        q0: Option<f64>,
    },
    /// Run the Monte Carlo experiment and write replicates, summary and table.
    Experiment(Common),
    /// Re-render a report from an experiment's output directory.
    Report {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: u8,
    /// TOML experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    n_tested: Option<usize>,
    #[arg(long)]
    n_controls: Option<usize>,
    #[arg(long)]
    bootstrap_b: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Box<dyn std::error::Error + Send + Sync>> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::profile(self.profile, self.scenario),
        };
        let set = |target: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *target = v;
            }
        };
        set(&mut config.replicates, self.replicates);
        set(&mut config.population_size, self.population);
        set(&mut config.n_tested, self.n_tested);
        set(&mut config.n_controls, self.n_controls);
        set(&mut config.bootstrap_b, self.bootstrap_b);
        if let Some(seed) = self.seed {
            config.base_seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = Some(dir.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

type AnyResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

fn simulate(common: &Common) -> AnyResult {
    let config = common.config()?;
    let spec = config.resolved_spec()?;
    let population = generate_population(&spec, config.population_size, config.base_seed)?;
    match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("population.csv");
            write_population_csv(std::fs::File::create(&path)?, &population.records)?;
            eprintln!("wrote {} records to {}", population.records.len(), path.display());
        }
        None => write_population_csv(io::stdout().lock(), &population.records)?,
    }
    Ok(())
}

fn estimate(common: &Common, method: Method, input: Option<&Path>, q0: Option<f64>) -> AnyResult {
    let config = common.config()?;
    let estimate = match input {
        Some(path) => {
            let sample = read_sample_csv(std::fs::File::open(path)?, q0)?;
            let mut est = estimators::estimate(method, &sample, config.ci_level)?;
            if let (Method::Ipw(variant), Some(q0)) = (method, q0) {
                if config.bootstrap_b >= 2 {
                    let ci = bootstrap_ci(&sample, &IpwSpec::new(variant, q0), config.bootstrap_b, config.ci_level, config.base_seed)?;
                    est.interval = Some((ci.lower, ci.upper));
                    est.interval_method = Some(IntervalMethod::PercentileBootstrap);
                    est.diagnostics.bootstrap_failures = Some(ci.failures);
                }
            }
            est
        }
        None => harness::estimate_once(&config, &config.resolved_spec()?, method)??,
    };
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &estimate)?;
    writeln!(out)?;
    Ok(())
}

fn experiment(common: &Common) -> AnyResult {
    let config = common.config()?;
    let (report, rows) = harness::run_experiment(&config)?;
    if let Some(dir) = &config.out_dir {
        harness::write_outputs(dir, &report, &rows)?;
    }
    print!("{}", harness::render_table(&report));
    Ok(())
}

fn report(out_dir: &Path) -> AnyResult {
    let report = harness::report_from_dir(out_dir)?;
    print!("{}", harness::render_table(&report));
    Ok(())
}

fn run(cli: Cli) -> AnyResult {
    match &cli.command {
        Command::Simulate(common) => simulate(common),
        Command::Estimate {
            common,
            method,
            input,
            q0,
        } => estimate(common, *method, input.as_deref(), *q0),
        Command::Experiment(common) => experiment(common),
        Command::Report { out_dir } => report(out_dir),
    }
}

fn threads(cli: &Cli) -> Option<usize> {
    match &cli.command {
        Command::Simulate(c) | Command::Experiment(c) | Command::Estimate { common: c, .. } => c.threads,
        Command::Report { .. } => None,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match threads(&cli) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(e.into()),
        },
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
