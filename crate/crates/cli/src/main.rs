use std::path::PathBuf;
use std::process::ExitCode;

use beamsched::commands::{load_tables, RunOptions};
use beamsched::config::{load_experiment, load_system, load_verify_grid, to_toml};
use beamsched::records::{to_tsv, write_records};
use beamsched::{cmd_index, cmd_simulate, cmd_sweep, cmd_verify, CliError, CliResult, ConfigFile, ExperimentSpec};
use beamsched_core::experiments::Generator;
use beamsched_core::simulator::SimOptions;
use beamsched_core::verify::VerifyGrid;
use beamsched_core::PolicyKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beamsched", version, about = "Whittle-index beam scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build per-user index tables.
    Index {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `user_<i>.tsv`.
        #[arg(long)]
        out: PathBuf,
        /// Override the anchor stride.
        #[arg(long)]
        stride: Option<usize>,
        /// Also report the deviation from stride-1 tables.
        #[arg(long)]
        compare_stride: bool,
    },
    /// Run every requested policy on one system.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory of prebuilt tables; built on the fly when absent.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        policies: Vec<PolicyKind>,
        #[command(flatten)]
        run: RunFlags,
        /// Write a per-slot trace of the first replication for each policy.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a parameter sweep from a spec file or a built-in generator.
    Sweep {
        #[arg(long, conflicts_with = "generator")]
        spec: Option<PathBuf>,
        #[arg(long)]
        generator: Option<Generator>,
        /// Sweep values (K or B), overriding the spec.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run the structural property suite.
    Verify {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print a built-in parameter set as a config file.
    Fixture { generator: Generator },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Records file (tab-separated); a `.json` twin is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    suppress_arrivals: bool,
}

impl RunFlags {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(s) = self.seed {
            spec.seed = Some(s);
        }
        if let Some(r) = self.reps {
            spec.n_reps = r;
        }
        if let Some(h) = self.horizon {
            spec.horizon = Some(h);
        }
        if let Some(w) = self.warmup {
            spec.warmup = Some(w);
        }
        if let Some(o) = &self.out {
            spec.output = Some(o.clone());
        }
    }

    fn sim(&self) -> SimOptions {
        SimOptions {
            suppress_arrivals: self.suppress_arrivals,
            ..SimOptions::default()
        }
    }
}

fn emit(records: &[beamsched::ResultRecord], out: Option<&PathBuf>) -> CliResult<()> {
    match out {
        Some(path) => write_records(path, records),
        None => {
            print!("{}", to_tsv(records));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Index {
            config,
            out,
            stride,
            compare_stride,
        } => {
            let mut cfg = load_system(&config)?;
            if let Some(s) = stride {
                cfg.index.sample_stride = s;
            }
            let outcome = cmd_index(&cfg, &out, compare_stride)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            println!("non_increasing\t{}", outcome.all_non_increasing);
            for d in &outcome.deviations {
                println!(
                    "user {}\tstride {} vs 1\tmax_abs {:.6e}\trelative {:.4}",
                    d.user, d.stride, d.max_abs, d.relative
                );
            }
            if outcome.all_non_increasing {
                Ok(())
            } else {
                Err(CliError::PropertyFailure("index table is not non-increasing".into()))
            }
        }
        Command::Simulate {
            config,
            tables,
            policies,
            run,
            trace,
        } => {
            let mut spec = ExperimentSpec::for_system("", load_system(&config)?);
            run.apply(&mut spec);
            let cfg = spec.points().map_err(CliError::Validation)?.remove(0).config;
            let tables = tables.map(|dir| load_tables(&dir, cfg.num_users)).transpose()?;
            let opts = RunOptions {
                policies: if policies.is_empty() { PolicyKind::ALL.to_vec() } else { policies },
                n_reps: spec.n_reps,
                seed_stride: spec.seed_stride,
                trace,
                sim: run.sim(),
                ..RunOptions::default()
            };
            let name = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let records = cmd_simulate(&name, &cfg, tables.as_deref(), &opts)?;
            emit(&records, spec.output.as_ref())
        }
        Command::Sweep {
            spec,
            generator,
            values,
            run,
        } => {
            let mut spec = match (spec, generator) {
                (Some(path), _) => load_experiment(&path)?,
                (None, Some(g)) => ExperimentSpec::for_generator(g),
                (None, None) => {
                    return Err(CliError::Validation(beamsched_core::Error::Config(
                        "pass --spec or --generator".into(),
                    )))
                }
            };
            if !values.is_empty() {
                spec.values = values;
            }
            run.apply(&mut spec);
            let records = cmd_sweep(&spec, &run.sim())?;
            emit(&records, spec.output.as_ref())
        }
        Command::Verify {
            grid,
            seed,
            out,
            inject_fault,
        } => {
            let mut grid = match grid {
                Some(path) => load_verify_grid(&path)?,
                None => VerifyGrid::default(),
            };
            if let Some(s) = seed {
                grid.seed = s;
            }
            let report = cmd_verify(&grid, inject_fault)?;
            let text = report.to_text();
            match &out {
                Some(path) => std::fs::write(path, &text).map_err(|e| CliError::io(path, e))?,
                None => print!("{text}"),
            }
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.check.name())
                    .collect();
                Err(CliError::PropertyFailure(format!("failed checks: {}", failed.join(", "))))
            }
        }
        Command::Fixture { generator } => {
            let file = match generator.axis() {
                beamsched_core::experiments::SweepAxis::None => {
                    ConfigFile::System(generator.config(0, 1).map_err(CliError::Validation)?)
                }
                _ => {
                    let mut spec = ExperimentSpec::for_generator(generator);
                    spec.values = generator.default_values();
                    if matches!(generator, Generator::Table1 | Generator::Table2) {
                        spec.n_reps = 50;
                    }
                    ConfigFile::Experiment(spec)
                }
            };
            print!("{}", to_toml(&file));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
