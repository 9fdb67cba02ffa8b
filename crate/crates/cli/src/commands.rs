//! The four subcommands as library functions.

use std::path::{Path, PathBuf};

use beamsched_core::experiments::SweepAxis;
use beamsched_core::model::Action;
use beamsched_core::simulator::{run_replications_with, run_simulation_with, SimOptions};
use beamsched_core::verify::{run_verify_with, VerifyGrid, VerifyReport};
use beamsched_core::whittle::build_index_table;
use beamsched_core::{IndexKnobs, PolicyKind, QueueMdp, SystemConfig, WhittleTable};

use crate::config::ExperimentSpec;
use crate::error::{CliError, CliResult};
use crate::records::{records_for, ResultRecord};

// ── index ──────────────────────────────────────────────────────────────────

pub fn table_path(dir: &Path, user: usize) -> PathBuf {
    dir.join(format!("user_{user}.tsv"))
}

/// Index tables for every user of `cfg`, built with `knobs`.
pub fn build_tables(cfg: &SystemConfig, knobs: &IndexKnobs<f64>) -> CliResult<Vec<WhittleTable<f64>>> {
    cfg.users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            build_index_table(i, u, knobs, &cfg.solver)
                .map_err(|e| CliError::from_core(format!("index table of user {i}"), e))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrideDeviation {
    pub user: usize,
    pub stride: usize,
    /// Largest `|coarse − stride-1|` over all states.
    pub max_abs: f64,
    /// `max_abs` over the stride-1 table's range.
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct IndexOutcome {
    pub tables: Vec<WhittleTable<f64>>,
    pub files: Vec<PathBuf>,
    pub all_non_increasing: bool,
    pub deviations: Vec<StrideDeviation>,
}

/// Builds and writes one `user_<i>.tsv` per user into `out`. With
/// `compare_stride`, also builds stride-1 tables and reports how far the
/// configured tables deviate from them.
pub fn cmd_index(cfg: &SystemConfig, out: &Path, compare_stride: bool) -> CliResult<IndexOutcome> {
    let tables = build_tables(cfg, &cfg.index)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut files = Vec::with_capacity(tables.len());
    for t in &tables {
        let path = table_path(out, t.user_id);
        std::fs::write(&path, t.to_text()).map_err(|e| CliError::io(&path, e))?;
        files.push(path);
    }
    let mut deviations = Vec::new();
    if compare_stride {
        let fine = IndexKnobs {
            sample_stride: 1,
            ..cfg.index.clone()
        };
        for (coarse, fine) in tables.iter().zip(build_tables(cfg, &fine)?) {
            let (lo, hi) = fine
                .full
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let max_abs = coarse
                .full
                .iter()
                .zip(&fine.full)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            deviations.push(StrideDeviation {
                user: coarse.user_id,
                stride: cfg.index.sample_stride,
                max_abs,
                relative: if hi > lo { max_abs / (hi - lo) } else { 0.0 },
            });
        }
    }
    Ok(IndexOutcome {
        all_non_increasing: tables.iter().all(WhittleTable::is_non_increasing),
        tables,
        files,
        deviations,
    })
}

/// Reads `user_<i>.tsv` for `i in 0..k` from `dir`.
pub fn load_tables(dir: &Path, k: usize) -> CliResult<Vec<WhittleTable<f64>>> {
    (0..k)
        .map(|i| {
            let path = table_path(dir, i);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            WhittleTable::from_text(&text).map_err(|e| CliError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

// ── simulate / sweep ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub policies: Vec<PolicyKind>,
    pub n_reps: usize,
    pub seed_stride: u64,
    /// Per-slot trace of replication 0, one file per policy:
    /// `<stem>.<policy>.tsv` next to this path.
    pub trace: Option<PathBuf>,
    pub sim: SimOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            policies: PolicyKind::ALL.to_vec(),
            n_reps: 20,
            seed_stride: 1_000_003,
            trace: None,
            sim: SimOptions::default(),
        }
    }
}

fn trace_path(base: &Path, policy: PolicyKind) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    base.with_file_name(format!("{stem}.{policy}.tsv"))
}

fn run_point(
    experiment: &str,
    axis: SweepAxis,
    point: Option<usize>,
    cfg: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
    opts: &RunOptions,
) -> CliResult<Vec<ResultRecord>> {
    let built;
    let tables = match tables {
        Some(t) => Some(t),
        None if opts.policies.contains(&PolicyKind::Whittle) => {
            built = build_tables(cfg, &cfg.index)?;
            Some(built.as_slice())
        }
        None => None,
    };
    let mut records = Vec::new();
    for &policy in &opts.policies {
        let mut run = cfg.clone();
        run.policy = policy;
        let tables = if policy == PolicyKind::Whittle { tables } else { None };
        let rep = run_replications_with(&run, tables, opts.n_reps, opts.seed_stride, &opts.sim)
            .map_err(|e| CliError::from_core(format!("{policy} run"), e))?;
        records.extend(records_for(experiment, axis, point, &run, policy, &rep.aggregate));
        if let Some(base) = &opts.trace {
            let sim = SimOptions {
                trace: true,
                ..opts.sim.clone()
            };
            let out = run_simulation_with(&run, tables, &sim)
                .map_err(|e| CliError::from_core(format!("{policy} trace"), e))?;
            let path = trace_path(base, policy);
            std::fs::write(&path, out.trace.unwrap_or_default()).map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(records)
}

/// All requested policies on one system, common random numbers across
/// policies. Whittle tables are built when needed and not supplied.
pub fn cmd_simulate(
    name: &str,
    cfg: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
    opts: &RunOptions,
) -> CliResult<Vec<ResultRecord>> {
    cfg.validate().map_err(CliError::Validation)?;
    run_point(name, SweepAxis::None, None, cfg, tables, opts)
}

/// Every point of `spec`, one record per (point, policy, metric).
pub fn cmd_sweep(spec: &ExperimentSpec, sim: &SimOptions) -> CliResult<Vec<ResultRecord>> {
    let points = spec.points().map_err(CliError::Validation)?;
    let opts = RunOptions {
        policies: spec.policies.clone(),
        n_reps: spec.n_reps,
        seed_stride: spec.seed_stride,
        trace: None,
        sim: sim.clone(),
    };
    let axis = spec.resolved_axis();
    let mut records = Vec::new();
    for p in &points {
        records.extend(run_point(&spec.name, axis, p.value, &p.config, None, &opts)?);
    }
    Ok(records)
}

// ── verify ─────────────────────────────────────────────────────────────────

/// Test hook: the middle state empties the queue in one step under either
/// action, so the value function dips there.
pub fn corrupt_kernel(mdp: &mut QueueMdp<f64>) -> beamsched_core::Result<()> {
    let mid = mdp.max_state() / 2;
    mdp.override_row(mid, Action::Passive, &[(0, 1.0)])?;
    mdp.override_row(mid, Action::Active, &[(0, 1.0)])
}

/// Runs the property suite. The report is returned either way; a failed
/// property only changes the process exit status.
pub fn cmd_verify(grid: &VerifyGrid, inject_fault: bool) -> CliResult<VerifyReport> {
    let hook = |mdp: &mut QueueMdp<f64>| {
        if inject_fault {
            corrupt_kernel(mdp)
        } else {
            Ok(())
        }
    };
    run_verify_with(grid, &hook).map_err(|e| CliError::from_core("verify suite", e))
}
