//! Result records and their on-disk form.

use std::fmt::Write as _;
use std::path::Path;

use beamsched_core::experiments::SweepAxis;
use beamsched_core::simulator::Aggregate;
use beamsched_core::{IndexKnobs, PolicyKind, SolverKnobs, SystemConfig, UserParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// SHA-256 of the resolved system parameters (policy excluded).
    pub fingerprint: String,
    pub experiment: String,
    pub axis: SweepAxis,
    pub point: Option<usize>,
    pub policy: PolicyKind,
    pub metric: String,
    pub mean: f64,
    pub ci_half_width: f64,
    pub n_reps: usize,
    pub seed: u64,
}

/// The fields that decide a run's outcome, minus the policy, so records of
/// different policies on one system share a fingerprint.
#[derive(Serialize)]
struct Resolved<'a> {
    num_users: usize,
    num_beams: usize,
    users: &'a [UserParams<f64>],
    horizon: usize,
    warmup: usize,
    seed: u64,
    solver: &'a SolverKnobs<f64>,
    index: &'a IndexKnobs<f64>,
}

pub fn fingerprint(cfg: &SystemConfig) -> String {
    let view = Resolved {
        num_users: cfg.num_users,
        num_beams: cfg.num_beams,
        users: &cfg.users,
        horizon: cfg.horizon,
        warmup: cfg.warmup,
        seed: cfg.seed,
        solver: &cfg.solver,
        index: &cfg.index,
    };
    let canonical = serde_json::to_vec(&view).expect("plain data serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// One record per metric of an aggregate.
pub fn records_for(
    experiment: &str,
    axis: SweepAxis,
    point: Option<usize>,
    cfg: &SystemConfig,
    policy: PolicyKind,
    agg: &Aggregate,
) -> Vec<ResultRecord> {
    let fp = fingerprint(cfg);
    [
        ("avg_cost", agg.avg_cost),
        ("avg_delay", agg.avg_delay),
        ("avg_active_beams", agg.avg_active_beams),
    ]
    .into_iter()
    .map(|(metric, e)| ResultRecord {
        fingerprint: fp.clone(),
        experiment: experiment.to_string(),
        axis,
        point,
        policy,
        metric: metric.to_string(),
        mean: e.mean,
        ci_half_width: e.ci_half_width,
        n_reps: e.n,
        seed: cfg.seed,
    })
    .collect()
}

pub const TSV_HEADER: &str =
    "fingerprint\texperiment\taxis\tpoint\tpolicy\tmetric\tmean\tci_half_width\tn_reps\tseed";

pub fn to_tsv(records: &[ResultRecord]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in records {
        let axis = serde_json::to_value(r.axis).expect("enum serializes");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.fingerprint,
            r.experiment,
            axis.as_str().unwrap_or_default(),
            r.point.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            r.policy,
            r.metric,
            r.mean,
            r.ci_half_width,
            r.n_reps,
            r.seed
        );
    }
    out
}

/// Writes `path` (tab-separated records) and `path` with a `.json`
/// extension (the same records as one document). Both are rewritten whole.
pub fn write_records(path: &Path, records: &[ResultRecord]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, to_tsv(records)).map_err(|e| CliError::io(path, e))?;
    let json_path = path.with_extension("json");
    let json = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(&json_path, json + "\n").map_err(|e| CliError::io(json_path, e))
}
