//! Library-level checks of the four subcommands and the config layer.

use std::path::{Path, PathBuf};

use beamsched::commands::{build_tables, cmd_index, load_tables};
use beamsched::config::{load_experiment, load_system, load_verify_grid, parse_config_str, to_toml};
use beamsched::records::{to_tsv, write_records};
use beamsched::{cmd_simulate, cmd_sweep, cmd_verify, fingerprint, ConfigFile, ExperimentSpec, RunOptions};
use beamsched_core::experiments::{self, Generator};
use beamsched_core::simulator::SimOptions;
use beamsched_core::verify::Check;
use beamsched_core::{PolicyKind, SystemConfig};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.toml"))
}

fn short(mut cfg: SystemConfig) -> SystemConfig {
    cfg.horizon = 1_500;
    cfg.warmup = 500;
    cfg
}

fn quick_opts(policies: &[PolicyKind]) -> RunOptions {
    RunOptions {
        policies: policies.to_vec(),
        n_reps: 3,
        ..RunOptions::default()
    }
}

// ── Fixtures and config ────────────────────────────────────────────────────

#[test]
fn every_fixture_parses_and_matches_its_generator() {
    for g in Generator::ALL {
        let name = format!("{g:?}").to_ascii_lowercase();
        let text = std::fs::read_to_string(fixture(&name)).unwrap();
        let parsed = parse_config_str(&text, &fixture(&name)).unwrap();
        match parsed {
            ConfigFile::System(cfg) => assert_eq!(cfg, g.config(0, 1).unwrap(), "{name}"),
            ConfigFile::Experiment(spec) => {
                assert_eq!(spec.generator, Some(g));
                assert_eq!(spec.values, g.default_values());
                let pts = spec.points().unwrap();
                for p in &pts {
                    assert_eq!(p.config, g.config(p.value.unwrap(), 1).unwrap());
                }
            }
        }
    }
}

#[test]
fn fig3a_fixture_has_the_caption_shape() {
    let cfg = load_system(&fixture("fig3a")).unwrap();
    assert_eq!((cfg.num_users, cfg.num_beams), (6, 4));
    assert!(cfg.users.iter().all(|u| u.buffer_size == 400));
    assert_eq!((cfg.horizon, cfg.warmup), (20_000, 10_000));
}

#[test]
fn fixtures_round_trip() {
    for name in ["fig3a", "fig3b", "fig4a", "table2"] {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        let first = parse_config_str(&text, Path::new(name)).unwrap();
        let again = parse_config_str(&to_toml(&first), Path::new(name)).unwrap();
        assert_eq!(first, again, "{name}");
    }
}

#[test]
fn b_equal_k_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiments::fig3a().unwrap();
    cfg.num_beams = 6;
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, to_toml(&ConfigFile::System(cfg))).unwrap();
    let err = load_system(&path).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("1 <= B < K"), "{err}");
}

#[test]
fn system_file_loads_as_single_point_experiment() {
    let spec = load_experiment(&fixture("fig3b")).unwrap();
    assert_eq!(spec.name, "fig3b");
    assert_eq!(spec.points().unwrap().len(), 1);
}

#[test]
fn verify_grid_fixture_loads() {
    let grid = load_verify_grid(&fixture("verify_quick")).unwrap();
    assert_eq!(grid.seed, 7);
    assert_eq!(grid.buffer_size, 20);
}

// ── index ──────────────────────────────────────────────────────────────────

#[test]
fn index_tables_are_monotone_and_rerun_identically() {
    let cfg = load_system(&fixture("fig3b")).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cmd_index(&cfg, a.path(), false).unwrap();
    let second = cmd_index(&cfg, b.path(), false).unwrap();
    assert!(first.all_non_increasing);
    assert_eq!(first.files.len(), cfg.num_users);
    for (fa, fb) in first.files.iter().zip(&second.files) {
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
    }
    // Rerunning into the same directory leaves the bytes unchanged.
    let before = std::fs::read(&first.files[0]).unwrap();
    cmd_index(&cfg, a.path(), false).unwrap();
    assert_eq!(std::fs::read(&first.files[0]).unwrap(), before);

    // The text form keeps 12 significant digits.
    let loaded = load_tables(a.path(), cfg.num_users).unwrap();
    for (l, t) in loaded.iter().zip(&first.tables) {
        assert_eq!(l.user_id, t.user_id);
        for (x, y) in l.full.iter().zip(&t.full) {
            assert!((x - y).abs() <= 1e-11 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn stride_comparison_is_reported_per_user() {
    let mut cfg = load_system(&fixture("fig3b")).unwrap();
    cfg.index.sample_stride = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_index(&cfg, dir.path(), true).unwrap();
    assert_eq!(out.deviations.len(), cfg.num_users);
    for d in &out.deviations {
        assert_eq!(d.stride, 4);
        assert!(d.relative.is_finite() && d.relative >= 0.0 && d.relative <= 1.0);
    }
}

// ── simulate / sweep ───────────────────────────────────────────────────────

#[test]
fn same_seed_gives_identical_records() {
    let cfg = short(load_system(&fixture("fig3b")).unwrap());
    let opts = quick_opts(&PolicyKind::ALL);
    let a = cmd_simulate("x", &cfg, None, &opts).unwrap();
    let b = cmd_simulate("x", &cfg, None, &opts).unwrap();
    assert_eq!(to_tsv(&a), to_tsv(&b));
    assert_eq!(a.len(), 3 * PolicyKind::ALL.len());
}

#[test]
fn prebuilt_tables_match_tables_built_on_the_fly() {
    let cfg = short(load_system(&fixture("fig3b")).unwrap());
    let tables = build_tables(&cfg, &cfg.index).unwrap();
    let opts = quick_opts(&[PolicyKind::Whittle]);
    let a = cmd_simulate("x", &cfg, Some(&tables), &opts).unwrap();
    let b = cmd_simulate("x", &cfg, None, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_arrivals_leave_every_metric_at_zero() {
    let cfg = short(load_system(&fixture("fig3a")).unwrap());
    let opts = RunOptions {
        sim: SimOptions {
            suppress_arrivals: true,
            ..SimOptions::default()
        },
        ..quick_opts(&PolicyKind::ALL)
    };
    let recs = cmd_simulate("empty", &cfg, None, &opts).unwrap();
    for r in &recs {
        match r.metric.as_str() {
            "avg_cost" | "avg_active_beams" => assert_eq!((r.mean, r.ci_half_width), (0.0, 0.0), "{r:?}"),
            // No packet ever departs, so there is no delay sample at all.
            "avg_delay" => assert_eq!(r.n_reps, 0, "{r:?}"),
            m => panic!("unexpected metric {m}"),
        }
    }
}

#[test]
fn single_point_sweep_equals_simulate() {
    let cfg = short(experiments::fig3b().unwrap());
    let mut spec = ExperimentSpec::for_system("one", cfg.clone());
    spec.n_reps = 3;
    spec.policies = vec![PolicyKind::Mws, PolicyKind::Whittle];
    let swept = cmd_sweep(&spec, &SimOptions::default()).unwrap();
    let simulated = cmd_simulate("one", &cfg, None, &quick_opts(&spec.policies)).unwrap();
    assert_eq!(swept, simulated);
}

#[test]
fn fingerprints_match_an_independent_re_resolution() {
    let mut spec = load_experiment(&fixture("fig4b")).unwrap();
    spec.values = vec![4, 6];
    spec.n_reps = 2;
    spec.horizon = Some(800);
    spec.policies = vec![PolicyKind::Lqf];
    let recs = cmd_sweep(&spec, &SimOptions::default()).unwrap();
    for r in &recs {
        let mut cfg = Generator::Fig4b.config(r.point.unwrap(), 1).unwrap();
        cfg.horizon = 800;
        cfg.warmup = 400;
        assert_eq!(r.fingerprint, fingerprint(&cfg));
    }
    assert_ne!(recs[0].fingerprint, recs[3].fingerprint);
}

#[test]
fn record_files_are_rewritten_byte_identically() {
    let cfg = short(experiments::fig3b().unwrap());
    let recs = cmd_simulate("x", &cfg, None, &quick_opts(&[PolicyKind::Random])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/records.tsv");
    write_records(&path, &recs).unwrap();
    let tsv = std::fs::read(&path).unwrap();
    let json = std::fs::read(path.with_extension("json")).unwrap();
    write_records(&path, &recs).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), tsv);
    assert_eq!(std::fs::read(path.with_extension("json")).unwrap(), json);
    let back: Vec<beamsched::ResultRecord> = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, recs);
}

#[test]
fn trace_files_are_written_per_policy() {
    let mut cfg = short(experiments::fig3b().unwrap());
    cfg.horizon = 50;
    cfg.warmup = 10;
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        trace: Some(dir.path().join("trace.tsv")),
        ..quick_opts(&[PolicyKind::Lqf, PolicyKind::Wfq])
    };
    cmd_simulate("x", &cfg, None, &opts).unwrap();
    for p in ["lqf", "wfq"] {
        let text = std::fs::read_to_string(dir.path().join(format!("trace.{p}.tsv"))).unwrap();
        assert_eq!(text.lines().count(), 51, "{p}");
    }
}

// ── verify ─────────────────────────────────────────────────────────────────

#[test]
fn verify_quick_grid_passes_and_is_deterministic() {
    let grid = load_verify_grid(&fixture("verify_quick")).unwrap();
    let a = cmd_verify(&grid, false).unwrap();
    let b = cmd_verify(&grid, false).unwrap();
    assert!(a.passed, "{}", a.to_text());
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn injected_fault_breaks_value_monotonicity() {
    let mut grid = load_verify_grid(&fixture("verify_quick")).unwrap();
    grid.checks = vec![Check::ValueMonotone];
    let rep = cmd_verify(&grid, true).unwrap();
    assert!(!rep.passed);
    assert!(rep.get(Check::ValueMonotone).unwrap().violations > 0);
}
