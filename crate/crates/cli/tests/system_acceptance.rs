//! End-to-end acceptance run. Each criterion is its own test and writes one
//! `criterion N: PASS|FAIL ...` line straight to stdout, so the lines show up
//! even when libtest captures output. The criteria run one at a time because
//! criterion 1 has a wall-clock budget.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use beamsched::config::{load_experiment, load_system};
use beamsched::{cmd_simulate, cmd_sweep, ResultRecord, RunOptions};
use beamsched_core::mdp::{stationary_distribution, Threshold};
use beamsched_core::model::step_queue;
use beamsched_core::simulator::{run_simulation_with, Estimate, SimOptions};
use beamsched_core::verify::{run_verify, Check, VerifyGrid};
use beamsched_core::whittle::index_iteration;
use beamsched_core::{PolicyKind, QueueMdp, SolverKnobs, SystemConfig, UserParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.toml"))
}

fn report(n: u32, passed: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn finish(n: u32, passed: bool, detail: String) {
    report(n, passed, &detail);
    assert!(passed, "criterion {n} failed: {detail}");
}

// ── Record helpers ─────────────────────────────────────────────────────────

/// `(point, policy) → estimate` for one metric.
fn table(records: &[ResultRecord], metric: &str) -> HashMap<(Option<usize>, PolicyKind), Estimate> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| {
            (
                (r.point, r.policy),
                Estimate {
                    mean: r.mean,
                    ci_half_width: r.ci_half_width,
                    n: r.n_reps,
                },
            )
        })
        .collect()
}

fn points(records: &[ResultRecord]) -> Vec<Option<usize>> {
    let mut pts: Vec<Option<usize>> = records.iter().map(|r| r.point).collect();
    pts.dedup();
    pts
}

/// Best baseline by mean, and whether Whittle is strictly below it.
fn whittle_vs_best(
    t: &HashMap<(Option<usize>, PolicyKind), Estimate>,
    point: Option<usize>,
) -> (Estimate, PolicyKind, Estimate, bool) {
    let w = t[&(point, PolicyKind::Whittle)];
    let (best_kind, best) = PolicyKind::ALL
        .iter()
        .filter(|&&p| p != PolicyKind::Whittle)
        .map(|&p| (p, t[&(point, p)]))
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .unwrap();
    (w, best_kind, best, w.mean < best.mean)
}

fn sweep(name: &str) -> Vec<ResultRecord> {
    let spec = load_experiment(&fixture(name)).unwrap();
    cmd_sweep(&spec, &SimOptions::default()).unwrap()
}

// ── Criteria ───────────────────────────────────────────────────────────────

#[test]
fn criterion_1_structural_suite() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let grid = VerifyGrid {
        checks: vec![
            Check::ValueMonotone,
            Check::ValueConvex,
            Check::ServiceAdvantageMonotone,
            Check::ThresholdMonotoneInTax,
            Check::PassiveMassIncreasing,
            Check::ThresholdCostSupermodular,
        ],
        ..VerifyGrid::default()
    };
    let start = Instant::now();
    let rep = run_verify(&grid).unwrap();
    let elapsed = start.elapsed();
    let parts: Vec<String> = rep
        .checks
        .iter()
        .map(|c| format!("{}={}/{}", c.check.name(), c.violations + c.errors.len(), c.cases))
        .collect();
    let in_time = elapsed <= Duration::from_secs(60);
    finish(
        1,
        rep.passed && in_time,
        format!("violations {} in {:.1}s", parts.join(" "), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_vanishing_discount() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let grid = VerifyGrid {
        checks: vec![Check::VanishingDiscount],
        ..VerifyGrid::default()
    };
    let rep = run_verify(&grid).unwrap();
    let c = rep.get(Check::VanishingDiscount).unwrap();
    finish(
        2,
        c.passed,
        format!(
            "{} of {} samples outside 0.1 or not shrinking; worst: {}",
            c.violations + c.errors.len(),
            c.cases,
            c.worst_case
        ),
    );
}

#[test]
fn criterion_3_index_oracle() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let grid = VerifyGrid {
        checks: vec![Check::IndexOracleAgreement],
        ..VerifyGrid::default()
    };
    let rep = run_verify(&grid).unwrap();
    let c = rep.get(Check::IndexOracleAgreement).unwrap();

    // q = 0: every state's index is the beam cost.
    let solver = SolverKnobs::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut q0_cases = 0;
    let mut q0_bad = Vec::new();
    for _ in 0..grid.index_params {
        let a = rng.random_range(0.1..=0.9);
        let d = rng.random_range(0.1..=0.9);
        let p = rng.random_range(1.0..=200.0);
        let user = UserParams::new(a, d, p, 0.0, 60).unwrap();
        for x in [0, 15, 30, 45, 59] {
            q0_cases += 1;
            match index_iteration(x, &user, &grid.index, &solver) {
                Ok(v) if (v - p).abs() <= 1e-6 => {}
                Ok(v) => q0_bad.push(format!("a={a:.3} d={d:.3} x={x}: {v:.3e} vs P={p:.3}")),
                Err(e) => q0_bad.push(format!("a={a:.3} d={d:.3} x={x}: {e}")),
            }
        }
    }
    finish(
        3,
        c.passed && q0_bad.is_empty(),
        format!(
            "oracle disagreements {}/{} (worst {}); q=0 misses {}/{}{}",
            c.violations + c.errors.len(),
            c.cases,
            c.worst_case,
            q0_bad.len(),
            q0_cases,
            q0_bad.first().map(|s| format!(" (first: {s})")).unwrap_or_default()
        ),
    );
}

#[test]
fn criterion_4_fig3_cost() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["fig3a", "fig3b"] {
        let cfg = load_system(&fixture(name)).unwrap();
        let start = Instant::now();
        let recs = cmd_simulate(name, &cfg, None, &RunOptions::default()).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let t = table(&recs, "avg_cost");
        let (w, kind, best, lowest) = whittle_vs_best(&t, None);
        let separated = w.upper() < best.lower();
        ok &= lowest && separated && secs <= 60.0;
        parts.push(format!(
            "{name}: whittle {:.1}±{:.1} vs {kind} {:.1}±{:.1} lowest={lowest} separated={separated} {secs:.1}s",
            w.mean, w.ci_half_width, best.mean, best.ci_half_width
        ));
    }
    finish(4, ok, parts.join("; "));
}

#[test]
fn criterion_5_fig4_trends() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, increasing) in [("fig4a", true), ("fig4b", false)] {
        let recs = sweep(name);
        let t = table(&recs, "avg_cost");
        let pts = points(&recs);
        let mut trend_breaks = Vec::new();
        for &policy in &PolicyKind::ALL {
            for w in pts.windows(2) {
                let (a, b) = (t[&(w[0], policy)], t[&(w[1], policy)]);
                let wrong_way = if increasing { b.mean < a.mean } else { b.mean > a.mean };
                if wrong_way && !a.overlaps(&b) {
                    trend_breaks.push(format!("{policy}@{}", w[1].unwrap()));
                }
            }
        }
        let not_lowest: Vec<String> = pts
            .iter()
            .filter(|&&p| !whittle_vs_best(&t, p).3)
            .map(|p| p.unwrap().to_string())
            .collect();
        ok &= trend_breaks.is_empty() && not_lowest.is_empty();
        parts.push(format!(
            "{name}: trend breaks [{}], whittle not lowest at [{}]",
            trend_breaks.join(","),
            not_lowest.join(",")
        ));
    }
    finish(5, ok, parts.join("; "));
}

#[test]
fn criterion_6_fig5_delay() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["fig5a", "fig5b"] {
        let recs = sweep(name);
        let t = table(&recs, "avg_delay");
        let pts = points(&recs);
        let mut not_lowest = Vec::new();
        let mut separated = 0;
        for &p in &pts {
            let (w, _, best, lowest) = whittle_vs_best(&t, p);
            if !lowest {
                not_lowest.push(p.unwrap().to_string());
            }
            if lowest && w.upper() < best.lower() {
                separated += 1;
            }
        }
        ok &= not_lowest.is_empty() && 2 * separated > pts.len();
        parts.push(format!(
            "{name}: whittle not lowest at [{}], CI-separated at {separated}/{}",
            not_lowest.join(","),
            pts.len()
        ));
    }
    finish(6, ok, parts.join("; "));
}

/// Published active-beam means for the B sweep (K = 20), rows B = 8..=16,
/// columns random, LQF, MWS, WFQ, Whittle.
const BEAMS_VS_B: [(usize, [f64; 5]); 9] = [
    (8, [7.9994, 7.9996, 7.9996, 7.9995, 7.9989]),
    (9, [8.9992, 8.9995, 8.9995, 8.9993, 8.9987]),
    (10, [9.9993, 9.9995, 9.9995, 9.9994, 9.9987]),
    (11, [10.9985, 10.9994, 10.9994, 10.9986, 10.9978]),
    (12, [11.9984, 11.9994, 11.9994, 11.9984, 11.9979]),
    (13, [12.9985, 12.9993, 12.9993, 12.9988, 12.9978]),
    (14, [13.9988, 13.9992, 13.9992, 13.9990, 13.9983]),
    (15, [14.9986, 14.9991, 14.9991, 14.9985, 14.9977]),
    (16, [15.9985, 15.9990, 15.9990, 15.9976, 15.9968]),
];

const TABLE_COLUMNS: [PolicyKind; 5] = [
    PolicyKind::Random,
    PolicyKind::Lqf,
    PolicyKind::Mws,
    PolicyKind::Wfq,
    PolicyKind::Whittle,
];

#[test]
fn criterion_7_active_beams() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t1_recs = sweep("table1");
    let t1 = table(&t1_recs, "avg_active_beams");
    let mut worst_gap = 0.0_f64;
    for (b, row) in BEAMS_VS_B {
        for (policy, reference) in TABLE_COLUMNS.iter().zip(row) {
            worst_gap = worst_gap.max((t1[&(Some(b), *policy)].mean - reference).abs());
        }
    }
    let part_a = worst_gap <= 0.05;

    let t2_recs = sweep("table2");
    let t2 = table(&t2_recs, "avg_active_beams");
    let mut not_lowest = Vec::new();
    for (label, t, recs) in [("B", &t1, &t1_recs), ("K", &t2, &t2_recs)] {
        for p in points(recs) {
            if !whittle_vs_best(t, p).3 {
                not_lowest.push(format!("{label}={}", p.unwrap()));
            }
        }
    }
    let part_b = not_lowest.is_empty();
    finish(
        7,
        part_a && part_b,
        format!(
            "(a) worst |mean − reference| {worst_gap:.4} (≤ 0.05: {part_a}); (b) whittle not lowest at [{}]",
            not_lowest.join(",")
        ),
    );
}

#[test]
fn criterion_8_simulator_oracles() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    // Replay and conservation on every policy of a full-length fig3b run.
    let base = load_system(&fixture("fig3b")).unwrap();
    let tables = beamsched::commands::build_tables(&base, &base.index).unwrap();
    let mut replay_errors = 0usize;
    let mut conservation_errors = 0usize;
    let opts = SimOptions {
        record_log: true,
        ..SimOptions::default()
    };
    for &policy in &PolicyKind::ALL {
        let cfg = SystemConfig { policy, ..base.clone() };
        let t = (policy == PolicyKind::Whittle).then_some(tables.as_slice());
        let out = run_simulation_with(&cfg, t, &opts).unwrap();
        let log = out.log.unwrap();
        for (n, slot) in log.iter().enumerate() {
            let next: Vec<usize> = match log.get(n + 1) {
                Some(s) => s.queues.clone(),
                None => out.raw.residual.iter().map(|&r| r as usize).collect(),
            };
            for i in 0..cfg.num_users {
                let u = u8::from(slot.chosen.contains(&i));
                let x = step_queue(slot.queues[i], u, slot.channels[i], slot.arrivals[i], cfg.users[i].buffer_size)
                    .unwrap();
                replay_errors += usize::from(x != next[i]);
            }
        }
        for u in &out.metrics.per_user {
            conservation_errors +=
                usize::from(u.arrived_packets != u.departed_packets + u.dropped_packets + u.residual_packets);
        }
    }

    // One user with traffic, one silent: LQF serves the busy user whenever
    // it has a packet, so its queue follows the threshold-0 chain.
    let user = UserParams::new(0.45, 0.6, 10.0, 1.0, 12).unwrap();
    let idle = UserParams::new(0.5, 0.5, 10.0, 1.0, 12).unwrap();
    let dist = stationary_distribution(Threshold::PassiveUpTo(0), &QueueMdp::new(&user).unwrap()).unwrap();
    let expected = dist.expect(&(0..=12).map(f64::from).collect::<Vec<_>>());
    let reps = 40;
    let warmup = 1_000;
    let samples: Vec<f64> = (0..reps)
        .map(|r| {
            let cfg = SystemConfig {
                num_users: 2,
                num_beams: 1,
                users: vec![user.clone(), idle.clone()],
                horizon: 20_000,
                warmup,
                seed: 500 + r,
                policy: PolicyKind::Lqf,
                solver: Default::default(),
                index: Default::default(),
            };
            let opts = SimOptions {
                record_log: true,
                silent_users: vec![1],
                ..SimOptions::default()
            };
            let log = run_simulation_with(&cfg, None, &opts).unwrap().log.unwrap();
            let tail = &log[warmup..];
            tail.iter().map(|s| s.queues[0] as f64).sum::<f64>() / tail.len() as f64
        })
        .collect();
    let est = Estimate::from_samples(&samples);
    let sigma = est.ci_half_width / 1.96;
    let stationary_ok = (est.mean - expected).abs() <= 3.0 * sigma;

    finish(
        8,
        replay_errors == 0 && conservation_errors == 0 && stationary_ok,
        format!(
            "replay mismatches {replay_errors}, conservation breaks {conservation_errors}, \
             stationary mean {expected:.4} vs simulated {:.4} (3σ = {:.4})",
            est.mean,
            3.0 * sigma
        ),
    );
}
