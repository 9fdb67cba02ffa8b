//! Slot-synchronous Monte Carlo engine.
//!
//! Per slot `n`: record holding costs, let the policy pick users from the
//! queue lengths, charge `P_i` per selected user, serve the head packet of
//! each selected user whose channel is good, then append arrivals (stamped
//! `n + 1`) or count drops at full buffers.
//!
//! Randomness comes from three ChaCha8 streams of the same seed: policy
//! tie-breaks, channels and arrivals. Channel and arrival draws are made for
//! every user in every slot, whatever the policy does, so runs of different
//! policies with one seed see the same sample path.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PolicyKind, SystemConfig};
use crate::policies::{Scheduler, Selection};
use crate::whittle::WhittleTable;

const POLICY_STREAM: u64 = 0;
const CHANNEL_STREAM: u64 = 1;
const ARRIVAL_STREAM: u64 = 2;

// ── State ──────────────────────────────────────────────────────────────────

/// Queues of packet timestamps plus the three random streams.
#[derive(Debug, Clone)]
pub struct SimState {
    pub queues: Vec<VecDeque<u64>>,
    pub slot: u64,
    pub policy_rng: ChaCha8Rng,
    pub channel_rng: ChaCha8Rng,
    pub arrival_rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(num_users: usize, seed: u64) -> Self {
        let stream = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            queues: vec![VecDeque::new(); num_users],
            slot: 0,
            policy_rng: stream(POLICY_STREAM),
            channel_rng: stream(CHANNEL_STREAM),
            arrival_rng: stream(ARRIVAL_STREAM),
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }
}

// ── Options and outputs ────────────────────────────────────────────────────

/// Test and debugging hooks; all off by default.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Emit a tab-separated per-slot trace.
    pub trace: bool,
    /// Keep every slot's `(queues, selection, channels, arrivals)`.
    pub record_log: bool,
    /// Replace every arrival draw by "no arrival".
    pub suppress_arrivals: bool,
    /// Users whose arrival draws are all replaced by "no arrival".
    pub silent_users: Vec<usize>,
    /// Invert every channel draw (decisions must not change).
    pub invert_channels: bool,
}

/// One slot as seen by the replay checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub queues: Vec<usize>,
    pub chosen: Vec<usize>,
    pub channels: Vec<u8>,
    pub arrivals: Vec<u8>,
}

/// Raw per-slot and per-user accumulators of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAccumulators {
    pub num_beams: usize,
    /// Total cost of each slot.
    pub slot_cost: Vec<f64>,
    /// Per-user cost of each slot, `user_slot_cost[i][n]`.
    pub user_slot_cost: Vec<Vec<f64>>,
    /// Number of selected users in each slot.
    pub active: Vec<usize>,
    /// Slots in which each user was selected.
    pub user_active: Vec<u64>,
    pub delay_sum: Vec<u64>,
    pub departed: Vec<u64>,
    pub dropped: Vec<u64>,
    pub arrived: Vec<u64>,
    pub residual: Vec<u64>,
}

impl RawAccumulators {
    fn new(k: usize, horizon: usize, num_beams: usize) -> Self {
        Self {
            num_beams,
            slot_cost: Vec::with_capacity(horizon),
            user_slot_cost: vec![Vec::with_capacity(horizon); k],
            active: Vec::with_capacity(horizon),
            user_active: vec![0; k],
            delay_sum: vec![0; k],
            departed: vec![0; k],
            dropped: vec![0; k],
            arrived: vec![0; k],
            residual: vec![0; k],
        }
    }

    pub fn horizon(&self) -> usize {
        self.slot_cost.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub avg_cost: f64,
    /// `None` when the user had no departures.
    pub avg_delay: Option<f64>,
    /// Fraction of slots in which the user held a beam.
    pub avg_active: f64,
    pub departed_packets: u64,
    pub dropped_packets: u64,
    pub residual_packets: u64,
    pub arrived_packets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Mean slot cost over slots `warmup..T`.
    pub avg_cost: f64,
    /// Mean delay over all departed packets; `None` without departures.
    pub avg_delay: Option<f64>,
    /// Mean number of selected users over all `T` slots.
    pub avg_active_beams: f64,
    pub per_user: Vec<UserMetrics>,
    pub departed_packets: u64,
    pub dropped_packets: u64,
    pub residual_packets: u64,
    pub arrived_packets: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: MetricsSummary,
    pub raw: RawAccumulators,
    pub trace: Option<String>,
    pub log: Option<Vec<SlotRecord>>,
}

// ── Engine ─────────────────────────────────────────────────────────────────

fn check_tables(config: &SystemConfig, tables: Option<&[WhittleTable<f64>]>) -> Result<()> {
    match (config.policy, tables) {
        (PolicyKind::Whittle, None) => Err(Error::Config("whittle policy needs index tables".into())),
        (PolicyKind::Whittle, Some(t)) => {
            if t.len() != config.num_users {
                return Err(Error::LengthMismatch {
                    what: "index tables",
                    got: t.len(),
                    expected: config.num_users,
                });
            }
            for (i, (table, user)) in t.iter().zip(&config.users).enumerate() {
                if table.full.len() != user.buffer_size + 1 {
                    return Err(Error::Config(format!(
                        "table {i} covers states 0..={}, buffer is {}",
                        table.full.len().saturating_sub(1),
                        user.buffer_size
                    )));
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Runs `config` with empty initial queues.
pub fn run_simulation(
    config: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
) -> Result<MetricsSummary> {
    Ok(run_simulation_with(config, tables, &SimOptions::default())?.metrics)
}

pub fn run_simulation_with(
    config: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
    options: &SimOptions,
) -> Result<SimOutput> {
    config.validate()?;
    check_tables(config, tables)?;
    let k = config.num_users;
    let scheduler = Scheduler {
        kind: config.policy,
        num_beams: config.num_beams,
        tables: tables.map(<[_]>::to_vec),
        channel_probs: config.channel_probs(),
        weights: config.wfq_weights(),
    };
    let mut state = SimState::new(k, config.seed);
    let mut acc = RawAccumulators::new(k, config.horizon, config.num_beams);
    let mut trace = options.trace.then(|| {
        String::from("slot\tqueues\tselected\tchannels\tarrivals\tcost\n")
    });
    let mut log = options.record_log.then(|| Vec::with_capacity(config.horizon));
    let mut lengths = vec![0usize; k];
    let mut channels = vec![0u8; k];
    let mut arrivals = vec![0u8; k];

    for n in 0..config.horizon as u64 {
        state.slot = n;
        for (len, q) in lengths.iter_mut().zip(&state.queues) {
            *len = q.len();
        }
        let selection: Selection = scheduler.select(&lengths, &mut state.policy_rng)?;

        let mut slot_total = 0.0;
        for (i, user) in config.users.iter().enumerate() {
            let x = lengths[i] as f64;
            let mut c = user.holding_coeff * x * x;
            if selection.contains(i) {
                c += user.beam_cost;
                acc.user_active[i] += 1;
            }
            acc.user_slot_cost[i].push(c);
            slot_total += c;
        }
        acc.slot_cost.push(slot_total);
        acc.active.push(selection.active_count);

        for (i, user) in config.users.iter().enumerate() {
            let good = state.channel_rng.random_bool(user.channel_prob) != options.invert_channels;
            channels[i] = u8::from(good);
        }
        for &i in &selection.chosen {
            if channels[i] == 1 {
                let stamp = state.queues[i]
                    .pop_front()
                    .expect("selected queues are non-empty");
                acc.delay_sum[i] += n - stamp + 1;
                acc.departed[i] += 1;
            }
        }

        for (i, user) in config.users.iter().enumerate() {
            let arrive = state.arrival_rng.random_bool(user.arrival_prob)
                && !options.suppress_arrivals
                && !options.silent_users.contains(&i);
            arrivals[i] = u8::from(arrive);
            if arrive {
                acc.arrived[i] += 1;
                if state.queues[i].len() < user.buffer_size {
                    state.queues[i].push_back(n + 1);
                } else {
                    acc.dropped[i] += 1;
                }
            }
        }

        if let Some(out) = trace.as_mut() {
            let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
            let _ = writeln!(
                out,
                "{n}\t{}\t{}\t{}\t{}\t{slot_total}",
                join(&mut lengths.iter().map(ToString::to_string)),
                join(&mut selection.chosen.iter().map(ToString::to_string)),
                join(&mut channels.iter().map(ToString::to_string)),
                join(&mut arrivals.iter().map(ToString::to_string)),
            );
        }
        if let Some(log) = log.as_mut() {
            log.push(SlotRecord {
                queues: lengths.clone(),
                chosen: selection.chosen.clone(),
                channels: channels.clone(),
                arrivals: arrivals.clone(),
            });
        }
    }
    for (r, q) in acc.residual.iter_mut().zip(&state.queues) {
        *r = q.len() as u64;
    }
    let metrics = compute_metrics(&acc, config.warmup)?;
    Ok(SimOutput {
        metrics,
        raw: acc,
        trace,
        log,
    })
}

/// Pure aggregation of a finished run.
pub fn compute_metrics(acc: &RawAccumulators, warmup: usize) -> Result<MetricsSummary> {
    let horizon = acc.horizon();
    if warmup >= horizon {
        return Err(Error::invalid(
            "warmup",
            format!("warmup {warmup} must be < horizon {horizon}"),
        ));
    }
    let window = (horizon - warmup) as f64;
    let mean_delay = |sum: u64, count: u64| (count > 0).then(|| sum as f64 / count as f64);
    let per_user: Vec<UserMetrics> = (0..acc.departed.len())
        .map(|i| UserMetrics {
            avg_cost: acc.user_slot_cost[i][warmup..].iter().sum::<f64>() / window,
            avg_delay: mean_delay(acc.delay_sum[i], acc.departed[i]),
            avg_active: acc.user_active[i] as f64 / horizon as f64,
            departed_packets: acc.departed[i],
            dropped_packets: acc.dropped[i],
            residual_packets: acc.residual[i],
            arrived_packets: acc.arrived[i],
        })
        .collect();
    let departed = acc.departed.iter().sum();
    Ok(MetricsSummary {
        avg_cost: acc.slot_cost[warmup..].iter().sum::<f64>() / window,
        avg_delay: mean_delay(acc.delay_sum.iter().sum(), departed),
        avg_active_beams: acc.active.iter().sum::<usize>() as f64 / horizon as f64,
        per_user,
        departed_packets: departed,
        dropped_packets: acc.dropped.iter().sum(),
        residual_packets: acc.residual.iter().sum(),
        arrived_packets: acc.arrived.iter().sum(),
    })
}

// ── Replications ───────────────────────────────────────────────────────────

/// Sample mean and normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci_half_width: f64::NAN,
                n,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let ci_half_width = if n > 1 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            ci_half_width,
            n,
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci_half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci_half_width
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg_cost: Estimate,
    /// Over replications that had at least one departure.
    pub avg_delay: Estimate,
    pub avg_active_beams: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub runs: Vec<MetricsSummary>,
    pub aggregate: Aggregate,
}

pub fn aggregate(runs: &[MetricsSummary]) -> Aggregate {
    let pick = |f: &dyn Fn(&MetricsSummary) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(f).collect()
    };
    Aggregate {
        avg_cost: Estimate::from_samples(&pick(&|m| Some(m.avg_cost))),
        avg_delay: Estimate::from_samples(&pick(&|m| m.avg_delay)),
        avg_active_beams: Estimate::from_samples(&pick(&|m| Some(m.avg_active_beams))),
    }
}

/// Replication `r` runs with seed `config.seed + r · seed_stride`; runs are
/// spread over the rayon pool and collected in replication order.
pub fn run_replications(
    config: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
    n_reps: usize,
    seed_stride: u64,
) -> Result<ReplicationReport> {
    run_replications_with(config, tables, n_reps, seed_stride, &SimOptions::default())
}

/// [`run_replications`] with hooks; traces and logs are dropped.
pub fn run_replications_with(
    config: &SystemConfig,
    tables: Option<&[WhittleTable<f64>]>,
    n_reps: usize,
    seed_stride: u64,
    options: &SimOptions,
) -> Result<ReplicationReport> {
    let options = SimOptions {
        trace: false,
        record_log: false,
        ..options.clone()
    };
    if n_reps == 0 {
        return Err(Error::invalid("n_reps", "must be at least 1"));
    }
    config.validate()?;
    check_tables(config, tables)?;
    let runs = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(r.wrapping_mul(seed_stride));
            run_simulation_with(&cfg, tables, &options).map(|out| out.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationReport {
        aggregate: aggregate(&runs),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{step_queue, UserParams};

    fn config(policy: PolicyKind, users: Vec<UserParams<f64>>, b: usize, horizon: usize) -> SystemConfig {
        SystemConfig {
            num_users: users.len(),
            num_beams: b,
            users,
            horizon,
            warmup: horizon / 2,
            seed: 42,
            policy,
            solver: Default::default(),
            index: Default::default(),
        }
    }

    fn users() -> Vec<UserParams<f64>> {
        vec![
            UserParams::new(0.3, 0.6, 10.0, 2.0, 20).unwrap(),
            UserParams::new(0.4, 0.5, 8.0, 1.0, 20).unwrap(),
            UserParams::new(0.2, 0.7, 6.0, 3.0, 20).unwrap(),
        ]
    }

    #[test]
    fn no_arrivals_means_nothing_happens() {
        let cfg = config(PolicyKind::Lqf, users(), 2, 500);
        let out = run_simulation_with(
            &cfg,
            None,
            &SimOptions {
                suppress_arrivals: true,
                ..Default::default()
            },
        )
        .unwrap();
        let m = out.metrics;
        assert_eq!(m.avg_cost, 0.0);
        assert_eq!(m.avg_active_beams, 0.0);
        assert_eq!(m.avg_delay, None);
        assert_eq!(m.arrived_packets, 0);
    }

    #[test]
    fn replay_matches_queue_dynamics() {
        let cfg = config(PolicyKind::Random, users(), 1, 2_000);
        let out = run_simulation_with(
            &cfg,
            None,
            &SimOptions {
                record_log: true,
                ..Default::default()
            },
        )
        .unwrap();
        let log = out.log.unwrap();
        for pair in log.windows(2) {
            let (now, next) = (&pair[0], &pair[1]);
            for i in 0..3 {
                let u = u8::from(now.chosen.contains(&i));
                let x = step_queue(now.queues[i], u, now.channels[i], now.arrivals[i], 20).unwrap();
                assert_eq!(x, next.queues[i]);
            }
        }
    }

    #[test]
    fn conservation_and_bounds() {
        for policy in [PolicyKind::Lqf, PolicyKind::Mws, PolicyKind::Wfq, PolicyKind::Random] {
            let m = run_simulation(&config(policy, users(), 2, 3_000), None).unwrap();
            for u in &m.per_user {
                assert_eq!(u.arrived_packets, u.departed_packets + u.dropped_packets + u.residual_packets);
            }
            assert!(m.avg_active_beams <= 2.0);
        }
    }

    #[test]
    fn decisions_ignore_channel_outcomes_of_the_same_slot() {
        let cfg = config(PolicyKind::Lqf, users(), 1, 50);
        let opts = SimOptions {
            record_log: true,
            ..Default::default()
        };
        let a = run_simulation_with(&cfg, None, &opts).unwrap().log.unwrap();
        let b = run_simulation_with(
            &cfg,
            None,
            &SimOptions {
                invert_channels: true,
                ..opts
            },
        )
        .unwrap()
        .log
        .unwrap();
        // Identical up to the first slot whose channels changed someone's departure.
        assert_eq!(a[0].chosen, b[0].chosen);
        assert_ne!(a[0].channels, b[0].channels);
    }

    #[test]
    fn compute_metrics_fixture() {
        let acc = RawAccumulators {
            num_beams: 1,
            slot_cost: vec![1.0, 2.0, 3.0, 6.0],
            user_slot_cost: vec![vec![1.0, 2.0, 3.0, 6.0]],
            active: vec![0, 1, 1, 0],
            user_active: vec![2],
            delay_sum: vec![5],
            departed: vec![2],
            dropped: vec![0],
            arrived: vec![3],
            residual: vec![1],
        };
        let m = compute_metrics(&acc, 2).unwrap();
        assert_eq!(m.avg_cost, 4.5);
        assert_eq!(m.avg_delay, Some(2.5));
        assert_eq!(m.avg_active_beams, 0.5);
        assert_eq!(compute_metrics(&acc, 0).unwrap().avg_cost, 3.0);
        assert!(compute_metrics(&acc, 4).is_err());
    }

    #[test]
    fn estimate_of_single_sample() {
        let e = Estimate::from_samples(&[3.0]);
        assert_eq!((e.mean, e.ci_half_width, e.n), (3.0, 0.0, 1));
        let e = Estimate::from_samples(&[1.0, 3.0]);
        assert!((e.ci_half_width - 1.96).abs() < 1e-12);
    }

    #[test]
    fn replications_are_deterministic() {
        let cfg = config(PolicyKind::Mws, users(), 1, 1_000);
        let a = run_replications(&cfg, None, 4, 1_000).unwrap();
        let b = run_replications(&cfg, None, 4, 1_000).unwrap();
        assert_eq!(a, b);
        let one = run_replications(&cfg, None, 1, 1_000).unwrap();
        assert_eq!(one.aggregate.avg_cost.mean, one.runs[0].avg_cost);
        assert_eq!(one.runs[0], run_simulation(&cfg, None).unwrap());
    }

    #[test]
    fn whittle_needs_matching_tables() {
        let cfg = config(PolicyKind::Whittle, users(), 1, 100);
        assert!(run_simulation(&cfg, None).is_err());
    }

    /// Re-simulates a logged run by hand: FIFO timestamp queues, per-slot
    /// costs and delays recomputed from the logged selections and draws.
    #[test]
    fn hand_trace_of_twenty_slots() {
        let us = vec![
            UserParams::new(0.35, 0.9, 5.0, 1.0, 6).unwrap(),
            UserParams::new(0.25, 0.8, 3.0, 2.0, 6).unwrap(),
        ];
        let mut cfg = config(PolicyKind::Lqf, us.clone(), 1, 20);
        cfg.warmup = 0;
        let out = run_simulation_with(
            &cfg,
            None,
            &SimOptions {
                record_log: true,
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let log = out.log.unwrap();
        let mut queues: Vec<VecDeque<u64>> = vec![VecDeque::new(); 2];
        let (mut cost, mut delay, mut departed) = (0.0, 0u64, 0u64);
        for (n, rec) in log.iter().enumerate() {
            let n = n as u64;
            let lens: Vec<usize> = queues.iter().map(VecDeque::len).collect();
            assert_eq!(rec.queues, lens);
            match rec.chosen.as_slice() {
                [] => assert!(lens.iter().all(|&l| l == 0)),
                [i] => assert!(lens[*i] > 0 && lens[*i] >= lens[1 - i]),
                _ => panic!("more than B users selected"),
            }
            for (i, u) in us.iter().enumerate() {
                cost += u.holding_coeff * (lens[i] * lens[i]) as f64;
            }
            for &i in &rec.chosen {
                cost += us[i].beam_cost;
                if rec.channels[i] == 1 {
                    delay += n - queues[i].pop_front().unwrap() + 1;
                    departed += 1;
                }
            }
            for i in 0..2 {
                if rec.arrivals[i] == 1 && queues[i].len() < 6 {
                    queues[i].push_back(n + 1);
                }
            }
        }
        let m = out.metrics;
        assert!((m.avg_cost - cost / 20.0).abs() < 1e-12);
        assert_eq!(m.departed_packets, departed);
        assert!(departed > 0);
        assert_eq!(m.avg_delay, Some(delay as f64 / departed as f64));
        assert_eq!(out.trace.unwrap().lines().count(), 21);
    }

    #[test]
    fn delays_are_at_least_one_slot() {
        let cfg = config(PolicyKind::Wfq, users(), 2, 5_000);
        let m = run_simulation(&cfg, None).unwrap();
        for u in &m.per_user {
            assert!(u.avg_delay.unwrap() >= 1.0);
        }
    }

    /// The half-width of one 10-run batch has about 24% sampling noise of
    /// its own, so the 1/sqrt(n) law is checked on means over 16 root seeds.
    #[test]
    fn ci_half_width_scales_with_inverse_root_n() {
        let mean_width = |n: usize| {
            (0..16u64)
                .map(|root| {
                    let mut cfg = config(PolicyKind::Lqf, users(), 1, 2_000);
                    cfg.seed = 1_000_000 * (root + 1);
                    run_replications(&cfg, None, n, 7_919)
                        .unwrap()
                        .aggregate
                        .avg_cost
                        .ci_half_width
                })
                .sum::<f64>()
                / 16.0
        };
        let ratio = mean_width(10) / mean_width(40);
        assert!((ratio / 2.0 - 1.0).abs() <= 0.2, "ratio {ratio}");
    }
}
