//! Monte Carlo checks of the simulator against closed-form chain quantities.

use beamsched_core::mdp::{stationary_distribution, Threshold};
use beamsched_core::simulator::{run_simulation_with, SimOptions};
use beamsched_core::{PolicyKind, QueueMdp, SystemConfig, UserParams};

/// User 1 never receives packets, so LQF serves user 0 whenever it is
/// non-empty: user 0 follows the threshold-0 birth–death chain.
#[test]
fn single_active_user_matches_stationary_mean() {
    let user = UserParams::new(0.45, 0.6, 10.0, 1.0, 12).unwrap();
    let idle = UserParams::new(0.5, 0.5, 10.0, 1.0, 12).unwrap();
    let dist = stationary_distribution(Threshold::PassiveUpTo(0), &QueueMdp::new(&user).unwrap()).unwrap();
    let states: Vec<f64> = (0..=12).map(f64::from).collect();
    let expected = dist.expect(&states);

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
                seed: 9_000 + r,
                policy: PolicyKind::Lqf,
                solver: Default::default(),
                index: Default::default(),
            };
            let opts = SimOptions {
                record_log: true,
                silent_users: vec![1],
                ..Default::default()
            };
            let log = run_simulation_with(&cfg, None, &opts).unwrap().log.unwrap();
            let tail = &log[warmup..];
            tail.iter().map(|s| s.queues[0] as f64).sum::<f64>() / tail.len() as f64
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let sigma = (var / reps as f64).sqrt();
    assert!(
        (mean - expected).abs() <= 3.0 * sigma,
        "simulated {mean} vs stationary {expected} (sigma {sigma})"
    );
}
