//! Built-in parameter sets for the benchmark experiments.
//!
//! Each generator returns the user list for one sweep point; the sweep
//! itself (which K or B values, horizon, replications) lives with the caller.

use crate::error::{Error, Result};
use crate::model::{PolicyKind, SystemConfig, UserParams};

// ── Helpers ────────────────────────────────────────────────────────────────

fn users_from(
    d: &[f64],
    a: &[f64],
    p: &[f64],
    q: &[f64],
    n: usize,
) -> Result<Vec<UserParams<f64>>> {
    d.iter()
        .zip(a)
        .zip(p)
        .zip(q)
        .map(|(((&d, &a), &p), &q)| UserParams::new(a, d, p, q, n))
        .collect()
}

fn need(what: &'static str, k: usize, lo: usize, hi: usize) -> Result<()> {
    if (lo..=hi).contains(&k) {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{k} outside {lo}..={hi}")))
    }
}

/// A system with the usual defaults: T = 20,000, warmup T/2, Whittle policy.
pub fn system(users: Vec<UserParams<f64>>, num_beams: usize, seed: u64) -> SystemConfig {
    SystemConfig {
        num_users: users.len(),
        num_beams,
        users,
        horizon: 20_000,
        warmup: 10_000,
        seed,
        policy: PolicyKind::Whittle,
        solver: Default::default(),
        index: Default::default(),
    }
}

// ── Fixed sets ─────────────────────────────────────────────────────────────

/// Six users, four beams, buffers of 400.
pub fn fig3a() -> Result<SystemConfig> {
    let users = users_from(
        &[0.35, 0.33, 0.31, 0.29, 0.27, 0.25],
        &[0.55, 0.52, 0.49, 0.46, 0.43, 0.40],
        &[60.0, 55.0, 50.0, 45.0, 40.0, 35.0],
        &[30.0, 26.0, 22.0, 18.0, 14.0, 10.0],
        400,
    )?;
    Ok(system(users, 4, 1))
}

/// Four users, three beams, buffers of 500.
pub fn fig3b() -> Result<SystemConfig> {
    let users = users_from(
        &[0.34, 0.30, 0.28, 0.32],
        &[0.58, 0.56, 0.57, 0.55],
        &[87.0, 74.0, 62.0, 49.0],
        &[90.0, 60.0, 44.0, 28.0],
        500,
    )?;
    Ok(system(users, 3, 1))
}

// ── Sweep generators ───────────────────────────────────────────────────────

/// `K` users (5..=10) with buffers of 200; users past the fifth follow
/// `d = 0.28·(i mod 2) + 0.29·((i+1) mod 2)`, `a = 0.53 − 0.01i`,
/// `P = 63 − 3i`, `q = 85 − 5i` (1-based `i`).
pub fn fig4a_users(k: usize) -> Result<Vec<UserParams<f64>>> {
    need("num_users", k, 5, 10)?;
    let mut d = vec![0.30, 0.28, 0.29, 0.31, 0.28];
    let mut a = vec![0.52, 0.51, 0.50, 0.49, 0.48];
    let mut p = vec![60.0, 57.0, 54.0, 51.0, 48.0];
    let mut q = vec![80.0, 75.0, 70.0, 65.0, 60.0];
    for i in 6..=k {
        let f = i as f64;
        d.push(0.28 * (i % 2) as f64 + 0.29 * ((i + 1) % 2) as f64);
        a.push(0.53 - 0.01 * f);
        p.push(63.0 - 3.0 * f);
        q.push(85.0 - 5.0 * f);
    }
    users_from(&d, &a, &p, &q, 200)
}

/// Nine users with buffers of 200, for `B = 4..=8`.
pub fn fig4b_users() -> Result<Vec<UserParams<f64>>> {
    users_from(
        &[0.25, 0.241, 0.231, 0.222, 0.213, 0.204, 0.195, 0.186, 0.177],
        &[0.55, 0.545, 0.54, 0.535, 0.53, 0.525, 0.52, 0.515, 0.51],
        &[120.0, 110.0, 100.0, 90.0, 80.0, 70.0, 60.0, 50.0, 40.0],
        &[90.0, 82.0, 74.0, 66.0, 58.0, 50.0, 42.0, 34.0, 26.0],
        200,
    )
}

/// `K` users (5..=9) with buffers of 200; users past the fifth follow
/// `d = 0.295 − 0.005i`, `a = 0.59 − 0.03i`, `P = 60 − 4i`, `q = 86 − 4i`.
pub fn fig5a_users(k: usize) -> Result<Vec<UserParams<f64>>> {
    need("num_users", k, 5, 9)?;
    let mut d = vec![0.29, 0.285, 0.28, 0.275, 0.27];
    let mut a = vec![0.56, 0.53, 0.50, 0.47, 0.44];
    let mut p = vec![56.0, 52.0, 48.0, 44.0, 40.0];
    let mut q = vec![82.0, 78.0, 74.0, 70.0, 66.0];
    for i in 6..=k {
        let f = i as f64;
        d.push(0.295 - 0.005 * f);
        a.push(0.59 - 0.03 * f);
        p.push(60.0 - 4.0 * f);
        q.push(86.0 - 4.0 * f);
    }
    users_from(&d, &a, &p, &q, 200)
}

/// Nine users with buffers of 200, for `B = 4..=8`.
pub fn fig5b_users() -> Result<Vec<UserParams<f64>>> {
    users_from(
        &[0.28, 0.272, 0.253, 0.243, 0.231, 0.222, 0.21, 0.196, 0.187],
        &[0.505, 0.504, 0.503, 0.502, 0.503, 0.502, 0.503, 0.502, 0.503],
        &[60.0, 55.0, 50.0, 45.0, 40.0, 35.0, 30.0, 25.0, 20.0],
        &[85.0, 77.0, 69.0, 61.0, 53.0, 45.0, 37.0, 29.0, 21.0],
        200,
    )
}

/// Twenty users with buffers of 100, for `B = 8..=16`.
pub fn table1_users() -> Result<Vec<UserParams<f64>>> {
    const Q: [f64; 20] = [
        174.0, 166.0, 158.0, 150.0, 142.0, 134.0, 126.0, 118.0, 110.0, 102.0, 94.0, 86.0, 78.0,
        70.0, 62.0, 54.0, 46.0, 34.0, 28.0, 20.0,
    ];
    (0..20)
        .map(|k| {
            let f = k as f64;
            UserParams::new(0.65 - 0.005 * f, 0.35 - 0.009 * f, 200.0 - 10.0 * f, Q[k], 100)
        })
        .collect()
}

/// `K` users (16..=25) with buffers of 100, repeating a five-user pattern:
/// with `m = (i − 1) mod 5`, `d = 0.74 − 0.005m`, `a = 0.64 − 0.005m`,
/// `P = 60 − 5m`, `q = 40 − 5m`.
pub fn table2_users(k: usize) -> Result<Vec<UserParams<f64>>> {
    need("num_users", k, 16, 25)?;
    (0..k)
        .map(|i| {
            let m = (i % 5) as f64;
            UserParams::new(0.64 - 0.005 * m, 0.74 - 0.005 * m, 60.0 - 5.0 * m, 40.0 - 5.0 * m, 100)
        })
        .collect()
}

// ── Named sweeps ───────────────────────────────────────────────────────────

/// Which quantity a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumUsers,
    NumBeams,
    None,
}

/// Built-in parameter generators, one per benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Fig3a,
    Fig3b,
    Fig4a,
    Fig4b,
    Fig5a,
    Fig5b,
    Table1,
    Table2,
}

impl Generator {
    pub const ALL: [Generator; 8] = [
        Generator::Fig3a,
        Generator::Fig3b,
        Generator::Fig4a,
        Generator::Fig4b,
        Generator::Fig5a,
        Generator::Fig5b,
        Generator::Table1,
        Generator::Table2,
    ];

    pub fn axis(self) -> SweepAxis {
        match self {
            Generator::Fig3a | Generator::Fig3b => SweepAxis::None,
            Generator::Fig4a | Generator::Fig5a | Generator::Table2 => SweepAxis::NumUsers,
            Generator::Fig4b | Generator::Fig5b | Generator::Table1 => SweepAxis::NumBeams,
        }
    }

    /// The benchmark's own sweep values (empty for single-point sets).
    pub fn default_values(self) -> Vec<usize> {
        match self {
            Generator::Fig3a | Generator::Fig3b => vec![],
            Generator::Fig4a => (5..=10).collect(),
            Generator::Fig5a => (5..=9).collect(),
            Generator::Fig4b | Generator::Fig5b => (4..=8).collect(),
            Generator::Table1 => (8..=16).collect(),
            Generator::Table2 => (16..=25).collect(),
        }
    }

    /// Resolves one sweep point; `value` is ignored for single-point sets.
    pub fn config(self, value: usize, seed: u64) -> Result<SystemConfig> {
        let mut cfg = match self {
            Generator::Fig3a => fig3a()?,
            Generator::Fig3b => fig3b()?,
            Generator::Fig4a => system(fig4a_users(value)?, 4, seed),
            Generator::Fig4b => system(fig4b_users()?, value, seed),
            Generator::Fig5a => system(fig5a_users(value)?, 4, seed),
            Generator::Fig5b => system(fig5b_users()?, value, seed),
            Generator::Table1 => system(table1_users()?, value, seed),
            Generator::Table2 => system(table2_users(value)?, 15, seed),
        };
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Generator::ALL
            .into_iter()
            .find(|g| format!("{g:?}").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid("generator", format!("unknown generator `{s}`")))
    }
}
