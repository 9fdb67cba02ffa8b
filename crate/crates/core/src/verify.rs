//! Structural property suite for the single-user problem.
//!
//! Samples parameter tuples and taxes from a seeded grid, solves each
//! instance, and checks the shape properties the index policy relies on:
//! monotone and convex value functions, threshold-form optima, a monotone
//! threshold map, increasing passive mass, supermodular threshold costs, the
//! vanishing-discount limit, and agreement between the two index routines.
//!
//! Every case is measured in units of its tolerance and fails above 1; a
//! check passes when no case fails. The report is a pure function of the
//! grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    discounted_value_iteration, extract_threshold, policy_iteration, relative_value_iteration,
    service_advantage, stationary_distribution, threshold_average_cost, QueueMdp, SolverKnobs,
    Threshold, ValueSolution,
};
use crate::model::UserParams;
use crate::whittle::{index_bisection_oracle, index_iteration, IndexKnobs};

// ── Grid ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    ValueMonotone,
    ValueConvex,
    ThresholdOptimal,
    ServiceAdvantageMonotone,
    ThresholdMonotoneInTax,
    PassiveMassIncreasing,
    ThresholdCostSupermodular,
    VanishingDiscount,
    IndexOracleAgreement,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::ValueMonotone,
        Check::ValueConvex,
        Check::ThresholdOptimal,
        Check::ServiceAdvantageMonotone,
        Check::ThresholdMonotoneInTax,
        Check::PassiveMassIncreasing,
        Check::ThresholdCostSupermodular,
        Check::VanishingDiscount,
        Check::IndexOracleAgreement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::ValueMonotone => "value_monotone",
            Check::ValueConvex => "value_convex",
            Check::ThresholdOptimal => "threshold_optimal",
            Check::ServiceAdvantageMonotone => "service_advantage_monotone",
            Check::ThresholdMonotoneInTax => "threshold_monotone_in_tax",
            Check::PassiveMassIncreasing => "passive_mass_increasing",
            Check::ThresholdCostSupermodular => "threshold_cost_supermodular",
            Check::VanishingDiscount => "vanishing_discount",
            Check::IndexOracleAgreement => "index_oracle_agreement",
        }
    }
}

/// Parameter ranges, sample sizes and tolerances of one suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyGrid {
    pub seed: u64,
    pub num_params: usize,
    pub buffer_size: usize,
    pub num_taxes: usize,
    pub arrival_range: (f64, f64),
    pub channel_range: (f64, f64),
    pub beam_cost_range: (f64, f64),
    pub holding_range: (f64, f64),
    /// States within this distance of `N` are excluded from the shape checks.
    pub boundary_margin: usize,
    /// Relative slack: a shape violation counts when it exceeds
    /// `slack · max(1, magnitude of the compared quantities)`.
    pub slack: f64,
    /// Relative tolerance on `min_t f(λ, t)` against the solver's optimum.
    pub optimum_tol: f64,
    pub discount_samples: usize,
    /// Absolute bound on `|(1−γ)V^γ(0) − η|` at `γ = 0.999`.
    pub discount_tol: f64,
    pub index_params: usize,
    pub index_buffer_size: usize,
    pub index_states: usize,
    pub index_tol: f64,
    pub bisection_tol: f64,
    pub checks: Vec<Check>,
    pub solver: SolverKnobs<f64>,
    pub index: IndexKnobs<f64>,
}

impl Default for VerifyGrid {
    fn default() -> Self {
        Self {
            seed: 2024,
            num_params: 20,
            buffer_size: 60,
            num_taxes: 15,
            arrival_range: (0.1, 0.9),
            channel_range: (0.1, 0.9),
            beam_cost_range: (1.0, 200.0),
            holding_range: (1.0, 100.0),
            boundary_margin: 5,
            slack: 1e-8,
            optimum_tol: 1e-6,
            discount_samples: 5,
            discount_tol: 0.1,
            index_params: 10,
            index_buffer_size: 60,
            index_states: 5,
            index_tol: 1e-3,
            bisection_tol: 1e-7,
            checks: Check::ALL.to_vec(),
            solver: SolverKnobs {
                rvi_max_iter: 200_000,
                ..SolverKnobs::default()
            },
            index: IndexKnobs::default(),
        }
    }
}

impl VerifyGrid {
    pub fn validate(&self) -> Result<()> {
        let unit = |name, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("[{lo}, {hi}] not inside (0, 1)")))
            }
        };
        unit("arrival_range", self.arrival_range)?;
        unit("channel_range", self.channel_range)?;
        if !(self.beam_cost_range.0 > 0.0 && self.beam_cost_range.0 <= self.beam_cost_range.1) {
            return Err(Error::invalid("beam_cost_range", "need 0 < lo <= hi"));
        }
        if !(self.holding_range.0 >= 0.0 && self.holding_range.0 <= self.holding_range.1) {
            return Err(Error::invalid("holding_range", "need 0 <= lo <= hi"));
        }
        if self.buffer_size <= self.boundary_margin + 2 {
            return Err(Error::invalid("buffer_size", "must exceed boundary_margin + 2"));
        }
        if self.num_taxes < 2 {
            return Err(Error::invalid("num_taxes", "need at least 2"));
        }
        self.solver.validate()?;
        self.index.validate()
    }

    fn sample_params(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<UserParams<f64>> {
        let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let a = draw(self.arrival_range);
        let d = draw(self.channel_range);
        let p = draw(self.beam_cost_range);
        let q = draw(self.holding_range);
        UserParams::new(a, d, p, q, n)
    }

    /// `num_taxes` points from `−P` to `2P + q·N²`, packed quadratically
    /// towards the low end where the optimal threshold moves.
    pub fn taxes(&self, p: &UserParams<f64>) -> Vec<f64> {
        let lo = -p.beam_cost;
        let n = p.buffer_size as f64;
        let hi = 2.0 * p.beam_cost + p.holding_coeff * n * n;
        let last = (self.num_taxes - 1) as f64;
        (0..self.num_taxes)
            .map(|k| {
                let s = k as f64 / last;
                lo + (hi - lo) * s * s
            })
            .collect()
    }
}

// ── Report ─────────────────────────────────────────────────────────────────

/// Outcome of one check across the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: Check,
    pub cases: usize,
    pub violations: usize,
    /// Largest measured quantity in units of its tolerance; a case fails
    /// above 1.
    pub worst: f64,
    /// Where `worst` occurred.
    pub worst_case: String,
    pub errors: Vec<String>,
    pub passed: bool,
}

impl CheckReport {
    fn new(check: Check) -> Self {
        Self {
            check,
            cases: 0,
            violations: 0,
            worst: 0.0,
            worst_case: String::new(),
            errors: Vec::new(),
            passed: true,
        }
    }

    /// Records one case whose measured quantity is `ratio` tolerances.
    fn record(&mut self, ratio: f64, case: impl FnOnce() -> String) {
        self.cases += 1;
        let ratio = if ratio.is_nan() { f64::INFINITY } else { ratio };
        if ratio > 1.0 {
            self.violations += 1;
        }
        if ratio > self.worst {
            self.worst = ratio;
            self.worst_case = case();
        }
    }

    fn error(&mut self, msg: String) {
        self.cases += 1;
        self.violations += 1;
        self.errors.push(msg);
    }

    fn merge(&mut self, other: CheckReport) {
        self.cases += other.cases;
        self.violations += other.violations;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_case = other.worst_case;
        }
        self.errors.extend(other.errors);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn get(&self, check: Check) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check == check)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("check\tstatus\tcases\tviolations\tworst\tworst_case\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.3e}\t{}\n",
                c.check.name(),
                if c.passed { "pass" } else { "FAIL" },
                c.cases,
                c.violations,
                c.worst,
                c.worst_case
            ));
            for e in &c.errors {
                out.push_str(&format!("#\t{}\terror: {e}\n", c.check.name()));
            }
        }
        out
    }
}

// ── Suite ──────────────────────────────────────────────────────────────────

/// Hook applied to every kernel the suite builds; used to inject faults.
pub type KernelHook<'a> = &'a (dyn Fn(&mut QueueMdp<f64>) -> Result<()> + Sync);

pub fn run_verify(grid: &VerifyGrid) -> Result<VerifyReport> {
    run_verify_with(grid, &|_| Ok(()))
}

pub fn run_verify_with(grid: &VerifyGrid, hook: KernelHook<'_>) -> Result<VerifyReport> {
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let params: Vec<UserParams<f64>> = (0..grid.num_params)
        .map(|_| grid.sample_params(&mut rng, grid.buffer_size))
        .collect::<Result<_>>()?;
    let discount_cases: Vec<(UserParams<f64>, f64)> = (0..grid.discount_samples)
        .map(|_| {
            let p = grid.sample_params(&mut rng, grid.buffer_size)?;
            let taxes = grid.taxes(&p);
            let tax = taxes[rng.random_range(0..taxes.len())];
            Ok((p, tax))
        })
        .collect::<Result<_>>()?;
    let index_cases: Vec<UserParams<f64>> = (0..grid.index_params)
        .map(|_| grid.sample_params(&mut rng, grid.index_buffer_size))
        .collect::<Result<_>>()?;

    let enabled = |c: Check| grid.checks.contains(&c);
    let per_param: Vec<Vec<CheckReport>> = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| shape_checks(grid, i, p, hook))
        .collect::<Result<_>>()?;

    let mut reports: Vec<CheckReport> = Check::ALL.iter().map(|&c| CheckReport::new(c)).collect();
    for batch in per_param {
        for (slot, r) in reports.iter_mut().zip(batch) {
            slot.merge(r);
        }
    }
    if enabled(Check::VanishingDiscount) {
        let r = discount_check(grid, &discount_cases, hook);
        reports[7].merge(r);
    }
    if enabled(Check::IndexOracleAgreement) {
        let r = index_check(grid, &index_cases);
        reports[8].merge(r);
    }
    let mut checks: Vec<CheckReport> = reports.into_iter().filter(|r| enabled(r.check)).collect();
    for c in &mut checks {
        c.passed = c.violations == 0;
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

fn tuple(p: &UserParams<f64>) -> String {
    format!(
        "a={:.4} d={:.4} P={:.3} q={:.3} N={}",
        p.arrival_prob, p.channel_prob, p.beam_cost, p.holding_coeff, p.buffer_size
    )
}

/// Average-cost optimum by relative value iteration, or by policy
/// iteration when value iteration stalls near a policy tie.
fn solve(tax: f64, mdp: &QueueMdp<f64>, knobs: &SolverKnobs<f64>) -> Result<ValueSolution<f64>> {
    match relative_value_iteration(tax, mdp, knobs) {
        Err(Error::NoConvergence { .. }) => policy_iteration(tax, mdp, knobs),
        other => other,
    }
}

/// Index into `Check::ALL`.
fn at(c: Check) -> usize {
    Check::ALL.iter().position(|&x| x == c).expect("listed")
}

fn shape_checks(
    grid: &VerifyGrid,
    idx: usize,
    p: &UserParams<f64>,
    hook: KernelHook<'_>,
) -> Result<Vec<CheckReport>> {
    let mut r: Vec<CheckReport> = Check::ALL.iter().map(|&c| CheckReport::new(c)).collect();
    let enabled = |c: Check| grid.checks.contains(&c);
    let mut mdp = QueueMdp::new(p)?;
    hook(&mut mdp)?;
    let n = mdp.max_state();
    let interior = n - grid.boundary_margin;
    let taxes = grid.taxes(p);
    let label = tuple(p);
    let slack = grid.slack;

    let mut thresholds: Vec<(f64, Option<Threshold>)> = Vec::with_capacity(taxes.len());
    let needs_solution = [
        Check::ValueMonotone,
        Check::ValueConvex,
        Check::ThresholdOptimal,
        Check::ServiceAdvantageMonotone,
        Check::ThresholdMonotoneInTax,
    ]
    .into_iter()
    .any(enabled);

    for &tax in taxes.iter().filter(|_| needs_solution) {
        let sol = match solve(tax, &mdp, &grid.solver) {
            Ok(s) => s,
            Err(e) => {
                r[at(Check::ValueMonotone)].error(format!("#{idx} {label} λ={tax:.6e}: {e}"));
                thresholds.push((tax, None));
                continue;
            }
        };
        let v = &sol.values;
        let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs())) * slack;
        let case = |x: usize| format!("#{idx} {label} λ={tax:.6e} x={x}");

        for x in 0..interior {
            r[at(Check::ValueMonotone)].record((v[x] - v[x + 1]) / scale, || case(x));
        }
        for x in 0..interior.saturating_sub(1) {
            let second = v[x + 2] - 2.0 * v[x + 1] + v[x];
            r[at(Check::ValueConvex)].record(-second / scale, || case(x));
        }
        let g = service_advantage(v, &mdp);
        for x in 0..interior {
            r[at(Check::ServiceAdvantageMonotone)].record((g[x + 1] - g[x]) / scale, || case(x));
        }

        let t = extract_threshold(&sol.actions[..=interior]);
        r[at(Check::ThresholdOptimal)].record(if t.is_some() { 0.0 } else { f64::INFINITY }, || {
            format!("#{idx} {label} λ={tax:.6e}: action map not of threshold form")
        });
        thresholds.push((tax, t));

        if enabled(Check::ThresholdOptimal) {
            let mut best = p.holding_coeff * (n * n) as f64 + tax;
            for th in Threshold::all(n - 1) {
                match threshold_average_cost(tax, th, &mdp) {
                    Ok(f) => best = best.min(f),
                    Err(e) => r[at(Check::ThresholdOptimal)].error(format!("#{idx} {label} t={th}: {e}")),
                }
            }
            let rel = (best - sol.avg_cost).abs() / sol.avg_cost.abs().max(1.0);
            r[at(Check::ThresholdOptimal)].record(rel / grid.optimum_tol, || {
                format!("#{idx} {label} λ={tax:.6e}: min_t f={best:.9e} vs η={:.9e}", sol.avg_cost)
            });
        }
    }

    for w in thresholds.windows(2) {
        if let ((l1, Some(t1)), (l2, Some(t2))) = (w[0], w[1]) {
            let excess = if t2 > t1 { f64::INFINITY } else { 0.0 };
            r[at(Check::ThresholdMonotoneInTax)].record(excess, || {
                format!("#{idx} {label}: t({l1:.4e})={t1} < t({l2:.4e})={t2}")
            });
        }
    }

    if enabled(Check::PassiveMassIncreasing) {
        let mut prev: Option<f64> = None;
        for t in 0..n {
            match stationary_distribution(Threshold::PassiveUpTo(t), &mdp) {
                Ok(dist) => {
                    let m = dist.passive_mass();
                    if let Some(pm) = prev {
                        r[at(Check::PassiveMassIncreasing)]
                            .record((pm - m) / slack, || format!("#{idx} {label} t={t}: {m:.17} after {pm:.17}"));
                    }
                    prev = Some(m);
                }
                Err(e) => {
                    r[at(Check::PassiveMassIncreasing)].error(format!("#{idx} {label} t={t}: {e}"));
                    prev = None;
                }
            }
        }
    }

    if enabled(Check::ThresholdCostSupermodular) {
        let ts: Vec<Threshold> = std::iter::once(Threshold::AlwaysActive)
            .chain((0..n).step_by(5).map(Threshold::PassiveUpTo))
            .chain(std::iter::once(Threshold::PassiveUpTo(n - 1)))
            .collect();
        let f = |tax: f64, t: Threshold| threshold_average_cost(tax, t, &mdp);
        let check = &mut r[at(Check::ThresholdCostSupermodular)];
        'outer: for (j, &l2) in taxes.iter().enumerate() {
            for &l1 in &taxes[j + 1..] {
                for (k, &t2) in ts.iter().enumerate() {
                    for &t1 in &ts[k + 1..] {
                        let vals = (f(l1, t2), f(l2, t1), f(l1, t1), f(l2, t2));
                        let (a, b, c, d) = match vals {
                            (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
                            _ => {
                                check.error(format!("#{idx} {label}: threshold cost failed"));
                                break 'outer;
                            }
                        };
                        let mag = [a, b, c, d].iter().fold(1.0f64, |m, v| m.max(v.abs()));
                        check.record((a + b - c - d) / (mag * slack), || {
                            format!("#{idx} {label} λ=({l1:.4e},{l2:.4e}) t=({t1},{t2})")
                        });
                    }
                }
            }
        }
    }
    Ok(r)
}

fn discount_check(
    grid: &VerifyGrid,
    cases: &[(UserParams<f64>, f64)],
    hook: KernelHook<'_>,
) -> CheckReport {
    let mut report = CheckReport::new(Check::VanishingDiscount);
    let results: Vec<Result<(f64, f64, f64)>> = cases
        .par_iter()
        .map(|(p, tax)| {
            let mut mdp = QueueMdp::new(p)?;
            hook(&mut mdp)?;
            let eta = solve(*tax, &mdp, &grid.solver)?.avg_cost;
            let knobs = SolverKnobs {
                rvi_max_iter: grid.solver.rvi_max_iter.max(2_000_000),
                ..grid.solver.clone()
            };
            let gap = |gamma: f64| -> Result<f64> {
                let v0 = discounted_value_iteration(*tax, gamma, &mdp, &knobs)?.v0;
                Ok(((1.0 - gamma) * v0 - eta).abs())
            };
            Ok((eta, gap(0.99)?, gap(0.999)?))
        })
        .collect();
    for ((p, tax), res) in cases.iter().zip(results) {
        match res {
            Ok((eta, g99, g999)) => {
                let case = || format!("{} λ={tax:.6e} η={eta:.6e} gap99={g99:.3e} gap999={g999:.3e}", tuple(p));
                // Both the bound and the shrinking gap must hold.
                let ratio = if g999 < g99 { g999 / grid.discount_tol } else { f64::INFINITY };
                report.record(ratio, case);
            }
            Err(e) => report.error(format!("{} λ={tax:.6e}: {e}", tuple(p))),
        }
    }
    report
}

/// States `0` and `N − 1` plus evenly spaced ones in between.
fn index_state_sample(n: usize, count: usize) -> Vec<usize> {
    let mut xs: Vec<usize> = (0..count.max(2))
        .map(|k| k * (n - 1) / (count.max(2) - 1))
        .collect();
    xs.dedup();
    xs
}

fn index_check(grid: &VerifyGrid, cases: &[UserParams<f64>]) -> CheckReport {
    let mut report = CheckReport::new(Check::IndexOracleAgreement);
    let jobs: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            index_state_sample(p.buffer_size, grid.index_states)
                .into_iter()
                .map(move |x| (i, x))
        })
        .collect();
    let results: Vec<Result<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(i, x)| {
            let p = &cases[i];
            let it = index_iteration(x, p, &grid.index, &grid.solver)?;
            let bi = index_bisection_oracle(x, p, &grid.solver, grid.bisection_tol)?;
            Ok((it, bi))
        })
        .collect();
    for (&(i, x), res) in jobs.iter().zip(results) {
        let label = tuple(&cases[i]);
        match res {
            Ok((it, bi)) => report.record((it - bi).abs() / grid.index_tol, || {
                format!("{label} x={x}: iteration {it:.6e} vs bisection {bi:.6e}")
            }),
            Err(e) => report.error(format!("{label} x={x}: {e}")),
        }
    }
    report
}
