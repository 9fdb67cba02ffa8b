//! Solvers for the single-user tax-parameterized average-cost MDP.
//!
//! For a tax `λ` charged in every passive slot, the user's relative value
//! function `V` and optimal average cost `η` satisfy
//!
//! ```text
//! V(x) = H(x) − η + min[ P + Σ_j p₁(j|x)·V(j) ,  λ + Σ_j p₀(j|x)·V(j) ]
//! ```
//!
//! with `V(0) = 0`. This module provides
//!
//! * [`relative_value_iteration`]: the optimal `(V, η)` and action map;
//! * [`discounted_value_iteration`]: the discounted problem, whose scaled value
//!   `(1−γ)·V^γ(0)` approaches `η` as `γ ↑ 1`;
//! * [`solve_fixed_threshold`]: `(V, η)` of a given threshold policy by exact
//!   elimination on the birth–death structure (with
//!   [`solve_fixed_threshold_dense`] as a dense LU cross-check);
//! * [`stationary_distribution`] and [`threshold_average_cost`] for threshold
//!   policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{kernel_row, Action, TransitionRow, UserParams};
use crate::scalar::{compensated_sum, Scalar};

// ── Knobs ──────────────────────────────────────────────────────────────────

/// Numerical settings of the single-user solvers.
///
/// `rvi_tol` is relative: iteration stops once the span of the Bellman update
/// falls below `rvi_tol · max(1, largest stage cost)`, or below the rounding
/// noise of the current values if that is larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverKnobs<T> {
    pub rvi_tol: T,
    pub rvi_max_iter: usize,
    pub discount: T,
    pub linear_solve_pivot_tol: T,
}

impl<T: Scalar> Default for SolverKnobs<T> {
    fn default() -> Self {
        Self {
            rvi_tol: T::lit(1e-12),
            rvi_max_iter: 1_000_000,
            discount: T::lit(0.999),
            linear_solve_pivot_tol: T::lit(1e-13),
        }
    }
}

impl<T: Scalar> SolverKnobs<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.rvi_tol > T::zero()) {
            return Err(Error::invalid("rvi_tol", "must be positive"));
        }
        if self.rvi_max_iter == 0 {
            return Err(Error::invalid("rvi_max_iter", "must be positive"));
        }
        if !(self.discount > T::zero() && self.discount < T::one()) {
            return Err(Error::invalid("discount", "must lie in (0,1)"));
        }
        if !(self.linear_solve_pivot_tol > T::zero()) {
            return Err(Error::invalid("linear_solve_pivot_tol", "must be positive"));
        }
        Ok(())
    }
}

// ── Thresholds ─────────────────────────────────────────────────────────────

/// Threshold policy: passive on `{0, …, t}`, active above.
///
/// Ordered so that `AlwaysActive` (t = −1) precedes every `PassiveUpTo(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Threshold {
    AlwaysActive,
    PassiveUpTo(usize),
}

impl Threshold {
    /// `−1` maps to [`Threshold::AlwaysActive`].
    pub fn from_signed(t: i64) -> Option<Self> {
        match t {
            -1 => Some(Threshold::AlwaysActive),
            t if t >= 0 => Some(Threshold::PassiveUpTo(t as usize)),
            _ => None,
        }
    }

    pub fn as_signed(self) -> i64 {
        match self {
            Threshold::AlwaysActive => -1,
            Threshold::PassiveUpTo(t) => t as i64,
        }
    }

    #[inline]
    pub fn action(self, x: usize) -> Action {
        match self {
            Threshold::PassiveUpTo(t) if x <= t => Action::Passive,
            _ => Action::Active,
        }
    }

    /// All thresholds on `{0, …, n}`: `−1, 0, …, n`.
    pub fn all(n: usize) -> impl Iterator<Item = Threshold> {
        std::iter::once(Threshold::AlwaysActive).chain((0..=n).map(Threshold::PassiveUpTo))
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_signed())
    }
}

/// Largest `t` with the action map passive on `{0..=t}` and active above;
/// `None` when the map is not of threshold form.
pub fn extract_threshold(actions: &[Action]) -> Option<Threshold> {
    let first_active = actions.iter().position(|a| a.is_active());
    match first_active {
        None if actions.is_empty() => None,
        None => Some(Threshold::PassiveUpTo(actions.len() - 1)),
        Some(k) => {
            if actions[k..].iter().all(|a| a.is_active()) {
                Some(match k {
                    0 => Threshold::AlwaysActive,
                    k => Threshold::PassiveUpTo(k - 1),
                })
            } else {
                None
            }
        }
    }
}

// ── The single-user MDP ────────────────────────────────────────────────────

/// One user's controlled queue with tabulated holding cost and precomputed
/// transition rows for both actions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueMdp<T> {
    arrival: T,
    channel: T,
    beam_cost: T,
    holding: Vec<T>,
    passive_rows: Vec<TransitionRow<T>>,
    active_rows: Vec<TransitionRow<T>>,
}

impl<T: Scalar> QueueMdp<T> {
    pub fn new(p: &UserParams<T>) -> Result<Self> {
        p.validate()?;
        Self::with_holding_table(p, p.holding_table())
    }

    /// Same kernel as `p`, arbitrary holding-cost table over `{0, …, N}`.
    pub fn with_holding_table(p: &UserParams<T>, holding: Vec<T>) -> Result<Self> {
        p.validate()?;
        let n = p.buffer_size;
        if holding.len() != n + 1 {
            return Err(Error::LengthMismatch {
                what: "holding table",
                got: holding.len(),
                expected: n + 1,
            });
        }
        let rows = |u| {
            (0..=n)
                .map(|x| kernel_row(x, u, p.arrival_prob, p.channel_prob, n))
                .collect()
        };
        Ok(Self {
            arrival: p.arrival_prob,
            channel: p.channel_prob,
            beam_cost: p.beam_cost,
            passive_rows: rows(Action::Passive),
            active_rows: rows(Action::Active),
            holding,
        })
    }

    /// Replaces the transition row of `(x, action)`. Rows must stay
    /// distributions over `{0, …, N}`; the birth–death solvers reject
    /// kernels that are no longer nearest-neighbour.
    pub fn override_row(&mut self, x: usize, action: Action, entries: &[(usize, T)]) -> Result<()> {
        let n = self.max_state();
        if x > n {
            return Err(Error::StateOutOfRange { state: x, max: n });
        }
        if entries.len() > 3 {
            return Err(Error::invalid("row", "at most three entries"));
        }
        let mut row = TransitionRow::from_entries(entries);
        if let Some(&(bad, _)) = row.entries().iter().find(|&&(j, _)| j > n) {
            return Err(Error::StateOutOfRange { state: bad, max: n });
        }
        if (row.total() - T::one()).abs() > T::lit(1e-12) {
            return Err(Error::invalid("row", "probabilities must sum to 1"));
        }
        row.normalize();
        match action {
            Action::Passive => self.passive_rows[x] = row,
            Action::Active => self.active_rows[x] = row,
        }
        Ok(())
    }

    #[inline]
    pub fn max_state(&self) -> usize {
        self.holding.len() - 1
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.holding.len()
    }

    pub fn arrival(&self) -> T {
        self.arrival
    }

    pub fn channel(&self) -> T {
        self.channel
    }

    pub fn beam_cost(&self) -> T {
        self.beam_cost
    }

    pub fn holding(&self) -> &[T] {
        &self.holding
    }

    #[inline]
    pub fn row(&self, x: usize, action: Action) -> &TransitionRow<T> {
        match action {
            Action::Passive => &self.passive_rows[x],
            Action::Active => &self.active_rows[x],
        }
    }

    /// Per-stage cost `H(x) + P` (active) or `H(x) + λ` (passive).
    #[inline]
    pub fn stage_cost(&self, x: usize, action: Action, tax: T) -> T {
        self.holding[x]
            + match action {
                Action::Active => self.beam_cost,
                Action::Passive => tax,
            }
    }

    /// Magnitude used to turn relative tolerances into absolute ones.
    pub fn cost_scale(&self, tax: T) -> T {
        let hmax = self
            .holding
            .iter()
            .fold(T::zero(), |m, &h| m.max(h.abs()));
        T::one()
            .max(hmax + self.beam_cost.abs())
            .max(hmax + tax.abs())
    }

    /// Q-values `(passive, active)` at `x` against `values`.
    #[inline]
    pub fn q_values(&self, x: usize, tax: T, values: &[T]) -> (T, T) {
        let q0 = self.stage_cost(x, Action::Passive, tax) + self.passive_rows[x].expect(values);
        let q1 = self.stage_cost(x, Action::Active, tax) + self.active_rows[x].expect(values);
        (q0, q1)
    }

    fn birth_death(&self, x: usize, action: Action) -> Result<(T, T)> {
        let row = self.row(x, action);
        if row.iter().any(|(j, _)| j.abs_diff(x) > 1) {
            return Err(Error::invalid("kernel", format!("row {x} is not nearest-neighbour")));
        }
        let up = if x < self.max_state() { row.prob(x + 1) } else { T::zero() };
        let down = if x > 0 { row.prob(x - 1) } else { T::zero() };
        Ok((up, down))
    }
}

// ── Relative value iteration ───────────────────────────────────────────────

/// Optimal solution of the tax-`λ` problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution<T> {
    pub tax: T,
    /// Relative values with `values[0] = 0`.
    pub values: Vec<T>,
    pub avg_cost: T,
    /// Minimizing action per state, ties broken toward passive.
    pub actions: Vec<Action>,
    /// `None` when the action map is not of threshold form.
    pub threshold: Option<Threshold>,
    /// `max_x |TV(x) − V(x) − η|` at the returned values.
    pub residual: T,
    pub iterations: usize,
}

/// Relative value iteration from `V ≡ 0`.
pub fn relative_value_iteration<T: Scalar>(
    tax: T,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<ValueSolution<T>> {
    relative_value_iteration_from(tax, mdp, knobs, None)
}

/// Relative value iteration warm-started from `init` (renormalized to
/// `init[0] = 0`).
pub fn relative_value_iteration_from<T: Scalar>(
    tax: T,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
    init: Option<&[T]>,
) -> Result<ValueSolution<T>> {
    knobs.validate()?;
    let n_states = mdp.num_states();
    let mut v = match init {
        Some(init) if init.len() == n_states => init.iter().map(|&x| x - init[0]).collect(),
        Some(init) => {
            return Err(Error::LengthMismatch {
                what: "initial values",
                got: init.len(),
                expected: n_states,
            })
        }
        None => vec![T::zero(); n_states],
    };
    let mut tv = vec![T::zero(); n_states];
    let tol = knobs.rvi_tol * mdp.cost_scale(tax);

    let mut span = T::infinity();
    for iter in 1..=knobs.rvi_max_iter {
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for x in 0..n_states {
            let (q0, q1) = mdp.q_values(x, tax, &v);
            tv[x] = q0.min(q1);
            let diff = tv[x] - v[x];
            lo = lo.min(diff);
            hi = hi.max(diff);
        }
        span = hi - lo;
        let base = tv[0];
        let mut vmax = T::zero();
        for x in 0..n_states {
            v[x] = tv[x] - base;
            vmax = vmax.max(v[x].abs());
        }
        // Below a few ulps of the values the span is rounding noise.
        if span <= tol.max(rounding_floor(vmax)) {
            return Ok(finish_rvi(tax, mdp, v, iter));
        }
    }
    Err(Error::NoConvergence {
        iterations: knobs.rvi_max_iter,
        residual: span.as_f64(),
    })
}

#[inline]
fn rounding_floor<T: Scalar>(magnitude: T) -> T {
    T::lit(64.0) * T::epsilon() * magnitude
}

fn finish_rvi<T: Scalar>(tax: T, mdp: &QueueMdp<T>, values: Vec<T>, iterations: usize) -> ValueSolution<T> {
    let n_states = mdp.num_states();
    let mut actions = Vec::with_capacity(n_states);
    let mut tv = Vec::with_capacity(n_states);
    for x in 0..n_states {
        let (q0, q1) = mdp.q_values(x, tax, &values);
        actions.push(if q1 < q0 { Action::Active } else { Action::Passive });
        tv.push(q0.min(q1));
    }
    let diffs: Vec<T> = tv.iter().zip(&values).map(|(&t, &v)| t - v).collect();
    let lo = diffs.iter().copied().fold(T::infinity(), T::min);
    let hi = diffs.iter().copied().fold(T::neg_infinity(), T::max);
    let avg_cost = (lo + hi) / T::lit(2.0);
    let residual = diffs
        .iter()
        .fold(T::zero(), |m, &d| m.max((d - avg_cost).abs()));
    ValueSolution {
        tax,
        threshold: extract_threshold(&actions),
        values,
        avg_cost,
        actions,
        residual,
        iterations,
    }
}

/// `max_x |min_u Q(x,u) − V(x) − η|` for arbitrary `(V, η)`.
pub fn bellman_residual<T: Scalar>(tax: T, values: &[T], avg_cost: T, mdp: &QueueMdp<T>) -> T {
    (0..mdp.num_states()).fold(T::zero(), |m, x| {
        let (q0, q1) = mdp.q_values(x, tax, values);
        m.max((q0.min(q1) - avg_cost - values[x]).abs())
    })
}

// ── Discounted value iteration ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedSolution<T> {
    pub values: Vec<T>,
    pub v0: T,
    pub iterations: usize,
}

/// Value iteration for the `γ`-discounted problem. Stops on the span of the
/// update and applies the MacQueen midpoint correction, so the returned
/// values are within `rvi_tol · scale / (1−γ)` of the fixed point.
pub fn discounted_value_iteration<T: Scalar>(
    tax: T,
    gamma: T,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<DiscountedSolution<T>> {
    knobs.validate()?;
    if !(gamma > T::zero() && gamma < T::one()) {
        return Err(Error::invalid("discount", format!("{gamma} not in (0,1)")));
    }
    let n_states = mdp.num_states();
    let mut v = vec![T::zero(); n_states];
    let mut tv = vec![T::zero(); n_states];
    let tol = knobs.rvi_tol * mdp.cost_scale(tax);
    let one = T::one();

    let mut span = T::infinity();
    for iter in 1..=knobs.rvi_max_iter {
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for x in 0..n_states {
            let q0 = mdp.stage_cost(x, Action::Passive, tax) + gamma * mdp.row(x, Action::Passive).expect(&v);
            let q1 = mdp.stage_cost(x, Action::Active, tax) + gamma * mdp.row(x, Action::Active).expect(&v);
            tv[x] = q0.min(q1);
            let diff = tv[x] - v[x];
            lo = lo.min(diff);
            hi = hi.max(diff);
        }
        span = hi - lo;
        std::mem::swap(&mut v, &mut tv);
        let vmax = v.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        if span <= (tol * (one - gamma) / gamma).max(rounding_floor(vmax)) {
            let shift = gamma / (one - gamma) * (lo + hi) / T::lit(2.0);
            for value in v.iter_mut() {
                *value += shift;
            }
            return Ok(DiscountedSolution {
                v0: v[0],
                values: v,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: knobs.rvi_max_iter,
        residual: span.as_f64(),
    })
}

// ── Stationary distributions of threshold policies ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution<T> {
    pub probs: Vec<T>,
    pub threshold: Threshold,
    /// Set when every state is passive: the chain is pure birth and the
    /// distribution is the point mass at `N`.
    pub degenerate: bool,
}

impl<T: Scalar> StationaryDistribution<T> {
    /// Mass on the passive set `{0, …, t}`.
    pub fn passive_mass(&self) -> T {
        match self.threshold {
            Threshold::AlwaysActive => T::zero(),
            Threshold::PassiveUpTo(t) => compensated_sum(self.probs[..=t].iter().copied()),
        }
    }

    /// `max_j |(vP)(j) − v(j)|` under the threshold policy's kernel.
    pub fn balance_residual(&self, mdp: &QueueMdp<T>) -> T {
        let mut next = vec![T::zero(); self.probs.len()];
        for (x, &px) in self.probs.iter().enumerate() {
            for (j, p) in mdp.row(x, self.threshold.action(x)).iter() {
                next[j] += px * p;
            }
        }
        next.iter()
            .zip(&self.probs)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn expect(&self, f: &[T]) -> T {
        compensated_sum(self.probs.iter().zip(f).map(|(&p, &v)| p * v))
    }
}

/// Stationary distribution of the chain induced by threshold `t`, from the
/// birth–death product formula evaluated in log space.
pub fn stationary_distribution<T: Scalar>(
    threshold: Threshold,
    mdp: &QueueMdp<T>,
) -> Result<StationaryDistribution<T>> {
    let n = mdp.max_state();
    let start = match threshold {
        Threshold::AlwaysActive => 0,
        Threshold::PassiveUpTo(t) if t > n => {
            return Err(Error::StateOutOfRange { state: t, max: n })
        }
        Threshold::PassiveUpTo(t) if t == n => {
            let mut probs = vec![T::zero(); n + 1];
            probs[n] = T::one();
            return Ok(StationaryDistribution {
                probs,
                threshold,
                degenerate: true,
            });
        }
        Threshold::PassiveUpTo(t) => t,
    };
    let mut log_w = vec![T::neg_infinity(); n + 1];
    log_w[start] = T::zero();
    for y in start..n {
        let (up, _) = mdp.birth_death(y, threshold.action(y))?;
        let (_, down) = mdp.birth_death(y + 1, threshold.action(y + 1))?;
        if !(up > T::zero()) || !(down > T::zero()) {
            return Err(Error::invalid(
                "kernel",
                format!("chain under threshold {threshold} is reducible at state {y}"),
            ));
        }
        log_w[y + 1] = log_w[y] + up.ln() - down.ln();
    }
    let peak = log_w[start..]
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = log_w.iter().map(|&l| (l - peak).exp()).collect();
    let total = compensated_sum(weights.iter().copied());
    Ok(StationaryDistribution {
        probs: weights.into_iter().map(|w| w / total).collect(),
        threshold,
        degenerate: false,
    })
}

/// Long-run average cost of threshold `t` under tax `λ`:
/// `Σ_j H(j)v(j) + λ·Σ_{j≤t} v(j) + P·Σ_{j>t} v(j)`.
pub fn threshold_average_cost<T: Scalar>(
    tax: T,
    threshold: Threshold,
    mdp: &QueueMdp<T>,
) -> Result<T> {
    let dist = stationary_distribution(threshold, mdp)?;
    if dist.degenerate {
        return Err(Error::DegenerateChain {
            threshold: mdp.max_state(),
        });
    }
    let passive = dist.passive_mass();
    let active = match threshold {
        Threshold::AlwaysActive => T::one(),
        Threshold::PassiveUpTo(t) => compensated_sum(dist.probs[t + 1..].iter().copied()),
    };
    Ok(dist.expect(mdp.holding()) + tax * passive + mdp.beam_cost() * active)
}

// ── Fixed-threshold policy evaluation ──────────────────────────────────────

/// `(V, η)` of a fixed policy, normalized to `V(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation<T> {
    pub values: Vec<T>,
    pub avg_cost: T,
    /// Largest absolute residual over the `N + 2` equations.
    pub residual: T,
}

fn policy_residual<T: Scalar>(
    tax: T,
    actions: &[Action],
    values: &[T],
    avg_cost: T,
    mdp: &QueueMdp<T>,
) -> T {
    let r = actions.iter().enumerate().fold(T::zero(), |m, (y, &u)| {
        let rhs = mdp.stage_cost(y, u, tax) - avg_cost + mdp.row(y, u).expect(values);
        m.max((values[y] - rhs).abs())
    });
    r.max(values[0].abs())
}

/// Solves the `N + 2` unknowns `(V(0..=N), η)` of
///
/// ```text
/// V(y) = H(y) + P − η + Σ_z p₁(z|y)·V(z),   y > t
/// V(y) = H(y) + λ − η + Σ_z p₀(z|y)·V(z),   y ≤ t
/// V(0) = 0
/// ```
///
/// by exact elimination on the birth–death structure in `O(N)`; see
/// [`evaluate_policy_birth_death`].
pub fn solve_fixed_threshold<T: Scalar>(
    tax: T,
    threshold: Threshold,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<PolicyEvaluation<T>> {
    let actions: Vec<Action> = (0..mdp.num_states()).map(|y| threshold.action(y)).collect();
    evaluate_policy_birth_death(tax, &actions, mdp, knobs)
}

/// `(V, η)` of any action map on a nearest-neighbour kernel, in `O(N)`.
///
/// Every state below `N` can move up, so the only recurrent class is
/// `{r, …, N}` with `r` the highest state below `N` that cannot move down
/// (or `N` itself when `N` is absorbing). `η` is the stationary average of
/// the stage cost on that class. Increments `Δ(y) = V(y+1) − V(y)` follow
/// from the probability flux across each cut, summed from whichever side
/// carries less weight; below `r` they come from the forward recursion
/// `up(y)·Δ(y) = η − c(y) + down(y)·Δ(y−1)`.
pub fn evaluate_policy_birth_death<T: Scalar>(
    tax: T,
    actions: &[Action],
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<PolicyEvaluation<T>> {
    let n = mdp.max_state();
    if actions.len() != n + 1 {
        return Err(Error::LengthMismatch {
            what: "actions",
            got: actions.len(),
            expected: n + 1,
        });
    }
    let cost: Vec<T> = (0..=n).map(|y| mdp.stage_cost(y, actions[y], tax)).collect();
    let mut up = Vec::with_capacity(n + 1);
    let mut down = Vec::with_capacity(n + 1);
    for y in 0..=n {
        let (b, m) = mdp.birth_death(y, actions[y])?;
        up.push(b);
        down.push(m);
    }
    let pivot_guard = |row: usize, pivot: T| {
        if pivot.abs() < knobs.linear_solve_pivot_tol {
            Err(Error::SingularSystem {
                row,
                pivot: pivot.as_f64(),
            })
        } else {
            Ok(pivot)
        }
    };

    let start = if down[n] > T::zero() {
        (0..n).rev().find(|&y| !(down[y] > T::zero())).unwrap_or(0)
    } else {
        n
    };
    let avg_cost = if start == n {
        cost[n]
    } else {
        let mut log_w = vec![T::zero(); n + 1 - start];
        for (k, y) in (start..n).enumerate() {
            log_w[k + 1] = log_w[k] + pivot_guard(y, up[y])?.ln() - down[y + 1].ln();
        }
        let peak = log_w.iter().copied().fold(T::neg_infinity(), T::max);
        let w: Vec<T> = log_w.iter().map(|&l| (l - peak).exp()).collect();
        let total = compensated_sum(w.iter().copied());
        compensated_sum(w.iter().zip(&cost[start..]).map(|(&w, &c)| w * c)) / total
    };

    let mut delta = vec![T::zero(); n];
    for y in 0..start {
        let carry = if y > 0 { down[y] * delta[y - 1] } else { T::zero() };
        delta[y] = (avg_cost - cost[y] + carry) / pivot_guard(y, up[y])?;
    }
    if start < n {
        // head[y] = Σ_{z≤y} (π(z)/π(y))(η − c(z)), tail[y] = Σ_{z>y} (π(z)/π(y))(c(z) − η);
        // both equal b(y)·Δ(y).
        let len = n - start;
        let mut head = vec![T::zero(); len];
        let mut head_mag = vec![T::zero(); len];
        let mut tail = vec![T::zero(); len];
        let mut tail_mag = vec![T::zero(); len];
        for (k, y) in (start..n).enumerate() {
            let term = avg_cost - cost[y];
            if k == 0 {
                head[k] = term;
                head_mag[k] = term.abs();
            } else {
                let ratio = down[y] / pivot_guard(y, up[y - 1])?;
                head[k] = head[k - 1] * ratio + term;
                head_mag[k] = head_mag[k - 1] * ratio + term.abs();
            }
        }
        for (k, y) in (start..n).enumerate().rev() {
            let ratio = up[y] / pivot_guard(y + 1, down[y + 1])?;
            let term = cost[y + 1] - avg_cost;
            if k + 1 == len {
                tail[k] = ratio * term;
                tail_mag[k] = ratio * term.abs();
            } else {
                tail[k] = ratio * (term + tail[k + 1]);
                tail_mag[k] = ratio * (term.abs() + tail_mag[k + 1]);
            }
        }
        for (k, y) in (start..n).enumerate() {
            let flux = if head_mag[k] <= tail_mag[k] { head[k] } else { tail[k] };
            delta[y] = flux / pivot_guard(y, up[y])?;
        }
    }

    let mut values = Vec::with_capacity(n + 1);
    let mut acc = T::zero();
    values.push(acc);
    for d in delta {
        acc += d;
        values.push(acc);
    }
    let residual = policy_residual(tax, actions, &values, avg_cost, mdp);
    Ok(PolicyEvaluation {
        values,
        avg_cost,
        residual,
    })
}

/// Same system as [`solve_fixed_threshold`], assembled densely and solved by
/// LU with partial pivoting. `O(N³)`; kept as an independent route.
pub fn solve_fixed_threshold_dense<T: Scalar>(
    tax: T,
    threshold: Threshold,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<PolicyEvaluation<T>> {
    let actions: Vec<Action> = (0..mdp.num_states()).map(|y| threshold.action(y)).collect();
    evaluate_policy_dense(tax, &actions, mdp, knobs)
}

/// `(V, η)` of an arbitrary stationary action map by dense LU. The map must
/// induce a single recurrent class, otherwise the system is singular.
pub fn evaluate_policy_dense<T: Scalar>(
    tax: T,
    actions: &[Action],
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<PolicyEvaluation<T>> {
    let n_states = mdp.num_states();
    if actions.len() != n_states {
        return Err(Error::LengthMismatch {
            what: "actions",
            got: actions.len(),
            expected: n_states,
        });
    }
    let dim = n_states + 1;
    let mut a = vec![T::zero(); dim * dim];
    let mut rhs = vec![T::zero(); dim];
    for (y, &u) in actions.iter().enumerate() {
        a[y * dim + y] += T::one();
        for (z, p) in mdp.row(y, u).iter() {
            a[y * dim + z] -= p;
        }
        a[y * dim + n_states] = T::one();
        rhs[y] = mdp.stage_cost(y, u, tax);
    }
    a[n_states * dim] = T::one();

    let x = lu_solve(&mut a, &mut rhs, dim, knobs.linear_solve_pivot_tol)?;
    let values = x[..n_states].to_vec();
    let avg_cost = x[n_states];
    let residual = (0..n_states).fold(values[0].abs(), |m, y| {
        let u = actions[y];
        let rhs = mdp.stage_cost(y, u, tax) - avg_cost + mdp.row(y, u).expect(&values);
        m.max((values[y] - rhs).abs())
    });
    Ok(PolicyEvaluation {
        values,
        avg_cost,
        residual,
    })
}

/// Howard policy iteration. Terminates in finitely many
/// steps even where relative value iteration crawls, which happens when two
/// policies with different recurrent classes are nearly tied.
///
/// Improvement keeps the incumbent action unless the other one is better by
/// more than `rvi_tol · scale`; the returned action map then applies the
/// usual passive tie rule at the final values.
pub fn policy_iteration<T: Scalar>(
    tax: T,
    mdp: &QueueMdp<T>,
    knobs: &SolverKnobs<T>,
) -> Result<ValueSolution<T>> {
    knobs.validate()?;
    let n_states = mdp.num_states();
    let margin = knobs.rvi_tol * mdp.cost_scale(tax);
    let mut actions = vec![Action::Active; n_states];
    // Passive at the empty queue whenever it is cheaper, so the start is unichain.
    actions[0] = if tax <= mdp.beam_cost() { Action::Passive } else { Action::Active };
    for iter in 1..=n_states.max(2) * 4 {
        // The structured route stays exact where dense pivots underflow
        // (stationary mass far below ε); dense covers general kernels.
        let eval = evaluate_policy_birth_death(tax, &actions, mdp, knobs)
            .or_else(|_| evaluate_policy_dense(tax, &actions, mdp, knobs))?;
        let mut changed = false;
        for x in 0..n_states {
            let (q0, q1) = mdp.q_values(x, tax, &eval.values);
            let better = match actions[x] {
                Action::Passive if q1 < q0 - margin => Some(Action::Active),
                Action::Active if q0 < q1 - margin => Some(Action::Passive),
                _ => None,
            };
            if let Some(u) = better {
                actions[x] = u;
                changed = true;
            }
        }
        if !changed {
            return Ok(finish_rvi(tax, mdp, eval.values, iter));
        }
    }
    Err(Error::NoConvergence {
        iterations: n_states.max(2) * 4,
        residual: f64::NAN,
    })
}

/// In-place Gaussian elimination with partial pivoting on a row-major
/// `dim × dim` matrix.
pub(crate) fn lu_solve<T: Scalar>(a: &mut [T], b: &mut [T], dim: usize, pivot_tol: T) -> Result<Vec<T>> {
    let scale = a.iter().fold(T::zero(), |m, &v| m.max(v.abs())).max(T::one());
    for col in 0..dim {
        let (piv_row, piv_val) = (col..dim)
            .map(|r| (r, a[r * dim + col].abs()))
            .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_val < pivot_tol * scale {
            return Err(Error::SingularSystem {
                row: col,
                pivot: piv_val.as_f64(),
            });
        }
        if piv_row != col {
            for k in 0..dim {
                a.swap(col * dim + k, piv_row * dim + k);
            }
            b.swap(col, piv_row);
        }
        let pivot = a[col * dim + col];
        for r in col + 1..dim {
            let factor = a[r * dim + col] / pivot;
            if factor == T::zero() {
                continue;
            }
            for k in col..dim {
                let upd = factor * a[col * dim + k];
                a[r * dim + k] -= upd;
            }
            let upd = factor * b[col];
            b[r] -= upd;
        }
    }
    let mut x = vec![T::zero(); dim];
    for r in (0..dim).rev() {
        let mut acc = b[r];
        for k in r + 1..dim {
            acc -= a[r * dim + k] * x[k];
        }
        x[r] = acc / a[r * dim + r];
    }
    Ok(x)
}

// ── Structural quantities ──────────────────────────────────────────────────

/// `g(x) = E[V((x−D)⁺ + A)] − E[V(x + A)]`, the continuation advantage of
/// serving at `x`, for every state.
pub fn service_advantage<T: Scalar>(values: &[T], mdp: &QueueMdp<T>) -> Vec<T> {
    (0..mdp.num_states())
        .map(|x| mdp.row(x, Action::Active).expect(values) - mdp.row(x, Action::Passive).expect(values))
        .collect()
}
