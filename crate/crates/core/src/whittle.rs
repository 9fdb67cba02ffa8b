//! Whittle indices of a single user.
//!
//! The index of state `x` is the tax `λ` at which forming a beam at `x` and
//! staying passive are equally good. It is found by the damped fixed-point
//! iteration
//!
//! ```text
//! λ ← λ + β·( P + Σ_j p₁(j|x)·V_λ(j) − λ − Σ_j p₀(j|x)·V_λ(j) )
//! ```
//!
//! where `V_λ` is the relative value of the threshold policy with passive set
//! `{0, …, x}` at tax `λ`. Tables evaluate the iteration at a stride of
//! states and fill the rest by monotone linear interpolation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    policy_iteration, relative_value_iteration_from, solve_fixed_threshold, QueueMdp,
    SolverKnobs, Threshold,
};
use crate::model::{Action, UserParams};
use crate::scalar::Scalar;

// ── Knobs ──────────────────────────────────────────────────────────────────

/// Settings of the index iteration and of table construction.
///
/// `fp_tol` is relative: the iteration stops once
/// `|λ_{τ+1} − λ_τ| ≤ fp_tol · max(1, |λ_τ|)`.
///
/// Every `extrapolate_every` plain steps the last three iterates are replaced
/// by their Aitken Δ² limit (0 disables this). The bracket is affine in `λ`,
/// so the limit is the fixed point up to rounding; without it the contraction
/// factor `1 − β·(1 − s)` is within `1e-3` of one for lightly loaded users.
///
/// Indices whose magnitude would exceed
/// `saturation · max(1, P + H(N))` are reported as that bound with the sign
/// of the iteration's drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexKnobs<T> {
    pub step: T,
    pub lambda_init: T,
    pub fp_tol: T,
    pub fp_max_iter: usize,
    pub sample_stride: usize,
    pub extrapolate_every: usize,
    pub saturation: T,
}

impl<T: Scalar> Default for IndexKnobs<T> {
    fn default() -> Self {
        Self {
            step: T::lit(0.1),
            lambda_init: T::zero(),
            fp_tol: T::lit(1e-10),
            fp_max_iter: 200_000,
            sample_stride: 1,
            extrapolate_every: 3,
            saturation: T::lit(1e12),
        }
    }
}

impl<T: Scalar> IndexKnobs<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > T::zero()) || !self.step.is_finite() {
            return Err(Error::invalid("step", "must be positive"));
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::invalid("lambda_init", "must be finite"));
        }
        if !(self.fp_tol > T::zero()) {
            return Err(Error::invalid("fp_tol", "must be positive"));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::invalid("fp_max_iter", "must be positive"));
        }
        if self.sample_stride == 0 {
            return Err(Error::invalid("sample_stride", "must be at least 1"));
        }
        if !(self.saturation > T::one()) {
            return Err(Error::invalid("saturation", "must exceed 1"));
        }
        Ok(())
    }
}

// ── Index iteration ────────────────────────────────────────────────────────

/// Outcome of [`index_iteration_detailed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEstimate<T> {
    pub value: T,
    pub iterations: usize,
    /// Bracket of the update evaluated at `value`.
    pub residual: T,
    /// The fixed point lies beyond the saturation bound; `value` is the bound.
    pub saturated: bool,
}

/// `P + Σ p₁(j|x)V(j) − λ − Σ p₀(j|x)V(j)` with `V` the relative value of the
/// passive-up-to-`x` policy at tax `λ`.
pub fn index_bracket<T: Scalar>(
    x: usize,
    tax: T,
    mdp: &QueueMdp<T>,
    solver: &SolverKnobs<T>,
) -> Result<T> {
    let eval = solve_fixed_threshold(tax, Threshold::PassiveUpTo(x), mdp, solver)?;
    let v = &eval.values;
    // Both rows are distributions, so subtracting V(x) first only removes a
    // common offset and keeps the difference well conditioned.
    let centred = |u: Action| {
        mdp.row(x, u)
            .iter()
            .map(|(j, p)| p * (v[j] - v[x]))
            .sum::<T>()
    };
    Ok(mdp.beam_cost() - tax + centred(Action::Active) - centred(Action::Passive))
}

fn saturation_bound<T: Scalar>(mdp: &QueueMdp<T>, knobs: &IndexKnobs<T>) -> T {
    let hmax = mdp.holding()[mdp.max_state()];
    knobs.saturation * T::one().max(mdp.beam_cost() + hmax)
}

/// Whittle index of state `x`.
pub fn index_iteration<T: Scalar>(
    x: usize,
    p: &UserParams<T>,
    knobs: &IndexKnobs<T>,
    solver: &SolverKnobs<T>,
) -> Result<T> {
    let mdp = QueueMdp::new(p)?;
    index_iteration_detailed(x, &mdp, knobs, solver).map(|e| e.value)
}

/// Runs the damped iteration at state `x` of `mdp`.
pub fn index_iteration_detailed<T: Scalar>(
    x: usize,
    mdp: &QueueMdp<T>,
    knobs: &IndexKnobs<T>,
    solver: &SolverKnobs<T>,
) -> Result<IndexEstimate<T>> {
    knobs.validate()?;
    let n = mdp.max_state();
    if x > n {
        return Err(Error::StateOutOfRange { state: x, max: n });
    }
    if x == n {
        return Err(Error::DegenerateChain { threshold: n });
    }
    let beta = knobs.step;
    let bound = saturation_bound(mdp, knobs);
    let saturate = |direction: T, iterations: usize| -> Result<IndexEstimate<T>> {
        let value = if direction >= T::zero() { bound } else { -bound };
        Ok(IndexEstimate {
            value,
            iterations,
            residual: index_bracket(x, value, mdp, solver)?,
            saturated: true,
        })
    };

    let mut lambda = knobs.lambda_init;
    let mut history: Vec<T> = Vec::with_capacity(3);
    for iter in 1..=knobs.fp_max_iter {
        let bracket = index_bracket(x, lambda, mdp, solver)?;
        let step = beta * bracket;
        let next = lambda + step;
        if step.abs() <= knobs.fp_tol * T::one().max(lambda.abs()) {
            return Ok(IndexEstimate {
                value: lambda,
                iterations: iter,
                residual: bracket,
                saturated: false,
            });
        }
        if !next.is_finite() || next.abs() > bound {
            return saturate(step, iter);
        }
        history.push(lambda);
        lambda = next;
        if knobs.extrapolate_every > 0 && history.len() + 1 >= knobs.extrapolate_every.max(3) {
            let (l0, l1, l2) = (history[history.len() - 2], history[history.len() - 1], lambda);
            let second = l2 - T::lit(2.0) * l1 + l0;
            let first = l1 - l0;
            history.clear();
            if second != T::zero() {
                let limit = l0 - first * first / second;
                if !limit.is_finite() || limit.abs() > bound {
                    // A far-away limit is only trusted if the drift points there.
                    if (limit - l2) * (l2 - l1) > T::zero() {
                        return saturate(l2 - l1, iter);
                    }
                } else {
                    lambda = limit;
                }
            } else if first != T::zero() {
                // No curvature at all: the drift never decays.
                return saturate(first, iter);
            }
        }
    }
    Err(Error::IndexState {
        state: x,
        source: Box::new(Error::NoConvergence {
            iterations: knobs.fp_max_iter,
            residual: index_bracket(x, lambda, mdp, solver)?.as_f64(),
        }),
    })
}

// ── Bisection oracle ───────────────────────────────────────────────────────

/// Tax at which the relative-value-iteration optimal action at `x` flips from
/// passive (low tax) to active (high tax), located by bisection to `tol`.
///
/// This is the globally optimal flip point. The iteration's fixed point is
/// instead where the thresholds `x − 1` and `x` cost the same, and the two
/// coincide only where the optimal threshold passes through `x`.
///
/// The initial bracket `[−P − H(N), P + H(N)]` is doubled until the predicate
/// differs at its ends.
pub fn index_bisection_oracle<T: Scalar>(
    x: usize,
    p: &UserParams<T>,
    solver: &SolverKnobs<T>,
    tol: T,
) -> Result<T> {
    let mdp = QueueMdp::new(p)?;
    bisection_on(x, &mdp, solver, tol)
}

pub(crate) fn bisection_on<T: Scalar>(
    x: usize,
    mdp: &QueueMdp<T>,
    solver: &SolverKnobs<T>,
    tol: T,
) -> Result<T> {
    let n = mdp.max_state();
    if x > n {
        return Err(Error::StateOutOfRange { state: x, max: n });
    }
    if !(tol > T::zero()) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut warm: Option<Vec<T>> = None;
    let mut active_at = |tax: T| -> Result<bool> {
        match relative_value_iteration_from(tax, mdp, solver, warm.as_deref()) {
            Ok(sol) => {
                let active = sol.actions[x].is_active();
                warm = Some(sol.values);
                Ok(active)
            }
            // Near a tie between policies with different recurrent classes the
            // span decays sublinearly; policy iteration settles it exactly.
            Err(Error::NoConvergence { .. }) => {
                Ok(policy_iteration(tax, mdp, solver)?.actions[x].is_active())
            }
            Err(e) => Err(e),
        }
    };

    let width = mdp.beam_cost() + mdp.holding()[n];
    let (mut lo, mut hi) = (-width, width);
    let mut expansions = 0;
    loop {
        let lo_active = active_at(lo)?;
        let hi_active = active_at(hi)?;
        if !lo_active && hi_active {
            break;
        }
        if lo_active && !hi_active {
            return Err(Error::invalid(
                "activity predicate",
                format!("active at {lo:e} but passive at {hi:e}"),
            ));
        }
        expansions += 1;
        if expansions > 64 {
            return Err(Error::BracketFailure {
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        if lo_active {
            lo = lo * T::lit(2.0);
        } else {
            hi = hi * T::lit(2.0);
        }
    }
    while hi - lo > tol {
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if active_at(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo + (hi - lo) / T::lit(2.0))
}

// ── Index tables ───────────────────────────────────────────────────────────

/// Index of every state of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhittleTable<T> {
    pub user_id: usize,
    /// `(state, index)` at the states where the iteration was run.
    pub anchors: Vec<(usize, T)>,
    /// Interpolated, non-increasing index over `{0, …, N}`.
    pub full: Vec<T>,
    /// Anchor states whose index hit the saturation bound.
    #[serde(default)]
    pub saturated: Vec<usize>,
}

/// `{0, stride, 2·stride, …} ∪ {N−1}`, restricted to `{0, …, N−1}`.
pub fn anchor_states(n: usize, stride: usize) -> Vec<usize> {
    let last = n.saturating_sub(1);
    let mut states: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if states.last() != Some(&last) {
        states.push(last);
    }
    states
}

/// Builds the table for user `user_id`: iteration at the anchor states (in
/// parallel), linear interpolation in between, a running-minimum clamp, and
/// state `N` copying `N − 1`.
pub fn build_index_table<T: Scalar>(
    user_id: usize,
    p: &UserParams<T>,
    knobs: &IndexKnobs<T>,
    solver: &SolverKnobs<T>,
) -> Result<WhittleTable<T>> {
    knobs.validate()?;
    solver.validate()?;
    let mdp = QueueMdp::new(p)?;
    let n = mdp.max_state();
    let states = anchor_states(n, knobs.sample_stride);
    let estimates: Vec<IndexEstimate<T>> = states
        .par_iter()
        .map(|&x| {
            index_iteration_detailed(x, &mdp, knobs, solver).map_err(|e| match e {
                e @ Error::IndexState { .. } => e,
                e => Error::IndexState {
                    state: x,
                    source: Box::new(e),
                },
            })
        })
        .collect::<Result<_>>()?;

    let anchors: Vec<(usize, T)> = states
        .iter()
        .zip(&estimates)
        .map(|(&x, e)| (x, e.value))
        .collect();
    let saturated = states
        .iter()
        .zip(&estimates)
        .filter(|(_, e)| e.saturated)
        .map(|(&x, _)| x)
        .collect();
    Ok(WhittleTable {
        user_id,
        full: interpolate_anchors(&anchors, n),
        anchors,
        saturated,
    })
}

/// Linear interpolation between consecutive anchors, then
/// `full[x] = min(full[x], full[x−1])`; states past the last anchor copy it.
pub fn interpolate_anchors<T: Scalar>(anchors: &[(usize, T)], n: usize) -> Vec<T> {
    let mut full = vec![T::zero(); n + 1];
    for pair in anchors.windows(2) {
        let ((x0, v0), (x1, v1)) = (pair[0], pair[1]);
        let span = T::of_usize(x1 - x0);
        for x in x0..x1 {
            let w = T::of_usize(x - x0) / span;
            full[x] = v0 + w * (v1 - v0);
        }
    }
    if let Some(&(last, v)) = anchors.last() {
        for slot in &mut full[last..] {
            *slot = v;
        }
    }
    for x in 1..=n {
        if full[x] > full[x - 1] {
            full[x] = full[x - 1];
        }
    }
    full
}

/// `full[x]`.
pub fn lookup_index<T: Scalar>(table: &WhittleTable<T>, x: usize) -> Result<T> {
    table.full.get(x).copied().ok_or(Error::StateOutOfRange {
        state: x,
        max: table.full.len().saturating_sub(1),
    })
}

impl<T: Scalar> WhittleTable<T> {
    pub fn max_state(&self) -> usize {
        self.full.len() - 1
    }

    pub fn is_non_increasing(&self) -> bool {
        self.full.windows(2).all(|w| w[1] <= w[0])
    }

    /// `state<TAB>index` per line, indices with 12 significant digits, after
    /// a `# user <id>` header.
    pub fn to_text(&self) -> String {
        let mut out = format!("# user {}\n", self.user_id);
        for (x, v) in self.full.iter().enumerate() {
            out.push_str(&format!("{x}\t{:.11e}\n", v.as_f64()));
        }
        out
    }

    /// Inverse of [`WhittleTable::to_text`]. Anchor information is not
    /// serialized, so every state becomes an anchor.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut user_id = None;
        let mut full = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# user ") {
                user_id = Some(rest.trim().parse::<usize>().map_err(|e| {
                    Error::Config(format!("line {}: bad user id: {e}", lineno + 1))
                })?);
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(state), Some(value), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::Config(format!("line {}: expected `state index`", lineno + 1)));
            };
            let state: usize = state
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            let value: f64 = value
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            if state != full.len() {
                return Err(Error::Config(format!(
                    "line {}: state {state} out of sequence",
                    lineno + 1
                )));
            }
            full.push(T::lit(value));
        }
        let user_id = user_id.ok_or_else(|| Error::Config("missing `# user` header".into()))?;
        if full.is_empty() {
            return Err(Error::Config("empty table".into()));
        }
        Ok(Self {
            user_id,
            anchors: full.iter().copied().enumerate().collect(),
            full,
            saturated: Vec::new(),
        })
    }
}
