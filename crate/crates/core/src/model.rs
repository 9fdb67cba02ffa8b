//! Single-user queue dynamics, per-slot costs and the experiment-level
//! configuration types.
//!
//! A user's queue lives on `{0, …, N}` where `N` is the buffer size. In each
//! slot the scheduler decides `u ∈ {0, 1}` before the channel `s ∼ Bern(d)` is
//! observed; a packet leaves when `u·s = 1`, and at the end of the slot a
//! packet arrives with probability `a`. Arrivals that find the buffer full are
//! dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::SolverKnobs;
use crate::scalar::Scalar;
use crate::whittle::IndexKnobs;

/// Beam decision for one user in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Passive,
    Active,
}

impl Action {
    pub const BOTH: [Action; 2] = [Action::Passive, Action::Active];

    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Action::Passive),
            1 => Ok(Action::Active),
            other => Err(Error::invalid("action", format!("{other} is not binary"))),
        }
    }

    #[inline]
    pub fn bit(self) -> u8 {
        match self {
            Action::Passive => 0,
            Action::Active => 1,
        }
    }

    #[inline]
    pub fn is_active(self) -> bool {
        self == Action::Active
    }
}

// ── Per-user parameters ────────────────────────────────────────────────────

/// Parameters of one user's queue: arrival probability `a`, good-channel
/// probability `d`, beam cost `P`, quadratic holding coefficient `q` and
/// buffer size `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserParams<T> {
    pub arrival_prob: T,
    pub channel_prob: T,
    pub beam_cost: T,
    pub holding_coeff: T,
    pub buffer_size: usize,
}

impl<T: Scalar> UserParams<T> {
    pub fn new(
        arrival_prob: T,
        channel_prob: T,
        beam_cost: T,
        holding_coeff: T,
        buffer_size: usize,
    ) -> Result<Self> {
        let p = Self {
            arrival_prob,
            channel_prob,
            beam_cost,
            holding_coeff,
            buffer_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: T| v > T::zero() && v < T::one();
        if !open_unit(self.arrival_prob) {
            return Err(Error::invalid(
                "arrival_prob",
                format!("{} not in (0,1)", self.arrival_prob),
            ));
        }
        if !open_unit(self.channel_prob) {
            return Err(Error::invalid(
                "channel_prob",
                format!("{} not in (0,1)", self.channel_prob),
            ));
        }
        if !(self.beam_cost > T::zero()) || !self.beam_cost.is_finite() {
            return Err(Error::invalid(
                "beam_cost",
                format!("{} must be positive and finite", self.beam_cost),
            ));
        }
        if !(self.holding_coeff >= T::zero()) || !self.holding_coeff.is_finite() {
            return Err(Error::invalid(
                "holding_coeff",
                format!("{} must be non-negative and finite", self.holding_coeff),
            ));
        }
        if self.buffer_size < 1 {
            return Err(Error::invalid("buffer_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Largest queue length `N`.
    #[inline]
    pub fn max_state(&self) -> usize {
        self.buffer_size
    }

    /// `H(x) = q·x²` tabulated over `{0, …, N}`.
    pub fn holding_table(&self) -> Vec<T> {
        (0..=self.buffer_size)
            .map(|x| {
                let x = T::of_usize(x);
                self.holding_coeff * x * x
            })
            .collect()
    }

    pub fn check_state(&self, x: usize) -> Result<()> {
        if x > self.buffer_size {
            Err(Error::StateOutOfRange {
                state: x,
                max: self.buffer_size,
            })
        } else {
            Ok(())
        }
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> UserParams<U> {
        UserParams {
            arrival_prob: U::lit(self.arrival_prob.as_f64()),
            channel_prob: U::lit(self.channel_prob.as_f64()),
            beam_cost: U::lit(self.beam_cost.as_f64()),
            holding_coeff: U::lit(self.holding_coeff.as_f64()),
            buffer_size: self.buffer_size,
        }
    }
}

// ── Dynamics ───────────────────────────────────────────────────────────────

/// One slot of queue evolution: `min(N, (x − s·u)⁺ + arr)`.
pub fn step_queue(x: usize, u: u8, s: u8, arr: u8, n_buf: usize) -> Result<usize> {
    if x > n_buf {
        return Err(Error::StateOutOfRange { state: x, max: n_buf });
    }
    for (name, bit) in [("action", u), ("channel", s), ("arrival", arr)] {
        if bit > 1 {
            return Err(Error::invalid(name, format!("{bit} is not binary")));
        }
    }
    let served = usize::from(s & u);
    Ok((x.saturating_sub(served) + usize::from(arr)).min(n_buf))
}

/// Next-state distribution of one user's queue; at most three entries and
/// every next state within one of the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow<T> {
    entries: [(usize, T); 3],
    len: usize,
}

impl<T: Scalar> TransitionRow<T> {
    fn empty() -> Self {
        Self {
            entries: [(0, T::zero()); 3],
            len: 0,
        }
    }

    fn add(&mut self, state: usize, prob: T) {
        if prob == T::zero() {
            return;
        }
        if let Some(e) = self.entries[..self.len].iter_mut().find(|e| e.0 == state) {
            e.1 += prob;
            return;
        }
        self.entries[self.len] = (state, prob);
        self.len += 1;
    }

    /// Builds a row from at most three `(state, prob)` pairs, merging
    /// duplicates and dropping zeros.
    pub(crate) fn from_entries(entries: &[(usize, T)]) -> Self {
        let mut row = Self::empty();
        for &(j, p) in entries {
            row.add(j, p);
        }
        row
    }

    /// Rescales to total mass one.
    pub(crate) fn normalize(&mut self) {
        let total = self.total();
        for e in &mut self.entries[..self.len] {
            e.1 /= total;
        }
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries[..self.len]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.entries().iter().copied()
    }

    /// Probability of landing in `state` (zero if absent).
    pub fn prob(&self, state: usize) -> T {
        self.iter()
            .find(|&(s, _)| s == state)
            .map_or(T::zero(), |(_, p)| p)
    }

    pub fn total(&self) -> T {
        self.iter().map(|(_, p)| p).sum()
    }

    /// `Σ_j p(j)·v[j]`.
    #[inline]
    pub fn expect(&self, v: &[T]) -> T {
        self.iter().map(|(j, p)| p * v[j]).sum()
    }
}

/// Marginalizes [`step_queue`] over the channel and arrival draws.
pub fn transition_row<T: Scalar>(
    x: usize,
    action: Action,
    p: &UserParams<T>,
) -> Result<TransitionRow<T>> {
    p.check_state(x)?;
    Ok(kernel_row(x, action, p.arrival_prob, p.channel_prob, p.buffer_size))
}

/// Unchecked kernel used by the solvers' inner loops.
#[inline]
pub(crate) fn kernel_row<T: Scalar>(
    x: usize,
    action: Action,
    a: T,
    d: T,
    n_buf: usize,
) -> TransitionRow<T> {
    let one = T::one();
    let mut row = TransitionRow::empty();
    let u = action.bit();
    for (s, ps) in [(0u8, one - d), (1u8, d)] {
        for (arr, pa) in [(0u8, one - a), (1u8, a)] {
            let served = usize::from(s & u);
            let next = (x.saturating_sub(served) + usize::from(arr)).min(n_buf);
            row.add(next, ps * pa);
        }
    }
    row
}

// ── Costs ──────────────────────────────────────────────────────────────────

/// `H(x) = q·x²`.
pub fn holding_cost<T: Scalar>(x: usize, p: &UserParams<T>) -> Result<T> {
    p.check_state(x)?;
    let xf = T::of_usize(x);
    Ok(p.holding_coeff * xf * xf)
}

/// Total slot cost `Σ_i H_i(x_i) + P_i·u_i`.
pub fn slot_cost<T: Scalar>(
    states: &[usize],
    actions: &[Action],
    params: &[UserParams<T>],
) -> Result<T> {
    if states.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "states",
            got: states.len(),
            expected: params.len(),
        });
    }
    if actions.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "actions",
            got: actions.len(),
            expected: params.len(),
        });
    }
    let mut total = T::zero();
    for ((&x, &u), p) in states.iter().zip(actions).zip(params) {
        total += holding_cost(x, p)?;
        if u.is_active() {
            total += p.beam_cost;
        }
    }
    Ok(total)
}

// ── System configuration ───────────────────────────────────────────────────

/// Per-slot user-selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Whittle,
    Lqf,
    Mws,
    Wfq,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Whittle,
        PolicyKind::Lqf,
        PolicyKind::Mws,
        PolicyKind::Wfq,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Whittle => "whittle",
            PolicyKind::Lqf => "lqf",
            PolicyKind::Mws => "mws",
            PolicyKind::Wfq => "wfq",
            PolicyKind::Random => "random",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("policy", format!("unknown policy `{s}`")))
    }
}

/// Full description of one simulated system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub num_users: usize,
    pub num_beams: usize,
    pub users: Vec<UserParams<f64>>,
    pub horizon: usize,
    pub warmup: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    #[serde(default)]
    pub solver: SolverKnobs<f64>,
    #[serde(default)]
    pub index: IndexKnobs<f64>,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users < 2 {
            return Err(Error::invalid("num_users", "need K >= 2"));
        }
        if self.users.len() != self.num_users {
            return Err(Error::LengthMismatch {
                what: "users",
                got: self.users.len(),
                expected: self.num_users,
            });
        }
        if self.num_beams < 1 || self.num_beams >= self.num_users {
            return Err(Error::invalid(
                "num_beams",
                format!(
                    "1 <= B < K violated (B = {}, K = {})",
                    self.num_beams, self.num_users
                ),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if self.warmup >= self.horizon {
            return Err(Error::invalid(
                "warmup",
                format!("warmup {} must be < horizon {}", self.warmup, self.horizon),
            ));
        }
        for user in &self.users {
            user.validate()?;
        }
        self.solver.validate()?;
        self.index.validate()?;
        Ok(())
    }

    /// Users' good-channel probabilities, in user order.
    pub fn channel_probs(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.channel_prob).collect()
    }

    /// Default WFQ weights `w_i = H_i(1) = q_i`.
    pub fn wfq_weights(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.holding_coeff).collect()
    }
}
