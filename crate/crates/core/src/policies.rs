//! Per-slot user selection.
//!
//! Every rule looks only at the queue-length vector at the start of the slot
//! (channel outcomes are drawn afterwards), never picks an empty queue, and
//! selects `min(B, #non-empty)` users. Ties are broken uniformly at random
//! with the caller's policy stream.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PolicyKind;
use crate::whittle::{lookup_index, WhittleTable};

/// Users chosen in one slot, in increasing id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: Vec<usize>,
    pub active_count: usize,
}

impl Selection {
    fn from_users(mut chosen: Vec<usize>) -> Self {
        chosen.sort_unstable();
        Self {
            active_count: chosen.len(),
            chosen,
        }
    }

    pub fn empty() -> Self {
        Self::from_users(Vec::new())
    }

    pub fn contains(&self, user: usize) -> bool {
        self.chosen.binary_search(&user).is_ok()
    }
}

fn non_empty(queues: &[usize]) -> Vec<usize> {
    (0..queues.len()).filter(|&i| queues[i] > 0).collect()
}

/// Shuffle, then stable-sort by key: equal keys end up in uniformly random
/// order, so truncating to `b` breaks ties uniformly.
fn top_by_key<R: Rng + ?Sized>(
    mut users: Vec<usize>,
    key: impl Fn(usize) -> f64,
    largest_first: bool,
    b: usize,
    rng: &mut R,
) -> Selection {
    users.shuffle(rng);
    users.sort_by(|&i, &j| {
        let ord = key(i).total_cmp(&key(j));
        if largest_first {
            ord.reverse()
        } else {
            ord
        }
    });
    users.truncate(b);
    Selection::from_users(users)
}

// ── Rules ──────────────────────────────────────────────────────────────────

/// The `B` non-empty users with the smallest table index at their current
/// queue length.
pub fn whittle_select<R: Rng + ?Sized>(
    queues: &[usize],
    tables: &[WhittleTable<f64>],
    b: usize,
    rng: &mut R,
) -> Result<Selection> {
    if tables.len() != queues.len() {
        return Err(Error::LengthMismatch {
            what: "index tables",
            got: tables.len(),
            expected: queues.len(),
        });
    }
    let users = non_empty(queues);
    let mut keys = vec![0.0; queues.len()];
    for &i in &users {
        keys[i] = lookup_index(&tables[i], queues[i])?;
    }
    Ok(top_by_key(users, |i| keys[i], false, b, rng))
}

/// Longest queues first.
pub fn lqf_select<R: Rng + ?Sized>(queues: &[usize], b: usize, rng: &mut R) -> Selection {
    top_by_key(non_empty(queues), |i| queues[i] as f64, true, b, rng)
}

/// Largest `x_i · d_i` first.
pub fn mws_select<R: Rng + ?Sized>(
    queues: &[usize],
    channel_probs: &[f64],
    b: usize,
    rng: &mut R,
) -> Result<Selection> {
    if channel_probs.len() != queues.len() {
        return Err(Error::LengthMismatch {
            what: "channel probabilities",
            got: channel_probs.len(),
            expected: queues.len(),
        });
    }
    Ok(top_by_key(
        non_empty(queues),
        |i| queues[i] as f64 * channel_probs[i],
        true,
        b,
        rng,
    ))
}

/// Draws users with probability `w_i / Σ w` until `min(B, #non-empty)`
/// distinct non-empty users are collected; draws on empty or already chosen
/// users are discarded.
pub fn wfq_select<R: Rng + ?Sized>(
    queues: &[usize],
    weights: &[f64],
    b: usize,
    rng: &mut R,
) -> Result<Selection> {
    if weights.len() != queues.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            got: weights.len(),
            expected: queues.len(),
        });
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights", format!("{w} is not positive")));
    }
    let want = b.min(non_empty(queues).len());
    if want == 0 {
        return Ok(Selection::empty());
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid("weights", e.to_string()))?;
    let mut taken = vec![false; queues.len()];
    let mut chosen = Vec::with_capacity(want);
    while chosen.len() < want {
        let i = dist.sample(rng);
        if queues[i] > 0 && !taken[i] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    Ok(Selection::from_users(chosen))
}

/// Uniform sample of `min(B, #non-empty)` distinct non-empty users.
pub fn random_select<R: Rng + ?Sized>(queues: &[usize], b: usize, rng: &mut R) -> Selection {
    let mut users = non_empty(queues);
    users.shuffle(rng);
    users.truncate(b);
    Selection::from_users(users)
}

// ── Dispatch ───────────────────────────────────────────────────────────────

/// A policy together with the per-user data it ranks by.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub kind: PolicyKind,
    pub num_beams: usize,
    pub tables: Option<Vec<WhittleTable<f64>>>,
    pub channel_probs: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Scheduler {
    pub fn select<R: Rng + ?Sized>(&self, queues: &[usize], rng: &mut R) -> Result<Selection> {
        let b = self.num_beams;
        match self.kind {
            PolicyKind::Whittle => {
                let tables = self
                    .tables
                    .as_deref()
                    .ok_or_else(|| Error::Config("whittle policy needs index tables".into()))?;
                whittle_select(queues, tables, b, rng)
            }
            PolicyKind::Lqf => Ok(lqf_select(queues, b, rng)),
            PolicyKind::Mws => mws_select(queues, &self.channel_probs, b, rng),
            PolicyKind::Wfq => wfq_select(queues, &self.weights, b, rng),
            PolicyKind::Random => Ok(random_select(queues, b, rng)),
        }
    }
}
