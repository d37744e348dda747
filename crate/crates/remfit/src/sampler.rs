//! Nested case-control sampling: one uniformly drawn non-cited control per
//! event, plus the c-candidate sub-risk-set used to keep time-varying
//! statistics affordable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{EventLog, NodeId, Timestamp};

/// The sampled control r* for one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlAssignment {
    pub event_index: usize,
    pub control: NodeId,
}

/// Up to c distinct eligible candidates for one event, in risk-set order when
/// exhaustive, otherwise in draw order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub event_index: usize,
    pub candidates: Vec<NodeId>,
}

/// Controls for all events; events whose eligible risk set is empty are
/// skipped and listed rather than aborting the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSample {
    pub assignments: Vec<ControlAssignment>,
    pub skipped: Vec<usize>,
}

impl ControlSample {
    /// (event_index, control) pairs in event order, as consumed by
    /// covariate assembly.
    pub fn pairs(&self) -> Vec<(usize, NodeId)> {
        self.assignments
            .iter()
            .map(|a| (a.event_index, a.control))
            .collect()
    }
}

/// Number of nodes at risk at `t` (published strictly before), via binary
/// search on the publication-date index.
pub fn risk_set_size(log: &EventLog, t: Timestamp) -> usize {
    log.risk_prefix(t).len()
}

/// Eligibility of `x` as a control/candidate for the event (s, r, t): at risk
/// at t, not the sender, and not cited by the sender (which covers r itself).
fn eligible(log: &EventLog, sender: NodeId, x: NodeId, t: Timestamp) -> bool {
    x != sender && log.node(x).pub_date < t && !log.has_cited(sender, x)
}

/// ChaCha stream keyed by event index: draws are independent of iteration
/// order, so events can be sampled in parallel and reproduce bit-for-bit.
fn event_rng(seed: u64, event_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(event_index as u64);
    rng
}

fn sample_event_candidates(
    log: &EventLog,
    event_index: usize,
    c: usize,
    seed: u64,
) -> CandidateSet {
    let ev = &log.events()[event_index];
    let prefix = log.risk_prefix(ev.time);

    let mut excluded = 0usize;
    if ev.sender.index() < log.n_nodes() && log.node(ev.sender).pub_date < ev.time {
        excluded += 1;
    }
    for &cited in log.cited_by(ev.sender) {
        if log.node(cited).pub_date < ev.time {
            excluded += 1;
        }
    }
    let eligible_count = prefix.len().saturating_sub(excluded);
    if eligible_count == 0 {
        return CandidateSet {
            event_index,
            candidates: Vec::new(),
        };
    }

    let mut rng = event_rng(seed, event_index);
    let take = c.min(eligible_count);
    let candidates = if take * 2 >= eligible_count {
        // Dense draw: enumerate the eligible set and partially shuffle.
        let mut pool: Vec<NodeId> = prefix
            .iter()
            .copied()
            .filter(|&x| eligible(log, ev.sender, x, ev.time))
            .collect();
        if take == pool.len() {
            pool
        } else {
            for i in 0..take {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool
        }
    } else {
        // Sparse draw: rejection-sample prefix positions; exclusions are few.
        let mut seen = std::collections::HashSet::with_capacity(take * 2);
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            let x = prefix[rng.random_range(0..prefix.len())];
            if eligible(log, ev.sender, x, ev.time) && seen.insert(x) {
                out.push(x);
            }
        }
        out
    };
    CandidateSet {
        event_index,
        candidates,
    }
}

/// Per event, up to `c` distinct candidates drawn uniformly without
/// replacement from the eligible risk set. Deterministic given (log, seed).
pub fn sample_candidates(log: &EventLog, c: usize, seed: u64) -> Vec<CandidateSet> {
    assert!(c >= 1, "candidate count must be at least 1");
    (0..log.n_events())
        .into_par_iter()
        .map(|i| sample_event_candidates(log, i, c, seed))
        .collect()
}

/// One uniformly sampled control per event (the c = 1 case); events with an
/// empty eligible risk set are skipped and reported.
pub fn sample_controls(log: &EventLog, seed: u64) -> ControlSample {
    let sets = sample_candidates(log, 1, seed);
    let mut assignments = Vec::with_capacity(sets.len());
    let mut skipped = Vec::new();
    for set in sets {
        match set.candidates.first() {
            Some(&control) => assignments.push(ControlAssignment {
                event_index: set.event_index,
                control,
            }),
            None => skipped.push(set.event_index),
        }
    }
    ControlSample {
        assignments,
        skipped,
    }
}

pub fn controls_to_csv(log: &EventLog, sample: &ControlSample) -> String {
    let mut s = String::from("event_index,control\n");
    for a in &sample.assignments {
        s.push_str(&format!("{},{}\n", a.event_index, log.node(a.control).name));
    }
    s
}

pub fn candidates_to_csv(log: &EventLog, sets: &[CandidateSet]) -> String {
    let mut s = String::from("event_index,slot,candidate\n");
    for set in sets {
        for (slot, &cand) in set.candidates.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{}\n",
                set.event_index,
                slot,
                log.node(cand).name
            ));
        }
    }
    s
}
