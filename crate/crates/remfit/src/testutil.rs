//! Shared helpers for unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data_model::{Event, EventLog, NodeAttributes, NodeId, Timestamp};

/// Random causally valid log: senders cite strictly earlier nodes, no
/// duplicate dyads, events sorted by time.
pub fn random_log(rng: &mut ChaCha8Rng, n_nodes: usize, n_events: usize) -> EventLog {
    let nodes: Vec<NodeAttributes> = (0..n_nodes)
        .map(|i| {
            NodeAttributes::new(
                format!("n{i}"),
                Timestamp::from_days(rng.random_range(0..500)),
                vec!["A".into()],
                None,
                0,
            )
        })
        .collect();
    let mut events = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0;
    while events.len() < n_events && attempts < n_events * 20 {
        attempts += 1;
        let s = rng.random_range(0..n_nodes);
        let r = rng.random_range(0..n_nodes);
        if s == r || nodes[r].pub_date >= nodes[s].pub_date || !seen.insert((s, r)) {
            continue;
        }
        events.push(Event {
            sender: NodeId(s as u32),
            receiver: NodeId(r as u32),
            time: nodes[s].pub_date,
        });
    }
    events.sort_by_key(|e| e.time);
    EventLog::new(nodes, events).unwrap()
}
