//! Event log data model: directed citation events, per-node attributes and
//! the CSV ingestion/validation layer everything downstream builds on.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Day-resolution timestamp, stored as days since 1970-01-01 (may be negative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    days: i64,
}

impl Timestamp {
    pub fn from_days(days: i64) -> Self {
        Timestamp { days }
    }

    pub fn days(&self) -> i64 {
        self.days
    }

    /// Parses an ISO-8601 calendar date `YYYY-MM-DD`.
    pub fn parse_iso(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('-').collect();
        // A leading '-' would split into an empty first part; negative years
        // are out of scope for this data.
        if parts.len() != 3 {
            return Err(format!("expected YYYY-MM-DD, got {s:?}"));
        }
        let year: i64 = parts[0].parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = parts[1]
            .parse()
            .map_err(|_| format!("bad month in {s:?}"))?;
        let day: u32 = parts[2].parse().map_err(|_| format!("bad day in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in {s:?}"));
        }
        if day < 1 || day > days_in_month(year, month) {
            return Err(format!("day out of range in {s:?}"));
        }
        Ok(Timestamp {
            days: days_from_civil(year, month, day),
        })
    }

    /// Formats as `YYYY-MM-DD`.
    pub fn to_iso(&self) -> String {
        let (y, m, d) = civil_from_days(self.days);
        format!("{y:04}-{m:02}-{d:02}")
    }

    /// Calendar year plus day-of-year / 365.25, e.g. 1976-07-02 -> ~1976.5.
    pub fn year_fraction(&self) -> f64 {
        let (y, _, _) = civil_from_days(self.days);
        let doy = self.days - days_from_civil(y, 1, 1) + 1;
        y as f64 + doy as f64 / 365.25
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_iso())
    }
}

fn is_leap(y: i64) -> bool {
    y % 4 == 0 && (y % 100 != 0 || y % 400 == 0)
}

fn days_in_month(y: i64, m: u32) -> u32 {
    match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 => {
            if is_leap(y) {
                29
            } else {
                28
            }
        }
        _ => 0,
    }
}

// Civil-date <-> day-count conversions (proleptic Gregorian, epoch 1970-01-01).
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = if m > 2 { m - 3 } else { m + 9 } as i64;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = if z >= 0 { z } else { z - 146096 } / 146097;
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

/// Dense index into [`EventLog::node`]; assigned in attribute-file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0 as usize
    }
}

/// A directed citation: `sender` cites `receiver` at `time` (the sender's
/// publication date).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub time: Timestamp,
}

/// Static per-node data. `ipc_classes` is kept sorted and deduplicated;
/// `embedding`, when present, must have Euclidean norm 1 within 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAttributes {
    pub name: String,
    pub pub_date: Timestamp,
    pub ipc_classes: Vec<String>,
    pub embedding: Option<Vec<f64>>,
    pub outdegree_at_pub: u32,
}

impl NodeAttributes {
    pub fn new(
        name: impl Into<String>,
        pub_date: Timestamp,
        mut ipc_classes: Vec<String>,
        embedding: Option<Vec<f64>>,
        outdegree_at_pub: u32,
    ) -> Self {
        ipc_classes.sort();
        ipc_classes.dedup();
        NodeAttributes {
            name: name.into(),
            pub_date,
            ipc_classes,
            embedding,
            outdegree_at_pub,
        }
    }
}

const EMBEDDING_NORM_TOL: f64 = 1e-6;

fn embedding_norm_ok(e: &[f64]) -> bool {
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm - 1.0).abs() <= EMBEDDING_NORM_TOL
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: malformed row: {message}")]
    MalformedRow {
        path: String,
        line: usize,
        message: String,
    },
    #[error("event references node {node:?} absent from the attribute table")]
    MissingAttribute { node: String },
    #[error("duplicate attribute row for node {0:?}")]
    DuplicateNode(String),
    #[error("node {node:?}: embedding norm differs from 1 by more than {EMBEDDING_NORM_TOL}")]
    BadEmbedding { node: String },
    #[error("event {0:?} uses a node id out of range")]
    NodeIdOutOfRange(Event),
    #[error("event log failed validation with {} violation(s); first: {}", .0.len(), .0[0])]
    InvalidLog(Vec<Violation>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub event_index: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Sender and receiver are the same node.
    SelfCitation,
    /// Event time differs from the sender's publication date.
    SenderTimeMismatch {
        event_time: Timestamp,
        sender_pub: Timestamp,
    },
    /// Receiver was published after (or, modulo the ingestion-order tie-break,
    /// on the same day as) the citation.
    TimeViolation {
        receiver_pub: Timestamp,
        event_time: Timestamp,
    },
    /// The (sender, receiver) pair already occurred at `first_index`.
    DuplicateDyad { first_index: usize },
    /// Event times are not non-decreasing.
    OrderingViolation,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::SelfCitation => {
                write!(f, "event {}: sender cites itself", self.event_index)
            }
            ViolationKind::SenderTimeMismatch {
                event_time,
                sender_pub,
            } => write!(
                f,
                "event {}: time {} differs from sender publication date {}",
                self.event_index, event_time, sender_pub
            ),
            ViolationKind::TimeViolation {
                receiver_pub,
                event_time,
            } => write!(
                f,
                "event {}: receiver published {} but cited at {}",
                self.event_index, receiver_pub, event_time
            ),
            ViolationKind::DuplicateDyad { first_index } => write!(
                f,
                "event {}: duplicate of event {}",
                self.event_index, first_index
            ),
            ViolationKind::OrderingViolation => {
                write!(f, "event {}: out of time order", self.event_index)
            }
        }
    }
}

/// Time-ordered event log plus the node table and the derived indices used by
/// sampling and covariate computation. Immutable once constructed; safe to
/// share read-only across worker threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "EventLogData", try_from = "EventLogData")]
pub struct EventLog {
    events: Vec<Event>,
    nodes: Vec<NodeAttributes>,
    name_index: HashMap<String, NodeId>,
    /// Node ids sorted by (pub_date, ingestion order); the prefix with
    /// pub_date < t is the risk set at t.
    pub_sorted: Vec<NodeId>,
    /// Publication days parallel to `pub_sorted`, for binary search.
    pub_days_sorted: Vec<i64>,
    /// Per sender: sorted receiver ids it cites (exclusion lookups).
    sender_cites: Vec<Vec<NodeId>>,
}

/// Serialization image of an [`EventLog`]: just nodes and events, with the
/// derived indices rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventLogData {
    pub nodes: Vec<NodeAttributes>,
    pub events: Vec<Event>,
}

impl From<EventLog> for EventLogData {
    fn from(log: EventLog) -> Self {
        EventLogData {
            nodes: log.nodes,
            events: log.events,
        }
    }
}

impl TryFrom<EventLogData> for EventLog {
    type Error = DataError;

    fn try_from(data: EventLogData) -> Result<Self, DataError> {
        EventLog::new(data.nodes, data.events)
    }
}

impl PartialEq for EventLog {
    fn eq(&self, other: &Self) -> bool {
        self.events == other.events && self.nodes == other.nodes
    }
}

impl EventLog {
    /// Builds a log from parts, preserving the given event order (so that
    /// [`validate`] can observe ordering violations). Checks only structural
    /// soundness: unique node names, in-range ids, embedding norms.
    pub fn new(nodes: Vec<NodeAttributes>, events: Vec<Event>) -> Result<Self, DataError> {
        let mut name_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if name_index
                .insert(n.name.clone(), NodeId(i as u32))
                .is_some()
            {
                return Err(DataError::DuplicateNode(n.name.clone()));
            }
            if let Some(e) = &n.embedding {
                if !embedding_norm_ok(e) {
                    return Err(DataError::BadEmbedding {
                        node: n.name.clone(),
                    });
                }
            }
        }
        for ev in &events {
            if ev.sender.index() >= nodes.len() || ev.receiver.index() >= nodes.len() {
                return Err(DataError::NodeIdOutOfRange(*ev));
            }
        }

        let mut pub_sorted: Vec<NodeId> = (0..nodes.len() as u32).map(NodeId).collect();
        pub_sorted.sort_by_key(|id| nodes[id.index()].pub_date);
        let pub_days_sorted = pub_sorted
            .iter()
            .map(|id| nodes[id.index()].pub_date.days())
            .collect();

        let mut sender_cites = vec![Vec::new(); nodes.len()];
        for ev in &events {
            sender_cites[ev.sender.index()].push(ev.receiver);
        }
        for cites in &mut sender_cites {
            cites.sort();
        }

        Ok(EventLog {
            events,
            nodes,
            name_index,
            pub_sorted,
            pub_days_sorted,
            sender_cites,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &NodeAttributes {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodeAttributes] {
        &self.nodes
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.name_index.get(name).copied()
    }

    /// Node ids published strictly before `t`, ordered by publication date.
    pub fn risk_prefix(&self, t: Timestamp) -> &[NodeId] {
        let n = self.pub_days_sorted.partition_point(|&d| d < t.days());
        &self.pub_sorted[..n]
    }

    /// Whether `sender` cites `receiver` anywhere in the log.
    pub fn has_cited(&self, sender: NodeId, receiver: NodeId) -> bool {
        self.sender_cites[sender.index()]
            .binary_search(&receiver)
            .is_ok()
    }

    /// Receivers cited by `sender`, sorted by id.
    pub fn cited_by(&self, sender: NodeId) -> &[NodeId] {
        &self.sender_cites[sender.index()]
    }

    /// Copy of the log without the events at `drop_indices` (lenient-ingest support).
    pub fn without_events(&self, drop_indices: &[usize]) -> EventLog {
        let drop: std::collections::HashSet<usize> = drop_indices.iter().copied().collect();
        let events = self
            .events
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, e)| *e)
            .collect();
        EventLog::new(self.nodes.clone(), events).expect("subset of a sound log is sound")
    }
}

/// Checks every event-level invariant and returns the violations found
/// (empty on success). Missing attributes cannot occur in a constructed log;
/// they are rejected at assembly time.
pub fn validate(log: &EventLog) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<(u32, u32), usize> = HashMap::with_capacity(log.n_events());
    let mut prev_time: Option<Timestamp> = None;
    for (i, ev) in log.events().iter().enumerate() {
        if let Some(p) = prev_time {
            if ev.time < p {
                out.push(Violation {
                    event_index: i,
                    kind: ViolationKind::OrderingViolation,
                });
            }
        }
        prev_time = Some(ev.time);

        if ev.sender == ev.receiver {
            out.push(Violation {
                event_index: i,
                kind: ViolationKind::SelfCitation,
            });
        }
        let sender_pub = log.node(ev.sender).pub_date;
        if ev.time != sender_pub {
            out.push(Violation {
                event_index: i,
                kind: ViolationKind::SenderTimeMismatch {
                    event_time: ev.time,
                    sender_pub,
                },
            });
        }
        let receiver_pub = log.node(ev.receiver).pub_date;
        // Same-day citations are tolerable only when the receiver was ingested
        // strictly before the sender; otherwise simultaneity is unresolvable
        // at day granularity.
        let ok = receiver_pub < ev.time || (receiver_pub == ev.time && ev.receiver < ev.sender);
        if !ok {
            out.push(Violation {
                event_index: i,
                kind: ViolationKind::TimeViolation {
                    receiver_pub,
                    event_time: ev.time,
                },
            });
        }
        match seen.entry((ev.sender.0, ev.receiver.0)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                out.push(Violation {
                    event_index: i,
                    kind: ViolationKind::DuplicateDyad {
                        first_index: *e.get(),
                    },
                });
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(i);
            }
        }
    }
    out
}

/// Event row as parsed from `events.csv`, before node interning.
#[derive(Debug, Clone)]
pub struct RawEvent {
    pub sender: String,
    pub receiver: String,
    pub time: Timestamp,
    pub line: usize,
}

const EVENTS_HEADER: &str = "sender,receiver,time";
const ATTRIBUTES_HEADER: &str = "node,pub_date,ipc_classes,embedding,outdegree";

pub fn parse_events_str(text: &str, path: &str) -> Result<Vec<RawEvent>, DataError> {
    let malformed = |line: usize, message: String| DataError::MalformedRow {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == EVENTS_HEADER => {}
        other => {
            return Err(malformed(
                1,
                format!(
                    "expected header {EVENTS_HEADER:?}, got {:?}",
                    other.map(|(_, h)| h)
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(
                line,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let time = Timestamp::parse_iso(fields[2]).map_err(|e| malformed(line, e))?;
        out.push(RawEvent {
            sender: fields[0].to_string(),
            receiver: fields[1].to_string(),
            time,
            line,
        });
    }
    Ok(out)
}

pub fn parse_attributes_str(text: &str, path: &str) -> Result<Vec<NodeAttributes>, DataError> {
    let malformed = |line: usize, message: String| DataError::MalformedRow {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == ATTRIBUTES_HEADER => {}
        other => {
            return Err(malformed(
                1,
                format!(
                    "expected header {ATTRIBUTES_HEADER:?}, got {:?}",
                    other.map(|(_, h)| h)
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(
                line,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let pub_date = Timestamp::parse_iso(fields[1]).map_err(|e| malformed(line, e))?;
        let ipc_classes: Vec<String> = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2].split(';').map(str::to_string).collect()
        };
        let embedding = if fields[3].is_empty() {
            None
        } else {
            let vals: Result<Vec<f64>, _> = fields[3].split(';').map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| malformed(line, format!("bad embedding value: {e}")))?;
            if !embedding_norm_ok(&vals) {
                return Err(malformed(line, "embedding norm differs from 1".into()));
            }
            Some(vals)
        };
        let outdegree: u32 = fields[4]
            .parse()
            .map_err(|e| malformed(line, format!("bad outdegree: {e}")))?;
        out.push(NodeAttributes::new(
            fields[0],
            pub_date,
            ipc_classes,
            embedding,
            outdegree,
        ));
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_events_csv(path: &Path) -> Result<Vec<RawEvent>, DataError> {
    parse_events_str(&read_to_string(path)?, &path.display().to_string())
}

pub fn read_attributes_csv(path: &Path) -> Result<Vec<NodeAttributes>, DataError> {
    parse_attributes_str(&read_to_string(path)?, &path.display().to_string())
}

/// Interns raw events against the node table and stably sorts them by time.
/// Does not validate event invariants; see [`load_event_log`] for the strict path.
pub fn assemble(nodes: Vec<NodeAttributes>, raw: Vec<RawEvent>) -> Result<EventLog, DataError> {
    let mut name_index = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if name_index
            .insert(n.name.as_str(), NodeId(i as u32))
            .is_some()
        {
            return Err(DataError::DuplicateNode(n.name.clone()));
        }
    }
    let mut events = Vec::with_capacity(raw.len());
    for r in &raw {
        let sender =
            *name_index
                .get(r.sender.as_str())
                .ok_or_else(|| DataError::MissingAttribute {
                    node: r.sender.clone(),
                })?;
        let receiver =
            *name_index
                .get(r.receiver.as_str())
                .ok_or_else(|| DataError::MissingAttribute {
                    node: r.receiver.clone(),
                })?;
        events.push(Event {
            sender,
            receiver,
            time: r.time,
        });
    }
    // Stable: equal timestamps keep input order.
    events.sort_by_key(|e| e.time);
    EventLog::new(nodes, events)
}

/// Strict loading path: parse both files, assemble, then require an empty
/// validation report.
pub fn load_event_log(events_path: &Path, attributes_path: &Path) -> Result<EventLog, DataError> {
    let nodes = read_attributes_csv(attributes_path)?;
    let raw = read_events_csv(events_path)?;
    let log = assemble(nodes, raw)?;
    let report = validate(&log);
    if report.is_empty() {
        Ok(log)
    } else {
        Err(DataError::InvalidLog(report))
    }
}

pub fn events_to_csv(log: &EventLog) -> String {
    let mut s = String::from(EVENTS_HEADER);
    s.push('\n');
    for ev in log.events() {
        s.push_str(&log.node(ev.sender).name);
        s.push(',');
        s.push_str(&log.node(ev.receiver).name);
        s.push(',');
        s.push_str(&ev.time.to_iso());
        s.push('\n');
    }
    s
}

pub fn attributes_to_csv(log: &EventLog) -> String {
    let mut s = String::from(ATTRIBUTES_HEADER);
    s.push('\n');
    for n in log.nodes() {
        let emb = n
            .embedding
            .as_ref()
            .map(|e| {
                e.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            n.name,
            n.pub_date.to_iso(),
            n.ipc_classes.join(";"),
            emb,
            n.outdegree_at_pub
        ));
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    std::fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_events_csv(log: &EventLog, path: &Path) -> Result<(), DataError> {
    write_file(path, &events_to_csv(log))
}

pub fn write_attributes_csv(log: &EventLog, path: &Path) -> Result<(), DataError> {
    write_file(path, &attributes_to_csv(log))
}
