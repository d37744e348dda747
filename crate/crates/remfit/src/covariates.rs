//! The seven dyadic/nodal effect statistics, including the causally ordered
//! streaming computation of the two time-varying ones (indegree so far, time
//! since last citation).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{EventLog, NodeId, Timestamp};

/// The effect statistics. `CumulativeCitations` and `TimeFromLastEvent`
/// depend on the event history up to the query time; the rest are fixed
/// functions of the dyad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectKind {
    ReceiverPubYear,
    TimeLag,
    ReceiverOutdegree,
    TextualSimilarity,
    IpcJaccard,
    CumulativeCitations,
    TimeFromLastEvent,
}

impl EffectKind {
    pub const ALL: [EffectKind; 7] = [
        EffectKind::ReceiverPubYear,
        EffectKind::TimeLag,
        EffectKind::ReceiverOutdegree,
        EffectKind::TextualSimilarity,
        EffectKind::IpcJaccard,
        EffectKind::CumulativeCitations,
        EffectKind::TimeFromLastEvent,
    ];

    pub fn is_time_varying(&self) -> bool {
        matches!(
            self,
            EffectKind::CumulativeCitations | EffectKind::TimeFromLastEvent
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            EffectKind::ReceiverPubYear => "receiver_pub_year",
            EffectKind::TimeLag => "time_lag",
            EffectKind::ReceiverOutdegree => "receiver_outdegree",
            EffectKind::TextualSimilarity => "textual_similarity",
            EffectKind::IpcJaccard => "ipc_jaccard",
            EffectKind::CumulativeCitations => "cumulative_citations",
            EffectKind::TimeFromLastEvent => "time_from_last_event",
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EffectKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        EffectKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown effect {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error("node id {0} out of range")]
    UnknownNode(u32),
    #[error("node {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    EmbeddingDimMismatch(usize, usize),
    #[error("node {0:?} has an empty IPC class set")]
    EmptyClassSet(String),
    #[error("queries are not sorted non-decreasing by time")]
    UnsortedQueries,
}

fn checked(log: &EventLog, id: NodeId) -> Result<NodeId, CovariateError> {
    if id.index() < log.n_nodes() {
        Ok(id)
    } else {
        Err(CovariateError::UnknownNode(id.0))
    }
}

/// Publication date of `r` as a continuous calendar year.
pub fn receiver_pub_year(log: &EventLog, r: NodeId) -> Result<f64, CovariateError> {
    Ok(log.node(checked(log, r)?).pub_date.year_fraction())
}

/// Days between the sender's and the receiver's publication dates.
pub fn time_lag(log: &EventLog, s: NodeId, r: NodeId) -> Result<f64, CovariateError> {
    let s_pub = log.node(checked(log, s)?).pub_date;
    let r_pub = log.node(checked(log, r)?).pub_date;
    Ok((s_pub.days() - r_pub.days()) as f64)
}

/// Out-citations of `r` at its publication, read from the attribute table
/// (recounting from a truncated log would undercount boundary nodes).
pub fn receiver_outdegree(log: &EventLog, r: NodeId) -> Result<u32, CovariateError> {
    Ok(log.node(checked(log, r)?).outdegree_at_pub)
}

/// Cosine similarity of the two nodes' text embeddings.
pub fn textual_similarity(log: &EventLog, s: NodeId, r: NodeId) -> Result<f64, CovariateError> {
    let missing = |id: NodeId| CovariateError::MissingEmbedding(log.node(id).name.clone());
    let a = log
        .node(checked(log, s)?)
        .embedding
        .as_ref()
        .ok_or_else(|| missing(s))?;
    let b = log
        .node(checked(log, r)?)
        .embedding
        .as_ref()
        .ok_or_else(|| missing(r))?;
    if a.len() != b.len() {
        return Err(CovariateError::EmbeddingDimMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}

/// Jaccard index of the two nodes' IPC class-code sets.
pub fn ipc_jaccard(log: &EventLog, s: NodeId, r: NodeId) -> Result<f64, CovariateError> {
    let empty = |id: NodeId| CovariateError::EmptyClassSet(log.node(id).name.clone());
    let a = &log.node(checked(log, s)?).ipc_classes;
    let b = &log.node(checked(log, r)?).ipc_classes;
    if a.is_empty() {
        return Err(empty(s));
    }
    if b.is_empty() {
        return Err(empty(r));
    }
    // Both sides are sorted and deduplicated at construction.
    let (mut i, mut j, mut inter) = (0usize, 0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// History-dependent statistics of a receiver at a query time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeVarying {
    /// Citations received strictly before the query time.
    pub citations: u32,
    /// Days since the latest citation strictly before the query time, or
    /// since publication when never cited.
    pub gap_days: i64,
    pub never_cited: bool,
}

impl TimeVarying {
    pub fn citations_value(&self) -> f64 {
        self.citations as f64
    }

    pub fn gap_value(&self) -> f64 {
        self.gap_days as f64
    }
}

/// Answers (receiver, time) queries against the event history in one forward
/// pass over the merged streams. Queries must be sorted non-decreasing by
/// time; events with time >= the query time never influence the answer.
pub fn stream_time_varying(
    log: &EventLog,
    queries: &[(NodeId, Timestamp)],
) -> Result<Vec<TimeVarying>, CovariateError> {
    for w in queries.windows(2) {
        if w[1].1 < w[0].1 {
            return Err(CovariateError::UnsortedQueries);
        }
    }
    let mut indegree = vec![0u32; log.n_nodes()];
    let mut last_cited: Vec<Option<Timestamp>> = vec![None; log.n_nodes()];
    let mut out = Vec::with_capacity(queries.len());
    let events = log.events();
    let mut next_event = 0usize;
    for &(r, t) in queries {
        checked(log, r)?;
        while next_event < events.len() && events[next_event].time < t {
            let ev = &events[next_event];
            indegree[ev.receiver.index()] += 1;
            last_cited[ev.receiver.index()] = Some(ev.time);
            next_event += 1;
        }
        let (gap_days, never_cited) = match last_cited[r.index()] {
            Some(last) => (t.days() - last.days(), false),
            None => (t.days() - log.node(r).pub_date.days(), true),
        };
        out.push(TimeVarying {
            citations: indegree[r.index()],
            gap_days,
            never_cited,
        });
    }
    Ok(out)
}

/// Per-event raw covariate values for the sampled case/control pairs, one
/// column pair per enabled effect. Values are untransformed; scaling such as
/// log(1+x) is applied by the model configuration downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateStream {
    pub kinds: Vec<EffectKind>,
    /// Indices into the source log's event sequence, strictly increasing.
    pub event_indices: Vec<usize>,
    /// case[k][i]: value of kinds[k] for the observed receiver of row i.
    pub case: Vec<Vec<f64>>,
    /// control[k][i]: value of kinds[k] for the sampled control of row i.
    pub control: Vec<Vec<f64>>,
}

impl CovariateStream {
    pub fn n_rows(&self) -> usize {
        self.event_indices.len()
    }

    pub fn kind_pos(&self, kind: EffectKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }

    /// Row subset in the given order (fold splits for cross-validation).
    pub fn subset(&self, rows: &[usize]) -> CovariateStream {
        CovariateStream {
            kinds: self.kinds.clone(),
            event_indices: rows.iter().map(|&r| self.event_indices[r]).collect(),
            case: self
                .case
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
            control: self
                .control
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
        }
    }
}

/// Computes the covariate stream for (event, control) pairs. `pairs` must be
/// sorted by event index (the sampler emits them that way); this keeps the
/// embedded time-varying queries in causal order.
pub fn assemble_stream(
    log: &EventLog,
    pairs: &[(usize, NodeId)],
    kinds: &[EffectKind],
) -> Result<CovariateStream, CovariateError> {
    assert!(
        pairs.windows(2).all(|w| w[0].0 < w[1].0),
        "control pairs must be sorted by event index"
    );
    let n = pairs.len();
    let mut case = vec![vec![0.0; n]; kinds.len()];
    let mut control = vec![vec![0.0; n]; kinds.len()];

    // Time-varying effects share one merged pass: per row, the case query
    // then the control query at the event time.
    let tv_results = if kinds.iter().any(EffectKind::is_time_varying) {
        let mut queries = Vec::with_capacity(2 * n);
        for &(ei, ctrl) in pairs {
            let ev = &log.events()[ei];
            queries.push((ev.receiver, ev.time));
            queries.push((ctrl, ev.time));
        }
        Some(stream_time_varying(log, &queries)?)
    } else {
        None
    };

    for (row, &(ei, ctrl)) in pairs.iter().enumerate() {
        let ev = &log.events()[ei];
        let s = ev.sender;
        for (k, kind) in kinds.iter().enumerate() {
            let (cs, ct) = match kind {
                EffectKind::ReceiverPubYear => (
                    receiver_pub_year(log, ev.receiver)?,
                    receiver_pub_year(log, ctrl)?,
                ),
                EffectKind::TimeLag => (time_lag(log, s, ev.receiver)?, time_lag(log, s, ctrl)?),
                EffectKind::ReceiverOutdegree => (
                    receiver_outdegree(log, ev.receiver)? as f64,
                    receiver_outdegree(log, ctrl)? as f64,
                ),
                EffectKind::TextualSimilarity => (
                    textual_similarity(log, s, ev.receiver)?,
                    textual_similarity(log, s, ctrl)?,
                ),
                EffectKind::IpcJaccard => (
                    ipc_jaccard(log, s, ev.receiver)?,
                    ipc_jaccard(log, s, ctrl)?,
                ),
                EffectKind::CumulativeCitations => {
                    let tv = tv_results.as_ref().unwrap();
                    (
                        tv[2 * row].citations_value(),
                        tv[2 * row + 1].citations_value(),
                    )
                }
                EffectKind::TimeFromLastEvent => {
                    let tv = tv_results.as_ref().unwrap();
                    (tv[2 * row].gap_value(), tv[2 * row + 1].gap_value())
                }
            };
            case[k][row] = cs;
            control[k][row] = ct;
        }
    }

    Ok(CovariateStream {
        kinds: kinds.to_vec(),
        event_indices: pairs.iter().map(|p| p.0).collect(),
        case,
        control,
    })
}

/// Raw covariate values of the observed (sender, receiver, time) triples, in
/// event order; used for report grids and truth-curve tables.
pub fn case_values(log: &EventLog, kind: EffectKind) -> Result<Vec<f64>, CovariateError> {
    if kind.is_time_varying() {
        let queries: Vec<(NodeId, Timestamp)> =
            log.events().iter().map(|e| (e.receiver, e.time)).collect();
        let tv = stream_time_varying(log, &queries)?;
        Ok(match kind {
            EffectKind::CumulativeCitations => tv.iter().map(|t| t.citations_value()).collect(),
            _ => tv.iter().map(|t| t.gap_value()).collect(),
        })
    } else {
        log.events()
            .iter()
            .map(|e| match kind {
                EffectKind::ReceiverPubYear => receiver_pub_year(log, e.receiver),
                EffectKind::TimeLag => time_lag(log, e.sender, e.receiver),
                EffectKind::ReceiverOutdegree => {
                    receiver_outdegree(log, e.receiver).map(|v| v as f64)
                }
                EffectKind::TextualSimilarity => textual_similarity(log, e.sender, e.receiver),
                EffectKind::IpcJaccard => ipc_jaccard(log, e.sender, e.receiver),
                _ => unreachable!("time-varying kinds handled above"),
            })
            .collect()
    }
}

const COVARIATES_HEADER: &str = "event_index,role,effect,value";

/// Serializes a stream to the `covariates.csv` cache schema.
pub fn covariates_to_csv(stream: &CovariateStream) -> String {
    let mut s = String::from(COVARIATES_HEADER);
    s.push('\n');
    for (row, &ei) in stream.event_indices.iter().enumerate() {
        for (k, kind) in stream.kinds.iter().enumerate() {
            s.push_str(&format!("{ei},case,{kind},{}\n", stream.case[k][row]));
            s.push_str(&format!("{ei},control,{kind},{}\n", stream.control[k][row]));
        }
    }
    s
}

/// Parses the `covariates.csv` cache schema back into a stream.
pub fn covariates_from_csv(text: &str) -> Result<CovariateStream, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == COVARIATES_HEADER => {}
        other => return Err(format!("bad covariates header: {other:?}")),
    }
    let mut kinds: Vec<EffectKind> = Vec::new();
    let mut event_indices: Vec<usize> = Vec::new();
    let mut case: Vec<Vec<f64>> = Vec::new();
    let mut control: Vec<Vec<f64>> = Vec::new();
    for (idx, row) in lines.enumerate() {
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 {
            return Err(format!("line {}: expected 4 fields", idx + 2));
        }
        let ei: usize = fields[0]
            .parse()
            .map_err(|e| format!("line {}: {e}", idx + 2))?;
        let kind: EffectKind = fields[2]
            .parse()
            .map_err(|e| format!("line {}: {e}", idx + 2))?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|e| format!("line {}: {e}", idx + 2))?;
        if event_indices.last() != Some(&ei) {
            event_indices.push(ei);
        }
        let k = match kinds.iter().position(|k| *k == kind) {
            Some(k) => k,
            None => {
                kinds.push(kind);
                case.push(Vec::new());
                control.push(Vec::new());
                kinds.len() - 1
            }
        };
        match fields[1] {
            "case" => case[k].push(value),
            "control" => control[k].push(value),
            other => return Err(format!("line {}: bad role {other:?}", idx + 2)),
        }
    }
    let n = event_indices.len();
    if case.iter().chain(&control).any(|col| col.len() != n) {
        return Err("ragged covariate table".into());
    }
    Ok(CovariateStream {
        kinds,
        event_indices,
        case,
        control,
    })
}
