//! Small shared helpers: stable content hashing for artifact provenance and
//! seeded permutations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_model::EventLog;

/// Fisher-Yates permutation of 0..n driven by a dedicated ChaCha stream, so
/// different consumers (epoch shuffles, splits, folds) never share draws.
pub fn seeded_permutation(seed: u64, stream_id: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over the concatenation of the given byte slices.
pub fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub fn fnv1a_hex(parts: &[&[u8]]) -> String {
    format!("{:016x}", fnv1a64(parts))
}

/// Content hash of a log: nodes (name, publication day, outdegree) and
/// events (sender, receiver, day). Two logs with equal fingerprints are the
/// same data for provenance purposes.
pub fn log_fingerprint(log: &EventLog) -> String {
    let mut h = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    eat(&(log.n_nodes() as u64).to_le_bytes());
    eat(&(log.n_events() as u64).to_le_bytes());
    for n in log.nodes() {
        eat(n.name.as_bytes());
        eat(&n.pub_date.days().to_le_bytes());
        eat(&n.outdegree_at_pub.to_le_bytes());
    }
    for e in log.events() {
        eat(&e.sender.0.to_le_bytes());
        eat(&e.receiver.0.to_le_bytes());
        eat(&e.time.days().to_le_bytes());
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_input_sensitive() {
        let a = fnv1a_hex(&[b"abc"]);
        assert_eq!(a, fnv1a_hex(&[b"a", b"bc"]));
        assert_ne!(a, fnv1a_hex(&[b"abd"]));
        assert_eq!(a.len(), 16);
    }
}
