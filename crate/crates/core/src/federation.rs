//! Client shards, round-robin local client selection and communication counting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;
use crate::numerics::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum FederationError {
    #[error("cannot split {samples} samples across {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("a federation needs at least one client")]
    NoClients,
    #[error("client {0} has an empty shard")]
    EmptyShard(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    /// 1-based client id.
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    shards: Vec<ClientShard>,
}

impl Federation {
    /// Build from shards in client order; ids are reassigned to `1..=P`.
    pub fn from_shards(shards: Vec<Vec<Sample>>) -> Result<Self, FederationError> {
        if shards.is_empty() {
            return Err(FederationError::NoClients);
        }
        let shards = shards
            .into_iter()
            .enumerate()
            .map(|(i, samples)| {
                if samples.is_empty() {
                    Err(FederationError::EmptyShard(i + 1))
                } else {
                    Ok(ClientShard {
                        client_id: i + 1,
                        samples,
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { shards })
    }

    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    /// Shard of 1-based client `p`.
    pub fn shard(&self, p: usize) -> &ClientShard {
        &self.shards[p - 1]
    }

    pub fn n_min(&self) -> usize {
        self.shards.iter().map(ClientShard::len).min().unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(ClientShard::len).sum()
    }
}

/// Shuffle `dataset` and cut it into `clients` shards whose sizes differ by at
/// most one; the first `n mod P` shards get the extra sample.
pub fn partition_iid(dataset: &[Sample], clients: usize, stream: &RngStream) -> Result<Federation, FederationError> {
    if clients == 0 {
        return Err(FederationError::NoClients);
    }
    if dataset.len() < clients {
        return Err(FederationError::TooFewSamples {
            samples: dataset.len(),
            clients,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    stream.rng().shuffle(&mut order);
    let base = dataset.len() / clients;
    let extra = dataset.len() % clients;
    let mut cursor = 0;
    let mut shards = Vec::with_capacity(clients);
    for p in 0..clients {
        let size = base + usize::from(p < extra);
        shards.push(order[cursor..cursor + size].iter().map(|&i| dataset[i].clone()).collect());
        cursor += size;
    }
    Federation::from_shards(shards)
}

/// `1 + (r mod P)`: the client that runs local steps in round `r`.
pub fn select_local_client(round: u64, clients: usize) -> usize {
    assert!(round >= 1, "rounds are 1-based");
    1 + (round % clients as u64) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    Gd,
    BvrLsgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub round: u64,
    pub vectors_up: u64,
    pub vectors_down: u64,
}

/// Per-round message counts in units of `d`-dimensional vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLog {
    pub entries: Vec<CommEntry>,
}

impl CommLog {
    /// GD rounds: one vector each way per client. BVR rounds add `x_K` and the
    /// sampled local iterate going up and `x₁` coming down for the local client.
    pub fn log_round(&mut self, round: u64, kind: CommKind, clients: usize) {
        if let Some(last) = self.entries.last() {
            assert!(round > last.round, "comm log rounds must increase");
        }
        let p = clients as u64;
        let (up, down) = match kind {
            CommKind::Gd => (p, p),
            CommKind::BvrLsgd => (p + 2, p + 1),
        };
        self.entries.push(CommEntry {
            round,
            vectors_up: up,
            vectors_down: down,
        });
    }

    pub fn totals(&self) -> (u64, u64) {
        self.entries
            .iter()
            .fold((0, 0), |(u, d), e| (u + e.vectors_up, d + e.vectors_down))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(n: usize) -> Vec<Sample> {
        (0..n).map(|i| Sample::regression(vec![i as f64], i as f64)).collect()
    }

    fn ids(f: &Federation) -> Vec<usize> {
        let mut v: Vec<usize> = f
            .shards()
            .iter()
            .flat_map(|s| s.samples.iter().map(|z| z.features[0] as usize))
            .collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn even_and_remainder_splits() {
        let s = RngStream::new(1);
        let f = partition_iid(&dataset(100), 10, &s).unwrap();
        assert!(f.shards().iter().all(|c| c.len() == 10));
        let f = partition_iid(&dataset(101), 10, &s).unwrap();
        let sizes: Vec<usize> = f.shards().iter().map(ClientShard::len).collect();
        assert_eq!(sizes[0], 11);
        assert!(sizes[1..].iter().all(|&n| n == 10));
        assert_eq!(f.n_min(), 10);
        let client_ids: Vec<usize> = f.shards().iter().map(|c| c.client_id).collect();
        assert_eq!(client_ids, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_errors_and_determinism() {
        let s = RngStream::new(5);
        assert_eq!(
            partition_iid(&dataset(3), 4, &s),
            Err(FederationError::TooFewSamples { samples: 3, clients: 4 })
        );
        assert_eq!(partition_iid(&dataset(3), 0, &s), Err(FederationError::NoClients));
        assert_eq!(partition_iid(&dataset(50), 3, &s), partition_iid(&dataset(50), 3, &s));
        assert_ne!(partition_iid(&dataset(50), 3, &s), partition_iid(&dataset(50), 3, &RngStream::new(6)));
    }

    #[test]
    fn local_client_schedule() {
        assert_eq!(select_local_client(10, 10), 1);
        assert_eq!(select_local_client(1, 10), 2);
        let mut counts = [0usize; 7];
        for r in 1..=14 {
            counts[select_local_client(r, 7) - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn comm_counts() {
        let mut log = CommLog::default();
        log.log_round(1, CommKind::Gd, 10);
        assert_eq!(log.entries[0], CommEntry { round: 1, vectors_up: 10, vectors_down: 10 });
        log.log_round(2, CommKind::BvrLsgd, 10);
        assert_eq!((log.entries[1].vectors_up, log.entries[1].vectors_down), (12, 11));

        let mut log = CommLog::default();
        for r in 1..=37 {
            log.log_round(r, CommKind::BvrLsgd, 4);
        }
        assert_eq!(log.totals(), (37 * 6, 37 * 5));
    }

    proptest! {
        #[test]
        fn shards_preserve_multiset(n in 1usize..300, p in 1usize..20, seed in 0u64..1000) {
            prop_assume!(n >= p);
            let f = partition_iid(&dataset(n), p, &RngStream::new(seed)).unwrap();
            prop_assert_eq!(ids(&f), (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = f.shards().iter().map(ClientShard::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn selection_periodic(r in 1u64..100_000, p in 1usize..50) {
            let c = select_local_client(r, p);
            prop_assert!((1..=p).contains(&c));
            prop_assert_eq!(c, select_local_client(r + p as u64, p));
        }
    }
}
