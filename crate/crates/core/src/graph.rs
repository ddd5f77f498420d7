//! Temporal adjacency over the unified node space.
//!
//! Users occupy node indices `[0, num_users)`; items follow at
//! `num_users + item`. Every interaction is mirrored onto both endpoints.

use rand::Rng;

use crate::dataset::{EventLog, InteractionEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct NeighborEntry {
    neighbor: usize,
    timestamp: f64,
    event_ref: usize,
    edge_features: Vec<f64>,
}

/// Fixed-width neighbor sample. Entries are in ascending-time order
/// (most recent last) followed by padding; `mask[k]` is true for real entries.
/// Padding carries neighbor 0, timestamp 0, and zero features.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSample {
    pub neighbors: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub edge_features: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl NeighborSample {
    fn padded(mut self, width: usize, d_e: usize) -> Self {
        while self.neighbors.len() < width {
            self.neighbors.push(0);
            self.timestamps.push(0.0);
            self.edge_features.push(vec![0.0; d_e]);
            self.mask.push(false);
        }
        self
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// How neighbors are drawn when more than `n_nbr` precede the query time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingPolicy {
    /// The `n_nbr` most recent, deterministically.
    #[default]
    Recent,
    /// Uniform without replacement among all prior neighbors.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct TemporalAdjacency {
    num_users: usize,
    d_e: usize,
    lists: Vec<Vec<NeighborEntry>>,
}

impl TemporalAdjacency {
    pub fn new(num_users: usize, num_items: usize, d_e: usize) -> Self {
        TemporalAdjacency { num_users, d_e, lists: vec![Vec::new(); num_users + num_items] }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// Total mirrored entries (twice the number of inserted events).
    pub fn num_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Append one event to both endpoints. Stream inserts must be
    /// nondecreasing in time per node; this keeps the lists sorted without a
    /// sort pass.
    pub fn insert_event(&mut self, event: &InteractionEvent, event_ref: usize) -> Result<()> {
        let user = event.user;
        let item_node = self.item_node(event.item);
        if user >= self.num_users || item_node >= self.lists.len() {
            return Err(Error::data(format!(
                "event {event_ref} references node out of range (user {user}, item {})",
                event.item
            )));
        }
        for (node, counterpart) in [(user, item_node), (item_node, user)] {
            if let Some(last) = self.lists[node].last() {
                if event.timestamp < last.timestamp {
                    return Err(Error::data(format!(
                        "event {event_ref} at t={} precedes node {node}'s latest edge at t={}",
                        event.timestamp, last.timestamp
                    )));
                }
            }
            self.lists[node].push(NeighborEntry {
                neighbor: counterpart,
                timestamp: event.timestamp,
                event_ref,
                edge_features: event.edge_features.clone(),
            });
        }
        Ok(())
    }

    /// Build from a whole log (already time-sorted) in one pass.
    pub fn from_log(log: &EventLog) -> Result<Self> {
        let mut adj = TemporalAdjacency::new(log.num_users, log.num_items, log.d_e);
        for (event_ref, event) in log.events.iter().enumerate() {
            adj.insert_event(event, event_ref)?;
        }
        Ok(adj)
    }

    /// Up to `n_nbr` neighbors of `node` strictly before `t`, padded to
    /// exactly `n_nbr` entries. `Recent` policy takes the latest ones;
    /// `Uniform` draws without replacement, then restores time order.
    pub fn recent_neighbors<R: Rng + ?Sized>(
        &self,
        node: usize,
        t: f64,
        n_nbr: usize,
        policy: SamplingPolicy,
        rng: &mut R,
    ) -> NeighborSample {
        let list = &self.lists[node];
        let end = list.partition_point(|e| e.timestamp < t);
        let chosen: Vec<usize> = match policy {
            SamplingPolicy::Recent => (end.saturating_sub(n_nbr)..end).collect(),
            SamplingPolicy::Uniform => {
                if end <= n_nbr {
                    (0..end).collect()
                } else {
                    let mut picks = rand::seq::index::sample(rng, end, n_nbr).into_vec();
                    picks.sort_unstable();
                    picks
                }
            }
        };
        let mut sample = NeighborSample {
            neighbors: Vec::with_capacity(n_nbr),
            timestamps: Vec::with_capacity(n_nbr),
            edge_features: Vec::with_capacity(n_nbr),
            mask: Vec::with_capacity(n_nbr),
        };
        for idx in chosen {
            let entry = &list[idx];
            sample.neighbors.push(entry.neighbor);
            sample.timestamps.push(entry.timestamp);
            sample.edge_features.push(entry.edge_features.clone());
            sample.mask.push(true);
        }
        sample.padded(n_nbr, self.d_e)
    }

    /// Layered neighborhood rooted at `node`. Layer 0 holds the root's
    /// sample; layer l+1 holds one sample per real entry of layer l, in
    /// order, all queried at the same time `t`.
    pub fn k_hop_neighborhood<R: Rng + ?Sized>(
        &self,
        node: usize,
        t: f64,
        n_nbr: usize,
        layers: usize,
        policy: SamplingPolicy,
        rng: &mut R,
    ) -> Vec<Vec<NeighborSample>> {
        let mut result: Vec<Vec<NeighborSample>> = Vec::with_capacity(layers);
        let mut frontier = vec![node];
        for _ in 0..layers {
            let samples: Vec<NeighborSample> = frontier
                .iter()
                .map(|&n| self.recent_neighbors(n, t, n_nbr, policy, rng))
                .collect();
            frontier = samples
                .iter()
                .flat_map(|s| {
                    s.neighbors
                        .iter()
                        .zip(&s.mask)
                        .filter(|(_, &m)| m)
                        .map(|(&n, _)| n)
                        .collect::<Vec<_>>()
                })
                .collect();
            result.push(samples);
        }
        result
    }
}
