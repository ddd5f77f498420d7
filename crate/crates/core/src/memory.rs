//! Per-node memory updated by a recurrent cell over interaction messages.
//!
//! Each event (u, v, t) produces a raw message for both endpoints. Messages
//! are not applied immediately: they are queued as pending state and
//! materialized at the start of the *next* batch, so an event can never leak
//! into the embeddings that score it. Application is parallel within a batch:
//! every message vector reads pre-update memories.

use std::collections::BTreeMap;

use crate::dataset::InteractionEvent;
use crate::embedding::encode_time;
use crate::error::{Error, Result};
use crate::params::BoundVars;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Recurrent cell used for memory updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdaterKind {
    #[default]
    Gru,
    Rnn,
}

/// How the time delta enters a message vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeMode {
    /// Cosine time encoding of the delta (trainable).
    #[default]
    Encode,
    /// The raw delta as a single scalar block.
    Raw,
}

/// Undecoded message: stores the counterpart reference rather than its memory
/// so the read happens at application time, after intervening updates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMessage {
    /// Node index of the other endpoint (already in unified node space).
    pub counterpart: usize,
    pub event_time: f64,
    /// Time since this node's previous interaction, frozen at build time.
    pub delta_t: f64,
    pub edge_features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MemoryStore {
    d_mem: usize,
    rows: Vec<f64>,
    last_update: Vec<f64>,
    pending: Vec<Option<RawMessage>>,
}

impl MemoryStore {
    /// All memories zero, all last-update times zero, nothing pending.
    pub fn new(num_nodes: usize, d_mem: usize) -> Self {
        MemoryStore {
            d_mem,
            rows: vec![0.0; num_nodes * d_mem],
            last_update: vec![0.0; num_nodes],
            pending: vec![None; num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.last_update.len()
    }

    pub fn d_mem(&self) -> usize {
        self.d_mem
    }

    /// Back to the initial state (zeros, nothing pending).
    pub fn reset(&mut self) {
        self.rows.fill(0.0);
        self.last_update.fill(0.0);
        self.pending.iter_mut().for_each(|p| *p = None);
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.rows[node * self.d_mem..(node + 1) * self.d_mem]
    }

    pub fn set_row(&mut self, node: usize, values: &[f64]) {
        self.rows[node * self.d_mem..(node + 1) * self.d_mem].copy_from_slice(values);
    }

    pub fn last_update(&self, node: usize) -> f64 {
        self.last_update[node]
    }

    pub fn set_last_update(&mut self, node: usize, t: f64) {
        self.last_update[node] = t;
    }

    /// Queue (or replace) the pending message for a node.
    pub fn set_pending(&mut self, node: usize, msg: RawMessage) {
        self.pending[node] = Some(msg);
    }

    pub fn pending(&self, node: usize) -> Option<&RawMessage> {
        self.pending[node].as_ref()
    }

    pub fn take_pending(&mut self, node: usize) -> Option<RawMessage> {
        self.pending[node].take()
    }

    /// Nodes with queued messages, ascending.
    pub fn pending_nodes(&self) -> Vec<usize> {
        self.pending
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|_| i))
            .collect()
    }

    pub fn memory_tensor(&self) -> Tensor {
        Tensor::matrix(self.num_nodes(), self.d_mem, self.rows.clone())
    }

    pub fn last_update_tensor(&self) -> Tensor {
        Tensor::vector(self.last_update.clone())
    }

    /// Rebuild from checkpointed tensors. Pending state never survives a
    /// checkpoint: it is flushed before saving.
    pub fn from_tensors(memory: &Tensor, last_update: &Tensor) -> Result<Self> {
        if memory.ndim() != 2 || last_update.ndim() != 1 || memory.shape()[0] != last_update.len() {
            return Err(Error::data(format!(
                "inconsistent memory tensors: memory {:?}, last_update {:?}",
                memory.shape(),
                last_update.shape()
            )));
        }
        let num_nodes = memory.shape()[0];
        Ok(MemoryStore {
            d_mem: memory.shape()[1],
            rows: memory.data().to_vec(),
            last_update: last_update.data().to_vec(),
            pending: vec![None; num_nodes],
        })
    }
}

/// Tape handles for memory rows touched during one batch. Reads are cached so
/// a node's memory appears on the tape once; updates shadow earlier reads.
#[derive(Debug, Default)]
pub struct MemoryOverlay {
    vars: BTreeMap<usize, Var>,
}

impl MemoryOverlay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current memory of `node` as a tape value: the updated variable if this
    /// batch already rewrote it, otherwise a cached constant from the store.
    pub fn read(&mut self, tape: &mut Tape, store: &MemoryStore, node: usize) -> Var {
        *self
            .vars
            .entry(node)
            .or_insert_with(|| tape.constant(Tensor::vector(store.row(node).to_vec())))
    }

    pub fn set(&mut self, node: usize, var: Var) {
        self.vars.insert(node, var);
    }
}

/// Raw messages for every event in a batch, mirrored to both endpoints, in
/// per-node event order. Delta times are measured against each node's current
/// last-update time; a negative delta means events are being processed out of
/// order and aborts.
pub fn build_messages(
    events: &[InteractionEvent],
    store: &MemoryStore,
    num_users: usize,
) -> Result<BTreeMap<usize, Vec<RawMessage>>> {
    let mut messages: BTreeMap<usize, Vec<RawMessage>> = BTreeMap::new();
    for event in events {
        let item_node = num_users + event.item;
        for (node, counterpart) in [(event.user, item_node), (item_node, event.user)] {
            let delta_t = event.timestamp - store.last_update(node);
            if delta_t < 0.0 {
                return Err(Error::data(format!(
                    "node {node}: event at t={} precedes its last update at t={} \
                     (out-of-order processing)",
                    event.timestamp,
                    store.last_update(node)
                )));
            }
            messages.entry(node).or_default().push(RawMessage {
                counterpart,
                event_time: event.timestamp,
                delta_t,
                edge_features: event.edge_features.clone(),
            });
        }
    }
    Ok(messages)
}

/// Keep only the most recent message per node; on equal timestamps the one
/// latest in batch order wins.
pub fn aggregate_last(
    messages: BTreeMap<usize, Vec<RawMessage>>,
) -> Vec<(usize, RawMessage)> {
    messages
        .into_iter()
        .map(|(node, list)| {
            let mut best = 0;
            for (i, msg) in list.iter().enumerate() {
                if msg.event_time >= list[best].event_time {
                    best = i;
                }
            }
            let msg = list.into_iter().nth(best).expect("non-empty list");
            (node, msg)
        })
        .collect()
}

/// Build, aggregate, and queue one batch's messages as pending state.
pub fn queue_batch_messages(
    events: &[InteractionEvent],
    store: &mut MemoryStore,
    num_users: usize,
) -> Result<()> {
    let aggregated = aggregate_last(build_messages(events, store, num_users)?);
    for (node, msg) in aggregated {
        store.set_pending(node, msg);
    }
    Ok(())
}

/// Message vector `s_i || s_j || time block || edge features` for `node`.
fn message_vector(
    tape: &mut Tape,
    store: &MemoryStore,
    overlay: &mut MemoryOverlay,
    bound: &BoundVars,
    time_mode: TimeMode,
    node: usize,
    msg: &RawMessage,
) -> Result<Var> {
    let s_i = overlay.read(tape, store, node);
    let s_j = overlay.read(tape, store, msg.counterpart);
    let time_block = match time_mode {
        TimeMode::Encode => {
            encode_time(tape, bound.get("time.omega"), bound.get("time.phase"), msg.delta_t)?
        }
        TimeMode::Raw => tape.constant(Tensor::scalar(msg.delta_t)),
    };
    let mut parts = vec![s_i, s_j, time_block];
    if !msg.edge_features.is_empty() {
        parts.push(tape.constant(Tensor::vector(msg.edge_features.clone())));
    }
    Ok(tape.concat(&parts)?)
}

/// One recurrent-cell step: new memory from message `m` and state `s`.
pub fn cell_update(
    tape: &mut Tape,
    bound: &BoundVars,
    kind: UpdaterKind,
    m: Var,
    s: Var,
) -> Result<Var> {
    let gate = |tape: &mut Tape, w: &str, u: &str, b: &str, s_in: Var| -> Result<Var> {
        let mw = tape.matmul(m, bound.get(w))?;
        let su = tape.matmul(s_in, bound.get(u))?;
        let lin = tape.add(mw, su)?;
        Ok(tape.add(lin, bound.get(b))?)
    };
    match kind {
        UpdaterKind::Gru => {
            let z_lin = gate(tape, "mem.gru.wz", "mem.gru.uz", "mem.gru.bz", s)?;
            let z = tape.sigmoid(z_lin)?;
            let r_lin = gate(tape, "mem.gru.wr", "mem.gru.ur", "mem.gru.br", s)?;
            let r = tape.sigmoid(r_lin)?;
            let rs = tape.mul(r, s)?;
            let h_lin = gate(tape, "mem.gru.wh", "mem.gru.uh", "mem.gru.bh", rs)?;
            let h = tape.tanh(h_lin)?;
            // (1 - z) * s + z * h, written as s + z * (h - s).
            let h_minus_s = tape.sub(h, s)?;
            let delta = tape.mul(z, h_minus_s)?;
            Ok(tape.add(s, delta)?)
        }
        UpdaterKind::Rnn => {
            let lin = gate(tape, "mem.rnn.w", "mem.rnn.u", "mem.rnn.b", s)?;
            Ok(tape.tanh(lin)?)
        }
    }
}

/// Apply every pending message: materialize all message vectors against
/// pre-update memories, run the cell, then commit new rows, last-update
/// times, and overlay variables. Nodes without pending state are untouched.
/// Returns the applied nodes in ascending order.
pub fn apply_all_pending(
    tape: &mut Tape,
    store: &mut MemoryStore,
    overlay: &mut MemoryOverlay,
    bound: &BoundVars,
    kind: UpdaterKind,
    time_mode: TimeMode,
) -> Result<Vec<usize>> {
    let nodes = store.pending_nodes();
    let msgs: Vec<(usize, RawMessage)> = nodes
        .iter()
        .map(|&node| (node, store.take_pending(node).expect("listed as pending")))
        .collect();
    apply_messages(tape, store, overlay, bound, kind, time_mode, &msgs)?;
    Ok(nodes)
}

/// Step the memory cell for each `(node, message)` pair and commit the
/// results. All reads happen before any write, so updates within one call
/// see pre-update memories regardless of order.
pub fn apply_messages(
    tape: &mut Tape,
    store: &mut MemoryStore,
    overlay: &mut MemoryOverlay,
    bound: &BoundVars,
    kind: UpdaterKind,
    time_mode: TimeMode,
    msgs: &[(usize, RawMessage)],
) -> Result<()> {
    let mut staged = Vec::with_capacity(msgs.len());
    for (node, msg) in msgs {
        let m = message_vector(tape, store, overlay, bound, time_mode, *node, msg)?;
        let s = overlay.read(tape, store, *node);
        staged.push((*node, msg.event_time, m, s));
    }
    for (node, event_time, m, s) in staged {
        let updated = cell_update(tape, bound, kind, m, s)?;
        store.set_row(node, tape.value(updated).data());
        store.set_last_update(node, event_time);
        overlay.set(node, updated);
    }
    Ok(())
}
