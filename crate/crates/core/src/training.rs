//! Training loop: ranking loss over chronological batches with a
//! one-batch gradient window through the memory updates.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{make_batches, Batch, EventLog};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalOptions, TgnScorer};
use crate::graph::TemporalAdjacency;
use crate::memory::{apply_all_pending, queue_batch_messages, MemoryOverlay, MemoryStore};
use crate::model::TgnModel;
use crate::optim::{Adam, AdamConfig};
use crate::params::{grad_norm, ModelParams};
use crate::tape::{Tape, Var};

/// Stream tags for deriving independent RNG seeds from the run seed.
pub const NEG_STREAM: u64 = 1;
pub const NBR_STREAM: u64 = 2;
pub const VAL_EVAL_STREAM: u64 = 3;
pub const TEST_EVAL_STREAM: u64 = 4;
pub const EVAL_NBR_STREAM: u64 = 5;

/// Independent child seed for a named stream.
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Items each user has interacted with so far. Query-only: iteration order
/// of the underlying sets is unspecified, so callers filter ordered
/// candidate lists instead of iterating the sets.
#[derive(Debug, Clone, Default)]
pub struct PositiveSetIndex {
    seen: Vec<HashSet<usize>>,
}

impl PositiveSetIndex {
    pub fn new(num_users: usize) -> Self {
        PositiveSetIndex { seen: vec![HashSet::new(); num_users] }
    }

    pub fn add(&mut self, user: usize, item: usize) {
        self.seen[user].insert(item);
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.seen[user].contains(&item)
    }

    pub fn count_for(&self, user: usize) -> usize {
        self.seen[user].len()
    }
}

/// Mutable per-run state: node memories, the temporal graph built so far,
/// and the positive-interaction index. Reset at the start of every epoch;
/// rebuilt by replay before evaluation.
#[derive(Debug, Clone)]
pub struct RunState {
    pub store: MemoryStore,
    pub adj: TemporalAdjacency,
    pub index: PositiveSetIndex,
    pub next_event_ref: usize,
}

impl RunState {
    pub fn fresh(num_users: usize, num_items: usize, d_e: usize, d_mem: usize) -> Self {
        RunState {
            store: MemoryStore::new(num_users + num_items, d_mem),
            adj: TemporalAdjacency::new(num_users, num_items, d_e),
            index: PositiveSetIndex::new(num_users),
            next_event_ref: 0,
        }
    }
}

/// Draw `n_neg` negatives for `user` from `pool` (sorted distinct batch or
/// candidate items), excluding the user's known positives and anything in
/// `batch_seen` (their positives already encountered in the current batch).
/// Returns `None` when nothing is eligible; the flag is true when the pool
/// was short and sampling fell back to replacement.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    pool: &[usize],
    index: &PositiveSetIndex,
    batch_seen: &HashSet<usize>,
    n_neg: usize,
    rng: &mut R,
) -> Option<(Vec<usize>, bool)> {
    assert!(n_neg > 0, "n_neg validated by config");
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&item| !index.contains(user, item) && !batch_seen.contains(&item))
        .collect();
    if eligible.is_empty() {
        return None;
    }
    if eligible.len() >= n_neg {
        let picks = rand::seq::index::sample(rng, eligible.len(), n_neg);
        Some((picks.iter().map(|i| eligible[i]).collect(), false))
    } else {
        let draws = (0..n_neg).map(|_| eligible[rng.random_range(0..eligible.len())]).collect();
        Some((draws, true))
    }
}

/// Pairwise ranking loss for one positive against its negatives:
/// `sum_n -log sigmoid(score(u,p) - score(u,n))` with dot-product scores.
pub fn bpr_loss(tape: &mut Tape, z_u: Var, z_p: Var, z_negs: &[Var]) -> Result<Var> {
    if z_negs.is_empty() {
        return Err(Error::config("ranking loss needs at least one negative"));
    }
    let s_p = tape.dot(z_u, z_p)?;
    let mut diffs = Vec::with_capacity(z_negs.len());
    for &z_n in z_negs {
        let s_n = tape.dot(z_u, z_n)?;
        diffs.push(tape.sub(s_p, s_n)?);
    }
    let cat = tape.concat(&diffs)?;
    let per_neg = tape.neg_log_sigmoid(cat)?;
    Ok(tape.sum(per_neg)?)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOutcome {
    pub loss_sum: f64,
    /// Positives that contributed to the loss.
    pub pairs: usize,
    /// Positives skipped because no negative was eligible.
    pub skipped: usize,
    /// Positives whose negative pool was short (sampled with replacement).
    pub short_pool: usize,
    pub grad_norm: f64,
}

/// One training step over a batch:
/// apply pending memory updates, embed and score each positive against
/// sampled negatives, take an optimizer step, then queue this batch's
/// messages and add its edges to the graph and index. Embeddings see only
/// state from before the batch, so events in one batch are peers.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &mut TgnModel,
    state: &mut RunState,
    optimizer: &mut Adam,
    batch: &Batch,
    num_users: usize,
    n_neg: usize,
    neg_rng: &mut ChaCha8Rng,
    nbr_rng: &mut ChaCha8Rng,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut overlay = MemoryOverlay::new();
    apply_all_pending(
        &mut tape,
        &mut state.store,
        &mut overlay,
        &bound,
        model.spec.updater,
        model.spec.time_mode,
    )?;

    let mut pool: Vec<usize> = batch.events.iter().map(|e| e.item).collect();
    pool.sort_unstable();
    pool.dedup();

    let mut out = BatchOutcome::default();
    let mut batch_seen: HashMap<usize, HashSet<usize>> = HashMap::new();
    let mut pair_losses: Vec<Var> = Vec::new();
    {
        let mut ctx = crate::embedding::EmbedCtx {
            tape: &mut tape,
            store: &state.store,
            overlay: &mut overlay,
            adj: &state.adj,
            bound: &bound,
            settings: model.spec.embed_settings(),
            rng: nbr_rng,
        };
        for event in batch.events {
            batch_seen.entry(event.user).or_default().insert(event.item);
            let seen = &batch_seen[&event.user];
            let Some((negs, short)) =
                sample_negatives(event.user, &pool, &state.index, seen, n_neg, neg_rng)
            else {
                out.skipped += 1;
                continue;
            };
            if short {
                out.short_pool += 1;
            }
            let t = event.timestamp;
            let z_u = crate::embedding::embed_node(&mut ctx, event.user, t)?;
            let z_p = crate::embedding::embed_node(&mut ctx, num_users + event.item, t)?;
            let mut z_ns = Vec::with_capacity(negs.len());
            for &item in &negs {
                z_ns.push(crate::embedding::embed_node(&mut ctx, num_users + item, t)?);
            }
            pair_losses.push(bpr_loss(ctx.tape, z_u, z_p, &z_ns)?);
        }
    }

    out.pairs = pair_losses.len();
    if !pair_losses.is_empty() {
        let stacked = tape.concat(&pair_losses)?;
        let total = tape.sum(stacked)?;
        out.loss_sum = tape.value(total).item();
        tape.backward(total)?;
        let grads = model.params.collect_grads(&tape, &bound);
        out.grad_norm = grad_norm(&grads);
        optimizer.step(&mut model.params, &grads)?;
    }

    queue_batch_messages(batch.events, &mut state.store, num_users)?;
    for event in batch.events {
        state.adj.insert_event(event, state.next_event_ref)?;
        state.next_event_ref += 1;
        state.index.add(event.user, event.item);
    }
    Ok(out)
}

fn replay_batch(
    model: &TgnModel,
    state: &mut RunState,
    events: &[crate::dataset::InteractionEvent],
    num_users: usize,
) -> Result<()> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let mut overlay = MemoryOverlay::new();
    apply_all_pending(
        &mut tape,
        &mut state.store,
        &mut overlay,
        &bound,
        model.spec.updater,
        model.spec.time_mode,
    )?;
    queue_batch_messages(events, &mut state.store, num_users)?;
    for event in events {
        state.adj.insert_event(event, state.next_event_ref)?;
        state.next_event_ref += 1;
        state.index.add(event.user, event.item);
    }
    Ok(())
}

/// Apply whatever is still queued so the store reflects every event seen.
pub fn flush_pending(model: &TgnModel, state: &mut RunState) -> Result<()> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let mut overlay = MemoryOverlay::new();
    apply_all_pending(
        &mut tape,
        &mut state.store,
        &mut overlay,
        &bound,
        model.spec.updater,
        model.spec.time_mode,
    )?;
    Ok(())
}

/// Rebuild memory, graph, and index by streaming `log` batch by batch with
/// frozen parameters (no scoring, no gradients), then flush so the result
/// reflects every event. Evaluation starts from this warm state.
pub fn replay_log(model: &TgnModel, log: &EventLog, batch_size: usize) -> Result<RunState> {
    let mut state = RunState::fresh(log.num_users, log.num_items, log.d_e, model.spec.d_mem);
    for batch in make_batches(&log.events, batch_size) {
        replay_batch(model, &mut state, batch.events, log.num_users)?;
    }
    flush_pending(model, &mut state)?;
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_neg: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub early_stop: bool,
    pub patience: usize,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss per scored positive.
    pub train_loss: f64,
    /// Validation recall keyed by cutoff.
    pub recalls: BTreeMap<usize, f64>,
    pub skipped: usize,
    pub short_pool: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_params: ModelParams,
    /// 0 means the initial parameters were never beaten (or epochs == 0).
    pub best_epoch: usize,
    pub best_recall: f64,
}

/// Selection metric cutoff for checkpointing and early stopping.
const SELECT_K: usize = 10;

/// Full training run. Each epoch streams the train split chronologically
/// from fresh state (parameters and optimizer moments persist), then
/// replays the train split without gradients and scores the validation
/// split from that warm state. Negative and neighbor sampling each consume
/// one continuous stream across epochs; validation draws are reseeded per
/// epoch so metric movement reflects the model, not sampling drift.
pub fn train(
    model: &mut TgnModel,
    train_log: &EventLog,
    val_log: &EventLog,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if model.spec.d_e != train_log.d_e {
        return Err(Error::config(format!(
            "model expects {} edge-feature columns but the data has {}",
            model.spec.d_e, train_log.d_e
        )));
    }
    let select_k = if opts.eval.k_list.contains(&SELECT_K) {
        SELECT_K
    } else {
        *opts.eval.k_list.first().unwrap_or(&SELECT_K)
    };
    let mut optimizer = Adam::new(opts.adam);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, NEG_STREAM));
    let mut nbr_rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, NBR_STREAM));

    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_params: model.params.clone(),
        best_epoch: 0,
        best_recall: f64::NEG_INFINITY,
    };
    let mut stale_epochs = 0usize;
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        let mut state =
            RunState::fresh(train_log.num_users, train_log.num_items, train_log.d_e, model.spec.d_mem);
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        let mut skipped = 0usize;
        let mut short_pool = 0usize;
        for batch in make_batches(&train_log.events, opts.batch_size) {
            let out = train_batch(
                model,
                &mut state,
                &mut optimizer,
                &batch,
                train_log.num_users,
                opts.n_neg,
                &mut neg_rng,
                &mut nbr_rng,
            )?;
            loss_sum += out.loss_sum;
            pairs += out.pairs;
            skipped += out.skipped;
            short_pool += out.short_pool;
        }
        if short_pool > 0 {
            eprintln!(
                "warning: epoch {epoch}: negative pool was short for {short_pool} positives; \
                 sampled with replacement"
            );
        }

        let mut warm = replay_log(model, train_log, opts.batch_size)?;
        let mut scorer = TgnScorer::new(model, child_seed(opts.seed, EVAL_NBR_STREAM));
        let mut eval_rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, VAL_EVAL_STREAM));
        let (report, _) = evaluate_split(
            &mut scorer,
            &mut warm,
            &val_log.events,
            val_log.num_items,
            &opts.eval,
            &mut eval_rng,
        )?;

        let record = EpochRecord {
            epoch,
            train_loss: if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 },
            recalls: report.recalls.clone(),
            skipped,
            short_pool,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        eprintln!(
            "epoch {epoch}: train_loss {:.4}, val recall@{select_k} {:.4}, {} ms",
            record.train_loss,
            report.recall(select_k),
            record.wall_ms
        );
        let score = report.recall(select_k);
        if score > outcome.best_recall {
            outcome.best_recall = score;
            outcome.best_epoch = epoch;
            outcome.best_params = model.params.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        outcome.history.push(record);
        if opts.early_stop && stale_epochs >= opts.patience {
            break;
        }
    }
    Ok(outcome)
}
