//! Chronological ranked evaluation: each held-out event is scored against
//! sampled negatives with the state available just before it, then folded
//! into the state before the next event is scored.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{EventLog, InteractionEvent};
use crate::error::{Error, NumericsError, Result};
use crate::memory::{aggregate_last, apply_messages, build_messages, MemoryOverlay};
use crate::model::TgnModel;
use crate::tape::Tape;
use crate::training::RunState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Negatives come from the full item vocabulary.
    Global,
    /// Negatives come from the items of the surrounding event batch.
    Batch,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Negatives sampled per case; short pools use all eligible items and
    /// flag the case.
    pub n_neg: usize,
    /// Recall cutoffs to report.
    pub k_list: Vec<usize>,
    pub pool: PoolMode,
    /// Chunk width for `PoolMode::Batch`.
    pub batch_size: usize,
    /// Retain per-case candidates and scores (memory-heavy; tests only).
    pub keep_cases: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: usize,
    /// Cases whose eligible pool was smaller than `n_neg`.
    pub flagged: usize,
    /// Recall keyed by cutoff.
    pub recalls: BTreeMap<usize, f64>,
}

impl MetricsReport {
    /// Recall at `k`, or negative infinity when `k` was not evaluated.
    pub fn recall(&self, k: usize) -> f64 {
        self.recalls.get(&k).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct RankedCase {
    pub user: usize,
    pub item: usize,
    pub timestamp: f64,
    /// Positive first, then the sampled negatives.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub rank: usize,
    pub flagged: bool,
}

/// Scores candidate items for a user at a moment in time, and folds each
/// revealed event into its state afterwards.
pub trait CandidateScorer {
    fn score_candidates(
        &mut self,
        state: &RunState,
        user: usize,
        t: f64,
        items: &[usize],
    ) -> Result<Vec<f64>>;

    fn observe_event(&mut self, state: &mut RunState, event: &InteractionEvent) -> Result<()>;
}

/// The trained model as a scorer: dot product of user and item embeddings,
/// streaming memory and graph updates after each revealed event.
pub struct TgnScorer<'m> {
    model: &'m TgnModel,
    nbr_rng: ChaCha8Rng,
}

impl<'m> TgnScorer<'m> {
    pub fn new(model: &'m TgnModel, nbr_seed: u64) -> Self {
        TgnScorer { model, nbr_rng: ChaCha8Rng::seed_from_u64(nbr_seed) }
    }
}

impl CandidateScorer for TgnScorer<'_> {
    fn score_candidates(
        &mut self,
        state: &RunState,
        user: usize,
        t: f64,
        items: &[usize],
    ) -> Result<Vec<f64>> {
        let num_users = state.adj.num_users();
        let mut tape = Tape::new();
        let bound = self.model.params.bind_frozen(&mut tape);
        let mut overlay = MemoryOverlay::new();
        let mut ctx = crate::embedding::EmbedCtx {
            tape: &mut tape,
            store: &state.store,
            overlay: &mut overlay,
            adj: &state.adj,
            bound: &bound,
            settings: self.model.spec.embed_settings(),
            rng: &mut self.nbr_rng,
        };
        let z_u = crate::embedding::embed_node(&mut ctx, user, t)?;
        let mut scores = Vec::with_capacity(items.len());
        for &item in items {
            let z_i = crate::embedding::embed_node(&mut ctx, num_users + item, t)?;
            let s = ctx.tape.dot(z_u, z_i)?;
            scores.push(ctx.tape.value(s).item());
        }
        Ok(scores)
    }

    fn observe_event(&mut self, state: &mut RunState, event: &InteractionEvent) -> Result<()> {
        let num_users = state.adj.num_users();
        let mut tape = Tape::new();
        let bound = self.model.params.bind_frozen(&mut tape);
        let mut overlay = MemoryOverlay::new();
        let msgs =
            aggregate_last(build_messages(std::slice::from_ref(event), &state.store, num_users)?);
        apply_messages(
            &mut tape,
            &mut state.store,
            &mut overlay,
            &bound,
            self.model.spec.updater,
            self.model.spec.time_mode,
            &msgs,
        )?;
        state.adj.insert_event(event, state.next_event_ref)?;
        state.next_event_ref += 1;
        Ok(())
    }
}

/// Non-personalized baseline: score is the item's interaction count in the
/// reference log, frozen for the whole evaluation.
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn from_log(log: &EventLog) -> Self {
        let mut counts = vec![0.0; log.num_items];
        for event in &log.events {
            counts[event.item] += 1.0;
        }
        PopularityScorer { counts }
    }
}

impl CandidateScorer for PopularityScorer {
    fn score_candidates(
        &mut self,
        _state: &RunState,
        _user: usize,
        _t: f64,
        items: &[usize],
    ) -> Result<Vec<f64>> {
        Ok(items.iter().map(|&i| self.counts.get(i).copied().unwrap_or(0.0)).collect())
    }

    fn observe_event(&mut self, _state: &mut RunState, _event: &InteractionEvent) -> Result<()> {
        Ok(())
    }
}

/// Fraction of cases whose positive landed within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::data("recall over zero cases"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Rank of the first candidate: 1 plus the number of others scoring
/// strictly higher, with exact ties broken toward the smaller item index.
fn rank_of_first(candidates: &[usize], scores: &[f64]) -> usize {
    let positive = candidates[0];
    let s_p = scores[0];
    let mut rank = 1;
    for i in 1..candidates.len() {
        if scores[i] > s_p || (scores[i] == s_p && candidates[i] < positive) {
            rank += 1;
        }
    }
    rank
}

/// Stream `events` in order: for each, rank the true item against sampled
/// negatives (items the user has never interacted with, drawn from the
/// configured pool), then reveal the event to the scorer and the index.
pub fn evaluate_split<S: CandidateScorer>(
    scorer: &mut S,
    state: &mut RunState,
    events: &[InteractionEvent],
    num_items: usize,
    opts: &EvalOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(MetricsReport, Vec<RankedCase>)> {
    if events.is_empty() {
        return Err(Error::data("evaluation split has no events"));
    }
    let global_pool: Vec<usize> = (0..num_items).collect();
    let mut ranks = Vec::with_capacity(events.len());
    let mut flagged_count = 0usize;
    let mut cases = Vec::new();
    for chunk in events.chunks(opts.batch_size.max(1)) {
        let batch_pool: Vec<usize>;
        let pool: &[usize] = match opts.pool {
            PoolMode::Global => &global_pool,
            PoolMode::Batch => {
                let mut items: Vec<usize> = chunk.iter().map(|e| e.item).collect();
                items.sort_unstable();
                items.dedup();
                batch_pool = items;
                &batch_pool
            }
        };
        for event in chunk {
            let eligible: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&item| item != event.item && !state.index.contains(event.user, item))
                .collect();
            let (negs, flagged) = if eligible.len() >= opts.n_neg {
                let picks = rand::seq::index::sample(rng, eligible.len(), opts.n_neg);
                (picks.iter().map(|i| eligible[i]).collect::<Vec<usize>>(), false)
            } else {
                (eligible, true)
            };
            if flagged {
                flagged_count += 1;
            }
            let mut candidates = Vec::with_capacity(negs.len() + 1);
            candidates.push(event.item);
            candidates.extend_from_slice(&negs);

            let scores =
                scorer.score_candidates(state, event.user, event.timestamp, &candidates)?;
            debug_assert_eq!(scores.len(), candidates.len());
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(NumericsError::NonFinite { op: "candidate score" }.into());
            }
            let rank = rank_of_first(&candidates, &scores);
            ranks.push(rank);
            if opts.keep_cases {
                cases.push(RankedCase {
                    user: event.user,
                    item: event.item,
                    timestamp: event.timestamp,
                    candidates,
                    scores,
                    rank,
                    flagged,
                });
            }
            scorer.observe_event(state, event)?;
            state.index.add(event.user, event.item);
        }
    }
    let mut recalls = BTreeMap::new();
    for &k in &opts.k_list {
        recalls.insert(k, recall_at_k(&ranks, k)?);
    }
    Ok((MetricsReport { cases: ranks.len(), flagged: flagged_count, recalls }, cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IdMaps;
    use crate::embedding::EmbeddingVariant;
    use crate::graph::SamplingPolicy;
    use crate::memory::{TimeMode, UpdaterKind};
    use crate::model::ModelSpec;
    use crate::training::replay_log;
    use std::collections::HashMap;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn ev(user: usize, item: usize, t: f64) -> InteractionEvent {
        InteractionEvent { user, item, timestamp: t, edge_features: vec![] }
    }

    /// Scores straight out of a fixed table; never updates anything.
    struct Scripted {
        table: HashMap<usize, f64>,
        observed: usize,
    }

    impl Scripted {
        fn new(pairs: &[(usize, f64)]) -> Self {
            Scripted { table: pairs.iter().copied().collect(), observed: 0 }
        }
    }

    impl CandidateScorer for Scripted {
        fn score_candidates(
            &mut self,
            _state: &RunState,
            _user: usize,
            _t: f64,
            items: &[usize],
        ) -> Result<Vec<f64>> {
            Ok(items.iter().map(|i| self.table[i]).collect())
        }

        fn observe_event(&mut self, _state: &mut RunState, _e: &InteractionEvent) -> Result<()> {
            self.observed += 1;
            Ok(())
        }
    }

    fn opts(n_neg: usize, k_list: Vec<usize>) -> EvalOptions {
        EvalOptions { n_neg, k_list, pool: PoolMode::Global, batch_size: 100, keep_cases: true }
    }

    #[test]
    fn rank_counts_strictly_better_and_breaks_ties_by_index() {
        // Positive item 2 scores 0.5; item 0 is above, item 1 ties with a
        // smaller index, item 3 is below: rank 3.
        let mut scorer = Scripted::new(&[(0, 0.9), (1, 0.5), (2, 0.5), (3, 0.2)]);
        let mut state = RunState::fresh(1, 4, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (report, cases) = evaluate_split(
            &mut scorer,
            &mut state,
            &[ev(0, 2, 1.0)],
            4,
            &opts(10, vec![2, 3]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(cases[0].candidates, vec![2, 0, 1, 3]);
        assert_eq!(cases[0].rank, 3);
        assert!(cases[0].flagged, "pool of 3 is short of 10 negatives");
        assert_eq!(report.cases, 1);
        assert_eq!(report.flagged, 1);
        assert_eq!(report.recall(2), 0.0);
        assert_eq!(report.recall(3), 1.0);
    }

    #[test]
    fn past_positives_never_appear_as_negatives() {
        let mut scorer = Scripted::new(&[(0, 0.1), (1, 0.2), (2, 0.3), (3, 0.4)]);
        let mut state = RunState::fresh(1, 4, 0, 2);
        state.index.add(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, cases) = evaluate_split(
            &mut scorer,
            &mut state,
            &[ev(0, 2, 1.0)],
            4,
            &opts(10, vec![1]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(cases[0].candidates, vec![2, 1, 3]);
    }

    #[test]
    fn streamed_events_join_the_exclusion_set() {
        let mut scorer = Scripted::new(&[(0, 0.1), (1, 0.2), (2, 0.3), (3, 0.4)]);
        let mut state = RunState::fresh(1, 4, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (report, cases) = evaluate_split(
            &mut scorer,
            &mut state,
            &[ev(0, 2, 1.0), ev(0, 3, 2.0)],
            4,
            &opts(10, vec![1]),
            &mut rng,
        )
        .unwrap();
        // Second case: item 2 was just consumed by this user, so the
        // eligible negatives are only 0 and 1.
        assert_eq!(cases[1].candidates, vec![3, 0, 1]);
        assert_eq!(scorer.observed, 2);
        assert!(state.index.contains(0, 3));
        assert_eq!(report.cases, 2);
    }

    #[test]
    fn sampled_negatives_are_distinct_and_exclude_the_positive() {
        let table: Vec<(usize, f64)> = (0..30).map(|i| (i, i as f64 * 0.01)).collect();
        let mut scorer = Scripted::new(&table);
        let mut state = RunState::fresh(1, 30, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (report, cases) = evaluate_split(
            &mut scorer,
            &mut state,
            &[ev(0, 4, 1.0)],
            30,
            &opts(5, vec![10]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.flagged, 0);
        let c = &cases[0];
        assert_eq!(c.candidates.len(), 6);
        assert_eq!(c.candidates[0], 4);
        let distinct: HashSet<_> = c.candidates.iter().collect();
        assert_eq!(distinct.len(), 6);
    }

    #[test]
    fn batch_pool_restricts_negatives_to_the_chunk() {
        let table: Vec<(usize, f64)> = (0..6).map(|i| (i, i as f64)).collect();
        let mut scorer = Scripted::new(&table);
        let mut state = RunState::fresh(2, 6, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let events = vec![ev(0, 0, 1.0), ev(1, 1, 2.0), ev(0, 4, 3.0), ev(1, 5, 4.0)];
        let mut o = opts(10, vec![1]);
        o.pool = PoolMode::Batch;
        o.batch_size = 2;
        let (_, cases) = evaluate_split(&mut scorer, &mut state, &events, 6, &o, &mut rng).unwrap();
        // First chunk holds items {0,1}, second {4,5}.
        assert_eq!(cases[0].candidates, vec![0, 1]);
        assert_eq!(cases[2].candidates, vec![4, 5]);
    }

    #[test]
    fn popularity_scorer_ranks_by_training_counts() {
        let ids = IdMaps { users: vec!["u0".into()], items: (0..4).map(|i| format!("i{i}")).collect() };
        let train = EventLog {
            events: vec![ev(0, 0, 1.0), ev(0, 0, 2.0), ev(0, 0, 3.0), ev(0, 1, 4.0), ev(0, 1, 5.0), ev(0, 2, 6.0)],
            num_users: 1,
            num_items: 4,
            d_e: 0,
            ids: Arc::new(ids),
        };
        let mut scorer = PopularityScorer::from_log(&train);
        // Counts: item0 = 3, item1 = 2, item2 = 1, item3 = 0.
        let mut state = RunState::fresh(1, 4, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, cases) = evaluate_split(
            &mut scorer,
            &mut state,
            &[ev(0, 2, 7.0)],
            4,
            &opts(10, vec![1]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(cases[0].rank, 3);
    }

    #[test]
    fn recall_oracle_and_empty_rejection() {
        let ranks = [1, 3, 11, 2];
        assert_eq!(recall_at_k(&ranks, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&ranks, 10).unwrap(), 0.75);
        assert_eq!(recall_at_k(&ranks, 20).unwrap(), 1.0);
        assert!(recall_at_k(&[], 10).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let ranks = [5, 1, 9, 2, 14, 3, 3, 7];
        let r5 = recall_at_k(&ranks, 5).unwrap();
        let r10 = recall_at_k(&ranks, 10).unwrap();
        let r20 = recall_at_k(&ranks, 20).unwrap();
        assert!(r5 <= r10 && r10 <= r20);
    }

    #[test]
    fn model_scorer_streams_state_forward() {
        use rand::SeedableRng as _;
        let spec = ModelSpec {
            d_mem: 3,
            d_node: 3,
            d_time: 4,
            d_e: 0,
            updater: UpdaterKind::Gru,
            variant: EmbeddingVariant::Attention,
            time_mode: TimeMode::Encode,
            heads: 1,
            layers: 1,
            n_nbr: 3,
            policy: SamplingPolicy::Recent,
        };
        let model = crate::model::TgnModel::new(spec, &mut ChaCha8Rng::seed_from_u64(3));
        let ids = IdMaps {
            users: (0..2).map(|u| format!("u{u}")).collect(),
            items: (0..3).map(|i| format!("i{i}")).collect(),
        };
        let train = EventLog {
            events: vec![ev(0, 0, 1.0), ev(1, 1, 2.0), ev(0, 2, 3.0), ev(1, 0, 4.0)],
            num_users: 2,
            num_items: 3,
            d_e: 0,
            ids: Arc::new(ids),
        };
        let mut state = replay_log(&model, &train, 2).unwrap();
        let before_rows: Vec<Vec<f64>> = (0..5).map(|n| state.store.row(n).to_vec()).collect();
        let before_entries = state.adj.num_entries();

        let mut scorer = TgnScorer::new(&model, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let val = [ev(0, 1, 5.0), ev(1, 2, 6.0)];
        let (report, _) = evaluate_split(
            &mut scorer,
            &mut state,
            &val,
            3,
            &EvalOptions {
                n_neg: 2,
                k_list: vec![1, 2],
                pool: PoolMode::Global,
                batch_size: 100,
                keep_cases: false,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.cases, 2);
        for (&k, &r) in &report.recalls {
            assert!((0.0..=1.0).contains(&r), "recall@{k} = {r}");
        }
        // Each observed event applied a memory update to both endpoints
        // and inserted a mirrored edge.
        assert_eq!(state.adj.num_entries(), before_entries + 4);
        assert_ne!(state.store.row(0), &before_rows[0][..]);
        assert_ne!(state.store.row(1), &before_rows[1][..]);
        assert!(state.store.last_update(0) == 5.0 && state.store.last_update(1) == 6.0);
    }

    #[test]
    fn evaluation_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let table: Vec<(usize, f64)> = (0..25).map(|i| (i, (i as f64 * 0.37).sin())).collect();
            let mut scorer = Scripted::new(&table);
            let mut state = RunState::fresh(2, 25, 0, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let events = vec![ev(0, 3, 1.0), ev(1, 8, 2.0), ev(0, 15, 3.0)];
            evaluate_split(&mut scorer, &mut state, &events, 25, &opts(6, vec![5, 10]), &mut rng)
                .unwrap()
        };
        let (r1, c1) = run();
        let (r2, c2) = run();
        assert_eq!(r1, r2);
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert_eq!(a.candidates, b.candidates);
            assert_eq!(a.scores, b.scores);
            assert_eq!(a.rank, b.rank);
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut scorer = Scripted::new(&[]);
        let mut state = RunState::fresh(1, 1, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err =
            evaluate_split(&mut scorer, &mut state, &[], 1, &opts(1, vec![1]), &mut rng)
                .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
