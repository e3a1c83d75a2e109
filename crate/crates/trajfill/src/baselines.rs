//! Markov-chain and KNN reference predictors, adapted to gap filling: given
//! the observed visits around a gap, rank the candidate places for it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::config::MarkovSides;
use crate::data::{DayType, HolidayCalendar, Trajectory};
use crate::embed::time_base_pair;
use crate::error::{Error, Result};
use crate::vocab::{Modality, TokenId};

/// Observed visits a baseline may learn from, in canonical order. CDR models
/// see only in-window visits, matching the sequence model.
pub fn observed_ordered(traj: &Trajectory, modality: Modality) -> Vec<(TokenId, u32)> {
    let mut visits: Vec<(TokenId, u32)> = traj
        .visits
        .iter()
        .filter(|v| v.observed && (modality == Modality::Gps || v.slot.is_some()))
        .map(|v| (v.token, v.timestamp))
        .collect();
    visits.sort_by_key(|&(t, ts)| (ts, t));
    visits
}

// ---------------------------------------------------------------------------
// Markov chain
// ---------------------------------------------------------------------------

/// Order-1 transition counts over consecutive observed visits within a day,
/// with additive smoothing and a marginal-frequency prior.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    n_places: usize,
    counts: Vec<u64>,
    row_totals: Vec<u64>,
    marginal: Vec<u64>,
    total_visits: u64,
    pub alpha: f64,
    pub sides: MarkovSides,
}

pub fn markov_fit(
    trajectories: &[Trajectory],
    modality: Modality,
    n_places: usize,
    alpha: f64,
    sides: MarkovSides,
) -> Result<MarkovModel> {
    let mut model = MarkovModel {
        n_places,
        counts: vec![0; n_places * n_places],
        row_totals: vec![0; n_places],
        marginal: vec![0; n_places],
        total_visits: 0,
        alpha,
        sides,
    };
    for traj in trajectories {
        let visits = observed_ordered(traj, modality);
        for &(token, _) in &visits {
            model.marginal[token.index()] += 1;
            model.total_visits += 1;
        }
        for pair in visits.windows(2) {
            let (from, to) = (pair[0].0.index(), pair[1].0.index());
            model.counts[from * n_places + to] += 1;
            model.row_totals[from] += 1;
        }
    }
    if model.total_visits == 0 {
        return Err(Error::data("markov_fit: no observed visits in the corpus"));
    }
    Ok(model)
}

impl MarkovModel {
    pub fn count(&self, from: TokenId, to: TokenId) -> u64 {
        self.counts[from.index() * self.n_places + to.index()]
    }

    /// Smoothed transition probability; None when the row is undefined
    /// (alpha = 0 and the source was never seen).
    pub fn transition(&self, from: TokenId, to: TokenId) -> Option<f64> {
        let denom = self.row_totals[from.index()] as f64 + self.alpha * self.n_places as f64;
        if denom == 0.0 {
            return None;
        }
        Some((self.count(from, to) as f64 + self.alpha) / denom)
    }

    /// Marginal visit frequency of a place.
    pub fn prior(&self, token: TokenId) -> f64 {
        self.marginal[token.index()] as f64 / self.total_visits as f64
    }

    /// Smoothed outgoing distribution of a source place.
    pub fn transition_row(&self, from: TokenId) -> Option<Vec<f64>> {
        (0..self.n_places)
            .map(|j| self.transition(from, TokenId(j as u32)))
            .collect()
    }
}

/// Rank every place for a gap between `prev` and `next` observed tokens.
/// Score: T[prev, x] * T[x, next] with both neighbors, a single factor with
/// one, the marginal prior with none; undefined rows (alpha = 0, unseen
/// source) fall back to the prior. Ties break by token id.
pub fn markov_predict(
    model: &MarkovModel,
    prev: Option<TokenId>,
    next: Option<TokenId>,
) -> Vec<(TokenId, f64)> {
    let next = match model.sides {
        MarkovSides::Both => next,
        MarkovSides::PrevOnly => None,
    };
    let mut scored: Vec<(TokenId, f64)> = (0..model.n_places)
        .map(|i| {
            let x = TokenId(i as u32);
            let score = match (prev, next) {
                (Some(p), Some(n)) => {
                    let f1 = model.transition(p, x).unwrap_or_else(|| model.prior(x));
                    let f2 = model.transition(x, n).unwrap_or_else(|| model.prior(n));
                    f1 * f2
                }
                (Some(p), None) => model.transition(p, x).unwrap_or_else(|| model.prior(x)),
                (None, Some(n)) => model.transition(x, n).unwrap_or_else(|| model.prior(n)),
                (None, None) => model.prior(x),
            };
            (x, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    scored
}

// ---------------------------------------------------------------------------
// KNN
// ---------------------------------------------------------------------------

/// Gap descriptor: neighbor tokens (absent at day boundaries), the
/// time-of-day base pair, and the day type. Distances below are Euclidean on
/// the implied dense vector (one-hot neighbor and day-type blocks).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapFeatures {
    pub prev: Option<TokenId>,
    pub next: Option<TokenId>,
    pub t_sin: f64,
    pub t_cos: f64,
    pub day_type: DayType,
}

pub fn gap_features(
    prev: Option<TokenId>,
    next: Option<TokenId>,
    timestamp: u32,
    day_type: DayType,
) -> GapFeatures {
    let (t_sin, t_cos) = time_base_pair(timestamp);
    GapFeatures { prev, next, t_sin, t_cos, day_type }
}

/// Squared Euclidean distance between the dense encodings of two gaps.
/// One-hot blocks contribute 0 (equal), 1 (one absent), or 2 (different).
pub fn dist2(a: &GapFeatures, b: &GapFeatures) -> f64 {
    fn one_hot_block(x: Option<TokenId>, y: Option<TokenId>) -> f64 {
        match (x, y) {
            (None, None) => 0.0,
            (Some(_), None) | (None, Some(_)) => 1.0,
            (Some(i), Some(j)) if i == j => 0.0,
            _ => 2.0,
        }
    }
    let mut d = one_hot_block(a.prev, b.prev) + one_hot_block(a.next, b.next);
    d += (a.t_sin - b.t_sin).powi(2) + (a.t_cos - b.t_cos).powi(2);
    if a.day_type != b.day_type {
        d += 2.0;
    }
    d
}

#[derive(Debug, Clone)]
pub struct KnnModel {
    pub bank: Vec<(GapFeatures, TokenId)>,
    marginal: Vec<u64>,
    pub k: usize,
}

/// Build the memory bank: every observed visit becomes one entry, described
/// by its observed neighbors, its time of day, and the day type.
pub fn knn_fit(
    trajectories: &[Trajectory],
    modality: Modality,
    holidays: &HolidayCalendar,
    n_places: usize,
    k: usize,
) -> Result<KnnModel> {
    if k == 0 {
        return Err(Error::config("knn k must be >= 1"));
    }
    let mut bank = Vec::new();
    let mut marginal = vec![0u64; n_places];
    for traj in trajectories {
        let visits = observed_ordered(traj, modality);
        let day = holidays.day_type(traj.date);
        for (i, &(token, ts)) in visits.iter().enumerate() {
            let prev = if i > 0 { Some(visits[i - 1].0) } else { None };
            let next = visits.get(i + 1).map(|&(t, _)| t);
            bank.push((gap_features(prev, next, ts, day), token));
            marginal[token.index()] += 1;
        }
    }
    if bank.is_empty() {
        return Err(Error::data("knn_fit: no observed visits in the corpus"));
    }
    Ok(KnnModel { bank, marginal, k })
}

/// (distance², insertion index) with max-heap ordering, so the heap top is
/// always the current worst neighbor.
#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Tokens ranked by vote count among the k nearest bank entries. Distance
/// ties break by insertion order, vote ties by token id. `k` larger than the
/// bank is clamped (and logged).
pub fn knn_predict(model: &KnnModel, query: &GapFeatures) -> Vec<(TokenId, usize)> {
    let k = if model.k > model.bank.len() {
        eprintln!(
            "knn: k={} exceeds bank size {}; clamping",
            model.k,
            model.bank.len()
        );
        model.bank.len()
    } else {
        model.k
    };
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (idx, (feat, _)) in model.bank.iter().enumerate() {
        let d = dist2(feat, query);
        if heap.len() < k {
            heap.push(HeapEntry(d, idx));
        } else if let Some(worst) = heap.peek() {
            if HeapEntry(d, idx) < *worst {
                heap.pop();
                heap.push(HeapEntry(d, idx));
            }
        }
    }
    let mut votes: Vec<(TokenId, usize)> = Vec::new();
    for HeapEntry(_, idx) in heap.into_iter() {
        let token = model.bank[idx].1;
        match votes.iter_mut().find(|(t, _)| *t == token) {
            Some((_, c)) => *c += 1,
            None => votes.push((token, 1)),
        }
    }
    votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    votes
}

impl KnnModel {
    /// Ranking extended to at least `min_len` tokens: neighbor votes first,
    /// then the remaining places by bank marginal frequency (ties by id).
    pub fn ranked_filled(&self, query: &GapFeatures, min_len: usize) -> Vec<TokenId> {
        let votes = knn_predict(self, query);
        let n_votes = votes.len();
        let mut out: Vec<TokenId> = votes.into_iter().map(|(t, _)| t).collect();
        if out.len() < min_len {
            let mut rest: Vec<TokenId> = (0..self.marginal.len() as u32)
                .map(TokenId)
                .filter(|t| !out.contains(t))
                .collect();
            rest.sort_by(|a, b| {
                self.marginal[b.index()]
                    .cmp(&self.marginal[a.index()])
                    .then(a.cmp(b))
            });
            out.extend(rest);
        }
        out.truncate(min_len.max(n_votes).min(self.marginal.len()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visit;
    use crate::rng::Rng;
    use std::collections::HashMap;

    fn day(user: &str, date: &str, tokens_times: &[(u32, u32)]) -> Trajectory {
        Trajectory {
            user_id: user.into(),
            date: date.parse().unwrap(),
            visits: tokens_times
                .iter()
                .map(|&(t, ts)| Visit::new(TokenId(t), ts, true))
                .collect(),
        }
    }

    /// Independent pair-count oracle over the same filtered visit streams.
    fn pair_count_oracle(
        trajs: &[Trajectory],
        modality: Modality,
    ) -> HashMap<(u32, u32), u64> {
        let mut counts = HashMap::new();
        for traj in trajs {
            let visits = observed_ordered(traj, modality);
            for i in 1..visits.len() {
                *counts.entry((visits[i - 1].0 .0, visits[i].0 .0)).or_insert(0) += 1;
            }
        }
        counts
    }

    #[test]
    fn alternating_day_counts_pairs() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(0, 7 * h), (1, 9 * h), (0, 11 * h), (1, 13 * h)])];
        let m = markov_fit(&trajs, Modality::Cdr, 2, 1.0, MarkovSides::Both).unwrap();
        assert_eq!(m.count(TokenId(0), TokenId(1)), 2);
        assert_eq!(m.count(TokenId(1), TokenId(0)), 1);
        assert_eq!(m.count(TokenId(1), TokenId(1)), 0);
    }

    #[test]
    fn single_visit_days_contribute_no_transitions() {
        let h = 3600;
        let trajs = vec![
            day("u", "2024-03-05", &[(0, 9 * h)]),
            day("u", "2024-03-06", &[(1, 9 * h)]),
        ];
        let m = markov_fit(&trajs, Modality::Cdr, 2, 1.0, MarkovSides::Both).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(m.count(TokenId(a), TokenId(b)), 0);
            }
        }
        assert_eq!(m.prior(TokenId(0)), 0.5);
    }

    #[test]
    fn fit_matches_pair_count_oracle_on_random_corpora() {
        let mut rng = Rng::seeded(5);
        for trial in 0..20 {
            let n_places = 2 + rng.below(8);
            let mut trajs = Vec::new();
            let mut total = 0;
            while total < 900 {
                let len = 1 + rng.below(8);
                total += len;
                let tt: Vec<(u32, u32)> = (0..len)
                    .map(|i| {
                        (
                            rng.below(n_places) as u32,
                            6 * 3600 + (i as u32) * 1800 + rng.below(600) as u32,
                        )
                    })
                    .collect();
                trajs.push(day("u", "2024-03-05", &tt));
            }
            let m = markov_fit(&trajs, Modality::Cdr, n_places, 1.0, MarkovSides::Both).unwrap();
            let oracle = pair_count_oracle(&trajs, Modality::Cdr);
            for a in 0..n_places as u32 {
                for b in 0..n_places as u32 {
                    let want = oracle.get(&(a, b)).copied().unwrap_or(0);
                    assert_eq!(m.count(TokenId(a), TokenId(b)), want, "trial {trial} ({a}->{b})");
                }
            }
        }
    }

    #[test]
    fn smoothed_rows_are_distributions() {
        let mut rng = Rng::seeded(6);
        for _ in 0..10 {
            let n_places = 3 + rng.below(6);
            let tt: Vec<(u32, u32)> = (0..40)
                .map(|i| (rng.below(n_places) as u32, 6 * 3600 + i * 1500))
                .collect();
            let trajs = vec![day("u", "2024-03-05", &tt)];
            let m = markov_fit(&trajs, Modality::Cdr, n_places, 0.7, MarkovSides::Both).unwrap();
            for a in 0..n_places as u32 {
                let row = m.transition_row(TokenId(a)).unwrap();
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {a} sums to {sum}");
            }
        }
    }

    #[test]
    fn deterministic_chain_ranks_the_middle_token_first() {
        let h = 3600;
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| day("u", "2024-03-05", &[(0, (7 + i) * h), (1, (9 + i) * h), (2, (11 + i) * h)]))
            .collect();
        let m = markov_fit(&trajs, Modality::Cdr, 3, 1.0, MarkovSides::Both).unwrap();
        let ranked = markov_predict(&m, Some(TokenId(0)), Some(TokenId(2)));
        assert_eq!(ranked[0].0, TokenId(1));
        // Exhaustive re-scoring over the 3-token vocabulary.
        for (x, score) in &ranked {
            let want = m.transition(TokenId(0), *x).unwrap() * m.transition(*x, TokenId(2)).unwrap();
            assert!((score - want).abs() < 1e-15);
        }
    }

    #[test]
    fn no_neighbors_falls_back_to_marginal_order_and_ties_break_by_id() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(2, 7 * h), (2, 9 * h), (0, 11 * h), (1, 13 * h)])];
        let m = markov_fit(&trajs, Modality::Cdr, 3, 1.0, MarkovSides::Both).unwrap();
        let ranked = markov_predict(&m, None, None);
        assert_eq!(ranked[0].0, TokenId(2));
        // Tokens 0 and 1 tie on the prior; the lower id wins.
        assert_eq!(ranked[1].0, TokenId(0));
        assert_eq!(ranked[2].0, TokenId(1));
    }

    #[test]
    fn alpha_zero_unseen_row_falls_back_to_prior() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(0, 7 * h), (1, 9 * h)])];
        let m = markov_fit(&trajs, Modality::Cdr, 3, 0.0, MarkovSides::Both).unwrap();
        // Token 2 was never a source; its row is undefined.
        assert_eq!(m.transition(TokenId(2), TokenId(0)), None);
        let ranked = markov_predict(&m, Some(TokenId(2)), None);
        // Fallback is the marginal prior: tokens 0 and 1 tie, id breaks it.
        assert_eq!(ranked[0].0, TokenId(0));
        assert!((ranked[0].1 - 0.5).abs() < 1e-12);
        assert_eq!(ranked[2].0, TokenId(2));
    }

    #[test]
    fn prev_only_mode_ignores_the_next_neighbor() {
        let h = 3600;
        let trajs: Vec<Trajectory> = (0..3)
            .map(|_| day("u", "2024-03-05", &[(0, 7 * h), (1, 9 * h), (2, 11 * h)]))
            .collect();
        let m = markov_fit(&trajs, Modality::Cdr, 3, 1.0, MarkovSides::PrevOnly).unwrap();
        let with_next = markov_predict(&m, Some(TokenId(0)), Some(TokenId(2)));
        let without = markov_predict(&m, Some(TokenId(0)), None);
        assert_eq!(with_next, without);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(markov_fit(&[], Modality::Cdr, 3, 1.0, MarkovSides::Both).is_err());
    }

    // --- KNN ---------------------------------------------------------------

    fn feat(prev: Option<u32>, next: Option<u32>, ts: u32, day: DayType) -> GapFeatures {
        gap_features(prev.map(TokenId), next.map(TokenId), ts, day)
    }

    #[test]
    fn singleton_bank_always_predicts_its_token() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(2, 9 * h)])];
        let m = knn_fit(&trajs, Modality::Cdr, &HolidayCalendar::default(), 3, 1).unwrap();
        let q = feat(Some(0), Some(1), 15 * h, DayType::Weekend);
        assert_eq!(knn_predict(&m, &q), vec![(TokenId(2), 1)]);
    }

    #[test]
    fn zero_distance_entry_is_always_a_neighbor() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(0, 7 * h), (1, 9 * h), (2, 11 * h)])];
        let m = knn_fit(&trajs, Modality::Cdr, &HolidayCalendar::default(), 3, 1).unwrap();
        // Query identical to the middle bank entry.
        let q = feat(Some(0), Some(2), 9 * h, DayType::Weekday);
        let (bank_feat, token) = m.bank[1];
        assert_eq!(dist2(&bank_feat, &q), 0.0);
        assert_eq!(knn_predict(&m, &q)[0].0, token);
    }

    /// Exhaustive oracle: materialize dense vectors, stable-sort all bank
    /// entries by (distance, insertion order), vote among the first k.
    fn knn_oracle(
        model: &KnnModel,
        query: &GapFeatures,
        n_places: usize,
        k: usize,
    ) -> Vec<(TokenId, usize)> {
        let dense = |f: &GapFeatures| -> Vec<f64> {
            let mut v = vec![0.0; 2 * n_places + 2 + 3];
            if let Some(t) = f.prev {
                v[t.index()] = 1.0;
            }
            if let Some(t) = f.next {
                v[n_places + t.index()] = 1.0;
            }
            v[2 * n_places] = f.t_sin;
            v[2 * n_places + 1] = f.t_cos;
            v[2 * n_places + 2 + f.day_type.index()] = 1.0;
            v
        };
        let qv = dense(query);
        let mut scored: Vec<(f64, usize)> = model
            .bank
            .iter()
            .enumerate()
            .map(|(i, (f, _))| {
                let fv = dense(f);
                let d: f64 = fv.iter().zip(&qv).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: Vec<(TokenId, usize)> = Vec::new();
        for &(_, i) in scored.iter().take(k) {
            let token = model.bank[i].1;
            match votes.iter_mut().find(|(t, _)| *t == token) {
                Some((_, c)) => *c += 1,
                None => votes.push((token, 1)),
            }
        }
        votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        votes
    }

    #[test]
    fn knn_matches_the_exhaustive_sort_oracle() {
        let mut rng = Rng::seeded(17);
        let n_places = 6;
        let mut trajs = Vec::new();
        for d in 0..5 {
            let date = format!("2024-03-{:02}", 4 + d);
            let tt: Vec<(u32, u32)> = (0..4)
                .map(|i| (rng.below(n_places) as u32, 6 * 3600 + i * 7200 + rng.below(1200) as u32))
                .collect();
            trajs.push(day("u", &date, &tt));
        }
        let m = knn_fit(&trajs, Modality::Cdr, &HolidayCalendar::default(), n_places, 3).unwrap();
        assert_eq!(m.bank.len(), 20);
        for trial in 0..50 {
            let q = feat(
                if rng.chance(0.8) { Some(rng.below(n_places) as u32) } else { None },
                if rng.chance(0.8) { Some(rng.below(n_places) as u32) } else { None },
                rng.below(86_400) as u32,
                [DayType::Weekday, DayType::Weekend, DayType::Holiday][rng.below(3)],
            );
            let got = knn_predict(&m, &q);
            let want = knn_oracle(&m, &q, n_places, 3);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn oversized_k_is_clamped_to_the_bank() {
        let h = 3600;
        let trajs = vec![day("u", "2024-03-05", &[(0, 7 * h), (1, 9 * h)])];
        let m = knn_fit(&trajs, Modality::Cdr, &HolidayCalendar::default(), 3, 10).unwrap();
        let q = feat(None, None, 8 * h, DayType::Weekday);
        let votes = knn_predict(&m, &q);
        let total: usize = votes.iter().map(|(_, c)| c).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn ranked_filled_extends_with_marginal_order() {
        let h = 3600;
        let trajs = vec![day(
            "u",
            "2024-03-05",
            &[(2, 7 * h), (2, 9 * h), (2, 11 * h), (0, 13 * h)],
        )];
        let m = knn_fit(&trajs, Modality::Cdr, &HolidayCalendar::default(), 4, 1).unwrap();
        let q = feat(Some(2), Some(2), 9 * h, DayType::Weekday);
        let ranked = m.ranked_filled(&q, 4);
        assert_eq!(ranked.len(), 4);
        assert_eq!(ranked[0], TokenId(2)); // the single vote
        assert_eq!(ranked[1], TokenId(0)); // marginal count 1
        assert_eq!(ranked[2], TokenId(1)); // zero-count ties by id
        assert_eq!(ranked[3], TokenId(3));
    }
}
