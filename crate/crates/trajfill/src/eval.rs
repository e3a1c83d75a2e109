//! Evaluation harness: score ranked predictions against the hidden-visit
//! answer key (accuracy, top-3, top-5, with day-type and archetype
//! breakdowns), generate predictions from the trained model or the
//! baselines, and reconstruct complete days from sparse ones.
//!
//! Scoring is a pure fold over answer-key entries; prediction files may
//! arrive in any order. Every answer-key entry must have exactly one
//! prediction: duplicates are rejected, absences count as wrong.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gap_features, KnnModel, MarkovModel};
use crate::config::{MaskMode, SplitName};
use crate::data::{
    slot_start_s, user_split, AnswerDay, Dataset, PredictionRecord, Split, N_SLOTS,
};
use crate::date::CivilDate;
use crate::embed::{time_base_pair, usable_visits, AblationSet, RunTables, SeqVisit, TimeEnc};
use crate::error::{Error, Result};
use crate::mask::{apply_masks, MaskPlan};
use crate::model::{ModelParams, CONTEXT_LEN};
use crate::train::{predict_masked, ranked_indices, ForwardEnv};
use crate::vocab::{Modality, TokenId};

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Count a rank-1 grid prediction adjacent to the truth as correct
    /// (accuracy only; top-k stays exact-match). Off by default.
    pub grid_neighbor_credit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBlock {
    pub n_targets: usize,
    pub accuracy: f64,
    pub top3: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    n: usize,
    c1: usize,
    c3: usize,
    c5: usize,
}

impl Tally {
    fn add(&mut self, rank1: bool, rank3: bool, rank5: bool) {
        self.n += 1;
        self.c1 += usize::from(rank1);
        self.c3 += usize::from(rank3);
        self.c5 += usize::from(rank5);
    }

    fn block(&self) -> ScoreBlock {
        let d = self.n.max(1) as f64;
        ScoreBlock {
            n_targets: self.n,
            accuracy: self.c1 as f64 / d,
            top3: self.c3 as f64 / d,
            top5: self.c5 as f64 / d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_targets: usize,
    pub n_missing: usize,
    pub accuracy: f64,
    pub top3: f64,
    pub top5: f64,
    pub by_day_type: BTreeMap<String, ScoreBlock>,
    pub by_archetype: BTreeMap<String, ScoreBlock>,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>9} {:>9} {:>9}\n",
            "group", "targets", "accuracy", "top3", "top5"
        ));
        out.push_str(&format!(
            "{:<24} {:>8} {:>9.4} {:>9.4} {:>9.4}\n",
            "overall", self.n_targets, self.accuracy, self.top3, self.top5
        ));
        for (name, b) in &self.by_day_type {
            out.push_str(&format!(
                "{:<24} {:>8} {:>9.4} {:>9.4} {:>9.4}\n",
                format!("day_type/{name}"),
                b.n_targets,
                b.accuracy,
                b.top3,
                b.top5
            ));
        }
        for (name, b) in &self.by_archetype {
            out.push_str(&format!(
                "{:<24} {:>8} {:>9.4} {:>9.4} {:>9.4}\n",
                format!("archetype/{name}"),
                b.n_targets,
                b.accuracy,
                b.top3,
                b.top5
            ));
        }
        if self.n_missing > 0 {
            out.push_str(&format!("missing predictions (scored wrong): {}\n", self.n_missing));
        }
        out
    }
}

/// Restrict an answer key to one user split.
pub fn key_for_split(
    key: &[AnswerDay],
    split: SplitName,
    split_train: f64,
    split_val: f64,
) -> Vec<AnswerDay> {
    key.iter()
        .filter(|day| match split {
            SplitName::All => true,
            SplitName::Train => user_split(&day.user, split_train, split_val) == Split::Train,
            SplitName::Val => user_split(&day.user, split_train, split_val) == Split::Val,
            SplitName::Test => user_split(&day.user, split_train, split_val) == Split::Test,
        })
        .cloned()
        .collect()
}

/// Score predictions against the answer key.
pub fn score(
    predictions: &[PredictionRecord],
    key: &[AnswerDay],
    dataset: &Dataset,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut by_key: HashMap<(&str, CivilDate, u32), &PredictionRecord> = HashMap::new();
    for p in predictions {
        for (i, place) in p.ranked.iter().enumerate() {
            if p.ranked[..i].contains(place) {
                return Err(Error::data(format!(
                    "prediction ({}, {}, {}) repeats place `{place}` in its ranking",
                    p.user, p.date, p.time_or_slot
                )));
            }
        }
        if by_key.insert((p.user.as_str(), p.date, p.time_or_slot), p).is_some() {
            return Err(Error::data(format!(
                "duplicate prediction key ({}, {}, {})",
                p.user, p.date, p.time_or_slot
            )));
        }
    }

    let mut overall = Tally::default();
    let mut n_missing = 0usize;
    let mut by_day: BTreeMap<String, Tally> = BTreeMap::new();
    let mut by_arch: BTreeMap<String, Tally> = BTreeMap::new();
    for day in key {
        let day_type = dataset.holidays.day_type(day.date).label().to_string();
        let arch = day.archetype.clone().unwrap_or_else(|| "unknown".into());
        for hidden in &day.hidden {
            let (mut r1, mut r3, mut r5) = (false, false, false);
            match by_key.get(&(day.user.as_str(), day.date, hidden.time_or_slot)) {
                None => n_missing += 1,
                Some(pred) => {
                    let rank = pred.ranked.iter().position(|p| *p == hidden.place_id);
                    r1 = rank == Some(0);
                    r3 = rank.is_some_and(|r| r < 3);
                    r5 = rank.is_some_and(|r| r < 5);
                    if !r1 && opts.grid_neighbor_credit {
                        if let (Some(truth_tok), Some(first)) = (
                            dataset.vocab.token_of(&hidden.place_id),
                            pred.ranked.first().and_then(|p| dataset.vocab.token_of(p)),
                        ) {
                            r1 = dataset.vocab.grid_neighbors(truth_tok).contains(&first);
                        }
                    }
                }
            }
            overall.add(r1, r3, r5);
            by_day.entry(day_type.clone()).or_default().add(r1, r3, r5);
            by_arch.entry(arch.clone()).or_default().add(r1, r3, r5);
        }
    }

    let b = overall.block();
    Ok(EvalReport {
        n_targets: overall.n,
        n_missing,
        accuracy: b.accuracy,
        top3: b.top3,
        top5: b.top5,
        by_day_type: by_day.into_iter().map(|(k, t)| (k, t.block())).collect(),
        by_archetype: by_arch.into_iter().map(|(k, t)| (k, t.block())).collect(),
        config_echo: serde_json::Value::Null,
    })
}

// ---------------------------------------------------------------------------
// Model predictions
// ---------------------------------------------------------------------------

fn query_time(modality: Modality, time_or_slot: u32) -> Result<(u32, TimeEnc)> {
    match modality {
        Modality::Cdr => {
            if !(1..=N_SLOTS as u32).contains(&time_or_slot) {
                return Err(Error::data(format!("slot {time_or_slot} outside 1..=34")));
            }
            let ts = slot_start_s(time_or_slot as u8);
            Ok((ts, TimeEnc::Slot(time_or_slot as u8)))
        }
        Modality::Gps => {
            if time_or_slot >= crate::data::DAY_SECONDS {
                return Err(Error::data(format!("timestamp {time_or_slot} outside [0, 86400)")));
            }
            let (sin, cos) = time_base_pair(time_or_slot);
            Ok((time_or_slot, TimeEnc::Norm { sin, cos }))
        }
    }
}

/// Ranked predictions from the trained model for every hidden visit in the
/// answer key.
pub fn transformer_predictions(
    params: &ModelParams,
    dataset: &Dataset,
    key: &[AnswerDay],
    mask_mode: MaskMode,
    ablate: AblationSet,
    ranked_len: usize,
) -> Result<Vec<PredictionRecord>> {
    let tables = RunTables::build(&dataset.vocab, params);
    let env = ForwardEnv::new(params, &tables, dataset, ablate, mask_mode);
    let traj_of: HashMap<(&str, CivilDate), usize> = dataset
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| ((t.user_id.as_str(), t.date), i))
        .collect();
    let modality = dataset.vocab.modality();

    let per_day: Result<Vec<Vec<PredictionRecord>>> = key
        .par_iter()
        .map(|day| {
            let &ti = traj_of
                .get(&(day.user.as_str(), day.date))
                .ok_or_else(|| Error::data(format!("no observed day for ({}, {})", day.user, day.date)))?;
            let traj = &dataset.trajectories[ti];
            let observed = usable_visits(traj, modality);
            // Sort key for insertion: the underlying timestamp.
            let observed_ts: Vec<u32> = traj_observed_timestamps(traj, modality);
            let queries: Vec<u32> = day.hidden.iter().map(|h| h.time_or_slot).collect();
            let ranked = predict_day_with_ts(
                &env,
                &observed,
                &observed_ts,
                traj,
                &queries,
                ranked_len,
            )?;
            Ok(day
                .hidden
                .iter()
                .zip(ranked)
                .map(|(h, ranked)| PredictionRecord {
                    user: day.user.clone(),
                    date: day.date,
                    time_or_slot: h.time_or_slot,
                    ranked,
                })
                .collect())
        })
        .collect();
    Ok(per_day?.into_iter().flatten().collect())
}

fn traj_observed_timestamps(traj: &crate::data::Trajectory, modality: Modality) -> Vec<u32> {
    let mut v: Vec<(u32, TokenId)> = traj
        .visits
        .iter()
        .filter(|v| modality == Modality::Gps || v.slot.is_some())
        .map(|v| (v.timestamp, v.token))
        .collect();
    v.sort_unstable();
    v.into_iter().map(|(ts, _)| ts).collect()
}

/// Ranked place ids for query times on one observed day. Each query is
/// answered independently: the observed visits plus a single masked query
/// position, which mirrors how training sequences look.
fn predict_day_with_ts(
    env: &ForwardEnv,
    observed: &[SeqVisit],
    observed_ts: &[u32],
    traj: &crate::data::Trajectory,
    queries: &[u32],
    ranked_len: usize,
) -> Result<Vec<Vec<String>>> {
    let dataset = env.dataset;
    let profile = dataset
        .profiles
        .get(&traj.user_id)
        .ok_or_else(|| Error::data(format!("no profile for `{}`", traj.user_id)))?;
    let modality = dataset.vocab.modality();
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        let (ts, time) = query_time(modality, q)?;
        let insert_at = observed_ts.iter().filter(|&&ots| ots < ts).count();
        let mut visits = observed.to_vec();
        visits.insert(insert_at, SeqVisit { token: TokenId(0), time });
        let seq = crate::embed::assemble_from_visits(
            &visits,
            traj.date,
            profile,
            env.params,
            env.tables,
            &dataset.vocab,
            &dataset.holidays,
            &dataset.age_buckets,
            env.ablate,
        )?;
        let pos = CONTEXT_LEN + insert_at;
        let plan = MaskPlan::at_positions(&seq, &[pos])?;
        let masked = apply_masks(&seq, &plan, env.mask_mode, env.params, env.tables)?;
        let (h, _) = crate::encoder::encoder_forward(
            &masked.x,
            &masked.pad,
            &env.params.layers,
            env.params.meta.heads,
            None,
        )?;
        let probs = predict_masked(&h, &env.params.head_w, &env.params.head_b, &plan);
        let ranked = ranked_indices(&probs[0], ranked_len)
            .into_iter()
            .map(|i| dataset.vocab.place_of(TokenId(i as u32)).expect("place").to_string())
            .collect();
        out.push(ranked);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Baseline predictions
// ---------------------------------------------------------------------------

fn neighbors_at(
    observed: &[(TokenId, u32)],
    ts: u32,
) -> (Option<TokenId>, Option<TokenId>) {
    let prev = observed.iter().rev().find(|&&(_, ots)| ots < ts).map(|&(t, _)| t);
    let next = observed.iter().find(|&&(_, ots)| ots > ts).map(|&(t, _)| t);
    (prev, next)
}

/// Ranked predictions from a fitted Markov model for every hidden visit.
pub fn markov_predictions(
    model: &MarkovModel,
    dataset: &Dataset,
    key: &[AnswerDay],
    ranked_len: usize,
) -> Result<Vec<PredictionRecord>> {
    baseline_predictions(dataset, key, ranked_len, |observed, ts, _day_type| {
        let (prev, next) = neighbors_at(observed, ts);
        crate::baselines::markov_predict(model, prev, next)
            .into_iter()
            .map(|(t, _)| t)
            .collect()
    })
}

/// Ranked predictions from a fitted KNN model for every hidden visit.
pub fn knn_predictions(
    model: &KnnModel,
    dataset: &Dataset,
    key: &[AnswerDay],
    ranked_len: usize,
) -> Result<Vec<PredictionRecord>> {
    baseline_predictions(dataset, key, ranked_len, |observed, ts, day_type| {
        let (prev, next) = neighbors_at(observed, ts);
        let q = gap_features(prev, next, ts, day_type);
        model.ranked_filled(&q, ranked_len)
    })
}

fn baseline_predictions(
    dataset: &Dataset,
    key: &[AnswerDay],
    ranked_len: usize,
    rank: impl Fn(&[(TokenId, u32)], u32, crate::data::DayType) -> Vec<TokenId> + Sync,
) -> Result<Vec<PredictionRecord>> {
    let traj_of: HashMap<(&str, CivilDate), usize> = dataset
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| ((t.user_id.as_str(), t.date), i))
        .collect();
    let modality = dataset.vocab.modality();
    let per_day: Result<Vec<Vec<PredictionRecord>>> = key
        .par_iter()
        .map(|day| {
            let &ti = traj_of
                .get(&(day.user.as_str(), day.date))
                .ok_or_else(|| Error::data(format!("no observed day for ({}, {})", day.user, day.date)))?;
            let traj = &dataset.trajectories[ti];
            let observed = crate::baselines::observed_ordered(traj, modality);
            let day_type = dataset.holidays.day_type(day.date);
            day.hidden
                .iter()
                .map(|h| {
                    let (ts, _) = query_time(modality, h.time_or_slot)?;
                    let ranked: Vec<String> = rank(&observed, ts, day_type)
                        .into_iter()
                        .take(ranked_len)
                        .map(|t| dataset.vocab.place_of(t).expect("place").to_string())
                        .collect();
                    Ok(PredictionRecord {
                        user: day.user.clone(),
                        date: day.date,
                        time_or_slot: h.time_or_slot,
                        ranked,
                    })
                })
                .collect()
        })
        .collect();
    Ok(per_day?.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryError {
    pub time_or_slot: u32,
    pub reason: String,
}

#[derive(Debug)]
pub struct ReconstructedDay {
    /// Observed visits pass through (observed = true); filled gaps carry the
    /// rank-1 prediction with observed = false.
    pub trajectory: crate::data::Trajectory,
    /// Top-5 alternatives for every filled gap.
    pub alternatives: Vec<PredictionRecord>,
    pub errors: Vec<QueryError>,
}

/// Complete one observed day at the requested query times. Queries at
/// already-observed times pass the observed visit through; invalid queries
/// produce per-query error entries while the rest are still answered.
pub fn reconstruct(
    params: &ModelParams,
    dataset: &Dataset,
    traj: &crate::data::Trajectory,
    queries: &[u32],
    mask_mode: MaskMode,
    ranked_len: usize,
) -> Result<ReconstructedDay> {
    let tables = RunTables::build(&dataset.vocab, params);
    let env = ForwardEnv::new(params, &tables, dataset, AblationSet::default(), mask_mode);
    let modality = dataset.vocab.modality();
    let observed = usable_visits(traj, modality);
    let observed_ts = traj_observed_timestamps(traj, modality);

    let mut errors = Vec::new();
    let mut to_predict = Vec::new();
    for &q in queries {
        match query_time(modality, q) {
            Err(e) => errors.push(QueryError { time_or_slot: q, reason: e.to_string() }),
            Ok((ts, _)) => {
                let already = match modality {
                    Modality::Cdr => traj
                        .visits
                        .iter()
                        .any(|v| v.observed && v.slot == Some(q as u8)),
                    Modality::Gps => observed_ts.contains(&ts),
                };
                if !already && !to_predict.contains(&q) {
                    to_predict.push(q);
                }
            }
        }
    }

    let ranked_lists = predict_day_with_ts(
        &env,
        &observed,
        &observed_ts,
        traj,
        &to_predict,
        ranked_len.max(5),
    )?;

    let mut visits = traj.visits.clone();
    let mut alternatives = Vec::new();
    for (&q, ranked) in to_predict.iter().zip(ranked_lists) {
        let (ts, _) = query_time(modality, q)?;
        let token = dataset.vocab.token_of(&ranked[0]).expect("ranked place");
        visits.push(crate::data::Visit::new(token, ts, false));
        alternatives.push(PredictionRecord {
            user: traj.user_id.clone(),
            date: traj.date,
            time_or_slot: q,
            ranked: ranked.into_iter().take(5).collect(),
        });
    }
    visits.sort_by_key(|v| (v.timestamp, v.token));
    Ok(ReconstructedDay {
        trajectory: crate::data::Trajectory {
            user_id: traj.user_id.clone(),
            date: traj.date,
            visits,
        },
        alternatives,
        errors,
    })
}
