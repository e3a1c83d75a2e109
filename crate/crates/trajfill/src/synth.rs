//! Synthetic mobility worlds with known ground truth.
//!
//! Users follow archetype routines (home -> work -> leisure -> home on
//! weekdays, leisure-heavy weekends) over a zoned city: residential places in
//! the west, workplaces in the center, and one leisure band per archetype in
//! the east. Age buckets determine the archetype, so demographics genuinely
//! predict where a user's free time happens, and day type reshapes the whole
//! routine; both signals exist by construction and are measurable via
//! [`context_signal_tv`].
//!
//! Sparsification then hides visits the way the two data sources would: CDR
//! days keep the slots a Poisson communication process happens to touch, GPS
//! days lose alternating exponential dropout intervals. Every hidden visit
//! lands in the answer key, so observed + hidden always reproduces the truth
//! exactly.

use std::collections::BTreeMap;

use crate::config::{ArchetypeConfig, RunConfig, SparsifyConfig, SparsifyMode};
use crate::data::{
    AnswerDay, ContextProfile, Dataset, Gender, HiddenVisit, HolidayCalendar, Trajectory, Visit,
};
use crate::date::CivilDate;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::rng::{mix, mix3, Rng};
use crate::vocab::{LocationVocab, Modality, TokenId};

const USER_SALT: u64 = 0x5553_4552;
const DAY_SALT: u64 = 0x4441_5953;
const TOWER_SALT: u64 = 0x544f_5752;

/// Zone fractions along the bbox west-east axis.
const RESIDENTIAL_X: f64 = 0.40;
const WORK_X: f64 = 0.65;

#[derive(Debug, Clone)]
pub struct WorldZones {
    pub residential: Vec<TokenId>,
    pub work: Vec<TokenId>,
    /// One leisure set per archetype.
    pub leisure: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    /// Full ground truth: every visit, flagged observed.
    pub truth: Dataset,
    pub archetype_of: BTreeMap<String, String>,
    pub zones: WorldZones,
}

fn zone_of(x_frac: f64, y_frac: f64, n_archetypes: usize) -> (usize, usize) {
    // (kind, band): kind 0 residential, 1 work, 2 leisure.
    if x_frac < RESIDENTIAL_X {
        (0, 0)
    } else if x_frac < WORK_X {
        (1, 0)
    } else {
        let band = ((y_frac * n_archetypes as f64) as usize).min(n_archetypes - 1);
        (2, band)
    }
}

fn build_vocab_and_zones(cfg: &RunConfig, seed: u64) -> Result<(LocationVocab, WorldZones)> {
    let w = &cfg.world;
    let n_arch = w.archetypes.len();
    let sw = GeoPoint { lat: w.bbox.lat_min, lon: w.bbox.lon_min };
    let ne = GeoPoint { lat: w.bbox.lat_max, lon: w.bbox.lon_max };
    let vocab = match w.modality {
        Modality::Gps => LocationVocab::build_grid_vocab(sw, ne, w.cell_size_m)?,
        Modality::Cdr => {
            // Deterministic tower placement, allocated round-robin over the
            // zone kinds so every zone is populated.
            let mut rng = Rng::seeded(mix(seed, TOWER_SALT));
            let mut towers = Vec::with_capacity(w.n_towers);
            for i in 0..w.n_towers {
                let r = i % 10;
                let (x_lo, x_hi, band) = if r < 4 {
                    (0.02, RESIDENTIAL_X - 0.02, 0)
                } else if r < 7 {
                    (RESIDENTIAL_X + 0.02, WORK_X - 0.02, 0)
                } else {
                    (WORK_X + 0.02, 0.98, i % n_arch)
                };
                let x_frac = rng.uniform(x_lo, x_hi);
                let y_frac = if r >= 7 {
                    (band as f64 + rng.uniform(0.08, 0.92)) / n_arch as f64
                } else {
                    rng.uniform(0.02, 0.98)
                };
                towers.push((
                    format!("tw_{i:03}"),
                    GeoPoint {
                        lat: w.bbox.lat_min + y_frac * (w.bbox.lat_max - w.bbox.lat_min),
                        lon: w.bbox.lon_min + x_frac * (w.bbox.lon_max - w.bbox.lon_min),
                    },
                ));
            }
            LocationVocab::build_tower_vocab(towers)?
        }
    };

    let mut zones = WorldZones {
        residential: Vec::new(),
        work: Vec::new(),
        leisure: vec![Vec::new(); n_arch],
    };
    for e in vocab.entries() {
        let x_frac = (e.centroid.lon - w.bbox.lon_min) / (w.bbox.lon_max - w.bbox.lon_min);
        let y_frac = (e.centroid.lat - w.bbox.lat_min) / (w.bbox.lat_max - w.bbox.lat_min);
        match zone_of(x_frac, y_frac, n_arch) {
            (0, _) => zones.residential.push(e.token),
            (1, _) => zones.work.push(e.token),
            (2, band) => zones.leisure[band].push(e.token),
            _ => unreachable!(),
        }
    }
    if zones.residential.is_empty() {
        return Err(Error::config("world: residential zone has no locations"));
    }
    if zones.work.is_empty() && w.archetypes.iter().any(|a| a.employed) {
        return Err(Error::config(
            "world: work zone has no locations but archetypes are employed",
        ));
    }
    for (i, a) in w.archetypes.iter().enumerate() {
        let needs_leisure = a.evening_leisure_prob > 0.0
            || a.weekend_outings_mean > 0.0
            || a.weekday_outings_mean > 0.0;
        if needs_leisure && zones.leisure[i].len() < a.leisure_pool_size {
            return Err(Error::config(format!(
                "world.archetypes[{i}] (`{}`): leisure zone has {} locations, pool needs {}",
                a.name,
                zones.leisure[i].len(),
                a.leisure_pool_size
            )));
        }
    }
    Ok((vocab, zones))
}

struct UserSpec {
    id: String,
    profile: ContextProfile,
    archetype: usize,
    home: TokenId,
    work: Option<TokenId>,
    leisure_pool: Vec<TokenId>,
}

fn make_user(u: usize, cfg: &RunConfig, zones: &WorldZones, seed: u64) -> UserSpec {
    let mut rng = Rng::seeded(mix3(seed, USER_SALT, u as u64));
    let w = &cfg.world;
    let weights: Vec<f64> = w.archetypes.iter().map(|a| a.weight).collect();
    let archetype = rng.choose_weighted(&weights);
    let a = &w.archetypes[archetype];
    let age_bucket = a.age_buckets[rng.below(a.age_buckets.len())].clone();
    let gender = if rng.chance(0.5) { Gender::Female } else { Gender::Male };
    let home = zones.residential[rng.below(zones.residential.len())];
    let work = if a.employed { Some(zones.work[rng.below(zones.work.len())]) } else { None };
    // Gender picks a sub-pool of the archetype's leisure band (alternating
    // cells), so demographics predict leisure destinations, not just
    // schedules. Falls back to the whole band when it is too small to split.
    let band = &zones.leisure[archetype];
    let gender_half: Vec<TokenId> = band
        .iter()
        .enumerate()
        .filter(|(i, _)| (i % 2 == 0) == (gender == Gender::Female))
        .map(|(_, t)| *t)
        .collect();
    let pool_from: &[TokenId] =
        if gender_half.len() >= a.leisure_pool_size { &gender_half } else { band };
    let pool_size = a.leisure_pool_size.min(pool_from.len());
    let leisure_pool: Vec<TokenId> =
        rng.sample_indices(pool_from.len(), pool_size).into_iter().map(|i| pool_from[i]).collect();
    let secondary = work.or_else(|| leisure_pool.first().copied()).unwrap_or(home);
    UserSpec {
        id: format!("u{u:04}"),
        profile: ContextProfile {
            age_bucket,
            gender,
            primary_anchor: home,
            secondary_anchor: secondary,
        },
        archetype,
        home,
        work,
        leisure_pool,
    }
}

/// Piecewise-constant day: (start_minute, token) segments covering [0, 1440).
fn day_segments(
    user: &UserSpec,
    arch: &ArchetypeConfig,
    is_workday: bool,
    rng: &mut Rng,
) -> Vec<(u32, TokenId)> {
    let mut segs: Vec<(u32, TokenId)> = vec![(0, user.home)];
    fn push(segs: &mut Vec<(u32, TokenId)>, start: u32, token: TokenId) {
        if segs.last().map(|&(_, t)| t) != Some(token) {
            segs.push((start, token));
        }
    }
    let jitter = |rng: &mut Rng, mean: u32, j: u32| -> u32 {
        let lo = mean.saturating_sub(j) as f64;
        let hi = (mean + j) as f64;
        rng.uniform(lo, hi) as u32
    };
    // Short-circuit order matters: it fixes the rng draw sequence per day.
    if is_workday && user.work.is_some() && rng.chance(arch.attend_work_prob) {
        let work = user.work.expect("checked");
        let depart = jitter(rng, arch.work_start_min, arch.start_jitter_min).clamp(370, 700);
        let ret = jitter(rng, arch.work_end_min, arch.start_jitter_min).clamp(depart + 60, 1140);
        push(&mut segs, depart, work);
        if !user.leisure_pool.is_empty() && rng.chance(arch.evening_leisure_prob) {
            let cell = user.leisure_pool[rng.below(user.leisure_pool.len())];
            let dur = rng.uniform(60.0, 150.0) as u32;
            push(&mut segs, ret, cell);
            push(&mut segs, (ret + dur).min(1320), user.home);
        } else {
            push(&mut segs, ret, user.home);
        }
    } else {
        // Free day: a few daytime outings into the personal leisure pool.
        let mean = if is_workday { arch.weekday_outings_mean } else { arch.weekend_outings_mean };
        let mut n_out = mean.floor() as usize;
        if rng.chance(mean - mean.floor()) {
            n_out += 1;
        }
        n_out = n_out.min(3);
        let mut cursor = 540u32; // outings start after 09:00
        for _ in 0..n_out {
            if user.leisure_pool.is_empty() {
                break;
            }
            let start = cursor.max(rng.uniform(540.0, 1140.0) as u32);
            let dur = rng.uniform(60.0, 180.0) as u32;
            if start + 30 > 1260 {
                break;
            }
            let end = (start + dur).min(1260);
            let cell = user.leisure_pool[rng.below(user.leisure_pool.len())];
            push(&mut segs, start, cell);
            push(&mut segs, end, user.home);
            cursor = end + 20;
        }
    }
    segs
}

/// Token active at a given minute.
fn token_at(segs: &[(u32, TokenId)], minute: u32) -> TokenId {
    let mut current = segs[0].1;
    for &(start, token) in segs {
        if start <= minute {
            current = token;
        } else {
            break;
        }
    }
    current
}

/// Majority-occupancy token of a half-open minute interval; ties go to the
/// earliest occupant.
fn majority_token(segs: &[(u32, TokenId)], lo: u32, hi: u32) -> TokenId {
    let mut occupancy: Vec<(TokenId, u32, u32)> = Vec::new(); // token, minutes, first seen
    let mut m = lo;
    while m < hi {
        let token = token_at(segs, m);
        let next_boundary = segs
            .iter()
            .map(|&(s, _)| s)
            .filter(|&s| s > m)
            .min()
            .unwrap_or(hi)
            .min(hi);
        let span = next_boundary - m;
        match occupancy.iter_mut().find(|(t, _, _)| *t == token) {
            Some((_, mins, _)) => *mins += span,
            None => occupancy.push((token, span, m)),
        }
        m = next_boundary;
    }
    occupancy
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .expect("non-empty interval")
        .0
}

/// Ground-truth visits for one day: per half-hour slot for CDR (06:00-23:00,
/// majority occupancy), a 10-minute lattice over the full day for GPS.
fn day_truth(segs: &[(u32, TokenId)], modality: Modality) -> Vec<Visit> {
    match modality {
        Modality::Cdr => (1..=crate::data::N_SLOTS)
            .map(|slot| {
                let start_min = 360 + (slot as u32 - 1) * 30;
                let token = majority_token(segs, start_min, start_min + 30);
                Visit::new(token, start_min * 60, true)
            })
            .collect(),
        Modality::Gps => (0..144u32)
            .map(|i| {
                let minute = i * 10;
                Visit::new(token_at(segs, minute), minute * 60, true)
            })
            .collect(),
    }
}

/// Generate the world: profiles plus per-day ground-truth trajectories,
/// deterministic in the world seed.
pub fn generate_world(cfg: &RunConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let seed = cfg.world_seed();
    let (vocab, zones) = build_vocab_and_zones(cfg, seed)?;
    let start: CivilDate = cfg.world.start_date.parse()?;
    let holidays = HolidayCalendar::new(
        cfg.world
            .holidays
            .iter()
            .map(|h| h.parse::<CivilDate>())
            .collect::<Result<Vec<_>>>()?,
    );

    let mut profiles = BTreeMap::new();
    let mut archetype_of = BTreeMap::new();
    let mut trajectories = Vec::new();
    for u in 0..cfg.world.population as usize {
        let user = make_user(u, cfg, &zones, seed);
        profiles.insert(user.id.clone(), user.profile.clone());
        archetype_of.insert(user.id.clone(), cfg.world.archetypes[user.archetype].name.clone());
        let mut date = start;
        for day_index in 0..cfg.world.days {
            let mut rng =
                Rng::seeded(mix3(mix3(seed, USER_SALT, u as u64), DAY_SALT, day_index as u64));
            let is_workday = holidays.day_type(date) == crate::data::DayType::Weekday;
            let segs =
                day_segments(&user, &cfg.world.archetypes[user.archetype], is_workday, &mut rng);
            let visits = day_truth(&segs, cfg.world.modality);
            trajectories.push(Trajectory { user_id: user.id.clone(), date, visits });
            date = date.succ();
        }
    }

    let truth = Dataset {
        vocab,
        holidays,
        age_buckets: cfg.embedding.age_buckets.clone(),
        profiles,
        trajectories,
    };
    truth.validate(crate::data::LoadLimits::default())?;
    Ok(SynthWorld { truth, archetype_of, zones })
}

// ---------------------------------------------------------------------------
// Sparsification
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SparsifyOutcome {
    /// The observation dataset: only observed visits survive.
    pub observed: Dataset,
    pub answer_key: Vec<AnswerDay>,
    /// Days that lost every observation twice and were dropped.
    pub dropped_days: usize,
    /// Mean distinct observed hourly bins per kept user-day.
    pub mean_hourly_slots: f64,
}

/// Observation flags for one day; None means the day stays unobserved after
/// one resample.
fn observe_day_cdr(n_visits: usize, rate_per_hour: f64, rng: &mut Rng) -> Option<Vec<bool>> {
    // Communication events as a Poisson process over the 17-hour window; the
    // visit whose slot contains an event becomes observed.
    for _attempt in 0..2 {
        let mut keep = vec![false; n_visits];
        let mut t_hours = 0.0f64;
        loop {
            t_hours += rng.exponential(1.0 / rate_per_hour);
            if t_hours >= 17.0 {
                break;
            }
            let slot = (t_hours * 2.0) as usize; // half-hour slots from the window start
            if slot < n_visits {
                keep[slot] = true;
            }
        }
        if keep.iter().any(|&k| k) {
            return Some(keep);
        }
    }
    None
}

fn observe_day_gps(
    visits: &[Visit],
    observed_mean_s: f64,
    missing_mean_s: f64,
    rng: &mut Rng,
) -> Option<Vec<bool>> {
    if missing_mean_s <= 0.0 {
        return Some(vec![true; visits.len()]);
    }
    for _attempt in 0..2 {
        let mut keep = vec![false; visits.len()];
        let p_observed = observed_mean_s / (observed_mean_s + missing_mean_s);
        let mut observed_state = rng.chance(p_observed);
        let mut boundary =
            rng.exponential(if observed_state { observed_mean_s } else { missing_mean_s });
        let mut t = 0.0f64;
        for (i, v) in visits.iter().enumerate() {
            let ts = v.timestamp as f64;
            while t + boundary <= ts {
                t += boundary;
                observed_state = !observed_state;
                boundary =
                    rng.exponential(if observed_state { observed_mean_s } else { missing_mean_s });
            }
            boundary -= ts - t;
            t = ts;
            keep[i] = observed_state;
        }
        if keep.iter().any(|&k| k) {
            return Some(keep);
        }
    }
    None
}

/// Split ground truth into an observed dataset and the hidden-visit answer
/// key. Observed and hidden visits partition the truth exactly; a day that
/// loses every observation is resampled once, then dropped (and counted).
pub fn sparsify(world: &SynthWorld, cfg: &SparsifyConfig, seed: u64) -> Result<SparsifyOutcome> {
    let truth = &world.truth;
    let modality = truth.vocab.modality();
    match (cfg.mode, modality) {
        (SparsifyMode::CdrEvent, Modality::Cdr) | (SparsifyMode::GpsDropout, Modality::Gps) => {}
        _ => {
            return Err(Error::config(format!(
                "sparsify.mode {:?} does not match the world modality {:?}",
                cfg.mode, modality
            )))
        }
    }
    let rate_per_hour = -(1.0 - cfg.cdr_mean_hourly_slots / 17.0).ln();

    let mut observed_traj = Vec::new();
    let mut answer_key = Vec::new();
    let mut dropped = 0usize;
    let mut hourly_sum = 0usize;
    let mut kept_days = 0usize;
    for (day_index, traj) in truth.trajectories.iter().enumerate() {
        let mut rng = Rng::seeded(mix3(seed, DAY_SALT, day_index as u64));
        let keep = match cfg.mode {
            SparsifyMode::CdrEvent => observe_day_cdr(traj.visits.len(), rate_per_hour, &mut rng),
            SparsifyMode::GpsDropout => observe_day_gps(
                &traj.visits,
                cfg.gps_observed_mean_s,
                cfg.gps_missing_mean_s,
                &mut rng,
            ),
        };
        let Some(keep) = keep else {
            dropped += 1;
            continue;
        };
        let mut observed = Vec::new();
        let mut hidden = Vec::new();
        let mut hours = std::collections::BTreeSet::new();
        for (v, &k) in traj.visits.iter().zip(&keep) {
            if k {
                hours.insert(v.timestamp / 3600);
                observed.push(*v);
            } else {
                hidden.push(HiddenVisit {
                    place_id: truth
                        .vocab
                        .place_of(v.token)
                        .expect("truth tokens are places")
                        .to_string(),
                    time_or_slot: match modality {
                        Modality::Cdr => v.slot.expect("cdr truth is slotted") as u32,
                        Modality::Gps => v.timestamp,
                    },
                });
            }
        }
        hourly_sum += hours.len();
        kept_days += 1;
        observed_traj.push(Trajectory {
            user_id: traj.user_id.clone(),
            date: traj.date,
            visits: observed,
        });
        if !hidden.is_empty() {
            answer_key.push(AnswerDay {
                user: traj.user_id.clone(),
                date: traj.date,
                archetype: world.archetype_of.get(&traj.user_id).cloned(),
                hidden,
            });
        }
    }
    if dropped > 0 {
        eprintln!("sparsify: dropped {dropped} day(s) that lost every observation");
    }
    let observed = Dataset {
        vocab: truth.vocab.clone(),
        holidays: truth.holidays.clone(),
        age_buckets: truth.age_buckets.clone(),
        profiles: truth.profiles.clone(),
        trajectories: observed_traj,
    };
    Ok(SparsifyOutcome {
        observed,
        answer_key,
        dropped_days: dropped,
        mean_hourly_slots: hourly_sum as f64 / kept_days.max(1) as f64,
    })
}

/// Total-variation distance between weekday and weekend/holiday token
/// distributions, per archetype, over the ground truth. This is the signal
/// the date-ablation checks rely on.
pub fn context_signal_tv(world: &SynthWorld) -> BTreeMap<String, f64> {
    let truth = &world.truth;
    let n = truth.vocab.n_places();
    let mut counts: BTreeMap<(String, bool), Vec<f64>> = BTreeMap::new();
    for traj in &truth.trajectories {
        let arch = match world.archetype_of.get(&traj.user_id) {
            Some(a) => a.clone(),
            None => continue,
        };
        let weekday = truth.holidays.day_type(traj.date) == crate::data::DayType::Weekday;
        let entry = counts.entry((arch, weekday)).or_insert_with(|| vec![0.0; n]);
        for v in &traj.visits {
            entry[v.token.index()] += 1.0;
        }
    }
    let normalize = |v: &Vec<f64>| -> Vec<f64> {
        let total: f64 = v.iter().sum();
        v.iter().map(|x| if total > 0.0 { x / total } else { 0.0 }).collect()
    };
    let mut out = BTreeMap::new();
    let names: Vec<String> = counts.keys().map(|(a, _)| a.clone()).collect();
    for name in names {
        if let (Some(wd), Some(we)) =
            (counts.get(&(name.clone(), true)), counts.get(&(name.clone(), false)))
        {
            let (p, q) = (normalize(wd), normalize(we));
            let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            out.insert(name, tv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(users: i64, days: u32) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.world.population = users;
        cfg.world.days = days;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn world_is_deterministic_in_its_seed() {
        let cfg = small_cfg(6, 4);
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.truth.trajectories, b.truth.trajectories);
        assert_eq!(a.archetype_of, b.archetype_of);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 12;
        let c = generate_world(&cfg2).unwrap();
        assert_ne!(a.truth.trajectories, c.truth.trajectories);
    }

    #[test]
    fn primary_anchor_appears_every_day() {
        let world = generate_world(&small_cfg(8, 6)).unwrap();
        for traj in &world.truth.trajectories {
            let home = world.truth.profiles[&traj.user_id].primary_anchor;
            assert!(
                traj.visits.iter().any(|v| v.token == home),
                "user {} date {} is missing its home anchor",
                traj.user_id,
                traj.date
            );
        }
    }

    #[test]
    fn cdr_truth_is_slotted_and_gps_truth_is_a_lattice() {
        let world = generate_world(&small_cfg(3, 2)).unwrap();
        for traj in &world.truth.trajectories {
            assert_eq!(traj.visits.len(), 34);
            for (i, v) in traj.visits.iter().enumerate() {
                assert_eq!(v.slot, Some(i as u8 + 1));
            }
        }
        let mut cfg = small_cfg(3, 2);
        cfg.world.modality = Modality::Gps;
        cfg.sparsify.mode = SparsifyMode::GpsDropout;
        // Small grid so the test stays fast.
        cfg.world.bbox.lat_max = cfg.world.bbox.lat_min + 0.018;
        cfg.world.bbox.lon_max = cfg.world.bbox.lon_min + 0.018;
        cfg.world.cell_size_m = 250.0;
        let world = generate_world(&cfg).unwrap();
        for traj in &world.truth.trajectories {
            assert_eq!(traj.visits.len(), 144);
        }
    }

    #[test]
    fn observed_and_hidden_partition_the_truth() {
        let cfg = small_cfg(10, 8);
        let world = generate_world(&cfg).unwrap();
        let out = sparsify(&world, &cfg.sparsify, 99).unwrap();
        assert_eq!(out.dropped_days, 0);
        let key: BTreeMap<(String, String), &AnswerDay> = out
            .answer_key
            .iter()
            .map(|a| ((a.user.clone(), a.date.to_string()), a))
            .collect();
        for (truth_traj, obs_traj) in
            world.truth.trajectories.iter().zip(&out.observed.trajectories)
        {
            assert_eq!(truth_traj.user_id, obs_traj.user_id);
            let hidden = key
                .get(&(truth_traj.user_id.clone(), truth_traj.date.to_string()))
                .map(|a| a.hidden.clone())
                .unwrap_or_default();
            assert_eq!(obs_traj.visits.len() + hidden.len(), truth_traj.visits.len());
            // Rebuild the truth from the two halves.
            let mut rebuilt: Vec<(u32, String)> = obs_traj
                .visits
                .iter()
                .map(|v| {
                    (
                        v.slot.unwrap() as u32,
                        world.truth.vocab.place_of(v.token).unwrap().to_string(),
                    )
                })
                .chain(hidden.iter().map(|h| (h.time_or_slot, h.place_id.clone())))
                .collect();
            rebuilt.sort();
            let want: Vec<(u32, String)> = truth_traj
                .visits
                .iter()
                .map(|v| {
                    (
                        v.slot.unwrap() as u32,
                        world.truth.vocab.place_of(v.token).unwrap().to_string(),
                    )
                })
                .collect();
            assert_eq!(rebuilt, want);
        }
    }

    #[test]
    fn weekday_truth_contains_the_work_anchor_at_the_configured_rate() {
        let mut cfg = small_cfg(60, 30);
        cfg.seed = 5;
        let world = generate_world(&cfg).unwrap();
        let employed: Vec<&str> = world
            .archetype_of
            .iter()
            .filter(|(_, a)| *a != "retiree")
            .map(|(u, _)| u.as_str())
            .collect();
        let mut days = 0usize;
        let mut with_work = 0usize;
        for traj in &world.truth.trajectories {
            if !employed.contains(&traj.user_id.as_str()) {
                continue;
            }
            if world.truth.holidays.day_type(traj.date) != crate::data::DayType::Weekday {
                continue;
            }
            days += 1;
            let work = world.truth.profiles[&traj.user_id].secondary_anchor;
            if traj.visits.iter().any(|v| v.token == work) {
                with_work += 1;
            }
        }
        let rate = with_work as f64 / days as f64;
        assert!(days > 500);
        assert!((rate - 0.95).abs() < 0.03, "work attendance {rate}");
        assert!(rate >= 0.90);
    }

    #[test]
    fn weekday_weekend_context_signal_is_strong() {
        let world = generate_world(&small_cfg(40, 28)).unwrap();
        let tv = context_signal_tv(&world);
        assert_eq!(tv.len(), 3);
        for (arch, d) in &tv {
            assert!(*d > 0.1, "archetype {arch} has weak signal (tv {d})");
        }
    }

    #[test]
    fn default_cdr_calibration_hits_five_hourly_slots() {
        let cfg = small_cfg(40, 30); // 1200 user-days
        let world = generate_world(&cfg).unwrap();
        let out = sparsify(&world, &cfg.sparsify, 7).unwrap();
        assert!(
            (out.mean_hourly_slots - 5.0).abs() < 0.2,
            "mean hourly slots {}",
            out.mean_hourly_slots
        );
    }

    #[test]
    fn no_dropout_reproduces_the_truth_with_an_empty_key() {
        let mut cfg = small_cfg(4, 3);
        cfg.world.modality = Modality::Gps;
        cfg.world.bbox.lat_max = cfg.world.bbox.lat_min + 0.018;
        cfg.world.bbox.lon_max = cfg.world.bbox.lon_min + 0.018;
        cfg.world.cell_size_m = 250.0;
        cfg.sparsify.mode = SparsifyMode::GpsDropout;
        cfg.sparsify.gps_missing_mean_s = 0.0;
        let world = generate_world(&cfg).unwrap();
        let out = sparsify(&world, &cfg.sparsify, 3).unwrap();
        assert!(out.answer_key.is_empty());
        assert_eq!(out.observed.trajectories, world.truth.trajectories);
    }

    #[test]
    fn starving_the_observation_process_drops_days() {
        let mut cfg = small_cfg(20, 10);
        cfg.sparsify.cdr_mean_hourly_slots = 0.05;
        let world = generate_world(&cfg).unwrap();
        let out = sparsify(&world, &cfg.sparsify, 1).unwrap();
        assert!(out.dropped_days > 0);
        assert!(out.observed.trajectories.iter().all(|t| !t.visits.is_empty()));
    }

    #[test]
    fn infeasible_leisure_pool_is_rejected() {
        let mut cfg = small_cfg(4, 2);
        cfg.world.archetypes[0].leisure_pool_size = 500;
        let err = generate_world(&cfg).unwrap_err().to_string();
        assert!(err.contains("leisure"), "{err}");
    }

    #[test]
    fn mismatched_sparsify_mode_is_rejected() {
        let cfg = small_cfg(3, 2);
        let world = generate_world(&cfg).unwrap();
        let mut sp = cfg.sparsify.clone();
        sp.mode = SparsifyMode::GpsDropout;
        assert!(sparsify(&world, &sp, 1).is_err());
    }
}
