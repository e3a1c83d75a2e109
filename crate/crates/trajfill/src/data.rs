//! Domain data model and dataset I/O.
//!
//! A dataset is a JSON-lines file: line 1 is a header object carrying the
//! modality, the location vocabulary, the holiday list, and the per-user
//! context profiles; every following line is one user-day trajectory. All
//! validation failures during load name the first offending line.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::date::CivilDate;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::vocab::{GridSpec, LocationVocab, Modality, TokenId};

pub const DAY_SECONDS: u32 = 86_400;
/// CDR observation window: 06:00 inclusive to 23:00 exclusive.
pub const WINDOW_START_S: u32 = 6 * 3600;
pub const WINDOW_END_S: u32 = 23 * 3600;
pub const SLOT_SECONDS: u32 = 1800;
pub const N_SLOTS: u8 = 34;

/// Half-hour slot containing `ts`, or `None` when the timestamp falls outside
/// the 06:00-23:00 window. Slots are half-open [start, start+30min), numbered
/// 1..=34, so 06:00:00 is slot 1 and 23:00:00 exactly is out-of-window.
pub fn slot_of(ts: u32) -> Option<u8> {
    if !(WINDOW_START_S..WINDOW_END_S).contains(&ts) {
        return None;
    }
    Some(((ts - WINDOW_START_S) / SLOT_SECONDS) as u8 + 1)
}

/// Seconds since midnight at which `slot` (1..=34) begins.
pub fn slot_start_s(slot: u8) -> u32 {
    debug_assert!((1..=N_SLOTS).contains(&slot));
    WINDOW_START_S + (slot as u32 - 1) * SLOT_SECONDS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Other,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::Female => 0,
            Gender::Male => 1,
            Gender::Other => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayType {
    Weekday,
    Weekend,
    Holiday,
}

impl DayType {
    pub fn index(self) -> usize {
        match self {
            DayType::Weekday => 0,
            DayType::Weekend => 1,
            DayType::Holiday => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DayType::Weekday => "weekday",
            DayType::Weekend => "weekend",
            DayType::Holiday => "holiday",
        }
    }
}

/// Explicit holiday list; day type is a pure function of (date, this list).
#[derive(Debug, Clone, Default)]
pub struct HolidayCalendar {
    days: BTreeSet<CivilDate>,
}

impl HolidayCalendar {
    pub fn new(days: impl IntoIterator<Item = CivilDate>) -> Self {
        HolidayCalendar { days: days.into_iter().collect() }
    }

    pub fn day_type(&self, date: CivilDate) -> DayType {
        if self.days.contains(&date) {
            DayType::Holiday
        } else if date.is_weekend() {
            DayType::Weekend
        } else {
            DayType::Weekday
        }
    }

    pub fn days(&self) -> impl Iterator<Item = &CivilDate> {
        self.days.iter()
    }
}

/// One timestamped location observation. `observed = false` marks a hidden
/// visit and only appears in ground-truth files; sparse observation files
/// carry observed visits exclusively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub token: TokenId,
    /// Seconds since local midnight, in [0, 86400).
    pub timestamp: u32,
    /// Half-hour slot when inside the CDR window; None otherwise.
    pub slot: Option<u8>,
    pub observed: bool,
}

impl Visit {
    pub fn new(token: TokenId, timestamp: u32, observed: bool) -> Self {
        Visit { token, timestamp, slot: slot_of(timestamp), observed }
    }
}

/// One user-day: visits ordered by non-decreasing timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: String,
    pub date: CivilDate,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn observed_visits(&self) -> impl Iterator<Item = &Visit> {
        self.visits.iter().filter(|v| v.observed)
    }
}

/// Per-user background: demographics and anchor locations. Anchors must be
/// place tokens of the active vocabulary, never specials.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextProfile {
    pub age_bucket: String,
    pub gender: Gender,
    pub primary_anchor: TokenId,
    pub secondary_anchor: TokenId,
}

pub fn default_age_buckets() -> Vec<String> {
    ["<18", "18-29", "30-44", "45-59", "60+"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// User-level split: a pure function of the user id and the configured
/// fractions, so every command agrees on it without shared state. Users are
/// split (not days), which keeps held-out users' days entirely unseen. The
/// raw FNV hash avalanches poorly in its high bits for short ids, so it is
/// mixed once more before the fraction is taken.
pub fn user_split(user_id: &str, split_train: f64, split_val: f64) -> Split {
    let h = crate::rng::mix(crate::rng::fnv1a64(user_id.as_bytes()), 0x5350_4c49);
    let u = h as f64 / (u64::MAX as f64 + 1.0);
    if u < split_train {
        Split::Train
    } else if u < split_train + split_val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: LocationVocab,
    pub holidays: HolidayCalendar,
    pub age_buckets: Vec<String>,
    pub profiles: BTreeMap<String, ContextProfile>,
    pub trajectories: Vec<Trajectory>,
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabEntryJson {
    place_id: String,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileJson {
    age_bucket: String,
    gender: Gender,
    primary_anchor: String,
    secondary_anchor: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderJson {
    modality: Modality,
    vocab: Vec<VocabEntryJson>,
    holidays: Vec<CivilDate>,
    profiles: BTreeMap<String, ProfileJson>,
    #[serde(default = "default_age_buckets")]
    age_buckets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitJson {
    place_id: String,
    timestamp: u32,
    observed: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryJson {
    user_id: String,
    date: CivilDate,
    visits: Vec<VisitJson>,
}

/// Hard limits applied during load; violations are data errors.
#[derive(Debug, Clone, Copy)]
pub struct LoadLimits {
    pub max_visits_per_day: usize,
}

impl Default for LoadLimits {
    fn default() -> Self {
        LoadLimits { max_visits_per_day: 288 }
    }
}

impl Dataset {
    /// The vacuous dataset an empty file denotes.
    pub fn empty() -> Self {
        Dataset {
            vocab: LocationVocab::empty(),
            holidays: HolidayCalendar::default(),
            age_buckets: default_age_buckets(),
            profiles: BTreeMap::new(),
            trajectories: Vec::new(),
        }
    }

    pub fn validate(&self, limits: LoadLimits) -> Result<()> {
        for e in self.vocab.entries() {
            e.centroid.validate()?;
        }
        for (user, p) in &self.profiles {
            if !self.age_buckets.contains(&p.age_bucket) {
                return Err(Error::data(format!(
                    "profile `{user}`: unknown age bucket `{}`",
                    p.age_bucket
                )));
            }
            for (role, t) in [("primary", p.primary_anchor), ("secondary", p.secondary_anchor)] {
                if !self.vocab.is_place(t) {
                    return Err(Error::data(format!(
                        "profile `{user}`: {role} anchor {} is not a place token",
                        t.0
                    )));
                }
            }
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            validate_trajectory(traj, &self.vocab, &self.profiles, limits)
                .map_err(|e| Error::data(format!("trajectory {i} ({}): {e}", traj.user_id)))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate(LoadLimits::default())?;
        let file = fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let header = HeaderJson {
            modality: self.vocab.modality(),
            vocab: self
                .vocab
                .entries()
                .iter()
                .map(|e| VocabEntryJson {
                    place_id: e.place_id.clone(),
                    lat: e.centroid.lat,
                    lon: e.centroid.lon,
                })
                .collect(),
            holidays: self.holidays.days().copied().collect(),
            profiles: self
                .profiles
                .iter()
                .map(|(u, p)| {
                    (
                        u.clone(),
                        ProfileJson {
                            age_bucket: p.age_bucket.clone(),
                            gender: p.gender,
                            primary_anchor: self
                                .vocab
                                .place_of(p.primary_anchor)
                                .unwrap_or_default()
                                .to_string(),
                            secondary_anchor: self
                                .vocab
                                .place_of(p.secondary_anchor)
                                .unwrap_or_default()
                                .to_string(),
                        },
                    )
                })
                .collect(),
            age_buckets: self.age_buckets.clone(),
            grid: self.vocab.grid().copied(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for traj in &self.trajectories {
            let line = TrajectoryJson {
                user_id: traj.user_id.clone(),
                date: traj.date,
                visits: traj
                    .visits
                    .iter()
                    .map(|v| VisitJson {
                        place_id: self.vocab.place_of(v.token).unwrap_or_default().to_string(),
                        timestamp: v.timestamp,
                        observed: v.observed,
                    })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_limits(path, LoadLimits::default())
    }

    pub fn load_with_limits(path: &Path, limits: LoadLimits) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let header: HeaderJson = loop {
            match lines.next() {
                None => return Ok(Dataset::empty()),
                Some((_, Ok(l))) if l.trim().is_empty() => continue,
                Some((n, Ok(l))) => {
                    break serde_json::from_str(&l)
                        .map_err(|e| Error::data(format!("line {}: bad header: {e}", n + 1)))?
                }
                Some((n, Err(e))) => {
                    return Err(Error::data(format!("line {}: {e}", n + 1)));
                }
            }
        };

        let vocab = vocab_from_header(&header)?;
        let mut profiles = BTreeMap::new();
        for (user, p) in &header.profiles {
            let resolve = |place: &str, role: &str| {
                vocab.token_of(place).ok_or_else(|| {
                    Error::data(format!("profile `{user}`: unknown {role} anchor `{place}`"))
                })
            };
            profiles.insert(
                user.clone(),
                ContextProfile {
                    age_bucket: p.age_bucket.clone(),
                    gender: p.gender,
                    primary_anchor: resolve(&p.primary_anchor, "primary")?,
                    secondary_anchor: resolve(&p.secondary_anchor, "secondary")?,
                },
            );
        }

        let mut trajectories = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let tj: TrajectoryJson = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?;
            let mut visits = Vec::with_capacity(tj.visits.len());
            for v in &tj.visits {
                let token = vocab.token_of(&v.place_id).ok_or_else(|| {
                    Error::data(format!("line {}: unknown place_id `{}`", n + 1, v.place_id))
                })?;
                visits.push(Visit::new(token, v.timestamp, v.observed));
            }
            let traj = Trajectory { user_id: tj.user_id, date: tj.date, visits };
            validate_trajectory(&traj, &vocab, &profiles, limits)
                .map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?;
            trajectories.push(traj);
        }

        let dataset = Dataset {
            vocab,
            holidays: HolidayCalendar::new(header.holidays),
            age_buckets: header.age_buckets,
            profiles,
            trajectories,
        };
        dataset.validate(limits)?;
        Ok(dataset)
    }
}

fn vocab_from_header(header: &HeaderJson) -> Result<LocationVocab> {
    match (header.modality, &header.grid) {
        (Modality::Gps, Some(grid)) => {
            let sw = GeoPoint { lat: grid.lat_min, lon: grid.lon_min };
            let ne = GeoPoint { lat: grid.lat_max, lon: grid.lon_max };
            let vocab = LocationVocab::build_grid_vocab(sw, ne, grid.cell_size_m)?;
            if vocab.n_places() != header.vocab.len() {
                return Err(Error::data(format!(
                    "grid spec implies {} cells but header lists {}",
                    vocab.n_places(),
                    header.vocab.len()
                )));
            }
            for (e, j) in vocab.entries().iter().zip(&header.vocab) {
                if e.place_id != j.place_id || e.centroid.lat != j.lat || e.centroid.lon != j.lon {
                    return Err(Error::data(format!(
                        "vocab entry `{}` does not match the grid geometry",
                        j.place_id
                    )));
                }
            }
            Ok(vocab)
        }
        (Modality::Gps, None) => Err(Error::data("gps dataset header is missing `grid`")),
        (Modality::Cdr, _) => LocationVocab::build_tower_vocab(
            header
                .vocab
                .iter()
                .map(|j| {
                    GeoPoint::new(j.lat, j.lon).map(|p| (j.place_id.clone(), p))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    }
}

fn validate_trajectory(
    traj: &Trajectory,
    vocab: &LocationVocab,
    profiles: &BTreeMap<String, ContextProfile>,
    limits: LoadLimits,
) -> Result<()> {
    if traj.visits.is_empty() {
        return Err(Error::data("trajectory has no visits"));
    }
    if traj.visits.len() > limits.max_visits_per_day {
        return Err(Error::data(format!(
            "trajectory has {} visits, above the {} limit",
            traj.visits.len(),
            limits.max_visits_per_day
        )));
    }
    if !profiles.contains_key(&traj.user_id) {
        return Err(Error::data(format!("no profile for user `{}`", traj.user_id)));
    }
    let mut prev = 0u32;
    for (i, v) in traj.visits.iter().enumerate() {
        if v.timestamp >= DAY_SECONDS {
            return Err(Error::data(format!(
                "visit {i} timestamp {} outside [0, 86400)",
                v.timestamp
            )));
        }
        if i > 0 && v.timestamp < prev {
            return Err(Error::data(format!(
                "visits not sorted: visit {i} at {}s precedes visit {} at {prev}s",
                v.timestamp,
                i - 1
            )));
        }
        prev = v.timestamp;
        if !vocab.is_place(v.token) {
            return Err(Error::data(format!("visit {i} references a non-place token")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Answer key, predictions, queries
// ---------------------------------------------------------------------------

/// `time_or_slot` is the half-hour slot index (1..=34) for CDR data and
/// seconds since midnight for GPS data; the dataset header fixes which.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenVisit {
    pub place_id: String,
    pub time_or_slot: u32,
}

/// One user-day of the answer key: every hidden visit with its true place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerDay {
    pub user: String,
    pub date: CivilDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<String>,
    pub hidden: Vec<HiddenVisit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub user: String,
    pub date: CivilDate,
    pub time_or_slot: u32,
    /// Place ids in descending confidence; ties broken by token id upstream.
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub user: String,
    pub date: CivilDate,
    pub time_or_slot: u32,
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::M_PER_DEG;

    fn tiny_vocab() -> LocationVocab {
        let mk = |lat: f64, lon: f64| GeoPoint { lat, lon };
        LocationVocab::build_tower_vocab(vec![
            ("tw_a".into(), mk(0.30, 32.58)),
            ("tw_b".into(), mk(0.31, 32.59)),
            ("tw_c".into(), mk(0.32, 32.60)),
        ])
        .unwrap()
    }

    fn tiny_dataset() -> Dataset {
        let vocab = tiny_vocab();
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "u1".to_string(),
            ContextProfile {
                age_bucket: "18-29".into(),
                gender: Gender::Female,
                primary_anchor: TokenId(0),
                secondary_anchor: TokenId(1),
            },
        );
        let date: CivilDate = "2024-03-04".parse().unwrap();
        let trajectories = vec![Trajectory {
            user_id: "u1".into(),
            date,
            visits: vec![
                Visit::new(TokenId(0), 7 * 3600, true),
                Visit::new(TokenId(1), 9 * 3600, true),
                Visit::new(TokenId(2), 20 * 3600, true),
            ],
        }];
        Dataset {
            vocab,
            holidays: HolidayCalendar::new(vec!["2024-03-08".parse().unwrap()]),
            age_buckets: default_age_buckets(),
            profiles,
            trajectories,
        }
    }

    #[test]
    fn slot_examples() {
        assert_eq!(slot_of(6 * 3600), Some(1));
        assert_eq!(slot_of(22 * 3600 + 59 * 60 + 59), Some(34));
        assert_eq!(slot_of(3 * 3600), None);
        assert_eq!(slot_of(23 * 3600), None);
        assert_eq!(slot_of(6 * 3600 + 29 * 60 + 59), Some(1));
        assert_eq!(slot_of(6 * 3600 + 30 * 60), Some(2));
    }

    /// Brute-force per-minute table: every minute of the day maps to the slot
    /// whose [start, start+30min) interval contains it, or to out-of-window.
    #[test]
    fn slot_of_agrees_with_minute_table() {
        for minute in 0..1440u32 {
            let ts = minute * 60;
            let expected = (1..=N_SLOTS)
                .find(|&s| {
                    let start = slot_start_s(s);
                    ts >= start && ts < start + SLOT_SECONDS && ts < WINDOW_END_S
                });
            assert_eq!(slot_of(ts), expected, "minute {minute}");
        }
    }

    #[test]
    fn day_type_honors_holidays_and_weekends() {
        let cal = HolidayCalendar::new(vec!["2024-01-01".parse().unwrap()]);
        assert_eq!(cal.day_type("2024-01-01".parse().unwrap()), DayType::Holiday);
        assert_eq!(cal.day_type("2024-01-06".parse().unwrap()), DayType::Weekend);
        assert_eq!(cal.day_type("2024-01-02".parse().unwrap()), DayType::Weekday);
    }

    #[test]
    fn dataset_round_trip_is_identity() {
        let d = tiny_dataset();
        let dir = std::env::temp_dir().join("trajfill_data_rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.trajectories, d.trajectories);
        assert_eq!(back.profiles, d.profiles);
        assert_eq!(back.vocab.entries(), d.vocab.entries());
        assert_eq!(
            back.holidays.days().collect::<Vec<_>>(),
            d.holidays.days().collect::<Vec<_>>()
        );
    }

    #[test]
    fn unsorted_visits_name_the_line() {
        let d = tiny_dataset();
        let dir = std::env::temp_dir().join("trajfill_data_unsorted");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        d.save(&path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        // Swap the two timestamps on the trajectory line (line 2).
        text = text.replace("\"timestamp\":25200", "\"timestamp\":36000");
        fs::write(&path, text).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("not sorted"), "{err}");
    }

    #[test]
    fn unknown_place_and_unknown_field_rejected() {
        let d = tiny_dataset();
        let dir = std::env::temp_dir().join("trajfill_data_badplace");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        d.save(&path).unwrap();
        let good = fs::read_to_string(&path).unwrap();

        // Rename the place only on the trajectory line, not in the header.
        let mut lines: Vec<String> = good.lines().map(String::from).collect();
        lines[1] = lines[1].replace("tw_c", "tw_zz");
        fs::write(&path, lines.join("\n")).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("tw_zz") && err.contains("line 2"), "{err}");

        let with_extra = good.replace("\"observed\":true}", "\"observed\":true,\"speed\":3}");
        fs::write(&path, &with_extra).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
    }

    #[test]
    fn empty_file_is_the_empty_dataset() {
        let dir = std::env::temp_dir().join("trajfill_data_empty");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let d = Dataset::load(&path).unwrap();
        assert!(d.trajectories.is_empty());
        assert_eq!(d.vocab.n_places(), 0);
    }

    #[test]
    fn save_refuses_out_of_range_latitude() {
        let mut d = tiny_dataset();
        d.vocab.entries_mut()[1].centroid.lat = 123.0;
        let dir = std::env::temp_dir().join("trajfill_data_badlat");
        fs::create_dir_all(&dir).unwrap();
        let err = d.save(&dir.join("ds.jsonl")).unwrap_err().to_string();
        assert!(err.contains("latitude"), "{err}");
    }

    #[test]
    fn grid_dataset_round_trips_and_validates_geometry() {
        let sw = GeoPoint { lat: 0.30, lon: 32.58 };
        let ne = GeoPoint {
            lat: sw.lat + 300.0 / M_PER_DEG,
            lon: sw.lon + 300.0 / (M_PER_DEG * 0.3f64.to_radians().cos()),
        };
        let vocab = LocationVocab::build_grid_vocab(sw, ne, 100.0).unwrap();
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "g1".to_string(),
            ContextProfile {
                age_bucket: "30-44".into(),
                gender: Gender::Male,
                primary_anchor: TokenId(0),
                secondary_anchor: TokenId(8),
            },
        );
        let d = Dataset {
            vocab,
            holidays: HolidayCalendar::default(),
            age_buckets: default_age_buckets(),
            profiles,
            trajectories: vec![Trajectory {
                user_id: "g1".into(),
                date: "2024-03-05".parse().unwrap(),
                visits: vec![Visit::new(TokenId(4), 120, true)],
            }],
        };
        let dir = std::env::temp_dir().join("trajfill_data_grid");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.vocab.grid(), d.vocab.grid());
        assert_eq!(back.trajectories, d.trajectories);
    }

    #[test]
    fn user_split_is_stable_and_roughly_proportional() {
        let (mut tr, mut va, mut te) = (0, 0, 0);
        for u in 0..1000 {
            match user_split(&format!("u{u:04}"), 0.8, 0.1) {
                Split::Train => tr += 1,
                Split::Val => va += 1,
                Split::Test => te += 1,
            }
        }
        assert!((tr as f64 - 800.0).abs() < 60.0, "train {tr}");
        assert!((va as f64 - 100.0).abs() < 40.0, "val {va}");
        assert!((te as f64 - 100.0).abs() < 40.0, "test {te}");
        // Pure function of the id.
        assert_eq!(user_split("u0007", 0.8, 0.1), user_split("u0007", 0.8, 0.1));
    }

    #[test]
    fn jsonl_records_round_trip() {
        let dir = std::env::temp_dir().join("trajfill_data_jsonl");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("preds.jsonl");
        let recs = vec![PredictionRecord {
            user: "u1".into(),
            date: "2024-03-04".parse().unwrap(),
            time_or_slot: 12,
            ranked: vec!["tw_a".into(), "tw_b".into()],
        }];
        save_jsonl(&path, &recs).unwrap();
        let back: Vec<PredictionRecord> = load_jsonl(&path).unwrap();
        assert_eq!(back, recs);
    }
}
