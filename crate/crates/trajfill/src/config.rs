//! Run configuration. One TOML file drives the whole pipeline; every key has
//! a default and CLI flags override file values. Validation errors name the
//! offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, mix};
use crate::vocab::Modality;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; section seeds derive from it unless set explicitly.
    pub seed: u64,
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub masking: MaskingConfig,
    pub world: WorldConfig,
    pub sparsify: SparsifyConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Maximum model sequence length (context block + visits, before padding).
    pub max_seq_len: usize,
    /// User-level split fractions; test is the remainder.
    pub split_train: f64,
    pub split_val: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { max_seq_len: 64, split_train: 0.8, split_val: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Shared embedding width d (even).
    pub dim: usize,
    /// Frequency scales of the multi-scale geographic encoding.
    pub space2vec_scales: usize,
    pub lambda_min_m: f64,
    pub lambda_max_m: f64,
    /// Use a plain learned per-token table instead of the geographic encoder.
    pub learned_location_table: bool,
    pub age_buckets: Vec<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 64,
            space2vec_scales: 16,
            lambda_min_m: 100.0,
            lambda_max_m: 50_000.0,
            learned_location_table: false,
            age_buckets: crate::data::default_age_buckets(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; defaults to 4 * dim when absent.
    pub ff_dim: Option<usize>,
    /// Dropout on sublayer outputs, training only.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 4, heads: 4, ff_dim: None, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn ff_dim_for(&self, dim: usize) -> usize {
        self.ff_dim.unwrap_or(4 * dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamLike,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Bound on the global norm of every parameter update (times lr).
    pub gradient_clip_norm: f64,
    pub warmup_steps: usize,
    pub seed: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdamLike,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 20,
            gradient_clip_norm: 1.0,
            warmup_steps: 100,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Suppress the masked location embedding entirely (the time part stays).
    Zero,
    /// Substitute the learned MASK embedding for the location part.
    MaskToken,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_ratio: f64,
    pub mode: MaskMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { mask_ratio: 0.2, mode: MaskMode::Zero }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BboxConfig {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl Default for BboxConfig {
    fn default() -> Self {
        // Roughly a 10 km x 10 km urban box.
        BboxConfig { lat_min: 0.250, lon_min: 32.520, lat_max: 0.340, lon_max: 32.610 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchetypeConfig {
    pub name: String,
    pub weight: f64,
    pub age_buckets: Vec<String>,
    pub employed: bool,
    /// Probability of attending the work anchor on a given weekday.
    pub attend_work_prob: f64,
    /// Mean departure / return, minutes since midnight.
    pub work_start_min: u32,
    pub work_end_min: u32,
    pub start_jitter_min: u32,
    pub evening_leisure_prob: f64,
    /// Mean leisure outings on weekend/holiday days.
    pub weekend_outings_mean: f64,
    /// Mean daytime outings on weekdays for the non-employed.
    pub weekday_outings_mean: f64,
    /// Personal leisure set size, drawn from this archetype's leisure zone.
    pub leisure_pool_size: usize,
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        ArchetypeConfig {
            name: "worker".into(),
            weight: 1.0,
            age_buckets: vec!["30-44".into()],
            employed: true,
            attend_work_prob: 0.95,
            work_start_min: 8 * 60,
            work_end_min: 17 * 60,
            start_jitter_min: 40,
            evening_leisure_prob: 0.25,
            weekend_outings_mean: 1.8,
            weekday_outings_mean: 1.2,
            leisure_pool_size: 3,
        }
    }
}

pub fn default_archetypes() -> Vec<ArchetypeConfig> {
    // Students and office workers share home/work zones, so the age bucket is
    // the only way to tell an unseen user's schedule (early school day, heavy
    // evenings/weekends) from a worker's; that keeps demographics genuinely
    // predictive rather than recoverable from the anchors.
    vec![
        ArchetypeConfig {
            name: "student".into(),
            weight: 0.30,
            age_buckets: vec!["<18".into(), "18-29".into()],
            employed: true,
            attend_work_prob: 0.95,
            work_start_min: 8 * 60,
            work_end_min: 14 * 60 + 30,
            start_jitter_min: 25,
            evening_leisure_prob: 0.50,
            weekend_outings_mean: 2.5,
            weekday_outings_mean: 1.0,
            leisure_pool_size: 4,
        },
        ArchetypeConfig {
            name: "office_worker".into(),
            weight: 0.45,
            age_buckets: vec!["30-44".into(), "45-59".into()],
            employed: true,
            attend_work_prob: 0.95,
            work_start_min: 9 * 60,
            work_end_min: 17 * 60 + 45,
            start_jitter_min: 35,
            evening_leisure_prob: 0.12,
            weekend_outings_mean: 1.2,
            weekday_outings_mean: 1.0,
            leisure_pool_size: 3,
        },
        // Retirees run errands on weekdays and mostly stay home on weekends,
        // so day type stays informative for them too.
        ArchetypeConfig {
            name: "retiree".into(),
            weight: 0.25,
            age_buckets: vec!["60+".into()],
            employed: false,
            attend_work_prob: 0.0,
            work_start_min: 10 * 60,
            work_end_min: 12 * 60,
            start_jitter_min: 60,
            evening_leisure_prob: 0.10,
            weekend_outings_mean: 0.5,
            weekday_outings_mean: 2.2,
            leisure_pool_size: 3,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub modality: Modality,
    pub seed: Option<u64>,
    pub population: i64,
    pub days: u32,
    pub start_date: String,
    pub holidays: Vec<String>,
    pub bbox: BboxConfig,
    /// Grid cell size (gps modality).
    pub cell_size_m: f64,
    /// Tower count (cdr modality); towers are placed deterministically.
    pub n_towers: usize,
    pub archetypes: Vec<ArchetypeConfig>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            modality: Modality::Cdr,
            seed: None,
            population: 248,
            days: 60,
            start_date: "2024-03-04".into(),
            holidays: vec!["2024-03-29".into(), "2024-04-01".into(), "2024-05-01".into()],
            bbox: BboxConfig::default(),
            cell_size_m: 100.0,
            n_towers: 64,
            archetypes: default_archetypes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyMode {
    CdrEvent,
    GpsDropout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsifyConfig {
    pub mode: SparsifyMode,
    /// Target mean number of distinct hourly slots observed per user-day.
    pub cdr_mean_hourly_slots: f64,
    /// Alternating observed/missing interval means (seconds), gps mode.
    pub gps_observed_mean_s: f64,
    pub gps_missing_mean_s: f64,
    pub seed: Option<u64>,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        SparsifyConfig {
            mode: SparsifyMode::CdrEvent,
            cdr_mean_hourly_slots: 5.0,
            gps_observed_mean_s: 5400.0,
            gps_missing_mean_s: 7200.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkovSides {
    Both,
    PrevOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitName,
    /// Count a rank-1 grid prediction adjacent to the truth as correct.
    pub grid_neighbor_credit: bool,
    pub markov_alpha: f64,
    pub markov_sides: MarkovSides,
    pub knn_k: usize,
    /// Length of exported rankings (>= 5).
    pub ranked_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitName::Test,
            grid_neighbor_credit: false,
            markov_alpha: 1.0,
            markov_sides: MarkovSides::Both,
            knn_k: 5,
            ranked_len: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFeature {
    Demographics,
    Anchors,
    Date,
}

impl AblationFeature {
    pub fn label(self) -> &'static str {
        match self {
            AblationFeature::Demographics => "demographics",
            AblationFeature::Anchors => "anchors",
            AblationFeature::Date => "date",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Each cell lists the context features replaced by the learned null
    /// token; the empty cell is the full model.
    pub cells: Vec<Vec<AblationFeature>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            cells: vec![
                vec![],
                vec![AblationFeature::Demographics],
                vec![AblationFeature::Anchors],
                vec![AblationFeature::Date],
            ],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read `{}`: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn world_seed(&self) -> u64 {
        self.world.seed.unwrap_or_else(|| mix(self.seed, 1))
    }

    pub fn sparsify_seed(&self) -> u64 {
        self.sparsify.seed.unwrap_or_else(|| mix(self.seed, 2))
    }

    pub fn training_seed(&self) -> u64 {
        self.training.seed.unwrap_or_else(|| mix(self.seed, 3))
    }

    /// Stable hash of the full (canonically serialized) configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(format!("{key}: {msg}")));

        let e = &self.embedding;
        if e.dim == 0 || e.dim % 2 != 0 {
            return fail("embedding.dim", format!("must be even and positive, got {}", e.dim));
        }
        if e.space2vec_scales < 1 {
            return fail("embedding.space2vec_scales", "must be >= 1".into());
        }
        if !(e.lambda_min_m > 0.0 && e.lambda_min_m < e.lambda_max_m) {
            return fail(
                "embedding.lambda_min_m",
                format!("need 0 < lambda_min_m < lambda_max_m, got {} and {}", e.lambda_min_m, e.lambda_max_m),
            );
        }
        if e.age_buckets.is_empty() {
            return fail("embedding.age_buckets", "must not be empty".into());
        }

        let enc = &self.encoder;
        if enc.heads == 0 || e.dim % enc.heads != 0 {
            return fail(
                "encoder.heads",
                format!("embedding.dim {} must be divisible by heads {}", e.dim, enc.heads),
            );
        }
        if let Some(ff) = enc.ff_dim {
            if ff == 0 {
                return fail("encoder.ff_dim", "must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&enc.dropout) {
            return fail("encoder.dropout", format!("must be in [0, 1), got {}", enc.dropout));
        }

        let d = &self.data;
        if d.max_seq_len < 8 {
            return fail("data.max_seq_len", "must be at least 8 (6 context tokens + 2 visits)".into());
        }
        if !(d.split_train > 0.0 && d.split_val >= 0.0 && d.split_train + d.split_val < 1.0) {
            return fail(
                "data.split_train",
                format!("need split_train > 0, split_val >= 0, sum < 1; got {} and {}", d.split_train, d.split_val),
            );
        }

        let t = &self.training;
        if t.learning_rate < 0.0 {
            return fail("training.learning_rate", "must be >= 0".into());
        }
        if t.batch_size == 0 {
            return fail("training.batch_size", "must be >= 1".into());
        }
        if t.gradient_clip_norm <= 0.0 {
            return fail("training.gradient_clip_norm", "must be > 0".into());
        }
        if !(0.0 < t.adam_beta1 && t.adam_beta1 < 1.0 && 0.0 < t.adam_beta2 && t.adam_beta2 < 1.0) {
            return fail("training.adam_beta1", "betas must be in (0, 1)".into());
        }

        let m = &self.masking;
        if !(m.mask_ratio > 0.0 && m.mask_ratio < 1.0) {
            return fail("masking.mask_ratio", format!("must be in (0, 1), got {}", m.mask_ratio));
        }

        let w = &self.world;
        if w.population <= 0 {
            return fail("world.population", format!("must be positive, got {}", w.population));
        }
        if w.days == 0 {
            return fail("world.days", "must be >= 1".into());
        }
        if w.archetypes.len() < 2 {
            return fail("world.archetypes", "need at least 2 archetypes".into());
        }
        for (i, a) in w.archetypes.iter().enumerate() {
            let key = format!("world.archetypes[{i}]");
            if a.weight <= 0.0 {
                return fail(&key, format!("weight must be > 0, got {}", a.weight));
            }
            if a.age_buckets.is_empty() {
                return fail(&key, "age_buckets must not be empty".into());
            }
            for b in &a.age_buckets {
                if !e.age_buckets.contains(b) {
                    return fail(&key, format!("age bucket `{b}` is not in embedding.age_buckets"));
                }
            }
            if a.leisure_pool_size == 0 {
                return fail(&key, "leisure_pool_size must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&a.attend_work_prob)
                || !(0.0..=1.0).contains(&a.evening_leisure_prob)
            {
                return fail(&key, "probabilities must be in [0, 1]".into());
            }
            if a.work_start_min >= a.work_end_min || a.work_end_min >= 24 * 60 {
                return fail(&key, "need work_start_min < work_end_min < 1440".into());
            }
        }
        let b = &w.bbox;
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max) {
            return fail("world.bbox", "south-west corner must be strictly south-west of north-east".into());
        }
        if w.cell_size_m <= 0.0 {
            return fail("world.cell_size_m", "must be > 0".into());
        }
        if w.modality == Modality::Cdr && w.n_towers < 12 {
            return fail("world.n_towers", "need at least 12 towers to form zones".into());
        }
        w.start_date
            .parse::<crate::date::CivilDate>()
            .map_err(|e| Error::config(format!("world.start_date: {e}")))?;
        for h in &w.holidays {
            h.parse::<crate::date::CivilDate>()
                .map_err(|e| Error::config(format!("world.holidays: {e}")))?;
        }

        let s = &self.sparsify;
        if !(s.cdr_mean_hourly_slots > 0.0 && s.cdr_mean_hourly_slots < 17.0) {
            return fail(
                "sparsify.cdr_mean_hourly_slots",
                format!("must be in (0, 17), got {}", s.cdr_mean_hourly_slots),
            );
        }
        if s.gps_observed_mean_s <= 0.0 {
            return fail("sparsify.gps_observed_mean_s", "must be > 0".into());
        }
        if s.gps_missing_mean_s < 0.0 {
            return fail("sparsify.gps_missing_mean_s", "must be >= 0".into());
        }

        let ev = &self.eval;
        if ev.knn_k == 0 {
            return fail("eval.knn_k", "must be >= 1".into());
        }
        if ev.markov_alpha < 0.0 {
            return fail("eval.markov_alpha", "must be >= 0".into());
        }
        if ev.ranked_len < 5 {
            return fail("eval.ranked_len", "must be >= 5".into());
        }

        Ok(())
    }
}
