//! Input-token construction: the geographic encoder, the two time encoders,
//! the six-token context block, and the assembly of a full model input
//! sequence. Every assembled position carries provenance so the backward
//! pass can scatter input gradients into the right parameter tables.
//!
//! Sequence layout: [age, gender, primary anchor, secondary anchor, day type,
//! modality marker, visit_1, ..., visit_n, PAD...]. Visit vectors are the sum
//! of a location embedding and a time encoding; context and PAD positions are
//! never maskable.

use crate::config::{AblationFeature, MaskMode};
use crate::data::{ContextProfile, HolidayCalendar, Trajectory};
use crate::date::CivilDate;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::linalg::{add_scaled, Mat};
use crate::model::{LocEncoderKind, ModelParams, CONTEXT_LEN};
use crate::vocab::{LocationVocab, Modality, TokenId};

/// Which context features are replaced by the learned null token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationSet {
    pub demographics: bool,
    pub anchors: bool,
    pub date: bool,
}

impl AblationSet {
    pub fn from_features(features: &[AblationFeature]) -> Self {
        let mut set = AblationSet::default();
        for f in features {
            match f {
                AblationFeature::Demographics => set.demographics = true,
                AblationFeature::Anchors => set.anchors = true,
                AblationFeature::Date => set.date = true,
            }
        }
        set
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.demographics {
            parts.push("demographics");
        }
        if self.anchors {
            parts.push("anchors");
        }
        if self.date {
            parts.push("date");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            format!("-{}", parts.join(",-"))
        }
    }
}

/// Time component of a visit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeEnc {
    /// Fixed sinusoidal encoding of the half-hour slot index (no parameters).
    Slot(u8),
    /// Normalized-day (sin, cos) pair mapped to d by the learned time_proj.
    Norm { sin: f64, cos: f64 },
}

/// Provenance of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosSource {
    AgeRow(usize),
    GenderRow(usize),
    DayTypeRow(usize),
    ModalityRow(usize),
    Anchor { role: usize, token: TokenId },
    /// Ablated context position backed by the null embedding.
    NullCtx,
    VisitLoc { token: TokenId, time: TimeEnc },
    /// A visit whose location component was suppressed or replaced.
    MaskedVisit { mode: MaskMode, time: TimeEnc },
    Pad,
}

/// Assembled model input. `x` is padded to the configured maximum length;
/// `maskable` lists the visit positions (context and PAD are never eligible).
#[derive(Debug, Clone)]
pub struct InputSequence {
    pub x: Mat,
    pub len: usize,
    pub pad: Vec<bool>,
    pub maskable: Vec<usize>,
    pub sources: Vec<PosSource>,
}

impl InputSequence {
    pub fn n_visits(&self) -> usize {
        self.len - CONTEXT_LEN
    }

    /// True token at a visit position, when it has one.
    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        match self.sources.get(pos) {
            Some(PosSource::VisitLoc { token, .. }) => Some(*token),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Geographic encoding
// ---------------------------------------------------------------------------

/// Multi-scale sinusoidal features of projected (x, y) meters: for each of
/// `scales` wavelengths geometrically spaced in [lambda_min, lambda_max],
/// emit sin/cos of x and y divided by the wavelength. All components lie in
/// [-1, 1]; the origin maps to alternating (0, 1).
pub fn space2vec_features(
    x_m: f64,
    y_m: f64,
    scales: usize,
    lambda_min: f64,
    lambda_max: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * scales);
    for s in 0..scales {
        let frac = if scales == 1 { 0.0 } else { s as f64 / (scales - 1) as f64 };
        let lambda = lambda_min * (lambda_max / lambda_min).powf(frac);
        out.push((x_m / lambda).sin());
        out.push((x_m / lambda).cos());
        out.push((y_m / lambda).sin());
        out.push((y_m / lambda).cos());
    }
    out
}

/// Per-run lookup tables derived from the vocabulary and model meta: the
/// geographic feature vector of every place, and the fixed slot encodings.
#[derive(Debug, Clone)]
pub struct RunTables {
    /// n_places rows of loc_feat_dim features; empty in table mode.
    pub loc_feats: Vec<Vec<f64>>,
    /// Rows 1..=34 hold the fixed slot encodings (row 0 unused).
    pub slot_enc: Vec<Vec<f64>>,
}

impl RunTables {
    pub fn build(vocab: &LocationVocab, params: &ModelParams) -> Self {
        let meta = &params.meta;
        let loc_feats = match meta.loc_encoder {
            LocEncoderKind::Table => Vec::new(),
            LocEncoderKind::Space2Vec => {
                let proj = vocab.projection();
                vocab
                    .entries()
                    .iter()
                    .map(|e| {
                        let (x, y) = proj.to_meters(e.centroid);
                        space2vec_features(
                            x,
                            y,
                            meta.space2vec_scales,
                            meta.lambda_min_m,
                            meta.lambda_max_m,
                        )
                    })
                    .collect()
            }
        };
        let mut slot_enc = vec![Vec::new()];
        for s in 1..=crate::data::N_SLOTS {
            slot_enc.push(encode_time_slot(s, meta.dim).expect("slot in range"));
        }
        RunTables { loc_feats, slot_enc }
    }
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &vk) in v.iter().enumerate() {
        if vk != 0.0 {
            add_scaled(&mut out, m.row(k), vk);
        }
    }
    out
}

/// Geographic embedding of an arbitrary point: multi-scale features through
/// the learned projection. Only meaningful in space2vec mode.
pub fn encode_location(p: GeoPoint, vocab: &LocationVocab, params: &ModelParams) -> Vec<f64> {
    let meta = &params.meta;
    let (x, y) = vocab.projection().to_meters(p);
    let feats = space2vec_features(x, y, meta.space2vec_scales, meta.lambda_min_m, meta.lambda_max_m);
    vec_mat(&feats, &params.loc)
}

/// Location embedding of a place token under the active encoder.
pub fn location_embedding(token: TokenId, params: &ModelParams, tables: &RunTables) -> Vec<f64> {
    match params.meta.loc_encoder {
        LocEncoderKind::Table => params.loc.row(token.index()).to_vec(),
        LocEncoderKind::Space2Vec => vec_mat(&tables.loc_feats[token.index()], &params.loc),
    }
}

// ---------------------------------------------------------------------------
// Time encodings
// ---------------------------------------------------------------------------

/// Fixed sinusoidal encoding of a half-hour slot index: component j is
/// sin(s / 10000^(2j/d)) for even j and cos(s / 10000^(2j/d)) for odd j,
/// with the same exponent in both branches.
pub fn encode_time_slot(slot: u8, d: usize) -> Result<Vec<f64>> {
    if !(1..=crate::data::N_SLOTS).contains(&slot) {
        return Err(Error::data(format!("slot index {slot} outside 1..=34")));
    }
    let s = slot as f64;
    Ok((0..d)
        .map(|j| {
            let arg = s / 10_000f64.powf(2.0 * j as f64 / d as f64);
            if j % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect())
}

/// sin(2*pi*t) with quadrant folding so quarter turns are exact: t = 0, 1/4,
/// 1/2, 3/4 give exactly 0, 1, 0, -1.
fn sin_2pi(t: f64) -> f64 {
    let u = t.rem_euclid(1.0);
    let q = (4.0 * u).floor() as i64;
    let r = u - q as f64 * 0.25;
    let theta = 2.0 * std::f64::consts::PI * r;
    let v = match q {
        0 => theta.sin(),
        1 => theta.cos(),
        2 => -theta.sin(),
        _ => -theta.cos(),
    };
    v + 0.0 // normalize -0.0
}

/// Normalized-day fraction: whole minutes since midnight over 1440.
pub fn normalized_day_fraction(ts: u32) -> f64 {
    (ts / 60) as f64 / 1440.0
}

/// The periodic (sin, cos) base pair of a timestamp.
pub fn time_base_pair(ts: u32) -> (f64, f64) {
    let t = normalized_day_fraction(ts);
    (sin_2pi(t), sin_2pi(t + 0.25))
}

/// Normalized-time encoding: base pair through the learned 2 x d map.
pub fn encode_time_normalized(ts: u32, params: &ModelParams) -> Vec<f64> {
    let (s, c) = time_base_pair(ts);
    let mut out = params.time_proj.row(0).to_vec();
    for v in out.iter_mut() {
        *v *= s;
    }
    add_scaled(&mut out, params.time_proj.row(1), c);
    out
}

fn time_vector(time: TimeEnc, params: &ModelParams, tables: &RunTables) -> Vec<f64> {
    match time {
        TimeEnc::Slot(s) => tables.slot_enc[s as usize].clone(),
        TimeEnc::Norm { sin, cos } => {
            let mut out = params.time_proj.row(0).to_vec();
            for v in out.iter_mut() {
                *v *= sin;
            }
            add_scaled(&mut out, params.time_proj.row(1), cos);
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Context block and sequence assembly
// ---------------------------------------------------------------------------

/// The six context vectors [age, gender, primary anchor, secondary anchor,
/// day type, modality] with their provenance. Ablated features are replaced
/// by the learned null embedding.
pub fn embed_context(
    profile: &ContextProfile,
    date: CivilDate,
    params: &ModelParams,
    tables: &RunTables,
    vocab: &LocationVocab,
    holidays: &HolidayCalendar,
    age_buckets: &[String],
    ablate: AblationSet,
) -> Result<(Vec<Vec<f64>>, Vec<PosSource>)> {
    let age_idx = age_buckets
        .iter()
        .position(|b| *b == profile.age_bucket)
        .ok_or_else(|| Error::data(format!("unknown age bucket `{}`", profile.age_bucket)))?;
    if age_idx >= params.meta.n_age_buckets {
        return Err(Error::data(format!(
            "age bucket index {age_idx} outside the model's {} buckets",
            params.meta.n_age_buckets
        )));
    }
    for (role, t) in [(0, profile.primary_anchor), (1, profile.secondary_anchor)] {
        if !vocab.is_place(t) {
            return Err(Error::data(format!("anchor {role} is not a place token")));
        }
    }
    let day_idx = holidays.day_type(date).index();
    let modality_idx = params.meta.modality.index();

    let null = || params.null_emb.row(0).to_vec();
    let anchor_vec = |role: usize, token: TokenId| {
        let mut v = location_embedding(token, params, tables);
        add_scaled(&mut v, params.anchor_role.row(role), 1.0);
        v
    };

    let mut vecs = Vec::with_capacity(CONTEXT_LEN);
    let mut sources = Vec::with_capacity(CONTEXT_LEN);
    if ablate.demographics {
        vecs.push(null());
        sources.push(PosSource::NullCtx);
        vecs.push(null());
        sources.push(PosSource::NullCtx);
    } else {
        vecs.push(params.age_table.row(age_idx).to_vec());
        sources.push(PosSource::AgeRow(age_idx));
        vecs.push(params.gender_table.row(profile.gender.index()).to_vec());
        sources.push(PosSource::GenderRow(profile.gender.index()));
    }
    if ablate.anchors {
        vecs.push(null());
        sources.push(PosSource::NullCtx);
        vecs.push(null());
        sources.push(PosSource::NullCtx);
    } else {
        vecs.push(anchor_vec(0, profile.primary_anchor));
        sources.push(PosSource::Anchor { role: 0, token: profile.primary_anchor });
        vecs.push(anchor_vec(1, profile.secondary_anchor));
        sources.push(PosSource::Anchor { role: 1, token: profile.secondary_anchor });
    }
    if ablate.date {
        vecs.push(null());
        sources.push(PosSource::NullCtx);
    } else {
        vecs.push(params.day_type_table.row(day_idx).to_vec());
        sources.push(PosSource::DayTypeRow(day_idx));
    }
    vecs.push(params.modality_table.row(modality_idx).to_vec());
    sources.push(PosSource::ModalityRow(modality_idx));
    Ok((vecs, sources))
}

/// A visit as the assembler consumes it: token plus its time encoding.
#[derive(Debug, Clone, Copy)]
pub struct SeqVisit {
    pub token: TokenId,
    pub time: TimeEnc,
}

/// Visits usable by the model for this modality, in canonical order
/// (timestamp, then token id for equal timestamps). CDR sequences keep only
/// in-window visits, which carry slot indices.
pub fn usable_visits(traj: &Trajectory, modality: Modality) -> Vec<SeqVisit> {
    let mut visits: Vec<&crate::data::Visit> = match modality {
        Modality::Cdr => traj.visits.iter().filter(|v| v.slot.is_some()).collect(),
        Modality::Gps => traj.visits.iter().collect(),
    };
    visits.sort_by_key(|v| (v.timestamp, v.token));
    visits
        .into_iter()
        .map(|v| SeqVisit {
            token: v.token,
            time: match modality {
                Modality::Cdr => TimeEnc::Slot(v.slot.expect("filtered")),
                Modality::Gps => {
                    let (sin, cos) = time_base_pair(v.timestamp);
                    TimeEnc::Norm { sin, cos }
                }
            },
        })
        .collect()
}

/// Assemble the padded input sequence for one trajectory.
pub fn assemble_sequence(
    traj: &Trajectory,
    profile: &ContextProfile,
    params: &ModelParams,
    tables: &RunTables,
    vocab: &LocationVocab,
    holidays: &HolidayCalendar,
    age_buckets: &[String],
    ablate: AblationSet,
) -> Result<InputSequence> {
    let visits = usable_visits(traj, params.meta.modality);
    assemble_from_visits(&visits, traj.date, profile, params, tables, vocab, holidays, age_buckets, ablate)
}

/// Assembly from an explicit visit list; evaluation uses this to splice query
/// positions into an observed day.
#[allow(clippy::too_many_arguments)]
pub fn assemble_from_visits(
    visits: &[SeqVisit],
    date: CivilDate,
    profile: &ContextProfile,
    params: &ModelParams,
    tables: &RunTables,
    vocab: &LocationVocab,
    holidays: &HolidayCalendar,
    age_buckets: &[String],
    ablate: AblationSet,
) -> Result<InputSequence> {
    if visits.is_empty() {
        return Err(Error::data("cannot assemble a sequence with no usable visits"));
    }
    let max_len = params.meta.max_seq_len;
    let len = CONTEXT_LEN + visits.len();
    if len > max_len {
        return Err(Error::data(format!(
            "sequence of {} visits exceeds max length {} (context {} + visits)",
            visits.len(),
            max_len,
            CONTEXT_LEN
        )));
    }
    let d = params.meta.dim;
    let (ctx_vecs, ctx_sources) =
        embed_context(profile, date, params, tables, vocab, holidays, age_buckets, ablate)?;

    let mut x = Mat::zeros(max_len, d);
    let mut sources = Vec::with_capacity(max_len);
    let mut pad = vec![false; max_len];
    for (i, (vec, src)) in ctx_vecs.iter().zip(&ctx_sources).enumerate() {
        x.row_mut(i).copy_from_slice(vec);
        sources.push(*src);
    }
    for (k, v) in visits.iter().enumerate() {
        let pos = CONTEXT_LEN + k;
        if !vocab.is_place(v.token) {
            return Err(Error::data(format!("visit token {} is not a place", v.token.0)));
        }
        let mut row = location_embedding(v.token, params, tables);
        let t = time_vector(v.time, params, tables);
        for (r, tv) in row.iter_mut().zip(&t) {
            *r += tv;
        }
        x.row_mut(pos).copy_from_slice(&row);
        sources.push(PosSource::VisitLoc { token: v.token, time: v.time });
    }
    for pos in len..max_len {
        pad[pos] = true;
        sources.push(PosSource::Pad);
    }
    Ok(InputSequence {
        x,
        len,
        pad,
        maskable: (CONTEXT_LEN..len).collect(),
        sources,
    })
}

/// Replacement location vector at a masked position.
pub fn mask_replacement(mode: MaskMode, params: &ModelParams) -> Vec<f64> {
    match mode {
        MaskMode::Zero => vec![0.0; params.meta.dim],
        MaskMode::MaskToken => params.mask_emb.row(0).to_vec(),
    }
}

/// Rewrite one visit position as masked: replacement location component plus
/// the untouched time encoding.
pub(crate) fn write_masked_position(
    seq: &mut InputSequence,
    pos: usize,
    mode: MaskMode,
    params: &ModelParams,
    tables: &RunTables,
) -> Result<()> {
    let time = match seq.sources.get(pos) {
        Some(PosSource::VisitLoc { time, .. }) => *time,
        Some(PosSource::MaskedVisit { time, .. }) => *time,
        _ => {
            return Err(Error::data(format!(
                "position {pos} is not a maskable visit position"
            )))
        }
    };
    let mut row = mask_replacement(mode, params);
    let t = time_vector(time, params, tables);
    for (r, tv) in row.iter_mut().zip(&t) {
        *r += tv;
    }
    seq.x.row_mut(pos).copy_from_slice(&row);
    seq.sources[pos] = PosSource::MaskedVisit { mode, time };
    Ok(())
}

/// Scatter the input-sequence gradient into the embedding parameter tables,
/// following each position's provenance.
pub fn scatter_input_grad(
    dx: &Mat,
    seq: &InputSequence,
    params: &ModelParams,
    tables: &RunTables,
    grads: &mut ModelParams,
) {
    let loc_grad = |grads: &mut ModelParams, token: TokenId, g: &[f64]| match params.meta.loc_encoder {
        LocEncoderKind::Table => add_scaled(grads.loc.row_mut(token.index()), g, 1.0),
        LocEncoderKind::Space2Vec => {
            let feats = &tables.loc_feats[token.index()];
            for (k, &f) in feats.iter().enumerate() {
                if f != 0.0 {
                    add_scaled(grads.loc.row_mut(k), g, f);
                }
            }
        }
    };
    let time_grad = |grads: &mut ModelParams, time: TimeEnc, g: &[f64]| {
        if let TimeEnc::Norm { sin, cos } = time {
            add_scaled(grads.time_proj.row_mut(0), g, sin);
            add_scaled(grads.time_proj.row_mut(1), g, cos);
        }
    };
    for pos in 0..seq.len {
        let g = dx.row(pos);
        match seq.sources[pos] {
            PosSource::AgeRow(i) => add_scaled(grads.age_table.row_mut(i), g, 1.0),
            PosSource::GenderRow(i) => add_scaled(grads.gender_table.row_mut(i), g, 1.0),
            PosSource::DayTypeRow(i) => add_scaled(grads.day_type_table.row_mut(i), g, 1.0),
            PosSource::ModalityRow(i) => add_scaled(grads.modality_table.row_mut(i), g, 1.0),
            PosSource::NullCtx => add_scaled(grads.null_emb.row_mut(0), g, 1.0),
            PosSource::Anchor { role, token } => {
                loc_grad(grads, token, g);
                add_scaled(grads.anchor_role.row_mut(role), g, 1.0);
            }
            PosSource::VisitLoc { token, time } => {
                loc_grad(grads, token, g);
                time_grad(grads, time, g);
            }
            PosSource::MaskedVisit { mode, time } => {
                if mode == MaskMode::MaskToken {
                    add_scaled(grads.mask_emb.row_mut(0), g, 1.0);
                }
                time_grad(grads, time, g);
            }
            PosSource::Pad => {}
        }
    }
}
