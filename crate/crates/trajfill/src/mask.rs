//! Mask planning and application.
//!
//! A plan selects visit positions uniformly at random (without replacement)
//! and records the true token at each, so the loss can score predictions
//! without the masked sequence ever carrying the answer. Applying a plan
//! replaces the location component at each chosen position — with zero or
//! with the learned MASK embedding — while the time component stays intact.

use crate::config::MaskMode;
use crate::embed::{write_masked_position, InputSequence, RunTables};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// One flag per visit position (true = masked), indexed like `maskable`.
    pub mask: Vec<bool>,
    /// (sequence position, true token) per masked position.
    pub targets: Vec<(usize, TokenId)>,
    pub seed: u64,
}

impl MaskPlan {
    /// Plan with explicitly chosen sequence positions; targets carry the
    /// tokens currently at those positions (useful for inference queries,
    /// where position choice is not random).
    pub fn at_positions(seq: &InputSequence, positions: &[usize]) -> Result<Self> {
        let mut mask = vec![false; seq.maskable.len()];
        let mut targets = Vec::with_capacity(positions.len());
        for &pos in positions {
            let vi = seq
                .maskable
                .iter()
                .position(|&p| p == pos)
                .ok_or_else(|| Error::data(format!("position {pos} is not maskable")))?;
            mask[vi] = true;
            let token = seq.token_at(pos).unwrap_or(TokenId(0));
            targets.push((pos, token));
        }
        Ok(MaskPlan { mask, targets, seed: 0 })
    }
}

/// Number of masked targets for `n` visits at `ratio`: round(ratio * n),
/// clamped so at least one visit is masked and at least one stays observed.
pub fn target_count(n_visits: usize, ratio: f64) -> usize {
    ((ratio * n_visits as f64).round() as usize).clamp(1, n_visits - 1)
}

/// Uniform random mask plan over the sequence's visit positions.
pub fn plan_masks(seq: &InputSequence, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    let n = seq.maskable.len();
    if n < 2 {
        return Err(Error::data(format!(
            "masking needs at least 2 visit positions, got {n}"
        )));
    }
    let k = target_count(n, mask_ratio);
    let mut rng = Rng::seeded(seed);
    let mut chosen = rng.sample_indices(n, k);
    chosen.sort_unstable();
    let mut mask = vec![false; n];
    let mut targets = Vec::with_capacity(k);
    for vi in chosen {
        mask[vi] = true;
        let pos = seq.maskable[vi];
        let token = seq
            .token_at(pos)
            .ok_or_else(|| Error::data(format!("visit position {pos} has no token")))?;
        targets.push((pos, token));
    }
    Ok(MaskPlan { mask, targets, seed })
}

/// Apply a plan, returning the masked sequence. The true tokens live only in
/// `plan.targets`; the sequence keeps the time encodings at masked positions.
pub fn apply_masks(
    seq: &InputSequence,
    plan: &MaskPlan,
    mode: MaskMode,
    params: &ModelParams,
    tables: &RunTables,
) -> Result<InputSequence> {
    let mut out = seq.clone();
    for &(pos, _) in &plan.targets {
        if pos >= seq.len {
            return Err(Error::data(format!("masked position {pos} out of range")));
        }
        write_masked_position(&mut out, pos, mode, params, tables)?;
    }
    Ok(out)
}
