//! Prediction head, masked cross-entropy, optimizer, training loop, and the
//! finite-difference gradient checker.
//!
//! Determinism contract: given the same config and seed, training produces
//! bit-identical parameters and loss curves. Mask plans are re-seeded per
//! (seed, epoch, sequence index), shuffles per (seed, epoch), and per-batch
//! gradients are reduced in sequence order, so thread count cannot change
//! any numeric result.

use rayon::prelude::*;

use crate::config::{MaskMode, OptimizerKind, RunConfig, TrainingConfig};
use crate::data::{Dataset, Split};
use crate::embed::{
    assemble_sequence, scatter_input_grad, AblationSet, InputSequence, RunTables,
};
use crate::encoder::{encoder_backward, encoder_forward};
use crate::error::{Error, Result};
use crate::linalg::{add_scaled, dot, Mat};
use crate::mask::{apply_masks, plan_masks, MaskPlan};
use crate::model::{Checkpoint, ModelMeta, ModelParams, OptimizerState};
use crate::rng::{mix, mix3, Rng};
use crate::vocab::TokenId;

const SHUFFLE_SALT: u64 = 0x5348_5546; // "SHUF"
const MASK_SALT: u64 = 0x4d41_534b; // "MASK"
const DROP_SALT: u64 = 0x4452_4f50; // "DROP"
const VAL_SALT: u64 = 0x5641_4c30; // "VAL0"

/// Stable softmax over a logit slice, in place.
pub fn softmax_probs(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in logits.iter_mut() {
        *v *= inv;
    }
}

/// Probability vector over place tokens for every masked target position:
/// softmax(head_w . h_i + head_b).
pub fn predict_masked(
    h: &Mat,
    head_w: &Mat,
    head_b: &Mat,
    plan: &MaskPlan,
) -> Vec<Vec<f64>> {
    plan.targets
        .iter()
        .map(|&(pos, _)| {
            let hi = h.row(pos);
            let mut logits: Vec<f64> = (0..head_w.rows())
                .map(|p| dot(head_w.row(p), hi) + head_b.at(0, p))
                .collect();
            softmax_probs(&mut logits);
            logits
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Sum over masked targets of -ln p(true token).
    pub sum: f64,
    pub n_targets: usize,
    /// Targets whose probability was clamped at 1e-12 before the log.
    pub clamped: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.n_targets == 0 {
            0.0
        } else {
            self.sum / self.n_targets as f64
        }
    }
}

/// Masked cross-entropy: the loss reads only the (position, true token) pairs
/// in the plan, so labels anywhere else cannot change it.
pub fn masked_ce_loss(probs: &[Vec<f64>], plan: &MaskPlan) -> LossValue {
    let mut sum = 0.0;
    let mut clamped = 0;
    for (p, &(_, token)) in probs.iter().zip(&plan.targets) {
        let mut prob = p[token.index()];
        if prob < 1e-12 {
            prob = 1e-12;
            clamped += 1;
        }
        sum -= prob.ln();
    }
    LossValue { sum, n_targets: plan.targets.len(), clamped }
}

/// Rank of the true token under descending probability with token-id
/// tie-break (0 = top-1 correct).
pub fn rank_of(probs: &[f64], truth: TokenId) -> usize {
    let t = truth.index();
    let pt = probs[t];
    let mut rank = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > pt || (p == pt && j < t) {
            rank += 1;
        }
    }
    rank
}

/// Indices of the top-k probabilities, descending, ties broken by token id.
pub fn ranked_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).expect("finite probs").then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

// ---------------------------------------------------------------------------
// Per-sequence forward/backward
// ---------------------------------------------------------------------------

/// Read-only context shared by every forward pass of a run.
pub struct ForwardEnv<'a> {
    pub params: &'a ModelParams,
    pub tables: &'a RunTables,
    pub dataset: &'a Dataset,
    pub ablate: AblationSet,
    pub mask_mode: MaskMode,
}

impl<'a> ForwardEnv<'a> {
    pub fn new(
        params: &'a ModelParams,
        tables: &'a RunTables,
        dataset: &'a Dataset,
        ablate: AblationSet,
        mask_mode: MaskMode,
    ) -> Self {
        ForwardEnv { params, tables, dataset, ablate, mask_mode }
    }

    pub fn assemble(&self, traj_idx: usize) -> Result<InputSequence> {
        let traj = &self.dataset.trajectories[traj_idx];
        let profile = self
            .dataset
            .profiles
            .get(&traj.user_id)
            .ok_or_else(|| Error::data(format!("no profile for `{}`", traj.user_id)))?;
        assemble_sequence(
            traj,
            profile,
            self.params,
            self.tables,
            &self.dataset.vocab,
            &self.dataset.holidays,
            &self.dataset.age_buckets,
            self.ablate,
        )
    }
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub loss: LossValue,
    pub n_correct: usize,
    pub n_top3: usize,
    pub n_top5: usize,
    /// d(loss.sum)/d(theta), unscaled.
    pub grads: Option<Box<ModelParams>>,
    /// Gradient on the assembled input sequence (diagnostics and tests).
    pub dx: Option<Mat>,
}

/// Forward (and optionally backward) on an already-masked sequence.
pub fn run_prepared(
    env: &ForwardEnv,
    masked: &InputSequence,
    plan: &MaskPlan,
    dropout: Option<(f64, u64)>,
    want_grads: bool,
) -> Result<SampleOutcome> {
    let params = env.params;
    let heads = params.meta.heads;
    let mut drop_rng = dropout.map(|(_, seed)| Rng::seeded(seed));
    let drop_arg = match (&dropout, &mut drop_rng) {
        (Some((p, _)), Some(rng)) if *p > 0.0 => Some((*p, rng)),
        _ => None,
    };
    let (h, caches) = encoder_forward(&masked.x, &masked.pad, &params.layers, heads, drop_arg)?;

    let probs = predict_masked(&h, &params.head_w, &params.head_b, plan);
    let loss = masked_ce_loss(&probs, plan);
    let mut n_correct = 0;
    let mut n_top3 = 0;
    let mut n_top5 = 0;
    for (p, &(_, token)) in probs.iter().zip(&plan.targets) {
        let r = rank_of(p, token);
        n_correct += usize::from(r == 0);
        n_top3 += usize::from(r < 3);
        n_top5 += usize::from(r < 5);
    }

    if !want_grads {
        return Ok(SampleOutcome { loss, n_correct, n_top3, n_top5, grads: None, dx: None });
    }

    let mut grads = params.zeros_like();
    let mut dh = Mat::zeros(h.rows(), h.cols());
    // Softmax + cross-entropy gradient: p - onehot at each target. (The
    // reported value clamps vanishing probabilities; the gradient uses the
    // exact softmax-CE form, which stays bounded as p -> 0.)
    for (p, &(pos, token)) in probs.iter().zip(&plan.targets) {
        let hi = h.row(pos);
        let dh_pos = dh.row_mut(pos);
        for (j, &pj) in p.iter().enumerate() {
            let dl = if j == token.index() { pj - 1.0 } else { pj };
            if dl != 0.0 {
                add_scaled(grads.head_w.row_mut(j), hi, dl);
                let b = grads.head_b.row_mut(0);
                b[j] += dl;
                add_scaled(dh_pos, params.head_w.row(j), dl);
            }
        }
    }
    let dx = encoder_backward(&dh, &caches, &params.layers, heads, &mut grads.layers);
    scatter_input_grad(&dx, masked, params, env.tables, &mut grads);
    Ok(SampleOutcome {
        loss,
        n_correct,
        n_top3,
        n_top5,
        grads: Some(Box::new(grads)),
        dx: Some(dx),
    })
}

/// Assemble, plan masks at the given seed, apply, and run.
pub fn run_sample(
    env: &ForwardEnv,
    traj_idx: usize,
    mask_ratio: f64,
    plan_seed: u64,
    dropout: Option<(f64, u64)>,
    want_grads: bool,
) -> Result<SampleOutcome> {
    let seq = env.assemble(traj_idx)?;
    let plan = plan_masks(&seq, mask_ratio, plan_seed)?;
    let masked = apply_masks(&seq, &plan, env.mask_mode, env.params, env.tables)?;
    run_prepared(env, &masked, &plan, dropout, want_grads)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub struct Optimizer {
    cfg: TrainingConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: &TrainingConfig, params: &ModelParams) -> Self {
        Optimizer { cfg: cfg.clone(), state: OptimizerState::new(params) }
    }

    pub fn with_state(cfg: &TrainingConfig, state: OptimizerState) -> Self {
        Optimizer { cfg: cfg.clone(), state }
    }

    /// One update. Moments accumulate the raw gradient; the clip applies to
    /// the final direction, so the applied update's global norm never
    /// exceeds lr * clip. Returns that norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> f64 {
        let cfg = &self.cfg;
        self.state.step += 1;
        let t = self.state.step;
        let warmup = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        let lr = cfg.learning_rate * warmup;

        let mut direction = grads.zeros_like();
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for ((_, d), (_, g)) in direction.tensors_mut().into_iter().zip(grads.tensors()) {
                    d.data_mut().copy_from_slice(g.data());
                }
            }
            OptimizerKind::AdamLike => {
                let b1 = cfg.adam_beta1;
                let b2 = cfg.adam_beta2;
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let m_tensors = self.state.m.tensors_mut();
                let v_tensors = self.state.v.tensors_mut();
                for ((((_, d), (_, g)), (_, m)), (_, v)) in direction
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m_tensors)
                    .zip(v_tensors)
                {
                    let dd = d.data_mut();
                    for (((dv, &gv), mv), vv) in dd
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *dv = m_hat / (v_hat.sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
        let norm = direction.global_norm();
        let clip = cfg.gradient_clip_norm;
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let step_scale = lr * scale;
        for ((_, p), (_, d)) in params.tensors_mut().into_iter().zip(direction.tensors()) {
            add_scaled(p.data_mut(), d.data(), -step_scale);
        }
        step_scale * norm
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_top3: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedEvalStats {
    pub n_targets: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub top3: f64,
    pub top5: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    /// Final state, suitable for resuming.
    pub final_ckpt: Checkpoint,
    /// Parameters of the best epoch by held-out loss.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<EpochRow>,
    pub diverged: bool,
    /// Trajectories skipped because they carry fewer than 2 usable visits.
    pub skipped_short: usize,
}

/// Trajectory indices of a split whose sequences can be masked (>= 2 usable
/// visits), in dataset order.
pub fn trainable_indices(dataset: &Dataset, cfg: &RunConfig, split: Split) -> (Vec<usize>, usize) {
    let mut idxs = Vec::new();
    let mut skipped = 0;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        if crate::data::user_split(&traj.user_id, cfg.data.split_train, cfg.data.split_val) != split
        {
            continue;
        }
        let usable = crate::embed::usable_visits(traj, dataset.vocab.modality()).len();
        if usable >= 2 && crate::model::CONTEXT_LEN + usable <= cfg.data.max_seq_len {
            idxs.push(i);
        } else {
            skipped += 1;
        }
    }
    (idxs, skipped)
}

/// Eval-mode masked prediction over `indices` with fixed plans seeded from
/// (seed, index); dropout off.
pub fn masked_eval(
    env: &ForwardEnv,
    indices: &[usize],
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskedEvalStats> {
    let outcomes: Vec<SampleOutcome> = indices
        .par_iter()
        .map(|&i| run_sample(env, i, mask_ratio, mix(seed, i as u64), None, false))
        .collect::<Result<Vec<_>>>()?;
    let mut n = 0usize;
    let mut sum = 0.0;
    let (mut c1, mut c3, mut c5) = (0usize, 0usize, 0usize);
    for o in &outcomes {
        n += o.loss.n_targets;
        sum += o.loss.sum;
        c1 += o.n_correct;
        c3 += o.n_top3;
        c5 += o.n_top5;
    }
    let denom = n.max(1) as f64;
    Ok(MaskedEvalStats {
        n_targets: n,
        loss: sum / denom,
        accuracy: c1 as f64 / denom,
        top3: c3 as f64 / denom,
        top5: c5 as f64 / denom,
    })
}

/// Train on the dataset's train split, validating on the val split each
/// epoch. Deterministic given the config seed.
pub fn train(
    dataset: &Dataset,
    cfg: &RunConfig,
    ablate: AblationSet,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutput> {
    let meta = ModelMeta::from_config(cfg, dataset.vocab.n_places(), dataset.vocab.modality());
    if dataset.vocab.n_places() == 0 {
        return Err(Error::data("cannot train on an empty vocabulary"));
    }
    let seed = cfg.training_seed();
    let (mut params, mut optimizer, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.params.meta != meta {
                return Err(Error::data(
                    "checkpoint model shape does not match the configuration".to_string(),
                ));
            }
            let opt = ckpt
                .optimizer
                .ok_or_else(|| Error::data("checkpoint has no optimizer state to resume from"))?;
            let epoch = ckpt.epoch;
            (ckpt.params, Optimizer::with_state(&cfg.training, opt), epoch)
        }
        None => {
            let params = ModelParams::init(meta, seed);
            let opt = Optimizer::new(&cfg.training, &params);
            (params, opt, 0)
        }
    };

    let (train_idx, skipped) = trainable_indices(dataset, cfg, Split::Train);
    if train_idx.is_empty() {
        return Err(Error::data("no trainable sequences in the train split"));
    }
    let (val_idx, _) = trainable_indices(dataset, cfg, Split::Val);
    // With no validation users, validation metrics fall back to eval-mode
    // metrics on the train split so best-epoch tracking still works.
    let val_for_metrics: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };

    let config_echo = toml::to_string(cfg).unwrap_or_default();
    let mask_ratio = cfg.masking.mask_ratio;
    let dropout_p = cfg.encoder.dropout;
    // Feature tables depend on the vocabulary and shape metadata only, never
    // on parameter values; build them once.
    let tables = RunTables::build(&dataset.vocab, &params);
    let mut curve = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = start_epoch;
    let mut best_val_loss = f64::INFINITY;
    let mut diverged = false;

    'epochs: for epoch in start_epoch..cfg.training.epochs {
        let mut order = train_idx.clone();
        Rng::seeded(mix3(seed, SHUFFLE_SALT, epoch as u64)).shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_targets = 0usize;
        for chunk in order.chunks(cfg.training.batch_size) {
            let last_good = params.clone();
            let outcomes: Result<Vec<SampleOutcome>> = {
                let env = ForwardEnv::new(&params, &tables, dataset, ablate, cfg.masking.mode);
                chunk
                    .par_iter()
                    .map(|&i| {
                        run_sample(
                            &env,
                            i,
                            mask_ratio,
                            mix3(mix(seed, MASK_SALT), epoch as u64, i as u64),
                            if dropout_p > 0.0 {
                                Some((dropout_p, mix3(mix(seed, DROP_SALT), epoch as u64, i as u64)))
                            } else {
                                None
                            },
                            true,
                        )
                    })
                    .collect()
            };
            let outcomes = match outcomes {
                Ok(o) => o,
                Err(Error::Numerical(msg)) => {
                    eprintln!("training diverged ({msg}); stopping at last good state");
                    params = last_good;
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let batch_targets: usize = outcomes.iter().map(|o| o.loss.n_targets).sum();
            let batch_loss: f64 = outcomes.iter().map(|o| o.loss.sum).sum();
            if !batch_loss.is_finite() {
                eprintln!("training diverged (non-finite loss); stopping at last good state");
                params = last_good;
                diverged = true;
                break 'epochs;
            }
            epoch_loss_sum += batch_loss;
            epoch_targets += batch_targets;
            if batch_targets == 0 {
                continue;
            }
            // Deterministic reduction: grads summed in chunk order.
            let mut grads = params.zeros_like();
            for o in &outcomes {
                grads.add_assign(o.grads.as_ref().expect("grads requested"));
            }
            grads.scale(1.0 / batch_targets as f64);
            optimizer.step(&mut params, &grads);
        }

        let env = ForwardEnv::new(&params, &tables, dataset, ablate, cfg.masking.mode);
        let val = masked_eval(&env, val_for_metrics, mask_ratio, mix(seed, VAL_SALT))?;
        let row = EpochRow {
            epoch,
            train_loss: epoch_loss_sum / epoch_targets.max(1) as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            val_top3: val.top3,
            val_top5: val.top5,
        };
        if val.loss < best_val_loss {
            best_val_loss = val.loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        on_epoch(&row);
        curve.push(row);
    }

    if !best_val_loss.is_finite() {
        best_params = params.clone();
    }
    let epochs_done = start_epoch + curve.len();
    Ok(TrainOutput {
        final_ckpt: Checkpoint {
            params,
            optimizer: Some(optimizer.state),
            epoch: epochs_done,
            config_echo,
        },
        best_params,
        best_epoch,
        best_val_loss,
        curve,
        diverged,
        skipped_short: skipped,
    })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// (tensor name, max relative error) per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub n_params: usize,
    pub passed: bool,
}

/// Relative error with a floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic against numeric gradients tensor by tensor.
pub fn compare_grads(
    analytic: &ModelParams,
    numeric: &ModelParams,
    threshold: f64,
) -> GradcheckReport {
    let mut per_tensor = Vec::new();
    let mut max = 0.0f64;
    let mut n_params = 0;
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        let mut tensor_max = 0.0f64;
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            tensor_max = tensor_max.max(rel_err(av, nv));
        }
        n_params += a.data().len();
        max = max.max(tensor_max);
        per_tensor.push((name, tensor_max));
    }
    GradcheckReport { per_tensor, max_rel_err: max, threshold, n_params, passed: max < threshold }
}

/// Central-difference gradient of the summed loss over `samples` w.r.t.
/// every parameter element.
pub fn numeric_grads(
    params: &ModelParams,
    dataset: &Dataset,
    samples: &[(usize, MaskPlan)],
    ablate_per_sample: &[AblationSet],
    mask_mode: MaskMode,
    eps: f64,
) -> Result<ModelParams> {
    // Feature tables are value-independent, so one build serves every
    // perturbed evaluation.
    let tables = RunTables::build(&dataset.vocab, params);
    let loss_of = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for ((idx, plan), &ablate) in samples.iter().zip(ablate_per_sample) {
            let env = ForwardEnv::new(p, &tables, dataset, ablate, mask_mode);
            let seq = env.assemble(*idx)?;
            let masked = apply_masks(&seq, plan, mask_mode, p, &tables)?;
            let out = run_prepared(&env, &masked, plan, None, false)?;
            total += out.loss.sum;
        }
        Ok(total)
    };

    let mut work = params.clone();
    let mut numeric = params.zeros_like();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.data().len();
        for j in 0..len {
            let orig = work.tensors()[ti].1.data()[j];
            work.tensors_mut()[ti].1.data_mut()[j] = orig + eps;
            let f_plus = loss_of(&work)?;
            work.tensors_mut()[ti].1.data_mut()[j] = orig - eps;
            let f_minus = loss_of(&work)?;
            work.tensors_mut()[ti].1.data_mut()[j] = orig;
            numeric.tensors_mut()[ti].1.data_mut()[j] = (f_plus - f_minus) / (2.0 * eps);
        }
    }
    Ok(numeric)
}

/// Analytic gradient of the same summed loss.
pub fn analytic_grads(
    params: &ModelParams,
    dataset: &Dataset,
    samples: &[(usize, MaskPlan)],
    ablate_per_sample: &[AblationSet],
    mask_mode: MaskMode,
) -> Result<ModelParams> {
    let tables = RunTables::build(&dataset.vocab, params);
    let mut grads = params.zeros_like();
    for ((idx, plan), &ablate) in samples.iter().zip(ablate_per_sample) {
        let env = ForwardEnv::new(params, &tables, dataset, ablate, mask_mode);
        let seq = env.assemble(*idx)?;
        let masked = apply_masks(&seq, plan, mask_mode, params, &tables)?;
        let out = run_prepared(&env, &masked, plan, None, true)?;
        grads.add_assign(out.grads.as_ref().expect("grads"));
    }
    Ok(grads)
}

/// Full gradient check on a model/dataset pair: analytic vs central
/// differences over every parameter tensor.
pub fn gradcheck_model(
    params: &ModelParams,
    dataset: &Dataset,
    samples: &[(usize, MaskPlan)],
    ablate_per_sample: &[AblationSet],
    mask_mode: MaskMode,
    eps: f64,
    threshold: f64,
) -> Result<GradcheckReport> {
    let analytic = analytic_grads(params, dataset, samples, ablate_per_sample, mask_mode)?;
    let numeric = numeric_grads(params, dataset, samples, ablate_per_sample, mask_mode, eps)?;
    Ok(compare_grads(&analytic, &numeric, threshold))
}

/// The standard gradient-check fixture: d=8, h=2, L=1, 6-visit GPS sequence
/// with the geographic encoder, one plain sample and one ablated sample so
/// the null embedding is exercised, mask-token replacement so the MASK
/// embedding is exercised.
pub fn gradcheck() -> Result<GradcheckReport> {
    let (dataset, params) = gradcheck_fixture()?;
    let tables = RunTables::build(&dataset.vocab, &params);
    let env = ForwardEnv::new(&params, &tables, &dataset, AblationSet::default(), MaskMode::MaskToken);
    let seq0 = env.assemble(0)?;
    let plan0 = plan_masks(&seq0, 0.34, 9)?;
    let env1 = ForwardEnv::new(
        &params,
        &tables,
        &dataset,
        AblationSet { date: true, ..Default::default() },
        MaskMode::MaskToken,
    );
    let seq1 = env1.assemble(1)?;
    let plan1 = plan_masks(&seq1, 0.34, 10)?;
    let samples = vec![(0usize, plan0), (1usize, plan1)];
    let ablates = vec![AblationSet::default(), AblationSet { date: true, ..Default::default() }];
    gradcheck_model(&params, &dataset, &samples, &ablates, MaskMode::MaskToken, 1e-4, 1e-4)
}

/// Tiny deterministic world for gradient checking.
pub fn gradcheck_fixture() -> Result<(Dataset, ModelParams)> {
    use crate::data::{ContextProfile, Gender, HolidayCalendar, Trajectory, Visit};
    use crate::geo::GeoPoint;
    use crate::vocab::{LocationVocab, Modality};
    use std::collections::BTreeMap;

    let sw = GeoPoint { lat: 0.300, lon: 32.580 };
    let ne = GeoPoint { lat: 0.303, lon: 32.583 };
    let vocab = LocationVocab::build_grid_vocab(sw, ne, 150.0)?;
    let n_places = vocab.n_places();
    let mut profiles = BTreeMap::new();
    profiles.insert(
        "ga".to_string(),
        ContextProfile {
            age_bucket: "18-29".into(),
            gender: Gender::Female,
            primary_anchor: TokenId(0),
            secondary_anchor: TokenId(1),
        },
    );
    profiles.insert(
        "gb".to_string(),
        ContextProfile {
            age_bucket: "60+".into(),
            gender: Gender::Male,
            primary_anchor: TokenId(2),
            secondary_anchor: TokenId(3),
        },
    );
    let mk_traj = |user: &str, date: &str, tokens: &[u32]| Trajectory {
        user_id: user.into(),
        date: date.parse().unwrap(),
        visits: tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| Visit::new(TokenId(t % n_places as u32), 7 * 3600 + i as u32 * 5400, true))
            .collect(),
    };
    let dataset = Dataset {
        vocab,
        holidays: HolidayCalendar::new(vec!["2024-03-09".parse().unwrap()]),
        age_buckets: crate::data::default_age_buckets(),
        profiles,
        trajectories: vec![
            mk_traj("ga", "2024-03-05", &[0, 2, 4, 1, 3, 0]),
            mk_traj("gb", "2024-03-09", &[2, 3, 1, 0, 2, 3]),
        ],
    };

    let mut cfg = RunConfig::default();
    cfg.embedding.dim = 8;
    cfg.embedding.space2vec_scales = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.ff_dim = Some(16);
    cfg.encoder.dropout = 0.0;
    cfg.data.max_seq_len = 16;
    let meta = ModelMeta::from_config(&cfg, dataset.vocab.n_places(), Modality::Gps);
    let params = ModelParams::init(meta, 1234);
    Ok((dataset, params))
}
