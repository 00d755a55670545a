//! Two-phase training: cross-entropy pretraining of the backbone, then
//! evidence training with the five-term objective warm-started from the
//! baseline weights.
//!
//! Every source of randomness is a stream derived from the run seed and
//! an absolute index (epoch number for bag order, global bag counter for
//! gate noise), so a run can be stopped, saved, and resumed to the exact
//! bytes the uninterrupted run would have produced.
//!
//! One optimizer step covers `grad_accum` bags (default one bag per
//! step, no padding across variable bag sizes). Gradients are averaged
//! over the group, clipped by global norm, and applied with AdamW under
//! a cosine-decayed learning rate. Evaluation during training happens on
//! a parameter snapshot at the deployment (end) temperature, so early
//! and late checkpoints compete on the same footing.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::backbone::{classify, encode, normalize_coords, positional_term, tokenize, BackboneConfig, ModelError};
use crate::checkpoint::{self, CheckpointError};
use crate::data::BagRecord;
use crate::evidence::{complement_gate, concrete_gate, select_logits, GateMode};
use crate::gradcheck::{gradcheck, Evaluation, GradCheckError, GradCheckReport, GradCheckSettings};
use crate::metrics::{
    classification_metrics, ClassificationMetrics, EvidenceSummary, KCurve, MetricsError,
    SlideEvidenceRow,
};
use crate::model::{BundleError, Phase, ReamilModel};
use crate::objectives::{total_loss, LossWeights, ObjectiveInputs};
use crate::params::{ParamSet, TapeBinding};
use crate::rng::derived_rng;
use crate::tape::Tape;
use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("loss became non-finite at step {step} on slide {slide_id}")]
    NonFinite { step: usize, slide_id: String },
    #[error("resume state is missing `{0}`")]
    MissingState(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment accumulators plus the step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) {
    adamw_step_scaled(params, grads, state, cfg, lr, |_| 1.0);
}

/// AdamW with a per-parameter learning-rate multiplier chosen by name.
/// Used to damp the warm-started backbone while the selection head trains
/// at full rate; decay scales with the effective rate as usual.
pub fn adamw_step_scaled(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
    scale_for: impl Fn(&str) -> f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let wd = cfg.weight_decay as f32;
    let eps = cfg.eps as f32;
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (name, p) in params.iter_mut() {
        let lr32 = (lr * scale_for(name)) as f32;
        let g = grads.get(name).expect("gradient for every parameter");
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr32 * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
        }
    }
}

/// Cosine decay from `lr` at step 0 to `floor` at `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr: f64, floor: f64) -> f64 {
    if total == 0 {
        return floor;
    }
    let t = (step.min(total) as f64) / (total as f64);
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales gradients down to `max_norm` when their global L2 norm
/// exceeds it; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ParamSet<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Exponential interpolation from `start` at step 0 to `end` at the
/// final step.
pub fn temperature_at(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let t = (step.min(total - 1) as f64) / ((total - 1) as f64);
    start * (end / start).powf(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Bags per optimizer step.
    pub grad_accum: usize,
    /// Run validation every this many epochs (the final epoch always
    /// evaluates).
    pub eval_every: usize,
    /// Gate temperature annealing over the whole phase.
    pub temp_start: f64,
    pub temp_end: f64,
    /// Best-checkpoint score is `val AUC - select_z_weight * mean z`;
    /// the weight only matters in the evidence phase.
    pub select_z_weight: f64,
    /// Learning-rate multiplier for everything except the selection head.
    /// Below 1.0 it damps the warm-started backbone and classifier so the
    /// selector can train hard without degrading full-bag accuracy.
    pub backbone_lr_scale: f64,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn baseline_defaults() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 1e-3,
            lr_floor: 1e-5,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            grad_accum: 1,
            eval_every: 2,
            temp_start: 1.0,
            temp_end: 1.0,
            select_z_weight: 0.0,
            backbone_lr_scale: 1.0,
            loss: LossWeights::default(),
        }
    }

    pub fn evidence_defaults() -> Self {
        TrainConfig {
            epochs: 24,
            lr: 1e-3,
            lr_floor: 1e-5,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            grad_accum: 1,
            eval_every: 1,
            temp_start: 1.0,
            temp_end: 0.1,
            select_z_weight: 0.1,
            backbone_lr_scale: 0.1,
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("learning rate must be positive");
        }
        if self.lr_floor < 0.0 || self.lr_floor > self.lr {
            return fail("lr floor must sit in [0, lr]");
        }
        if self.weight_decay < 0.0 {
            return fail("weight decay must be nonnegative");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip norm must be positive");
        }
        if self.grad_accum == 0 {
            return fail("grad_accum must be at least 1");
        }
        if self.eval_every == 0 {
            return fail("eval cadence must be at least 1");
        }
        if !(self.temp_start > 0.0) || !(self.temp_end > 0.0) {
            return fail("temperatures must be positive");
        }
        if self.select_z_weight < 0.0 {
            return fail("selection score weight must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.backbone_lr_scale) {
            return fail("backbone_lr_scale must lie in [0, 1]");
        }
        self.loss.validate().map_err(BundleError::from)?;
        Ok(())
    }
}

pub const TRAIN_LOG_HEADER: &str =
    "step epoch l_full l_suff l_excl l_contig l_budget total p_keep p_drop mean_z";

/// One validation measurement taken during training.
#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub epoch: usize,
    pub bag_step: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub mean_z: f64,
    pub score: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The best-scoring snapshot, ready for evaluation.
    pub model: ReamilModel,
    pub best_score: f64,
    pub best_epoch: usize,
    /// Per-bag loss log in the documented column format.
    pub log: String,
    pub evals: Vec<EvalPoint>,
}

/// Resumable snapshot of an in-flight training phase.
pub struct TrainerState {
    pub model: ReamilModel,
    pub opt: OptimizerState,
    /// Next epoch to run (epochs below this are complete).
    pub next_epoch: usize,
    /// Bags consumed so far, across all epochs.
    pub bag_step: usize,
    pub best_params: ParamSet<f32>,
    pub best_score: f64,
    pub best_epoch: usize,
    /// Gradient group accumulated so far (carried across an epoch
    /// boundary only when grad_accum does not divide the epoch size).
    pending: Option<(ParamSet<f32>, usize)>,
}

impl TrainerState {
    fn fresh(model: ReamilModel) -> Self {
        let opt = OptimizerState::new(&model.params);
        let best_params = model.params.clone();
        TrainerState {
            model,
            opt,
            next_epoch: 0,
            bag_step: 0,
            best_params,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            pending: None,
        }
    }
}

fn f64_to_words(v: f64) -> (f32, f32) {
    let bits = v.to_bits();
    (
        f32::from_bits((bits >> 32) as u32),
        f32::from_bits((bits & 0xffff_ffff) as u32),
    )
}

fn f64_from_words(hi: f32, lo: f32) -> f64 {
    f64::from_bits(((hi.to_bits() as u64) << 32) | lo.to_bits() as u64)
}

impl TrainerState {
    /// Packs model, optimizer moments, best snapshot, and counters into
    /// one checkpoint file. Counters and the best score are stored
    /// bit-exactly so a resumed run is indistinguishable from an
    /// uninterrupted one.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        assert!(self.pending.is_none(), "save only at epoch boundaries");
        let mut out = self.model.to_tensors();
        for (name, t) in self.opt.m.iter() {
            out.insert(format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in self.opt.v.iter() {
            out.insert(format!("opt.v.{name}"), t.clone());
        }
        for (name, t) in self.best_params.iter() {
            out.insert(format!("best.{name}"), t.clone());
        }
        out.insert("meta.opt_step", Array::scalar(self.opt.step as f32));
        out.insert("meta.next_epoch", Array::scalar(self.next_epoch as f32));
        out.insert("meta.bag_step", Array::scalar(self.bag_step as f32));
        out.insert("meta.best_epoch", Array::scalar(self.best_epoch as f32));
        let (hi, lo) = f64_to_words(self.best_score);
        out.insert("meta.best_score.hi", Array::scalar(hi));
        out.insert("meta.best_score.lo", Array::scalar(lo));
        Ok(checkpoint::write_checkpoint(path, &out)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let tensors = checkpoint::read_checkpoint(path)?;
        let mut model_tensors = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        let mut best = ParamSet::new();
        let mut meta = std::collections::BTreeMap::new();
        for (name, t) in tensors.iter() {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("best.") {
                best.insert(rest, t.clone());
            } else if name.starts_with("meta.") {
                meta.insert(name.to_string(), t.scalar_value());
            } else {
                model_tensors.insert(name, t.clone());
            }
        }
        let model = ReamilModel::from_tensors(model_tensors)?;
        let read = |key: &str| -> Result<f32, TrainError> {
            meta.get(key)
                .copied()
                .ok_or_else(|| TrainError::MissingState(key.into()))
        };
        checkpoint::validate_shapes(&m, &model.params)?;
        checkpoint::validate_shapes(&v, &model.params)?;
        checkpoint::validate_shapes(&best, &model.params)?;
        let opt = OptimizerState {
            m,
            v,
            step: read("meta.opt_step")? as usize,
        };
        Ok(TrainerState {
            model,
            opt,
            next_epoch: read("meta.next_epoch")? as usize,
            bag_step: read("meta.bag_step")? as usize,
            best_params: best,
            best_score: f64_from_words(read("meta.best_score.hi")?, read("meta.best_score.lo")?),
            best_epoch: read("meta.best_epoch")? as usize,
            pending: None,
        })
    }
}

fn log_row(
    log: &mut String,
    step: usize,
    epoch: usize,
    vals: [f64; 9],
) {
    let _ = write!(log, "{step} {epoch}");
    for v in vals {
        let _ = write!(log, " {v:.6}");
    }
    log.push('\n');
}

/// Validation AUC and mean gate at the deployment temperature, measured
/// on a snapshot of the current parameters. The baseline phase scores the
/// full bag. The evidence phase scores the *keep view*: the gated model is
/// the artifact being selected, and a full-view score would be blind to
/// gate collapse (all-closed gates leave the full view intact while the
/// kept evidence carries nothing, which the sparsity bonus would then
/// reward).
fn validation_point(
    model: &ReamilModel,
    val: &[BagRecord],
    num_classes: usize,
    temp_end: f64,
    select_z_weight: f64,
    epoch: usize,
    bag_step: usize,
) -> Result<EvalPoint, TrainError> {
    let mut snapshot = model.clone();
    snapshot.temperature = temp_end;
    let mut labels = Vec::with_capacity(val.len());
    let mut probs = Vec::with_capacity(val.len());
    let mut z_sum = 0.0;
    for bag in val {
        labels.push(bag.label());
        if snapshot.phase == Phase::Evidence {
            let sel = snapshot.selection(bag)?;
            let gates: Vec<f32> = sel.gates.iter().map(|&g| g as f32).collect();
            probs.push(snapshot.gated_probs(bag, &gates)?);
            z_sum += sel.gates.iter().sum::<f64>() / sel.gates.len() as f64;
        } else {
            probs.push(snapshot.predict_full(bag)?);
            z_sum += 1.0;
        }
    }
    let metrics = classification_metrics(&labels, &probs, num_classes)?;
    let mean_z = z_sum / val.len() as f64;
    let score = match snapshot.phase {
        Phase::Baseline => metrics.auc,
        Phase::Evidence => metrics.auc - select_z_weight * mean_z,
    };
    Ok(EvalPoint {
        epoch,
        bag_step,
        auc: metrics.auc,
        accuracy: metrics.accuracy,
        mean_z,
        score,
    })
}

/// Forward one bag in training mode and return the loss node and
/// per-bag log values. Baseline phase: plain cross entropy on the full
/// view. Evidence phase: three shared-gate views through the shared
/// backbone and the five-term objective.
fn training_loss<F>(
    model: &ReamilModel,
    bag: &BagRecord,
    cfg: &TrainConfig,
    temperature: f64,
    noise: &mut F,
) -> Result<(Tape<f32>, TapeBinding, crate::tape::NodeId, [f64; 9]), TrainError>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let mut tape = Tape::<f32>::new();
    let bind = TapeBinding::bind(&mut tape, &model.params);
    let feats = tape.constant(bag.features().clone());
    let norm = normalize_coords(bag.coords());
    let pos = if model.config.use_positional {
        let nc = tape.constant(norm.clone());
        Some(positional_term(&mut tape, &bind, nc)?)
    } else {
        None
    };

    match model.phase {
        Phase::Baseline => {
            let tokens = tokenize(&mut tape, &bind, feats, pos, None)?;
            let h = encode(&mut tape, &bind, &model.config, tokens)?;
            let logits = classify(&mut tape, &bind, &model.config, h)?;
            let loss = tape.cross_entropy(logits, bag.label()).map_err(ModelError::from)?;
            let probs = tape.softmax(logits, 0).map_err(ModelError::from)?;
            let p_full = tape.value(probs).data()[bag.label()] as f64;
            let l_full = tape.value(loss).scalar_value() as f64;
            // Baseline rows keep the full column set: no gates exist, so
            // the keep view is the full view, nothing is dropped, and
            // every tile counts as selected.
            Ok((tape, bind, loss, [l_full, 0.0, 0.0, 0.0, 0.0, l_full, p_full, 0.0, 1.0]))
        }
        Phase::Evidence => {
            let tokens_full = tokenize(&mut tape, &bind, feats, pos, None)?;
            let sel = select_logits(&mut tape, &bind, tokens_full)?;
            let noise_vals = noise(bag.n_tiles());
            let noise_arr = Array::vector(noise_vals);
            let gate_out = concrete_gate(&mut tape, sel, temperature, GateMode::FrozenNoise(&noise_arr))?;
            let keep_gates = gate_out.gates;
            let drop_gates = complement_gate(&mut tape, keep_gates)?;

            let h_full = encode(&mut tape, &bind, &model.config, tokens_full)?;
            let logits_full = classify(&mut tape, &bind, &model.config, h_full)?;

            let tokens_keep = tokenize(&mut tape, &bind, feats, pos, Some(keep_gates))?;
            let h_keep = encode(&mut tape, &bind, &model.config, tokens_keep)?;
            let logits_keep = classify(&mut tape, &bind, &model.config, h_keep)?;

            let tokens_drop = tokenize(&mut tape, &bind, feats, pos, Some(drop_gates))?;
            let h_drop = encode(&mut tape, &bind, &model.config, tokens_drop)?;
            let logits_drop = classify(&mut tape, &bind, &model.config, h_drop)?;

            let coords = tape.constant(norm);
            let inputs = ObjectiveInputs {
                logits_full,
                logits_keep,
                logits_drop,
                gates: keep_gates,
                coords,
                label: bag.label(),
            };
            let out = total_loss(&mut tape, &inputs, &cfg.loss)?;
            let b = out.breakdown;
            let mean_z = tape.value(keep_gates).data().iter().map(|&z| z as f64).sum::<f64>()
                / bag.n_tiles() as f64;
            Ok((
                tape,
                bind,
                out.total,
                [b.l_full, b.l_suff, b.l_excl, b.l_contig, b.l_budget, b.total, b.p_keep, b.p_drop, mean_z],
            ))
        }
    }
}

/// Runs epochs `state.next_epoch..cfg.epochs` of one phase (or up to
/// `until` when stopping early to save a resumable state). Learning-rate
/// and temperature schedules always span the full `cfg.epochs` plan, so
/// a stopped-and-resumed run retraces the uninterrupted one. Shared by
/// both phases and by resume.
pub fn run_phase(
    mut state: TrainerState,
    train: &[BagRecord],
    val: &[BagRecord],
    cfg: &TrainConfig,
    num_classes: usize,
    seed: u64,
    until: Option<usize>,
) -> Result<(TrainOutcome, TrainerState), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }

    let total_bags = cfg.epochs * train.len();
    let total_opt_steps = total_bags.div_ceil(cfg.grad_accum);
    let mut log = String::new();
    if state.next_epoch == 0 {
        log.push_str(TRAIN_LOG_HEADER);
        log.push('\n');
    }
    let mut evals = Vec::new();

    let stop_epoch = until.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in state.next_epoch..stop_epoch {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut order_rng = derived_rng(seed, "epoch-order", epoch as u64);
        order.shuffle(&mut order_rng);

        for idx in order {
            let bag = &train[idx];
            let temperature = temperature_at(state.bag_step, total_bags, cfg.temp_start, cfg.temp_end);
            let step_index = state.bag_step as u64;
            let mut noise_fn = |n: usize| -> Vec<f64> {
                let mut rng = derived_rng(seed, "gate-noise", step_index);
                (0..n)
                    .map(|_| {
                        let eps: f64 = rand::Rng::gen::<f64>(&mut rng).clamp(1e-6, 1.0 - 1e-6);
                        eps.ln() - (1.0 - eps).ln()
                    })
                    .collect()
            };
            let (mut tape, bind, loss, row) = training_loss(&state.model, bag, cfg, temperature, &mut noise_fn)?;
            state.bag_step += 1;
            if !row[5].is_finite() {
                return Err(TrainError::NonFinite {
                    step: state.bag_step,
                    slide_id: bag.slide_id().to_string(),
                });
            }
            log_row(&mut log, state.bag_step, epoch, row);

            tape.backward(loss).map_err(ModelError::from)?;
            let grads = bind.grads(&tape);
            let (mut acc, count) = match state.pending.take() {
                Some((mut acc, count)) => {
                    for (name, g) in grads.iter() {
                        let a = acc.get_mut(name).unwrap();
                        for (ai, gi) in a.data_mut().iter_mut().zip(g.data()) {
                            *ai += gi;
                        }
                    }
                    (acc, count + 1)
                }
                None => (grads, 1),
            };
            let group_full = count == cfg.grad_accum;
            // Partial groups flush at epoch ends so no gradient is
            // dropped and resume state never holds a half group.
            let epoch_ends_now = state.bag_step % train.len() == 0;
            if group_full || epoch_ends_now {
                if count > 1 {
                    let inv = 1.0 / count as f32;
                    for (_, g) in acc.iter_mut() {
                        for x in g.data_mut() {
                            *x *= inv;
                        }
                    }
                }
                clip_global_norm(&mut acc, cfg.clip_norm);
                let lr = cosine_lr(state.opt.step, total_opt_steps.saturating_sub(1), cfg.lr, cfg.lr_floor);
                let adamw = AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                };
                let scale = cfg.backbone_lr_scale;
                adamw_step_scaled(&mut state.model.params, &acc, &mut state.opt, &adamw, lr, |name| {
                    if name.starts_with("sel.") {
                        1.0
                    } else {
                        scale
                    }
                });
            } else {
                state.pending = Some((acc, count));
            }
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last_epoch {
            let point = validation_point(
                &state.model,
                val,
                num_classes,
                cfg.temp_end,
                cfg.select_z_weight,
                epoch,
                state.bag_step,
            )?;
            log::info!(
                "val epoch {} auc {:.4} acc {:.4} mean_z {:.4} score {:.4}",
                point.epoch,
                point.auc,
                point.accuracy,
                point.mean_z,
                point.score
            );
            if point.score > state.best_score {
                state.best_score = point.score;
                state.best_epoch = epoch;
                state.best_params = state.model.params.clone();
            }
            evals.push(point);
        }
    }
    state.next_epoch = stop_epoch;
    state.pending = None;

    let mut best_model = state.model.clone();
    best_model.params = state.best_params.clone();
    best_model.temperature = cfg.temp_end;
    let outcome = TrainOutcome {
        model: best_model,
        best_score: state.best_score,
        best_epoch: state.best_epoch,
        log,
        evals,
    };
    Ok((outcome, state))
}

/// Phase one: cross-entropy training of a freshly initialized backbone.
/// Returns the best-validation-AUC model.
pub fn train_baseline(
    train: &[BagRecord],
    val: &[BagRecord],
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    num_classes: usize,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let model = ReamilModel::new_baseline(backbone.clone(), seed)?;
    let state = TrainerState::fresh(model);
    let (outcome, _) = run_phase(state, train, val, cfg, num_classes, seed, None)?;
    Ok(outcome)
}

/// Phase two: attach a fresh selection head to a baseline model and
/// train the five-term objective with annealed gate temperature.
/// Returns the best model by `AUC - select_z_weight * mean z`.
pub fn train_reamil(
    train: &[BagRecord],
    val: &[BagRecord],
    baseline: &ReamilModel,
    cfg: &TrainConfig,
    num_classes: usize,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let mut model = baseline.clone();
    model.attach_selection_head(seed)?;
    model.temperature = cfg.temp_end;
    let state = TrainerState::fresh(model);
    let (outcome, _) = run_phase(state, train, val, cfg, num_classes, seed, None)?;
    Ok(outcome)
}

/// Full evaluation bundle for one split.
pub struct MetricsBundle {
    pub classification: ClassificationMetrics,
    /// Slide id, label, predicted class probabilities.
    pub predictions: Vec<(String, usize, Vec<f64>)>,
    /// Evidence diagnostics; present for evidence-phase models only.
    pub evidence: Option<EvidenceBundle>,
}

pub struct EvidenceBundle {
    pub rows: Vec<SlideEvidenceRow>,
    pub summary: EvidenceSummary,
    pub curves: Vec<KCurve>,
}

/// Evaluates a model on a split: classification metrics always, the
/// evidence report and K-curves when the model carries a selection
/// head. Pure: repeated calls return identical bundles.
pub fn evaluate(
    model: &ReamilModel,
    bags: &[BagRecord],
    num_classes: usize,
    grid_dense_max: usize,
    tau: f64,
) -> Result<MetricsBundle, TrainError> {
    if bags.is_empty() {
        return Err(TrainError::EmptySplit { split: "eval" });
    }
    let mut labels = Vec::with_capacity(bags.len());
    let mut probs = Vec::with_capacity(bags.len());
    let mut predictions = Vec::with_capacity(bags.len());
    for bag in bags {
        let p = model.predict_full(bag)?;
        labels.push(bag.label());
        predictions.push((bag.slide_id().to_string(), bag.label(), p.clone()));
        probs.push(p);
    }
    let classification = classification_metrics(&labels, &probs, num_classes)?;

    let evidence = if model.phase == Phase::Evidence {
        let mut rows = Vec::with_capacity(bags.len());
        let mut curves = Vec::with_capacity(bags.len());
        for bag in bags {
            let grid = crate::metrics::k_grid(bag.n_tiles(), grid_dense_max);
            let (row, curve) = model.evidence_row(bag, &grid, tau)?;
            rows.push(row);
            curves.push(curve);
        }
        let summary = crate::metrics::summarize(&rows)?;
        Some(EvidenceBundle { rows, summary, curves })
    } else {
        None
    };

    Ok(MetricsBundle {
        classification,
        predictions,
        evidence,
    })
}


/// Finite-difference audit of the complete five-term objective: builds
/// the three-view graph in f64 on synthetic inputs with frozen gate
/// noise, then checks every parameter group (backbone, positional map,
/// classifier, and selection head) against central differences.
pub fn full_objective_gradcheck(
    backbone: &BackboneConfig,
    weights: &LossWeights,
    n_tiles: usize,
    temperature: f64,
    seed: u64,
    settings: GradCheckSettings,
) -> Result<GradCheckReport, GradCheckError> {
    backbone
        .validate()
        .map_err(|e| GradCheckError::Model(e.to_string()))?;
    let mut params = {
        let mut rng = derived_rng(seed, "init-backbone", 0);
        crate::backbone::init_backbone_params(backbone, &mut rng).cast::<f64>()
    };
    {
        let mut rng = derived_rng(seed, "init-head", 0);
        params.extend(crate::evidence::init_evidence_params(backbone.d_model, &mut rng).cast::<f64>());
    }

    let feats = Array::<f64>::from_fn([n_tiles, backbone.d_in], |i| ((i as f64) * 0.83).sin());
    let coords = Array::<f64>::from_fn([n_tiles, 2], |i| ((i as f64) * 1.7).cos() * 250.0 + 300.0);
    let noise = Array::<f64>::from_fn([n_tiles], |i| ((i as f64) * 0.91 + 0.3).sin() * 2.0);
    let label = 1usize;

    let eval = |p: &ParamSet<f64>, with_grads: bool| -> Result<Evaluation, GradCheckError> {
        let model_err = |e: ModelError| GradCheckError::Model(e.to_string());
        let mut tape = Tape::<f64>::new();
        let bind = TapeBinding::bind(&mut tape, p);
        let f = tape.constant(feats.clone());
        let norm = normalize_coords(&coords);
        let pos = if backbone.use_positional {
            let nc = tape.constant(norm.clone());
            Some(positional_term(&mut tape, &bind, nc).map_err(model_err)?)
        } else {
            None
        };

        let tokens_full = tokenize(&mut tape, &bind, f, pos, None).map_err(model_err)?;
        let sel = select_logits(&mut tape, &bind, tokens_full).map_err(model_err)?;
        let gate_out = concrete_gate(&mut tape, sel, temperature, GateMode::FrozenNoise(&noise))
            .map_err(model_err)?;
        let keep = gate_out.gates;
        let drop = complement_gate(&mut tape, keep).map_err(model_err)?;

        let h_full = encode(&mut tape, &bind, backbone, tokens_full).map_err(model_err)?;
        let logits_full = classify(&mut tape, &bind, backbone, h_full).map_err(model_err)?;
        let tokens_keep = tokenize(&mut tape, &bind, f, pos, Some(keep)).map_err(model_err)?;
        let h_keep = encode(&mut tape, &bind, backbone, tokens_keep).map_err(model_err)?;
        let logits_keep = classify(&mut tape, &bind, backbone, h_keep).map_err(model_err)?;
        let tokens_drop = tokenize(&mut tape, &bind, f, pos, Some(drop)).map_err(model_err)?;
        let h_drop = encode(&mut tape, &bind, backbone, tokens_drop).map_err(model_err)?;
        let logits_drop = classify(&mut tape, &bind, backbone, h_drop).map_err(model_err)?;

        let coords_node = tape.constant(norm);
        let out = total_loss(
            &mut tape,
            &ObjectiveInputs {
                logits_full,
                logits_keep,
                logits_drop,
                gates: keep,
                coords: coords_node,
                label,
            },
            weights,
        )
        .map_err(model_err)?;
        let loss_v = tape.value(out.total).scalar_value();
        let grads = if with_grads {
            tape.backward(out.total)
                .map_err(|e| GradCheckError::Model(e.to_string()))?;
            Some(bind.grads(&tape))
        } else {
            None
        };
        Ok(Evaluation {
            loss: loss_v,
            kink_margins: out.kink_margins,
            grads,
        })
    };

    gradcheck(&params, eval, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_full_objective_passes_the_finite_difference_audit() {
        let backbone = BackboneConfig {
            d_in: 4,
            d_model: 8,
            heads: 2,
            layers: 1,
            num_classes: 2,
            use_positional: true,
        };
        let report = full_objective_gradcheck(
            &backbone,
            &LossWeights::default(),
            4,
            0.7,
            5,
            GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(
            report.groups.iter().any(|g| g.name.starts_with("sel.")),
            "selection head must be audited too"
        );
    }
    use crate::data::synth::{gen_bag, SynthConfig};

    fn quick_synth(n_bags: usize, seed: u64) -> Vec<BagRecord> {
        let cfg = SynthConfig {
            tiles_per_bag: 12,
            feature_dim: 8,
            evidence_tiles: 3,
            seed,
            ..SynthConfig::default()
        };
        let means = crate::data::synth::class_means(&cfg);
        (0..n_bags).map(|i| gen_bag(&cfg, &means, i).bag).collect()
    }

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            d_in: 8,
            d_model: 16,
            heads: 2,
            layers: 1,
            num_classes: 2,
            use_positional: true,
        }
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut params = ParamSet::new();
        params.insert("w", Array::vector(vec![1.0f32]));
        let mut grads = ParamSet::new();
        grads.insert("w", Array::vector(vec![0.5f32]));
        let mut state = OptimizerState::new(&params);
        let cfg = AdamWConfig::default();
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.01);
        // After bias correction the first update is lr * g / (|g| + eps),
        // i.e. almost exactly lr in the gradient's direction.
        let got = params.get("w").unwrap().data()[0];
        assert!((got - (1.0 - 0.01)).abs() < 1e-6, "{got}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let mut params = ParamSet::new();
        params.insert("w", Array::vector(vec![3.0f32, -2.0]));
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        let cfg = AdamWConfig::default();
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.5);
        assert_eq!(params.get("w").unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled_from_moments() {
        let mut params = ParamSet::new();
        params.insert("w", Array::vector(vec![2.0f32]));
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        adamw_step(&mut params, &grads, &mut state, &cfg, 0.5);
        // Zero gradient: the only movement is -lr * wd * w.
        let got = params.get("w").unwrap().data()[0];
        assert!((got - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-6, "{got}");
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints_and_decreases() {
        let total = 100;
        assert_eq!(cosine_lr(0, total, 1e-3, 1e-5), 1e-3);
        let end = cosine_lr(total, total, 1e-3, 1e-5);
        assert!((end - 1e-5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, 1e-3, 1e-5);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn temperature_anneals_exponentially_to_the_end_value() {
        assert_eq!(temperature_at(0, 100, 1.0, 0.1), 1.0);
        let end = temperature_at(99, 100, 1.0, 0.1);
        assert!((end - 0.1).abs() < 1e-12);
        let mid = temperature_at(49, 99, 1.0, 0.1); // halfway in log space
        assert!((mid - (0.1f64).sqrt() * 1.0).abs() < 1e-9, "{mid}");
    }

    #[test]
    fn clipping_preserves_direction_and_caps_norm() {
        let mut grads = ParamSet::new();
        grads.insert("a", Array::vector(vec![3.0f32, 4.0]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let d = grads.get("a").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-6);
        assert!((d[1] - 0.8).abs() < 1e-6);
        let after = grads.global_norm();
        assert!((after - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_is_an_error_not_a_noop() {
        let bags = quick_synth(4, 5);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::baseline_defaults()
        };
        let err = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 1).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn empty_split_is_an_error() {
        let bags = quick_synth(4, 6);
        let cfg = TrainConfig::baseline_defaults();
        let err = train_baseline(&[], &bags, &tiny_backbone(), &cfg, 2, 1).unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit { split: "train" }));
    }

    #[test]
    fn baseline_loss_decreases_over_early_steps() {
        let bags = quick_synth(24, 7);
        let cfg = TrainConfig {
            epochs: 4,
            eval_every: 4,
            ..TrainConfig::baseline_defaults()
        };
        let out = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 11).unwrap();
        let losses: Vec<f64> = out
            .log
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(losses.len() >= 50, "need at least 50 steps, got {}", losses.len());
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "moving average should fall: {first} -> {last}");
    }

    #[test]
    fn same_seed_reproduces_identical_checkpoint_bytes() {
        let bags = quick_synth(10, 8);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::baseline_defaults()
        };
        let a = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 21).unwrap();
        let b = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 21).unwrap();
        let bytes_a = checkpoint::encode(&a.model.to_tensors()).unwrap();
        let bytes_b = checkpoint::encode(&b.model.to_tensors()).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(a.log, b.log);

        let c = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 22).unwrap();
        let bytes_c = checkpoint::encode(&c.model.to_tensors()).unwrap();
        assert_ne!(bytes_a, bytes_c, "different seeds should diverge");
    }

    #[test]
    fn evidence_phase_runs_and_logs_all_columns() {
        let bags = quick_synth(10, 9);
        let base_cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::baseline_defaults()
        };
        let base = train_baseline(&bags, &bags, &tiny_backbone(), &base_cfg, 2, 31).unwrap();
        let ev_cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::evidence_defaults()
        };
        let out = train_reamil(&bags, &bags, &base.model, &ev_cfg, 2, 31).unwrap();
        assert_eq!(out.model.phase, Phase::Evidence);
        let mut lines = out.log.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER);
        let first = lines.next().unwrap();
        assert_eq!(first.split_whitespace().count(), 11);
        // Budget column is live in the evidence phase.
        let budget: f64 = first.split_whitespace().nth(6).unwrap().parse().unwrap();
        assert!(budget > 0.0);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bit_for_bit() {
        let bags = quick_synth(8, 10);
        let backbone = tiny_backbone();
        let cfg = TrainConfig {
            epochs: 4,
            eval_every: 1,
            ..TrainConfig::baseline_defaults()
        };
        let seed = 41;

        // Uninterrupted run.
        let straight = train_baseline(&bags, &bags, &backbone, &cfg, 2, seed).unwrap();

        // Interrupted at epoch 2, saved, reloaded, finished.
        let model = ReamilModel::new_baseline(backbone.clone(), seed).unwrap();
        let state = TrainerState::fresh(model);
        let (_, state) = run_phase(state, &bags, &bags, &cfg, 2, seed, Some(2)).unwrap();
        assert_eq!(state.next_epoch, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        state.save(&path).unwrap();
        let resumed_state = TrainerState::load(&path).unwrap();
        let (resumed, _) = run_phase(resumed_state, &bags, &bags, &cfg, 2, seed, None).unwrap();

        let a = checkpoint::encode(&straight.model.to_tensors()).unwrap();
        let b = checkpoint::encode(&resumed.model.to_tensors()).unwrap();
        assert_eq!(a, b, "resumed checkpoint must match the straight run");
        assert_eq!(straight.best_score.to_bits(), resumed.best_score.to_bits());
    }

    #[test]
    fn warm_start_preserves_baseline_predictions_at_step_zero() {
        let bags = quick_synth(8, 11);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::baseline_defaults()
        };
        let base = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 51).unwrap();
        let mut warm = base.model.clone();
        warm.attach_selection_head(51).unwrap();
        // Before any evidence-phase step the backbone is untouched, so
        // full-bag predictions and therefore validation AUC are equal.
        for bag in &bags {
            let a = base.model.predict_full(bag).unwrap();
            let b = warm.predict_full(bag).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradient_accumulation_changes_step_count_not_api() {
        let bags = quick_synth(6, 12);
        let cfg = TrainConfig {
            epochs: 1,
            grad_accum: 3,
            ..TrainConfig::baseline_defaults()
        };
        let out = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 61).unwrap();
        assert_eq!(out.log.lines().count() - 1, 6);
    }

    #[test]
    fn evaluation_is_pure_and_phase_gated() {
        let bags = quick_synth(6, 13);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::baseline_defaults()
        };
        let base = train_baseline(&bags, &bags, &tiny_backbone(), &cfg, 2, 71).unwrap();
        let a = evaluate(&base.model, &bags, 2, 8, 0.9).unwrap();
        let b = evaluate(&base.model, &bags, 2, 8, 0.9).unwrap();
        assert_eq!(a.classification, b.classification);
        assert!(a.evidence.is_none(), "baseline has no evidence metrics");

        let ev_cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::evidence_defaults()
        };
        let ev = train_reamil(&bags, &bags, &base.model, &ev_cfg, 2, 71).unwrap();
        let bundle = evaluate(&ev.model, &bags, 2, 8, 0.9).unwrap();
        let evb = bundle.evidence.expect("evidence metrics present");
        assert_eq!(evb.rows.len(), 6);
        assert_eq!(evb.curves.len(), 6);
    }
}
