//! The pretraining loop: views, mixup, student/teacher passes, contrastive
//! loss, SGD, momentum teacher and queue maintenance.
//!
//! Random draws are keyed by coordinates rather than taken from a running
//! generator. Step `k` uses `RngKey { seed, iteration: k, .. }`; the two
//! augmented views differ in the `batch` slot (1 and 2) and images in the
//! `sample` slot. Epoch shuffles use `iteration = epoch` with the shuffle
//! purpose. A run can therefore resume at any epoch boundary from
//! parameters, queue and counters alone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::batch::{FeatureBatch, ImageBatch, Provenance};
use crate::contrast::{self, info_nce_on_tape, top1_index0, ContrastTerm, MemoryQueue};
use crate::encoder::{attach_gradients, clone_params, encode, init_params, EncoderConfig, NetworkParams, Role};
use crate::error::{Error, Result};
use crate::mixup::{self, batch_mixup, feature_mixup, pairwise_mixup, sample_mixspec};
use crate::numerics::ops::Reduction;
use crate::numerics::{Sgd, Tape, Tensor, Var};
use crate::rng::{Purpose, RngKey};

/// Which mixing arm of the method to train with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixupMode {
    /// Plain two-view contrast, `loss_A` only.
    #[serde(rename = "none")]
    None,
    /// Per-image λ drawn independently for each view; contrast on the mixed
    /// views only.
    #[serde(rename = "traditional")]
    Traditional,
    /// One shared λ and permutation for both views; contrast on the mixed
    /// views only.
    #[serde(rename = "batch")]
    Batch,
    /// `loss_A` plus the mixed-view term of `loss_M`.
    #[serde(rename = "batch+loss_M")]
    BatchLossM,
    /// `loss_A` plus both `loss_M` terms, including feature mixup.
    #[default]
    #[serde(rename = "batch+feature+loss_M")]
    Full,
}

impl MixupMode {
    pub const ALL: [MixupMode; 5] = [
        MixupMode::None,
        MixupMode::Traditional,
        MixupMode::Batch,
        MixupMode::BatchLossM,
        MixupMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixupMode::None => "none",
            MixupMode::Traditional => "traditional",
            MixupMode::Batch => "batch",
            MixupMode::BatchLossM => "batch+loss_M",
            MixupMode::Full => "batch+feature+loss_M",
        }
    }

    fn uses_plain_views(self) -> bool {
        matches!(self, MixupMode::None | MixupMode::BatchLossM | MixupMode::Full)
    }
}

impl fmt::Display for MixupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixupMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = MixupMode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown mixup mode {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Teacher momentum.
    pub theta: f64,
    /// Softmax temperature.
    pub tau: f64,
    pub batch_size: usize,
    pub queue_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs at whose start the learning rate is divided by 10. When absent,
    /// 50%, 66.7% and 83.3% of `epochs`.
    pub lr_drop_epochs: Option<Vec<usize>>,
    pub seed: u64,
    pub loss_reduction: Reduction,
    pub mixup: MixupMode,
    /// Heavy-ball momentum for the student optimizer. Zero means plain SGD.
    pub sgd_momentum: f64,
    /// Check every intermediate tensor for NaN/Inf, not just losses and
    /// parameters.
    pub check_finite: bool,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            theta: 0.999,
            tau: 0.2,
            batch_size: 32,
            queue_len: 2048,
            epochs: 60,
            lr: 0.03,
            weight_decay: 1e-4,
            lr_drop_epochs: None,
            seed: 0,
            loss_reduction: Reduction::Mean,
            mixup: MixupMode::Full,
            sgd_momentum: 0.0,
            check_finite: false,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config(format!("theta must be in [0, 1], got {}", self.theta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("sgd_momentum must be in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.queue_len < self.batch_size {
            return Err(Error::config(format!(
                "queue_len {} is smaller than one insert of {} vectors",
                self.queue_len, self.batch_size
            )));
        }
        if let Some(drops) = &self.lr_drop_epochs {
            if drops.windows(2).any(|w| w[0] >= w[1]) || drops.iter().any(|&d| d >= self.epochs) {
                return Err(Error::config(format!(
                    "lr_drop_epochs {drops:?} must be strictly increasing and below epochs {}",
                    self.epochs
                )));
            }
        }
        self.encoder.validate()?;
        self.augment.validate()
    }

    /// Vectors pushed into the queue per step.
    pub fn inserts_per_step(&self) -> usize {
        let views = match self.mixup {
            MixupMode::None | MixupMode::Traditional | MixupMode::Batch => 1,
            MixupMode::BatchLossM => 2,
            MixupMode::Full => 3,
        };
        views * self.batch_size
    }

    /// Resolved drop epochs. Proportional defaults that collide on short runs
    /// are merged, and drops at epoch 0 are skipped.
    pub fn drop_epochs(&self) -> Vec<usize> {
        match &self.lr_drop_epochs {
            Some(d) => d.clone(),
            None => {
                let e = self.epochs as f64;
                let mut d: Vec<usize> = [0.5, 2.0 / 3.0, 5.0 / 6.0]
                    .iter()
                    .map(|f| (e * f).round() as usize)
                    .filter(|&x| x > 0 && x < self.epochs)
                    .collect();
                d.dedup();
                d
            }
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs().iter().filter(|&&d| d <= epoch).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// `teacher ← θ·teacher + (1−θ)·student`, elementwise.
pub fn momentum_update(teacher: &mut NetworkParams, student: &NetworkParams, theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::config(format!("theta must be in [0, 1], got {theta}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::config("teacher and student have different parameter counts"));
    }
    for ((tn, t), (sn, s)) in teacher.iter().zip(student.iter()) {
        if tn != sn || t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "momentum_update",
                left: t.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
    }
    let keep = theta as f32;
    let take = (1.0 - theta) as f32;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = keep * *tv + take * sv;
        }
    }
    Ok(())
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    pub queue: MemoryQueue,
    /// Steps completed so far.
    pub iteration: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Sgd,
}

impl TrainState {
    /// Fresh student from `seed`, teacher as its exact copy, random queue.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let student: NetworkParams = init_params(&config.encoder, config.seed)?;
        let teacher = clone_params(&student, Role::Teacher);
        let mut rng = RngKey::new(config.seed).purpose(Purpose::Queue).stream();
        let queue = MemoryQueue::init(config.queue_len, config.encoder.feature_dim, &mut rng)?;
        Ok(TrainState {
            student,
            teacher,
            queue,
            iteration: 0,
            epoch: 0,
            seed: config.seed,
            optimizer: Sgd::new(config.sgd_momentum as f32),
        })
    }

    pub fn step_key(&self) -> RngKey {
        RngKey::new(self.seed).iteration(self.iteration)
    }
}

/// Per-step record. Loss terms a mode does not compute are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "loss_A")]
    pub loss_a: Option<f64>,
    #[serde(rename = "loss_M")]
    pub loss_m: Option<f64>,
    pub top1: f64,
}

/// Detached teacher outputs of one step, in queue insertion order.
#[derive(Clone, Debug)]
pub struct StepFeatures {
    pub inserted: Vec<FeatureBatch>,
}

fn split_rows(t: &Tensor<f32>, first: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = t.shape()[1];
    let (a, b) = t.data().split_at(first * d);
    Ok((
        Tensor::new(&[first, d], a.to_vec())?,
        Tensor::new(&[t.rows() - first, d], b.to_vec())?,
    ))
}

/// Teacher features for a stack of views, one batch per view.
fn teacher_features(
    teacher: &NetworkParams,
    views: &[(&ImageBatch, Provenance)],
    check_finite: bool,
) -> Result<Vec<FeatureBatch>> {
    let mut stacked = views[0].0.clone();
    for (v, _) in &views[1..] {
        stacked = stacked.concat(v)?;
    }
    let mut tape = Tape::with_finite_checks(check_finite);
    let vars = encode(&mut tape, teacher, stacked.tensor())?;
    if tape.requires_grad(vars.features) {
        return Err(Error::TeacherGradient("teacher forward"));
    }
    let mut rest = tape.value(vars.features).clone();
    let mut out = Vec::with_capacity(views.len());
    for (i, (v, tag)) in views.iter().enumerate() {
        let (head, tail) = if i + 1 == views.len() {
            (rest.clone(), rest.clone())
        } else {
            split_rows(&rest, v.len())?
        };
        out.push(FeatureBatch::new(head, *tag)?);
        rest = tail;
    }
    Ok(out)
}

/// One training step on `batch`. See the module docs for how randomness is
/// keyed. Order: views, mixup, student pass, teacher pass, loss, backward,
/// SGD on the student, momentum update, queue insert.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch, config: &TrainConfig) -> Result<StepMetrics> {
    train_step_traced(state, batch, config).map(|(m, _)| m)
}

/// As [`train_step`], also returning the teacher features that went into
/// the queue, in insertion order.
pub fn train_step_traced(
    state: &mut TrainState,
    batch: &ImageBatch,
    config: &TrainConfig,
) -> Result<(StepMetrics, StepFeatures)> {
    let iteration = state.iteration;
    let lr = config.lr_at(state.epoch);
    run_step(state, batch, config, lr).map_err(|e| match e {
        e @ (Error::NonFinite { .. } | Error::DegenerateRow { .. }) => Error::Diverged {
            iteration,
            source: Box::new(e),
        },
        e => e,
    })
}

fn run_step(
    state: &mut TrainState,
    batch: &ImageBatch,
    config: &TrainConfig,
    lr: f64,
) -> Result<(StepMetrics, StepFeatures)> {
    let z = batch.len();
    if z < 2 {
        return Err(Error::config(format!("a training batch needs at least 2 images, got {z}")));
    }
    let key = state.step_key();
    let x1a = augment_batch(batch, key.batch(1).purpose(Purpose::AugmentView1), &config.augment)?;
    let x2a = augment_batch(batch, key.batch(2).purpose(Purpose::AugmentView2), &config.augment)?;

    let mut mix_rng = key.purpose(Purpose::MixSpec).stream();
    let mixed = match config.mixup {
        MixupMode::None => None,
        MixupMode::Traditional => {
            let perm = mixup::sample_perm(z, &mut mix_rng);
            let l1 = mixup::sample_lambdas(z, &mut mix_rng);
            let l2 = mixup::sample_lambdas(z, &mut mix_rng);
            Some((pairwise_mixup(&x1a, &l1, &perm)?, pairwise_mixup(&x2a, &l2, &perm)?, None))
        }
        _ => {
            let spec = sample_mixspec(z, &mut mix_rng)?;
            Some((batch_mixup(&x1a, &spec)?, batch_mixup(&x2a, &spec)?, Some(spec)))
        }
    };

    // student: plain and mixed views share one pass (group norm is per image)
    let plain = config.mixup.uses_plain_views();
    let student_input = match (&mixed, plain) {
        (Some((x1m, _, _)), true) => x1a.concat(x1m)?,
        (Some((x1m, _, _)), false) => x1m.clone(),
        (None, _) => x1a.clone(),
    };
    let mut tape = Tape::with_finite_checks(config.check_finite);
    let vars = encode(&mut tape, &state.student, student_input.tensor())?;
    let feats = vars.features;

    let mut teacher_views: Vec<(&ImageBatch, Provenance)> = Vec::new();
    if plain {
        teacher_views.push((&x2a, Provenance::V2A));
    }
    if let Some((_, x2m, _)) = &mixed {
        teacher_views.push((x2m, Provenance::V2M));
    }
    let mut teacher = teacher_features(&state.teacher, &teacher_views, config.check_finite)?;
    for f in &teacher {
        contrast::ensure_detached(f)?;
    }

    let q = tape.constant(state.queue.as_tensor())?;
    let (tau, red) = (config.tau, config.loss_reduction);
    let constant = |tape: &mut Tape, f: &FeatureBatch| tape.constant(f.tensor().clone());
    let (loss_a, loss_m, top_term): (Option<ContrastTerm>, Option<Var>, ContrastTerm) = match config.mixup {
        MixupMode::None => {
            let v2a = constant(&mut tape, &teacher[0])?;
            let a = info_nce_on_tape(&mut tape, feats, v2a, q, tau, red)?;
            (Some(a), None, a)
        }
        MixupMode::Traditional | MixupMode::Batch => {
            let v2m = constant(&mut tape, &teacher[0])?;
            let m = info_nce_on_tape(&mut tape, feats, v2m, q, tau, red)?;
            (None, Some(m.loss), m)
        }
        MixupMode::BatchLossM | MixupMode::Full => {
            let v1a = tape.slice_rows(feats, 0, z)?;
            let v1m = tape.slice_rows(feats, z, z)?;
            let v2a = constant(&mut tape, &teacher[0])?;
            let v2m = constant(&mut tape, &teacher[1])?;
            let a = info_nce_on_tape(&mut tape, v1a, v2a, q, tau, red)?;
            let m1 = info_nce_on_tape(&mut tape, v1m, v2m, q, tau, red)?;
            let loss_m = if config.mixup == MixupMode::Full {
                let spec = mixed.as_ref().and_then(|m| m.2.as_ref()).expect("batch modes carry a spec");
                let vm = feature_mixup(&teacher[0], spec)?;
                let vm_var = constant(&mut tape, &vm)?;
                teacher.push(vm);
                let m2 = info_nce_on_tape(&mut tape, v1m, vm_var, q, tau, red)?;
                tape.add(m1.loss, m2.loss)?
            } else {
                m1.loss
            };
            (Some(a), Some(loss_m), a)
        }
    };
    let total = match (loss_a, loss_m) {
        (Some(a), Some(m)) => tape.add(a.loss, m)?,
        (Some(a), None) => a.loss,
        (None, Some(m)) => m,
        (None, None) => unreachable!("every mode has a loss"),
    };
    let value = |v: Var| -> Result<f64> {
        let x = tape.value(v).item()? as f64;
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "contrastive loss" });
        }
        Ok(x)
    };
    let metrics = StepMetrics {
        step: state.iteration,
        epoch: state.epoch,
        lr,
        loss_a: loss_a.map(|a| value(a.loss)).transpose()?,
        loss_m: loss_m.map(value).transpose()?,
        top1: top1_index0(tape.value(top_term.logits)),
    };
    value(total)?;

    let teacher_before = state.teacher.checksum();
    let mut grads = tape.backward(total)?;
    attach_gradients(&mut state.student, &vars, &mut grads)?;
    drop(tape);
    if state.teacher.checksum() != teacher_before {
        return Err(Error::TeacherGradient("teacher changed during backward"));
    }
    state
        .optimizer
        .step(state.student.iter_mut(), lr as f32, config.weight_decay as f32)?;
    if state.student.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite { op: "student update" });
    }
    momentum_update(&mut state.teacher, &state.student, config.theta)?;
    for f in &teacher {
        state.queue.insert(f)?;
    }
    state.iteration += 1;
    Ok((metrics, StepFeatures { inserted: teacher }))
}

/// What to do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks for metrics sinks and checkpoint writers.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    /// Called after every completed epoch, with `state.epoch` already
    /// advanced. Returning [`Control::Stop`] ends training early.
    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<Control> {
        Ok(Control::Continue)
    }
}

impl TrainObserver for () {}

/// Collects step metrics in memory.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog(pub Vec<StepMetrics>);

impl TrainObserver for MetricsLog {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        self.0.push(m.clone());
        Ok(())
    }
}

/// Image order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed).iteration(epoch as u64).purpose(Purpose::Shuffle).stream());
    order
}

/// Runs the remaining epochs of `state` (or a fresh state) over `data`.
/// Each epoch visits a seeded permutation of the images; the last partial
/// batch is dropped.
pub fn train(
    config: &TrainConfig,
    data: &ImageBatch,
    state: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    config.validate()?;
    let z = config.batch_size;
    if data.len() < z {
        return Err(Error::config(format!(
            "dataset of {} images is smaller than one batch of {z}",
            data.len()
        )));
    }
    let mut state = match state {
        Some(s) => {
            check_resumable(&s, config)?;
            s
        }
        None => TrainState::new(config)?,
    };
    let steps = data.len() / z;
    while state.epoch < config.epochs {
        let order = epoch_order(config.seed, state.epoch, data.len());
        for chunk in order.chunks_exact(z).take(steps) {
            let batch = data.select(chunk)?;
            let m = train_step(&mut state, &batch, config)?;
            observer.on_step(&m)?;
        }
        state.epoch += 1;
        if observer.on_epoch_end(&state)? == Control::Stop {
            break;
        }
    }
    Ok(state)
}

fn check_resumable(state: &TrainState, config: &TrainConfig) -> Result<()> {
    if state.student.config() != &config.encoder || state.teacher.config() != &config.encoder {
        return Err(Error::Checkpoint("encoder config differs from the checkpoint".into()));
    }
    if state.seed != config.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint seed {} differs from configured seed {}",
            state.seed, config.seed
        )));
    }
    if state.queue.capacity() != config.queue_len || state.queue.dim() != config.encoder.feature_dim {
        return Err(Error::Checkpoint("queue shape differs from the configuration".into()));
    }
    if state.student.role() != Role::Student || state.teacher.role() != Role::Teacher {
        return Err(Error::Checkpoint("checkpoint roles are inconsistent".into()));
    }
    Ok(())
}
