//! Downstream evaluation: AUROC, frozen-feature linear probe and full
//! fine-tuning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::encoder::{clone_params, encode, NetworkParams, Role};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, Reduction};
use crate::numerics::{sgd_step, Tape, Tensor};
use crate::rng::{Purpose, RngKey};

/// Area under the ROC curve with half credit for ties, computed from
/// mid-ranks after sorting.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::config("auroc labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps mid-ranks integral
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum += mid2 * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Images with a `Z × C` binary label matrix.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: ImageBatch,
    pub labels: Vec<Vec<u8>>,
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn new(images: ImageBatch, labels: Vec<Vec<u8>>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::config(format!(
                "{} images but {} label rows",
                images.len(),
                labels.len()
            )));
        }
        let c = class_names.len();
        if c == 0 {
            return Err(Error::config("a labeled set needs at least one class"));
        }
        if let Some(row) = labels.iter().find(|r| r.len() != c || r.iter().any(|&v| v > 1)) {
            return Err(Error::config(format!("label row {row:?} is not a 0/1 vector of length {c}")));
        }
        Ok(LabeledSet {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn column(&self, class: usize) -> Vec<u8> {
        self.labels.iter().map(|r| r[class]).collect()
    }

    fn targets(&self, rows: &[usize]) -> Result<Tensor<f64>> {
        let c = self.num_classes();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&i| self.labels[i].iter().map(|&v| v as f64))
            .collect();
        Tensor::new(&[rows.len(), c], data)
    }
}

/// Which encoder output the probe reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeatures {
    /// Pooled convolutional features before the projection head.
    #[default]
    Backbone,
    /// Unit-norm projection-head output.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub features: ProbeFeatures,
    /// Standardize features with the training-set mean and deviation.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            weight_decay: 0.0,
            batch_size: 32,
            features: ProbeFeatures::Backbone,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// AUROC of one class; `None` when the test labels are single-valued.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassResult>,
    /// Mean over classes with a defined AUROC.
    pub mean: Option<f64>,
    pub split: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn undefined_classes(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .filter(|c| c.auroc.is_none())
            .map(|c| c.class.as_str())
            .collect()
    }

    /// Rows `class,auroc,split,seed`; undefined values are left empty.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            let v = c.auroc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", c.class, v, self.split, self.seed);
        }
        out
    }

    pub const CSV_HEADER: &'static str = "class,auroc,split,seed";
}

/// Scores `[n × C]` against the set's labels.
pub fn score_report(scores: &Tensor<f64>, set: &LabeledSet, split: &str, seed: u64) -> Result<EvalReport> {
    let c = set.num_classes();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let col: Vec<f64> = scores.data().iter().skip(k).step_by(c).copied().collect();
        let value = match auroc(&col, &set.column(k)) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => {
                log::warn!("class {} has a single label value in {split}; AUROC undefined", set.class_names[k]);
                None
            }
            Err(e) => return Err(e),
        };
        per_class.push(ClassResult {
            class: set.class_names[k].clone(),
            auroc: value,
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|r| r.auroc).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        per_class,
        mean,
        split: split.to_string(),
        seed,
    })
}

const EXTRACT_CHUNK: usize = 64;

/// Frozen features of every image, `[n × F]`.
pub fn extract_features(params: &NetworkParams, images: &ImageBatch, which: ProbeFeatures) -> Result<Tensor<f64>> {
    let frozen = clone_params(params, Role::Teacher);
    let mut data = Vec::new();
    let mut width = 0;
    let all: Vec<usize> = (0..images.len()).collect();
    for chunk in all.chunks(EXTRACT_CHUNK) {
        let part = images.select(chunk)?;
        let mut tape = Tape::<f32>::with_finite_checks(true);
        let vars = encode(&mut tape, &frozen, part.tensor())?;
        let v = match which {
            ProbeFeatures::Backbone => vars.backbone,
            ProbeFeatures::Projection => vars.features,
        };
        let t = tape.value(v);
        width = t.shape()[1];
        data.extend(t.data().iter().map(|&x| x as f64));
    }
    Tensor::new(&[images.len(), width], data)
}

/// Column mean and deviation of `train`; constant columns get deviation 1.
fn standardizer(train: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (train.rows(), train.shape()[1]);
    let mut mean = vec![0.0; f];
    for row in train.data().chunks(f) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    let mut sd = vec![0.0; f];
    for row in train.data().chunks(f) {
        for ((s, &x), &m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (x - m) * (x - m) / n as f64;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

fn apply_standardizer(t: &Tensor<f64>, mean: &[f64], sd: &[f64]) -> Result<Tensor<f64>> {
    let f = mean.len();
    let data = t
        .data()
        .chunks(f)
        .flat_map(|row| row.iter().zip(mean).zip(sd).map(|((&x, &m), &s)| (x - m) / s))
        .collect();
    Tensor::new(t.shape(), data)
}

fn minibatches(n: usize, batch: usize, key: RngKey) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut key.stream());
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn rows_of(t: &Tensor<f64>, rows: &[usize]) -> Result<Tensor<f64>> {
    let f = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), f], data)
}

/// A trained `F → C` logistic layer.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LinearHead {
    pub fn scores(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        ops::linear(x, &self.weight, &self.bias)
    }
}

/// Fits independent logistic outputs (one per class) on fixed features with
/// minibatch SGD from a zero start.
pub fn fit_linear_head(features: &Tensor<f64>, set: &LabeledSet, config: &ProbeConfig) -> Result<LinearHead> {
    if config.lr <= 0.0 || config.batch_size == 0 {
        return Err(Error::config("probe lr and batch_size must be positive"));
    }
    let (f, c) = (features.shape()[1], set.num_classes());
    let mut w = Tensor::<f64>::zeros(&[f, c]).with_requires_grad(true);
    let mut b = Tensor::<f64>::zeros(&[c]).with_requires_grad(true);
    let base = RngKey::new(config.seed).purpose(Purpose::Probe);
    for epoch in 0..config.epochs {
        for rows in minibatches(set.len(), config.batch_size, base.iteration(epoch as u64)) {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(rows_of(features, &rows)?)?;
            let wv = tape.leaf(w.clone())?;
            let bv = tape.leaf(b.clone())?;
            let logits = tape.linear(x, wv, bv)?;
            let loss = tape.bce_with_logits(logits, set.targets(&rows)?, Reduction::Mean)?;
            let mut grads = tape.backward(loss)?;
            w.set_grad(grads.take(wv).ok_or_else(|| Error::MissingGradient("probe.weight".into()))?)?;
            b.set_grad(grads.take(bv).ok_or_else(|| Error::MissingGradient("probe.bias".into()))?)?;
            sgd_step([("probe.weight", &mut w), ("probe.bias", &mut b)], config.lr, config.weight_decay)?;
        }
    }
    Ok(LinearHead { weight: w, bias: b })
}

/// Trains a linear classifier on frozen encoder features of `train` and
/// reports per-class test AUROC.
pub fn linear_probe(
    params: &NetworkParams,
    train: &LabeledSet,
    test: &LabeledSet,
    config: &ProbeConfig,
) -> Result<EvalReport> {
    check_sets(train, test)?;
    let mut xtr = extract_features(params, &train.images, config.features)?;
    let mut xte = extract_features(params, &test.images, config.features)?;
    if config.standardize {
        let (m, s) = standardizer(&xtr);
        xtr = apply_standardizer(&xtr, &m, &s)?;
        xte = apply_standardizer(&xte, &m, &s)?;
    }
    let head = fit_linear_head(&xtr, train, config)?;
    score_report(&head.scores(&xte)?, test, "test", config.seed)
}

fn check_sets(train: &LabeledSet, test: &LabeledSet) -> Result<()> {
    if train.class_names != test.class_names {
        return Err(Error::config("train and test sets have different classes"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("train and test sets must be nonempty"));
    }
    Ok(())
}

/// Trains the whole encoder together with a linear head on the pooled
/// backbone features. Returns the test report and the tuned encoder; with
/// zero epochs the encoder comes back unchanged.
pub fn fine_tune(
    params: &NetworkParams,
    train: &LabeledSet,
    test: &LabeledSet,
    config: &FinetuneConfig,
) -> Result<(EvalReport, NetworkParams)> {
    check_sets(train, test)?;
    if config.lr <= 0.0 || config.batch_size == 0 {
        return Err(Error::config("fine-tune lr and batch_size must be positive"));
    }
    let mut encoder = clone_params(params, Role::Student);
    let (f, c) = (params.config().backbone_dim(), train.num_classes());
    let mut w = Tensor::<f32>::zeros(&[f, c]).with_requires_grad(true);
    let mut b = Tensor::<f32>::zeros(&[c]).with_requires_grad(true);
    let base = RngKey::new(config.seed).purpose(Purpose::Probe).batch(1);
    for epoch in 0..config.epochs {
        for rows in minibatches(train.len(), config.batch_size, base.iteration(epoch as u64)) {
            let images = train.images.select(&rows)?;
            let mut tape = Tape::<f32>::new();
            let vars = encode(&mut tape, &encoder, images.tensor())?;
            let wv = tape.leaf(w.clone())?;
            let bv = tape.leaf(b.clone())?;
            let logits = tape.linear(vars.backbone, wv, bv)?;
            let targets = train.targets(&rows)?.cast::<f32>();
            let loss = tape.bce_with_logits(logits, targets, Reduction::Mean)?;
            let mut grads = tape.backward(loss)?;
            // the projection head is not on the loss path and stays as it was
            let mut reached = Vec::with_capacity(vars.params.len());
            for ((_, t), &v) in encoder.iter_mut().zip(&vars.params) {
                let g = grads.take(v);
                reached.push(g.is_some());
                if let Some(g) = g {
                    t.set_grad(g)?;
                }
            }
            w.set_grad(grads.take(wv).ok_or_else(|| Error::MissingGradient("head.weight".into()))?)?;
            b.set_grad(grads.take(bv).ok_or_else(|| Error::MissingGradient("head.bias".into()))?)?;
            let (lr, wd) = (config.lr as f32, config.weight_decay as f32);
            let on_path = encoder.iter_mut().zip(&reached).filter(|(_, &r)| r).map(|(p, _)| p);
            sgd_step(on_path, lr, wd)?;
            sgd_step([("head.weight", &mut w), ("head.bias", &mut b)], lr, wd)?;
            if encoder.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite { op: "fine-tune update" });
            }
        }
    }
    let head = LinearHead {
        weight: w.cast(),
        bias: b.cast(),
    };
    let feats = extract_features(&encoder, &test.images, ProbeFeatures::Backbone)?;
    let report = score_report(&head.scores(&feats)?, test, "test", config.seed)?;
    Ok((report, encoder))
}
