//! Small convolutional encoder with a linear projection head.
//!
//! Each stage is `conv3x3 → group norm → relu → maxpool2x2`. The last stage's
//! map is flattened (or globally averaged), projected to `feature_dim` and
//! L2-normalized.
//!
//! Flatten is the default. Group norm is per image, so a global average of
//! its rectified output comes out nearly the same vector for every input.
//! The L2 normalization then hides that shared direction from the gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{FeatureBatch, ImageBatch, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::{Purpose, RngKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    GroupNorm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[height, width]` in pixels.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub feature_dim: usize,
    pub normalization: Normalization,
    pub groups: usize,
    pub pooling: Pooling,
}

/// How the last stage's map is reduced to the vector fed to the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average over the spatial grid: one value per channel.
    Average,
    /// Keep the whole pooled grid, flattened channel-major.
    #[default]
    Flatten,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: [64, 64],
            in_channels: 1,
            channels_per_stage: vec![8, 16, 32],
            feature_dim: 128,
            normalization: Normalization::GroupNorm,
            groups: 4,
            pooling: Pooling::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::config("encoder.feature_dim must be at least 2"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("encoder.in_channels must be positive"));
        }
        if self.channels_per_stage.is_empty() || self.channels_per_stage.contains(&0) {
            return Err(Error::config(
                "encoder.channels_per_stage must be a non-empty list of positive ints",
            ));
        }
        let factor = 1usize << self.channels_per_stage.len();
        let [h, w] = self.input_size;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::config(format!(
                "encoder.input_size {h}×{w} must be divisible by {factor} for {} stages",
                self.channels_per_stage.len()
            )));
        }
        if h / (factor / 2) < 3 || w / (factor / 2) < 3 {
            return Err(Error::config(format!(
                "encoder.input_size {h}×{w} is too small for {} stages",
                self.channels_per_stage.len()
            )));
        }
        if self.normalization == Normalization::GroupNorm {
            if self.groups == 0 {
                return Err(Error::config("encoder.groups must be positive"));
            }
            if let Some(c) = self.channels_per_stage.iter().find(|&&c| c % self.groups != 0) {
                return Err(Error::config(format!(
                    "stage with {c} channels is not divisible into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Width of the pooled backbone features fed to the projection head.
    pub fn backbone_dim(&self) -> usize {
        let c = *self.channels_per_stage.last().expect("validated");
        match self.pooling {
            Pooling::Average => c,
            Pooling::Flatten => {
                let f = 1usize << self.channels_per_stage.len();
                c * (self.input_size[0] / f) * (self.input_size[1] / f)
            }
        }
    }

    /// `(name, shape)` of every parameter, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c) in self.channels_per_stage.iter().enumerate() {
            layout.push((format!("stage{i}.conv.weight"), vec![c, c_in, 3, 3]));
            if self.normalization == Normalization::GroupNorm {
                layout.push((format!("stage{i}.norm.gamma"), vec![c]));
                layout.push((format!("stage{i}.norm.beta"), vec![c]));
            }
            c_in = c;
        }
        layout.push(("head.weight".into(), vec![self.backbone_dim(), self.feature_dim]));
        layout.push(("head.bias".into(), vec![self.feature_dim]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

/// Named parameter tensors of one encoder instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Real = f32> {
    role: Role,
    config: EncoderConfig,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Real> NetworkParams<T> {
    /// Reassembles parameters, checking them against `config`'s layout.
    pub fn from_parts(
        role: Role,
        config: EncoderConfig,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut out = NetworkParams {
            role,
            config,
            params,
        };
        out.set_role(role);
        Ok(out)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn set_role(&mut self, role: Role) {
        self.role = role;
        for (_, t) in &mut self.params {
            t.set_requires_grad(role == Role::Student);
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            role: self.role,
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Order-sensitive digest of every parameter value, for cheap equality
    /// guards.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in &self.params {
            for v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// He-style initialization: convolution and head weights drawn from
/// `N(0, 2/fan_in)`, biases and norm shifts zero, norm scales one.
pub fn init_params<T: Real>(config: &EncoderConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut rng = RngKey::new(seed).purpose(Purpose::Init).stream();
    let mut params = Vec::new();
    for (name, shape) in config.param_layout() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".weight") {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * 9
            } else {
                shape[0]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                .collect()
        } else if name.ends_with(".gamma") {
            vec![T::one(); n]
        } else {
            vec![T::zero(); n]
        };
        params.push((name, Tensor::new(&shape, data)?));
    }
    NetworkParams::from_parts(Role::Student, config.clone(), params)
}

/// Deep copy with the given role. Teacher copies never require gradients.
pub fn clone_params<T: Real>(src: &NetworkParams<T>, role: Role) -> NetworkParams<T> {
    let mut out = NetworkParams {
        role,
        config: src.config.clone(),
        params: src
            .params
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n.clone(), t)
            })
            .collect(),
    };
    out.set_role(role);
    out
}

/// Handles to one encoder pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Pooled backbone features, `[B × backbone_dim]`.
    pub backbone: Var,
    /// Unit-norm projections, `[B × feature_dim]`.
    pub features: Var,
    /// One handle per parameter, in [`NetworkParams::iter`] order.
    pub params: Vec<Var>,
}

/// Records a full encoder pass. Parameters participate in differentiation
/// iff they require gradients (students do, teachers never).
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    params: &NetworkParams<T>,
    images: &Tensor<T>,
) -> Result<EncoderVars> {
    let cfg = &params.config;
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2..] != cfg.input_size[..] {
        return Err(Error::ShapeMismatch {
            op: "encoder_forward",
            left: s.to_vec(),
            right: vec![s.first().copied().unwrap_or(0), cfg.in_channels, cfg.input_size[0], cfg.input_size[1]],
        });
    }
    let param_vars = params
        .params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut next = param_vars.iter().copied();
    let mut x = tape.constant(images.clone())?;
    for _ in &cfg.channels_per_stage {
        let w = next.next().expect("layout");
        x = tape.conv2d(x, w, 1, 1)?;
        if cfg.normalization == Normalization::GroupNorm {
            let gamma = next.next().expect("layout");
            let beta = next.next().expect("layout");
            x = tape.group_norm(x, gamma, beta, cfg.groups)?;
        }
        x = tape.relu(x)?;
        x = tape.max_pool_2x2(x)?;
    }
    let backbone = match cfg.pooling {
        Pooling::Average => tape.global_avg_pool(x)?,
        Pooling::Flatten => tape.flatten(x)?,
    };
    let w = next.next().expect("layout");
    let b = next.next().expect("layout");
    let projected = tape.linear(backbone, w, b)?;
    let features = tape.l2_normalize(projected)?;
    Ok(EncoderVars {
        backbone,
        features,
        params: param_vars,
    })
}

/// Moves gradients from a finished backward pass onto the parameters.
pub fn attach_gradients<T: Real>(
    params: &mut NetworkParams<T>,
    vars: &EncoderVars,
    grads: &mut crate::numerics::Gradients<T>,
) -> Result<()> {
    for ((name, t), &v) in params.params.iter_mut().zip(&vars.params) {
        match grads.take(v) {
            Some(g) => t.set_grad(g)?,
            None => return Err(Error::MissingGradient(name.clone())),
        }
    }
    Ok(())
}

/// Unit-norm features of a batch, computed without recording gradients.
pub fn encoder_forward(params: &NetworkParams<f32>, batch: &ImageBatch) -> Result<FeatureBatch<f32>> {
    let frozen = clone_params(params, Role::Teacher);
    let mut tape = Tape::new();
    let vars = encode(&mut tape, &frozen, batch.tensor())?;
    FeatureBatch::new(tape.value(vars.features).clone(), Provenance::Other)
}

/// Pooled backbone features (before the projection head), no gradients.
pub fn backbone_forward(params: &NetworkParams<f32>, batch: &ImageBatch) -> Result<Tensor<f32>> {
    let frozen = clone_params(params, Role::Teacher);
    let mut tape = Tape::new();
    let vars = encode(&mut tape, &frozen, batch.tensor())?;
    Ok(tape.value(vars.backbone).clone())
}
