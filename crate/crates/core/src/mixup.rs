//! Batch-level and feature-level mixup sharing one mixing factor and one
//! permutation per training step.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::batch::{FeatureBatch, ImageBatch, Provenance};
use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::{Real, Tensor};
use crate::rng::RngStream;

/// Shape parameter of the symmetric Beta distribution λ is drawn from.
pub const MIX_ALPHA: f64 = 1.0;

/// Mixing factor and partner permutation for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    lambda: f64,
    perm: Vec<usize>,
}

impl MixSpec {
    pub fn new(lambda: f64, perm: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!("mixing factor {lambda} outside [0, 1]")));
        }
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(MixSpec { lambda, perm })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// λ ~ Beta(1, 1) and a uniformly random permutation of `0..z` (fixed points
/// allowed).
pub fn sample_mixspec(z: usize, rng: &mut RngStream) -> Result<MixSpec> {
    if z < 2 {
        return Err(Error::config(format!("mixup needs a batch of at least 2, got {z}")));
    }
    let beta = Beta::new(MIX_ALPHA, MIX_ALPHA).expect("valid shape");
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..z).collect();
    perm.shuffle(rng);
    MixSpec::new(lambda, perm)
}

fn check_len(op: &'static str, n: usize, spec_len: usize) -> Result<()> {
    if n != spec_len {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![n],
            right: vec![spec_len],
        });
    }
    Ok(())
}

fn mix_rows<T: Real>(
    data: &[T],
    row_len: usize,
    perm: &[usize],
    lambda_of: impl Fn(usize) -> f64,
) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for (j, &p) in perm.iter().enumerate() {
        let lam = T::of(lambda_of(j));
        let keep = T::one() - lam;
        let own = &data[j * row_len..(j + 1) * row_len];
        let partner = &data[p * row_len..(p + 1) * row_len];
        out.extend(own.iter().zip(partner).map(|(&a, &b)| lam * a + keep * b));
    }
    out
}

/// `out[j] = λ·in[j] + (1−λ)·in[perm[j]]`.
pub fn batch_mixup(batch: &ImageBatch, spec: &MixSpec) -> Result<ImageBatch> {
    check_len("batch_mixup", batch.len(), spec.len())?;
    let data = mix_rows(batch.tensor().data(), batch.image_len(), &spec.perm, |_| spec.lambda);
    // convex combinations of [0,1] pixels can only leave the range by rounding
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageBatch::new(Tensor::new(batch.tensor().shape(), data)?)
}

/// The batch mixup rule applied to feature rows, followed by
/// re-normalization to unit length.
pub fn feature_mixup<T: Real>(features: &FeatureBatch<T>, spec: &MixSpec) -> Result<FeatureBatch<T>> {
    check_len("feature_mixup", features.len(), spec.len())?;
    let d = features.dim();
    let mixed = mix_rows(features.tensor().data(), d, &spec.perm, |_| spec.lambda);
    let mixed = Tensor::new(features.tensor().shape(), mixed)?;
    let (normalized, _) = ops::l2_normalize(&mixed).map_err(|e| match e {
        Error::DegenerateRow { row, norm, .. } => Error::DegenerateRow {
            op: "feature_mixup",
            row,
            norm,
        },
        other => other,
    })?;
    FeatureBatch::new(normalized, Provenance::Vm)
}

/// Classic per-pair mixup: every image gets its own λ. Used only as a
/// comparison arm in ablations.
pub fn pairwise_mixup(batch: &ImageBatch, lambdas: &[f64], perm: &[usize]) -> Result<ImageBatch> {
    check_len("pairwise_mixup", batch.len(), perm.len())?;
    check_len("pairwise_mixup", batch.len(), lambdas.len())?;
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::config(format!("mixing factor {l} outside [0, 1]")));
    }
    MixSpec::new(1.0, perm.to_vec())?;
    let data = mix_rows(batch.tensor().data(), batch.image_len(), perm, |j| lambdas[j]);
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageBatch::new(Tensor::new(batch.tensor().shape(), data)?)
}

/// Independent Beta(1, 1) draws, one per image.
pub fn sample_lambdas(z: usize, rng: &mut RngStream) -> Vec<f64> {
    let beta = Beta::new(MIX_ALPHA, MIX_ALPHA).expect("valid shape");
    (0..z).map(|_| beta.sample(rng)).collect()
}

/// Uniform permutation of `0..z`.
pub fn sample_perm(z: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..z).collect();
    perm.shuffle(rng);
    perm
}
