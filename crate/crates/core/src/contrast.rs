//! Memory queue of past teacher features and the (N+1)-way contrastive loss.

use rand_distr::{Distribution, StandardNormal};

use crate::batch::{FeatureBatch, Provenance, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, Reduction};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Fixed-capacity FIFO of unit-norm `D`-vectors, stored as a ring buffer.
///
/// Slot `head` always holds the oldest entry; an insert overwrites from there.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue<T: Real = f32> {
    capacity: usize,
    dim: usize,
    data: Vec<T>,
    head: usize,
    inserted: u64,
}

impl<T: Real> MemoryQueue<T> {
    /// `N` standard-normal vectors, each normalized to unit length.
    pub fn init(capacity: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        if capacity == 0 || dim < 2 {
            return Err(Error::config(format!(
                "queue needs N >= 1 and D >= 2, got N={capacity}, D={dim}"
            )));
        }
        let mut data = Vec::with_capacity(capacity * dim);
        let mut row = vec![0.0f64; dim];
        for _ in 0..capacity {
            loop {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > ops::NORM_EPS {
                    data.extend(row.iter().map(|v| T::of(v / norm)));
                    break;
                }
            }
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            data,
            head: 0,
            inserted: 0,
        })
    }

    /// Rebuilds a queue from raw storage (used when restoring checkpoints).
    pub fn from_parts(capacity: usize, dim: usize, data: Vec<T>, head: usize, inserted: u64) -> Result<Self> {
        if capacity == 0 || dim < 2 || data.len() != capacity * dim || head >= capacity {
            return Err(Error::config(format!(
                "inconsistent queue state: N={capacity}, D={dim}, {} values, head={head}",
                data.len()
            )));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            data,
            head,
            inserted,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Always equal to the capacity.
    pub fn len(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Total number of vectors ever inserted.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Raw storage in slot order, `N × D`.
    pub fn storage(&self) -> &[T] {
        &self.data
    }

    pub fn slot(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entries from oldest to newest.
    pub fn oldest_first(&self) -> impl Iterator<Item = &[T]> {
        (0..self.capacity).map(move |k| self.slot((self.head + k) % self.capacity))
    }

    /// The `k` most recently inserted entries, oldest of them first.
    pub fn newest(&self, k: usize) -> Vec<&[T]> {
        let k = k.min(self.capacity);
        (self.capacity - k..self.capacity)
            .map(|i| self.slot((self.head + i) % self.capacity))
            .collect()
    }

    /// Storage as an `N × D` tensor (slot order).
    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.capacity, self.dim], self.data.clone()).expect("queue shape")
    }

    /// Appends rows in order, evicting the same number of oldest entries.
    pub fn insert(&mut self, vectors: &FeatureBatch<T>) -> Result<()> {
        if vectors.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "queue_insert",
                left: vec![self.capacity, self.dim],
                right: vectors.tensor().shape().to_vec(),
            });
        }
        if vectors.len() > self.capacity {
            return Err(Error::InvalidShape {
                op: "queue_insert",
                msg: format!("batch of {} exceeds queue length {}", vectors.len(), self.capacity),
            });
        }
        for i in 0..vectors.len() {
            let start = self.head * self.dim;
            self.data[start..start + self.dim].copy_from_slice(vectors.row(i));
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += vectors.len() as u64;
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `[anchor·positive, anchor·q_1, …, anchor·q_N] / tau`, queue in slot order.
pub fn contrastive_logits<T: Real>(
    anchor: &[T],
    positive: &[T],
    queue: &MemoryQueue<T>,
    tau: f64,
) -> Result<Vec<T>> {
    check_tau(tau)?;
    if anchor.len() != queue.dim() || positive.len() != queue.dim() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_logits",
            left: vec![anchor.len(), positive.len()],
            right: vec![queue.dim()],
        });
    }
    let inv = T::of(1.0 / tau);
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let mut out = Vec::with_capacity(queue.capacity() + 1);
    out.push(dot(anchor, positive) * inv);
    for i in 0..queue.capacity() {
        out.push(dot(anchor, queue.slot(i)) * inv);
    }
    Ok(out)
}

/// Softmax cross-entropy of every row against index 0.
pub fn info_nce_loss<T: Real>(logit_rows: &Tensor<T>, reduction: Reduction) -> Result<T> {
    logit_rows.ensure_finite("info_nce_loss")?;
    let targets = vec![0; logit_rows.rows()];
    let (loss, _) = ops::softmax_cross_entropy(logit_rows, &targets, reduction)?;
    Ok(loss)
}

/// Fraction of rows whose index-0 logit strictly beats every negative.
pub fn top1_index0<T: Real>(logit_rows: &Tensor<T>) -> f64 {
    let k = logit_rows.shape()[1];
    let rows = logit_rows.rows();
    let hits = logit_rows
        .data()
        .chunks(k)
        .filter(|row| row[1..].iter().all(|&v| v < row[0]))
        .count();
    hits as f64 / rows as f64
}

/// One InfoNCE term recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ContrastTerm {
    pub loss: Var,
    pub logits: Var,
}

/// Records logits for `anchor` (student rows) against `positive` and the
/// queue (both constants), and their index-0 cross-entropy.
pub fn info_nce_on_tape<T: Real>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    queue: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<ContrastTerm> {
    check_tau(tau)?;
    let pos = tape.row_dot(anchor, positive)?;
    let neg = tape.matmul_nt(anchor, queue)?;
    let raw = tape.concat_cols(pos, neg)?;
    let logits = tape.scale(raw, T::of(1.0 / tau))?;
    let targets = vec![0; tape.value(logits).rows()];
    let loss = tape.softmax_cross_entropy(logits, &targets, reduction)?;
    Ok(ContrastTerm { loss, logits })
}

/// Detached teacher-side features for one step.
#[derive(Clone, Debug)]
pub struct TeacherFeatures<T: Real = f32> {
    pub v2a: FeatureBatch<T>,
    pub v2m: FeatureBatch<T>,
    pub vm: FeatureBatch<T>,
}

/// Handles to the recorded C2L loss.
#[derive(Clone, Debug)]
pub struct C2lLossVars {
    pub loss_a: Var,
    pub loss_m: Var,
    pub total: Var,
    pub terms: Vec<ContrastTerm>,
}

pub(crate) fn ensure_detached<T: Real>(f: &FeatureBatch<T>) -> Result<()> {
    if f.tensor().requires_grad() {
        return Err(Error::TeacherGradient(f.provenance().name()));
    }
    Ok(())
}

/// `loss_A = CE(v1A·v2A, v1A·Q)`,
/// `loss_M = CE(v1M·v2M, v1M·Q) + CE(v1M·vm, v1M·Q)`, total `loss_A + loss_M`.
///
/// `v1a` and `v1m` are student outputs already on the tape; the teacher
/// features enter as constants, so no gradient reaches them.
#[allow(clippy::too_many_arguments)]
pub fn c2l_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    v1a: Var,
    v1m: Var,
    teacher: &TeacherFeatures<T>,
    queue: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<C2lLossVars> {
    for f in [&teacher.v2a, &teacher.v2m, &teacher.vm] {
        ensure_detached(f)?;
    }
    let v2a = tape.constant(teacher.v2a.tensor().clone())?;
    let v2m = tape.constant(teacher.v2m.tensor().clone())?;
    let vm = tape.constant(teacher.vm.tensor().clone())?;
    let a = info_nce_on_tape(tape, v1a, v2a, queue, tau, reduction)?;
    let m1 = info_nce_on_tape(tape, v1m, v2m, queue, tau, reduction)?;
    let m2 = info_nce_on_tape(tape, v1m, vm, queue, tau, reduction)?;
    let loss_m = tape.add(m1.loss, m2.loss)?;
    let total = tape.add(a.loss, loss_m)?;
    Ok(C2lLossVars {
        loss_a: a.loss,
        loss_m,
        total,
        terms: vec![a, m1, m2],
    })
}

/// Value-only C2L loss over finished feature batches. Returns
/// `(loss_A, loss_M)`.
#[allow(clippy::too_many_arguments)]
pub fn c2l_loss<T: Real>(
    v1a: &FeatureBatch<T>,
    v2a: &FeatureBatch<T>,
    v1m: &FeatureBatch<T>,
    v2m: &FeatureBatch<T>,
    vm: &FeatureBatch<T>,
    queue: &MemoryQueue<T>,
    tau: f64,
    reduction: Reduction,
) -> Result<(T, T)> {
    let teacher = TeacherFeatures {
        v2a: v2a.clone(),
        v2m: v2m.clone(),
        vm: vm.clone(),
    };
    for f in [v2a, v2m, vm] {
        ensure_detached(f)?;
    }
    let mut tape = Tape::<T>::new();
    let a = tape.constant(v1a.tensor().clone())?;
    let m = tape.constant(v1m.tensor().clone())?;
    let q = tape.constant(queue.as_tensor())?;
    let vars = c2l_loss_on_tape(&mut tape, a, m, &teacher, q, tau, reduction)?;
    Ok((tape.value(vars.loss_a).item()?, tape.value(vars.loss_m).item()?))
}

/// Checks the queue invariant that every stored vector is unit norm.
pub fn queue_is_unit_norm<T: Real>(queue: &MemoryQueue<T>) -> bool {
    (0..queue.capacity()).all(|i| {
        let n = queue.slot(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        (n - 1.0).abs() <= UNIT_NORM_TOL
    })
}

/// Inserts the step's teacher features in the fixed order v2A, v2M, vm.
pub fn insert_step<T: Real>(queue: &mut MemoryQueue<T>, teacher: &TeacherFeatures<T>) -> Result<()> {
    debug_assert_eq!(teacher.v2a.provenance(), Provenance::V2A);
    queue.insert(&teacher.v2a)?;
    queue.insert(&teacher.v2m)?;
    queue.insert(&teacher.vm)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::RngKey;

    fn fb(rows: &[&[f64]], tag: Provenance) -> FeatureBatch<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureBatch::new(Tensor::<f64>::from_f64(&[rows.len(), d], &data).unwrap(), tag).unwrap()
    }

    fn random_unit(z: usize, d: usize, seed: u64) -> FeatureBatch<f64> {
        let mut rng = RngKey::new(seed).stream();
        let raw: Vec<f64> = (0..z * d).map(|_| rng.sample(StandardNormal)).collect();
        let (t, _) = ops::l2_normalize(&Tensor::<f64>::from_f64(&[z, d], &raw).unwrap()).unwrap();
        FeatureBatch::new(t, Provenance::Other).unwrap()
    }

    fn queue_with(rows: &[&[f64]]) -> MemoryQueue<f64> {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MemoryQueue::from_parts(rows.len(), d, data, 0, 0).unwrap()
    }

    #[test]
    fn init_is_unit_norm_and_seeded() {
        let q = MemoryQueue::<f32>::init(64, 8, &mut RngKey::new(1).stream()).unwrap();
        assert!(queue_is_unit_norm(&q));
        assert_eq!(q, MemoryQueue::init(64, 8, &mut RngKey::new(1).stream()).unwrap());
        assert!(MemoryQueue::<f32>::init(0, 8, &mut RngKey::new(1).stream()).is_err());
        assert!(MemoryQueue::<f32>::init(4, 1, &mut RngKey::new(1).stream()).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let (a, b, c, d) = ([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]);
        let s = 0.5f64.sqrt();
        let (e, f) = ([s, s], [-s, s]);
        let mut q = queue_with(&[&a, &b, &c, &d]);
        q.insert(&fb(&[&e, &f], Provenance::V2A)).unwrap();
        let got: Vec<Vec<f64>> = q.oldest_first().map(|r| r.to_vec()).collect();
        assert_eq!(got, vec![c.to_vec(), d.to_vec(), e.to_vec(), f.to_vec()]);
        assert_eq!(q.len(), 4);

        let full = fb(&[&b, &a, &f, &e], Provenance::V2A);
        q.insert(&full).unwrap();
        let got: Vec<Vec<f64>> = q.oldest_first().map(|r| r.to_vec()).collect();
        assert_eq!(got, vec![b.to_vec(), a.to_vec(), f.to_vec(), e.to_vec()]);
    }

    #[test]
    fn insert_rejects_bad_batches() {
        let mut q = MemoryQueue::<f64>::init(2, 3, &mut RngKey::new(1).stream()).unwrap();
        assert!(q.insert(&random_unit(1, 4, 1)).is_err());
        assert!(q.insert(&random_unit(3, 3, 1)).is_err());
    }

    #[test]
    fn logits_dot_product_example() {
        let q = queue_with(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let l = contrastive_logits(&[1.0, 0.0], &[1.0, 0.0], &q, 1.0).unwrap();
        assert_eq!(l, vec![1.0, 0.0, -1.0]);
        let half = contrastive_logits(&[1.0, 0.0], &[1.0, 0.0], &q, 0.5).unwrap();
        assert_eq!(half, vec![2.0, 0.0, -2.0]);
        assert!(contrastive_logits(&[1.0, 0.0], &[1.0, 0.0], &q, 0.0).is_err());
        let before = q.clone();
        let big = MemoryQueue::<f64>::init(9, 2, &mut RngKey::new(2).stream()).unwrap();
        assert_eq!(contrastive_logits(&[1.0, 0.0], &[0.0, 1.0], &big, 1.0).unwrap().len(), 10);
        assert_eq!(q, before);
    }

    #[test]
    fn info_nce_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 3]);
        assert!((info_nce_loss(&uniform, Reduction::Mean).unwrap() - 3f64.ln()).abs() < 1e-12);
        let sat = Tensor::<f64>::from_f64(&[1, 3], &[20.0, 0.0, 0.0]).unwrap();
        assert!(info_nce_loss(&sat, Reduction::Mean).unwrap() < 1e-8);
        let hand = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.0, -1.0]).unwrap();
        let e = std::f64::consts::E;
        let oracle = -(e / (e + 1.0 + 1.0 / e)).ln();
        assert!((info_nce_loss(&hand, Reduction::Mean).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.4076).abs() < 1e-4);
        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(info_nce_loss(&bad, Reduction::Mean).is_err());
    }

    #[test]
    fn sum_reduction_scales_with_rows() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.2, 0.1]).unwrap();
        let mean = info_nce_loss(&t, Reduction::Mean).unwrap();
        let sum = info_nce_loss(&t, Reduction::Sum).unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn matching_positive_beats_shuffled_control() {
        // queue orthogonal to every anchor: anchors live in the first 4 dims
        let z = 6;
        let mut rows = Vec::new();
        let mut rng = RngKey::new(3).stream();
        for _ in 0..z {
            let mut r: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            r.extend([0.0; 4]);
            rows.push(r);
        }
        let (t, _) = ops::l2_normalize(&Tensor::<f64>::from_f64(&[z, 8], &rows.concat()).unwrap()).unwrap();
        let v1 = FeatureBatch::new(t, Provenance::V1A).unwrap();
        let qrows: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut r = vec![0.0; 8];
                r[4 + i] = 1.0;
                r
            })
            .collect();
        let q = MemoryQueue::from_parts(4, 8, qrows.concat(), 0, 0).unwrap();
        let same = c2l_loss(&v1, &v1, &v1, &v1, &v1, &q, 1.0, Reduction::Mean).unwrap();
        let shuffled = v1.tensor().clone();
        let perm: Vec<usize> = (0..z).map(|i| (i + 1) % z).collect();
        let mut sd = Vec::new();
        for &p in &perm {
            sd.extend_from_slice(shuffled.row(p));
        }
        let v2 = FeatureBatch::new(Tensor::new(&[z, 8], sd).unwrap(), Provenance::V2A).unwrap();
        let control = c2l_loss(&v1, &v2, &v1, &v2, &v2, &q, 1.0, Reduction::Mean).unwrap();
        assert!(same.0 < control.0);
    }

    #[test]
    fn identical_views_make_loss_m_twice_loss_a() {
        let v = random_unit(5, 8, 7);
        let q = MemoryQueue::<f64>::init(32, 8, &mut RngKey::new(8).stream()).unwrap();
        let (la, lm) = c2l_loss(&v, &v, &v, &v, &v, &q, 0.2, Reduction::Mean).unwrap();
        assert!((lm - 2.0 * la).abs() < 1e-12);
    }

    #[test]
    fn teacher_gradients_are_refused() {
        let v = random_unit(3, 4, 1);
        let mut t = v.tensor().clone();
        t.set_requires_grad(true);
        let grad_v = FeatureBatch::new(t, Provenance::V2M).unwrap();
        let q = MemoryQueue::<f64>::init(8, 4, &mut RngKey::new(1).stream()).unwrap();
        let err = c2l_loss(&v, &v, &v, &grad_v, &v, &q, 1.0, Reduction::Mean).unwrap_err();
        assert!(matches!(err, Error::TeacherGradient("v2M")));
    }

    #[test]
    fn loss_is_invariant_to_queue_rotation() {
        let v1 = random_unit(4, 6, 1);
        let v2 = random_unit(4, 6, 2);
        let mut q = MemoryQueue::<f64>::init(16, 6, &mut RngKey::new(3).stream()).unwrap();
        let base = c2l_loss(&v1, &v2, &v1, &v2, &v2, &q, 0.2, Reduction::Mean).unwrap();
        let storage = q.storage().to_vec();
        let mut rotated = storage[5 * 6..].to_vec();
        rotated.extend_from_slice(&storage[..5 * 6]);
        q = MemoryQueue::from_parts(16, 6, rotated, 3, 0).unwrap();
        let rot = c2l_loss(&v1, &v2, &v1, &v2, &v2, &q, 0.2, Reduction::Mean).unwrap();
        assert!((base.0 - rot.0).abs() < 1e-12 && (base.1 - rot.1).abs() < 1e-12);
    }

    #[test]
    fn top1_counts_strict_wins() {
        let t = Tensor::<f64>::from_f64(&[3, 3], &[1.0, 0.0, 0.5, 0.2, 0.3, 0.1, 0.4, 0.4, 0.0]).unwrap();
        assert!((top1_index0(&t) - 1.0 / 3.0).abs() < 1e-12);
    }
}
