//! Binary checkpoints.
//!
//! Layout: the 4-byte magic `C2L1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor listed in the manifest as
//! little-endian `f32`, in manifest order. A full checkpoint holds student,
//! teacher, queue and optimizer state; an export holds the student only.
//!
//! Files are written to a sibling temporary and renamed into place, so a
//! crash never leaves a truncated checkpoint under the final name.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrast::MemoryQueue;
use crate::encoder::{EncoderConfig, NetworkParams, Role};
use crate::error::{Error, Result};
use crate::numerics::{Sgd, Tensor};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"C2L1";
pub const FORMAT_VERSION: u32 = 1;

/// Hard cap on the manifest size; anything larger is treated as corrupt.
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Student,
    Teacher,
    Queue,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueInfo {
    pub capacity: usize,
    pub dim: usize,
    pub head: usize,
    pub inserted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Next epoch to run.
    pub epoch: usize,
    /// Steps completed.
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<QueueInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd_momentum: Option<f32>,
}

fn encode_file(manifest: &Manifest, tensors: &[&Tensor<f32>]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a file into its manifest and one tensor per manifest entry.
fn decode_file(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor<f32>>)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing C2L1 header".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if len > MAX_MANIFEST || len > (bytes.len() - 12) as u64 {
        return Err(bad(format!("manifest length {len} exceeds the file")));
    }
    let body = &bytes[12 + len as usize..];
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + len as usize])
        .map_err(|e| bad(format!("manifest is not valid: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut expected: usize = 0;
    for e in &manifest.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("tensor {} has an absurd shape {:?}", e.name, e.shape)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| bad("payload size overflows".into()))?;
    }
    if body.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes but the manifest describes {expected}",
            body.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut at = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = body[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        tensors.push(Tensor::new(&e.shape, data)?);
    }
    Ok((manifest, tensors))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<(Manifest, Vec<Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_file(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn entries(params: &NetworkParams, role: TensorRole) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            role,
        })
        .collect()
}

fn collect_params(
    manifest: &Manifest,
    tensors: &[Tensor<f32>],
    want: TensorRole,
    role: Role,
) -> Result<NetworkParams> {
    let parts: Vec<(String, Tensor<f32>)> = manifest
        .tensors
        .iter()
        .zip(tensors)
        .filter(|(e, _)| e.role == want)
        .map(|(e, t)| (e.name.clone(), t.clone()))
        .collect();
    NetworkParams::from_parts(role, manifest.encoder.clone(), parts)
        .map_err(|e| Error::Checkpoint(format!("{want:?} tensors do not fit the stored encoder config: {e}")))
}

/// Full training state: student, teacher, queue, optimizer and counters.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut tensors = entries(&state.student, TensorRole::Student);
    tensors.extend(entries(&state.teacher, TensorRole::Teacher));
    let q = &state.queue;
    let queue_tensor = q.as_tensor();
    tensors.push(TensorEntry {
        name: "queue".into(),
        shape: queue_tensor.shape().to_vec(),
        role: TensorRole::Queue,
    });
    let velocity = state.optimizer.velocity();
    for ((name, _), v) in state.student.iter().zip(velocity) {
        tensors.push(TensorEntry {
            name: format!("{name}.velocity"),
            shape: v.shape().to_vec(),
            role: TensorRole::Velocity,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Full,
        encoder: state.student.config().clone(),
        tensors,
        progress: Some(Progress {
            epoch: state.epoch,
            iteration: state.iteration,
        }),
        seed: Some(state.seed),
        queue: Some(QueueInfo {
            capacity: q.capacity(),
            dim: q.dim(),
            head: q.head(),
            inserted: q.inserted(),
        }),
        sgd_momentum: Some(state.optimizer.momentum),
    };
    let mut data: Vec<&Tensor<f32>> = state.student.iter().map(|(_, t)| t).collect();
    data.extend(state.teacher.iter().map(|(_, t)| t));
    data.push(&queue_tensor);
    data.extend(velocity.iter());
    write_atomic(path, &encode_file(&manifest, &data)?)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let (m, tensors) = read(path)?;
    if m.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint(format!(
            "{} is a student export, not a resumable checkpoint",
            path.display()
        )));
    }
    let missing = |what: &str| Error::Checkpoint(format!("{}: manifest lacks {what}", path.display()));
    let progress = m.progress.clone().ok_or_else(|| missing("progress"))?;
    let seed = m.seed.ok_or_else(|| missing("seed"))?;
    let qi = m.queue.clone().ok_or_else(|| missing("queue info"))?;
    let student = collect_params(&m, &tensors, TensorRole::Student, Role::Student)?;
    let teacher = collect_params(&m, &tensors, TensorRole::Teacher, Role::Teacher)?;
    let mut queue_data = None;
    let mut velocity = Vec::new();
    for (e, t) in m.tensors.iter().zip(tensors) {
        match e.role {
            TensorRole::Queue => queue_data = Some(t),
            TensorRole::Velocity => velocity.push(t),
            _ => {}
        }
    }
    let queue_data = queue_data.ok_or_else(|| missing("the queue tensor"))?;
    if queue_data.shape() != [qi.capacity, qi.dim] {
        return Err(Error::Checkpoint(format!(
            "queue tensor {:?} does not match queue info {}×{}",
            queue_data.shape(),
            qi.capacity,
            qi.dim
        )));
    }
    let queue = MemoryQueue::from_parts(qi.capacity, qi.dim, queue_data.into_data(), qi.head, qi.inserted)?;
    if !velocity.is_empty() && velocity.len() != student.len() {
        return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
    }
    let mut optimizer = Sgd::new(m.sgd_momentum.unwrap_or(0.0));
    optimizer.set_velocity(velocity);
    Ok(TrainState {
        student,
        teacher,
        queue,
        iteration: progress.iteration,
        epoch: progress.epoch,
        seed,
        optimizer,
    })
}

/// Student parameters and encoder config only.
pub fn export_student(path: &Path, student: &NetworkParams) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Student,
        encoder: student.config().clone(),
        tensors: entries(student, TensorRole::Student),
        progress: None,
        seed: None,
        queue: None,
        sgd_momentum: None,
    };
    let data: Vec<&Tensor<f32>> = student.iter().map(|(_, t)| t).collect();
    write_atomic(path, &encode_file(&manifest, &data)?)
}

/// Loads the student from an export or a full checkpoint. With `expected`,
/// a differing stored encoder config is an error.
pub fn load_student(path: &Path, expected: Option<&EncoderConfig>) -> Result<NetworkParams> {
    let (m, tensors) = read(path)?;
    if let Some(cfg) = expected {
        if cfg != &m.encoder {
            return Err(Error::Checkpoint(format!(
                "{} was written for encoder {:?}, expected {:?}",
                path.display(),
                m.encoder,
                cfg
            )));
        }
    }
    collect_params(&m, &tensors, TensorRole::Student, Role::Student)
}

/// Manifest of any checkpoint file, without the payload checks.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read(path).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{train, TrainConfig};
    use crate::batch::ImageBatch;
    use crate::rng::RngKey;
    use rand::Rng;

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            queue_len: 16,
            epochs: 1,
            sgd_momentum: 0.5,
            encoder: EncoderConfig {
                input_size: [16, 16],
                channels_per_stage: vec![4, 8],
                feature_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn data() -> ImageBatch {
        let mut rng = RngKey::new(3).stream();
        let imgs: Vec<Vec<f32>> = (0..8).map(|_| (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        ImageBatch::from_images(16, 16, &imgs).unwrap()
    }

    #[test]
    fn full_state_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let state = train(&cfg(), &data(), None, &mut ()).unwrap();
        let p = dir.path().join("state.ckpt");
        save_state(&p, &state).unwrap();
        let back = load_state(&p).unwrap();
        assert_eq!(back.student, state.student);
        assert_eq!(back.teacher, state.teacher);
        assert_eq!(back.queue, state.queue);
        assert_eq!((back.epoch, back.iteration, back.seed), (state.epoch, state.iteration, state.seed));
        assert_eq!(back.optimizer.velocity(), state.optimizer.velocity());
        assert!(!dir.path().join(".state.ckpt.tmp").exists());
    }

    #[test]
    fn export_has_only_student_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let state = train(&cfg(), &data(), None, &mut ()).unwrap();
        let p = dir.path().join("student.c2l");
        export_student(&p, &state.student).unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.kind, CheckpointKind::Student);
        assert!(m.tensors.iter().all(|e| e.role == TensorRole::Student));
        assert_eq!(m.tensors.len(), state.student.len());
        assert_eq!(load_student(&p, Some(&cfg().encoder)).unwrap(), state.student);
        assert!(matches!(load_state(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_encoder_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let state = crate::trainer::TrainState::new(&cfg()).unwrap();
        let p = dir.path().join("s.c2l");
        export_student(&p, &state.student).unwrap();
        let other = EncoderConfig {
            feature_dim: 16,
            ..cfg().encoder
        };
        assert!(matches!(load_student(&p, Some(&other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let state = crate::trainer::TrainState::new(&cfg()).unwrap();
        let p = dir.path().join("s.c2l");
        export_student(&p, &state.student).unwrap();
        let good = fs::read(&p).unwrap();
        let cases: Vec<Vec<u8>> = vec![
            b"NOPE".to_vec(),
            good[..good.len() - 4].to_vec(),
            [good.clone(), vec![0; 4]].concat(),
            {
                let mut b = good.clone();
                b[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
                b
            },
            {
                let mut b = good.clone();
                b[0] = b'X';
                b
            },
        ];
        for (i, bytes) in cases.iter().enumerate() {
            let q = dir.path().join(format!("bad{i}.c2l"));
            fs::write(&q, bytes).unwrap();
            assert!(matches!(load_student(&q, None), Err(Error::Checkpoint(_))), "case {i}");
        }
    }
}
