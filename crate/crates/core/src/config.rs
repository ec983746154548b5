//! Run configuration: one strict JSON document covering every command.
//!
//! Unknown keys anywhere are rejected. Missing keys take the documented
//! defaults. A top-level `seed`, when given, replaces the seed of every
//! component so a single flag reseeds a whole run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data_io::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{FinetuneConfig, ProbeConfig};
use crate::trainer::{MixupMode, TrainConfig};

/// Named augmentation settings swept by the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentVariant {
    /// The configured pipeline as is.
    Full,
    NoCutout,
    NoRotation,
    NoCrop,
    NoFlip,
    /// Identity views.
    None,
}

impl AugmentVariant {
    pub fn name(self) -> &'static str {
        match self {
            AugmentVariant::Full => "full",
            AugmentVariant::NoCutout => "no_cutout",
            AugmentVariant::NoRotation => "no_rotation",
            AugmentVariant::NoCrop => "no_crop",
            AugmentVariant::NoFlip => "no_flip",
            AugmentVariant::None => "none",
        }
    }

    pub fn apply(self, base: &AugmentConfig) -> AugmentConfig {
        let mut a = base.clone();
        match self {
            AugmentVariant::Full => {}
            AugmentVariant::NoCutout => a.cutout.enabled = false,
            AugmentVariant::NoRotation => a.rotate = false,
            AugmentVariant::NoCrop => a.crop = false,
            AugmentVariant::NoFlip => a.hflip = false,
            AugmentVariant::None => a = AugmentConfig::disabled(),
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub modes: Vec<MixupMode>,
    pub queue_lens: Vec<usize>,
    pub augment: Vec<AugmentVariant>,
    pub seeds: Vec<u64>,
    /// Pretraining epochs per cell; `None` uses `train.epochs`.
    pub epochs: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: MixupMode::ALL.to_vec(),
            queue_lens: vec![2048],
            augment: vec![AugmentVariant::Full],
            seeds: vec![0],
            epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub ablate: AblateConfig,
    /// Write a numbered full checkpoint every this many epochs (0: never).
    /// `last.ckpt` is refreshed after every epoch regardless.
    pub checkpoint_every: usize,
    /// Single worker thread for everything.
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            ablate: AblateConfig::default(),
            checkpoint_every: 10,
            deterministic: false,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Propagates the top-level seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.synth.seed = s;
            self.probe.seed = s;
            self.finetune.seed = s;
        }
        self.train.validate()?;
        self.synth.validate()?;
        if self.ablate.modes.is_empty() || self.ablate.queue_lens.is_empty() || self.ablate.augment.is_empty() {
            return Err(Error::config("ablate grid axes must be nonempty"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::config("ablate.seeds must be nonempty"));
        }
        Ok(self)
    }

    /// Writes the resolved configuration as `config.json` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::checkpoint::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Worker threads: 1 in deterministic mode, else `C2L_THREADS` or the
    /// machine's parallelism.
    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        threads_from_env(std::env::var("C2L_THREADS").ok().as_deref())
    }
}

/// Parses a `C2L_THREADS` value; unset, empty or invalid values fall back
/// to the available parallelism.
pub fn threads_from_env(value: Option<&str>) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match value.map(str::trim).filter(|v| !v.is_empty()).map(str::parse::<usize>) {
        Some(Ok(n)) if n > 0 => n,
        Some(_) => {
            log::warn!("ignoring invalid C2L_THREADS; using {hw}");
            hw
        }
        None => hw,
    }
}
