//! Image files, CSV manifests and the synthetic radiograph-like corpus.
//!
//! Corpus layout: `pretrain/`, `train/` and `test/` under one root, each with
//! a `manifest.csv` and its images. Manifests have the header
//! `path,label_0,...,label_{C-1}` (unlabeled ones only `path`); paths are
//! relative to the manifest's directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::eval::LabeledSet;
use crate::numerics::Tensor;
use crate::rng::{Purpose, RngKey, RngStream};

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Quantizes `[0, 1]` values to the nearest 8-bit level.
    pub fn from_unit(width: usize, height: usize, data: &[f32]) -> Self {
        GrayImage {
            width,
            height,
            pixels: data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses binary PGM (`P5`) bytes. Any maxval up to 255 is rescaled to 8 bits.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}; only 8-bit PGM is read"));
    }
    // exactly one whitespace byte separates header and raster
    let data = bytes.get(pos + 1..).ok_or("missing raster")?;
    if data.len() != width * height {
        return Err(format!("raster has {} bytes, expected {}", data.len(), width * height));
    }
    let pixels = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| (((v as usize).min(maxval) * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| dataset_err(path, m))
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| dataset_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| dataset_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(dataset_err(
            path,
            format!("only 8-bit grayscale PNG is supported, got {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(GrayImage {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

/// Dispatches on the file extension (`.pgm` or `.png`).
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(dataset_err(path, "unsupported image format (expected .pgm or .png)")),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.class_names.is_empty()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| dataset_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| dataset_err(path, e.to_string()))?.clone();
    if headers.get(0) != Some("path") {
        return Err(dataset_err(path, "manifest header must start with `path`"));
    }
    let class_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| dataset_err(path, format!("line {line}: {e}")))?;
        let rel = record.get(0).unwrap_or_default();
        if rel.is_empty() {
            return Err(dataset_err(path, format!("line {line}: empty path")));
        }
        let labels = if class_names.is_empty() {
            None
        } else {
            let vals = record
                .iter()
                .skip(1)
                .map(|v| match v {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(dataset_err(path, format!("line {line} ({rel}): label {other:?} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != class_names.len() {
                return Err(dataset_err(
                    path,
                    format!("line {line} ({rel}): {} labels for {} classes", vals.len(), class_names.len()),
                ));
            }
            Some(vals)
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(rel),
            labels,
        });
    }
    Ok(DatasetManifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
        class_names,
    })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["path".to_string()];
    header.extend(manifest.class_names.iter().cloned());
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for e in &manifest.entries {
        let mut row = vec![e.path.to_string_lossy().into_owned()];
        if let Some(l) = &e.labels {
            row.extend(l.iter().map(u8::to_string));
        }
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A fully loaded dataset, images in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: ImageBatch,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Consecutive batches of up to `size` images in manifest order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<ImageBatch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.images.select(&c))
    }

    pub fn labeled(&self) -> Result<LabeledSet> {
        if !self.manifest.is_labeled() {
            return Err(dataset_err(&self.manifest.root, "manifest has no label columns"));
        }
        let labels = self
            .manifest
            .entries
            .iter()
            .map(|e| e.labels.clone().expect("labeled manifest"))
            .collect();
        LabeledSet::new(self.images.clone(), labels, self.manifest.class_names.clone())
    }
}

/// Loads every image of a manifest. `expected` fixes the `(H, W)` size;
/// otherwise the first image decides.
pub fn load_dataset(manifest_path: &Path, expected: Option<[usize; 2]>) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(dataset_err(manifest_path, "manifest lists no images"));
    }
    let mut size = expected;
    let mut data = Vec::new();
    for e in &manifest.entries {
        let path = manifest.root.join(&e.path);
        let img = read_image(&path).map_err(|err| match err {
            Error::Io { source, .. } => dataset_err(&path, format!("cannot read entry {}: {source}", e.path.display())),
            other => other,
        })?;
        let [h, w] = *size.get_or_insert([img.height, img.width]);
        if [img.height, img.width] != [h, w] {
            return Err(dataset_err(
                &path,
                format!("entry {} is {}×{}, expected {h}×{w}", e.path.display(), img.height, img.width),
            ));
        }
        data.extend(img.to_unit());
    }
    let [h, w] = size.expect("nonempty");
    let images = ImageBatch::new(Tensor::new(&[manifest.len(), 1, h, w], data)?)?;
    Ok(Dataset { manifest, images })
}

/// Writes a batch as PGM files plus a manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    images: &ImageBatch,
    labels: Option<&[Vec<u8>]>,
    class_names: &[String],
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if images.channels() != 1 {
        return Err(Error::config("only single-channel images can be written as PGM"));
    }
    let mut entries = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let name = format!("img_{i:05}.pgm");
        let img = GrayImage::from_unit(images.width(), images.height(), images.image(i));
        write_pgm(&dir.join(&name), &img)?;
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            labels: labels.map(|l| l[i].clone()),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        class_names: if labels.is_some() { class_names.to_vec() } else { Vec::new() },
    };
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// Parameters of the synthetic corpus. Intensities are in `[0, 1]` units,
/// lengths in pixels unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_unlabeled: usize,
    pub num_labeled_train: usize,
    pub num_labeled_test: usize,
    /// `(H, W)`.
    pub image_size: [usize; 2],
    pub noise_sigma: f64,
    /// Mean brightness of the class structure above the background.
    pub contrast: f64,
    /// Uniform jitter of the structure brightness, ±.
    pub intensity_jitter: f64,
    /// Uniform jitter of the structure center, ± this fraction of the size.
    pub position_jitter: f64,
    /// Disc radius range; bars get the same area.
    pub radius: [f64; 2],
    /// Bar half-width range.
    pub bar_half_width: [f64; 2],
    /// Faint blobs added to every image regardless of class.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_unlabeled: 2000,
            num_labeled_train: 200,
            num_labeled_test: 200,
            image_size: [64, 64],
            noise_sigma: 0.04,
            contrast: 0.25,
            intensity_jitter: 0.08,
            position_jitter: 0.2,
            radius: [5.0, 8.0],
            bar_half_width: [1.5, 2.5],
            distractors: 3,
            seed: 0,
        }
    }
}

/// Class names written to labeled manifests.
pub const SYNTH_CLASSES: [&str; 2] = ["label_0", "label_1"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_unlabeled == 0 || self.num_labeled_train == 0 || self.num_labeled_test == 0 {
            return Err(Error::config("synth counts must be at least 1"));
        }
        let [h, w] = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::config("synth image_size must be at least 8×8"));
        }
        let nonneg = [self.noise_sigma, self.contrast, self.intensity_jitter, self.position_jitter];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("synth noise, contrast and jitter must be non-negative"));
        }
        for [lo, hi] in [self.radius, self.bar_half_width] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config("synth size ranges must satisfy 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

// Rendering is integer-only: intensities in Q16, coordinates in Q8. The
// random stream yields integers, so every platform writes the same bytes.
const ONE: i64 = 1 << 16;
const SUB: i64 = 1 << 8;

fn q16(v: f64) -> i64 {
    (v * ONE as f64).round() as i64
}

fn q8(v: f64) -> i64 {
    (v * SUB as f64).round() as i64
}

fn isqrt(v: i64) -> i64 {
    (v.max(0) as u64).isqrt() as i64
}

/// Uniform integer in `[lo, hi]`, inclusive; `lo` when the range is empty.
fn uniform(rng: &mut RngStream, lo: i64, hi: i64) -> i64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Approximately normal noise with deviation `sigma` (Q16): a sum of four
/// uniforms rescaled.
fn noise(rng: &mut RngStream, sigma: i64) -> i64 {
    let s: i64 = (0..4).map(|_| rng.gen_range(-32768i64..32768)).sum();
    // sd of the sum is 65536/sqrt(3) ≈ 37837
    s * sigma / 37837
}

/// Coverage in Q8 of a 1-pixel antialiased edge at signed distance `inside`
/// (Q8, positive inside).
fn edge(inside: i64) -> i64 {
    (inside + SUB / 2).clamp(0, SUB)
}

/// One synthetic image of `class` (0 disc, 1 bar) as 8-bit pixels.
pub fn render_synth(config: &SynthConfig, class: u8, rng: &mut RngStream) -> GrayImage {
    let [h, w] = config.image_size;
    let (hi, wi) = (h as i64, w as i64);
    let mut px = vec![0i64; h * w];

    // background: level, vertical gradient, two darker elliptical fields
    let base = uniform(rng, q16(0.30), q16(0.45));
    let grad = uniform(rng, -q16(0.10), q16(0.10));
    let depth = uniform(rng, q16(0.08), q16(0.16));
    let (ry, rx) = (hi * 35 / 100 * SUB, wi * 16 / 100 * SUB);
    let fields = [(hi * SUB / 2, wi * 30 * SUB / 100), (hi * SUB / 2, wi * 70 * SUB / 100)];
    for y in 0..hi {
        for x in 0..wi {
            let (py, pxx) = (y * SUB + SUB / 2, x * SUB + SUB / 2);
            let mut v = base + grad * (2 * y - hi) / hi;
            for &(cy, cx) in &fields {
                let (dy, dx) = (py - cy, pxx - cx);
                let r2 = dy * dy * ONE / (ry * ry) + dx * dx * ONE / (rx * rx);
                if r2 < ONE {
                    v -= depth * (ONE - r2) / ONE;
                }
            }
            px[(y * wi + x) as usize] = v;
        }
    }

    // distractor blobs, same for both classes
    for _ in 0..config.distractors {
        let cy = uniform(rng, 0, hi * SUB);
        let cx = uniform(rng, 0, wi * SUB);
        let r = uniform(rng, SUB, 2 * SUB);
        let amp = uniform(rng, -q16(0.08), q16(0.08));
        for y in 0..hi {
            for x in 0..wi {
                let (dy, dx) = (y * SUB + SUB / 2 - cy, x * SUB + SUB / 2 - cx);
                let cov = edge(r - isqrt(dy * dy + dx * dx));
                px[(y * wi + x) as usize] += amp * cov / SUB;
            }
        }
    }

    // class structure
    let jy = (config.position_jitter * h as f64 * SUB as f64) as i64;
    let jx = (config.position_jitter * w as f64 * SUB as f64) as i64;
    let cy = hi * SUB / 2 + uniform(rng, -jy, jy);
    let cx = wi * SUB / 2 + uniform(rng, -jx, jx);
    let amp = q16(config.contrast) + uniform(rng, -q16(config.intensity_jitter), q16(config.intensity_jitter));
    let radius = uniform(rng, q8(config.radius[0]), q8(config.radius[1]));
    let half_w = uniform(rng, q8(config.bar_half_width[0]), q8(config.bar_half_width[1]));
    // equal area: π r² = 4 L w, with π ≈ 804/256
    let half_len = 804 * radius * radius / (4 * half_w * SUB);
    let (mut a, mut b) = (0i64, 0i64);
    while a * a + b * b < 64 * 64 {
        a = uniform(rng, -128, 128);
        b = uniform(rng, -128, 128);
    }
    let norm = isqrt(a * a + b * b);
    for y in 0..hi {
        for x in 0..wi {
            let (dy, dx) = (y * SUB + SUB / 2 - cy, x * SUB + SUB / 2 - cx);
            let cov = if class == 0 {
                edge(radius - isqrt(dy * dy + dx * dx))
            } else {
                let along = (dx * a + dy * b) / norm;
                let across = (dy * a - dx * b) / norm;
                edge(half_len - along.abs()).min(edge(half_w - across.abs()))
            };
            px[(y * wi + x) as usize] += amp * cov / SUB;
        }
    }

    let sigma = q16(config.noise_sigma);
    let pixels = px
        .into_iter()
        .map(|v| {
            let v = (v + noise(rng, sigma)).clamp(0, ONE - 1);
            ((v * 255 + ONE / 2) >> 16) as u8
        })
        .collect();
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Images of one split with alternating classes, so labels are balanced.
pub fn synth_split(config: &SynthConfig, split: u64, count: usize) -> Result<(ImageBatch, Vec<Vec<u8>>)> {
    let [h, w] = config.image_size;
    let mut data = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    let key = RngKey::new(config.seed).purpose(Purpose::Synth).batch(split);
    for i in 0..count {
        let class = (i % 2) as u8;
        let img = render_synth(config, class, &mut key.sample(i as u64).stream());
        data.extend(img.to_unit());
        labels.push(if class == 0 { vec![1, 0] } else { vec![0, 1] });
    }
    Ok((ImageBatch::new(Tensor::new(&[count, 1, h, w], data)?)?, labels))
}

/// In-memory corpus: unlabeled pretrain images plus labeled train/test.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub pretrain: ImageBatch,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let names: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let (pretrain, _) = synth_split(config, 0, config.num_unlabeled)?;
    let (tr, trl) = synth_split(config, 1, config.num_labeled_train)?;
    let (te, tel) = synth_split(config, 2, config.num_labeled_test)?;
    Ok(SynthCorpus {
        pretrain,
        train: LabeledSet::new(tr, trl, names.clone())?,
        test: LabeledSet::new(te, tel, names)?,
    })
}

/// Generates the corpus under `root`.
pub fn synth_generate(config: &SynthConfig, root: &Path) -> Result<()> {
    let corpus = synth_corpus(config)?;
    write_dataset(&root.join("pretrain"), &corpus.pretrain, None, &[])?;
    for (name, set) in [("train", &corpus.train), ("test", &corpus.test)] {
        write_dataset(&root.join(name), &set.images, Some(&set.labels), &set.class_names)?;
    }
    Ok(())
}
