//! Stochastic view generation.
//!
//! Each image goes through `crop → rotate → hflip → grayscale → cutout`, in
//! that fixed order. Every primitive draws from its own stream keyed by
//! `(seed, iteration, view, sample, primitive)`, so the result for one image
//! does not depend on how many other images were augmented before it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{Purpose, RngKey, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutoutConfig {
    pub enabled: bool,
    pub count: usize,
    pub size_fraction: f64,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        CutoutConfig {
            enabled: true,
            count: 1,
            size_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height), sampled log-uniformly.
    pub crop_ratio: [f64; 2],
    pub rotate: bool,
    pub rotation_degrees: f64,
    pub hflip: bool,
    pub hflip_prob: f64,
    pub grayscale: bool,
    pub cutout: CutoutConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            crop_scale: [0.6, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            rotate: true,
            rotation_degrees: 10.0,
            hflip: true,
            hflip_prob: 0.5,
            grayscale: true,
            cutout: CutoutConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// Every primitive off: the pipeline is the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop: false,
            rotate: false,
            hflip: false,
            grayscale: false,
            cutout: CutoutConfig {
                enabled: false,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "augment.crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::config("augment.crop_ratio must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("augment.hflip_prob must be in [0, 1]"));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return Err(Error::config("augment.rotation_degrees must be in [0, 180]"));
        }
        let f = self.cutout.size_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("augment.cutout.size_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// One `C × H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample at fractional `(y, x)`, treating everything outside
    /// the image as 0.
    fn sample_zero_fill(&self, c: usize, y: f64, x: f64) -> f32 {
        let plane = self.plane(c);
        let (y0, x0) = (y.floor(), x.floor());
        let (dy, dx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                0.0
            } else {
                plane[yy as usize * self.width + xx as usize] as f64
            }
        };
        let v = at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x0 + 1) * (1.0 - dy) * dx
            + at(y0 + 1, x0) * dy * (1.0 - dx)
            + at(y0 + 1, x0 + 1) * dy * dx;
        v as f32
    }

    /// Bilinear sample with coordinates clamped to the image (edge
    /// replication), used when resizing a crop.
    fn sample_clamped(&self, c: usize, y: f64, x: f64) -> f32 {
        let plane = self.plane(c);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (dy, dx) = (y - y0 as f64, x - x0 as f64);
        let p = |yy: usize, xx: usize| plane[yy * self.width + xx] as f64;
        let v = p(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + p(y0, x1) * (1.0 - dy) * dx
            + p(y1, x0) * dy * (1.0 - dx)
            + p(y1, x1) * dy * dx;
        v as f32
    }
}

/// Crop window in pixel units: top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

pub fn sample_crop(h: usize, w: usize, config: &AugmentConfig, rng: &mut RngStream) -> Result<CropWindow> {
    let area = rng.gen_range(config.crop_scale[0]..=config.crop_scale[1]) * (h * w) as f64;
    let (lr0, lr1) = (config.crop_ratio[0].ln(), config.crop_ratio[1].ln());
    let ratio = rng.gen_range(lr0..=lr1).exp();
    let cw = (area * ratio).sqrt().min(w as f64);
    let ch = (area / ratio).sqrt().min(h as f64);
    if cw < 1.0 || ch < 1.0 {
        return Err(Error::InvalidShape {
            op: "crop",
            msg: format!("crop window {ch:.3}×{cw:.3} is smaller than one pixel"),
        });
    }
    let top = rng.gen_range(0.0..=(h as f64 - ch));
    let left = rng.gen_range(0.0..=(w as f64 - cw));
    Ok(CropWindow {
        top,
        left,
        height: ch,
        width: cw,
    })
}

/// Resamples `window` back to the full image size.
pub fn crop_resize(image: &Image, window: CropWindow) -> Result<Image> {
    if window.height < 1.0 || window.width < 1.0 {
        return Err(Error::InvalidShape {
            op: "crop",
            msg: format!("crop window {:.3}×{:.3} is smaller than one pixel", window.height, window.width),
        });
    }
    let (h, w) = (image.height, image.width);
    let sy = window.height / h as f64;
    let sx = window.width / w as f64;
    let mut data = Vec::with_capacity(image.data.len());
    for c in 0..image.channels {
        for y in 0..h {
            let src_y = window.top + (y as f64 + 0.5) * sy - 0.5;
            for x in 0..w {
                let src_x = window.left + (x as f64 + 0.5) * sx - 0.5;
                data.push(image.sample_clamped(c, src_y, src_x));
            }
        }
    }
    Ok(Image::new(image.channels, h, w, data))
}

/// Rotates about the image center by `angle_degrees` (counter-clockwise),
/// bilinear, filling uncovered pixels with 0.
pub fn rotate(image: &Image, angle_degrees: f64) -> Image {
    if angle_degrees == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height, image.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let mut data = Vec::with_capacity(image.data.len());
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                // inverse map: output pixel back into the source
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let src_x = cos * dx - sin * dy + cx;
                let src_y = sin * dx + cos * dy + cy;
                data.push(image.sample_zero_fill(c, src_y, src_x));
            }
        }
    }
    Image::new(image.channels, h, w, data)
}

pub fn hflip(image: &Image) -> Image {
    let mut data = image.data.clone();
    for row in data.chunks_mut(image.width) {
        row.reverse();
    }
    Image::new(image.channels, image.height, image.width, data)
}

/// Luminance conversion for 3-channel images, replicated back to three
/// channels; identity otherwise.
pub fn grayscale(image: &Image) -> Image {
    if image.channels != 3 {
        return image.clone();
    }
    let n = image.height * image.width;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let l = 0.299 * image.data[i] + 0.587 * image.data[n + i] + 0.114 * image.data[2 * n + i];
        data[i] = l;
        data[n + i] = l;
        data[2 * n + i] = l;
    }
    Image::new(3, image.height, image.width, data)
}

/// Axis-aligned hole `[top, bottom) × [left, right)`, already clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hole {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// A square of side `round(size_fraction · min(H, W))` centered on a
/// uniformly drawn pixel, clipped at the borders.
pub fn cutout_hole(h: usize, w: usize, size_fraction: f64, rng: &mut RngStream) -> Hole {
    let side = (size_fraction * h.min(w) as f64).round() as isize;
    let cy = rng.gen_range(0..h) as isize;
    let cx = rng.gen_range(0..w) as isize;
    hole_at(h, w, side, cy, cx)
}

pub fn hole_at(h: usize, w: usize, side: isize, cy: isize, cx: isize) -> Hole {
    let top = cy - side / 2;
    let left = cx - side / 2;
    Hole {
        top: top.clamp(0, h as isize) as usize,
        bottom: (top + side).clamp(0, h as isize) as usize,
        left: left.clamp(0, w as isize) as usize,
        right: (left + side).clamp(0, w as isize) as usize,
    }
}

pub fn apply_hole(image: &mut Image, hole: Hole) {
    let n = image.height * image.width;
    for c in 0..image.channels {
        for y in hole.top..hole.bottom {
            let row = c * n + y * image.width;
            image.data[row + hole.left..row + hole.right].fill(0.0);
        }
    }
}

pub fn cutout(image: &Image, rng: &mut RngStream, size_fraction: f64) -> Image {
    let mut out = image.clone();
    let hole = cutout_hole(image.height, image.width, size_fraction, rng);
    apply_hole(&mut out, hole);
    out
}

/// Runs the full pipeline on one image.
pub fn augment_image(image: &Image, key: RngKey, config: &AugmentConfig) -> Result<Image> {
    let mut img = image.clone();
    if config.crop {
        let mut rng = key.purpose(Purpose::Crop).stream();
        let window = sample_crop(img.height, img.width, config, &mut rng)?;
        img = crop_resize(&img, window)?;
    }
    if config.rotate && config.rotation_degrees > 0.0 {
        let mut rng = key.purpose(Purpose::Rotate).stream();
        let d = config.rotation_degrees;
        img = rotate(&img, rng.gen_range(-d..=d));
    }
    if config.hflip {
        let mut rng = key.purpose(Purpose::Flip).stream();
        if rng.gen_bool(config.hflip_prob) {
            img = hflip(&img);
        }
    }
    if config.grayscale {
        img = grayscale(&img);
    }
    if config.cutout.enabled {
        let mut rng = key.purpose(Purpose::Cutout).stream();
        for _ in 0..config.cutout.count {
            let hole = cutout_hole(img.height, img.width, config.cutout.size_fraction, &mut rng);
            apply_hole(&mut img, hole);
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Augments every image of `batch`. Image `j` uses `key.sample(j)`; callers
/// distinguish views and iterations through the key's other coordinates.
pub fn augment_batch(batch: &ImageBatch, key: RngKey, config: &AugmentConfig) -> Result<ImageBatch> {
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let mut data = Vec::with_capacity(batch.tensor().len());
    for j in 0..batch.len() {
        let img = Image::new(c, h, w, batch.image(j).to_vec());
        let out = augment_image(&img, key.sample(j as u64), config)?;
        data.extend_from_slice(&out.data);
    }
    ImageBatch::new(Tensor::new(batch.tensor().shape(), data)?)
}
