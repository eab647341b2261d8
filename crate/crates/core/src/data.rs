//! Synthetic dataset generation, the binary dataset file format, channel
//! normalization, and train-time augmentation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SKDD";
pub const DATASET_VERSION: u16 = 1;

/// An in-memory labeled image set. Pixels are f64 in `[0, 1]`, layout
/// `N x C x H x W`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        // (C, H, W)
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gather a batch of raw images by index.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let (c, h, w) = self.dims();
        let per = c * h * w;
        let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * per..(row + 1) * per]
                .copy_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (out, labels)
    }
}

// ---------------------------------------------------------------------------
// binary file format
// ---------------------------------------------------------------------------

/// Serialize to the dataset container: magic, version, counts and extents,
/// u8 pixels (scaled 0-255), u8 labels, trailing FNV-1a checksum of all
/// preceding bytes. Little-endian throughout.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = ds.dims();
    let n = ds.len();
    if n > u32::MAX as usize || c > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::config(
            "dataset extents exceed the format limits".to_string(),
        ));
    }
    let mut buf = Vec::with_capacity(20 + n * c * h * w + n + 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes as u16).to_le_bytes());
    for &v in ds.images.data() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    buf.extend_from_slice(&ds.labels);
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 + 8 {
        return Err(Error::corrupt(format!(
            "{}: file too short",
            path.display()
        )));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(Error::corrupt(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    if &body[0..4] != DATASET_MAGIC {
        return Err(Error::corrupt(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::corrupt(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(body[10..12].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(body[12..14].try_into().unwrap()) as usize;
    let c = u16::from_le_bytes(body[14..16].try_into().unwrap()) as usize;
    let k = u16::from_le_bytes(body[16..18].try_into().unwrap()) as usize;
    let pixel_bytes = n * c * h * w;
    if body.len() != 18 + pixel_bytes + n {
        return Err(Error::corrupt(format!(
            "{}: payload length {} does not match header",
            path.display(),
            body.len()
        )));
    }
    let pixels = &body[18..18 + pixel_bytes];
    let labels = body[18 + pixel_bytes..].to_vec();
    if labels.iter().any(|&l| (l as usize) >= k) {
        return Err(Error::corrupt(format!(
            "{}: label out of range",
            path.display()
        )));
    }
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        num_classes: k,
    })
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// In `(0, 1]`: prototype contribution vs. per-sample noise.
    pub difficulty: f64,
    pub seed: u64,
    /// Maximum per-sample prototype translation in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

fn default_shift() -> usize {
    1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least two classes".to_string()));
        }
        if self.per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(
                "per-class sample counts must be positive".to_string(),
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("image extents must be positive".to_string()));
        }
        if self.difficulty.is_nan() || self.difficulty <= 0.0 || self.difficulty > 1.0 {
            return Err(Error::config(format!(
                "difficulty must lie in (0, 1], got {}",
                self.difficulty
            )));
        }
        if self.classes > 255 {
            return Err(Error::config(
                "labels are stored as u8; at most 255 classes".to_string(),
            ));
        }
        Ok(())
    }
}

/// 3x3 neighbor-mean smoothing with edge windows normalized by their actual
/// size (no darkening at the border).
fn smooth(field: &mut Vec<f64>, c: usize, h: usize, w: usize) {
    let mut out = vec![0.0; field.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += field[base + yy as usize * w + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[base + y * w + x] = acc / cnt;
            }
        }
    }
    *field = out;
}

/// Deterministic class-prototype synthesis: a smoothed random field per class,
/// per-sample translation plus Gaussian pixel noise, quantized to u8 range.
/// Difficulty near zero drowns the prototypes in noise.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (k, c, h, w) = (spec.classes, spec.channels, spec.height, spec.width);
    let root = Rng::new(spec.seed);

    // Class prototypes: smoothed noise standardized to [-1, 1].
    let mut protos = Vec::with_capacity(k);
    for class in 0..k {
        let mut rng = root.child(&format!("proto.{class}"));
        let mut field: Vec<f64> = (0..c * h * w).map(|_| rng.normal()).collect();
        smooth(&mut field, c, h, w);
        smooth(&mut field, c, h, w);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        for v in field.iter_mut() {
            *v -= mean;
        }
        let max = field.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
        for v in field.iter_mut() {
            *v /= max;
        }
        protos.push(field);
    }

    let make_split = |split: &str, per_class: usize| -> Result<Dataset> {
        let n = k * per_class;
        let mut images = Tensor::zeros(&[n, c, h, w]);
        let mut labels = Vec::with_capacity(n);
        let d = spec.difficulty;
        let s = spec.max_shift as i64;
        let mut row = 0;
        for class in 0..k {
            for i in 0..per_class {
                let mut rng = root.child(&format!("sample.{split}.{class}.{i}"));
                let dy = if s > 0 {
                    rng.next_below((2 * s + 1) as usize) as i64 - s
                } else {
                    0
                };
                let dx = if s > 0 {
                    rng.next_below((2 * s + 1) as usize) as i64 - s
                } else {
                    0
                };
                let dst = &mut images.data_mut()[row * c * h * w..(row + 1) * c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sy = y as i64 - dy;
                            let sx = x as i64 - dx;
                            let proto =
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    protos[class][ch * h * w + sy as usize * w + sx as usize]
                                } else {
                                    0.0
                                };
                            let noise = rng.normal();
                            let v = 0.5 + 0.45 * (d * proto + (1.0 - d) * 0.8 * noise);
                            let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                            dst[ch * h * w + y * w + x] = q;
                        }
                    }
                }
                labels.push(class as u8);
                row += 1;
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes: k,
        })
    };

    let train = make_split("train", spec.per_class)?;
    let test = make_split("test", spec.test_per_class)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// normalization and augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            means: vec![0.0; channels],
            stds: vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.means.len() != channels || self.stds.len() != channels {
            return Err(Error::config(format!(
                "normalization needs {channels} channel entries, got {}/{}",
                self.means.len(),
                self.stds.len()
            )));
        }
        if self.stds.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::config(
                "normalization stds must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = batch.dims4()?;
        self.validate(c)?;
        let mut out = batch.clone();
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let m = self.means[ch];
                let inv = 1.0 / self.stds[ch];
                for i in 0..h * w {
                    od[base + i] = (od[base + i] - m) * inv;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    #[serde(default = "default_pad")]
    pub pad: usize,
    #[serde(default = "default_crop")]
    pub crop: bool,
}

fn default_hflip() -> f64 {
    0.5
}
fn default_pad() -> usize {
    1
}
fn default_crop() -> bool {
    true
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            pad: 1,
            crop: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, h: usize, _w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!(
                "hflip_prob must be in [0,1], got {}",
                self.hflip_prob
            )));
        }
        if self.pad > h {
            return Err(Error::config(format!(
                "pad {} exceeds image height {h}",
                self.pad
            )));
        }
        if self.pad > 0 && !self.crop {
            return Err(Error::config(
                "padding without cropping would change the image size".to_string(),
            ));
        }
        Ok(())
    }

    pub const fn none() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            pad: 0,
            crop: false,
        }
    }
}

/// Per-sample augmentation decisions; offsets lie in `[0, 2 pad]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub off_y: usize,
    pub off_x: usize,
}

/// Draw the per-sample decisions. Each sample consumes one flip draw and,
/// when padding is active, two offset draws, in that fixed order.
pub fn draw_augment(cfg: &AugmentConfig, n: usize, rng: &mut Rng) -> Vec<AugmentDraw> {
    (0..n)
        .map(|_| {
            let flip = rng.next_f64() < cfg.hflip_prob;
            let (off_y, off_x) = if cfg.pad > 0 {
                (
                    rng.next_below(2 * cfg.pad + 1),
                    rng.next_below(2 * cfg.pad + 1),
                )
            } else {
                (0, 0)
            };
            AugmentDraw { flip, off_y, off_x }
        })
        .collect()
}

/// Apply flips then pad-and-crop with the given decisions. Pads with zeros.
pub fn apply_augment(batch: &Tensor, cfg: &AugmentConfig, draws: &[AugmentDraw]) -> Result<Tensor> {
    let [n, c, h, w] = batch.dims4()?;
    if draws.len() != n {
        return Err(Error::usage(format!(
            "{} draws for a batch of {n}",
            draws.len()
        )));
    }
    cfg.validate(h, w)?;
    let p = cfg.pad;
    let mut out = Tensor::zeros(batch.shape());
    let id = batch.data();
    let od = out.data_mut();
    for b in 0..n {
        let d = draws[b];
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    // position in the padded, flipped source image
                    let py = y as i64 + d.off_y as i64 - p as i64;
                    let px = x as i64 + d.off_x as i64 - p as i64;
                    let v = if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                        let sx = if d.flip {
                            w - 1 - px as usize
                        } else {
                            px as usize
                        };
                        id[base + py as usize * w + sx]
                    } else {
                        0.0
                    };
                    od[base + y * w + x] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Draw and apply in one call.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let draws = draw_augment(cfg, batch.shape()[0], rng);
    apply_augment(batch, cfg, &draws)
}
