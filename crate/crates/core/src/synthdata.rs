//! Procedural paired images with a known deformation.
//!
//! A pair shares one nucleus layout: the source is rendered in a
//! hematoxylin/eosin-like palette, the target in a DAB-like palette where a
//! subset of nuclei is stained brown. The target is then warped by a smooth
//! random field that is stored as ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_field, read_png, write_field, write_png};
use crate::tensor::{Tape, Tensor};

pub const SOURCE_NUCLEUS: [u8; 3] = [90, 60, 140];
pub const SOURCE_BACKGROUND: [u8; 3] = [235, 200, 210];
pub const TARGET_POSITIVE: [u8; 3] = [140, 90, 40];
pub const TARGET_NEGATIVE: [u8; 3] = [190, 200, 220];
pub const TARGET_BACKGROUND: [u8; 3] = [240, 235, 230];
pub const SEMI_AXIS_RANGE: (f64, f64) = (2.2, 3.6);
/// Minimum clear gap between neighbouring nucleus bounding circles, pixels.
pub const NUCLEUS_GAP: f64 = 3.0;
/// Peak amplitude of the additive texture in `[0, 1]` units.
pub const TEXTURE_AMPLITUDE: f64 = 0.035;
pub const MANIFEST_NAME: &str = "manifest.toml";
pub const MANIFEST_FORMAT: &str = "synthdata-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_nuclei_min: usize,
    pub n_nuclei_max: usize,
    pub positive_fraction: f64,
    pub max_displacement: f64,
    pub field_smoothness_sigma: f64,
    /// Stored as a TOML integer, so limited to `i64::MAX`.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_nuclei_min: 20,
            n_nuclei_max: 60,
            positive_fraction: 0.3,
            max_displacement: 3.0,
            field_smoothness_sigma: 8.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.image_size < 16 || self.image_size % 8 != 0 {
            return bad(format!(
                "image_size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            ));
        }
        if self.n_nuclei_min > self.n_nuclei_max {
            return bad(format!(
                "n_nuclei range {}..={} is empty",
                self.n_nuclei_min, self.n_nuclei_max
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive_fraction {} outside [0, 1]", self.positive_fraction));
        }
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return bad(format!("max_displacement {} must be >= 0", self.max_displacement));
        }
        if !(self.field_smoothness_sigma > 0.0) {
            return bad(format!(
                "field_smoothness_sigma {} must be > 0",
                self.field_smoothness_sigma
            ));
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds i64::MAX", self.seed));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nucleus {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub positive: bool,
}

impl Nucleus {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub index: u64,
    /// Source image `[3, H, W]` in `[-1, 1]`.
    pub x: Tensor,
    /// Target before deformation.
    pub y_pre: Tensor,
    /// `warp(y_pre, phi_star)`.
    pub y: Tensor,
    /// Ground-truth field `[2, H, W]`, values representable as `f32`.
    pub phi_star: Tensor,
    pub nuclei: Vec<Nucleus>,
}

impl SamplePair {
    pub fn positive_count(&self) -> usize {
        self.nuclei.iter().filter(|n| n.positive).count()
    }

    /// Nucleus membership per pixel, shared by source and pre-deformation target.
    pub fn nucleus_mask(&self) -> Vec<bool> {
        let size = self.x.shape()[1];
        render_mask(&self.nuclei, size)
    }
}

fn render_mask(nuclei: &[Nucleus], size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            nuclei.iter().any(|n| n.contains(x, y))
        })
        .collect()
}

fn place_nuclei(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Nucleus> {
    let want = rng.gen_range(spec.n_nuclei_min..=spec.n_nuclei_max);
    let size = spec.image_size as f64;
    let mut placed: Vec<Nucleus> = Vec::with_capacity(want);
    let mut attempts = 0;
    while placed.len() < want && attempts < 200 * want.max(1) {
        attempts += 1;
        let a = rng.gen_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1);
        let b = rng.gen_range(SEMI_AXIS_RANGE.0..SEMI_AXIS_RANGE.1);
        let r = a.max(b);
        let margin = r + 1.0;
        let cx = rng.gen_range(margin..size - margin);
        let cy = rng.gen_range(margin..size - margin);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let clear = placed.iter().all(|n| {
            let rn = n.a.max(n.b);
            (n.cx - cx).hypot(n.cy - cy) >= r + rn + NUCLEUS_GAP
        });
        if clear {
            placed.push(Nucleus {
                cx,
                cy,
                a,
                b,
                angle,
                positive: false,
            });
        }
    }
    let k = (spec.positive_fraction * placed.len() as f64).round() as usize;
    for i in sample(rng, placed.len(), k.min(placed.len())) {
        placed[i].positive = true;
    }
    placed
}

/// Smooth value noise in `[-1, 1]`: two octaves of bilinearly interpolated
/// random lattices.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for (cell, weight) in [(8usize, 0.65), (3usize, 0.35)] {
        let n = size / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / cell as f64, y as f64 / cell as f64);
                let (i, j) = (u.floor() as usize, v.floor() as usize);
                let (fu, fv) = (u - i as f64, v - j as f64);
                let at = |i: usize, j: usize| lattice[j * n + i];
                let top = at(i, j) * (1.0 - fu) + at(i + 1, j) * fu;
                let bot = at(i, j + 1) * (1.0 - fu) + at(i + 1, j + 1) * fu;
                out[y * size + x] += weight * (top * (1.0 - fv) + bot * fv);
            }
        }
    }
    out
}

fn render(
    nuclei: &[Nucleus],
    size: usize,
    colour: impl Fn(Option<&Nucleus>) -> [u8; 3],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let tex = texture(size, rng);
    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        let (x, y) = ((i % size) as f64, (i / size) as f64);
        let rgb = colour(nuclei.iter().find(|n| n.contains(x, y)));
        for c in 0..3 {
            let v = f64::from(rgb[c]) / 255.0 + TEXTURE_AMPLITUDE * tex[i];
            data[c * hw + i] = v.clamp(0.0, 1.0) * 2.0 - 1.0;
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// White noise on a canvas padded by the kernel radius, Gaussian-smoothed
/// and cropped to `size x size`, so the result has the same statistics at
/// the border as in the interior.
fn smooth_noise(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    let wide = size + 2 * radius;
    let noise: Vec<f64> = (0..wide * wide).map(|_| rng.sample(StandardNormal)).collect();
    // Horizontal pass over every canvas row, vertical pass on the crop.
    let mut rows = vec![0.0; wide * size];
    for y in 0..wide {
        for x in 0..size {
            let line = &noise[y * wide + x..y * wide + x + kernel.len()];
            rows[y * size + x] = line.iter().zip(&kernel).map(|(v, k)| v * k).sum::<f64>() / total;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(d, k)| k * rows[(y + d) * size + x])
                .sum::<f64>()
                / total;
        }
    }
    out
}

/// Smoothed Gaussian noise rescaled so its largest displacement equals
/// `max_displacement`, rounded to `f32` precision.
fn random_field(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let size = spec.image_size;
    let hw = size * size;
    let mut planes = Vec::with_capacity(2 * hw);
    for _ in 0..2 {
        planes.extend(smooth_noise(size, spec.field_smoothness_sigma, rng));
    }
    let peak = (0..hw)
        .map(|i| planes[i].hypot(planes[hw + i]))
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { spec.max_displacement / peak } else { 0.0 };
    // The shrink factor keeps the f32-rounded peak within the bound.
    let data = planes
        .iter()
        .map(|v| f64::from((v * scale * (1.0 - 1e-6)) as f32))
        .collect();
    Tensor::from_parts(vec![2, size, size], data)
}

/// Bilinear warp of a single image, `out(p) = image(p + field(p))`.
pub fn warp_image(image: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Argument(format!("expected [3, H, W], got {s:?}"))),
    };
    let tape = Tape::new();
    let img = tape.constant(image.reshape(&[1, 3, h, w])?);
    let f = tape.constant(field.reshape(&[1, 2, h, w])?);
    Ok(img.grid_sample_bilinear(f)?.value().reshape(&[3, h, w])?)
}

/// Deterministic pair `index` of the set described by `spec`.
pub fn generate_pair(spec: &SynthSpec, index: u64) -> Result<SamplePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let size = spec.image_size;
    let nuclei = place_nuclei(spec, &mut rng);
    let x = render(
        &nuclei,
        size,
        |n| if n.is_some() { SOURCE_NUCLEUS } else { SOURCE_BACKGROUND },
        &mut rng,
    );
    let y_pre = render(
        &nuclei,
        size,
        |n| match n {
            Some(n) if n.positive => TARGET_POSITIVE,
            Some(_) => TARGET_NEGATIVE,
            None => TARGET_BACKGROUND,
        },
        &mut rng,
    );
    let phi_star = random_field(spec, &mut rng);
    let y = warp_image(&y_pre, &phi_star)?;
    Ok(SamplePair {
        index,
        x,
        y_pre,
        y,
        phi_star,
        nuclei,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Largest per-channel error introduced by 8-bit PNG storage, in `[-1, 1]` units.
    pub image_quantization: f64,
    pub spec: SynthSpec,
}

/// A loaded image pair; `field` is present for synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub x: Tensor,
    pub y: Tensor,
    pub field: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `out/{train,test}/{x,y,field}/NNNN.*` and `out/manifest.toml`.
/// Train pairs use indices `0..n_train`, test pairs the next `n_test`.
pub fn write_dataset(spec: &SynthSpec, n_train: usize, n_test: usize, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for (split, range) in [("train", 0..n_train), ("test", n_train..n_train + n_test)] {
        let dirs: Vec<PathBuf> = ["x", "y", "field"].iter().map(|d| out.join(split).join(d)).collect();
        for d in &dirs {
            ensure_dir(d)?;
        }
        for (local, index) in range.enumerate() {
            let pair = generate_pair(spec, index as u64)?;
            let name = sample_name(local);
            write_png(&dirs[0].join(format!("{name}.png")), &pair.x)?;
            write_png(&dirs[1].join(format!("{name}.png")), &pair.y)?;
            write_field(&dirs[2].join(format!("{name}.f32raw")), &pair.phi_star)?;
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        n_train,
        n_test,
        image_quantization: 1.0 / 255.0,
        spec: spec.clone(),
    };
    let path = out.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::format(&path, format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

fn read_split(dir: &Path, split: &str, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let name = sample_name(i);
            let base = dir.join(split);
            let x = read_png(&base.join("x").join(format!("{name}.png")))?;
            let y = read_png(&base.join("y").join(format!("{name}.png")))?;
            let fpath = base.join("field").join(format!("{name}.f32raw"));
            let field = if fpath.exists() { Some(read_field(&fpath)?) } else { None };
            if x.shape() != y.shape() {
                return Err(Error::format(&base, format!("pair {name}: x and y differ in size")));
            }
            Ok(Sample {
                name,
                x,
                y,
                field,
            })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let train = read_split(dir, "train", manifest.n_train)?;
    let test = read_split(dir, "test", manifest.n_test)?;
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}

/// Pairs generated in memory, laid out like a read dataset.
pub fn in_memory_dataset(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<Dataset> {
    let make = |range: std::ops::Range<usize>| -> Result<Vec<Sample>> {
        range
            .enumerate()
            .map(|(local, index)| {
                let p = generate_pair(spec, index as u64)?;
                Ok(Sample {
                    name: sample_name(local),
                    x: p.x,
                    y: p.y,
                    field: Some(p.phi_star),
                })
            })
            .collect()
    };
    Ok(Dataset {
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            n_train,
            n_test,
            image_quantization: 0.0,
            spec: spec.clone(),
        },
        train: make(0..n_train)?,
        test: make(n_train..n_train + n_test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::count_positive;

    fn small() -> SynthSpec {
        SynthSpec {
            image_size: 32,
            n_nuclei_min: 5,
            n_nuclei_max: 10,
            ..Default::default()
        }
    }

    #[test]
    fn pairs_are_deterministic() {
        let a = generate_pair(&small(), 3).unwrap();
        let b = generate_pair(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x, generate_pair(&small(), 4).unwrap().x);
    }

    #[test]
    fn zero_displacement_keeps_target() {
        let spec = SynthSpec {
            max_displacement: 0.0,
            ..small()
        };
        let p = generate_pair(&spec, 0).unwrap();
        assert_eq!(p.y, p.y_pre);
        assert!(p.phi_star.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_respects_bound() {
        let p = generate_pair(&small(), 1).unwrap();
        let hw = 32 * 32;
        let d = p.phi_star.data();
        let peak = (0..hw).map(|i| d[i].hypot(d[hw + i])).fold(0.0, f64::max);
        assert!(peak <= 3.0 && peak > 2.99);
    }

    #[test]
    fn no_positives_means_no_brown() {
        let spec = SynthSpec {
            positive_fraction: 0.0,
            ..small()
        };
        let p = generate_pair(&spec, 2).unwrap();
        assert_eq!(p.positive_count(), 0);
        assert_eq!(count_positive(&p.y).unwrap(), 0);
    }

    #[test]
    fn validation_rejects_bad_fraction() {
        let spec = SynthSpec {
            positive_fraction: 1.5,
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unknown_spec_keys_are_rejected() {
        let mut text = SynthSpec::default().to_toml();
        text.push_str("colour = 3\n");
        assert!(matches!(SynthSpec::from_toml(&text), Err(Error::Config(_))));
    }
}
