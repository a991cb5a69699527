//! Image-quality and registration metrics.
//!
//! Image arguments are `[3, H, W]` or `[1, 3, H, W]` tensors in `[-1, 1]`;
//! they are mapped to `[0, 1]` (and to Rec. 601 luminance where a single
//! channel is needed) before any computation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::RandomConvStack;
use crate::tensor::{Tape, Tensor, Var};

pub const NMI_BINS: usize = 32;

/// Histogram transition width used by [`soft_nmi`]. Narrow enough that
/// `soft_nmi(I, I)` stays above 0.98 and the soft value follows the hard one.
pub const NMI_RAMP: f64 = 0.005;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const POSITIVE_BROWNNESS: f64 = 0.15;
pub const POSITIVE_MAX_LUMINANCE: f64 = 0.8;
pub const POSITIVE_MIN_AREA: usize = 8;
pub const FEATURE_DISTANCE_SEED: u64 = 0x0f1d_5eed;
pub const FEATURE_DISTANCE_MIN_IMAGES: usize = 16;

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Argument(format!(
                "plane {width}x{height} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `(C, H, W)` of a single image, accepting a leading batch axis of 1.
fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Argument(format!("expected one image, got shape {s:?}"))),
    }
}

fn rgb_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image_dims(image)? {
        (3, h, w) => Ok((h, w)),
        (c, _, _) => Err(Error::Argument(format!("expected 3 channels, got {c}"))),
    }
}

/// Rec. 601 luminance in `[0, 1]` of an RGB image in `[-1, 1]`.
pub fn luminance(image: &Tensor) -> Result<Plane> {
    let (h, w) = rgb_dims(image)?;
    let d = image.data();
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let y = LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i];
            0.5 * (y + 1.0)
        })
        .collect();
    Plane::new(w, h, data)
}

/// Differentiable luminance `[N, 1, H, W]` in `[0, 1]` of a batch in `[-1, 1]`.
pub fn luminance_var<'t>(images: Var<'t>) -> Result<Var<'t>> {
    let kernel = images
        .tape()
        .constant(Tensor::new(&[1, 3, 1, 1], LUMA.to_vec())?);
    Ok(images.conv2d(kernel, 1, 0)?.mul_scalar(0.5).add_scalar(0.5))
}

fn check_same(a: &Plane, b: &Plane) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Argument(format!(
            "planes differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// Side of the Gaussian window actually used.
    pub window: usize,
    /// Set when the image was smaller than the standard window.
    pub shrunk: bool,
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &data[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM on `[0, 1]` planes with dynamic range 1, averaged over
/// all positions where the window fits.
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<Ssim> {
    check_same(a, b)?;
    let side = a.width.min(a.height);
    let shrunk = side < SSIM_WINDOW;
    let window = if shrunk { side - (1 - side % 2) } else { SSIM_WINDOW };
    let k = gaussian_window(window);
    let (w, h) = (a.width, a.height);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let e_aa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let e_bb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let e_ab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(Ssim {
        value: total / n as f64,
        window,
        shrunk,
    })
}

/// SSIM between the luminances of two images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Ssim> {
    ssim_planes(&luminance(a)?, &luminance(b)?)
}

/// `10 log10(1 / MSE)` on `[0, 1]` values, [`PSNR_CAP`] for identical inputs.
pub fn psnr_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!(
            "psnr of {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR over all RGB values of two images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    rgb_dims(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "psnr of {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let unit = |t: &Tensor| t.data().iter().map(|v| 0.5 * (v + 1.0)).collect::<Vec<_>>();
    psnr_values(&unit(a), &unit(b))
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn nmi_from_joint(joint: &[f64], bins: usize) -> f64 {
    let total: f64 = joint.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let p: Vec<f64> = joint.iter().map(|v| v / total).collect();
    let pa = (0..bins).map(|i| p[i * bins..(i + 1) * bins].iter().sum::<f64>());
    let pb = (0..bins).map(|j| (0..bins).map(|i| p[i * bins + j]).sum::<f64>());
    let (ha, hb) = (entropy(pa), entropy(pb));
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let hab = entropy(p.iter().copied());
    2.0 * (ha + hb - hab) / (ha + hb)
}

fn check_bins(a: usize, b: usize, bins: usize) -> Result<()> {
    if bins < 2 || a != b || a == 0 {
        return Err(Error::Argument(format!(
            "nmi of {a} vs {b} values with {bins} bins"
        )));
    }
    Ok(())
}

/// NMI `2 I(A;B) / (H(A) + H(B))` with each value in `[0, 1]` assigned to
/// the bin `round(v (bins - 1))`. Zero when either marginal entropy is zero.
pub fn hard_nmi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    check_bins(a.len(), b.len(), bins)?;
    let scale = (bins - 1) as f64;
    let bin = |v: f64| (v * scale).clamp(0.0, scale).round() as usize;
    let mut joint = vec![0.0; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin(x) * bins + bin(y)] += 1.0;
    }
    Ok(nmi_from_joint(&joint, bins))
}

/// Differentiable NMI of two equally long value vectors in `[0, 1]`, using
/// the narrow [`NMI_RAMP`] kernel so it tracks [`hard_nmi`] closely.
pub fn soft_nmi<'t>(a: Var<'t>, b: Var<'t>, bins: usize) -> Result<Var<'t>> {
    soft_nmi_with(a, b, bins, NMI_RAMP)
}

/// [`soft_nmi`] with an explicit histogram transition width (in bins, see
/// [`Var::soft_joint_histogram`]). Zero when either marginal entropy is zero.
pub fn soft_nmi_with<'t>(a: Var<'t>, b: Var<'t>, bins: usize, ramp: f64) -> Result<Var<'t>> {
    let (la, lb) = (a.value().len(), b.value().len());
    check_bins(la, lb, bins)?;
    let tape = a.tape();
    let a = a.reshape(&[la])?;
    let b = b.reshape(&[lb])?;
    let joint = a.soft_joint_histogram(b, bins, ramp)?;
    let total = joint.sum();
    if total.item() <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = joint.div(total.reshape(&[1, 1])?)?;
    let ha = p.sum_to(&[bins, 1])?.xlogx().sum().neg();
    let hb = p.sum_to(&[1, bins])?.xlogx().sum().neg();
    if ha.item() <= 0.0 || hb.item() <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let hab = p.xlogx().sum().neg();
    let marg = ha.add(hb)?;
    Ok(marg.sub(hab)?.mul_scalar(2.0).div(marg)?)
}

/// Value of [`soft_nmi`] on plain slices.
pub fn soft_nmi_value(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    check_bins(a.len(), b.len(), bins)?;
    let tape = Tape::new();
    let va = tape.constant(Tensor::new(&[a.len()], a.to_vec())?);
    let vb = tape.constant(Tensor::new(&[b.len()], b.to_vec())?);
    Ok(soft_nmi(va, vb, bins)?.item())
}

/// Mean per-pixel Euclidean distance between two `[.., 2, H, W]` fields.
pub fn end_point_error(phi: &Tensor, phi_star: &Tensor) -> Result<f64> {
    if phi.shape() != phi_star.shape() || phi.rank() < 3 || phi.shape()[phi.rank() - 3] != 2 {
        return Err(Error::Argument(format!(
            "end-point error of {:?} vs {:?}",
            phi.shape(),
            phi_star.shape()
        )));
    }
    let r = phi.rank();
    let hw = phi.shape()[r - 2] * phi.shape()[r - 1];
    let items = phi.len() / (2 * hw);
    let (a, b) = (phi.data(), phi_star.data());
    let mut total = 0.0;
    for n in 0..items {
        let base = n * 2 * hw;
        for i in 0..hw {
            let dx = a[base + i] - b[base + i];
            let dy = a[base + hw + i] - b[base + hw + i];
            total += dx.hypot(dy);
        }
    }
    Ok(total / (items * hw) as f64)
}

/// Mask of brown, dark-enough pixels: `R - B > 0.15` and luminance `< 0.8`.
pub fn positive_mask(image: &Tensor) -> Result<Plane> {
    let (h, w) = rgb_dims(image)?;
    let hw = h * w;
    let d = image.data();
    let unit = |v: f64| 0.5 * (v + 1.0);
    let data = (0..hw)
        .map(|i| {
            let (r, g, b) = (unit(d[i]), unit(d[hw + i]), unit(d[2 * hw + i]));
            let lum = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b;
            f64::from(u8::from(r - b > POSITIVE_BROWNNESS && lum < POSITIVE_MAX_LUMINANCE))
        })
        .collect();
    Plane::new(w, h, data)
}

/// Sizes of the 8-connected components of a binary plane, in scan order of
/// their first pixel.
pub fn component_areas(mask: &Plane) -> Vec<usize> {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut seen = vec![false; mask.data.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.data.len() {
        if seen[start] || mask.data[start] == 0.0 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = ((i as isize) % w, (i as isize) / w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if !seen[j] && mask.data[j] != 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas
}

/// Number of positive-stained regions of at least 8 pixels.
pub fn count_positive(image: &Tensor) -> Result<usize> {
    let areas = component_areas(&positive_mask(image)?);
    Ok(areas.into_iter().filter(|&a| a >= POSITIVE_MIN_AREA).count())
}

/// Fréchet distance between Gaussian fits of features pooled from a fixed,
/// seeded random convolution stack (a stand-in for Inception features).
#[derive(Clone, Debug)]
pub struct FeatureDistance {
    net: RandomConvStack,
}

impl Default for FeatureDistance {
    fn default() -> Self {
        Self::new(FEATURE_DISTANCE_SEED)
    }
}

impl FeatureDistance {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self {
            net: RandomConvStack::new(seed, [3, 16, 32, Self::DIM]),
        }
    }

    /// One pooled feature row per image.
    pub fn features(&self, images: &[Tensor]) -> Result<DMatrix<f64>> {
        let mut rows = Vec::with_capacity(images.len() * Self::DIM);
        for chunk in images.chunks(16) {
            let batch: Vec<Tensor> = chunk
                .iter()
                .map(|t| {
                    rgb_dims(t)?;
                    let (_, h, w) = image_dims(t)?;
                    Ok(t.reshape(&[1, 3, h, w])?)
                })
                .collect::<Result<_>>()?;
            let tape = Tape::new();
            let x = tape.constant(Tensor::stack_batch(&batch)?);
            let [_, _, top] = self.net.forward(x)?;
            rows.extend_from_slice(top.global_avg_pool()?.value().data());
        }
        Ok(DMatrix::from_row_slice(images.len(), Self::DIM, &rows))
    }

    pub fn distance(&self, a: &[Tensor], b: &[Tensor]) -> Result<f64> {
        for set in [a, b] {
            if set.len() < FEATURE_DISTANCE_MIN_IMAGES {
                return Err(Error::Argument(format!(
                    "feature distance needs at least {FEATURE_DISTANCE_MIN_IMAGES} images per set, got {}",
                    set.len()
                )));
            }
        }
        Ok(frechet_distance(&self.features(a)?, &self.features(b)?))
    }
}

fn moments(rows: &DMatrix<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let mean = rows.row_mean();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    (mean.transpose(), cov)
}

/// Square root of a symmetric positive semi-definite matrix, clipping
/// negative eigenvalues to zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` over feature rows.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (mu_a, s_a) = moments(a);
    let (mu_b, s_b) = moments(b);
    // tr((S_a S_b)^(1/2)) = tr((R S_b R)^(1/2)) with R = S_a^(1/2).
    let r = psd_sqrt(s_a.clone());
    let inner = &r * &s_b * &r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    // round-off can push identical sets a hair below zero
    ((mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0)
}

/// Metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub content_ssim: f64,
    pub content_psnr: f64,
    pub stain_ssim: f64,
    pub stain_psnr: f64,
    pub reg_ssim: f64,
    pub reg_psnr: f64,
    pub epe: Option<f64>,
    pub roughness: f64,
    pub positive_count_src: usize,
    pub positive_count_gen: usize,
}

/// Column means of the per-pair rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateMetrics {
    pub content_ssim: f64,
    pub content_psnr: f64,
    pub stain_ssim: f64,
    pub stain_psnr: f64,
    pub reg_ssim: f64,
    pub reg_psnr: f64,
    pub epe: Option<f64>,
    pub roughness: f64,
    pub positive_count_src: f64,
    pub positive_count_gen: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<PairMetrics>,
    pub aggregate: AggregateMetrics,
    /// Feature distance of generated images to targets.
    pub rfd_gen: Option<f64>,
    /// Feature distance of warped generated images to targets.
    pub rfd_warped: Option<f64>,
    pub ssim_window_shrunk: bool,
}

const CSV_HEADER: &str = "pair,content_ssim,content_psnr,stain_ssim,stain_psnr,reg_ssim,reg_psnr,epe,roughness,positive_count_src,positive_count_gen,rfd_gen,rfd_warped";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricReport {
    pub fn new(
        rows: Vec<PairMetrics>,
        rfd_gen: Option<f64>,
        rfd_warped: Option<f64>,
        ssim_window_shrunk: bool,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("metric report needs at least one pair".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&PairMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let epe = rows
            .iter()
            .map(|r| r.epe)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let aggregate = AggregateMetrics {
            content_ssim: mean(&|r| r.content_ssim),
            content_psnr: mean(&|r| r.content_psnr),
            stain_ssim: mean(&|r| r.stain_ssim),
            stain_psnr: mean(&|r| r.stain_psnr),
            reg_ssim: mean(&|r| r.reg_ssim),
            reg_psnr: mean(&|r| r.reg_psnr),
            epe,
            roughness: mean(&|r| r.roughness),
            positive_count_src: mean(&|r| r.positive_count_src as f64),
            positive_count_gen: mean(&|r| r.positive_count_gen as f64),
        };
        Ok(Self {
            rows,
            aggregate,
            rfd_gen,
            rfd_warped,
            ssim_window_shrunk,
        })
    }

    /// One row per pair, then a `mean` row carrying the set-level distances.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{},{},{},,",
                r.content_ssim,
                r.content_psnr,
                r.stain_ssim,
                r.stain_psnr,
                r.reg_ssim,
                r.reg_psnr,
                opt(r.epe),
                r.roughness,
                r.positive_count_src,
                r.positive_count_gen
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "mean,{},{},{},{},{},{},{},{},{},{},{},{}",
            a.content_ssim,
            a.content_psnr,
            a.stain_ssim,
            a.stain_psnr,
            a.reg_ssim,
            a.reg_psnr,
            opt(a.epe),
            a.roughness,
            a.positive_count_src,
            a.positive_count_gen,
            opt(self.rfd_gen),
            opt(self.rfd_warped)
        );
        out
    }

    /// Plain-text table grouped by comparison.
    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        let _ = writeln!(s, "pairs: {}", self.rows.len());
        let _ = writeln!(s, "{:<34} {:>8} {:>8}", "comparison", "SSIM", "PSNR");
        for (label, ssim, psnr) in [
            ("content consistency (X vs Y_hat)", a.content_ssim, a.content_psnr),
            ("staining consistency (Y vs Y_hat)", a.stain_ssim, a.stain_psnr),
            ("registration (Y_tilde vs Y)", a.reg_ssim, a.reg_psnr),
        ] {
            let _ = writeln!(s, "{label:<34} {ssim:>8.4} {psnr:>8.3}");
        }
        if let Some(e) = a.epe {
            let _ = writeln!(s, "end-point error: {e:.4} px");
        }
        let _ = writeln!(s, "field roughness: {:.6}", a.roughness);
        let _ = writeln!(
            s,
            "positive regions: target {:.2}, generated {:.2}",
            a.positive_count_src, a.positive_count_gen
        );
        if let (Some(g), Some(w)) = (self.rfd_gen, self.rfd_warped) {
            let _ = writeln!(
                s,
                "random-feature distance (FID surrogate): generated {g:.5}, warped {w:.5}"
            );
        }
        if self.ssim_window_shrunk {
            let _ = writeln!(s, "note: SSIM window shrunk to fit small images");
        }
        s.push_str("LPIPS: not computed (needs pretrained weights)\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
        Plane::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_plane(&mut rng, 32, 32);
        assert_eq!(ssim_planes(&a, &a).unwrap().value, 1.0);
        let zero = Plane::constant(16, 16, 0.0);
        let one = Plane::constant(16, 16, 1.0);
        let c1 = 1e-4;
        assert_relative_eq!(
            ssim_planes(&zero, &one).unwrap().value,
            c1 / (1.0 + c1),
            max_relative = 1e-9
        );
    }

    #[test]
    fn ssim_shrinks_window_on_small_images() {
        let a = Plane::constant(6, 9, 0.3);
        let s = ssim_planes(&a, &a).unwrap();
        assert!(s.shrunk);
        assert_eq!(s.window, 5);
    }

    #[test]
    fn psnr_hand_values() {
        assert_eq!(psnr_values(&[0.2; 10], &[0.2; 10]).unwrap(), PSNR_CAP);
        assert_relative_eq!(psnr_values(&[0.5; 10], &[0.4; 10]).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn nmi_of_identical_values_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
        assert_relative_eq!(hard_nmi(&a, &a, 32).unwrap(), 1.0, epsilon = 1e-12);
        // only values inside the narrow transition bands leak
        assert!(soft_nmi_value(&a, &a, 32).unwrap() > 0.98);
    }

    #[test]
    fn constant_input_has_zero_nmi() {
        let a = vec![0.4; 64];
        let b: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        assert_eq!(hard_nmi(&a, &b, 16).unwrap(), 0.0);
        assert_eq!(soft_nmi_value(&a, &b, 16).unwrap(), 0.0);
    }

    #[test]
    fn end_point_error_of_constant_field() {
        let mut data = vec![3.0; 2 * 16];
        data[16..].fill(4.0);
        let star = Tensor::new(&[2, 4, 4], data).unwrap();
        let zero = Tensor::zeros(&[2, 4, 4]);
        assert_relative_eq!(end_point_error(&zero, &star).unwrap(), 5.0, epsilon = 1e-12);
        assert_eq!(end_point_error(&star, &star).unwrap(), 0.0);
    }

    #[test]
    fn components_use_eight_connectivity() {
        // Two diagonal pixels touch; an isolated pixel does not.
        let mut d = vec![0.0; 25];
        d[0] = 1.0;
        d[6] = 1.0;
        d[24] = 1.0;
        let areas = component_areas(&Plane::new(5, 5, d).unwrap());
        assert_eq!(areas, vec![2, 1]);
    }

    #[test]
    fn white_image_has_no_positive_regions() {
        assert_eq!(count_positive(&Tensor::ones(&[3, 16, 16])).unwrap(), 0);
    }

    #[test]
    fn feature_distance_needs_enough_images() {
        let fd = FeatureDistance::default();
        let few = vec![Tensor::zeros(&[3, 8, 8]); 4];
        assert!(matches!(fd.distance(&few, &few), Err(Error::Argument(_))));
    }

    #[test]
    fn report_aggregate_is_column_mean() {
        let row = |v: f64, c: usize| PairMetrics {
            content_ssim: v,
            content_psnr: v * 10.0,
            stain_ssim: v,
            stain_psnr: v,
            reg_ssim: v,
            reg_psnr: v,
            epe: Some(v),
            roughness: v,
            positive_count_src: c,
            positive_count_gen: c,
        };
        let r = MetricReport::new(vec![row(0.2, 1), row(0.6, 4)], None, None, false).unwrap();
        assert_relative_eq!(r.aggregate.content_ssim, 0.4, epsilon = 1e-12);
        assert_relative_eq!(r.aggregate.positive_count_src, 2.5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
