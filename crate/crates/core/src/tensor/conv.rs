//! Spatial primitives on `[N, C, H, W]` tensors.

use super::ops::gemm;
use super::tape::Var;
use super::{shape_err, Result, Tensor, TensorError};

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is inside
/// the image.
fn valid_columns(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    lo.min(hi)..hi
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let op = g.out_pixels();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * op;
                let dst = &mut cols[row..row + op];
                let valid = valid_columns(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..valid.start].fill(0.0);
                    line[valid.end..].fill(0.0);
                    let first = valid.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (d, s) in line[valid.clone()]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let op = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * op;
                let src = &cols[row..row + op];
                let valid = valid_columns(g, kx);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + valid.start..oy * g.wo + valid.end];
                    for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Border-replicating 5-tap binomial kernel, `[1, 4, 6, 4, 1] / 16`.
const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]` (odd kernel
    /// sides, zero padding). Output sides are `(H + 2 pad - kh) / stride + 1`,
    /// rounded down.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        let (n, c, h, w) = x.dims4("conv2d")?;
        let (f, kc, kh, kw) = k.dims4("conv2d")?;
        if kc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel sides must be odd, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let patch = geom.patch();
        let op = geom.out_pixels();
        let mut out = vec![0.0; n * f * op];
        let mut cols = vec![0.0; patch * op];
        for b in 0..n {
            im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &geom, &mut cols);
            gemm(
                f,
                patch,
                op,
                k.data(),
                (patch, 1),
                &cols,
                (op, 1),
                &mut out[b * f * op..(b + 1) * f * op],
                0.0,
            );
        }
        let value = Tensor::from_parts(vec![n, f, geom.ho, geom.wo], out);
        Ok(self
            .tape()
            .record(value, &[self, kernel], move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gk = needs[1].then(|| vec![0.0; k.len()]);
                let mut cols = vec![0.0; patch * op];
                let mut dcols = vec![0.0; patch * op];
                for b in 0..n {
                    let gb = &g[b * f * op..(b + 1) * f * op];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &geom, &mut cols);
                        gemm(f, op, patch, gb, (op, 1), &cols, (1, op), gk, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(patch, f, op, k.data(), (1, patch), gb, (op, 1), &mut dcols, 0.0);
                        col2im(&dcols, &geom, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                }
                vec![gx, gk]
            }))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn bias_add(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (n, c, h, w) = x.dims4("bias_add")?;
        if b.shape() != [c] {
            return Err(shape_err(
                "bias_add",
                format!("bias {:?} for {c} channels", b.shape()),
            ));
        }
        let hw = h * w;
        let mut out = x.to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.tape().record(value, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.chunks(hw).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h2, w2], out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2x2 average pooling; spatial sides must be even.
    pub fn avg_pool2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2x", format!("odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * ho * wo + y * wo + xx] = 0.25 * s;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[p * h * w + y * w + xx] = 0.25 * g[p * ho * wo + (y / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Separable `[1, 4, 6, 4, 1] / 16` blur with border replication, then
    /// every second row and column: one Gaussian-pyramid level.
    pub fn gaussian_blur_down2(self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("gaussian_blur_down2")?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let taps = |o: usize, len: usize| -> [(usize, f64); 5] {
            std::array::from_fn(|t| (clamp_index((2 * o + t) as isize - 2, len), BINOMIAL5[t]))
        };
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                let ty = taps(y, h);
                for xx in 0..wo {
                    let tx = taps(xx, w);
                    let mut acc = 0.0;
                    for &(iy, wy) in &ty {
                        for &(ix, wx) in &tx {
                            acc += wy * wx * src[iy * w + ix];
                        }
                    }
                    out[p * ho * wo + y * wo + xx] = acc;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    let ty = taps(y, h);
                    for xx in 0..wo {
                        let tx = taps(xx, w);
                        let gv = g[p * ho * wo + y * wo + xx];
                        for &(iy, wy) in &ty {
                            for &(ix, wx) in &tx {
                                dst[iy * w + ix] += wy * wx * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value().dims4("global_avg_pool")?;
        self.sum_to(&[n, c, 1, 1])?
            .mul_scalar(1.0 / (h * w) as f64)
            .reshape(&[n, c])
    }

    /// Per-(n, c) normalisation to zero mean and unit population standard
    /// deviation. Returns the normalised tensor with the channel means and
    /// standard deviations, both `[N, C]`.
    pub fn instance_norm(self, eps: f64) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let shape = self.shape();
        let (n, c, h, w) = match shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::Rank {
                    op: "instance_norm",
                    expected: 4,
                    got: shape,
                })
            }
        };
        if h * w < 2 {
            return Err(TensorError::DegenerateStatistics(h * w));
        }
        let inv = 1.0 / (h * w) as f64;
        let stat = [n, c, 1, 1];
        let mu = self.sum_to(&stat)?.mul_scalar(inv);
        let centered = self.sub(mu)?;
        let var = centered.square().sum_to(&stat)?.mul_scalar(inv);
        let normalized = centered.div(var.add_scalar(eps).sqrt())?;
        let sigma = var.sqrt().reshape(&[n, c])?;
        Ok((normalized, mu.reshape(&[n, c])?, sigma))
    }

    /// Rows `[P, C]` holding the channel vectors of batch item `item` at the
    /// given flat spatial positions.
    pub fn gather_spatial(self, item: usize, positions: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("gather_spatial")?;
        let hw = h * w;
        if item >= n || positions.iter().any(|&p| p >= hw) {
            return Err(shape_err(
                "gather_spatial",
                format!("item {item} / positions out of range for {:?}", x.shape()),
            ));
        }
        let p = positions.len();
        let base = item * c * hw;
        let mut out = vec![0.0; p * c];
        for (i, &pos) in positions.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] = x.data()[base + ch * hw + pos];
            }
        }
        let positions = positions.to_vec();
        let total = x.len();
        let value = Tensor::from_parts(vec![p, c], out);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            for (i, &pos) in positions.iter().enumerate() {
                for ch in 0..c {
                    gx[base + ch * hw + pos] += g[i * c + ch];
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn scalar_kernel_scales_pointwise() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = x.conv2d(k, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        // Cross-correlation of a centred impulse reproduces the kernel
        // rotated by 180 degrees; checked against a direct 9-term sum.
        let tape = Tape::new();
        let mut impulse = vec![0.0; 9];
        impulse[4] = 1.0;
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(Tensor::new(&[1, 1, 3, 3], impulse.clone()).unwrap());
        let k = tape.constant(Tensor::new(&[1, 1, 3, 3], kernel.clone()).unwrap());
        let y = x.conv2d(k, 1, 1).unwrap().value();
        let at = |r: isize, c: isize| {
            if (0..3).contains(&r) && (0..3).contains(&c) {
                impulse[(r * 3 + c) as usize]
            } else {
                0.0
            }
        };
        for oy in 0..3isize {
            for ox in 0..3isize {
                let mut direct = 0.0;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        direct += kernel[(ky * 3 + kx) as usize] * at(oy + ky - 1, ox + kx - 1);
                    }
                }
                assert_eq!(y.data()[(oy * 3 + ox) as usize], direct);
            }
        }
        assert_eq!(y.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_even_kernels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = x.conv2d(k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
        let k = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(x.conv2d(k, 1, 1).is_err());
    }

    #[test]
    fn strided_conv_output_size() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 64, 64]));
        let k = tape.constant(Tensor::ones(&[16, 3, 3, 3]));
        assert_eq!(x.conv2d(k, 2, 1).unwrap().shape(), vec![2, 16, 32, 32]);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.7));
        let y = x.gaussian_blur_down2().unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn instance_norm_two_point_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let (y, mu, sigma) = x.instance_norm(0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        assert_eq!(mu.item(), 1.0);
        assert_eq!(sigma.item(), 1.0);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 4.0));
        let (y, mu, sigma) = x.instance_norm(1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(mu.item(), 4.0);
        assert_eq!(sigma.item(), 0.0);
    }

    #[test]
    fn instance_norm_rejects_single_pixel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(
            x.instance_norm(1e-5),
            Err(TensorError::DegenerateStatistics(1))
        ));
    }
}
