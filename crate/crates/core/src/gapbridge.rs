//! Deformation-aware registration: a small U-Net predicting a per-pixel
//! displacement field from an image pair, bilinear warping, and the
//! alignment, registration and combined objectives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::{luminance_var, soft_nmi_with, NMI_BINS};
use crate::nn::{Bound, Conv2d, ParamSet, RandomConvStack};
use crate::tensor::{Tensor, Var};

pub const DOWN_CHANNELS: [usize; 3] = [16, 32, 64];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_PERCEPTUAL_SEED: u64 = 0x9e37_79b9;
pub const PYRAMID_LEVELS: usize = 3;
/// Histogram transition width of the NMI in [`reg_loss`]: linear interpolation.
pub const LOSS_NMI_RAMP: f64 = 1.0;

/// U-shaped field predictor on the channel-concatenated pair.
#[derive(Clone, Debug)]
pub struct RegNet {
    params: ParamSet,
    down: [Conv2d; 3],
    up: [Conv2d; 3],
    flow: Conv2d,
}

impl RegNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut set = ParamSet::new();
        let [a, b, c] = DOWN_CHANNELS;
        let down = [
            Conv2d::new(&mut set, "down1", 6, a, 3, 2, rng),
            Conv2d::new(&mut set, "down2", a, b, 3, 2, rng),
            Conv2d::new(&mut set, "down3", b, c, 3, 2, rng),
        ];
        let up = [
            Conv2d::new(&mut set, "up1", c + b, b, 3, 1, rng),
            Conv2d::new(&mut set, "up2", b + a, a, 3, 1, rng),
            Conv2d::new(&mut set, "up3", a + 6, a, 3, 1, rng),
        ];
        // Zero output layer: the untrained field is exactly zero.
        let flow = Conv2d::zeros(&mut set, "flow", a, 2, 3);
        Self {
            params: set,
            down,
            up,
            flow,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Field `[N, 2, H, W]` in pixels (dx, dy) that aligns `a` to `b`.
    pub fn predict_field<'t>(&self, p: &Bound<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let shape = a.shape();
        if shape != b.shape() {
            return Err(Error::Argument(format!(
                "field inputs differ: {shape:?} vs {:?}",
                b.shape()
            )));
        }
        match shape[..] {
            [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
            _ => {
                return Err(Error::Argument(format!(
                    "field inputs must be [N, 3, H, W] with sides divisible by 8, got {shape:?}"
                )))
            }
        }
        let act = |v: Var<'t>| v.leaky_relu(LEAKY_SLOPE);
        let x0 = Var::concat(&[a, b], 1)?;
        let d1 = act(self.down[0].forward(p, x0)?);
        let d2 = act(self.down[1].forward(p, d1)?);
        let d3 = act(self.down[2].forward(p, d2)?);
        let u1 = act(self.up[0].forward(p, Var::concat(&[d3.upsample2x()?, d2], 1)?)?);
        let u2 = act(self.up[1].forward(p, Var::concat(&[u1.upsample2x()?, d1], 1)?)?);
        let u3 = act(self.up[2].forward(p, Var::concat(&[u2.upsample2x()?, x0], 1)?)?);
        Ok(self.flow.forward(p, u3)?)
    }
}

/// Samples `image` at `p + field(p)` with border clamping.
pub fn warp<'t>(image: Var<'t>, field: Var<'t>) -> Result<Var<'t>> {
    Ok(image.grid_sample_bilinear(field)?)
}

/// Pixel, perceptual and pyramid L1 terms between two image batches.
#[derive(Clone, Debug)]
pub struct AlignLoss {
    perceptual: RandomConvStack,
}

impl Default for AlignLoss {
    fn default() -> Self {
        Self::new(DEFAULT_PERCEPTUAL_SEED)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignTerms<'t> {
    pub total: Var<'t>,
    pub pixel: Var<'t>,
    pub perceptual: Var<'t>,
    pub pyramid: Var<'t>,
}

fn mean_abs_diff<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.abs().mean())
}

impl AlignLoss {
    /// `seed` draws the frozen feature stack standing in for a pretrained
    /// perceptual network.
    pub fn new(seed: u64) -> Self {
        Self {
            perceptual: RandomConvStack::new(seed, [3, 16, 32, 64]),
        }
    }

    pub fn terms<'t>(&self, ytil: Var<'t>, y: Var<'t>) -> Result<AlignTerms<'t>> {
        if ytil.shape() != y.shape() {
            return Err(Error::Argument(format!(
                "align_loss of {:?} vs {:?}",
                ytil.shape(),
                y.shape()
            )));
        }
        let pixel = mean_abs_diff(ytil, y)?;
        let fa = self.perceptual.forward(ytil)?;
        let fb = self.perceptual.forward(y)?;
        let mut perceptual = mean_abs_diff(fa[0], fb[0])?;
        for l in 1..3 {
            perceptual = perceptual.add(mean_abs_diff(fa[l], fb[l])?)?;
        }
        let (mut pa, mut pb) = (ytil, y);
        let mut pyramid: Option<Var<'t>> = None;
        for _ in 0..PYRAMID_LEVELS {
            pa = pa.gaussian_blur_down2()?;
            pb = pb.gaussian_blur_down2()?;
            let t = mean_abs_diff(pa, pb)?;
            pyramid = Some(match pyramid {
                Some(acc) => acc.add(t)?,
                None => t,
            });
        }
        let pyramid = pyramid.expect("at least one pyramid level");
        let total = pixel.add(perceptual)?.add(pyramid)?;
        Ok(AlignTerms {
            total,
            pixel,
            perceptual,
            pyramid,
        })
    }

    pub fn loss<'t>(&self, ytil: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        Ok(self.terms(ytil, y)?.total)
    }
}

/// Mean over pixels of the squared Frobenius norm of the forward-difference
/// Jacobian of a `[N, 2, H, W]` field. Zero exactly for spatially constant
/// fields; a ramp `dx = c x` gives `c^2`.
pub fn smoothness<'t>(field: Var<'t>) -> Result<Var<'t>> {
    let (_, c, h, w) = field.value().dims4("smoothness")?;
    if c != 2 {
        return Err(Error::Argument(format!("field must have 2 channels, got {c}")));
    }
    let tape = field.tape();
    let term = |axis: usize, len: usize| -> Result<Var<'t>> {
        if len < 2 {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let hi = field.narrow(axis, 1, len - 1)?;
        let lo = field.narrow(axis, 0, len - 1)?;
        // Sum over both channels, mean over positions.
        Ok(hi.sub(lo)?.square().mean().mul_scalar(2.0))
    };
    Ok(term(3, w)?.add(term(2, h)?)?)
}

/// Mean per-item soft NMI between the luminances of two image batches.
pub fn image_nmi<'t>(a: Var<'t>, b: Var<'t>, bins: usize, ramp: f64) -> Result<Var<'t>> {
    let (n, _, h, w) = a.value().dims4("image_nmi")?;
    let la = luminance_var(a)?;
    let lb = luminance_var(b)?;
    let mut total: Option<Var<'t>> = None;
    for i in 0..n {
        let ai = la.narrow(0, i, 1)?.reshape(&[h * w])?;
        let bi = lb.narrow(0, i, 1)?.reshape(&[h * w])?;
        let v = soft_nmi_with(ai, bi, bins, ramp)?;
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
    }
    Ok(total.expect("non-empty batch").mul_scalar(1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct RegTerms<'t> {
    pub total: Var<'t>,
    pub nmi: Var<'t>,
    pub smoothness: Var<'t>,
}

/// `ln(gamma - NMI(ytil, y)) + lambda_s * smoothness(field)`, which falls as
/// the warped image becomes more similar to the target and is steepest near
/// perfect similarity.
pub fn reg_loss<'t>(
    ytil: Var<'t>,
    y: Var<'t>,
    field: Var<'t>,
    gamma: f64,
    lambda_s: f64,
) -> Result<RegTerms<'t>> {
    reg_loss_with(ytil, y, field, gamma, lambda_s, NMI_BINS, LOSS_NMI_RAMP)
}

pub fn reg_loss_with<'t>(
    ytil: Var<'t>,
    y: Var<'t>,
    field: Var<'t>,
    gamma: f64,
    lambda_s: f64,
    bins: usize,
    ramp: f64,
) -> Result<RegTerms<'t>> {
    if !(gamma > 1.0) {
        return Err(Error::Parameter(format!(
            "gamma must exceed the NMI upper bound 1, got {gamma}"
        )));
    }
    if !(lambda_s >= 0.0) {
        return Err(Error::Parameter(format!(
            "smoothness weight must be non-negative, got {lambda_s}"
        )));
    }
    let nmi = image_nmi(ytil, y, bins, ramp)?;
    let similarity = nmi.neg().add_scalar(gamma).ln();
    let smooth = smoothness(field)?;
    Ok(RegTerms {
        total: similarity.add(smooth.mul_scalar(lambda_s))?,
        nmi,
        smoothness: smooth,
    })
}

/// Non-negative weights of the combined registration objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub cont: f64,
    pub align: f64,
    pub reg: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            cont: 1.0,
            align: 1.0,
            reg: 1.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cont", self.cont), ("align", self.align), ("reg", self.reg)] {
            if !(v >= 0.0) {
                return Err(Error::Parameter(format!(
                    "weight lambda_{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `lambda_cont * cont + lambda_align * align + lambda_reg * reg`.
pub fn total_registration_objective<'t>(
    cont: Var<'t>,
    align: Var<'t>,
    reg: Var<'t>,
    weights: &ObjectiveWeights,
) -> Result<Var<'t>> {
    weights.validate()?;
    Ok(cont
        .mul_scalar(weights.cont)
        .add(align.mul_scalar(weights.align))?
        .add(reg.mul_scalar(weights.reg))?)
}
