//! Patch discriminator, the adversarial losses for both players, and the
//! patch-wise InfoNCE content loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamSet};
use crate::stylenet::{ContentFeatures, ENCODER_CHANNELS};
use crate::tensor::{Tensor, Var};

pub const DISC_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DISC_SLOPE: f64 = 0.2;
pub const NCE_DIM: usize = 64;
pub const NCE_PATCHES: usize = 128;
pub const NCE_TEMPERATURE: f64 = 0.07;
/// Content-encoder stages whose activations feed the contrastive loss.
pub const NCE_STAGES: [usize; 2] = [1, 2];
const NORM_EPS: f64 = 1e-12;

/// Four stride-2 convolutions with leaky ReLU and a one-channel head; the
/// output is a logit map at 1/16 of the input resolution.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamSet,
    stages: [Conv2d; 4],
    head: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut set = ParamSet::new();
        let [a, b, c, d] = DISC_CHANNELS;
        let stages = [
            Conv2d::new(&mut set, "s1", 3, a, 3, 2, rng),
            Conv2d::new(&mut set, "s2", a, b, 3, 2, rng),
            Conv2d::new(&mut set, "s3", b, c, 3, 2, rng),
            Conv2d::new(&mut set, "s4", c, d, 3, 2, rng),
        ];
        let head = Conv2d::new(&mut set, "head", d, 1, 3, 1, rng);
        Self {
            params: set,
            stages,
            head,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let mut h = image;
        for s in &self.stages {
            h = s.forward(p, h)?.leaky_relu(DISC_SLOPE);
        }
        Ok(self.head.forward(p, h)?)
    }
}

/// `mean softplus(-D(y)) + mean softplus(D(ytil))`, the negated two-sided
/// log-likelihood the discriminator maximises, written in softplus form so
/// saturated logits stay finite.
pub fn d_step_loss<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Var<'t> {
    real_logits
        .neg()
        .softplus()
        .mean()
        .add(fake_logits.softplus().mean())
        .expect("scalars add")
}

/// Non-saturating generator-side loss `mean softplus(-D(ytil))`.
pub fn gr_step_loss<'t>(fake_logits: Var<'t>) -> Var<'t> {
    fake_logits.neg().softplus().mean()
}

/// InfoNCE over rows: row `i` of `q` should match row `i` of `k` against
/// every other row of `k`. Both are expected unit-norm.
pub fn info_nce<'t>(q: Var<'t>, k: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let (n, _) = q.value().dims2("info_nce")?;
    if q.shape() != k.shape() {
        return Err(Error::Argument(format!(
            "info_nce of {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let logits = q.matmul(k.transpose()?)?.mul_scalar(1.0 / temperature);
    let eye = q.tape().constant(Tensor::from_fn(&[n, n], |i| {
        f64::from(u8::from(i / n == i % n))
    }));
    Ok(logits
        .log_softmax()
        .mul(eye)?
        .sum()
        .mul_scalar(-1.0 / n as f64))
}

/// Two-layer projection heads, one per contrastive layer, mapping sampled
/// feature vectors to unit vectors in R^64.
#[derive(Clone, Debug)]
pub struct NceHead {
    params: ParamSet,
    mlps: Vec<(Linear, Linear)>,
    pub patches: usize,
    pub temperature: f64,
}

impl NceHead {
    pub fn new<R: Rng + ?Sized>(patches: usize, temperature: f64, rng: &mut R) -> Result<Self> {
        if patches == 0 || !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "contrastive head needs patches > 0 and temperature > 0, got {patches} and {temperature}"
            )));
        }
        let mut set = ParamSet::new();
        let mlps = NCE_STAGES
            .iter()
            .map(|&s| {
                let c = ENCODER_CHANNELS[s];
                (
                    Linear::new(&mut set, &format!("l{s}.fc1"), c, NCE_DIM, rng),
                    Linear::new(&mut set, &format!("l{s}.fc2"), NCE_DIM, NCE_DIM, rng),
                )
            })
            .collect();
        Ok(Self {
            params: set,
            mlps,
            patches,
            temperature,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Unit-norm projections `[P, 64]` of `[P, C]` feature rows for layer `l`.
    pub fn project<'t>(&self, p: &Bound<'t>, layer: usize, rows: Var<'t>) -> Result<Var<'t>> {
        let (fc1, fc2) = &self.mlps[layer];
        let h = fc1.forward(p, rows)?.relu();
        Ok(fc2.forward(p, h)?.l2_normalize_rows(NORM_EPS)?)
    }

    /// Mean InfoNCE over layers and batch items. Both feature stacks come
    /// from the same content encoder and are sampled at the same positions;
    /// the source side is a fixed target.
    pub fn loss<'t, R: Rng + ?Sized>(
        &self,
        p: &Bound<'t>,
        src: &ContentFeatures<'t>,
        gen: &ContentFeatures<'t>,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let mut total: Option<Var<'t>> = None;
        let mut terms = 0;
        for (layer, &stage) in NCE_STAGES.iter().enumerate() {
            let fs = src.stages[stage];
            let fg = gen.stages[stage];
            if fs.shape() != fg.shape() {
                return Err(Error::Argument(format!(
                    "contrastive features differ: {:?} vs {:?}",
                    fs.shape(),
                    fg.shape()
                )));
            }
            let (n, _, h, w) = fs.value().dims4("patch_nce")?;
            let count = self.patches.min(h * w);
            for item in 0..n {
                let positions = sample(rng, h * w, count).into_vec();
                let k = self
                    .project(p, layer, fs.gather_spatial(item, &positions)?)?
                    .stop_gradient();
                let q = self.project(p, layer, fg.gather_spatial(item, &positions)?)?;
                let v = info_nce(q, k, self.temperature)?;
                total = Some(match total {
                    Some(t) => t.add(v)?,
                    None => v,
                });
                terms += 1;
            }
        }
        Ok(total
            .expect("at least one contrastive term")
            .mul_scalar(1.0 / terms as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chance_logits_give_log_two() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert_relative_eq!(d_step_loss(z, z).item(), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(gr_step_loss(z).item(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let tape = Tape::new();
        let hi = tape.constant(Tensor::full(&[1, 1, 2, 2], 50.0));
        let lo = tape.constant(Tensor::full(&[1, 1, 2, 2], -50.0));
        for v in [d_step_loss(hi, lo), d_step_loss(lo, hi), gr_step_loss(lo), gr_step_loss(hi)] {
            assert!(v.item().is_finite());
        }
        assert!(d_step_loss(hi, lo).item() < 1e-20);
    }

    #[test]
    fn discriminator_output_is_one_sixteenth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Discriminator::new(&mut rng);
        let tape = Tape::new();
        let p = d.params().bind(&tape, false);
        let x = tape.constant(Tensor::uniform(&[2, 3, 64, 48], -1.0, 1.0, &mut rng));
        assert_eq!(d.logits(&p, x).unwrap().shape(), vec![2, 1, 4, 3]);
    }

    #[test]
    fn orthogonal_negatives_hand_value() {
        // 128 one-hot rows in R^128: positives match, negatives are orthogonal.
        let n = 128;
        let tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[n, n], |i| f64::from(u8::from(i / n == i % n))));
        let v = info_nce(eye, eye, 0.07).unwrap().item();
        let e = (1.0f64 / 0.07).exp();
        assert_relative_eq!(v, -(e / (e + 127.0)).ln(), max_relative = 1e-9);
        assert!((v - 7.9356e-5).abs() < 1e-9);
    }

    #[test]
    fn projections_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = NceHead::new(8, 0.07, &mut rng).unwrap();
        let tape = Tape::new();
        let p = head.params().bind(&tape, false);
        let rows = tape.constant(Tensor::randn(&[8, 32], 1.0, &mut rng));
        let q = head.project(&p, 0, rows).unwrap().value();
        for r in q.data().chunks(NCE_DIM) {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
