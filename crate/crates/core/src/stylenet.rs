//! Generator: a shared content encoder, a style encoder producing an
//! 8-vector, and a decoder whose residual blocks are modulated by AdaIN with
//! per-channel scale and shift predicted from the (quantised) style.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamSet};
use crate::protobank::{quantize, PrototypeBank, STYLE_DIM};
use crate::tensor::{Tensor, Var};

/// Encoder stage widths; every stage halves the resolution.
pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
pub const FEATURE_CHANNELS: usize = 64;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Three stride-2 convolutions with ReLU.
#[derive(Clone, Debug)]
struct Trunk {
    stages: [Conv2d; 3],
}

impl Trunk {
    fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, rng: &mut R) -> Self {
        let [a, b, c] = ENCODER_CHANNELS;
        Self {
            stages: [
                Conv2d::new(set, &format!("{name}.s1"), 3, a, 3, 2, rng),
                Conv2d::new(set, &format!("{name}.s2"), a, b, 3, 2, rng),
                Conv2d::new(set, &format!("{name}.s3"), b, c, 3, 2, rng),
            ],
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<[Var<'t>; 3]> {
        let s1 = self.stages[0].forward(p, x)?.relu();
        let s2 = self.stages[1].forward(p, s1)?.relu();
        let s3 = self.stages[2].forward(p, s2)?.relu();
        Ok([s1, s2, s3])
    }
}

/// Activations of the three content-encoder stages; `f_c` is the last.
#[derive(Clone, Copy, Debug)]
pub struct ContentFeatures<'t> {
    pub stages: [Var<'t>; 3],
}

impl<'t> ContentFeatures<'t> {
    pub fn fc(&self) -> Var<'t> {
        self.stages[2]
    }
}

/// Linear maps from a style code to per-channel AdaIN scale and shift.
/// Scale starts at exactly 1 and shift at 0, so an untrained site is plain
/// instance normalisation.
#[derive(Clone, Debug)]
pub struct AdainHead {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdainHead {
    fn new(set: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: Linear::with_init(
                set,
                &format!("{name}.gamma"),
                Tensor::zeros(&[STYLE_DIM, channels]),
                Tensor::ones(&[1, channels]),
            ),
            beta: Linear::with_init(
                set,
                &format!("{name}.beta"),
                Tensor::zeros(&[STYLE_DIM, channels]),
                Tensor::zeros(&[1, channels]),
            ),
        }
    }

    /// `(gamma, beta)`, each `[N, C]`.
    pub fn predict<'t>(&self, p: &Bound<'t>, style: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.gamma.forward(p, style)?, self.beta.forward(p, style)?))
    }
}

/// `gamma(s) * instance_norm(f) + beta(s)`, per sample and channel.
pub fn adain<'t>(f: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let (n, c, _, _) = f.value().dims4("adain")?;
    let (normalized, _, _) = f.instance_norm(INSTANCE_NORM_EPS)?;
    Ok(normalized
        .mul(gamma.reshape(&[n, c, 1, 1])?)?
        .add(beta.reshape(&[n, c, 1, 1])?)?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    head: AdainHead,
}

impl ResBlock {
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, style: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?;
        let (gamma, beta) = self.head.predict(p, style)?;
        let h = adain(h, gamma, beta)?.relu();
        let h = self.conv2.forward(p, h)?;
        Ok(x.add(h)?)
    }
}

/// Generator parameters, all in one set (checkpoint namespace `gen.`).
#[derive(Clone, Debug)]
pub struct Generator {
    params: ParamSet,
    content: Trunk,
    style: Trunk,
    style_fc: Linear,
    blocks: [ResBlock; 2],
    up: [Conv2d; 3],
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut set = ParamSet::new();
        let content = Trunk::new(&mut set, "content", rng);
        let style = Trunk::new(&mut set, "style", rng);
        let style_fc = Linear::new(&mut set, "style.fc", FEATURE_CHANNELS, STYLE_DIM, rng);
        let block = |set: &mut ParamSet, name: &str, rng: &mut R| {
            let f = FEATURE_CHANNELS;
            ResBlock {
                conv1: Conv2d::new(set, &format!("{name}.conv1"), f, f, 3, 1, rng),
                conv2: Conv2d::new(set, &format!("{name}.conv2"), f, f, 3, 1, rng),
                head: AdainHead::new(set, &format!("{name}.adain"), f),
            }
        };
        let blocks = [block(&mut set, "res1", rng), block(&mut set, "res2", rng)];
        let [a, b, c] = ENCODER_CHANNELS;
        let up = [
            Conv2d::new(&mut set, "up1", c, b, 3, 1, rng),
            Conv2d::new(&mut set, "up2", b, a, 3, 1, rng),
            Conv2d::new(&mut set, "up3", a, 3, 3, 1, rng),
        ];
        Self {
            params: set,
            content,
            style,
            style_fc,
            blocks,
            up,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn adain_heads(&self) -> [&AdainHead; 2] {
        [&self.blocks[0].head, &self.blocks[1].head]
    }

    /// Content features of an image batch in `[-1, 1]` with sides divisible
    /// by 8. The same weights serve both stain modalities.
    pub fn encode_content<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<ContentFeatures<'t>> {
        check_image(&x.shape())?;
        Ok(ContentFeatures {
            stages: self.content.forward(p, x)?,
        })
    }

    /// One raw style vector per batch item, `[N, 8]`.
    pub fn encode_style<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> Result<Var<'t>> {
        check_image(&y.shape())?;
        let [_, _, top] = self.style.forward(p, y)?;
        Ok(self.style_fc.forward(p, top.global_avg_pool()?)?)
    }

    /// Decodes content features under a style code into an image in
    /// `[-1, 1]` at 8x the feature resolution.
    pub fn decode<'t>(&self, p: &Bound<'t>, fc: Var<'t>, style: Var<'t>) -> Result<Var<'t>> {
        let mut h = fc;
        for block in &self.blocks {
            h = block.forward(p, h, style)?;
        }
        let h = self.up[0].forward(p, h.upsample2x()?)?.relu();
        let h = self.up[1].forward(p, h.upsample2x()?)?.relu();
        Ok(self.up[2].forward(p, h.upsample2x()?)?.tanh())
    }
}

fn check_image(shape: &[usize]) -> Result<()> {
    match *shape {
        [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => Ok(()),
        [_, 3, h, w] => Err(Error::Argument(format!(
            "image sides must be divisible by 8, got {h}x{w}"
        ))),
        _ => Err(Error::Argument(format!(
            "expected an [N, 3, H, W] image batch, got {shape:?}"
        ))),
    }
}

/// Where the style code for generation comes from.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'t> {
    /// Encode a reference target image and quantise it on the bank.
    Reference(Var<'t>),
    /// Predict the style from the content features (inference).
    Aggregated,
}

/// Everything produced by one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct Generated<'t> {
    pub image: Var<'t>,
    pub content: ContentFeatures<'t>,
    /// Style code that drove the decoder.
    pub style: Var<'t>,
    /// Raw encoder style (reference mode only).
    pub raw_style: Option<Var<'t>>,
    /// Prototype weights: Sinkhorn assignment in reference mode, the
    /// aggregator's softmax in aggregated mode.
    pub weights: Option<Var<'t>>,
}

/// `decode(encode_content(x), s_q)` with `s_q` from the requested source.
pub fn generate<'t>(
    gen: &Generator,
    gp: &Bound<'t>,
    bank: &PrototypeBank,
    bp: &Bound<'t>,
    x: Var<'t>,
    source: StyleSource<'t>,
) -> Result<Generated<'t>> {
    let content = gen.encode_content(gp, x)?;
    let (style, raw_style, weights) = match source {
        StyleSource::Reference(y) => {
            if y.shape() != x.shape() {
                return Err(Error::Argument(format!(
                    "reference {:?} does not match source {:?}",
                    y.shape(),
                    x.shape()
                )));
            }
            let raw = gen.encode_style(gp, y)?;
            let alpha = bank.assign(bp, raw)?;
            let sq = quantize(alpha, bp.var(bank.prototype_id()))?;
            (sq, Some(raw), Some(alpha))
        }
        StyleSource::Aggregated => {
            let (sq, weights) = bank.aggregate(bp, content.fc())?;
            (sq, None, weights)
        }
    };
    let image = gen.decode(gp, content.fc(), style)?;
    Ok(Generated {
        image,
        content,
        style,
        raw_style,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protobank::AggregatorHead;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Generator, PrototypeBank, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gen = Generator::new(&mut rng);
        let mut bank = PrototypeBank::new(4, 0.1, &mut rng).unwrap();
        bank.init_aggregator(FEATURE_CHANNELS, AggregatorHead::Mixture, &mut rng);
        (gen, bank, rng)
    }

    #[test]
    fn untrained_output_is_bounded_and_deterministic() {
        let (gen, bank, mut rng) = setup();
        let x = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let run = || {
            let tape = Tape::new();
            let gp = gen.params().bind(&tape, false);
            let bp = bank.params().bind(&tape, false);
            let out = generate(&gen, &gp, &bank, &bp, tape.constant(x.clone()), StyleSource::Aggregated)
                .unwrap();
            out.image.value()
        };
        let a = run();
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert_eq!(a, run());
    }

    #[test]
    fn indivisible_sides_are_rejected() {
        let (gen, _, _) = setup();
        let tape = Tape::new();
        let gp = gen.params().bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 12, 16]));
        assert!(matches!(gen.encode_content(&gp, x), Err(Error::Argument(_))));
    }

    #[test]
    fn reference_mode_checks_reference_shape() {
        let (gen, bank, _) = setup();
        let tape = Tape::new();
        let gp = gen.params().bind(&tape, false);
        let bp = bank.params().bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let y = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(generate(&gen, &gp, &bank, &bp, x, StyleSource::Reference(y)).is_err());
    }

    #[test]
    fn style_rows_do_not_depend_on_batch_order() {
        let (gen, _, mut rng) = setup();
        let a = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let style = |items: &[Tensor]| {
            let tape = Tape::new();
            let gp = gen.params().bind(&tape, false);
            let y = tape.constant(Tensor::stack_batch(items).unwrap());
            gen.encode_style(&gp, y).unwrap().value()
        };
        let ab = style(&[a.clone(), b.clone()]);
        let ba = style(&[b, a]);
        assert_eq!(&ab.data()[..8], &ba.data()[8..]);
        assert_eq!(&ab.data()[8..], &ba.data()[..8]);
    }
}
