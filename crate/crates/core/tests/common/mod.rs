//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use printer::adversary::{d_step_loss, gr_step_loss, info_nce, Discriminator, NceHead};
use printer::gapbridge::{
    reg_loss, smoothness, total_registration_objective, warp, AlignLoss, ObjectiveWeights, RegNet,
};
use printer::gradcheck::{check, GradCheck};
use printer::metrics::{soft_nmi, soft_nmi_with};
use printer::nn::ParamSet;
use printer::protobank::{quantize, sinkhorn_assign};
use printer::stylenet::{adain, ContentFeatures, Generator};
use printer::tensor::{Result as TResult, Tape, Tensor, TensorError, Var};
pub mod criteria;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GENERATOR_GRAD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn lift<T>(r: printer::Result<T>) -> TResult<T> {
    r.map_err(|e| TensorError::Invalid(e.to_string()))
}

/// Fixed, non-uniform weights so a reduction sees distinct upstream
/// gradients per element.
pub fn weigh<'t>(v: Var<'t>) -> TResult<Var<'t>> {
    let shape = v.shape();
    let w = Tensor::from_fn(&shape, |i| (0.7 * i as f64 + 0.3).sin() + 0.1);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut rng(seed))
}

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub result: TResult<GradCheck>,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(g) if g.max_rel_err < self.tol && g.checked > 0)
    }

    pub fn describe(&self) -> String {
        match &self.result {
            Ok(g) => format!(
                "{}: max rel err {:.2e} over {} probes (worst input {} elem {}: {:.6e} vs {:.6e})",
                self.name, g.max_rel_err, g.checked, g.worst.0, g.worst.1, g.worst.2, g.worst.3
            ),
            Err(e) => format!("{}: error {e}", self.name),
        }
    }
}

const H: f64 = 1e-6;
const PROBES: usize = 24;
const FLOOR: f64 = 1e-6;

fn case<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> GradCase
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> TResult<Var<'t>>,
{
    GradCase {
        name,
        tol: GRAD_TOL,
        result: check(&inputs, H, PROBES, FLOOR, f),
    }
}

fn unary<F>(name: &'static str, input: Tensor, f: F) -> GradCase
where
    F: for<'t> Fn(Var<'t>) -> TResult<Var<'t>>,
{
    case(name, vec![input], move |_, v| weigh(f(v[0])?))
}

/// Inputs made of a parameter set's values with any all-zero tensor
/// replaced by small noise (zero-initialised layers sit on kinks).
fn jittered(set: &ParamSet, seed: u64) -> Vec<Tensor> {
    set.values()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.abs_max() == 0.0 {
                randn(t.shape(), 0.1, seed + i as u64)
            } else {
                t.clone()
            }
        })
        .collect()
}

pub fn primitive_cases() -> Vec<GradCase> {
    let m = || randn(&[3, 4], 1.0, 1);
    let pos = || uniform(&[3, 4], 0.5, 2.0, 2);
    let img = |seed| randn(&[2, 3, 8, 8], 1.0, seed);
    vec![
        case("add (broadcast)", vec![m(), randn(&[1, 4], 1.0, 3)], |_, v| weigh(v[0].add(v[1])?)),
        case("sub (broadcast)", vec![m(), randn(&[3, 1], 1.0, 3)], |_, v| weigh(v[0].sub(v[1])?)),
        case("mul (broadcast)", vec![m(), randn(&[1, 4], 1.0, 3)], |_, v| weigh(v[0].mul(v[1])?)),
        case("div (broadcast)", vec![m(), uniform(&[3, 1], 0.5, 2.0, 3)], |_, v| {
            weigh(v[0].div(v[1])?)
        }),
        unary("add_scalar, mul_scalar, neg", m(), |v| Ok(v.add_scalar(0.3).mul_scalar(-1.7).neg())),
        unary("relu", m(), |v| Ok(v.relu())),
        unary("leaky_relu", m(), |v| Ok(v.leaky_relu(0.2))),
        unary("tanh", m(), |v| Ok(v.tanh())),
        unary("sigmoid", m(), |v| Ok(v.sigmoid())),
        unary("softplus", randn(&[3, 4], 5.0, 4), |v| Ok(v.softplus())),
        unary("exp", m(), |v| Ok(v.exp())),
        unary("ln", pos(), |v| Ok(v.ln())),
        unary("abs", m(), |v| Ok(v.abs())),
        unary("sqrt", pos(), |v| Ok(v.sqrt())),
        unary("square", m(), |v| Ok(v.square())),
        unary("clamp_min", m(), |v| Ok(v.clamp_min(0.1))),
        unary("xlogx", pos(), |v| Ok(v.xlogx())),
        unary("sum", m(), |v| v.sum().reshape(&[1, 1])?.mul(v)),
        unary("mean", m(), |v| v.mean().reshape(&[1, 1])?.mul(v)),
        unary("sum_to", randn(&[2, 3, 4], 1.0, 5), |v| v.sum_to(&[1, 3, 1])),
        unary("broadcast_to", randn(&[1, 3, 1], 1.0, 5), |v| v.broadcast_to(&[2, 3, 4])),
        unary("reshape", m(), |v| v.reshape(&[2, 6])),
        unary("transpose", m(), |v| v.transpose()),
        case("matmul", vec![m(), randn(&[4, 5], 1.0, 6)], |_, v| weigh(v[0].matmul(v[1])?)),
        unary("softmax", m(), |v| Ok(v.softmax())),
        unary("log_softmax", m(), |v| Ok(v.log_softmax())),
        unary("narrow", randn(&[2, 5, 3], 1.0, 7), |v| v.narrow(1, 1, 3)),
        case("concat", vec![m(), randn(&[3, 2], 1.0, 8)], |_, v| weigh(Var::concat(&[v[0], v[1]], 1)?)),
        unary("l2_normalize_rows", m(), |v| v.l2_normalize_rows(1e-12)),
        case("conv2d stride 1", vec![img(9), randn(&[4, 3, 3, 3], 0.5, 10)], |_, v| {
            weigh(v[0].conv2d(v[1], 1, 1)?)
        }),
        case("conv2d stride 2", vec![randn(&[2, 3, 7, 9], 1.0, 9), randn(&[4, 3, 3, 3], 0.5, 10)], |_, v| {
            weigh(v[0].conv2d(v[1], 2, 1)?)
        }),
        case("bias_add", vec![img(11), randn(&[3], 1.0, 12)], |_, v| weigh(v[0].bias_add(v[1])?)),
        unary("upsample2x", img(13), |v| v.upsample2x()),
        unary("avg_pool2x", img(14), |v| v.avg_pool2x()),
        unary("gaussian_blur_down2", img(15), |v| v.gaussian_blur_down2()),
        unary("global_avg_pool", img(16), |v| v.global_avg_pool()),
        unary("instance_norm", img(17), |v| Ok(v.instance_norm(1e-5)?.0)),
        unary("gather_spatial", img(18), |v| v.gather_spatial(1, &[0, 9, 63, 20])),
        case(
            "grid_sample_bilinear",
            vec![img(19), randn(&[2, 2, 8, 8], 1.5, 20)],
            |_, v| weigh(v[0].grid_sample_bilinear(v[1])?),
        ),
        case(
            "soft_joint_histogram",
            vec![uniform(&[64], 0.0, 1.0, 21), uniform(&[64], 0.0, 1.0, 22)],
            |_, v| weigh(v[0].soft_joint_histogram(v[1], 8, 1.0)?),
        ),
        case(
            "soft_joint_histogram narrow",
            vec![uniform(&[64], 0.0, 1.0, 23), uniform(&[64], 0.0, 1.0, 24)],
            |_, v| weigh(v[0].soft_joint_histogram(v[1], 8, 0.3)?),
        ),
    ]
}

pub fn composite_cases() -> Vec<GradCase> {
    let mut out = vec![
        case(
            "sinkhorn assignment",
            vec![randn(&[4, 8], 1.0, 30), randn(&[5, 8], 0.4, 31)],
            |_, v| weigh(lift(sinkhorn_assign(v[0], v[1], 0.5, 3))?),
        ),
        case(
            "prototype quantisation",
            vec![uniform(&[4, 5], 0.0, 1.0, 32), randn(&[5, 8], 1.0, 33)],
            |_, v| weigh(lift(quantize(v[0], v[1]))?),
        ),
        case(
            "adain",
            vec![randn(&[2, 3, 4, 4], 1.0, 34), randn(&[2, 3], 1.0, 35), randn(&[2, 3], 1.0, 36)],
            |_, v| weigh(lift(adain(v[0], v[1], v[2]))?),
        ),
        case(
            "soft nmi",
            vec![uniform(&[256], 0.0, 1.0, 37), uniform(&[256], 0.0, 1.0, 38)],
            |_, v| lift(soft_nmi(v[0], v[0].mul(v[1])?, 16)),
        ),
        case(
            "soft nmi interpolating",
            vec![uniform(&[256], 0.0, 1.0, 35), uniform(&[256], 0.0, 1.0, 36)],
            |_, v| lift(soft_nmi_with(v[0], v[0].mul(v[1])?, 16, 1.0)),
        ),
        case("smoothness", vec![randn(&[2, 2, 6, 7], 1.0, 39)], |_, v| lift(smoothness(v[0]))),
        case(
            "alignment loss",
            vec![uniform(&[1, 3, 16, 16], -1.0, 1.0, 40), uniform(&[1, 3, 16, 16], -1.0, 1.0, 41)],
            |_, v| lift(AlignLoss::default().loss(v[0], v[1])),
        ),
        case(
            "registration loss through warp",
            vec![
                uniform(&[1, 3, 16, 16], -1.0, 1.0, 42),
                uniform(&[1, 3, 16, 16], -1.0, 1.0, 43),
                randn(&[1, 2, 16, 16], 1.0, 44),
            ],
            |_, v| {
                let ytil = lift(warp(v[0], v[2]))?;
                Ok(lift(reg_loss(ytil, v[1], v[2], 1.01, 1.0))?.total)
            },
        ),
        case(
            "discriminator loss",
            vec![uniform(&[1, 3, 16, 16], -1.0, 1.0, 45), uniform(&[1, 3, 16, 16], -1.0, 1.0, 46)],
            |_, v| {
                let d = Discriminator::new(&mut rng(47));
                let p = d.params().bind(v[0].tape(), false);
                let real = lift(d.logits(&p, v[0]))?;
                let fake = lift(d.logits(&p, v[1]))?;
                Ok(d_step_loss(real, fake))
            },
        ),
        case(
            "generator adversarial loss",
            vec![uniform(&[1, 3, 16, 16], -1.0, 1.0, 48)],
            |_, v| {
                let d = Discriminator::new(&mut rng(47));
                let p = d.params().bind(v[0].tape(), false);
                Ok(gr_step_loss(lift(d.logits(&p, v[0]))?))
            },
        ),
        case(
            "info nce",
            vec![randn(&[6, 5], 1.0, 49), randn(&[6, 5], 1.0, 50)],
            |_, v| {
                let q = v[0].l2_normalize_rows(1e-12)?;
                let k = v[1].l2_normalize_rows(1e-12)?;
                lift(info_nce(q, k, 0.07))
            },
        ),
        case(
            "objective weighting",
            vec![randn(&[3], 1.0, 51)],
            |_, v| {
                let part = |i| Ok::<_, TensorError>(v[0].narrow(0, i, 1)?.square().sum());
                let w = ObjectiveWeights { cont: 0.5, align: 2.0, reg: 1.5 };
                lift(total_registration_objective(part(0)?, part(1)?, part(2)?, &w))
            },
        ),
    ];

    // Contrastive loss w.r.t. the generated-side features; the source side
    // is a stopped branch, so the heads are checked against fixed keys.
    let head = NceHead::new(6, 0.07, &mut rng(52)).expect("valid head");
    let src = [randn(&[2, 16, 8, 8], 1.0, 53), randn(&[2, 32, 4, 4], 1.0, 54), randn(&[2, 64, 2, 2], 1.0, 55)];
    let inputs = vec![
        randn(&[2, 16, 8, 8], 1.0, 56),
        randn(&[2, 32, 4, 4], 1.0, 57),
        randn(&[2, 64, 2, 2], 1.0, 58),
    ];
    let h = head.clone();
    out.push(case("patch contrastive loss", inputs, move |tape, v| {
        let p = h.params().bind(tape, false);
        let s = ContentFeatures { stages: src.clone().map(|t| tape.constant(t)) };
        let g = ContentFeatures { stages: [v[0], v[1], v[2]] };
        lift(h.loss(&p, &s, &g, &mut rng(60)))
    }));
    let keys = randn(&[6, 64], 1.0, 65);
    let mut inputs = vec![randn(&[6, 32], 1.0, 66)];
    inputs.extend(jittered(head.params(), 59));
    out.push(case("contrastive projection heads", inputs, move |tape, v| {
        let p = head.params().bind_vars(v[1..].to_vec())?;
        let k = tape.constant(keys.clone()).l2_normalize_rows(1e-12)?;
        let q = lift(head.project(&p, 0, v[0]))?;
        lift(info_nce(q, k, 0.07))
    }));

    // Field predictor and warp, with the zero-initialised flow layer jittered.
    let reg = RegNet::new(&mut rng(61));
    let mut inputs = vec![
        uniform(&[1, 3, 16, 16], -1.0, 1.0, 62),
        uniform(&[1, 3, 16, 16], -1.0, 1.0, 63),
    ];
    inputs.extend(jittered(reg.params(), 64));
    out.push(case("field predictor and warp", inputs, move |_, v| {
        let p = reg.params().bind_vars(v[2..].to_vec())?;
        let field = lift(reg.predict_field(&p, v[0], v[1]))?;
        weigh(lift(warp(v[0], field))?)
    }));
    out
}

/// Style encoder, content encoder and decoder composed, on 1x3x16x16.
pub fn generator_case() -> GradCase {
    let gen = Generator::new(&mut rng(70));
    let mut inputs = vec![
        uniform(&[1, 3, 16, 16], -1.0, 1.0, 71),
        uniform(&[1, 3, 16, 16], -1.0, 1.0, 72),
    ];
    inputs.extend(jittered(gen.params(), 73));
    GradCase {
        name: "full generator",
        tol: GENERATOR_GRAD_TOL,
        // The loss sums ~800 outputs; a larger floor absorbs its round-off.
        result: check(&inputs, H, 8, 1e-4, move |_, v| {
            let p = gen.params().bind_vars(v[2..].to_vec())?;
            let content = lift(gen.encode_content(&p, v[0]))?;
            let style = lift(gen.encode_style(&p, v[1]))?;
            weigh(lift(gen.decode(&p, content.fc(), style))?)
        }),
    }
}

pub fn gradient_suite() -> Vec<GradCase> {
    let mut all = primitive_cases();
    all.extend(composite_cases());
    all.push(generator_case());
    all
}
