//! Property checks shared by the focused test targets and the acceptance
//! runner. Each returns an [`Outcome`] instead of panicking so the runner
//! can report every criterion.

use printer::gapbridge::{smoothness, warp, RegNet};
use printer::metrics::{hard_nmi, soft_nmi_value, NMI_BINS};
use printer::protobank::{sinkhorn_assign, PrototypeBank, SINKHORN_ROUNDS, STYLE_DIM};
use printer::synthdata::{generate_pair, SynthSpec};
use printer::tensor::{Tape, Tensor};
use rand::Rng;

use super::rng;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn from_failures(failures: Vec<String>, summary: String) -> Self {
        if failures.is_empty() {
            Self {
                passed: true,
                detail: summary,
            }
        } else {
            Self {
                passed: false,
                detail: format!("{summary}; {}", failures.join("; ")),
            }
        }
    }
}

/// Plain-loop entropic transport: cosine scores, `exp(score / tau)`, then
/// alternating column (mass `1/K`) and row (mass `1/B`) scaling, and a final
/// row normalisation.
pub fn sinkhorn_oracle(styles: &[Vec<f64>], protos: &[Vec<f64>], tau: f64, rounds: usize) -> Vec<Vec<f64>> {
    let (b, k) = (styles.len(), protos.len());
    let unit: Vec<Vec<f64>> = styles
        .iter()
        .map(|s| {
            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            s.iter().map(|v| v / n).collect()
        })
        .collect();
    let score = |i: usize, j: usize| unit[i].iter().zip(&protos[j]).map(|(a, c)| a * c).sum::<f64>() / tau;
    let top = (0..b)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| score(i, j))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<Vec<f64>> = (0..b).map(|i| (0..k).map(|j| (score(i, j) - top).exp()).collect()).collect();
    for _ in 0..rounds {
        for j in 0..k {
            let c: f64 = (0..b).map(|i| q[i][j]).sum::<f64>().max(1e-9);
            for row in q.iter_mut() {
                row[j] /= c * k as f64;
            }
        }
        for row in q.iter_mut() {
            let r: f64 = row.iter().sum::<f64>().max(1e-9);
            row.iter_mut().for_each(|v| *v /= r * b as f64);
        }
    }
    for row in q.iter_mut() {
        let r: f64 = row.iter().sum::<f64>().max(1e-9);
        row.iter_mut().for_each(|v| *v /= r);
    }
    q
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|c| c.to_vec()).collect()
}

fn assign(styles: &Tensor, protos: &Tensor, tau: f64, rounds: usize) -> Tensor {
    let tape = Tape::new();
    sinkhorn_assign(tape.constant(styles.clone()), tape.constant(protos.clone()), tau, rounds)
        .expect("valid sinkhorn inputs")
        .value()
}

fn unit_rows(t: Tensor) -> Tensor {
    let w = t.shape()[1];
    let mut d = t.to_vec();
    for row in d.chunks_mut(w) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(t.shape(), d).unwrap()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn sinkhorn_invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut r = rng(2);

    // Simplex rows for random shapes and temperatures.
    let mut worst_sum = 0.0f64;
    for case in 0..300 {
        let b = r.gen_range(1..=8);
        let k = r.gen_range(1..=16);
        let tau = 10f64.powf(r.gen_range(-3.0..1.0));
        let s = Tensor::randn(&[b, STYLE_DIM], 1.0, &mut r);
        let p = unit_rows(Tensor::randn(&[k, STYLE_DIM], 1.0, &mut r));
        let a = assign(&s, &p, tau, SINKHORN_ROUNDS);
        for row in rows(&a) {
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                failures.push(format!("case {case}: negative or non-finite weight"));
            }
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_sum > 1e-6 {
        failures.push(format!("row sum off by {worst_sum:.2e}"));
    }

    // Same algorithm as the oracle once both run 100 rounds.
    let mut worst_oracle = 0.0f64;
    for _ in 0..20 {
        let s = Tensor::randn(&[5, STYLE_DIM], 1.0, &mut r);
        let p = unit_rows(Tensor::randn(&[6, STYLE_DIM], 1.0, &mut r));
        for tau in [1.0, 0.1] {
            let got = rows(&assign(&s, &p, tau, 100));
            let want = sinkhorn_oracle(&rows(&s), &rows(&p), tau, 100);
            worst_oracle = worst_oracle.max(max_gap(&got, &want));
        }
    }
    if worst_oracle > 1e-9 {
        failures.push(format!("100-round result differs from oracle by {worst_oracle:.2e}"));
    }

    // Sharp temperature on styles equal to the prototypes: the default
    // round count already sits on the converged, near-identity answer.
    let p = unit_rows(Tensor::randn(&[2, STYLE_DIM], 1.0, &mut r));
    let sharp = rows(&assign(&p, &p, 1e-3, SINKHORN_ROUNDS));
    let oracle = sinkhorn_oracle(&rows(&p), &rows(&p), 1e-3, 100);
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (to_oracle, to_eye) = (max_gap(&sharp, &oracle), max_gap(&sharp, &eye));
    if to_oracle > 1e-3 || to_eye > 1e-3 {
        failures.push(format!("tau 1e-3: {to_oracle:.2e} from oracle, {to_eye:.2e} from identity"));
    }

    // One prototype takes all mass, exactly.
    let s = Tensor::randn(&[4, STYLE_DIM], 1.0, &mut r);
    let one = unit_rows(Tensor::randn(&[1, STYLE_DIM], 1.0, &mut r));
    if assign(&s, &one, 0.1, SINKHORN_ROUNDS).data().iter().any(|&v| v != 1.0) {
        failures.push("K = 1 is not exactly [[1]]".into());
    }

    // A style equidistant from orthonormal prototypes is shared evenly.
    let mut worst_uniform = 0.0f64;
    for k in 2..=STYLE_DIM {
        let p = Tensor::from_fn(&[k, STYLE_DIM], |i| if i / STYLE_DIM == i % STYLE_DIM { 1.0 } else { 0.0 });
        let s = Tensor::from_fn(&[3, STYLE_DIM], |i| if i % STYLE_DIM < k { 0.7 } else { 0.0 });
        for v in assign(&s, &p, 0.1, SINKHORN_ROUNDS).data() {
            worst_uniform = worst_uniform.max((v - 1.0 / k as f64).abs());
        }
    }
    if worst_uniform > 1e-6 {
        failures.push(format!("symmetric case off uniform by {worst_uniform:.2e}"));
    }

    Outcome::from_failures(
        failures,
        format!(
            "row sums within {worst_sum:.1e}, 100-round oracle gap {worst_oracle:.1e}, sharp case {to_oracle:.1e} from oracle, symmetric {worst_uniform:.1e}"
        ),
    )
}

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; STYLE_DIM];
    v[i] = 1.0;
    v
}

pub fn prototype_invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut r = rng(3);
    let k = 16;
    let mut bank = PrototypeBank::new(k, 0.1, &mut r).unwrap();
    let mut worst = 0.0f64;
    for step in 0..1000 {
        let b = r.gen_range(1..=8);
        let styles = Tensor::randn(&[b, STYLE_DIM], r.gen_range(0.01..10.0), &mut r);
        let alpha = Tensor::uniform(&[b, k], 0.0, 1.0, &mut r);
        if let Err(e) = bank.momentum_update(&styles, &alpha) {
            failures.push(format!("update {step}: {e}"));
            break;
        }
        for row in bank.prototypes().data().chunks(STYLE_DIM) {
            worst = worst.max((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        failures.push(format!("norm drift {worst:.2e}"));
    }

    // Fixed point: the mean of a prototype's own direction leaves it in place.
    let before = bank.prototypes().clone();
    let own = Tensor::new(&[1, STYLE_DIM], before.data()[2 * STYLE_DIM..3 * STYLE_DIM].to_vec()).unwrap();
    let mut hot = vec![0.0; k];
    hot[2] = 1.0;
    bank.momentum_update(&own, &Tensor::new(&[1, k], hot).unwrap()).unwrap();
    let drift = before
        .data()
        .iter()
        .zip(bank.prototypes().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if drift > 1e-15 {
        failures.push(format!("fixed point moved by {drift:.2e}"));
    }

    // e1 pulled by e2: (0.9, 0.1) / sqrt(0.82); the unowned prototype is untouched.
    let p = Tensor::new(&[2, STYLE_DIM], [basis(0), basis(4)].concat()).unwrap();
    let mut hand = PrototypeBank::from_prototypes(p, 0.1).unwrap();
    hand.momentum_update(
        &Tensor::new(&[1, STYLE_DIM], basis(1)).unwrap(),
        &Tensor::new(&[1, 2], vec![0.6, 0.4]).unwrap(),
    )
    .unwrap();
    let d = hand.prototypes().data();
    let n = 0.82f64.sqrt();
    if (d[0] - 0.9 / n).abs() > 1e-12 || (d[1] - 0.1 / n).abs() > 1e-12 || d[STYLE_DIM..] != basis(4)[..] {
        failures.push(format!("hand case gave {:?}", &d[..2]));
    }

    Outcome::from_failures(
        failures,
        format!("norm drift {worst:.1e} over 1000 updates, fixed point drift {drift:.1e}"),
    )
}

pub fn registration_identity() -> Outcome {
    let mut failures = Vec::new();
    let mut r = rng(4);
    let reg = RegNet::new(&mut r);
    let tape = Tape::new();
    let p = reg.params().bind(&tape, false);
    let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r);
    let y = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r);
    let field = reg
        .predict_field(&p, tape.constant(x.clone()), tape.constant(y))
        .unwrap();
    if field.value().data().iter().any(|&v| v != 0.0) {
        failures.push("untrained field is not exactly zero".into());
    }
    let warped = warp(tape.constant(x.clone()), field).unwrap().value();
    if warped != x {
        failures.push("zero-field warp is not bit-exact".into());
    }

    let rough = |t: Tensor| smoothness(Tape::new().constant(t)).unwrap().item();
    let mut constant_max = 0.0f64;
    let mut varying_min = f64::INFINITY;
    for _ in 0..50 {
        let (dx, dy) = (r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
        let c = Tensor::from_fn(&[1, 2, 16, 16], |i| if i < 256 { dx } else { dy });
        constant_max = constant_max.max(rough(c));
        let mut v = vec![dx; 512];
        v[r.gen_range(0..512)] += r.gen_range(1e-3..1.0);
        varying_min = varying_min.min(rough(Tensor::new(&[1, 2, 16, 16], v).unwrap()));
        varying_min = varying_min.min(rough(Tensor::randn(&[1, 2, 16, 16], 1.0, &mut r)));
    }
    if constant_max != 0.0 {
        failures.push(format!("constant field roughness {constant_max:e}"));
    }
    if !(varying_min > 0.0) {
        failures.push("a non-constant field had zero roughness".into());
    }
    Outcome::from_failures(
        failures,
        format!("zero field exact, identity warp exact, smallest non-constant roughness {varying_min:.2e}"),
    )
}

/// Luminance in `[0, 1]` of a synthetic image, flattened.
fn luminance_values(image: &Tensor) -> Vec<f64> {
    printer::metrics::luminance(image).unwrap().data().to_vec()
}

#[derive(Clone, Copy, Debug)]
pub struct NmiStats {
    pub identity_min: f64,
    pub noise_max: f64,
    pub agreement_max: f64,
}

pub fn nmi_stats() -> NmiStats {
    let mut r = rng(5);
    let spec = SynthSpec::default();
    let px = 64 * 64;
    let mut identity_min = f64::INFINITY;
    let mut agreement_max = 0.0f64;
    for i in 0..100u64 {
        let pair = generate_pair(&spec, 1000 + i).unwrap();
        let (a, b) = if i % 2 == 0 {
            (luminance_values(&pair.x), luminance_values(&pair.y))
        } else {
            // Noise mixed into a random image at a random strength.
            let a: Vec<f64> = (0..px).map(|_| r.gen()).collect();
            let mix = r.gen_range(0.0..1.0);
            let b = a.iter().map(|&v| (1.0 - mix) * v + mix * r.gen::<f64>()).collect();
            (a, b)
        };
        identity_min = identity_min.min(soft_nmi_value(&a, &a, NMI_BINS).unwrap());
        let gap = (soft_nmi_value(&a, &b, NMI_BINS).unwrap() - hard_nmi(&a, &b, NMI_BINS).unwrap()).abs();
        agreement_max = agreement_max.max(gap);
    }
    let mut noise_max = 0.0f64;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let a: Vec<f64> = (0..px).map(|_| r.gen()).collect();
        let b: Vec<f64> = (0..px).map(|_| r.gen()).collect();
        noise_max = noise_max.max(soft_nmi_value(&a, &b, NMI_BINS).unwrap());
    }
    NmiStats {
        identity_min,
        noise_max,
        agreement_max,
    }
}

pub fn nmi_contract() -> Outcome {
    let s = nmi_stats();
    let mut failures = Vec::new();
    if s.identity_min < 0.98 {
        failures.push(format!("identity NMI {:.4} < 0.98", s.identity_min));
    }
    if s.noise_max >= 0.05 {
        failures.push(format!("independent-noise NMI {:.4} >= 0.05", s.noise_max));
    }
    if s.agreement_max > 0.02 {
        failures.push(format!("soft vs hard gap {:.4} > 0.02", s.agreement_max));
    }
    Outcome::from_failures(
        failures,
        format!(
            "identity min {:.4}, independent noise max {:.4}, soft-hard max gap {:.4}",
            s.identity_min, s.noise_max, s.agreement_max
        ),
    )
}
