//! Central finite-difference oracle for tape gradients.
//!
//! The numerical side only evaluates forward values on fresh tapes whose
//! inputs are constants, so it never touches a backward closure.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// (input index, flat element index, analytic, numeric) of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares autodiff against central differences with step `h`.
///
/// At most `max_per_input` coordinates are probed per input, chosen by a
/// seeded sampler. Relative errors use `max(|a|, |b|, floor)` as the
/// denominator so gradients that are zero up to round-off do not dominate.
pub fn check<F>(inputs: &[Tensor], h: f64, max_per_input: usize, floor: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09e667);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_input).into_vec()
        };
        for j in picks {
            let mut probe = inputs.to_vec();
            let bump = |delta: f64, probe: &mut Vec<Tensor>| {
                let mut data = input.to_vec();
                data[j] += delta;
                probe[i] = Tensor::new(input.shape(), data).expect("same shape");
            };
            bump(h, &mut probe);
            let plus = eval(&probe)?;
            bump(-h, &mut probe);
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j, a, numeric);
            }
        }
    }
    Ok(report)
}
