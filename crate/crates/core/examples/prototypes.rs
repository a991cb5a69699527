//! Soft assignment of style codes to a prototype bank, quantisation, and
//! the momentum update that keeps prototypes on the unit sphere.

use printer::protobank::{quantize, PrototypeBank, STYLE_DIM};
use printer::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bank = PrototypeBank::new(6, 0.1, &mut rng)?;
    let styles = Tensor::randn(&[4, STYLE_DIM], 1.0, &mut rng);

    let tape = Tape::new();
    let p = bank.params().bind(&tape, false);
    let alpha = bank.assign(&p, tape.constant(styles.clone()))?;
    let quantized = quantize(alpha, p.var(bank.prototype_id()))?;
    for (i, row) in alpha.value().data().chunks(bank.k()).enumerate() {
        let w: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("style {i}: weights [{}]", w.join(", "));
    }
    let norms: Vec<String> = quantized
        .value()
        .data()
        .chunks(STYLE_DIM)
        .map(|r| format!("{:.3}", r.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    println!("quantised style norms (at most 1): {}", norms.join(", "));

    let alpha = alpha.value();
    for _ in 0..100 {
        bank.momentum_update(&styles, &alpha)?;
    }
    let drift = bank
        .prototypes()
        .data()
        .chunks(STYLE_DIM)
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("after 100 momentum updates, largest |norm - 1| = {drift:.2e}");
    Ok(())
}
