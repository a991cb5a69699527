//! Reverse-mode autodiff on a tiny convolutional model, checked against
//! central finite differences.

use printer::gradcheck::check;
use printer::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let kernel = Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng);

    let tape = Tape::new();
    let x = tape.leaf(image.clone());
    let k = tape.leaf(kernel.clone());
    let loss = x.conv2d(k, 1, 1)?.leaky_relu(0.2).square().mean();
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", loss.item());
    println!("|dL/dx| {:.6}  |dL/dk| {:.6}", grads.get_or_zeros(&x).l2_norm(), grads.get_or_zeros(&k).l2_norm());

    let report = check(&[image, kernel], 1e-6, 32, 1e-6, |_, v| {
        Ok(v[0].conv2d(v[1], 1, 1)?.leaky_relu(0.2).square().mean())
    })?;
    println!(
        "finite-difference check: {} coordinates, worst relative error {:.2e}",
        report.checked, report.max_rel_err
    );
    Ok(())
}
