//! Warping with a known synthetic field, the untrained predictor's identity
//! contract, and the registration loss terms.

use printer::gapbridge::{reg_loss, warp, RegNet};
use printer::metrics::end_point_error;
use printer::synthdata::{generate_pair, SynthSpec};
use printer::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pair = generate_pair(&SynthSpec::default(), 2)?;
    let s = pair.x.shape().to_vec();
    let batch = |t: &Tensor| t.reshape(&[1, s[0], s[1], s[2]]);

    let tape = Tape::new();
    let y_pre = tape.constant(batch(&pair.y_pre)?);
    let y = tape.constant(batch(&pair.y)?);
    let truth = tape.constant(pair.phi_star.reshape(&[1, 2, s[1], s[2]])?);
    let rewarped = warp(y_pre, truth)?.value();
    println!(
        "warping the undeformed target by the true field: mean |error| {:.2e}",
        rewarped.zip_map(&y.value(), |a, b| (a - b).abs())?.mean()
    );

    let reg = RegNet::new(&mut ChaCha8Rng::seed_from_u64(0));
    let p = reg.params().bind(&tape, false);
    let field = reg.predict_field(&p, tape.constant(batch(&pair.x)?), y)?;
    println!("untrained field max |value| = {}", field.value().abs_max());
    println!(
        "end-point error of that zero field: {:.3} px",
        end_point_error(&field.value(), &truth.value())?
    );

    for (label, f) in [("zero field", field), ("true field", truth)] {
        let t = reg_loss(warp(y_pre, f)?, y, f, 1.01, 1.0)?;
        println!(
            "{label}: NMI {:.4}, smoothness {:.5}, loss {:.4}",
            t.nmi.item(),
            t.smoothness.item(),
            t.total.item()
        );
    }
    Ok(())
}
