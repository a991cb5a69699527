//! Content/style decoupled generation: the same source rendered with the
//! style of a reference target and with the style the aggregator predicts.

use printer::protobank::{AggregatorHead, PrototypeBank};
use printer::stylenet::{generate, Generator, StyleSource, FEATURE_CHANNELS};
use printer::synthdata::{generate_pair, SynthSpec};
use printer::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen = Generator::new(&mut rng);
    let mut bank = PrototypeBank::new(16, 0.1, &mut rng)?;
    bank.init_aggregator(FEATURE_CHANNELS, AggregatorHead::Mixture, &mut rng);
    let pair = generate_pair(&SynthSpec::default(), 0)?;
    let s = pair.x.shape().to_vec();

    let tape = Tape::new();
    let gp = gen.params().bind(&tape, false);
    let bp = bank.params().bind(&tape, false);
    let x = tape.constant(pair.x.reshape(&[1, s[0], s[1], s[2]])?);
    let y = tape.constant(pair.y.reshape(&[1, s[0], s[1], s[2]])?);

    let referenced = generate(&gen, &gp, &bank, &bp, x, StyleSource::Reference(y))?;
    let aggregated = generate(&gen, &gp, &bank, &bp, x, StyleSource::Aggregated)?;
    let gap = referenced.image.value().zip_map(&aggregated.image.value(), |a, b| (a - b).abs())?;
    println!("output shape {:?}", referenced.image.shape());
    println!("style code (reference):  {:.3?}", referenced.style.value().data());
    println!("style code (aggregated): {:.3?}", aggregated.style.value().data());
    println!("mean |difference| between the two renderings: {:.3e}", gap.mean());
    Ok(())
}
