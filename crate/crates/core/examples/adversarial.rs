//! Discriminator and generator adversarial losses plus the patch-wise
//! contrastive content loss on an untrained network.

use printer::adversary::{d_step_loss, gr_step_loss, Discriminator, NceHead, NCE_PATCHES, NCE_TEMPERATURE};
use printer::stylenet::Generator;
use printer::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let disc = Discriminator::new(&mut rng);
    let real = Tensor::uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut rng);
    let fake = Tensor::uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut rng);

    let tape = Tape::new();
    let dp = disc.params().bind(&tape, false);
    let real_logits = disc.logits(&dp, tape.constant(real.clone()))?;
    let fake_logits = disc.logits(&dp, tape.constant(fake))?;
    println!("patch logit map {:?}", real_logits.shape());
    println!("discriminator loss {:.4} (chance level {:.4})", d_step_loss(real_logits, fake_logits).item(), 2.0 * 2f64.ln());
    println!("generator loss     {:.4} (chance level {:.4})", gr_step_loss(fake_logits).item(), 2f64.ln());

    let gen = Generator::new(&mut rng);
    let nce = NceHead::new(NCE_PATCHES, NCE_TEMPERATURE, &mut rng)?;
    let gp = gen.params().bind(&tape, false);
    let np = nce.params().bind(&tape, false);
    let src = gen.encode_content(&gp, tape.constant(real.clone()))?;
    let same = gen.encode_content(&gp, tape.constant(real.clone()))?;
    let shifted = gen.encode_content(&gp, tape.constant(real.map(|v| -v)))?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(1);
    println!("contrastive loss, identical content: {:.4}", nce.loss(&np, &src, &same, &mut sample_rng)?.item());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(1);
    println!("contrastive loss, inverted content:  {:.4}", nce.loss(&np, &src, &shifted, &mut sample_rng)?.item());
    Ok(())
}
