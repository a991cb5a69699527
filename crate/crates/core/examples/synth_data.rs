//! Writes a few synthetic source/target pairs with their ground-truth
//! fields to a directory and prints per-pair statistics.
//!
//! cargo run --release --example synth_data -- /tmp/synth

use printer::imageio::{flow_to_rgb8, to_rgb8, write_rgb8, Rgb8};
use printer::metrics::count_positive;
use printer::synthdata::{generate_pair, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-preview".into());
    std::fs::create_dir_all(&out)?;
    let spec = SynthSpec::default();
    for i in 0..4 {
        let p = generate_pair(&spec, i)?;
        let panel = Rgb8::hstack(
            &[to_rgb8(&p.x)?, to_rgb8(&p.y_pre)?, to_rgb8(&p.y)?, flow_to_rgb8(&p.phi_star, None)?],
            2,
        )
        .scaled(3);
        let path = std::path::Path::new(&out).join(format!("pair-{i}.png"));
        write_rgb8(&path, &panel)?;
        let positive = p.nuclei.iter().filter(|n| n.positive).count();
        println!(
            "pair {i}: {} nuclei ({positive} positive), {} positive regions detected, max |field| {:.2} px -> {}",
            p.nuclei.len(),
            count_positive(&p.y_pre)?,
            p.phi_star.abs_max(),
            path.display()
        );
    }
    Ok(())
}
