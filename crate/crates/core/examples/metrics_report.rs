//! Image-similarity metrics on synthetic pairs: SSIM, PSNR, hard and soft
//! NMI, and the random-feature distance between image sets.

use printer::metrics::{hard_nmi, luminance, psnr, soft_nmi_value, ssim, FeatureDistance, NMI_BINS};
use printer::synthdata::{generate_pair, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec::default();
    let pairs: Vec<_> = (0..32).map(|i| generate_pair(&spec, i)).collect::<Result<_, _>>()?;

    let p = &pairs[0];
    for (label, a, b) in [("Y_pre vs Y (deformation only)", &p.y_pre, &p.y), ("X vs Y (stain and deformation)", &p.x, &p.y)] {
        let (la, lb) = (luminance(a)?, luminance(b)?);
        println!(
            "{label}: SSIM {:.4}  PSNR {:.2} dB  NMI hard {:.4} soft {:.4}",
            ssim(a, b)?.value,
            psnr(a, b)?,
            hard_nmi(la.data(), lb.data(), NMI_BINS)?,
            soft_nmi_value(la.data(), lb.data(), NMI_BINS)?
        );
    }

    let fd = FeatureDistance::default();
    let xs: Vec<_> = pairs.iter().map(|p| p.x.clone()).collect();
    let ys: Vec<_> = pairs.iter().map(|p| p.y.clone()).collect();
    let pre: Vec<_> = pairs.iter().map(|p| p.y_pre.clone()).collect();
    println!("feature distance, source set vs target set:       {:.5}", fd.distance(&xs, &ys)?);
    println!("feature distance, undeformed vs deformed targets: {:.5}", fd.distance(&pre, &ys)?);
    println!("feature distance, target set vs itself:          {:.5}", fd.distance(&ys, &ys)?);
    Ok(())
}
