//! Resampling and soft binning.

use super::tape::Var;
use super::{shape_err, Result, Tensor};

/// Bilinear tap for one output pixel after border clamping.
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the unclamped coordinate was strictly inside the image, i.e.
    /// whether the sample position responds to the displacement.
    live_x: bool,
    live_y: bool,
}

fn tap(x: usize, y: usize, dx: f64, dy: f64, h: usize, w: usize) -> Tap {
    let axis = |p: f64, len: usize| {
        let max = (len - 1) as f64;
        let live = p > 0.0 && p < max;
        let p = p.clamp(0.0, max);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64, live)
    };
    let (x0, x1, fx, live_x) = axis(x as f64 + dx, w);
    let (y0, y1, fy, live_y) = axis(y as f64 + dy, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
    }
}

impl<'t> Var<'t> {
    /// Samples `input` at `p + field(p)` for every pixel `p`, bilinearly, with
    /// coordinates clamped to the image border. `field` is `[N, 2, H, W]`
    /// holding (dx, dy) in pixels.
    pub fn grid_sample_bilinear(self, field: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let f = field.value();
        let (n, c, h, w) = x.dims4("grid_sample_bilinear")?;
        let (fnn, fc, fh, fw) = f.dims4("grid_sample_bilinear")?;
        if fnn != n || fc != 2 || fh != h || fw != w {
            return Err(shape_err(
                "grid_sample_bilinear",
                format!("field {:?} for input {:?}", f.shape(), x.shape()),
            ));
        }
        let hw = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let fd = &f.data()[b * 2 * hw..(b + 1) * 2 * hw];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let t = tap(xx, y, fd[p], fd[hw + p], h, w);
                    for ch in 0..c {
                        let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let top = (1.0 - t.fx) * plane[t.y0 * w + t.x0] + t.fx * plane[t.y0 * w + t.x1];
                        let bot = (1.0 - t.fx) * plane[t.y1 * w + t.x0] + t.fx * plane[t.y1 * w + t.x1];
                        out[(b * c + ch) * hw + p] = (1.0 - t.fy) * top + t.fy * bot;
                    }
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape().record(value, &[self, field], move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gf = needs[1].then(|| vec![0.0; f.len()]);
            for b in 0..n {
                let fd = &f.data()[b * 2 * hw..(b + 1) * 2 * hw];
                for y in 0..h {
                    for xx in 0..w {
                        let p = y * w + xx;
                        let t = tap(xx, y, fd[p], fd[hw + p], h, w);
                        let (mut gdx, mut gdy) = (0.0, 0.0);
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let gv = g[off + p];
                            if let Some(gx) = gx.as_mut() {
                                gx[off + t.y0 * w + t.x0] += gv * (1.0 - t.fx) * (1.0 - t.fy);
                                gx[off + t.y0 * w + t.x1] += gv * t.fx * (1.0 - t.fy);
                                gx[off + t.y1 * w + t.x0] += gv * (1.0 - t.fx) * t.fy;
                                gx[off + t.y1 * w + t.x1] += gv * t.fx * t.fy;
                            }
                            if gf.is_some() {
                                let plane = &x.data()[off..off + hw];
                                let (a, bb) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                                let (cc, d) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                                if t.live_x {
                                    gdx += gv * ((1.0 - t.fy) * (bb - a) + t.fy * (d - cc));
                                }
                                if t.live_y {
                                    gdy += gv * ((1.0 - t.fx) * (cc - a) + t.fx * (d - bb));
                                }
                            }
                        }
                        if let Some(gf) = gf.as_mut() {
                            gf[b * 2 * hw + p] += gdx;
                            gf[b * 2 * hw + hw + p] += gdy;
                        }
                    }
                }
            }
            vec![gx, gf]
        }))
    }

    /// Joint soft histogram `[bins, bins]` of two equally long value vectors
    /// in `[0, 1]`.
    ///
    /// Bin centres sit at `j / (bins - 1)`. A value between centres `j` and
    /// `j + 1` keeps all its mass on the nearer one except inside a band of
    /// `ramp` bins around the midpoint, where the mass moves linearly across.
    /// `ramp = 1` is plain linear interpolation; small `ramp` approaches
    /// round-to-nearest binning. A pixel adds the outer product of its two
    /// weight pairs, so every pixel contributes exactly one unit.
    pub fn soft_joint_histogram(self, other: Var<'t>, bins: usize, ramp: f64) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.len() != b.len() || bins < 2 || !(ramp > 0.0 && ramp <= 1.0) {
            return Err(shape_err(
                "soft_joint_histogram",
                format!("{} vs {} values, {bins} bins, ramp {ramp}", a.len(), b.len()),
            ));
        }
        let scale = (bins - 1) as f64;
        // (lower bin, weight moved to the upper bin, d weight / d value)
        let split = move |v: f64| -> (usize, f64, f64) {
            let u = (v * scale).clamp(0.0, scale);
            let j = u.floor().min(scale - 1.0);
            let t = (u - j - 0.5 * (1.0 - ramp)) / ramp;
            let interior = u > 0.0 && u < scale;
            let (w, dw) = if t <= 0.0 {
                (0.0, 0.0)
            } else if t >= 1.0 {
                (1.0, 0.0)
            } else {
                (t, if interior { scale / ramp } else { 0.0 })
            };
            (j as usize, w, dw)
        };
        let sa: Vec<_> = a.data().iter().map(|&v| split(v)).collect();
        let sb: Vec<_> = b.data().iter().map(|&v| split(v)).collect();
        let mut hist = vec![0.0; bins * bins];
        for (&(ia, fa, _), &(ib, fb, _)) in sa.iter().zip(&sb) {
            let (wa, wb) = ([1.0 - fa, fa], [1.0 - fb, fb]);
            for (da, x) in wa.iter().enumerate() {
                for (db, y) in wb.iter().enumerate() {
                    hist[(ia + da) * bins + ib + db] += x * y;
                }
            }
        }
        let value = Tensor::from_parts(vec![bins, bins], hist);
        Ok(self.tape().record(value, &[self, other], move |g, needs| {
            let cell = |i: usize, j: usize| g[i * bins + j];
            let ga = needs[0].then(|| {
                sa.iter()
                    .zip(&sb)
                    .map(|(&(ia, _, da), &(ib, fb, _))| {
                        if da == 0.0 {
                            return 0.0;
                        }
                        let wb = [1.0 - fb, fb];
                        da * (0..2).map(|k| wb[k] * (cell(ia + 1, ib + k) - cell(ia, ib + k))).sum::<f64>()
                    })
                    .collect()
            });
            let gb = needs[1].then(|| {
                sa.iter()
                    .zip(&sb)
                    .map(|(&(ia, fa, _), &(ib, _, db))| {
                        if db == 0.0 {
                            return 0.0;
                        }
                        let wa = [1.0 - fa, fa];
                        db * (0..2).map(|k| wa[k] * (cell(ia + k, ib + 1) - cell(ia + k, ib))).sum::<f64>()
                    })
                    .collect()
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn zero_field_is_exact_identity() {
        let tape = Tape::new();
        let img = Tensor::from_fn(&[2, 3, 5, 7], |i| ((i * 37) % 11) as f64 * 0.173 - 0.8);
        let x = tape.constant(img.clone());
        let f = tape.constant(Tensor::zeros(&[2, 2, 5, 7]));
        assert_eq!(x.grid_sample_bilinear(f).unwrap().value(), img);
    }

    #[test]
    fn unit_shift_on_ramp_clamps_at_border() {
        // Oracle: output(y, x) = ramp(y, min(x + 1, 4)).
        let tape = Tape::new();
        let ramp = Tensor::from_fn(&[1, 1, 5, 5], |i| (i % 5) as f64);
        let mut field = vec![0.0; 50];
        field[..25].fill(1.0);
        let y = tape
            .constant(ramp)
            .grid_sample_bilinear(tape.constant(Tensor::new(&[1, 2, 5, 5], field).unwrap()))
            .unwrap()
            .value();
        for row in 0..5 {
            for col in 0..5 {
                assert_eq!(y.data()[row * 5 + col], (col + 1).min(4) as f64);
            }
        }
    }

    #[test]
    fn field_shape_is_checked() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let f = tape.constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(x.grid_sample_bilinear(f).is_err());
    }

    #[test]
    fn identical_inputs_stay_near_the_diagonal() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_fn(&[200], |i| (i as f64 * 0.618).fract()));
        let h = v.soft_joint_histogram(v, 8, 0.05).unwrap().value();
        let off: f64 = (0..64).filter(|k| k / 8 != k % 8).map(|k| h.data()[k]).sum();
        // only values inside the narrow ramp band leak off the diagonal
        assert!(off < 0.05 * 200.0, "off-diagonal mass {off}");
        assert!((h.sum() - 200.0).abs() < 1e-9);
    }
}

#[cfg(test)]
mod histogram_tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn full_ramp_is_linear_interpolation() {
        // 0.25 with 3 bins sits halfway between centres 0 and 1.
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1], vec![0.25]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let h = a.soft_joint_histogram(b, 3, 1.0).unwrap().value();
        assert_eq!(h.data(), &[0.0, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn values_outside_the_band_bin_hard() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2], vec![0.1, 0.4]).unwrap());
        let h = a.soft_joint_histogram(a, 3, 0.2).unwrap().value();
        // 0.1 -> u 0.2 -> bin 0; 0.4 -> u 0.8 -> bin 1
        assert_eq!(h.data()[0], 1.0);
        assert_eq!(h.data()[4], 1.0);
        assert!(a.soft_joint_histogram(a, 3, 0.0).is_err());
    }
}
