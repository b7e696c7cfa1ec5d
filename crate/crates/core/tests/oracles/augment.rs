use super::ensure;
use handcue::augment::{lowres_lowlight, SCALES};
use handcue::image::Image;
use handcue_tensor::{Rng, Stream};

/// Scalar reference: noise drawn up front in channel, row, column order of
/// the low-resolution grid, then every output pixel computed on its own.
pub fn reference(img: &Image, s: usize, b: f64, seed: u64, sigma: f64) -> Vec<f32> {
    let (lw, lh) = (img.width / s, img.height / s);
    let mut rng = Rng::new(seed, Stream::Noise);
    let mut noise = vec![0.0f32; img.channels * lh * lw];
    for n in noise.iter_mut() {
        *n = if sigma > 0.0 { (rng.normal() * sigma) as f32 } else { 0.0 };
    }
    let mut out = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let by = (y / s).min(lh - 1);
                let bx = (x / s).min(lw - 1);
                let mut sum = 0.0f32;
                for dy in 0..s {
                    for dx in 0..s {
                        sum += b as f32 * img.get(c, by * s + dy, bx * s + dx);
                    }
                }
                let dark = (sum / (s * s) as f32).min(1.0);
                let v = dark + noise[(c * lh + by) * lw + bx];
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed, Stream::Custom(9));
    let data = (0..3 * w * h).map(|_| rng.uniform_f32(0.0, 1.0)).collect();
    Image::new(w, h, 3, data).unwrap()
}

/// Bit-exact agreement for every scale, including sizes the scale does not
/// divide. Returns the number of pixels compared.
pub fn scalar_agreement(seeds: u64) -> Result<usize, String> {
    let mut pixels = 0;
    for seed in 0..seeds {
        let (w, h) = [(48, 48), (37, 29), (64, 40)][seed as usize % 3];
        let img = random_image(w, h, seed);
        for s in SCALES {
            for (b, sigma) in [(0.6, 0.02), (1.0, 0.0), (1.4, 0.05)] {
                let got = lowres_lowlight(&img, s, b, &mut Rng::new(seed, Stream::Noise), sigma).map_err(|e| e.to_string())?;
                let want = reference(&img, s, b, seed, sigma);
                ensure(got.data.len() == want.len(), || "length differs".into())?;
                for (i, (g, r)) in got.data.iter().zip(&want).enumerate() {
                    ensure(g.to_bits() == r.to_bits(), || format!("pixel {i}, s {s}, b {b}: {g} vs {r}"))?;
                }
                pixels += want.len();
            }
        }
    }
    Ok(pixels)
}

/// Random scales, brightness and noise never leave [0, 1].
pub fn unit_range(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    for k in 0..n {
        let img = random_image(24, 20, k as u64);
        let s = SCALES[rng.below(SCALES.len())];
        let b = rng.uniform(0.05, 3.0);
        let sigma = rng.uniform(0.0, 0.5);
        let out = lowres_lowlight(&img, s, b, &mut Rng::new(k as u64, Stream::Noise), sigma).map_err(|e| e.to_string())?;
        ensure(out.data.iter().all(|v| (0.0..=1.0).contains(v)), || format!("case {k} left [0, 1]"))?;
    }
    Ok(())
}
