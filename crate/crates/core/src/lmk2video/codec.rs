//! Exactly invertible image ↔ latent rearrangement (space-to-depth).
//!
//! Pixels are scaled to `[-1, 1]` and every `f×f` block becomes one latent
//! position with `3·f²` channels. Latents are stored channel-first,
//! `[3·f², H/f, W/f]`, and latent channel `(dy·f + dx)·3 + c` holds colour
//! `c` of pixel `(x·f + dx, y·f + dy)`.

use crate::error::{Error, Result};
use crate::learning::Tensor;
use crate::render::Image;

fn check(width: usize, height: usize, factor: usize) -> Result<()> {
    if factor == 0 || width % factor != 0 || height % factor != 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "{width}×{height} image is not divisible by latent factor {factor}"
        )));
    }
    Ok(())
}

pub fn encode_latent(image: &Image, factor: usize) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    check(w, h, factor)?;
    let (lw, lh, ch) = (w / factor, h / factor, 3 * factor * factor);
    let mut out = vec![0.0; ch * lh * lw];
    let raw = image.raw();
    for y in 0..h {
        for x in 0..w {
            let (ly, dy, lx, dx) = (y / factor, y % factor, x / factor, x % factor);
            for c in 0..3 {
                let lc = (dy * factor + dx) * 3 + c;
                out[(lc * lh + ly) * lw + lx] = f64::from(raw[(y * w + x) * 3 + c]) / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(&[ch, lh, lw], out)
}

/// Inverse of [`encode_latent`]; values are rounded and clamped to bytes.
pub fn decode_latent(latent: &Tensor, factor: usize) -> Result<Image> {
    let s = latent.shape();
    if factor == 0 || s.len() != 3 || s[0] != 3 * factor * factor {
        return Err(Error::dim(format!(
            "latent {s:?} does not match factor {factor}"
        )));
    }
    let (lh, lw) = (s[1], s[2]);
    let (w, h) = (lw * factor, lh * factor);
    let mut px = vec![0u8; w * h * 3];
    let d = latent.data();
    for y in 0..h {
        for x in 0..w {
            let (ly, dy, lx, dx) = (y / factor, y % factor, x / factor, x % factor);
            for c in 0..3 {
                let lc = (dy * factor + dx) * 3 + c;
                let v = (d[(lc * lh + ly) * lw + lx] + 1.0) * 127.5;
                px[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::from_raw(w, h, px)
}

/// Pose image as `[3, H, W]` with values in `[0, 1]`.
pub fn pose_tensor(image: &Image) -> Tensor {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; 3 * h * w];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f64::from(p[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_raw(size, size, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let img = random_image(64, 1);
        let z = encode_latent(&img, 4).unwrap();
        assert_eq!(z.shape(), &[48, 16, 16]);
        assert_eq!(decode_latent(&z, 4).unwrap(), img);
    }

    #[test]
    fn raster_order() {
        let mut img = Image::filled(8, 8, [0, 0, 0]);
        img.put(0, 0, [255, 0, 0]);
        img.put(5, 2, [0, 0, 255]);
        let z = encode_latent(&img, 4).unwrap();
        assert_eq!(z.get(&[0, 0, 0]), 1.0);
        assert_eq!(z.get(&[1, 0, 0]), -1.0);
        // (5, 2): block (1, 0), offset dx = 1, dy = 2 → channel (2·4 + 1)·3 + 2.
        assert_eq!(z.get(&[29, 0, 1]), 1.0);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert!(encode_latent(&random_image(10, 0), 4).is_err());
        assert!(decode_latent(&Tensor::zeros(&[47, 2, 2]), 4).is_err());
    }

    #[test]
    fn decode_clamps() {
        let z = Tensor::full(&[12, 1, 1], 3.0);
        assert!(decode_latent(&z, 2).unwrap().raw().iter().all(|&b| b == 255));
    }
}
