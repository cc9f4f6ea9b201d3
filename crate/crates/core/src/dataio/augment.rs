//! Training augmentation: random horizontal flip and reflect-padded crop.

use ndarray::Array4;
use rand::Rng;

use crate::batch::ImageBatch;
use crate::rng::{self, tags};

pub const PAD: usize = 4;

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    // Reflection is periodic in 2n - 2, which covers pads larger than the image.
    let period = 2 * n as isize - 2;
    let k = k.rem_euclid(period);
    (if k < n as isize { k } else { period - k }) as usize
}

/// Crops an `H x W` window at offset `(dy, dx)` of the image padded by `pad`
/// on every side, then optionally mirrors it horizontally.
pub fn reflect_pad_crop(
    pixels: &Array4<f32>,
    n: usize,
    dy: usize,
    dx: usize,
    pad: usize,
    flip: bool,
    out: &mut Array4<f32>,
) {
    let (_, h, w, c) = pixels.dim();
    for i in 0..h {
        let si = reflect(i as isize + dy as isize - pad as isize, h);
        for j in 0..w {
            let jj = if flip { w - 1 - j } else { j };
            let sj = reflect(jj as isize + dx as isize - pad as isize, w);
            for ch in 0..c {
                out[[n, i, j, ch]] = pixels[[n, si, sj, ch]];
            }
        }
    }
}

/// Flip with probability 0.5, then a random crop from the image reflect-padded
/// by 4 pixels. Image `i` draws from `(seed, i)`.
pub fn augment(batch: &ImageBatch<f32>, seed: u64) -> ImageBatch<f32> {
    let mut out = batch.pixels.clone();
    for n in 0..batch.len() {
        let mut r = rng::rng_for(seed, &[tags::AUGMENT, n as u64]);
        let flip = r.random_bool(0.5);
        let dy = r.random_range(0..=2 * PAD);
        let dx = r.random_range(0..=2 * PAD);
        reflect_pad_crop(&batch.pixels, n, dy, dx, PAD, flip, &mut out);
    }
    ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
    }
}

pub fn flip_horizontal(batch: &ImageBatch<f32>) -> ImageBatch<f32> {
    let mut out = batch.pixels.clone();
    for n in 0..batch.len() {
        reflect_pad_crop(&batch.pixels, n, 0, 0, 0, true, &mut out);
    }
    ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImageBatch<f32> {
        let px = Array4::from_shape_fn((3, 6, 6, 2), |(n, i, j, c)| ((n * 36 + i * 6 + j) * 2 + c) as f32 / 256.0);
        ImageBatch::new(px, vec![0, 1, 0]).unwrap()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
        assert_eq!(reflect(-3, 1), 0);
        assert_eq!(reflect(-4, 2), 0);
        assert_eq!(reflect(11, 3), 1);
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let b = ramp();
        let mut out = b.pixels.clone();
        out.fill(0.0);
        for n in 0..3 {
            reflect_pad_crop(&b.pixels, n, PAD, PAD, PAD, false, &mut out);
        }
        assert_eq!(out, b.pixels);
    }

    #[test]
    fn double_flip_is_identity() {
        let b = ramp();
        assert_eq!(flip_horizontal(&flip_horizontal(&b)), b);
        assert_ne!(flip_horizontal(&b), b);
    }

    #[test]
    fn augment_is_seeded() {
        let b = ramp();
        assert_eq!(augment(&b, 3), augment(&b, 3));
        assert_eq!(augment(&b, 3).labels, b.labels);
    }
}
