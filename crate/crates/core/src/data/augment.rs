use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// Per-sample random crop (zero-pad `pad`, crop back to size) followed by a
/// horizontal flip with probability 0.5. Inputs must be `[N, C, H, W]`.
pub fn augment(inputs: &Tensor, pad: usize, rng: &mut Rng) -> Result<Tensor> {
    let [n, c, h, w] = inputs.shape()[..] else {
        return Err(Error::Config(format!(
            "augmentation needs image batches, got shape {:?}",
            inputs.shape()
        )));
    };
    let plane = c * h * w;
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let flip = rng.gen_bool(0.5);
        let mut s = crop_sample(&inputs.data()[i * plane..(i + 1) * plane], [c, h, w], pad, dy, dx);
        if flip {
            s = flip_sample(&s, [c, h, w]);
        }
        out.extend(s);
    }
    Tensor::new(inputs.shape().to_vec(), out)
}

/// Crops a `[c, h, w]` window at offset `(dy, dx)` out of the image zero-padded
/// by `pad` on every side.
pub fn crop_sample(img: &[f64], [c, h, w]: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn flip_sample(img: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}
