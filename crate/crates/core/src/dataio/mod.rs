//! Datasets, image files, dequantization and run configuration.

pub mod config;
pub mod dataset;
pub mod image;
pub mod rng;

pub use config::Config;
pub use dataset::{Builtin, BuiltinSpec, Dataset, Split};
pub use image::{load_image, save_float_image, save_image};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{ByteTensor, NdArray, Tensor};
use rng::Rng;

/// `(x + u) / 256` with `u ~ U[0, 1)` per element.
pub fn dequantize(x: &ByteTensor, rng: &mut Rng) -> Tensor {
    let data = x.data().iter().map(|&v| (v as f64 + rng.random::<f64>()) / 256.0).collect();
    Tensor::new(x.shape(), data).expect("same length")
}

/// Clamp to `[0, 1]`, then `floor(x·256)` capped at 255.
pub fn quantize(x: &Tensor) -> ByteTensor {
    x.map(|&v| (v.clamp(0.0, 1.0) * 256.0).floor().min(255.0) as u8)
}

/// Maps pixel codes to bin centres, `(x + ½) / 256`.
pub fn bin_centres(x: &ByteTensor) -> Tensor {
    x.map(|&v| (v as f64 + 0.5) / 256.0)
}

/// Applies one uniformly random permutation to the `k×k` patches of a
/// `[C, H, W]` image; channels move together.
pub fn shuffle_patches<T: Clone>(x: &NdArray<T>, k: usize, rng: &mut Rng) -> Result<NdArray<T>> {
    let (c, h, w) = x.chw()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!("patch size {k} does not divide {h}x{w}")));
    }
    let (ph, pw) = (h / k, w / k);
    let mut order: Vec<usize> = (0..ph * pw).collect();
    // Fisher-Yates, drawn explicitly so the permutation is pinned by the rng
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let src = x.data();
    let mut out = src.to_vec();
    for (dst_patch, &src_patch) in order.iter().enumerate() {
        let (dy, dx) = (dst_patch / pw * k, dst_patch % pw * k);
        let (sy, sx) = (src_patch / pw * k, src_patch % pw * k);
        for ch in 0..c {
            for r in 0..k {
                let d = ch * h * w + (dy + r) * w + dx;
                let s = ch * h * w + (sy + r) * w + sx;
                out[d..d + k].clone_from_slice(&src[s..s + k]);
            }
        }
    }
    NdArray::new(x.shape(), out)
}
