//! Image collections: a directory of PNG/PGM files or a builtin synthetic set.
//!
//! Builtin sources are written `builtin:NAME[:key=value,...]` with keys
//! `n` (image count), `size` (square extent), `channels`, `seed` and
//! `split` (`train` or `eval`; the two splits draw disjoint random streams).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::image::load_image;
use super::rng::{derive, Rng};
use crate::error::{Error, Result};
use crate::tensor::ByteTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    /// Each image is one of two grey levels plus i.i.d. pixel noise.
    TwoGaussians,
    /// Checkerboards with random cell size, phase and pair of intensities.
    CheckerboardPatches,
    /// Constant images of random intensity.
    Constant,
    /// i.i.d. uniform pixels.
    UniformNoise,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Self::TwoGaussians, Self::CheckerboardPatches, Self::Constant, Self::UniformNoise];

    pub fn name(self) -> &'static str {
        match self {
            Self::TwoGaussians => "two_gaussians",
            Self::CheckerboardPatches => "checkerboard_patches",
            Self::Constant => "constant",
            Self::UniformNoise => "uniform_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuiltinSpec {
    pub kind: Builtin,
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub split: Split,
}

impl BuiltinSpec {
    pub fn new(kind: Builtin) -> Self {
        Self {
            kind,
            count: 256,
            size: 16,
            channels: 1,
            seed: 0,
            split: Split::Train,
        }
    }

    /// Parses the part after `builtin:`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let kind = Builtin::parse(name).ok_or_else(|| {
            let known: Vec<_> = Builtin::ALL.iter().map(|b| b.name()).collect();
            Error::Config(format!("unknown builtin dataset `{name}` (known: {})", known.join(", ")))
        })?;
        let mut spec = Self::new(kind);
        if let Some(opts) = parts.next() {
            for kv in opts.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("builtin option `{kv}` is not key=value")))?;
                let num = || v.parse::<u64>().map_err(|_| Error::Config(format!("builtin option {k}: bad value `{v}`")));
                match k {
                    "n" => spec.count = num()? as usize,
                    "size" => spec.size = num()? as usize,
                    "channels" => spec.channels = num()? as usize,
                    "seed" => spec.seed = num()?,
                    "split" => {
                        spec.split = match v {
                            "train" => Split::Train,
                            "eval" => Split::Eval,
                            _ => return Err(Error::Config(format!("split must be train or eval, got `{v}`"))),
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown builtin option `{k}`"))),
                }
            }
        }
        if parts.next().is_some() {
            return Err(Error::Config(format!("malformed builtin source `builtin:{s}`")));
        }
        if spec.size == 0 || spec.channels == 0 || spec.count == 0 {
            return Err(Error::Config("builtin n, size and channels must be positive".into()));
        }
        Ok(spec)
    }

    pub fn generate(&self) -> Dataset {
        let stream = match self.split {
            Split::Train => 0,
            Split::Eval => 1,
        };
        let shape = [self.channels, self.size, self.size];
        let images = (0..self.count)
            .map(|i| {
                let mut rng = derive(self.seed, &[0xda7a, stream, i as u64]);
                synthesize(self.kind, &shape, &mut rng)
            })
            .collect();
        Dataset { shape, images }
    }
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn synthesize(kind: Builtin, shape: &[usize; 3], rng: &mut Rng) -> ByteTensor {
    let [c, h, w] = *shape;
    let n = c * h * w;
    let data: Vec<u8> = match kind {
        Builtin::TwoGaussians => {
            let mean = if rng.random::<bool>() { 0.25 } else { 0.75 };
            (0..n).map(|_| to_byte(mean + 0.05 * rng.sample::<f64, _>(StandardNormal))).collect()
        }
        Builtin::CheckerboardPatches => {
            // cells of even size with even phase keep every aligned 2x2 patch flat
            let sizes: Vec<usize> = [2usize, 4, 8].into_iter().filter(|&s| s <= h.max(w).max(2)).collect();
            let cell = sizes[rng.random_range(0..sizes.len())];
            let (py, px) = (2 * rng.random_range(0..cell.div_ceil(2)), 2 * rng.random_range(0..cell.div_ceil(2)));
            let levels: Vec<[f64; 2]> = (0..c).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect();
            let mut out = Vec::with_capacity(n);
            for lv in &levels {
                for y in 0..h {
                    for x in 0..w {
                        let parity = ((y + py) / cell + (x + px) / cell) % 2;
                        let noise = rng.sample::<f64, _>(StandardNormal) / 255.0;
                        out.push(to_byte(lv[parity] + noise));
                    }
                }
            }
            out
        }
        Builtin::Constant => {
            let v: Vec<u8> = (0..c).map(|_| rng.random()).collect();
            (0..n).map(|i| v[i / (h * w)]).collect()
        }
        Builtin::UniformNoise => (0..n).map(|_| rng.random()).collect(),
    };
    ByteTensor::new(shape, data).expect("length matches shape")
}

/// Same-shape u8 images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub images: Vec<ByteTensor>,
}

impl Dataset {
    pub fn new(images: Vec<ByteTensor>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Config("dataset is empty".into()))?;
        let (c, h, w) = first.chw()?;
        let shape = [c, h, w];
        if let Some((i, bad)) = images.iter().enumerate().find(|(_, im)| im.shape() != shape) {
            return Err(Error::dim(format!("image {i} has shape {:?}, expected {shape:?}", bad.shape())));
        }
        Ok(Self { shape, images })
    }

    /// A directory (PNG/PGM files, sorted by name) or a `builtin:` source.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(rest) = source.strip_prefix("builtin:") {
            return Ok(BuiltinSpec::parse(rest)?.generate());
        }
        let dir = Path::new(source);
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory `{source}` does not exist")));
        }
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
            })
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.shape.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_parsing() {
        let s = BuiltinSpec::parse("constant:n=3,size=8,channels=3,seed=9,split=eval").unwrap();
        assert_eq!((s.count, s.size, s.channels, s.seed, s.split), (3, 8, 3, 9, Split::Eval));
        assert!(BuiltinSpec::parse("nope").is_err());
        assert!(BuiltinSpec::parse("constant:n=x").is_err());
        assert!(BuiltinSpec::parse("constant:bogus=1").is_err());
        assert!(BuiltinSpec::parse("constant:size=0").is_err());
    }

    #[test]
    fn splits_differ_and_are_reproducible() {
        let a = Dataset::load("builtin:checkerboard_patches:n=4,seed=1").unwrap();
        let b = Dataset::load("builtin:checkerboard_patches:n=4,seed=1").unwrap();
        let e = Dataset::load("builtin:checkerboard_patches:n=4,seed=1,split=eval").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, e.images);
        assert_eq!(a.shape, [1, 16, 16]);
    }

    #[test]
    fn constant_images_are_flat() {
        let d = Dataset::load("builtin:constant:n=5,channels=3,size=4").unwrap();
        for im in &d.images {
            for ch in im.data().chunks(16) {
                assert!(ch.iter().all(|&v| v == ch[0]));
            }
        }
    }

    #[test]
    fn checkerboard_patches_are_nearly_flat_on_aligned_2x2() {
        let d = Dataset::load("builtin:checkerboard_patches:n=20").unwrap();
        for im in &d.images {
            for y in (0..16).step_by(2) {
                for x in (0..16).step_by(2) {
                    let p = [im.data()[y * 16 + x], im.data()[y * 16 + x + 1], im.data()[(y + 1) * 16 + x], im.data()[(y + 1) * 16 + x + 1]];
                    let (lo, hi) = (p.iter().min().unwrap(), p.iter().max().unwrap());
                    assert!(hi - lo <= 8, "{p:?}");
                }
            }
        }
    }

    #[test]
    fn empty_or_mixed_datasets_are_rejected() {
        assert!(Dataset::new(vec![]).is_err());
        let a = ByteTensor::new(&[1, 2, 2], vec![0; 4]).unwrap();
        let b = ByteTensor::new(&[1, 4, 4], vec![0; 16]).unwrap();
        assert!(matches!(Dataset::new(vec![a, b]), Err(Error::Dimension(_))));
        assert!(Dataset::load("/definitely/not/here").is_err());
    }
}
