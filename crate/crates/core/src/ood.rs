//! Likelihood-based out-of-distribution analysis: complexity-adjusted scores,
//! auROC, histograms and the shuffled-patch study.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rayon::prelude::*;

use crate::dataio::rng::{derive, sub_seed};
use crate::dataio::{dequantize, shuffle_patches, Dataset};
use crate::error::{Error, Result};
use crate::mrcnf::{bpd_from_logp, MrcnfModel};
use crate::tensor::ByteTensor;

/// Identifies the compressor behind [`complexity`] in reports.
pub const COMPRESSOR: &str = "deflate-9";
pub const HIST_BINS: usize = 100;

/// Bits per dimension of the raw pixel buffer after deflate (level 9).
pub fn complexity(x: &ByteTensor) -> f64 {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(9));
    enc.write_all(x.data()).expect("in-memory write");
    let bytes = enc.finish().expect("in-memory write");
    8.0 * bytes.len() as f64 / x.len() as f64
}

/// Normalized Mann–Whitney U: `P(pos > neg) + ½·P(pos = neg)`, ties by midrank.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("auROC needs non-empty positive and negative score lists"));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::contract("auROC scores must not be NaN"));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks doubled to stay integral: a tie group over positions i..j gets i + j + 1
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let positives = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detector {
    /// Higher likelihood is more in-distribution.
    NegBpd,
    /// Complexity-adjusted: `−(bpd − L)`.
    SScore,
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Self::NegBpd => "neg_bpd",
            Self::SScore => "s_score",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::NegBpd, Self::SScore].into_iter().find(|d| d.name() == s)
    }

    /// In-distribution score: larger means more typical.
    pub fn score(self, s: &OodScore) -> f64 {
        match self {
            Self::NegBpd => -s.bpd,
            Self::SScore => -s.s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodScore {
    pub bpd: f64,
    /// Compressed bits per dimension.
    pub l: f64,
    /// `bpd − L`.
    pub s: f64,
}

impl OodScore {
    pub fn new(bpd: f64, l: f64) -> Self {
        Self { bpd, l, s: bpd - l }
    }
}

/// Scores every image; image `i` uses the random stream `(seed, i)`.
pub fn score_dataset(model: &MrcnfModel, data: &Dataset, seed: u64) -> Result<Vec<OodScore>> {
    data.images
        .par_iter()
        .enumerate()
        .map(|(i, im)| Ok(OodScore::new(model.bpd(im, sub_seed(seed, &[i as u64]))?, complexity(im))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub in_count: usize,
    pub ood_count: usize,
}

/// Fixed-count bins over the pooled range of both score sets.
pub fn histogram(in_scores: &[f64], ood_scores: &[f64], bins: usize) -> Vec<HistogramBin> {
    let pooled = in_scores.iter().chain(ood_scores);
    let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            in_count: 0,
            ood_count: 0,
        })
        .collect();
    let idx = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    for &v in in_scores {
        out[idx(v)].in_count += 1;
    }
    for &v in ood_scores {
        out[idx(v)].ood_count += 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodReport {
    pub detector: Detector,
    pub in_scores: Vec<OodScore>,
    pub ood_scores: Vec<OodScore>,
    /// `(detector, auROC)` for both detectors, the selected one first.
    pub auroc: Vec<(Detector, f64)>,
    pub histogram: Vec<HistogramBin>,
}

/// Scores both datasets; in-distribution images are the positive class.
pub fn ood_report(model: &MrcnfModel, in_data: &Dataset, ood_data: &Dataset, detector: Detector, seed: u64) -> Result<OodReport> {
    let in_scores = score_dataset(model, in_data, sub_seed(seed, &[0]))?;
    let ood_scores = score_dataset(model, ood_data, sub_seed(seed, &[1]))?;
    let other = match detector {
        Detector::NegBpd => Detector::SScore,
        Detector::SScore => Detector::NegBpd,
    };
    let mut aurocs = Vec::new();
    for d in [detector, other] {
        let p: Vec<f64> = in_scores.iter().map(|s| d.score(s)).collect();
        let n: Vec<f64> = ood_scores.iter().map(|s| d.score(s)).collect();
        aurocs.push((d, auroc(&p, &n)?));
    }
    let p: Vec<f64> = in_scores.iter().map(|s| detector.score(s)).collect();
    let n: Vec<f64> = ood_scores.iter().map(|s| detector.score(s)).collect();
    Ok(OodReport {
        detector,
        histogram: histogram(&p, &n, HIST_BINS),
        in_scores,
        ood_scores,
        auroc: aurocs,
    })
}

/// Writes `ood_scores.csv`, `ood_auroc.csv`, `ood_hist.csv` and `ood_report.txt`.
pub fn write_ood_report(dir: &Path, report: &OodReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut scores = String::from("dataset,image_id,bpd,L,S\n");
    for (name, rows) in [("in", &report.in_scores), ("ood", &report.ood_scores)] {
        for (i, s) in rows.iter().enumerate() {
            let _ = writeln!(scores, "{name},{i},{},{},{}", s.bpd, s.l, s.s);
        }
    }
    fs::write(dir.join("ood_scores.csv"), scores)?;
    let mut au = String::from("detector,auROC\n");
    for (d, v) in &report.auroc {
        let _ = writeln!(au, "{},{v}", d.name());
    }
    fs::write(dir.join("ood_auroc.csv"), au)?;
    let mut hist = String::from("bin_lo,bin_hi,in_count,ood_count\n");
    for b in &report.histogram {
        let _ = writeln!(hist, "{},{},{},{}", b.lo, b.hi, b.in_count, b.ood_count);
    }
    fs::write(dir.join("ood_hist.csv"), hist)?;
    let mut txt = String::new();
    let _ = writeln!(txt, "compressor={COMPRESSOR}");
    let _ = writeln!(txt, "detector={}", report.detector.name());
    let _ = writeln!(txt, "in_images={}", report.in_scores.len());
    let _ = writeln!(txt, "ood_images={}", report.ood_scores.len());
    for (d, v) in &report.auroc {
        let _ = writeln!(txt, "auroc.{}={v}", d.name());
    }
    fs::write(dir.join("ood_report.txt"), txt)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShuffleRow {
    pub patch_size: usize,
    pub mean_bpd: f64,
    pub std_bpd: f64,
}

/// Powers of two from 1 up to the image extent that divide both sides.
pub fn default_patch_sizes(h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 1;
    while k <= h.min(w) {
        if h.is_multiple_of(k) && w.is_multiple_of(k) {
            out.push(k);
        }
        k *= 2;
    }
    out
}

/// Mean bpd of the dataset after shuffling `k×k` patches, for each `k`.
/// Every image is dequantized once and the same noise is reused for all `k`.
pub fn shuffle_study(model: &MrcnfModel, data: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<ShuffleRow>> {
    if data.is_empty() {
        return Err(Error::contract("shuffle study needs at least one image"));
    }
    let dims = model.layout.image_dims();
    let deq: Vec<_> = data
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| dequantize(im, &mut derive(seed, &[0xd0, i as u64])))
        .collect();
    sizes
        .iter()
        .map(|&k| {
            let bpds: Vec<f64> = deq
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let shuffled = shuffle_patches(x, k, &mut derive(seed, &[0x5f, k as u64, i as u64]))?;
                    let ll = model.log_likelihood(&shuffled, sub_seed(seed, &[i as u64]), false)?;
                    Ok(bpd_from_logp(ll.logp, dims))
                })
                .collect::<Result<_>>()?;
            let n = bpds.len() as f64;
            let mean = bpds.iter().sum::<f64>() / n;
            let var = if bpds.len() > 1 {
                bpds.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok(ShuffleRow {
                patch_size: k,
                mean_bpd: mean,
                std_bpd: var.sqrt(),
            })
        })
        .collect()
}

pub fn write_shuffle_study(path: &Path, rows: &[ShuffleRow]) -> Result<()> {
    let mut s = String::from("patch_size,mean_bpd,std_bpd\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.patch_size, r.mean_bpd, r.std_bpd);
    }
    fs::write(path, s)?;
    Ok(())
}
