//! Multi-resolution image representation.
//!
//! Every 2x2 patch `[x1, x2, x3, x4]` (row-major inside the patch) maps to three
//! detail coefficients and the patch mean through a 4x4 matrix:
//! `[y1, y2, y3, x̄] = M⁻¹ [x1, x2, x3, x4]`. Applied patchwise and repeated on
//! the mean image this yields the stack `(y_1, …, y_{S−1}, x_S)`.
//!
//! Two matrices are provided. The unimodular one has `|det M| = 1`, so the
//! decomposition changes no log-density. The Haar one has `|det M⁻¹| = ½` and
//! contributes `dims(x_{s+1}) · ln ½` per level.
//!
//! Details are stored channel-stacked at coarse resolution, `(3C, H/2, W/2)`:
//! coefficient `k` of channel `c` is channel `k·C + c`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Unimodular,
    Haar,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Unimodular => "unimodular",
            TransformKind::Haar => "haar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unimodular" => Some(TransformKind::Unimodular),
            "haar" => Some(TransformKind::Haar),
            _ => None,
        }
    }
}

/// `c = 2^(2/3)`, the detail scale of the unimodular matrix.
pub fn unimodular_c() -> f64 {
    4f64.cbrt()
}

/// Normalizer of the mean row; `M⁻¹`'s last row is `1/a` everywhere.
pub const UNIMODULAR_A: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformMatrix {
    pub kind: TransformKind,
    /// `x = M · [y1, y2, y3, x̄]`
    pub forward: [[f64; 4]; 4],
    /// `[y1, y2, y3, x̄] = M⁻¹ · x`
    pub inverse: [[f64; 4]; 4],
}

impl TransformMatrix {
    pub fn new(kind: TransformKind) -> Self {
        match kind {
            TransformKind::Unimodular => {
                let c = unimodular_c();
                let a = UNIMODULAR_A;
                let (p, q) = (c / a, 1.0);
                let ic = 1.0 / c;
                let ia = 1.0 / a;
                Self {
                    kind,
                    forward: [
                        [p, p, p, q],
                        [p, -p, -p, q],
                        [-p, p, -p, q],
                        [-p, -p, p, q],
                    ],
                    inverse: [
                        [ic, ic, -ic, -ic],
                        [ic, -ic, ic, -ic],
                        [ic, -ic, -ic, ic],
                        [ia, ia, ia, ia],
                    ],
                }
            }
            TransformKind::Haar => Self {
                kind,
                forward: [
                    [0.5, 0.5, 0.5, 1.0],
                    [0.5, -0.5, -0.5, 1.0],
                    [-0.5, 0.5, -0.5, 1.0],
                    [-0.5, -0.5, 0.5, 1.0],
                ],
                inverse: [
                    [0.5, 0.5, -0.5, -0.5],
                    [0.5, -0.5, 0.5, -0.5],
                    [0.5, -0.5, -0.5, 0.5],
                    [0.25, 0.25, 0.25, 0.25],
                ],
            },
        }
    }

    /// `ln |det M⁻¹|` for one patch.
    pub fn patch_logdet(&self) -> f64 {
        match self.kind {
            TransformKind::Unimodular => 0.0,
            TransformKind::Haar => 0.5f64.ln(),
        }
    }

    #[inline]
    fn apply(m: &[[f64; 4]; 4], v: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(m) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
        }
        out
    }

    pub fn split_patch(&self, x: [f64; 4]) -> [f64; 4] {
        Self::apply(&self.inverse, x)
    }

    pub fn merge_patch(&self, y: [f64; 4]) -> [f64; 4] {
        Self::apply(&self.forward, y)
    }
}

/// Determinant of a 4x4 matrix by cofactor expansion along the first row.
pub fn det4(m: &[[f64; 4]; 4]) -> f64 {
    fn det3(a: [[f64; 3]; 3]) -> f64 {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }
    let mut det = 0.0;
    for col in 0..4 {
        let mut minor = [[0.0; 3]; 3];
        for r in 1..4 {
            let mut k = 0;
            for c in 0..4 {
                if c != col {
                    minor[r - 1][k] = m[r][c];
                    k += 1;
                }
            }
        }
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[0][col] * det3(minor);
    }
    det
}

fn even_extents(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("{what}: extents {h}x{w} must be even and non-zero")));
    }
    Ok((c, h, w))
}

/// Mean of every 2x2 patch.
pub fn downsample_avg(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = even_extents(x, "downsample_avg")?;
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let top = 2 * i * w + 2 * j;
                let bot = top + w;
                out.push(0.25 * (plane[top] + plane[top + 1] + plane[bot] + plane[bot + 1]));
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// `x_s -> (y_s, x_{s+1})`.
pub fn patch_split(x: &Tensor, kind: TransformKind) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = even_extents(x, "patch_split")?;
    let m = TransformMatrix::new(kind);
    let (ho, wo) = (h / 2, w / 2);
    let cp = ho * wo;
    let d = x.data();
    let mut y = vec![0.0; 3 * c * cp];
    let mut coarse = vec![0.0; c * cp];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let top = 2 * i * w + 2 * j;
                let bot = top + w;
                let r = m.split_patch([plane[top], plane[top + 1], plane[bot], plane[bot + 1]]);
                let idx = i * wo + j;
                for (k, rv) in r.iter().take(3).enumerate() {
                    y[(k * c + ch) * cp + idx] = *rv;
                }
                coarse[ch * cp + idx] = r[3];
            }
        }
    }
    Ok((Tensor::new(&[3 * c, ho, wo], y)?, Tensor::new(&[c, ho, wo], coarse)?))
}

/// `(y_s, x_{s+1}) -> x_s`; the exact inverse of [`patch_split`].
pub fn patch_merge(y: &Tensor, coarse: &Tensor, kind: TransformKind) -> Result<Tensor> {
    let (c, ho, wo) = coarse.chw()?;
    if y.shape() != [3 * c, ho, wo] {
        return Err(Error::dim(format!(
            "patch_merge: details {:?} do not match coarse image {:?} (expected [{}, {ho}, {wo}])",
            y.shape(),
            coarse.shape(),
            3 * c
        )));
    }
    let m = TransformMatrix::new(kind);
    let (h, w) = (2 * ho, 2 * wo);
    let cp = ho * wo;
    let (yd, cd) = (y.data(), coarse.data());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let idx = i * wo + j;
                let px = m.merge_patch([
                    yd[ch * cp + idx],
                    yd[(c + ch) * cp + idx],
                    yd[(2 * c + ch) * cp + idx],
                    cd[ch * cp + idx],
                ]);
                let top = 2 * i * w + 2 * j;
                let bot = top + w;
                plane[top] = px[0];
                plane[top + 1] = px[1];
                plane[bot] = px[2];
                plane[bot + 1] = px[3];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `(y_1, …, y_{S−1}, x_S)` with its log-det ledger.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionStack {
    pub kind: TransformKind,
    /// `details[s - 1]` is `y_s`.
    pub details: Vec<Tensor>,
    pub base: Tensor,
    /// `Σ_s ln |det M⁻¹|` over every patch of every split.
    pub logdet_total: f64,
}

impl ResolutionStack {
    pub fn levels(&self) -> usize {
        self.details.len() + 1
    }
}

/// Checks that `(H, W)` survives `levels − 1` halvings.
pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::contract("at least one resolution level is required"));
    }
    let f = 1usize << (levels - 1);
    if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::dim(format!(
            "extents {h}x{w} are not divisible by 2^{} = {f}",
            levels - 1
        )));
    }
    Ok(())
}

pub fn decompose(x: &Tensor, levels: usize, kind: TransformKind) -> Result<ResolutionStack> {
    let (_, h, w) = x.chw()?;
    check_divisible(h, w, levels)?;
    let m = TransformMatrix::new(kind);
    let mut details = Vec::with_capacity(levels - 1);
    let mut current = x.clone();
    let mut logdet_total = 0.0;
    for _ in 1..levels {
        let (y, coarse) = patch_split(&current, kind)?;
        logdet_total += coarse.len() as f64 * m.patch_logdet();
        details.push(y);
        current = coarse;
    }
    Ok(ResolutionStack {
        kind,
        details,
        base: current,
        logdet_total,
    })
}

pub fn compose(stack: &ResolutionStack) -> Result<Tensor> {
    let mut current = stack.base.clone();
    for y in stack.details.iter().rev() {
        current = patch_merge(y, &current, stack.kind)?;
    }
    Ok(current)
}

/// `[x_1, x_2, …, x_S]`: the image and its repeated 2x2 means.
pub fn mean_pyramid(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (_, h, w) = x.chw()?;
    check_divisible(h, w, levels)?;
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let next = downsample_avg(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRole {
    Detail,
    Base,
}

/// Prior variances per level.
///
/// Enabled, the schedule is the image of unit-variance finest-level noise under
/// the decomposition: `x_s` has variance `(¼)^{s−1}` and `y_s` has
/// `k·(¼)^{s−1}`, where `k` is the per-coefficient gain of the transform's
/// detail rows (`c` for unimodular, 1 for Haar). Disabled, every variance is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub enabled: bool,
    pub levels: usize,
    pub detail_gain: f64,
}

impl NoiseSchedule {
    pub fn new(kind: TransformKind, levels: usize, enabled: bool) -> Self {
        let detail_gain = match kind {
            TransformKind::Unimodular => unimodular_c(),
            TransformKind::Haar => 1.0,
        };
        Self {
            enabled,
            levels,
            detail_gain,
        }
    }

    pub fn variance(&self, level: usize, role: NoiseRole) -> Result<f64> {
        let valid = match role {
            NoiseRole::Detail => (1..self.levels).contains(&level),
            NoiseRole::Base => level == self.levels,
        };
        if !valid {
            return Err(Error::contract(format!(
                "no {role:?} noise at level {level} of a {}-level schedule",
                self.levels
            )));
        }
        if !self.enabled {
            return Ok(1.0);
        }
        let quarter = 0.25f64.powi(level as i32 - 1);
        Ok(match role {
            NoiseRole::Detail => self.detail_gain * quarter,
            NoiseRole::Base => quarter,
        })
    }

    /// Prior variance of the state modeled at `level` (details below `S`, base at `S`).
    pub fn level_variance(&self, level: usize) -> Result<f64> {
        let role = if level == self.levels { NoiseRole::Base } else { NoiseRole::Detail };
        self.variance(level, role)
    }
}
