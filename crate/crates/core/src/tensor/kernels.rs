//! Forward and adjoint kernels shared by the eager and taped paths.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    check_same(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, k: f64) -> Tensor {
    a.map(|x| x * k)
}

pub fn add_scalar(a: &Tensor, k: f64) -> Tensor {
    a.map(|x| x + k)
}

/// `a + k * b`, computed as a single rounding of the product then the sum.
pub fn axpy(a: &Tensor, k: f64, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "axpy", |x, y| x + k * y)
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(|&x| softplus_scalar(x))
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|&x| sigmoid_scalar(x))
}

/// `(m, k) @ (k, n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions {k} and {k2} disagree"
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

fn dims2(a: &Tensor, what: &str) -> Result<(usize, usize)> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

fn conv_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let (cout, wcin, kh, kw) = match weight.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return Err(Error::dim(format!("conv weight must be rank 4, got {s:?}"))),
    };
    if kh != 3 || kw != 3 {
        return Err(Error::dim(format!("conv kernel must be 3x3, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("conv: empty spatial extent"));
    }
    Ok((cout, cin, h, w))
}

/// Visit every (output row, input row, column window) triple of a same-padded
/// 3x3 correlation. `f(ky, kx, out_off, in_off, len)` receives flat offsets
/// into one output plane and one input plane.
#[inline]
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    for ky in 0..3 {
        // output rows y with 0 <= y + ky - 1 < h
        let y_lo = if ky == 0 { 1 } else { 0 };
        let y_hi = if ky == 2 { h - 1 } else { h };
        for kx in 0..3 {
            let x_lo = if kx == 0 { 1 } else { 0 };
            let x_hi = if kx == 2 { w - 1 } else { w };
            if x_hi <= x_lo {
                continue;
            }
            let len = x_hi - x_lo;
            for y in y_lo..y_hi {
                let iy = y + ky - 1;
                let ix = x_lo + kx - 1;
                f(ky, kx, y * w + x_lo, iy * w + ix, len);
            }
        }
    }
}

/// Same-padded 3x3 cross-correlation without bias: `[Cin,H,W] x [Cout,Cin,3,3] -> [Cout,H,W]`.
pub fn conv3x3(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (cout, cin, h, w) = conv_dims(input, weight)?;
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    let (id, wd) = (input.data(), weight.data());
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let inp = &id[ci * plane..(ci + 1) * plane];
            let k = &wd[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for_each_tap(h, w, |ky, kx, oo, io, len| {
                let wv = k[ky * 3 + kx];
                for (ov, iv) in o[oo..oo + len].iter_mut().zip(&inp[io..io + len]) {
                    *ov += wv * iv;
                }
            });
        }
    }
    Tensor::new(&[cout, h, w], out)
}

/// Cotangent of `conv3x3` with respect to its input.
pub fn conv3x3_grad_input(grad_out: &Tensor, weight: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (cin, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let cout = weight.shape()[0];
    let plane = h * w;
    let mut gin = vec![0.0; cin * plane];
    let (gd, wd) = (grad_out.data(), weight.data());
    for co in 0..cout {
        let g = &gd[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let gi = &mut gin[ci * plane..(ci + 1) * plane];
            let k = &wd[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for_each_tap(h, w, |ky, kx, oo, io, len| {
                let wv = k[ky * 3 + kx];
                for (iv, gv) in gi[io..io + len].iter_mut().zip(&g[oo..oo + len]) {
                    *iv += wv * gv;
                }
            });
        }
    }
    Tensor::new(input_shape, gin)
}

/// Cotangent of `conv3x3` with respect to its weight.
pub fn conv3x3_grad_weight(grad_out: &Tensor, input: &Tensor, weight_shape: &[usize]) -> Result<Tensor> {
    let (cin, h, w) = input.chw()?;
    let cout = weight_shape[0];
    let plane = h * w;
    let mut gw = vec![0.0; cout * cin * 9];
    let (gd, id) = (grad_out.data(), input.data());
    for co in 0..cout {
        let g = &gd[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let inp = &id[ci * plane..(ci + 1) * plane];
            let k = &mut gw[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for_each_tap(h, w, |ky, kx, oo, io, len| {
                let dot: f64 = g[oo..oo + len]
                    .iter()
                    .zip(&inp[io..io + len])
                    .map(|(a, b)| a * b)
                    .sum();
                k[ky * 3 + kx] += dot;
            });
        }
    }
    Tensor::new(weight_shape, gw)
}

/// Number of elements before and after `axis` (outer, inner) plus its extent.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Adds `bias[i]` to every element whose index along `axis` is `i`.
pub fn add_bias(x: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() || bias.rank() != 1 || bias.len() != x.shape()[axis] {
        return Err(Error::dim(format!(
            "add_bias: bias {:?} does not match axis {axis} of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    let b = bias.data();
    for o in 0..outer {
        for (i, bv) in b.iter().enumerate().take(n) {
            let start = (o * n + i) * inner;
            for v in &mut out[start..start + inner] {
                *v += bv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Sums `g` over every axis except `axis`.
pub fn reduce_to_axis(g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(g.shape(), axis);
    let mut out = vec![0.0; n];
    let d = g.data();
    for o in 0..outer {
        for (i, acc) in out.iter_mut().enumerate() {
            let start = (o * n + i) * inner;
            *acc += d[start..start + inner].iter().sum::<f64>();
        }
    }
    Ok(Tensor::from_vec(out))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat: no tensors given"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat: axis {axis} out of range for rank {rank}")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::dim(format!(
                "concat: shape {:?} disagrees with {:?} off axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block: usize = p.shape()[axis..].iter().product();
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

/// Splits `g` along `axis` into pieces with the given extents (inverse of `concat`).
pub fn split(g: &Tensor, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = extents.iter().sum();
    if axis >= g.rank() || g.shape()[axis] != total {
        return Err(Error::dim(format!(
            "split: extents {extents:?} do not cover axis {axis} of {:?}",
            g.shape()
        )));
    }
    let outer: usize = g.shape()[..axis].iter().product();
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let mut pieces: Vec<Vec<f64>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
    let d = g.data();
    let mut off = 0;
    for _ in 0..outer {
        for (piece, e) in pieces.iter_mut().zip(extents) {
            piece.extend_from_slice(&d[off..off + e * inner]);
            off += e * inner;
        }
    }
    pieces
        .into_iter()
        .zip(extents)
        .map(|(data, e)| {
            let mut shape = g.shape().to_vec();
            shape[axis] = *e;
            Tensor::new(&shape, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive_definition() {
        let input = Tensor::new(&[2, 3, 4], (0..24).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let weight = Tensor::new(&[3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        let fast = conv3x3(&input, &weight).unwrap();
        for co in 0..3 {
            for y in 0..3i64 {
                for x in 0..4i64 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if (0..3).contains(&iy) && (0..4).contains(&ix) {
                                    acc += weight.data()[((co * 2 + ci) * 9) as usize + (ky * 3 + kx) as usize]
                                        * input.data()[ci as usize * 12 + (iy * 4 + ix) as usize];
                                }
                            }
                        }
                    }
                    let got = fast.data()[co as usize * 12 + (y * 4 + x) as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_on_single_pixel_uses_center_tap() {
        let input = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let mut w = vec![0.0; 9];
        w[4] = 3.0;
        w[0] = 100.0;
        let weight = Tensor::new(&[1, 1, 3, 3], w).unwrap();
        assert_eq!(conv3x3(&input, &weight).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softplus_branches() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus_scalar(100.0), 100.0);
        let tiny = softplus_scalar(-100.0);
        assert!(tiny > 0.0 && (tiny - 3.720075976020836e-44).abs() < 1e-56);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let parts = split(&c, 1, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let a = Tensor::zeros(&[1, 4, 4]);
        let b = Tensor::zeros(&[1, 4, 3]);
        assert!(matches!(concat(&[&a, &b], 0), Err(Error::Dimension(_))));
    }
}
