//! Forward kernels and their analytic backward passes.
//!
//! Feature maps are laid out channel-major (`C×h×w`, or `C×n` once the
//! spatial axes are flattened). Backward functions take the upstream
//! gradient and return the gradient with respect to the input; parameter
//! gradients are accumulated into the [`Parameter`] buffers.

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Gradients of `a ⊗ b` with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dout, &b.transpose())?;
    let db = matmul(&a.transpose(), dout)?;
    Ok((da, db))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        let base = o * len * inner;
        for j in 0..inner {
            let idx = |i: usize| base + i * inner + j;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(d[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (d[idx(i)] - mx).exp();
                d[idx(i)] = e;
                sum += e;
            }
            for i in 0..len {
                d[idx(i)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax`] given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let xd = dx.data_mut();
    for o in 0..outer {
        let base = o * len * inner;
        for j in 0..inner {
            let mut dot = 0.0;
            for i in 0..len {
                let k = base + i * inner + j;
                dot += yd[k] * gd[k];
            }
            for i in 0..len {
                let k = base + i * inner + j;
                xd[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    dx
}

/// Row-wise softmax of a contiguous `m×n` buffer, in place.
pub(crate) fn softmax_rows_inplace(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-position affine map (a 1×1 convolution) on a channel-major tensor.
pub fn affine_1x1(x: &Tensor, weight: &Parameter, bias: &Parameter) -> Result<Tensor> {
    let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
    if x.rank() < 2 || x.channels() != cin || bias.shape() != [cout] {
        return Err(Error::dim(
            "affine_1x1",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let n = x.positions();
    let mut out = vec![0.0; cout * n];
    let (w, b, xd) = (weight.value.data(), bias.value.data(), x.data());
    for o in 0..cout {
        let orow = &mut out[o * n..(o + 1) * n];
        orow.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let s = w[o * cin + i];
            for (ov, xv) in orow.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *ov += s * xv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = cout;
    Tensor::from_vec(&shape, out)
}

pub fn affine_1x1_backward(
    x: &Tensor,
    weight: &mut Parameter,
    bias: &mut Parameter,
    dout: &Tensor,
) -> Tensor {
    let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
    let n = x.positions();
    let (xd, gd) = (x.data(), dout.data());
    if weight.trainable || bias.trainable {
        let mut gw = vec![0.0; cout * cin];
        let mut gb = vec![0.0; cout];
        for o in 0..cout {
            let grow = &gd[o * n..(o + 1) * n];
            gb[o] = grow.iter().sum();
            for i in 0..cin {
                gw[o * cin + i] = grow.iter().zip(&xd[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
            }
        }
        weight.accumulate(&gw);
        bias.accumulate(&gb);
    }
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    let w = weight.value.data();
    for o in 0..cout {
        let grow = &gd[o * n..(o + 1) * n];
        for i in 0..cin {
            let s = w[o * cin + i];
            for (d, g) in dxd[i * n..(i + 1) * n].iter_mut().zip(grow) {
                *d += s * g;
            }
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Backward of [`relu`], masked by the forward output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

fn conv_out_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Range of output indices `x` whose tap `x*stride + k - 1` lands inside `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    if n_in < k {
        return (0, 0);
    }
    let hi = ((n_in - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// 3×3 convolution with zero padding 1 and the given stride. `weight` is `Cout×Cin×3×3`.
pub fn conv3x3(x: &Tensor, weight: &Parameter, bias: &Parameter, stride: usize) -> Result<Tensor> {
    let ws = weight.shape();
    if x.rank() != 3 || ws.len() != 4 || ws[1] != x.channels() || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::dim(
            "conv3x3",
            format!("input {:?}, weight {:?}", x.shape(), ws),
        ));
    }
    let (cout, cin) = (ws[0], ws[1]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let mut out = vec![0.0; cout * oh * ow];
    let (wd, bd, xd) = (weight.value.data(), bias.value.data(), x.data());
    for o in 0..cout {
        let oplane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        oplane.iter_mut().for_each(|v| *v = bd[o]);
        for i in 0..cin {
            let iplane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(oh, h, stride, ky);
                for kx in 0..3 {
                    let s = wd[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (xlo, xhi) = valid_range(ow, w, stride, kx);
                    for y in ylo..yhi {
                        let iy = y * stride + ky - 1;
                        let orow = &mut oplane[y * ow..(y + 1) * ow];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let off = xlo + kx - 1;
                            for (ov, iv) in orow[xlo..xhi].iter_mut().zip(&irow[off..]) {
                                *ov += s * iv;
                            }
                        } else {
                            for xx in xlo..xhi {
                                orow[xx] += s * irow[xx * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

pub fn conv3x3_backward(
    x: &Tensor,
    weight: &mut Parameter,
    bias: &mut Parameter,
    stride: usize,
    dout: &Tensor,
) -> Tensor {
    let cout = weight.shape()[0];
    let cin = weight.shape()[1];
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
    let (xd, gd) = (x.data(), dout.data());
    let mut gw = vec![0.0; cout * cin * 9];
    let mut gb = vec![0.0; cout];
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    let wd = weight.value.data();
    let need_param_grad = weight.trainable || bias.trainable;
    for o in 0..cout {
        let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = gplane.iter().sum();
        for i in 0..cin {
            let iplane = &xd[i * h * w..(i + 1) * h * w];
            let dplane = &mut dxd[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(oh, h, stride, ky);
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let s = wd[widx];
                    let (xlo, xhi) = valid_range(ow, w, stride, kx);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let iy = y * stride + ky - 1;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            let off = xlo + kx - 1;
                            let len = xhi - xlo;
                            let irow = &iplane[iy * w + off..iy * w + off + len];
                            let drow = &mut dplane[iy * w + off..iy * w + off + len];
                            for ((g, iv), dv) in grow[xlo..xhi].iter().zip(irow).zip(drow) {
                                acc += g * iv;
                                *dv += s * g;
                            }
                        } else {
                            for xx in xlo..xhi {
                                let ix = iy * w + xx * stride + kx - 1;
                                acc += grow[xx] * iplane[ix];
                                dplane[ix] += s * grow[xx];
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    if need_param_grad {
        weight.accumulate(&gw);
        bias.accumulate(&gb);
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps `(i0, i1, frac)` for each output index along one axis
/// (half-pixel centres, edges clamped).
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample(x: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    if factor == 0 || x.rank() != 3 {
        return Err(Error::Validation(format!(
            "upsample needs factor >= 1 and a C×h×w input, got factor {factor} and {:?}",
            x.shape()
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    let xd = x.data();
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(ch * oh + y) * ow + xx] = xd[(ch * h + y / factor) * w + xx / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for ch in 0..c {
                let plane = &xd[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        out[(ch * oh + y) * ow + xx] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample_backward(dout: &Tensor, factor: usize, mode: UpsampleMode) -> Tensor {
    if factor == 1 {
        return dout.clone();
    }
    let (c, oh, ow) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let (gd, dxd) = (dout.data(), dx.data_mut());
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dxd[(ch * h + y / factor) * w + xx / factor] += gd[(ch * oh + y) * ow + xx];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for ch in 0..c {
                let plane = &mut dxd[ch * h * w..(ch + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let g = gd[(ch * oh + y) * ow + xx];
                        plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                        plane[y1 * w + x0] += g * fy * (1.0 - fx);
                        plane[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
        }
    }
    dx
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Tensor> {
    if label >= num_classes {
        return Err(Error::Validation(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut t = Tensor::zeros(&[num_classes]);
    t.data_mut()[label] = 1.0;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&loop_matmul(&a, &b)) < 1e-12);
        }
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&loop_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let eq = softmax(&Tensor::zeros(&[4]), 0).unwrap();
        for v in eq.data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let t = Tensor::from_vec(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_middle_axis_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 3], &mut rng);
        let y = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..3 {
                let s: f64 = (0..5).map(|b| y.data()[(a * 5 + b) * 3 + c]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let t = Tensor::from_vec(&[3], vec![1000.0, 1000.0, -1000.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!(s.is_finite());
        assert_abs_diff_eq!(s.data()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn affine_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 2], &mut rng);
        let w = Parameter::new(Tensor::eye(3));
        let b = Parameter::new(Tensor::zeros(&[3]));
        assert_eq!(affine_1x1(&x, &w, &b).unwrap(), x);

        let x = random(&[4, 3, 5], &mut rng);
        let w = Parameter::new(random(&[6, 4], &mut rng));
        let b = Parameter::new(random(&[6], &mut rng));
        let y = affine_1x1(&x, &w, &b).unwrap();
        let flat = x.clone().reshape(&[4, 15]).unwrap();
        let mut oracle = loop_matmul(&w.value, &flat);
        for o in 0..6 {
            for p in 0..15 {
                oracle.data_mut()[o * 15 + p] += b.value.data()[o];
            }
        }
        assert_eq!(y.shape(), &[6, 3, 5]);
        assert!(y.reshape(&[6, 15]).unwrap().max_abs_diff(&oracle) < 1e-12);

        // 1×1 spatial extent is a plain affine map
        let v = random(&[4, 1, 1], &mut rng);
        let y = affine_1x1(&v, &w, &b).unwrap();
        for o in 0..6 {
            let expect: f64 =
                b.value.data()[o] + (0..4).map(|i| w.value.at2(o, i) * v.data()[i]).sum::<f64>();
            assert_abs_diff_eq!(y.data()[o], expect, epsilon = 1e-12);
        }
        assert!(affine_1x1(&random(&[5, 2], &mut rng), &w, &b).is_err());
    }

    fn loop_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let cout = w.shape()[0];
        let oh = (h as usize - 1) / stride + 1;
        let ow = (wd as usize - 1) / stride + 1;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xx * stride + kx) as isize - 1;
                                if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                    s += w.data()[((o * cin + i) * 3 + ky) * 3 + kx]
                                        * x.at3(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w, stride) in &[(4, 4, 1), (5, 3, 1), (4, 6, 2), (8, 8, 2), (1, 1, 1), (2, 2, 2)] {
            let x = random(&[2, h, w], &mut rng);
            let wt = Parameter::new(random(&[3, 2, 3, 3], &mut rng));
            let b = Parameter::new(random(&[3], &mut rng));
            let y = conv3x3(&x, &wt, &b, stride).unwrap();
            let oracle = loop_conv(&x, &wt.value, &b.value, stride);
            assert_eq!(y.shape(), oracle.shape());
            assert!(y.max_abs_diff(&oracle) < 1e-12, "h={h} w={w} s={stride}");
        }
    }

    #[test]
    fn conv_backward_matches_adjoint() {
        // <conv(x), g> is linear in x and w; its gradient is the backward output.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for stride in [1, 2] {
            let x = random(&[2, 4, 6], &mut rng);
            let mut wt = Parameter::new(random(&[3, 2, 3, 3], &mut rng));
            let mut b = Parameter::new(random(&[3], &mut rng));
            let y = conv3x3(&x, &wt, &b, stride).unwrap();
            let g = random(y.shape(), &mut rng);
            let dx = conv3x3_backward(&x, &mut wt, &mut b, stride, &g);
            let f = |x: &Tensor, w: &Parameter| {
                let y = conv3x3(x, w, &b, stride).unwrap();
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let eps = 1e-6;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let num = (f(&xp, &wt) - f(&xm, &wt)) / (2.0 * eps);
                assert_abs_diff_eq!(num, dx.data()[idx], epsilon = 1e-8);
            }
            for idx in 0..wt.numel() {
                let mut wp = wt.clone();
                wp.value.data_mut()[idx] += eps;
                let mut wm = wt.clone();
                wm.value.data_mut()[idx] -= eps;
                let num = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
                assert_abs_diff_eq!(num, wt.grad.data()[idx], epsilon = 1e-8);
            }
            let gsum: Vec<f64> = (0..3).map(|o| g.row(o).iter().sum()).collect();
            for o in 0..3 {
                assert_abs_diff_eq!(b.grad.data()[o], gsum[o], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 3], &mut rng);
        assert_eq!(upsample(&x, 1, UpsampleMode::Bilinear).unwrap(), x);
        let v = Tensor::full(&[1, 1, 1], 0.7);
        let up = upsample(&v, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(up.shape(), &[1, 2, 2]);
        assert!(up.data().iter().all(|&u| u == 0.7));
        let c = Tensor::full(&[2, 3, 2], -1.25);
        for f in [2, 3, 8] {
            let up = upsample(&c, f, UpsampleMode::Bilinear).unwrap();
            assert!(up.data().iter().all(|&u| (u + 1.25).abs() < 1e-15));
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            for f in [2, 3] {
                let x = random(&[2, 3, 4], &mut rng);
                let y = upsample(&x, f, mode).unwrap();
                let g = random(y.shape(), &mut rng);
                let dx = upsample_backward(&g, f, mode);
                let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_cases() {
        assert_eq!(one_hot(0, 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap().data(), &[0.0, 0.0, 1.0]);
        assert!(one_hot(3, 3).is_err());
        for k in 0..7 {
            assert_eq!(one_hot(k, 7).unwrap().sum(), 1.0);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4], &mut rng);
        let g = random(&[3, 4], &mut rng);
        let y = softmax(&x, 0).unwrap();
        let dx = softmax_backward(&y, &g, 0);
        let f = |x: &Tensor| {
            softmax(x, 0).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            assert_abs_diff_eq!((f(&xp) - f(&xm)) / 2e-6, dx.data()[i], epsilon = 1e-8);
        }
    }
}
