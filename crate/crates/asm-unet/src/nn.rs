//! Differentiable building blocks on top of the tape: 3D convolutions,
//! normalization layers, depthwise causal 1D convolution, interpolation,
//! row gathers, softmax, and the two segmentation losses.
//!
//! Feature maps live on the tape as (s, C) tensors: row i holds the C
//! channel values of voxel i in canonical order (w fastest, then h, then d).
//!
//! Weight layouts (documented here, asserted at the call sites):
//!   conv3d:            w is (cout, k^3*cin), col = ((kz*k + ky)*k + kx)*cin + ci
//!   conv_transpose3d:  w is (cin, k^3*cout), col = ((kz*k + ky)*k + kx)*cout + co
//!   causal_conv1d:     w is (C, k), col j multiplies x[t-(k-1)+j]

use crate::tape::{Tensor, Tape, Vid, Unary};
use crate::volume::Dims3;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

pub fn conv3d_out_dims(dims: Dims3, k: usize, stride: usize, pad: usize) -> Dims3 {
    let f = |n: usize| (n + 2 * pad - k) / stride + 1;
    Dims3::new(f(dims.w), f(dims.h), f(dims.d))
}

#[allow(clippy::too_many_arguments)]
fn conv3d_value(
    x: &[f64],
    dims: Dims3,
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let od = conv3d_out_dims(dims, k, stride, pad);
    let wcols = k * k * k * cin;
    let mut out = vec![0.0; od.count() * cout];
    for oz in 0..od.d {
        for oy in 0..od.h {
            for ox in 0..od.w {
                let out_base = od.index(ox, oy, oz) * cout;
                out[out_base..out_base + cout].copy_from_slice(b);
                for kz in 0..k {
                    let iz = (oz * stride + kz) as i64 - pad as i64;
                    if iz < 0 || iz >= dims.d as i64 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= dims.h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= dims.w as i64 {
                                continue;
                            }
                            let in_base =
                                dims.index(ix as usize, iy as usize, iz as usize) * cin;
                            let xrow = &x[in_base..in_base + cin];
                            let woff = ((kz * k + ky) * k + kx) * cin;
                            for co in 0..cout {
                                let wrow = &w[co * wcols + woff..co * wcols + woff + cin];
                                let mut acc = 0.0;
                                for ci in 0..cin {
                                    acc += xrow[ci] * wrow[ci];
                                }
                                out[out_base + co] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_grads(
    x: &[f64],
    dims: Dims3,
    w: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let od = conv3d_out_dims(dims, k, stride, pad);
    let wcols = k * k * k * cin;
    let mut dx = vec![0.0; dims.count() * cin];
    let mut dw = vec![0.0; cout * wcols];
    let mut db = vec![0.0; cout];
    for oz in 0..od.d {
        for oy in 0..od.h {
            for ox in 0..od.w {
                let out_base = od.index(ox, oy, oz) * cout;
                let grow = &grad[out_base..out_base + cout];
                for co in 0..cout {
                    db[co] += grow[co];
                }
                for kz in 0..k {
                    let iz = (oz * stride + kz) as i64 - pad as i64;
                    if iz < 0 || iz >= dims.d as i64 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= dims.h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= dims.w as i64 {
                                continue;
                            }
                            let in_base =
                                dims.index(ix as usize, iy as usize, iz as usize) * cin;
                            let woff = ((kz * k + ky) * k + kx) * cin;
                            for co in 0..cout {
                                let g = grow[co];
                                if g == 0.0 {
                                    continue;
                                }
                                let wrow = &w[co * wcols + woff..co * wcols + woff + cin];
                                let dwrow =
                                    &mut dw[co * wcols + woff..co * wcols + woff + cin];
                                for ci in 0..cin {
                                    dx[in_base + ci] += g * wrow[ci];
                                    dwrow[ci] += g * x[in_base + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 3D convolution over an (s, cin) feature map with spatial dims `dims`.
/// Weight (cout, k^3*cin), bias (1, cout). Returns the output id and its
/// spatial dims.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    tape: &mut Tape,
    x: Vid,
    w: Vid,
    b: Vid,
    dims: Dims3,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vid, Dims3) {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let bv = tape.value(b);
    assert_eq!(xv.rows, dims.count(), "conv3d: rows != voxel count");
    let cin = xv.cols;
    let cout = wv.rows;
    assert_eq!(wv.cols, k * k * k * cin, "conv3d: weight cols mismatch");
    assert_eq!((bv.rows, bv.cols), (1, cout), "conv3d: bias shape");
    let od = conv3d_out_dims(dims, k, stride, pad);
    let data = conv3d_value(&xv.data, dims, &wv.data, &bv.data, cin, cout, k, stride, pad);
    let out = Tensor::new(od.count(), cout, data);
    let id = tape.push(
        out,
        vec![x, w, b],
        Some(Box::new(move |ctx| {
            let (dx, dw, db) = conv3d_grads(
                &ctx.inputs[0].data,
                dims,
                &ctx.inputs[1].data,
                cin,
                cout,
                k,
                stride,
                pad,
                &ctx.grad.data,
            );
            vec![
                Some(Tensor::new(dims.count(), cin, dx)),
                Some(Tensor::new(cout, k * k * k * cin, dw)),
                Some(Tensor::new(1, cout, db)),
            ]
        })),
    );
    (id, od)
}

// ---------------------------------------------------------------------------
// conv_transpose3d (kernel = stride, so each output voxel has one source)
// ---------------------------------------------------------------------------

fn conv_transpose3d_value(
    x: &[f64],
    dims: Dims3,
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let od = Dims3::new(dims.w * k, dims.h * k, dims.d * k);
    let wcols = k * k * k * cout;
    let mut out = vec![0.0; od.count() * cout];
    for chunk in out.chunks_exact_mut(cout) {
        chunk.copy_from_slice(b);
    }
    for iz in 0..dims.d {
        for iy in 0..dims.h {
            for ix in 0..dims.w {
                let in_base = dims.index(ix, iy, iz) * cin;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let out_base =
                                od.index(ix * k + kx, iy * k + ky, iz * k + kz) * cout;
                            let woff = ((kz * k + ky) * k + kx) * cout;
                            for ci in 0..cin {
                                let xv = x[in_base + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &w[ci * wcols + woff..ci * wcols + woff + cout];
                                let orow = &mut out[out_base..out_base + cout];
                                for co in 0..cout {
                                    orow[co] += xv * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose3d_grads(
    x: &[f64],
    dims: Dims3,
    w: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let od = Dims3::new(dims.w * k, dims.h * k, dims.d * k);
    let wcols = k * k * k * cout;
    let mut dx = vec![0.0; dims.count() * cin];
    let mut dw = vec![0.0; cin * wcols];
    let mut db = vec![0.0; cout];
    for chunk in grad.chunks_exact(cout) {
        for co in 0..cout {
            db[co] += chunk[co];
        }
    }
    for iz in 0..dims.d {
        for iy in 0..dims.h {
            for ix in 0..dims.w {
                let in_base = dims.index(ix, iy, iz) * cin;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let out_base =
                                od.index(ix * k + kx, iy * k + ky, iz * k + kz) * cout;
                            let grow = &grad[out_base..out_base + cout];
                            let woff = ((kz * k + ky) * k + kx) * cout;
                            for ci in 0..cin {
                                let wrow = &w[ci * wcols + woff..ci * wcols + woff + cout];
                                let dwrow =
                                    &mut dw[ci * wcols + woff..ci * wcols + woff + cout];
                                let xv = x[in_base + ci];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += grow[co] * wrow[co];
                                    dwrow[co] += grow[co] * xv;
                                }
                                dx[in_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed 3D convolution with kernel size = stride = k (upsamples each
/// axis by k with non-overlapping blocks). Weight (cin, k^3*cout), bias
/// (1, cout).
pub fn conv_transpose3d(
    tape: &mut Tape,
    x: Vid,
    w: Vid,
    b: Vid,
    dims: Dims3,
    k: usize,
) -> (Vid, Dims3) {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let bv = tape.value(b);
    assert_eq!(xv.rows, dims.count(), "conv_transpose3d: rows != voxel count");
    let cin = xv.cols;
    assert_eq!(wv.rows, cin, "conv_transpose3d: weight rows mismatch");
    let cout = wv.cols / (k * k * k);
    assert_eq!(wv.cols, k * k * k * cout, "conv_transpose3d: weight cols mismatch");
    assert_eq!((bv.rows, bv.cols), (1, cout), "conv_transpose3d: bias shape");
    let od = Dims3::new(dims.w * k, dims.h * k, dims.d * k);
    let data = conv_transpose3d_value(&xv.data, dims, &wv.data, &bv.data, cin, cout, k);
    let out = Tensor::new(od.count(), cout, data);
    let id = tape.push(
        out,
        vec![x, w, b],
        Some(Box::new(move |ctx| {
            let (dx, dw, db) = conv_transpose3d_grads(
                &ctx.inputs[0].data,
                dims,
                &ctx.inputs[1].data,
                cin,
                cout,
                k,
                &ctx.grad.data,
            );
            vec![
                Some(Tensor::new(dims.count(), cin, dx)),
                Some(Tensor::new(cin, k * k * k * cout, dw)),
                Some(Tensor::new(1, cout, db)),
            ]
        })),
    );
    (id, od)
}

// ---------------------------------------------------------------------------
// instance norm (per channel over all rows of the patch)
// ---------------------------------------------------------------------------

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (s, c) = (x.rows, x.cols);
    let mut mean = vec![0.0; c];
    for r in 0..s {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= s as f64;
    }
    let mut var = vec![0.0; c];
    for r in 0..s {
        for (j, v) in x.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= s as f64;
    }
    (mean, var)
}

/// Affine instance normalization: each channel is standardized over the
/// whole patch (population variance), then scaled by gamma and shifted by
/// beta. gamma and beta are (1, C).
pub fn instance_norm(tape: &mut Tape, x: Vid, gamma: Vid, beta: Vid) -> Vid {
    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let bv = tape.value(beta);
    let (s, c) = (xv.rows, xv.cols);
    assert_eq!((gv.rows, gv.cols), (1, c), "instance_norm: gamma shape");
    assert_eq!((bv.rows, bv.cols), (1, c), "instance_norm: beta shape");
    let (mean, var) = column_stats(xv);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + INSTANCE_NORM_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(s, c);
    for r in 0..s {
        for j in 0..c {
            let xh = (xv.at(r, j) - mean[j]) * inv_std[j];
            out.data[r * c + j] = gv.data[j] * xh + bv.data[j];
        }
    }
    tape.push(
        out,
        vec![x, gamma, beta],
        Some(Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let gamma = ctx.inputs[1];
            let g = ctx.grad;
            let (s, c) = (x.rows, x.cols);
            let (mean, var) = column_stats(x);
            let inv_std: Vec<f64> =
                var.iter().map(|v| 1.0 / (v + INSTANCE_NORM_EPS).sqrt()).collect();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut g_mean = vec![0.0; c];
            let mut gx_mean = vec![0.0; c];
            for r in 0..s {
                for j in 0..c {
                    let xh = (x.at(r, j) - mean[j]) * inv_std[j];
                    let gr = g.at(r, j);
                    dgamma[j] += gr * xh;
                    dbeta[j] += gr;
                    g_mean[j] += gr;
                    gx_mean[j] += gr * xh;
                }
            }
            for j in 0..c {
                g_mean[j] /= s as f64;
                gx_mean[j] /= s as f64;
            }
            let mut dx = Tensor::zeros(s, c);
            for r in 0..s {
                for j in 0..c {
                    let xh = (x.at(r, j) - mean[j]) * inv_std[j];
                    dx.data[r * c + j] = gamma.data[j]
                        * inv_std[j]
                        * (g.at(r, j) - g_mean[j] - xh * gx_mean[j]);
                }
            }
            vec![
                Some(dx),
                Some(Tensor::new(1, c, dgamma)),
                Some(Tensor::new(1, c, dbeta)),
            ]
        })),
    )
}

// ---------------------------------------------------------------------------
// RMS norm (per row over channels)
// ---------------------------------------------------------------------------

/// Root-mean-square normalization per row with a learnable (1, C) scale.
pub fn rms_norm(tape: &mut Tape, x: Vid, gamma: Vid) -> Vid {
    let xv = tape.value(x);
    let gv = tape.value(gamma);
    let (s, c) = (xv.rows, xv.cols);
    assert_eq!((gv.rows, gv.cols), (1, c), "rms_norm: gamma shape");
    let mut out = Tensor::zeros(s, c);
    for r in 0..s {
        let row = xv.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
        for j in 0..c {
            out.data[r * c + j] = gv.data[j] * row[j] * inv;
        }
    }
    tape.push(
        out,
        vec![x, gamma],
        Some(Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let gamma = ctx.inputs[1];
            let g = ctx.grad;
            let (s, c) = (x.rows, x.cols);
            let mut dx = Tensor::zeros(s, c);
            let mut dgamma = vec![0.0; c];
            for r in 0..s {
                let row = x.row(r);
                let grow = g.row(r);
                let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                let inv3 = inv * inv * inv;
                let mut dot = 0.0;
                for j in 0..c {
                    dot += grow[j] * gamma.data[j] * row[j];
                    dgamma[j] += grow[j] * row[j] * inv;
                }
                for j in 0..c {
                    dx.data[r * c + j] =
                        gamma.data[j] * grow[j] * inv - row[j] * inv3 * dot / c as f64;
                }
            }
            vec![Some(dx), Some(Tensor::new(1, c, dgamma))]
        })),
    )
}

// ---------------------------------------------------------------------------
// depthwise causal 1D convolution along the sequence axis
// ---------------------------------------------------------------------------

/// Per-channel causal convolution: y[t][c] = b[c] + sum_j w[c][j] *
/// x[t-(k-1)+j][c], with x read as 0 before the sequence start. w is (C, k),
/// b is (1, C).
pub fn causal_conv1d(tape: &mut Tape, x: Vid, w: Vid, b: Vid) -> Vid {
    let xv = tape.value(x);
    let wv = tape.value(w);
    let bv = tape.value(b);
    let (s, c) = (xv.rows, xv.cols);
    let k = wv.cols;
    assert_eq!(wv.rows, c, "causal_conv1d: weight rows mismatch");
    assert_eq!((bv.rows, bv.cols), (1, c), "causal_conv1d: bias shape");
    let mut out = Tensor::zeros(s, c);
    for t in 0..s {
        for j in 0..c {
            let mut acc = bv.data[j];
            for i in 0..k {
                let u = t as i64 - (k as i64 - 1) + i as i64;
                if u >= 0 {
                    acc += wv.at(j, i) * xv.at(u as usize, j);
                }
            }
            out.data[t * c + j] = acc;
        }
    }
    tape.push(
        out,
        vec![x, w, b],
        Some(Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let w = ctx.inputs[1];
            let g = ctx.grad;
            let (s, c) = (x.rows, x.cols);
            let k = w.cols;
            let mut dx = Tensor::zeros(s, c);
            let mut dw = Tensor::zeros(c, k);
            let mut db = Tensor::zeros(1, c);
            for t in 0..s {
                for j in 0..c {
                    let gr = g.at(t, j);
                    db.data[j] += gr;
                    for i in 0..k {
                        let u = t as i64 - (k as i64 - 1) + i as i64;
                        if u >= 0 {
                            dx.data[u as usize * c + j] += gr * w.at(j, i);
                            dw.data[j * k + i] += gr * x.at(u as usize, j);
                        }
                    }
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        })),
    )
}

// ---------------------------------------------------------------------------
// linear interpolation of a parameter vector onto s sample points
// ---------------------------------------------------------------------------

/// Endpoint-aligned sample position of output index t among s points over
/// the index range [0, n-1].
fn interp_pos(t: usize, s: usize, n: usize) -> f64 {
    if s <= 1 {
        0.0
    } else {
        t as f64 * (n as f64 - 1.0) / (s as f64 - 1.0)
    }
}

/// Interpolate a (1, n) row vector onto s endpoint-aligned sample points,
/// producing an (s, 1) column.
pub fn interp_to_len(tape: &mut Tape, g: Vid, s: usize) -> Vid {
    let gv = tape.value(g);
    assert_eq!(gv.rows, 1, "interp_to_len: expects a row vector");
    let n = gv.cols;
    assert!(n >= 1);
    let mut out = Tensor::zeros(s, 1);
    for t in 0..s {
        let u = interp_pos(t, s, n);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = u - i0 as f64;
        out.data[t] = (1.0 - f) * gv.data[i0] + f * gv.data[i1];
    }
    tape.push(
        out,
        vec![g],
        Some(Box::new(move |ctx| {
            let n = ctx.inputs[0].cols;
            let mut dg = Tensor::zeros(1, n);
            for t in 0..s {
                let u = interp_pos(t, s, n);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                let f = u - i0 as f64;
                let gr = ctx.grad.data[t];
                dg.data[i0] += (1.0 - f) * gr;
                dg.data[i1] += f * gr;
            }
            vec![Some(dg)]
        })),
    )
}

// ---------------------------------------------------------------------------
// row gather (permutation); gradient scatters through the permutation
// ---------------------------------------------------------------------------

/// out[i] = x[perm[i]]. `perm` must be a bijection on [0, rows); the
/// gradient is scattered back through the same mapping.
pub fn gather_rows(tape: &mut Tape, x: Vid, perm: &[usize]) -> Vid {
    let xv = tape.value(x);
    let (s, c) = (xv.rows, xv.cols);
    assert_eq!(perm.len(), s, "gather_rows: perm length mismatch");
    let mut out = Tensor::zeros(s, c);
    for (i, &src) in perm.iter().enumerate() {
        out.data[i * c..(i + 1) * c].copy_from_slice(xv.row(src));
    }
    let perm: Vec<usize> = perm.to_vec();
    tape.push(
        out,
        vec![x],
        Some(Box::new(move |ctx| {
            let g = ctx.grad;
            let (s, c) = (g.rows, g.cols);
            let mut dx = Tensor::zeros(s, c);
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..c {
                    dx.data[src * c + j] += g.data[i * c + j];
                }
            }
            vec![Some(dx)]
        })),
    )
}

// ---------------------------------------------------------------------------
// softmax + losses
// ---------------------------------------------------------------------------

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(tape: &mut Tape, x: Vid) -> Vid {
    let xv = tape.value(x);
    let (s, c) = (xv.rows, xv.cols);
    let mut out = Tensor::zeros(s, c);
    for r in 0..s {
        let (lo, hi) = (r * c, (r + 1) * c);
        softmax_row(xv.row(r), &mut out.data[lo..hi]);
    }
    tape.push(
        out,
        vec![x],
        Some(Box::new(move |ctx| {
            let p = ctx.output;
            let g = ctx.grad;
            let (s, c) = (p.rows, p.cols);
            let mut dx = Tensor::zeros(s, c);
            for r in 0..s {
                let prow = p.row(r);
                let grow = g.row(r);
                let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dx.data[r * c + j] = prow[j] * (grow[j] - dot);
                }
            }
            vec![Some(dx)]
        })),
    )
}

/// Mean cross-entropy over rows, fused with a stable log-softmax.
/// `targets[t]` is the class index of row t.
pub fn cross_entropy_mean(tape: &mut Tape, logits: Vid, targets: &[usize]) -> Vid {
    let xv = tape.value(logits);
    let (s, c) = (xv.rows, xv.cols);
    assert_eq!(targets.len(), s, "cross_entropy_mean: target length mismatch");
    assert!(targets.iter().all(|&t| t < c), "cross_entropy_mean: target out of range");
    let mut total = 0.0;
    for r in 0..s {
        let row = xv.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
    }
    let targets: Vec<usize> = targets.to_vec();
    tape.push(
        Tensor::scalar(total / s as f64),
        vec![logits],
        Some(Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let (s, c) = (x.rows, x.cols);
            let gscale = ctx.grad.item() / s as f64;
            let mut dx = Tensor::zeros(s, c);
            let mut prow = vec![0.0; c];
            for r in 0..s {
                softmax_row(x.row(r), &mut prow);
                for j in 0..c {
                    let delta = if targets[r] == j { 1.0 } else { 0.0 };
                    dx.data[r * c + j] = gscale * (prow[j] - delta);
                }
            }
            vec![Some(dx)]
        })),
    )
}

/// Soft Dice loss on class probabilities: per class c,
/// d_c = (2*intersection + eps) / (sum_pred + sum_gt + eps), loss = 1 -
/// mean_c d_c over all n_classes (background included). A class absent from
/// both prediction mass and ground truth contributes d_c = 1.
pub fn dice_loss(tape: &mut Tape, probs: Vid, targets: &[usize], smooth: f64) -> Vid {
    let pv = tape.value(probs);
    let (s, c) = (pv.rows, pv.cols);
    assert_eq!(targets.len(), s, "dice_loss: target length mismatch");
    assert!(targets.iter().all(|&t| t < c), "dice_loss: target out of range");
    let stats = |p: &Tensor| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut inter = vec![0.0; c];
        let mut psum = vec![0.0; c];
        let mut gsum = vec![0.0; c];
        for r in 0..s {
            let row = p.row(r);
            for j in 0..c {
                psum[j] += row[j];
            }
            inter[targets[r]] += row[targets[r]];
            gsum[targets[r]] += 1.0;
        }
        (inter, psum, gsum)
    };
    let (inter, psum, gsum) = stats(pv);
    let mut mean_dice = 0.0;
    for j in 0..c {
        mean_dice += (2.0 * inter[j] + smooth) / (psum[j] + gsum[j] + smooth);
    }
    mean_dice /= c as f64;
    let targets: Vec<usize> = targets.to_vec();
    tape.push(
        Tensor::scalar(1.0 - mean_dice),
        vec![probs],
        Some(Box::new(move |ctx| {
            let p = ctx.inputs[0];
            let (s, c) = (p.rows, p.cols);
            let mut inter = vec![0.0; c];
            let mut psum = vec![0.0; c];
            let mut gsum = vec![0.0; c];
            for r in 0..s {
                let row = p.row(r);
                for j in 0..c {
                    psum[j] += row[j];
                }
                inter[targets[r]] += row[targets[r]];
                gsum[targets[r]] += 1.0;
            }
            let gscale = ctx.grad.item() / c as f64;
            let mut dx = Tensor::zeros(s, c);
            for r in 0..s {
                for j in 0..c {
                    let denom = psum[j] + gsum[j] + smooth;
                    let gt = if targets[r] == j { 1.0 } else { 0.0 };
                    // d(d_j)/dp[r][j] = (2*gt*denom - (2*inter+smooth)) / denom^2
                    let dd = (2.0 * gt * denom - (2.0 * inter[j] + smooth)) / (denom * denom);
                    dx.data[r * c + j] = -gscale * dd;
                }
            }
            vec![Some(dx)]
        })),
    )
}

/// SiLU activation as a tape op (convenience wrapper).
pub fn silu(tape: &mut Tape, x: Vid) -> Vid {
    tape.unary(x, Unary::Silu)
}

/// Mean of several same-shape tensors (deterministic fixed-order reduction).
pub fn mean_of(tape: &mut Tape, ids: &[Vid]) -> Vid {
    assert!(!ids.is_empty(), "mean_of: empty id list");
    let mut acc = ids[0];
    for &id in &ids[1..] {
        acc = tape.add(acc, id);
    }
    tape.scale(acc, 1.0 / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, fd_grad, max_rel_err};
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // -- conv3d ------------------------------------------------------------

    #[test]
    fn conv3d_center_tap_is_identity() {
        let dims = Dims3::new(3, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, dims.count());
        let mut w = vec![0.0; 27];
        w[(1 * 3 + 1) * 3 + 1] = 1.0; // center tap, cin = 1
        let out = conv3d_value(&x, dims, &w, &[0.0], 1, 1, 3, 1, 1);
        assert_eq!(out, x);
    }

    #[test]
    fn conv3d_stride2_matches_subsampled_stride1() {
        let dims = Dims3::new(5, 5, 5);
        let (cin, cout) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, dims.count() * cin);
        let w = rand_vec(&mut rng, cout * 27 * cin);
        let b = rand_vec(&mut rng, cout);
        let full = conv3d_value(&x, dims, &w, &b, cin, cout, 3, 1, 1);
        let half = conv3d_value(&x, dims, &w, &b, cin, cout, 3, 2, 1);
        let od = conv3d_out_dims(dims, 3, 2, 1);
        assert_eq!(od, Dims3::new(3, 3, 3));
        for oz in 0..od.d {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    for co in 0..cout {
                        let a = half[od.index(ox, oy, oz) * cout + co];
                        let bb = full[dims.index(2 * ox, 2 * oy, 2 * oz) * cout + co];
                        assert_eq!(a, bb);
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_1x1_kernel_is_per_voxel_linear() {
        let dims = Dims3::new(2, 2, 1);
        let (cin, cout) = (3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, dims.count() * cin);
        let w = rand_vec(&mut rng, cout * cin);
        let b = rand_vec(&mut rng, cout);
        let out = conv3d_value(&x, dims, &w, &b, cin, cout, 1, 1, 0);
        for v in 0..dims.count() {
            for co in 0..cout {
                let mut want = b[co];
                for ci in 0..cin {
                    want += x[v * cin + ci] * w[co * cin + ci];
                }
                assert!((out[v * cout + co] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv3d_gradients_match_fd() {
        let dims = Dims3::new(3, 2, 2);
        let (cin, cout, k) = (2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_vec(&mut rng, dims.count() * cin);
        let w0 = rand_vec(&mut rng, cout * 27 * cin);
        let b0 = rand_vec(&mut rng, cout);
        let tgt = rand_vec(&mut rng, dims.count() * cout);
        // scalar loss = <conv(x), tgt>
        let loss = |xd: &[f64], wd: &[f64], bd: &[f64]| -> f64 {
            let out = conv3d_value(xd, dims, wd, bd, cin, cout, k, 1, 1);
            out.iter().zip(&tgt).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(dims.count(), cin, x0.clone()));
        let w = tape.leaf(Tensor::new(cout, 27 * cin, w0.clone()));
        let b = tape.leaf(Tensor::new(1, cout, b0.clone()));
        let (y, od) = conv3d(&mut tape, x, w, b, dims, k, 1, 1);
        assert_eq!(od, dims);
        let t = tape.leaf(Tensor::new(dims.count(), cout, tgt.clone()));
        let prod = tape.mul(y, t);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        let ex = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, |xd| {
            loss(xd, &w0, &b0)
        });
        let ew = check_input(&w0, 1e-5, &grads[w].as_ref().unwrap().data, |wd| {
            loss(&x0, wd, &b0)
        });
        let eb = check_input(&b0, 1e-5, &grads[b].as_ref().unwrap().data, |bd| {
            loss(&x0, &w0, bd)
        });
        assert!(ex < 1e-6, "dx rel err {ex}");
        assert!(ew < 1e-6, "dw rel err {ew}");
        assert!(eb < 1e-6, "db rel err {eb}");
    }

    // -- conv_transpose3d --------------------------------------------------

    #[test]
    fn conv_transpose_impulse_places_weight_block() {
        let dims = Dims3::new(2, 2, 2);
        let (cin, cout, k) = (1, 2, 2);
        let mut x = vec![0.0; dims.count()];
        x[dims.index(1, 0, 1)] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_vec(&mut rng, cin * 8 * cout);
        let out = conv_transpose3d_value(&x, dims, &w, &[0.0, 0.0], cin, cout, k);
        let od = Dims3::new(4, 4, 4);
        for oz in 0..4 {
            for oy in 0..4 {
                for ox in 0..4 {
                    for co in 0..cout {
                        let got = out[od.index(ox, oy, oz) * cout + co];
                        let inside = (2..4).contains(&ox)
                            && (0..2).contains(&oy)
                            && (2..4).contains(&oz);
                        if inside {
                            let (kx, ky, kz) = (ox - 2, oy, oz - 2);
                            let want = w[((kz * 2 + ky) * 2 + kx) * cout + co];
                            assert_eq!(got, want);
                        } else {
                            assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_gradients_match_fd() {
        let dims = Dims3::new(2, 2, 1);
        let (cin, cout, k) = (2, 2, 2);
        let od = Dims3::new(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_vec(&mut rng, dims.count() * cin);
        let w0 = rand_vec(&mut rng, cin * 8 * cout);
        let b0 = rand_vec(&mut rng, cout);
        let tgt = rand_vec(&mut rng, od.count() * cout);
        let loss = |xd: &[f64], wd: &[f64], bd: &[f64]| -> f64 {
            let out = conv_transpose3d_value(xd, dims, wd, bd, cin, cout, k);
            out.iter().zip(&tgt).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(dims.count(), cin, x0.clone()));
        let w = tape.leaf(Tensor::new(cin, 8 * cout, w0.clone()));
        let b = tape.leaf(Tensor::new(1, cout, b0.clone()));
        let (y, oud) = conv_transpose3d(&mut tape, x, w, b, dims, k);
        assert_eq!(oud, od);
        let t = tape.leaf(Tensor::new(od.count(), cout, tgt.clone()));
        let prod = tape.mul(y, t);
        let root = tape.sum_all(prod);
        let grads = tape.backward(root);
        let ex = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, |xd| {
            loss(xd, &w0, &b0)
        });
        let ew = check_input(&w0, 1e-5, &grads[w].as_ref().unwrap().data, |wd| {
            loss(&x0, wd, &b0)
        });
        let eb = check_input(&b0, 1e-5, &grads[b].as_ref().unwrap().data, |bd| {
            loss(&x0, &w0, bd)
        });
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }

    // -- instance norm -----------------------------------------------------

    #[test]
    fn instance_norm_standardizes_channels() {
        let (s, c) = (40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_vec(&mut rng, s * c);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0));
        let gamma = tape.leaf(Tensor::full(1, c, 1.0));
        let beta = tape.leaf(Tensor::zeros(1, c));
        let y = instance_norm(&mut tape, x, gamma, beta);
        let yv = tape.value(y);
        for j in 0..c {
            let col: Vec<f64> = (0..s).map(|r| yv.at(r, j)).collect();
            let mean = col.iter().sum::<f64>() / s as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
            assert!(mean.abs() < 1e-10, "channel {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {j} var {var}");
        }
    }

    #[test]
    fn instance_norm_gradients_match_fd() {
        let (s, c) = (6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_vec(&mut rng, s * c);
        let g0 = rand_vec(&mut rng, c);
        let b0 = rand_vec(&mut rng, c);
        let tgt = rand_vec(&mut rng, s * c);
        let loss = |xd: &[f64], gd: &[f64], bd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let g = tape.leaf(Tensor::new(1, c, gd.to_vec()));
            let b = tape.leaf(Tensor::new(1, c, bd.to_vec()));
            let y = instance_norm(&mut tape, x, g, b);
            let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
            let p = tape.mul(y, t);
            let r = tape.sum_all(p);
            tape.value(r).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let g = tape.leaf(Tensor::new(1, c, g0.clone()));
        let b = tape.leaf(Tensor::new(1, c, b0.clone()));
        let y = instance_norm(&mut tape, x, g, b);
        let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
        let p = tape.mul(y, t);
        let r = tape.sum_all(p);
        let grads = tape.backward(r);
        let ex = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, |v| {
            loss(v, &g0, &b0)
        });
        let eg = check_input(&g0, 1e-5, &grads[g].as_ref().unwrap().data, |v| {
            loss(&x0, v, &b0)
        });
        let eb = check_input(&b0, 1e-5, &grads[b].as_ref().unwrap().data, |v| {
            loss(&x0, &g0, v)
        });
        assert!(ex < 1e-6 && eg < 1e-6 && eb < 1e-6, "{ex} {eg} {eb}");
    }

    // -- rms norm ----------------------------------------------------------

    #[test]
    fn rms_norm_matches_direct_formula() {
        let (s, c) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_vec(&mut rng, s * c);
        let g0 = rand_vec(&mut rng, c);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let g = tape.leaf(Tensor::new(1, c, g0.clone()));
        let y = rms_norm(&mut tape, x, g);
        let yv = tape.value(y);
        for r in 0..s {
            let row = &x0[r * c..(r + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for j in 0..c {
                assert!((yv.at(r, j) - g0[j] * row[j] * inv).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rms_norm_gradients_match_fd() {
        let (s, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = rand_vec(&mut rng, s * c);
        let g0 = rand_vec(&mut rng, c);
        let tgt = rand_vec(&mut rng, s * c);
        let loss = |xd: &[f64], gd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let g = tape.leaf(Tensor::new(1, c, gd.to_vec()));
            let y = rms_norm(&mut tape, x, g);
            let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
            let p = tape.mul(y, t);
            let r = tape.sum_all(p);
            tape.value(r).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let g = tape.leaf(Tensor::new(1, c, g0.clone()));
        let y = rms_norm(&mut tape, x, g);
        let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
        let p = tape.mul(y, t);
        let r = tape.sum_all(p);
        let grads = tape.backward(r);
        let ex =
            check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, |v| loss(v, &g0));
        let eg =
            check_input(&g0, 1e-5, &grads[g].as_ref().unwrap().data, |v| loss(&x0, v));
        assert!(ex < 1e-6 && eg < 1e-6, "{ex} {eg}");
    }

    // -- causal conv1d -----------------------------------------------------

    #[test]
    fn causal_conv1d_two_tap_by_hand() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(2, 1, vec![3.0, 5.0]));
        let w = tape.leaf(Tensor::new(1, 2, vec![10.0, 100.0]));
        let b = tape.leaf(Tensor::new(1, 1, vec![0.5]));
        let y = causal_conv1d(&mut tape, x, w, b);
        let yv = tape.value(y);
        // y0 = w1*x0 + b, y1 = w0*x0 + w1*x1 + b
        assert_eq!(yv.data, vec![300.5, 530.5]);
    }

    #[test]
    fn causal_conv1d_is_causal() {
        let (s, c, k) = (7, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_vec(&mut rng, s * c);
        let w0 = rand_vec(&mut rng, c * k);
        let b0 = rand_vec(&mut rng, c);
        let run = |xd: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let w = tape.leaf(Tensor::new(c, k, w0.clone()));
            let b = tape.leaf(Tensor::new(1, c, b0.clone()));
            let y = causal_conv1d(&mut tape, x, w, b);
            tape.value(y).data.clone()
        };
        let base = run(&x0);
        let t_perturb = 4;
        let mut xp = x0.clone();
        for r in t_perturb..s {
            for j in 0..c {
                xp[r * c + j] += 0.37;
            }
        }
        let pert = run(&xp);
        for r in 0..t_perturb {
            for j in 0..c {
                assert_eq!(base[r * c + j], pert[r * c + j], "leaked at t={r}");
            }
        }
    }

    #[test]
    fn causal_conv1d_gradients_match_fd() {
        let (s, c, k) = (5, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = rand_vec(&mut rng, s * c);
        let w0 = rand_vec(&mut rng, c * k);
        let b0 = rand_vec(&mut rng, c);
        let tgt = rand_vec(&mut rng, s * c);
        let loss = |xd: &[f64], wd: &[f64], bd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let w = tape.leaf(Tensor::new(c, k, wd.to_vec()));
            let b = tape.leaf(Tensor::new(1, c, bd.to_vec()));
            let y = causal_conv1d(&mut tape, x, w, b);
            let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
            let p = tape.mul(y, t);
            let r = tape.sum_all(p);
            tape.value(r).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let w = tape.leaf(Tensor::new(c, k, w0.clone()));
        let b = tape.leaf(Tensor::new(1, c, b0.clone()));
        let y = causal_conv1d(&mut tape, x, w, b);
        let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
        let p = tape.mul(y, t);
        let r = tape.sum_all(p);
        let grads = tape.backward(r);
        let ex = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, |v| {
            loss(v, &w0, &b0)
        });
        let ew = check_input(&w0, 1e-5, &grads[w].as_ref().unwrap().data, |v| {
            loss(&x0, v, &b0)
        });
        let eb = check_input(&b0, 1e-5, &grads[b].as_ref().unwrap().data, |v| {
            loss(&x0, &w0, v)
        });
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }

    // -- interpolation -----------------------------------------------------

    #[test]
    fn interp_same_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g0 = rand_vec(&mut rng, 6);
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::new(1, 6, g0.clone()));
        let y = interp_to_len(&mut tape, g, 6);
        assert_eq!(tape.value(y).data, g0);
    }

    #[test]
    fn interp_two_to_three_hits_midpoint() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::new(1, 2, vec![0.0, 1.0]));
        let y = interp_to_len(&mut tape, g, 3);
        assert_eq!(tape.value(y).data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn interp_gradients_match_fd() {
        let (n, s) = (5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g0 = rand_vec(&mut rng, n);
        let tgt = rand_vec(&mut rng, s);
        let loss = |gd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let g = tape.leaf(Tensor::new(1, n, gd.to_vec()));
            let y = interp_to_len(&mut tape, g, s);
            let t = tape.leaf(Tensor::new(s, 1, tgt.clone()));
            let p = tape.mul(y, t);
            let r = tape.sum_all(p);
            tape.value(r).item()
        };
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::new(1, n, g0.clone()));
        let y = interp_to_len(&mut tape, g, s);
        let t = tape.leaf(Tensor::new(s, 1, tgt.clone()));
        let p = tape.mul(y, t);
        let r = tape.sum_all(p);
        let grads = tape.backward(r);
        let e = check_input(&g0, 1e-5, &grads[g].as_ref().unwrap().data, loss);
        assert!(e < 1e-6, "{e}");
    }

    // -- gather ------------------------------------------------------------

    #[test]
    fn gather_then_inverse_restores_rows() {
        let (s, c) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = rand_vec(&mut rng, s * c);
        let perm = vec![3, 0, 4, 1, 2];
        let mut inv = vec![0; s];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let y = gather_rows(&mut tape, x, &perm);
        let z = gather_rows(&mut tape, y, &inv);
        assert_eq!(tape.value(z).data, x0);
    }

    #[test]
    fn gather_gradient_is_scatter() {
        let (s, c) = (4, 2);
        let perm = vec![2, 0, 3, 1];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(s, c));
        let y = gather_rows(&mut tape, x, &perm);
        let seed = Tensor::new(s, c, (0..s * c).map(|i| i as f64).collect());
        let grads = tape.backward_seeded(y, seed);
        let dx = grads[x].as_ref().unwrap();
        // row r of dx equals seed row at position inv[r]
        let want = vec![2.0, 3.0, 6.0, 7.0, 0.0, 1.0, 4.0, 5.0];
        assert_eq!(dx.data, want);
    }

    // -- softmax + losses --------------------------------------------------

    #[test]
    fn softmax_rows_sum_to_one() {
        let (s, c) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x0 = rand_vec(&mut rng, s * c);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0));
        let p = softmax_rows(&mut tape, x);
        let pv = tape.value(p);
        for r in 0..s {
            let sum: f64 = pv.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(pv.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_invariant_to_row_shift() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(Tensor::new(1, 3, vec![101.0, 102.0, 103.0]));
        let pa = softmax_rows(&mut tape, a);
        let pb = softmax_rows(&mut tape, b);
        for (x, y) in tape.value(pa).data.clone().iter().zip(&tape.value(pb).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradients_match_fd() {
        let (s, c) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = rand_vec(&mut rng, s * c);
        let tgt = rand_vec(&mut rng, s * c);
        let loss = |xd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let p = softmax_rows(&mut tape, x);
            let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
            let m = tape.mul(p, t);
            let r = tape.sum_all(m);
            tape.value(r).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let p = softmax_rows(&mut tape, x);
        let t = tape.leaf(Tensor::new(s, c, tgt.clone()));
        let m = tape.mul(p, t);
        let r = tape.sum_all(m);
        let grads = tape.backward(r);
        let e = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, loss);
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let (s, c) = (6, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(s, c));
        let targets = vec![0, 1, 2, 3, 0, 1];
        let l = cross_entropy_mean(&mut tape, x, &targets);
        assert!((tape.value(l).item() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_unfused_oracle() {
        let (s, c) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x0 = rand_vec(&mut rng, s * c);
        let targets = vec![0, 2, 1, 1, 0];
        // oracle: explicit softmax then -mean log p[target]
        let mut want = 0.0;
        for r in 0..s {
            let mut p = vec![0.0; c];
            softmax_row(&x0[r * c..(r + 1) * c], &mut p);
            want -= p[targets[r]].ln();
        }
        want /= s as f64;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0));
        let l = cross_entropy_mean(&mut tape, x, &targets);
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradients_match_fd() {
        let (s, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = rand_vec(&mut rng, s * c);
        let targets = vec![2, 0, 1, 2];
        let loss = |xd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let l = cross_entropy_mean(&mut tape, x, &targets);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let l = cross_entropy_mean(&mut tape, x, &targets);
        let grads = tape.backward(l);
        let e = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, loss);
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn dice_loss_zero_for_exact_one_hot() {
        let (s, c) = (6, 3);
        let targets = vec![0, 1, 2, 2, 1, 0];
        let mut probs = vec![0.0; s * c];
        for (r, &t) in targets.iter().enumerate() {
            probs[r * c + t] = 1.0;
        }
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(s, c, probs));
        let l = dice_loss(&mut tape, p, &targets, 1e-5);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn dice_loss_hand_example() {
        // two voxels, two classes; prediction puts 0.8 on the right class
        let targets = vec![0, 1];
        let probs = vec![0.8, 0.2, 0.2, 0.8];
        let eps = 1e-5;
        // per class: inter = 0.8, psum = 1.0, gsum = 1.0
        let want = 1.0 - (2.0 * 0.8 + eps) / (2.0 + eps);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(2, 2, probs));
        let l = dice_loss(&mut tape, p, &targets, eps);
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_absent_class_counts_as_one() {
        // class 2 never predicted nor present: d_2 = eps/eps = 1
        let targets = vec![0, 1];
        let probs = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(2, 3, probs));
        let l = dice_loss(&mut tape, p, &targets, 1e-5);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn dice_loss_gradients_match_fd_through_softmax() {
        let (s, c) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x0 = rand_vec(&mut rng, s * c);
        let targets = vec![0, 1, 2, 1, 0];
        let loss = |xd: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(s, c, xd.to_vec()));
            let p = softmax_rows(&mut tape, x);
            let l = dice_loss(&mut tape, p, &targets, 1e-5);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(s, c, x0.clone()));
        let p = softmax_rows(&mut tape, x);
        let l = dice_loss(&mut tape, p, &targets, 1e-5);
        let grads = tape.backward(l);
        let e = check_input(&x0, 1e-5, &grads[x].as_ref().unwrap().data, loss);
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn mean_of_averages() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::new(1, 2, vec![3.0, 6.0]));
        let m = mean_of(&mut tape, &[a, b]);
        assert_eq!(tape.value(m).data, vec![2.0, 4.0]);
    }

    #[test]
    fn fd_harness_detects_broken_gradient() {
        // harness self-check: a wrong analytic gradient must be flagged
        let x0 = vec![0.3, -0.7];
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[1];
        let fd = fd_grad(&x0, 1e-5, f);
        let wrong = vec![-2.0 * x0[0], 2.0];
        assert!(max_rel_err(&wrong, &fd) > 0.5);
    }
}
