//! Differentiable layer primitives on `(batch, channels, height, width)` maps.
//!
//! All kernels loop over one sample at a time in a fixed order, so results
//! for a sample never depend on the batch it was evaluated in.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Tensor};

fn shape_err(op: &str, msg: String) -> Error {
    Error::Shape(format!("{op}: {msg}"))
}

/// Output index range `[lo, hi)` whose input index `o*stride + k - pad` lands in `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// 2-D cross-correlation with square kernels, as in conventional conv layers.
///
/// `weight` is `(c_out, c_in, k, k)`; `bias` is `(c_out)`.
pub fn conv2d<'t, T: Float>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let (b, ci, h, w) = xv.dims4()?;
    let (co, wci, k, k2) = wv
        .dims4()
        .map_err(|_| shape_err("conv2d", format!("weight must be rank 4, got {:?}", wv.shape())))?;
    if wci != ci || k != k2 {
        return Err(shape_err(
            "conv2d",
            format!("weight {:?} incompatible with input {:?}", wv.shape(), xv.shape()),
        ));
    }
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(shape_err("conv2d", format!("kernel {k} too large for input {h}x{w}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let bias_v = match bias {
        Some(bv) => {
            let bv = bv.value();
            if bv.numel() != co {
                return Err(shape_err("conv2d", format!("bias length {} != {co}", bv.numel())));
            }
            Some(bv)
        }
        None => None,
    };

    let mut out = vec![T::zero(); b * co * ho * wo];
    let xd = xv.data();
    let wd = wv.data();
    let ranges_y: Vec<_> = (0..k).map(|ky| valid_range(ky, pad, stride, h, ho)).collect();
    let ranges_x: Vec<_> = (0..k).map(|kx| valid_range(kx, pad, stride, w, wo)).collect();
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
            if let Some(bv) = &bias_v {
                plane.fill(bv.data()[o]);
            }
            for c in 0..ci {
                let xin = &xd[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                for ky in 0..k {
                    let (ylo, yhi) = ranges_y[ky];
                    for kx in 0..k {
                        let wval = wd[((o * ci + c) * k + ky) * k + kx];
                        let (xlo, xhi) = ranges_x[kx];
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            for ox in xlo..xhi {
                                orow[ox] += wval * irow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, co, ho, wo], out)?;
    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    let wshape = wv.shape().to_vec();
    Ok(x.tape().op(out, &parents, move |g, needs| {
        let gd = g.data();
        let xd = xv.data();
        let wd = wv.data();
        let mut dx = needs[0].then(|| vec![T::zero(); b * ci * h * w]);
        let mut dw = needs[1].then(|| vec![T::zero(); co * ci * k * k]);
        for bi in 0..b {
            for o in 0..co {
                let gplane = &gd[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                for c in 0..ci {
                    let xoff = (bi * ci + c) * h * w;
                    for ky in 0..k {
                        let (ylo, yhi) = ranges_y[ky];
                        for kx in 0..k {
                            let widx = ((o * ci + c) * k + ky) * k + kx;
                            let (xlo, xhi) = ranges_x[kx];
                            let wval = wd[widx];
                            let mut acc = T::zero();
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                let ibase = xoff + iy * w;
                                if let Some(dx) = dx.as_mut() {
                                    for ox in xlo..xhi {
                                        dx[ibase + ox * stride + kx - pad] += wval * grow[ox];
                                    }
                                }
                                if dw.is_some() {
                                    for ox in xlo..xhi {
                                        acc += grow[ox] * xd[ibase + ox * stride + kx - pad];
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        let mut res = vec![
            dx.map(|d| Tensor::from_vec(&[b, ci, h, w], d).unwrap()),
            dw.map(|d| Tensor::from_vec(&wshape, d).unwrap()),
        ];
        if needs.len() == 3 {
            res.push(needs[2].then(|| channel_sums(gd, b, co, ho * wo)));
        }
        res
    }))
}

fn channel_sums<T: Float>(gd: &[T], b: usize, c: usize, hw: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); c];
    for bi in 0..b {
        for (ch, acc) in s.iter_mut().enumerate() {
            let off = (bi * c + ch) * hw;
            for &v in &gd[off..off + hw] {
                *acc += v;
            }
        }
    }
    Tensor::from_vec(&[c], s).unwrap()
}

/// Per-pixel linear map over channels: a 1x1 convolution.
///
/// `weight` may be `(c_out, c_in)` or `(c_out, c_in, 1, 1)`.
pub fn pointwise<'t, T: Float>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let (b, ci, h, w) = xv.dims4()?;
    let ws = wv.shape();
    let co = ws[0];
    let ok = match ws {
        [_, c] => *c == ci,
        [_, c, 1, 1] => *c == ci,
        _ => false,
    };
    if !ok {
        return Err(shape_err(
            "conv1x1",
            format!("weight {:?} incompatible with input channels {ci}", ws),
        ));
    }
    let bias_v = match bias {
        Some(bv) => {
            let bv = bv.value();
            if bv.numel() != co {
                return Err(shape_err("conv1x1", format!("bias length {} != {co}", bv.numel())));
            }
            Some(bv)
        }
        None => None,
    };
    let hw = h * w;
    let mut out = vec![T::zero(); b * co * hw];
    let xd = xv.data();
    let wd = wv.data();
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * hw..(bi * co + o + 1) * hw];
            if let Some(bv) = &bias_v {
                plane.fill(bv.data()[o]);
            }
            for c in 0..ci {
                let wval = wd[o * ci + c];
                let xin = &xd[(bi * ci + c) * hw..(bi * ci + c + 1) * hw];
                for (p, &xv) in plane.iter_mut().zip(xin) {
                    *p += wval * xv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, co, h, w], out)?;
    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    let wshape = ws.to_vec();
    Ok(x.tape().op(out, &parents, move |g, needs| {
        let gd = g.data();
        let xd = xv.data();
        let wd = wv.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); b * ci * hw];
            for bi in 0..b {
                for o in 0..co {
                    let gp = &gd[(bi * co + o) * hw..(bi * co + o + 1) * hw];
                    for c in 0..ci {
                        let wval = wd[o * ci + c];
                        let dxp = &mut dx[(bi * ci + c) * hw..(bi * ci + c + 1) * hw];
                        for (d, &gv) in dxp.iter_mut().zip(gp) {
                            *d += wval * gv;
                        }
                    }
                }
            }
            Tensor::from_vec(&[b, ci, h, w], dx).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); co * ci];
            for bi in 0..b {
                for o in 0..co {
                    let gp = &gd[(bi * co + o) * hw..(bi * co + o + 1) * hw];
                    for c in 0..ci {
                        let xp = &xd[(bi * ci + c) * hw..(bi * ci + c + 1) * hw];
                        let mut acc = T::zero();
                        for (&gv, &xv) in gp.iter().zip(xp) {
                            acc += gv * xv;
                        }
                        dw[o * ci + c] += acc;
                    }
                }
            }
            Tensor::from_vec(&wshape, dw).unwrap()
        });
        let mut res = vec![dx, dw];
        if needs.len() == 3 {
            res.push(needs[2].then(|| channel_sums(gd, b, co, hw)));
        }
        res
    }))
}

/// Transposed convolution with kernel 2 and stride 2: doubles height and width.
///
/// `weight` is `(c_in, c_out, 2, 2)` and `bias` is `(c_out)`.
pub fn deconv2x<'t, T: Float>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (b, ci, h, w) = xv.dims4()?;
    let (wci, co, k1, k2) = wv.dims4()?;
    if wci != ci || k1 != 2 || k2 != 2 || bv.numel() != co {
        return Err(shape_err(
            "deconv2x",
            format!(
                "weight {:?} / bias {:?} incompatible with input {:?}",
                wv.shape(),
                bv.shape(),
                xv.shape()
            ),
        ));
    }
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * co * ho * wo];
    let xd = xv.data();
    let wd = wv.data();
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
            plane.fill(bv.data()[o]);
            for c in 0..ci {
                let xin = &xd[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                let wk = &wd[(c * co + o) * 4..(c * co + o) * 4 + 4];
                for y in 0..h {
                    for dy in 0..2 {
                        let orow = &mut plane[(2 * y + dy) * wo..(2 * y + dy + 1) * wo];
                        let (w0, w1) = (wk[dy * 2], wk[dy * 2 + 1]);
                        for xx in 0..w {
                            let v = xin[y * w + xx];
                            orow[2 * xx] += w0 * v;
                            orow[2 * xx + 1] += w1 * v;
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, co, ho, wo], out)?;
    Ok(x.tape().op(out, &[x, weight, bias], move |g, needs| {
        let gd = g.data();
        let xd = xv.data();
        let wd = wv.data();
        let mut dx = needs[0].then(|| vec![T::zero(); b * ci * h * w]);
        let mut dw = needs[1].then(|| vec![T::zero(); ci * co * 4]);
        for bi in 0..b {
            for o in 0..co {
                let gp = &gd[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                for c in 0..ci {
                    let xoff = (bi * ci + c) * h * w;
                    let woff = (c * co + o) * 4;
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc_dx = T::zero();
                            for dy in 0..2 {
                                for dxk in 0..2 {
                                    let gv = gp[(2 * y + dy) * wo + 2 * xx + dxk];
                                    acc_dx += wd[woff + dy * 2 + dxk] * gv;
                                    if let Some(dw) = dw.as_mut() {
                                        dw[woff + dy * 2 + dxk] += gv * xd[xoff + y * w + xx];
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xoff + y * w + xx] += acc_dx;
                            }
                        }
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_vec(&[b, ci, h, w], d).unwrap()),
            dw.map(|d| Tensor::from_vec(&[ci, co, 2, 2], d).unwrap()),
            needs[2].then(|| channel_sums(gd, b, co, ho * wo)),
        ]
    }))
}

/// Per-channel batch statistics from a train-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Float>(op: &str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err(
            op,
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Batch normalization using statistics of the current batch over `(B, H, W)`.
pub fn batch_norm_train<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let xv = x.value();
    let gv = gamma.value();
    let (b, c, h, w) = xv.dims4()?;
    check_affine("batch_norm", c, &gv, &beta.value())?;
    let hw = h * w;
    let n = b * hw;
    if n < 2 {
        return Err(Error::Validation(format!(
            "batch_norm: train-mode statistics need more than one value per channel, got input {:?}",
            xv.shape()
        )));
    }
    let xd = xv.data();
    let bd = beta.value();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let nt: T = lit(n as f64);
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                s += v;
            }
        }
        let m = s / nt;
        let mut sq = T::zero();
        for bi in 0..b {
            for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / nt;
        inv_std[ch] = T::one() / (var[ch] + lit(eps)).sqrt();
    }
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gv.data()[ch] * xhat[i] + bd.data()[ch];
            }
        }
    }
    let stats = BatchStats {
        var_unbiased: var.iter().map(|&v| v * nt / lit((n - 1) as f64)).collect(),
        mean,
    };
    let out = Tensor::from_vec(&[b, c, h, w], out)?;
    let var_out = x.tape().op(out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let gam = gv.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += gd[i] * xhat[i];
                    dbeta[ch] += gd[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); gd.len()];
            for ch in 0..c {
                // dx = gamma * inv_std / n * (n*g - sum(g) - xhat * sum(g*xhat))
                let k = gam[ch] * inv_std[ch] / nt;
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = k * (nt * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
            }
            Tensor::from_vec(&[b, c, h, w], dx).unwrap()
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dgamma.clone()).unwrap()),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    });
    Ok((var_out, stats))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let gv = gamma.value();
    let (b, c, h, w) = xv.dims4()?;
    check_affine("batch_norm", c, &gv, &beta.value())?;
    check_affine("batch_norm", c, running_mean, running_var)?;
    let hw = h * w;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + lit(eps)).sqrt())
        .collect();
    let rm = running_mean.data().to_vec();
    let xd = xv.data();
    let bd = beta.value();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                out[i] = gv.data()[ch] * ((xd[i] - rm[ch]) * inv_std[ch]) + bd.data()[ch];
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, h, w], out)?;
    Ok(x.tape().op(out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let xd = xv.data();
        let gam = gv.data();
        let mut dx = needs[0].then(|| vec![T::zero(); gd.len()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (xd[i] - rm[ch]) * inv_std[ch];
                    dgamma[ch] += gd[i] * xhat;
                    dbeta[ch] += gd[i];
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = gd[i] * gam[ch] * inv_std[ch];
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_vec(&[b, c, h, w], d).unwrap()),
            needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    }))
}

/// Layer normalization over the channel vector at every pixel.
pub fn layer_norm_channels<'t, T: Float>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let gv = gamma.value();
    let (b, c, h, w) = xv.dims4()?;
    check_affine("layer_norm", c, &gv, &beta.value())?;
    let hw = h * w;
    let xd = xv.data();
    let bd = beta.value();
    let ct: T = lit(c as f64);
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); b * hw];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for p in 0..hw {
            let idx = |ch: usize| (bi * c + ch) * hw + p;
            let mut s = T::zero();
            for ch in 0..c {
                s += xd[idx(ch)];
            }
            let m = s / ct;
            let mut sq = T::zero();
            for ch in 0..c {
                let d = xd[idx(ch)] - m;
                sq += d * d;
            }
            let is = T::one() / (sq / ct + lit(eps)).sqrt();
            inv_std[bi * hw + p] = is;
            for ch in 0..c {
                let i = idx(ch);
                xhat[i] = (xd[i] - m) * is;
                out[i] = gv.data()[ch] * xhat[i] + bd.data()[ch];
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, h, w], out)?;
    Ok(x.tape().op(out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let gam = gv.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = needs[0].then(|| vec![T::zero(); gd.len()]);
        for bi in 0..b {
            for p in 0..hw {
                let idx = |ch: usize| (bi * c + ch) * hw + p;
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for ch in 0..c {
                    let i = idx(ch);
                    dgamma[ch] += gd[i] * xhat[i];
                    dbeta[ch] += gd[i];
                    let dxh = gd[i] * gam[ch];
                    s1 += dxh;
                    s2 += dxh * xhat[i];
                }
                if let Some(dx) = dx.as_mut() {
                    let is = inv_std[bi * hw + p];
                    for ch in 0..c {
                        let i = idx(ch);
                        let dxh = gd[i] * gam[ch];
                        dx[i] = is / ct * (ct * dxh - s1 - xhat[i] * s2);
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_vec(&[b, c, h, w], d).unwrap()),
            needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    }))
}

/// Multi-head softmax self-attention over all spatial positions.
///
/// `qkv` stacks queries, keys and values along channels: `(B, 3C, h, w)`.
/// Returns the per-head attention outputs re-assembled to `(B, C, h, w)`.
pub fn self_attention<'t, T: Float>(qkv: Var<'t, T>, num_heads: usize) -> Result<Var<'t, T>> {
    let v = qkv.value();
    let (b, c3, h, w) = v.dims4()?;
    if c3 % 3 != 0 || num_heads == 0 || (c3 / 3) % num_heads != 0 {
        return Err(shape_err(
            "attention",
            format!("{c3} qkv channels cannot be split into 3 x {num_heads} heads"),
        ));
    }
    let c = c3 / 3;
    let dh = c / num_heads;
    let n = h * w;
    let scale: T = lit(1.0 / (dh as f64).sqrt());
    let d = v.data();
    // Index helpers into the qkv tensor: part 0=q,1=k,2=v.
    let at = move |bi: usize, part: usize, ch: usize, pos: usize| ((bi * c3) + part * c + ch) * n + pos;
    let mut probs = vec![T::zero(); b * num_heads * n * n];
    let mut out = vec![T::zero(); b * c * n];
    let mut row = vec![T::zero(); n];
    for bi in 0..b {
        for hd in 0..num_heads {
            let pbase = (bi * num_heads + hd) * n * n;
            for i in 0..n {
                let mut mx = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for k in 0..dh {
                        let ch = hd * dh + k;
                        s += d[at(bi, 0, ch, i)] * d[at(bi, 1, ch, j)];
                    }
                    *r = s * scale;
                    if *r > mx {
                        mx = *r;
                    }
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                for (j, r) in row.iter().enumerate() {
                    probs[pbase + i * n + j] = *r / z;
                }
                for k in 0..dh {
                    let ch = hd * dh + k;
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += probs[pbase + i * n + j] * d[at(bi, 2, ch, j)];
                    }
                    out[(bi * c + ch) * n + i] = acc;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, h, w], out)?;
    Ok(qkv.tape().op(out, &[qkv], move |g, _| {
        let gd = g.data();
        let d = v.data();
        let mut dqkv = vec![T::zero(); d.len()];
        let mut da = vec![T::zero(); n];
        for bi in 0..b {
            for hd in 0..num_heads {
                let pbase = (bi * num_heads + hd) * n * n;
                for i in 0..n {
                    // dA_ij = dout_i . v_j ; dV_j += A_ij dout_i
                    for (j, daj) in da.iter_mut().enumerate() {
                        let a = probs[pbase + i * n + j];
                        let mut s = T::zero();
                        for k in 0..dh {
                            let ch = hd * dh + k;
                            let go = gd[(bi * c + ch) * n + i];
                            s += go * d[at(bi, 2, ch, j)];
                            dqkv[at(bi, 2, ch, j)] += a * go;
                        }
                        *daj = s;
                    }
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += probs[pbase + i * n + j] * da[j];
                    }
                    for j in 0..n {
                        let ds = probs[pbase + i * n + j] * (da[j] - dot) * scale;
                        for k in 0..dh {
                            let ch = hd * dh + k;
                            dqkv[at(bi, 0, ch, i)] += ds * d[at(bi, 1, ch, j)];
                            dqkv[at(bi, 1, ch, j)] += ds * d[at(bi, 0, ch, i)];
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(&[b, c3, h, w], dqkv).unwrap())]
    }))
}

fn check_even(op: &str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(shape_err(op, format!("2x2 pooling needs even spatial dims, got {h}x{w}")));
    }
    Ok(())
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    check_even("avg_pool2", h, w)?;
    let (ho, wo) = (h / 2, w / 2);
    let xd = xv.data();
    let q: T = lit(0.25);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bc in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = bc * h * w + 2 * y * w + 2 * xx;
                out[bc * ho * wo + y * wo + xx] =
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * q;
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
    Ok(x.tape().op(out, &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); b * c * h * w];
        for bc in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let gv = gd[bc * ho * wo + y * wo + xx] * q;
                    let base = bc * h * w + 2 * y * w + 2 * xx;
                    for off in [0, 1, w, w + 1] {
                        dx[base + off] = gv;
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
    }))
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in row-major order.
pub fn max_pool2<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    check_even("max_pool2", h, w)?;
    let (ho, wo) = (h / 2, w / 2);
    let xd = xv.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut arg = vec![0usize; b * c * ho * wo];
    for bc in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = bc * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for off in [1, w, w + 1] {
                    if xd[base + off] > xd[best] {
                        best = base + off;
                    }
                }
                let o = bc * ho * wo + y * wo + xx;
                out[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
    Ok(x.tape().op(out, &[x], move |g, _| {
        let mut dx = vec![T::zero(); b * c * h * w];
        for (o, &gv) in g.data().iter().enumerate() {
            dx[arg[o]] += gv;
        }
        vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
    }))
}

/// Interpolation taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Taps mapping `out_len` output samples onto `in_len` inputs (corners not aligned).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, without corner alignment.
pub fn upsample_bilinear<'t, T: Float>(x: Var<'t, T>, factor: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if factor == 0 {
        return Err(shape_err("upsample", "factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty: Rc<Vec<Tap>> = Rc::new(bilinear_taps(h, ho));
    let tx: Rc<Vec<Tap>> = Rc::new(bilinear_taps(w, wo));
    let xd = xv.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bc in 0..b * c {
        let src = &xd[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
        for (oy, ry) in ty.iter().enumerate() {
            let (a0, a1): (T, T) = (lit(ry.w0), lit(ry.w1));
            for (ox, rx) in tx.iter().enumerate() {
                let (c0, c1): (T, T) = (lit(rx.w0), lit(rx.w1));
                let top = c0 * src[ry.i0 * w + rx.i0] + c1 * src[ry.i0 * w + rx.i1];
                let bot = c0 * src[ry.i1 * w + rx.i0] + c1 * src[ry.i1 * w + rx.i1];
                dst[oy * wo + ox] = a0 * top + a1 * bot;
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, ho, wo], out)?;
    Ok(x.tape().op(out, &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); b * c * h * w];
        for bc in 0..b * c {
            let gsrc = &gd[bc * ho * wo..(bc + 1) * ho * wo];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for (oy, ry) in ty.iter().enumerate() {
                let (a0, a1): (T, T) = (lit(ry.w0), lit(ry.w1));
                for (ox, rx) in tx.iter().enumerate() {
                    let (c0, c1): (T, T) = (lit(rx.w0), lit(rx.w1));
                    let gv = gsrc[oy * wo + ox];
                    dst[ry.i0 * w + rx.i0] += a0 * c0 * gv;
                    dst[ry.i0 * w + rx.i1] += a0 * c1 * gv;
                    dst[ry.i1 * w + rx.i0] += a1 * c0 * gv;
                    dst[ry.i1 * w + rx.i1] += a1 * c1 * gv;
                }
            }
        }
        vec![Some(Tensor::from_vec(&[b, c, h, w], dx).unwrap())]
    }))
}
