//! Plain-loop reference implementations used as independent oracles.
//!
//! Everything here works on `f64` vectors in NCHW order and reads parameters
//! by name, without touching the library's kernels or autograd.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tssam_core::params::{EntryKind, ParamStore};
use tssam_core::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct A4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w, d: vec![0.0; b * c * h * w] }
    }

    pub fn random(b: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        let d = (0..b * c * h * w).map(|_| rng.random_range(lo..hi)).collect();
        Self { b, c, h, w, d }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let (b, c, h, w) = t.dims4().unwrap();
        Self { b, c, h, w, d: t.data().to_vec() }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.b, self.c, self.h, self.w], self.d.clone()).unwrap()
    }

    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[self.idx(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, c, y, x);
        self.d[i] = v;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn p(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.tensor(name).unwrap_or_else(|_| panic!("missing {name}")).data().to_vec()
}

/// Overwrites every entry with seeded random values; running variances stay positive.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, only_prefix: Option<&str>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        if only_prefix.is_some_and(|pre| !name.starts_with(pre)) {
            continue;
        }
        let positive = store.entry(&name).unwrap().kind == EntryKind::Buffer && name.ends_with("running_var");
        for v in store.tensor_mut(&name).unwrap().data_mut() {
            *v = if positive { rng.random_range(0.5..1.5) } else { rng.random_range(-0.6..0.6) };
        }
    }
}

// ---- layers ----

/// Cross-correlation with zero padding; weight is `(co, ci, k, k)`.
pub fn conv(x: &A4, w: &[f64], bias: &[f64], co: usize, k: usize, stride: usize, pad: usize) -> A4 {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = A4::zeros(x.b, co, ho, wo);
    for b in 0..x.b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = bias[o];
                    for c in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= x.h as i64 || ix >= x.w as i64 {
                                    continue;
                                }
                                s += w[((o * x.c + c) * k + ky) * k + kx] * x.at(b, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y, xx, s);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bn {
    Train,
    Eval,
}

/// Batch statistics per channel: mean and biased variance over (B, H, W).
pub fn batch_stats(x: &A4) -> (Vec<f64>, Vec<f64>) {
    let n = (x.b * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut s = 0.0;
        for b in 0..x.b {
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(b, c, y, xx);
                }
            }
        }
        mean[c] = s / n;
        let mut q = 0.0;
        for b in 0..x.b {
            for y in 0..x.h {
                for xx in 0..x.w {
                    q += (x.at(b, c, y, xx) - mean[c]).powi(2);
                }
            }
        }
        var[c] = q / n;
    }
    (mean, var)
}

pub fn batch_norm(x: &A4, store: &ParamStore<f64>, prefix: &str, mode: Bn) -> A4 {
    let g = p(store, &format!("{prefix}.weight"));
    let beta = p(store, &format!("{prefix}.bias"));
    let (mean, var) = match mode {
        Bn::Train => batch_stats(x),
        Bn::Eval => (p(store, &format!("{prefix}.running_mean")), p(store, &format!("{prefix}.running_var"))),
    };
    let mut out = x.clone();
    for b in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, c, y, xx) - mean[c]) / (var[c] + BN_EPS).sqrt();
                    out.set(b, c, y, xx, g[c] * v + beta[c]);
                }
            }
        }
    }
    out
}

pub fn relu(x: &A4) -> A4 {
    A4 { d: x.d.iter().map(|v| v.max(0.0)).collect(), ..x.clone() }
}

pub fn add(a: &A4, b: &A4) -> A4 {
    assert_eq!((a.b, a.c, a.h, a.w), (b.b, b.c, b.h, b.w));
    A4 { d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(), ..a.clone() }
}

/// `relu(bn(conv(x)))` with weights at `{prefix}.conv.*` and `{prefix}.bn.*`.
pub fn conv_block(x: &A4, store: &ParamStore<f64>, prefix: &str, mode: Bn) -> A4 {
    let wname = format!("{prefix}.conv.weight");
    let shape = store.tensor(&wname).unwrap().shape().to_vec();
    let (co, k) = (shape[0], shape[2]);
    let y = conv(x, &p(store, &wname), &p(store, &format!("{prefix}.conv.bias")), co, k, 1, k / 2);
    relu(&batch_norm(&y, store, &format!("{prefix}.bn"), mode))
}

pub fn linear1x1(x: &A4, store: &ParamStore<f64>, prefix: &str) -> A4 {
    let w = p(store, &format!("{prefix}.weight"));
    let co = w.len() / x.c;
    conv(x, &w, &p(store, &format!("{prefix}.bias")), co, 1, 1, 0)
}

/// Transposed convolution, kernel 2 stride 2, weight `(ci, co, 2, 2)`.
pub fn deconv2x(x: &A4, store: &ParamStore<f64>, prefix: &str) -> A4 {
    let w = p(store, &format!("{prefix}.weight"));
    let bias = p(store, &format!("{prefix}.bias"));
    let co = bias.len();
    let mut out = A4::zeros(x.b, co, 2 * x.h, 2 * x.w);
    for b in 0..x.b {
        for o in 0..co {
            for oy in 0..2 * x.h {
                for ox in 0..2 * x.w {
                    let mut s = bias[o];
                    // each output pixel has exactly one contributing input pixel
                    let (iy, ix, ky, kx) = (oy / 2, ox / 2, oy % 2, ox % 2);
                    for c in 0..x.c {
                        s += x.at(b, c, iy, ix) * w[((c * co + o) * 2 + ky) * 2 + kx];
                    }
                    out.set(b, o, oy, ox, s);
                }
            }
        }
    }
    out
}

/// `tanh(W2 relu(W1 v + b1) + b2) * v` at every pixel.
pub fn gate(x: &A4, store: &ParamStore<f64>, prefix: &str) -> A4 {
    let w1 = p(store, &format!("{prefix}.w1"));
    let b1 = p(store, &format!("{prefix}.b1"));
    let w2 = p(store, &format!("{prefix}.w2"));
    let b2 = p(store, &format!("{prefix}.b2"));
    let (c, hid) = (x.c, b1.len());
    let mut out = x.clone();
    for b in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v: Vec<f64> = (0..c).map(|ch| x.at(b, ch, y, xx)).collect();
                let hvec: Vec<f64> = (0..hid)
                    .map(|i| (b1[i] + (0..c).map(|j| w1[i * c + j] * v[j]).sum::<f64>()).max(0.0))
                    .collect();
                for o in 0..c {
                    let z = b2[o] + (0..hid).map(|j| w2[o * hid + j] * hvec[j]).sum::<f64>();
                    out.set(b, o, y, xx, z.tanh() * v[o]);
                }
            }
        }
    }
    out
}

/// Half-pixel bilinear resampling by an integer factor, edges clamped.
pub fn bilinear(x: &A4, f: usize) -> A4 {
    let (ho, wo) = (x.h * f, x.w * f);
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = if i0 + 1 < n { i0 + 1 } else { n - 1 };
        (i0, i1, s - i0 as f64)
    };
    let mut out = A4::zeros(x.b, x.c, ho, wo);
    for b in 0..x.b {
        for c in 0..x.c {
            for oy in 0..ho {
                let (y0, y1, ly) = src(oy, x.h);
                for ox in 0..wo {
                    let (x0, x1, lx) = src(ox, x.w);
                    let v = (1.0 - ly) * ((1.0 - lx) * x.at(b, c, y0, x0) + lx * x.at(b, c, y0, x1))
                        + ly * ((1.0 - lx) * x.at(b, c, y1, x0) + lx * x.at(b, c, y1, x1));
                    out.set(b, c, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn avg_max_pool2(x: &A4) -> A4 {
    let mut out = A4::zeros(x.b, x.c, x.h / 2, x.w / 2);
    for b in 0..x.b {
        for c in 0..x.c {
            for y in 0..x.h / 2 {
                for xx in 0..x.w / 2 {
                    let vals = [
                        x.at(b, c, 2 * y, 2 * xx),
                        x.at(b, c, 2 * y, 2 * xx + 1),
                        x.at(b, c, 2 * y + 1, 2 * xx),
                        x.at(b, c, 2 * y + 1, 2 * xx + 1),
                    ];
                    let avg = (vals[0] + vals[1] + vals[2] + vals[3]) / 4.0;
                    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    out.set(b, c, y, xx, avg + mx);
                }
            }
        }
    }
    out
}

pub fn concat(a: &A4, b: &A4) -> A4 {
    let mut out = A4::zeros(a.b, a.c + b.c, a.h, a.w);
    for bi in 0..a.b {
        for y in 0..a.h {
            for x in 0..a.w {
                for c in 0..a.c {
                    out.set(bi, c, y, x, a.at(bi, c, y, x));
                }
                for c in 0..b.c {
                    out.set(bi, a.c + c, y, x, b.at(bi, c, y, x));
                }
            }
        }
    }
    out
}

pub fn layer_norm(x: &A4, store: &ParamStore<f64>, prefix: &str) -> A4 {
    let g = p(store, &format!("{prefix}.weight"));
    let beta = p(store, &format!("{prefix}.bias"));
    let mut out = x.clone();
    for b in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v: Vec<f64> = (0..x.c).map(|c| x.at(b, c, y, xx)).collect();
                let m = v.iter().sum::<f64>() / x.c as f64;
                let var = v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / x.c as f64;
                for c in 0..x.c {
                    out.set(b, c, y, xx, g[c] * (v[c] - m) / (var + LN_EPS).sqrt() + beta[c]);
                }
            }
        }
    }
    out
}

/// Dense multi-head attention from a stacked `(B, 3C, h, w)` q/k/v map.
pub fn attention(qkv: &A4, heads: usize) -> A4 {
    let c = qkv.c / 3;
    let dh = c / heads;
    let n = qkv.h * qkv.w;
    let pos = |i: usize| (i / qkv.w, i % qkv.w);
    let mut out = A4::zeros(qkv.b, c, qkv.h, qkv.w);
    for b in 0..qkv.b {
        for hd in 0..heads {
            for i in 0..n {
                let (yi, xi) = pos(i);
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let (yj, xj) = pos(j);
                        (0..dh)
                            .map(|k| qkv.at(b, hd * dh + k, yi, xi) * qkv.at(b, c + hd * dh + k, yj, xj))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dh {
                    let v: f64 = (0..n)
                        .map(|j| {
                            let (yj, xj) = pos(j);
                            e[j] / z * qkv.at(b, 2 * c + hd * dh + k, yj, xj)
                        })
                        .sum();
                    out.set(b, hd * dh + k, yi, xi, v);
                }
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn backbone_block(x: &A4, store: &ParamStore<f64>, j: usize, heads: usize) -> A4 {
    let pre = format!("backbone.blocks.{j}");
    let h = layer_norm(x, store, &format!("{pre}.norm1"));
    let qkv = linear_named(&h, store, &format!("{pre}.attn.qkv"));
    let a = linear_named(&attention(&qkv, heads), store, &format!("{pre}.attn.proj"));
    let x = add(x, &a);
    let h = layer_norm(&x, store, &format!("{pre}.norm2"));
    let mut m = linear_named(&h, store, &format!("{pre}.mlp.fc1"));
    m.d.iter_mut().for_each(|v| *v = gelu(*v));
    add(&x, &linear_named(&m, store, &format!("{pre}.mlp.fc2")))
}

fn linear_named(x: &A4, store: &ParamStore<f64>, prefix: &str) -> A4 {
    linear1x1(x, store, prefix)
}

pub fn patch_embed(img: &A4, store: &ParamStore<f64>) -> A4 {
    let w = p(store, "backbone.patch_embed.weight");
    let bias = p(store, "backbone.patch_embed.bias");
    conv(img, &w, &bias, bias.len(), 16, 16, 0)
}

// ---- side network ----

/// One adapter step: `vit + expand(side)`, then `compress` of the sum.
pub fn csa_step(store: &ParamStore<f64>, layer: usize, side: &A4, vit: &A4, mode: Bn) -> (A4, A4) {
    let injected = conv_block(side, store, &format!("csa.layers.{layer}.expand"), mode);
    let next = add(vit, &injected);
    let side_next = conv_block(&next, store, &format!("csa.layers.{layer}.compress"), mode);
    (next, side_next)
}

/// `(up2, up4)` of one refinement layer before gating.
pub fn mrm_upsample(store: &ParamStore<f64>, i: usize, vit: &A4, mode: Bn) -> (A4, A4) {
    let pre = format!("mrm.layers.{i}");
    let proj = conv_block(vit, store, &format!("{pre}.project"), mode);
    let up2 = deconv2x(&proj, store, &format!("{pre}.up2"));
    let mid = deconv2x(&proj, store, &format!("{pre}.up4.0"));
    let mid = relu(&batch_norm(&mid, store, &format!("{pre}.up4.bn"), mode));
    (up2, deconv2x(&mid, store, &format!("{pre}.up4.1")))
}

pub fn mrm_step(store: &ParamStore<f64>, i: usize, vit: &A4, prev: &(A4, A4), mode: Bn) -> (A4, A4) {
    let (u2, u4) = mrm_upsample(store, i, vit, mode);
    let pre = format!("mrm.layers.{i}");
    (
        add(&gate(&u2, store, &format!("{pre}.gate1")), &prev.0),
        add(&gate(&u4, store, &format!("{pre}.gate2")), &prev.1),
    )
}

pub fn ffd_forward(store: &ParamStore<f64>, side: &A4, m1: &A4, m2: &A4, mode: Bn) -> A4 {
    let mut x = conv_block(side, store, "ffd.in_proj", mode);
    for (k, (full, stage)) in [(m1, "stage_a"), (m2, "stage_b")].into_iter().enumerate() {
        let key = avg_max_pool2(&conv_block(full, store, &format!("ffd.mrm_proj.{}", k + 1), mode));
        let y = conv_block(&concat(&x, &key), store, &format!("ffd.{stage}.inject"), mode);
        let y = bilinear(&y, 2);
        x = conv_block(&concat(&y, full), store, &format!("ffd.{stage}.fuse"), mode);
    }
    linear1x1(&bilinear(&x, 4), store, "ffd.head")
}

pub fn fallback_forward(store: &ParamStore<f64>, x: &A4, mode: Bn) -> A4 {
    let y = conv_block(x, store, "fallback.proj", mode);
    linear1x1(&bilinear(&y, 16), store, "fallback.head")
}

#[derive(Debug, Clone, Copy)]
pub struct Wiring {
    pub csa: bool,
    pub mrm_ffd: bool,
    pub depth: usize,
    pub heads: usize,
}

pub struct OracleTrace {
    pub logits: A4,
    pub per_block: Vec<A4>,
    pub fused: Vec<A4>,
}

/// Whole-model forward; the initial side stream is zero unless `csa.init` exists.
pub fn model_forward(store: &ParamStore<f64>, img: &A4, wiring: Wiring, taps: &[usize], mode: Bn) -> OracleTrace {
    let mut x = patch_embed(img, store);
    let mut side = None;
    if wiring.csa {
        let first = if store.contains("csa.init.conv.weight") {
            conv_block(&x, store, "csa.init", mode)
        } else {
            let c1 = p(store, "csa.layers.1.expand.conv.weight").len() / x.c;
            A4::zeros(x.b, c1, x.h, x.w)
        };
        let (xn, sn) = csa_step(store, 1, &first, &x, mode);
        x = xn;
        side = Some(sn);
    }
    let mut per_block = Vec::new();
    let mut fused = Vec::new();
    for j in 0..wiring.depth {
        x = backbone_block(&x, store, j, wiring.heads);
        per_block.push(x.clone());
        if let Some(s) = &side {
            let (xn, sn) = csa_step(store, j + 2, s, &x, mode);
            x = xn;
            side = Some(sn);
        }
        fused.push(x.clone());
    }
    let last = per_block.last().unwrap().clone();
    let logits = if wiring.mrm_ffd {
        let c2 = p(store, "mrm.layers.0.up2.bias").len();
        let mut pair = (A4::zeros(x.b, c2, 2 * x.h, 2 * x.w), A4::zeros(x.b, c2, 4 * x.h, 4 * x.w));
        for (i, &t) in taps.iter().enumerate() {
            pair = mrm_step(store, i, &fused[t], &pair, mode);
        }
        let stream = match &side {
            Some(s) => s.clone(),
            None => conv_block(&last, store, "ffd.backbone_proj", mode),
        };
        ffd_forward(store, &stream, &pair.0, &pair.1, mode)
    } else {
        fallback_forward(store, side.as_ref().unwrap_or(&last), mode)
    };
    OracleTrace { logits, per_block, fused }
}

// ---- losses ----

pub fn bce_iou(logits: &[f64], target: &[f64], batch: usize) -> (f64, f64) {
    let n = logits.len();
    let bce = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n as f64;
    let per = n / batch;
    let mut iou = 0.0;
    for b in 0..batch {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in b * per..(b + 1) * per {
            let p = 1.0 / (1.0 + (-logits[i]).exp());
            inter += p * target[i];
            union += p + target[i] - p * target[i];
        }
        iou += 1.0 - (inter + 1.0) / (union + 1.0);
    }
    (bce, iou / batch as f64)
}

// ---- metrics ----

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

/// Balanced error rate (percent) of `pred >= 0.5` over the pooled pixels of all pairs.
pub fn ber(pairs: &[(&[f64], &[f64])]) -> f64 {
    let (mut tp, mut tn, mut np, mut nn) = (0.0, 0.0, 0.0, 0.0);
    for (pred, gt) in pairs {
        for i in 0..pred.len() {
            let pos = pred[i] >= 0.5;
            if gt[i] > 0.5 {
                np += 1.0;
                if pos {
                    tp += 1.0;
                }
            } else {
                nn += 1.0;
                if !pos {
                    tn += 1.0;
                }
            }
        }
    }
    let tpr = if np > 0.0 { tp / np } else { 1.0 };
    let tnr = if nn > 0.0 { tn / nn } else { 1.0 };
    100.0 * (1.0 - (tpr + tnr) / 2.0)
}

/// Weighted F-measure (beta^2 = 1) by brute force: nearest foreground pixel
/// by exhaustive search (first in row-major order among ties), explicit 7x7
/// Gaussian (sigma 5) with zero padding, distance-decayed background weights.
pub fn weighted_f(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Option<f64> {
    let eps = f64::EPSILON;
    let fg: Vec<usize> = (0..h * w).filter(|&i| gt[i] == 1.0).collect();
    if fg.is_empty() {
        return None;
    }
    let e: Vec<f64> = (0..h * w).map(|i| (gt[i] - pred[i]).abs()).collect();
    let mut dist = vec![0.0; h * w];
    let mut et = e.clone();
    for i in 0..h * w {
        if gt[i] == 1.0 {
            continue;
        }
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut best = (f64::INFINITY, 0);
        for &j in &fg {
            let d = (y - (j / w) as f64).powi(2) + (x - (j % w) as f64).powi(2);
            if d < best.0 {
                best = (d, j);
            }
        }
        dist[i] = best.0.sqrt();
        et[i] = e[best.1];
    }
    let mut k = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dy * dy + dx * dx) / 50.0).exp();
            ks += *v;
        }
    }
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for a in 0..7 {
                for b in 0..7 {
                    let (yy, xx) = (y as i64 + a as i64 - 3, x as i64 + b as i64 - 3);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += k[a][b] / ks * et[yy as usize * w + xx as usize];
                    }
                }
            }
            ea[y * w + x] = s;
        }
    }
    let mut min_e = e.clone();
    for i in 0..h * w {
        if gt[i] == 1.0 && ea[i] < e[i] {
            min_e[i] = ea[i];
        }
    }
    let mut b_w = vec![1.0; h * w];
    for i in 0..h * w {
        if gt[i] == 0.0 {
            b_w[i] = 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp();
        }
    }
    let ew: Vec<f64> = (0..h * w).map(|i| min_e[i] * b_w[i]).collect();
    let tpw = fg.len() as f64 - fg.iter().map(|&i| ew[i]).sum::<f64>();
    let fpw: f64 = (0..h * w).filter(|&i| gt[i] == 0.0).map(|i| ew[i]).sum();
    let r = 1.0 - fg.iter().map(|&i| ew[i]).sum::<f64>() / fg.len() as f64;
    let pr = tpw / (eps + tpw + fpw);
    Some(2.0 * r * pr / (r + pr + eps))
}

fn object_score(vals: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + var.sqrt() + eps)
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let sx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with alpha 0.5, quadrants split at the rounded
/// foreground centroid plus one.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let y = gt.iter().sum::<f64>() / gt.len() as f64;
    let x = pred.iter().sum::<f64>() / pred.len() as f64;
    if y == 0.0 {
        return 1.0 - x;
    }
    if y == 1.0 {
        return x;
    }
    let fg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 1.0).map(|i| pred[i]).collect();
    let bg: Vec<f64> = (0..h * w).filter(|&i| gt[i] == 0.0).map(|i| 1.0 - pred[i]).collect();
    let so = y * object_score(&fg) + (1.0 - y) * object_score(&bg);

    let idx: Vec<(f64, f64)> = (0..h * w).filter(|&i| gt[i] == 1.0).map(|i| ((i / w) as f64, (i % w) as f64)).collect();
    let my = idx.iter().map(|t| t.0).sum::<f64>() / idx.len() as f64;
    let mx = idx.iter().map(|t| t.1).sum::<f64>() / idx.len() as f64;
    // numpy rounds half to even
    let cy = my.round_ties_even() as usize + 1;
    let cx = mx.round_ties_even() as usize + 1;
    let mut sr = 0.0;
    for (ys, xs) in [((0, cy), (0, cx)), ((0, cy), (cx, w)), ((cy, h), (0, cx)), ((cy, h), (cx, w))] {
        let ys = (ys.0.min(h), ys.1.min(h));
        let xs = (xs.0.min(w), xs.1.min(w));
        if ys.1 <= ys.0 || xs.1 <= xs.0 {
            continue;
        }
        let mut pb = Vec::new();
        let mut gb = Vec::new();
        for r in ys.0..ys.1 {
            for c in xs.0..xs.1 {
                pb.push(pred[r * w + c]);
                gb.push(gt[r * w + c]);
            }
        }
        sr += pb.len() as f64 / (h * w) as f64 * ssim_block(&pb, &gb);
    }
    (0.5 * so + 0.5 * sr).max(0.0)
}

/// Adaptive E-measure, evaluated pixel by pixel.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> f64 {
    let eps = f64::EPSILON;
    let n = pred.len() as f64;
    let thr = (2.0 * pred.iter().sum::<f64>() / n).min(1.0);
    let fm: Vec<f64> = pred.iter().map(|&v| if thr > 0.0 && v >= thr { 1.0 } else { 0.0 }).collect();
    let gsum: f64 = gt.iter().sum();
    let enhanced: Vec<f64> = if gsum == 0.0 {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if gsum == n {
        fm.clone()
    } else {
        let mf = fm.iter().sum::<f64>() / n;
        let mg = gsum / n;
        fm.iter()
            .zip(gt)
            .map(|(&f, &g)| {
                let (a, b) = (f - mf, g - mg);
                let align = 2.0 * a * b / (a * a + b * b + eps);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}
