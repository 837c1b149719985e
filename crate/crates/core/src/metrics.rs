//! Binary segmentation metrics: MAE, BER, weighted F-beta, S-measure and
//! adaptive E-measure, plus dataset aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Machine epsilon, used as the stabilizer in the structural metrics.
const EPS: f64 = f64::EPSILON;
const WF_BETA2: f64 = 1.0;
const WF_SIGMA: f64 = 5.0;
const WF_WINDOW: usize = 7;
const S_ALPHA: f64 = 0.5;

/// A single-channel `h x w` map in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Shape(format!("plane {h}x{w} cannot hold {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn full(h: usize, w: usize, value: f64) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    /// Accepts `(H, W)`, `(1, H, W)` or `(1, 1, H, W)` tensors.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::Shape(format!("expected a single-channel map, got shape {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(h, w, t.to_f64_vec())
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity((y1 - y0) * (x1 - x0));
        for y in y0..y1 {
            out.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x1]);
        }
        out
    }
}

fn check_pair(pred: &Plane, gt: &Plane) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::Shape(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if let Some(v) = pred.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("prediction value {v} outside [0, 1]")));
    }
    if let Some(v) = gt.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("ground-truth value {v} is not 0 or 1")));
    }
    Ok(())
}

pub fn mae(pred: &Plane, gt: &Plane) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Pixel counts of a thresholded prediction against the ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Counts pixels with `pred >= threshold` as positive.
    pub fn from_pair(pred: &Plane, gt: &Plane, threshold: f64) -> Result<Self> {
        check_pair(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p >= threshold, g == 1.0) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `100 * (1 - (TPR + TNR) / 2)`; a class absent from the ground truth has recall 1.
    pub fn ber(&self) -> f64 {
        let recall = |hit: u64, miss: u64| {
            if hit + miss == 0 {
                1.0
            } else {
                hit as f64 / (hit + miss) as f64
            }
        };
        100.0 * (1.0 - 0.5 * (recall(self.tp, self.fn_) + recall(self.tn, self.fp)))
    }
}

pub fn ber(pred: &Plane, gt: &Plane, threshold: f64) -> Result<f64> {
    Ok(Confusion::from_pair(pred, gt, threshold)?.ber())
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel, with the row-major-first nearest pixel among ties.
pub fn distance_transform(mask: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    const FAR: f64 = 1e20;
    fn pass(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            let fq = f[q] + (q * q) as f64;
            let s = loop {
                let p = v[k];
                let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    k -= 1;
                } else {
                    break s;
                }
            };
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }

    let mut cols = vec![0.0; h * w];
    let mut f = vec![0.0; h];
    let mut d = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if mask[y * w + x] { 0.0 } else { FAR };
        }
        pass(&f, &mut d);
        for y in 0..h {
            cols[y * w + x] = d[y];
        }
    }
    let mut sq = vec![0.0; h * w];
    for y in 0..h {
        pass(&cols[y * w..(y + 1) * w], &mut sq[y * w..(y + 1) * w]);
    }

    let mut nearest = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] {
                nearest[i] = i;
                continue;
            }
            let dd = sq[i] as i64;
            let r = (dd as f64).sqrt() as i64 + 1;
            'search: for dy in -r..=r {
                let yy = y as i64 + dy;
                let rem = dd - dy * dy;
                if yy < 0 || yy >= h as i64 || rem < 0 {
                    continue;
                }
                let dx = (rem as f64).sqrt().round() as i64;
                if dx * dx != rem {
                    continue;
                }
                for xx in [x as i64 - dx, x as i64 + dx] {
                    if xx >= 0 && xx < w as i64 && mask[yy as usize * w + xx as usize] {
                        nearest[i] = yy as usize * w + xx as usize;
                        break 'search;
                    }
                }
            }
        }
    }
    (sq, nearest)
}

/// Normalized `WF_WINDOW x WF_WINDOW` Gaussian with standard deviation `WF_SIGMA`.
fn gaussian_kernel() -> Vec<f64> {
    let r = (WF_WINDOW / 2) as i64;
    let mut k = Vec::with_capacity(WF_WINDOW * WF_WINDOW);
    for dy in -r..=r {
        for dx in -r..=r {
            k.push((-((dy * dy + dx * dx) as f64) / (2.0 * WF_SIGMA * WF_SIGMA)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Weighted F-beta with Gaussian error spreading and distance-decayed background weights.
pub fn weighted_fbeta(pred: &Plane, gt: &Plane) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (gt.h, gt.w);
    let fg: Vec<bool> = gt.data.iter().map(|&g| g == 1.0).collect();
    let n_fg = fg.iter().filter(|&&f| f).count();
    if n_fg == 0 {
        return Err(Error::UndefinedMetric(
            "weighted F-beta needs at least one foreground pixel".into(),
        ));
    }
    let err: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).abs()).collect();
    let (sq, nearest) = distance_transform(&fg, h, w);
    let et: Vec<f64> = (0..h * w).map(|i| if fg[i] { err[i] } else { err[nearest[i]] }).collect();

    let kernel = gaussian_kernel();
    let r = (WF_WINDOW / 2) as i64;
    let mut ea = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let (yy, xx) = (y + ky, x + kx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += kernel[((ky + r) * WF_WINDOW as i64 + kx + r) as usize] * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = acc;
        }
    }

    let (mut sum_fg, mut sum_bg) = (0.0, 0.0);
    for i in 0..h * w {
        if fg[i] {
            sum_fg += if ea[i] < err[i] { ea[i] } else { err[i] };
        } else {
            let decay = 2.0 - 0.5f64.powf(sq[i].sqrt() / 5.0);
            sum_bg += err[i] * decay;
        }
    }
    let tp_w = n_fg as f64 - sum_fg;
    let recall = 1.0 - sum_fg / n_fg as f64;
    let precision = tp_w / (EPS + tp_w + sum_bg);
    Ok((1.0 + WF_BETA2) * recall * precision / (EPS + recall + WF_BETA2 * precision))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; a single element has zero spread.
fn std_sample(v: &[f64]) -> f64 {
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len().max(2) - 1) as f64).sqrt()
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    2.0 * m / (m * m + 1.0 + std_sample(values) + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let denom = (n.max(2) - 1) as f64;
    let (x, y) = (mean(pred), mean(gt));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure(pred: &Plane, gt: &Plane) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = gt.mean();
    if y == 0.0 {
        return Ok(1.0 - pred.mean());
    }
    if y == 1.0 {
        return Ok(pred.mean());
    }

    let fg: Vec<f64> = pred.data.iter().zip(&gt.data).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.data.iter().zip(&gt.data).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p).collect();
    let object = y * s_object(&fg) + (1.0 - y) * s_object(&bg);

    let (h, w) = (gt.h, gt.w);
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if gt.at(r, c) == 1.0 {
                sy += r as f64;
                sx += c as f64;
                n += 1;
            }
        }
    }
    let cx = (sx / n as f64).round_ties_even() as usize + 1;
    let cy = (sy / n as f64).round_ties_even() as usize + 1;
    let area = (h * w) as f64;
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut region = 0.0;
    for (y0, y1, x0, x1) in quads {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
        region += weight * ssim(&pred.crop(y0, y1, x0, x1), &gt.crop(y0, y1, x0, x1));
    }
    Ok((S_ALPHA * object + (1.0 - S_ALPHA) * region).max(0.0))
}

/// Adaptive-threshold enhanced-alignment measure.
///
/// The prediction is binarized at `min(2 * mean, 1)`; an all-zero prediction
/// stays all background. The enhanced alignment is averaged over the pixels.
pub fn e_measure(pred: &Plane, gt: &Plane) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.len();
    let thr = (2.0 * pred.mean()).min(1.0);
    let bin: Vec<bool> = pred.data.iter().map(|&p| thr > 0.0 && p >= thr).collect();
    let gt_fg = gt.data.iter().filter(|&&g| g == 1.0).count();
    let fg_fg = bin.iter().zip(&gt.data).filter(|(&b, &g)| b && g == 1.0).count();
    let pred_fg = bin.iter().filter(|&&b| b).count();
    let fg_bg = pred_fg - fg_fg;
    let pred_bg = n - pred_fg;

    let sum = if gt_fg == 0 {
        pred_bg as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let bg_fg = gt_fg - fg_fg;
        let bg_bg = pred_bg - bg_fg;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let parts = [
            (fg_fg, 1.0 - mp, 1.0 - mg),
            (fg_bg, 1.0 - mp, -mg),
            (bg_fg, -mp, 1.0 - mg),
            (bg_bg, -mp, -mg),
        ];
        parts
            .iter()
            .map(|&(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                count as f64 * (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    Ok(sum / n as f64)
}

/// Per-image results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    /// `None` when the ground truth has no foreground.
    pub f_beta_w: Option<f64>,
    pub mae: f64,
    pub confusion: Confusion,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &Plane, gt: &Plane) -> Result<Self> {
        let f_beta_w = match weighted_fbeta(pred, gt) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            id: id.into(),
            s_alpha: s_measure(pred, gt)?,
            e_phi: e_measure(pred, gt)?,
            f_beta_w,
            mae: mae(pred, gt)?,
            confusion: Confusion::from_pair(pred, gt, 0.5)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    pub ber: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let cols = [
            ("S_alpha", format!("{:.6}", self.s_alpha)),
            ("E_phi", format!("{:.6}", self.e_phi)),
            ("F_beta_w", format!("{:.6}", self.f_beta_w)),
            ("MAE", format!("{:.6}", self.mae)),
            ("BER", format!("{:.4}", self.ber)),
            ("n_images", self.n_images.to_string()),
        ];
        let mut head = String::new();
        let mut row = String::new();
        for (name, value) in &cols {
            let width = name.len().max(value.len());
            let _ = write!(head, "{name:>width$}  ");
            let _ = write!(row, "{value:>width$}  ");
        }
        format!("{}\n{}\n", head.trim_end(), row.trim_end())
    }
}

/// Mean that depends only on the multiset of values: sorted distinct values
/// weighted by `count / n`, so repeating every value leaves it unchanged.
pub fn multiset_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].to_bits() == v[i].to_bits() {
            j += 1;
        }
        out += v[i] * ((j - i) as f64 / n);
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub report: MetricReport,
    pub per_image: Vec<ImageMetrics>,
    /// Ids left out of the weighted F-beta mean for lack of foreground.
    pub fbeta_excluded: Vec<String>,
}

/// Aggregates per-image metrics in id order; BER comes from the pooled confusion matrix.
pub fn aggregate(mut per_image: Vec<ImageMetrics>) -> Result<DatasetEvaluation> {
    if per_image.is_empty() {
        return Err(Error::Data("no images to evaluate".into()));
    }
    per_image.sort_by(|a, b| a.id.cmp(&b.id));
    let mut confusion = Confusion::default();
    for m in &per_image {
        confusion.merge(&m.confusion);
    }
    let collect = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    let fb: Vec<f64> = per_image.iter().filter_map(|m| m.f_beta_w).collect();
    let fbeta_excluded: Vec<String> = per_image
        .iter()
        .filter(|m| m.f_beta_w.is_none())
        .map(|m| m.id.clone())
        .collect();
    if !fbeta_excluded.is_empty() {
        log::warn!(
            "{} image(s) without foreground excluded from the weighted F-beta mean",
            fbeta_excluded.len()
        );
    }
    let report = MetricReport {
        s_alpha: multiset_mean(&collect(&|m| m.s_alpha)),
        e_phi: multiset_mean(&collect(&|m| m.e_phi)),
        f_beta_w: multiset_mean(&fb),
        mae: multiset_mean(&collect(&|m| m.mae)),
        ber: confusion.ber(),
        n_images: per_image.len(),
    };
    Ok(DatasetEvaluation {
        report,
        per_image,
        fbeta_excluded,
    })
}

/// Computes and aggregates metrics for `(id, prediction, ground truth)` triples.
pub fn evaluate_dataset(items: &[(String, Plane, Plane)]) -> Result<DatasetEvaluation> {
    let per_image = items
        .iter()
        .map(|(id, p, g)| ImageMetrics::compute(id.clone(), p, g))
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_image)
}
