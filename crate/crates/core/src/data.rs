//! Samples, synthetic data, folder loading, resizing and the high-frequency
//! input transform.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::kernels::bilinear_taps;
use crate::tensor::{hex_digest, Tensor};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An RGB image in `[0, 1]` with a binary mask of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `(3, H, W)`.
    pub image: Tensor<f32>,
    /// `(1, H, W)`.
    pub mask: Tensor<f32>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        let (is, ms) = (self.image.shape(), self.mask.shape());
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::Data(format!("{}: image shape {is:?} is not (3, H, W)", self.id)));
        }
        if ms != [1, is[1], is[2]] {
            return Err(Error::Data(format!(
                "{}: mask shape {ms:?} does not match image {is:?}",
                self.id
            )));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{}: image values outside [0, 1]", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{}: mask is not binary", self.id)));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Low,
    High,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Difficulty::Low),
            "high" => Ok(Difficulty::High),
            _ => Err(Error::Config(format!("unknown difficulty `{s}` (expected low or high)"))),
        }
    }
}

impl Difficulty {
    /// Colour offset between foreground and background texture.
    fn shift(self) -> f64 {
        match self {
            Difficulty::Low => 0.45,
            Difficulty::High => 0.08,
        }
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
        return Err(Error::Config(format!(
            "sample size {h}x{w} must be a positive multiple of {PATCH_SIZE}"
        )));
    }
    Ok(())
}

/// Smooth three-channel noise: a coarse random grid bilinearly resized to `(h, w)`.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = ((h / 8).max(2), (w / 8).max(2));
    let grid: Vec<f64> = (0..3 * gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ty = bilinear_taps(gh, h);
    let tx = bilinear_taps(gw, w);
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let g = &grid[c * gh * gw..(c + 1) * gh * gw];
        for (y, ry) in ty.iter().enumerate() {
            for (x, rx) in tx.iter().enumerate() {
                let top = rx.w0 * g[ry.i0 * gw + rx.i0] + rx.w1 * g[ry.i0 * gw + rx.i1];
                let bot = rx.w0 * g[ry.i1 * gw + rx.i0] + rx.w1 * g[ry.i1 * gw + rx.i1];
                out[(c * h + y) * w + x] = ry.w0 * top + ry.w1 * bot;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn synth_one(rng: &mut ChaCha8Rng, id: String, h: usize, w: usize, difficulty: Difficulty) -> Result<SegSample> {
    let mask = loop {
        let blobs = rng.random_range(1..=2);
        let m = h.min(w) as f64;
        let shapes: Vec<Ellipse> = (0..blobs)
            .map(|_| Ellipse {
                cy: rng.random_range(0.2..0.8) * h as f64,
                cx: rng.random_range(0.2..0.8) * w as f64,
                ry: rng.random_range(0.12..0.32) * m,
                rx: rng.random_range(0.12..0.32) * m,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let mask: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                if shapes.iter().any(|e| e.contains(y, x)) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
        if (0.05..=0.5).contains(&frac) {
            break mask;
        }
    };

    let noise = smooth_noise(rng, h, w);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let amp = 0.2;
    // the foreground reuses the texture with a phase offset and a colour shift
    let (py, px) = (rng.random_range(0..h), rng.random_range(0..w));
    let dir: [f64; 3] = std::array::from_fn(|_| difficulty.shift() * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let mut image = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let v = if mask[i] == 1.0 {
                    let (sy, sx) = ((y + py) % h, (x + px) % w);
                    base[c] + amp * noise[(c * h + sy) * w + sx] + dir[c]
                } else {
                    base[c] + amp * noise[(c * h + y) * w + x]
                };
                image[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SegSample::new(id, Tensor::from_vec(&[3, h, w], image)?, Tensor::from_vec(&[1, h, w], mask)?)
}

/// Deterministic camouflage-style samples: smooth textured background with
/// one or two elliptical blobs of shifted texture.
pub fn generate_synthetic(n: usize, size: (usize, usize), seed: u64, difficulty: Difficulty) -> Result<Vec<SegSample>> {
    let (h, w) = size;
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_one(&mut rng, format!("synth_{i:05}"), h, w, difficulty))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFileEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// `manifest.json` of a synthetic dataset folder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub n: usize,
    pub size: [usize; 2],
    pub seed: u64,
    pub difficulty: Difficulty,
    pub files: Vec<SynthFileEntry>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(Sha256::new_with_prefix(&bytes)))
}

pub fn write_image_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push(to_u8(d[c * h * w + i]));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes a `(1, H, W)` or `(H, W)` map in `[0, 1]` as 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let raw: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Materializes samples as `images/`, `masks/` and `manifest.json` under `out`.
pub fn write_synthetic(
    out: &Path,
    samples: &[SegSample],
    seed: u64,
    difficulty: Difficulty,
) -> Result<SynthManifest> {
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut files = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.png", s.id);
        let (ip, mp) = (images.join(&name), masks.join(&name));
        write_image_png(&ip, &s.image)?;
        write_gray_png(&mp, &s.mask)?;
        files.push(SynthFileEntry {
            id: s.id.clone(),
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            image_sha256: sha256_file(&ip)?,
            mask_sha256: sha256_file(&mp)?,
        });
    }
    let (h, w) = samples.first().map_or((0, 0), SegSample::hw);
    let manifest = SynthManifest {
        generator: "tssam-synthetic-v1".into(),
        n: samples.len(),
        size: [h, w],
        seed,
        difficulty,
        files,
    };
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an image file as `(3, H, W)` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = read_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Reads an image file as a `(1, H, W)` grayscale map in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = read_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f32 / 255.0).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Image files in `dir` keyed by file stem, in sorted order.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Matched `(id, left, right)` paths plus the ids present on one side only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub orphans: Vec<String>,
}

pub fn pair_dirs(left: &Path, right: &Path) -> Result<Pairing> {
    let a = list_images(left)?;
    let b = list_images(right)?;
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    for (id, pa) in &a {
        match b.get(id) {
            Some(pb) => pairs.push((id.clone(), pa.clone(), pb.clone())),
            None => orphans.push(id.clone()),
        }
    }
    orphans.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    orphans.sort();
    Ok(Pairing { pairs, orphans })
}

#[derive(Debug, Clone)]
pub struct FolderLoad {
    pub samples: Vec<SegSample>,
    pub warnings: Vec<String>,
}

/// Loads image/mask pairs with matching stems; masks are binarized at 0.5.
pub fn load_folder(images_dir: &Path, masks_dir: &Path) -> Result<FolderLoad> {
    let pairing = pair_dirs(images_dir, masks_dir)?;
    if pairing.pairs.is_empty() {
        return Err(Error::Data(format!(
            "no image/mask pairs found in {} and {}",
            images_dir.display(),
            masks_dir.display()
        )));
    }
    let warnings: Vec<String> = pairing
        .orphans
        .iter()
        .map(|id| format!("`{id}` has no counterpart and was skipped"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut samples = Vec::with_capacity(pairing.pairs.len());
    for (id, ip, mp) in pairing.pairs {
        let image = read_rgb(&ip)?;
        let mask = read_gray(&mp)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::Data(format!(
                "`{id}`: image {:?} and mask {:?} differ in size",
                &image.shape()[1..],
                &mask.shape()[1..]
            )));
        }
        samples.push(SegSample::new(id, image, mask)?);
    }
    Ok(FolderLoad { samples, warnings })
}

/// Bilinear resize of every channel of a `(C, H, W)` tensor, corners not aligned.
pub fn resize_bilinear(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, ih, iw) = (s[0], s[1], s[2]);
    let ty = bilinear_taps(ih, h);
    let tx = bilinear_taps(iw, w);
    let d = t.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let src = &d[ch * ih * iw..(ch + 1) * ih * iw];
        for (y, ry) in ty.iter().enumerate() {
            for (x, rx) in tx.iter().enumerate() {
                let top = rx.w0 * src[ry.i0 * iw + rx.i0] as f64 + rx.w1 * src[ry.i0 * iw + rx.i1] as f64;
                let bot = rx.w0 * src[ry.i1 * iw + rx.i0] as f64 + rx.w1 * src[ry.i1 * iw + rx.i1] as f64;
                out[(ch * h + y) * w + x] = (ry.w0 * top + ry.w1 * bot) as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("sized")
}

/// Nearest-neighbour resize of a `(C, H, W)` tensor using pixel centres.
pub fn resize_nearest(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, ih, iw) = (s[0], s[1], s[2]);
    let pick = |o: usize, out_len: usize, in_len: usize| (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1);
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * ih + pick(y, h, ih)) * iw + pick(x, w, iw)]
    })
}

pub fn resize_sample(sample: &SegSample, target: (usize, usize)) -> Result<SegSample> {
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("invalid resize target {h}x{w}")));
    }
    if sample.hw() == target {
        return Ok(sample.clone());
    }
    SegSample::new(
        sample.id.clone(),
        resize_bilinear(&sample.image, h, w).map(|v| v.clamp(0.0, 1.0)),
        resize_nearest(&sample.mask, h, w),
    )
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Side of the zeroed low-frequency square for an `h x w` image.
pub fn low_freq_side(h: usize, w: usize, tau: f64) -> usize {
    (tau * h.min(w) as f64).floor() as usize
}

/// True when frequency `(ky, kx)` of an `h x w` spectrum lies in the centred
/// square of side `side` after shifting DC to the middle.
pub fn in_low_freq_square(ky: usize, kx: usize, h: usize, w: usize, side: usize) -> bool {
    let shifted = |k: usize, n: usize| (k + n / 2) % n;
    let inside = |s: usize, n: usize| {
        let start = n / 2 - side / 2;
        s >= start && s < start + side
    };
    side > 0 && inside(shifted(ky, h), h) && inside(shifted(kx, w), w)
}

/// Real part of the inverse transform after removing the low-frequency square,
/// per channel and before renormalization.
pub fn high_freq_filtered(image: &Tensor<f32>, tau: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("mask ratio {tau} outside [0, 1)")));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a (C, H, W) image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let side = low_freq_side(h, w, tau);
    let norm = (h * w) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> = image.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .collect();
        fft2(&mut buf, h, w, false);
        for ky in 0..h {
            for kx in 0..w {
                if in_low_freq_square(ky, kx, h, w, side) {
                    buf[ky * w + kx] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, h, w, true);
        out.extend(buf.iter().map(|z| z.re / norm));
    }
    Ok(out)
}

/// High-pass filtered image, min-max renormalized to `[0, 1]` per channel.
/// Channels left flat by the filter come out as zeros.
pub fn high_freq_component(image: &Tensor<f32>, tau: f64) -> Result<Tensor<f32>> {
    let filtered = high_freq_filtered(image, tau)?;
    let s = image.shape();
    let plane = s[1] * s[2];
    let mut out = vec![0.0f32; filtered.len()];
    for ch in 0..s[0] {
        let src = &filtered[ch * plane..(ch + 1) * plane];
        let peak_in = image.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .fold(1.0f64, |m, &v| m.max((v as f64).abs()));
        let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // transform round-off on flat channels is far below this
        if hi - lo <= 1e-9 * peak_in {
            continue;
        }
        for (o, &v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
            *o = ((v - lo) / (hi - lo)) as f32;
        }
    }
    Tensor::from_vec(s, out)
}

/// Stacks the samples at `indices` into `(B, 3, H, W)` images and `(B, 1, H, W)` masks.
pub fn batch(samples: &[SegSample], indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = indices.iter().map(|&i| samples[i].image.clone()).collect();
    let masks: Vec<_> = indices.iter().map(|&i| samples[i].mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
