use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tssam_core::data::{
    self, generate_synthetic, high_freq_component, high_freq_filtered, load_folder, low_freq_side, write_gray_png,
    write_image_png, write_synthetic, Difficulty, SegSample,
};
use tssam_core::{Error, Tensor};

fn gray(path: &Path, h: usize, w: usize, value: f32) {
    write_gray_png(path, &Tensor::full(&[1, h, w], value)).unwrap();
}

#[test]
fn folder_loading_pairs_by_stem_and_binarizes_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (im, mk) = (dir.path().join("im"), dir.path().join("gt"));
    std::fs::create_dir_all(&im).unwrap();
    std::fs::create_dir_all(&mk).unwrap();
    for id in ["a", "b", "c", "only_image"] {
        write_image_png(&im.join(format!("{id}.png")), &Tensor::full(&[3, 4, 6], 0.5)).unwrap();
    }
    gray(&mk.join("a.png"), 4, 6, 128.0 / 255.0);
    gray(&mk.join("b.png"), 4, 6, 127.0 / 255.0);
    gray(&mk.join("c.png"), 4, 6, 1.0);
    gray(&mk.join("only_mask.png"), 4, 6, 1.0);
    std::fs::write(mk.join("notes.txt"), "ignored").unwrap();

    let load = load_folder(&im, &mk).unwrap();
    let ids: Vec<&str> = load.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(load.warnings.len(), 2);
    assert!(load.warnings[0].contains("only_image") && load.warnings[1].contains("only_mask"));
    assert!(load.samples[0].mask.data().iter().all(|&v| v == 1.0));
    assert!(load.samples[1].mask.data().iter().all(|&v| v == 0.0));
    assert_eq!(load.samples[0].hw(), (4, 6));
    assert!(load.samples[0].image.data().iter().all(|&v| v == 128.0 / 255.0));
}

#[test]
fn folder_loading_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (im, mk) = (dir.path().join("im"), dir.path().join("gt"));
    std::fs::create_dir_all(&im).unwrap();
    std::fs::create_dir_all(&mk).unwrap();
    assert!(matches!(load_folder(&im, &mk), Err(Error::Data(_))));
    assert!(load_folder(&dir.path().join("missing"), &mk).is_err());

    write_image_png(&im.join("x.png"), &Tensor::full(&[3, 4, 4], 0.5)).unwrap();
    gray(&mk.join("x.png"), 4, 5, 1.0);
    assert!(matches!(load_folder(&im, &mk), Err(Error::Data(_))));
}

#[test]
fn synthetic_folder_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(3, (32, 48), 5, Difficulty::High).unwrap();
    let manifest = write_synthetic(dir.path(), &samples, 5, Difficulty::High).unwrap();
    assert_eq!(manifest.n, 3);
    assert_eq!(manifest.size, [32, 48]);
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let parsed: data::SynthManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, manifest);

    let load = load_folder(&dir.path().join("images"), &dir.path().join("masks")).unwrap();
    assert!(load.warnings.is_empty());
    for (a, b) in samples.iter().zip(&load.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        // 8-bit quantization
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
    }

    // same seed, same bytes
    let again = tempfile::tempdir().unwrap();
    let m2 = write_synthetic(again.path(), &samples, 5, Difficulty::High).unwrap();
    assert_eq!(manifest.files, m2.files);
}

#[test]
fn synthetic_foreground_fraction_and_validity() {
    for seed in 0..20 {
        for s in generate_synthetic(2, (64, 64), seed, Difficulty::Low).unwrap() {
            s.validate().unwrap();
            assert!((0.05..=0.5).contains(&s.foreground_fraction()));
        }
    }
}

/// Distance between mean foreground and mean background colour.
fn contrast(s: &SegSample) -> f64 {
    let plane = s.mask.numel();
    let m = s.mask.data();
    let fg = m.iter().filter(|&&v| v == 1.0).count() as f64;
    let mut d2 = 0.0;
    for c in 0..3 {
        let ch = &s.image.data()[c * plane..(c + 1) * plane];
        let (mut a, mut b) = (0.0, 0.0);
        for (v, &k) in ch.iter().zip(m) {
            if k == 1.0 {
                a += *v as f64;
            } else {
                b += *v as f64;
            }
        }
        d2 += (a / fg - b / (plane as f64 - fg)).powi(2);
    }
    d2.sqrt()
}

#[test]
fn high_difficulty_has_lower_contrast() {
    for seed in 0..100 {
        let low = generate_synthetic(1, (32, 32), seed, Difficulty::Low).unwrap();
        let high = generate_synthetic(1, (32, 32), seed, Difficulty::High).unwrap();
        let (cl, ch) = (contrast(&low[0]), contrast(&high[0]));
        assert!(cl > ch, "seed {seed}: low {cl} high {ch}");
    }
    assert_eq!("high".parse::<Difficulty>().unwrap(), Difficulty::High);
    assert!("medium".parse::<Difficulty>().is_err());
}

/// Direct 2-D DFT high-pass: signed frequencies in `[-s/2, s - s/2)` on both axes are removed.
fn dft_high_pass(x: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let signed = |k: usize, n: usize| if k < n / 2 { k as i64 } else { k as i64 - n as i64 };
    let lo = -((side / 2) as i64);
    let hi = (side - side / 2) as i64;
    let kept = |ky: usize, kx: usize| {
        let (fy, fx) = (signed(ky, h), signed(kx, w));
        !(side > 0 && fy >= lo && fy < hi && fx >= lo && fx < hi)
    };
    let mut spec = vec![(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            if !kept(ky, kx) {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                    re += x[y * w + xx] * a.cos();
                    im += x[y * w + xx] * a.sin();
                }
            }
            spec[ky * w + kx] = (re, im);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for ky in 0..h {
                for kx in 0..w {
                    let a = 2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                    let (re, im) = spec[ky * w + kx];
                    s += re * a.cos() - im * a.sin();
                }
            }
            out[y * w + xx] = s / (h * w) as f64;
        }
    }
    out
}

#[test]
fn high_pass_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (h, w, tau) in [(8, 8, 0.25), (8, 8, 0.5), (6, 10, 0.4), (8, 8, 0.0)] {
        let img = Tensor::<f32>::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let got = high_freq_filtered(&img, tau).unwrap();
        let side = low_freq_side(h, w, tau);
        for c in 0..3 {
            let x: Vec<f64> = img.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect();
            let want = dft_high_pass(&x, h, w, side);
            let err = got[c * h * w..(c + 1) * h * w]
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{h}x{w} tau {tau}: {err:e}");
        }
    }
}

#[test]
fn impulse_keeps_the_expected_energy() {
    // A unit impulse has a flat unit spectrum. Keeping the real part averages
    // the mask with its mirror image, so a frequency contributes
    // ((m(k) + m(-k)) / 2)^2 / N to the energy.
    let (n, side) = (8usize, 2usize);
    let mut img = Tensor::<f32>::zeros(&[1, n, n]);
    img.data_mut()[19] = 1.0;
    let out = high_freq_filtered(&img, 0.25).unwrap();
    assert_eq!(low_freq_side(n, n, 0.25), side);
    let signed = |k: usize| if k < n / 2 { k as i64 } else { k as i64 - n as i64 };
    let removed = |fy: i64, fx: i64| (-1..1).contains(&fy) && (-1..1).contains(&fx);
    let mut expected = 0.0;
    for ky in 0..n {
        for kx in 0..n {
            let (fy, fx) = (signed(ky), signed(kx));
            let m = |a: i64, b: i64| if removed(a, b) { 0.0 } else { 1.0 };
            expected += ((m(fy, fx) + m(-fy, -fx)) / 2.0f64).powi(2);
        }
    }
    expected /= (n * n) as f64;
    let energy: f64 = out.iter().map(|v| v * v).sum();
    assert!((energy - expected).abs() < 1e-12, "{energy} vs {expected}");
    assert!(energy <= 1.0 - 1.0 / 64.0);
    // DC is always removed when the square is non-empty
    assert!(out.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn high_frequency_component_is_normalized() {
    let s = generate_synthetic(1, (32, 32), 4, Difficulty::Low).unwrap().remove(0);
    let hf = high_freq_component(&s.image, 0.25).unwrap();
    let plane = 32 * 32;
    for c in 0..3 {
        let ch = &hf.data()[c * plane..(c + 1) * plane];
        let lo = ch.iter().copied().fold(f32::MAX, f32::min);
        let hi = ch.iter().copied().fold(f32::MIN, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}

#[test]
fn batching_stacks_in_index_order() {
    let samples = generate_synthetic(3, (16, 16), 1, Difficulty::Low).unwrap();
    let (images, masks) = data::batch(&samples, &[2, 0]).unwrap();
    assert_eq!(images.shape(), [2, 3, 16, 16]);
    assert_eq!(masks.shape(), [2, 1, 16, 16]);
    assert_eq!(images.batch_item(0).unwrap().data(), samples[2].image.data());
    assert_eq!(masks.batch_item(1).unwrap().data(), samples[0].mask.data());
}

#[test]
fn samples_reject_bad_inputs() {
    let ok = Tensor::full(&[3, 2, 2], 0.5);
    assert!(SegSample::new("m", ok.clone(), Tensor::full(&[1, 2, 2], 0.5)).is_err());
    assert!(SegSample::new("s", ok.clone(), Tensor::zeros(&[1, 2, 3])).is_err());
    assert!(SegSample::new("r", Tensor::full(&[3, 2, 2], 1.5), Tensor::zeros(&[1, 2, 2])).is_err());
    assert!(SegSample::new("c", Tensor::full(&[1, 2, 2], 0.5), Tensor::zeros(&[1, 2, 2])).is_err());
    assert!(SegSample::new("fine", ok, Tensor::ones(&[1, 2, 2])).is_ok());
}
