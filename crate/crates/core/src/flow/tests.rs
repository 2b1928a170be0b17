use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Smooth random texture: a seeded sum of plane waves, kept inside [0, 1].
fn texture(seed: u64) -> impl Fn(f64, f64) -> f64 + Sync + Send + Clone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..24)
        .map(|_| {
            let k = std::f64::consts::TAU / rng.random_range(10.0..40.0);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (k * a.cos(), k * a.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    move |x, y| {
        let s: f64 = waves.iter().map(|(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum();
        0.5 + 0.5 * (s / (waves.len() as f64).sqrt()).tanh()
    }
}

fn shifted_pair(seed: u64, w: usize, h: usize, dx: f64, dy: f64) -> (Image, Image) {
    let tex = texture(seed);
    let t2 = tex.clone();
    let a = Image::from_fn(w, h, move |x, y| tex(x as f64, y as f64)).unwrap();
    let b = Image::from_fn(w, h, move |x, y| t2(x as f64 - dx, y as f64 - dy)).unwrap();
    (a, b)
}

fn interior_mean(f: &FlowField, margin: usize) -> (f64, f64) {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
    for y in margin..f.height - margin {
        for x in margin..f.width - margin {
            let i = y * f.width + x;
            su += f.u[i];
            sv += f.v[i];
            n += 1.0;
        }
    }
    (su / n, sv / n)
}

#[test]
fn identical_frames_give_zero_flow() {
    let (a, _) = shifted_pair(1, 96, 80, 0.0, 0.0);
    let f = lucas_kanade(&a, &a, 15, 2).unwrap();
    assert!(f.u.iter().chain(&f.v).all(|x| *x == 0.0));
}

#[test]
fn flat_images_are_low_confidence() {
    let a = Image::new(64, 64, vec![0.4; 64 * 64]).unwrap();
    let b = Image::new(64, 64, vec![0.6; 64 * 64]).unwrap();
    let f = lucas_kanade(&a, &b, 7, 2).unwrap();
    assert!(f.low_confidence.iter().all(|l| *l));
    assert!(f.u.iter().chain(&f.v).all(|x| *x == 0.0));
}

#[test]
fn recovers_synthetic_shift() {
    let (a, b) = shifted_pair(2, 160, 120, 2.0, 0.0);
    let f = lucas_kanade(&a, &b, 15, 3).unwrap();
    let (u, v) = interior_mean(&f, 20);
    assert!((u - 2.0).abs() < 0.2 && v.abs() < 0.2, "({u}, {v})");
}

#[test]
fn flow_is_linear_in_integer_shifts() {
    let (a, b) = shifted_pair(3, 160, 120, 1.3, -0.6);
    let (_, b2) = shifted_pair(3, 160, 120, 1.3 + 2.0, -0.6 + 1.0);
    let f1 = lucas_kanade(&a, &b, 15, 3).unwrap();
    let f2 = lucas_kanade(&a, &b2, 15, 3).unwrap();
    let (u1, v1) = interior_mean(&f1, 24);
    let (u2, v2) = interior_mean(&f2, 24);
    assert!((u2 - u1 - 2.0).abs() < 0.3, "{u1} {u2}");
    assert!((v2 - v1 - 1.0).abs() < 0.3, "{v1} {v2}");
}

#[test]
fn lk_is_deterministic_across_thread_counts() {
    let (a, b) = shifted_pair(4, 128, 96, 1.5, 0.5);
    let f1 = crate::par::with_threads(1, || lucas_kanade(&a, &b, 15, 3).unwrap());
    let f4 = crate::par::with_threads(4, || lucas_kanade(&a, &b, 15, 3).unwrap());
    let bits = |f: &FlowField| f.u.iter().chain(&f.v).map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&f1), bits(&f4));
}

#[test]
fn lk_argument_errors() {
    let (a, _) = shifted_pair(5, 64, 48, 0.0, 0.0);
    let small = Image::new(32, 48, vec![0.0; 32 * 48]).unwrap();
    assert!(lucas_kanade(&a, &small, 15, 1).is_err());
    assert!(lucas_kanade(&a, &a, 4, 1).is_err());
    assert!(lucas_kanade(&a, &a, 1, 1).is_err());
    assert!(lucas_kanade(&a, &a, 15, 0).is_err());
    // 48 >> 2 = 12 < 15
    assert!(lucas_kanade(&a, &a, 15, 3).is_err());
    assert!(lucas_kanade(&a, &a, 15, 2).is_ok());
}

#[test]
fn pool_shapes_and_block_means() {
    let f = FlowField::zeros(640, 480);
    let p = mean_pool(&f, 4).unwrap();
    assert_eq!((p.width, p.height), (160, 120));

    let vals: Vec<f64> = (0..64).map(|i| i as f64).collect();
    let f = FlowField::new(8, 8, vals.clone(), vals.iter().map(|x| -x).collect()).unwrap();
    let p = mean_pool(&f, 4).unwrap();
    for by in 0..2 {
        for bx in 0..2 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += vals[(4 * by + y) * 8 + 4 * bx + x];
                }
            }
            assert_eq!(p.u[by * 2 + bx], s / 16.0);
            assert_eq!(p.v[by * 2 + bx], -s / 16.0);
        }
    }

    let c = FlowField::new(12, 8, vec![0.37; 96], vec![-1.5; 96]).unwrap();
    let p = mean_pool(&c, 4).unwrap();
    assert!(p.u.iter().all(|x| (*x - 0.37).abs() < 1e-15));
    assert!(p.v.iter().all(|x| *x == -1.5));
    assert!(mean_pool(&c, 3).is_err());
    assert!(mean_pool(&c, 0).is_err());
}

#[test]
fn pool_preserves_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in [1, 2, 4, 8] {
        let n = 64 * 48;
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = FlowField::new(64, 48, u, v).unwrap();
        let p = mean_pool(&f, k).unwrap();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!((mean(&f.u) - mean(&p.u)).abs() < 1e-12);
        assert!((mean(&f.v) - mean(&p.v)).abs() < 1e-12);
    }
}

#[test]
fn flow_and_pgm_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = FlowField::new(3, 2, vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75], vec![1.0; 6]).unwrap();
    let path = dir.path().join("a.flow");
    write_flow(&f, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"PFLW");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(bytes.len(), 12 + 6 * 8);
    assert_eq!(read_flow(&path).unwrap(), f);

    std::fs::write(&path, &bytes[..20]).unwrap();
    assert!(matches!(read_flow(&path), Err(Error::Format(_))));

    let img = Image::new(4, 2, (0..8).map(|i| i as f64 / 7.0).collect()).unwrap();
    let path = dir.path().join("a.pgm");
    write_pgm(&img, &path).unwrap();
    let back = read_pgm(&path).unwrap();
    assert!(img.pixels.iter().zip(&back.pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0));
}

#[test]
fn luminance_conversion() {
    let img = Image::from_rgb8(2, 1, &[255, 255, 255, 255, 0, 0]).unwrap();
    assert!((img.pixels[0] - 1.0).abs() < 1e-12);
    assert!((img.pixels[1] - 0.299).abs() < 1e-12);
}
