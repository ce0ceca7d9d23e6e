//! Resampling properties on realistic images.

use air_core::geometry::RigidParams2D;
use air_core::resampler::warp;
use air_core::rng::seeded;
use air_core::synthdata::generate_pair;
use air_core::tensor::Tensor;
use rand::Rng;

/// Normalized cross-correlation over the central `[margin, size - margin)`
/// square of every channel.
fn interior_ncc(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..c {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = (k * h + y) * w + x;
                xs.push(a.data()[i] as f64);
                ys.push(b.data()[i] as f64);
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn small_transform(rng: &mut impl Rng) -> RigidParams2D {
    RigidParams2D::new(
        rng.gen_range(-0.15..0.15),
        rng.gen_range(-0.08..0.08),
        rng.gen_range(-0.08..0.08),
    )
}

#[test]
fn warping_twice_equals_warping_by_the_composite() {
    // Pull semantics: warp(warp(img, b), a) samples img at M_b M_a x, which
    // is warp(img, compose(b, a)).
    let mut rng = seeded(11);
    for seed in 0..10 {
        let img = generate_pair(seed, 64, 2, 1.0).unwrap().fixed;
        let (a, b) = (small_transform(&mut rng), small_transform(&mut rng));
        let twice = warp(&warp(&img, b).unwrap(), a).unwrap();
        let once = warp(&img, b.compose(a)).unwrap();
        let ncc = interior_ncc(&twice, &once, 12);
        assert!(ncc >= 0.97, "seed {seed}: NCC {ncc:.4}");
    }
}

#[test]
fn round_trip_through_the_inverse_preserves_the_interior() {
    let mut rng = seeded(12);
    for seed in 0..10 {
        let img = generate_pair(seed, 64, 2, 1.0).unwrap().moving;
        let t = small_transform(&mut rng);
        let back = warp(&warp(&img, t).unwrap(), t.invert()).unwrap();
        let ncc = interior_ncc(&back, &img, 12);
        assert!(ncc >= 0.97, "seed {seed}: NCC {ncc:.4}");
    }
}

#[test]
fn output_range_is_within_input_range_and_zero() {
    let mut rng = seeded(13);
    for seed in 0..10 {
        let img = generate_pair(seed, 32, 1, 1.0)
            .unwrap()
            .fixed
            .map(|v| v - 0.3);
        let lo = img.data().iter().copied().fold(0.0f32, f32::min);
        let hi = img.data().iter().copied().fold(f32::MIN, f32::max);
        let t = RigidParams2D::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        for v in warp(&img, t).unwrap().data() {
            assert!(
                *v >= lo - 1e-6 && *v <= hi.max(0.0) + 1e-6,
                "{v} outside [{lo}, {hi}]"
            );
        }
    }
}

#[test]
fn identity_warp_is_exact_on_generated_images() {
    for seed in 0..5 {
        let img = generate_pair(seed, 64, 2, 1.0).unwrap().moving;
        let out = warp(&img, RigidParams2D::IDENTITY).unwrap();
        let err = img
            .data()
            .iter()
            .zip(out.data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6, "{err}");
    }
}
