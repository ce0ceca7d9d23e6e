//! Exact identities of the transform algebra and the TRE metric.

use air_core::evaluator::tre;
use air_core::geometry::{param_distance, RigidParams2D};
use air_core::resampler::warp;
use air_core::rng::seeded;
use air_core::tensor::Tensor;
use rand::Rng;

fn random_params(rng: &mut impl Rng) -> RigidParams2D {
    RigidParams2D::new(
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    )
}

fn max_abs(a: RigidParams2D, b: RigidParams2D) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let mut d = (a[0] - b[0]).abs();
    // Angles compare on the circle.
    d = d.min(std::f64::consts::TAU - d);
    d.max((a[1] - b[1]).abs()).max((a[2] - b[2]).abs())
}

#[test]
fn identity_warp_reproduces_random_input() {
    let mut rng = seeded(1);
    let img = Tensor::from_fn([3, 17, 23], |_| rng.gen_range(-5.0f32..5.0));
    let out = warp(&img, RigidParams2D::IDENTITY).unwrap();
    let err = img
        .data()
        .iter()
        .zip(out.data())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn compose_and_invert_round_trip() {
    let mut rng = seeded(2);
    for _ in 0..1000 {
        let (a, b) = (random_params(&mut rng), random_params(&mut rng));
        assert!(max_abs(a.compose(a.invert()), RigidParams2D::IDENTITY) <= 1e-5);
        assert!(max_abs(a.invert().compose(a), RigidParams2D::IDENTITY) <= 1e-5);
        assert!(max_abs(a.invert().invert(), a) <= 1e-5);
        assert!(max_abs(a.compose(b).compose(b.invert()), a) <= 1e-5);
        // Point action agrees with the matrix product.
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (lhs, rhs) = (a.compose(b).apply(p), a.apply(b.apply(p)));
        assert!((lhs[0] - rhs[0]).abs() <= 1e-9 && (lhs[1] - rhs[1]).abs() <= 1e-9);
        assert!(param_distance(a, a) == 0.0);
    }
}

#[test]
fn tre_of_a_pure_translation_is_its_length_in_mm() {
    let mut rng = seeded(3);
    for _ in 0..200 {
        let size = rng.gen_range(16..512usize);
        let spacing = rng.gen_range(0.1..3.0);
        let (dx, dy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let gt = random_params(&mut rng);
        let est = RigidParams2D::new(gt.theta, gt.tx + dx, gt.ty + dy);
        // Normalized units span size/2 pixels.
        let want = (dx * dx + dy * dy).sqrt() * size as f64 / 2.0 * spacing;
        let got = tre(est, gt, spacing, size);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}
