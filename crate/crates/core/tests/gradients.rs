//! Reverse-mode gradients of every differentiable operation against
//! central finite differences.

use air_core::nets::{build_network, NetworkSpec};
use air_core::resampler::{affine_grid_var, bilinear_sample_var, rigid_to_affine, warp_var};
use air_core::rng::seeded;
use air_core::tensor::gradcheck::check_gradients;
use air_core::tensor::{self, Graph, Result, Tensor, Var};
use rand::Rng;

const EPS: f32 = 1e-2;
const TOL: f64 = 1e-3;
const DEEP_TOL: f64 = 5e-3;
const WARP_TOL: f64 = 1e-2;
/// Bilinear interpolation is piecewise linear in the sample position; a
/// small step keeps most samples inside their cell.
const WARP_EPS: f32 = 3e-4;
/// Large enough to stay above f32 noise through eleven conv layers, small
/// enough that few ReLU inputs cross zero.
const DEEP_EPS: f32 = 3e-3;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}

/// Random values kept at least `gap` away from zero, so a finite-difference
/// step never crosses the ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64, gap: f32) -> Tensor {
    random(shape, seed).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn assert_close<F>(name: &str, f: F, inputs: &[Tensor], eps: f32, tol: f64)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let check = check_gradients(f, inputs, eps, 17).unwrap();
    let err = check.max_rel_error();
    assert!(
        err <= tol,
        "{name}: relative error {err:.2e} > {tol:.0e} ({:?})",
        check.rel_errors
    );
}

#[test]
fn conv2d_plain_strided_and_dilated() {
    for (stride, padding, dilation) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)] {
        let inputs = [
            random(&[2, 3, 7, 7], 1),
            random(&[4, 3, 3, 3], 2),
            random(&[4], 3),
        ];
        assert_close(
            &format!("conv2d s{stride} p{padding} d{dilation}"),
            |_, v| tensor::conv2d(v[0], v[1], Some(v[2]), stride, padding, dilation),
            &inputs,
            EPS,
            TOL,
        );
    }
    let pointwise = [random(&[2, 5, 4, 4], 4), random(&[3, 5, 1, 1], 5)];
    assert_close(
        "conv2d 1x1",
        |_, v| tensor::conv2d(v[0], v[1], None, 1, 0, 1),
        &pointwise,
        EPS,
        TOL,
    );
}

#[test]
fn linear_layer() {
    let inputs = [random(&[3, 6], 1), random(&[4, 6], 2), random(&[4], 3)];
    assert_close(
        "linear",
        |_, v| tensor::linear(v[0], v[1], v[2]),
        &inputs,
        EPS,
        TOL,
    );
}

#[test]
fn pointwise_activations() {
    let x = [away_from_zero(&[2, 3, 4], 1, 0.05)];
    assert_close("relu", |_, v| Ok(tensor::relu(v[0])), &x, EPS, TOL);
    assert_close("sigmoid", |_, v| Ok(tensor::sigmoid(v[0])), &x, EPS, TOL);
    assert_close("scale", |_, v| Ok(tensor::scale(v[0], -1.7)), &x, EPS, TOL);
    assert_close(
        "add_scalar",
        |_, v| Ok(tensor::add_scalar(v[0], 0.3)),
        &x,
        EPS,
        TOL,
    );
}

#[test]
fn binary_ops() {
    let ab = [random(&[3, 5], 1), random(&[3, 5], 2)];
    assert_close("add", |_, v| tensor::add(v[0], v[1]), &ab, EPS, TOL);
    assert_close("sub", |_, v| tensor::sub(v[0], v[1]), &ab, EPS, TOL);
    assert_close("mul", |_, v| tensor::mul(v[0], v[1]), &ab, EPS, TOL);
    let imgs = [random(&[2, 1, 3, 3], 3), random(&[2, 2, 3, 3], 4)];
    assert_close(
        "concat_channels",
        |_, v| tensor::concat_channels(v[0], v[1]),
        &imgs,
        EPS,
        TOL,
    );
}

#[test]
fn reductions_and_reshape() {
    let x = [random(&[4, 6], 1)];
    assert_close(
        "reduce_mean",
        |_, v| tensor::reduce_mean(v[0]),
        &x,
        EPS,
        TOL,
    );
    assert_close(
        "reshape",
        |_, v| tensor::reshape(v[0], &[2, 12]),
        &x,
        EPS,
        TOL,
    );
    let ab = [random(&[2, 3], 2), random(&[2, 3], 3)];
    assert_close(
        "squared_l2",
        |_, v| tensor::squared_l2(v[0], v[1]),
        &ab,
        EPS,
        TOL,
    );
}

#[test]
fn affine_grid_from_rigid_params() {
    let p = [Tensor::new([2, 3], vec![0.3, 0.1, -0.2, -0.5, 0.05, 0.15]).unwrap()];
    assert_close(
        "rigid_to_affine",
        |_, v| rigid_to_affine(v[0]),
        &p,
        EPS,
        TOL,
    );
    let m = [random(&[2, 6], 4)];
    assert_close(
        "affine_grid",
        |_, v| affine_grid_var(v[0], 5, 6),
        &m,
        EPS,
        TOL,
    );
}

#[test]
fn bilinear_sample_image_and_grid() {
    // Grid points keep clear of pixel boundaries (where the bilinear
    // weights have kinks) and of the border.
    let (h, w) = (6, 7);
    let mut rng = seeded(9);
    let grid = Tensor::from_fn([2, 4, 5, 2], |i| {
        let len = if i % 2 == 0 { w } else { h };
        let cell = rng.gen_range(0..len - 1) as f32;
        let frac = rng.gen_range(0.2f32..0.8);
        -1.0 + 2.0 * (cell + frac) / (len - 1) as f32
    });
    let image = random(&[2, 3, h, w], 10);
    assert_close(
        "bilinear_sample",
        |_, v| bilinear_sample_var(v[0], v[1]),
        &[image, grid],
        1e-2,
        TOL,
    );
}

#[test]
fn warp_parameter_path() {
    // Smooth image so the warp is differentiable at the FD scale.
    let (h, w) = (16, 16);
    let image = Tensor::from_fn([2, 2, h, w], |i| {
        let (c, y, x) = ((i / (h * w)) % 2, (i / w) % h, i % w);
        let (u, v) = (x as f32 / (w - 1) as f32, y as f32 / (h - 1) as f32);
        (3.0 * u + 2.0 * v * (c as f32 + 1.0)).sin() + (4.0 * u * v).cos()
    });
    let params = Tensor::new([2, 3], vec![0.2, 0.05, -0.1, -0.3, -0.08, 0.04]).unwrap();
    let img = image.clone();
    assert_close(
        "warp params",
        move |g, v| warp_var(g.constant(img.clone()), v[0]),
        &[params],
        WARP_EPS,
        WARP_TOL,
    );
}

#[test]
fn deep_generator_composition() {
    // Full generator forward on a 2x2x16x16 input, with the zero-initialized
    // head replaced so the output depends on the input.
    let spec = NetworkSpec::generator(2, 3)
        .with_size(16)
        .with_widths(4, 2, 8);
    let mut net = build_network(spec, 3).unwrap();
    let mut rng = seeded(4);
    for t in net.params_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1f32..0.1));
    }
    let x = random(&[2, 2, 16, 16], 5);
    let check =
        check_gradients(|g, v| net.bind(g, false).forward(v[0]), &[x], DEEP_EPS, 17).unwrap();
    let err = check.max_rel_error();
    assert!(err <= DEEP_TOL, "generator input gradient: {err:.2e}");
}
