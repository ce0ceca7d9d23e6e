//! Differentiable spatial-transformer warping.
//!
//! Coordinates are normalized with pixel centers at the extremes: `(-1, -1)`
//! is the center of the top-left pixel and `(1, 1)` the center of the
//! bottom-right one, so column `j` of a `W`-wide image sits at
//! `x = -1 + 2j/(W-1)`. One pixel pitch is therefore `2/(W-1)`.
//!
//! Grids have pull semantics: `grid[i, j]` is the source location sampled
//! for target pixel `(i, j)`. Samples outside the source read as zero.

use crate::geometry::{AffineMatrix2D, RigidParams2D};
use crate::tensor::{shape_err, Backward, Result, Tensor, TensorError, Var};

/// `[H, W, 2]` tensor of `(x, y)` source coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid(Tensor);

impl SampleGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(shape_err(
                "SampleGrid",
                format!("expected [H,W,2], got {s:?}"),
            ));
        }
        Ok(Self(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn at(&self, i: usize, j: usize) -> [f32; 2] {
        let k = (i * self.width() + j) * 2;
        [self.0.data()[k], self.0.data()[k + 1]]
    }
}

/// Normalized coordinate of pixel index `idx` along an axis of `len` pixels.
pub fn pixel_to_normalized(idx: usize, len: usize) -> f64 {
    -1.0 + 2.0 * idx as f64 / (len - 1) as f64
}

fn check_grid_size(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(TensorError::Argument {
            op,
            detail: format!("grid must be at least 2x2, got {h}x{w}"),
        });
    }
    Ok(())
}

fn fill_grid(m: &[f32], h: usize, w: usize, out: &mut [f32]) {
    let xs: Vec<f32> = (0..w).map(|j| pixel_to_normalized(j, w) as f32).collect();
    for i in 0..h {
        let y = pixel_to_normalized(i, h) as f32;
        for (j, &x) in xs.iter().enumerate() {
            let k = (i * w + j) * 2;
            out[k] = m[0] * x + m[1] * y + m[2];
            out[k + 1] = m[3] * x + m[4] * y + m[5];
        }
    }
}

/// Sampling grid `m * (x(j), y(i), 1)` for an `h x w` target.
pub fn affine_grid(m: &AffineMatrix2D, h: usize, w: usize) -> Result<SampleGrid> {
    check_grid_size("affine_grid", h, w)?;
    let mut data = vec![0.0; h * w * 2];
    fill_grid(&m.to_f32(), h, w, &mut data);
    SampleGrid::new(Tensor::new([h, w, 2], data)?)
}

/// Bilinear taps for one source location: the four corner offsets (or
/// `None` outside the image) with their weights, plus the fractional parts.
struct Taps {
    idx: [Option<usize>; 4],
    weight: [f32; 4],
    fx: f32,
    fy: f32,
}

#[inline]
/// Rounds a pixel position lying within a few ulps of a pixel centre onto
/// it, so grids that revisit the source lattice (e.g. the identity) copy
/// pixels exactly instead of blending in f32 round-off.
fn snap(p: f32) -> f32 {
    let r = p.round();
    if (p - r).abs() <= 4.0 * f32::EPSILON * r.abs().max(1.0) {
        r
    } else {
        p
    }
}

fn taps(gx: f32, gy: f32, h: usize, w: usize) -> Taps {
    let px = snap((gx + 1.0) * 0.5 * (w - 1) as f32);
    let py = snap((gy + 1.0) * 0.5 * (h - 1) as f32);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |y: i64, x: i64| {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
            .then(|| y as usize * w + x as usize)
    };
    Taps {
        idx: [
            at(y0, x0),
            at(y0, x0 + 1),
            at(y0 + 1, x0),
            at(y0 + 1, x0 + 1),
        ],
        weight: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}

/// Samples `image [C, Hs, Ws]` at `grid` into a `[C, H, W]` output, where
/// `H x W` is the grid size.
pub fn bilinear_sample(image: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err(
            "bilinear_sample",
            format!("image must be [C,H,W], got {s:?}"),
        ));
    }
    let batched = image.clone().reshaped([1, s[0], s[1], s[2]])?;
    let g = grid
        .tensor()
        .clone()
        .reshaped([1, grid.height(), grid.width(), 2])?;
    let out = sample_batch(&batched, &g)?;
    out.reshaped([s[0], grid.height(), grid.width()])
}

fn check_sample_shapes(image: &[usize], grid: &[usize]) -> Result<()> {
    if image.len() != 4 || grid.len() != 4 || grid[3] != 2 || image[0] != grid[0] {
        return Err(shape_err(
            "bilinear_sample",
            format!("image {image:?} must be [N,C,H,W] and grid {grid:?} [N,H,W,2]"),
        ));
    }
    if image[2] < 2 || image[3] < 2 {
        return Err(TensorError::Argument {
            op: "bilinear_sample",
            detail: format!("source must be at least 2x2, got {image:?}"),
        });
    }
    Ok(())
}

fn sample_batch(image: &Tensor, grid: &Tensor) -> Result<Tensor> {
    check_sample_shapes(image.shape(), grid.shape())?;
    let [n, c, hs, ws] = image.shape().try_into().expect("4d");
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let src = image.data();
    let g = grid.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let k = (b * ho * wo + p) * 2;
            let t = taps(g[k], g[k + 1], hs, ws);
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hs * ws..(b * c + ch + 1) * hs * ws];
                let mut acc = 0.0;
                for (idx, wgt) in t.idx.iter().zip(t.weight) {
                    if let Some(i) = idx {
                        acc += wgt * plane[*i];
                    }
                }
                out[(b * c + ch) * ho * wo + p] = acc;
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Resamples `image [C,H,W]` through the rigid transform `p` on its own grid.
pub fn warp(image: &Tensor, p: RigidParams2D) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err(
            "warp",
            format!("image must be [C,H,W], got {s:?}"),
        ));
    }
    let grid = affine_grid(&p.to_matrix(), s[1], s[2])?;
    bilinear_sample(image, &grid)
}

// ---------------------------------------------------------------------------
// Graph ops

struct RigidToAffine;

impl Backward for RigidToAffine {
    fn name(&self) -> &'static str {
        "rigid_to_affine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let p = inputs[0].data();
        let g = grad.data();
        let mut d = vec![0.0f32; p.len()];
        for (row, (pr, gr)) in d.chunks_mut(3).zip(p.chunks(3).zip(g.chunks(6))) {
            let (s, c) = pr[0].sin_cos();
            // m = [c, -s, tx, s, c, ty]
            row[0] = -s * gr[0] - c * gr[1] + c * gr[3] - s * gr[4];
            row[1] = gr[2];
            row[2] = gr[5];
        }
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), d).expect("rigid grad"),
        )]
    }
}

/// `[N, 3]` rigid parameters to `[N, 6]` matrices `[cos -sin tx sin cos ty]`.
pub fn rigid_to_affine(params: Var<'_>) -> Result<Var<'_>> {
    let s = params.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(shape_err(
            "rigid_to_affine",
            format!("expected [N,3], got {s:?}"),
        ));
    }
    let v = params.value();
    let mut out = Vec::with_capacity(s[0] * 6);
    for p in v.data().chunks(3) {
        let (sn, cs) = p[0].sin_cos();
        out.extend_from_slice(&[cs, -sn, p[1], sn, cs, p[2]]);
    }
    let out = Tensor::new([s[0], 6], out)?;
    Ok(params.graph().apply(&[params], out, RigidToAffine))
}

struct AffineGrid {
    h: usize,
    w: usize,
}

impl Backward for AffineGrid {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (h, w) = (self.h, self.w);
        let xs: Vec<f32> = (0..w).map(|j| pixel_to_normalized(j, w) as f32).collect();
        let g = grad.data();
        let n = inputs[0].shape()[0];
        let mut d = vec![0.0f32; n * 6];
        for (b, dm) in d.chunks_mut(6).enumerate() {
            let mut acc = [0.0f64; 6];
            for i in 0..h {
                let y = pixel_to_normalized(i, h);
                for (j, &x) in xs.iter().enumerate() {
                    let k = ((b * h + i) * w + j) * 2;
                    let (gx, gy) = (g[k] as f64, g[k + 1] as f64);
                    let x = x as f64;
                    acc[0] += gx * x;
                    acc[1] += gx * y;
                    acc[2] += gx;
                    acc[3] += gy * x;
                    acc[4] += gy * y;
                    acc[5] += gy;
                }
            }
            for (o, a) in dm.iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
        vec![Some(Tensor::new([n, 6], d).expect("grid grad"))]
    }
}

/// Batched [`affine_grid`]: `[N, 6]` matrices to an `[N, H, W, 2]` grid.
pub fn affine_grid_var(m: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    check_grid_size("affine_grid", h, w)?;
    let s = m.shape();
    if s.len() != 2 || s[1] != 6 {
        return Err(shape_err(
            "affine_grid",
            format!("expected [N,6], got {s:?}"),
        ));
    }
    let v = m.value();
    let mut out = vec![0.0f32; s[0] * h * w * 2];
    for (mat, dst) in v.data().chunks(6).zip(out.chunks_mut(h * w * 2)) {
        fill_grid(mat, h, w, dst);
    }
    let out = Tensor::new([s[0], h, w, 2], out)?;
    Ok(m.graph().apply(&[m], out, AffineGrid { h, w }))
}

struct BilinearSample;

impl Backward for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (image, grid) = (inputs[0], inputs[1]);
        let [n, c, hs, ws] = image.shape().try_into().expect("4d");
        let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
        let src = image.data();
        let g = grid.data();
        let dy = grad.data();
        let mut d_image = needs[0].then(|| vec![0.0f32; image.len()]);
        let mut d_grid = needs[1].then(|| vec![0.0f32; grid.len()]);
        let sx = 0.5 * (ws - 1) as f32;
        let sy = 0.5 * (hs - 1) as f32;
        for b in 0..n {
            for p in 0..ho * wo {
                let k = (b * ho * wo + p) * 2;
                let t = taps(g[k], g[k + 1], hs, ws);
                let (mut gx, mut gy) = (0.0f32, 0.0f32);
                for ch in 0..c {
                    let base = (b * c + ch) * hs * ws;
                    let up = dy[(b * c + ch) * ho * wo + p];
                    if let Some(di) = d_image.as_mut() {
                        for (idx, wgt) in t.idx.iter().zip(t.weight) {
                            if let Some(i) = idx {
                                di[base + i] += wgt * up;
                            }
                        }
                    }
                    if d_grid.is_some() {
                        let v = t.idx.map(|i| i.map_or(0.0, |i| src[base + i]));
                        let dpx = (v[1] - v[0]) * (1.0 - t.fy) + (v[3] - v[2]) * t.fy;
                        let dpy = (v[2] - v[0]) * (1.0 - t.fx) + (v[3] - v[1]) * t.fx;
                        gx += up * dpx;
                        gy += up * dpy;
                    }
                }
                if let Some(dg) = d_grid.as_mut() {
                    dg[k] = gx * sx;
                    dg[k + 1] = gy * sy;
                }
            }
        }
        vec![
            d_image.map(|d| Tensor::new(image.shape().to_vec(), d).expect("d_image")),
            d_grid.map(|d| Tensor::new(grid.shape().to_vec(), d).expect("d_grid")),
        ]
    }
}

/// Batched [`bilinear_sample`]: `image [N,C,Hs,Ws]`, `grid [N,H,W,2]`.
/// Differentiable with respect to both image values and grid coordinates.
pub fn bilinear_sample_var<'g>(image: Var<'g>, grid: Var<'g>) -> Result<Var<'g>> {
    let out = sample_batch(&image.value(), &grid.value())?;
    Ok(image.graph().apply(&[image, grid], out, BilinearSample))
}

/// Batched differentiable warp of `image [N,C,H,W]` by `params [N,3]`.
pub fn warp_var<'g>(image: Var<'g>, params: Var<'g>) -> Result<Var<'g>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(shape_err(
            "warp",
            format!("image must be [N,C,H,W], got {s:?}"),
        ));
    }
    let m = rigid_to_affine(params)?;
    let grid = affine_grid_var(m, s[2], s[3])?;
    bilinear_sample_var(image, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use std::f64::consts::PI;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn([c, h, w], |i| ((i * 37 % 101) as f32) / 100.0)
    }

    #[test]
    fn identity_grid_corners() {
        let g = affine_grid(&AffineMatrix2D::IDENTITY, 5, 7).unwrap();
        assert_eq!(g.at(0, 0), [-1.0, -1.0]);
        assert_eq!(g.at(4, 6), [1.0, 1.0]);
        for j in 0..7 {
            let expect = -1.0 + 2.0 * j as f32 / 6.0;
            assert!((g.at(2, j)[0] - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn translated_grid_shifts_x() {
        let id = affine_grid(&AffineMatrix2D::IDENTITY, 4, 4).unwrap();
        let t = affine_grid(&RigidParams2D::new(0.0, 0.5, 0.0).to_matrix(), 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((t.at(i, j)[0] - id.at(i, j)[0] - 0.5).abs() < 1e-6);
                assert_eq!(t.at(i, j)[1], id.at(i, j)[1]);
            }
        }
    }

    #[test]
    fn rotated_grid_corners_match_matrix_vector_products() {
        let m = RigidParams2D::new(PI / 2.0, 0.0, 0.0).to_matrix();
        let g = affine_grid(&m, 3, 3).unwrap();
        let corners = [(0, 0), (0, 2), (2, 0), (2, 2)];
        for (i, j) in corners {
            let x = pixel_to_normalized(j, 3);
            let y = pixel_to_normalized(i, 3);
            let want = [-y, x];
            let got = g.at(i, j);
            assert!((got[0] as f64 - want[0]).abs() < 1e-6);
            assert!((got[1] as f64 - want[1]).abs() < 1e-6);
        }
        // Target corner (x=1, y=-1) pulls from source (1, 1).
        assert!((g.at(0, 2)[0] - 1.0).abs() < 1e-6 && (g.at(0, 2)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_rejects_degenerate_sizes() {
        assert!(affine_grid(&AffineMatrix2D::IDENTITY, 1, 4).is_err());
        assert!(affine_grid(&AffineMatrix2D::IDENTITY, 4, 1).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp(2, 9, 11);
        let out = warp(&img, RigidParams2D::IDENTITY).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant_in_bounds() {
        let img = Tensor::full([1, 8, 8], 0.7);
        let m = AffineMatrix2D([0.5, 0.1, 0.05, -0.1, 0.5, -0.1]);
        let grid = affine_grid(&m, 8, 8).unwrap();
        let out = bilinear_sample(&img, &grid).unwrap();
        for v in out.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn one_pixel_translation_shifts_one_column() {
        let (h, w) = (6, 9);
        let img = ramp(1, h, w);
        let pitch = 2.0 / (w - 1) as f64;
        let out = warp(&img, RigidParams2D::new(0.0, pitch, 0.0)).unwrap();
        // Index-shift oracle: target column j pulls source column j+1.
        for i in 0..h {
            for j in 0..w {
                let want = if j + 1 < w {
                    img.data()[i * w + j + 1]
                } else {
                    0.0
                };
                let got = out.data()[i * w + j];
                assert!((got - want).abs() < 1e-5, "({i},{j}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn output_follows_grid_size() {
        let img = ramp(3, 10, 10);
        let grid = affine_grid(&AffineMatrix2D::IDENTITY, 4, 5).unwrap();
        let out = bilinear_sample(&img, &grid).unwrap();
        assert_eq!(out.shape(), &[3, 4, 5]);
    }

    #[test]
    fn graph_warp_matches_plain_warp() {
        let img = ramp(2, 12, 12);
        let p = RigidParams2D::new(0.3, 0.1, -0.05);
        let plain = warp(&img, p).unwrap();
        let g = Graph::new();
        let x = g.constant(img.clone().reshaped([1, 2, 12, 12]).unwrap());
        let pv = g.param(Tensor::new([1, 3], p.to_f32().to_vec()).unwrap());
        let out = warp_var(x, pv).unwrap().value();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
