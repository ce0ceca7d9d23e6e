//! Pseudo-color overlays written as binary PPM (`P6`) images.
//!
//! The fixed image (first channel) is drawn in gray and the warped moving
//! image (first channel) is alpha-blended on top through a color ramp. The
//! critic score is printed in yellow in the top-left corner.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::geometry::RigidParams2D;
use crate::resampler::warp;
use crate::synthdata::ImagePair;

pub type Rgb = [u8; 3];

/// Nearest-neighbour upscaling factor of the rendered image.
pub const OVERLAY_SCALE: usize = 4;
const ALPHA: f32 = 0.5;
const GLYPH_SCALE: usize = 2;
const YELLOW: Rgb = [255, 255, 0];

/// Blue-to-red ramp for a value in `[0, 1]`.
fn ramp(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (2.0 * v - 0.5).clamp(0.0, 1.0),
        1.0 - (2.0 * v - 1.0).abs(),
        (1.5 - 2.0 * v).clamp(0.0, 1.0),
    ]
}

/// Color of one pixel: gray fixed intensity blended with the ramp color of
/// the moving intensity.
pub fn blend_pixel(fixed: f32, moving: f32) -> Rgb {
    let f = fixed.clamp(0.0, 1.0);
    let c = ramp(moving);
    let mix = |k: usize| ((1.0 - ALPHA) * f + ALPHA * c[k]) * 255.0;
    [
        mix(0).round() as u8,
        mix(1).round() as u8,
        mix(2).round() as u8,
    ]
}

/// 3x5 glyphs, one row per byte, bit 2 leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Draws `text` on a black strip at the top-left corner.
    fn text(&mut self, text: &str) {
        let (gw, gh) = (4 * GLYPH_SCALE, 5 * GLYPH_SCALE);
        let pad = GLYPH_SCALE;
        let strip_w = 2 * pad + gw * text.chars().count();
        for y in 0..gh + 2 * pad {
            for x in 0..strip_w {
                self.set(x, y, [0, 0, 0]);
            }
        }
        for (k, ch) in text.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        for dy in 0..GLYPH_SCALE {
                            for dx in 0..GLYPH_SCALE {
                                self.set(
                                    pad + k * gw + col * GLYPH_SCALE + dx,
                                    pad + r * GLYPH_SCALE + dy,
                                    YELLOW,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Renders `warp(moving, t)` over `fixed` as `(width, height, rgb bytes)`.
/// `dscore = None` leaves out the score label.
pub fn render_overlay(
    pair: &ImagePair,
    t: RigidParams2D,
    dscore: Option<f64>,
) -> crate::tensor::Result<(usize, usize, Vec<u8>)> {
    let warped = warp(&pair.moving, t)?;
    let (h, w) = (pair.fixed.shape()[1], pair.fixed.shape()[2]);
    let (fixed, moving) = (&pair.fixed.data()[..h * w], &warped.data()[..h * w]);
    let mut canvas = Canvas {
        width: w * OVERLAY_SCALE,
        height: h * OVERLAY_SCALE,
        rgb: vec![0; 3 * w * h * OVERLAY_SCALE * OVERLAY_SCALE],
    };
    for y in 0..canvas.height {
        for x in 0..canvas.width {
            let i = (y / OVERLAY_SCALE) * w + x / OVERLAY_SCALE;
            canvas.set(x, y, blend_pixel(fixed[i], moving[i]));
        }
    }
    if let Some(s) = dscore {
        canvas.text(&format!("{s:.3}"));
    }
    Ok((canvas.width, canvas.height, canvas.rgb))
}

fn to_io(e: crate::tensor::TensorError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidInput, e.to_string())
}

/// Writes the overlay of `warp(moving, t)` on `fixed` with its critic score.
pub fn emit_overlay(
    pair: &ImagePair,
    t: RigidParams2D,
    dscore: f64,
    path: &Path,
) -> io::Result<()> {
    let (width, height, rgb) = render_overlay(pair, t, Some(dscore)).map_err(to_io)?;
    fs::write(path, Canvas { width, height, rgb }.ppm())
}

/// Before / after / ground-truth overlays of one case, as
/// `{id}_before.ppm`, `{id}_after.ppm` and `{id}_gt.ppm` in `dir`.
/// `dscores` follow the same order.
pub fn emit_triptych(
    pair: &ImagePair,
    initial_t: RigidParams2D,
    estimated_t: RigidParams2D,
    dscores: [f64; 3],
    dir: &Path,
) -> io::Result<[PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let columns = [
        ("before", initial_t),
        ("after", initial_t.compose(estimated_t)),
        ("gt", pair.gt_transform),
    ];
    let mut paths: [PathBuf; 3] = Default::default();
    for (k, (name, t)) in columns.into_iter().enumerate() {
        let path = dir.join(format!("{}_{name}.ppm", pair.id));
        emit_overlay(pair, t, dscores[k], &path)?;
        paths[k] = path;
    }
    Ok(paths)
}
