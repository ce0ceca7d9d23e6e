//! Rigid and affine 2D transforms in normalized image coordinates.
//!
//! The image spans `[-1, 1]` along each axis with the origin at the image
//! center, so rotations turn about the center. Angles are radians.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Three-parameter rigid transform: rotation about the image center followed
/// by a translation. Serialized as `[theta_rad, tx, ty]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct RigidParams2D {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl From<[f64; 3]> for RigidParams2D {
    fn from([theta, tx, ty]: [f64; 3]) -> Self {
        Self { theta, tx, ty }
    }
}

impl From<RigidParams2D> for [f64; 3] {
    fn from(p: RigidParams2D) -> Self {
        p.to_array()
    }
}

impl RigidParams2D {
    pub const IDENTITY: Self = Self {
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Builds parameters with the angle wrapped into `(-pi, pi]`.
    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            tx,
            ty,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.theta, self.tx, self.ty]
    }

    pub fn to_f32(self) -> [f32; 3] {
        [self.theta as f32, self.tx as f32, self.ty as f32]
    }

    pub fn from_f32(v: [f32; 3]) -> Self {
        Self::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    /// `[cos -sin tx; sin cos ty]`.
    pub fn to_matrix(self) -> AffineMatrix2D {
        let (s, c) = self.theta.sin_cos();
        AffineMatrix2D([c, -s, self.tx, s, c, self.ty])
    }

    /// Reads rotation and translation back from a rigid matrix.
    pub fn from_matrix(m: &AffineMatrix2D) -> Self {
        let [a, _, tx, c, _, ty] = m.0;
        Self::new(c.atan2(a), tx, ty)
    }

    /// Rigid inverse: `R^T`, `-R^T t`.
    pub fn invert(self) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self::new(
            -self.theta,
            -(c * self.tx + s * self.ty),
            -(-s * self.tx + c * self.ty),
        )
    }

    /// Matrix product `self * other`: apply `other` first, then `self`.
    pub fn compose(self, other: Self) -> Self {
        Self::from_matrix(&self.to_matrix().compose(&other.to_matrix()))
    }

    pub fn apply(self, point: [f64; 2]) -> [f64; 2] {
        self.to_matrix().apply(point)
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }
}

/// Free-function form of [`RigidParams2D::compose`].
pub fn compose(a: RigidParams2D, b: RigidParams2D) -> RigidParams2D {
    a.compose(b)
}

/// Free-function form of [`RigidParams2D::invert`].
pub fn invert(p: RigidParams2D) -> RigidParams2D {
    p.invert()
}

/// Squared Euclidean distance between two parameter vectors
/// `(theta, tx, ty)`.
pub fn param_distance(a: RigidParams2D, b: RigidParams2D) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Row-major 2x3 matrix `[a b tx; c d ty]` on homogeneous normalized points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix2D(pub [f64; 6]);

impl AffineMatrix2D {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]]
    }

    /// Product `self * other` of the homogeneous 3x3 lifts.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.0;
        let b = &other.0;
        Self([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    /// General affine inverse; `None` for a singular linear block.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let [a, b, tx, c, d, ty] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Self([
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ]))
    }

    pub fn to_f32(&self) -> [f32; 6] {
        self.0.map(|v| v as f32)
    }
}

/// Sampling range for random misalignments, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRange {
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    pub pixel_spacing_mm: f64,
    pub image_size_px: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid perturbation range: {0}")]
pub struct RangeError(String);

impl PerturbationRange {
    /// ±25 degrees and ±5 mm on a 64 px, 1 mm/px grid.
    pub fn desk_default() -> Self {
        Self {
            max_rotation_deg: 25.0,
            max_translation_mm: 5.0,
            pixel_spacing_mm: 1.0,
            image_size_px: 64,
        }
    }

    pub fn validate(&self) -> Result<(), RangeError> {
        let finite_non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_non_negative(self.max_rotation_deg)
            || !finite_non_negative(self.max_translation_mm)
        {
            return Err(RangeError(format!(
                "ranges must be finite and non-negative, got {} deg / {} mm",
                self.max_rotation_deg, self.max_translation_mm
            )));
        }
        if !(self.pixel_spacing_mm.is_finite() && self.pixel_spacing_mm > 0.0) {
            return Err(RangeError(format!(
                "pixel spacing must be positive, got {}",
                self.pixel_spacing_mm
            )));
        }
        if self.image_size_px == 0 {
            return Err(RangeError("image size must be positive".into()));
        }
        Ok(())
    }

    /// Millimetres per normalized unit: half the image extent.
    pub fn mm_per_unit(&self) -> f64 {
        mm_per_unit(self.pixel_spacing_mm, self.image_size_px)
    }

    pub fn max_rotation_rad(&self) -> f64 {
        self.max_rotation_deg.to_radians()
    }

    pub fn max_translation_normalized(&self) -> f64 {
        self.max_translation_mm / self.mm_per_unit()
    }

    /// Independent uniform draws of rotation and both translations.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RigidParams2D {
        let mut symmetric = |half: f64| {
            if half > 0.0 {
                rng.gen_range(-half..=half)
            } else {
                0.0
            }
        };
        let theta = symmetric(self.max_rotation_rad());
        let tx = symmetric(self.max_translation_normalized());
        let ty = symmetric(self.max_translation_normalized());
        RigidParams2D::new(theta, tx, ty)
    }
}

/// Millimetres per normalized unit for an image of `size_px` pixels.
pub fn mm_per_unit(spacing_mm: f64, size_px: usize) -> f64 {
    spacing_mm * size_px as f64 / 2.0
}

/// One perturbation drawn from a generator seeded with `seed`.
pub fn sample_perturbation(range: &PerturbationRange, seed: u64) -> RigidParams2D {
    range.sample(&mut seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-6;

    fn close(a: RigidParams2D, b: RigidParams2D, tol: f64) -> bool {
        wrap_angle(a.theta - b.theta).abs() <= tol
            && (a.tx - b.tx).abs() <= tol
            && (a.ty - b.ty).abs() <= tol
    }

    fn mat_close(a: &AffineMatrix2D, b: &AffineMatrix2D, tol: f64) -> bool {
        a.0.iter().zip(b.0).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn to_matrix_examples() {
        assert_eq!(
            RigidParams2D::IDENTITY.to_matrix(),
            AffineMatrix2D::IDENTITY
        );
        let q = RigidParams2D::new(PI / 2.0, 0.0, 0.0).apply([1.0, 0.0]);
        assert!(q[0].abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
        let t = RigidParams2D::new(0.0, 0.5, 0.0).apply([0.0, 0.0]);
        assert_eq!(t, [0.5, 0.0]);
    }

    #[test]
    fn compose_examples() {
        let t = RigidParams2D::new(0.3, 0.1, -0.4);
        assert!(close(t.compose(RigidParams2D::IDENTITY), t, 1e-12));
        assert!(close(t.compose(t.invert()), RigidParams2D::IDENTITY, 1e-5));
        let q = RigidParams2D::new(PI / 4.0, 0.0, 0.0);
        assert!(close(
            q.compose(q),
            RigidParams2D::new(PI / 2.0, 0.0, 0.0),
            1e-12
        ));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(RigidParams2D::IDENTITY.invert(), RigidParams2D::IDENTITY);
        let inv = RigidParams2D::new(0.0, 0.3, -0.2).invert();
        assert!(close(inv, RigidParams2D::new(0.0, -0.3, 0.2), 1e-15));
    }

    #[test]
    fn theta_wraps_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        let big = RigidParams2D::new(3.0, 0.0, 0.0).compose(RigidParams2D::new(3.0, 0.0, 0.0));
        assert!(big.theta > -PI && big.theta <= PI);
    }

    #[test]
    fn general_affine_inverse() {
        let m = AffineMatrix2D([1.2, 0.3, 0.1, -0.2, 0.9, -0.4]);
        let inv = m.inverse().unwrap();
        assert!(mat_close(
            &m.compose(&inv),
            &AffineMatrix2D::IDENTITY,
            1e-12
        ));
        assert!(AffineMatrix2D([1.0, 2.0, 0.0, 2.0, 4.0, 0.0])
            .inverse()
            .is_none());
    }

    #[test]
    fn perturbation_bounds_and_determinism() {
        let range = PerturbationRange::desk_default();
        let bound = 25.0 * PI / 180.0;
        let t_bound = range.max_translation_normalized();
        assert!((t_bound - 5.0 / 32.0).abs() < 1e-12);
        for seed in 0..2000 {
            let p = sample_perturbation(&range, seed);
            assert!(p.theta.abs() <= bound + 1e-12);
            assert!(p.tx.abs() <= t_bound && p.ty.abs() <= t_bound);
        }
        assert_eq!(
            sample_perturbation(&range, 9),
            sample_perturbation(&range, 9)
        );
        assert_ne!(
            sample_perturbation(&range, 9),
            sample_perturbation(&range, 10)
        );
    }

    #[test]
    fn zero_range_is_identity() {
        let range = PerturbationRange {
            max_rotation_deg: 0.0,
            max_translation_mm: 0.0,
            ..PerturbationRange::desk_default()
        };
        range.validate().unwrap();
        for seed in 0..10 {
            assert!(sample_perturbation(&range, seed).is_identity());
        }
    }

    #[test]
    fn range_validation() {
        let mut r = PerturbationRange::desk_default();
        r.pixel_spacing_mm = 0.0;
        assert!(r.validate().is_err());
        let mut r = PerturbationRange::desk_default();
        r.max_rotation_deg = -1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn distance_examples() {
        let t = RigidParams2D::new(0.2, 0.1, 0.3);
        assert_eq!(param_distance(t, t), 0.0);
        assert_eq!(
            param_distance(RigidParams2D::new(0.0, 1.0, 0.0), RigidParams2D::IDENTITY),
            1.0
        );
    }

    #[test]
    fn serializes_as_three_element_array() {
        let p = RigidParams2D::new(0.25, -0.5, 0.125);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[0.25,-0.5,0.125]");
        let back: RigidParams2D = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    fn arb_params() -> impl Strategy<Value = RigidParams2D> {
        (-PI..PI, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(t, x, y)| RigidParams2D::new(t, x, y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matrix_round_trip(p in arb_params()) {
            let back = RigidParams2D::from_matrix(&p.to_matrix());
            prop_assert!(close(back, p, TOL));
            let m = p.to_matrix();
            prop_assert!((m.determinant() - 1.0).abs() < 1e-5);
            let [a, b, _, c, d, _] = m.0;
            prop_assert!((a * b + c * d).abs() < 1e-5);
            prop_assert!((a * a + c * c - 1.0).abs() < 1e-5);
        }

        #[test]
        fn invert_is_involution(p in arb_params()) {
            prop_assert!(close(p.invert().invert(), p, TOL));
        }

        #[test]
        fn compose_matches_matrix_product(a in arb_params(), b in arb_params()) {
            let lhs = a.compose(b).to_matrix();
            let rhs = a.to_matrix().compose(&b.to_matrix());
            prop_assert!(mat_close(&lhs, &rhs, 1e-5));
        }

        #[test]
        fn compose_is_associative(a in arb_params(), b in arb_params(), c in arb_params()) {
            let left = a.compose(b).compose(c);
            let right = a.compose(b.compose(c));
            prop_assert!(mat_close(&left.to_matrix(), &right.to_matrix(), 1e-5));
        }

        #[test]
        fn distance_is_symmetric(a in arb_params(), b in arb_params()) {
            prop_assert_eq!(param_distance(a, b), param_distance(b, a));
            prop_assert!(param_distance(a, b) >= 0.0);
        }
    }
}
