//! Axis-aligned boxes and the relative offsets between seed points and boxes.
//!
//! Three schemes are supported: offsets to the box center, offsets to each of
//! the eight corners, and the signed offset to the closest point on the box
//! surface. Offsets are in meters and unnormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist(&self, o: &Point3) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.z - o.z).powi(2)).sqrt()
    }

    pub fn translate(&self, t: [f64; 3]) -> Point3 {
        Point3::new(self.x + t[0], self.y + t[1], self.z + t[2])
    }
}

/// Axis-aligned box given by its center and full extents (l, w, h) along x, y, z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        let b = Self { center, size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().chain(&self.size).all(|v| v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite box {self:?}")));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Geometry(format!("non-positive extent {:?}", self.size)));
        }
        Ok(())
    }

    pub fn half(&self) -> [f64; 3] {
        [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0]
    }

    pub fn min_corner(&self) -> [f64; 3] {
        let h = self.half();
        [self.center[0] - h[0], self.center[1] - h[1], self.center[2] - h[2]]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        let h = self.half();
        [self.center[0] + h[0], self.center[1] + h[1], self.center[2] + h[2]]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn center_point(&self) -> Point3 {
        Point3::from_array(self.center)
    }

    pub fn translate(&self, t: [f64; 3]) -> Box3 {
        Box3 { center: [self.center[0] + t[0], self.center[1] + t[1], self.center[2] + t[2]], size: self.size }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        let a = p.to_array();
        (0..3).all(|i| a[i] >= lo[i] && a[i] <= hi[i])
    }
}

/// Axis-aligned intersection over union.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min_corner(), a.max_corner(), b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for i in 0..3 {
        let overlap = ahi[i].min(bhi[i]) - alo[i].max(blo[i]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    inter / (a.volume() + b.volume() - inter)
}

/// Signed offset from `a` to the closest point on the surface of `b`.
///
/// Outside (or on the surface): per-axis `max(|a − c| − half, 0)`, all ≥ 0.
/// Strictly inside: the smallest face gap, negated, on the axis attaining it
/// (ties resolved x, then y, then z); the other two components are 0.
pub fn box_surface_offset(a: &Point3, b: &Box3) -> Result<[f64; 3]> {
    b.validate()?;
    let half = b.half();
    let rel = [(a.x - b.center[0]).abs(), (a.y - b.center[1]).abs(), (a.z - b.center[2]).abs()];
    let strictly_inside = (0..3).all(|i| rel[i] < half[i]);
    if !strictly_inside {
        return Ok([
            (rel[0] - half[0]).max(0.0),
            (rel[1] - half[1]).max(0.0),
            (rel[2] - half[2]).max(0.0),
        ]);
    }
    let gaps = [half[0] - rel[0], half[1] - rel[1], half[2] - rel[2]];
    let mut axis = 0;
    for i in 1..3 {
        if gaps[i] < gaps[axis] {
            axis = i;
        }
    }
    let mut out = [0.0; 3];
    out[axis] = -gaps[axis];
    Ok(out)
}

pub fn center_offset(a: &Point3, b: &Box3) -> [f64; 3] {
    [a.x - b.center[0], a.y - b.center[1], a.z - b.center[2]]
}

/// Corner `i` of `b`: bit 0 selects ±l/2, bit 1 ±w/2, bit 2 ±h/2 (clear = minus).
pub fn corner(b: &Box3, i: usize) -> [f64; 3] {
    let h = b.half();
    let sign = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
    [b.center[0] + sign(0) * h[0], b.center[1] + sign(1) * h[1], b.center[2] + sign(2) * h[2]]
}

/// Offsets from `a` to each of the eight corners, x fastest.
pub fn vertex_offsets(a: &Point3, b: &Box3) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, o) in out.iter_mut().enumerate() {
        let c = corner(b, i);
        *o = [a.x - c[0], a.y - c[1], a.z - c[2]];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    BoxSurface,
    Center,
    Vertex,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::BoxSurface, Scheme::Center, Scheme::Vertex];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::BoxSurface => "box_surface",
            Scheme::Center => "center",
            Scheme::Vertex => "vertex",
        }
    }

    /// Offset vectors per (box, point) pair.
    pub fn corners(self) -> usize {
        match self {
            Scheme::Vertex => 8,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box_surface" => Ok(Scheme::BoxSurface),
            "center" => Ok(Scheme::Center),
            "vertex" => Ok(Scheme::Vertex),
            _ => Err(Error::InvalidArgument(format!("unknown scheme `{s}` (box_surface|center|vertex)"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative offsets between K boxes and N points.
///
/// Layout is box-major: `[K, N, 3]`, or `[K, N, 8, 3]` for the vertex scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Real = f64> {
    pub scheme: Scheme,
    pub offsets: Tensor<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn num_boxes(&self) -> usize {
        self.offsets.shape()[0]
    }

    pub fn num_points(&self) -> usize {
        self.offsets.shape()[1]
    }
}

pub fn offset_field<T: Real>(points: &[Point3], boxes: &[Box3], scheme: Scheme) -> Result<OffsetField<T>> {
    if points.is_empty() || boxes.is_empty() {
        return Err(Error::Geometry(format!("offset field needs N ≥ 1 and K ≥ 1 (got N={}, K={})", points.len(), boxes.len())));
    }
    let (k, n, c) = (boxes.len(), points.len(), scheme.corners());
    let mut data = Vec::with_capacity(k * n * c * 3);
    for b in boxes {
        b.validate()?;
        for p in points {
            match scheme {
                Scheme::BoxSurface => data.extend(box_surface_offset(p, b)?.map(T::c)),
                Scheme::Center => data.extend(center_offset(p, b).map(T::c)),
                Scheme::Vertex => {
                    for o in vertex_offsets(p, b) {
                        data.extend(o.map(T::c));
                    }
                }
            }
        }
    }
    let shape = if c == 1 { vec![k, n, 3] } else { vec![k, n, c, 3] };
    Ok(OffsetField { scheme, offsets: Tensor::new(shape, data)? })
}

/// Closest surface point and its distance, computed by explicit face
/// projection. Independent of [`box_surface_offset`]; used as its oracle.
pub fn closest_point_oracle(a: &Point3, b: &Box3) -> (Point3, f64) {
    let lo = b.min_corner();
    let hi = b.max_corner();
    let p = a.to_array();
    let inside = (0..3).all(|i| p[i] > lo[i] && p[i] < hi[i]);
    let m = if !inside {
        let mut m = p;
        for i in 0..3 {
            m[i] = m[i].clamp(lo[i], hi[i]);
        }
        m
    } else {
        // candidate faces in axis order; each axis offers its nearer face
        let mut best: Option<(f64, usize, f64)> = None;
        for axis in 0..3 {
            let to_lo = p[axis] - lo[axis];
            let to_hi = hi[axis] - p[axis];
            let (d, plane) = if to_hi <= to_lo { (to_hi, hi[axis]) } else { (to_lo, lo[axis]) };
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, axis, plane));
            }
        }
        let (_, axis, plane) = best.expect("three axes");
        let mut m = p;
        m[axis] = plane;
        m
    };
    let m = Point3::from_array(m);
    let d = ((p[0] - m.x) * (p[0] - m.x) + (p[1] - m.y) * (p[1] - m.y) + (p[2] - m.z) * (p[2] - m.z)).sqrt();
    (m, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit2() -> Box3 {
        Box3::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0]).unwrap()
    }

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn box_surface_examples() {
        let b = unit2();
        assert_eq!(box_surface_offset(&p(3.0, 0.0, 0.0), &b).unwrap(), [2.0, 0.0, 0.0]);
        assert_eq!(box_surface_offset(&p(2.0, 2.0, 0.0), &b).unwrap(), [1.0, 1.0, 0.0]);
        assert_eq!(box_surface_offset(&p(0.5, 0.0, 0.0), &b).unwrap(), [-0.5, 0.0, 0.0]);
        assert_eq!(box_surface_offset(&p(0.0, 0.0, 0.0), &b).unwrap(), [-1.0, 0.0, 0.0]);
        assert_eq!(box_surface_offset(&p(1.0, 0.0, 0.0), &b).unwrap(), [0.0, 0.0, 0.0]);
        assert_eq!(closest_point_oracle(&p(0.0, 0.0, 0.0), &b).1, 1.0);
    }

    #[test]
    fn inside_ties_prefer_y_over_z() {
        let b = unit2();
        assert_eq!(box_surface_offset(&p(0.0, 0.5, 0.5), &b).unwrap(), [0.0, -0.5, 0.0]);
        assert_eq!(box_surface_offset(&p(0.9, 0.0, 0.9), &b).unwrap()[0], -0.09999999999999998);
    }

    #[test]
    fn degenerate_box_rejected() {
        let b = Box3 { center: [0.0; 3], size: [1.0, 0.0, 1.0] };
        assert!(box_surface_offset(&p(0.0, 0.0, 0.0), &b).is_err());
        assert!(Box3::new([0.0; 3], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn center_examples() {
        let b = unit2();
        assert_eq!(center_offset(&p(3.0, 0.0, 0.0), &b), [3.0, 0.0, 0.0]);
        assert_eq!(center_offset(&p(0.0, 0.0, 0.0), &b), [0.0, 0.0, 0.0]);
        let b2 = Box3::new([-1.0, 0.0, 1.0], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(center_offset(&p(1.0, 2.0, 3.0), &b2), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn vertex_examples() {
        let b = unit2();
        let at_corner = vertex_offsets(&p(1.0, 1.0, 1.0), &b);
        assert!(at_corner.contains(&[0.0, 0.0, 0.0]));
        assert_eq!(at_corner[7], [0.0, 0.0, 0.0]);

        let at_center = vertex_offsets(&p(0.0, 0.0, 0.0), &b);
        assert_eq!(at_center[0], [1.0, 1.0, 1.0]);
        assert_eq!(at_center[1], [-1.0, 1.0, 1.0]);
        assert_eq!(at_center[2], [1.0, -1.0, 1.0]);
        assert_eq!(at_center[7], [-1.0, -1.0, -1.0]);

        let a = p(0.3, -2.0, 5.0);
        let b3 = Box3::new([1.0, 2.0, 3.0], [0.5, 1.5, 2.5]).unwrap();
        let sum = vertex_offsets(&a, &b3).iter().fold([0.0; 3], |s, o| [s[0] + o[0], s[1] + o[1], s[2] + o[2]]);
        let c = center_offset(&a, &b3);
        for i in 0..3 {
            assert!((sum[i] - 8.0 * c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_examples() {
        let b = unit2();
        let (m, d) = closest_point_oracle(&p(3.0, 0.0, 0.0), &b);
        assert_eq!((m, d), (p(1.0, 0.0, 0.0), 2.0));
        let (m, d) = closest_point_oracle(&p(0.5, 0.0, 0.0), &b);
        assert_eq!((m, d), (p(1.0, 0.0, 0.0), 0.5));
    }

    #[test]
    fn field_layout_and_reduction() {
        let b = unit2();
        let pt = p(3.0, 0.0, 0.0);
        let f = offset_field::<f64>(&[pt], &[b], Scheme::BoxSurface).unwrap();
        assert_eq!(f.offsets.shape(), &[1, 1, 3]);
        assert_eq!(f.offsets.data(), &[2.0, 0.0, 0.0]);
        let v = offset_field::<f64>(&[pt], &[b], Scheme::Vertex).unwrap();
        assert_eq!(v.offsets.shape(), &[1, 1, 8, 3]);
        let dup = offset_field::<f64>(&[pt, p(0.5, 0.0, 0.0)], &[b, b], Scheme::BoxSurface).unwrap();
        assert_eq!(&dup.offsets.data()[..6], &dup.offsets.data()[6..]);
        assert!(offset_field::<f64>(&[], &[b], Scheme::Center).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = unit2();
        assert_eq!(iou(&a, &a), 1.0);
        let shifted = Box3::new([1.0, 0.0, 0.0], [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(iou(&a, &shifted), 1.0 / 3.0);
        let far = Box3::new([5.0, 0.0, 0.0], [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
    }
}
