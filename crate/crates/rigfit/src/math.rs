//! Small geometric helpers used throughout the crate.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rodrigues' formula. Zero vector maps to the identity.
pub fn axis_angle_to_matrix(aa: &Vec3) -> Mat3 {
    let angle = aa.norm();
    if angle < 1e-12 {
        return Mat3::identity();
    }
    let axis = aa / angle;
    let k = Mat3::new(
        0.0, -axis.z, axis.y, //
        axis.z, 0.0, -axis.x, //
        -axis.y, axis.x, 0.0,
    );
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Axis-aligned bounding box of a point set.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.expand(p);
        }
        b
    }

    pub fn expand(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn diagonal(&self) -> f64 {
        if self.min.x > self.max.x {
            return 0.0;
        }
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Grows the box by `frac` of its extent on every side.
    pub fn inflate(&self, frac: f64) -> Aabb {
        let pad = (self.max - self.min) * frac;
        Aabb {
            min: self.min - pad,
            max: self.max + pad,
        }
    }
}

/// Twice the signed area of a 2D triangle (positive for counter-clockwise
/// order in a y-up frame).
pub fn signed_area2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Area-weighted face normal (cross product of two edges; length is twice
/// the triangle area).
pub fn face_normal_scaled(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    (b - a).cross(&(c - a))
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * face_normal_scaled(a, b, c).norm()
}

/// Closest point on triangle `abc` to point `p` (Ericson, Real-Time
/// Collision Detection, ch. 5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Distance from a 2D point to a 2D segment, and the gradient of that
/// distance with respect to the two segment endpoints.
///
/// Returns `(distance, d_dist/d_a, d_dist/d_b)`. At zero distance the
/// gradient is reported as zero.
pub fn point_segment_distance_grad(
    p: [f64; 2],
    a: [f64; 2],
    b: [f64; 2],
) -> (f64, [f64; 2], [f64; 2]) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 < 1e-24 {
        let d = (ap[0] * ap[0] + ap[1] * ap[1]).sqrt();
        if d < 1e-12 {
            return (0.0, [0.0; 2], [0.0; 2]);
        }
        let g = [-ap[0] / d, -ap[1] / d];
        return (d, [g[0] * 0.5, g[1] * 0.5], [g[0] * 0.5, g[1] * 0.5]);
    }
    let t = (ap[0] * ab[0] + ap[1] * ab[1]) / len2;
    if t <= 0.0 {
        let d = (ap[0] * ap[0] + ap[1] * ap[1]).sqrt();
        if d < 1e-12 {
            return (0.0, [0.0; 2], [0.0; 2]);
        }
        return (d, [-ap[0] / d, -ap[1] / d], [0.0; 2]);
    }
    if t >= 1.0 {
        let bp = [p[0] - b[0], p[1] - b[1]];
        let d = (bp[0] * bp[0] + bp[1] * bp[1]).sqrt();
        if d < 1e-12 {
            return (0.0, [0.0; 2], [0.0; 2]);
        }
        return (d, [0.0; 2], [-bp[0] / d, -bp[1] / d]);
    }
    // Interior projection: distance to the supporting line.
    let closest = [a[0] + ab[0] * t, a[1] + ab[1] * t];
    let diff = [p[0] - closest[0], p[1] - closest[1]];
    let d = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
    if d < 1e-12 {
        return (0.0, [0.0; 2], [0.0; 2]);
    }
    let n = [diff[0] / d, diff[1] / d];
    // d = n · (p − a − t·ab); moving endpoints moves the closest point.
    let ga = [-n[0] * (1.0 - t), -n[1] * (1.0 - t)];
    let gb = [-n[0] * t, -n[1] * t];
    (d, ga, gb)
}
