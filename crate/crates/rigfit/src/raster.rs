//! Differentiable software rasterizer.
//!
//! Images for downstream consumers are rendered with a hard z-buffer, so
//! their type invariants hold exactly (unit normals, one-hot label sums).
//! Differentiability enters in two places used by the loss layer:
//!
//! - attribute gradients flow through the barycentric weights, which depend
//!   on the projected vertex positions, and through the attribute values
//!   themselves (`attribute_backward`);
//! - silhouette gradients flow through a soft coverage function
//!   (`soft_mask`): per face, a pixel contributes clamp(0.5 + d, 0, 1)
//!   where d is the signed pixel distance to the face boundary, and the
//!   per-face contributions are summed and capped at 1. Across an interior
//!   edge the two incident faces sum to exactly 1, so coverage has no seam
//!   dips; the ramp is piecewise linear with exact gradients inside each
//!   piece.
//!
//! Perspective cameras interpolate attributes in screen space (affine, not
//! perspective-correct); the harness default is orthographic where the two
//! coincide. One view is always rasterized sequentially, so results are
//! bit-identical across runs and thread counts; parallelism belongs at the
//! per-view level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{signed_area2, Vec3};
use crate::rig::PosedMesh;

/// Row-major float image, `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// x+0.5). Clamps to the image border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        for c in 0..self.channels {
            let v00 = self.at(x0, y0, c);
            let v10 = self.at(x1, y0, c);
            let v01 = self.at(x0, y1, c);
            let v11 = self.at(x1, y1, c);
            out[c] = v00 * (1.0 - tx) * (1.0 - ty)
                + v10 * tx * (1.0 - ty)
                + v01 * (1.0 - tx) * ty
                + v11 * tx * ty;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraKind {
    Orthographic,
    Perspective,
}

/// Turntable camera: positioned at `distance` along the azimuth/elevation
/// direction, looking at the origin, y up. Pixel x grows right, pixel y
/// grows down; the principal point is the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub kind: CameraKind,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
    /// Orthographic: pixels per world unit. Perspective: focal length in
    /// pixels.
    pub scale_or_focal: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectedPoint {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.scale_or_focal <= 0.0 || !self.scale_or_focal.is_finite() {
            return Err(Error::invalid("camera scale/focal must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("camera resolution must be at least 8x8"));
        }
        if self.elevation_deg.abs() > 89.0 {
            return Err(Error::invalid("camera elevation too close to the pole"));
        }
        Ok(())
    }

    /// Unit direction from the origin toward the camera.
    pub fn view_dir(&self) -> Vec3 {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    pub fn eye(&self) -> Vec3 {
        self.distance * self.view_dir()
    }

    /// Right-handed camera basis: x right, y up, z toward the camera.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let z = self.view_dir();
        let up = Vec3::new(0.0, 1.0, 0.0);
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        (x, y, z)
    }

    pub fn project_point(&self, p: &Vec3) -> ProjectedPoint {
        let (bx, by, bz) = self.basis();
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        let depth = self.distance - p.dot(&bz);
        match self.kind {
            CameraKind::Orthographic => ProjectedPoint {
                pixel: [
                    cx + self.scale_or_focal * p.dot(&bx),
                    cy - self.scale_or_focal * p.dot(&by),
                ],
                depth,
                valid: true,
            },
            CameraKind::Perspective => {
                if depth <= 1e-9 {
                    return ProjectedPoint {
                        pixel: [0.0, 0.0],
                        depth,
                        valid: false,
                    };
                }
                ProjectedPoint {
                    pixel: [
                        cx + self.scale_or_focal * p.dot(&bx) / depth,
                        cy - self.scale_or_focal * p.dot(&by) / depth,
                    ],
                    depth,
                    valid: true,
                }
            }
        }
    }

    pub fn project(&self, points: &[Vec3]) -> Vec<ProjectedPoint> {
        points.iter().map(|p| self.project_point(p)).collect()
    }

    /// Jacobian of the pixel coordinates with respect to the world point.
    pub fn pixel_jacobian(&self, p: &Vec3) -> [Vec3; 2] {
        let (bx, by, bz) = self.basis();
        let s = self.scale_or_focal;
        match self.kind {
            CameraKind::Orthographic => [s * bx, -s * by],
            CameraKind::Perspective => {
                let depth = self.distance - p.dot(&bz);
                let xv = p.dot(&bx);
                let yv = p.dot(&by);
                // px = cx + s*xv/depth and d(depth)/dp = -bz, so the
                // quotient rule adds +xv*bz/depth^2.
                let d2 = depth * depth;
                [s * (bx / depth + xv * bz / d2), -s * (by / depth + yv * bz / d2)]
            }
        }
    }

    /// Camera-space components of a world vector (not a point): returns
    /// (v.x_cam, v.y_cam, v.z_cam).
    pub fn to_camera_vector(&self, v: &Vec3) -> Vec3 {
        let (bx, by, bz) = self.basis();
        Vec3::new(v.dot(&bx), v.dot(&by), v.dot(&bz))
    }

    /// Adjoint of `to_camera_vector`.
    pub fn from_camera_vector(&self, v: &Vec3) -> Vec3 {
        let (bx, by, bz) = self.basis();
        v.x * bx + v.y * by + v.z * bz
    }
}

/// Hard z-buffer rasterization result. `face` is -1 for background; `bary`
/// holds the screen-space barycentric weights of the winning face.
#[derive(Debug, Clone)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    pub face: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub proj: Vec<ProjectedPoint>,
}

impl RasterOutput {
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.face[y * self.width + x] >= 0
    }

    /// Depth image with +inf background.
    pub fn depth_image(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.depth.clone(),
        }
    }
}

fn face_bbox(
    pts: &[[f64; 2]; 3],
    width: usize,
    height: usize,
    pad: f64,
) -> Option<(usize, usize, usize, usize)> {
    let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - pad;
    let max_x = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - pad;
    let max_y = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + pad;
    if !(min_x.is_finite() && max_x.is_finite() && min_y.is_finite() && max_y.is_finite()) {
        return None;
    }
    // Sample points sit at pixel centers (x + 0.5, y + 0.5).
    let x0 = (min_x - 0.5).ceil().max(0.0) as i64;
    let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0) as i64;
    let y0 = (min_y - 0.5).ceil().max(0.0) as i64;
    let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0) as i64;
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Rasterizes with a z-buffer; smaller depth wins, ties keep the earlier
/// face. Front faces wind counter-clockwise in world space, which maps to
/// negative signed area in y-down pixel coordinates.
pub fn rasterize(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    camera: &Camera,
    cull_backfaces: bool,
) -> Result<RasterOutput> {
    camera.validate()?;
    let proj = camera.project(vertices);
    let npix = camera.width * camera.height;
    let mut out = RasterOutput {
        width: camera.width,
        height: camera.height,
        face: vec![-1; npix],
        bary: vec![[0.0; 3]; npix],
        depth: vec![f64::INFINITY; npix],
        proj,
    };
    for (fi, f) in faces.iter().enumerate() {
        let p = [
            out.proj[f[0] as usize],
            out.proj[f[1] as usize],
            out.proj[f[2] as usize],
        ];
        if p.iter().any(|q| !q.valid) {
            continue;
        }
        let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
        let area = signed_area2(pts[0], pts[1], pts[2]);
        if cull_backfaces {
            if area >= -1e-12 {
                continue;
            }
        } else if area.abs() < 1e-12 {
            continue;
        }
        let Some((x0, x1, y0, y1)) = face_bbox(&pts, camera.width, camera.height, 0.0) else {
            continue;
        };
        let inv_area = 1.0 / area;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let b0 = signed_area2(q, pts[1], pts[2]) * inv_area;
                let b1 = signed_area2(q, pts[2], pts[0]) * inv_area;
                let b2 = 1.0 - b0 - b1;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let depth = b0 * p[0].depth + b1 * p[1].depth + b2 * p[2].depth;
                let idx = y * camera.width + x;
                if depth < out.depth[idx] {
                    out.depth[idx] = depth;
                    out.face[idx] = fi as i32;
                    out.bary[idx] = [b0, b1, b2];
                }
            }
        }
    }
    Ok(out)
}

/// Barycentric interpolation of per-vertex attributes over a pixel-to-face
/// assignment. `attrs` is flat N x channels.
pub fn interpolate_attributes(
    face_map: &[i32],
    bary: &[[f64; 3]],
    width: usize,
    height: usize,
    faces: &[[u32; 3]],
    attrs: &[f64],
    channels: usize,
) -> ImageF {
    let mut img = ImageF::zeros(width, height, channels);
    for (idx, &fi) in face_map.iter().enumerate() {
        if fi < 0 {
            continue;
        }
        let f = faces[fi as usize];
        let b = bary[idx];
        let px = &mut img.data[idx * channels..(idx + 1) * channels];
        for c in 0..channels {
            px[c] = b[0] * attrs[f[0] as usize * channels + c]
                + b[1] * attrs[f[1] as usize * channels + c]
                + b[2] * attrs[f[2] as usize * channels + c];
        }
    }
    img
}

/// Backward of `interpolate_attributes`: accumulates gradients both on the
/// attribute values and, through the barycentric weights, on the world
/// vertex positions. The pixel-to-face assignment is treated as fixed.
#[allow(clippy::too_many_arguments)]
pub fn attribute_backward(
    face_map: &[i32],
    bary: &[[f64; 3]],
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    camera: &Camera,
    attrs: &[f64],
    channels: usize,
    grad_image: &ImageF,
    grad_attrs: &mut [f64],
    grad_vertices: &mut [Vec3],
) -> Result<()> {
    if grad_image.width * grad_image.height != face_map.len()
        || grad_image.channels != channels
    {
        return Err(Error::invalid("gradient image shape mismatch"));
    }
    let proj = camera.project(vertices);
    for (idx, &fi) in face_map.iter().enumerate() {
        if fi < 0 {
            continue;
        }
        let g = &grad_image.data[idx * channels..(idx + 1) * channels];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let f = faces[fi as usize];
        let b = bary[idx];
        // Attribute path.
        for (i, &vi) in f.iter().enumerate() {
            let row = &mut grad_attrs[vi as usize * channels..(vi as usize + 1) * channels];
            for c in 0..channels {
                row[c] += b[i] * g[c];
            }
        }
        // Barycentric path: dL/db_i = g . a_i, then b_i depend on the three
        // projected vertex positions.
        let mut dl_db = [0.0; 3];
        for (i, &vi) in f.iter().enumerate() {
            for c in 0..channels {
                dl_db[i] += g[c] * attrs[vi as usize * channels + c];
            }
        }
        let x = (idx % grad_image.width) as f64 + 0.5;
        let y = (idx / grad_image.width) as f64 + 0.5;
        let q = [x, y];
        let pts = [
            proj[f[0] as usize].pixel,
            proj[f[1] as usize].pixel,
            proj[f[2] as usize].pixel,
        ];
        let Some(grad_pix) = bary_pixel_gradients(q, &pts, dl_db) else {
            continue;
        };
        for (i, &vi) in f.iter().enumerate() {
            let jac = camera.pixel_jacobian(&vertices[vi as usize]);
            grad_vertices[vi as usize] +=
                grad_pix[i][0] * jac[0] + grad_pix[i][1] * jac[1];
        }
    }
    Ok(())
}

/// Gradients of screen-space affine barycentrics at pixel q with respect
/// to the three projected corner positions, contracted with dL/db. None
/// for a degenerate projection.
fn bary_pixel_gradients(
    q: [f64; 2],
    pts: &[[f64; 2]; 3],
    dl_db: [f64; 3],
) -> Option<[[f64; 2]; 3]> {
    let area = signed_area2(pts[0], pts[1], pts[2]);
    if area.abs() < 1e-12 {
        return None;
    }
    let inv_area = 1.0 / area;
    // Edge-function derivatives. w0 = area2(q, p1, p2), w1 = area2(q, p2,
    // p0); b2 = 1 - b0 - b1, so dL/dw uses (dl_db[i] - dl_db[2]).
    let d_area = [
        [-(pts[2][1] - pts[1][1]), pts[2][0] - pts[1][0]],
        [-(pts[0][1] - pts[2][1]), pts[0][0] - pts[2][0]],
        [-(pts[1][1] - pts[0][1]), pts[1][0] - pts[0][0]],
    ];
    // d(w0)/dp1, d(w0)/dp2 with w0 = (p1-q)x(p2-q).
    let dw = |a: [f64; 2], bpt: [f64; 2]| -> ([f64; 2], [f64; 2]) {
        let u = [a[0] - q[0], a[1] - q[1]];
        let v = [bpt[0] - q[0], bpt[1] - q[1]];
        ([v[1], -v[0]], [-u[1], u[0]])
    };
    let mut grad_pix = [[0.0f64; 2]; 3];
    let coeff = [dl_db[0] - dl_db[2], dl_db[1] - dl_db[2]];
    for (wi, &co) in coeff.iter().enumerate() {
        if co == 0.0 {
            continue;
        }
        // w_wi involves vertices (wi+1)%3 and (wi+2)%3.
        let ia = (wi + 1) % 3;
        let ib = (wi + 2) % 3;
        let w_val = match wi {
            0 => signed_area2(q, pts[1], pts[2]),
            _ => signed_area2(q, pts[2], pts[0]),
        };
        let (da, db) = dw(pts[ia], pts[ib]);
        for k in 0..2 {
            grad_pix[ia][k] += co * da[k] * inv_area;
            grad_pix[ib][k] += co * db[k] * inv_area;
        }
        // Quotient rule: b = w / area, so subtract b * d(area).
        let bw = w_val * inv_area;
        for (j, da) in d_area.iter().enumerate() {
            for k in 0..2 {
                grad_pix[j][k] -= co * bw * da[k] * inv_area;
            }
        }
    }
    Some(grad_pix)
}

/// Soft coverage image plus the uncapped sum its backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftMask {
    /// min(1, sum of per-face contributions), one channel.
    pub image: ImageF,
    /// Uncapped per-pixel contribution sum.
    pub sum: Vec<f64>,
}

struct SoftFaceCtx<'a> {
    faces: &'a [[u32; 3]],
    face_mask: Option<&'a [bool]>,
    occlusion: Option<(&'a RasterOutput, f64)>,
}

/// Per-face soft contribution at pixel q: clamp(0.5 + min over edges of the
/// signed pixel distance to the edge line, 0, 1), orientation-corrected so
/// inside is positive for either winding. Returns (sigma, argmin edge,
/// extended barycentrics, interpolated depth) or None if the face is
/// skipped (degenerate, masked out, or occluded at this pixel).
fn soft_face_at(
    ctx: &SoftFaceCtx,
    proj: &[ProjectedPoint],
    fi: usize,
    q: [f64; 2],
    idx: usize,
) -> Option<(f64, usize, [f64; 3], f64)> {
    if let Some(mask) = ctx.face_mask {
        if !mask[fi] {
            return None;
        }
    }
    let f = ctx.faces[fi];
    let p = [
        proj[f[0] as usize],
        proj[f[1] as usize],
        proj[f[2] as usize],
    ];
    if p.iter().any(|x| !x.valid) {
        return None;
    }
    let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
    let area = signed_area2(pts[0], pts[1], pts[2]);
    if area.abs() < 1e-12 {
        return None;
    }
    let orient = if area > 0.0 { 1.0 } else { -1.0 };
    let mut min_d = f64::INFINITY;
    let mut min_e = 0;
    for e in 0..3 {
        let a = pts[e];
        let b = pts[(e + 1) % 3];
        let u = [b[0] - a[0], b[1] - a[1]];
        let len = (u[0] * u[0] + u[1] * u[1]).sqrt();
        if len < 1e-12 {
            return None;
        }
        let cross = u[0] * (q[1] - a[1]) - u[1] * (q[0] - a[0]);
        let d = orient * cross / len;
        if d < min_d {
            min_d = d;
            min_e = e;
        }
    }
    let sigma = (0.5 + min_d).clamp(0.0, 1.0);
    if sigma <= 0.0 {
        return None;
    }
    let inv_area = 1.0 / area;
    let b0 = signed_area2(q, pts[1], pts[2]) * inv_area;
    let b1 = signed_area2(q, pts[2], pts[0]) * inv_area;
    let bary = [b0, b1, 1.0 - b0 - b1];
    let depth = bary[0] * p[0].depth + bary[1] * p[1].depth + bary[2] * p[2].depth;
    if let Some((zbuf, tol)) = ctx.occlusion {
        let z = zbuf.depth[idx];
        if z.is_finite() && depth > z + tol {
            return None;
        }
    }
    Some((sigma, min_e, bary, depth))
}

/// Soft silhouette coverage of (a subset of) the mesh faces. Backfaces are
/// included so coverage is orientation-independent. When `occlusion` is
/// given, face contributions hidden behind the z-buffer (beyond the depth
/// tolerance) are dropped, making the mask visibility-aware.
pub fn soft_mask(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    face_mask: Option<&[bool]>,
    camera: &Camera,
    occlusion: Option<(&RasterOutput, f64)>,
) -> Result<SoftMask> {
    camera.validate()?;
    let proj = camera.project(vertices);
    let npix = camera.width * camera.height;
    let mut sum = vec![0.0f64; npix];
    let ctx = SoftFaceCtx {
        faces,
        face_mask,
        occlusion,
    };
    for fi in 0..faces.len() {
        let f = faces[fi];
        let p = [
            proj[f[0] as usize],
            proj[f[1] as usize],
            proj[f[2] as usize],
        ];
        if p.iter().any(|x| !x.valid) {
            continue;
        }
        let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
        let Some((x0, x1, y0, y1)) = face_bbox(&pts, camera.width, camera.height, 2.0) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let idx = y * camera.width + x;
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                if let Some((sigma, _, _, _)) = soft_face_at(&ctx, &proj, fi, q, idx) {
                    sum[idx] += sigma;
                }
            }
        }
    }
    let mut image = ImageF::zeros(camera.width, camera.height, 1);
    for (i, s) in sum.iter().enumerate() {
        image.data[i] = s.min(1.0);
    }
    Ok(SoftMask { image, sum })
}

/// Backward of `soft_mask`: replays the forward loop and routes each
/// pixel's gradient to the two endpoints of the argmin edge of every
/// contributing face, then to world space through the projection Jacobian.
/// Pixels at the coverage cap (sum >= 1) and saturated contributions pass
/// no gradient, matching the clamps.
pub fn soft_mask_backward(
    mask: &SoftMask,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    face_mask: Option<&[bool]>,
    camera: &Camera,
    occlusion: Option<(&RasterOutput, f64)>,
    grad_image: &ImageF,
    grad_vertices: &mut [Vec3],
) -> Result<()> {
    if grad_image.width != mask.image.width || grad_image.height != mask.image.height {
        return Err(Error::invalid("gradient image shape mismatch"));
    }
    let proj = camera.project(vertices);
    let ctx = SoftFaceCtx {
        faces,
        face_mask,
        occlusion,
    };
    for fi in 0..faces.len() {
        let f = faces[fi];
        let p = [
            proj[f[0] as usize],
            proj[f[1] as usize],
            proj[f[2] as usize],
        ];
        if p.iter().any(|x| !x.valid) {
            continue;
        }
        let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
        let area = signed_area2(pts[0], pts[1], pts[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let orient = if area > 0.0 { 1.0 } else { -1.0 };
        let Some((x0, x1, y0, y1)) = face_bbox(&pts, camera.width, camera.height, 2.0) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let idx = y * camera.width + x;
                let g = grad_image.data[idx];
                if g == 0.0 || mask.sum[idx] >= 1.0 {
                    continue;
                }
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let Some((sigma, min_e, _, _)) = soft_face_at(&ctx, &proj, fi, q, idx) else {
                    continue;
                };
                if sigma >= 1.0 {
                    continue;
                }
                for (corner, gp) in sigma_edge_gradients(q, &pts, min_e, orient, g) {
                    let vi = f[corner] as usize;
                    let jac = camera.pixel_jacobian(&vertices[vi]);
                    grad_vertices[vi] += gp[0] * jac[0] + gp[1] * jac[1];
                }
            }
        }
    }
    Ok(())
}

/// d(sigma)/d(argmin-edge endpoints) scaled by g, as pixel-space gradients
/// on the two corner indices of that edge. d = orient * cross(u, q - a) /
/// |u| with u = b - a.
fn sigma_edge_gradients(
    q: [f64; 2],
    pts: &[[f64; 2]; 3],
    min_e: usize,
    orient: f64,
    g: f64,
) -> [(usize, [f64; 2]); 2] {
    let ea = min_e;
    let eb = (min_e + 1) % 3;
    let a = pts[ea];
    let b = pts[eb];
    let u = [b[0] - a[0], b[1] - a[1]];
    let len = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let w = [q[0] - a[0], q[1] - a[1]];
    let cross = u[0] * w[1] - u[1] * w[0];
    // d(cross)/da = (u_y - w_y, w_x - u_x), d(cross)/db = (w_y, -w_x);
    // d(len)/da = -u/len, d(len)/db = u/len.
    let dc_da = [u[1] - w[1], w[0] - u[0]];
    let dc_db = [w[1], -w[0]];
    let s = g * orient;
    let inv_len = 1.0 / len;
    let common = cross * inv_len * inv_len;
    let ga = [
        s * (dc_da[0] * inv_len + common * u[0] * inv_len),
        s * (dc_da[1] * inv_len + common * u[1] * inv_len),
    ];
    let gb = [
        s * (dc_db[0] * inv_len - common * u[0] * inv_len),
        s * (dc_db[1] * inv_len - common * u[1] * inv_len),
    ];
    [(ea, ga), (eb, gb)]
}

/// Soft-blended normal image. Every front-facing triangle contributes its
/// renormalized interpolated vertex normal with weight fac * sigma, where
/// fac ramps smoothly from zero on edge-on faces (so faces enter and leave
/// the front set continuously); where weights overlap the blend is
/// normalized back to a weighted average. The image therefore varies
/// continuously through interior edges, mesh vertices, silhouettes and
/// orientation flips. Occluded contributions can be dropped against a
/// z-buffer (the drop itself is treated as non-differentiable).
#[derive(Debug, Clone)]
pub struct SoftNormals {
    /// Three channels: weighted unit normals divided by max(1, sum).
    pub image: ImageF,
    /// min(1, sum of weights), one channel.
    pub coverage: ImageF,
    /// Uncapped weight sum.
    pub sum: Vec<f64>,
}

/// Projected area (px^2) below which a front face's contribution fades.
const FACING_RAMP_AREA: f64 = 2.0;

/// Smooth facingness of a face: 1 for clearly front-facing projections,
/// linear fade to 0 as the signed area approaches the orientation flip.
/// Front faces have negative signed area in y-down pixel coordinates.
fn facing_weight(area: f64) -> f64 {
    (-area / FACING_RAMP_AREA).clamp(0.0, 1.0)
}

pub fn soft_normals(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    normals: &[Vec3],
    camera: &Camera,
    occlusion: Option<(&RasterOutput, f64)>,
) -> Result<SoftNormals> {
    camera.validate()?;
    if normals.len() != vertices.len() {
        return Err(Error::invalid("one normal per vertex required"));
    }
    let proj = camera.project(vertices);
    let npix = camera.width * camera.height;
    let mut image = ImageF::zeros(camera.width, camera.height, 3);
    let mut sum = vec![0.0f64; npix];
    let ctx = SoftFaceCtx {
        faces,
        face_mask: None,
        occlusion,
    };
    for fi in 0..faces.len() {
        let f = faces[fi];
        let p = [
            proj[f[0] as usize],
            proj[f[1] as usize],
            proj[f[2] as usize],
        ];
        if p.iter().any(|x| !x.valid) {
            continue;
        }
        let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
        let fac = facing_weight(signed_area2(pts[0], pts[1], pts[2]));
        if fac <= 0.0 {
            continue;
        }
        let Some((x0, x1, y0, y1)) = face_bbox(&pts, camera.width, camera.height, 2.0) else {
            continue;
        };
        let n = [
            normals[f[0] as usize],
            normals[f[1] as usize],
            normals[f[2] as usize],
        ];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let idx = y * camera.width + x;
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let Some((sigma, _, bary, _)) = soft_face_at(&ctx, &proj, fi, q, idx) else {
                    continue;
                };
                let w = fac * sigma;
                sum[idx] += w;
                let m = bary[0] * n[0] + bary[1] * n[1] + bary[2] * n[2];
                let len = m.norm();
                if len < 1e-9 {
                    continue;
                }
                let s = w / len;
                image.data[idx * 3] += s * m.x;
                image.data[idx * 3 + 1] += s * m.y;
                image.data[idx * 3 + 2] += s * m.z;
            }
        }
    }
    let mut coverage = ImageF::zeros(camera.width, camera.height, 1);
    for (i, &s) in sum.iter().enumerate() {
        coverage.data[i] = s.min(1.0);
        if s > 1.0 {
            let inv = 1.0 / s;
            image.data[i * 3] *= inv;
            image.data[i * 3 + 1] *= inv;
            image.data[i * 3 + 2] *= inv;
        }
    }
    Ok(SoftNormals {
        image,
        coverage,
        sum,
    })
}

/// Backward of `soft_normals`: replays the forward loop, routing the image
/// gradient through the per-face unit normal (barycentric weights and the
/// vertex normals themselves), the sigma weight, the facingness ramp and
/// the overlap normalization, and the coverage gradient through the
/// weights alone, honoring the same clamps as the forward.
#[allow(clippy::too_many_arguments)]
pub fn soft_normals_backward(
    render: &SoftNormals,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    normals: &[Vec3],
    camera: &Camera,
    occlusion: Option<(&RasterOutput, f64)>,
    grad_image: &ImageF,
    grad_coverage: &ImageF,
    grad_vertices: &mut [Vec3],
    grad_normals: &mut [Vec3],
) -> Result<()> {
    if grad_image.width != render.image.width
        || grad_image.height != render.image.height
        || grad_image.channels != 3
        || grad_coverage.channels != 1
        || grad_coverage.width != render.image.width
        || grad_coverage.height != render.image.height
    {
        return Err(Error::invalid("gradient image shape mismatch"));
    }
    let proj = camera.project(vertices);
    let ctx = SoftFaceCtx {
        faces,
        face_mask: None,
        occlusion,
    };
    for fi in 0..faces.len() {
        let f = faces[fi];
        let p = [
            proj[f[0] as usize],
            proj[f[1] as usize],
            proj[f[2] as usize],
        ];
        if p.iter().any(|x| !x.valid) {
            continue;
        }
        let pts = [p[0].pixel, p[1].pixel, p[2].pixel];
        let area = signed_area2(pts[0], pts[1], pts[2]);
        let fac = facing_weight(area);
        if fac <= 0.0 || area.abs() < 1e-12 {
            continue;
        }
        let orient = if area > 0.0 { 1.0 } else { -1.0 };
        let Some((x0, x1, y0, y1)) = face_bbox(&pts, camera.width, camera.height, 2.0) else {
            continue;
        };
        let n = [
            normals[f[0] as usize],
            normals[f[1] as usize],
            normals[f[2] as usize],
        ];
        // dL/dfac accumulated over this face's pixels.
        let mut g_fac = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let idx = y * camera.width + x;
                let g3 = Vec3::new(
                    grad_image.data[idx * 3],
                    grad_image.data[idx * 3 + 1],
                    grad_image.data[idx * 3 + 2],
                );
                let gc = grad_coverage.data[idx];
                if g3 == Vec3::zeros() && gc == 0.0 {
                    continue;
                }
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let Some((sigma, min_e, bary, _)) = soft_face_at(&ctx, &proj, fi, q, idx)
                else {
                    continue;
                };
                let total = render.sum[idx];
                let scale = total.max(1.0);
                let g_b = g3 / scale;
                let w = fac * sigma;
                let m = bary[0] * n[0] + bary[1] * n[1] + bary[2] * n[2];
                let len = m.norm();
                // dL/dw: blend term, overlap normalization, coverage.
                let mut g_w = 0.0;
                if len >= 1e-9 {
                    let nhat = m / len;
                    g_w += g_b.dot(&nhat);
                    // Normal path: d(image)/d(nhat) = w / scale.
                    let g_n = w * g_b;
                    let g_m = (g_n - nhat * nhat.dot(&g_n)) / len;
                    let mut dl_db = [0.0; 3];
                    for i in 0..3 {
                        grad_normals[f[i] as usize] += bary[i] * g_m;
                        dl_db[i] = g_m.dot(&n[i]);
                    }
                    if let Some(grad_pix) = bary_pixel_gradients(q, &pts, dl_db) {
                        for (i, &vi) in f.iter().enumerate() {
                            let jac = camera.pixel_jacobian(&vertices[vi as usize]);
                            grad_vertices[vi as usize] +=
                                grad_pix[i][0] * jac[0] + grad_pix[i][1] * jac[1];
                        }
                    }
                }
                if total > 1.0 {
                    // image = b / sum, so each weight also rescales it.
                    let mpix = Vec3::new(
                        render.image.data[idx * 3],
                        render.image.data[idx * 3 + 1],
                        render.image.data[idx * 3 + 2],
                    );
                    g_w -= mpix.dot(&g3) / scale;
                } else {
                    g_w += gc;
                }
                if g_w != 0.0 {
                    g_fac += sigma * g_w;
                    let g_sigma = fac * g_w;
                    if sigma < 1.0 {
                        for (corner, gp) in
                            sigma_edge_gradients(q, &pts, min_e, orient, g_sigma)
                        {
                            let vi = f[corner] as usize;
                            let jac = camera.pixel_jacobian(&vertices[vi]);
                            grad_vertices[vi] += gp[0] * jac[0] + gp[1] * jac[1];
                        }
                    }
                }
            }
        }
        if g_fac != 0.0 && fac < 1.0 {
            // fac = -area / ramp while ramping; chain through the area.
            let s = -g_fac / FACING_RAMP_AREA;
            let d_area = [
                [-(pts[2][1] - pts[1][1]), pts[2][0] - pts[1][0]],
                [-(pts[0][1] - pts[2][1]), pts[0][0] - pts[2][0]],
                [-(pts[1][1] - pts[0][1]), pts[1][0] - pts[0][0]],
            ];
            for (i, &vi) in f.iter().enumerate() {
                let jac = camera.pixel_jacobian(&vertices[vi as usize]);
                grad_vertices[vi as usize] +=
                    s * (d_area[i][0] * jac[0] + d_area[i][1] * jac[1]);
            }
        }
    }
    Ok(())
}

/// Camera-space normal image with a hard coverage mask. Covered pixels hold
/// unit normals; background is exactly zero.
#[derive(Debug, Clone)]
pub struct NormalImage {
    pub image: ImageF,
    pub coverage: Vec<bool>,
}

/// Renders per-pixel camera-space unit normals (barycentric vertex-normal
/// interpolation renormalized per pixel).
pub fn render_normals(mesh: &PosedMesh, camera: &Camera) -> Result<NormalImage> {
    let rast = rasterize(&mesh.vertices, &mesh.faces, camera, true)?;
    Ok(normals_from_raster(
        &rast.face,
        &rast.bary,
        camera,
        &mesh.faces,
        &mesh.per_vertex_normals,
    ))
}

/// Normal image from an explicit pixel-to-face assignment (used by the loss
/// layer, which extends the assignment into the soft silhouette band).
pub fn normals_from_raster(
    face_map: &[i32],
    bary: &[[f64; 3]],
    camera: &Camera,
    faces: &[[u32; 3]],
    vertex_normals: &[Vec3],
) -> NormalImage {
    let mut image = ImageF::zeros(camera.width, camera.height, 3);
    let mut coverage = vec![false; camera.width * camera.height];
    for (idx, &fi) in face_map.iter().enumerate() {
        if fi < 0 {
            continue;
        }
        let f = faces[fi as usize];
        let b = bary[idx];
        let n = b[0] * vertex_normals[f[0] as usize]
            + b[1] * vertex_normals[f[1] as usize]
            + b[2] * vertex_normals[f[2] as usize];
        let len = n.norm();
        if len < 1e-12 {
            continue;
        }
        let nc = camera.to_camera_vector(&(n / len));
        image.data[idx * 3] = nc.x;
        image.data[idx * 3 + 1] = nc.y;
        image.data[idx * 3 + 2] = nc.z;
        coverage[idx] = true;
    }
    NormalImage { image, coverage }
}

/// Soft one-hot label image; covered pixels' channels sum to 1.
#[derive(Debug, Clone)]
pub struct LabelImage {
    pub image: ImageF,
}

/// Rasterizes per-vertex one-hot label attributes.
pub fn render_labels(
    mesh: &PosedMesh,
    camera: &Camera,
    labels_onehot: &[f64],
    channels: usize,
) -> Result<LabelImage> {
    let rast = rasterize(&mesh.vertices, &mesh.faces, camera, true)?;
    let image = interpolate_attributes(
        &rast.face,
        &rast.bary,
        camera.width,
        camera.height,
        &mesh.faces,
        labels_onehot,
        channels,
    );
    Ok(LabelImage { image })
}

/// Soft coverage of the faces whose three corners all lie in the vertex
/// subset.
pub fn render_mask(
    mesh: &PosedMesh,
    camera: &Camera,
    vertex_subset: &[bool],
) -> Result<SoftMask> {
    if vertex_subset.len() != mesh.vertices.len() {
        return Err(Error::invalid("vertex subset length mismatch"));
    }
    let face_mask: Vec<bool> = mesh
        .faces
        .iter()
        .map(|f| f.iter().all(|&v| vertex_subset[v as usize]))
        .collect();
    soft_mask(
        &mesh.vertices,
        &mesh.faces,
        Some(&face_mask),
        camera,
        None,
    )
}
