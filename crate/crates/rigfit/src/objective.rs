//! Loss terms for multi-view registration: normal reconstruction,
//! Laplacian regularization, semantic parsing, eye-mask consistency,
//! landmark projection and symmetry, and the eyeball sphere model. Every
//! term returns a scalar plus analytic gradients with respect to the
//! vertices (and, where relevant, sphere parameters), verified against
//! central finite differences.
//!
//! Image losses are means over participating pixels. The normal loss
//! weights each pixel by its participation (1 where the target is valid,
//! soft coverage otherwise), which keeps both the value and the
//! denominator continuous as silhouettes move across pixel boundaries.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::{CaseBundle, LabelMap, NUM_VIEWS};
use crate::math::Vec3;
use crate::raster::{
    attribute_backward, rasterize, soft_mask, soft_mask_backward, soft_normals,
    soft_normals_backward, Camera, ImageF,
};
use crate::rig::{
    vertex_normals, vertex_normals_backward, LandmarkSymmetry, SemanticLabel, SparseRowMat,
};

/// Depth slack when testing soft-mask contributions against the z-buffer.
pub const OCCLUSION_DEPTH_TOL: f64 = 1e-4;

/// Per-term weights of the total objective.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub rec: f64,
    pub sema: f64,
    pub lmk: f64,
    /// Laplacian weight inside the reconstruction term.
    pub lap: f64,
    /// Per-view weights of the normal MSE.
    pub mse: [f64; NUM_VIEWS],
    /// Sphericity weight during eyeball fitting.
    pub eyereg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            sema: 0.5,
            lmk: 0.1,
            lap: 10.0,
            mse: [1.0; NUM_VIEWS],
            eyereg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.rec, self.sema, self.lmk, self.lap, self.eyereg];
        all.extend_from_slice(&self.mse);
        for w in all {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Borrowed view of the fitting targets.
pub struct ViewTargets<'a> {
    pub cameras: &'a [Camera],
    pub normals: &'a [ImageF],
    pub normal_valid: &'a [ImageF],
    pub parsing: &'a [Option<LabelMap>],
    pub eye_masks: &'a [Option<ImageF>],
    pub head_masks: &'a [Option<ImageF>],
    /// Front-view landmarks in pixels.
    pub landmarks: &'a [[f64; 2]],
}

impl<'a> ViewTargets<'a> {
    pub fn from_case(case: &'a CaseBundle) -> Self {
        ViewTargets {
            cameras: &case.cameras,
            normals: &case.normals,
            normal_valid: &case.normal_valid,
            parsing: &case.parsing,
            eye_masks: &case.eye_masks,
            head_masks: &case.head_masks,
            landmarks: &case.landmarks,
        }
    }
}

fn check_view_shapes(targets: &ViewTargets) -> Result<()> {
    if targets.cameras.len() != targets.normals.len()
        || targets.cameras.len() != targets.normal_valid.len()
    {
        return Err(Error::invalid("per-view target arrays must align with cameras"));
    }
    for (k, cam) in targets.cameras.iter().enumerate() {
        let n = &targets.normals[k];
        if n.width != cam.width || n.height != cam.height || n.channels != 3 {
            return Err(Error::invalid(format!(
                "view {k}: normal target {}x{}x{} does not match camera {}x{}",
                n.width, n.height, n.channels, cam.width, cam.height
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Normal reconstruction loss.

/// Per-view participation-weighted MSE between the target normal map and
/// the soft-blended rendered normals, summed over views with the per-view
/// weights. Each pixel participates with weight 1 where the target is
/// valid and with its soft coverage otherwise, so value and denominator
/// stay continuous as silhouettes sweep across pixels. Gradients flow
/// through the blend weights, the barycentric footprint, and the vertex
/// normals; occlusion against the z-buffer is treated as fixed.
pub fn loss_normal(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    targets: &ViewTargets,
    mse_weights: &[f64; NUM_VIEWS],
) -> Result<(f64, Vec<Vec3>)> {
    check_view_shapes(targets)?;
    let n_verts = vertices.len();
    let vn = vertex_normals(vertices, faces);
    let mut grad_vn_world = vec![Vec3::zeros(); n_verts];
    let mut grad_vertices = vec![Vec3::zeros(); n_verts];
    let mut total = 0.0;

    for (k, cam) in targets.cameras.iter().enumerate() {
        let wk = mse_weights[k];
        if wk == 0.0 {
            continue;
        }
        let raster = rasterize(vertices, faces, cam, true)?;
        let occl = Some((&raster, OCCLUSION_DEPTH_TOL));
        let vn_cam: Vec<Vec3> = vn.iter().map(|n| cam.to_camera_vector(n)).collect();
        let render = soft_normals(vertices, faces, &vn_cam, cam, occl)?;
        let npix = cam.width * cam.height;
        let t_norm = &targets.normals[k];
        let t_valid = &targets.normal_valid[k];

        let pixel = |idx: usize| -> Option<(f64, Vec3, Vec3)> {
            let cvg = render.coverage.data[idx];
            let valid = t_valid.data[idx] > 0.5;
            if !valid && cvg <= 0.0 {
                return None;
            }
            let mu = if valid { 1.0 } else { cvg };
            let rendered = Vec3::new(
                render.image.data[idx * 3],
                render.image.data[idx * 3 + 1],
                render.image.data[idx * 3 + 2],
            );
            let target = if valid {
                Vec3::new(
                    t_norm.data[idx * 3],
                    t_norm.data[idx * 3 + 1],
                    t_norm.data[idx * 3 + 2],
                )
            } else {
                Vec3::zeros()
            };
            Some((mu, rendered, target))
        };

        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..npix {
            if let Some((mu, rendered, target)) = pixel(idx) {
                num += mu * (rendered - target).norm_squared();
                den += mu;
            }
        }
        if den <= 0.0 {
            continue;
        }
        let view_loss = num / den;
        total += wk * view_loss;

        let mut g3 = ImageF::zeros(cam.width, cam.height, 3);
        let mut gc = ImageF::zeros(cam.width, cam.height, 1);
        for idx in 0..npix {
            let Some((mu, rendered, target)) = pixel(idx) else {
                continue;
            };
            let diff = rendered - target;
            let g = (2.0 * wk * mu / den) * diff;
            g3.data[idx * 3] = g.x;
            g3.data[idx * 3 + 1] = g.y;
            g3.data[idx * 3 + 2] = g.z;
            if t_valid.data[idx] <= 0.5 {
                // Participation weight also depends on coverage.
                gc.data[idx] = wk * (diff.norm_squared() - view_loss) / den;
            }
        }
        let mut grad_vn_cam = vec![Vec3::zeros(); n_verts];
        soft_normals_backward(
            &render,
            vertices,
            faces,
            &vn_cam,
            cam,
            occl,
            &g3,
            &gc,
            &mut grad_vertices,
            &mut grad_vn_cam,
        )?;
        for (gw, gcam) in grad_vn_world.iter_mut().zip(&grad_vn_cam) {
            *gw += cam.from_camera_vector(gcam);
        }
    }

    let through_normals = vertex_normals_backward(vertices, faces, &grad_vn_world);
    for (g, t) in grad_vertices.iter_mut().zip(&through_normals) {
        *g += t;
    }
    Ok((total, grad_vertices))
}

// ---------------------------------------------------------------------------
// Laplacian regularizer.

fn vertex_neighbors(n_verts: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut nb: Vec<Vec<u32>> = vec![Vec::new(); n_verts];
    let mut push = |a: u32, b: u32| {
        if !nb[a as usize].contains(&b) {
            nb[a as usize].push(b);
        }
    };
    for f in faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            push(a, b);
            push(b, a);
        }
    }
    nb
}

/// Mean squared norm of the uniform-graph Laplacian delta_v = v - mean of
/// neighbors, over vertices with at least one neighbor. Callers pass
/// positions or displacement fields; isolated vertices are excluded.
pub fn loss_laplacian(points: &[Vec3], faces: &[[u32; 3]]) -> (f64, Vec<Vec3>) {
    let nb = vertex_neighbors(points.len(), faces);
    let active = nb.iter().filter(|n| !n.is_empty()).count();
    let mut grad = vec![Vec3::zeros(); points.len()];
    if active == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / active as f64;
    let mut total = 0.0;
    let deltas: Vec<Vec3> = (0..points.len())
        .map(|v| {
            if nb[v].is_empty() {
                return Vec3::zeros();
            }
            let mut mean = Vec3::zeros();
            for &u in &nb[v] {
                mean += points[u as usize];
            }
            points[v] - mean / nb[v].len() as f64
        })
        .collect();
    for v in 0..points.len() {
        if nb[v].is_empty() {
            continue;
        }
        total += deltas[v].norm_squared();
        let g = 2.0 * inv_n * deltas[v];
        grad[v] += g;
        let share = 1.0 / nb[v].len() as f64;
        for &u in &nb[v] {
            grad[u as usize] -= share * g;
        }
    }
    (total * inv_n, grad)
}

// ---------------------------------------------------------------------------
// Semantic parsing loss.

fn one_hot_labels(labels: &[SemanticLabel]) -> Vec<f64> {
    let ch = SemanticLabel::ALL.len();
    let mut out = vec![0.0f64; labels.len() * ch];
    for (v, l) in labels.iter().enumerate() {
        out[v * ch + l.index()] = 1.0;
    }
    out
}

/// Head-masked squared difference between target label maps and rendered
/// soft label probabilities, mean over masked pixels, summed over the
/// views that carry parsing targets.
pub fn loss_parse(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    labels: &[SemanticLabel],
    targets: &ViewTargets,
) -> Result<(f64, Vec<Vec3>)> {
    check_view_shapes(targets)?;
    let ch = SemanticLabel::ALL.len();
    let attrs = one_hot_labels(labels);
    let mut grad_attrs = vec![0.0f64; attrs.len()];
    let mut grad_vertices = vec![Vec3::zeros(); vertices.len()];
    let mut total = 0.0;

    for (k, cam) in targets.cameras.iter().enumerate() {
        let Some(parse_target) = &targets.parsing[k] else {
            continue;
        };
        let mask = targets.head_masks[k].as_ref().ok_or_else(|| {
            Error::invalid(format!("view {k} has a parsing target but no head mask"))
        })?;
        if parse_target.width != cam.width
            || parse_target.height != cam.height
            || mask.width != cam.width
            || mask.height != cam.height
        {
            return Err(Error::invalid(format!("view {k}: parsing target resolution mismatch")));
        }
        let raster = rasterize(vertices, faces, cam, true)?;
        let npix = cam.width * cam.height;
        let denom = mask.data.iter().filter(|&&s| s > 0.0).count();
        if denom == 0 {
            continue;
        }
        let scale = 1.0 / denom as f64;
        let mut grad_image = ImageF::zeros(cam.width, cam.height, ch);
        let mut view_loss = 0.0;
        for idx in 0..npix {
            let s = mask.data[idx];
            if s <= 0.0 {
                continue;
            }
            let s2 = s * s;
            let t_label = parse_target.data[idx];
            for c in 0..ch {
                let p = if raster.face[idx] >= 0 {
                    let f = faces[raster.face[idx] as usize];
                    let b = raster.bary[idx];
                    (0..3).map(|i| b[i] * attrs[f[i] as usize * ch + c]).sum::<f64>()
                } else {
                    0.0
                };
                let t = if t_label as usize == c { 1.0 } else { 0.0 };
                let d = t - p;
                view_loss += s2 * d * d;
                grad_image.data[idx * ch + c] = -2.0 * s2 * d * scale;
            }
        }
        total += view_loss * scale;
        attribute_backward(
            &raster.face,
            &raster.bary,
            vertices,
            faces,
            cam,
            &attrs,
            ch,
            &grad_image,
            &mut grad_attrs,
            &mut grad_vertices,
        )?;
    }
    // Labels are constants, so grad_attrs is discarded; only the
    // barycentric path reaches the vertices.
    Ok((total, grad_vertices))
}

// ---------------------------------------------------------------------------
// Eye mask loss.

pub struct EyeMaskLoss {
    pub value: f64,
    pub grad: Vec<Vec3>,
    /// Views that carried parsing targets but no eye mask.
    pub skipped_views: Vec<usize>,
}

/// Two-term eye consistency per masked view: the rendered eyeball coverage
/// must include the observed eye mask, and visible non-eyeball geometry
/// must vacate the observed eye region. Mean over all pixels per view.
pub fn loss_eye_mask(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    labels: &[SemanticLabel],
    targets: &ViewTargets,
) -> Result<EyeMaskLoss> {
    check_view_shapes(targets)?;
    let eye_faces: Vec<bool> = faces
        .iter()
        .map(|f| f.iter().all(|&v| labels[v as usize].is_eyeball()))
        .collect();
    let ne_faces: Vec<bool> = eye_faces.iter().map(|e| !e).collect();
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    let mut total = 0.0;
    let mut skipped = Vec::new();

    for (k, cam) in targets.cameras.iter().enumerate() {
        let Some(observed) = &targets.eye_masks[k] else {
            if targets.parsing[k].is_some() {
                skipped.push(k);
            }
            continue;
        };
        if observed.width != cam.width || observed.height != cam.height {
            return Err(Error::invalid(format!("view {k}: eye mask resolution mismatch")));
        }
        let raster = rasterize(vertices, faces, cam, true)?;
        let occl = Some((&raster, OCCLUSION_DEPTH_TOL));
        let soft_eye = soft_mask(vertices, faces, Some(&eye_faces), cam, None)?;
        let soft_ne = soft_mask(vertices, faces, Some(&ne_faces), cam, occl)?;
        let npix = cam.width * cam.height;
        let scale = 1.0 / npix as f64;
        let mut grad_eye = ImageF::zeros(cam.width, cam.height, 1);
        let mut grad_ne = ImageF::zeros(cam.width, cam.height, 1);
        for idx in 0..npix {
            let s = observed.data[idx];
            if s <= 0.0 {
                continue;
            }
            let s2 = s * s;
            let ce = soft_eye.image.data[idx];
            let cne = soft_ne.image.data[idx];
            // (a) uncovered observed eye pixels.
            total += s2 * (1.0 - ce) * (1.0 - ce) * scale;
            grad_eye.data[idx] = -2.0 * s2 * (1.0 - ce) * scale;
            // (b) non-eye geometry inside the eye region.
            total += s2 * cne * cne * scale;
            grad_ne.data[idx] = 2.0 * s2 * cne * scale;
        }
        soft_mask_backward(
            &soft_eye,
            vertices,
            faces,
            Some(&eye_faces),
            cam,
            None,
            &grad_eye,
            &mut grad,
        )?;
        soft_mask_backward(
            &soft_ne,
            vertices,
            faces,
            Some(&ne_faces),
            cam,
            occl,
            &grad_ne,
            &mut grad,
        )?;
    }
    Ok(EyeMaskLoss {
        value: total,
        grad,
        skipped_views: skipped,
    })
}

/// Symmetric eye-mask consistency: mean squared difference between the
/// visible (occlusion-gated) eyeball coverage and the observed mask over
/// all pixels, per masked view. Unlike the cover-and-vacate form this
/// penalizes eyeball coverage outside the mask too, so it pins the sphere
/// from both sides.
pub fn loss_eye_mask_rendered_vs_observed(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    labels: &[SemanticLabel],
    targets: &ViewTargets,
) -> Result<EyeMaskLoss> {
    check_view_shapes(targets)?;
    let eye_faces: Vec<bool> = faces
        .iter()
        .map(|f| f.iter().all(|&v| labels[v as usize].is_eyeball()))
        .collect();
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    let mut total = 0.0;
    let mut skipped = Vec::new();

    for (k, cam) in targets.cameras.iter().enumerate() {
        let Some(observed) = &targets.eye_masks[k] else {
            if targets.parsing[k].is_some() {
                skipped.push(k);
            }
            continue;
        };
        if observed.width != cam.width || observed.height != cam.height {
            return Err(Error::invalid(format!("view {k}: eye mask resolution mismatch")));
        }
        let raster = rasterize(vertices, faces, cam, true)?;
        let occl = Some((&raster, OCCLUSION_DEPTH_TOL));
        let soft_eye = soft_mask(vertices, faces, Some(&eye_faces), cam, occl)?;
        let npix = cam.width * cam.height;
        let scale = 1.0 / npix as f64;
        let mut grad_eye = ImageF::zeros(cam.width, cam.height, 1);
        for idx in 0..npix {
            let diff = soft_eye.image.data[idx] - observed.data[idx];
            total += diff * diff * scale;
            grad_eye.data[idx] = 2.0 * diff * scale;
        }
        soft_mask_backward(
            &soft_eye,
            vertices,
            faces,
            Some(&eye_faces),
            cam,
            occl,
            &grad_eye,
            &mut grad,
        )?;
    }
    Ok(EyeMaskLoss {
        value: total,
        grad,
        skipped_views: skipped,
    })
}

// ---------------------------------------------------------------------------
// Landmark losses.

/// Mean squared pixel distance between projected posed landmarks and their
/// 2D targets; gradients with respect to the 3D landmark positions.
pub fn loss_landmark_projection(
    posed_landmarks: &[Vec3],
    target_px: &[[f64; 2]],
    camera: &Camera,
) -> Result<(f64, Vec<Vec3>)> {
    if posed_landmarks.len() != target_px.len() {
        return Err(Error::invalid("landmark count mismatch"));
    }
    let mut grad = vec![Vec3::zeros(); posed_landmarks.len()];
    let mut total = 0.0;
    let mut n_valid = 0usize;
    for (i, p) in posed_landmarks.iter().enumerate() {
        let proj = camera.project_point(p);
        if !proj.valid {
            continue;
        }
        n_valid += 1;
        let dx = proj.pixel[0] - target_px[i][0];
        let dy = proj.pixel[1] - target_px[i][1];
        total += dx * dx + dy * dy;
        let jac = camera.pixel_jacobian(p);
        grad[i] = 2.0 * (dx * jac[0] + dy * jac[1]);
    }
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_valid as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

/// Mean squared mismatch of canonical landmarks against their YZ-plane
/// mirror pairs, plus the squared x of self-symmetric landmarks.
pub fn loss_landmark_symmetry(
    landmarks: &[Vec3],
    symmetry: &LandmarkSymmetry,
) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); landmarks.len()];
    let mut total = 0.0;
    if !symmetry.pairs.is_empty() {
        let inv = 1.0 / symmetry.pairs.len() as f64;
        let mut pair_sum = 0.0;
        for &(a, b) in &symmetry.pairs {
            let (pa, pb) = (landmarks[a as usize], landmarks[b as usize]);
            // d = pa - R(pb), R = diag(-1, 1, 1).
            let d = Vec3::new(pa.x + pb.x, pa.y - pb.y, pa.z - pb.z);
            pair_sum += d.norm_squared();
            grad[a as usize] += 2.0 * inv * d;
            grad[b as usize] += 2.0 * inv * Vec3::new(d.x, -d.y, -d.z);
        }
        total += pair_sum * inv;
    }
    if !symmetry.self_symmetric.is_empty() {
        let inv = 1.0 / symmetry.self_symmetric.len() as f64;
        for &i in &symmetry.self_symmetric {
            let x = landmarks[i as usize].x;
            total += x * x * inv;
            grad[i as usize].x += 2.0 * x * inv;
        }
    }
    (total, grad)
}

/// Symmetry loss evaluated through the landmark regressor, with gradients
/// on the canonical vertices.
pub fn loss_landmark_symmetry_on_vertices(
    vertices: &[Vec3],
    regressor: &SparseRowMat,
    symmetry: &LandmarkSymmetry,
) -> (f64, Vec<Vec3>) {
    let landmarks = regressor.mul_points(vertices);
    let (value, grad_lm) = loss_landmark_symmetry(&landmarks, symmetry);
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    regressor.add_transpose_mul(&grad_lm, &mut grad);
    (value, grad)
}

// ---------------------------------------------------------------------------
// Eyeball sphere model.

/// Closed-form eyeball sphere from an eye-corner reference point z, the
/// subtended angle, and the observed eye width: r = (l/2)/sin(eps/2),
/// c = z - [0, 0, r cos(eps/2)]. A zero width is returned as a degenerate
/// zero-radius sphere.
pub fn eyeball_sphere_params(z: &Vec3, eps_angle: f64, l: f64) -> Result<(Vec3, f64)> {
    let half = eps_angle / 2.0;
    let s = half.sin();
    if s.abs() < 1e-12 {
        return Err(Error::invalid("eyeball angle has sin(eps/2) = 0"));
    }
    if l < 0.0 {
        return Err(Error::invalid("negative eye width"));
    }
    let r = (l / 2.0) / s;
    let c = z - Vec3::new(0.0, 0.0, r * half.cos());
    Ok((c, r))
}

pub struct SphericityLoss {
    pub value: f64,
    pub grad_vertices: Vec<Vec3>,
    pub grad_centers: [Vec3; 2],
    pub grad_radius: f64,
}

/// Mean per-side discrepancy between eyeball vertex distances and the
/// shared radius: (|v-c| - r)^2 by default, or the literal mixed-unit
/// (|v-c|^2 - r)^2 form when `paper_form` is set.
pub fn loss_eyeball_sphericity(
    vertices: &[Vec3],
    labels: &[SemanticLabel],
    centers: &[Vec3; 2],
    radius: f64,
    paper_form: bool,
) -> Result<SphericityLoss> {
    let sides = [SemanticLabel::EyeballLeft, SemanticLabel::EyeballRight];
    let mut grad_vertices = vec![Vec3::zeros(); vertices.len()];
    let mut grad_centers = [Vec3::zeros(), Vec3::zeros()];
    let mut grad_radius = 0.0;
    let mut total = 0.0;
    for (side, &label) in sides.iter().enumerate() {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("no vertices labeled {}", label.name())));
        }
        let inv = 1.0 / members.len() as f64;
        let c = centers[side];
        for &v in &members {
            let d = vertices[v] - c;
            let dist = d.norm();
            if paper_form {
                let t = d.norm_squared() - radius;
                total += t * t * inv;
                let g = 4.0 * t * inv * d;
                grad_vertices[v] += g;
                grad_centers[side] -= g;
                grad_radius -= 2.0 * t * inv;
            } else {
                let t = dist - radius;
                total += t * t * inv;
                if dist > 1e-12 {
                    let g = (2.0 * t * inv / dist) * d;
                    grad_vertices[v] += g;
                    grad_centers[side] -= g;
                }
                grad_radius -= 2.0 * t * inv;
            }
        }
    }
    Ok(SphericityLoss {
        value: total,
        grad_vertices,
        grad_centers,
        grad_radius,
    })
}

// ---------------------------------------------------------------------------
// Total objective.

pub struct TotalLoss {
    pub value: f64,
    /// Unweighted per-term values.
    pub terms: BTreeMap<String, f64>,
    pub grad_posed: Vec<Vec3>,
    pub grad_canonical: Vec<Vec3>,
    pub grad_posed_landmarks: Vec<Vec3>,
    pub skipped_eye_views: Vec<usize>,
}

/// Weighted objective: rec * (normal + lap * laplacian) + sema * (parse +
/// eye) + lmk * (projection in normalized image coordinates + symmetry).
/// The Laplacian acts on the canonical displacement from `reference`;
/// image terms act on the posed mesh; the projection term acts on the
/// posed landmarks (the caller chains those through its pose).
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    canonical: &[Vec3],
    reference: &[Vec3],
    posed: &[Vec3],
    posed_landmarks: &[Vec3],
    faces: &[[u32; 3]],
    labels: &[SemanticLabel],
    landmark_regressor: &SparseRowMat,
    symmetry: &LandmarkSymmetry,
    targets: &ViewTargets,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    if canonical.len() != reference.len() || canonical.len() != posed.len() {
        return Err(Error::invalid("canonical, reference and posed sizes must match"));
    }
    let mut terms = BTreeMap::new();
    let mut grad_posed = vec![Vec3::zeros(); posed.len()];
    let mut grad_canonical = vec![Vec3::zeros(); canonical.len()];
    let mut grad_posed_landmarks = vec![Vec3::zeros(); posed_landmarks.len()];
    let mut total = 0.0;

    let active = |w: f64| w > 0.0;

    // Reconstruction: normals + Laplacian on the displacement field.
    if active(weights.rec) {
        let (v_norm, g_norm) = loss_normal(posed, faces, targets, &weights.mse)?;
        terms.insert("normal".to_string(), v_norm);
        total += weights.rec * v_norm;
        for (g, s) in grad_posed.iter_mut().zip(&g_norm) {
            *g += weights.rec * s;
        }
        if active(weights.lap) {
            let disp: Vec<Vec3> = canonical.iter().zip(reference).map(|(c, r)| c - r).collect();
            let (v_lap, g_lap) = loss_laplacian(&disp, faces);
            terms.insert("laplacian".to_string(), v_lap);
            total += weights.rec * weights.lap * v_lap;
            for (g, s) in grad_canonical.iter_mut().zip(&g_lap) {
                *g += weights.rec * weights.lap * s;
            }
        }
    }

    // Semantics: parsing + eye masks.
    let mut skipped_eye_views = Vec::new();
    if active(weights.sema) {
        let (v_parse, g_parse) = loss_parse(posed, faces, labels, targets)?;
        terms.insert("parse".to_string(), v_parse);
        total += weights.sema * v_parse;
        for (g, s) in grad_posed.iter_mut().zip(&g_parse) {
            *g += weights.sema * s;
        }
        let eye = loss_eye_mask(posed, faces, labels, targets)?;
        terms.insert("eye_mask".to_string(), eye.value);
        total += weights.sema * eye.value;
        for (g, s) in grad_posed.iter_mut().zip(&eye.grad) {
            *g += weights.sema * s;
        }
        skipped_eye_views = eye.skipped_views;
    }

    // Landmarks: projection (front view) + canonical symmetry.
    if active(weights.lmk) {
        let front = &targets.cameras[0];
        let (v_pro, g_pro) = loss_landmark_projection(posed_landmarks, targets.landmarks, front)?;
        terms.insert("landmark_projection".to_string(), v_pro);
        // Pixel-squared error expressed in normalized image coordinates.
        let norm_scale = 1.0 / (front.width as f64 * front.height as f64);
        total += weights.lmk * v_pro * norm_scale;
        for (g, s) in grad_posed_landmarks.iter_mut().zip(&g_pro) {
            *g += weights.lmk * norm_scale * s;
        }
        let (v_sym, g_sym) =
            loss_landmark_symmetry_on_vertices(canonical, landmark_regressor, symmetry);
        terms.insert("landmark_symmetry".to_string(), v_sym);
        total += weights.lmk * v_sym;
        for (g, s) in grad_canonical.iter_mut().zip(&g_sym) {
            *g += weights.lmk * s;
        }
    }

    Ok(TotalLoss {
        value: total,
        terms,
        grad_posed,
        grad_canonical,
        grad_posed_landmarks,
        skipped_eye_views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CameraKind;
    use crate::toy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ortho_camera(az: f64, size: usize, scale: f64) -> Camera {
        Camera {
            kind: CameraKind::Orthographic,
            azimuth_deg: az,
            elevation_deg: 0.0,
            distance: 10.0,
            scale_or_focal: scale,
            width: size,
            height: size,
        }
    }

    /// Random blobby mesh near the origin, facing all directions. The random
    /// rotation keeps icosphere symmetry rings off exact pixel-grid
    /// alignments, which sit on kinks of the clamped soft rasterizer where
    /// finite differences straddle two slopes.
    fn random_mesh(seed: u64, subdiv: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut verts, faces) = toy::icosphere(subdiv, 1.0);
        let rot = crate::math::axis_angle_to_matrix(&Vec3::new(
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
        ));
        for v in &mut verts {
            let s = 1.0 + 0.3 * rng.random_range(-1.0..1.0);
            *v = rot * (*v * s);
        }
        (verts, faces)
    }

    struct OwnedTargets {
        cameras: Vec<Camera>,
        normals: Vec<ImageF>,
        normal_valid: Vec<ImageF>,
        parsing: Vec<Option<LabelMap>>,
        eye_masks: Vec<Option<ImageF>>,
        head_masks: Vec<Option<ImageF>>,
        landmarks: Vec<[f64; 2]>,
    }

    impl OwnedTargets {
        fn empty(cameras: Vec<Camera>) -> Self {
            let n = cameras.len();
            let mk = |ch: usize| {
                cameras
                    .iter()
                    .map(|c| ImageF::zeros(c.width, c.height, ch))
                    .collect::<Vec<_>>()
            };
            OwnedTargets {
                normals: mk(3),
                normal_valid: mk(1),
                parsing: vec![None; n],
                eye_masks: vec![None; n],
                head_masks: vec![None; n],
                landmarks: vec![[0.0; 2]; crate::rig::NUM_LANDMARKS],
                cameras,
            }
        }

        fn view(&self) -> ViewTargets<'_> {
            ViewTargets {
                cameras: &self.cameras,
                normals: &self.normals,
                normal_valid: &self.normal_valid,
                parsing: &self.parsing,
                eye_masks: &self.eye_masks,
                head_masks: &self.head_masks,
                landmarks: &self.landmarks,
            }
        }
    }

    /// Renders the soft normal representation the loss compares against.
    fn render_soft_normals(
        vertices: &[Vec3],
        faces: &[[u32; 3]],
        cam: &Camera,
    ) -> (ImageF, ImageF) {
        let raster = rasterize(vertices, faces, cam, true).unwrap();
        let vn = vertex_normals(vertices, faces);
        let vn_cam: Vec<Vec3> = vn.iter().map(|n| cam.to_camera_vector(n)).collect();
        let render = soft_normals(
            vertices,
            faces,
            &vn_cam,
            cam,
            Some((&raster, OCCLUSION_DEPTH_TOL)),
        )
        .unwrap();
        let mut valid = ImageF::zeros(cam.width, cam.height, 1);
        for idx in 0..cam.width * cam.height {
            if render.coverage.data[idx] > 0.0 {
                valid.data[idx] = 1.0;
            }
        }
        (render.image, valid)
    }

    fn six_cameras(size: usize, scale: f64) -> Vec<Camera> {
        [0.0, 90.0, 180.0, 270.0, 45.0, 315.0]
            .iter()
            .map(|&az| ortho_camera(az, size, scale))
            .collect()
    }

    #[test]
    fn normal_loss_zero_on_identical_targets() {
        let (verts, faces) = random_mesh(3, 1);
        let mut targets = OwnedTargets::empty(six_cameras(48, 14.0));
        for k in 0..NUM_VIEWS {
            let (img, valid) = render_soft_normals(&verts, &faces, &targets.cameras[k]);
            targets.normals[k] = img;
            targets.normal_valid[k] = valid;
        }
        let (value, grad) = loss_normal(&verts, &faces, &targets.view(), &[1.0; 6]).unwrap();
        assert_eq!(value, 0.0);
        // Gradients vanish identically at the global minimum of a squared
        // residual.
        let gmax = grad.iter().map(|g| g.norm()).fold(0.0f64, f64::max);
        assert!(gmax < 1e-12, "max grad {gmax}");
    }

    #[test]
    fn normal_loss_single_pixel_arithmetic() {
        let (verts, faces) = random_mesh(5, 1);
        let cam = ortho_camera(0.0, 48, 14.0);
        let mut targets = OwnedTargets::empty(vec![cam.clone()]);
        let (img, valid) = render_soft_normals(&verts, &faces, &cam);
        // Valid pixels cover every rendered pixel, so each participates
        // with weight one.
        let raster = rasterize(&verts, &faces, &cam, true).unwrap();
        let den: f64 = valid.data.iter().sum();
        // Pick an interior covered pixel and offset one channel by 0.1.
        let idx = (0..48 * 48)
            .find(|&i| raster.face[i] >= 0 && valid.data[i] > 0.5)
            .unwrap();
        targets.normals = vec![img];
        targets.normal_valid = vec![valid];
        targets.normals[0].data[idx * 3] += 0.1;
        let mse = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (value, _) = loss_normal(&verts, &faces, &targets.view(), &mse).unwrap();
        let expect = 0.1 * 0.1 / den;
        assert!(
            (value - expect).abs() < 1e-12 * expect.max(1.0),
            "value {value} expected {expect}"
        );
    }

    #[test]
    fn normal_loss_matches_pixel_loop_oracle() {
        // Independent forward recomputation: same rendering primitives,
        // naive reduction; checks weighting and normalization wiring.
        let (verts, faces) = random_mesh(11, 1);
        let mut targets = OwnedTargets::empty(six_cameras(32, 9.0));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for k in 0..NUM_VIEWS {
            let (mut img, mut valid) = render_soft_normals(&verts, &faces, &targets.cameras[k]);
            for v in &mut img.data {
                *v += 0.2 * rng.random_range(-1.0..1.0);
            }
            for v in &mut valid.data {
                if rng.random_range(0.0..1.0) < 0.1 {
                    *v = 1.0 - *v;
                }
            }
            targets.normals[k] = img;
            targets.normal_valid[k] = valid;
        }
        let mse = [1.0, 0.5, 0.25, 2.0, 0.0, 1.5];
        let (value, _) = loss_normal(&verts, &faces, &targets.view(), &mse).unwrap();
        let mut oracle = 0.0;
        for k in 0..NUM_VIEWS {
            if mse[k] == 0.0 {
                continue;
            }
            let cam = &targets.cameras[k];
            let raster = rasterize(&verts, &faces, cam, true).unwrap();
            let vn = vertex_normals(&verts, &faces);
            let vn_cam: Vec<Vec3> = vn.iter().map(|n| cam.to_camera_vector(n)).collect();
            let render = soft_normals(
                &verts,
                &faces,
                &vn_cam,
                cam,
                Some((&raster, OCCLUSION_DEPTH_TOL)),
            )
            .unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for idx in 0..cam.width * cam.height {
                let tvalid = targets.normal_valid[k].data[idx] > 0.5;
                let c = render.coverage.data[idx];
                if !tvalid && c <= 0.0 {
                    continue;
                }
                let mu = if tvalid { 1.0 } else { c };
                let mut d2 = 0.0;
                for ch in 0..3 {
                    let t = if tvalid {
                        targets.normals[k].data[idx * 3 + ch]
                    } else {
                        0.0
                    };
                    let r = render.image.data[idx * 3 + ch];
                    d2 += (r - t) * (r - t);
                }
                num += mu * d2;
                den += mu;
            }
            oracle += mse[k] * num / den;
        }
        assert!(
            (value - oracle).abs() <= 1e-12 * oracle.max(1.0),
            "value {value} oracle {oracle}"
        );
    }

    /// Central finite-difference check against analytic vertex gradients
    /// on a sampled coordinate subset; returns aggregate relative error.
    fn fd_check<F: FnMut(&[Vec3]) -> f64>(
        verts: &[Vec3],
        grad: &[Vec3],
        mut f: F,
        h: f64,
        samples: usize,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut work = verts.to_vec();
        let mut num2 = 0.0;
        let mut den2 = 0.0;
        for _ in 0..samples {
            let v = rng.random_range(0..verts.len());
            let axis = rng.random_range(0..3usize);
            let base = verts[v][axis];
            work[v][axis] = base + h;
            let up = f(&work);
            work[v][axis] = base - h;
            let down = f(&work);
            work[v][axis] = base;
            let fd = (up - down) / (2.0 * h);
            let an = grad[v][axis];
            num2 += (fd - an) * (fd - an);
            den2 += fd * fd + an * an;
        }
        (num2 / den2.max(1e-30)).sqrt()
    }

    #[test]
    fn normal_loss_gradient_matches_fd() {
        let mut worst = 0.0f64;
        for seed in 0..4 {
            let (verts, faces) = random_mesh(100 + seed, 1);
            let mut targets = OwnedTargets::empty(six_cameras(32, 9.0));
            // Targets from a differently deformed mesh.
            let (tv, tf) = random_mesh(500 + seed, 1);
            for k in 0..NUM_VIEWS {
                let (img, valid) = render_soft_normals(&tv, &tf, &targets.cameras[k]);
                targets.normals[k] = img;
                targets.normal_valid[k] = valid;
            }
            let view = targets.view();
            let mse = [1.0; 6];
            let (_, grad) = loss_normal(&verts, &faces, &view, &mse).unwrap();
            let err = fd_check(
                &verts,
                &grad,
                |v| loss_normal(v, &faces, &view, &mse).unwrap().0,
                1e-6,
                24,
                900 + seed,
            );
            worst = worst.max(err);
        }
        assert!(worst < 5e-2, "silhouette-bearing FD error {worst}");
    }

    #[test]
    fn laplacian_zero_for_affine_interior_and_tetra_closed_form() {
        // Regular grid: interior vertex delta is zero.
        let mut verts = Vec::new();
        for j in 0..3 {
            for i in 0..3 {
                verts.push(Vec3::new(i as f64, j as f64, 0.0));
            }
        }
        let faces: Vec<[u32; 3]> = vec![
            [0, 1, 4],
            [0, 4, 3],
            [1, 2, 5],
            [1, 5, 4],
            [3, 4, 7],
            [3, 7, 6],
            [4, 5, 8],
            [4, 8, 7],
        ];
        let nb = vertex_neighbors(verts.len(), &faces);
        let center = 4usize;
        let mut mean = Vec3::zeros();
        for &u in &nb[center] {
            mean += verts[u as usize];
        }
        mean /= nb[center].len() as f64;
        assert!((verts[center] - mean).norm() < 1e-12);

        // Tetrahedron: every vertex sees the other three.
        let tv = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.3, 0.2, 1.1),
        ];
        let tf = vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]];
        let (value, _) = loss_laplacian(&tv, &tf);
        let mut expect = 0.0;
        for v in 0..4 {
            let mut mean = Vec3::zeros();
            for u in 0..4 {
                if u != v {
                    mean += tv[u];
                }
            }
            expect += (tv[v] - mean / 3.0).norm_squared();
        }
        expect /= 4.0;
        assert!((value - expect).abs() < 1e-15);

        // Homogeneity: scaling by s scales the loss by s^2.
        let scaled: Vec<Vec3> = tv.iter().map(|v| 2.5 * v).collect();
        let (vs, _) = loss_laplacian(&scaled, &tf);
        assert!((vs - 2.5 * 2.5 * value).abs() < 1e-12);
    }

    #[test]
    fn laplacian_gradient_matches_fd() {
        let (verts, faces) = random_mesh(21, 1);
        let (_, grad) = loss_laplacian(&verts, &faces);
        let err = fd_check(
            &verts,
            &grad,
            |v| loss_laplacian(v, &faces).0,
            1e-6,
            30,
            42,
        );
        assert!(err < 1e-6, "laplacian FD error {err}");
    }

    fn parse_fixture(
        seed: u64,
    ) -> (Vec<Vec3>, Vec<[u32; 3]>, Vec<SemanticLabel>, OwnedTargets) {
        let (verts, faces) = random_mesh(seed, 1);
        let labels: Vec<SemanticLabel> = verts
            .iter()
            .map(|v| {
                if v.y > 0.3 {
                    SemanticLabel::Hair
                } else if v.z > 0.0 {
                    SemanticLabel::Face
                } else {
                    SemanticLabel::Neck
                }
            })
            .collect();
        let cam = ortho_camera(0.0, 40, 11.0);
        let mut targets = OwnedTargets::empty(vec![cam.clone()]);
        // Target labels from a deformed copy; head mask from its coverage.
        let (tv, tf) = random_mesh(seed + 1000, 1);
        let raster = rasterize(&tv, &tf, &cam, true).unwrap();
        let mut map = LabelMap::background(40, 40);
        let mut mask = ImageF::zeros(40, 40, 1);
        for idx in 0..40 * 40 {
            if raster.face[idx] >= 0 {
                let f = tf[raster.face[idx] as usize];
                map.data[idx] = labels[f[0] as usize % labels.len()].index() as u8;
                mask.data[idx] = 1.0;
            }
        }
        targets.parsing[0] = Some(map);
        targets.head_masks[0] = Some(mask);
        (verts, faces, labels, targets)
    }

    #[test]
    fn parse_loss_zero_cases_and_oracle() {
        let (verts, faces, labels, mut targets) = parse_fixture(31);
        // All-zero mask annihilates the loss.
        targets.head_masks[0] = Some(ImageF::zeros(40, 40, 1));
        let (value, grad) = loss_parse(&verts, &faces, &labels, &targets.view()).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.iter().all(|g| g.norm() == 0.0));

        // Rendered-equals-target inside the mask: build the target from
        // the render itself.
        let cam = targets.cameras[0].clone();
        let raster = rasterize(&verts, &faces, &cam, true).unwrap();
        let mut map = LabelMap::background(40, 40);
        let mut mask = ImageF::zeros(40, 40, 1);
        for idx in 0..40 * 40 {
            if raster.face[idx] >= 0 {
                let f = faces[raster.face[idx] as usize];
                let l = labels[f[0] as usize];
                // Mask only pixels whose face is label-constant, where the
                // interpolated one-hot render is exactly the label.
                if (0..3).all(|c| labels[f[c] as usize] == l) {
                    map.data[idx] = l.index() as u8;
                    mask.data[idx] = 1.0;
                }
            }
        }
        targets.parsing[0] = Some(map);
        targets.head_masks[0] = Some(mask);
        let (value, _) = loss_parse(&verts, &faces, &labels, &targets.view()).unwrap();
        assert!(value < 1e-24, "perfect-fit parse loss {value}");

        // Random-mask pixel-loop oracle.
        let (verts, faces, labels, targets) = parse_fixture(32);
        let (value, _) = loss_parse(&verts, &faces, &labels, &targets.view()).unwrap();
        let raster = rasterize(&verts, &faces, &targets.cameras[0], true).unwrap();
        let attrs = one_hot_labels(&labels);
        let ch = SemanticLabel::ALL.len();
        let mask = targets.head_masks[0].as_ref().unwrap();
        let map = targets.parsing[0].as_ref().unwrap();
        let mut num = 0.0;
        let mut count = 0usize;
        for idx in 0..40 * 40 {
            let s = mask.data[idx];
            if s <= 0.0 {
                continue;
            }
            count += 1;
            for c in 0..ch {
                let p = if raster.face[idx] >= 0 {
                    let f = faces[raster.face[idx] as usize];
                    let b = raster.bary[idx];
                    (0..3).map(|i| b[i] * attrs[f[i] as usize * ch + c]).sum::<f64>()
                } else {
                    0.0
                };
                let t = if map.data[idx] as usize == c { 1.0 } else { 0.0 };
                num += s * s * (t - p) * (t - p);
            }
        }
        let oracle = num / count as f64;
        assert!((value - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn parse_gradient_matches_fd() {
        let (verts, faces, labels, targets) = parse_fixture(33);
        let view = targets.view();
        let (_, grad) = loss_parse(&verts, &faces, &labels, &view).unwrap();
        let err = fd_check(
            &verts,
            &grad,
            |v| loss_parse(v, &faces, &labels, &view).unwrap().0,
            1e-6,
            24,
            77,
        );
        assert!(err < 1e-3, "parse FD error {err}");
    }

    fn eye_fixture(seed: u64) -> (Vec<Vec3>, Vec<[u32; 3]>, Vec<SemanticLabel>, OwnedTargets) {
        // Head blob plus a small protruding eyeball sphere.
        let (mut verts, mut faces) = random_mesh(seed, 1);
        let base = verts.len() as u32;
        let (ev, ef) = toy::icosphere(1, 0.35);
        let ec = Vec3::new(0.3, 0.2, 1.05);
        verts.extend(ev.iter().map(|v| v + ec));
        faces.extend(ef.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        let labels: Vec<SemanticLabel> = (0..verts.len())
            .map(|i| {
                if i as u32 >= base {
                    SemanticLabel::EyeballLeft
                } else {
                    SemanticLabel::Face
                }
            })
            .collect();
        let cam = ortho_camera(0.0, 40, 11.0);
        let mut targets = OwnedTargets::empty(vec![cam.clone()]);
        // Observed eye mask: a disc around the eyeball projection.
        let mut mask = ImageF::zeros(40, 40, 1);
        let center = cam.project_point(&ec);
        for y in 0..40 {
            for x in 0..40 {
                let dx = x as f64 + 0.5 - center.pixel[0];
                let dy = y as f64 + 0.5 - center.pixel[1];
                if (dx * dx + dy * dy).sqrt() < 0.3 * 11.0 {
                    mask.data[y * 40 + x] = 1.0;
                }
            }
        }
        targets.eye_masks[0] = Some(mask);
        targets.parsing[0] = Some(LabelMap::background(40, 40));
        targets.head_masks[0] = Some(ImageF::zeros(40, 40, 1));
        (verts, faces, labels, targets)
    }

    #[test]
    fn eye_mask_loss_perfect_fit_and_pixel_contribution() {
        let (verts, faces, labels, targets) = eye_fixture(41);
        let loss = loss_eye_mask(&verts, &faces, &labels, &targets.view()).unwrap();
        // Eyeball covers the observed disc; occluded head geometry behind
        // it is dropped, so the loss is near zero.
        assert!(loss.value < 1e-4, "perfect-fit eye loss {}", loss.value);
        assert!(loss.skipped_views.is_empty());

        // One observed pixel that nothing covers contributes 1/|pixels|.
        let mut far = OwnedTargets::empty(vec![targets.cameras[0].clone()]);
        let mut mask = ImageF::zeros(40, 40, 1);
        mask.data[0] = 1.0;
        far.eye_masks[0] = Some(mask);
        let loss = loss_eye_mask(&verts, &faces, &labels, &far.view()).unwrap();
        let expect = 1.0 / (40.0 * 40.0);
        assert!((loss.value - expect).abs() < 1e-12);
    }

    #[test]
    fn eye_mask_skips_views_without_masks() {
        let (verts, faces, labels, mut targets) = eye_fixture(43);
        targets.eye_masks[0] = None;
        let loss = loss_eye_mask(&verts, &faces, &labels, &targets.view()).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.skipped_views, vec![0]);
    }

    #[test]
    fn eye_mask_gradient_matches_fd() {
        let (verts, faces, labels, targets) = eye_fixture(45);
        let view = targets.view();
        let (value, grad) = {
            let l = loss_eye_mask(&verts, &faces, &labels, &view).unwrap();
            (l.value, l.grad)
        };
        assert!(value > 0.0 || grad.iter().any(|g| g.norm() > 0.0) || value == 0.0);
        let err = fd_check(
            &verts,
            &grad,
            |v| loss_eye_mask(v, &faces, &labels, &view).unwrap().value,
            1e-6,
            24,
            99,
        );
        assert!(err < 5e-2, "eye mask FD error {err}");
    }

    #[test]
    fn symmetric_eye_mask_is_zero_against_its_own_render() {
        let (verts, faces, labels, mut targets) = eye_fixture(51);
        // Observed mask = the model's own visible eye coverage.
        let cam = targets.cameras[0].clone();
        let eye_faces: Vec<bool> = faces
            .iter()
            .map(|f| f.iter().all(|&v| labels[v as usize].is_eyeball()))
            .collect();
        let raster = rasterize(&verts, &faces, &cam, true).unwrap();
        let own = soft_mask(
            &verts,
            &faces,
            Some(&eye_faces),
            &cam,
            Some((&raster, OCCLUSION_DEPTH_TOL)),
        )
        .unwrap();
        targets.eye_masks[0] = Some(own.image.clone());
        let loss =
            loss_eye_mask_rendered_vs_observed(&verts, &faces, &labels, &targets.view()).unwrap();
        assert!(loss.value < 1e-24, "self-consistent loss {}", loss.value);

        // An oversized observation pulls outward, an undersized one inward:
        // the loss is strictly positive either way, unlike the one-sided
        // cover-and-vacate form which ignores over-coverage.
        let mut empty = OwnedTargets::empty(vec![cam.clone()]);
        empty.eye_masks[0] = Some(ImageF::zeros(cam.width, cam.height, 1));
        let over = loss_eye_mask_rendered_vs_observed(&verts, &faces, &labels, &empty.view())
            .unwrap();
        assert!(over.value > 0.0);
        let covered = loss_eye_mask(&verts, &faces, &labels, &empty.view()).unwrap();
        assert_eq!(covered.value, 0.0);
    }

    #[test]
    fn symmetric_eye_mask_gradient_matches_fd() {
        // Bare eyeball, no second object: the occlusion gate holds a fixed
        // z-buffer, so finite differences are only meaningful where no
        // cross-object winner flips can occur.
        let (ev, faces) = toy::icosphere(1, 0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let rot = crate::math::axis_angle_to_matrix(&Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ));
        let verts: Vec<Vec3> = ev.iter().map(|v| rot * v).collect();
        let labels = vec![SemanticLabel::EyeballLeft; verts.len()];
        let cam = ortho_camera(0.0, 40, 11.0);
        let mut targets = OwnedTargets::empty(vec![cam]);
        let mut mask = ImageF::zeros(40, 40, 1);
        for y in 0..40 {
            for x in 0..40 {
                let dx = x as f64 + 0.5 - 22.0;
                let dy = y as f64 + 0.5 - 18.5;
                if (dx * dx + dy * dy).sqrt() < 0.3 * 11.0 {
                    mask.data[y * 40 + x] = 1.0;
                }
            }
        }
        targets.eye_masks[0] = Some(mask);
        let view = targets.view();
        let grad = loss_eye_mask_rendered_vs_observed(&verts, &faces, &labels, &view)
            .unwrap()
            .grad;
        let err = fd_check(
            &verts,
            &grad,
            |v| {
                loss_eye_mask_rendered_vs_observed(v, &faces, &labels, &view)
                    .unwrap()
                    .value
            },
            1e-6,
            24,
            101,
        );
        assert!(err < 5e-2, "symmetric eye mask FD error {err}");
    }

    #[test]
    fn landmark_projection_arithmetic_and_fd() {
        let cam = ortho_camera(0.0, 128, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<Vec3> = (0..crate::rig::NUM_LANDMARKS)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        // Detected equals projected: zero.
        let detected: Vec<[f64; 2]> = points.iter().map(|p| cam.project_point(p).pixel).collect();
        let (value, _) = loss_landmark_projection(&points, &detected, &cam).unwrap();
        assert_eq!(value, 0.0);

        // One landmark off by (3,4) px contributes 25/68.
        let mut off = detected.clone();
        off[10][0] += 3.0;
        off[10][1] += 4.0;
        let (value, _) = loss_landmark_projection(&points, &off, &cam).unwrap();
        assert!((value - 25.0 / 68.0).abs() < 1e-12);

        // Random offsets: loop oracle.
        let noisy: Vec<[f64; 2]> = detected
            .iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(-5.0..5.0),
                    p[1] + rng.random_range(-5.0..5.0),
                ]
            })
            .collect();
        let (value, grad) = loss_landmark_projection(&points, &noisy, &cam).unwrap();
        let mut oracle = 0.0;
        for (p, t) in points.iter().zip(&noisy) {
            let px = cam.project_point(p).pixel;
            oracle += (px[0] - t[0]).powi(2) + (px[1] - t[1]).powi(2);
        }
        oracle /= points.len() as f64;
        assert!((value - oracle).abs() < 1e-12 * oracle);

        let err = fd_check(
            &points,
            &grad,
            |v| loss_landmark_projection(v, &noisy, &cam).unwrap().0,
            1e-6,
            30,
            11,
        );
        assert!(err < 1e-6, "projection FD error {err}");
    }

    #[test]
    fn landmark_symmetry_cases_and_invariances() {
        let sym = LandmarkSymmetry {
            pairs: vec![(0, 1)],
            self_symmetric: vec![2],
        };
        // Perfectly mirrored pair and on-plane self landmark: zero.
        let lms = vec![
            Vec3::new(0.4, 0.2, 0.9),
            Vec3::new(-0.4, 0.2, 0.9),
            Vec3::new(0.0, -0.3, 1.0),
        ];
        let (value, _) = loss_landmark_symmetry(&lms, &sym);
        assert_eq!(value, 0.0);

        // Pair offset by (d, 0, 0) from the mirror position: d^2 plus the
        // self term being excluded (set to plane).
        let d = 0.37;
        let lms2 = vec![
            Vec3::new(0.4 + d, 0.2, 0.9),
            Vec3::new(-0.4, 0.2, 0.9),
            Vec3::new(0.0, -0.3, 1.0),
        ];
        let (value, _) = loss_landmark_symmetry(&lms2, &sym);
        assert!((value - d * d).abs() < 1e-15);

        // Invariance under y/z translation and whole-set mirroring.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sym = LandmarkSymmetry {
            pairs: vec![(0, 1), (2, 3)],
            self_symmetric: vec![4],
        };
        let random: Vec<Vec3> = (0..5)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let (v0, grad) = loss_landmark_symmetry(&random, &sym);
        let shifted: Vec<Vec3> = random.iter().map(|p| p + Vec3::new(0.0, 0.7, -0.3)).collect();
        let (v1, _) = loss_landmark_symmetry(&shifted, &sym);
        assert!((v0 - v1).abs() < 1e-12);
        let mirrored: Vec<Vec3> = random.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let (v2, _) = loss_landmark_symmetry(&mirrored, &sym);
        assert!((v0 - v2).abs() < 1e-12);

        let err = fd_check(
            &random,
            &grad,
            |v| loss_landmark_symmetry(v, &sym).0,
            1e-7,
            15,
            5,
        );
        assert!(err < 1e-7, "symmetry FD error {err}");
    }

    #[test]
    fn landmark_symmetry_through_regressor_matches_fd() {
        let (template, _) = toy::toy_head();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let verts: Vec<Vec3> = template
            .vertices
            .iter()
            .map(|v| {
                v + 1e-4
                    * Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
            })
            .collect();
        let (value, grad) = loss_landmark_symmetry_on_vertices(
            &verts,
            &template.landmark_regressor,
            &template.landmark_symmetry,
        );
        assert!(value > 0.0);
        let err = fd_check(
            &verts,
            &grad,
            |v| {
                loss_landmark_symmetry_on_vertices(
                    v,
                    &template.landmark_regressor,
                    &template.landmark_symmetry,
                )
                .0
            },
            1e-8,
            20,
            17,
        );
        assert!(err < 1e-4, "regressor-chained FD error {err}");
        // The rest template is symmetric: near-zero loss.
        let (rest_value, _) = loss_landmark_symmetry_on_vertices(
            &template.vertices,
            &template.landmark_regressor,
            &template.landmark_symmetry,
        );
        assert!(rest_value < 1e-30, "rest symmetry {rest_value}");
    }

    #[test]
    fn eyeball_sphere_closed_form_examples() {
        use std::f64::consts::PI;
        let z = Vec3::new(0.1, -0.2, 0.3);
        let (c, r) = eyeball_sphere_params(&z, PI, 2.0).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!((c - z).norm() < 1e-15);

        let (c, r) = eyeball_sphere_params(&z, PI / 3.0, 1.0).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!((c - (z - Vec3::new(0.0, 0.0, (PI / 6.0).cos()))).norm() < 1e-15);

        let (_, r) = eyeball_sphere_params(&z, 1.3, 0.0).unwrap();
        assert_eq!(r, 0.0);
        assert!(eyeball_sphere_params(&z, 0.0, 1.0).is_err());
    }

    #[test]
    fn sphericity_cases_and_fd() {
        let (template, info) = toy::toy_head();
        let centers = [info.eye_center_left, info.eye_center_right];
        // Template eyeballs are exact spheres of the template radius.
        let loss = loss_eyeball_sphericity(
            &template.vertices,
            &template.labels,
            &centers,
            info.eye_radius,
            false,
        )
        .unwrap();
        assert!(loss.value < 1e-24, "on-sphere loss {}", loss.value);

        // Perturbed vertices: FD against vertex, center and radius grads.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let verts: Vec<Vec3> = template
            .vertices
            .iter()
            .map(|v| {
                v + 2e-4
                    * Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
            })
            .collect();
        for paper_form in [false, true] {
            let loss = loss_eyeball_sphericity(
                &verts,
                &template.labels,
                &centers,
                info.eye_radius,
                paper_form,
            )
            .unwrap();
            let err = fd_check(
                &verts,
                &loss.grad_vertices,
                |v| {
                    loss_eyeball_sphericity(
                        v,
                        &template.labels,
                        &centers,
                        info.eye_radius,
                        paper_form,
                    )
                    .unwrap()
                    .value
                },
                1e-8,
                20,
                60,
            );
            assert!(err < 1e-4, "sphericity FD error {err} (paper={paper_form})");
            // Radius gradient by FD.
            let h = 1e-8;
            let up = loss_eyeball_sphericity(
                &verts,
                &template.labels,
                &centers,
                info.eye_radius + h,
                paper_form,
            )
            .unwrap()
            .value;
            let down = loss_eyeball_sphericity(
                &verts,
                &template.labels,
                &centers,
                info.eye_radius - h,
                paper_form,
            )
            .unwrap()
            .value;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - loss.grad_radius).abs() <= 1e-3 * fd.abs().max(loss.grad_radius.abs()),
                "radius grad {} vs fd {fd}",
                loss.grad_radius
            );
        }
    }

    #[test]
    fn total_loss_linearity_and_zero_weights() {
        let (verts, faces, labels, mut targets) = parse_fixture(61);
        for k in 0..targets.cameras.len() {
            let (img, valid) = render_soft_normals(&verts, &faces, &targets.cameras[k]);
            targets.normals[k] = img;
            targets.normal_valid[k] = valid;
        }
        // Landmarks: project a few vertices.
        let cam0 = targets.cameras[0].clone();
        let lm_points: Vec<Vec3> = (0..crate::rig::NUM_LANDMARKS)
            .map(|i| verts[i % verts.len()])
            .collect();
        targets.landmarks = lm_points
            .iter()
            .map(|p| {
                let px = cam0.project_point(p).pixel;
                [px[0] + 1.0, px[1] - 2.0]
            })
            .collect();
        let regressor = SparseRowMat::from_triplets(
            crate::rig::NUM_LANDMARKS,
            verts.len(),
            (0..crate::rig::NUM_LANDMARKS as u32).map(|i| (i, i % verts.len() as u32, 1.0)),
        )
        .unwrap();
        let symmetry = LandmarkSymmetry {
            pairs: vec![(0, 1), (2, 3)],
            self_symmetric: vec![4],
        };
        let reference = verts.clone();
        let moved: Vec<Vec3> = verts
            .iter()
            .enumerate()
            .map(|(i, v)| v + 1e-3 * Vec3::new((i % 3) as f64, 0.3, -0.2))
            .collect();
        let view = targets.view();

        let zero = LossWeights {
            rec: 0.0,
            sema: 0.0,
            lmk: 0.0,
            lap: 0.0,
            mse: [0.0; 6],
            eyereg: 0.0,
        };
        let out = loss_total(
            &moved, &reference, &moved, &lm_points, &faces, &labels, &regressor, &symmetry,
            &view, &zero,
        )
        .unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_posed.iter().all(|g| g.norm() == 0.0));
        assert!(out.grad_canonical.iter().all(|g| g.norm() == 0.0));

        let weights = LossWeights {
            rec: 0.8,
            sema: 0.6,
            lmk: 0.3,
            lap: 4.0,
            mse: [1.0, 0.5, 1.0, 0.25, 1.0, 0.75],
            eyereg: 1.0,
        };
        let out = loss_total(
            &moved, &reference, &moved, &lm_points, &faces, &labels, &regressor, &symmetry,
            &view, &weights,
        )
        .unwrap();
        // Reassemble from the breakdown.
        let (np, _) = loss_normal(&moved, &faces, &view, &weights.mse).unwrap();
        let disp: Vec<Vec3> = moved.iter().zip(&reference).map(|(a, b)| a - b).collect();
        let (lp, _) = loss_laplacian(&disp, &faces);
        let (pp, _) = loss_parse(&moved, &faces, &labels, &view).unwrap();
        let em = loss_eye_mask(&moved, &faces, &labels, &view).unwrap();
        let (pro, _) = loss_landmark_projection(&lm_points, &view.landmarks, &cam0).unwrap();
        let (sym, _) = loss_landmark_symmetry_on_vertices(&moved, &regressor, &symmetry);
        let norm_scale = 1.0 / (cam0.width as f64 * cam0.height as f64);
        let expect = weights.rec * (np + weights.lap * lp)
            + weights.sema * (pp + em.value)
            + weights.lmk * (pro * norm_scale + sym);
        assert!(
            (out.value - expect).abs() < 1e-12 * expect.max(1.0),
            "total {} expected {expect}",
            out.value
        );
        assert_eq!(out.terms["normal"], np);
        assert_eq!(out.terms["parse"], pp);
        assert_eq!(out.terms["landmark_projection"], pro);
    }

}
