//! Reconstruction driver: staged vertex deformation against the view
//! targets with topology correction between epochs, followed by eyeball
//! sphere fitting and teeth alignment into the finished rig.
//!
//! Vertices are optimized directly (the template's canonical positions)
//! with a moment-based first-order method; the control parameters and
//! cameras stay fixed throughout. Epoch 1 can freeze face- and
//! neck-labeled vertices so only hair geometry moves first.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{CaseBundle, FitConfig, ReportRecord, ReportWriter};
use crate::math::{Aabb, Mat3, Vec3};
use crate::objective::{self, LossWeights, ViewTargets};
use crate::remesh::{remesh_pass, RemeshConfig, RemeshLog};
use crate::rig::{ControlParams, RiggedTemplate, SemanticLabel, TeethTemplate};

// ---------------------------------------------------------------------------
// Optimizer.

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam state over per-vertex 3-vectors.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec3>,
    v: Vec<Vec3>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            t: 0,
        }
    }

    /// One update step. Frozen parameters receive neither an update nor a
    /// moment change, so they stay bit-identical.
    fn step(&mut self, params: &mut [Vec3], grads: &[Vec3], lr: f64, frozen: Option<&[bool]>) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g.component_mul(&g);
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            for c in 0..3 {
                params[i][c] -= lr * mh[c] / (vh[c].sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fit report.

/// Per-epoch consistency check result recorded in the report.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub check: String,
    pub ok: bool,
    pub detail: String,
}

/// Everything a fit run measured about itself.
#[derive(Debug, Clone, Serialize, Default)]
pub struct FitReport {
    /// One record per optimizer step, monotone in `iter`.
    pub iterations: Vec<ReportRecord>,
    pub remesh_logs: Vec<RemeshLog>,
    pub audits: Vec<AuditRecord>,
    pub final_loss: f64,
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Recomposes the weighted total from an iteration's unweighted term
/// breakdown; `front_pixels` is width*height of the front camera (the
/// landmark projection term is logged in pixel units but weighted in
/// normalized image coordinates).
pub fn recompose_total(
    terms: &BTreeMap<String, f64>,
    weights: &LossWeights,
    front_pixels: f64,
) -> f64 {
    let get = |k: &str| terms.get(k).copied().unwrap_or(0.0);
    weights.rec * (get("normal") + weights.lap * get("laplacian"))
        + weights.sema * (get("parse") + get("eye_mask"))
        + weights.lmk * (get("landmark_projection") / front_pixels + get("landmark_symmetry"))
}

fn remesh_config(config: &FitConfig) -> RemeshConfig {
    RemeshConfig {
        max_edge_eps: config.remesh.max_edge,
        min_edge: config.remesh.min_edge,
        fold_angle_deg: config.remesh.fold_angle_deg,
        flip: config.remesh.flip,
        remove: config.remesh.remove,
        ..RemeshConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Geometry fitting.

/// Optimizes the template's canonical vertices against the case targets:
/// `remesh_passes + 1` epochs of `iters_per_epoch` steps each, with one
/// topology-correction pass at every epoch boundary. The control
/// parameters and cameras are taken from the case and held fixed. A
/// non-finite loss rolls the step back and halves the step size, up to
/// five times in a row before aborting; progress already streamed to
/// `writer` survives an abort.
pub fn fit_geometry(
    template: &RiggedTemplate,
    case: &CaseBundle,
    config: &FitConfig,
    mut writer: Option<&mut ReportWriter>,
) -> Result<(RiggedTemplate, FitReport)> {
    template.validate()?;
    let weights = config.losses.to_weights();
    weights.validate()?;
    let kappa = &case.kappa;
    let targets = ViewTargets::from_case(case);
    let schedule = &config.schedule;
    let epochs = schedule.remesh_passes + 1;
    let rcfg = remesh_config(config);
    rcfg.validate()?;

    let mut current = template.clone();
    let mut report = FitReport::default();
    let diag = Aabb::from_points(&current.vertices).diagonal();
    if !(diag > 0.0) {
        return Err(Error::invalid("degenerate template bounding box"));
    }
    let mut lr = schedule.lr * diag;
    let front_pixels = (case.cameras[0].width * case.cameras[0].height) as f64;
    let t0 = Instant::now();
    let mut global_iter = 0usize;

    for epoch in 0..epochs {
        let epoch_t0 = Instant::now();
        let reference = current.vertices.clone();
        let frozen: Option<Vec<bool>> = (epoch == 0 && schedule.stage1_freeze).then(|| {
            current
                .labels
                .iter()
                .map(|l| matches!(l, SemanticLabel::Face | SemanticLabel::Neck))
                .collect()
        });
        let frozen_snapshot: Vec<Vec3> = match &frozen {
            Some(mask) => current
                .vertices
                .iter()
                .zip(mask)
                .filter(|(_, f)| **f)
                .map(|(v, _)| *v)
                .collect(),
            None => Vec::new(),
        };
        let mut adam = Adam::new(current.n_verts());
        let mut retries = 0u32;
        let mut snapshot: Option<(Vec<Vec3>, Adam)> = None;
        let mut done = 0usize;
        while done < schedule.iters_per_epoch {
            let tf = current.skinning_transforms(kappa)?;
            let posed = current.pose_model(kappa)?;
            let posed_landmarks = current.posed_landmarks(kappa, &tf)?;
            let loss = objective::loss_total(
                &current.vertices,
                &reference,
                &posed.vertices,
                &posed_landmarks,
                &current.faces,
                &current.labels,
                &current.landmark_regressor,
                &current.landmark_symmetry,
                &targets,
                &weights,
            )?;
            if !loss.value.is_finite() {
                retries += 1;
                if retries > 5 {
                    return Err(Error::numerical(format!(
                        "loss stayed non-finite after 5 step-size halvings (epoch {epoch})"
                    )));
                }
                if let Some((verts, state)) = snapshot.take() {
                    current.vertices = verts;
                    adam = state;
                }
                lr *= 0.5;
                continue;
            }
            retries = 0;
            let mut grad = current.pose_backward(&tf, &loss.grad_posed, Some(&loss.grad_posed_landmarks));
            for (g, c) in grad.iter_mut().zip(&loss.grad_canonical) {
                *g += c;
            }
            let record = ReportRecord {
                epoch,
                iter: global_iter,
                total: loss.value,
                terms: loss.terms,
                lr,
                n_verts: current.n_verts(),
            };
            if let Some(w) = writer.as_deref_mut() {
                w.append(&record)?;
            }
            report.final_loss = record.total;
            report.iterations.push(record);
            snapshot = Some((current.vertices.clone(), adam.clone()));
            adam.step(&mut current.vertices, &grad, lr, frozen.as_deref());
            global_iter += 1;
            done += 1;
        }
        if frozen.is_some() {
            let mask = frozen.as_deref().unwrap();
            let after: Vec<Vec3> = current
                .vertices
                .iter()
                .zip(mask)
                .filter(|(_, f)| **f)
                .map(|(v, _)| *v)
                .collect();
            let ok = after == frozen_snapshot;
            report.audits.push(AuditRecord {
                epoch,
                check: "stage1_freeze".to_string(),
                ok,
                detail: format!("{} frozen vertices", after.len()),
            });
            if !ok {
                return Err(Error::numerical("frozen vertices moved during epoch 1"));
            }
        }
        if let Some(last) = report.iterations.last() {
            let recomposed = recompose_total(&last.terms, &weights, front_pixels);
            let ok = (recomposed - last.total).abs() <= 1e-9 * last.total.abs().max(1.0);
            report.audits.push(AuditRecord {
                epoch,
                check: "loss_linearity".to_string(),
                ok,
                detail: format!("recomposed {recomposed:.6e} vs {:.6e}", last.total),
            });
        }
        if epoch + 1 < epochs {
            let log = remesh_pass(&mut current, &kappa.beta, &rcfg)?;
            let audit = current.validate();
            report.audits.push(AuditRecord {
                epoch,
                check: "rig_invariants_after_remesh".to_string(),
                ok: audit.is_ok(),
                detail: audit.err().map(|e| e.to_string()).unwrap_or_default(),
            });
            report.remesh_logs.push(log);
        }
        report.epoch_seconds.push(epoch_t0.elapsed().as_secs_f64());
    }
    current.validate()?;
    report.total_seconds = t0.elapsed().as_secs_f64();
    Ok((current, report))
}

// ---------------------------------------------------------------------------
// Eyeball fitting.

/// Shared-radius two-sphere eyeball fit.
#[derive(Debug, Clone)]
pub struct EyeballFit {
    pub radius: f64,
    pub center_left: Vec3,
    pub center_right: Vec3,
    /// Set when no usable eye mask existed and the initialization was
    /// returned as-is.
    pub from_initialization_only: bool,
}

impl EyeballFit {
    pub fn record(&self) -> EyeballFitRecord {
        EyeballFitRecord {
            radius: self.radius,
            center_left: self.center_left.into(),
            center_right: self.center_right.into(),
            from_initialization_only: self.from_initialization_only,
        }
    }
}

/// Serializable mirror of `EyeballFit`.
#[derive(Debug, Clone, Serialize)]
pub struct EyeballFitRecord {
    pub radius: f64,
    pub center_left: [f64; 3],
    pub center_right: [f64; 3],
    pub from_initialization_only: bool,
}

fn eye_members(template: &RiggedTemplate) -> [Vec<u32>; 2] {
    [
        template.vertices_with_label(SemanticLabel::EyeballLeft),
        template.vertices_with_label(SemanticLabel::EyeballRight),
    ]
}

/// Mean position of the front half of a vertex set: the exposed cap of an
/// eyeball, standing in for the eye-opening center.
fn front_cap_mean(vertices: &[Vec3], members: &[u32]) -> Vec3 {
    let mean_z = members.iter().map(|&v| vertices[v as usize].z).sum::<f64>()
        / members.len() as f64;
    let cap: Vec<Vec3> = members
        .iter()
        .map(|&v| vertices[v as usize])
        .filter(|p| p.z >= mean_z)
        .collect();
    cap.iter().sum::<Vec3>() / cap.len() as f64
}

/// Observed widths of the two eyes in world units from the front-view eye
/// mask: the mask is split at the image midline (the subject's left eye
/// projects right of center in the front view) and each side's horizontal
/// pixel extent is divided by the camera scale. Returns None when a side
/// is empty.
fn mask_eye_widths(case: &CaseBundle) -> Option<[f64; 2]> {
    let cam = &case.cameras[0];
    let mask = case.eye_masks[0].as_ref()?;
    let cx = cam.width as f64 / 2.0;
    let mut extent = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(x, y, 0) <= 0.5 {
                continue;
            }
            let px = x as f64 + 0.5;
            let side = if px >= cx { 0 } else { 1 };
            extent[side][0] = extent[side][0].min(px);
            extent[side][1] = extent[side][1].max(px);
        }
    }
    let mut widths = [0.0; 2];
    for side in 0..2 {
        if extent[side][1] < extent[side][0] {
            return None;
        }
        widths[side] = (extent[side][1] - extent[side][0] + 1.0) / cam.scale_or_focal;
    }
    Some(widths)
}

/// Fits a shared radius and two centers against the observed eye masks and
/// repositions the eyeball-labeled vertices onto the fitted spheres along
/// rays from the centers. Initialization follows the closed-form sphere
/// from the front-cap reference point, the configured cap angle, and the
/// mask-measured eye widths; with no usable masks the initialization is
/// returned flagged (vertices still repositioned onto it).
pub fn fit_eyeballs(
    template: &mut RiggedTemplate,
    case: &CaseBundle,
    config: &FitConfig,
) -> Result<EyeballFit> {
    let members = eye_members(template);
    if members[0].is_empty() || members[1].is_empty() {
        return Err(Error::invalid("template lacks eyeball-labeled vertices"));
    }
    let kappa = &case.kappa;
    let eps = config.eyeballs.epsilon_angle_deg.to_radians();

    // Initialization: closed-form sphere per side, shared radius averaged.
    let widths = mask_eye_widths(case);
    let mut centers = [Vec3::zeros(); 2];
    let mut radius = 0.0;
    for side in 0..2 {
        let z = front_cap_mean(&template.vertices, &members[side]);
        match widths {
            Some(w) => {
                let (c, r) = objective::eyeball_sphere_params(&z, eps, w[side])?;
                centers[side] = c;
                radius += 0.5 * r;
            }
            None => {
                // No mask: keep the template's own sphere.
                let c = members[side]
                    .iter()
                    .map(|&v| template.vertices[v as usize])
                    .sum::<Vec3>()
                    / members[side].len() as f64;
                centers[side] = c;
                radius += 0.5
                    * members[side]
                        .iter()
                        .map(|&v| (template.vertices[v as usize] - c).norm())
                        .sum::<f64>()
                    / members[side].len() as f64;
            }
        }
    }

    // Fixed unit directions from the template's own eyeball spheres carry
    // the vertex layout onto any fitted sphere.
    let mut dirs: [Vec<Vec3>; 2] = [Vec::new(), Vec::new()];
    for side in 0..2 {
        let c0 = members[side]
            .iter()
            .map(|&v| template.vertices[v as usize])
            .sum::<Vec3>()
            / members[side].len() as f64;
        dirs[side] = members[side]
            .iter()
            .map(|&v| {
                let d = template.vertices[v as usize] - c0;
                let n = d.norm();
                if n > 1e-12 {
                    d / n
                } else {
                    Vec3::z()
                }
            })
            .collect();
    }

    let reposition = |t: &mut RiggedTemplate, centers: &[Vec3; 2], radius: f64| {
        for side in 0..2 {
            for (k, &v) in members[side].iter().enumerate() {
                t.vertices[v as usize] = centers[side] + radius * dirs[side][k];
            }
        }
    };

    let usable_masks = case
        .eye_masks
        .iter()
        .any(|m| m.as_ref().is_some_and(|m| m.data.iter().any(|&v| v > 0.5)));
    if !usable_masks || config.eyeballs.iters == 0 {
        reposition(template, &centers, radius);
        template.validate()?;
        return Ok(EyeballFit {
            radius,
            center_left: centers[0],
            center_right: centers[1],
            from_initialization_only: !usable_masks,
        });
    }

    // Optimize (r, c_left, c_right) through the posed render. The chain to
    // the sphere parameters runs through the canonical vertex gradients,
    // which pose_backward already carries through skinning and the joint
    // regressor.
    let mask_loss = match config.eyeballs.mask_form.as_str() {
        "rendered_vs_observed" => objective::loss_eye_mask_rendered_vs_observed,
        "cover_and_vacate" => objective::loss_eye_mask,
        other => {
            return Err(Error::invalid(format!("unknown eyeball mask_form '{other}'")));
        }
    };
    let targets = ViewTargets::from_case(case);
    let mut adam = Adam::new(3); // [c_left, c_right, (r, 0, 0)]
    let lr0 = config.eyeballs.lr * radius.max(1e-9);
    let iters = config.eyeballs.iters;
    let lambda = config.eyeballs.sphericity_weight;
    let paper_form = config.eyeballs.sphericity_paper_form;
    for it in 0..iters {
        // Linear step-size decay anneals the final wobble.
        let lr = lr0 * (1.0 - it as f64 / iters as f64);
        reposition(template, &centers, radius);
        let posed = template.pose_model(kappa)?;
        let tf = template.skinning_transforms(kappa)?;
        let eye = mask_loss(
            &posed.vertices,
            &template.faces,
            &template.labels,
            &targets,
        )?;
        let spher = objective::loss_eyeball_sphericity(
            &template.vertices,
            &template.labels,
            &centers,
            radius,
            paper_form,
        )?;
        let grad_cano = template.pose_backward(&tf, &eye.grad, None);
        let mut g_c = [Vec3::zeros(); 2];
        let mut g_r = lambda * spher.grad_radius;
        for side in 0..2 {
            g_c[side] += lambda * spher.grad_centers[side];
            for (k, &v) in members[side].iter().enumerate() {
                let g = grad_cano[v as usize] + lambda * spher.grad_vertices[v as usize];
                g_c[side] += g;
                g_r += g.dot(&dirs[side][k]);
            }
        }
        let mut params = [centers[0], centers[1], Vec3::new(radius, 0.0, 0.0)];
        let grads = [g_c[0], g_c[1], Vec3::new(g_r, 0.0, 0.0)];
        adam.step(&mut params, &grads, lr, None);
        centers = [params[0], params[1]];
        radius = params[2].x.max(1e-9);
        if !(radius.is_finite() && centers.iter().all(|c| c.iter().all(|v| v.is_finite()))) {
            return Err(Error::numerical("eyeball fit diverged"));
        }
    }
    reposition(template, &centers, radius);
    template.validate()?;
    Ok(EyeballFit {
        radius,
        center_left: centers[0],
        center_right: centers[1],
        from_initialization_only: false,
    })
}

// ---------------------------------------------------------------------------
// Teeth alignment.

/// Similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity (no reflection) mapping `source` points onto
/// `target` points: the closed-form orthogonal Procrustes solution with
/// uniform scaling. Needs at least 3 non-degenerate correspondences.
pub fn procrustes_similarity(source: &[Vec3], target: &[Vec3]) -> Result<Similarity> {
    if source.len() != target.len() || source.len() < 3 {
        return Err(Error::invalid(format!(
            "similarity needs at least 3 paired points, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let n = source.len() as f64;
    let mu_s: Vec3 = source.iter().sum::<Vec3>() / n;
    let mu_t: Vec3 = target.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let sc = s - mu_s;
        let tc = t - mu_t;
        cov += tc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-24 {
        return Err(Error::invalid("similarity source points are coincident"));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numerical("similarity SVD failed"))?;
    let vt = svd.v_t.ok_or_else(|| Error::numerical("similarity SVD failed"))?;
    let mut s_diag = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&s_diag) * vt;
    let scale = (svd.singular_values.dot(&s_diag)) / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::numerical(format!("similarity scale {scale} is unusable")));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Rigidly places the teeth asset into the fitted head via the similarity
/// that maps its anchor points onto their designated head vertices, then
/// appends it to the rig: upper-arch vertices skin one-hot to the head
/// joint, lower-arch to the jaw, with zero blendshape rows and untouched
/// regressors. Returns the applied transform.
pub fn align_teeth(template: &mut RiggedTemplate, teeth: &TeethTemplate) -> Result<Similarity> {
    if teeth.upper_vertex_count > teeth.vertices.len() {
        return Err(Error::invalid("teeth upper_vertex_count exceeds vertex count"));
    }
    let missing: Vec<u32> = teeth
        .anchors
        .iter()
        .map(|&(v, _)| v)
        .filter(|&v| v as usize >= template.face_region_vertex_count)
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "teeth anchor vertices {missing:?} are outside the stable face-region prefix"
        )));
    }
    let source: Vec<Vec3> = teeth.anchors.iter().map(|&(_, p)| p).collect();
    let target: Vec<Vec3> = teeth
        .anchors
        .iter()
        .map(|&(v, _)| template.vertices[v as usize])
        .collect();
    let sim = procrustes_similarity(&source, &target)?;

    let head = template
        .joint_index("head")
        .ok_or_else(|| Error::invalid("rig lacks a 'head' joint for the upper teeth"))?;
    let jaw = template
        .joint_index("jaw")
        .ok_or_else(|| Error::invalid("rig lacks a 'jaw' joint for the lower teeth"))?;

    let base = template.n_verts() as u32;
    let nj = template.n_joints();
    for (i, p) in teeth.vertices.iter().enumerate() {
        template.vertices.push(sim.apply(p));
        let mut row = vec![0.0; nj];
        row[if i < teeth.upper_vertex_count { head } else { jaw }] = 1.0;
        template.skin_weights.extend(row);
        template.labels.push(SemanticLabel::Face);
    }
    for f in &teeth.faces {
        template
            .faces
            .push([f[0] + base, f[1] + base, f[2] + base]);
    }
    template.uv.extend_from_slice(&teeth.uv);
    for basis in [
        &mut template.shape_basis,
        &mut template.expr_basis,
        &mut template.pose_basis,
    ] {
        basis.nverts += teeth.vertices.len();
        basis
            .data
            .extend(std::iter::repeat(0.0).take(teeth.vertices.len() * basis.count * 3));
    }
    template.joint_regressor.ncols = template.n_verts();
    template.landmark_regressor.ncols = template.n_verts();
    template.validate()?;
    Ok(sim)
}
