//! Parametric head model: template, blendshapes, skinning, joint and
//! landmark regression.
//!
//! The rig is the tuple (T, F, W, joint regressor, blendshapes) plus a
//! landmark regressor, per-corner UVs, and per-vertex semantic labels.
//! Posing is linear blend skinning: canonical offsets are added to the
//! template, joints are regressed from the shaped vertices, per-joint world
//! transforms are composed along the parent chain, and each vertex is blended
//! across joint transforms. Because the control parameters stay fixed while
//! the template deforms, posing is affine in T and has an exact, cheap
//! backward pass (`pose_backward`).

use crate::error::{Error, Result};
use crate::math::{axis_angle_to_matrix, Mat3, Vec3};

/// Number of facial landmarks produced by the landmark regressor.
pub const NUM_LANDMARKS: usize = 68;

/// Per-vertex semantic class. The numeric order is the palette order used
/// by label images and the rig container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SemanticLabel {
    Face,
    Hair,
    Neck,
    EyeballLeft,
    EyeballRight,
    Boundary,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 6] = [
        SemanticLabel::Face,
        SemanticLabel::Hair,
        SemanticLabel::Neck,
        SemanticLabel::EyeballLeft,
        SemanticLabel::EyeballRight,
        SemanticLabel::Boundary,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<SemanticLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLabel::Face => "face",
            SemanticLabel::Hair => "hair",
            SemanticLabel::Neck => "neck",
            SemanticLabel::EyeballLeft => "eyeball_left",
            SemanticLabel::EyeballRight => "eyeball_right",
            SemanticLabel::Boundary => "boundary",
        }
    }

    pub fn from_name(name: &str) -> Option<SemanticLabel> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }

    pub fn is_eyeball(self) -> bool {
        matches!(self, SemanticLabel::EyeballLeft | SemanticLabel::EyeballRight)
    }
}

/// Sparse matrix stored as one list of (column, value) pairs per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRowMat {
    pub ncols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRowMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseRowMat {
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Result<Self> {
        let mut m = SparseRowMat::zeros(nrows, ncols);
        for (r, c, v) in triplets {
            if r as usize >= nrows || c as usize >= ncols {
                return Err(Error::invalid(format!(
                    "sparse triplet ({r}, {c}) outside {nrows}x{ncols}"
                )));
            }
            m.rows[r as usize].push((c, v));
        }
        for row in &mut m.rows {
            row.sort_by_key(|(c, _)| *c);
        }
        Ok(m)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |(c, v)| (r as u32, *c, *v)))
    }

    /// Each output row i is the weighted sum of input points.
    pub fn mul_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .map(|row| {
                let mut acc = Vec3::zeros();
                for &(c, v) in row {
                    acc += v * points[c as usize];
                }
                acc
            })
            .collect()
    }

    /// Accumulates the transpose product: out[col] += value * row_grads[row].
    pub fn add_transpose_mul(&self, row_grads: &[Vec3], out: &mut [Vec3]) {
        for (row, g) in self.rows.iter().zip(row_grads) {
            for &(c, v) in row {
                out[c as usize] += v * g;
            }
        }
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.rows[r].iter().map(|(_, v)| v).sum()
    }

    /// Scales every row so it sums to exactly 1. Rows summing to ~0 are an
    /// error (the regression would lose affine invariance).
    pub fn normalize_rows(&mut self) -> Result<()> {
        for (r, row) in self.rows.iter_mut().enumerate() {
            let s: f64 = row.iter().map(|(_, v)| v).sum();
            if s.abs() < 1e-9 {
                return Err(Error::numerical(format!(
                    "regressor row {r} sums to {s}, cannot renormalize"
                )));
            }
            for (_, v) in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(())
    }
}

/// A per-vertex displacement basis. `data` is laid out vertex-major:
/// `data[(v * count + k) * 3 + xyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blendshapes {
    pub nverts: usize,
    pub count: usize,
    pub data: Vec<f64>,
}

impl Blendshapes {
    pub fn zeros(nverts: usize, count: usize) -> Self {
        Blendshapes {
            nverts,
            count,
            data: vec![0.0; nverts * count * 3],
        }
    }

    pub fn basis(&self, v: usize, k: usize) -> Vec3 {
        let o = (v * self.count + k) * 3;
        Vec3::new(self.data[o], self.data[o + 1], self.data[o + 2])
    }

    pub fn set_basis(&mut self, v: usize, k: usize, d: Vec3) {
        let o = (v * self.count + k) * 3;
        self.data[o] = d.x;
        self.data[o + 1] = d.y;
        self.data[o + 2] = d.z;
    }

    /// Adds the coefficient-weighted basis sum to `out`.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [Vec3]) -> Result<()> {
        if coeffs.len() != self.count {
            return Err(Error::invalid(format!(
                "expected {} blendshape coefficients, got {}",
                self.count,
                coeffs.len()
            )));
        }
        if self.count == 0 {
            return Ok(());
        }
        for (v, acc) in out.iter_mut().enumerate().take(self.nverts) {
            let base = v * self.count * 3;
            for (k, c) in coeffs.iter().enumerate() {
                if *c != 0.0 {
                    let o = base + k * 3;
                    acc.x += c * self.data[o];
                    acc.y += c * self.data[o + 1];
                    acc.z += c * self.data[o + 2];
                }
            }
        }
        Ok(())
    }
}

/// Mirror correspondences between the 68 landmarks: index pairs that map to
/// each other under x-negation, plus indices lying on the symmetry plane.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkSymmetry {
    pub pairs: Vec<(u32, u32)>,
    pub self_symmetric: Vec<u32>,
}

/// Shape, pose, and expression controls. Rotations are axis-angle, one per
/// joint, with the root rotation doubling as the global rotation; the global
/// translation is applied after skinning.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    pub beta: Vec<f64>,
    pub joint_rotations: Vec<Vec3>,
    pub translation: Vec3,
    pub psi: Vec<f64>,
}

impl ControlParams {
    /// The rest configuration: zero shape, neutral expression, identity pose.
    pub fn rest(template: &RiggedTemplate) -> Self {
        ControlParams {
            beta: vec![0.0; template.shape_basis.count],
            joint_rotations: vec![Vec3::zeros(); template.n_joints()],
            translation: Vec3::zeros(),
            psi: vec![0.0; template.expr_basis.count],
        }
    }
}

/// Result of posing: world-space vertices with per-vertex unit normals.
/// Faces are shared with the source template.
#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub per_vertex_normals: Vec<Vec3>,
}

/// Per-joint world transforms for one set of control parameters. A point
/// skinned to joint j maps to `rotations[j] * p + offsets[j]`.
#[derive(Debug, Clone)]
pub struct JointTransforms {
    pub rest_joints: Vec<Vec3>,
    pub posed_joints: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub offsets: Vec<Vec3>,
}

/// Unrigged denture asset merged into a fitted head by a similarity
/// transform. Local coordinates are the template head's frame, so anchors
/// map identically onto the unfitted template.
#[derive(Debug, Clone, PartialEq)]
pub struct TeethTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-corner texture coordinates in the reserved teeth chart.
    pub uv: Vec<[[f64; 2]; 3]>,
    /// Vertices below this index belong to the upper arch (skinned to the
    /// head joint); the rest follow the jaw.
    pub upper_vertex_count: usize,
    /// (head vertex index, matching teeth-local point) correspondences
    /// driving the similarity alignment. Head indices lie in the stable
    /// face-region prefix.
    pub anchors: Vec<(u32, Vec3)>,
}

/// The full animatable model.
#[derive(Debug, Clone, PartialEq)]
pub struct RiggedTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Flat N x J row-major skinning weight matrix.
    pub skin_weights: Vec<f64>,
    pub joint_parents: Vec<Option<u32>>,
    pub joint_names: Vec<String>,
    /// |J| x N, rows sum to 1.
    pub joint_regressor: SparseRowMat,
    /// 68 x N, rows sum to 1.
    pub landmark_regressor: SparseRowMat,
    pub shape_basis: Blendshapes,
    pub expr_basis: Blendshapes,
    /// Pose correctives keyed on vectorized (R_j - I) of non-root joints;
    /// count is 0 or 9 * (|J| - 1).
    pub pose_basis: Blendshapes,
    /// Per-corner texture coordinates, one `[uv; 3]` entry per face.
    pub uv: Vec<[[f64; 2]; 3]>,
    pub labels: Vec<SemanticLabel>,
    pub landmark_symmetry: LandmarkSymmetry,
    /// Vertices below this index are the stable face-region prefix used for
    /// teeth correspondence; remeshing never reindexes them.
    pub face_region_vertex_count: usize,
}

impl RiggedTemplate {
    pub fn n_verts(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn skin_weight(&self, v: usize, j: usize) -> f64 {
        self.skin_weights[v * self.n_joints() + j]
    }

    pub fn vertices_with_label(&self, label: SemanticLabel) -> Vec<u32> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_verts();
        let nj = self.n_joints();
        if nj == 0 {
            return Err(Error::invalid("rig has no joints"));
        }
        if self.joint_names.len() != nj {
            return Err(Error::invalid("joint name count differs from joint count"));
        }
        let mut roots = 0;
        for (j, p) in self.joint_parents.iter().enumerate() {
            match p {
                None => roots += 1,
                Some(p) => {
                    if *p as usize >= j {
                        return Err(Error::invalid(format!(
                            "joint {j} has parent {p}; parents must precede children"
                        )));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(Error::invalid(format!("expected 1 root joint, found {roots}")));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("non-finite template vertex"));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} repeats a vertex index")));
            }
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::invalid(format!("face {fi} index out of range")));
            }
        }
        if self.skin_weights.len() != n * nj {
            return Err(Error::invalid("skin weight matrix shape mismatch"));
        }
        for v in 0..n {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::invalid(format!("negative or non-finite skin weight at vertex {v}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "skin weight row {v} sums to {s}, expected 1"
                )));
            }
        }
        for (what, m, rows) in [
            ("joint regressor", &self.joint_regressor, nj),
            ("landmark regressor", &self.landmark_regressor, NUM_LANDMARKS),
        ] {
            if m.nrows() != rows || m.ncols != n {
                return Err(Error::invalid(format!("{what} shape mismatch")));
            }
            for r in 0..m.nrows() {
                if m.rows[r].iter().any(|(c, _)| *c as usize >= n) {
                    return Err(Error::invalid(format!("{what} row {r} column out of range")));
                }
                let s = m.row_sum(r);
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "{what} row {r} sums to {s}, expected 1"
                    )));
                }
            }
        }
        for (what, b) in [
            ("shape basis", &self.shape_basis),
            ("expression basis", &self.expr_basis),
            ("pose basis", &self.pose_basis),
        ] {
            if b.nverts != n || b.data.len() != n * b.count * 3 {
                return Err(Error::invalid(format!("{what} shape mismatch")));
            }
        }
        if self.pose_basis.count != 0 && self.pose_basis.count != 9 * (nj - 1) {
            return Err(Error::invalid(format!(
                "pose basis count {} is neither 0 nor 9*(J-1)",
                self.pose_basis.count
            )));
        }
        if self.uv.len() != self.faces.len() {
            return Err(Error::invalid("per-corner UV count differs from face count"));
        }
        if self.labels.len() != n {
            return Err(Error::invalid("label count differs from vertex count"));
        }
        if self.vertices_with_label(SemanticLabel::EyeballLeft).is_empty()
            || self.vertices_with_label(SemanticLabel::EyeballRight).is_empty()
        {
            return Err(Error::invalid("eyeball label sets must be nonempty"));
        }
        for &(a, b) in &self.landmark_symmetry.pairs {
            if a as usize >= NUM_LANDMARKS || b as usize >= NUM_LANDMARKS {
                return Err(Error::invalid("landmark symmetry pair out of range"));
            }
        }
        if self
            .landmark_symmetry
            .self_symmetric
            .iter()
            .any(|&i| i as usize >= NUM_LANDMARKS)
        {
            return Err(Error::invalid("self-symmetric landmark index out of range"));
        }
        if self.face_region_vertex_count > n {
            return Err(Error::invalid("face region vertex count exceeds vertex count"));
        }
        Ok(())
    }

    fn check_params(&self, params: &ControlParams) -> Result<()> {
        if params.beta.len() != self.shape_basis.count {
            return Err(Error::invalid(format!(
                "beta has {} coefficients, shape basis has {}",
                params.beta.len(),
                self.shape_basis.count
            )));
        }
        if params.psi.len() != self.expr_basis.count {
            return Err(Error::invalid(format!(
                "psi has {} coefficients, expression basis has {}",
                params.psi.len(),
                self.expr_basis.count
            )));
        }
        if params.joint_rotations.len() != self.n_joints() {
            return Err(Error::invalid(format!(
                "{} joint rotations for {} joints",
                params.joint_rotations.len(),
                self.n_joints()
            )));
        }
        Ok(())
    }

    /// Pose-corrective coefficients: vectorized (R_j - I) over non-root
    /// joints, from the local rotations.
    fn pose_feature(&self, params: &ControlParams) -> Vec<f64> {
        let nj = self.n_joints();
        let mut feat = Vec::with_capacity(9 * (nj - 1));
        for j in 1..nj {
            let r = axis_angle_to_matrix(&params.joint_rotations[j]);
            for row in 0..3 {
                for col in 0..3 {
                    let id = if row == col { 1.0 } else { 0.0 };
                    feat.push(r[(row, col)] - id);
                }
            }
        }
        feat
    }

    /// Blendshape offsets in canonical space: B_s(beta) + B_e(psi) + B_p(theta).
    pub fn canonical_offsets(&self, params: &ControlParams) -> Result<Vec<Vec3>> {
        self.check_params(params)?;
        let mut out = vec![Vec3::zeros(); self.n_verts()];
        self.shape_basis.accumulate(&params.beta, &mut out)?;
        self.expr_basis.accumulate(&params.psi, &mut out)?;
        if self.pose_basis.count > 0 {
            let feat = self.pose_feature(params);
            self.pose_basis.accumulate(&feat, &mut out)?;
        }
        Ok(out)
    }

    /// Template plus shape offsets only: T + B_s(beta). Joints and landmarks
    /// are regressed from this configuration.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        if beta.len() != self.shape_basis.count {
            return Err(Error::invalid(format!(
                "beta has {} coefficients, shape basis has {}",
                beta.len(),
                self.shape_basis.count
            )));
        }
        let mut out = self.vertices.clone();
        self.shape_basis.accumulate(beta, &mut out)?;
        Ok(out)
    }

    /// Canonical joint positions regressed from the shaped template.
    pub fn joint_locations(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        Ok(self.joint_regressor.mul_points(&self.shaped_vertices(beta)?))
    }

    /// Canonical landmark positions regressed from the shaped template.
    pub fn regress_landmarks(&self, beta: &[f64]) -> Result<Vec<Vec3>> {
        Ok(self
            .landmark_regressor
            .mul_points(&self.shaped_vertices(beta)?))
    }

    /// Composes per-joint world transforms along the parent chain.
    pub fn skinning_transforms(&self, params: &ControlParams) -> Result<JointTransforms> {
        self.check_params(params)?;
        let rest = self.joint_locations(&params.beta)?;
        let nj = self.n_joints();
        let mut rotations = vec![Mat3::identity(); nj];
        let mut posed = vec![Vec3::zeros(); nj];
        for j in 0..nj {
            let local = axis_angle_to_matrix(&params.joint_rotations[j]);
            match self.joint_parents[j] {
                None => {
                    rotations[j] = local;
                    posed[j] = rest[j];
                }
                Some(p) => {
                    let p = p as usize;
                    rotations[j] = rotations[p] * local;
                    posed[j] = posed[p] + rotations[p] * (rest[j] - rest[p]);
                }
            }
            if !posed[j].iter().all(|c| c.is_finite())
                || !rotations[j].iter().all(|c| c.is_finite())
            {
                return Err(Error::numerical(format!(
                    "non-finite transform at joint {j}"
                )));
            }
        }
        let offsets = (0..nj)
            .map(|j| posed[j] - rotations[j] * rest[j])
            .collect();
        Ok(JointTransforms {
            rest_joints: rest,
            posed_joints: posed,
            rotations,
            offsets,
        })
    }

    /// Full linear blend skinning: offsets, joints, parent-chain transforms,
    /// per-vertex blending, global translation last.
    pub fn pose_model(&self, params: &ControlParams) -> Result<PosedMesh> {
        let offsets = self.canonical_offsets(params)?;
        let canonical: Vec<Vec3> = self
            .vertices
            .iter()
            .zip(&offsets)
            .map(|(v, o)| v + o)
            .collect();
        let tf = self.skinning_transforms(params)?;
        let posed = pose_points(
            &canonical,
            &self.skin_weights,
            &tf,
            &params.translation,
        );
        let normals = vertex_normals(&posed, &self.faces);
        Ok(PosedMesh {
            vertices: posed,
            faces: self.faces.clone(),
            per_vertex_normals: normals,
        })
    }

    /// Landmarks posed by the same skinning as the mesh, using regressor-
    /// interpolated skin weights.
    pub fn posed_landmarks(&self, params: &ControlParams, tf: &JointTransforms) -> Result<Vec<Vec3>> {
        let mut cano = self.regress_landmarks(&params.beta)?;
        // Expression and pose offsets move landmark source vertices too.
        let mut offsets = vec![Vec3::zeros(); self.n_verts()];
        self.expr_basis.accumulate(&params.psi, &mut offsets)?;
        if self.pose_basis.count > 0 {
            let feat = self.pose_feature(params);
            self.pose_basis.accumulate(&feat, &mut offsets)?;
        }
        let extra = self.landmark_regressor.mul_points(&offsets);
        for (c, e) in cano.iter_mut().zip(&extra) {
            *c += e;
        }
        let w = self.landmark_skin_weights();
        Ok(pose_points(&cano, &w, tf, &params.translation))
    }

    /// Landmark skin weights: the landmark regressor applied to W row-wise.
    pub fn landmark_skin_weights(&self) -> Vec<f64> {
        let nj = self.n_joints();
        let mut out = vec![0.0; NUM_LANDMARKS * nj];
        for (l, row) in self.landmark_regressor.rows.iter().enumerate() {
            for &(v, coef) in row {
                let src = &self.skin_weights[v as usize * nj..(v as usize + 1) * nj];
                for j in 0..nj {
                    out[l * nj + j] += coef * src[j];
                }
            }
        }
        out
    }

    /// Backpropagates gradients on posed vertices (and optionally posed
    /// landmarks) to gradients on the template vertices T, including the
    /// joint-regressor path. Valid because posing is affine in T once the
    /// control parameters are fixed.
    pub fn pose_backward(
        &self,
        tf: &JointTransforms,
        grad_posed_vertices: &[Vec3],
        grad_posed_landmarks: Option<&[Vec3]>,
    ) -> Vec<Vec3> {
        let (mut grad_t, mut grad_joints) = pose_points_backward(
            grad_posed_vertices,
            &self.skin_weights,
            tf,
            &self.joint_parents,
        );
        if let Some(gl) = grad_posed_landmarks {
            let wl = self.landmark_skin_weights();
            let (grad_cano, gj) = pose_points_backward(gl, &wl, tf, &self.joint_parents);
            self.landmark_regressor
                .add_transpose_mul(&grad_cano, &mut grad_t);
            for (a, b) in grad_joints.iter_mut().zip(&gj) {
                *a += b;
            }
        }
        self.joint_regressor
            .add_transpose_mul(&grad_joints, &mut grad_t);
        grad_t
    }
}

/// Skins a point set: out[i] = sum_j w[i,j] (R_j p_i + b_j) + translation.
pub fn pose_points(
    points: &[Vec3],
    weights: &[f64],
    tf: &JointTransforms,
    translation: &Vec3,
) -> Vec<Vec3> {
    let nj = tf.rotations.len();
    assert_eq!(weights.len(), points.len() * nj);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut out = Vec3::zeros();
            for j in 0..nj {
                let w = weights[i * nj + j];
                if w != 0.0 {
                    out += w * (tf.rotations[j] * p + tf.offsets[j]);
                }
            }
            out + translation
        })
        .collect()
}

/// Backward of `pose_points` with the control parameters held fixed.
///
/// Returns gradients on the input points and on the rest joint locations.
/// The joint path accumulates per-joint gradient sums, pushes them up the
/// tree as suffix sums, and applies (R_parent - R_joint)^T per joint; at the
/// identity pose every joint gradient is exactly zero.
pub fn pose_points_backward(
    grad_posed: &[Vec3],
    weights: &[f64],
    tf: &JointTransforms,
    parents: &[Option<u32>],
) -> (Vec<Vec3>, Vec<Vec3>) {
    let nj = tf.rotations.len();
    assert_eq!(weights.len(), grad_posed.len() * nj);
    let mut grad_points = vec![Vec3::zeros(); grad_posed.len()];
    let mut joint_sums = vec![Vec3::zeros(); nj];
    for (i, g) in grad_posed.iter().enumerate() {
        let mut gp = Vec3::zeros();
        for j in 0..nj {
            let w = weights[i * nj + j];
            if w != 0.0 {
                gp += w * (tf.rotations[j].transpose() * g);
                joint_sums[j] += w * g;
            }
        }
        grad_points[i] = gp;
    }
    // Suffix sums over the tree: children fold into parents in reverse
    // topological order (parents always precede children).
    let mut suffix = joint_sums;
    for j in (0..nj).rev() {
        if let Some(p) = parents[j] {
            let s = suffix[j];
            suffix[p as usize] += s;
        }
    }
    let grad_joints = (0..nj)
        .map(|j| {
            let parent_rot = match parents[j] {
                None => Mat3::identity(),
                Some(p) => tf.rotations[p as usize],
            };
            (parent_rot - tf.rotations[j]).transpose() * suffix[j]
        })
        .collect();
    (grad_points, grad_joints)
}

/// Area-weighted vertex normals, normalized to unit length. Vertices on no
/// face (or with a vanishing normal sum) get a zero normal.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Vec3> {
    let mut sums = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        let n = crate::math::face_normal_scaled(&vertices[a], &vertices[b], &vertices[c]);
        sums[a] += n;
        sums[b] += n;
        sums[c] += n;
    }
    for n in &mut sums {
        let len = n.norm();
        if len > 1e-30 {
            *n /= len;
        } else {
            *n = Vec3::zeros();
        }
    }
    sums
}

/// Backward of `vertex_normals`: gradients on the unit normals map to
/// gradients on the vertex positions through the normalization and the
/// cross-product area sums.
pub fn vertex_normals_backward(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    grad_unit_normals: &[Vec3],
) -> Vec<Vec3> {
    let mut sums = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        let n = crate::math::face_normal_scaled(&vertices[a], &vertices[b], &vertices[c]);
        sums[a] += n;
        sums[b] += n;
        sums[c] += n;
    }
    // d(unit)/d(sum) = (I - n n^T) / |sum|
    let grad_sums: Vec<Vec3> = sums
        .iter()
        .zip(grad_unit_normals)
        .map(|(m, g)| {
            let len = m.norm();
            if len <= 1e-30 {
                return Vec3::zeros();
            }
            let n = m / len;
            (g - n * n.dot(g)) / len
        })
        .collect();
    let mut grad_v = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        let g = grad_sums[a] + grad_sums[b] + grad_sums[c];
        let u = vertices[b] - vertices[a];
        let v = vertices[c] - vertices[a];
        // m = u x v: dL/du = v x g, dL/dv = g x u.
        let gu = v.cross(&g);
        let gv = g.cross(&u);
        grad_v[b] += gu;
        grad_v[c] += gv;
        grad_v[a] -= gu + gv;
    }
    grad_v
}
