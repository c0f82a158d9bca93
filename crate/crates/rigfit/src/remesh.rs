//! Topology correction between deformation epochs: long edges are split,
//! inconsistent windings repaired, degenerate or folded triangles removed,
//! and the rig follows along. New vertices receive interpolated skin
//! weights, blendshape rows, corner UVs and labels; the joint and landmark
//! regressors are refit afterwards so the canonical joints land where the
//! pre-remesh template put them.
//!
//! The face-region vertex prefix is never removed or reindexed; everything
//! a pass adds is appended after the surviving vertices.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rig::{Blendshapes, RiggedTemplate, SparseRowMat};

/// Thresholds governing one remesh invocation.
#[derive(Debug, Clone)]
pub struct RemeshConfig {
    /// Edges longer than this are split at their midpoint.
    pub max_edge_eps: f64,
    /// Edges shorter than this mark their triangle degenerate.
    pub min_edge: f64,
    /// Fixpoint iteration cap for the subdivision and flip sweeps.
    pub max_passes: usize,
    /// Faces count as self-folded past this dihedral angle to every
    /// neighbor.
    pub fold_angle_deg: f64,
    /// Run the winding-repair stage.
    pub flip: bool,
    /// Run the bad-triangle removal stage.
    pub remove: bool,
}

impl Default for RemeshConfig {
    fn default() -> Self {
        RemeshConfig {
            max_edge_eps: 5e-4,
            min_edge: 5e-5,
            max_passes: 10,
            fold_angle_deg: 170.0,
            flip: true,
            remove: true,
        }
    }
}

impl RemeshConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_edge > 0.0 && self.min_edge < self.max_edge_eps) {
            return Err(Error::invalid(format!(
                "remesh thresholds need 0 < min_edge < max_edge_eps, got {} and {}",
                self.min_edge, self.max_edge_eps
            )));
        }
        if self.max_passes == 0 {
            return Err(Error::invalid("remesh max_passes must be at least 1"));
        }
        if !(90.0 < self.fold_angle_deg && self.fold_angle_deg <= 180.0) {
            return Err(Error::invalid(format!(
                "fold angle {} must lie in (90, 180] degrees",
                self.fold_angle_deg
            )));
        }
        Ok(())
    }
}

/// Provenance of one added vertex: it sits at parameter `t` along the edge
/// from `a` to `b` and inherits interpolated attributes from them.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VertexParent {
    pub child: u32,
    pub a: u32,
    pub b: u32,
    pub t: f64,
}

/// What one remesh invocation did. Vertex indices in `parents` refer to the
/// template as returned, after any removal remap.
#[derive(Debug, Clone, Serialize)]
pub struct RemeshLog {
    pub edges_split: usize,
    pub faces_flipped: usize,
    /// Oscillating faces frozen in place instead of re-flipped.
    pub faces_frozen: usize,
    pub faces_removed: usize,
    pub vertices_added: usize,
    pub vertices_removed: usize,
    /// Removals skipped because they would disconnect the face region.
    pub removals_skipped: usize,
    /// Children whose parents had disjoint skin-weight supports.
    pub disjoint_weight_parents: usize,
    /// Winding conflicts seen during parity propagation; nonzero means the
    /// mesh has a locally non-orientable neighborhood.
    pub parity_conflicts: usize,
    pub subdivision_converged: bool,
    pub flips_converged: bool,
    pub parents: Vec<VertexParent>,
    /// Old to new vertex index map when removal dropped orphans;
    /// `u32::MAX` marks a dropped vertex.
    #[serde(skip_serializing)]
    pub index_remap: Option<Vec<u32>>,
}

impl Default for RemeshLog {
    fn default() -> Self {
        RemeshLog {
            edges_split: 0,
            faces_flipped: 0,
            faces_frozen: 0,
            faces_removed: 0,
            vertices_added: 0,
            vertices_removed: 0,
            removals_skipped: 0,
            disjoint_weight_parents: 0,
            parity_conflicts: 0,
            subdivision_converged: true,
            flips_converged: true,
            parents: Vec::new(),
            index_remap: None,
        }
    }
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Unnormalized face normal, twice the signed area times the unit normal.
fn face_area_normal(vertices: &[Vec3], f: &[u32; 3]) -> Vec3 {
    let p0 = vertices[f[0] as usize];
    (vertices[f[1] as usize] - p0).cross(&(vertices[f[2] as usize] - p0))
}

fn mid_uv(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Splits every edge longer than the threshold at its midpoint, rewriting
/// incident triangles 1-to-2, 1-to-3 or 1-to-4, and repeats to fixpoint or
/// the pass cap. Corner UVs interpolate inside each incident face's own
/// chart; per-vertex attributes come from `interpolate_rig`. Hitting the
/// pass cap with long edges left is recorded, not an error.
pub fn subdivide_long_edges(
    template: &mut RiggedTemplate,
    config: &RemeshConfig,
) -> Result<RemeshLog> {
    config.validate()?;
    let mut log = RemeshLog::default();
    for pass in 0..=config.max_passes {
        // One shared midpoint per long edge keeps the mesh crack-free.
        let mut split: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for f in &template.faces {
            for e in 0..3 {
                let key = edge_key(f[e], f[(e + 1) % 3]);
                if split.contains_key(&key) {
                    continue;
                }
                let len = (template.vertices[key.0 as usize]
                    - template.vertices[key.1 as usize])
                    .norm();
                if len > config.max_edge_eps {
                    split.insert(key, 0);
                }
            }
        }
        if split.is_empty() {
            return Ok(log);
        }
        if pass == config.max_passes {
            log.subdivision_converged = false;
            return Ok(log);
        }
        let mut parents = Vec::with_capacity(split.len());
        for (&(a, b), slot) in split.iter_mut() {
            let child = template.vertices.len() as u32;
            template
                .vertices
                .push(0.5 * (template.vertices[a as usize] + template.vertices[b as usize]));
            *slot = child;
            parents.push(VertexParent {
                child,
                a,
                b,
                t: 0.5,
            });
        }
        log.edges_split += split.len();
        log.vertices_added += parents.len();
        let old_faces = std::mem::take(&mut template.faces);
        let old_uv = std::mem::take(&mut template.uv);
        let mut faces = Vec::with_capacity(old_faces.len() * 2);
        let mut uv = Vec::with_capacity(old_uv.len() * 2);
        for (f, fuv) in old_faces.into_iter().zip(old_uv) {
            let mids = [
                split.get(&edge_key(f[0], f[1])).copied(),
                split.get(&edge_key(f[1], f[2])).copied(),
                split.get(&edge_key(f[2], f[0])).copied(),
            ];
            match mids.iter().flatten().count() {
                0 => {
                    faces.push(f);
                    uv.push(fuv);
                }
                3 => {
                    let (m01, m12, m20) = (mids[0].unwrap(), mids[1].unwrap(), mids[2].unwrap());
                    let (u01, u12, u20) = (
                        mid_uv(fuv[0], fuv[1]),
                        mid_uv(fuv[1], fuv[2]),
                        mid_uv(fuv[2], fuv[0]),
                    );
                    faces.push([f[0], m01, m20]);
                    uv.push([fuv[0], u01, u20]);
                    faces.push([m01, f[1], m12]);
                    uv.push([u01, fuv[1], u12]);
                    faces.push([m20, m12, f[2]]);
                    uv.push([u20, u12, fuv[2]]);
                    faces.push([m01, m12, m20]);
                    uv.push([u01, u12, u20]);
                }
                count => {
                    // Rotate so edge (0,1) is split and, with two splits,
                    // edge (2,0) is the unsplit one.
                    let r = (0..3)
                        .find(|&r| {
                            mids[r].is_some() && (count == 1 || mids[(r + 1) % 3].is_some())
                        })
                        .unwrap();
                    let g = [f[r], f[(r + 1) % 3], f[(r + 2) % 3]];
                    let gu = [fuv[r], fuv[(r + 1) % 3], fuv[(r + 2) % 3]];
                    let m01 = mids[r].unwrap();
                    let u01 = mid_uv(gu[0], gu[1]);
                    if count == 1 {
                        faces.push([g[0], m01, g[2]]);
                        uv.push([gu[0], u01, gu[2]]);
                        faces.push([m01, g[1], g[2]]);
                        uv.push([u01, gu[1], gu[2]]);
                    } else {
                        let m12 = mids[(r + 1) % 3].unwrap();
                        let u12 = mid_uv(gu[1], gu[2]);
                        faces.push([m01, g[1], m12]);
                        uv.push([u01, gu[1], u12]);
                        faces.push([g[0], m01, m12]);
                        uv.push([gu[0], u01, u12]);
                        faces.push([g[0], m12, g[2]]);
                        uv.push([gu[0], u12, gu[2]]);
                    }
                }
            }
        }
        template.faces = faces;
        template.uv = uv;
        log.disjoint_weight_parents += interpolate_rig(template, &parents)?;
        log.parents.extend(parents);
    }
    Ok(log)
}

/// Extends the per-vertex rig attributes to vertices created by subdivision:
/// skin-weight rows are lerped and renormalized to sum 1, blendshape rows
/// lerped linearly along the edge, and each child takes the label of its
/// nearer parent (ties go to `a`). Corner UVs are owned by the face split
/// itself, which interpolates inside each incident chart so seams never
/// average across charts. Parent entries must cover exactly the vertices
/// lacking attributes, in index order. Returns how many children had
/// parents with disjoint skin-weight supports (averaged anyway, flagged).
pub fn interpolate_rig(template: &mut RiggedTemplate, parents: &[VertexParent]) -> Result<usize> {
    let nj = template.n_joints();
    let n_attr = template.labels.len();
    if template.skin_weights.len() != n_attr * nj {
        return Err(Error::invalid("attribute arrays disagree before interpolation"));
    }
    if n_attr + parents.len() != template.vertices.len() {
        return Err(Error::invalid(format!(
            "parent map covers {} vertices, {} lack attributes",
            parents.len(),
            template.vertices.len() - n_attr
        )));
    }
    for (i, p) in parents.iter().enumerate() {
        let expect = (n_attr + i) as u32;
        if p.child != expect {
            return Err(Error::invalid(format!(
                "parent map child {} out of order, expected {expect}",
                p.child
            )));
        }
        if p.a >= p.child || p.b >= p.child || !(0.0..=1.0).contains(&p.t) {
            return Err(Error::invalid(format!("invalid parent entry for child {}", p.child)));
        }
    }
    let mut disjoint = 0;
    for p in parents {
        let (a, b, t) = (p.a as usize, p.b as usize, p.t);
        let row_a = template.skin_weights[a * nj..(a + 1) * nj].to_vec();
        let row_b = template.skin_weights[b * nj..(b + 1) * nj].to_vec();
        if !row_a
            .iter()
            .zip(&row_b)
            .any(|(wa, wb)| *wa > 0.0 && *wb > 0.0)
        {
            disjoint += 1;
        }
        let mut row: Vec<f64> = row_a
            .iter()
            .zip(&row_b)
            .map(|(wa, wb)| (1.0 - t) * wa + t * wb)
            .collect();
        let s: f64 = row.iter().sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::numerical(format!(
                "child {} skin weights sum to {s}",
                p.child
            )));
        }
        for w in &mut row {
            *w /= s;
        }
        template.skin_weights.extend(row);
        extend_blendshapes(&mut template.shape_basis, a, b, t);
        extend_blendshapes(&mut template.expr_basis, a, b, t);
        extend_blendshapes(&mut template.pose_basis, a, b, t);
        let label = if t <= 0.5 {
            template.labels[a]
        } else {
            template.labels[b]
        };
        template.labels.push(label);
    }
    template.joint_regressor.ncols = template.vertices.len();
    template.landmark_regressor.ncols = template.vertices.len();
    Ok(disjoint)
}

fn extend_blendshapes(basis: &mut Blendshapes, a: usize, b: usize, t: f64) {
    for k in 0..basis.count {
        let d = (1.0 - t) * basis.basis(a, k) + t * basis.basis(b, k);
        basis.data.extend_from_slice(&[d.x, d.y, d.z]);
    }
    basis.nverts += 1;
}

/// Reverses the winding of every face whose area-weighted normal opposes
/// the summed area-weighted normals of its edge-adjacent neighbors. Sweeps
/// visit faces in index order with normals updated as flips land, which
/// makes every flip raise the total neighbor agreement, and repeat to
/// fixpoint or the pass cap. A face flipped twice is back where it started
/// and oscillating; it gets frozen there and logged.
///
/// The normal vote has stable inverted islands (a reversed ring around a
/// vertex outvotes its rim), so leftover winding conflicts are resolved
/// afterwards by parity propagation over the dual graph, flipping the
/// minority class of each component. Odd parity cycles mean the surface is
/// locally non-orientable; those edges are counted and left alone.
pub fn flip_inconsistent_triangles(
    template: &mut RiggedTemplate,
    config: &RemeshConfig,
) -> Result<RemeshLog> {
    config.validate()?;
    let mut log = RemeshLog::default();
    let nf = template.faces.len();
    let mut adj: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (fi, f) in template.faces.iter().enumerate() {
        for e in 0..3 {
            adj.entry(edge_key(f[e], f[(e + 1) % 3]))
                .or_default()
                .push(fi as u32);
        }
    }
    let neighbors: Vec<Vec<u32>> = template
        .faces
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let mut out = Vec::new();
            for e in 0..3 {
                for &g in &adj[&edge_key(f[e], f[(e + 1) % 3])] {
                    if g as usize != fi {
                        out.push(g);
                    }
                }
            }
            out
        })
        .collect();
    let mut normals: Vec<Vec3> = template
        .faces
        .iter()
        .map(|f| face_area_normal(&template.vertices, f))
        .collect();
    let mut flip_count = vec![0u8; nf];
    let mut frozen = vec![false; nf];
    log.flips_converged = false;
    for _ in 0..config.max_passes {
        let mut swept = 0usize;
        for fi in 0..nf {
            if frozen[fi] || neighbors[fi].is_empty() {
                continue;
            }
            let vote: Vec3 = neighbors[fi]
                .iter()
                .map(|&g| normals[g as usize])
                .sum();
            if normals[fi].dot(&vote) >= 0.0 {
                continue;
            }
            template.faces[fi].swap(1, 2);
            template.uv[fi].swap(1, 2);
            normals[fi] = -normals[fi];
            flip_count[fi] += 1;
            log.faces_flipped += 1;
            swept += 1;
            if flip_count[fi] >= 2 {
                frozen[fi] = true;
                log.faces_frozen += 1;
            }
        }
        if swept == 0 {
            log.flips_converged = true;
            break;
        }
    }
    let mut dir_adj: BTreeMap<(u32, u32), Vec<(u32, bool)>> = BTreeMap::new();
    for (fi, f) in template.faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            dir_adj
                .entry(edge_key(a, b))
                .or_default()
                .push((fi as u32, a < b));
        }
    }
    // Dual graph over manifold edges; `true` marks a same-direction pair,
    // which consistent winding forbids.
    let mut dual: Vec<Vec<(u32, bool)>> = vec![Vec::new(); nf];
    for incident in dir_adj.values() {
        if let [(f, df), (g, dg)] = incident[..] {
            dual[f as usize].push((g, df == dg));
            dual[g as usize].push((f, df == dg));
        }
    }
    let mut parity = vec![u8::MAX; nf];
    for root in 0..nf {
        if parity[root] != u8::MAX {
            continue;
        }
        parity[root] = 0;
        let mut component = vec![root];
        let mut queue = vec![root];
        while let Some(fi) = queue.pop() {
            for &(g, same) in &dual[fi] {
                let want = parity[fi] ^ same as u8;
                let g = g as usize;
                if parity[g] == u8::MAX {
                    parity[g] = want;
                    component.push(g);
                    queue.push(g);
                } else if parity[g] != want {
                    log.parity_conflicts += 1;
                }
            }
        }
        let ones = component.iter().filter(|&&f| parity[f] == 1).count();
        if ones == 0 {
            continue;
        }
        // Flip the minority class so the majority orientation stands.
        let flip_class = if ones * 2 <= component.len() { 1 } else { 0 };
        for &fi in &component {
            if parity[fi] == flip_class && !frozen[fi] {
                template.faces[fi].swap(1, 2);
                template.uv[fi].swap(1, 2);
                log.faces_flipped += 1;
            }
        }
    }
    Ok(log)
}

/// Removes degenerate triangles (an edge under `min_edge` or area under
/// `min_edge^2 / 2`), non-manifold fins (faces on an edge with more than two
/// incident faces beyond the best-aligned pair), and self-folded faces
/// (normals opposing every edge neighbor by more than 170 degrees). A
/// removal that would disconnect the face-region vertices is skipped and
/// logged. Orphaned vertices outside the stable prefix are dropped and the
/// index remap returned in the log; regressor rows losing support columns
/// are renormalized (the pass-level refit restores the joints).
pub fn remove_incorrect_triangles(
    template: &mut RiggedTemplate,
    config: &RemeshConfig,
) -> Result<RemeshLog> {
    config.validate()?;
    let mut log = RemeshLog::default();
    let mut keep = vec![true; template.faces.len()];

    // Degenerates first so fin and fold votes see meaningful normals.
    let mut cand = Vec::new();
    for (fi, f) in template.faces.iter().enumerate() {
        let p = [
            template.vertices[f[0] as usize],
            template.vertices[f[1] as usize],
            template.vertices[f[2] as usize],
        ];
        let short = (0..3).any(|e| (p[(e + 1) % 3] - p[e]).norm() < config.min_edge);
        let area = 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        if short || area < 0.5 * config.min_edge * config.min_edge {
            cand.push(fi);
        }
    }
    guarded_remove(template, &mut keep, cand, &mut log);

    // Fins: on an over-subscribed edge keep the two faces that continue the
    // surface best (opposite edge traversal preferred, then normal
    // agreement) and drop the rest.
    let normals: Vec<Vec3> = template
        .faces
        .iter()
        .map(|f| {
            let n = face_area_normal(&template.vertices, f);
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let mut adj: BTreeMap<(u32, u32), Vec<(u32, bool)>> = BTreeMap::new();
    for (fi, f) in template.faces.iter().enumerate() {
        if !keep[fi] {
            continue;
        }
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            adj.entry(edge_key(a, b))
                .or_default()
                .push((fi as u32, a < b));
        }
    }
    let mut fins = BTreeSet::new();
    for incident in adj.values() {
        if incident.len() <= 2 {
            continue;
        }
        let mut best = (false, f64::NEG_INFINITY, 0usize, 1usize);
        for i in 0..incident.len() {
            for j in i + 1..incident.len() {
                let opposite = incident[i].1 != incident[j].1;
                let d = normals[incident[i].0 as usize].dot(&normals[incident[j].0 as usize]);
                if (opposite, d) > (best.0, best.1) {
                    best = (opposite, d, i, j);
                }
            }
        }
        for (idx, &(fi, _)) in incident.iter().enumerate() {
            if idx != best.2 && idx != best.3 {
                fins.insert(fi as usize);
            }
        }
    }
    guarded_remove(template, &mut keep, fins.into_iter().collect(), &mut log);

    // Self-folded: normal opposes every surviving edge neighbor.
    let fold_threshold = config.fold_angle_deg.to_radians().cos();
    let mut adj: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (fi, f) in template.faces.iter().enumerate() {
        if !keep[fi] {
            continue;
        }
        for e in 0..3 {
            adj.entry(edge_key(f[e], f[(e + 1) % 3]))
                .or_default()
                .push(fi as u32);
        }
    }
    let mut cand = Vec::new();
    for (fi, f) in template.faces.iter().enumerate() {
        if !keep[fi] {
            continue;
        }
        let mut any = false;
        let mut folded = true;
        for e in 0..3 {
            for &g in &adj[&edge_key(f[e], f[(e + 1) % 3])] {
                if g as usize == fi {
                    continue;
                }
                any = true;
                if normals[fi].dot(&normals[g as usize]) >= fold_threshold {
                    folded = false;
                }
            }
        }
        if any && folded {
            cand.push(fi);
        }
    }
    guarded_remove(template, &mut keep, cand, &mut log);

    if log.faces_removed == 0 {
        return Ok(log);
    }
    let mut faces = Vec::with_capacity(template.faces.len() - log.faces_removed);
    let mut uv = Vec::with_capacity(faces.capacity());
    for (fi, (f, fuv)) in template.faces.iter().zip(&template.uv).enumerate() {
        if keep[fi] {
            faces.push(*f);
            uv.push(*fuv);
        }
    }
    template.faces = faces;
    template.uv = uv;
    drop_orphans(template, &mut log)?;
    Ok(log)
}

/// Removes the candidate faces unless doing so disconnects the face-region
/// vertices from each other (or strands one without any face at all).
fn guarded_remove(
    template: &RiggedTemplate,
    keep: &mut [bool],
    cand: Vec<usize>,
    log: &mut RemeshLog,
) {
    if cand.is_empty() {
        return;
    }
    if template.face_region_vertex_count == 0 {
        for fi in cand {
            if keep[fi] {
                keep[fi] = false;
                log.faces_removed += 1;
            }
        }
        return;
    }
    let mut trial = keep.to_vec();
    let mut count = 0;
    for &fi in &cand {
        if trial[fi] {
            trial[fi] = false;
            count += 1;
        }
    }
    if count == 0 {
        return;
    }
    if face_region_connected(template, &trial) {
        keep.copy_from_slice(&trial);
        log.faces_removed += count;
        return;
    }
    for fi in cand {
        if !keep[fi] {
            continue;
        }
        keep[fi] = false;
        if face_region_connected(template, keep) {
            log.faces_removed += 1;
        } else {
            keep[fi] = true;
            log.removals_skipped += 1;
        }
    }
}

/// True when every face-region vertex reaches every other through kept
/// faces. A prefix vertex with no kept face counts as disconnected.
fn face_region_connected(template: &RiggedTemplate, keep: &[bool]) -> bool {
    let prefix = template.face_region_vertex_count;
    if prefix <= 1 {
        return true;
    }
    let n = template.n_verts();
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (fi, f) in template.faces.iter().enumerate() {
        if !keep[fi] {
            continue;
        }
        for e in 0..3 {
            adjacency[f[e] as usize].push(f[(e + 1) % 3]);
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0u32];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adjacency[v as usize] {
            if !seen[w as usize] {
                seen[w as usize] = true;
                stack.push(w);
            }
        }
    }
    (0..prefix).all(|v| seen[v])
}

/// Drops vertices no face references (never inside the face-region prefix)
/// and remaps faces, attributes, and regressor columns. Rows that lose
/// columns are renormalized so the template stays valid on its own.
fn drop_orphans(template: &mut RiggedTemplate, log: &mut RemeshLog) -> Result<()> {
    let n = template.n_verts();
    let mut used = vec![false; n];
    for v in 0..template.face_region_vertex_count {
        used[v] = true;
    }
    for f in &template.faces {
        for &v in f {
            used[v as usize] = true;
        }
    }
    if used.iter().all(|u| *u) {
        return Ok(());
    }
    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    for v in 0..n {
        if used[v] {
            remap[v] = next;
            next += 1;
        }
    }
    log.vertices_removed += n - next as usize;
    let nj = template.n_joints();
    let mut vertices = Vec::with_capacity(next as usize);
    let mut labels = Vec::with_capacity(next as usize);
    let mut weights = Vec::with_capacity(next as usize * nj);
    for v in 0..n {
        if used[v] {
            vertices.push(template.vertices[v]);
            labels.push(template.labels[v]);
            weights.extend_from_slice(&template.skin_weights[v * nj..(v + 1) * nj]);
        }
    }
    template.vertices = vertices;
    template.labels = labels;
    template.skin_weights = weights;
    for basis in [
        &mut template.shape_basis,
        &mut template.expr_basis,
        &mut template.pose_basis,
    ] {
        let stride = basis.count * 3;
        if stride > 0 {
            let mut data = Vec::with_capacity(next as usize * stride);
            for v in 0..n {
                if used[v] {
                    data.extend_from_slice(&basis.data[v * stride..(v + 1) * stride]);
                }
            }
            basis.data = data;
        }
        basis.nverts = next as usize;
    }
    for f in &mut template.faces {
        for v in f.iter_mut() {
            *v = remap[*v as usize];
        }
    }
    // Rows that lose columns get renormalized; a row losing its whole
    // support is left empty for the pass-level refit to rebuild.
    for reg in [
        &mut template.joint_regressor,
        &mut template.landmark_regressor,
    ] {
        reg.ncols = next as usize;
        for row in &mut reg.rows {
            row.retain(|(c, _)| remap[*c as usize] != u32::MAX);
            for (c, _) in row.iter_mut() {
                *c = remap[*c as usize];
            }
            let s: f64 = row.iter().map(|(_, v)| v).sum();
            if s.abs() >= 1e-9 {
                for (_, v) in row.iter_mut() {
                    *v /= s;
                }
            } else {
                row.clear();
            }
        }
    }
    log.index_remap = Some(remap);
    Ok(())
}

const REFIT_RIDGE: f64 = 1e-8;
const REFIT_SUPPORT_CAP: usize = 32;
const REFIT_RESIDUAL: f64 = 1e-6;

/// Refits the joint regressor so it reproduces `target_joints` from the
/// current template shaped with `beta`. Each row solves a ridge-regularized
/// least squares over weights constrained to sum 1, with support restricted
/// to the row's surviving support capped at the 32 vertices nearest its
/// target; a row missing the residual bound widens its support once before
/// failing.
pub fn refit_joint_regressor(
    template: &mut RiggedTemplate,
    beta: &[f64],
    target_joints: &[Vec3],
) -> Result<()> {
    let shaped = template.shaped_vertices(beta)?;
    refit_rows(
        &mut template.joint_regressor,
        &shaped,
        target_joints,
        "joint",
    )
}

/// Landmark twin of `refit_joint_regressor`, same mechanism and bounds.
pub fn refit_landmark_regressor(
    template: &mut RiggedTemplate,
    beta: &[f64],
    target_landmarks: &[Vec3],
) -> Result<()> {
    let shaped = template.shaped_vertices(beta)?;
    refit_rows(
        &mut template.landmark_regressor,
        &shaped,
        target_landmarks,
        "landmark",
    )
}

fn refit_rows(
    regressor: &mut SparseRowMat,
    shaped: &[Vec3],
    targets: &[Vec3],
    what: &str,
) -> Result<()> {
    if regressor.nrows() != targets.len() {
        return Err(Error::invalid(format!(
            "{} refit got {} targets for {} rows",
            what,
            targets.len(),
            regressor.nrows()
        )));
    }
    regressor.ncols = shaped.len();
    for r in 0..regressor.nrows() {
        let target = targets[r];
        let mut support: Vec<u32> = regressor.rows[r].iter().map(|(c, _)| *c).collect();
        if support.is_empty() {
            // The whole support was removed; start over from proximity.
            widen_support(&mut support, shaped, &target);
        }
        support.sort_by(|&a, &b| {
            let da = (shaped[a as usize] - target).norm_squared();
            let db = (shaped[b as usize] - target).norm_squared();
            da.total_cmp(&db)
        });
        support.truncate(REFIT_SUPPORT_CAP);
        let mut solved = solve_affine_ridge(shaped, &support, &target);
        if residual_too_large(&solved, &target) {
            widen_support(&mut support, shaped, &target);
            solved = solve_affine_ridge(shaped, &support, &target);
        }
        match solved {
            Some((weights, predicted))
                if (predicted - target).amax() < REFIT_RESIDUAL =>
            {
                regressor.rows[r] = support
                    .iter()
                    .zip(weights)
                    .map(|(&c, w)| (c, w))
                    .collect();
                regressor.rows[r].sort_by_key(|(c, _)| *c);
            }
            _ => {
                return Err(Error::numerical(format!(
                    "{what} regressor row {r} missed the refit residual bound"
                )));
            }
        }
    }
    regressor.normalize_rows()
}

fn residual_too_large(solved: &Option<(Vec<f64>, Vec3)>, target: &Vec3) -> bool {
    match solved {
        Some((_, predicted)) => (predicted - target).amax() >= REFIT_RESIDUAL,
        None => true,
    }
}

/// Doubles the support size with the nearest vertices not already in it.
fn widen_support(support: &mut Vec<u32>, shaped: &[Vec3], target: &Vec3) {
    let want = (support.len() * 2)
        .max(REFIT_SUPPORT_CAP)
        .min(shaped.len());
    let have: BTreeSet<u32> = support.iter().copied().collect();
    let mut rest: Vec<u32> = (0..shaped.len() as u32)
        .filter(|v| !have.contains(v))
        .collect();
    rest.sort_by(|&a, &b| {
        let da = (shaped[a as usize] - target).norm_squared();
        let db = (shaped[b as usize] - target).norm_squared();
        da.total_cmp(&db)
    });
    for v in rest {
        if support.len() >= want {
            break;
        }
        support.push(v);
    }
}

/// Minimizes |sum_i w_i x_i - target|^2 + ridge * |w|^2 subject to
/// sum w = 1 via the KKT system. Returns weights and the predicted point.
fn solve_affine_ridge(
    shaped: &[Vec3],
    support: &[u32],
    target: &Vec3,
) -> Option<(Vec<f64>, Vec3)> {
    let n = support.len();
    if n == 0 {
        return None;
    }
    let mut kkt = nalgebra::DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        let xi = shaped[support[i] as usize];
        for j in 0..n {
            let xj = shaped[support[j] as usize];
            kkt[(i, j)] = 2.0 * xi.dot(&xj);
        }
        kkt[(i, i)] += 2.0 * REFIT_RIDGE;
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(n + 1);
    for i in 0..n {
        rhs[i] = 2.0 * shaped[support[i] as usize].dot(target);
    }
    rhs[n] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    let weights: Vec<f64> = sol.iter().take(n).copied().collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return None;
    }
    let mut predicted = Vec3::zeros();
    for (i, w) in weights.iter().enumerate() {
        predicted += *w * shaped[support[i] as usize];
    }
    Some((weights, predicted))
}

/// One full correction pass in pipeline order: subdivide, flip, remove,
/// then refit both regressors against the pre-pass joints and landmarks so
/// the canonical joints stay put. Refitting is skipped when the vertex set
/// did not change (the previous rows are still exact). The returned log
/// folds the three stages together with parent indices already remapped.
pub fn remesh_pass(
    template: &mut RiggedTemplate,
    beta: &[f64],
    config: &RemeshConfig,
) -> Result<RemeshLog> {
    config.validate()?;
    let joints_before = template.joint_locations(beta)?;
    let landmarks_before = template.regress_landmarks(beta)?;
    let mut log = subdivide_long_edges(template, config)?;
    let flips = if config.flip {
        flip_inconsistent_triangles(template, config)?
    } else {
        RemeshLog::default()
    };
    let removal = if config.remove {
        remove_incorrect_triangles(template, config)?
    } else {
        RemeshLog::default()
    };
    if let Some(remap) = &removal.index_remap {
        log.parents.retain_mut(|p| {
            let (c, a, b) = (
                remap[p.child as usize],
                remap[p.a as usize],
                remap[p.b as usize],
            );
            if c == u32::MAX || a == u32::MAX || b == u32::MAX {
                return false;
            }
            p.child = c;
            p.a = a;
            p.b = b;
            true
        });
    }
    log.faces_flipped = flips.faces_flipped;
    log.faces_frozen = flips.faces_frozen;
    log.parity_conflicts = flips.parity_conflicts;
    log.flips_converged = flips.flips_converged;
    log.faces_removed = removal.faces_removed;
    log.vertices_removed = removal.vertices_removed;
    log.removals_skipped = removal.removals_skipped;
    log.index_remap = removal.index_remap;
    if log.vertices_added > 0 || log.vertices_removed > 0 {
        refit_joint_regressor(template, beta, &joints_before)?;
        refit_landmark_regressor(template, beta, &landmarks_before)?;
    }
    template.validate()?;
    Ok(log)
}
