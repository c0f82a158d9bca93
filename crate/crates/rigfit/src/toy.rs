//! Procedural test assets: a fully rigged head-like template, a matching
//! denture template, smooth ground-truth textures, and deformation variants
//! used to synthesize fitting cases.
//!
//! The head is a UV sphere with two protruding eyeball components, five
//! joints (root/head/jaw/two eyes), 8 shape + 6 expression blendshape
//! fields, a 68-point landmark regressor, semantic labels, and per-corner
//! UV charts. Everything is mirror-symmetric about x = 0 bit-exactly:
//! mirrored vertices are constructed by reflecting their partner rather
//! than re-evaluating trigonometry, and all analytic fields are even in x.
//! Subject left is +x (up cross forward).

use std::f64::consts::PI;

use crate::math::Vec3;
use crate::raster::ImageF;
use crate::rig::{
    Blendshapes, LandmarkSymmetry, RiggedTemplate, SemanticLabel, SparseRowMat, TeethTemplate,
    NUM_LANDMARKS,
};

pub const HEAD_RADIUS: f64 = 0.0095;
pub const EYE_RADIUS: f64 = 0.0022;
const SEGMENTS: usize = 80;
const RINGS: usize = 40;
const N_SHAPE: usize = 8;
const N_EXPR: usize = 6;
const EYE_X: f64 = 0.0035;
const EYE_Y: f64 = 0.0025;
/// Eyeball centers sit this far behind the head surface, leaving a visible
/// protruding cap.
const EYE_RECESS: f64 = 0.0012;

/// Reserved teeth chart in the UV atlas: (u0, v0, u1, v1).
pub const TEETH_CHART: [f64; 4] = [0.80, 0.05, 0.98, 0.45];

/// Icosphere: subdivided icosahedron with vertices snapped to the sphere.
/// Faces wind counter-clockwise seen from outside.
pub fn icosphere(subdivisions: u32, radius: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: std::collections::HashMap<(u32, u32), u32> =
            std::collections::HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            if let Some(&m) = cache.get(&key) {
                return m;
            }
            let m = ((verts[a as usize] + verts[b as usize]) / 2.0).normalize();
            verts.push(m);
            let idx = (verts.len() - 1) as u32;
            cache.insert(key, idx);
            idx
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    for v in &mut verts {
        *v *= radius;
    }
    (verts, faces)
}

struct SphereMesh {
    verts: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    mirror: Vec<u32>,
    /// (ring, column) per vertex; poles are (0, 0) and (RINGS, 0).
    ring_col: Vec<(u32, u32)>,
}

/// UV sphere around the y axis. Vertices with x < 0 are reflected copies of
/// their x > 0 partners, so the mirror map is bit-exact; the two on-plane
/// columns (front and back meridians) have x forced to exactly 0.
fn uv_sphere(radius: f64) -> SphereMesh {
    let (seg, rings) = (SEGMENTS, RINGS);
    let nv = 2 + (rings - 1) * seg;
    let mut verts = Vec::with_capacity(nv);
    let mut ring_col = Vec::with_capacity(nv);
    verts.push(Vec3::new(0.0, radius, 0.0));
    ring_col.push((0u32, 0u32));
    for j in 1..rings {
        let theta = PI * j as f64 / rings as f64;
        let y = radius * theta.cos();
        let rho = radius * theta.sin();
        let ring_base = verts.len();
        for i in 0..seg {
            let p = if i <= seg / 2 {
                let phi = 2.0 * PI * i as f64 / seg as f64;
                let x = if i == 0 || i == seg / 2 {
                    0.0
                } else {
                    rho * phi.sin()
                };
                Vec3::new(x, y, rho * phi.cos())
            } else {
                let m = verts[ring_base + (seg - i)];
                Vec3::new(-m.x, m.y, m.z)
            };
            verts.push(p);
            ring_col.push((j as u32, i as u32));
        }
    }
    verts.push(Vec3::new(0.0, -radius, 0.0));
    ring_col.push((rings as u32, 0));

    let mut mirror = vec![0u32; nv];
    for (idx, &(j, i)) in ring_col.iter().enumerate() {
        mirror[idx] = if j == 0 || j as usize == rings {
            idx as u32
        } else {
            let mi = (seg - i as usize) % seg;
            (1 + (j as usize - 1) * seg + mi) as u32
        };
    }

    let vid = |j: usize, i: usize| -> u32 { (1 + (j - 1) * seg + (i % seg)) as u32 };
    let south = (nv - 1) as u32;
    let mut faces = Vec::with_capacity(2 * seg + (rings - 2) * seg * 2);
    for i in 0..seg {
        faces.push([0, vid(1, i), vid(1, i + 1)]);
    }
    for j in 1..rings - 1 {
        for i in 0..seg {
            let a = vid(j, i);
            let b = vid(j, i + 1);
            let c = vid(j + 1, i + 1);
            let d = vid(j + 1, i);
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    for i in 0..seg {
        faces.push([south, vid(rings - 1, i + 1), vid(rings - 1, i)]);
    }
    SphereMesh {
        verts,
        faces,
        mirror,
        ring_col,
    }
}

fn gauss(p_hat: &Vec3, c: [f64; 3], s: f64) -> f64 {
    let dx = p_hat.x - c[0];
    let dy = p_hat.y - c[1];
    let dz = p_hat.z - c[2];
    (-(dx * dx + dy * dy + dz * dz) / (s * s)).exp()
}

/// Gaussian pair at c and its x-mirror; even in x bit-exactly (the two
/// terms swap and IEEE addition is commutative).
fn pair_gauss(p_hat: &Vec3, c: [f64; 3], s: f64) -> f64 {
    gauss(p_hat, c, s) + gauss(p_hat, [-c[0], c[1], c[2]], s)
}

fn radial_bump(p: &Vec3, g: f64) -> Vec3 {
    let n = p.norm();
    if n < 1e-12 {
        Vec3::zeros()
    } else {
        (g / n) * p
    }
}

/// Shape blendshape field k evaluated at canonical position p. Fields 0-3
/// are affine (so eyeballs translate coherently); 4-7 are local radial
/// bumps anchored on the symmetry plane.
fn shape_field(k: usize, p: &Vec3) -> Vec3 {
    let ph = p / HEAD_RADIUS;
    const A: f64 = 1.0e-3;
    match k {
        0 => A * ph,
        1 => Vec3::new(0.0, A * ph.y, 0.0),
        2 => Vec3::new(0.0, 0.0, A * ph.z),
        3 => Vec3::new(A * ph.x, 0.0, 0.0),
        4 => radial_bump(p, 1.2e-3 * gauss(&ph, [0.0, 0.55, 0.75], 0.45)),
        5 => radial_bump(p, 1.2e-3 * gauss(&ph, [0.0, -0.65, 0.70], 0.40)),
        6 => radial_bump(p, 1.4e-3 * gauss(&ph, [0.0, 0.30, -0.90], 0.55)),
        7 => radial_bump(p, 8.0e-4 * gauss(&ph, [0.0, 0.05, 0.98], 0.22)),
        _ => unreachable!(),
    }
}

/// Expression field k: localized face deformations (smile, brow raise,
/// cheek puff, pucker, squint, nose wrinkle). Zeroed on eyeball vertices by
/// the caller.
fn expr_field(k: usize, p: &Vec3) -> Vec3 {
    let ph = p / HEAD_RADIUS;
    match k {
        0 => Vec3::new(0.0, 8.0e-4 * pair_gauss(&ph, [0.30, -0.40, 0.82], 0.25), 0.0),
        1 => Vec3::new(0.0, 8.0e-4 * pair_gauss(&ph, [0.22, 0.45, 0.82], 0.25), 0.0),
        2 => radial_bump(p, 1.0e-3 * pair_gauss(&ph, [0.50, -0.15, 0.78], 0.30)),
        3 => Vec3::new(0.0, 0.0, 8.0e-4 * gauss(&ph, [0.0, -0.42, 0.95], 0.20)),
        4 => Vec3::new(0.0, -6.0e-4 * pair_gauss(&ph, [0.37, 0.26, 0.85], 0.18), 0.0),
        5 => Vec3::new(0.0, 5.0e-4 * gauss(&ph, [0.0, 0.08, 0.99], 0.15), 0.0),
        _ => unreachable!(),
    }
}

fn head_label(p: &Vec3) -> SemanticLabel {
    let r = HEAD_RADIUS;
    if p.y <= -0.75 * r {
        SemanticLabel::Neck
    } else if p.z > 0.25 * r && p.y > -0.6 * r && p.y < 0.55 * r {
        SemanticLabel::Face
    } else if p.y >= 0.55 * r || (p.z <= -0.15 * r && p.y > -0.35 * r) {
        SemanticLabel::Hair
    } else {
        SemanticLabel::Boundary
    }
}

/// (root, head, jaw) weights for a head vertex, quantized to multiples of
/// 1/256 with an exact dyadic remainder on the head joint, so rows sum to
/// exactly 1.0 and survive f32 serialization bit-exactly.
fn head_weights(p: &Vec3) -> [f64; 3] {
    let r = HEAD_RADIUS;
    let ss = |t: f64| {
        let t = t.clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    let w_root_raw = ss((-0.55 * r - p.y) / (0.30 * r));
    let jaw_gate = ss((-0.15 * r - p.y) / (0.20 * r)) * ss((p.z - 0.25 * r) / (0.20 * r));
    let w_jaw_raw = jaw_gate * (1.0 - w_root_raw);
    let q = |w: f64| (w * 256.0).round() / 256.0;
    let w_root = q(w_root_raw);
    let mut w_jaw = q(w_jaw_raw);
    if w_root + w_jaw > 1.0 {
        w_jaw = 1.0 - w_root;
    }
    [w_root, 1.0 - w_root - w_jaw, w_jaw]
}

/// 68 landmark anchors as (azimuth degrees, y fraction of the head radius),
/// iBUG-68 layout. Mirror pairs carry exactly negated azimuth literals;
/// azimuth-0 entries are the self-symmetric set.
fn landmark_polar() -> [(f64, f64); NUM_LANDMARKS] {
    [
        // Jaw line 0-16, subject right (-x) to left.
        (-72.0, -0.05),
        (-68.0, -0.10),
        (-62.0, -0.17),
        (-53.0, -0.26),
        (-42.0, -0.36),
        (-30.0, -0.45),
        (-20.0, -0.52),
        (-10.0, -0.58),
        (0.0, -0.62),
        (10.0, -0.58),
        (20.0, -0.52),
        (30.0, -0.45),
        (42.0, -0.36),
        (53.0, -0.26),
        (62.0, -0.17),
        (68.0, -0.10),
        (72.0, -0.05),
        // Right brow 17-21, left brow 22-26.
        (-40.0, 0.32),
        (-32.0, 0.36),
        (-24.0, 0.37),
        (-16.0, 0.36),
        (-8.0, 0.33),
        (8.0, 0.33),
        (16.0, 0.36),
        (24.0, 0.37),
        (32.0, 0.36),
        (40.0, 0.32),
        // Nose bridge 27-30, nostril row 31-35.
        (0.0, 0.24),
        (0.0, 0.16),
        (0.0, 0.08),
        (0.0, 0.00),
        (-10.0, -0.10),
        (-5.0, -0.11),
        (0.0, -0.12),
        (5.0, -0.11),
        (10.0, -0.10),
        // Right eye 36-41, left eye 42-47.
        (-30.0, 0.26),
        (-26.0, 0.30),
        (-18.0, 0.30),
        (-14.0, 0.26),
        (-18.0, 0.22),
        (-26.0, 0.22),
        (14.0, 0.26),
        (18.0, 0.30),
        (26.0, 0.30),
        (30.0, 0.26),
        (26.0, 0.22),
        (18.0, 0.22),
        // Outer lip 48-59.
        (-18.0, -0.42),
        (-12.0, -0.36),
        (-5.0, -0.34),
        (0.0, -0.335),
        (5.0, -0.34),
        (12.0, -0.36),
        (18.0, -0.42),
        (12.0, -0.48),
        (5.0, -0.50),
        (0.0, -0.505),
        (-5.0, -0.50),
        (-12.0, -0.48),
        // Inner lip 60-67.
        (-14.0, -0.42),
        (-6.0, -0.39),
        (0.0, -0.385),
        (6.0, -0.39),
        (14.0, -0.42),
        (6.0, -0.45),
        (0.0, -0.455),
        (-6.0, -0.45),
    ]
}

/// (right-index, left-index) landmark mirror pairs.
fn landmark_pairs() -> Vec<(u32, u32)> {
    let mut pairs = vec![];
    for i in 0..8u32 {
        pairs.push((i, 16 - i));
    }
    pairs.extend([(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]);
    pairs.extend([(31, 35), (32, 34)]);
    pairs.extend([(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]);
    pairs.extend([(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]);
    pairs.extend([(60, 64), (61, 63), (65, 67)]);
    pairs
}

fn landmark_anchor(phi_deg: f64, y_frac: f64) -> Vec3 {
    let r = HEAD_RADIUS;
    let y = y_frac * r;
    let rho = (r * r - y * y).sqrt();
    let pr = phi_deg.abs().to_radians();
    let x = rho * pr.sin();
    let z = rho * pr.cos();
    if phi_deg < 0.0 {
        Vec3::new(-x, y, z)
    } else {
        Vec3::new(x, y, z)
    }
}

/// Indices of the k vertices nearest to `target` among those passing the
/// filter; ties broken by index for determinism.
fn nearest_support<F: Fn(usize) -> bool>(
    target: &Vec3,
    verts: &[Vec3],
    allowed: F,
    k: usize,
) -> Vec<u32> {
    let mut cand: Vec<(f64, u32)> = verts
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(i, v)| ((v - target).norm_squared(), i as u32))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(k);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Mirror-closed 32-vertex support: the 16 nearest strictly-positive-x
/// vertices plus their reflections.
fn symmetric_support<F: Fn(usize) -> bool>(
    target: &Vec3,
    verts: &[Vec3],
    mirror: &[u32],
    allowed: F,
) -> Vec<u32> {
    let mut sel = nearest_support(target, verts, |i| allowed(i) && verts[i].x > 0.0, 16);
    for k in 0..16 {
        sel.push(mirror[sel[k] as usize]);
    }
    sel
}

/// Front and back meridian vertices of 8 consecutive rings centered on the
/// target latitude. Every selected vertex has x = +0.0 exactly, so the
/// regressed joint sits on the symmetry plane bit-exactly in any summation
/// order, and the +z/-z column pairs average to an interior pivot.
fn ring_support(y_frac: f64) -> Vec<u32> {
    let theta = y_frac.acos();
    let j_mid = ((RINGS as f64 * theta / PI).round() as usize).clamp(4, RINGS - 5);
    let mut sel = Vec::with_capacity(16);
    for j in j_mid - 3..=j_mid + 4 {
        sel.push((1 + (j - 1) * SEGMENTS) as u32);
        sel.push((1 + (j - 1) * SEGMENTS + SEGMENTS / 2) as u32);
    }
    sel
}

fn head_uvs(sphere: &SphereMesh) -> Vec<[[f64; 2]; 3]> {
    let mut out = Vec::with_capacity(sphere.faces.len());
    for f in &sphere.faces {
        let mut ufrac = [0.0f64; 3];
        let mut vfrac = [0.0f64; 3];
        let mut pole = [false; 3];
        for c in 0..3 {
            let (j, i) = sphere.ring_col[f[c] as usize];
            vfrac[c] = 1.0 - j as f64 / RINGS as f64;
            if j == 0 || j as usize == RINGS {
                pole[c] = true;
            } else {
                // Seam at the back meridian so the face stays contiguous.
                ufrac[c] = ((i as usize + SEGMENTS / 2) % SEGMENTS) as f64 / SEGMENTS as f64;
            }
        }
        let non_pole: Vec<f64> = (0..3).filter(|&c| !pole[c]).map(|c| ufrac[c]).collect();
        let umin = non_pole.iter().cloned().fold(f64::INFINITY, f64::min);
        let umax = non_pole.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if umax - umin > 0.5 {
            for c in 0..3 {
                if !pole[c] && ufrac[c] < 0.5 {
                    ufrac[c] += 1.0;
                }
            }
        }
        let mean: f64 =
            (0..3).filter(|&c| !pole[c]).map(|c| ufrac[c]).sum::<f64>() / non_pole.len() as f64;
        for c in 0..3 {
            if pole[c] {
                ufrac[c] = mean;
            }
        }
        let mut quad = [[0.0f64; 2]; 3];
        for c in 0..3 {
            quad[c] = [0.02 + 0.76 * ufrac[c], 0.05 + 0.90 * vfrac[c]];
        }
        out.push(quad);
    }
    out
}

/// Azimuthal-equidistant map of an eyeball component into its chart box.
fn eye_uvs(
    verts: &[Vec3],
    faces: &[[u32; 3]],
    center: &Vec3,
    cu: f64,
    cv: f64,
) -> Vec<[[f64; 2]; 3]> {
    let mut out = Vec::with_capacity(faces.len());
    for f in faces {
        let mut quad = [[0.0f64; 2]; 3];
        for c in 0..3 {
            let d = (verts[f[c] as usize] - center) / EYE_RADIUS;
            let rho = d.z.clamp(-1.0, 1.0).acos() / PI;
            let s = (d.x * d.x + d.y * d.y).sqrt();
            let (cx, cy) = if s < 1e-15 { (1.0, 0.0) } else { (d.x / s, d.y / s) };
            quad[c] = [cu + 0.038 * rho * cx, cv + 0.095 * rho * cy];
        }
        out.push(quad);
    }
    out
}

/// Per-template bookkeeping the synthetic harness and tests rely on.
#[derive(Debug, Clone)]
pub struct ToyHeadInfo {
    /// Vertex mirror map about x = 0 (left and right eyeballs swap).
    pub mirror_map: Vec<u32>,
    pub head_radius: f64,
    pub eye_radius: f64,
    pub eye_center_left: Vec3,
    pub eye_center_right: Vec3,
    /// Mouth-corner / philtrum / chin correspondence vertices for teeth
    /// alignment, all inside the face-region prefix.
    pub teeth_anchors: Vec<u32>,
}

/// Builds the procedural rigged head. Vertices are permuted so the
/// face-region prefix (front of the head, z > 0.2 r) comes first.
pub fn toy_head() -> (RiggedTemplate, ToyHeadInfo) {
    let sphere = uv_sphere(HEAD_RADIUS);
    let n_head = sphere.verts.len();
    let eye_z = (HEAD_RADIUS * HEAD_RADIUS - EYE_X * EYE_X - EYE_Y * EYE_Y).sqrt() - EYE_RECESS;
    let c_left = Vec3::new(EYE_X, EYE_Y, eye_z);
    let c_right = Vec3::new(-EYE_X, EYE_Y, eye_z);
    let (eye_verts, eye_faces) = icosphere(3, EYE_RADIUS);
    let n_eye = eye_verts.len();
    let n_total = n_head + 2 * n_eye;

    // Concatenate: head, left eye, right eye (exact reflection, rewound).
    let mut verts = sphere.verts.clone();
    verts.extend(eye_verts.iter().map(|v| v + c_left));
    verts.extend(
        eye_verts
            .iter()
            .map(|v| Vec3::new(-(v.x + c_left.x), v.y + c_left.y, v.z + c_left.z)),
    );
    let mut faces = sphere.faces.clone();
    let bl = n_head as u32;
    faces.extend(eye_faces.iter().map(|f| [f[0] + bl, f[1] + bl, f[2] + bl]));
    let br = (n_head + n_eye) as u32;
    faces.extend(eye_faces.iter().map(|f| [f[0] + br, f[2] + br, f[1] + br]));

    let mut mirror = sphere.mirror.clone();
    for i in 0..n_eye {
        mirror.push((n_head + n_eye + i) as u32);
    }
    for i in 0..n_eye {
        mirror.push((n_head + i) as u32);
    }
    // Component flag: 0 head, 1 left eye, 2 right eye.
    let mut comp = vec![0u8; n_total];
    for i in 0..n_eye {
        comp[n_head + i] = 1;
        comp[n_head + n_eye + i] = 2;
    }

    // UVs are per face corner and survive the vertex permutation untouched.
    let mut uv = head_uvs(&sphere);
    uv.extend(eye_uvs(
        &verts,
        &faces[sphere.faces.len()..sphere.faces.len() + eye_faces.len()],
        &c_left,
        0.84,
        0.65,
    ));
    uv.extend(eye_uvs(
        &verts,
        &faces[sphere.faces.len() + eye_faces.len()..],
        &c_right,
        0.94,
        0.65,
    ));

    // Supports that need the sphere's ring structure, on old indices. The
    // eye rows stride both icosphere copies identically, so the two rows
    // address exact mirror partners in the same order.
    let joint_supports_old: Vec<Vec<u32>> = vec![
        ring_support(-0.84),
        ring_support(-0.26),
        ring_support(-0.10),
        (0..32).map(|k| (n_head + k * n_eye / 32) as u32).collect(),
        (0..32)
            .map(|k| (n_head + n_eye + k * n_eye / 32) as u32)
            .collect(),
    ];

    // Permutation: face-region head vertices first.
    let in_prefix = |i: usize| comp[i] == 0 && verts[i].z > 0.2 * HEAD_RADIUS;
    let mut perm = vec![0u32; n_total];
    let mut next = 0u32;
    for i in 0..n_total {
        if in_prefix(i) {
            perm[i] = next;
            next += 1;
        }
    }
    let prefix_count = next as usize;
    for i in 0..n_total {
        if !in_prefix(i) {
            perm[i] = next;
            next += 1;
        }
    }

    let mut new_verts = vec![Vec3::zeros(); n_total];
    let mut new_mirror = vec![0u32; n_total];
    let mut new_comp = vec![0u8; n_total];
    for i in 0..n_total {
        let p = perm[i] as usize;
        new_verts[p] = verts[i];
        new_mirror[p] = perm[mirror[i] as usize];
        new_comp[p] = comp[i];
    }
    for f in &mut faces {
        for c in f.iter_mut() {
            *c = perm[*c as usize];
        }
    }

    // Per-vertex rig data from positions and component flags.
    let n_joints = 5;
    let mut skin_weights = vec![0.0f64; n_total * n_joints];
    let mut labels = Vec::with_capacity(n_total);
    let mut shape_basis = Blendshapes::zeros(n_total, N_SHAPE);
    let mut expr_basis = Blendshapes::zeros(n_total, N_EXPR);
    for v in 0..n_total {
        let p = new_verts[v];
        match new_comp[v] {
            0 => {
                let [w_root, w_head, w_jaw] = head_weights(&p);
                skin_weights[v * n_joints] = w_root;
                skin_weights[v * n_joints + 1] = w_head;
                skin_weights[v * n_joints + 2] = w_jaw;
                labels.push(head_label(&p));
            }
            1 => {
                skin_weights[v * n_joints + 3] = 1.0;
                labels.push(SemanticLabel::EyeballLeft);
            }
            _ => {
                skin_weights[v * n_joints + 4] = 1.0;
                labels.push(SemanticLabel::EyeballRight);
            }
        }
        for k in 0..N_SHAPE {
            shape_basis.set_basis(v, k, shape_field(k, &p));
        }
        if new_comp[v] == 0 {
            for k in 0..N_EXPR {
                expr_basis.set_basis(v, k, expr_field(k, &p));
            }
        }
    }

    // Joint regressor rows: uniform dyadic weights (1/16 or 1/32).
    let perm_ref = &perm;
    let joint_regressor = SparseRowMat::from_triplets(
        n_joints,
        n_total,
        joint_supports_old.iter().enumerate().flat_map(|(j, sup)| {
            let w = 1.0 / sup.len() as f64;
            sup.iter()
                .map(move |&v| (j as u32, perm_ref[v as usize], w))
                .collect::<Vec<_>>()
        }),
    )
    .expect("joint triplets in range");

    // Landmark supports on permuted indices; head vertices only.
    let polar = landmark_polar();
    let is_head = |i: usize| new_comp[i] == 0;
    let mut lm_supports: Vec<Vec<u32>> = vec![Vec::new(); NUM_LANDMARKS];
    for (k, &(phi, y)) in polar.iter().enumerate() {
        let anchor = landmark_anchor(phi, y);
        if phi > 0.0 {
            lm_supports[k] = nearest_support(&anchor, &new_verts, is_head, 32);
        } else if phi == 0.0 {
            lm_supports[k] = symmetric_support(&anchor, &new_verts, &new_mirror, is_head);
        }
    }
    let pairs = landmark_pairs();
    for &(a, b) in &pairs {
        let (neg, pos) = if polar[a as usize].0 < 0.0 { (a, b) } else { (b, a) };
        lm_supports[neg as usize] = lm_supports[pos as usize]
            .iter()
            .map(|&v| new_mirror[v as usize])
            .collect();
    }
    let w32 = 1.0 / 32.0;
    let landmark_regressor = SparseRowMat::from_triplets(
        NUM_LANDMARKS,
        n_total,
        lm_supports.iter().enumerate().flat_map(|(k, sup)| {
            sup.iter()
                .map(move |&v| (k as u32, v, w32))
                .collect::<Vec<_>>()
        }),
    )
    .expect("landmark triplets in range");

    // Teeth correspondence vertices: mouth corners, philtrum, chin front.
    let corner_left = nearest_support(&landmark_anchor(18.0, -0.42), &new_verts, is_head, 1)[0];
    let corner_right = new_mirror[corner_left as usize];
    let philtrum = nearest_support(
        &landmark_anchor(0.0, -0.28),
        &new_verts,
        |i| is_head(i) && new_verts[i].x > 0.0,
        1,
    )[0];
    let chin = nearest_support(
        &landmark_anchor(0.0, -0.60),
        &new_verts,
        |i| is_head(i) && new_verts[i].x > 0.0,
        1,
    )[0];
    let teeth_anchors = vec![corner_left, corner_right, philtrum, chin];

    let self_symmetric: Vec<u32> = (0..NUM_LANDMARKS as u32)
        .filter(|k| polar[*k as usize].0 == 0.0)
        .collect();

    let template = RiggedTemplate {
        vertices: new_verts,
        faces,
        skin_weights,
        joint_parents: vec![None, Some(0), Some(1), Some(1), Some(1)],
        joint_names: vec![
            "root".into(),
            "head".into(),
            "jaw".into(),
            "eye_left".into(),
            "eye_right".into(),
        ],
        joint_regressor,
        landmark_regressor,
        shape_basis,
        expr_basis,
        pose_basis: Blendshapes::zeros(n_total, 0),
        uv,
        labels,
        landmark_symmetry: LandmarkSymmetry {
            pairs,
            self_symmetric,
        },
        face_region_vertex_count: prefix_count,
    };
    let info = ToyHeadInfo {
        mirror_map: new_mirror,
        head_radius: HEAD_RADIUS,
        eye_radius: EYE_RADIUS,
        eye_center_left: c_left,
        eye_center_right: c_right,
        teeth_anchors,
    };
    (template, info)
}

/// Swept-tube denture arch appended to the buffers; returns nothing, the
/// caller reads lengths. `v0..v1` is the arch's band in the teeth chart.
fn build_arch(
    y: f64,
    v0: f64,
    v1: f64,
    verts: &mut Vec<Vec3>,
    faces: &mut Vec<[u32; 3]>,
    uv: &mut Vec<[[f64; 2]; 3]>,
) {
    const STATIONS: usize = 20;
    const CROSS: usize = 8;
    let arc_r = 0.0030;
    let tube_r = 0.0006;
    let z0 = 0.0040;
    let base = verts.len() as u32;
    let station_u = |i: usize| TEETH_CHART[0] + 0.17 * i as f64 / STATIONS as f64;
    let cross_v = |m: usize| v0 + (v1 - v0) * m as f64 / CROSS as f64;
    for i in 0..=STATIONS {
        let alpha = (-70.0 + 140.0 * i as f64 / STATIONS as f64).to_radians();
        let center = Vec3::new(arc_r * alpha.sin(), y, z0 + arc_r * alpha.cos());
        let rad = Vec3::new(alpha.sin(), 0.0, alpha.cos());
        for m in 0..CROSS {
            let beta = 2.0 * PI * m as f64 / CROSS as f64;
            verts.push(center + tube_r * (beta.cos() * rad + beta.sin() * Vec3::y()));
        }
    }
    let vid = |i: usize, m: usize| base + (i * CROSS + (m % CROSS)) as u32;
    for i in 0..STATIONS {
        for m in 0..CROSS {
            let (a, b) = (vid(i, m), vid(i, m + 1));
            let (d, c) = (vid(i + 1, m), vid(i + 1, m + 1));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
            let ua = [station_u(i), cross_v(m)];
            let ub = [station_u(i), cross_v(m + 1)];
            let ud = [station_u(i + 1), cross_v(m)];
            let uc = [station_u(i + 1), cross_v(m + 1)];
            uv.push([ua, ud, uc]);
            uv.push([ua, uc, ub]);
        }
    }
    // End caps; the start cap faces -tangent, the end cap +tangent.
    let vmid = (v0 + v1) / 2.0;
    for (station, reverse) in [(0usize, false), (STATIONS, true)] {
        let alpha = (-70.0 + 140.0 * station as f64 / STATIONS as f64).to_radians();
        let center = Vec3::new(arc_r * alpha.sin(), y, z0 + arc_r * alpha.cos());
        verts.push(center);
        let cidx = (verts.len() - 1) as u32;
        let ucap = [station_u(station), vmid];
        for m in 0..CROSS {
            let (p, q) = if reverse {
                (vid(station, m + 1), vid(station, m))
            } else {
                (vid(station, m), vid(station, m + 1))
            };
            faces.push([cidx, p, q]);
            let vp = if reverse { cross_v(m + 1) } else { cross_v(m) };
            let vq = if reverse { cross_v(m) } else { cross_v(m + 1) };
            uv.push([ucap, [station_u(station), vp], [station_u(station), vq]]);
        }
    }
}

/// Two closed denture arches in template coordinates (so the identity
/// transform places them correctly in the unfitted head), with anchor
/// points copied from the template's designated correspondence vertices.
pub fn toy_teeth(template: &RiggedTemplate, anchor_vertices: &[u32]) -> TeethTemplate {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let band = TEETH_CHART[3] - TEETH_CHART[1];
    let v_lo = TEETH_CHART[1];
    build_arch(
        -0.0037,
        v_lo + 0.55 * band,
        v_lo + 0.95 * band,
        &mut verts,
        &mut faces,
        &mut uv,
    );
    let upper_vertex_count = verts.len();
    build_arch(
        -0.0043,
        v_lo + 0.05 * band,
        v_lo + 0.45 * band,
        &mut verts,
        &mut faces,
        &mut uv,
    );
    let anchors = anchor_vertices
        .iter()
        .map(|&i| (i, template.vertices[i as usize]))
        .collect();
    TeethTemplate {
        vertices: verts,
        faces,
        uv,
        upper_vertex_count,
        anchors,
    }
}

/// Smooth low-frequency RGB test pattern over the unit UV square, values
/// well inside [0, 1]. Row 0 of the image is v = 1 (y-down image, v-up UV).
pub fn smooth_texture(width: usize, height: usize, cycles: f64) -> ImageF {
    let mut img = ImageF::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = 1.0 - (y as f64 + 0.5) / height as f64;
            let t = 2.0 * PI * cycles;
            let px = img.pixel_mut(x, y);
            px[0] = 0.55 + 0.33 * (t * (u + 0.05)).sin();
            px[1] = 0.50 + 0.30 * (t * (v + 0.40)).sin();
            px[2] = 0.50 + 0.33 * (t * 0.5 * (u + v)).sin();
        }
    }
    img
}

/// Enamel-and-gum pattern for the teeth chart: pale above the gumline
/// band, pink below, as a function of v only.
pub fn teeth_texture(width: usize, height: usize) -> ImageF {
    let mut img = ImageF::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let v = 1.0 - (y as f64 + 0.5) / height as f64;
            let band = (TEETH_CHART[1] + TEETH_CHART[3]) / 2.0;
            let t = ((v - band) / 0.02).clamp(-1.0, 1.0) * 0.5 + 0.5;
            let px = img.pixel_mut(x, y);
            px[0] = 0.75 * t + 0.80 * (1.0 - t);
            px[1] = 0.72 * t + 0.45 * (1.0 - t);
            px[2] = 0.68 * t + 0.45 * (1.0 - t);
        }
    }
    img
}

/// Ground-truth hair deformations for synthetic cases. Both fields are
/// mirror-symmetric and concentrated on hair-labeled vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HairVariant {
    /// Radial bulge at the back of the skull.
    Bulged,
    /// Downward-and-back sweep of the lower back, like a long bob.
    Long,
}

impl HairVariant {
    pub fn name(self) -> &'static str {
        match self {
            HairVariant::Bulged => "bulged",
            HairVariant::Long => "long",
        }
    }
}

/// Per-vertex canonical displacement realizing the variant on a template.
pub fn hair_variant_displacement(template: &RiggedTemplate, variant: HairVariant) -> Vec<Vec3> {
    template
        .vertices
        .iter()
        .map(|p| {
            let ph = p / HEAD_RADIUS;
            match variant {
                HairVariant::Bulged => {
                    radial_bump(p, 4.5e-3 * gauss(&ph, [0.0, 0.45, -0.85], 0.55))
                }
                HairVariant::Long => {
                    let g = 4.5e-3 * gauss(&ph, [0.0, -0.30, -0.95], 0.50);
                    g * Vec3::new(0.0, -0.80, -0.60)
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::ControlParams;

    #[test]
    fn icosphere_counts_and_radius() {
        let (v, f) = icosphere(2, 0.5);
        assert_eq!(v.len(), 162);
        assert_eq!(f.len(), 320);
        for p in &v {
            assert!((p.norm() - 0.5).abs() < 1e-12);
        }
        // Closed manifold: V - E + F = 2 with E = 3F/2.
        assert_eq!(v.len() as i64 - (f.len() as i64 * 3) / 2 + f.len() as i64, 2);
    }

    #[test]
    fn icosphere_faces_wound_outward() {
        let (v, f) = icosphere(1, 1.0);
        for tri in &f {
            let (a, b, c) = (
                v[tri[0] as usize],
                v[tri[1] as usize],
                v[tri[2] as usize],
            );
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn toy_head_validates_with_expected_shape() {
        let (t, info) = toy_head();
        t.validate().unwrap();
        assert_eq!(t.n_verts(), 3122 + 2 * 642);
        assert_eq!(t.n_faces(), 6240 + 2 * 1280);
        assert_eq!(t.n_joints(), 5);
        assert_eq!(t.shape_basis.count, N_SHAPE);
        assert_eq!(t.expr_basis.count, N_EXPR);
        assert_eq!(t.pose_basis.count, 0);
        assert!(t.face_region_vertex_count > 500);
        assert!(t.face_region_vertex_count < t.n_verts());
        assert_eq!(info.mirror_map.len(), t.n_verts());
        // Prefix vertices really are the front of the head.
        for i in 0..t.face_region_vertex_count {
            assert!(t.vertices[i].z > 0.2 * HEAD_RADIUS);
        }
    }

    #[test]
    fn toy_head_mirror_is_bit_exact() {
        let (t, info) = toy_head();
        let m = &info.mirror_map;
        for i in 0..t.n_verts() {
            let j = m[i] as usize;
            assert_eq!(m[j] as usize, i);
            let (a, b) = (t.vertices[i], t.vertices[j]);
            assert_eq!(a.x, -b.x);
            assert_eq!(a.y, b.y);
            assert_eq!(a.z, b.z);
            // Weights and labels mirror too (eyeball labels swap).
            for joint in 0..t.n_joints() {
                let mj = match joint {
                    3 => 4,
                    4 => 3,
                    _ => joint,
                };
                assert_eq!(t.skin_weight(i, joint), t.skin_weight(j, mj));
            }
            let expect = match t.labels[i] {
                SemanticLabel::EyeballLeft => SemanticLabel::EyeballRight,
                SemanticLabel::EyeballRight => SemanticLabel::EyeballLeft,
                l => l,
            };
            assert_eq!(t.labels[j], expect);
            // Prefix membership is mirror-closed.
            assert_eq!(
                i < t.face_region_vertex_count,
                j < t.face_region_vertex_count
            );
        }
    }

    #[test]
    fn blendshape_fields_mirror_bit_exactly() {
        let (t, info) = toy_head();
        for i in 0..t.n_verts() {
            let j = info.mirror_map[i] as usize;
            for k in 0..t.shape_basis.count {
                let (a, b) = (t.shape_basis.basis(i, k), t.shape_basis.basis(j, k));
                assert_eq!(a.x, -b.x);
                assert_eq!(a.y, b.y);
                assert_eq!(a.z, b.z);
            }
            for k in 0..t.expr_basis.count {
                let (a, b) = (t.expr_basis.basis(i, k), t.expr_basis.basis(j, k));
                assert_eq!(a.x, -b.x);
                assert_eq!(a.y, b.y);
                assert_eq!(a.z, b.z);
            }
        }
    }

    #[test]
    fn shaped_mesh_stays_mirror_symmetric() {
        let (t, info) = toy_head();
        let beta: Vec<f64> = (0..N_SHAPE).map(|k| 0.3 * (k as f64 + 1.0)).collect();
        let shaped = t.shaped_vertices(&beta).unwrap();
        for i in 0..t.n_verts() {
            let j = info.mirror_map[i] as usize;
            assert_eq!(shaped[i].x, -shaped[j].x);
            assert_eq!(shaped[i].y, shaped[j].y);
            assert_eq!(shaped[i].z, shaped[j].z);
        }
    }

    #[test]
    fn landmarks_respect_symmetry_and_sit_on_the_face() {
        let (t, _) = toy_head();
        let lms = t.regress_landmarks(&vec![0.0; N_SHAPE]).unwrap();
        assert_eq!(lms.len(), NUM_LANDMARKS);
        for &(a, b) in &t.landmark_symmetry.pairs {
            let (pa, pb) = (lms[a as usize], lms[b as usize]);
            assert!((pa.x + pb.x).abs() < 1e-15);
            assert!((pa.y - pb.y).abs() < 1e-15);
            assert!((pa.z - pb.z).abs() < 1e-15);
        }
        for &k in &t.landmark_symmetry.self_symmetric {
            assert!(lms[k as usize].x.abs() < 1e-15);
        }
        for p in &lms {
            let r = p.norm() / HEAD_RADIUS;
            assert!(r > 0.96 && r < 1.005, "landmark radius {r}");
            assert!(p.z > 0.0);
        }
        // Chin below, brows above.
        assert!(lms[8].y < -0.5 * HEAD_RADIUS);
        assert!(lms[19].y > 0.3 * HEAD_RADIUS);
    }

    #[test]
    fn all_faces_wind_outward() {
        let (t, info) = toy_head();
        for f in &t.faces {
            let (a, b, c) = (
                t.vertices[f[0] as usize],
                t.vertices[f[1] as usize],
                t.vertices[f[2] as usize],
            );
            let centroid = (a + b + c) / 3.0;
            // Component center: origin for the head, eye centers otherwise.
            let center = match t.labels[f[0] as usize] {
                SemanticLabel::EyeballLeft => info.eye_center_left,
                SemanticLabel::EyeballRight => info.eye_center_right,
                _ => Vec3::zeros(),
            };
            let n = (b - a).cross(&(c - a));
            assert!(n.dot(&(centroid - center)) > 0.0);
        }
    }

    #[test]
    fn eyeballs_protrude_from_the_head() {
        let (t, _) = toy_head();
        let max_r = t
            .labels
            .iter()
            .zip(&t.vertices)
            .filter(|(l, _)| l.is_eyeball())
            .map(|(_, v)| v.norm())
            .fold(0.0f64, f64::max);
        assert!(max_r > HEAD_RADIUS + 5.0e-4, "max eyeball radius {max_r}");
    }

    #[test]
    fn joints_sit_inside_on_the_symmetry_plane() {
        let (t, _) = toy_head();
        let joints = t.joint_locations(&vec![0.0; N_SHAPE]).unwrap();
        for j in [0, 1, 2] {
            assert_eq!(joints[j].x, 0.0);
            assert!(joints[j].z.abs() < 0.15 * HEAD_RADIUS);
        }
        assert!(joints[0].y < -0.7 * HEAD_RADIUS);
        assert!((joints[3].x - EYE_X).abs() < 0.5 * EYE_RADIUS);
        assert_eq!(joints[3].x, -joints[4].x);
        // Eye joints near the eyeball centers.
        let (_, info) = toy_head();
        assert!((joints[3] - info.eye_center_left).norm() < 0.5 * EYE_RADIUS);
    }

    #[test]
    fn weight_regions_are_plausible() {
        let (t, _) = toy_head();
        for (i, p) in t.vertices.iter().enumerate() {
            if t.labels[i].is_eyeball() {
                continue;
            }
            if p.y > 0.5 * HEAD_RADIUS {
                assert_eq!(t.skin_weight(i, 1), 1.0);
            }
            if p.y < -0.9 * HEAD_RADIUS {
                assert_eq!(t.skin_weight(i, 0), 1.0);
            }
            if p.y < -0.45 * HEAD_RADIUS && p.y > -0.55 * HEAD_RADIUS && p.z > 0.7 * HEAD_RADIUS
            {
                assert!(t.skin_weight(i, 2) > 0.7, "chin vertex {i} jaw weight");
            }
        }
    }

    #[test]
    fn edge_lengths_bracket_the_remesh_thresholds() {
        let (t, _) = toy_head();
        let mut min_e = f64::INFINITY;
        let mut max_e = 0.0f64;
        for f in &t.faces {
            for e in 0..3 {
                let l = (t.vertices[f[e] as usize] - t.vertices[f[(e + 1) % 3] as usize]).norm();
                min_e = min_e.min(l);
                max_e = max_e.max(l);
            }
        }
        // Longest edges exceed the 5e-4 split threshold (so remeshing has
        // work to do); the shortest stay above the 5e-5 removal floor.
        assert!(max_e > 5.0e-4 && max_e < 1.2e-3, "max edge {max_e}");
        assert!(min_e > 5.0e-5, "min edge {min_e}");
    }

    #[test]
    fn uv_charts_stay_in_their_boxes() {
        let (t, _) = toy_head();
        for (fi, quad) in t.uv.iter().enumerate() {
            let label = t.labels[t.faces[fi][0] as usize];
            for [u, v] in quad {
                match label {
                    SemanticLabel::EyeballLeft => {
                        assert!((0.80..=0.88).contains(u) && (0.55..=0.75).contains(v));
                    }
                    SemanticLabel::EyeballRight => {
                        assert!((0.90..=0.98).contains(u) && (0.55..=0.75).contains(v));
                    }
                    _ => {
                        assert!(
                            (0.019..0.795).contains(u) && (0.049..0.951).contains(v),
                            "head uv ({u},{v})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn teeth_template_is_closed_and_anchored_in_prefix() {
        let (t, info) = toy_head();
        let teeth = toy_teeth(&t, &info.teeth_anchors);
        // Two closed components: V - E + F = 2 each.
        let v = teeth.vertices.len() as i64;
        let f = teeth.faces.len() as i64;
        assert_eq!(v - 3 * f / 2 + f, 4);
        assert_eq!(teeth.uv.len(), teeth.faces.len());
        assert!(teeth.upper_vertex_count > 0 && teeth.upper_vertex_count < teeth.vertices.len());
        let mut volume = 0.0;
        for tri in &teeth.faces {
            let (a, b, c) = (
                teeth.vertices[tri[0] as usize],
                teeth.vertices[tri[1] as usize],
                teeth.vertices[tri[2] as usize],
            );
            volume += a.dot(&b.cross(&c)) / 6.0;
        }
        assert!(volume > 0.0, "teeth volume {volume}");
        for &(head_idx, local) in &teeth.anchors {
            assert!((head_idx as usize) < t.face_region_vertex_count);
            assert_eq!(local, t.vertices[head_idx as usize]);
        }
        // Teeth sit inside the head, near the mouth.
        for p in &teeth.vertices {
            assert!(p.norm() < HEAD_RADIUS);
            assert!(p.y < -0.25 * HEAD_RADIUS && p.y > -0.55 * HEAD_RADIUS);
        }
        // Teeth UVs stay inside the reserved chart.
        for quad in &teeth.uv {
            for [u, v] in quad {
                assert!((TEETH_CHART[0]..=TEETH_CHART[2]).contains(u));
                assert!((TEETH_CHART[1]..=TEETH_CHART[3]).contains(v));
            }
        }
    }

    #[test]
    fn hair_variants_move_hair_but_not_the_face() {
        let (t, _) = toy_head();
        for variant in [HairVariant::Bulged, HairVariant::Long] {
            let d = hair_variant_displacement(&t, variant);
            let mut hair_max = 0.0f64;
            for (i, offset) in d.iter().enumerate() {
                match t.labels[i] {
                    SemanticLabel::Hair | SemanticLabel::Boundary | SemanticLabel::Neck => {
                        hair_max = hair_max.max(offset.norm());
                    }
                    _ => assert!(
                        offset.norm() < 1e-5,
                        "{} moved a non-hair vertex by {}",
                        variant.name(),
                        offset.norm()
                    ),
                }
            }
            assert!(hair_max > 3.0e-3, "{} peak {hair_max}", variant.name());
        }
    }

    #[test]
    fn jaw_pose_opens_the_mouth_downward() {
        let (t, _) = toy_head();
        let mut params = ControlParams::rest(&t);
        params.joint_rotations[2] = Vec3::new(0.15, 0.0, 0.0);
        let posed = t.pose_model(&params).unwrap();
        // Chin vertices drop; crown vertices stay.
        let mut chin_drop = 0.0f64;
        let mut crown_shift = 0.0f64;
        for (i, p) in t.vertices.iter().enumerate() {
            let dy = posed.vertices[i].y - p.y;
            if p.y < -0.45 * HEAD_RADIUS && p.z > 0.7 * HEAD_RADIUS {
                chin_drop = chin_drop.min(dy);
            }
            if p.y > 0.8 * HEAD_RADIUS {
                crown_shift = crown_shift.max(dy.abs());
            }
        }
        assert!(chin_drop < -2.0e-4, "chin moved {chin_drop}");
        assert!(crown_shift < 1e-12);
    }

    #[test]
    fn textures_are_in_range() {
        for img in [smooth_texture(64, 64, 2.0), teeth_texture(64, 64)] {
            for v in &img.data {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
