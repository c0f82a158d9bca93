//! On-disk formats: the rig container directory, PNG codecs for normal
//! maps, semantic maps and masks, OBJ/MTL meshes, JSON sidecars (cameras,
//! control parameters, landmarks), the multi-view case bundle, the fit
//! configuration file, and the per-iteration report log.
//!
//! Every format round-trips byte-exactly through save -> load -> save:
//! floats are printed in shortest round-trip form, image channels are
//! 8-bit with exact decode/encode inverses, and binary buffers are
//! little-endian with lengths declared up front.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::raster::{Camera, ImageF};
use crate::rig::{
    Blendshapes, ControlParams, LandmarkSymmetry, RiggedTemplate, SemanticLabel, SparseRowMat,
    NUM_LANDMARKS,
};

pub const RIG_FORMAT_VERSION: u32 = 1;
/// Number of target views in a case bundle.
pub const NUM_VIEWS: usize = 6;
/// Background value in label maps (no surface under the pixel).
pub const LABEL_BACKGROUND: u8 = 255;

// ---------------------------------------------------------------------------
// Little-endian buffer helpers.

fn write_f32s(path: &Path, values: impl Iterator<Item = f64>) -> Result<u64> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut n = 0u64;
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
        n += 4;
    }
    w.flush()?;
    Ok(n)
}

fn write_u32s(path: &Path, values: impl Iterator<Item = u32>) -> Result<u64> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut n = 0u64;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
        n += 4;
    }
    w.flush()?;
    Ok(n)
}

fn read_buffer(dir: &Path, name: &str, declared: Option<&u64>) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let declared = *declared
        .ok_or_else(|| Error::format(path.display().to_string(), "buffer not declared"))?;
    let bytes = fs::read(&path)?;
    if bytes.len() as u64 != declared {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {declared} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

// ---------------------------------------------------------------------------
// Rig container.

#[derive(Debug, Serialize, Deserialize)]
struct RigManifest {
    format_version: u32,
    n_vertices: u64,
    n_faces: u64,
    n_joints: u64,
    n_shape_basis: u64,
    n_expr_basis: u64,
    n_pose_basis: u64,
    n_landmarks: u64,
    face_region_vertex_count: u64,
    joint_names: Vec<String>,
    joint_parents: Vec<Option<u32>>,
    label_names: Vec<String>,
    landmark_pairs: Vec<(u32, u32)>,
    landmark_self_symmetric: Vec<u32>,
    buffers: BTreeMap<String, u64>,
}

fn write_coo(path: &Path, mat: &SparseRowMat) -> Result<u64> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut n = 0u64;
    for (r, c, v) in mat.triplets() {
        w.write_all(&r.to_le_bytes())?;
        w.write_all(&c.to_le_bytes())?;
        w.write_all(&(v as f32).to_le_bytes())?;
        n += 12;
    }
    w.flush()?;
    Ok(n)
}

fn read_coo(bytes: &[u8], nrows: usize, ncols: usize, what: &str) -> Result<SparseRowMat> {
    if bytes.len() % 12 != 0 {
        return Err(Error::invalid(format!("{what}: triplet buffer not a multiple of 12 bytes")));
    }
    let triplets = bytes.chunks_exact(12).map(|c| {
        (
            u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            f32::from_le_bytes([c[8], c[9], c[10], c[11]]) as f64,
        )
    });
    SparseRowMat::from_triplets(nrows, ncols, triplets)
}

fn write_basis(path: &Path, basis: &Blendshapes) -> Result<u64> {
    write_f32s(path, basis.data.iter().copied())
}

/// Saves a template as a rig container directory: a `rig.json` manifest
/// plus little-endian binary buffers whose byte lengths the manifest
/// declares.
pub fn save_rig_container(dir: &Path, template: &RiggedTemplate) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buffers = BTreeMap::new();
    buffers.insert(
        "vertices.f32".to_string(),
        write_f32s(
            &dir.join("vertices.f32"),
            template.vertices.iter().flat_map(|v| [v.x, v.y, v.z]),
        )?,
    );
    buffers.insert(
        "faces.u32".to_string(),
        write_u32s(&dir.join("faces.u32"), template.faces.iter().flatten().copied())?,
    );
    buffers.insert(
        "weights.f32".to_string(),
        write_f32s(&dir.join("weights.f32"), template.skin_weights.iter().copied())?,
    );
    buffers.insert(
        "joint_regressor.coo".to_string(),
        write_coo(&dir.join("joint_regressor.coo"), &template.joint_regressor)?,
    );
    buffers.insert(
        "landmark_regressor.coo".to_string(),
        write_coo(&dir.join("landmark_regressor.coo"), &template.landmark_regressor)?,
    );
    buffers.insert(
        "shape_basis.f32".to_string(),
        write_basis(&dir.join("shape_basis.f32"), &template.shape_basis)?,
    );
    buffers.insert(
        "expr_basis.f32".to_string(),
        write_basis(&dir.join("expr_basis.f32"), &template.expr_basis)?,
    );
    buffers.insert(
        "pose_basis.f32".to_string(),
        write_basis(&dir.join("pose_basis.f32"), &template.pose_basis)?,
    );
    fs::write(
        dir.join("labels.u8"),
        template.labels.iter().map(|l| l.index() as u8).collect::<Vec<u8>>(),
    )?;
    buffers.insert("labels.u8".to_string(), template.labels.len() as u64);
    buffers.insert(
        "uv.f32".to_string(),
        write_f32s(
            &dir.join("uv.f32"),
            template.uv.iter().flat_map(|q| q.iter().flatten().copied().collect::<Vec<_>>()),
        )?,
    );
    let manifest = RigManifest {
        format_version: RIG_FORMAT_VERSION,
        n_vertices: template.n_verts() as u64,
        n_faces: template.n_faces() as u64,
        n_joints: template.n_joints() as u64,
        n_shape_basis: template.shape_basis.count as u64,
        n_expr_basis: template.expr_basis.count as u64,
        n_pose_basis: template.pose_basis.count as u64,
        n_landmarks: template.landmark_regressor.nrows() as u64,
        face_region_vertex_count: template.face_region_vertex_count as u64,
        joint_names: template.joint_names.clone(),
        joint_parents: template.joint_parents.clone(),
        label_names: SemanticLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        landmark_pairs: template.landmark_symmetry.pairs.clone(),
        landmark_self_symmetric: template.landmark_symmetry.self_symmetric.clone(),
        buffers,
    };
    write_json_pretty(&dir.join("rig.json"), &manifest)
}

/// Renormalizes rows whose sum drifted from 1 (f32 quantization of refit
/// rows); rows already summing to exactly 1.0 are left bit-untouched so
/// dyadic-weight containers round-trip byte-exactly.
fn renormalize_rows_f64(rows: &mut [Vec<(u32, f64)>], what: &str) -> Result<()> {
    for (r, row) in rows.iter_mut().enumerate() {
        let sum: f64 = row.iter().map(|(_, v)| v).sum();
        if sum.abs() < 1e-6 {
            return Err(Error::format(what, format!("row {r} sums to {sum}")));
        }
        if (sum - 1.0).abs() > 1e-12 {
            for (_, v) in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(())
}

pub fn load_rig_container(dir: &Path) -> Result<RiggedTemplate> {
    let manifest_path = dir.join("rig.json");
    let manifest: RigManifest = read_json(&manifest_path)?;
    if manifest.format_version != RIG_FORMAT_VERSION {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let nv = manifest.n_vertices as usize;
    let nf = manifest.n_faces as usize;
    let nj = manifest.n_joints as usize;
    let expect = |name: &str, bytes: u64| -> Result<Vec<u8>> {
        let buf = read_buffer(dir, name, manifest.buffers.get(name))?;
        if buf.len() as u64 != bytes {
            return Err(Error::format(
                dir.join(name).display().to_string(),
                format!("manifest dimensions imply {bytes} bytes, buffer declares {}", buf.len()),
            ));
        }
        Ok(buf)
    };

    for (name, expected) in manifest.label_names.iter().zip(SemanticLabel::ALL.iter()) {
        if SemanticLabel::from_name(name) != Some(*expected) {
            return Err(Error::format(
                manifest_path.display().to_string(),
                format!("unknown label palette entry {name}"),
            ));
        }
    }

    let vert_data = f32s(&expect("vertices.f32", nv as u64 * 12)?);
    let vertices: Vec<Vec3> = vert_data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let face_data = u32s(&expect("faces.u32", nf as u64 * 12)?);
    let faces: Vec<[u32; 3]> = face_data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut skin_weights = f32s(&expect("weights.f32", (nv * nj) as u64 * 4)?);
    // Renormalize in f64 without disturbing exact rows.
    for v in 0..nv {
        let row = &mut skin_weights[v * nj..(v + 1) * nj];
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::format(
                dir.join("weights.f32").display().to_string(),
                format!("vertex {v} weight row sums to {sum}"),
            ));
        }
        if (sum - 1.0).abs() > 1e-12 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }

    let joint_bytes = read_buffer(dir, "joint_regressor.coo", manifest.buffers.get("joint_regressor.coo"))?;
    let mut joint_regressor = read_coo(&joint_bytes, nj, nv, "joint_regressor.coo")?;
    renormalize_rows_f64(&mut joint_regressor.rows, "joint_regressor.coo")?;
    let lm_bytes = read_buffer(
        dir,
        "landmark_regressor.coo",
        manifest.buffers.get("landmark_regressor.coo"),
    )?;
    let mut landmark_regressor =
        read_coo(&lm_bytes, manifest.n_landmarks as usize, nv, "landmark_regressor.coo")?;
    renormalize_rows_f64(&mut landmark_regressor.rows, "landmark_regressor.coo")?;

    let load_basis = |name: &str, count: u64| -> Result<Blendshapes> {
        let data = f32s(&expect(name, nv as u64 * count * 12)?);
        Ok(Blendshapes {
            nverts: nv,
            count: count as usize,
            data,
        })
    };
    let shape_basis = load_basis("shape_basis.f32", manifest.n_shape_basis)?;
    let expr_basis = load_basis("expr_basis.f32", manifest.n_expr_basis)?;
    let pose_basis = load_basis("pose_basis.f32", manifest.n_pose_basis)?;

    let label_bytes = expect("labels.u8", nv as u64)?;
    let labels = label_bytes
        .iter()
        .map(|&b| {
            SemanticLabel::from_index(b as usize).ok_or_else(|| {
                Error::format(dir.join("labels.u8").display().to_string(), format!("label {b}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let uv_data = f32s(&expect("uv.f32", nf as u64 * 24)?);
    let uv: Vec<[[f64; 2]; 3]> = uv_data
        .chunks_exact(6)
        .map(|c| [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]])
        .collect();

    let template = RiggedTemplate {
        vertices,
        faces,
        skin_weights,
        joint_parents: manifest.joint_parents.clone(),
        joint_names: manifest.joint_names,
        joint_regressor,
        landmark_regressor,
        shape_basis,
        expr_basis,
        pose_basis,
        uv,
        labels,
        landmark_symmetry: LandmarkSymmetry {
            pairs: manifest.landmark_pairs,
            self_symmetric: manifest.landmark_self_symmetric,
        },
        face_region_vertex_count: manifest.face_region_vertex_count as usize,
    };
    template.validate()?;
    Ok(template)
}

// ---------------------------------------------------------------------------
// PNG codecs. All decode/encode pairs are exact inverses at the byte level.

fn png_u8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok((w, h, 1, g.into_raw()))
        }
        image::DynamicImage::ImageRgb8(c) => {
            let (w, h) = (c.width() as usize, c.height() as usize);
            Ok((w, h, 3, c.into_raw()))
        }
        other => Err(Error::format(
            path.display().to_string(),
            format!("unsupported color type {:?}", other.color()),
        )),
    }
}

fn save_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::invalid("gray buffer does not match dimensions"))?;
    img.save(path)?;
    Ok(())
}

fn save_rgb(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::invalid("rgb buffer does not match dimensions"))?;
    img.save(path)?;
    Ok(())
}

/// Encodes a camera-space normal map: channel e = round((n+1)/2 * 255),
/// background pixels (validity 0) encode as (0,0,0), which no unit normal
/// can produce.
pub fn save_normal_png(path: &Path, normals: &ImageF, valid: &ImageF) -> Result<()> {
    if normals.channels != 3 || valid.channels != 1 {
        return Err(Error::invalid("normal map must be 3-channel with 1-channel validity"));
    }
    let mut data = Vec::with_capacity(normals.data.len());
    for y in 0..normals.height {
        for x in 0..normals.width {
            for c in 0..3 {
                let e = if valid.at(x, y, 0) > 0.5 {
                    ((normals.at(x, y, c) + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                data.push(e);
            }
        }
    }
    save_rgb(path, normals.width, normals.height, data)
}

/// Decodes a normal PNG to (normals, validity). Decoded components are the
/// exact quantization centers (2e - 255)/255, so re-encoding reproduces
/// the file byte-for-byte; callers renormalize before geometric use.
pub fn load_normal_png(path: &Path) -> Result<(ImageF, ImageF)> {
    let (w, h, ch, data) = png_u8(path)?;
    if ch != 3 {
        return Err(Error::format(path.display().to_string(), "normal map must be RGB"));
    }
    let mut normals = ImageF::zeros(w, h, 3);
    let mut valid = ImageF::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            let (r, g, b) = (data[i], data[i + 1], data[i + 2]);
            if r != 0 || g != 0 || b != 0 {
                valid.pixel_mut(x, y)[0] = 1.0;
                let px = normals.pixel_mut(x, y);
                px[0] = (2.0 * r as f64 - 255.0) / 255.0;
                px[1] = (2.0 * g as f64 - 255.0) / 255.0;
                px[2] = (2.0 * b as f64 - 255.0) / 255.0;
            }
        }
    }
    Ok((normals, valid))
}

/// Scalar image in [0,1] as 8-bit grayscale.
pub fn save_mask_png(path: &Path, mask: &ImageF) -> Result<()> {
    if mask.channels != 1 {
        return Err(Error::invalid("mask must be 1-channel"));
    }
    let data = mask
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    save_gray(path, mask.width, mask.height, data)
}

pub fn load_mask_png(path: &Path) -> Result<ImageF> {
    let (w, h, ch, data) = png_u8(path)?;
    if ch != 1 {
        return Err(Error::format(path.display().to_string(), "mask must be grayscale"));
    }
    let mut img = ImageF::zeros(w, h, 1);
    for (dst, &src) in img.data.iter_mut().zip(&data) {
        *dst = src as f64 / 255.0;
    }
    Ok(img)
}

/// RGB image in [0,1] as 8-bit color.
pub fn save_rgb_png(path: &Path, img: &ImageF) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid("rgb image must be 3-channel"));
    }
    let data = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    save_rgb(path, img.width, img.height, data)
}

pub fn load_rgb_png(path: &Path) -> Result<ImageF> {
    let (w, h, ch, data) = png_u8(path)?;
    if ch != 3 {
        return Err(Error::format(path.display().to_string(), "expected RGB"));
    }
    let mut img = ImageF::zeros(w, h, 3);
    for (dst, &src) in img.data.iter_mut().zip(&data) {
        *dst = src as f64 / 255.0;
    }
    Ok(img)
}

/// Per-pixel semantic label indices; LABEL_BACKGROUND marks no coverage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn background(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            data: vec![LABEL_BACKGROUND; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

pub fn save_label_png(path: &Path, map: &LabelMap) -> Result<()> {
    save_gray(path, map.width, map.height, map.data.clone())
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let (w, h, ch, data) = png_u8(path)?;
    if ch != 1 {
        return Err(Error::format(path.display().to_string(), "label map must be grayscale"));
    }
    for &b in &data {
        if b != LABEL_BACKGROUND && SemanticLabel::from_index(b as usize).is_none() {
            return Err(Error::format(path.display().to_string(), format!("label value {b}")));
        }
    }
    Ok(LabelMap {
        width: w,
        height: h,
        data,
    })
}

// ---------------------------------------------------------------------------
// OBJ / MTL.

/// Optional texture hookup for OBJ export.
pub struct ObjMaterial<'a> {
    pub mtl_file: &'a str,
    pub material: &'a str,
    pub texture_file: &'a str,
}

/// Writes an OBJ with optional per-corner UVs (deduplicated by exact bit
/// pattern) and an optional MTL reference. Floats print in shortest
/// round-trip form, so parse -> print reproduces the file exactly.
pub fn save_obj(
    path: &Path,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    uv: Option<&[[[f64; 2]; 3]]>,
    material: Option<&ObjMaterial>,
) -> Result<()> {
    if let Some(uv) = uv {
        if uv.len() != faces.len() {
            return Err(Error::invalid("per-corner uv count must match face count"));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    if let Some(m) = material {
        writeln!(w, "mtllib {}", m.mtl_file)?;
    }
    for v in vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    let mut vt_index: std::collections::HashMap<[u64; 2], u32> = std::collections::HashMap::new();
    let mut corner_vt: Vec<[u32; 3]> = Vec::new();
    if let Some(uv) = uv {
        let mut vt_list: Vec<[f64; 2]> = Vec::new();
        for quad in uv {
            let mut tri = [0u32; 3];
            for (c, t) in quad.iter().enumerate() {
                let key = [t[0].to_bits(), t[1].to_bits()];
                let next = vt_list.len() as u32;
                let id = *vt_index.entry(key).or_insert_with(|| {
                    vt_list.push(*t);
                    next
                });
                tri[c] = id;
            }
            corner_vt.push(tri);
        }
        for t in &vt_list {
            writeln!(w, "vt {} {}", t[0], t[1])?;
        }
    }
    if let Some(m) = material {
        writeln!(w, "usemtl {}", m.material)?;
    }
    for (fi, f) in faces.iter().enumerate() {
        if uv.is_some() {
            let t = corner_vt[fi];
            writeln!(
                w,
                "f {}/{} {}/{} {}/{}",
                f[0] + 1,
                t[0] + 1,
                f[1] + 1,
                t[1] + 1,
                f[2] + 1,
                t[2] + 1
            )?;
        } else {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
    }
    w.flush()?;
    if let Some(m) = material {
        let mtl_path = path.parent().unwrap_or(Path::new(".")).join(m.mtl_file);
        let mut mw = BufWriter::new(fs::File::create(mtl_path)?);
        writeln!(mw, "newmtl {}", m.material)?;
        writeln!(mw, "Kd 1 1 1")?;
        writeln!(mw, "map_Kd {}", m.texture_file)?;
        mw.flush()?;
    }
    Ok(())
}

/// Triangle mesh parsed from an OBJ; UVs are resolved back to per-corner
/// form when `vt` data is present.
pub struct ObjMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uv: Option<Vec<[[f64; 2]; 3]>>,
}

pub fn load_obj(path: &Path) -> Result<ObjMesh> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut vertices = Vec::new();
    let mut vts: Vec<[f64; 2]> = Vec::new();
    let mut faces = Vec::new();
    let mut corner_uv: Vec<[[f64; 2]; 3]> = Vec::new();
    let mut any_vt = false;
    let bad = |line_no: usize, why: &str| {
        Error::format(path.display().to_string(), format!("line {line_no}: {why}"))
    };
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let ln = ln + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for x in &mut p {
                    *x = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "malformed vertex"))?;
                }
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            Some("vt") => {
                let mut p = [0.0f64; 2];
                for x in &mut p {
                    *x = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "malformed texture coordinate"))?;
                }
                vts.push(p);
            }
            Some("f") => {
                let mut vs = [0u32; 3];
                let mut ts = [None; 3];
                for c in 0..3 {
                    let token = parts.next().ok_or_else(|| bad(ln, "face needs 3 corners"))?;
                    let mut fields = token.split('/');
                    let vi: i64 = fields
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "malformed face index"))?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(bad(ln, "vertex index out of range"));
                    }
                    vs[c] = (vi - 1) as u32;
                    if let Some(t) = fields.next().filter(|s| !s.is_empty()) {
                        let ti: i64 = t.parse().map_err(|_| bad(ln, "malformed uv index"))?;
                        if ti < 1 || ti as usize > vts.len() {
                            return Err(bad(ln, "uv index out of range"));
                        }
                        ts[c] = Some((ti - 1) as usize);
                    }
                }
                if parts.next().is_some() {
                    return Err(bad(ln, "only triangles are supported"));
                }
                faces.push(vs);
                if ts.iter().all(|t| t.is_some()) {
                    any_vt = true;
                    corner_uv.push([
                        vts[ts[0].unwrap()],
                        vts[ts[1].unwrap()],
                        vts[ts[2].unwrap()],
                    ]);
                } else {
                    corner_uv.push([[0.0; 2]; 3]);
                }
            }
            _ => {}
        }
    }
    if vertices.is_empty() || faces.is_empty() {
        return Err(Error::format(path.display().to_string(), "no triangles found"));
    }
    Ok(ObjMesh {
        vertices,
        faces,
        uv: if any_vt { Some(corner_uv) } else { None },
    })
}

// ---------------------------------------------------------------------------
// JSON sidecars.

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| {
        Error::format(path.display().to_string(), format!("cannot open: {e}"))
    })?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn save_camera(path: &Path, camera: &Camera) -> Result<()> {
    write_json_pretty(path, camera)
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    let cam: Camera = read_json(path)?;
    cam.validate()?;
    Ok(cam)
}

#[derive(Serialize, Deserialize)]
struct KappaJson {
    beta: Vec<f64>,
    psi: Vec<f64>,
    joint_rotations: Vec<[f64; 3]>,
    translation: [f64; 3],
}

pub fn save_kappa(path: &Path, params: &ControlParams) -> Result<()> {
    let k = KappaJson {
        beta: params.beta.clone(),
        psi: params.psi.clone(),
        joint_rotations: params
            .joint_rotations
            .iter()
            .map(|r| [r.x, r.y, r.z])
            .collect(),
        translation: [
            params.translation.x,
            params.translation.y,
            params.translation.z,
        ],
    };
    write_json_pretty(path, &k)
}

pub fn load_kappa(path: &Path) -> Result<ControlParams> {
    let k: KappaJson = read_json(path)?;
    Ok(ControlParams {
        beta: k.beta,
        psi: k.psi,
        joint_rotations: k
            .joint_rotations
            .iter()
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect(),
        translation: Vec3::new(k.translation[0], k.translation[1], k.translation[2]),
    })
}

pub fn save_landmarks(path: &Path, landmarks: &[[f64; 2]]) -> Result<()> {
    write_json_pretty(path, &landmarks)
}

pub fn load_landmarks(path: &Path) -> Result<Vec<[f64; 2]>> {
    let lms: Vec<[f64; 2]> = read_json(path)?;
    if lms.len() != NUM_LANDMARKS {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {NUM_LANDMARKS} landmarks, found {}", lms.len()),
        ));
    }
    Ok(lms)
}

// ---------------------------------------------------------------------------
// Case bundle.

/// A fitting case on disk: six-view targets plus per-view cameras, the
/// initialization parameters, semantic targets for a subset of views, and
/// an optional ground-truth mesh for metrics.
#[derive(Clone)]
pub struct CaseBundle {
    pub cameras: Vec<Camera>,
    /// Decoded normal maps (quantization centers) and their validity.
    pub normals: Vec<ImageF>,
    pub normal_valid: Vec<ImageF>,
    pub rgb: Vec<ImageF>,
    pub parsing: Vec<Option<LabelMap>>,
    pub eye_masks: Vec<Option<ImageF>>,
    pub head_masks: Vec<Option<ImageF>>,
    /// Front-view (view 0) landmarks in pixel coordinates.
    pub landmarks: Vec<[f64; 2]>,
    pub kappa: ControlParams,
    pub gt_mesh: Option<(Vec<Vec3>, Vec<[u32; 3]>)>,
}

pub fn save_case(dir: &Path, case: &CaseBundle) -> Result<()> {
    if case.cameras.len() != NUM_VIEWS || case.normals.len() != NUM_VIEWS {
        return Err(Error::invalid(format!("case bundle needs {NUM_VIEWS} views")));
    }
    fs::create_dir_all(dir.join("views"))?;
    fs::create_dir_all(dir.join("cameras"))?;
    fs::create_dir_all(dir.join("parsing"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for k in 0..NUM_VIEWS {
        save_normal_png(
            &dir.join(format!("views/normal_{k}.png")),
            &case.normals[k],
            &case.normal_valid[k],
        )?;
        save_rgb_png(&dir.join(format!("views/rgb_{k}.png")), &case.rgb[k])?;
        save_camera(&dir.join(format!("cameras/{k}.json")), &case.cameras[k])?;
        if let Some(p) = &case.parsing[k] {
            save_label_png(&dir.join(format!("parsing/{k}.png")), p)?;
        }
        if let Some(m) = &case.eye_masks[k] {
            save_mask_png(&dir.join(format!("masks/eye_{k}.png")), m)?;
        }
        if let Some(m) = &case.head_masks[k] {
            save_mask_png(&dir.join(format!("masks/head_{k}.png")), m)?;
        }
    }
    save_landmarks(&dir.join("landmarks.json"), &case.landmarks)?;
    save_kappa(&dir.join("kappa.json"), &case.kappa)?;
    if let Some((v, f)) = &case.gt_mesh {
        save_obj(&dir.join("gt_mesh.obj"), v, f, None, None)?;
    }
    Ok(())
}

pub fn load_case(dir: &Path) -> Result<CaseBundle> {
    let mut cameras = Vec::with_capacity(NUM_VIEWS);
    let mut normals = Vec::with_capacity(NUM_VIEWS);
    let mut normal_valid = Vec::with_capacity(NUM_VIEWS);
    let mut rgb = Vec::with_capacity(NUM_VIEWS);
    let mut parsing = Vec::with_capacity(NUM_VIEWS);
    let mut eye_masks = Vec::with_capacity(NUM_VIEWS);
    let mut head_masks = Vec::with_capacity(NUM_VIEWS);
    for k in 0..NUM_VIEWS {
        let normal_path = dir.join(format!("views/normal_{k}.png"));
        if !normal_path.exists() {
            return Err(Error::format(
                normal_path.display().to_string(),
                "missing required view",
            ));
        }
        let (n, v) = load_normal_png(&normal_path)?;
        normals.push(n);
        normal_valid.push(v);
        rgb.push(load_rgb_png(&dir.join(format!("views/rgb_{k}.png")))?);
        cameras.push(load_camera(&dir.join(format!("cameras/{k}.json")))?);
        let ppath = dir.join(format!("parsing/{k}.png"));
        parsing.push(if ppath.exists() {
            Some(load_label_png(&ppath)?)
        } else {
            None
        });
        let epath = dir.join(format!("masks/eye_{k}.png"));
        eye_masks.push(if epath.exists() {
            Some(load_mask_png(&epath)?)
        } else {
            None
        });
        let hpath = dir.join(format!("masks/head_{k}.png"));
        head_masks.push(if hpath.exists() {
            Some(load_mask_png(&hpath)?)
        } else {
            None
        });
    }
    let landmarks = load_landmarks(&dir.join("landmarks.json"))?;
    let kappa = load_kappa(&dir.join("kappa.json"))?;
    let gt_path = dir.join("gt_mesh.obj");
    let gt_mesh = if gt_path.exists() {
        let mesh = load_obj(&gt_path)?;
        Some((mesh.vertices, mesh.faces))
    } else {
        None
    };
    Ok(CaseBundle {
        cameras,
        normals,
        normal_valid,
        rgb,
        parsing,
        eye_masks,
        head_masks,
        landmarks,
        kappa,
        gt_mesh,
    })
}

// ---------------------------------------------------------------------------
// Fit configuration (TOML).

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    /// Optimizer steps per epoch.
    pub iters_per_epoch: usize,
    /// Topology-correction passes; epochs = passes + 1.
    pub remesh_passes: usize,
    /// Adam step size in bbox-diagonal units per step.
    pub lr: f64,
    /// Freeze face/neck-labeled vertices during epoch 1.
    #[serde(default = "default_true")]
    pub stage1_freeze: bool,
    pub seed: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            iters_per_epoch: 800,
            remesh_passes: 6,
            lr: 1e-3,
            stage1_freeze: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub rec: f64,
    pub sema: f64,
    pub lmk: f64,
    pub lap: f64,
    pub eyereg: f64,
    pub mse: [f64; NUM_VIEWS],
}

impl Default for LossSection {
    fn default() -> Self {
        let w = crate::objective::LossWeights::default();
        LossSection {
            rec: w.rec,
            sema: w.sema,
            lmk: w.lmk,
            lap: w.lap,
            eyereg: w.eyereg,
            mse: w.mse,
        }
    }
}

impl LossSection {
    pub fn to_weights(&self) -> crate::objective::LossWeights {
        crate::objective::LossWeights {
            rec: self.rec,
            sema: self.sema,
            lmk: self.lmk,
            lap: self.lap,
            eyereg: self.eyereg,
            mse: self.mse,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemeshSection {
    /// Split edges longer than this (template units).
    pub max_edge: f64,
    /// Remove faces with an edge shorter than this.
    pub min_edge: f64,
    /// Remove faces folded onto a neighbor beyond this dihedral angle.
    pub fold_angle_deg: f64,
    pub flip: bool,
    pub remove: bool,
}

impl Default for RemeshSection {
    fn default() -> Self {
        RemeshSection {
            max_edge: 5e-4,
            min_edge: 5e-5,
            fold_angle_deg: 170.0,
            flip: true,
            remove: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSection {
    /// "orthographic" or "perspective" for generated cases.
    pub kind: String,
    pub distance: f64,
    /// Fraction of the image the subject's bounding sphere fills.
    pub fill: f64,
    pub width: usize,
    pub height: usize,
    pub azimuth_base_deg: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection {
            kind: "orthographic".to_string(),
            distance: 0.05,
            fill: 0.75,
            width: 128,
            height: 128,
            azimuth_base_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EyeballSection {
    /// Angle subtended by the visible eyeball cap, degrees.
    pub epsilon_angle_deg: f64,
    pub iters: usize,
    pub lr: f64,
    pub sphericity_weight: f64,
    /// Use the uncorrected sphericity exponent form.
    pub sphericity_paper_form: bool,
    /// Mask objective for the sphere optimization:
    /// "rendered_vs_observed" (symmetric squared difference) or
    /// "cover_and_vacate" (one-sided coverage form).
    pub mask_form: String,
}

impl Default for EyeballSection {
    fn default() -> Self {
        EyeballSection {
            epsilon_angle_deg: 70.0,
            iters: 200,
            lr: 0.05,
            sphericity_weight: 0.1,
            sphericity_paper_form: false,
            mask_form: "rendered_vs_observed".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeethSection {
    pub enabled: bool,
}

impl Default for TeethSection {
    fn default() -> Self {
        TeethSection { enabled: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureSection {
    pub width: usize,
    pub height: usize,
    pub blend_exponent: f64,
    pub depth_tolerance: f64,
}

impl Default for TextureSection {
    fn default() -> Self {
        TextureSection {
            width: 1024,
            height: 1024,
            blend_exponent: 4.0,
            depth_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    /// Surface samples per mesh for chamfer and F1.
    pub chamfer_samples: usize,
    pub voxel_grid: usize,
    pub seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            chamfer_samples: 10_000,
            voxel_grid: 128,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub schedule: ScheduleSection,
    pub losses: LossSection,
    pub remesh: RemeshSection,
    pub camera: CameraSection,
    pub eyeballs: EyeballSection,
    pub teeth: TeethSection,
    pub texture: TextureSection,
    pub metrics: MetricsSection,
}

pub fn load_fit_config(path: &Path) -> Result<FitConfig> {
    let text = fs::read_to_string(path)?;
    Ok(toml::from_str(&text)?)
}

pub fn save_fit_config(path: &Path, config: &FitConfig) -> Result<()> {
    fs::write(path, toml::to_string_pretty(config)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Report log: one JSON object per line.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub epoch: usize,
    pub iter: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub lr: f64,
    pub n_verts: usize,
}

pub struct ReportWriter {
    writer: BufWriter<fs::File>,
    pub path: PathBuf,
}

impl ReportWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(ReportWriter {
            writer: BufWriter::new(fs::File::create(path)?),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &ReportRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CameraKind;
    use crate::toy;

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rigfit_io_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn assert_dirs_equal(a: &Path, b: &Path) {
        let list = |d: &Path| {
            let mut names: Vec<PathBuf> = Vec::new();
            let mut stack = vec![d.to_path_buf()];
            while let Some(cur) = stack.pop() {
                for e in fs::read_dir(&cur).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        names.push(p.strip_prefix(d).unwrap().to_path_buf());
                    }
                }
            }
            names.sort();
            names
        };
        let (la, lb) = (list(a), list(b));
        assert_eq!(la, lb, "file listings differ");
        for rel in &la {
            let (ba, bb) = (fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
            assert_eq!(ba, bb, "bytes differ for {}", rel.display());
        }
    }

    #[test]
    fn rig_container_round_trips_byte_exactly() {
        let (template, _) = toy::toy_head();
        let dir_a = tempdir("rig_a");
        let dir_b = tempdir("rig_b");
        save_rig_container(&dir_a, &template).unwrap();
        let loaded = load_rig_container(&dir_a).unwrap();
        save_rig_container(&dir_b, &loaded).unwrap();
        assert_dirs_equal(&dir_a, &dir_b);
        // Dyadic weights survive the f32 format bit-exactly.
        assert_eq!(loaded.skin_weights, template.skin_weights);
        assert_eq!(loaded.faces, template.faces);
        assert_eq!(loaded.labels, template.labels);
        assert_eq!(loaded.face_region_vertex_count, template.face_region_vertex_count);
        assert_eq!(
            loaded.landmark_symmetry.pairs.len(),
            template.landmark_symmetry.pairs.len()
        );
        // Vertices come back f32-rounded.
        for (a, b) in loaded.vertices.iter().zip(&template.vertices) {
            assert_eq!(a.x, b.x as f32 as f64);
            assert!((a - b).norm() < 1e-9);
        }
        loaded.validate().unwrap();
    }

    #[test]
    fn rig_container_rejects_truncated_buffer() {
        let (template, _) = toy::toy_head();
        let dir = tempdir("rig_trunc");
        save_rig_container(&dir, &template).unwrap();
        let buf = fs::read(dir.join("vertices.f32")).unwrap();
        fs::write(dir.join("vertices.f32"), &buf[..buf.len() - 4]).unwrap();
        assert!(load_rig_container(&dir).is_err());
    }

    #[test]
    fn normal_png_round_trips() {
        let dir = tempdir("normal");
        let (w, h) = (17, 13);
        let mut normals = ImageF::zeros(w, h, 3);
        let mut valid = ImageF::zeros(w, h, 1);
        let mut state = 11u64;
        for y in 0..h {
            for x in 0..w {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if state % 5 == 0 {
                    continue;
                }
                let a = ((state >> 16) % 1000) as f64 / 1000.0 * std::f64::consts::TAU;
                let b = ((state >> 32) % 500) as f64 / 500.0;
                let px = normals.pixel_mut(x, y);
                px[0] = b.sqrt() * a.cos();
                px[1] = b.sqrt() * a.sin();
                px[2] = (1.0 - b).sqrt();
                valid.pixel_mut(x, y)[0] = 1.0;
            }
        }
        let p1 = dir.join("n1.png");
        let p2 = dir.join("n2.png");
        save_normal_png(&p1, &normals, &valid).unwrap();
        let (dec, dec_valid) = load_normal_png(&p1).unwrap();
        save_normal_png(&p2, &dec, &dec_valid).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        for y in 0..h {
            for x in 0..w {
                assert_eq!(dec_valid.at(x, y, 0), valid.at(x, y, 0));
                if valid.at(x, y, 0) > 0.5 {
                    for c in 0..3 {
                        let err = (dec.at(x, y, c) - normals.at(x, y, c)).abs();
                        assert!(err <= 1.0 / 255.0 + 1e-12, "channel error {err}");
                    }
                }
            }
        }
    }

    #[test]
    fn mask_and_label_pngs_round_trip() {
        let dir = tempdir("masks");
        let mut mask = ImageF::zeros(9, 7, 1);
        for (i, v) in mask.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let p = dir.join("m.png");
        save_mask_png(&p, &mask).unwrap();
        let dec = load_mask_png(&p).unwrap();
        assert_eq!(dec.data, mask.data);

        let mut map = LabelMap::background(9, 7);
        for (i, v) in map.data.iter_mut().enumerate() {
            if i % 3 != 0 {
                *v = (i % 6) as u8;
            }
        }
        let lp = dir.join("l.png");
        save_label_png(&lp, &map).unwrap();
        assert_eq!(load_label_png(&lp).unwrap(), map);

        let mut rgb = ImageF::zeros(5, 4, 3);
        for (i, v) in rgb.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let rp = dir.join("c.png");
        save_rgb_png(&rp, &rgb).unwrap();
        assert_eq!(load_rgb_png(&rp).unwrap().data, rgb.data);
    }

    #[test]
    fn obj_round_trips_uv_and_exact_floats() {
        let dir = tempdir("obj");
        let (verts, faces) = toy::icosphere(1, 0.37);
        let uv: Vec<[[f64; 2]; 3]> = faces
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let t = i as f64 / faces.len() as f64;
                [[t, 1.0 - t], [t * 0.5, t], [0.25 + t / 3.0, 0.125]]
            })
            .collect();
        let p1 = dir.join("a.obj");
        save_obj(&p1, &verts, &faces, Some(&uv), None).unwrap();
        let mesh = load_obj(&p1).unwrap();
        assert_eq!(mesh.vertices.len(), verts.len());
        for (a, b) in mesh.vertices.iter().zip(&verts) {
            assert_eq!(a, b);
        }
        assert_eq!(mesh.faces, faces);
        assert_eq!(mesh.uv.as_deref().unwrap(), &uv[..]);
        let p2 = dir.join("b.obj");
        save_obj(&p2, &mesh.vertices, &mesh.faces, mesh.uv.as_deref(), None).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn camera_and_kappa_json_round_trip() {
        let dir = tempdir("json");
        let cam = Camera {
            kind: CameraKind::Orthographic,
            azimuth_deg: 45.0,
            elevation_deg: 0.0,
            distance: 0.05,
            scale_or_focal: 3456.789,
            width: 128,
            height: 128,
        };
        let cp = dir.join("cam.json");
        save_camera(&cp, &cam).unwrap();
        let cam2 = load_camera(&cp).unwrap();
        assert_eq!(cam2.scale_or_focal, cam.scale_or_focal);
        assert_eq!(cam2.azimuth_deg, cam.azimuth_deg);

        let params = ControlParams {
            beta: vec![0.1, -0.7, std::f64::consts::PI],
            psi: vec![0.25],
            joint_rotations: vec![Vec3::new(0.0, 0.1, -0.2), Vec3::zeros()],
            translation: Vec3::new(1e-9, -2.5e-3, 0.0),
        };
        let kp = dir.join("kappa.json");
        save_kappa(&kp, &params).unwrap();
        let back = load_kappa(&kp).unwrap();
        assert_eq!(back.beta, params.beta);
        assert_eq!(back.psi, params.psi);
        assert_eq!(back.joint_rotations, params.joint_rotations);
        assert_eq!(back.translation, params.translation);
        let kp2 = dir.join("kappa2.json");
        save_kappa(&kp2, &back).unwrap();
        assert_eq!(fs::read(&kp).unwrap(), fs::read(&kp2).unwrap());
    }

    #[test]
    fn case_bundle_round_trips_byte_exactly() {
        let dir_a = tempdir("case_a");
        let dir_b = tempdir("case_b");
        let (w, h) = (16, 16);
        let mut normals = Vec::new();
        let mut normal_valid = Vec::new();
        let mut rgb = Vec::new();
        let mut cameras = Vec::new();
        let mut parsing = Vec::new();
        let mut eye_masks = Vec::new();
        let mut head_masks = Vec::new();
        for k in 0..NUM_VIEWS {
            let mut n = ImageF::zeros(w, h, 3);
            let mut v = ImageF::zeros(w, h, 1);
            let mut c = ImageF::zeros(w, h, 3);
            for y in 0..h {
                for x in 0..w {
                    if (x + y + k) % 4 != 0 {
                        let px = n.pixel_mut(x, y);
                        px[0] = 0.1 * k as f64 - 0.3;
                        px[1] = 0.2;
                        px[2] = 0.9;
                        v.pixel_mut(x, y)[0] = 1.0;
                    }
                    let px = c.pixel_mut(x, y);
                    px[0] = x as f64 / w as f64;
                    px[1] = y as f64 / h as f64;
                    px[2] = 0.5;
                }
            }
            normals.push(n);
            normal_valid.push(v);
            rgb.push(c);
            cameras.push(Camera {
                kind: CameraKind::Orthographic,
                azimuth_deg: 60.0 * k as f64,
                elevation_deg: 0.0,
                distance: 0.05,
                scale_or_focal: 4000.0,
                width: w,
                height: h,
            });
            if k == 0 || k == 4 {
                let mut map = LabelMap::background(w, h);
                for (i, val) in map.data.iter_mut().enumerate() {
                    if i % 2 == 0 {
                        *val = (i % 6) as u8;
                    }
                }
                parsing.push(Some(map));
                let mut m = ImageF::zeros(w, h, 1);
                for (i, val) in m.data.iter_mut().enumerate() {
                    *val = (i % 256) as f64 / 255.0;
                }
                eye_masks.push(Some(m.clone()));
                head_masks.push(Some(m));
            } else {
                parsing.push(None);
                eye_masks.push(None);
                head_masks.push(None);
            }
        }
        let (tv, tf) = toy::icosphere(0, 0.01);
        let case = CaseBundle {
            cameras,
            normals,
            normal_valid,
            rgb,
            parsing,
            eye_masks,
            head_masks,
            landmarks: (0..NUM_LANDMARKS).map(|i| [i as f64 * 0.5, 64.0 - i as f64]).collect(),
            kappa: ControlParams {
                beta: vec![0.0; 8],
                psi: vec![0.0; 6],
                joint_rotations: vec![Vec3::zeros(); 5],
                translation: Vec3::zeros(),
            },
            gt_mesh: Some((tv, tf)),
        };
        save_case(&dir_a, &case).unwrap();
        let loaded = load_case(&dir_a).unwrap();
        save_case(&dir_b, &loaded).unwrap();
        assert_dirs_equal(&dir_a, &dir_b);
        assert_eq!(loaded.landmarks, case.landmarks);
        assert!(loaded.parsing[0].is_some() && loaded.parsing[1].is_none());
    }

    #[test]
    fn missing_view_fails_case_load() {
        let dir = tempdir("case_missing");
        fs::create_dir_all(dir.join("views")).unwrap();
        match load_case(&dir) {
            Err(Error::Format { .. }) => {}
            Err(other) => panic!("unexpected error kind: {other}"),
            Ok(_) => panic!("load succeeded on an empty case"),
        }
    }

    #[test]
    fn fit_config_defaults_and_overrides() {
        let cfg = FitConfig::default();
        assert_eq!(cfg.schedule.iters_per_epoch, 800);
        assert_eq!(cfg.schedule.remesh_passes, 6);
        assert!(cfg.schedule.stage1_freeze);
        assert_eq!(cfg.remesh.max_edge, 5e-4);
        assert_eq!(cfg.eyeballs.epsilon_angle_deg, 70.0);
        assert_eq!(cfg.losses.rec, 1.0);
        assert_eq!(cfg.losses.sema, 0.5);
        assert_eq!(cfg.losses.lmk, 0.1);
        assert_eq!(cfg.losses.lap, 10.0);
        assert_eq!(cfg.losses.mse, [1.0; NUM_VIEWS]);

        let dir = tempdir("config");
        let path = dir.join("fit.toml");
        fs::write(
            &path,
            "[schedule]\niters_per_epoch = 12\n[losses]\nrec = 2.5\n[teeth]\nenabled = false\n",
        )
        .unwrap();
        let cfg = load_fit_config(&path).unwrap();
        assert_eq!(cfg.schedule.iters_per_epoch, 12);
        assert_eq!(cfg.schedule.remesh_passes, 6);
        assert_eq!(cfg.losses.rec, 2.5);
        assert_eq!(cfg.losses.to_weights().sema, 0.5);
        assert!(!cfg.teeth.enabled);

        let out = dir.join("echo.toml");
        save_fit_config(&out, &cfg).unwrap();
        let echo = load_fit_config(&out).unwrap();
        assert_eq!(echo.schedule.iters_per_epoch, 12);
    }

    #[test]
    fn report_log_appends_and_reads() {
        let dir = tempdir("report");
        let path = dir.join("report.jsonl");
        let mut w = ReportWriter::create(&path).unwrap();
        for i in 0..5 {
            let mut terms = BTreeMap::new();
            terms.insert("normal".to_string(), 1.0 / (i + 1) as f64);
            terms.insert("laplacian".to_string(), 0.25);
            w.append(&ReportRecord {
                epoch: i / 2,
                iter: i,
                total: 2.0 / (i + 1) as f64,
                terms,
                lr: 1e-3,
                n_verts: 100 + i,
            })
            .unwrap();
        }
        let records = read_report(&path).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[4].iter, 4);
        assert!(records[0].total > records[4].total);
        assert_eq!(records[3].terms["laplacian"], 0.25);
    }
}
