//! UV texture baking: each chart texel is traced back to its surface
//! point, every unoccluded view contributes a color weighted by how
//! squarely it sees the surface, and unseen texels are filled by chart
//! dilation. The teeth chart is reserved for a verbatim asset copy.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{self, ObjMaterial};
use crate::math::Vec3;
use crate::raster::{rasterize, Camera, CameraKind, ImageF, RasterOutput};
use crate::rig::{vertex_normals, RiggedTemplate};

#[derive(Debug, Clone)]
pub struct TexBakeConfig {
    pub width: usize,
    pub height: usize,
    /// Exponent on the facing term max(0, n·d).
    pub blend_exponent: f64,
    /// Depth slack for the per-view occlusion test, world units.
    pub depth_tolerance: f64,
}

impl Default for TexBakeConfig {
    fn default() -> Self {
        TexBakeConfig {
            width: 1024,
            height: 1024,
            blend_exponent: 4.0,
            depth_tolerance: 1e-4,
        }
    }
}

impl TexBakeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("texture dimensions must be positive"));
        }
        if !(self.blend_exponent > 0.0) {
            return Err(Error::invalid("blend exponent must be positive"));
        }
        if !(self.depth_tolerance > 0.0) {
            return Err(Error::invalid("depth tolerance must be positive"));
        }
        Ok(())
    }
}

/// Baked texture with chart coverage, per-texel validity, and the
/// normalized per-view blend weights of every view-seen texel.
#[derive(Debug, Clone)]
pub struct TextureAtlas {
    pub image: ImageF,
    /// Texel lies inside a UV chart.
    pub covered: Vec<bool>,
    /// Texel carries a usable color (seen by a view, inpainted, or merged).
    pub valid: Vec<bool>,
    /// Texel-major normalized view weights, `n_views` per texel; zero rows
    /// for texels no view reached.
    pub blend_weights: Vec<f64>,
    pub n_views: usize,
}

impl TextureAtlas {
    pub fn n_texels(&self) -> usize {
        self.image.width * self.image.height
    }

    pub fn weights_at(&self, idx: usize) -> &[f64] {
        &self.blend_weights[idx * self.n_views..(idx + 1) * self.n_views]
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BakeLog {
    /// Faces skipped for having no UV area.
    pub skipped_faces: Vec<u32>,
    pub texels_covered: usize,
    pub texels_valid: usize,
}

/// Continuous texel coordinates of a UV point; v runs bottom-up, texel
/// rows top-down, pixel centers at half-integers.
fn uv_to_texel(uv: [f64; 2], width: usize, height: usize) -> [f64; 2] {
    [uv[0] * width as f64, (1.0 - uv[1]) * height as f64]
}

struct TexelSource {
    face: i32,
    bary: [f64; 3],
    /// Minimum barycentric of the covering face; deeper coverage wins at
    /// chart seams.
    score: f64,
}

/// Rasterizes the UV charts onto the texel grid: every texel center inside
/// a face's UV triangle records that face and its barycentrics. Where
/// charts touch, the face covering the center more deeply wins.
fn rasterize_uv_charts(
    faces: &[[u32; 3]],
    uv: &[[[f64; 2]; 3]],
    width: usize,
    height: usize,
    log: &mut BakeLog,
) -> Vec<TexelSource> {
    let mut sources: Vec<TexelSource> = (0..width * height)
        .map(|_| TexelSource {
            face: -1,
            bary: [0.0; 3],
            score: f64::NEG_INFINITY,
        })
        .collect();
    for fi in 0..faces.len() {
        let t: Vec<[f64; 2]> = uv[fi]
            .iter()
            .map(|&c| uv_to_texel(c, width, height))
            .collect();
        let area = (t[1][0] - t[0][0]) * (t[2][1] - t[0][1])
            - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]);
        if area.abs() < 1e-12 {
            log.skipped_faces.push(fi as u32);
            continue;
        }
        let inv_area = 1.0 / area;
        let xs = t.iter().map(|p| p[0]);
        let ys = t.iter().map(|p| p[1]);
        let x0 = (xs.clone().fold(f64::INFINITY, f64::min) - 0.5).floor().max(0.0) as usize;
        let x1 = (xs.fold(f64::NEG_INFINITY, f64::max) + 0.5).ceil().min(width as f64) as usize;
        let y0 = (ys.clone().fold(f64::INFINITY, f64::min) - 0.5).floor().max(0.0) as usize;
        let y1 = (ys.fold(f64::NEG_INFINITY, f64::max) + 0.5).ceil().min(height as f64) as usize;
        for ty in y0..y1 {
            for tx in x0..x1 {
                let p = [tx as f64 + 0.5, ty as f64 + 0.5];
                let edge = |a: &[f64; 2], b: &[f64; 2]| {
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
                };
                let w0 = edge(&t[1], &t[2]) * inv_area;
                let w1 = edge(&t[2], &t[0]) * inv_area;
                let w2 = edge(&t[0], &t[1]) * inv_area;
                let score = w0.min(w1).min(w2);
                if score < 0.0 {
                    continue;
                }
                let slot = &mut sources[ty * width + tx];
                if score > slot.score {
                    *slot = TexelSource {
                        face: fi as i32,
                        bary: [w0, w1, w2],
                        score,
                    };
                }
            }
        }
    }
    sources
}

/// Bakes a texture atlas from the view images. Every chart texel is
/// mapped to its surface point and normal; each view where the point is
/// unoccluded (depth test against that view's render, within tolerance)
/// and forward-facing contributes its bilinear sample with weight
/// max(0, n·d)^p, d the direction toward the camera. Texels nothing
/// reaches stay invalid for inpainting.
pub fn bake(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    uv: &[[[f64; 2]; 3]],
    images: &[ImageF],
    cameras: &[Camera],
    config: &TexBakeConfig,
) -> Result<(TextureAtlas, BakeLog)> {
    config.validate()?;
    if uv.len() != faces.len() {
        return Err(Error::invalid("per-corner uv count must match face count"));
    }
    if images.is_empty() || images.len() != cameras.len() {
        return Err(Error::invalid("need one image per camera, at least one view"));
    }
    for (k, (img, cam)) in images.iter().zip(cameras).enumerate() {
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::invalid(format!("view {k}: image resolution mismatch")));
        }
        if img.channels != 3 {
            return Err(Error::invalid(format!("view {k}: expected 3 channels")));
        }
    }
    let (w, h) = (config.width, config.height);
    let mut log = BakeLog::default();
    let sources = rasterize_uv_charts(faces, uv, w, h, &mut log);
    let normals = vertex_normals(vertices, faces);
    let rasters: Vec<RasterOutput> = cameras
        .iter()
        .map(|cam| rasterize(vertices, faces, cam, true))
        .collect::<Result<_>>()?;
    let n_views = cameras.len();
    let p = config.blend_exponent;
    let tol = config.depth_tolerance;

    struct TexelOut {
        color: [f64; 3],
        weights: Vec<f64>,
        covered: bool,
        valid: bool,
    }
    let shade_row = |ty: usize| -> Vec<TexelOut> {
        let mut row = Vec::with_capacity(w);
        let mut sample = [0.0f64; 3];
        for tx in 0..w {
            let src = &sources[ty * w + tx];
            let mut out = TexelOut {
                color: [0.0; 3],
                weights: vec![0.0; n_views],
                covered: src.face >= 0,
                valid: false,
            };
            if src.face >= 0 {
                let f = faces[src.face as usize];
                let b = src.bary;
                let point: Vec3 = (0..3)
                    .map(|c| b[c] * vertices[f[c] as usize])
                    .sum();
                let normal: Vec3 = (0..3)
                    .map(|c| b[c] * normals[f[c] as usize])
                    .sum();
                let nn = normal.norm();
                if nn > 1e-12 {
                    let normal = normal / nn;
                    let mut acc = [0.0f64; 3];
                    let mut wsum = 0.0;
                    for k in 0..n_views {
                        let cam = &cameras[k];
                        let proj = cam.project_point(&point);
                        if !proj.valid {
                            continue;
                        }
                        let [px, py] = proj.pixel;
                        if px < 0.0 || py < 0.0 || px >= cam.width as f64 || py >= cam.height as f64
                        {
                            continue;
                        }
                        let zbuf = rasters[k].depth
                            [py as usize * cam.width + px as usize];
                        if proj.depth > zbuf + tol {
                            continue;
                        }
                        let d = match cam.kind {
                            CameraKind::Orthographic => cam.basis().2,
                            CameraKind::Perspective => (cam.eye() - point).normalize(),
                        };
                        let facing = normal.dot(&d);
                        if facing <= 0.0 {
                            continue;
                        }
                        let weight = facing.powf(p);
                        images[k].sample_bilinear(px, py, &mut sample);
                        for c in 0..3 {
                            acc[c] += weight * sample[c];
                        }
                        out.weights[k] = weight;
                        wsum += weight;
                    }
                    if wsum > 0.0 {
                        for c in 0..3 {
                            out.color[c] = acc[c] / wsum;
                        }
                        for wk in &mut out.weights {
                            *wk /= wsum;
                        }
                        out.valid = true;
                    } else {
                        out.weights.iter_mut().for_each(|wk| *wk = 0.0);
                    }
                }
            }
            row.push(out);
        }
        row
    };
    let rows: Vec<Vec<TexelOut>> = (0..h).into_par_iter().map(shade_row).collect();

    let mut atlas = TextureAtlas {
        image: ImageF::zeros(w, h, 3),
        covered: vec![false; w * h],
        valid: vec![false; w * h],
        blend_weights: vec![0.0; w * h * n_views],
        n_views,
    };
    for (ty, row) in rows.iter().enumerate() {
        for (tx, out) in row.iter().enumerate() {
            let idx = ty * w + tx;
            atlas.covered[idx] = out.covered;
            atlas.valid[idx] = out.valid;
            for c in 0..3 {
                atlas.image.data[idx * 3 + c] = out.color[c];
            }
            atlas.blend_weights[idx * n_views..(idx + 1) * n_views]
                .copy_from_slice(&out.weights);
        }
    }
    log.texels_covered = atlas.covered.iter().filter(|&&c| c).count();
    log.texels_valid = atlas.valid.iter().filter(|&&v| v).count();
    Ok((atlas, log))
}

/// Fills unseen chart texels by iterative dilation: each round, every
/// invalid covered texel with at least one valid 8-neighbor takes the mean
/// of those neighbors and becomes valid. Rounds are synchronous, so the
/// result is deterministic; texels outside the charts are never touched.
/// Charts with no seen texel at all cannot make progress and are left
/// invalid.
pub fn inpaint_dilate(atlas: &TextureAtlas) -> TextureAtlas {
    let mut out = atlas.clone();
    let (w, h) = (out.image.width, out.image.height);
    loop {
        let mut fills: Vec<(usize, [f64; 3])> = Vec::new();
        for ty in 0..h {
            for tx in 0..w {
                let idx = ty * w + tx;
                if !out.covered[idx] || out.valid[idx] {
                    continue;
                }
                let mut acc = [0.0f64; 3];
                let mut count = 0usize;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (tx as i64 + dx, ty as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let nidx = ny as usize * w + nx as usize;
                        if out.valid[nidx] {
                            for c in 0..3 {
                                acc[c] += out.image.data[nidx * 3 + c];
                            }
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    let inv = 1.0 / count as f64;
                    fills.push((idx, [acc[0] * inv, acc[1] * inv, acc[2] * inv]));
                }
            }
        }
        if fills.is_empty() {
            return out;
        }
        for (idx, color) in fills {
            out.valid[idx] = true;
            for c in 0..3 {
                out.image.data[idx * 3 + c] = color[c];
            }
        }
    }
}

/// Texel rectangle of a UV region `[u0, v0, u1, v1]`, top-down rows.
/// Texel rectangle `(x0, y0, x1, y1)` covered by a `[u0, v0, u1, v1]` UV
/// region, half-open in x and y.
pub fn region_rect(region: [f64; 4], width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (region[0] * width as f64).floor().max(0.0) as usize;
    let x1 = ((region[2] * width as f64).ceil() as usize).min(width);
    let y0 = ((1.0 - region[3]) * height as f64).floor().max(0.0) as usize;
    let y1 = (((1.0 - region[1]) * height as f64).ceil() as usize).min(height);
    (x0, y0, x1, y1)
}

/// Copies the teeth texture verbatim into its reserved UV region. The
/// region must be free of baked charts; any covered texel inside it is an
/// overlap error reporting both bounding boxes.
pub fn merge_teeth_texture(
    atlas: &TextureAtlas,
    teeth: &ImageF,
    region: [f64; 4],
) -> Result<TextureAtlas> {
    if !(region[0] < region[2] && region[1] < region[3]) {
        return Err(Error::invalid("teeth uv region is empty or inverted"));
    }
    let (w, h) = (atlas.image.width, atlas.image.height);
    let (x0, y0, x1, y1) = region_rect(region, w, h);
    if teeth.width != x1 - x0 || teeth.height != y1 - y0 {
        return Err(Error::invalid(format!(
            "teeth texture is {}x{}, the reserved region spans {}x{} texels",
            teeth.width,
            teeth.height,
            x1 - x0,
            y1 - y0
        )));
    }
    if teeth.channels != 3 {
        return Err(Error::invalid("teeth texture must have 3 channels"));
    }
    // Overlap check: bounding box of covered texels inside the region.
    let mut overlap: Option<(usize, usize, usize, usize)> = None;
    for ty in y0..y1 {
        for tx in x0..x1 {
            if atlas.covered[ty * w + tx] {
                let o = overlap.get_or_insert((tx, ty, tx, ty));
                o.0 = o.0.min(tx);
                o.1 = o.1.min(ty);
                o.2 = o.2.max(tx);
                o.3 = o.3.max(ty);
            }
        }
    }
    if let Some((ox0, oy0, ox1, oy1)) = overlap {
        return Err(Error::invalid(format!(
            "head charts overlap the teeth region: chart texels [{ox0},{oy0}]..[{ox1},{oy1}] \
             inside reserved [{x0},{y0}]..[{},{}]",
            x1 - 1,
            y1 - 1
        )));
    }
    let mut out = atlas.clone();
    for ty in y0..y1 {
        for tx in x0..x1 {
            let idx = ty * w + tx;
            out.covered[idx] = true;
            out.valid[idx] = true;
            for c in 0..3 {
                out.image.data[idx * 3 + c] = teeth.at(tx - x0, ty - y0, c);
            }
        }
    }
    Ok(out)
}

/// Renders the mesh with its texture: hard rasterization, per-pixel UV
/// interpolation, bilinear texture lookup. Background stays black.
pub fn textured_render(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    uv: &[[[f64; 2]; 3]],
    texture: &ImageF,
    camera: &Camera,
) -> Result<ImageF> {
    if uv.len() != faces.len() {
        return Err(Error::invalid("per-corner uv count must match face count"));
    }
    let raster = rasterize(vertices, faces, camera, true)?;
    let mut img = ImageF::zeros(camera.width, camera.height, 3);
    let mut sample = [0.0f64; 3];
    for idx in 0..camera.width * camera.height {
        let fi = raster.face[idx];
        if fi < 0 {
            continue;
        }
        let b = raster.bary[idx];
        let quad = uv[fi as usize];
        let mut u = 0.0;
        let mut v = 0.0;
        for c in 0..3 {
            u += b[c] * quad[c][0];
            v += b[c] * quad[c][1];
        }
        let t = uv_to_texel([u, v], texture.width, texture.height);
        texture.sample_bilinear(t[0], t[1], &mut sample);
        for c in 0..3 {
            img.data[idx * 3 + c] = sample[c];
        }
    }
    Ok(img)
}

/// Writes the finished avatar: OBJ with UVs referencing an MTL and the
/// texture PNG, plus the rig container so the animation data survives.
pub fn export_avatar(dir: &Path, template: &RiggedTemplate, atlas: &TextureAtlas) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::save_rgb_png(&dir.join("texture.png"), &atlas.image)?;
    let mtl = "newmtl avatar\nKd 1 1 1\nmap_Kd texture.png\n";
    std::fs::write(dir.join("avatar.mtl"), mtl)?;
    io::save_obj(
        &dir.join("avatar.obj"),
        &template.vertices,
        &template.faces,
        Some(&template.uv),
        Some(&ObjMaterial {
            mtl_file: "avatar.mtl",
            material: "avatar",
            texture_file: "texture.png",
        }),
    )?;
    io::save_rig_container(dir, template)?;
    Ok(())
}
