//! Deterministic CPU splatting.
//!
//! Gaussians are projected with the EWA approximation, sorted once by camera
//! depth (ties by id), binned into square tiles and alpha-composited front to
//! back. Each pixel walks its tile list in the global depth order, so the
//! result does not depend on the tiling or the number of worker threads.

use std::io::Cursor;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, Gaussian, GaussianId, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Activation threshold for the visible mask.
    pub visibility_threshold: f64,
    /// Isotropic low-pass term added to the projected covariance diagonal (px^2).
    pub dilation: f64,
    /// Footprint radius in standard deviations (Mahalanobis).
    pub footprint_sigma: f64,
    pub max_alpha: f64,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: f64,
    pub tile_size: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            visibility_threshold: 0.5,
            dilation: 0.3,
            footprint_sigma: 3.0,
            max_alpha: 0.99,
            min_transmittance: 1e-4,
            tile_size: 16,
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// EWA projection; `None` when the Gaussian is culled by the clip range or its
/// footprint covers no pixel center.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projection> {
    project_with(g, cam, &RenderOptions::default())
}

pub fn project_with(g: &Gaussian, cam: &Camera, opts: &RenderOptions) -> Option<Projection> {
    let p = cam.to_camera(&g.mean);
    let z = p.z;
    if !(z > cam.near && z < cam.far) {
        return None;
    }
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p.y / (z * z),
    );
    let t = jac * cam.rotation;
    let mut cov2d = t * g.covariance() * t.transpose();
    cov2d[(0, 0)] += opts.dilation;
    cov2d[(1, 1)] += opts.dilation;
    // symmetrise against round-off
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let proj = Projection {
        mean2d: cam.project(&p),
        cov2d,
        depth: z,
    };
    pixel_range(&proj, cam, opts.footprint_sigma)?;
    Some(proj)
}

/// Inclusive pixel index range `[x0, x1] x [y0, y1]` whose centers can lie in the footprint.
fn pixel_range(p: &Projection, cam: &Camera, sigma: f64) -> Option<[u32; 4]> {
    let ex = sigma * p.cov2d[(0, 0)].sqrt();
    let ey = sigma * p.cov2d[(1, 1)].sqrt();
    let [mx, my] = p.mean2d;
    let x0 = (mx - ex - 0.5).ceil().max(0.0);
    let y0 = (my - ey - 0.5).ceil().max(0.0);
    let x1 = (mx + ex - 0.5).floor().min(cam.width as f64 - 1.0);
    let y1 = (my + ey - 0.5).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as u32, x1 as u32, y0 as u32, y1 as u32])
}

#[derive(Debug, Clone)]
struct Splat {
    id: GaussianId,
    depth: f64,
    mean: [f64; 2],
    /// Inverse covariance `(a, b, c)` for `a dx^2 + 2 b dx dy + c dy^2`.
    conic: [f64; 3],
    range: [u32; 4],
    opacity: f64,
    color: [f64; 3],
    in_subset: bool,
}

/// Output of [`render`]; all planes are row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    /// Composited weight of the subset (all Gaussians when no subset is given).
    pub activation: Vec<f64>,
    pub visible_mask: Vec<bool>,
    pub argmax_id: Vec<Option<GaussianId>>,
    pub max_weight: Vec<f64>,
}

impl RenderBuffers {
    fn blank(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        RenderBuffers {
            width,
            height,
            color: vec![[0.0; 3]; n],
            activation: vec![0.0; n],
            visible_mask: vec![false; n],
            argmax_id: vec![None; n],
            max_weight: vec![0.0; n],
        }
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    /// 8-bit RGB PNG of the color plane.
    pub fn color_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self
            .color
            .iter()
            .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        encode_png(self.width, self.height, image::ColorType::Rgb8, &bytes)
    }

    /// 8-bit grayscale PNG of the visible mask.
    pub fn mask_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.visible_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, image::ColorType::L8, &bytes)
    }

    pub fn save_color_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.color_png()).map_err(|e| Error::io(path, e))
    }

    pub fn save_mask_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.mask_png()).map_err(|e| Error::io(path, e))
    }
}

fn encode_png(width: u32, height: u32, color: image::ColorType, bytes: &[u8]) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(&mut out, bytes, width, height, color, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail for a consistent buffer");
    out.into_inner()
}

/// Renders `scene` through `cam`. When `subset` is given, activation, max weight
/// and argmax only count subset members, while every Gaussian still attenuates
/// transmittance.
pub fn render(scene: &Scene, cam: &Camera, subset: Option<&[GaussianId]>) -> Result<RenderBuffers> {
    render_with(scene, cam, subset, &RenderOptions::default())
}

pub fn render_with(
    scene: &Scene,
    cam: &Camera,
    subset: Option<&[GaussianId]>,
    opts: &RenderOptions,
) -> Result<RenderBuffers> {
    let n = scene.len();
    let mut member = vec![subset.is_none(); n];
    if let Some(ids) = subset {
        for &id in ids {
            if id >= n {
                return Err(Error::Validation(format!(
                    "subset id {id} outside scene of {n} gaussians"
                )));
            }
            member[id] = true;
        }
    }
    let center = cam.center();
    let mut splats: Vec<Splat> = scene
        .gaussians()
        .par_iter()
        .filter_map(|g| {
            let p = project_with(g, cam, opts)?;
            let range = pixel_range(&p, cam, opts.footprint_sigma)?;
            let inv = p.cov2d.try_inverse()?;
            let dir: Vector3<f64> = g.mean - center;
            Some(Splat {
                id: g.id,
                depth: p.depth,
                mean: p.mean2d,
                conic: [inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]],
                range,
                opacity: g.opacity,
                color: g.color(&dir),
                in_subset: member[g.id],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let ts = opts.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.range;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                bins[(ty * tiles_x + tx) as usize].push(k as u32);
            }
        }
    }

    let cutoff = opts.footprint_sigma * opts.footprint_sigma;
    let tiles: Vec<(u32, u32, Vec<PixelOut>)> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t as u32 % tiles_x, t as u32 / tiles_x);
            let mut out = Vec::with_capacity((ts * ts) as usize);
            for y in ty * ts..((ty + 1) * ts).min(cam.height) {
                for x in tx * ts..((tx + 1) * ts).min(cam.width) {
                    out.push(shade_pixel(x, y, list, &splats, cutoff, opts));
                }
            }
            (tx, ty, out)
        })
        .collect();

    let mut buf = RenderBuffers::blank(cam.width, cam.height);
    for (tx, ty, pixels) in tiles {
        let mut it = pixels.into_iter();
        for y in ty * ts..((ty + 1) * ts).min(cam.height) {
            for x in tx * ts..((tx + 1) * ts).min(cam.width) {
                let px = it.next().unwrap();
                let i = buf.index(x, y);
                buf.color[i] = px.color;
                buf.activation[i] = px.activation.clamp(0.0, 1.0);
                buf.visible_mask[i] = buf.activation[i] > opts.visibility_threshold;
                buf.argmax_id[i] = px.argmax;
                buf.max_weight[i] = px.max_weight;
            }
        }
    }
    Ok(buf)
}

struct PixelOut {
    color: [f64; 3],
    activation: f64,
    max_weight: f64,
    argmax: Option<GaussianId>,
}

fn shade_pixel(x: u32, y: u32, list: &[u32], splats: &[Splat], cutoff: f64, opts: &RenderOptions) -> PixelOut {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    let mut out = PixelOut {
        color: [0.0; 3],
        activation: 0.0,
        max_weight: 0.0,
        argmax: None,
    };
    for &k in list {
        let s = &splats[k as usize];
        let [x0, x1, y0, y1] = s.range;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            continue;
        }
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let power = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        if power > cutoff {
            continue;
        }
        let alpha = (s.opacity * (-0.5 * power).exp()).min(opts.max_alpha);
        if alpha <= 0.0 {
            continue;
        }
        let w = t * alpha;
        for c in 0..3 {
            out.color[c] += w * s.color[c];
        }
        if s.in_subset {
            out.activation += w;
            if w > out.max_weight {
                out.max_weight = w;
                out.argmax = Some(s.id);
            }
        }
        t *= 1.0 - alpha;
        if t < opts.min_transmittance {
            break;
        }
    }
    out
}
