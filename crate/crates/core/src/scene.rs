//! Immutable Gaussian scenes, camera registries and their on-disk layouts.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ply::{self, Column};

pub type GaussianId = usize;

/// One splat. Decoded values: positive scales, opacity in `[0, 1]`, unit quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub id: GaussianId,
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion, `(w, x, y, z)`.
    pub rotation: Quaternion<f64>,
    pub opacity: f64,
    /// Spherical-harmonics coefficients, `(d + 1)^2` RGB triples.
    pub sh: Vec<[f64; 3]>,
    pub category: Option<usize>,
    pub embedding: Option<Vec<f32>>,
}

impl Gaussian {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::new_unchecked(self.rotation)
            .to_rotation_matrix()
            .into_inner()
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    /// `s^x s^y s^z alpha`.
    pub fn volume(&self) -> f64 {
        self.scale.x * self.scale.y * self.scale.z * self.opacity
    }

    /// RGB color seen along `dir` (from the camera towards the mean), clamped to `[0, 1]`.
    pub fn color(&self, dir: &Vector3<f64>) -> [f64; 3] {
        let rgb = crate::sh::eval(&self.sh, dir);
        rgb.map(|c| (c + 0.5).clamp(0.0, 1.0))
    }
}

/// Pinhole camera with a world-to-camera extrinsic (`x_cam = R x_world + t`).
///
/// Camera space follows the usual vision convention: +x right, +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) {
            return Err(Error::Validation(format!(
                "camera {}: rotation is not a proper orthonormal matrix (orthogonality residual {ortho:.3e}, det {det})",
                self.id
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Validation(format!("camera {}: empty image size", self.id)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation(format!(
                "camera {}: need 0 < near < far, got near={} far={}",
                self.id, self.near, self.far
            )));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation(format!(
                "camera {}: bad intrinsics or translation",
                self.id
            )));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera +x axis expressed in world coordinates.
    pub fn right_axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    /// Optical axis (+z) expressed in world coordinates.
    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Same orientation and intrinsics, moved to a new center.
    pub fn with_center(&self, center: &Vector3<f64>) -> Camera {
        Camera {
            translation: -(self.rotation * center),
            ..self.clone()
        }
    }

    /// Pixel coordinates of a camera-space point (pixel `(i, j)` covers `[i, i+1) x [j, j+1)`).
    pub fn project(&self, p_cam: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        CameraRecord {
            id: c.id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [c.translation.x, c.translation.y, c.translation.z],
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let cam = Camera {
            id: r.id,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            rotation: Matrix3::from_row_slice(&r.r),
            translation: Vector3::from(r.t),
            near: r.near,
            far: r.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub fn parse_cameras(json: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(json)?;
    records.into_iter().map(Camera::try_from).collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text)
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    let text = serde_json::to_string_pretty(&records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Validated, immutable collection of Gaussians, cameras and category vocabulary.
#[derive(Debug, Clone)]
pub struct Scene {
    gaussians: Vec<Gaussian>,
    cameras: Vec<Camera>,
    vocab: Vec<String>,
    bounds: Aabb,
    sh_degree: usize,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, cameras: Vec<Camera>, vocab: Vec<String>) -> Result<Scene> {
        let sh_len = gaussians.first().map(|g| g.sh.len()).unwrap_or(1);
        let sh_degree = match sh_len {
            1 => 0,
            4 => 1,
            9 => 2,
            16 => 3,
            n => return Err(Error::Validation(format!("unsupported SH coefficient count {n}"))),
        };
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        let mut embed_dim = None;
        for (i, g) in gaussians.iter().enumerate() {
            if g.id != i {
                return Err(Error::Validation(format!("gaussian at index {i} carries id {}", g.id)));
            }
            let finite = g.mean.iter().chain(g.scale.iter()).all(|v| v.is_finite())
                && g.rotation.coords.iter().all(|v| v.is_finite())
                && g.opacity.is_finite()
                && g.sh.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("gaussian {i}: non-finite value")));
            }
            if g.scale.iter().any(|&s| s <= 0.0) {
                return Err(Error::Validation(format!("gaussian {i}: non-positive scale")));
            }
            if !(0.0..=1.0).contains(&g.opacity) {
                return Err(Error::Validation(format!(
                    "gaussian {i}: opacity {} outside [0,1]",
                    g.opacity
                )));
            }
            if (g.rotation.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("gaussian {i}: quaternion is not unit")));
            }
            if g.sh.len() != sh_len {
                return Err(Error::Validation(format!("gaussian {i}: inconsistent SH degree")));
            }
            if let Some(c) = g.category {
                if c >= vocab.len() {
                    return Err(Error::Validation(format!(
                        "gaussian {i}: category {c} outside vocabulary of {}",
                        vocab.len()
                    )));
                }
            }
            if let Some(e) = &g.embedding {
                if *embed_dim.get_or_insert(e.len()) != e.len() {
                    return Err(Error::Validation(format!("gaussian {i}: embedding dimension differs")));
                }
                let norm = e.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::Validation(format!("gaussian {i}: embedding is not unit-norm")));
                }
            }
            min = min.inf(&g.mean);
            max = max.sup(&g.mean);
        }
        if gaussians.is_empty() {
            min = Vector3::zeros();
            max = Vector3::zeros();
        }
        let mut seen = HashSet::new();
        for c in &cameras {
            c.validate()?;
            if !seen.insert(c.id) {
                return Err(Error::Validation(format!("duplicate camera id {}", c.id)));
            }
        }
        Ok(Scene {
            gaussians,
            cameras,
            vocab,
            bounds: Aabb { min, max },
            sh_degree,
        })
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussian(&self, id: GaussianId) -> Option<&Gaussian> {
        self.gaussians.get(id)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn has_categories(&self) -> bool {
        self.gaussians.iter().any(|g| g.category.is_some())
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.gaussians
            .iter()
            .find_map(|g| g.embedding.as_ref().map(|e| e.len()))
    }

    /// Fresh scene with a replaced vocabulary (labels must still index it).
    pub fn with_vocab(&self, vocab: Vec<String>) -> Result<Scene> {
        Scene::new(self.gaussians.clone(), self.cameras.clone(), vocab)
    }

    pub fn with_cameras(&self, cameras: Vec<Camera>) -> Result<Scene> {
        Scene::new(self.gaussians.clone(), cameras, self.vocab.clone())
    }

    pub(crate) fn into_parts(self) -> (Vec<Gaussian>, Vec<Camera>, Vec<String>) {
        (self.gaussians, self.cameras, self.vocab)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

fn rest_count(degree: usize) -> usize {
    3 * ((degree + 1) * (degree + 1) - 1)
}

/// Decodes Gaussians from the standard splatting PLY layout (`x,y,z`, `f_dc_*`,
/// `f_rest_*`, logit `opacity`, log `scale_*`, unnormalised `rot_*`).
pub fn gaussians_from_ply(table: &ply::PlyTable) -> Result<Vec<Gaussian>> {
    let col = |n: &str| table.require(n);
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let (d0, d1, d2) = (col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?);
    let opacity = col("opacity")?;
    let (s0, s1, s2) = (col("scale_0")?, col("scale_1")?, col("scale_2")?);
    let (r0, r1, r2, r3) = (col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?);

    let n_rest = table
        .property_names()
        .iter()
        .filter(|n| n.starts_with("f_rest_"))
        .count();
    let degree = (0..=3).find(|&d| rest_count(d) == n_rest).ok_or_else(|| {
        Error::Format(format!(
            "{n_rest} f_rest_* properties do not match an SH degree in 0..=3"
        ))
    })?;
    let per_channel = rest_count(degree) / 3;
    let rest: Vec<&[f64]> = (0..n_rest)
        .map(|i| table.require(&format!("f_rest_{i}")))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(table.count);
    for j in 0..table.count {
        let raw = [
            x[j], y[j], z[j], d0[j], d1[j], d2[j], s0[j], s1[j], s2[j], r0[j], r1[j], r2[j], r3[j], opacity[j],
        ];
        if raw.iter().chain(rest.iter().map(|c| &c[j])).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("gaussian {j}: non-finite value")));
        }
        let q = Quaternion::new(r0[j], r1[j], r2[j], r3[j]);
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(Error::Validation(format!("gaussian {j}: zero-length quaternion")));
        }
        let scale = Vector3::new(s0[j].exp(), s1[j].exp(), s2[j].exp());
        if scale.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Validation(format!("gaussian {j}: scale underflow/overflow")));
        }
        let mut sh = vec![[d0[j], d1[j], d2[j]]];
        for k in 0..per_channel {
            sh.push([rest[k][j], rest[per_channel + k][j], rest[2 * per_channel + k][j]]);
        }
        out.push(Gaussian {
            id: j,
            mean: Vector3::new(x[j], y[j], z[j]),
            scale,
            rotation: q / norm,
            opacity: sigmoid(opacity[j]),
            sh,
            category: None,
            embedding: None,
        });
    }
    Ok(out)
}

/// Loads a Gaussian PLY and a camera registry into a validated [`Scene`].
pub fn load_scene(scene_path: &Path, camera_path: &Path) -> Result<Scene> {
    let table = ply::read_element_file(scene_path, "vertex")?;
    let gaussians = gaussians_from_ply(&table)?;
    let cameras = load_cameras(camera_path)?;
    Scene::new(gaussians, cameras, Vec::new())
}

/// Writes the Gaussians of `scene` in the PLY layout read by [`load_scene`].
pub fn save_gaussians(path: &Path, scene: &Scene) -> Result<()> {
    let gs = scene.gaussians();
    let f = |get: &dyn Fn(&Gaussian) -> f64| gs.iter().map(|g| get(g) as f32).collect::<Vec<f32>>();
    let mut columns = vec![
        Column::F32("x", f(&|g| g.mean.x)),
        Column::F32("y", f(&|g| g.mean.y)),
        Column::F32("z", f(&|g| g.mean.z)),
        Column::F32("f_dc_0", f(&|g| g.sh[0][0])),
        Column::F32("f_dc_1", f(&|g| g.sh[0][1])),
        Column::F32("f_dc_2", f(&|g| g.sh[0][2])),
    ];
    let per_channel = rest_count(scene.sh_degree()) / 3;
    let names: Vec<String> = (0..3 * per_channel).map(|i| format!("f_rest_{i}")).collect();
    for (i, name) in names.iter().enumerate() {
        let (channel, k) = (i / per_channel, i % per_channel);
        columns.push(Column::F32(name, f(&|g| g.sh[k + 1][channel])));
    }
    columns.extend([
        Column::F32("opacity", f(&|g| logit(g.opacity))),
        Column::F32("scale_0", f(&|g| g.scale.x.ln())),
        Column::F32("scale_1", f(&|g| g.scale.y.ln())),
        Column::F32("scale_2", f(&|g| g.scale.z.ln())),
        Column::F32("rot_0", f(&|g| g.rotation.w)),
        Column::F32("rot_1", f(&|g| g.rotation.i)),
        Column::F32("rot_2", f(&|g| g.rotation.j)),
        Column::F32("rot_3", f(&|g| g.rotation.k)),
    ]);
    ply::write_vertices_file(path, &columns)
}
