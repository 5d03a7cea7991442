//! Referring segmentation and its metrics: frustum filtering, ground-truth
//! distillation from labelled point clouds, volume-weighted IoU, Acc@k and LLM-Match.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway};
use crate::ply::{self, Column};
use crate::prompts::{Prompts, REPROMPT_GRADE};
use crate::scene::{Camera, CameraRecord, GaussianId, Scene};

/// Activated ids whose means project inside the image with `near < depth < far`.
pub fn frustum_filter(scene: &Scene, activated: &[GaussianId], pose: &Camera) -> Result<Vec<GaussianId>> {
    pose.validate()?;
    let (w, h) = (pose.width as f64, pose.height as f64);
    let mut out: Vec<GaussianId> = activated
        .iter()
        .copied()
        .filter(|&j| {
            let p = pose.to_camera(&scene.gaussians()[j].mean);
            if !(p.z > pose.near && p.z < pose.far) {
                return false;
            }
            let [u, v] = pose.project(&p);
            (0.0..w).contains(&u) && (0.0..h).contains(&v)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Distilled,
    File,
}

/// Optional instance id per Gaussian.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLabeling {
    pub labels: Vec<Option<u32>>,
    pub source: LabelSource,
}

impl InstanceLabeling {
    pub fn members(&self, instance: u32) -> Vec<GaussianId> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(instance))
            .map(|(j, _)| j)
            .collect()
    }

    pub fn instances(&self) -> BTreeSet<u32> {
        self.labels.iter().flatten().copied().collect()
    }

    pub fn load(path: &Path, scene: &Scene) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lab: InstanceLabeling = serde_json::from_str(&text)?;
        if lab.labels.len() != scene.len() {
            return Err(Error::Validation(format!(
                "{} instance labels for {} gaussians",
                lab.labels.len(),
                scene.len()
            )));
        }
        lab.source = LabelSource::File;
        Ok(lab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Ground-truth point with an instance id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    pub instance: u32,
}

/// Reads `x, y, z, instance` vertices; points with a negative instance are skipped.
pub fn read_gt_points(path: &Path) -> Result<Vec<LabeledPoint>> {
    let table = ply::read_element_file(path, "vertex")?;
    let (x, y, z) = (table.require("x")?, table.require("y")?, table.require("z")?);
    let inst = table.require("instance")?;
    Ok((0..x.len())
        .filter(|&i| inst[i] >= 0.0)
        .map(|i| LabeledPoint {
            position: Vector3::new(x[i], y[i], z[i]),
            instance: inst[i] as u32,
        })
        .collect())
}

pub fn write_gt_points(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let f = |k: usize| points.iter().map(|p| p.position[k] as f32).collect();
    ply::write_vertices_file(
        path,
        &[
            Column::F32("x", f(0)),
            Column::F32("y", f(1)),
            Column::F32("z", f(2)),
            Column::I32("instance", points.iter().map(|p| p.instance as i32).collect()),
        ],
    )
}

/// Regularised inverse covariance `R diag(1 / (s^2 + 1e-8)) R^T`.
pub fn precision_matrix(scene: &Scene, j: GaussianId) -> Matrix3<f64> {
    let g = &scene.gaussians()[j];
    let r = g.rotation_matrix();
    let d = Matrix3::from_diagonal(&g.scale.map(|s| 1.0 / (s * s + 1e-8)));
    r * d * r.transpose()
}

/// Labels each Gaussian with the instance that cast most votes for it, where every
/// point votes for its Mahalanobis-nearest Gaussian. Vote ties go to the lower instance id.
pub fn distill_gt(points: &[LabeledPoint], scene: &Scene) -> Result<InstanceLabeling> {
    if points.is_empty() {
        return Err(Error::Validation("ground-truth point cloud is empty".into()));
    }
    if scene.is_empty() {
        return Err(Error::Validation("scene has no gaussians".into()));
    }
    let precisions: Vec<Matrix3<f64>> = (0..scene.len()).map(|j| precision_matrix(scene, j)).collect();
    let nearest: Vec<GaussianId> = points
        .par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, g) in scene.gaussians().iter().enumerate() {
                let d = p.position - g.mean;
                let m = d.dot(&(precisions[j] * d));
                if m < best.0 {
                    best = (m, j);
                }
            }
            best.1
        })
        .collect();
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); scene.len()];
    for (p, &j) in points.iter().zip(&nearest) {
        *votes[j].entry(p.instance).or_default() += 1;
    }
    let labels = votes
        .iter()
        .map(|v| {
            let mut best: Option<(u32, usize)> = None;
            for (&inst, &count) in v {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((inst, count));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    Ok(InstanceLabeling {
        labels,
        source: LabelSource::Distilled,
    })
}

/// Linearly interpolated percentile (`q` in `[0, 100]`), the numpy default.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Volumes divided by their 90th percentile and clipped to `[0, 1]`.
pub fn normalized_volume(scene: &Scene) -> Result<Vec<f64>> {
    if scene.is_empty() {
        return Err(Error::Validation("scene has no gaussians".into()));
    }
    let vols: Vec<f64> = scene.gaussians().iter().map(|g| g.volume()).collect();
    let v90 = percentile(&vols, 90.0);
    if v90 <= 0.0 {
        log::warn!("90th-percentile gaussian volume is zero; all weights set to 0");
        return Ok(vec![0.0; vols.len()]);
    }
    Ok(vols.iter().map(|v| (v / v90).clamp(0.0, 1.0)).collect())
}

/// Weighted IoU of two id sets; an empty union gives 0.
pub fn miou_3d(pred: &[GaussianId], gt: &[GaussianId], weights: &[f64]) -> Result<f64> {
    let a: BTreeSet<_> = pred.iter().copied().collect();
    let b: BTreeSet<_> = gt.iter().copied().collect();
    if let Some(&bad) = a.union(&b).find(|&&j| j >= weights.len()) {
        return Err(Error::Validation(format!("id {bad} has no weight")));
    }
    let inter: f64 = a.intersection(&b).map(|&j| weights[j]).sum();
    let union: f64 = a.union(&b).map(|&j| weights[j]).sum();
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Percentage of IoUs strictly above `k_percent / 100`.
pub fn acc_at_k(ious: &[f64], k_percent: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Validation("no IoU values".into()));
    }
    let hits = ious.iter().filter(|&&v| v > k_percent / 100.0).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub score: f64,
    pub grade: Option<u8>,
    /// True when the judge never produced a usable grade.
    pub flagged: bool,
}

fn parse_grade(reply: &str) -> Option<u8> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .find(|t| !t.is_empty())
        .and_then(|t| t.parse().ok())
        .filter(|g| (1..=5).contains(g))
}

/// Judge grade `g` in 1..=5 mapped to `100 (g - 1) / 4`.
pub fn llm_match(
    gateway: &Gateway,
    prompts: &Prompts,
    predicted: &str,
    ground_truth: &str,
    question: &str,
) -> Result<MatchScore> {
    let mut req = ChatRequest::text(
        prompts.system(),
        prompts.llm_match(question, ground_truth, predicted),
        &gateway.tags().judge,
    );
    let mut grade = parse_grade(&gateway.chat(&req)?.text);
    if grade.is_none() {
        req.content_text.push_str(REPROMPT_GRADE);
        grade = parse_grade(&gateway.chat(&req)?.text);
    }
    Ok(match grade {
        Some(g) => MatchScore {
            score: 100.0 * (g as f64 - 1.0) / 4.0,
            grade: Some(g),
            flagged: false,
        },
        None => {
            log::warn!("judge gave no usable grade for {question:?}; scored 0");
            MatchScore {
                score: 0.0,
                grade: None,
                flagged: true,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub predicted: Vec<GaussianId>,
    pub answer_camera: CameraRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}
