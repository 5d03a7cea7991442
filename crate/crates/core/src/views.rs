//! Per-cluster visibility scoring and initial view selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSet;
use crate::error::{Error, Result};
use crate::render::{render_with, RenderOptions};
use crate::scene::{Camera, GaussianId, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Visibility,
    Volume,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visibility" => Ok(ScoreMode::Visibility),
            "volume" => Ok(ScoreMode::Volume),
            other => Err(Error::Validation(format!("unknown score mode {other:?}"))),
        }
    }
}

/// Cluster members that win the per-pixel weight argmax somewhere inside the
/// cluster's visible mask, ascending.
pub fn visible_gaussians(
    scene: &Scene,
    cluster: &[GaussianId],
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<Vec<GaussianId>> {
    let buf = render_with(scene, cam, Some(cluster), opts)?;
    let set: BTreeSet<GaussianId> = buf
        .visible_mask
        .iter()
        .zip(&buf.argmax_id)
        .filter_map(|(&m, id)| if m { *id } else { None })
        .collect();
    Ok(set.into_iter().collect())
}

fn check_cluster(cluster: &[GaussianId]) -> Result<()> {
    if cluster.is_empty() {
        Err(Error::Validation("cluster is empty".into()))
    } else {
        Ok(())
    }
}

/// `|visible| / |cluster|`.
pub fn visibility_score(scene: &Scene, cluster: &[GaussianId], cam: &Camera, opts: &RenderOptions) -> Result<f64> {
    check_cluster(cluster)?;
    let members: BTreeSet<_> = cluster.iter().copied().collect();
    let visible = visible_gaussians(scene, cluster, cam, opts)?;
    Ok(visible.len() as f64 / members.len() as f64)
}

/// Visible volume over total volume, each Gaussian weighted by `s^x s^y s^z alpha`.
pub fn volume_score(scene: &Scene, cluster: &[GaussianId], cam: &Camera, opts: &RenderOptions) -> Result<f64> {
    check_cluster(cluster)?;
    let members: BTreeSet<_> = cluster.iter().copied().collect();
    let total: f64 = members.iter().map(|&j| scene.gaussians()[j].volume()).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let visible = visible_gaussians(scene, cluster, cam, opts)?;
    let seen: f64 = visible.iter().map(|&j| scene.gaussians()[j].volume()).sum();
    Ok(seen / total)
}

/// `L x N` scores of clusters against cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub values: Vec<Vec<f64>>,
    pub cluster_ids: Vec<usize>,
    pub camera_ids: Vec<u32>,
    pub mode: ScoreMode,
}

impl ScoreMatrix {
    /// Rows of `values` index clusters `0..L`, columns the given cameras.
    pub fn new(values: Vec<Vec<f64>>, camera_ids: Vec<u32>, mode: ScoreMode) -> Result<Self> {
        if let Some(row) = values.iter().find(|r| r.len() != camera_ids.len()) {
            return Err(Error::Validation(format!(
                "score row of length {} for {} cameras",
                row.len(),
                camera_ids.len()
            )));
        }
        Ok(ScoreMatrix {
            cluster_ids: (0..values.len()).collect(),
            values,
            camera_ids,
            mode,
        })
    }

    /// `cluster_id,camera_id,score` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster_id,camera_id,score\n");
        for (l, row) in self.cluster_ids.iter().zip(&self.values) {
            for (cam, v) in self.camera_ids.iter().zip(row) {
                let _ = writeln!(out, "{l},{cam},{v}");
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores every (cluster, camera) pair over all scene cameras. Costs `L x N` renders,
/// evaluated in parallel.
pub fn build_score_matrix(
    scene: &Scene,
    clusters: &ClusterSet,
    mode: ScoreMode,
    opts: &RenderOptions,
) -> Result<ScoreMatrix> {
    if clusters.is_empty() {
        return Err(Error::Validation("no clusters to score".into()));
    }
    let cams = scene.cameras();
    if cams.is_empty() {
        return Err(Error::Validation("scene has no cameras".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..clusters.len())
        .flat_map(|l| (0..cams.len()).map(move |i| (l, i)))
        .collect();
    let flat = pairs
        .par_iter()
        .map(|&(l, i)| {
            let cluster = &clusters.clusters[l];
            match mode {
                ScoreMode::Visibility => visibility_score(scene, cluster, &cams[i], opts),
                ScoreMode::Volume => volume_score(scene, cluster, &cams[i], opts),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let values = flat.chunks(cams.len()).map(<[f64]>::to_vec).collect();
    ScoreMatrix::new(values, cams.iter().map(|c| c.id).collect(), mode)
}

/// Best camera per cluster; ties go to the lowest camera id.
pub fn select_initial_views(m: &ScoreMatrix) -> Result<Vec<u32>> {
    if m.camera_ids.is_empty() {
        return Err(Error::Validation("score matrix has no cameras".into()));
    }
    Ok(m.values
        .iter()
        .map(|row| {
            let mut best = 0;
            for i in 1..row.len() {
                let better = row[i] > row[best] || (row[i] == row[best] && m.camera_ids[i] < m.camera_ids[best]);
                if better {
                    best = i;
                }
            }
            m.camera_ids[best]
        })
        .collect())
}
