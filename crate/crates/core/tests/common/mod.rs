//! Independent reference implementations and random scene generators.
//!
//! Nothing here calls into the renderer, the metric code or the clustering code
//! of the library; only plain data types are shared.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splatscope::scene::{Camera, Gaussian, Scene};
use splatscope::synthetic::look_at;

pub const SH_C0: f64 = 0.28209479177387814;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_quaternion(r: &mut impl Rng) -> Quaternion<f64> {
    loop {
        let q = Quaternion::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return q / n;
        }
    }
}

/// Random anisotropic, rotated Gaussian with a flat color (degree-0 SH).
pub fn random_gaussian(r: &mut impl Rng, id: usize, center: [f64; 3], spread: f64) -> Gaussian {
    let rgb: [f64; 3] = [r.random(), r.random(), r.random()];
    Gaussian {
        id,
        mean: Vector3::new(
            center[0] + r.random_range(-spread..spread),
            center[1] + r.random_range(-spread..spread),
            center[2] + r.random_range(-spread..spread),
        ),
        scale: Vector3::new(
            r.random_range(0.02..0.4),
            r.random_range(0.02..0.4),
            r.random_range(0.02..0.4),
        ),
        rotation: random_unit_quaternion(r),
        opacity: r.random_range(0.05..1.0),
        sh: vec![rgb.map(|c| (c - 0.5) / SH_C0)],
        category: None,
        embedding: None,
    }
}

/// Scene of `n` Gaussians around the origin and `cams` cameras on a ring looking at it.
pub fn random_scene(seed: u64, n: usize, cams: usize, size: u32) -> Scene {
    let mut r = rng(seed);
    let gs = (0..n).map(|i| random_gaussian(&mut r, i, [0.0; 3], 1.2)).collect();
    let cameras = (0..cams)
        .map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + r.random_range(0.0..0.5)) / cams as f64;
            let h = r.random_range(-1.0..2.0);
            look_at(
                k as u32,
                [4.0 * a.cos(), 4.0 * a.sin(), h],
                [0.0, 0.0, 0.0],
                size,
                size,
                60.0,
            )
        })
        .collect();
    Scene::new(gs, cameras, vec![]).unwrap()
}

fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let r = quat_to_matrix(&g.rotation);
    let s = Matrix3::from_diagonal(&g.scale);
    let m = r * s;
    m * m.transpose()
}

/// Screen-space footprint of one Gaussian as seen by a naive per-pixel renderer.
pub struct Footprint {
    pub id: usize,
    pub depth: f64,
    pub u: f64,
    pub v: f64,
    /// Inverse of the 2D covariance: `[[a, b], [b, c]]`.
    pub inv: [f64; 3],
    pub opacity: f64,
    pub rgb: [f64; 3],
}

pub fn footprint(g: &Gaussian, cam: &Camera) -> Option<Footprint> {
    let p = cam.rotation * g.mean + cam.translation;
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let (x, y, z) = (p.x, p.y, p.z);
    // d(u, v) / d(world) = J R
    let j = nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let m = j * cam.rotation;
    let c = m * covariance(g) * m.transpose();
    let (a, b, d) = (c[(0, 0)] + 0.3, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + 0.3);
    let det = a * d - b * b;
    if det <= 0.0 {
        return None;
    }
    let rgb = g.sh[0].map(|k| (SH_C0 * k + 0.5).clamp(0.0, 1.0));
    Some(Footprint {
        id: g.id,
        depth: z,
        u: cam.fx * x / z + cam.cx,
        v: cam.fy * y / z + cam.cy,
        inv: [d / det, -b / det, a / det],
        opacity: g.opacity,
        rgb,
    })
}

/// `(id, alpha)` of every Gaussian covering pixel `(px, py)` in front-to-back order.
pub fn pixel_alphas(fps: &[Footprint], px: u32, py: u32) -> Vec<(usize, f64, [f64; 3])> {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut hits: Vec<(f64, usize, f64, [f64; 3])> = fps
        .iter()
        .filter_map(|f| {
            let (dx, dy) = (x - f.u, y - f.v);
            let power = f.inv[0] * dx * dx + 2.0 * f.inv[1] * dx * dy + f.inv[2] * dy * dy;
            if power > 9.0 {
                return None;
            }
            let alpha = (f.opacity * (-0.5 * power).exp()).min(0.99);
            Some((f.depth, f.id, alpha, f.rgb))
        })
        .collect();
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.into_iter().map(|(_, id, a, c)| (id, a, c)).collect()
}

/// Naive full-sort compositing of every pixel without early termination.
pub fn oracle_color(scene: &Scene, cam: &Camera) -> Vec<[f64; 3]> {
    let fps: Vec<Footprint> = scene.gaussians().iter().filter_map(|g| footprint(g, cam)).collect();
    let mut out = Vec::with_capacity((cam.width * cam.height) as usize);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (_, a, rgb) in pixel_alphas(&fps, px, py) {
                for k in 0..3 {
                    c[k] += t * a * rgb[k];
                }
                t *= 1.0 - a;
            }
            out.push(c);
        }
    }
    out
}

/// Per-pixel max-weight enumeration: the cluster members that hold the largest
/// weight among members at a pixel whose member weight sum exceeds 0.5.
/// Compositing stops once transmittance drops below `1e-4`.
pub fn oracle_visible(scene: &Scene, cluster: &[usize], cam: &Camera) -> BTreeSet<usize> {
    let members: BTreeSet<usize> = cluster.iter().copied().collect();
    let fps: Vec<Footprint> = scene.gaussians().iter().filter_map(|g| footprint(g, cam)).collect();
    let mut visible = BTreeSet::new();
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut t = 1.0;
            let mut sum = 0.0;
            let mut best: Option<(f64, usize)> = None;
            for (id, a, _) in pixel_alphas(&fps, px, py) {
                let w = t * a;
                if members.contains(&id) {
                    sum += w;
                    if best.is_none_or(|(bw, _)| w > bw) {
                        best = Some((w, id));
                    }
                }
                t *= 1.0 - a;
                if t < 1e-4 {
                    break;
                }
            }
            if sum.min(1.0) > 0.5 {
                visible.insert(best.unwrap().1);
            }
        }
    }
    visible
}

/// Point-in-frustum test against six world-space planes.
pub fn in_frustum_planes(cam: &Camera, p: &Vector3<f64>) -> bool {
    let c = cam.center();
    let rt = cam.rotation.transpose();
    // world directions through the image corners (depth 1)
    let ray = |u: f64, v: f64| rt * Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    let (w, h) = (cam.width as f64, cam.height as f64);
    let tl = ray(0.0, 0.0);
    let tr = ray(w, 0.0);
    let bl = ray(0.0, h);
    let br = ray(w, h);
    let fwd = cam.forward_axis();
    let d = p - c;
    // side-plane normals oriented towards the optical axis
    let inward = |n: Vector3<f64>| if n.dot(&fwd) < 0.0 { -n } else { n };
    let left = inward(bl.cross(&tl));
    let right = inward(tr.cross(&br));
    let top = inward(tl.cross(&tr));
    let bottom = inward(br.cross(&bl));
    let depth = d.dot(&fwd);
    left.dot(&d) >= 0.0
        && top.dot(&d) >= 0.0
        && right.dot(&d) > 0.0
        && bottom.dot(&d) > 0.0
        && depth > cam.near
        && depth < cam.far
}

/// Index of the Gaussian with the smallest Mahalanobis distance, using an explicit
/// matrix inverse of `Sigma + 1e-8 I`.
pub fn nearest_mahalanobis(scene: &Scene, p: &Vector3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for g in scene.gaussians() {
        let inv = (covariance(g) + Matrix3::identity() * 1e-8).try_inverse().unwrap();
        let d = p - g.mean;
        let m = (d.transpose() * inv * d)[(0, 0)].sqrt();
        if m < best.0 {
            best = (m, g.id);
        }
    }
    best.1
}

/// Exhaustive distillation: nearest-Gaussian votes, then per-Gaussian majority
/// with ties broken towards the lower instance id.
pub fn oracle_distill(scene: &Scene, points: &[(Vector3<f64>, u32)]) -> Vec<Option<u32>> {
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); scene.len()];
    for (p, inst) in points {
        *votes[nearest_mahalanobis(scene, p)].entry(*inst).or_default() += 1;
    }
    votes
        .into_iter()
        .map(|v| {
            let max = v.values().copied().max()?;
            v.into_iter().find(|(_, c)| *c == max).map(|(i, _)| i)
        })
        .collect()
}

/// Percentile from the sorted order statistics with linear interpolation.
pub fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let frac = rank - below;
    let i = below as usize;
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Partition by single linkage at `eps`: connected components of the graph
/// joining points closer than `eps`. Components are sorted member lists, ordered by first member.
pub fn single_linkage(points: &[[f64; 3]], eps: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut comp = vec![usize::MAX; n];
    let mut out = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![s];
        comp[s] = id;
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for b in 0..n {
                if comp[b] == usize::MAX {
                    let d: f64 = (0..3)
                        .map(|k| (points[a][k] - points[b][k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if d < eps {
                        comp[b] = id;
                        members.push(b);
                        stack.push(b);
                    }
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Standard normal sample.
pub fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Gaussian-distributed blob of `n` points.
pub fn normal_blob(r: &mut impl Rng, center: [f64; 3], n: usize, sigma: f64) -> Vec<[f64; 3]> {
    (0..n).map(|_| center.map(|c| c + sigma * normal(r))).collect()
}

/// Scene of isotropic Gaussians at the given positions.
pub fn point_scene(points: &[[f64; 3]]) -> Scene {
    let gs = points
        .iter()
        .enumerate()
        .map(|(i, p)| splatscope::synthetic::gaussian(i, *p, 0.05, 0.8, [0.5; 3]))
        .collect();
    Scene::new(gs, vec![], vec![]).unwrap()
}

/// Canonical form of a partition expressed over arbitrary keys.
pub fn canonical<T: Ord + Clone>(parts: &[Vec<T>]) -> BTreeSet<BTreeSet<T>> {
    parts.iter().map(|p| p.iter().cloned().collect()).collect()
}
