//! Instance clustering of activated Gaussians: HDBSCAN over the means,
//! followed by a transitive merge of clusters with close centroids.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GaussianId, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    #[default]
    Category,
    Similarity,
}

/// Disjoint instance clusters. Members are ascending and clusters are ordered by their smallest id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<GaussianId>>,
    pub source: ActivationSource,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Mean of member means.
    pub fn centroid(&self, scene: &Scene, l: usize) -> Vector3<f64> {
        centroid(scene, &self.clusters[l])
    }
}

pub(crate) fn centroid(scene: &Scene, ids: &[GaussianId]) -> Vector3<f64> {
    let sum: Vector3<f64> = ids.iter().map(|&j| scene.gaussians()[j].mean).sum();
    sum / ids.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// Minimum cluster size `m_c`.
    pub min_cluster_size: usize,
    /// Neighbour count for core distances `m_s` (the point itself counts).
    pub min_samples: usize,
    /// Clusters whose centroids are closer than this are merged.
    pub merge_eps: f64,
}

impl ClusterParams {
    /// `m_c = 10`, `m_s = 5`, `eps = 0.05 x` the scene-bounds diagonal.
    pub fn for_scene(scene: &Scene) -> Self {
        ClusterParams {
            min_cluster_size: 10,
            min_samples: 5,
            merge_eps: 0.05 * scene.bounds().diagonal(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(Error::Validation("min cluster size must be at least 2".into()));
        }
        if self.min_samples < 1 {
            return Err(Error::Validation("min samples must be at least 1".into()));
        }
        if !(self.merge_eps >= 0.0 && self.merge_eps.is_finite()) {
            return Err(Error::Validation(format!(
                "merge eps {} is not a finite non-negative number",
                self.merge_eps
            )));
        }
        Ok(())
    }
}

/// Clusters the activated Gaussians. Noise is discarded; an all-noise or too-small
/// input yields an empty set.
pub fn cluster_gaussians(
    scene: &Scene,
    activated: &[GaussianId],
    params: &ClusterParams,
    source: ActivationSource,
) -> Result<ClusterSet> {
    params.validate()?;
    let mut ids = activated.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.iter().find(|&&j| j >= scene.len()) {
        return Err(Error::Validation(format!(
            "activated id {bad} outside scene of {}",
            scene.len()
        )));
    }
    let points: Vec<[f64; 3]> = ids.iter().map(|&j| scene.gaussians()[j].mean.into()).collect();
    let labels = hdbscan(&points, params.min_cluster_size, params.min_samples);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups[*l].push(i);
        }
    }
    let merged = merge_close(&points, groups, params.merge_eps);
    let mut clusters: Vec<Vec<GaussianId>> = merged
        .into_iter()
        .map(|g| g.into_iter().map(|i| ids[i]).collect::<Vec<_>>())
        .collect();
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(ClusterSet { clusters, source })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Links the roots; the smaller index becomes the root.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Unions groups whose centroids are closer than `eps`, transitively.
fn merge_close(points: &[[f64; 3]], groups: Vec<Vec<usize>>, eps: f64) -> Vec<Vec<usize>> {
    let centroids: Vec<[f64; 3]> = groups
        .iter()
        .map(|g| {
            let mut c = [0.0; 3];
            for &i in g {
                for k in 0..3 {
                    c[k] += points[i][k];
                }
            }
            c.map(|v| v / g.len() as f64)
        })
        .collect();
    let mut uf = UnionFind::new(groups.len());
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            if dist(&centroids[a], &centroids[b]) < eps {
                uf.union(a, b);
            }
        }
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    for (g, members) in groups.into_iter().enumerate() {
        let r = uf.find(g);
        out[r].extend(members);
    }
    out.retain(|g| !g.is_empty());
    out
}

/// HDBSCAN cluster labels (`None` = noise) with excess-of-mass selection.
///
/// The root may be selected, so a single dense blob forms one cluster; points
/// that detach from a selected root at less than half its peak density are noise.
/// Runs in `O(n^2)` time and `O(n)` extra memory.
pub fn hdbscan(points: &[[f64; 3]], min_cluster_size: usize, min_samples: usize) -> Vec<Option<usize>> {
    let n = points.len();
    if n < min_cluster_size.max(2) {
        return vec![None; n];
    }

    let k = min_samples.clamp(1, n) - 1;
    let core: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = points.iter().map(|q| dist(&points[i], q)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k, f64::total_cmp);
            *kth
        })
        .collect();

    // Prim's algorithm on the dense mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = dist(&points[current], &points[j]).max(core[current]).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                from[j] = current;
            }
            if best[j] < next_d || next == usize::MAX {
                next_d = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next].min(next), from[next].max(next), next_d));
        current = next;
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    // Single-linkage dendrogram: node ids n.. are merges. Components joining at the
    // same distance become one n-ary node, so tied MST edges cannot change its shape.
    let mut uf = UnionFind::new(n);
    let mut node_of_root: Vec<usize> = (0..n).collect();
    let mut children: Vec<Vec<usize>> = Vec::new();
    let mut merge_dist: Vec<f64> = Vec::new();
    let mut size = vec![1usize; n];
    for group in edges.chunk_by(|a, b| a.2 == b.2) {
        let d = group[0].2;
        let roots: Vec<(usize, usize)> = group.iter().map(|&(a, b, _)| (uf.find(a), uf.find(b))).collect();
        let mut touched: Vec<usize> = roots.iter().flat_map(|&(a, b)| [a, b]).collect();
        touched.sort_unstable();
        touched.dedup();
        let old_nodes: Vec<usize> = touched.iter().map(|&r| node_of_root[r]).collect();
        for &(a, b) in &roots {
            uf.union(a, b);
        }
        let mut joined: Vec<(usize, usize)> = touched
            .iter()
            .zip(&old_nodes)
            .map(|(&r, &nd)| (uf.find(r), nd))
            .collect();
        joined.sort_unstable();
        for parts in joined.chunk_by(|a, b| a.0 == b.0) {
            let node = n + children.len();
            children.push(parts.iter().map(|&(_, nd)| nd).collect());
            merge_dist.push(d);
            size.push(parts.iter().map(|&(_, nd)| size[nd]).sum());
            node_of_root[parts[0].0] = node;
        }
    }
    let top = n + children.len() - 1;

    // Condensed tree. Cluster 0 is the root.
    let lambda = |d: f64| 1.0 / d.max(1e-12);
    let mut cluster_parent: Vec<Option<usize>> = vec![None];
    let mut cluster_birth: Vec<f64> = vec![0.0];
    let mut cluster_size: Vec<usize> = vec![n];
    let mut point_exit: Vec<(usize, f64)> = vec![(0, 0.0); n];
    let mut stack = vec![(top, 0usize)];
    let leaves = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut st = vec![node];
        while let Some(x) = st.pop() {
            if x < n {
                out.push(x);
            } else {
                st.extend(&children[x - n]);
            }
        }
        out
    };
    while let Some((node, label)) = stack.pop() {
        if node < n {
            // a cluster shrank to a single point without splitting further
            point_exit[node] = (label, f64::INFINITY);
            continue;
        }
        let lam = lambda(merge_dist[node - n]);
        let (big, small): (Vec<usize>, Vec<usize>) =
            children[node - n].iter().partition(|&&c| size[c] >= min_cluster_size);
        for p in small.iter().flat_map(|&c| leaves(c)) {
            point_exit[p] = (label, lam);
        }
        match big[..] {
            [] => {}
            [keep] => stack.push((keep, label)),
            _ => {
                for child in big {
                    let c = cluster_parent.len();
                    cluster_parent.push(Some(label));
                    cluster_birth.push(lam);
                    cluster_size.push(size[child]);
                    stack.push((child, c));
                }
            }
        }
    }
    let n_clusters = cluster_parent.len();

    // Stability: sum over members of (lambda_exit - lambda_birth); child clusters exit at their birth.
    // Terms are summed in sorted order so the result does not depend on point order.
    let mut death = vec![f64::NEG_INFINITY; n_clusters];
    for &(c, lam) in &point_exit {
        if lam.is_finite() {
            death[c] = death[c].max(lam);
        }
    }
    let mut terms: Vec<Vec<f64>> = vec![Vec::new(); n_clusters];
    for &(c, lam) in &point_exit {
        let lam = if lam.is_finite() {
            lam
        } else {
            death[c].max(cluster_birth[c])
        };
        terms[c].push(lam - cluster_birth[c]);
    }
    for c in 1..n_clusters {
        let p = cluster_parent[c].expect("non-root cluster has a parent");
        terms[p].push(cluster_size[c] as f64 * (cluster_birth[c] - cluster_birth[p]));
    }
    let stability: Vec<f64> = terms.into_iter().map(sorted_sum).collect();

    // Excess-of-mass selection, children before parents (children have larger ids).
    let mut selected = vec![false; n_clusters];
    let mut child_ids: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for c in 1..n_clusters {
        child_ids[cluster_parent[c].unwrap()].push(c);
    }
    let mut best_stability = stability.clone();
    for c in (0..n_clusters).rev() {
        if child_ids[c].is_empty() {
            selected[c] = true;
            continue;
        }
        let subtree = sorted_sum(child_ids[c].iter().map(|&ch| best_stability[ch]).collect());
        if stability[c] >= subtree {
            selected[c] = true;
            let mut st = child_ids[c].clone();
            while let Some(x) = st.pop() {
                selected[x] = false;
                st.extend(child_ids[x].iter().copied());
            }
        } else {
            best_stability[c] = subtree;
        }
    }

    // Each point joins the selected cluster on its path to the root, if any.
    let mut label_of = vec![None; n_clusters];
    let mut next = 0;
    for c in 0..n_clusters {
        if selected[c] {
            label_of[c] = Some(next);
            next += 1;
        }
    }
    let owner = |mut c: usize| -> Option<usize> {
        loop {
            if selected[c] {
                return label_of[c];
            }
            c = cluster_parent[c]?;
        }
    };
    // Points leaving a selected root far below its densest level are outliers.
    let root_floor = if selected[0] {
        let max = point_exit
            .iter()
            .filter(|&&(c, l)| c == 0 && l.is_finite())
            .map(|&(_, l)| l)
            .fold(0.0, f64::max);
        ROOT_OUTLIER_RATIO * max
    } else {
        0.0
    };
    point_exit
        .iter()
        .map(|&(c, lam)| if c == 0 && lam < root_floor { None } else { owner(c) })
        .collect()
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.into_iter().sum()
}

/// A point that detaches from a selected root cluster at a density level below
/// this fraction of the root's densest drop-out is labelled noise.
const ROOT_OUTLIER_RATIO: f64 = 0.5;
