//! Tracklet graph, clustering objective and the greedy five-move partitioner
//! (assign / merge / split / switch / break), plus trajectory emission with
//! linear-interpolation gap fill.

use thiserror::Error;

use crate::types::{AppearanceFeature, BoundingBox, Detection, Tracklet};

/// Saturation value standing in for the infinite costs at p = 0 and p = 1 so
/// objective arithmetic stays finite; feasibility checks, not arithmetic,
/// enforce forbidden merges.
pub const COST_SENTINEL: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("partition covers {got} vertices, graph has {expected}")]
    VertexCountMismatch { expected: usize, got: usize },
    #[error("tracklets {u} and {w} overlap in time but share a cluster")]
    TimeOverlapInCluster { u: usize, w: usize },
    #[error("tracklets {u} and {w} share a cluster across a zero-connectivity edge")]
    ForbiddenEdgeInCluster { u: usize, w: usize },
    #[error("cluster containing tracklet {vertex} does not induce a connected subgraph")]
    DisconnectedCluster { vertex: usize },
}

/// Log-odds edge cost `log((1 - p) / p)`: negative for likely-same pairs,
/// saturated at the sentinel for p = 0 / p = 1.
pub fn edge_cost(p: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p));
    if p <= 0.0 {
        COST_SENTINEL
    } else if p >= 1.0 {
        -COST_SENTINEL
    } else {
        ((1.0 - p) / p).ln().clamp(-COST_SENTINEL, COST_SENTINEL)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub u: usize,
    pub w: usize,
    /// Connectivity in [0, 1]; exactly 0 marks a forbidden (overlap) pair.
    pub p: f64,
    pub cost: f64,
}

/// Undirected tracklet graph with edges gated by the time-gap threshold.
#[derive(Debug, Clone)]
pub struct TrackletGraph {
    vertices: Vec<Tracklet>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, usize)>>, // vertex -> (neighbor, edge index)
    delta_t: usize,
}

impl TrackletGraph {
    /// Scores every pair within the time gate. Overlapping pairs get p = 0
    /// without consulting the scorer. Vertex order follows the input order;
    /// edges are enumerated with u < w, so construction is deterministic.
    pub fn build(
        tracklets: Vec<Tracklet>,
        mut scorer: impl FnMut(&Tracklet, &Tracklet) -> f64,
        delta_t: usize,
    ) -> Self {
        let n = tracklets.len();
        let mut edges = Vec::new();
        let mut adjacency = vec![Vec::new(); n];
        for u in 0..n {
            for w in (u + 1)..n {
                let gap = tracklets[u].time_gap(&tracklets[w]);
                if gap > delta_t {
                    continue;
                }
                let p = if tracklets[u].time_overlap(&tracklets[w]) {
                    0.0
                } else {
                    scorer(&tracklets[u], &tracklets[w]).clamp(0.0, 1.0)
                };
                let idx = edges.len();
                edges.push(Edge {
                    u,
                    w,
                    p,
                    cost: edge_cost(p),
                });
                adjacency[u].push((w, idx));
                adjacency[w].push((u, idx));
            }
        }
        Self {
            vertices: tracklets,
            edges,
            adjacency,
            delta_t,
        }
    }

    pub fn vertices(&self) -> &[Tracklet] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn delta_t(&self) -> usize {
        self.delta_t
    }

    /// Clustering objective: sum over edges of pi * cost with pi = +1 inside
    /// a cluster and -1 across clusters, each unordered edge counted once.
    /// Errors if the partition is infeasible.
    pub fn objective(&self, part: &Partition) -> Result<f64, ClusterError> {
        self.check_feasible(part)?;
        Ok(self.objective_unchecked(part))
    }

    fn objective_unchecked(&self, part: &Partition) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let pi = if part.cluster_of[e.u] == part.cluster_of[e.w] {
                    1.0
                } else {
                    -1.0
                };
                pi * e.cost
            })
            .sum()
    }

    /// Validates the feasibility rules: one cluster per vertex, no time
    /// overlap inside a cluster, no zero-connectivity edge inside a cluster,
    /// and every cluster inducing a connected subgraph.
    pub fn check_feasible(&self, part: &Partition) -> Result<(), ClusterError> {
        if part.cluster_of.len() != self.vertices.len() {
            return Err(ClusterError::VertexCountMismatch {
                expected: self.vertices.len(),
                got: part.cluster_of.len(),
            });
        }
        for members in part.clusters().iter() {
            self.check_cluster(members)?;
        }
        Ok(())
    }

    fn check_cluster(&self, members: &[usize]) -> Result<(), ClusterError> {
        for (i, &u) in members.iter().enumerate() {
            for &w in &members[i + 1..] {
                if self.vertices[u].time_overlap(&self.vertices[w]) {
                    return Err(ClusterError::TimeOverlapInCluster { u, w });
                }
            }
        }
        for &u in members {
            for &(w, eidx) in &self.adjacency[u] {
                if u < w && members.contains(&w) && self.edges[eidx].p == 0.0 {
                    return Err(ClusterError::ForbiddenEdgeInCluster { u, w });
                }
            }
        }
        if !self.cluster_connected(members) {
            return Err(ClusterError::DisconnectedCluster { vertex: members[0] });
        }
        Ok(())
    }

    /// BFS over non-forbidden edges restricted to the member set.
    fn cluster_connected(&self, members: &[usize]) -> bool {
        if members.len() <= 1 {
            return true;
        }
        let mut seen = vec![false; self.vertices.len()];
        let mut in_set = vec![false; self.vertices.len()];
        for &v in members {
            in_set[v] = true;
        }
        let mut queue = vec![members[0]];
        seen[members[0]] = true;
        let mut count = 1;
        while let Some(v) = queue.pop() {
            for &(w, eidx) in &self.adjacency[v] {
                if in_set[w] && !seen[w] && self.edges[eidx].p > 0.0 {
                    seen[w] = true;
                    count += 1;
                    queue.push(w);
                }
            }
        }
        count == members.len()
    }

    /// Greedy descent from all-singletons over the five move families,
    /// applying the feasible move with the largest strict objective decrease
    /// each round until none improves. Deterministic: ties are resolved by
    /// move-family order (assign, merge, split, switch, break) and then by
    /// the enumeration order, which scans lowest ids first. The `_seed` is
    /// accepted for interface stability; the search itself has no random
    /// component.
    pub fn cluster(&self, _seed: u64) -> Partition {
        let n = self.vertices.len();
        let mut part = Partition::singletons(n);
        if n == 0 {
            return part;
        }
        loop {
            let best = self.best_move(&part);
            match best {
                Some((delta, changes)) if delta < -1e-9 => {
                    for (v, c) in changes {
                        part.cluster_of[v] = c;
                    }
                    part.normalize();
                }
                _ => break,
            }
        }
        part
    }

    /// Enumerates all candidate moves for the round, returning the winning
    /// (delta, changes) pair. Changes are (vertex, new cluster label) with
    /// labels >= n_clusters meaning fresh clusters.
    fn best_move(&self, part: &Partition) -> Option<(f64, Vec<(usize, usize)>)> {
        let clusters = part.clusters();
        let n_clusters = clusters.len();
        let fresh = n_clusters;
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;

        let consider =
            |cand: Vec<(usize, usize)>, best: &mut Option<(f64, Vec<(usize, usize)>)>| {
                if cand.iter().all(|&(v, c)| part.cluster_of[v] == c) {
                    return;
                }
                if !self.move_feasible(part, &cand) {
                    return;
                }
                let delta = self.move_delta(part, &cand);
                match best {
                    Some((d, _)) if delta >= *d - 1e-12 => {}
                    _ => *best = Some((delta, cand)),
                }
            };

        // Assign: move one vertex to a neighboring cluster or a fresh singleton.
        for v in 0..self.vertices.len() {
            let cur = part.cluster_of[v];
            let mut targets: Vec<usize> = self.adjacency[v]
                .iter()
                .map(|&(w, _)| part.cluster_of[w])
                .filter(|&c| c != cur)
                .collect();
            targets.sort_unstable();
            targets.dedup();
            if clusters[cur].len() > 1 {
                targets.push(fresh);
            }
            for c in targets {
                consider(vec![(v, c)], &mut best);
            }
        }

        // Merge: union two clusters connected by at least one edge.
        for (a, b) in self.cluster_pairs(part, true) {
            let cand: Vec<_> = clusters[b].iter().map(|&v| (v, a)).collect();
            consider(cand, &mut best);
        }

        // Split: cut one cluster in two at a time boundary.
        for members in clusters.iter() {
            if members.len() < 2 {
                continue;
            }
            let ordered = self.by_start_frame(members);
            for cut in 1..ordered.len() {
                let cand: Vec<_> = ordered[cut..].iter().map(|&v| (v, fresh)).collect();
                consider(cand, &mut best);
            }
        }

        // Switch: exchange the tails (tracklets starting at or after a pivot
        // frame) of two clusters.
        for (a, b) in self.cluster_pairs(part, self.vertices.len() > 200) {
            let mut pivots: Vec<usize> = clusters[a]
                .iter()
                .chain(clusters[b].iter())
                .map(|&v| self.vertices[v].start_frame())
                .collect();
            pivots.sort_unstable();
            pivots.dedup();
            for &s in &pivots {
                let mut cand = Vec::new();
                for &v in &clusters[a] {
                    if self.vertices[v].start_frame() >= s {
                        cand.push((v, b));
                    }
                }
                for &v in &clusters[b] {
                    if self.vertices[v].start_frame() >= s {
                        cand.push((v, a));
                    }
                }
                if cand.is_empty() || cand.len() == clusters[a].len() + clusters[b].len() {
                    continue; // no-op or plain relabeling
                }
                consider(cand, &mut best);
            }
        }

        // Break: dissolve a cluster into singletons.
        for members in clusters.iter() {
            if members.len() < 2 {
                continue;
            }
            let cand: Vec<_> = members
                .iter()
                .enumerate()
                .map(|(i, &v)| (v, fresh + i))
                .collect();
            consider(cand, &mut best);
        }

        best
    }

    /// Cluster id pairs (a < b), optionally restricted to pairs connected by
    /// at least one graph edge.
    fn cluster_pairs(&self, part: &Partition, edge_adjacent_only: bool) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        if edge_adjacent_only {
            for e in &self.edges {
                let (a, b) = (part.cluster_of[e.u], part.cluster_of[e.w]);
                if a != b {
                    pairs.push((a.min(b), a.max(b)));
                }
            }
            pairs.sort_unstable();
            pairs.dedup();
        } else {
            let k = part.n_clusters;
            for a in 0..k {
                for b in (a + 1)..k {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    fn by_start_frame(&self, members: &[usize]) -> Vec<usize> {
        let mut ordered = members.to_vec();
        ordered.sort_by_key(|&v| (self.vertices[v].start_frame(), v));
        ordered
    }

    /// Objective change if the listed vertices move to their new labels.
    /// Only edges incident to a moved vertex can flip sign.
    fn move_delta(&self, part: &Partition, changes: &[(usize, usize)]) -> f64 {
        let new_of = |v: usize| {
            changes
                .iter()
                .find(|&&(cv, _)| cv == v)
                .map(|&(_, c)| c)
                .unwrap_or(part.cluster_of[v])
        };
        let mut edge_ids: Vec<usize> = changes
            .iter()
            .flat_map(|&(v, _)| self.adjacency[v].iter().map(|&(_, e)| e))
            .collect();
        edge_ids.sort_unstable();
        edge_ids.dedup();
        let mut delta = 0.0;
        for eid in edge_ids {
            let e = &self.edges[eid];
            let old_same = part.cluster_of[e.u] == part.cluster_of[e.w];
            let new_same = new_of(e.u) == new_of(e.w);
            if old_same != new_same {
                delta += if new_same { 2.0 * e.cost } else { -2.0 * e.cost };
            }
        }
        delta
    }

    /// Checks only the clusters whose membership changes.
    fn move_feasible(&self, part: &Partition, changes: &[(usize, usize)]) -> bool {
        let new_of = |v: usize| {
            changes
                .iter()
                .find(|&&(cv, _)| cv == v)
                .map(|&(_, c)| c)
                .unwrap_or(part.cluster_of[v])
        };
        let mut affected: Vec<usize> = changes
            .iter()
            .flat_map(|&(v, c)| [part.cluster_of[v], c])
            .collect();
        affected.sort_unstable();
        affected.dedup();
        for &cid in &affected {
            let members: Vec<usize> = (0..self.vertices.len())
                .filter(|&v| new_of(v) == cid)
                .collect();
            if members.is_empty() {
                continue;
            }
            if self.check_cluster(&members).is_err() {
                return false;
            }
        }
        true
    }
}

/// Assignment of graph vertices to cluster labels 0..n_clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    cluster_of: Vec<usize>,
    n_clusters: usize,
}

impl Partition {
    pub fn singletons(n: usize) -> Self {
        Self {
            cluster_of: (0..n).collect(),
            n_clusters: n,
        }
    }

    /// Builds from an arbitrary label vector (labels need not be dense).
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let mut p = Self {
            cluster_of: labels,
            n_clusters: 0,
        };
        p.normalize();
        p
    }

    pub fn cluster_of(&self, vertex: usize) -> usize {
        self.cluster_of[vertex]
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_of.is_empty()
    }

    /// Member lists indexed by cluster label, members ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (v, &c) in self.cluster_of.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    /// Relabels clusters densely, ordered by their lowest vertex id.
    fn normalize(&mut self) {
        let mut map = std::collections::BTreeMap::new();
        let mut next = 0usize;
        let mut relabeled = Vec::with_capacity(self.cluster_of.len());
        for &c in &self.cluster_of {
            let label = *map.entry(c).or_insert_with(|| {
                let l = next;
                next += 1;
                l
            });
            relabeled.push(label);
        }
        self.cluster_of = relabeled;
        self.n_clusters = next;
    }
}

/// One tracked object: time-ordered detections, possibly gap-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub object_id: i64,
    pub entries: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub detection: Detection,
    pub interpolated: bool,
}

impl Trajectory {
    pub fn start_frame(&self) -> usize {
        self.entries[0].detection.frame
    }

    pub fn end_frame(&self) -> usize {
        self.entries[self.entries.len() - 1].detection.frame
    }
}

/// Concatenates each cluster's tracklets by time and fills inter-tracklet
/// frame gaps with linearly interpolated boxes. Interpolated entries carry
/// the nearest real feature and confidence 0; there is no extrapolation
/// beyond the first/last real detection. Object ids are assigned 1-based in
/// order of first frame, then leftmost first-detection center.
pub fn emit_trajectories(part: &Partition, tracklets: &[Tracklet]) -> Vec<Trajectory> {
    let mut groups: Vec<Vec<&Tracklet>> = vec![Vec::new(); part.n_clusters()];
    for (v, t) in tracklets.iter().enumerate() {
        groups[part.cluster_of(v)].push(t);
    }
    for g in &mut groups {
        g.sort_by_key(|t| t.start_frame());
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by(|a, b| {
        let ka = (a[0].start_frame(), a[0].first().bbox.cx);
        let kb = (b[0].start_frame(), b[0].first().bbox.cx);
        ka.partial_cmp(&kb).unwrap()
    });

    let mut out = Vec::with_capacity(groups.len());
    for (i, group) in groups.iter().enumerate() {
        let mut entries: Vec<TrajectoryEntry> = Vec::new();
        for t in group {
            if let Some(prev) = entries.last().cloned() {
                let prev_det = &prev.detection;
                let next_det = t.first();
                let (e, s) = (prev_det.frame, next_det.frame);
                debug_assert!(s > e, "cluster members must not overlap in time");
                for frame in (e + 1)..s {
                    let alpha = (frame - e) as f64 / (s - e) as f64;
                    let lerp = |a: f64, b: f64| a + alpha * (b - a);
                    let bbox = BoundingBox {
                        cx: lerp(prev_det.bbox.cx, next_det.bbox.cx),
                        cy: lerp(prev_det.bbox.cy, next_det.bbox.cy),
                        w: lerp(prev_det.bbox.w, next_det.bbox.w),
                        h: lerp(prev_det.bbox.h, next_det.bbox.h),
                    };
                    let feature = if alpha <= 0.5 {
                        prev_det.feature.clone()
                    } else {
                        next_det.feature.clone()
                    };
                    entries.push(TrajectoryEntry {
                        detection: Detection {
                            frame,
                            bbox,
                            confidence: 0.0,
                            feature,
                        },
                        interpolated: true,
                    });
                }
            }
            for d in t.detections() {
                entries.push(TrajectoryEntry {
                    detection: d.clone(),
                    interpolated: false,
                });
            }
        }
        out.push(Trajectory {
            object_id: (i + 1) as i64,
            entries,
        });
    }
    out
}

/// Appearance-only connectivity baseline: each tracklet's mean feature is
/// shifted by its minimum and normalized to sum one, and the Bhattacharyya
/// coefficient of the two resulting distributions is returned. A flat
/// (zero-range) mean feature is uninformative and scores 0.5.
pub fn bhattacharyya_scorer(u: &Tracklet, w: &Tracklet) -> f64 {
    fn to_distribution(f: &AppearanceFeature) -> Option<Vec<f64>> {
        let min = f.0.iter().cloned().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = f.0.iter().map(|v| v - min).collect();
        let sum: f64 = shifted.iter().sum();
        if sum <= 1e-12 {
            return None;
        }
        Some(shifted.into_iter().map(|v| v / sum).collect())
    }
    let (mu, mw) = (u.mean_feature(), w.mean_feature());
    match (to_distribution(&mu), to_distribution(&mw)) {
        (Some(p), Some(q)) => p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a * b).sqrt())
            .sum::<f64>()
            .clamp(0.0, 1.0),
        _ => 0.5,
    }
}
