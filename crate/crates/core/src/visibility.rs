//! Hidden point removal per viewpoint and the leaf-level co-visibility graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::EPSILON_RANGE;
use crate::hull::{convex_hull, Hull};
use crate::pointcloud::PointCloud;
use crate::voxel::VoxelMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HprParams {
    pub gamma: f64,
    pub max_range: f64,
}

impl Default for HprParams {
    fn default() -> Self {
        Self {
            gamma: 3.5,
            max_range: 60.0,
        }
    }
}

/// Hull tolerance relative to the extent of the flipped set.
pub const HULL_RELATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibleSet {
    pub frame: usize,
    /// Sorted, deduplicated point indices.
    pub points: Vec<u32>,
    /// Leaf id → number of visible points in that leaf.
    pub leaf_histogram: BTreeMap<u32, u32>,
}

impl VisibleSet {
    pub fn new(frame: usize, mut points: Vec<u32>, map: &VoxelMap) -> Self {
        points.sort_unstable();
        points.dedup();
        let leaves = map.point_leaves();
        let mut leaf_histogram = BTreeMap::new();
        for &p in &points {
            *leaf_histogram.entry(leaves[p as usize]).or_insert(0) += 1;
        }
        Self {
            frame,
            points,
            leaf_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, point: u32) -> bool {
        self.points.binary_search(&point).is_ok()
    }
}

/// Points within `max_range` of `viewpoint` that survive the spherical-flip
/// hull test.
pub fn hidden_point_removal(
    cloud: &PointCloud,
    map: &VoxelMap,
    viewpoint: &Vector3<f64>,
    params: &HprParams,
    frame: usize,
) -> Result<VisibleSet> {
    if !viewpoint.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidParameter("viewpoint must be finite".into()));
    }
    if !(params.gamma > 0.0) || !(params.max_range > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma and max_range must be positive, got {} and {}",
            params.gamma, params.max_range
        )));
    }

    let mut candidates: Vec<u32> = Vec::new();
    let mut rel: Vec<Vector3<f64>> = Vec::new();
    for root in &map.roots {
        if root.distance_to(viewpoint) > params.max_range {
            continue;
        }
        for leaf in &map.leaves[root.leaves.start as usize..root.leaves.end as usize] {
            for &i in &leaf.points {
                let pc = cloud.positions[i as usize] - viewpoint;
                let r = pc.norm();
                if r <= params.max_range && r > EPSILON_RANGE {
                    candidates.push(i);
                    rel.push(pc);
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptyVisibility {
            max_range: params.max_range,
        });
    }

    let max_r = rel.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let rf = 10f64.powf(params.gamma) * max_r;
    let mut flipped: Vec<Vector3<f64>> = rel
        .iter()
        .map(|p| {
            let r = p.norm();
            p + p * (2.0 * (rf - r) / r)
        })
        .collect();
    flipped.push(Vector3::zeros());

    let tol = HULL_RELATIVE_TOLERANCE * 2.0 * rf;
    let visible = match convex_hull(&flipped, tol) {
        Hull::Degenerate => candidates,
        Hull::Polytope { on_hull, .. } => candidates
            .iter()
            .zip(&on_hull)
            .filter(|(_, &h)| h)
            .map(|(&i, _)| i)
            .collect(),
    };
    Ok(VisibleSet::new(frame, visible, map))
}

/// Runs [`hidden_point_removal`] for every viewpoint; frame ids are positions
/// in `viewpoints`.
pub fn visible_sets(
    cloud: &PointCloud,
    map: &VoxelMap,
    viewpoints: &[Vector3<f64>],
    params: &HprParams,
) -> Result<Vec<VisibleSet>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        viewpoints
            .par_iter()
            .enumerate()
            .map(|(i, v)| hidden_point_removal(cloud, map, v, params, i))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        viewpoints
            .iter()
            .enumerate()
            .map(|(i, v)| hidden_point_removal(cloud, map, v, params, i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovisMode {
    /// Leaf-sharing edges with neighbour augmentation.
    Graph,
    /// Plain intersection of the raw visible sets.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CovisEdge {
    pub a: usize,
    pub b: usize,
    pub shared: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoVisGraph {
    pub frames: Vec<usize>,
    pub edges: Vec<CovisEdge>,
    /// Augmented visible set per frame, sorted.
    pub augmented: Vec<Vec<u32>>,
    /// Co-visible subset per frame, sorted.
    pub covisible: Vec<Vec<u32>>,
}

fn union_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn intersect_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Visible points of `a` and `b` that sit in leaves occupied by both.
fn shared_count(a: &VisibleSet, b: &VisibleSet) -> usize {
    let (small, large) = if a.leaf_histogram.len() <= b.leaf_histogram.len() {
        (a, b)
    } else {
        (b, a)
    };
    small
        .leaf_histogram
        .iter()
        .filter_map(|(leaf, &n)| large.leaf_histogram.get(leaf).map(|&m| (n + m) as usize))
        .sum()
}

pub fn build_covis_graph(
    sets: &[VisibleSet],
    threshold_fraction: f64,
    map: &VoxelMap,
    mode: CovisMode,
) -> Result<CoVisGraph> {
    if sets.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "co-visibility needs at least 2 frames, got {}",
            sets.len()
        )));
    }
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold_fraction must lie in (0, 1], got {threshold_fraction}"
        )));
    }
    match mode {
        CovisMode::Graph => Ok(graph_covis(sets, threshold_fraction, map)),
        CovisMode::Naive => Ok(naive_covis(sets)),
    }
}

fn graph_covis(sets: &[VisibleSet], threshold_fraction: f64, map: &VoxelMap) -> CoVisGraph {
    let n = sets.len();
    let leaves = map.point_leaves();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let shared = shared_count(&sets[i], &sets[j]);
            let limit = threshold_fraction * sets[i].len().min(sets[j].len()) as f64;
            if shared as f64 > limit {
                edges.push(CovisEdge { a: i, b: j, shared });
            }
        }
    }

    // Transfer neighbour-visible points lying in leaves this frame occupies.
    let mut augmented: Vec<Vec<u32>> = sets.iter().map(|s| s.points.clone()).collect();
    for e in &edges {
        for (me, other) in [(e.a, e.b), (e.b, e.a)] {
            let own = &sets[me].leaf_histogram;
            let extra: Vec<u32> = sets[other]
                .points
                .iter()
                .copied()
                .filter(|&p| own.contains_key(&leaves[p as usize]))
                .collect();
            augmented[me] = union_sorted(&augmented[me], &extra);
        }
    }

    let mut covisible = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<u32> = Vec::new();
        for e in &edges {
            let j = if e.a == i {
                e.b
            } else if e.b == i {
                e.a
            } else {
                continue;
            };
            others = union_sorted(&others, &augmented[j]);
        }
        covisible.push(intersect_sorted(&augmented[i], &others));
    }

    CoVisGraph {
        frames: sets.iter().map(|s| s.frame).collect(),
        edges,
        augmented,
        covisible,
    }
}

fn naive_covis(sets: &[VisibleSet]) -> CoVisGraph {
    let n = sets.len();
    let mut edges = Vec::new();
    let mut covisible: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let common = intersect_sorted(&sets[i].points, &sets[j].points);
            if !common.is_empty() {
                edges.push(CovisEdge {
                    a: i,
                    b: j,
                    shared: common.len(),
                });
                covisible[i].extend(&common);
                covisible[j].extend(&common);
            }
        }
    }
    CoVisGraph {
        frames: sets.iter().map(|s| s.frame).collect(),
        edges,
        augmented: sets.iter().map(|s| s.points.clone()).collect(),
        covisible: covisible.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

impl CoVisGraph {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge(i, j).is_some()
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&CovisEdge> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.iter().find(|e| e.a == a && e.b == b)
    }

    /// Size of the union of all co-visible sets.
    pub fn covisible_point_count(&self) -> usize {
        self.covisible
            .iter()
            .fold(Vec::new(), |acc, s| union_sorted(&acc, s))
            .len()
    }

    /// Co-visible sets in the debug dump format.
    pub fn dump_covisible(&self) -> String {
        dump_index_lists(
            self.frames
                .iter()
                .copied()
                .zip(self.covisible.iter().map(Vec::as_slice)),
        )
    }
}

fn dump_index_lists<'a>(rows: impl Iterator<Item = (usize, &'a [u32])>) -> String {
    let mut out = String::new();
    for (frame, idx) in rows {
        write!(out, "{frame}").unwrap();
        for i in idx {
            write!(out, " {i}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One line per frame: the frame id followed by its sorted point indices.
pub fn dump_visible_sets(sets: &[VisibleSet]) -> String {
    dump_index_lists(sets.iter().map(|s| (s.frame, s.points.as_slice())))
}

pub fn parse_visible_dump(text: &str) -> Result<Vec<(usize, Vec<u32>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut it = line.split_whitespace().map(str::parse::<u64>);
            let bad = || Error::parse("visibility dump", format!("line {}", n + 1), "expected integers");
            let frame = it.next().unwrap().map_err(|_| bad())? as usize;
            let idx = it
                .map(|v| v.map(|v| v as u32).map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok((frame, idx))
        })
        .collect()
}
