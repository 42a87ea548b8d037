//! Adaptive voxelization: root cells on a sparse hash grid, recursively
//! split by octant until each leaf holds a near-planar patch.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelParams {
    pub root_size: f64,
    pub min_voxel_size: f64,
    pub plane_ratio_max: f64,
    pub min_points: usize,
}

impl Default for VoxelParams {
    fn default() -> Self {
        Self {
            root_size: 4.0,
            min_voxel_size: 0.25,
            plane_ratio_max: 0.05,
            min_points: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelLeaf {
    pub id: u32,
    pub points: Vec<u32>,
    pub centroid: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// λ_min / λ_max of the scatter matrix.
    pub planarity: f64,
    pub origin: Vector3<f64>,
    pub edge: f64,
    /// Index of the owning root cell in [`VoxelMap::roots`].
    pub root: u32,
}

impl VoxelLeaf {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.origin[k] && p[k] < self.origin[k] + self.edge)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RootCell {
    pub key: [i64; 3],
    pub origin: Vector3<f64>,
    pub edge: f64,
    /// Leaf ids of this cell, consecutive.
    pub leaves: std::ops::Range<u32>,
}

impl RootCell {
    /// Distance from `p` to the nearest point of the cube.
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let lo = self.origin[k];
            let hi = lo + self.edge;
            let d = if p[k] < lo {
                lo - p[k]
            } else if p[k] > hi {
                p[k] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub params: VoxelParams,
    /// Occupied root cells sorted by key.
    pub roots: Vec<RootCell>,
    pub leaves: Vec<VoxelLeaf>,
    point_leaf: Vec<u32>,
    root_index: HashMap<[i64; 3], u32>,
}

impl VoxelMap {
    pub fn leaf_of(&self, point_index: usize) -> Result<u32> {
        self.point_leaf.get(point_index).copied().ok_or(Error::IndexOutOfRange {
            index: point_index,
            len: self.point_leaf.len(),
        })
    }

    /// Point → leaf map, parallel to the cloud.
    pub fn point_leaves(&self) -> &[u32] {
        &self.point_leaf
    }

    pub fn root_at(&self, key: &[i64; 3]) -> Option<&RootCell> {
        self.root_index.get(key).map(|&i| &self.roots[i as usize])
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

pub fn build_voxel_map(cloud: &PointCloud, params: &VoxelParams) -> Result<VoxelMap> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(params.min_voxel_size > 0.0) || params.root_size < params.min_voxel_size {
        return Err(Error::InvalidParameter(format!(
            "need root_size ({}) >= min_voxel_size ({}) > 0",
            params.root_size, params.min_voxel_size
        )));
    }
    let pts = &cloud.positions;
    let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        let key = [0, 1, 2].map(|k| (p[k] / params.root_size).floor() as i64);
        buckets.entry(key).or_default().push(i as u32);
    }
    let mut cells: Vec<([i64; 3], Vec<u32>)> = buckets.into_iter().collect();
    cells.sort_unstable_by_key(|c| c.0);

    let split = |(key, idx): &([i64; 3], Vec<u32>)| {
        let origin = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * params.root_size;
        let mut out = Vec::new();
        subdivide(pts, idx.clone(), origin, params.root_size, params, &mut out);
        out
    };
    #[cfg(feature = "parallel")]
    let per_root: Vec<Vec<LeafDraft>> = {
        use rayon::prelude::*;
        cells.par_iter().map(split).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_root: Vec<Vec<LeafDraft>> = cells.iter().map(split).collect();

    let mut roots = Vec::with_capacity(cells.len());
    let mut leaves = Vec::new();
    let mut point_leaf = vec![u32::MAX; pts.len()];
    let mut root_index = HashMap::with_capacity(cells.len());
    for (ri, ((key, _), drafts)) in cells.iter().zip(per_root).enumerate() {
        let first = leaves.len() as u32;
        for d in drafts {
            let id = leaves.len() as u32;
            for &p in &d.points {
                point_leaf[p as usize] = id;
            }
            leaves.push(VoxelLeaf {
                id,
                points: d.points,
                centroid: d.centroid,
                normal: d.normal,
                planarity: d.planarity,
                origin: d.origin,
                edge: d.edge,
                root: ri as u32,
            });
        }
        let origin = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * params.root_size;
        roots.push(RootCell {
            key: *key,
            origin,
            edge: params.root_size,
            leaves: first..leaves.len() as u32,
        });
        root_index.insert(*key, ri as u32);
    }
    debug_assert!(point_leaf.iter().all(|&l| l != u32::MAX));
    Ok(VoxelMap {
        params: *params,
        roots,
        leaves,
        point_leaf,
        root_index,
    })
}

struct LeafDraft {
    points: Vec<u32>,
    centroid: Vector3<f64>,
    normal: Vector3<f64>,
    planarity: f64,
    origin: Vector3<f64>,
    edge: f64,
}

fn subdivide(
    pts: &[Vector3<f64>],
    idx: Vec<u32>,
    origin: Vector3<f64>,
    edge: f64,
    params: &VoxelParams,
    out: &mut Vec<LeafDraft>,
) {
    let fit = fit_plane(pts, &idx);
    let planar = idx.len() >= params.min_points && fit.planarity <= params.plane_ratio_max;
    if planar || edge <= params.min_voxel_size * (1.0 + 1e-12) {
        out.push(LeafDraft {
            points: idx,
            centroid: fit.centroid,
            normal: fit.normal,
            planarity: fit.planarity,
            origin,
            edge,
        });
        return;
    }
    let half = edge * 0.5;
    let centre = origin + Vector3::repeat(half);
    let mut octants: [Vec<u32>; 8] = Default::default();
    for &i in &idx {
        let p = &pts[i as usize];
        let o = (p.x >= centre.x) as usize | ((p.y >= centre.y) as usize) << 1 | ((p.z >= centre.z) as usize) << 2;
        octants[o].push(i);
    }
    for (o, sub) in octants.into_iter().enumerate() {
        if sub.is_empty() {
            continue;
        }
        let off = Vector3::new((o & 1) as f64, ((o >> 1) & 1) as f64, ((o >> 2) & 1) as f64) * half;
        subdivide(pts, sub, origin + off, half, params, out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlaneFit {
    pub centroid: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub planarity: f64,
}

/// Centroid, normal and λ_min/λ_max of the scatter of `idx`. Fewer than
/// three points give normal +z and planarity 0.
pub fn fit_plane(pts: &[Vector3<f64>], idx: &[u32]) -> PlaneFit {
    let n = idx.len().max(1) as f64;
    let centroid = idx.iter().fold(Vector3::zeros(), |a, &i| a + pts[i as usize]) / n;
    if idx.len() < 3 {
        return PlaneFit {
            centroid,
            normal: Vector3::z(),
            planarity: 0.0,
        };
    }
    let mut s = Matrix3::zeros();
    for &i in idx {
        let d = pts[i as usize] - centroid;
        s += d * d.transpose();
    }
    s /= n;
    let eig = symmetric_eigenvalues(&s);
    let planarity = if eig[2] > 0.0 {
        (eig[0] / eig[2]).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let normal = eigenvector_for(&s, eig[0]).unwrap_or_else(Vector3::z);
    PlaneFit {
        centroid,
        normal,
        planarity,
    }
}

/// Eigenvalues of a symmetric 3×3 matrix in ascending order,
/// trigonometric closed form.
pub fn symmetric_eigenvalues(a: &Matrix3<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    if p1 == 0.0 {
        let mut e = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e_max = q + 2.0 * p * phi.cos();
    let e_min = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e_mid = 3.0 * q - e_max - e_min;
    [e_min, e_mid, e_max]
}

fn eigenvector_for(a: &Matrix3<f64>, lambda: f64) -> Option<Vector3<f64>> {
    let m = a - Matrix3::identity() * lambda;
    let r0 = m.row(0).transpose();
    let r1 = m.row(1).transpose();
    let r2 = m.row(2).transpose();
    let c = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = c.iter().max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    let n = best.norm();
    if n <= 1e-300 || !n.is_finite() {
        return None;
    }
    let mut v = best / n;
    // Deterministic sign.
    if v.z < 0.0 || (v.z == 0.0 && (v.y < 0.0 || (v.y == 0.0 && v.x < 0.0))) {
        v = -v;
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.1..3.9),
                    rng.random_range(0.1..3.9),
                    2.0 + 1e-3 * rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts)
    }

    fn check_partition(cloud: &PointCloud, map: &VoxelMap) {
        let mut seen = vec![0u32; cloud.len()];
        for leaf in &map.leaves {
            for &p in &leaf.points {
                seen[p as usize] += 1;
                assert_eq!(map.leaf_of(p as usize).unwrap(), leaf.id);
                assert!(leaf.contains(&cloud.positions[p as usize]));
            }
            assert!((leaf.normal.norm() - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&leaf.planarity));
        }
        assert!(seen.iter().all(|&c| c == 1));
        for (i, l) in map.leaves.iter().enumerate() {
            assert_eq!(l.id as usize, i);
        }
    }

    #[test]
    fn single_plane_gives_one_leaf() {
        let cloud = plane_cloud(1000, 1);
        let map = build_voxel_map(&cloud, &VoxelParams::default()).unwrap();
        check_partition(&cloud, &map);
        assert_eq!(map.leaves.len(), 1);
        assert!(map.leaves[0].planarity < 0.01);
        assert!(map.leaves[0].normal.z.abs() > 0.999);

        // Direct covariance oracle.
        let idx: Vec<u32> = (0..1000).collect();
        let c = idx
            .iter()
            .fold(Vector3::zeros(), |a, &i| a + cloud.positions[i as usize])
            / 1000.0;
        let mut s = nalgebra::Matrix3::zeros();
        for p in &cloud.positions {
            s += (p - c) * (p - c).transpose();
        }
        let ev = nalgebra::SymmetricEigen::new(s / 1000.0).eigenvalues;
        let (lo, hi) = (ev.min(), ev.max());
        assert!((map.leaves[0].planarity - lo / hi).abs() < 1e-9);
    }

    #[test]
    fn perpendicular_planes_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = Vec::new();
        for _ in 0..1500 {
            pts.push(Vector3::new(
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
                1.3,
            ));
            pts.push(Vector3::new(
                1.7,
                rng.random_range(0.0..4.0),
                rng.random_range(0.0..4.0),
            ));
        }
        let cloud = PointCloud::new(pts);
        let params = VoxelParams::default();
        let map = build_voxel_map(&cloud, &params).unwrap();
        check_partition(&cloud, &map);
        assert!(map.leaves.len() > 1);
        for leaf in &map.leaves {
            let ok = leaf.points.len() >= params.min_points && leaf.planarity <= params.plane_ratio_max;
            assert!(ok || leaf.edge <= params.min_voxel_size + 1e-12, "{leaf:?}");
        }
    }

    #[test]
    fn single_point_is_one_leaf() {
        let cloud = PointCloud::new(vec![Vector3::zeros()]);
        let map = build_voxel_map(&cloud, &VoxelParams::default()).unwrap();
        assert_eq!(map.leaves.len(), 1);
        assert_eq!(map.leaf_of(0).unwrap(), 0);
        assert_eq!(map.leaves[0].normal, Vector3::z());
        assert!(map.leaves[0].edge <= 0.25 + 1e-12);
        assert!(matches!(map.leaf_of(1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn rejects_bad_parameters() {
        let cloud = plane_cloud(10, 3);
        let p = VoxelParams {
            root_size: 0.1,
            ..Default::default()
        };
        assert!(build_voxel_map(&cloud, &p).is_err());
        assert!(build_voxel_map(&PointCloud::default(), &VoxelParams::default()).is_err());
    }

    #[test]
    fn eigenvalues_match_library_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = nalgebra::Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = m * m.transpose();
            let mine = symmetric_eigenvalues(&s);
            let mut lib: Vec<f64> = nalgebra::SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
            lib.sort_by(f64::total_cmp);
            for k in 0..3 {
                assert!((mine[k] - lib[k]).abs() < 1e-9, "{mine:?} vs {lib:?}");
            }
        }
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Mixture of planes and blobs across several root cells.
        let pts = (0..n)
            .map(|i| match i % 3 {
                0 => Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), 0.5),
                1 => Vector3::new(rng.random_range(-6.0..6.0), 3.0, rng.random_range(-2.0..2.0)),
                _ => Vector3::new(
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-2.0..2.0),
                ),
            })
            .collect();
        PointCloud::new(pts)
    }

    #[test]
    fn deterministic_membership() {
        let cloud = random_cloud(7, 3000);
        let a = build_voxel_map(&cloud, &VoxelParams::default()).unwrap();
        let b = build_voxel_map(&cloud, &VoxelParams::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn leaves_partition_the_cloud(seed in 0u64..1000, n in 1usize..1500) {
            let cloud = random_cloud(seed, n);
            let map = build_voxel_map(&cloud, &VoxelParams::default()).unwrap();
            check_partition(&cloud, &map);
            let total: usize = map.leaves.iter().map(|l| l.points.len()).sum();
            prop_assert_eq!(total, cloud.len());
        }

        #[test]
        fn tighter_planarity_never_grows_leaves(seed in 0u64..1000, hi in 0.02f64..0.3, frac in 0.1f64..0.9) {
            let cloud = random_cloud(seed, 900);
            let loose = VoxelParams { plane_ratio_max: hi, ..Default::default() };
            let tight = VoxelParams { plane_ratio_max: hi * frac, ..Default::default() };
            let a = build_voxel_map(&cloud, &loose).unwrap();
            let b = build_voxel_map(&cloud, &tight).unwrap();
            for i in 0..cloud.len() {
                let ea = a.leaves[a.leaf_of(i).unwrap() as usize].edge;
                let eb = b.leaves[b.leaf_of(i).unwrap() as usize].edge;
                prop_assert!(eb <= ea);
            }
        }
    }
}
