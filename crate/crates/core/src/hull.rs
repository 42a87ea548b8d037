//! 3D quickhull with exact orientation predicates.
//!
//! Inclusion decisions use adaptive-precision `orient3d`; only the choice of
//! the farthest point per face relies on floating-point distances.

use nalgebra::Vector3;

/// Result of a hull computation.
#[derive(Clone, Debug, PartialEq)]
pub enum Hull {
    /// Fewer than four points, or all points collinear/coplanar.
    Degenerate,
    Polytope {
        /// Outward-oriented triangles (counter-clockwise seen from outside).
        faces: Vec<[u32; 3]>,
        /// Per input point: hull vertex, or within tolerance of a facet.
        on_hull: Vec<bool>,
    },
}

impl Hull {
    pub fn on_hull(&self) -> Option<&[bool]> {
        match self {
            Hull::Degenerate => None,
            Hull::Polytope { on_hull, .. } => Some(on_hull),
        }
    }
}

fn coord(p: &Vector3<f64>) -> robust::Coord3D<f64> {
    robust::Coord3D { x: p.x, y: p.y, z: p.z }
}

/// Positive when `d` lies on the side of the normal `(b − a) × (c − a)`.
pub fn orient(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    -robust::orient3d(coord(a), coord(b), coord(c), coord(d))
}

struct Face {
    v: [u32; 3],
    /// Neighbour across edge `v[k] -> v[k+1]`.
    n: [u32; 3],
    normal: Vector3<f64>,
    outside: Vec<u32>,
    far: u32,
    far_dist: f64,
    alive: bool,
}

struct Builder<'a> {
    pts: &'a [Vector3<f64>],
    faces: Vec<Face>,
    mark: Vec<u32>,
    visible: Vec<bool>,
    generation: u32,
    near_candidates: Vec<u32>,
    tol: f64,
}

impl<'a> Builder<'a> {
    fn p(&self, i: u32) -> &Vector3<f64> {
        &self.pts[i as usize]
    }

    fn new_face(&mut self, v: [u32; 3]) -> u32 {
        let a = self.p(v[0]);
        let n = (self.p(v[1]) - a).cross(&(self.p(v[2]) - a));
        let len = n.norm();
        let normal = if len > 0.0 { n / len } else { n };
        self.faces.push(Face {
            v,
            n: [u32::MAX; 3],
            normal,
            outside: Vec::new(),
            far: u32::MAX,
            far_dist: f64::NEG_INFINITY,
            alive: true,
        });
        self.mark.push(0);
        self.visible.push(false);
        (self.faces.len() - 1) as u32
    }

    fn above(&self, f: u32, p: u32) -> bool {
        let v = self.faces[f as usize].v;
        orient(self.p(v[0]), self.p(v[1]), self.p(v[2]), self.p(p)) > 0.0
    }

    fn signed_distance(&self, f: u32, p: u32) -> f64 {
        let face = &self.faces[f as usize];
        face.normal.dot(&(self.p(p) - self.p(face.v[0])))
    }

    /// Assigns `p` to the first candidate face it lies strictly above.
    fn assign(&mut self, p: u32, candidates: &[u32]) {
        let mut best = f64::NEG_INFINITY;
        for &f in candidates {
            if self.above(f, p) {
                let d = self.signed_distance(f, p);
                let face = &mut self.faces[f as usize];
                face.outside.push(p);
                if d > face.far_dist {
                    face.far_dist = d;
                    face.far = p;
                }
                return;
            }
            best = best.max(self.signed_distance(f, p));
        }
        if best >= -self.tol {
            self.near_candidates.push(p);
        }
    }
}

fn initial_simplex(pts: &[Vector3<f64>]) -> Option<[u32; 4]> {
    let n = pts.len();
    let mut ext = [0usize; 6];
    for (i, p) in pts.iter().enumerate() {
        for k in 0..3 {
            if p[k] < pts[ext[2 * k]][k] {
                ext[2 * k] = i;
            }
            if p[k] > pts[ext[2 * k + 1]][k] {
                ext[2 * k + 1] = i;
            }
        }
    }
    let mut best = (0, 0, 0.0);
    for a in 0..6 {
        for b in a + 1..6 {
            let d = (pts[ext[a]] - pts[ext[b]]).norm_squared();
            if d > best.2 {
                best = (ext[a], ext[b], d);
            }
        }
    }
    let (i0, i1) = (best.0, best.1);
    if best.2 == 0.0 {
        return None;
    }
    let dir = pts[i1] - pts[i0];
    let (mut i2, mut d2) = (usize::MAX, 0.0);
    for i in 0..n {
        let d = dir.cross(&(pts[i] - pts[i0])).norm_squared();
        if d > d2 {
            d2 = d;
            i2 = i;
        }
    }
    if i2 == usize::MAX {
        return None;
    }
    let normal = dir.cross(&(pts[i2] - pts[i0]));
    let (mut i3, mut d3) = (usize::MAX, 0.0);
    for i in 0..n {
        let d = normal.dot(&(pts[i] - pts[i0])).abs();
        if d > d3 {
            d3 = d;
            i3 = i;
        }
    }
    if i3 == usize::MAX || orient(&pts[i0], &pts[i1], &pts[i2], &pts[i3]) == 0.0 {
        // Fall back to an exact scan before declaring the set coplanar.
        i3 = (0..n).find(|&i| orient(&pts[i0], &pts[i1], &pts[i2], &pts[i]) != 0.0)?;
    }
    Some([i0 as u32, i1 as u32, i2 as u32, i3 as u32])
}

/// Convex hull of `points`. Points whose distance to the hull boundary is at
/// most `tolerance` (absolute units) are reported on the hull.
pub fn convex_hull(points: &[Vector3<f64>], tolerance: f64) -> Hull {
    if points.len() < 4 {
        return Hull::Degenerate;
    }
    let Some([a, b, c, d]) = initial_simplex(points) else {
        return Hull::Degenerate;
    };
    let mut bld = Builder {
        pts: points,
        faces: Vec::with_capacity(points.len() * 4),
        mark: Vec::new(),
        visible: Vec::new(),
        generation: 0,
        near_candidates: Vec::new(),
        tol: tolerance,
    };

    // Base oriented so that d lies below it.
    let (a, b, c) = if orient(bld.p(a), bld.p(b), bld.p(c), bld.p(d)) > 0.0 {
        (a, c, b)
    } else {
        (a, b, c)
    };
    let f0 = bld.new_face([a, b, c]);
    let f1 = bld.new_face([b, a, d]);
    let f2 = bld.new_face([c, b, d]);
    let f3 = bld.new_face([a, c, d]);
    link_by_edges(&mut bld.faces, &[f0, f1, f2, f3]);
    debug_assert!(!bld.above(f0, d) && !bld.above(f1, c) && !bld.above(f2, a) && !bld.above(f3, b));

    let initial = [f0, f1, f2, f3];
    for i in 0..points.len() as u32 {
        if i == a || i == b || i == c || i == d {
            continue;
        }
        bld.assign(i, &initial);
    }

    let mut stack: Vec<u32> = initial.to_vec();
    let mut horizon: Vec<(u32, u32, u32, usize)> = Vec::new();
    let mut visible_faces: Vec<u32> = Vec::new();
    let mut dfs: Vec<u32> = Vec::new();
    let mut new_faces: Vec<u32> = Vec::new();
    let mut orphans: Vec<u32> = Vec::new();

    while let Some(f) = stack.pop() {
        let face = &bld.faces[f as usize];
        if !face.alive || face.outside.is_empty() {
            continue;
        }
        let eye = face.far;

        bld.generation += 1;
        let gen = bld.generation;
        horizon.clear();
        visible_faces.clear();
        dfs.clear();
        bld.mark[f as usize] = gen;
        bld.visible[f as usize] = true;
        dfs.push(f);
        while let Some(g) = dfs.pop() {
            visible_faces.push(g);
            for k in 0..3 {
                let nb = bld.faces[g as usize].n[k];
                if bld.mark[nb as usize] != gen {
                    bld.mark[nb as usize] = gen;
                    let vis = bld.above(nb, eye);
                    bld.visible[nb as usize] = vis;
                    if vis {
                        dfs.push(nb);
                        continue;
                    }
                } else if bld.visible[nb as usize] {
                    continue;
                }
                let gv = bld.faces[g as usize].v;
                let (ea, eb) = (gv[k], gv[(k + 1) % 3]);
                let nbv = bld.faces[nb as usize].v;
                let back = (0..3)
                    .find(|&j| nbv[j] == eb && nbv[(j + 1) % 3] == ea)
                    .expect("hull adjacency is consistent");
                horizon.push((ea, eb, nb, back));
            }
        }

        new_faces.clear();
        for &(ea, eb, nb, back) in &horizon {
            let nf = bld.new_face([ea, eb, eye]);
            bld.faces[nf as usize].n[0] = nb;
            bld.faces[nb as usize].n[back] = nf;
            new_faces.push(nf);
        }
        for (i, &(_, eb, _, _)) in horizon.iter().enumerate() {
            // Face starting at eb shares edge eb -> eye.
            let j = horizon
                .iter()
                .position(|h| h.0 == eb)
                .expect("horizon is a closed loop");
            bld.faces[new_faces[i] as usize].n[1] = new_faces[j];
            bld.faces[new_faces[j] as usize].n[2] = new_faces[i];
        }

        orphans.clear();
        for &g in &visible_faces {
            let face = &mut bld.faces[g as usize];
            face.alive = false;
            orphans.append(&mut face.outside);
        }
        for &p in orphans.iter() {
            if p != eye {
                bld.assign(p, &new_faces);
            }
        }
        stack.extend(new_faces.iter().copied());
    }

    let mut on_hull = vec![false; points.len()];
    let mut faces = Vec::new();
    let mut alive = Vec::new();
    for (i, face) in bld.faces.iter().enumerate() {
        if face.alive {
            faces.push(face.v);
            alive.push(i as u32);
            for &v in &face.v {
                on_hull[v as usize] = true;
            }
        }
    }
    for &p in &bld.near_candidates {
        if on_hull[p as usize] {
            continue;
        }
        let best = alive
            .iter()
            .map(|&f| bld.signed_distance(f, p))
            .fold(f64::NEG_INFINITY, f64::max);
        if best >= -tolerance {
            on_hull[p as usize] = true;
        }
    }
    Hull::Polytope { faces, on_hull }
}

fn link_by_edges(faces: &mut [Face], ids: &[u32]) {
    for &f in ids {
        for k in 0..3 {
            let v = faces[f as usize].v;
            let (a, b) = (v[k], v[(k + 1) % 3]);
            for &g in ids {
                let w = faces[g as usize].v;
                if (0..3).any(|j| w[j] == b && w[(j + 1) % 3] == a) {
                    faces[f as usize].n[k] = g;
                }
            }
        }
    }
}
