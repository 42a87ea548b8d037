//! Alternating photometric refinement: closed-form point colors with poses
//! fixed, then independent per-frame gradient descent with colors fixed.
//!
//! Poses here map world points into the camera frame.

use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::{Matrix3x6, RowVector2, Vector3, Vector6};

use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::geometry::{skew, Equirect, Pose, Twist};
use crate::imaging::{gray_of, GrayImage, Panorama};
use crate::pointcloud::PointCloud;
use crate::visibility::{CoVisGraph, VisibleSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    Mean,
    /// Median/MAD trimmed mean.
    Robust,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerParams {
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_step: f64,
    pub rel_tol: f64,
    pub mode: ColorMode,
    pub trim_sigma: f64,
    pub pyramid_levels: usize,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            max_outer: 50,
            max_inner: 10,
            initial_step: 1e-3,
            rel_tol: 1e-4,
            mode: ColorMode::Mean,
            trim_sigma: 3.0,
            pyramid_levels: 3,
        }
    }
}

/// Dense per-point colour estimates; `count[p] == 0` marks uncoloured points.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorState {
    pub gray: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub count: Vec<u32>,
}

impl ColorState {
    pub fn new(n: usize) -> Self {
        Self {
            gray: vec![0.0; n],
            rgb: vec![[0.0; 3]; n],
            count: vec![0; n],
        }
    }

    pub fn colored(&self) -> usize {
        self.count.iter().filter(|&&k| k > 0).count()
    }
}

/// Grayscale planes and cameras of one pyramid level.
#[derive(Clone, Debug)]
pub struct Level {
    pub images: Vec<GrayImage>,
    pub cameras: Vec<Equirect>,
}

impl Level {
    pub fn full(images: &[Panorama]) -> Self {
        Self {
            images: images.iter().map(|i| i.gray().clone()).collect(),
            cameras: images.iter().map(|i| Equirect::new(i.height(), i.width())).collect(),
        }
    }

    pub fn downsample(&self) -> Self {
        let images: Vec<GrayImage> = self.images.iter().map(GrayImage::downsample).collect();
        let cameras = images.iter().map(|g| Equirect::new(g.height, g.width)).collect();
        Self { images, cameras }
    }
}

/// Levels from full to coarsest resolution.
pub fn build_pyramid(images: &[Panorama], levels: usize) -> Vec<Level> {
    let mut out = vec![Level::full(images)];
    for _ in 1..levels.max(1) {
        let next = out.last().unwrap().downsample();
        out.push(next);
    }
    out
}

/// Per point, the frames whose co-visible set contains it (CSR layout).
#[derive(Clone, Debug)]
struct Observations {
    offsets: Vec<usize>,
    frames: Vec<u32>,
}

impl Observations {
    fn new(n_points: usize, sets: &[Vec<u32>]) -> Self {
        let mut counts = vec![0usize; n_points + 1];
        for s in sets {
            for &p in s {
                counts[p as usize + 1] += 1;
            }
        }
        for i in 0..n_points {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut frames = vec![0u32; counts[n_points]];
        for (f, s) in sets.iter().enumerate() {
            for &p in s {
                frames[fill[p as usize]] = f as u32;
                fill[p as usize] += 1;
            }
        }
        Self {
            offsets: counts,
            frames,
        }
    }

    fn of(&self, p: usize) -> &[u32] {
        &self.frames[self.offsets[p]..self.offsets[p + 1]]
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices of candidates kept by the median/MAD trim; never empty for
/// non-empty input.
pub fn robust_keep(values: &[f64], trim_sigma: f64) -> Vec<usize> {
    if values.len() <= 2 {
        return (0..values.len()).collect();
    }
    let med = median(&mut values.to_vec());
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut dev);
    let keep: Vec<usize> = (0..values.len())
        .filter(|&i| (values[i] - med).abs() <= trim_sigma * mad)
        .collect();
    if keep.is_empty() {
        let best = (0..values.len())
            .min_by(|&a, &b| (values[a] - med).abs().total_cmp(&(values[b] - med).abs()))
            .unwrap();
        return vec![best];
    }
    keep
}

/// Aggregates candidate colours (gray, rgb) into one estimate.
fn aggregate(cands: &[(f64, [f64; 3])], mode: ColorMode, trim_sigma: f64) -> (f64, [f64; 3], u32) {
    let keep: Vec<usize> = match mode {
        ColorMode::Mean => (0..cands.len()).collect(),
        ColorMode::Robust => robust_keep(&cands.iter().map(|c| c.0).collect::<Vec<_>>(), trim_sigma),
    };
    let n = keep.len() as f64;
    let mut g = 0.0;
    let mut rgb = [0.0; 3];
    for &i in &keep {
        g += cands[i].0;
        for (acc, v) in rgb.iter_mut().zip(&cands[i].1) {
            *acc += v;
        }
    }
    (g / n, rgb.map(|c| c / n), cands.len() as u32)
}

#[inline]
fn camera_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(p)
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Colour step over pre-indexed observations at one pyramid level. RGB, when
/// requested, is sampled from the full-resolution panoramas.
#[allow(clippy::too_many_arguments)]
fn update_colors_level(
    cloud: &PointCloud,
    obs: &Observations,
    points: &[u32],
    level: &Level,
    full: &[Panorama],
    poses: &[Pose],
    mode: ColorMode,
    trim_sigma: f64,
    with_rgb: bool,
) -> ColorState {
    let full_cams: Vec<Equirect> = full.iter().map(|i| Equirect::new(i.height(), i.width())).collect();
    let results = par_map(points, |_, &p| {
        let x = &cloud.positions[p as usize];
        let mut cands = Vec::with_capacity(obs.of(p as usize).len());
        for &f in obs.of(p as usize) {
            let f = f as usize;
            let pc = camera_point(&poses[f], x);
            let Some(px) = level.cameras[f].project(&pc) else {
                continue;
            };
            let g = level.images[f].sample(px.u, px.v);
            let rgb = if with_rgb {
                let full_px = full_cams[f].project(&pc).unwrap();
                full[f].sample_rgb(full_px.u, full_px.v)
            } else {
                [0.0; 3]
            };
            cands.push((g, rgb));
        }
        if cands.is_empty() {
            None
        } else {
            Some(aggregate(&cands, mode, trim_sigma))
        }
    });
    let mut state = ColorState::new(cloud.len());
    for (&p, r) in points.iter().zip(results) {
        if let Some((g, rgb, k)) = r {
            state.gray[p as usize] = g;
            state.rgb[p as usize] = rgb;
            state.count[p as usize] = k;
        }
    }
    state
}

fn union_of(sets: &[Vec<u32>]) -> Vec<u32> {
    let mut all: Vec<u32> = sets.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Closed-form colour step over the co-visible sets at full resolution.
pub fn update_colors(
    cloud: &PointCloud,
    covis: &CoVisGraph,
    images: &[Panorama],
    poses: &[Pose],
    mode: ColorMode,
    trim_sigma: f64,
) -> ColorState {
    let obs = Observations::new(cloud.len(), &covis.covisible);
    let level = Level::full(images);
    update_colors_level(
        cloud,
        &obs,
        &union_of(&covis.covisible),
        &level,
        images,
        poses,
        mode,
        trim_sigma,
        true,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub residuals: usize,
    /// Terms skipped because the projection fell outside the image domain.
    pub out_of_domain: usize,
}

/// Sum of squared grayscale residuals of one frame.
pub fn frame_loss(
    cloud: &PointCloud,
    points: &[u32],
    image: &GrayImage,
    camera: &Equirect,
    pose: &Pose,
    colors: &ColorState,
) -> LossValue {
    let mut out = LossValue::default();
    for &p in points {
        let p = p as usize;
        if colors.count[p] == 0 {
            continue;
        }
        let pc = camera_point(pose, &cloud.positions[p]);
        match camera.project(&pc) {
            Some(px) => {
                let r = image.sample(px.u, px.v) - colors.gray[p];
                out.loss += r * r;
                out.residuals += 1;
            }
            None => out.out_of_domain += 1,
        }
    }
    out
}

/// Frame loss and its gradient with respect to a left-multiplied twist
/// `[ω | v]` applied to `pose`.
pub fn frame_loss_and_gradient(
    cloud: &PointCloud,
    points: &[u32],
    image: &GrayImage,
    camera: &Equirect,
    pose: &Pose,
    colors: &ColorState,
) -> (LossValue, Vector6<f64>) {
    let mut out = LossValue::default();
    let mut grad = Vector6::zeros();
    for &p in points {
        let p = p as usize;
        if colors.count[p] == 0 {
            continue;
        }
        let pc = camera_point(pose, &cloud.positions[p]);
        let Some((px, jac)) = camera.project_with_jacobian(&pc) else {
            out.out_of_domain += 1;
            continue;
        };
        let (i, du, dv) = image.sample_with_gradient(px.u, px.v);
        let r = i - colors.gray[p];
        out.loss += r * r;
        out.residuals += 1;
        let di = RowVector2::new(du, dv) * jac;
        if di.x == 0.0 && di.y == 0.0 && di.z == 0.0 {
            continue;
        }
        let mut dp = Matrix3x6::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&pc)));
        dp.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&nalgebra::Matrix3::identity());
        grad += (di * dp).transpose() * (2.0 * r);
    }
    (out, grad)
}

/// Global loss over every frame's co-visible set at full resolution.
pub fn global_loss(
    cloud: &PointCloud,
    covis: &CoVisGraph,
    images: &[Panorama],
    poses: &[Pose],
    colors: &ColorState,
) -> LossValue {
    let level = Level::full(images);
    level_loss(cloud, &covis.covisible, &level, poses, colors).0
}

fn level_loss(
    cloud: &PointCloud,
    sets: &[Vec<u32>],
    level: &Level,
    poses: &[Pose],
    colors: &ColorState,
) -> (LossValue, Vec<f64>) {
    let per = par_map(sets, |f, s| {
        frame_loss(cloud, s, &level.images[f], &level.cameras[f], &poses[f], colors)
    });
    let mut total = LossValue::default();
    for l in &per {
        total.loss += l.loss;
        total.residuals += l.residuals;
        total.out_of_domain += l.out_of_domain;
    }
    (total, per.iter().map(|l| l.loss).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub last_step: f64,
}

/// Backtracking descent on one frame with colours fixed. The direction is
/// the gradient normalised after scaling translation by the mean depth, so a
/// step of size α rotates by at most α and translates by at most α·depth.
pub fn descend_frame(
    cloud: &PointCloud,
    points: &[u32],
    image: &GrayImage,
    camera: &Equirect,
    pose: &Pose,
    colors: &ColorState,
    params: &OptimizerParams,
) -> (Pose, FrameStep) {
    let mut pose = *pose;
    let depth = {
        let (mut s, mut n) = (0.0, 0usize);
        for &p in points {
            if colors.count[p as usize] > 0 {
                s += camera_point(&pose, &cloud.positions[p as usize]).norm();
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            s / n as f64
        }
    };
    let (mut loss, mut grad) = frame_loss_and_gradient(cloud, points, image, camera, &pose, colors);
    let mut stats = FrameStep {
        loss_before: loss.loss,
        loss_after: loss.loss,
        ..Default::default()
    };
    let mut step = params.initial_step;
    for _ in 0..params.max_inner {
        let mut dir = grad;
        for k in 3..6 {
            dir[k] *= depth * depth;
        }
        let scaled = Vector6::new(dir[0], dir[1], dir[2], dir[3] / depth, dir[4] / depth, dir[5] / depth);
        let norm = scaled.norm();
        if !(norm > 0.0) {
            break;
        }
        let delta = Twist::from_vector(&(-dir * (step / norm)));
        let trial = pose.exp_update(&delta);
        let trial_loss = frame_loss(cloud, points, image, camera, &trial, colors);
        if trial_loss.loss < loss.loss {
            pose = trial;
            stats.accepted += 1;
            let (l, g) = frame_loss_and_gradient(cloud, points, image, camera, &pose, colors);
            loss = l;
            grad = g;
        } else {
            stats.rejected += 1;
            step *= 0.5;
        }
    }
    stats.loss_after = loss.loss;
    stats.last_step = step;
    (pose, stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// Pyramid level, 0 = full resolution.
    pub level: usize,
    pub outer: usize,
    pub global_loss: f64,
    pub residuals: usize,
    pub frame_losses: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub mean_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizationReport {
    pub iterations: Vec<IterationRecord>,
    pub final_poses: Vec<Pose>,
    pub frozen: Vec<usize>,
    pub wall_time: Duration,
}

impl OptimizationReport {
    /// Global losses at outer-iteration boundaries never increase within a
    /// pyramid level.
    pub fn is_monotone(&self) -> bool {
        self.iterations
            .windows(2)
            .all(|w| w[0].level != w[1].level || w[1].global_loss <= w[0].global_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "level,outer,global_loss,residuals,mean_frame_loss,max_frame_loss,accepted,rejected,mean_step\n",
        );
        for r in &self.iterations {
            let n = r.frame_losses.len().max(1) as f64;
            let mean = r.frame_losses.iter().sum::<f64>() / n;
            let max = r.frame_losses.iter().copied().fold(0.0, f64::max);
            writeln!(
                out,
                "{},{},{:.12e},{},{:.12e},{:.12e},{},{},{:.6e}",
                r.level, r.outer, r.global_loss, r.residuals, mean, max, r.accepted, r.rejected, r.mean_step
            )
            .unwrap();
        }
        out
    }

    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            write!(
                out,
                "level {} iter {} E = {:.6e} ({} residuals) E_i:",
                r.level, r.outer, r.global_loss, r.residuals
            )
            .unwrap();
            for e in &r.frame_losses {
                write!(out, " {e:.4e}").unwrap();
            }
            writeln!(out, " accepted {} rejected {}", r.accepted, r.rejected).unwrap();
        }
        if !self.frozen.is_empty() {
            writeln!(out, "frozen frames: {:?}", self.frozen).unwrap();
        }
        writeln!(out, "wall time {:.3} s", self.wall_time.as_secs_f64()).unwrap();
        out
    }
}

/// Alternates colour and pose steps coarse-to-fine. `poses[i]` maps world
/// points into camera `i`; co-visible sets are read once and never modified.
pub fn optimize_poses(
    cloud: &PointCloud,
    covis: &CoVisGraph,
    images: &[Panorama],
    initial: &[Pose],
    params: &OptimizerParams,
) -> Result<(Vec<Pose>, ColorState, OptimizationReport)> {
    let start = Stopwatch::start();
    let n = images.len();
    if initial.len() != n || covis.covisible.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} images, {} poses and {} co-visible sets",
            n,
            initial.len(),
            covis.covisible.len()
        )));
    }
    if covis.edges.is_empty() || covis.covisible.iter().all(Vec::is_empty) {
        return Err(Error::NoCovisibility);
    }
    let sets = &covis.covisible;
    let frozen: Vec<usize> = (0..n).filter(|&i| sets[i].is_empty()).collect();
    for &f in &frozen {
        log::warn!("frame {f} has no co-visible points and stays fixed");
    }
    let obs = Observations::new(cloud.len(), sets);
    let points = union_of(sets);
    let pyramid = build_pyramid(images, params.pyramid_levels);

    let mut poses = initial.to_vec();
    let mut report = OptimizationReport {
        frozen: frozen.clone(),
        ..Default::default()
    };
    let mut colors;
    for (lv, level) in pyramid.iter().enumerate().rev() {
        let mut prev: Option<f64> = None;
        for outer in 0..=params.max_outer {
            colors = update_colors_level(
                cloud,
                &obs,
                &points,
                level,
                images,
                &poses,
                params.mode,
                params.trim_sigma,
                false,
            );
            let (loss, frame_losses) = level_loss(cloud, sets, level, &poses, &colors);
            let converged = match prev {
                Some(p) => p <= 0.0 || (p - loss.loss) / p < params.rel_tol,
                None => false,
            };
            let mut record = IterationRecord {
                level: lv,
                outer,
                global_loss: loss.loss,
                residuals: loss.residuals,
                frame_losses,
                accepted: 0,
                rejected: 0,
                mean_step: 0.0,
            };
            if converged || outer == params.max_outer {
                report.iterations.push(record);
                break;
            }
            let steps = par_map(&poses, |f, pose| {
                if sets[f].is_empty() {
                    return (*pose, FrameStep::default());
                }
                descend_frame(
                    cloud,
                    &sets[f],
                    &level.images[f],
                    &level.cameras[f],
                    pose,
                    &colors,
                    params,
                )
            });
            for (f, (pose, st)) in steps.into_iter().enumerate() {
                poses[f] = pose;
                record.accepted += st.accepted;
                record.rejected += st.rejected;
                record.mean_step += st.last_step / n as f64;
            }
            log::debug!("level {lv} iter {outer} E = {:.6e}", record.global_loss);
            report.iterations.push(record);
            prev = Some(loss.loss);
        }
    }
    colors = update_colors_level(
        cloud,
        &obs,
        &points,
        &pyramid[0],
        images,
        &poses,
        params.mode,
        params.trim_sigma,
        true,
    );
    report.final_poses = poses.clone();
    report.wall_time = start.elapsed();
    Ok((poses, colors, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Colorized {
    pub cloud: PointCloud,
    pub uncolored: usize,
}

pub const DEFAULT_SENTINEL: [u8; 3] = [128, 128, 128];

/// Final RGB colours from every frame that sees each point.
pub fn colorize(
    cloud: &PointCloud,
    visible: &[VisibleSet],
    images: &[Panorama],
    poses: &[Pose],
    mode: ColorMode,
    trim_sigma: f64,
    sentinel: [u8; 3],
) -> Result<Colorized> {
    if visible.len() != images.len() || poses.len() != images.len() {
        return Err(Error::InvalidParameter(format!(
            "{} visible sets, {} images, {} poses",
            visible.len(),
            images.len(),
            poses.len()
        )));
    }
    let sets: Vec<Vec<u32>> = visible.iter().map(|v| v.points.clone()).collect();
    let obs = Observations::new(cloud.len(), &sets);
    let idx: Vec<u32> = (0..cloud.len() as u32).collect();
    let colors = par_map(&idx, |_, &p| {
        let mut cands = Vec::new();
        for &f in obs.of(p as usize) {
            let f = f as usize;
            let pc = camera_point(&poses[f], &cloud.positions[p as usize]);
            if let Some(px) = Equirect::new(images[f].height(), images[f].width()).project(&pc) {
                let rgb = images[f].sample_rgb(px.u, px.v);
                let g = gray_of(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
                cands.push((g, rgb));
            }
        }
        if cands.is_empty() {
            None
        } else {
            let (_, rgb, _) = aggregate(&cands, mode, trim_sigma);
            Some(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8))
        }
    });
    let uncolored = colors.iter().filter(|c| c.is_none()).count();
    let rgb = colors.into_iter().map(|c| c.unwrap_or(sentinel)).collect();
    Ok(Colorized {
        cloud: PointCloud::with_colors(cloud.positions.clone(), rgb)?,
        uncolored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_sphere_scene, perturb_poses, SceneParams};
    use crate::visibility::CovisEdge;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_of(sets: Vec<Vec<u32>>) -> CoVisGraph {
        let n = sets.len();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push(CovisEdge { a, b, shared: 1 });
            }
        }
        CoVisGraph {
            frames: (0..n).collect(),
            edges,
            augmented: sets.clone(),
            covisible: sets,
        }
    }

    fn smooth_image(h: usize, w: usize) -> GrayImage {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let y = r as f64 / h as f64 * std::f64::consts::PI;
                let x = c as f64 / w as f64 * std::f64::consts::TAU;
                data.push(0.5 + 0.2 * (3.0 * x).sin() * y.sin() + 0.1 * (2.0 * y + x).cos());
            }
        }
        GrayImage::new(h, w, data)
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    /// Small noiseless scene with world-to-camera poses and a full
    /// co-visibility graph.
    fn fixture(seed: u64) -> (crate::bench::SyntheticScene, Vec<Pose>, CoVisGraph) {
        let scene = generate_sphere_scene(&SceneParams {
            n_points: 60_000,
            n_views: 3,
            height: 128,
            width: 256,
            seed,
            ..Default::default()
        })
        .unwrap();
        let poses: Vec<Pose> = scene.poses.iter().map(Pose::inverse).collect();
        let all: Vec<u32> = (0..scene.cloud.len() as u32).collect();
        let covis = graph_of(vec![all; scene.images.len()]);
        (scene, poses, covis)
    }

    #[test]
    fn mean_of_two_candidates() {
        let (g, rgb, k) = aggregate(&[(100.0, [100.0; 3]), (200.0, [200.0; 3])], ColorMode::Mean, 3.0);
        assert_eq!(g, 150.0);
        assert_eq!(rgb, [150.0; 3]);
        assert_eq!(k, 2);
    }

    #[test]
    fn robust_trims_outlier() {
        let vals = [100.0, 102.0, 98.0, 250.0];
        // Hand median/MAD: sorted 98 100 102 250, median 101; deviations
        // 1 1 3 149, MAD 2; keep |x - 101| <= 6.
        let (med, mad) = (101.0, 2.0);
        let kept: Vec<f64> = vals
            .iter()
            .copied()
            .filter(|v: &f64| (v - med).abs() <= 3.0 * mad)
            .collect();
        let oracle = kept.iter().sum::<f64>() / kept.len() as f64;
        let cands: Vec<(f64, [f64; 3])> = vals.iter().map(|&v| (v, [v; 3])).collect();
        let (g, rgb, k) = aggregate(&cands, ColorMode::Robust, 3.0);
        assert_eq!(g, oracle);
        assert_eq!(g, 100.0);
        assert_eq!(rgb, [100.0; 3]);
        assert_eq!(k, 4);
    }

    #[test]
    fn singleton_is_returned_in_both_modes() {
        for mode in [ColorMode::Mean, ColorMode::Robust] {
            let (g, rgb, k) = aggregate(&[(0.3, [10.0, 20.0, 30.0])], mode, 3.0);
            assert_eq!((g, rgb, k), (0.3, [10.0, 20.0, 30.0], 1));
        }
    }

    #[test]
    fn robust_keeps_everything_when_consistent() {
        assert_eq!(robust_keep(&[1.0, 1.0, 1.0, 1.0], 3.0), vec![0, 1, 2, 3]);
        assert_eq!(robust_keep(&[1.0, 5.0], 3.0), vec![0, 1]);
    }

    #[test]
    fn single_term_loss() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let image = GrayImage::new(4, 8, vec![0.8; 32]);
        let mut colors = ColorState::new(1);
        colors.gray[0] = 0.5;
        colors.count[0] = 1;
        let l = frame_loss(&cloud, &[0], &image, &Equirect::new(4, 8), &Pose::identity(), &colors);
        assert_eq!(l.residuals, 1);
        assert!((l.loss - 0.09).abs() < 1e-12);
        assert!((l.loss.sqrt() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn uncolored_and_degenerate_points_are_skipped() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()]);
        let image = GrayImage::new(4, 8, vec![0.8; 32]);
        let mut colors = ColorState::new(2);
        colors.count[1] = 1;
        let (l, g) = frame_loss_and_gradient(
            &cloud,
            &[0, 1],
            &image,
            &Equirect::new(4, 8),
            &Pose::identity(),
            &colors,
        );
        assert_eq!(l.residuals, 0);
        assert_eq!(l.out_of_domain, 1);
        assert_eq!(g, Vector6::zeros());
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|_| random_unit(&mut rng) * rng.random_range(1.0..10.0))
            .collect();
        let cloud = PointCloud::new(pts);
        let image = GrayImage::new(32, 64, vec![0.4; 32 * 64]);
        let mut colors = ColorState::new(200);
        for p in 0..200 {
            colors.gray[p] = rng.random_range(0.0..1.0);
            colors.count[p] = 1;
        }
        let idx: Vec<u32> = (0..200).collect();
        let pose = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.5, 0.0, -0.1));
        let (l, g) = frame_loss_and_gradient(&cloud, &idx, &image, &Equirect::new(32, 64), &pose, &colors);
        assert!(l.loss > 0.0);
        assert_eq!(g, Vector6::zeros());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let image = smooth_image(48, 96);
        let camera = Equirect::new(48, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let n = 60;
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| random_unit(&mut rng) * rng.random_range(2.0..10.0))
                .collect();
            let cloud = PointCloud::new(pts);
            let mut colors = ColorState::new(n);
            for p in 0..n {
                colors.gray[p] = rng.random_range(0.2..0.8);
                colors.count[p] = 1;
            }
            let idx: Vec<u32> = (0..n as u32).collect();
            let pose = Pose::from_axis_angle(
                random_unit(&mut rng) * rng.random_range(0.0..3.0),
                random_unit(&mut rng) * rng.random_range(0.0..1.0),
            );
            let (_, g) = frame_loss_and_gradient(&cloud, &idx, &image, &camera, &pose, &colors);
            let h = 1e-6;
            let mut fd = Vector6::zeros();
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let plus = frame_loss(
                    &cloud,
                    &idx,
                    &image,
                    &camera,
                    &pose.exp_update(&Twist::from_vector(&e)),
                    &colors,
                )
                .loss;
                let minus = frame_loss(
                    &cloud,
                    &idx,
                    &image,
                    &camera,
                    &pose.exp_update(&Twist::from_vector(&-e)),
                    &colors,
                )
                .loss;
                fd[k] = (plus - minus) / (2.0 * h);
            }
            let rel = (g - fd).norm() / fd.norm().max(1e-12);
            assert!(rel < 1e-3, "trial {trial}: analytic {g:?} vs fd {fd:?} ({rel})");
        }
    }

    #[test]
    fn consistent_frames_have_zero_loss() {
        let (scene, poses, _) = fixture(2);
        let all: Vec<u32> = (0..scene.cloud.len() as u32).collect();
        let covis = graph_of(vec![all.clone(), all]);
        let images = vec![scene.images[0].clone(), scene.images[0].clone()];
        let same = vec![poses[0], poses[0]];
        let colors = update_colors(&scene.cloud, &covis, &images, &same, ColorMode::Mean, 3.0);
        let l = global_loss(&scene.cloud, &covis, &images, &same, &colors);
        assert!(l.residuals > 0);
        assert!(l.loss < 1e-6 * l.residuals as f64);
    }

    #[test]
    fn perturbed_poses_cost_more() {
        let (scene, poses, covis) = fixture(3);
        let eval = |ps: &[Pose]| {
            let c = update_colors(&scene.cloud, &covis, &scene.images, ps, ColorMode::Mean, 3.0);
            global_loss(&scene.cloud, &covis, &scene.images, ps, &c).loss
        };
        let moved: Vec<Pose> = perturb_poses(&scene.poses, 2.0, 5.0, 9)
            .iter()
            .map(Pose::inverse)
            .collect();
        assert!(eval(&moved) > eval(&poses));
    }

    #[test]
    fn mean_colors_minimize_the_loss() {
        let (scene, _, covis) = fixture(4);
        let poses: Vec<Pose> = perturb_poses(&scene.poses, 1.0, 3.0, 5)
            .iter()
            .map(Pose::inverse)
            .collect();
        let colors = update_colors(&scene.cloud, &covis, &scene.images, &poses, ColorMode::Mean, 3.0);
        let base = global_loss(&scene.cloud, &covis, &scene.images, &poses, &colors).loss;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut c = colors.clone();
            for g in &mut c.gray {
                *g += rng.random_range(-1e-3..1e-3);
            }
            let l = global_loss(&scene.cloud, &covis, &scene.images, &poses, &c).loss;
            assert!(l >= base - 1e-12 * base.max(1.0), "{l} < {base}");
        }
    }

    #[test]
    fn color_count_matches_in_bounds_observers() {
        let (scene, poses, covis) = fixture(5);
        let colors = update_colors(&scene.cloud, &covis, &scene.images, &poses, ColorMode::Robust, 3.0);
        assert!(colors.count.iter().all(|&k| k == 3));
        assert_eq!(colors.colored(), scene.cloud.len());
    }

    #[test]
    fn stationary_at_ground_truth() {
        let (scene, poses, covis) = fixture(6);
        let colors = update_colors(&scene.cloud, &covis, &scene.images, &poses, ColorMode::Mean, 3.0);
        let level = Level::full(&scene.images);
        for (f, pose) in poses.iter().enumerate() {
            let (l, g) = frame_loss_and_gradient(
                &scene.cloud,
                &covis.covisible[f],
                &level.images[f],
                &level.cameras[f],
                pose,
                &colors,
            );
            assert!(g.norm() < 1e-4 * l.residuals as f64, "frame {f}: |g| = {}", g.norm());
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let (scene, _, covis) = fixture(7);
        let poses: Vec<Pose> = perturb_poses(&scene.poses, 1.0, 3.0, 8)
            .iter()
            .map(Pose::inverse)
            .collect();
        let colors = update_colors(&scene.cloud, &covis, &scene.images, &poses, ColorMode::Mean, 3.0);
        let level = Level::full(&scene.images);
        let params = OptimizerParams::default();
        let step = |f: usize| {
            descend_frame(
                &scene.cloud,
                &covis.covisible[f],
                &level.images[f],
                &level.cameras[f],
                &poses[f],
                &colors,
                &params,
            )
            .0
        };
        let forward: Vec<Pose> = (0..poses.len()).map(step).collect();
        let mut backward: Vec<Pose> = (0..poses.len()).rev().map(step).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        assert!(forward.iter().zip(&poses).any(|(a, b)| a != b));
    }

    #[test]
    fn exactly_consistent_views_are_a_fixed_point() {
        // Views share a centre and differ by yaws of whole pixel columns, so
        // each panorama is a column roll of the first and every residual
        // vanishes at the true poses.
        let (h, w, shift) = (64, 128, 8);
        let base = Panorama::from_fn(h, w, 0.0, |r, c| {
            let g = smooth_image(h, w).at(r, c);
            [(g * 255.0) as u8, (g * 200.0) as u8, 90]
        })
        .unwrap();
        let mut images = Vec::new();
        let mut poses = Vec::new();
        for i in 0..3usize {
            images.push(Panorama::from_fn(h, w, 0.0, |r, c| base.pixel(r, (c + shift * i) % w)).unwrap());
            let yaw = -((shift * i) as f64) * std::f64::consts::TAU / w as f64;
            poses.push(Pose::from_axis_angle(Vector3::new(0.0, 0.0, yaw), Vector3::zeros()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vector3<f64>> = (0..2000).map(|_| random_unit(&mut rng) * 5.0).collect();
        let cloud = PointCloud::new(pts);
        let all: Vec<u32> = (0..cloud.len() as u32).collect();
        let covis = graph_of(vec![all; 3]);
        let (out, _, report) = optimize_poses(&cloud, &covis, &images, &poses, &OptimizerParams::default()).unwrap();
        for (a, b) in out.iter().zip(&poses) {
            assert!(a.rotation_angle_to(b) < 1e-4);
            assert!((a.translation() - b.translation()).norm() < 1e-4);
        }
        for lv in 0..OptimizerParams::default().pyramid_levels {
            let outer = report.iterations.iter().filter(|r| r.level == lv).count() - 1;
            assert!(outer <= 2, "level {lv} took {outer} outer iterations");
        }
    }

    #[test]
    fn rendered_ground_truth_barely_moves() {
        // Quantised rendering moves the minimum slightly off the true poses.
        let (scene, poses, covis) = fixture(8);
        let (out, _, _) =
            optimize_poses(&scene.cloud, &covis, &scene.images, &poses, &OptimizerParams::default()).unwrap();
        for (a, b) in out.iter().zip(&poses) {
            assert!(a.rotation_angle_to(b) < 1e-3);
            assert!((a.translation() - b.translation()).norm() < 5e-3);
        }
    }

    #[test]
    fn descent_is_monotone_and_leaves_covis_untouched() {
        let (scene, _, covis) = fixture(9);
        let poses: Vec<Pose> = perturb_poses(&scene.poses, 3.0, 5.0, 10)
            .iter()
            .map(Pose::inverse)
            .collect();
        let before = covis.dump_covisible();
        let params = OptimizerParams {
            max_outer: 8,
            ..Default::default()
        };
        let (_, colors, report) = optimize_poses(&scene.cloud, &covis, &scene.images, &poses, &params).unwrap();
        assert_eq!(covis.dump_covisible(), before);
        assert!(report.is_monotone());
        assert!(report.iterations.last().unwrap().global_loss < report.iterations[0].global_loss);
        assert_eq!(colors.colored(), scene.cloud.len());
        assert!(colors.rgb.iter().any(|c| c[0] > 0.0));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.iterations.len() + 1);
        assert!(report.to_log().contains("wall time"));
    }

    #[test]
    fn empty_sets_freeze_frames_and_edgeless_graphs_fail() {
        let (scene, poses, _) = fixture(10);
        let all: Vec<u32> = (0..scene.cloud.len() as u32).collect();
        let mut covis = graph_of(vec![all.clone(), all, Vec::new()]);
        let params = OptimizerParams {
            max_outer: 3,
            ..Default::default()
        };
        let (out, _, report) = optimize_poses(&scene.cloud, &covis, &scene.images, &poses, &params).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[2], poses[2]);
        assert_eq!(report.frozen, vec![2]);
        covis.edges.clear();
        assert!(matches!(
            optimize_poses(&scene.cloud, &covis, &scene.images, &poses, &params),
            Err(Error::NoCovisibility)
        ));
    }

    #[test]
    fn colorize_single_view_and_sentinel() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)]);
        let img = Panorama::from_fn(8, 16, 0.0, |r, c| [(r * 10) as u8, (c * 10) as u8, 77]).unwrap();
        let map = crate::voxel::build_voxel_map(&cloud, &Default::default()).unwrap();
        let vis = vec![VisibleSet::new(0, vec![0], &map)];
        let pose = Pose::identity();
        let out = colorize(
            &cloud,
            &vis,
            std::slice::from_ref(&img),
            &[pose],
            ColorMode::Robust,
            3.0,
            [1, 2, 3],
        )
        .unwrap();
        let px = Equirect::new(8, 16).project(&cloud.positions[0]).unwrap();
        let expect = img.sample_rgb(px.u, px.v).map(|c| c.round() as u8);
        let colors = out.cloud.colors.unwrap();
        assert_eq!(colors[0], expect);
        assert_eq!(colors[1], [1, 2, 3]);
        assert_eq!(out.uncolored, 1);
    }

    #[test]
    fn colorize_recovers_texture_at_ground_truth() {
        let (scene, poses, covis) = fixture(11);
        let map = crate::voxel::build_voxel_map(&scene.cloud, &Default::default()).unwrap();
        let vis: Vec<VisibleSet> = covis
            .covisible
            .iter()
            .enumerate()
            .map(|(f, s)| VisibleSet::new(f, s.clone(), &map))
            .collect();
        let out = colorize(
            &scene.cloud,
            &vis,
            &scene.images,
            &poses,
            ColorMode::Mean,
            3.0,
            DEFAULT_SENTINEL,
        )
        .unwrap();
        let truth = scene.cloud.colors.as_ref().unwrap();
        let got = out.cloud.colors.unwrap();
        let mut err = 0.0;
        for (a, b) in got.iter().zip(truth) {
            for k in 0..3 {
                err += (a[k] as f64 - b[k] as f64).abs();
            }
        }
        let mean = err / (3 * truth.len()) as f64;
        assert!(mean < 2.0, "mean abs error {mean}");
        assert_eq!(out.uncolored, 0);
    }
}
