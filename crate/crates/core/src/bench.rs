//! Synthetic sphere scenes, pose perturbation, error metrics and the
//! co-visibility ablation harness.

use crate::clock::Stopwatch;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::geometry::{Equirect, PixelCoord, Pose};
use crate::imaging::Panorama;
use crate::optimizer::{optimize_poses, OptimizationReport, OptimizerParams};
use crate::pointcloud::PointCloud;
use crate::visibility::{build_covis_graph, visible_sets, CoVisGraph, CovisMode, HprParams, VisibleSet};
use crate::voxel::{build_voxel_map, VoxelParams};

/// One plane wave `amplitude · sin(k · d + phase)` over unit directions `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub k: Vector3<f64>,
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Smooth colour field on the unit sphere: `base + Σ waves`, in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct TextureSpec {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

/// Largest accepted wave number; keeps textures smooth at panorama scale.
pub const MAX_WAVE_NUMBER: f64 = 16.0;

impl Default for TextureSpec {
    fn default() -> Self {
        let w = |k: [f64; 3], phase: f64, amplitude: [f64; 3]| Wave {
            k: Vector3::from(k),
            phase,
            amplitude,
        };
        Self {
            base: [128.0, 128.0, 128.0],
            waves: vec![
                w([2.0, 1.0, 0.5], 0.3, [45.0, 20.0, 10.0]),
                w([-1.0, 3.0, 1.5], 1.1, [15.0, 40.0, 20.0]),
                w([0.5, -1.5, 3.5], 2.0, [20.0, 10.0, 45.0]),
                w([5.0, 2.0, -3.0], 0.7, [15.0, 15.0, 15.0]),
                w([-2.5, -5.0, 4.0], 2.9, [12.0, 18.0, 10.0]),
            ],
        }
    }
}

impl TextureSpec {
    pub fn validate(&self) -> Result<()> {
        let live = self
            .waves
            .iter()
            .any(|w| w.k.norm() > 0.0 && w.amplitude.iter().any(|&a| a != 0.0));
        if !live {
            return Err(Error::DegenerateTexture);
        }
        if let Some(w) = self.waves.iter().find(|w| !(w.k.norm() <= MAX_WAVE_NUMBER)) {
            return Err(Error::InvalidParameter(format!(
                "wave number {} exceeds {MAX_WAVE_NUMBER}",
                w.k.norm()
            )));
        }
        Ok(())
    }

    /// Colour at unit direction `d` from the sphere centre.
    pub fn color(&self, d: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.k.dot(d) + w.phase).sin();
            for (ci, a) in c.iter_mut().zip(&w.amplitude) {
                *ci += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 255.0))
    }

    pub fn color_u8(&self, d: &Vector3<f64>) -> [u8; 3] {
        self.color(d).map(|v| v.round() as u8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub radius: f64,
    pub n_points: usize,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    /// Views are placed uniformly within this distance of the centre.
    pub view_radius: f64,
    pub texture: TextureSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            radius: 10.0,
            n_points: 50_000,
            n_views: 8,
            height: 512,
            width: 1024,
            view_radius: 1.0,
            texture: TextureSpec::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Cloud handed to the pipeline, carrying radial noise and ground-truth
    /// colours.
    pub cloud: PointCloud,
    /// Noise-free positions the panoramas were rendered from.
    pub clean: Vec<Vector3<f64>>,
    /// Camera poses in the world frame.
    pub poses: Vec<Pose>,
    pub images: Vec<Panorama>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Pixels left empty after dilation, summed over views.
    pub holes: usize,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q = Vector4::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q.normalize()))
}

pub fn generate_sphere_scene(params: &SceneParams) -> Result<SyntheticScene> {
    params.texture.validate()?;
    if !(params.radius > 0.0) || params.n_points < 100 || params.n_views < 2 {
        return Err(Error::InvalidParameter(format!(
            "need radius > 0, n_points >= 100 and n_views >= 2, got {}, {}, {}",
            params.radius, params.n_points, params.n_views
        )));
    }
    if !(params.noise_sigma >= 0.0) || !(params.view_radius >= 0.0 && params.view_radius < params.radius) {
        return Err(Error::InvalidParameter(
            "noise_sigma must be >= 0 and views must lie inside the sphere".into(),
        ));
    }
    if params.height < 2 || params.width < 2 {
        return Err(Error::InvalidParameter("panorama must be at least 2x2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dirs: Vec<Vector3<f64>> = (0..params.n_points).map(|_| random_unit(&mut rng)).collect();
    let clean: Vec<Vector3<f64>> = dirs.iter().map(|d| d * params.radius).collect();
    let colors: Vec<[u8; 3]> = dirs.iter().map(|d| params.texture.color_u8(d)).collect();

    let poses: Vec<Pose> = (0..params.n_views)
        .map(|_| {
            let u: f64 = Uniform::new(0.0f64, 1.0).unwrap().sample(&mut rng);
            let c = random_unit(&mut rng) * params.view_radius * u.cbrt();
            Pose::new(random_rotation(&mut rng), c)
        })
        .collect();

    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let noisy: Vec<Vector3<f64>> = clean
        .iter()
        .zip(&dirs)
        .map(|(p, d)| {
            if params.noise_sigma > 0.0 {
                p + d * noise.sample(&mut rng)
            } else {
                *p
            }
        })
        .collect();

    let mut holes = 0;
    let images = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let (img, h) = render(&clean, pose, params.height, params.width, &params.texture, i as f64);
            holes += h;
            img
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticScene {
        cloud: PointCloud::with_colors(noisy, colors)?,
        clean,
        poses,
        images,
        noise_sigma: params.noise_sigma,
        seed: params.seed,
        holes,
    })
}

const DILATION_ITERATIONS: usize = 3;

/// Z-buffered point splat, hole dilation, then per-pixel shading of the
/// texture where the pixel ray meets the sphere through the buffered point.
/// Returns the image and the number of pixels still empty.
pub fn render(
    points: &[Vector3<f64>],
    camera_in_world: &Pose,
    height: usize,
    width: usize,
    texture: &TextureSpec,
    timestamp: f64,
) -> (Result<Panorama>, usize) {
    let cam = Equirect::new(height, width);
    let world_to_cam = camera_in_world.inverse();
    // (range, radius of the winning point)
    let mut buf = vec![(f64::INFINITY, 0.0); height * width];
    for p in points {
        let pc = world_to_cam.transform_point(p);
        let Some(px) = cam.project(&pc) else { continue };
        let r = (px.u.round() as usize).min(height - 1);
        let c = (px.v.round() as usize) % width;
        let d = pc.norm();
        let cell = &mut buf[r * width + c];
        if d < cell.0 {
            *cell = (d, p.norm());
        }
    }
    for _ in 0..DILATION_ITERATIONS {
        let prev = buf.clone();
        let mut changed = false;
        for r in 0..height {
            let s = cam.spherical_of(&PixelCoord::new(r as f64, 0.0));
            let reach = ((1.0 / s.phi.cos().max(1e-6)).ceil() as usize).clamp(1, width / 2);
            for c in 0..width {
                if prev[r * width + c].0.is_finite() {
                    continue;
                }
                let mut best = (f64::INFINITY, 0.0);
                for rr in r.saturating_sub(1)..=(r + 1).min(height - 1) {
                    for dc in 0..=2 * reach {
                        let cc = (c + width + dc - reach) % width;
                        if prev[rr * width + cc].0 < best.0 {
                            best = prev[rr * width + cc];
                        }
                    }
                }
                if best.0.is_finite() {
                    buf[r * width + c] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let rot = camera_in_world.rotation_matrix();
    let centre = camera_in_world.translation();
    let mut holes = 0;
    let mut rgb = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (d, radius) = buf[r * width + c];
            if !d.is_finite() {
                holes += 1;
                rgb.push([0, 0, 0]);
                continue;
            }
            let ray = rot * cam.unproject(&PixelCoord::new(r as f64, c as f64));
            let b = centre.dot(&ray);
            let disc = b * b - centre.norm_squared() + radius * radius;
            let s = if disc >= 0.0 && -b + disc.sqrt() > 0.0 {
                -b + disc.sqrt()
            } else {
                d
            };
            let x = centre + ray * s;
            rgb.push(texture.color_u8(&x.normalize()));
        }
    }
    (Panorama::new(height, width, rgb, timestamp), holes)
}

/// Composes every pose with a rotation of exactly `rot_deg` about a random
/// axis (`R' = R·R_δ`) and adds a translation of exactly `trans_cm`.
pub fn perturb_poses(poses: &[Pose], rot_deg: f64, trans_cm: f64, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    poses
        .iter()
        .map(|p| {
            let axis = random_unit(&mut rng);
            let dir = random_unit(&mut rng);
            let dq = UnitQuaternion::from_scaled_axis(axis * rot_deg.to_radians());
            Pose::from_unit_parts(
                (p.rotation() * dq).into_inner(),
                p.translation() + dir * (trans_cm / 100.0),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_cm: f64,
}

pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    PoseError {
        rotation_deg: a.rotation_angle_to(b).to_degrees(),
        translation_cm: (a.translation() - b.translation()).norm() * 100.0,
    }
}

pub fn mean_error(errors: &[PoseError]) -> PoseError {
    let n = errors.len().max(1) as f64;
    PoseError {
        rotation_deg: errors.iter().map(|e| e.rotation_deg).sum::<f64>() / n,
        translation_cm: errors.iter().map(|e| e.translation_cm).sum::<f64>() / n,
    }
}

/// Removes the best common rotation about the world origin from `estimate`
/// relative to `truth` (chordal mean of the per-frame rotation offsets).
pub fn align_rotation_about_origin(estimate: &[Pose], truth: &[Pose]) -> Vec<Pose> {
    let mut m = Matrix3::zeros();
    for (e, t) in estimate.iter().zip(truth) {
        m += e.rotation_matrix() * t.rotation_matrix().transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let g = Rotation3::from_matrix_unchecked(u * d * vt);
    let gi = UnitQuaternion::from_rotation_matrix(&g.inverse());
    estimate
        .iter()
        .map(|e| Pose::new(gi * e.rotation(), gi * e.translation()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialConfig {
    pub voxel: VoxelParams,
    pub hpr: HprParams,
    pub threshold_fraction: f64,
    pub covis_mode: CovisMode,
    pub optimizer: OptimizerParams,
    pub rot_deg: f64,
    pub trans_cm: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelParams::default(),
            hpr: HprParams::default(),
            threshold_fraction: 0.5,
            covis_mode: CovisMode::Graph,
            optimizer: OptimizerParams::default(),
            rot_deg: 5.0,
            trans_cm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub initial: Vec<Pose>,
    pub optimized: Vec<Pose>,
    pub initial_errors: Vec<PoseError>,
    pub final_errors: Vec<PoseError>,
    /// Final errors after removing the common rotation about the centre.
    pub aligned_errors: Vec<PoseError>,
    pub visible: Vec<VisibleSet>,
    pub covis: CoVisGraph,
    pub report: OptimizationReport,
    pub runtime_s: f64,
}

impl TrialResult {
    pub fn mean_final(&self) -> PoseError {
        mean_error(&self.final_errors)
    }

    pub fn mean_aligned(&self) -> PoseError {
        mean_error(&self.aligned_errors)
    }
}

/// Visibility and co-visibility from the given camera-in-world poses.
pub fn covisibility(cloud: &PointCloud, poses: &[Pose], cfg: &TrialConfig) -> Result<(Vec<VisibleSet>, CoVisGraph)> {
    let map = build_voxel_map(cloud, &cfg.voxel)?;
    let eyes: Vec<Vector3<f64>> = poses.iter().map(|p| *p.translation()).collect();
    let vis = visible_sets(cloud, &map, &eyes, &cfg.hpr)?;
    let graph = build_covis_graph(&vis, cfg.threshold_fraction, &map, cfg.covis_mode)?;
    Ok((vis, graph))
}

/// Runs the pipeline on `scene` from `initial` camera-in-world poses.
pub fn run_from(scene: &SyntheticScene, initial: Vec<Pose>, cfg: &TrialConfig) -> Result<TrialResult> {
    let start = Stopwatch::start();
    let (visible, covis) = covisibility(&scene.cloud, &initial, cfg)?;
    let world_to_cam: Vec<Pose> = initial.iter().map(Pose::inverse).collect();
    let (opt, _, report) = optimize_poses(&scene.cloud, &covis, &scene.images, &world_to_cam, &cfg.optimizer)?;
    let optimized: Vec<Pose> = opt.iter().map(Pose::inverse).collect();
    let errs = |ps: &[Pose]| {
        ps.iter()
            .zip(&scene.poses)
            .map(|(a, b)| pose_error(a, b))
            .collect::<Vec<_>>()
    };
    let aligned = align_rotation_about_origin(&optimized, &scene.poses);
    Ok(TrialResult {
        initial_errors: errs(&initial),
        final_errors: errs(&optimized),
        aligned_errors: errs(&aligned),
        initial,
        optimized,
        visible,
        covis,
        report,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Perturbs the ground truth by the configured magnitudes and runs the
/// pipeline.
pub fn run_trial(scene: &SyntheticScene, cfg: &TrialConfig, perturb_seed: u64) -> Result<TrialResult> {
    let initial = perturb_poses(&scene.poses, cfg.rot_deg, cfg.trans_cm, perturb_seed);
    run_from(scene, initial, cfg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VariantStats {
    pub rot_mean: f64,
    pub rot_std: f64,
    pub trans_mean: f64,
    pub trans_std: f64,
    pub runtime_s: f64,
    pub runs: usize,
    pub failures: usize,
    pub monotone: bool,
}

fn stats(errors: &[PoseError], runtime: f64, failures: usize, monotone: bool) -> VariantStats {
    let n = errors.len();
    let mean = |f: &dyn Fn(&PoseError) -> f64| errors.iter().map(f).sum::<f64>() / n.max(1) as f64;
    let std = |f: &dyn Fn(&PoseError) -> f64, m: f64| {
        (errors.iter().map(|e| (f(e) - m).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
    };
    let rot_mean = mean(&|e| e.rotation_deg);
    let trans_mean = mean(&|e| e.translation_cm);
    VariantStats {
        rot_mean,
        rot_std: std(&|e| e.rotation_deg, rot_mean),
        trans_mean,
        trans_std: std(&|e| e.translation_cm, trans_mean),
        runtime_s: runtime,
        runs: n,
        failures,
        monotone,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sigma: f64,
    pub graph: VariantStats,
    pub naive: VariantStats,
}

/// For each noise level and seed: one scene, one perturbation, and both
/// co-visibility variants from the same initial poses. Per-seed statistics
/// are over per-trial mean errors; failing cells are counted, not fatal.
pub fn run_ablation(sigmas: &[f64], scene: &SceneParams, cfg: &TrialConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut per: [(Vec<PoseError>, f64, usize, bool); 2] = [(Vec::new(), 0.0, 0, true), (Vec::new(), 0.0, 0, true)];
        for &seed in seeds {
            let params = SceneParams {
                noise_sigma: sigma,
                seed,
                ..scene.clone()
            };
            let sc = generate_sphere_scene(&params)?;
            let initial = perturb_poses(&sc.poses, cfg.rot_deg, cfg.trans_cm, seed ^ 0x5eed);
            for (slot, mode) in [CovisMode::Graph, CovisMode::Naive].into_iter().enumerate() {
                let c = TrialConfig {
                    covis_mode: mode,
                    ..cfg.clone()
                };
                match run_from(&sc, initial.clone(), &c) {
                    Ok(r) => {
                        per[slot].0.push(r.mean_final());
                        per[slot].1 += r.runtime_s;
                        per[slot].3 &= r.report.is_monotone();
                    }
                    Err(e) => {
                        log::warn!("sigma {sigma} seed {seed} {mode:?}: {e}");
                        per[slot].2 += 1;
                    }
                }
            }
        }
        let [g, n] = per;
        rows.push(AblationRow {
            sigma,
            graph: stats(&g.0, g.1, g.2, g.3),
            naive: stats(&n.0, n.1, n.2, n.3),
        });
    }
    Ok(rows)
}

pub const ABLATION_COLUMNS: [&str; 15] = [
    "sigma_m",
    "graph_rot_mean_deg",
    "graph_rot_std_deg",
    "graph_trans_mean_cm",
    "graph_trans_std_cm",
    "graph_runtime_s",
    "graph_failures",
    "graph_monotone",
    "naive_rot_mean_deg",
    "naive_rot_std_deg",
    "naive_trans_mean_cm",
    "naive_trans_std_cm",
    "naive_runtime_s",
    "naive_failures",
    "naive_monotone",
];

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = ABLATION_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        write!(out, "{}", r.sigma).unwrap();
        for v in [&r.graph, &r.naive] {
            write!(
                out,
                ",{:.6},{:.6},{:.6},{:.6},{:.3},{},{}",
                v.rot_mean, v.rot_std, v.trans_mean, v.trans_std, v.runtime_s, v.failures, v.monotone
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}
