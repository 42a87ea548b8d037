use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use panocolor::bench::{
    ablation_csv, generate_sphere_scene, mean_error, perturb_poses, pose_error, run_ablation, PoseError,
};
use panocolor::config::PipelineConfig;
use panocolor::geometry::{slerp, Pose};
use panocolor::imaging::{load_image, load_image_index, save_image, timestamp_from_filename, Panorama};
use panocolor::optimizer::{colorize, optimize_poses, OptimizationReport};
use panocolor::pointcloud::{load_ply, load_trajectory, save_ply, save_trajectory, PlyFormat, PointCloud, Trajectory};
use panocolor::sync::{
    estimate_time_offset, motion_signal_from_trajectory, score_frames, select_keyframes, KeyframeSet,
};
use panocolor::visibility::{build_covis_graph, visible_sets, CoVisGraph, VisibleSet};
use panocolor::voxel::build_voxel_map;
use panocolor::{Error, Result};

/// Run facts written as `# key = value` comment lines ahead of the resolved
/// config, so a manifest doubles as a config file for an exact re-run.
#[derive(Default)]
struct Manifest {
    entries: Vec<(String, String)>,
    started: Option<Instant>,
}

impl Manifest {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    fn add(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn time(&mut self, key: &str, since: Instant) {
        self.add(
            &format!("time.{key}_s"),
            format!("{:.3}", since.elapsed().as_secs_f64()),
        );
    }

    fn write(&mut self, command: &str, cfg: &PipelineConfig, path: &Path) -> Result<()> {
        if let Some(t) = self.started {
            self.time("total", t);
        }
        let mut out = format!("# panocolor {} {command}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.entries {
            writeln!(out, "# {k} = {v}").unwrap();
        }
        let mut frozen = cfg.clone();
        frozen.input.dataset = absolute(&cfg.input.dataset);
        out.push_str(&frozen.to_text());
        write_file(path, out.as_bytes())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn output_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg.resolve(&cfg.output_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Frames from an index file or from a directory of `<timestamp>.png|jpg`
/// files, sorted by timestamp.
pub fn load_frames(path: &Path) -> Result<Vec<Panorama>> {
    let mut frames = if path.is_dir() {
        let mut files: Vec<(f64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                match timestamp_from_filename(&p) {
                    Some(t) => files.push((t, p)),
                    None => log::warn!("skipping {}: file name is not a timestamp", p.display()),
                }
            }
        }
        files.sort_by(|a, b| a.0.total_cmp(&b.0));
        files
            .into_iter()
            .map(|(_, p)| load_image(&p))
            .collect::<Result<Vec<_>>>()?
    } else {
        load_image_index(path)?
    };
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    if frames.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no images found at {}",
            path.display()
        )));
    }
    Ok(frames)
}

/// Camera-to-LiDAR offset from the VO and LiDAR rotation-rate signals, or the
/// configured value when estimation is off or fails.
fn time_offset(cfg: &PipelineConfig, vo: &Trajectory, lio: &Trajectory, manifest: &mut Manifest) -> f64 {
    if !cfg.sync.estimate_offset {
        manifest.add("sync.offset_source", "config");
        return cfg.sync.offset;
    }
    let dt = cfg.sync.params.dt;
    let estimate = motion_signal_from_trajectory(vo, dt).and_then(|a| {
        let b = motion_signal_from_trajectory(lio, dt)?;
        let limit = cfg.sync.params.max_offset.min(0.5 * a.span().min(b.span()));
        estimate_time_offset(&a, &b, limit)
    });
    match estimate {
        Ok(t) => {
            manifest.add("sync.offset_source", "estimated");
            t
        }
        Err(e) => {
            log::warn!(
                "time offset estimation failed ({e}); using sync.offset = {}",
                cfg.sync.offset
            );
            manifest.add("sync.offset_source", format!("config (estimation failed: {e})"));
            cfg.sync.offset
        }
    }
}

/// Keyframes with their panoramas and coarse camera-in-world poses.
struct Prepared {
    cloud: PointCloud,
    keyframes: KeyframeSet,
    images: Vec<Panorama>,
    poses: Vec<Pose>,
}

fn prepare(cfg: &PipelineConfig, manifest: &mut Manifest) -> Result<Prepared> {
    let t = Instant::now();
    let cloud = load_ply(cfg.resolve(&cfg.input.cloud))?;
    let frames = load_frames(&cfg.resolve(&cfg.input.images))?;
    let lio = load_trajectory(cfg.resolve(&cfg.input.lio_trajectory))?;
    let vo = load_trajectory(cfg.resolve(&cfg.input.vo_keyframes))?;
    let vo_path = cfg.resolve(&cfg.input.vo_trajectory);
    let vo_dense = if vo_path.exists() {
        load_trajectory(&vo_path)?
    } else {
        vo.clone()
    };
    manifest.add("input.points", cloud.len());
    manifest.add("input.frames", frames.len());
    manifest.time("load", t);

    let t = Instant::now();
    let offset = time_offset(cfg, &vo_dense, &lio, manifest);
    manifest.add("sync.offset_s", format!("{offset:.6}"));
    log::info!("camera to LiDAR time offset {offset:.6} s");
    let refs: Vec<(usize, &Panorama)> = frames.iter().enumerate().collect();
    let scores = score_frames(&refs);
    let vo_keys: Vec<(usize, f64)> = vo.samples().iter().enumerate().map(|(i, s)| (i, s.0)).collect();
    let keyframes = select_keyframes(
        &vo_keys,
        &scores,
        cfg.sync.params.window,
        &lio,
        offset,
        &cfg.sync.camera_in_sensor,
    )?;
    manifest.add("sync.keyframes", keyframes.keyframes.len());
    manifest.add(
        "sync.keyframe_frames",
        keyframes
            .keyframes
            .iter()
            .map(|k| k.frame.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    manifest.add("warnings.sync", keyframes.warnings);
    manifest.time("sync", t);
    if keyframes.keyframes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 keyframes, selected {}",
            keyframes.keyframes.len()
        )));
    }
    let images = keyframes.keyframes.iter().map(|k| frames[k.frame].clone()).collect();
    let poses = keyframes.keyframes.iter().map(|k| k.pose).collect();
    Ok(Prepared {
        cloud,
        keyframes,
        images,
        poses,
    })
}

struct Refined {
    visible: Vec<VisibleSet>,
    covis: CoVisGraph,
    /// Camera-in-world.
    poses: Vec<Pose>,
    report: OptimizationReport,
}

fn refine(cfg: &PipelineConfig, prep: &Prepared, manifest: &mut Manifest) -> Result<Refined> {
    let t = Instant::now();
    let map = build_voxel_map(&prep.cloud, &cfg.voxel)?;
    manifest.add("voxel.leaves", map.len());
    let eyes: Vec<_> = prep.poses.iter().map(|p| *p.translation()).collect();
    let visible = visible_sets(&prep.cloud, &map, &eyes, &cfg.hpr)?;
    let covis = build_covis_graph(&visible, cfg.threshold_fraction, &map, cfg.covis_mode)?;
    manifest.add(
        "visibility.visible_points",
        visible.iter().map(|v| v.len()).sum::<usize>(),
    );
    manifest.add("covis.edges", covis.edges.len());
    manifest.add("covis.covisible_points", covis.covisible_point_count());
    manifest.time("visibility", t);

    let t = Instant::now();
    let world_to_cam: Vec<Pose> = prep.poses.iter().map(Pose::inverse).collect();
    let (opt, _, report) = optimize_poses(&prep.cloud, &covis, &prep.images, &world_to_cam, &cfg.optimizer)?;
    manifest.add("optimizer.iterations", report.iterations.len());
    manifest.add("optimizer.monotone", report.is_monotone());
    manifest.add("warnings.frozen_frames", report.frozen.len());
    if let (Some(first), Some(last)) = (report.iterations.first(), report.iterations.last()) {
        manifest.add("optimizer.first_loss", format!("{:.6e}", first.global_loss));
        manifest.add("optimizer.final_loss", format!("{:.6e}", last.global_loss));
    }
    manifest.time("optimize", t);
    Ok(Refined {
        visible,
        covis,
        poses: opt.iter().map(Pose::inverse).collect(),
        report,
    })
}

fn write_refinement(dir: &Path, prep: &Prepared, refined: &Refined) -> Result<()> {
    let samples = prep
        .keyframes
        .keyframes
        .iter()
        .zip(&refined.poses)
        .map(|(k, p)| (k.timestamp, *p))
        .collect();
    save_trajectory(&Trajectory::new(samples)?, dir.join("optimized_poses.txt"))?;
    write_file(&dir.join("report.csv"), refined.report.to_csv().as_bytes())?;
    write_file(&dir.join("report.log"), refined.report.to_log().as_bytes())?;
    write_file(&dir.join("covisible.txt"), refined.covis.dump_covisible().as_bytes())
}

pub fn cmd_optimize(cfg: &PipelineConfig) -> Result<()> {
    let mut manifest = Manifest::new();
    let dir = output_dir(cfg)?;
    let prep = prepare(cfg, &mut manifest)?;
    let refined = refine(cfg, &prep, &mut manifest)?;
    write_refinement(&dir, &prep, &refined)?;
    manifest.write("optimize", cfg, &dir.join("manifest.txt"))
}

pub fn cmd_colorize(cfg: &PipelineConfig) -> Result<()> {
    let mut manifest = Manifest::new();
    let dir = output_dir(cfg)?;
    let prep = prepare(cfg, &mut manifest)?;
    let refined = refine(cfg, &prep, &mut manifest)?;
    write_refinement(&dir, &prep, &refined)?;

    let t = Instant::now();
    let world_to_cam: Vec<Pose> = refined.poses.iter().map(Pose::inverse).collect();
    let out = colorize(
        &prep.cloud,
        &refined.visible,
        &prep.images,
        &world_to_cam,
        cfg.colorize_mode,
        cfg.optimizer.trim_sigma,
        cfg.sentinel,
    )?;
    save_ply(&out.cloud, dir.join("colored.ply"), PlyFormat::BinaryLittleEndian)?;
    manifest.add("colorize.uncolored_points", out.uncolored);
    manifest.time("colorize", t);
    manifest.write("colorize", cfg, &dir.join("manifest.txt"))
}

const SIM_TRAJECTORY_STEP: f64 = 0.02;
const SIM_TRAJECTORY_MARGIN: f64 = 0.5;

/// Dense trajectory through `keys`: eased interpolation between consecutive
/// keys (zero rate at each key) and static margins before and after.
fn dense_trajectory(keys: &[(f64, Pose)]) -> Vec<(f64, Pose)> {
    let (t0, p0) = keys[0];
    let (tn, pn) = keys[keys.len() - 1];
    let mut out = vec![(t0 - SIM_TRAJECTORY_MARGIN, p0)];
    for w in keys.windows(2) {
        let ((ta, a), (tb, b)) = (w[0], w[1]);
        let n = ((tb - ta) / SIM_TRAJECTORY_STEP).ceil().max(1.0) as usize;
        for k in 0..n {
            let s = k as f64 / n as f64;
            let e = s * s * (3.0 - 2.0 * s);
            let q = slerp(a.rotation(), b.rotation(), e);
            let t = a.translation() + (b.translation() - a.translation()) * e;
            out.push((ta + s * (tb - ta), Pose::new(q, t)));
        }
    }
    out.push((tn, pn));
    out.push((tn + SIM_TRAJECTORY_MARGIN, pn));
    out
}

/// Writes a synthetic dataset into `input.dataset`.
///
/// Frame `i` is captured at camera time `i * frame_interval`. The LiDAR
/// trajectory runs through the perturbed poses on the LiDAR clock (shifted by
/// `simulate.time_offset`). The VO trajectory runs through the ground-truth
/// poses on the camera clock; its keyframes are the frame times.
pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<()> {
    let mut manifest = Manifest::new();
    let sim = &cfg.simulate;
    let t = Instant::now();
    let scene = generate_sphere_scene(&sim.scene)?;
    manifest.time("generate", t);
    let dir = cfg.resolve(Path::new(""));
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let times: Vec<f64> = (0..scene.poses.len()).map(|i| i as f64 * sim.frame_interval).collect();
    let mut index = String::new();
    for (i, img) in scene.images.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        save_image(img, images_dir.join(&name))?;
        writeln!(index, "{} {name}", times[i]).unwrap();
    }
    write_file(&images_dir.join("index.txt"), index.as_bytes())?;

    let mut bare = scene.cloud.clone();
    let truth_colors = bare.colors.take();
    save_ply(&bare, dir.join("cloud.ply"), PlyFormat::BinaryLittleEndian)?;
    if truth_colors.is_some() {
        save_ply(
            &scene.cloud,
            dir.join("cloud_true_colors.ply"),
            PlyFormat::BinaryLittleEndian,
        )?;
    }

    let perturbed = perturb_poses(&scene.poses, sim.rot_deg, sim.trans_cm, sim.perturb_seed);
    let sensor_from_camera = cfg.sync.camera_in_sensor.inverse();
    let lio: Vec<(f64, Pose)> = perturbed
        .iter()
        .zip(&times)
        .map(|(p, &t)| (t + sim.time_offset, p.compose(&sensor_from_camera)))
        .collect();
    save_trajectory(
        &Trajectory::new(dense_trajectory(&lio))?,
        dir.join("lio_trajectory.txt"),
    )?;
    let gt: Vec<(f64, Pose)> = times.iter().copied().zip(scene.poses.iter().copied()).collect();
    save_trajectory(&Trajectory::new(gt.clone())?, dir.join("ground_truth.txt"))?;
    save_trajectory(&Trajectory::new(dense_trajectory(&gt))?, dir.join("vo_trajectory.txt"))?;
    save_trajectory(&Trajectory::new(gt)?, dir.join("vo_keyframes.txt"))?;

    manifest.add("scene.points", scene.cloud.len());
    manifest.add("scene.views", scene.poses.len());
    manifest.add("scene.render_holes", scene.holes);
    let init: Vec<PoseError> = perturbed
        .iter()
        .zip(&scene.poses)
        .map(|(a, b)| pose_error(a, b))
        .collect();
    let m = mean_error(&init);
    manifest.add("scene.initial_rotation_error_deg", format!("{:.6}", m.rotation_deg));
    manifest.add("scene.initial_translation_error_cm", format!("{:.6}", m.translation_cm));
    let mut frozen = cfg.clone();
    frozen.input.dataset = absolute(&dir);
    manifest.write("simulate", &frozen, &dir.join("manifest.txt"))
}

/// Per-frame errors of `estimate` against `truth` interpolated at the
/// estimate's timestamps.
pub fn trajectory_errors(estimate: &Trajectory, truth: &Trajectory) -> Result<Vec<(f64, PoseError)>> {
    estimate
        .samples()
        .iter()
        .map(|(t, p)| Ok((*t, pose_error(p, &truth.interpolate(*t)?))))
        .collect()
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<()> {
    let mut manifest = Manifest::new();
    let dir = output_dir(cfg)?;
    let est_path = cfg.resolve(&cfg.input.estimate);
    if cfg.evaluate.ablation && !est_path.exists() {
        log::info!("no estimate at {}; running the ablation only", est_path.display());
    } else {
        let estimate = load_trajectory(&est_path)?;
        let truth = load_trajectory(cfg.resolve(&cfg.input.ground_truth))?;
        let errors = trajectory_errors(&estimate, &truth)?;
        let mut csv = String::from("frame,timestamp,rotation_deg,translation_cm\n");
        println!(
            "{:>5} {:>14} {:>12} {:>14}",
            "frame", "timestamp", "rot_deg", "trans_cm"
        );
        for (i, (t, e)) in errors.iter().enumerate() {
            println!("{i:>5} {t:>14.6} {:>12.4} {:>14.3}", e.rotation_deg, e.translation_cm);
            writeln!(csv, "{i},{t},{:.9},{:.9}", e.rotation_deg, e.translation_cm).unwrap();
        }
        let m = mean_error(&errors.iter().map(|e| e.1).collect::<Vec<_>>());
        println!(
            "{:>5} {:>14} {:>12.4} {:>14.3}",
            "mean", "", m.rotation_deg, m.translation_cm
        );
        writeln!(csv, "mean,,{:.9},{:.9}", m.rotation_deg, m.translation_cm).unwrap();
        write_file(&dir.join("evaluation.csv"), csv.as_bytes())?;
        manifest.add("evaluate.frames", errors.len());
        manifest.add("evaluate.mean_rotation_deg", format!("{:.6}", m.rotation_deg));
        manifest.add("evaluate.mean_translation_cm", format!("{:.6}", m.translation_cm));
    }
    if cfg.evaluate.ablation {
        let t = Instant::now();
        let seeds: Vec<u64> = (0..cfg.evaluate.seeds as u64).collect();
        let rows = run_ablation(&cfg.evaluate.sigmas, &cfg.simulate.scene, &cfg.trial(), &seeds)?;
        write_file(&dir.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
        println!("{:>8} {:>22} {:>22}", "sigma_m", "graph rot/trans", "naive rot/trans");
        for r in &rows {
            println!(
                "{:>8.3} {:>10.4} {:>11.3} {:>10.4} {:>11.3}",
                r.sigma, r.graph.rot_mean, r.graph.trans_mean, r.naive.rot_mean, r.naive.trans_mean
            );
        }
        manifest.time("ablation", t);
    }
    manifest.write("evaluate", cfg, &dir.join("manifest.txt"))
}
