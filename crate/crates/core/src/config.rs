//! Flat `section.key = value` configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::bench::{SceneParams, TrialConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::optimizer::{ColorMode, OptimizerParams, DEFAULT_SENTINEL};
use crate::sync::SyncParams;
use crate::visibility::{CovisMode, HprParams};
use crate::voxel::VoxelParams;

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn format_value(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for ColorMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(ColorMode::Mean),
            "robust" => Some(ColorMode::Robust),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        match self {
            ColorMode::Mean => "mean",
            ColorMode::Robust => "robust",
        }
        .into()
    }
}

impl ConfigValue for CovisMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "graph" => Some(CovisMode::Graph),
            "naive" => Some(CovisMode::Naive),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        match self {
            CovisMode::Graph => "graph",
            CovisMode::Naive => "naive",
        }
        .into()
    }
}

fn numbers(s: &str) -> Option<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect()
}

impl ConfigValue for [u8; 3] {
    fn parse_value(s: &str) -> Option<Self> {
        let v: Vec<u8> = s.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    }
    fn format_value(&self) -> String {
        format!("{} {} {}", self[0], self[1], self[2])
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Option<Self> {
        numbers(s)
    }
    fn format_value(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

/// `tx ty tz qx qy qz qw`, as in trajectory files.
impl ConfigValue for Pose {
    fn parse_value(s: &str) -> Option<Self> {
        let v = numbers(s)?;
        if v.len() != 7 {
            return None;
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return None;
        }
        Some(Pose::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[0], v[1], v[2]),
        ))
    }
    fn format_value(&self) -> String {
        let t = self.translation();
        let q = self.rotation().quaternion();
        format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputPaths {
    /// Base directory for the relative paths below.
    pub dataset: PathBuf,
    pub cloud: PathBuf,
    /// Image index file or a directory of `<t>.png|jpg` images.
    pub images: PathBuf,
    pub lio_trajectory: PathBuf,
    pub vo_keyframes: PathBuf,
    /// Dense VO trajectory for the motion signal; the keyframe file is used
    /// when this file does not exist.
    pub vo_trajectory: PathBuf,
    pub ground_truth: PathBuf,
    pub estimate: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncConfig {
    pub params: SyncParams,
    pub estimate_offset: bool,
    /// Used when `estimate_offset` is off or estimation fails.
    pub offset: f64,
    pub camera_in_sensor: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateConfig {
    pub scene: SceneParams,
    pub rot_deg: f64,
    pub trans_cm: f64,
    pub perturb_seed: u64,
    pub frame_interval: f64,
    pub time_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateConfig {
    pub ablation: bool,
    pub sigmas: Vec<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub input: InputPaths,
    pub output_dir: PathBuf,
    pub voxel: VoxelParams,
    pub hpr: HprParams,
    pub threshold_fraction: f64,
    pub covis_mode: CovisMode,
    pub optimizer: OptimizerParams,
    pub colorize_mode: ColorMode,
    pub sentinel: [u8; 3],
    pub sync: SyncConfig,
    pub simulate: SimulateConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: InputPaths {
                dataset: PathBuf::from("."),
                cloud: PathBuf::from("cloud.ply"),
                images: PathBuf::from("images/index.txt"),
                lio_trajectory: PathBuf::from("lio_trajectory.txt"),
                vo_keyframes: PathBuf::from("vo_keyframes.txt"),
                vo_trajectory: PathBuf::from("vo_trajectory.txt"),
                ground_truth: PathBuf::from("ground_truth.txt"),
                estimate: PathBuf::from("output/optimized_poses.txt"),
            },
            output_dir: PathBuf::from("output"),
            voxel: VoxelParams::default(),
            hpr: HprParams::default(),
            threshold_fraction: 0.5,
            covis_mode: CovisMode::Graph,
            optimizer: OptimizerParams::default(),
            colorize_mode: ColorMode::Robust,
            sentinel: DEFAULT_SENTINEL,
            sync: SyncConfig {
                params: SyncParams::default(),
                estimate_offset: true,
                offset: 0.0,
                camera_in_sensor: Pose::identity(),
            },
            simulate: SimulateConfig {
                scene: SceneParams::default(),
                rot_deg: 5.0,
                trans_cm: 10.0,
                perturb_seed: 1,
                frame_interval: 1.0,
                time_offset: 0.0,
            },
            evaluate: EvaluateConfig {
                ablation: false,
                sigmas: vec![0.01, 0.02, 0.05, 0.10],
                seeds: 5,
            },
        }
    }
}

macro_rules! config_keys {
    ($( $key:literal => $($field:tt).+ , $doc:literal; )*) => {
        /// Every accepted key with a one-line description.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl PipelineConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("invalid value `{value}` for `{key}`"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.format_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "input.dataset" => input.dataset, "base directory for relative input paths";
    "input.cloud" => input.cloud, "point cloud PLY";
    "input.images" => input.images, "image index file (`t path` lines) or image directory";
    "input.lio_trajectory" => input.lio_trajectory, "LiDAR trajectory, TUM format";
    "input.vo_keyframes" => input.vo_keyframes, "VO keyframes, TUM format";
    "input.vo_trajectory" => input.vo_trajectory, "dense VO trajectory for time sync, TUM format (optional)";
    "input.ground_truth" => input.ground_truth, "ground-truth camera poses, TUM format";
    "input.estimate" => input.estimate, "trajectory to evaluate, TUM format";
    "output.dir" => output_dir, "output directory";
    "voxel.root_size" => voxel.root_size, "root cell edge (m)";
    "voxel.min_voxel_size" => voxel.min_voxel_size, "smallest leaf edge (m)";
    "voxel.plane_ratio_max" => voxel.plane_ratio_max, "largest eigenvalue ratio accepted as planar";
    "voxel.min_points" => voxel.min_points, "points needed before a leaf may be accepted as planar";
    "visibility.gamma" => hpr.gamma, "spherical flip exponent";
    "visibility.max_range" => hpr.max_range, "visibility range (m)";
    "covis.threshold_fraction" => threshold_fraction, "edge threshold as a fraction of the smaller visible set";
    "covis.mode" => covis_mode, "graph | naive";
    "optimizer.max_outer" => optimizer.max_outer, "outer alternations per pyramid level";
    "optimizer.max_inner" => optimizer.max_inner, "descent trials per frame and outer iteration";
    "optimizer.initial_step" => optimizer.initial_step, "initial step length (rad)";
    "optimizer.rel_tol" => optimizer.rel_tol, "relative loss decrease that ends a level";
    "optimizer.mode" => optimizer.mode, "mean | robust colour step";
    "optimizer.trim_sigma" => optimizer.trim_sigma, "robust trim in MADs";
    "optimizer.pyramid_levels" => optimizer.pyramid_levels, "image pyramid levels";
    "colorize.mode" => colorize_mode, "mean | robust final colours";
    "colorize.sentinel" => sentinel, "RGB of points no frame sees";
    "sync.dt" => sync.params.dt, "motion signal step (s)";
    "sync.max_offset" => sync.params.max_offset, "largest searched time offset (s)";
    "sync.window_minus" => sync.params.window.0, "keyframe window start relative to VO keyframe (s)";
    "sync.window_plus" => sync.params.window.1, "keyframe window end relative to VO keyframe (s)";
    "sync.estimate_offset" => sync.estimate_offset, "estimate the camera to LiDAR time offset";
    "sync.offset" => sync.offset, "fixed time offset (s) when not estimated";
    "sync.camera_in_sensor" => sync.camera_in_sensor, "camera pose in the trajectory sensor frame, `tx ty tz qx qy qz qw`";
    "simulate.radius" => simulate.scene.radius, "sphere radius (m)";
    "simulate.n_points" => simulate.scene.n_points, "cloud size";
    "simulate.n_views" => simulate.scene.n_views, "number of panoramas";
    "simulate.height" => simulate.scene.height, "panorama height (px)";
    "simulate.width" => simulate.scene.width, "panorama width (px)";
    "simulate.view_radius" => simulate.scene.view_radius, "views lie within this distance of the centre (m)";
    "simulate.noise_sigma" => simulate.scene.noise_sigma, "radial cloud noise (m)";
    "simulate.seed" => simulate.scene.seed, "scene seed";
    "simulate.rot_deg" => simulate.rot_deg, "initial rotation error (deg)";
    "simulate.trans_cm" => simulate.trans_cm, "initial translation error (cm)";
    "simulate.perturb_seed" => simulate.perturb_seed, "perturbation seed";
    "simulate.frame_interval" => simulate.frame_interval, "time between panoramas (s)";
    "simulate.time_offset" => simulate.time_offset, "LiDAR clock minus camera clock (s)";
    "evaluate.ablation" => evaluate.ablation, "run the co-visibility ablation";
    "evaluate.sigmas" => evaluate.sigmas, "ablation noise levels (m), comma separated";
    "evaluate.seeds" => evaluate.seeds, "ablation seeds per noise level";
}

impl PipelineConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.voxel.min_voxel_size > 0.0 && self.voxel.root_size >= self.voxel.min_voxel_size) {
            return bad("voxel sizes need root_size >= min_voxel_size > 0".into());
        }
        if !(self.hpr.gamma > 0.0 && self.hpr.max_range > 0.0) {
            return bad("visibility.gamma and visibility.max_range must be positive".into());
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return bad("covis.threshold_fraction must lie in (0, 1]".into());
        }
        if !(self.optimizer.initial_step > 0.0) || self.optimizer.pyramid_levels == 0 {
            return bad("optimizer.initial_step must be positive and pyramid_levels >= 1".into());
        }
        let (a, b) = self.sync.params.window;
        if !(a <= 0.0 && b >= 0.0 && self.sync.params.dt > 0.0) {
            return bad("sync window must bracket 0 and sync.dt must be positive".into());
        }
        Ok(())
    }

    /// Resolved configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.input.dataset.join(p)
        }
    }

    pub fn trial(&self) -> TrialConfig {
        TrialConfig {
            voxel: self.voxel,
            hpr: self.hpr,
            threshold_fraction: self.threshold_fraction,
            covis_mode: self.covis_mode,
            optimizer: self.optimizer,
            rot_deg: self.simulate.rot_deg,
            trans_cm: self.simulate.trans_cm,
        }
    }
}
