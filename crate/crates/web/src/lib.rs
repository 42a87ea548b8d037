//! Browser demo: synthetic sphere scene, hidden point removal overlay and
//! photometric pose refinement, exported through wasm-bindgen.

use panocolor::bench::{generate_sphere_scene, perturb_poses, run_from, SceneParams, SyntheticScene, TrialConfig};
use panocolor::geometry::{Equirect, Pose};
use panocolor::visibility::{hidden_point_removal, HprParams};
use panocolor::voxel::{build_voxel_map, VoxelMap};
use wasm_bindgen::prelude::*;

const VISIBLE: [u8; 3] = [40, 220, 90];
const HIDDEN: [u8; 3] = [230, 50, 40];

/// Scene state kept between calls from the page.
#[wasm_bindgen]
pub struct Demo {
    scene: SyntheticScene,
    map: VoxelMap,
    visible: usize,
    trace: Vec<f64>,
    errors: [f64; 6],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub initial_rotation_deg: f64,
    pub initial_translation_cm: f64,
    pub final_rotation_deg: f64,
    pub final_translation_cm: f64,
    pub aligned_rotation_deg: f64,
    pub aligned_translation_cm: f64,
}

impl Demo {
    pub fn build(
        n_points: usize,
        n_views: usize,
        height: usize,
        width: usize,
        noise_cm: f64,
        seed: u64,
    ) -> panocolor::Result<Demo> {
        let scene = generate_sphere_scene(&SceneParams {
            n_points,
            n_views,
            height,
            width,
            noise_sigma: noise_cm / 100.0,
            seed,
            ..Default::default()
        })?;
        let map = build_voxel_map(&scene.cloud, &TrialConfig::default().voxel)?;
        Ok(Demo {
            scene,
            map,
            visible: 0,
            trace: Vec::new(),
            errors: [0.0; 6],
        })
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    fn image_rgba(&self, view: usize) -> Vec<u8> {
        let img = &self.scene.images[view.min(self.scene.images.len() - 1)];
        img.pixels().iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    /// Panorama of `view` dimmed, with each point within range drawn green
    /// if visible and red if hidden.
    pub fn visibility_overlay(&mut self, view: usize, gamma: f64) -> panocolor::Result<Vec<u8>> {
        let view = view.min(self.scene.images.len() - 1);
        let pose = self.scene.poses[view];
        let params = HprParams {
            gamma,
            ..HprParams::default()
        };
        let vis = hidden_point_removal(&self.scene.cloud, &self.map, pose.translation(), &params, view)?;
        self.visible = vis.len();
        let img = &self.scene.images[view];
        let (h, w) = (img.height(), img.width());
        let mut rgba: Vec<u8> = img
            .pixels()
            .iter()
            .flat_map(|p| [p[0] / 3, p[1] / 3, p[2] / 3, 255])
            .collect();
        let camera = Equirect::new(h, w);
        let to_cam = pose.inverse();
        for (k, p) in self.scene.cloud.positions.iter().enumerate() {
            if (p - pose.translation()).norm() > params.max_range {
                continue;
            }
            let Some(px) = camera.project(&to_cam.transform_point(p)) else {
                continue;
            };
            let (r, c) = ((px.u.round() as usize).min(h - 1), (px.v.round() as usize) % w);
            let color = if vis.contains(k as u32) { VISIBLE } else { HIDDEN };
            rgba[(r * w + c) * 4..(r * w + c) * 4 + 3].copy_from_slice(&color);
        }
        Ok(rgba)
    }

    /// Perturbs the true poses, refines them and keeps the loss trace.
    pub fn refine(&mut self, rot_deg: f64, trans_cm: f64, max_outer: usize, seed: u64) -> panocolor::Result<Summary> {
        let mut cfg = TrialConfig {
            rot_deg,
            trans_cm,
            ..TrialConfig::default()
        };
        cfg.optimizer.max_outer = max_outer.max(1);
        let initial = perturb_poses(&self.scene.poses, rot_deg, trans_cm, seed);
        let r = run_from(&self.scene, initial, &cfg)?;
        self.trace = r.report.iterations.iter().map(|it| it.global_loss).collect();
        let (i, f, a) = (
            panocolor::bench::mean_error(&r.initial_errors),
            r.mean_final(),
            r.mean_aligned(),
        );
        let s = Summary {
            initial_rotation_deg: i.rotation_deg,
            initial_translation_cm: i.translation_cm,
            final_rotation_deg: f.rotation_deg,
            final_translation_cm: f.translation_cm,
            aligned_rotation_deg: a.rotation_deg,
            aligned_translation_cm: a.translation_cm,
        };
        self.errors = [
            s.initial_rotation_deg,
            s.initial_translation_cm,
            s.final_rotation_deg,
            s.final_translation_cm,
            s.aligned_rotation_deg,
            s.aligned_translation_cm,
        ];
        Ok(s)
    }

    pub fn true_poses(&self) -> &[Pose] {
        &self.scene.poses
    }
}

fn js_err(e: panocolor::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_points: usize,
        n_views: usize,
        height: usize,
        width: usize,
        noise_cm: f64,
        seed: u32,
    ) -> Result<Demo, JsError> {
        Demo::build(n_points, n_views, height, width, noise_cm, seed as u64).map_err(js_err)
    }

    pub fn height(&self) -> usize {
        self.scene.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.scene.images[0].width()
    }

    #[wasm_bindgen(js_name = viewCount)]
    pub fn view_count(&self) -> usize {
        self.scene.images.len()
    }

    #[wasm_bindgen(js_name = pointCount)]
    pub fn point_count(&self) -> usize {
        self.scene.cloud.len()
    }

    /// RGBA bytes of a rendered panorama, row-major.
    pub fn panorama(&self, view: usize) -> Vec<u8> {
        self.image_rgba(view)
    }

    pub fn visibility(&mut self, view: usize, gamma: f64) -> Result<Vec<u8>, JsError> {
        self.visibility_overlay(view, gamma).map_err(js_err)
    }

    #[wasm_bindgen(js_name = visibleCount)]
    pub fn visible_count(&self) -> usize {
        self.visible
    }

    /// Runs the refinement; returns the global loss at each outer iteration.
    pub fn optimize(&mut self, rot_deg: f64, trans_cm: f64, max_outer: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.refine(rot_deg, trans_cm, max_outer, seed as u64).map_err(js_err)?;
        Ok(self.trace.clone())
    }

    /// Mean errors of the last refinement: initial, final and final with the
    /// common rotation removed, each as degrees then centimetres.
    pub fn errors(&self) -> Vec<f64> {
        self.errors.to_vec()
    }
}
