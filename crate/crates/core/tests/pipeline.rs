use panocolor::bench::{generate_sphere_scene, run_trial, SceneParams, TrialConfig};
use panocolor::geometry::Pose;
use panocolor::imaging::{load_image, save_image};
use panocolor::optimizer::{colorize, ColorMode, DEFAULT_SENTINEL};
use panocolor::pointcloud::{load_ply, load_trajectory, save_ply, save_trajectory, PlyFormat, Trajectory};
use panocolor::visibility::{dump_visible_sets, parse_visible_dump};

fn small_scene(seed: u64) -> panocolor::bench::SyntheticScene {
    generate_sphere_scene(&SceneParams {
        n_points: 6000,
        n_views: 4,
        height: 96,
        width: 192,
        noise_sigma: 0.01,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn files_on_disk_feed_the_pipeline() {
    let scene = small_scene(1);
    let dir = tempfile::tempdir().unwrap();
    let cloud_path = dir.path().join("cloud.ply");
    save_ply(&scene.cloud, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();
    let img_path = dir.path().join("0.png");
    save_image(&scene.images[0], &img_path).unwrap();
    let traj = Trajectory::new(scene.poses.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect()).unwrap();
    let traj_path = dir.path().join("poses.txt");
    save_trajectory(&traj, &traj_path).unwrap();

    let loaded = load_ply(&cloud_path).unwrap();
    assert_eq!(loaded.colors, scene.cloud.colors);
    for (a, b) in loaded.positions.iter().zip(&scene.cloud.positions) {
        assert_eq!(*a, b.map(|v| v as f32 as f64));
    }
    assert_eq!(load_image(&img_path).unwrap().pixels(), scene.images[0].pixels());
    let back = load_trajectory(&traj_path).unwrap();
    for ((_, a), b) in back.samples().iter().zip(&scene.poses) {
        assert!(a.rotation_angle_to(b) < 1e-12);
        assert_eq!(a.translation(), b.translation());
    }
}

#[test]
fn refinement_then_colorization() {
    let scene = small_scene(2);
    let cfg = TrialConfig {
        rot_deg: 3.0,
        trans_cm: 5.0,
        ..Default::default()
    };
    let r = run_trial(&scene, &cfg, 3).unwrap();
    assert!(r.report.is_monotone());
    let first = r.report.iterations.first().unwrap().global_loss;
    let last = r.report.iterations.last().unwrap().global_loss;
    assert!(last < first);
    assert!(r.mean_aligned().rotation_deg <= r.mean_final().rotation_deg + 1e-9);
    assert!(r.mean_final().translation_cm < 5.0);

    let w2c: Vec<Pose> = r.optimized.iter().map(Pose::inverse).collect();
    let out = colorize(
        &scene.cloud,
        &r.visible,
        &scene.images,
        &w2c,
        ColorMode::Robust,
        3.0,
        DEFAULT_SENTINEL,
    )
    .unwrap();
    assert_eq!(out.cloud.len(), scene.cloud.len());
    let truth = scene.cloud.colors.as_ref().unwrap();
    let got = out.cloud.colors.as_ref().unwrap();
    let mean_abs: f64 = truth
        .iter()
        .zip(got)
        .map(|(a, b)| (0..3).map(|k| (a[k] as f64 - b[k] as f64).abs()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / truth.len() as f64;
    assert!(mean_abs < 12.0, "mean colour error {mean_abs}");
}

#[test]
fn visible_dump_round_trips() {
    let scene = small_scene(3);
    let r = run_trial(
        &scene,
        &TrialConfig {
            optimizer: panocolor::optimizer::OptimizerParams {
                max_outer: 1,
                ..Default::default()
            },
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let text = dump_visible_sets(&r.visible);
    let parsed = parse_visible_dump(&text).unwrap();
    assert_eq!(parsed.len(), r.visible.len());
    for ((frame, pts), v) in parsed.iter().zip(&r.visible) {
        assert_eq!(*frame, v.frame);
        assert_eq!(pts, &v.points);
    }
    assert!(r.visible.iter().all(|v| !v.is_empty()));
}
