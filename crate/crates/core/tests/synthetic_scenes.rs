use trackcouple::losses::LossConfig;
use trackcouple::synth::{generate, CameraPathKind, MotionKind, NoiseLevels, SceneConfig};

#[test]
fn same_seed_same_scene() {
    for kind in [CameraPathKind::Orbit, CameraPathKind::Line, CameraPathKind::RandomWalk] {
        let mut cfg = SceneConfig { seed: 5, ..Default::default() };
        cfg.camera.kind = kind;
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = generate(&SceneConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(generate(&cfg).unwrap().estimates.poses, other.estimates.poses);
    }
}

#[test]
fn pseudo_pixels_recover_ground_truth_positions() {
    for kind in [MotionKind::Linear, MotionKind::Sinusoidal] {
        let mut cfg = SceneConfig::default();
        cfg.motion.kind = kind;
        let scene = generate(&cfg).unwrap();
        let (n, t) = (scene.pseudo.n_tracks, scene.pseudo.n_frames);
        for i in 0..n {
            for f in 0..t {
                let k = i * t + f;
                let p = scene.gt_grids[f].sample(scene.pseudo.pixels[k]).unwrap();
                assert!((p - scene.gt_tracks.points[k]).norm() < 1e-3, "track {i} frame {f}");
            }
        }
    }
}

#[test]
fn static_points_are_fixed_in_the_world_and_move_in_the_camera() {
    let scene = generate(&SceneConfig::default()).unwrap();
    let w = &scene.gt_world;
    let mut moved = false;
    for i in (0..scene.gt_tracks.n_tracks).filter(|&i| !scene.is_dynamic[i]) {
        for f in 1..scene.gt_tracks.n_frames {
            assert_eq!(w.point(i, f), w.point(i, 0));
            moved |= (scene.gt_tracks.point(i, f) - scene.gt_tracks.point(i, 0)).norm() > 1e-3;
        }
    }
    assert!(moved, "a moving camera must move static points in camera coordinates");
}

#[test]
fn zero_noise_estimates_are_ground_truth() {
    let cfg = SceneConfig {
        noise: NoiseLevels::default(),
        ..Default::default()
    };
    let scene = generate(&cfg).unwrap();
    assert_eq!(scene.estimates.grids, scene.gt_grids);
    assert_eq!(scene.estimates.tracks.points, scene.gt_tracks.points);
}

#[test]
fn fully_static_scene_masks_everything_static() {
    let scene = generate(&SceneConfig {
        n_dynamic: 0,
        ..Default::default()
    })
    .unwrap();
    assert!(scene.static_mask(&LossConfig::default()).iter().all(|&m| m));
    assert!(scene.is_dynamic.iter().all(|&d| !d));
}
