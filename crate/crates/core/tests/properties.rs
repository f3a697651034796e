use nalgebra::Vector3;
use proptest::prelude::*;

use trackcouple::gradcheck::random_fixture;
use trackcouple::grad::{BlockId, ParamStore, Tape};
use trackcouple::losses::{evaluate, total_loss, LossConfig, SubTerm, TermSet};
use trackcouple::metrics::depth::{depth_metrics, DepthImage, DepthOptions};
use trackcouple::metrics::pointcloud::{pointmap_metrics, CloudOptions};
use trackcouple::metrics::trajectory::{ate, rel_pose_accuracy, TrajectoryPair};
use trackcouple::optim::{optimize, OptimConfig};
use trackcouple::pose::{exp_map, log_map, relative_pose, umeyama, Pose, PoseTangent, Similarity};
use trackcouple::synth::{generate, NoiseLevels, SceneConfig};
use trackcouple::PointMapGrid;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose(rot: f64, trans: f64) -> impl Strategy<Value = Pose> {
    (vec3(rot), vec3(trans)).prop_map(|(w, v)| exp_map(&PoseTangent::new(w, v)))
}

fn max_diff(a: &Pose, b: &Pose) -> f64 {
    (a.to_homogeneous() - b.to_homogeneous()).abs().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_associative(a in pose(3.0, 5.0), b in pose(3.0, 5.0), c in pose(3.0, 5.0)) {
        prop_assert!(max_diff(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) < 1e-9);
    }

    #[test]
    fn relative_poses_cancel(ct in pose(3.0, 5.0), cx in pose(3.0, 5.0)) {
        let round = relative_pose(&ct, &cx).compose(&relative_pose(&cx, &ct));
        prop_assert!(max_diff(&round, &Pose::identity()) < 1e-9);
    }

    #[test]
    fn exp_log_round_trip(w in vec3(1.7), v in vec3(4.0)) {
        prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
        let t = log_map(&exp_map(&PoseTangent::new(w, v))).unwrap();
        prop_assert!((t.omega - w).norm() < 1e-9 && (t.upsilon - v).norm() < 1e-9);
    }

    #[test]
    fn umeyama_scale_ignores_common_rigid_motion(
        pts in prop::collection::vec(vec3(1.0), 6..20),
        noise in prop::collection::vec(vec3(0.05), 20),
        g in pose(3.0, 3.0),
        s in 0.3f64..3.0,
    ) {
        let dst: Vec<_> = pts.iter().zip(&noise).map(|(p, n)| p * s + n).collect();
        let base = umeyama(&pts, &dst, true).unwrap();
        let moved_src: Vec<_> = pts.iter().map(|p| g.transform_point(p)).collect();
        let moved_dst: Vec<_> = dst.iter().map(|p| g.transform_point(p)).collect();
        let moved = umeyama(&moved_src, &moved_dst, true).unwrap();
        prop_assert!((base.scale - moved.scale).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_non_negative_and_sum_with_weights(k in 0usize..200) {
        let f = random_fixture(11, k);
        let b = evaluate(&f.store, &f.store, &f.data, &f.cfg, TermSet::all(), None).unwrap();
        prop_assert!(b.cons_value >= 0.0 && b.cam_value >= 0.0 && b.selfsup_value >= 0.0);
        prop_assert_eq!(b.total, total_loss(&f.cfg.weights, b.cons_value, b.cam_value, b.selfsup_value));
    }

    #[test]
    fn evaluation_is_deterministic(k in 0usize..200) {
        let f = random_fixture(12, k);
        let run = || {
            let mut tape = Tape::for_store(&f.store);
            let b = evaluate(&f.store, &f.store, &f.data, &f.cfg, TermSet::all(), Some(&mut tape)).unwrap();
            (b.total.to_bits(), BlockId::ALL.map(|blk| tape.grad(blk).iter().map(|g| g.to_bits()).collect::<Vec<_>>()))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gating_a_sample_removes_exactly_its_pose_contribution(k in 0usize..200, pick in any::<prop::sample::Index>()) {
        let mut f = random_fixture(13, k);
        f.cfg.static_gating = true;
        let statics: Vec<usize> = (0..f.data.static_mask.len())
            .filter(|&s| f.data.static_mask[s] && f.data.weights[s] >= f.cfg.min_weight)
            .collect();
        prop_assume!(!statics.is_empty());
        let s = statics[pick.index(statics.len())];
        let pose_grad = |mask: Vec<bool>| {
            let mut data = f.data.clone();
            data.static_mask = mask;
            let mut tape = Tape::for_store(&f.store);
            evaluate(&f.store, &f.store, &data, &f.cfg, TermSet::only(SubTerm::CamToPoses), Some(&mut tape)).unwrap();
            tape.grad(BlockId::Poses).to_vec()
        };
        let full = pose_grad(f.data.static_mask.clone());
        let mut without = f.data.static_mask.clone();
        without[s] = false;
        let without = pose_grad(without);
        let mut only = vec![false; f.data.static_mask.len()];
        only[s] = true;
        let only = pose_grad(only);
        for ((a, b), c) in full.iter().zip(&without).zip(&only) {
            prop_assert!((a - b - c).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

/// Store with every length doubled.
fn scaled_store(store: &ParamStore, template: &trackcouple::TrackSet, s: f64) -> ParamStore {
    let grids: Vec<PointMapGrid> = store
        .grids()
        .into_iter()
        .map(|g| PointMapGrid::new(g.width(), g.height(), g.frame_index(), g.points().iter().map(|p| p * s).collect()))
        .collect();
    let mut tracks = template.clone();
    tracks.points = store.track_points().iter().map(|p| p * s).collect();
    let poses: Vec<Pose> = store
        .rel_poses()
        .iter()
        .map(|p| Pose::new(*p.rotation(), p.translation() * s))
        .collect();
    ParamStore::from_parts(&grids, &tracks, &poses, store.layout().anchor)
}

#[test]
fn loss_scales_quadratically_with_geometry() {
    for seed in 0..4 {
        let scene = generate(&SceneConfig {
            seed,
            noise: NoiseLevels {
                pointmap: 0.002,
                track: 0.002,
                pose: 0.003,
            },
            ..Default::default()
        })
        .unwrap();
        let cfg = LossConfig::default();
        let store = scene.estimate_store();
        let data = scene.supervised_data(&cfg);
        let terms = TermSet::from_toggles(&cfg.terms);
        let base = evaluate(&store, &store, &data, &cfg, terms, None).unwrap();
        assert!(base.cons_residuals.max < cfg.delta && base.cam_residuals.max < cfg.delta);

        let big = scaled_store(&store, &scene.gt_tracks, 2.0);
        let mut big_data = data.clone();
        big_data.targets = data.targets.as_ref().map(|t| t.iter().map(|p| p * 2.0).collect());
        let big_cfg = LossConfig {
            delta: 2.0 * cfg.delta,
            ..cfg
        };
        let scaled = evaluate(&big, &big, &big_data, &big_cfg, terms, None).unwrap();
        for (a, b) in [(base.cons_value, scaled.cons_value), (base.cam_value, scaled.cam_value)] {
            assert!((b - 4.0 * a).abs() <= 1e-9 * b, "seed {seed}: {b} vs 4 x {a}");
        }
    }
}

#[test]
fn optimizer_loss_never_increases() {
    for seed in 0..4 {
        let scene = generate(&SceneConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut store = scene.estimate_store();
        let r = optimize(&mut store, &scene, &OptimConfig { max_epochs: 60, ..Default::default() }).unwrap();
        let mut prev = r.initial_loss;
        for e in &r.epochs {
            assert_eq!(e.loss.total, prev, "epoch {} starts where the previous one ended", e.epoch);
            assert!(e.loss_after <= e.loss.total);
            prev = e.loss_after;
        }
        assert!(r.epochs_run() <= 60);
    }
}

fn trajectory(n: usize) -> Vec<Pose> {
    (0..n)
        .map(|t| {
            let a = 0.2 * t as f64;
            exp_map(&PoseTangent::new(Vector3::new(0.05 * a, a, 0.0), Vector3::new(a.sin(), 0.1 * a, a.cos())))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ate_ignores_similarity_of_the_estimate(
        noise in prop::collection::vec(pose(0.05, 0.05), 8),
        g in pose(3.0, 3.0),
        s in 0.2f64..5.0,
    ) {
        let gt = trajectory(8);
        let est: Vec<Pose> = gt.iter().zip(&noise).map(|(p, n)| p.compose(n)).collect();
        let sim = Similarity { scale: s, rotation: *g.rotation(), translation: *g.translation() };
        let moved: Vec<Pose> = est
            .iter()
            .map(|p| Pose::new(g.rotation() * p.rotation(), sim.apply(p.translation())))
            .collect();
        let a = ate(&TrajectoryPair::new(est, gt.clone()).unwrap(), true).unwrap();
        let b = ate(&TrajectoryPair::new(moved, gt).unwrap(), true).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn relative_accuracy_ignores_global_rigid_motion(
        noise in prop::collection::vec(pose(0.3, 0.3), 7),
        g in pose(3.0, 3.0),
    ) {
        let gt = trajectory(7);
        let est: Vec<Pose> = gt.iter().zip(&noise).map(|(p, n)| p.compose(n)).collect();
        let moved: Vec<Pose> = est.iter().map(|p| g.compose(p)).collect();
        let a = rel_pose_accuracy(&TrajectoryPair::new(est, gt.clone()).unwrap(), 30.0).unwrap();
        let b = rel_pose_accuracy(&TrajectoryPair::new(moved, gt).unwrap(), 30.0).unwrap();
        for (x, y) in [(a.rra, b.rra), (a.rta, b.rta), (a.auc, b.auc)] {
            prop_assert!((0.0..=100.0).contains(&x));
            // Thresholded counts can flip on rounding only at a boundary.
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn cloud_scores_ignore_similarity_of_the_prediction(
        jitter in prop::collection::vec(vec3(0.01), 49),
        g in pose(3.0, 3.0),
        s in 0.2f64..5.0,
    ) {
        let gt: Vec<_> = (0..49)
            .map(|k| {
                let (x, y) = ((k / 7) as f64 * 0.1, (k % 7) as f64 * 0.1);
                Vector3::new(x, y, 0.3 * (2.0 * x).sin() * y.cos())
            })
            .collect();
        let pred: Vec<_> = gt.iter().zip(&jitter).map(|(p, j)| p + j).collect();
        let sim = Similarity { scale: s, rotation: *g.rotation(), translation: *g.translation() };
        let moved: Vec<_> = pred.iter().map(|p| sim.apply(p)).collect();
        let a = pointmap_metrics(&pred, &gt, &CloudOptions::default()).unwrap();
        let b = pointmap_metrics(&moved, &gt, &CloudOptions::default()).unwrap();
        prop_assert!((a.acc_mean - b.acc_mean).abs() < 1e-9 && (a.comp_mean - b.comp_mean).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a.nc_mean));
    }

    #[test]
    fn depth_scores_ignore_prediction_scale(
        depth in prop::collection::vec(0.5f64..5.0, 30),
        noise in prop::collection::vec(0.8f64..1.25, 30),
        s in 0.1f64..10.0,
    ) {
        let img = |d: Vec<f64>| DepthImage { width: 6, height: 5, data: d };
        let pred: Vec<f64> = depth.iter().zip(&noise).map(|(d, n)| d * n).collect();
        let scaled: Vec<f64> = pred.iter().map(|p| p * s).collect();
        let a = depth_metrics(&[img(pred)], &[img(depth.clone())], None, &DepthOptions::default()).unwrap();
        let b = depth_metrics(&[img(scaled)], &[img(depth)], None, &DepthOptions::default()).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.delta1));
    }
}
