use trackcouple::io::*;
use trackcouple::synth::{generate, SceneConfig};

#[test]
fn scene_directory_round_trips_exactly() {
    let scene = generate(&SceneConfig { seed: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &scene).unwrap();
    let back = read_scene(dir.path()).unwrap();
    assert_eq!(back.config, scene.config);
    assert_eq!(back.gt_world, scene.gt_world);
    assert_eq!(back.gt_poses, scene.gt_poses);
    assert_eq!(back.gt_grids, scene.gt_grids);
    assert_eq!(back.gt_tracks, scene.gt_tracks);
    assert_eq!(back.is_dynamic, scene.is_dynamic);
    assert_eq!(back.pseudo, scene.pseudo);
    assert_eq!(back.estimates.grids, scene.estimates.grids);
    assert_eq!(back.estimates.poses, scene.estimates.poses);
    assert_eq!(back.estimates.rel_poses, scene.estimates.rel_poses);
    assert_eq!(back.estimates.tracks, scene.estimates.tracks);
    assert_eq!(back, scene);
}

#[test]
fn depth_is_positive_and_matches_z() {
    let scene = generate(&SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &scene).unwrap();
    let gt = read_frame_set(&dir.path().join("gt")).unwrap();
    let depth = gt.depth.unwrap();
    assert_eq!(depth.len(), scene.config.n_frames);
    for (d, g) in depth.iter().zip(&scene.gt_grids) {
        assert!(d.data.iter().all(|&z| z > 0.0));
        assert!(d.data.iter().zip(g.points()).all(|(&z, p)| z == p.z));
    }
}

#[test]
fn missing_and_corrupt_files_are_named() {
    let scene = generate(&SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &scene).unwrap();

    let mask = dir.path().join("static_mask.csv");
    std::fs::remove_file(&mask).unwrap();
    let e = read_scene(dir.path()).unwrap_err();
    assert!(matches!(e, IoError::Io { .. }));
    assert_eq!(e.path(), mask);

    write_scene(dir.path(), &scene).unwrap();
    let poses = dir.path().join("est/poses.csv");
    let text = std::fs::read_to_string(&poses).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "2,1,0,0";
    std::fs::write(&poses, lines.join("\n")).unwrap();
    let e = read_scene(dir.path()).unwrap_err();
    assert!(matches!(e, IoError::Format { line: Some(4), .. }), "{e}");
    assert!(e.to_string().contains("poses.csv:4"), "{e}");
}

#[test]
fn pseudo_tracks_carry_nan_positions() {
    let scene = generate(&SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pseudo.csv");
    write_pseudo_tracks(&p, &scene.pseudo).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(&row[2..5], &["NaN", "NaN", "NaN"]);
    assert_eq!(read_pseudo_tracks(&p).unwrap(), scene.pseudo);
}

#[test]
fn static_scene_mask_is_all_ones() {
    let scene = generate(&SceneConfig { n_dynamic: 0, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &scene).unwrap();
    let (_, _, mask) = read_static_mask(&dir.path().join("static_mask.csv")).unwrap();
    assert!(mask.iter().all(|&m| m));
}
