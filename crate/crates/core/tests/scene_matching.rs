use aerolidar::detector::{detect_partitioned, DetectorParams};
use aerolidar::matcher::{MatchParams, Matcher};
use aerolidar::synthetic::{perturb, Scene, SceneConfig};

#[test]
fn biased_pose_offsets_cluster_at_bias() {
    let scene = Scene::generate(&SceneConfig::default()).unwrap();
    let gsd = scene.config.gsd;
    let biased = perturb(&scene.pose, [7.0 * gsd, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let points = detect_partitioned(&scene.aerial, &DetectorParams::default()).unwrap();
    assert_eq!(points.len(), 400);
    let m = Matcher::new(&scene.aerial, &biased, &scene.intrinsics, &scene.lidar_intensity, &scene.dsm, &MatchParams::default()).unwrap();
    let cands = m.match_all(&points);
    let acc: Vec<_> = cands.iter().filter(|c| c.accepted).collect();
    let mut errs: Vec<f64> = acc.iter().map(|c| (c.offset_dx + 7.0).hypot(c.offset_dy)).collect();
    errs.sort_by(f64::total_cmp);
    let within = errs.iter().filter(|&&e| e < 1.0).count();
    assert!(acc.len() * 10 >= cands.len() * 9);
    assert!(within * 10 >= acc.len() * 9);
}
