use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rigsfm::ba::{
    bundle_adjust, filter_observations, multi_camera_ba, observations_from_graph, ordinary_ba, reproject,
    reprojection_error, BaError, BaOptions, BaStage, CameraReprojectionCost, Observation, Pinhole,
    ReprojectionCost,
};
use rigsfm::scene::{ImageId, Intrinsics, ReconstructionState};
use rigsfm::so3::Rot3;
use rigsfm::solver::{check_jacobian, Problem, RobustKernel};
use rigsfm::synth::{generate_scene, GeneratedScene, SceneConfig, SlotConfig};
use rigsfm::Rotation;

fn scene(seed: u64, units: usize, points: usize, noise: f64) -> GeneratedScene {
    generate_scene(&SceneConfig {
        num_units: units,
        num_points: points,
        pixel_noise_sigma: noise,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn single_slot_scene(seed: u64) -> GeneratedScene {
    generate_scene(&SceneConfig {
        num_units: 8,
        num_points: 300,
        slots: vec![SlotConfig::new(0.0, [0.0, 0.0, 0.0])],
        pixel_noise_sigma: 0.5,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn vec3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Perturbs everything except the anchor unit and the reference slot.
fn perturb(state: &ReconstructionState, seed: u64, rot_deg: f64, pos: f64, pts: f64) -> ReconstructionState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = state.clone();
    let anchor = *state.unit_rotation.keys().next().unwrap();
    let reference = *state.rig.rotation.keys().next().unwrap();
    let sigma = rot_deg.to_radians();
    for (u, r) in out.unit_rotation.iter_mut() {
        let d = vec3(&mut rng, sigma);
        if *u != anchor {
            *r = Rotation::exp(&d) * *r;
        }
    }
    for (u, c) in out.unit_position.iter_mut() {
        let d = vec3(&mut rng, pos);
        if *u != anchor {
            *c += d;
        }
    }
    for (s, r) in out.rig.rotation.iter_mut() {
        let d = vec3(&mut rng, sigma);
        if *s != reference {
            *r = Rotation::exp(&d) * *r;
        }
    }
    for (s, t) in out.rig.translation.iter_mut() {
        let d = vec3(&mut rng, pos * 0.1);
        if *s != reference {
            *t += d;
        }
    }
    for p in out.points.values_mut() {
        *p += vec3(&mut rng, pts);
    }
    out
}

fn rmse(state: &ReconstructionState, obs: &[Observation]) -> f64 {
    let e: Vec<f64> = obs.iter().map(|o| reprojection_error(state, o).unwrap()).collect();
    (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
}

fn scene_scale(state: &ReconstructionState) -> f64 {
    let c: Vec<_> = state.unit_position.values().collect();
    c.iter()
        .flat_map(|a| c.iter().map(move |b| (*a - *b).norm()))
        .fold(0.0, f64::max)
}

fn single_camera_inputs(state: &ReconstructionState) -> BTreeMap<ImageId, Intrinsics> {
    state
        .images
        .iter()
        .map(|(i, n)| (*i, state.intrinsics[&n.intrinsics]))
        .collect()
}

#[test]
fn reproject_matches_camera_pose_path() {
    let s = scene(3, 6, 200, 0.0);
    let state = &s.truth;
    let mut checked = 0;
    for (id, node) in &state.images {
        let pose = state.camera_pose(*id).unwrap();
        let intr = state.intrinsics[&node.intrinsics];
        for p in state.points.values().take(50) {
            let direct = intr.project(&pose.rotation.act(&(p - pose.center)));
            let rig = reproject(
                &Pinhole::from(&intr),
                &state.rig.rotation[&node.slot],
                &state.rig.translation[&node.slot],
                &state.unit_rotation[&node.unit],
                &state.unit_position[&node.unit],
                p,
            );
            match (direct, rig) {
                (Some(a), Some(b)) if intr.contains(&a) => {
                    assert!((a - b).norm() < 1e-10, "{a} {b}");
                    checked += 1;
                }
                (Some(_), Some(_)) | (None, None) => {}
                (a, b) => panic!("disagreeing behind flag {a:?} {b:?}"),
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn reproject_generic_in_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let rr = Rotation::exp(&vec3(&mut rng, 0.3));
        let rg = Rotation::exp(&vec3(&mut rng, 0.3));
        let t = vec3(&mut rng, 0.2);
        let c = vec3(&mut rng, 1.0);
        let p = c + rg.transpose().act(&rr.transpose().act(&Vector3::new(0.3, -0.2, 5.0)));
        let intr = Pinhole { focal: 500.0, cx: 320.0, cy: 240.0 };
        let a = reproject(&intr, &rr, &t, &rg, &c, &p).unwrap();
        let intr32 = Pinhole { focal: 500.0f32, cx: 320.0, cy: 240.0 };
        let b = reproject(&intr32, &rr.cast::<f32>(), &t.cast(), &rg.cast::<f32>(), &c.cast(), &p.cast()).unwrap();
        assert!((a - b.cast::<f64>()).norm() < 1e-2);
    }
}

#[test]
fn behind_camera_is_flagged() {
    let intr = Pinhole { focal: 500.0, cx: 0.0, cy: 0.0 };
    let id = Rotation::identity();
    let z = Vector3::zeros();
    assert!(reproject(&intr, &id, &z, &id, &z, &Vector3::new(0.0, 0.0, -1.0)).is_none());
    assert!(reproject(&intr, &id, &z, &id, &z, &Vector3::new(1.0, 0.0, 0.0)).is_none());
    assert!(reproject(&intr, &id, &z, &id, &z, &Vector3::new(0.0, 0.0, 1e-3)).is_some());
}

#[test]
fn reprojection_jacobians_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Problem::new();
    for _ in 0..100 {
        let rr = Rotation::uniform(&mut rng);
        let rg = Rotation::uniform(&mut rng);
        let t = vec3(&mut rng, 0.5);
        let c = vec3(&mut rng, 3.0);
        let dir = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
        let cam = dir * rng.random_range(2.0..20.0);
        let point = c + rg.transpose().act(&rr.transpose().act(&(cam - t)));
        let f = rng.random_range(300.0..900.0);
        let blocks = vec![
            p.add_rotation(&rr),
            p.add_euclidean(t.as_slice()),
            p.add_rotation(&rg),
            p.add_euclidean(c.as_slice()),
            p.add_euclidean(point.as_slice()),
            p.add_euclidean(&[f]),
        ];
        let observed = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let cost = ReprojectionCost { observed, cx: 320.0, cy: 240.0 };
        p.add_term(blocks, Box::new(cost), RobustKernel::none()).unwrap();

        let r = rr * rg;
        let cc = c - r.transpose().act(&t);
        let blocks = vec![p.add_rotation(&r), p.add_euclidean(cc.as_slice()), p.add_euclidean(point.as_slice())];
        let cost = CameraReprojectionCost { observed, focal: f, cx: 320.0, cy: 240.0 };
        p.add_term(blocks, Box::new(cost), RobustKernel::none()).unwrap();
    }
    for d in check_jacobian(&p, 1e-6) {
        assert!(d < 1e-4, "{d}");
    }
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let s = scene(6, 10, 400, 0.0);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let (out, report) = multi_camera_ba(&s.truth, &obs, BaStage::Full, &BaOptions::default()).unwrap();
    assert!(report.initial_cost < 1e-18);
    for (u, c) in &out.unit_position {
        assert!((c - s.truth.unit_position[u]).norm() < 1e-10);
    }
    for (u, r) in &out.unit_rotation {
        assert!((r.matrix() - s.truth.unit_rotation[u].matrix()).norm() < 1e-10);
    }
    for (p, x) in &out.points {
        assert!((x - s.truth.points[p]).norm() < 1e-10);
    }
}

#[test]
fn perturbed_points_are_pulled_back() {
    let s = scene(7, 10, 400, 0.0);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let start = perturb(&s.truth, 1, 0.0, 0.0, 0.01 * scene_scale(&s.truth));
    let before = rmse(&start, &obs);
    let (out, _) = multi_camera_ba(&start, &obs, BaStage::RotationsFixed, &BaOptions::default()).unwrap();
    let after = rmse(&out, &obs);
    assert!(before > 1.0);
    assert!(after * 10.0 <= before, "{before} -> {after}");
}

#[test]
fn rotations_fixed_stage_keeps_rotations() {
    let s = scene(8, 8, 300, 1.0);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let start = perturb(&s.truth, 2, 1.0, 0.1, 0.1);
    let (out, _) = multi_camera_ba(&start, &obs, BaStage::RotationsFixed, &BaOptions::default()).unwrap();
    assert_eq!(out.unit_rotation, start.unit_rotation);
    assert_eq!(out.rig.rotation, start.rig.rotation);
    assert_ne!(out.unit_position, start.unit_position);
}

#[test]
fn two_rounds_recover_perturbed_state() {
    let s = scene(9, 10, 400, 0.5);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let start = perturb(&s.truth, 3, 0.5, 0.05, 0.05);
    let (out, kept, report) = bundle_adjust(&start, &obs, &BaOptions::default()).unwrap();
    assert_eq!(report.stages.len(), 2);
    assert!(report.stages[1].final_cost <= report.stages[1].initial_cost);
    assert!(rmse(&out, &kept) < 0.8, "{}", rmse(&out, &kept));
    let filter = report.filter.unwrap();
    assert_eq!(filter.observations_out, kept.len());
    let json = serde_json::to_value(&report.stages).unwrap();
    assert_eq!(json[0]["stage"], "rotations_fixed");
    assert_eq!(json[1]["stage"], "full");
}

#[test]
fn focal_length_refinement() {
    let s = scene(10, 10, 500, 0.2);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let mut start = s.truth.clone();
    for k in start.intrinsics.values_mut() {
        k.focal *= 1.02;
    }
    let opts = BaOptions {
        refine_intrinsics: true,
        ..BaOptions::default()
    };
    let (fixed, _) = multi_camera_ba(&start, &obs, BaStage::RotationsFixed, &opts).unwrap();
    assert_eq!(fixed.intrinsics, start.intrinsics);
    let (out, _) = multi_camera_ba(&start, &obs, BaStage::Full, &opts).unwrap();
    for (k, intr) in &out.intrinsics {
        let truth = s.truth.intrinsics[k].focal;
        assert!((intr.focal - truth).abs() < 1e-3 * truth, "{} vs {truth}", intr.focal);
    }
}

#[test]
fn single_slot_matches_ordinary_adjustment() {
    for seed in 0..3 {
        let s = single_slot_scene(seed);
        let obs = observations_from_graph(&s.graph, &s.truth);
        let start = perturb(&s.truth, seed, 0.5, 0.05, 0.05);
        for stage in [BaStage::RotationsFixed, BaStage::Full] {
            let opts = BaOptions::default();
            let (rig_out, a) = multi_camera_ba(&start, &obs, stage, &opts).unwrap();
            let (poses, points, b) = ordinary_ba(
                &start.camera_poses(),
                &single_camera_inputs(&start),
                &start.points,
                &obs,
                stage == BaStage::Full,
                &opts,
            )
            .unwrap();
            assert!((a.initial_cost - b.initial_cost).abs() < 1e-8);
            assert!((a.final_cost - b.final_cost).abs() < 1e-8, "{} {}", a.final_cost, b.final_cost);
            for (id, pose) in rig_out.camera_poses() {
                assert!((pose.center - poses[&id].center).norm() < 1e-6);
            }
            for (p, x) in &rig_out.points {
                assert!((x - points[p]).norm() < 1e-6);
            }
        }
    }
}

#[test]
fn no_observations_is_an_error() {
    let s = scene(11, 5, 100, 0.0);
    let err = multi_camera_ba(&s.truth, &[], BaStage::Full, &BaOptions::default()).unwrap_err();
    assert!(matches!(err, BaError::NoObservations));
    let obs = observations_from_graph(&s.graph, &s.truth);
    let first = obs[0];
    let pose = s.truth.camera_pose(first.image).unwrap();
    let mut behind = s.truth.clone();
    *behind.points.get_mut(&first.point).unwrap() = pose.center - pose.rotation.transpose().act(&Vector3::z());
    let err = multi_camera_ba(&behind, &[first, first], BaStage::Full, &BaOptions::default()).unwrap_err();
    assert!(matches!(err, BaError::NoObservations));
}

#[test]
fn behind_observations_are_counted() {
    let s = scene(12, 6, 200, 0.0);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let mut state = s.truth.clone();
    let first = obs[0];
    let pose = state.camera_pose(first.image).unwrap();
    let p = state.points.get_mut(&first.point).unwrap();
    *p = pose.center - pose.rotation.transpose().act(&Vector3::new(0.0, 0.0, 2.0));
    let (_, report) = multi_camera_ba(&state, &obs, BaStage::RotationsFixed, &BaOptions::default()).unwrap();
    assert!(report.behind_camera >= 1);
    assert_eq!(report.observations + report.behind_camera, obs.len());
}

#[test]
fn filter_keeps_clean_observations() {
    let s = scene(13, 8, 300, 0.5);
    let obs = observations_from_graph(&s.graph, &s.truth);
    let (kept, report) = filter_observations(&s.truth, &obs, 8.0);
    assert_eq!(kept, obs);
    assert_eq!(report.dropped_reprojection + report.dropped_behind + report.dropped_points, 0);
}

#[test]
fn filter_drops_single_outlier() {
    let s = scene(14, 8, 300, 0.0);
    let mut obs = observations_from_graph(&s.graph, &s.truth);
    let victim = obs
        .iter()
        .position(|o| obs.iter().filter(|q| q.point == o.point).count() >= 4)
        .unwrap();
    obs[victim].pixel += Vector2::new(100.0, 0.0);
    let (kept, report) = filter_observations(&s.truth, &obs, 8.0);
    assert_eq!(report.dropped_reprojection, 1);
    assert_eq!(report.dropped_points, 0);
    assert_eq!(kept.len(), obs.len() - 1);
    assert!(!kept.contains(&obs[victim]));
}

#[test]
fn filter_drops_underconstrained_point() {
    let s = scene(15, 8, 300, 0.0);
    let all = observations_from_graph(&s.graph, &s.truth);
    let target = all[0].point;
    let second = all
        .iter()
        .find(|o| o.point == target && s.truth.images[&o.image].unit != s.truth.images[&all[0].image].unit)
        .copied()
        .unwrap();
    let mut obs: Vec<Observation> = all.iter().filter(|o| o.point != target).copied().collect();
    obs.push(all[0]);
    obs.push(second);
    let k = obs.iter().position(|o| o.point == target).unwrap();
    obs[k].pixel += Vector2::new(0.0, 100.0);
    let (kept, report) = filter_observations(&s.truth, &obs, 8.0);
    assert_eq!(report.dropped_reprojection, 1);
    assert_eq!(report.dropped_points, 1);
    assert_eq!(report.dropped_point_observations, 1);
    assert_eq!(kept.len(), obs.len() - 2);
    assert!(kept.iter().all(|o| o.point != target));
}

#[test]
fn staged_schedule_not_worse_than_direct() {
    let mut not_worse = 0;
    for seed in 0..10 {
        let s = scene(100 + seed, 8, 300, 1.0);
        let obs = observations_from_graph(&s.graph, &s.truth);
        let start = perturb(&s.truth, seed, 1.0, 0.2, 0.2);
        let opts = BaOptions {
            max_px_filter: 1e9,
            ..BaOptions::default()
        };
        let (_, _, staged) = bundle_adjust(&start, &obs, &opts).unwrap();
        let (_, direct) = multi_camera_ba(&start, &obs, BaStage::Full, &opts).unwrap();
        if staged.stages[1].final_cost <= direct.final_cost * (1.0 + 1e-6) + 1e-9 {
            not_worse += 1;
        }
    }
    assert!(not_worse >= 9, "{not_worse}/10");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gauge_is_bit_identical(seed in 0u64..1000, full in any::<bool>()) {
        let s = scene(seed % 5, 6, 200, 1.0);
        let obs = observations_from_graph(&s.graph, &s.truth);
        let start = perturb(&s.truth, seed, 1.0, 0.1, 0.1);
        let stage = if full { BaStage::Full } else { BaStage::RotationsFixed };
        let (out, _) = multi_camera_ba(&start, &obs, stage, &BaOptions::default()).unwrap();
        let anchor = *start.unit_rotation.keys().next().unwrap();
        let reference = *start.rig.rotation.keys().next().unwrap();
        prop_assert_eq!(out.unit_rotation[&anchor], start.unit_rotation[&anchor]);
        prop_assert_eq!(out.unit_position[&anchor], start.unit_position[&anchor]);
        prop_assert_eq!(out.rig.rotation[&reference], start.rig.rotation[&reference]);
        prop_assert_eq!(out.rig.translation[&reference], start.rig.translation[&reference]);
    }

    #[test]
    fn single_slot_costs_coincide(seed in 0u64..1000) {
        let s = single_slot_scene(seed % 4);
        let obs = observations_from_graph(&s.graph, &s.truth);
        let state = perturb(&s.truth, seed, 2.0, 0.2, 0.2);
        let poses = state.camera_poses();
        for o in &obs {
            let node = state.images[&o.image];
            let intr = Pinhole::from(&state.intrinsics[&node.intrinsics]);
            let pose = poses[&o.image];
            let a = reproject(
                &intr,
                &state.rig.rotation[&node.slot],
                &state.rig.translation[&node.slot],
                &state.unit_rotation[&node.unit],
                &state.unit_position[&node.unit],
                &state.points[&o.point],
            );
            let b = intr.project(&pose.rotation.act(&(state.points[&o.point] - pose.center)));
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).norm() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false, "behind flags disagree"),
            }
        }
    }

    #[test]
    fn rotation_conjugation_keeps_pixels(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = Pinhole { focal: 400.0, cx: 10.0, cy: -5.0 };
        let rr = Rot3::exp(&vec3(&mut rng, 0.2));
        let rg = Rotation::uniform(&mut rng);
        let c = vec3(&mut rng, 2.0);
        let t = vec3(&mut rng, 0.3);
        let p = c + rg.transpose().act(&rr.transpose().act(&(Vector3::new(0.1, 0.2, 4.0) - t)));
        let q = Rotation::uniform(&mut rng);
        // world change x -> Q x
        let a = reproject(&intr, &rr, &t, &rg, &c, &p).unwrap();
        let b = reproject(&intr, &rr, &t, &(rg * q.transpose()), &q.act(&c), &q.act(&p)).unwrap();
        prop_assert!((a - b).norm() < 1e-8);
    }
}
