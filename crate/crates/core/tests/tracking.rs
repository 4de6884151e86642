use nalgebra::Vector3;
use synmocap::init::InitConfig;
use synmocap::pcm::{PcmSet, PcmSource};
use synmocap::pipeline;
use synmocap::scene::{Scene, SceneConfig};
use synmocap::skeleton::SkeletonModel;
use synmocap::tracker::{PersonTrack, TrackStatus, Tracker, TrackerConfig};

fn scene(frames: usize) -> Scene {
    let mut cfg = SceneConfig::bundled();
    cfg.frames = frames;
    Scene::studio(cfg).unwrap()
}

fn keypoint_mpjpe_mm(scene: &Scene, person: usize, frame: usize, positions: &[Vector3<f64>]) -> f64 {
    let m = scene.model(person);
    let truth = scene.positions(person, frame);
    let joints = m.keypoint_joints();
    1000.0 * joints.iter().map(|&j| (positions[j] - truth.0[j]).norm()).sum::<f64>() / joints.len() as f64
}

#[test]
fn one_person_zero_noise_stays_within_the_lattice_bound() {
    let scene = scene(90);
    let cfg = TrackerConfig::default();
    let run = pipeline::run(
        scene.rig(),
        &SkeletonModel::standard(),
        &[0],
        0..scene.num_frames(),
        &InitConfig::default(),
        &cfg,
        |f| scene.pcm(f),
    )
    .unwrap();
    let seq = &run.sequences[0];
    assert_eq!(seq.frames.len(), 90);
    let bound = 1000.0 * cfg.lattice_spacing * 3f64.sqrt() / 2.0 + 5.0;
    let mean = seq
        .frames
        .iter()
        .map(|f| keypoint_mpjpe_mm(&scene, 0, f.frame, &f.positions.0))
        .sum::<f64>()
        / seq.frames.len() as f64;
    assert!(mean <= bound, "mean keypoint error {mean:.2} mm exceeds {bound:.2} mm");
    let model = scene.model(0);
    for f in &seq.frames {
        assert!(model.within_rom(&f.angles), "frame {}", f.frame);
        assert!(model.link_length_error(&f.positions) < 1e-9, "frame {}", f.frame);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let scene = scene(30);
    let go = || {
        pipeline::run(
            scene.rig(),
            &SkeletonModel::standard(),
            &[0, 1, 2, 3, 4],
            0..scene.num_frames(),
            &InitConfig::default(),
            &TrackerConfig::default(),
            |f| scene.pcm(f),
        )
        .unwrap()
        .sequences
        .iter()
        .map(|s| s.to_csv())
        .collect::<Vec<_>>()
    };
    assert_eq!(go(), go());
}

#[test]
fn smoothed_motion_does_not_jump_more_than_the_truth() {
    let scene = scene(120);
    let cfg = TrackerConfig::default();
    let run = pipeline::run(
        scene.rig(),
        &SkeletonModel::standard(),
        &[2],
        0..scene.num_frames(),
        &InitConfig::default(),
        &cfg,
        |f| scene.pcm(f),
    )
    .unwrap();
    let max_jump = |a: &[Vector3<f64>], b: &[Vector3<f64>]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    let mut truth_jump: f64 = 0.0;
    for f in 1..scene.num_frames() {
        truth_jump = truth_jump.max(max_jump(&scene.positions(2, f - 1).0, &scene.positions(2, f).0));
    }
    let smoothed: Vec<_> = run.frames.iter().map(|r| r.persons[0].smoothed.clone().unwrap()).collect();
    for w in smoothed.windows(2) {
        let jump = max_jump(&w[0].0, &w[1].0);
        assert!(jump <= truth_jump + 2.0 * cfg.lattice_spacing, "{jump} vs {truth_jump}");
    }
}

#[test]
fn person_out_of_view_is_skipped_then_dropped() {
    let scene = scene(2);
    let cfg = TrackerConfig {
        reentry_frames: Some(3),
        ..TrackerConfig::default()
    };
    let model = scene.model(0).clone();
    let mut q = scene.angles(0, 0).clone();
    q.0[0] += 100.0;
    let track = PersonTrack::new(0, model, 0, q, &cfg);
    let mut tracker = Tracker::new(scene.rig().clone(), cfg, vec![track]).unwrap();
    let empty = |f| PcmSet::empty(f, PcmSource::Synthetic, vec![(1920, 1200); 8], 1, 17);
    for f in 1..=3 {
        let r = tracker.step_frame(&empty(f)).unwrap();
        assert_eq!(r.persons[0].status, TrackStatus::LostForFrame);
        assert_eq!(tracker.persons()[0].history().latest().unwrap().0, 0);
    }
    let r = tracker.step_frame(&empty(4)).unwrap();
    assert_eq!(r.persons[0].status, TrackStatus::Lost);
    assert!(tracker.persons()[0].is_lost());
    let r = tracker.step_frame(&empty(5)).unwrap();
    assert_eq!(r.persons[0].status, TrackStatus::Lost);
    assert_eq!(tracker.into_sequences()[0].frames.len(), 1);
}

#[test]
fn lying_subject_switches_to_upper_body_search() {
    let scene = scene(3);
    let cfg = TrackerConfig::default();
    let model = scene.model(0).clone();
    let mut q = scene.angles(0, 0).clone();
    // tip the body over onto its back, pelvis at hip height
    q.0[3] = -std::f64::consts::FRAC_PI_2;
    q.0[5] = 0.0;
    let truth = model.forward_kinematics(&q);
    let keypoints: Vec<Vector3<f64>> = model.keypoint_joints().iter().map(|&j| truth.0[j]).collect();
    let pcm = synmocap::pcm::generate_synthetic(&scene.config().pcm_config(), scene.rig(), &[keypoints], 1).unwrap();
    let track = PersonTrack::new(0, model.clone(), 0, q, &cfg);
    let mut tracker = Tracker::new(scene.rig().clone(), cfg.clone(), vec![track]).unwrap();
    let r = tracker.step_frame(&pcm).unwrap();
    let p = &r.persons[0];
    assert_eq!(p.status, TrackStatus::Tracked);
    assert!(p.rotated);
    assert!(p.boxes.iter().flatten().any(|b| b.rotation.abs() > cfg.rotation_threshold));
    let upper = model.upper_body_keypoints();
    for (k, w) in p.weights.iter().enumerate() {
        if upper.contains(&k) {
            assert!(*w > 1.0, "keypoint {k} searched: {w}");
        } else {
            assert_eq!(*w, cfg.lower_body_decay);
        }
    }
}
