use posegen_core::synth::{
    export_dataset, generate_scene, load_dataset, make_dataset, pose_limb_segments, render_track,
    split_indices, strip_hand_keypoints, PoseFrame, SceneSpec, SynthConfig, HAND_KEYPOINT_COLOR,
};
use proptest::prelude::*;

const H: usize = 64;
const W: usize = 64;

/// Distance from a pixel centre to a segment, in extended precision.
fn dist(x: usize, y: usize, a: [f32; 2], b: [f32; 2]) -> f64 {
    let p = [x as f64 + 0.5, y as f64 + 0.5];
    let (a, b) = ([a[0] as f64, a[1] as f64], [b[0] as f64, b[1] as f64]);
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    ((a[0] + t * d[0] - p[0]).powi(2) + (a[1] + t * d[1] - p[1]).powi(2)).sqrt()
}

#[test]
fn same_spec_renders_identically() {
    let spec = SceneSpec::random(11, 17);
    let a = generate_scene(&spec, H, W).unwrap();
    let b = generate_scene(&spec, H, W).unwrap();
    assert_eq!(a, b);
    assert!(a.video.frames.bit_eq(&b.video.frames));
}

#[test]
fn static_motion_gives_static_mask() {
    let mut spec = SceneSpec::random(12, 9);
    spec.motion = vec![PoseFrame::default(); 9];
    let s = generate_scene(&spec, H, W).unwrap();
    let plane = H * W;
    let m = s.gt_subject_mask.data();
    for f in 1..9 {
        assert_eq!(&m[..plane], &m[f * plane..(f + 1) * plane]);
    }
}

#[test]
fn default_coverage_is_moderate() {
    for seed in 0..12 {
        let s = generate_scene(&SceneSpec::random(seed, 17), H, W).unwrap();
        let on = s.gt_subject_mask.data().iter().filter(|&&v| v == 1.0).count();
        let ratio = on as f64 / s.gt_subject_mask.len() as f64;
        assert!((0.05..=0.6).contains(&ratio), "seed {seed}: coverage {ratio}");
    }
}

#[test]
fn all_streams_share_dimensions() {
    let s = generate_scene(&SceneSpec::random(13, 5), 32, 48).unwrap();
    assert_eq!(s.video.dims(), (5, 32, 48));
    assert_eq!(s.pose.dims(), (5, 32, 48));
    assert_eq!(s.hand.dims(), (5, 32, 48));
    assert_eq!(s.gt_subject_mask.shape(), [5, 32, 48]);
    assert_eq!(s.reference.shape(), [3, 32, 48]);
}

#[test]
fn sixteen_scenes_have_distinct_backgrounds() {
    let data = make_dataset(16, SynthConfig { frames: 1, height: 32, width: 32 }, 5).unwrap();
    let plane = 32 * 32;
    for i in 0..16 {
        for j in i + 1..16 {
            let (a, b) = (&data[i], &data[j]);
            let differs = (0..plane).any(|p| {
                let bg = a.gt_subject_mask.data()[p] == 0.0 && b.gt_subject_mask.data()[p] == 0.0;
                bg && (0..3).any(|c| {
                    a.video.frames.data()[c * plane + p] != b.video.frames.data()[c * plane + p]
                })
            });
            assert!(differs, "scenes {i} and {j} share a background");
        }
    }
}

#[test]
fn singleton_dataset_is_reproducible() {
    let cfg = SynthConfig { frames: 5, height: 32, width: 32 };
    let a = make_dataset(1, cfg, 3).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a, make_dataset(1, cfg, 3).unwrap());
    assert!(make_dataset(0, cfg, 3).is_err());
}

#[test]
fn parity_split() {
    let (train, val) = split_indices(6);
    assert_eq!(train, vec![0, 2, 4]);
    assert_eq!(val, vec![1, 3, 5]);
}

#[test]
fn reference_shares_appearance_not_pose() {
    let spec = SceneSpec::random(14, 9);
    let sib = spec.sibling();
    assert_eq!(sib.appearance, spec.appearance);
    assert_eq!(sib.background_id, spec.background_id);
    assert_ne!(sib.motion[0], spec.motion[0]);
    let s = generate_scene(&spec, H, W).unwrap();
    assert!(!s.reference.bit_eq(&s.video.frame(0)));
}

#[test]
fn out_of_bounds_motion_is_clamped_and_flagged() {
    let mut spec = SceneSpec::random(15, 5);
    for m in &mut spec.motion {
        m.shift = [2.0, -1.5];
    }
    let s = generate_scene(&spec, H, W).unwrap();
    assert!(s.clamped);
    let track = render_track(&spec, H, W).unwrap();
    for sk in &track.skeletons {
        for p in [sk.neck, sk.pelvis, sk.hands[0], sk.hands[1], sk.tips[0], sk.tips[1]] {
            assert!((0.0..=W as f32).contains(&p[0]) && (0.0..=H as f32).contains(&p[1]));
        }
    }
    assert!(!generate_scene(&SceneSpec::random(15, 5), H, W).unwrap().clamped);
}

#[test]
fn stripping_hand_keypoints_removes_only_green() {
    let s = generate_scene(&SceneSpec::random(16, 5), H, W).unwrap();
    let stripped = strip_hand_keypoints(&s.pose);
    let n = 5 * H * W;
    let (a, b) = (s.pose.frames.data(), stripped.frames.data());
    let mut removed = 0;
    for i in 0..n {
        let green = (0..3).all(|c| a[c * n + i] == HAND_KEYPOINT_COLOR[c]);
        for c in 0..3 {
            let want = if green { 0.0 } else { a[c * n + i] };
            assert_eq!(b[c * n + i], want);
        }
        removed += green as usize;
    }
    assert!(removed > 0);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(2, SynthConfig { frames: 5, height: 32, width: 32 }, 8).unwrap();
    export_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pose_support_matches_segment_rasterisation(seed in 0u64..100_000) {
        let spec = SceneSpec::random(seed, 3);
        let track = render_track(&spec, H, W).unwrap();
        let plane = H * W;
        let n = 3 * plane;
        let pose = track.pose.frames.data();
        for (f, sk) in track.skeletons.iter().enumerate() {
            let segs = pose_limb_segments(sk);
            for y in 0..H {
                for x in 0..W {
                    let d = segs.iter().map(|s| dist(x, y, s.0, s.1)).fold(f64::INFINITY, f64::min);
                    if (d - 1.0).abs() < 1e-4 {
                        continue;
                    }
                    let at = f * plane + y * W + x;
                    let lit = (0..3).any(|c| pose[c * n + at] != 0.0);
                    prop_assert_eq!(lit, d < 1.0, "frame {} pixel ({}, {}) distance {}", f, x, y, d);
                    if lit {
                        prop_assert_eq!(track.mask.data()[at], 1.0);
                    }
                }
            }
        }
    }
}
