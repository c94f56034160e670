use gradgraph::layers::warp;
use metadance::synth::*;
use metadance::types::{Frame, PoseMap, Resolution};
use metadance::Error;
use proptest::prelude::*;

fn renderer() -> Renderer {
    Renderer::new(Resolution::default())
}

/// Mean absolute error between `warp(frame_i, flow_i)` and `frame_{i+1}` on
/// the valid mask.
fn masked_warp_error(clip: &ClipRecord, i: usize) -> f64 {
    let flow = &clip.flows.as_ref().unwrap()[i];
    let warped = warp(&clip.frames[i].to_tensor(), &flow.to_tensor());
    let next = clip.frames[i + 1].pixels();
    let mask = flow.mask();
    let plane = mask.len();
    let mut err = 0.0;
    let mut n = 0;
    for p in (0..plane).filter(|&p| mask[p] > 0.0) {
        for c in 0..3 {
            err += (warped.data()[c * plane + p] - next[c * plane + p] as f64).abs();
        }
        n += 3;
    }
    assert!(n > 0, "empty mask");
    err / n as f64
}

/// Forward kinematics written with homogeneous 2-D transforms, independent of
/// the renderer's angle accumulation.
fn fk_oracle(person: &PersonSpec, pose: &BodyPose, h: usize, w: usize) -> Vec<[f64; 2]> {
    type M = [[f64; 3]; 3];
    let mul = |a: M, b: M| -> M {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    // Frames whose local +y axis points along the limb.
    let rot = |a: f64| -> M { [[a.cos(), a.sin(), 0.0], [-a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]] };
    let trans = |x: f64, y: f64| -> M { [[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]] };
    let origin = |m: M| [m[0][2], m[1][2]];
    let hs = h as f64;
    let len = |l: usize| person.limb_lengths[l] * hs;
    let a = &pose.angles;
    let pelvis = trans(
        person.anchor[0] * w as f64 + pose.root[0] * hs,
        (person.anchor[1] + pose.root[1]) * hs,
    );
    let pi = std::f64::consts::PI;
    let torso = mul(pelvis, rot(pi + a[0]));
    let neck = mul(torso, trans(0.0, len(0)));
    let head_top = mul(mul(neck, rot(a[1])), trans(0.0, len(1)));
    let mut out = vec![[0.0; 2]; 15];
    out[0] = origin(pelvis);
    out[1] = origin(neck);
    out[2] = origin(head_top);
    // Left is the torso frame's -x side once the torso points up.
    let limb_pair = |base: M, side: f64, half: f64, rest: f64, first: usize| {
        let root = mul(base, trans(-side * half * hs, 0.0));
        let seg1 = mul(root, rot(rest - pi + a[first]));
        let mid = mul(seg1, trans(0.0, len(first)));
        let end = mul(mul(mid, rot(a[first + 1])), trans(0.0, len(first + 1)));
        [origin(root), origin(mid), origin(end)]
    };
    let sets = [
        (neck, 1.0, person.shoulder_half_width, 0.3, 2, 3),
        (neck, -1.0, person.shoulder_half_width, -0.3, 4, 6),
        (torso, 1.0, person.hip_half_width, 0.08, 6, 9),
        (torso, -1.0, person.hip_half_width, -0.08, 8, 12),
    ];
    for (base, side, half, rest, limb, joint) in sets {
        let pts = limb_pair(base, side, half, rest, limb);
        out[joint..joint + 3].copy_from_slice(&pts);
    }
    out
}

#[test]
fn identities_are_deterministic_and_distinct() {
    assert_eq!(make_identity(0), make_identity(0));
    assert_ne!(make_identity(0), make_identity(1));
    let p = make_identity(7);
    assert!(p.limb_lengths.iter().all(|&l| l > 0.0));
    let (frame, pose) = renderer().render_frame(&p, &BodyPose::default()).unwrap();
    assert!(pose.keypoints().iter().all(|k| k.visible));
    assert!(keep_mask(&[pose.clone(), pose], &FilterConfig::default())[0]);
    assert_eq!(frame.resolution(), Resolution::default());
}

#[test]
fn motion_is_deterministic_and_moving() {
    assert_eq!(make_motion(0, 60).unwrap(), make_motion(0, 60).unwrap());
    assert!(matches!(make_motion(0, 1), Err(Error::Length(_))));
    let frozen = make_motion_with(
        0,
        20,
        &MotionOptions {
            amplitude_scale: 0.0,
            ..MotionOptions::default()
        },
    )
    .unwrap();
    let poses = frozen.poses();
    assert!(poses.iter().all(|p| *p == poses[0]));

    let r = renderer();
    let person = make_identity(3);
    let skels: Vec<_> = make_motion(3, 60)
        .unwrap()
        .poses()
        .iter()
        .map(|p| r.skeleton(&person, p))
        .collect();
    let mean = skels
        .windows(2)
        .map(|w| mean_joint_displacement(&w[0], &w[1]))
        .sum::<f64>()
        / 59.0;
    assert!(mean >= FilterConfig::default().motion_threshold, "mean displacement {mean}");
}

#[test]
fn rest_silhouette_is_union_of_limb_strokes() {
    let (_, pose) = renderer()
        .render_frame(&make_identity(0), &BodyPose::default())
        .unwrap();
    let sil = pose.channel(POSE_CHANNELS - 1);
    for (i, &s) in sil.iter().enumerate() {
        let union = (0..LIMB_COUNT).map(|c| pose.channel(c)[i]).fold(0.0, f32::max);
        assert_eq!(s, union);
    }
    assert!(sil.iter().any(|&v| v == 1.0));
}

#[test]
fn pose_maps_ignore_appearance() {
    let base = make_identity(0);
    let mut other = make_identity(5);
    // Same proportions, different colors, widths and texture.
    other.limb_lengths = base.limb_lengths;
    other.shoulder_half_width = base.shoulder_half_width;
    other.hip_half_width = base.hip_half_width;
    other.anchor = base.anchor;
    let pose = make_motion(2, 10).unwrap().pose_at(4);
    let (fa, pa) = renderer().render_frame(&base, &pose).unwrap();
    let (fb, pb) = renderer().render_frame(&other, &pose).unwrap();
    assert_eq!(pa, pb);
    assert_ne!(fa, fb);
}

#[test]
fn rendered_joints_match_independent_kinematics() {
    let r = renderer();
    for seed in 0..20 {
        let person = make_identity(seed);
        let motion = make_motion(seed + 50, 30).unwrap();
        for t in [0, 7, 19, 29] {
            let pose = motion.pose_at(t);
            let (_, map) = r.render_frame(&person, &pose).unwrap();
            let oracle = fk_oracle(&person, &pose, 64, 32);
            for (k, o) in map.keypoints().iter().zip(&oracle) {
                let err = ((k.x as f64 - o[0]).powi(2) + (k.y as f64 - o[1]).powi(2)).sqrt();
                assert!(err < 0.5, "seed {seed} t {t}: {err}");
            }
        }
    }
}

#[test]
fn pelvis_outside_frame_is_an_error() {
    let pose = BodyPose {
        root: [2.0, 0.0],
        ..BodyPose::default()
    };
    assert!(matches!(
        renderer().render_frame(&make_identity(0), &pose),
        Err(Error::OutOfFrame(_))
    ));
}

#[test]
fn static_pair_has_zero_flow_and_full_mask() {
    let person = make_identity(1);
    let pose = make_motion(1, 10).unwrap().pose_at(3);
    let f = renderer().render_flow(&person, &pose, &pose);
    assert!(f.flow().iter().all(|&v| v == 0.0));
    assert!(f.mask().iter().all(|&m| m == 1.0));
}

#[test]
fn translation_flow_is_uniform_on_foreground() {
    let person = make_identity(2);
    let a = BodyPose::default();
    let mut b = a;
    // Two pixels right and one down at a height of 64.
    b.root = [2.0 / 64.0, 1.0 / 64.0];
    let r = renderer();
    let f = r.render_flow(&person, &a, &b);
    let (_, next) = r.render_frame(&person, &b).unwrap();
    let plane = 64 * 32;
    let fg = next.channel(POSE_CHANNELS - 1);
    let mut checked = 0;
    for i in 0..plane {
        let (u, v) = (f.flow()[i], f.flow()[plane + i]);
        if fg[i] > 0.0 {
            // Stored flow points back to the earlier frame.
            assert!((u + 2.0).abs() < 1e-4 && (v + 1.0).abs() < 1e-4, "({u}, {v})");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn warping_by_ground_truth_flow_reproduces_next_frame() {
    let r = renderer();
    for s in 0..4 {
        let clip = render_clip(&r, s, 100 + s, 25, &MotionOptions::default(), "p", "c").unwrap();
        for i in 0..24 {
            let e = masked_warp_error(&clip, i);
            assert!(e < 0.02, "clip {s} pair {i}: {e}");
        }
    }
}

/// First motion for person 4 whose clip passes the filter untouched.
fn toy_motion_seed(len: usize) -> u64 {
    (0..)
        .find(|&m| {
            let c = render_clip(&renderer(), 4, m, len, &MotionOptions::default(), "p", "c");
            c.is_ok_and(|c| keep_mask(&c.poses, &FilterConfig::default()).iter().all(|&k| k))
        })
        .unwrap()
}

fn toy_clip(len: usize) -> ClipRecord {
    let m = toy_motion_seed(len);
    render_clip(&renderer(), 4, m, len, &MotionOptions::default(), "p004", "p004_c00").unwrap()
}

fn freeze_from(clip: &mut ClipRecord, from: usize) {
    for i in from..clip.len() {
        clip.frames[i] = clip.frames[from - 1].clone();
        clip.poses[i] = clip.poses[from - 1].clone();
    }
}

#[test]
fn valid_clip_survives_filtering_unchanged() {
    let clip = toy_clip(30);
    let out = filter_invalid_frames(&clip, &FilterConfig::default()).unwrap();
    assert_eq!(out, vec![clip]);
}

#[test]
fn trailing_freeze_is_removed() {
    let mut clip = toy_clip(30);
    // Frames 20..29 repeat frame 19: ten motionless frames.
    freeze_from(&mut clip, 20);
    let out = filter_invalid_frames(&clip, &FilterConfig::default()).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].kept_indices, (0..20).collect::<Vec<_>>());
    assert_eq!(out[0].flows.as_ref().unwrap().len(), 19);
    assert_eq!(out[0].clip_id, clip.clip_id);
}

#[test]
fn short_freeze_is_kept() {
    let mut clip = toy_clip(30);
    for i in 20..24 {
        clip.poses[i] = clip.poses[19].clone();
    }
    let out = filter_invalid_frames(&clip, &FilterConfig::default()).unwrap();
    assert_eq!(out[0].len(), 30);
}

#[test]
fn out_of_frame_excursion_splits_clip() {
    let r = renderer();
    let person = make_identity(4);
    let motion = make_motion(toy_motion_seed(30), 30).unwrap();
    let mut poses = motion.poses();
    // Frames 12..15 push the figure against the right border.
    for p in &mut poses[12..15] {
        p.root[0] += 0.15;
    }
    let mut frames = Vec::new();
    let mut maps = Vec::new();
    for p in &poses {
        let (f, m) = r.render_frame(&person, p).unwrap();
        frames.push(f);
        maps.push(m);
    }
    let flows = poses.windows(2).map(|w| r.render_flow(&person, &w[0], &w[1])).collect();
    let clip = ClipRecord {
        person_id: "p004".into(),
        clip_id: "p004_c00".into(),
        frames,
        poses: maps,
        flows: Some(flows),
        kept_indices: (0..30).collect(),
    };
    let out = filter_invalid_frames(&clip, &FilterConfig::default()).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].kept_indices, (0..12).collect::<Vec<_>>());
    assert_eq!(out[1].kept_indices, (15..30).collect::<Vec<_>>());
    assert_eq!(out[0].clip_id, "p004_c00_0");
    assert_eq!(out[1].flows.as_ref().unwrap()[0], clip.flows.as_ref().unwrap()[15]);
}

#[test]
fn empty_clip_is_rejected() {
    let mut clip = toy_clip(3);
    clip.frames.clear();
    clip.poses.clear();
    assert!(matches!(
        filter_invalid_frames(&clip, &FilterConfig::default()),
        Err(Error::EmptyClip(_))
    ));
    let mut frozen = toy_clip(8);
    freeze_from(&mut frozen, 1);
    assert!(matches!(
        filter_invalid_frames(&frozen, &FilterConfig::default()),
        Err(Error::EmptyClip(_))
    ));
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        train_identities: 3,
        test_identities: 2,
        clips_per_identity: 2,
        clip_len: 24,
        test_clip_len: 30,
        seed: 11,
        ..DatasetConfig::default()
    }
}

#[test]
fn default_dataset_counts_and_split() {
    let cfg = DatasetConfig::default();
    let (train, test) = generate_clips(&cfg).unwrap();
    assert_eq!((train.len(), test.len()), (80, 20));
    let ds = Dataset::from_clips(cfg.resolution, train, test).unwrap();
    let tr = ds.person_ids(Split::Train);
    let te = ds.person_ids(Split::Test);
    assert_eq!((tr.len(), te.len()), (20, 5));
    assert!(tr.iter().all(|p| !te.contains(p)));
    assert!(ds.test.iter().all(|c| c.len() == cfg.test_clip_len));
    assert!(ds.train.iter().all(|c| c.len() >= cfg.clip_len - cfg.hold_frames));
    // Some clips end in a freeze that the filter trimmed.
    assert!(ds.train.iter().any(|c| c.len() < cfg.clip_len));
}

#[test]
fn dataset_files_are_deterministic_and_round_trip() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_dataset(&cfg, a.path()).unwrap();
    let mb = build_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    let bytes = |d: &tempfile::TempDir| std::fs::read(d.path().join("manifest.json")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    for entry in &ma.clips {
        for f in entry.frames.iter().chain(&entry.poses).chain(entry.flows.as_ref().unwrap()) {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }
    let loaded = Dataset::load(&a.path().join("manifest.json")).unwrap();
    let generated = Dataset::generate(&cfg).unwrap();
    assert_eq!(loaded.train, generated.train);
    assert_eq!(loaded.test, generated.test);
}

#[test]
fn quantized_frames_still_warp_consistently() {
    let ds = Dataset::generate(&small_config()).unwrap();
    for clip in ds.test.iter().take(2) {
        for i in 0..clip.len() - 1 {
            assert!(masked_warp_error(clip, i) < 0.02);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn warp_consistency_over_random_clips(person in 0u64..1000, motion in 0u64..1000, t in 0usize..14) {
        let clip = render_clip(&renderer(), person, motion, 16, &MotionOptions::default(), "p", "c");
        // Root drift can push a random figure out; that is not what this checks.
        prop_assume!(clip.is_ok());
        prop_assert!(masked_warp_error(&clip.unwrap(), t) < 0.02);
    }

    #[test]
    fn filtering_is_idempotent(seed in 0u64..500, freeze_at in 3usize..20, cut in 0usize..20) {
        let mut clip = render_clip(&renderer(), seed, seed + 1, 20, &MotionOptions::default(), "p", "c").unwrap();
        freeze_from(&mut clip, freeze_at);
        // Push a few frames against the border as well.
        if cut + 2 < clip.len() {
            let shifted: Vec<PoseMap> = clip.poses.clone();
            let blank = Frame::filled(clip.frames[0].resolution(), 0.5);
            for i in cut..cut + 2 {
                let p = &shifted[i];
                let mut kps = p.keypoints().to_vec();
                kps[0].visible = false;
                kps[0].x = -1.0;
                clip.poses[i] = PoseMap::new(p.resolution(), p.channels(), p.data().to_vec(), kps).unwrap();
                clip.frames[i] = blank.clone();
            }
        }
        let cfg = FilterConfig::default();
        if let Ok(once) = filter_invalid_frames(&clip, &cfg) {
            for part in &once {
                let twice = filter_invalid_frames(part, &cfg).unwrap();
                prop_assert_eq!(twice, vec![part.clone()]);
            }
        }
    }
}
