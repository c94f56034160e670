use std::collections::HashMap;

use metadance::sampling::*;
use metadance::synth::{ClipRecord, Dataset};
use metadance::types::{validate_task, FlowField, Frame, Keypoint, PoseMap, Resolution};
use metadance::Error;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// A clip whose frame `i` is filled with the value `i / 255` so indices can be
/// read back from pixels.
fn fake_clip(person: &str, clip: &str, len: usize) -> ClipRecord {
    let res = Resolution::new(8, 4);
    let frames = (0..len).map(|i| Frame::filled(res, i as f32 / 255.0)).collect();
    let poses = (0..len)
        .map(|i| {
            let kp = vec![Keypoint { x: 1.0, y: (i % 8) as f32, visible: true }];
            PoseMap::new(res, 2, vec![0.0; 2 * 32], kp).unwrap()
        })
        .collect();
    ClipRecord {
        person_id: person.into(),
        clip_id: clip.into(),
        frames,
        poses,
        flows: Some((1..len).map(|_| FlowField::zeros(res)).collect()),
        kept_indices: (0..len).collect(),
    }
}

fn frame_index(f: &Frame) -> usize {
    (f.pixels()[0] * 255.0).round() as usize
}

fn fake_dataset(test_persons: usize) -> Dataset {
    let train = (0..4).map(|p| fake_clip(&format!("p{p:03}"), &format!("p{p:03}_c00"), 60)).collect();
    let test = (0..test_persons)
        .flat_map(|p| {
            let pid = format!("p{:03}", 100 + p);
            (0..2).map(move |c| fake_clip(&pid, &format!("{pid}_c{c:02}"), 80))
        })
        .collect();
    Dataset { resolution: Resolution::new(8, 4), train, test }
}

fn seq_of(len: usize) -> metadance::types::Sequence {
    slice_sequence(&fake_clip("p", "c", len), 0, len).unwrap()
}

#[test]
fn move_pairing_rules() {
    let pairs = |n| move_pairs(n).unwrap();
    assert_eq!(pairs(4), vec![(0, 1), (2, 3)]);
    assert_eq!(pairs(2), vec![(0, 1)]);
    assert_eq!(pairs(5), vec![(0, 1), (2, 3), (3, 4)]);
    assert!(matches!(move_pairs(1), Err(Error::Length(_))));
    let seq = seq_of(5);
    let moves = moves_of(&seq).unwrap();
    assert_eq!(moves.len(), 3);
    assert_eq!(moves[2].indices(seq.start_index), (3, 4));
    assert_eq!(frame_index(moves[1].frames.1), 3);
}

proptest! {
    #[test]
    fn moves_cover_every_frame(len in 2usize..40) {
        let seq = seq_of(len);
        let moves = moves_of(&seq).unwrap();
        let mut seen = vec![0; len];
        for m in &moves {
            let (a, b) = m.indices(0);
            prop_assert_eq!(b, a + 1);
            seen[a] += 1;
            seen[b] += 1;
        }
        prop_assert!(seen.iter().all(|&s| s >= 1));
        // Only the shared frame of the odd tail is used twice.
        let twice: Vec<usize> = (0..len).filter(|&i| seen[i] == 2).collect();
        let expected: Vec<usize> = if len % 2 == 1 { vec![len - 2] } else { vec![] };
        prop_assert_eq!(twice, expected);
    }
}

#[test]
fn support_length_follows_shots() {
    let clips = vec![fake_clip("p0", "p0_c0", 60)];
    let mut rng = StdRng::seed_from_u64(0);
    for (k, support, moves) in [(3, 2, 1), (5, 4, 2), (8, 7, 4), (10, 9, 5)] {
        let cfg = SamplerConfig { shots: k, ..SamplerConfig::default() };
        let t = sample_task(&clips, &cfg, &mut rng).unwrap();
        assert_eq!(t.support.len(), support);
        assert_eq!(t.query.len(), support);
        assert_eq!(moves_of(&t.support).unwrap().len(), moves);
    }
}

#[test]
fn sampling_is_deterministic() {
    let clips: Vec<_> = (0..3).map(|i| fake_clip("p0", &format!("c{i}"), 40)).collect();
    let cfg = SamplerConfig::default();
    let a = sample_task(&clips, &cfg, &mut StdRng::seed_from_u64(9)).unwrap();
    let b = sample_task(&clips, &cfg, &mut StdRng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn too_short_clips_are_not_eligible() {
    let clips = vec![fake_clip("p0", "c0", 10)];
    let cfg = SamplerConfig { shots: 5, interval: 5, ..SamplerConfig::default() };
    assert!(matches!(
        sample_task(&clips, &cfg, &mut StdRng::seed_from_u64(0)),
        Err(Error::NoEligibleClip(_))
    ));
}

#[test]
fn windows_never_overlap_over_many_samples() {
    let clips: Vec<_> = (0..5).map(|i| fake_clip("p0", &format!("c{i}"), 20 + 8 * i)).collect();
    let cfg = SamplerConfig::default();
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..10_000 {
        let t = sample_task(&clips, &cfg, &mut rng).unwrap();
        validate_task(&t).unwrap();
        assert!(t.support.end_index() + cfg.interval <= t.query.start_index);
        // Frames really come from the recorded positions.
        assert_eq!(frame_index(&t.reference.frame), t.reference.index);
        assert_eq!(frame_index(&t.query.frames[0]), t.query.start_index);
    }
}

#[test]
fn every_eligible_clip_is_drawn() {
    let clips: Vec<_> = (0..6).map(|i| fake_clip("p0", &format!("c{i}"), 30)).collect();
    let mut rng = StdRng::seed_from_u64(2);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let n = 3000;
    for _ in 0..n {
        let t = sample_task(&clips, &SamplerConfig::default(), &mut rng).unwrap();
        *counts.entry(t.clip_id).or_default() += 1;
    }
    let expected = n as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert_eq!(counts.len(), 6);
    // 5 degrees of freedom; 30 is far beyond the 0.1% quantile (20.5).
    assert!(chi2 < 30.0, "chi-square {chi2}");
}

#[test]
fn episode_protocol_counts() {
    let ds = fake_dataset(20);
    let cfg = SamplerConfig::default();
    let eps = build_episodes(&ds, &cfg, 4).unwrap();
    assert_eq!(eps.len(), 400);
    for e in &eps {
        assert_eq!(e.task.query.len(), 50);
        validate_task(&e.task).unwrap();
    }
    let ids: Vec<usize> = eps.iter().map(|e| e.episode_id).collect();
    assert_eq!(ids, (0..400).collect::<Vec<_>>());
    for k in [3, 5, 8, 10] {
        let eps = build_episodes(&fake_dataset(2), &cfg.with_shots(k), 4).unwrap();
        assert!(eps.iter().all(|e| e.task.support.len() == k - 1 && e.task.query.len() == 50));
    }
}

#[test]
fn episode_is_restricted_to_person() {
    let ds = fake_dataset(3);
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..50 {
        let e = sample_episode(&ds.test, &SamplerConfig::default(), "p101", 0, &mut rng).unwrap();
        assert_eq!(e.task.person_id, "p101");
    }
    assert!(sample_episode(&ds.test, &SamplerConfig::default(), "nobody", 0, &mut rng).is_err());
}

#[test]
fn episode_file_replays_exactly() {
    let ds = fake_dataset(3);
    let eps = build_episodes(&ds, &SamplerConfig::default(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.json");
    save_episodes(&eps, &path).unwrap();
    let replay = load_episodes(&path, &ds).unwrap();
    assert_eq!(replay, eps);
    save_episodes(&replay, &dir.path().join("again.json")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.json")).unwrap()
    );
}

#[test]
fn task_record_round_trip_is_identity() {
    let clips = vec![fake_clip("p0", "p0_c0", 40)];
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..20 {
        let t = sample_task(&clips, &SamplerConfig::default(), &mut rng).unwrap();
        let json = serde_json::to_string(&TaskRecord::of(&t)).unwrap();
        let rec: TaskRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(rec.build(&clips[0]).unwrap(), t);
    }
}

#[test]
fn malformed_tasks_are_rejected() {
    let clip = fake_clip("p0", "p0_c0", 40);
    let good = TaskRecord {
        person_id: "p0".into(),
        clip_id: "p0_c0".into(),
        reference_index: 2,
        support_len: 4,
        query_start: 12,
        query_len: 4,
        interval: 5,
    };
    let task = good.build(&clip).unwrap();
    validate_task(&task).unwrap();

    let inside = TaskRecord { query_start: 5, ..good.clone() };
    assert!(matches!(inside.build(&clip), Err(Error::Structure(_))));

    let mut mixed = task.clone();
    mixed.query.person_id = "p1".into();
    assert!(matches!(validate_task(&mixed), Err(Error::Structure(_))));

    let mut gap = task.clone();
    gap.support.start_index += 1;
    assert!(matches!(validate_task(&gap), Err(Error::Structure(_))));
}
