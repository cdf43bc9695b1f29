use diagq::pipeline::{generate, generate_with, ablation_configs, RunConfig, VideoDump};

fn quick(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        queue_len: 16,
        window_len: 8,
        n_frames: 24,
        ..RunConfig::default()
    };
    cfg.scene.height = 16;
    cfg.scene.width = 16;
    cfg.scene.subjects[0].radius = 4.0;
    cfg.sacfa.frame_span = 8;
    cfg.guidance.head_span = 8;
    cfg.guidance.tail_span = 8;
    cfg
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let bytes = |seed| {
        let out = generate(&quick(seed)).unwrap();
        VideoDump::from_frames(&out.frames, &out.config_hash, seed).unwrap().to_bytes()
    };
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn ablation_rows_share_warm_up_frames() {
    let outs: Vec<_> = ablation_configs(&quick(2))
        .into_iter()
        .map(|(_, cfg)| generate(&cfg).unwrap())
        .collect();
    for o in &outs[1..] {
        assert_eq!(o.frames[..8], outs[0].frames[..8]);
    }
    assert_ne!(outs[0].frames[8..], outs[1].frames[8..]);
}

#[test]
fn working_set_does_not_grow_with_frame_count() {
    let peak = |n| {
        let mut sizes = Vec::new();
        generate_with(&RunConfig { n_frames: n, ..quick(1) }, |r| sizes.push(r.queue_footprint)).unwrap();
        sizes
    };
    let short = peak(24);
    let long = peak(72);
    assert!(long.iter().all(|&s| s == short[0]));
}

#[test]
fn dump_round_trip_is_f32_exact() {
    let out = generate(&quick(5)).unwrap();
    let dump = VideoDump::from_frames(&out.frames, &out.config_hash, 5).unwrap();
    let back = VideoDump::from_bytes(&dump.to_bytes(), "mem").unwrap();
    for (a, b) in out.frames.iter().zip(back.frames()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (*x as f32) as f64 == *y));
    }
}
