use negprompt_core::*;

fn small_world() -> World {
    generate_world(&WorldConfig {
        id_classes: 5,
        ood_classes: 3,
        shots_per_class: 3,
        test_per_class: 4,
        encoder: EncoderSpec {
            context_len: 4,
            ..EncoderSpec::default()
        },
        ..WorldConfig::default()
    })
    .unwrap()
}

fn frozen(seed: u64, n: usize, dt: usize) -> PositivePrompt {
    let mut p = init_positive(seed, n, dt).unwrap();
    p.freeze();
    p
}

#[test]
fn init_positive_shape_and_determinism() {
    let a = init_positive(5, 16, 24).unwrap();
    assert_eq!(a.context().len(), 16);
    assert!(a.context().tokens().iter().all(|t| t.len() == 24));
    assert!(!a.is_frozen());
    assert_eq!(a, init_positive(5, 16, 24).unwrap());
    assert_ne!(a, init_positive(6, 16, 24).unwrap());
}

#[test]
fn negative_init_copies_with_jitter() {
    let pos = frozen(1, 16, 24);
    let one = init_negative_from_positive(&pos, 1, 0.0, 0).unwrap();
    assert_eq!(&one.contexts()[0], pos.context());

    let two = init_negative_from_positive(&pos, 2, 1e-3, 0).unwrap();
    assert_ne!(two.contexts()[0], two.contexts()[1]);
    for ctx in two.contexts() {
        let max = ctx
            .flat()
            .iter()
            .zip(pos.context().flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-2 && max > 0.0);
    }
}

#[test]
fn symmetric_negative_init_is_refused() {
    let pos = frozen(1, 4, 3);
    let err = init_negative_from_positive(&pos, 2, 0.0, 0).unwrap_err();
    assert!(err
        .to_string()
        .contains("symmetric initialization forbidden"));
    let unfrozen = init_positive(1, 4, 3).unwrap();
    assert!(matches!(
        init_negative_from_positive(&unfrozen, 1, 1e-3, 0),
        Err(Error::UnfrozenPositive)
    ));
}

#[test]
fn class_features_are_unit_and_class_agnostic() {
    let w = small_world();
    let ctx = init_positive(2, 4, 24).unwrap().context().clone();
    let all: Vec<usize> = (0..w.vocab.len()).collect();
    let feats = compute_class_features(&w.encoder, &ctx, &w.vocab, &all).unwrap();
    for f in &feats {
        assert!((negprompt_core::math::norm(f) - 1.0).abs() < 1e-9);
    }

    // permuting the vocabulary permutes the features and nothing else
    let perm: Vec<usize> = (0..w.vocab.len()).rev().collect();
    let permuted =
        ClassVocabulary::new(perm.iter().map(|&i| w.vocab.entries()[i].clone()).collect()).unwrap();
    let pf = compute_class_features(&w.encoder, &ctx, &permuted, &all).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(pf[j], feats[i]);
    }

    // a single class alone gives the same feature as in the full pass
    let single = compute_class_features(&w.encoder, &ctx, &w.vocab, &[3]).unwrap();
    assert_eq!(single, vec![feats[3].clone()]);
    assert!(compute_class_features(&w.encoder, &ctx, &w.vocab, &[]).is_err());
}

#[test]
fn identical_tokens_give_identical_features() {
    let w = small_world();
    let mut entries = w.vocab.entries()[..2].to_vec();
    entries[1].token = entries[0].token.clone();
    let vocab = ClassVocabulary::new(entries).unwrap();
    let ctx = init_positive(0, 4, 24).unwrap().context().clone();
    let f = compute_class_features(&w.encoder, &ctx, &vocab, &[0, 1]).unwrap();
    assert_eq!(f[0], f[1]);
}

fn checkpoint(w: &World) -> Checkpoint {
    let pos = frozen(3, 4, 24);
    let negatives = init_negative_from_positive(&pos, 2, 1e-3, 3).unwrap();
    Checkpoint {
        positive: pos,
        negatives: Some(negatives),
        tau: 0.01,
        encoder_fingerprint: w.encoder.fingerprint(),
        trained_classes: vec!["id-000".into(), "id-001".into()],
    }
}

#[test]
fn checkpoint_roundtrip_within_f32() {
    let w = small_world();
    let ckpt = checkpoint(&w);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.npk");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, &w.encoder).unwrap();
    assert!(back.positive.is_frozen());
    assert_eq!(back.tau, ckpt.tau);
    assert_eq!(back.trained_classes, ckpt.trained_classes);
    let pairs = [(back.positive.context(), ckpt.positive.context())]
        .into_iter()
        .chain(
            back.negatives
                .as_ref()
                .unwrap()
                .contexts()
                .iter()
                .zip(ckpt.negatives.as_ref().unwrap().contexts()),
        );
    for (a, b) in pairs {
        for (x, y) in a.flat().iter().zip(b.flat()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn checkpoint_against_other_encoder_fails() {
    let w = small_world();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.npk");
    checkpoint(&w).save(&path).unwrap();
    let other = FrozenEncoder::seeded(
        EncoderSpec {
            context_len: 4,
            ..EncoderSpec::default()
        },
        99,
    )
    .unwrap();
    let err = Checkpoint::load(&path, &other).unwrap_err();
    assert!(err.to_string().contains("fingerprint mismatch"), "{err}");
}

#[test]
fn truncated_checkpoint_reports_offset() {
    let w = small_world();
    let bytes = checkpoint(&w).to_bytes();
    // cut inside the positive context tensor
    let cut = &bytes[..60];
    match Checkpoint::from_bytes(cut) {
        Err(Error::Parse(e)) => {
            assert!(matches!(e.kind, ParseErrorKind::Truncated { .. }));
            assert!(e.offset > 0 && e.offset as usize <= cut.len());
        }
        other => panic!("{other:?}"),
    }
}
