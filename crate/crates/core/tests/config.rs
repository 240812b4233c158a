use negprompt_core::*;
use proptest::prelude::*;

#[test]
fn comments_and_blank_lines_are_skipped() {
    let cfg = ExperimentConfig::parse(
        "# run settings\n\nseed = 7   # trailing\nencoder_kind = tanh-mlp\nbatch_size = 32\nscorer = mcm\n",
    )
    .unwrap();
    assert_eq!(cfg.seed(), 7);
    assert_eq!(cfg.train.seed, 7);
    assert_eq!(cfg.world.encoder.kind, EncoderKind::TanhMlp);
    assert_eq!(cfg.train.batch_size, Some(32));
    assert_eq!(cfg.scorer, Scorer::Mcm);
}

#[test]
fn errors_carry_line_or_key() {
    let unknown = ExperimentConfig::parse("seed = 1\nlearning_rat = 0.1\n").unwrap_err();
    assert!(matches!(&unknown, ConfigError::UnknownKey { line: 2, key } if key == "learning_rat"));

    let twice = ExperimentConfig::parse("p = 1\np = 2\n").unwrap_err();
    assert!(twice.to_string().starts_with("line 2"), "{twice}");

    let unparsable = ExperimentConfig::parse("tau = fast\n").unwrap_err();
    assert!(matches!(&unparsable, ConfigError::Value { key, .. } if key == "tau"));

    for (text, key) in [
        ("open_vocab_fraction = 0", "open_vocab_fraction"),
        ("hardness = 2", "hardness"),
        ("p = 2\njitter = 0", "jitter"),
        ("tau = 0", "tau"),
    ] {
        match ExperimentConfig::parse(text) {
            Err(ConfigError::Value { key: k, .. }) => assert_eq!(k, key),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn echo_parses_back() {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(3);
    let text = cfg.echo(0xdead_beef);
    assert!(text.ends_with("# encoder_fingerprint = 0x00000000deadbeef\n"));
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (
            any::<u64>(),
            1usize..50,
            1usize..50,
            1usize..40,
            0.0f64..1.0,
            0.0f64..=1.0,
        ),
        (
            prop_oneof![Just(EncoderKind::LinearMean), Just(EncoderKind::TanhMlp)],
            1usize..64,
            1usize..64,
        ),
        (
            0usize..300,
            0usize..30,
            1e-4f64..1.0,
            0.0f64..0.99,
            1e-3f64..1.0,
            0usize..64,
        ),
        (
            1usize..4,
            1e-5f64..1e-2,
            0.0f64..2.0,
            0.0f64..2.0,
            0.01f64..=1.0,
        ),
    )
        .prop_map(|(w, e, t, n)| {
            let mut cfg = ExperimentConfig::default();
            cfg.set_seed(w.0);
            cfg.world.id_classes = w.1;
            cfg.world.ood_classes = w.2;
            cfg.world.shots_per_class = w.3;
            cfg.world.noise_sigma = w.4;
            cfg.world.hardness = w.5;
            cfg.world.encoder.kind = e.0;
            cfg.world.encoder.token_dim = e.1;
            cfg.world.encoder.feature_dim = e.2;
            cfg.train.stage1_epochs = t.0;
            cfg.train.stage2_epochs = t.1;
            cfg.train.learning_rate = t.2;
            cfg.train.momentum = t.3;
            cfg.train.tau = t.4;
            cfg.train.batch_size = (t.5 > 0).then_some(t.5);
            cfg.train.num_negatives = n.0;
            cfg.train.jitter = n.1;
            cfg.weights = LossWeights {
                beta: n.2,
                gamma: n.3,
            };
            cfg.open_vocab_fraction = n.4;
            cfg
        })
}

proptest! {
    #[test]
    fn serialize_roundtrips(cfg in config()) {
        prop_assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
}
