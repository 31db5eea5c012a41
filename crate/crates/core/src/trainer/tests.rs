use super::*;
use crate::corpus::{make_synthetic_corpus, Entity, SyntheticSpec};
use crate::denoiser::load_checkpoint;
use approx::assert_relative_eq;

fn micro_config() -> RunConfig {
    RunConfig {
        hidden_size: 16,
        pointer_hidden: 16,
        encoder_blocks: 1,
        k: 8,
        k_eval: 8,
        timesteps: 100,
        gamma: 2,
        batch_size: 4,
        epoch: 1,
        learning_rate: 3e-3,
        seed: 5,
        ..Default::default()
    }
}

fn micro_corpus(sentences: usize, seed: u64) -> Dataset {
    make_synthetic_corpus(&SyntheticSpec {
        sentences,
        vocab_size: 12,
        avg_entities: 1.2,
        nesting_rate: 0.0,
        seed,
    })
    .unwrap()
}

#[test]
fn lr_schedule_shape() {
    let peak = 2e-3;
    let total = 100;
    assert_eq!(lr_at(0, total, peak, 0.1), 0.0);
    assert_relative_eq!(lr_at(10, total, peak, 0.1), peak);
    assert_eq!(lr_at(total, total, peak, 0.1), 0.0);
    // linear on both sides of the peak
    assert_relative_eq!(lr_at(5, total, peak, 0.1), peak * 0.5);
    assert_relative_eq!(lr_at(55, total, peak, 0.1), peak * 0.5);
    // monotone up then down
    for s in 0..10 {
        assert!(lr_at(s, total, peak, 0.1) < lr_at(s + 1, total, peak, 0.1));
    }
    for s in 10..total {
        assert!(lr_at(s, total, peak, 0.1) > lr_at(s + 1, total, peak, 0.1));
    }
    // no warmup: start at peak immediately after step 0 region
    assert_relative_eq!(lr_at(0, total, peak, 0.0), peak);
}

#[test]
fn zero_entity_sentence_loss_is_null_class_only() {
    let cfg = micro_config();
    let ds = micro_corpus(4, 3);
    let token_vocab = TokenVocab::build(ds.items.iter().map(|(s, _)| s));
    let model = Denoiser::new(
        ModelConfig {
            hidden: cfg.hidden_size,
            encoder_blocks: cfg.encoder_blocks,
            ff_mult: cfg.ff_mult,
            pointer_hidden: cfg.pointer_hidden,
            num_types: 2,
            activation: "gelu".into(),
        },
        token_vocab,
        ds.labels.clone(),
        EncoderAdapter::Toy,
        cfg.seed,
    )
    .unwrap();

    let sentence = &ds.items[0].0;
    let gold = EntitySet::default();
    let k = 6;
    let x_t = Array2::from_shape_fn((k, 2), |(i, j)| ((i + j) as f64 * 0.37).sin());
    let pass = sentence_loss(&model, sentence, &gold, &x_t, 50, 1.0, LossWeights::default(), false, false, None)
        .unwrap();
    assert!(pass.matching.assignment.iter().all(|a| a.is_none()));

    // recompute the expected value straight from the output tables
    let enc = model.encode_sentence(sentence).unwrap();
    let codec = SpanCodec::new(sentence.len(), 1.0).unwrap();
    use crate::denoiser::BoundaryDenoiser;
    let out = model.denoise(&x_t, &enc, 50, &codec).unwrap();
    let null = out.p_class.ncols() - 1;
    let expect: f64 = (0..k).map(|i| -out.p_class[[i, null]].max(1e-12).ln()).sum();
    assert_relative_eq!(pass.loss, expect, epsilon = 1e-9);
}

#[test]
fn train_step_is_deterministic_across_runs() {
    let cfg = micro_config();
    let ds = micro_corpus(8, 7);
    let run = || {
        let token_vocab = TokenVocab::build(ds.items.iter().map(|(s, _)| s));
        let mut model = Denoiser::new(
            ModelConfig {
                hidden: cfg.hidden_size,
                encoder_blocks: cfg.encoder_blocks,
                ff_mult: cfg.ff_mult,
                pointer_hidden: cfg.pointer_hidden,
                num_types: 2,
                activation: "gelu".into(),
            },
            token_vocab,
            ds.labels.clone(),
            EncoderAdapter::Toy,
            cfg.seed,
        )
        .unwrap();
        let sched = VarianceSchedule::new(cfg.scheduler, cfg.timesteps).unwrap();
        let mut opt = AdamW::new(model.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut losses = Vec::new();
        for chunk in ds.items.chunks(cfg.batch_size) {
            let batch: Vec<&(Sentence, EntitySet)> = chunk.iter().collect();
            let loss =
                train_step(&mut model, &mut opt, &batch, &sched, &cfg, 1e-3, false, &mut rng)
                    .unwrap();
            losses.push(loss);
        }
        losses
    };
    assert_eq!(run(), run());
}

#[test]
fn oversized_sentences_error_or_skip_per_config() {
    let mut cfg = micro_config();
    cfg.k = 1;
    let sentence = Sentence::new("s", vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let gold = EntitySet::new(vec![
        Entity { left: 0, right: 1, label: 0 },
        Entity { left: 1, right: 2, label: 1 },
    ]);
    let token_vocab = TokenVocab::build([&sentence].into_iter());
    let mut model = Denoiser::new(
        ModelConfig {
            hidden: 16,
            encoder_blocks: 1,
            ff_mult: 2,
            pointer_hidden: 16,
            num_types: 2,
            activation: "gelu".into(),
        },
        token_vocab,
        crate::corpus::LabelVocab::from_names(&["A", "B"]),
        EncoderAdapter::Toy,
        1,
    )
    .unwrap();
    let sched = VarianceSchedule::new(cfg.scheduler, cfg.timesteps).unwrap();
    let mut opt = AdamW::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pair = (sentence, gold);
    let batch = vec![&pair];
    let err = train_step(&mut model, &mut opt, &batch, &sched, &cfg, 1e-3, false, &mut rng)
        .map(|_| ())
        .unwrap_err();
    assert!(err.to_string().contains("K = 1"), "{err}");

    cfg.skip_oversized = true;
    let loss =
        train_step(&mut model, &mut opt, &batch, &sched, &cfg, 1e-3, false, &mut rng).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn encoder_freeze_holds_parameters_fixed() {
    let mut cfg = micro_config();
    cfg.epoch = 2;
    cfg.encoder_freeze_epochs = 2;
    let train_ds = micro_corpus(12, 11);
    let dev_ds = micro_corpus(4, 12);
    let dir = tempfile::tempdir().unwrap();

    let report = train(&cfg, &train_ds, &dev_ds, EncoderAdapter::Toy, dir.path()).unwrap();
    let (trained, _) = load_checkpoint(&report.last_path).unwrap();
    // compare against a freshly initialized model with the same seed
    let token_vocab = TokenVocab::build(train_ds.items.iter().map(|(s, _)| s));
    let fresh = Denoiser::new(trained.cfg.clone(), token_vocab, train_ds.labels.clone(),
        EncoderAdapter::Toy, cfg.seed).unwrap();

    let mut encoder_equal = true;
    let mut decoder_changed = false;
    for id in fresh.params.ids() {
        let name = fresh.params.name(id);
        let tid = trained.params.id_by_name(name).unwrap();
        let same = trained.params.value(tid) == fresh.params.value(id);
        if name.starts_with("encoder.") {
            encoder_equal &= same;
        } else if !same {
            decoder_changed = true;
        }
    }
    assert!(encoder_equal, "frozen encoder parameters must not move");
    assert!(decoder_changed, "decoder should train while the encoder is frozen");

    // after unfreezing, at least one encoder parameter moves
    cfg.encoder_freeze_epochs = 0;
    let dir2 = tempfile::tempdir().unwrap();
    let report = train(&cfg, &train_ds, &dev_ds, EncoderAdapter::Toy, dir2.path()).unwrap();
    let (trained, _) = load_checkpoint(&report.last_path).unwrap();
    let moved = fresh.params.ids().any(|id| {
        let name = fresh.params.name(id);
        name.starts_with("encoder.")
            && trained.params.value(trained.params.id_by_name(name).unwrap())
                != fresh.params.value(id)
    });
    assert!(moved, "unfrozen encoder should change on a nontrivial corpus");
}

#[test]
fn zero_epochs_emit_a_loadable_untrained_checkpoint() {
    let mut cfg = micro_config();
    cfg.epoch = 0;
    let train_ds = micro_corpus(4, 21);
    let dev_ds = micro_corpus(2, 22);
    let dir = tempfile::tempdir().unwrap();
    let report = train(&cfg, &train_ds, &dev_ds, EncoderAdapter::Toy, dir.path()).unwrap();
    let (model, extra) = load_checkpoint(&report.best_path).unwrap();
    assert_eq!(model.cfg.hidden, cfg.hidden_size);
    let stored: RunConfig = serde_json::from_value(extra).unwrap();
    assert_eq!(stored, cfg);
    assert!(report.history.is_empty());
}

#[test]
fn short_training_reduces_loss() {
    let mut cfg = micro_config();
    cfg.epoch = 3;
    cfg.learning_rate = 3e-3;
    let ds = micro_corpus(24, 31);
    let dev = micro_corpus(4, 32);
    let dir = tempfile::tempdir().unwrap();
    let report = train(&cfg, &ds, &dev, EncoderAdapter::Toy, dir.path()).unwrap();
    let first = report.history.first().unwrap().loss;
    let last = report.history.last().unwrap().loss;
    assert!(
        last < first,
        "loss should fall over training: first {first}, last {last}"
    );
}

#[test]
fn gradients_match_finite_differences_on_a_sampled_subset() {
    // fast stride-sampled version of the full gradient check
    let ds = micro_corpus(2, 41);
    let token_vocab = TokenVocab::build(ds.items.iter().map(|(s, _)| s));
    let mut model = Denoiser::new(
        ModelConfig {
            hidden: 8,
            encoder_blocks: 1,
            ff_mult: 2,
            pointer_hidden: 8,
            num_types: 2,
            activation: "gelu".into(),
        },
        token_vocab,
        ds.labels.clone(),
        EncoderAdapter::Toy,
        3,
    )
    .unwrap();
    let (sentence, gold) = {
        let (s, _) = &ds.items[0];
        let short = Sentence::new("g", s.tokens.iter().take(6).cloned().collect()).unwrap();
        let gold = EntitySet::new(vec![Entity { left: 1, right: 3, label: 0 }]);
        (short, gold)
    };
    let x_t = Array2::from_shape_fn((3, 2), |(i, j)| ((i * 3 + j) as f64 * 0.71).sin() * 1.3);
    let t = 37;

    let base = sentence_loss(&model, &sentence, &gold, &x_t, t, 1.0, LossWeights::default(), false, true, None)
        .unwrap();
    let grads = base.grads.unwrap();
    let matching = base.matching;

    let eps = 1e-5;
    let mut checked = 0;
    for id in model.params.ids() {
        let dim = model.params.value(id).dim();
        let n = dim.0 * dim.1;
        for flat in (0..n).step_by(17) {
            let (r, c) = (flat / dim.1, flat % dim.1);
            let orig = model.params.value(id)[[r, c]];
            let mut eval = |delta: f64| {
                model.params.value_mut(id)[[r, c]] = orig + delta;
                let pass = sentence_loss(
                    &model, &sentence, &gold, &x_t, t, 1.0, LossWeights::default(), false,
                    false, Some(&matching),
                )
                .unwrap();
                pass.loss
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            model.params.value_mut(id)[[r, c]] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let rel = (analytic - fd).abs() / denom;
            assert!(
                rel < 1e-4,
                "param {} [{r},{c}]: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.2e})",
                model.params.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 100, "sampled {checked} coordinates");
}
