use divan::corpus::Verse;
use divan::encoder::Parameters;
use divan::metrics::Level;
use divan::model::{accuracy, fit, total_loss, Checkpoint, Model, TrainConfig, VerseExample};
use divan::normalize::build_vocab;
use divan::pipeline::{run_experiment, Attributor, ExperimentConfig, Featurizer};
use divan::split::Split;
use divan::synthetic::{generate, SyntheticConfig};
use divan::Error;

fn separable() -> SyntheticConfig {
    SyntheticConfig {
        poets: 3,
        poems_per_poet: 40,
        generic_fraction: 0.0,
        seed: 5,
        ..Default::default()
    }
}

fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.embedding.epochs = 2;
    cfg.train.max_epochs = 6;
    cfg
}

#[test]
fn separable_corpus_is_learned() {
    let corpus = generate(&separable()).unwrap();
    let run = run_experiment(&corpus, &quick_config()).unwrap();
    let train = run.split.subset(&run.corpus, Split::Train).unwrap();
    let ex = run.attributor.featurizer.examples(&train).unwrap();
    assert!(accuracy(&run.attributor.model, &ex).unwrap() > 0.95);
    assert_eq!(run.evaluation.reports.len(), 4);
    for level in Level::ALL {
        assert_eq!(run.evaluation.report(level).level, level);
    }
    assert_eq!(run.leakage.violations, 0);
}

#[test]
fn checkpoint_round_trip_and_stale_artifacts() {
    let corpus = generate(&separable()).unwrap();
    let run = run_experiment(&corpus, &quick_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    run.checkpoint.save(&path).unwrap();
    let f = &run.attributor.featurizer;
    let loaded = Attributor::new(Checkpoint::load(&path).unwrap(), f.vocab.clone(), f.embeddings.clone()).unwrap();

    let r = &corpus.records()[0];
    let v = r.verses[0].clone();
    let (a, la) = run.attributor.predict_verse(&v, &r.form, &r.meter).unwrap();
    let (b, lb) = loaded.predict_verse(&v, &r.form, &r.meter).unwrap();
    assert_eq!(la, lb);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(run.attributor.predict_verse(&v, &r.form, &r.meter).unwrap().0, a);

    let (_, unknown_form) = loaded.predict_verse(&v, "tarji-band", &r.meter).unwrap();
    assert!(unknown_form < loaded.poets().len());
    assert!(loaded.predict_verse(&Verse::new("  ", ""), &r.form, &r.meter).is_err());

    let elsewhere = generate(&SyntheticConfig { seed: 99, ..separable() }).unwrap();
    let other = build_vocab(&elsewhere, f.vocab.config(), 1).unwrap();
    assert_ne!(other.hash(), f.vocab.hash());
    let stale = Attributor::new(run.checkpoint.clone(), other, f.embeddings.clone());
    assert!(matches!(stale, Err(Error::StaleArtifact { ref name, .. }) if name == "vocabulary"));

    let mut tampered = run.checkpoint.clone();
    tampered.header.meter_map.meters.swap(0, 1);
    let bytes = tampered.to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::StaleArtifact { ref name, .. }) if name == "meter map"
    ));
}

fn small_setup() -> (Featurizer, Vec<VerseExample>, Vec<VerseExample>) {
    let corpus = generate(&SyntheticConfig {
        poems_per_poet: 12,
        ..separable()
    })
    .unwrap();
    let cfg = quick_config();
    let (vocab, emb) = divan::pipeline::train_text_artifacts(&corpus, &cfg).unwrap();
    let f = Featurizer::fit(&corpus, corpus.poet_index().clone(), vocab, emb, &cfg).unwrap();
    let ex = f.examples(&corpus).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = ex.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let strip = |v: Vec<(usize, VerseExample)>| v.into_iter().map(|(_, e)| e).collect();
    (f, strip(a), strip(b))
}

fn fresh_model(f: &Featurizer) -> Model {
    let cfg = ExperimentConfig::default();
    Model::init(f.vocab.len(), f.aux_dim(), f.poet_index.len(), cfg.encoder, cfg.head, cfg.fusion).unwrap()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (f, train, valid) = small_setup();
    let model = fresh_model(&f);
    let mut rounded = model.params.clone();
    rounded.round_to_f32();
    let cfg = TrainConfig {
        lr: 0.0,
        max_epochs: 3,
        patience: 5,
        ..TrainConfig::desk()
    };
    let out = fit(model, &train, &valid, &cfg).unwrap();
    assert_eq!(out.model.params, rounded);
    let accs: Vec<f64> = out.log.epochs.iter().map(|e| e.valid_accuracy).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn logit_shift_leaves_probabilities_unchanged() {
    let (f, train, _) = small_setup();
    let model = fresh_model(&f);
    let batch: Vec<&VerseExample> = train.iter().take(5).collect();
    let a = model.predict_proba(&batch).unwrap();
    let mut shifted = model.clone();
    shifted.params.head.b2.iter_mut().for_each(|b| *b += 3.5);
    let b = shifted.predict_proba(&batch).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn balanced_weights_equal_unweighted_loss() {
    let (f, train, _) = small_setup();
    let model = fresh_model(&f);
    let mut per_class = vec![Vec::new(); f.poet_index.len()];
    for e in &train {
        per_class[e.label].push(e);
    }
    let n = per_class.iter().map(Vec::len).min().unwrap();
    let batch: Vec<&VerseExample> = per_class.iter().flat_map(|c| c[..n].iter().copied()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let w = divan::model::class_weights(&labels, f.poet_index.len()).unwrap();
    assert!(w.iter().all(|&x| x == 1.0));
    let ones = vec![1.0; w.len()];
    assert_eq!(
        total_loss(&model, &batch, &w, 0.01).unwrap(),
        total_loss(&model, &batch, &ones, 0.01).unwrap()
    );
    let mut zero = model.clone();
    for t in zero.params.tensors_mut() {
        t.iter_mut().for_each(|x| *x = 0.0);
    }
    let ce = total_loss(&zero, &batch, &ones, 0.0).unwrap();
    assert_eq!(total_loss(&zero, &batch, &ones, 5.0).unwrap(), ce);
}
