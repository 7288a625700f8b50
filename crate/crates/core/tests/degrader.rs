use msm::corpus::{build_corpus, degrade, degrader_training_pairs, mean_abs_error, train_degrader, CorpusConfig, DegraderConfig};
use msm::Image;

#[test]
fn loss_halves_on_a_fifty_pair_set() {
    let cfg = DegraderConfig { n_originals: 10, draws_per_original: 5, epochs: 60, batch: 10, ..DegraderConfig::default() };
    let pairs = degrader_training_pairs(&cfg, 16, 3, 3).unwrap();
    assert_eq!(pairs.len(), 50);
    let (_, report) = train_degrader(&pairs, &cfg).unwrap();
    let first = report.epoch_losses[0];
    eprintln!("initial {:.4}, epoch 0 {first:.4}, final {:.4}", report.initial_loss, report.final_loss);
    assert!(report.final_loss <= 0.5 * first, "epoch 0 {first:.4} -> final {:.4}", report.final_loss);
}

#[test]
fn held_out_error_is_small() {
    let cfg = DegraderConfig::default();
    let train = degrader_training_pairs(&cfg, 16, 3, 1).unwrap();
    let val = degrader_training_pairs(&DegraderConfig { n_originals: 20, ..cfg.clone() }, 16, 3, 77).unwrap();
    let (model, _) = train_degrader(&train, &cfg).unwrap();
    let mae = mean_abs_error(&model, &val).unwrap();
    eprintln!("held-out MAE {mae:.4}");
    assert!(mae < 0.08, "held-out MAE {mae:.4}");
}

#[test]
fn identity_pairs_learn_identity() {
    let cfg = DegraderConfig { n_originals: 20, draws_per_original: 1, epochs: 10, ..DegraderConfig::default() };
    let make = |seed| -> Vec<(Image, Image)> {
        degrader_training_pairs(&cfg, 16, 3, seed).unwrap().into_iter().map(|(_, orig)| (orig.clone(), orig)).collect()
    };
    let (model, _) = train_degrader(&make(5), &cfg).unwrap();
    let mae = mean_abs_error(&model, &make(6)).unwrap();
    assert!(mae < 0.01, "held-out MAE {mae:.5}");
}

#[test]
fn degrade_contract() {
    let cfg = DegraderConfig { n_originals: 4, draws_per_original: 2, epochs: 2, ..DegraderConfig::default() };
    let pairs = degrader_training_pairs(&cfg, 16, 3, 9).unwrap();
    let (model, _) = train_degrader(&pairs, &cfg).unwrap();
    let out = degrade(&model, &pairs[0].0).unwrap();
    assert_eq!(out.dims(), (16, 16));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out, degrade(&model, &pairs[0].0).unwrap());
    let wrong = Image::uniform(24, 24, 0.5).unwrap();
    assert!(matches!(degrade(&model, &wrong), Err(msm::Error::DimensionMismatch { .. })));
    assert!(train_degrader(&[], &cfg).is_err());
}

#[test]
fn pseudo_pair_corpus_keeps_dims_and_range() {
    let dc = DegraderConfig { n_originals: 6, draws_per_original: 2, epochs: 2, ..DegraderConfig::default() };
    let cfg = CorpusConfig { n_users: 2, images_per_user: 4, pseudo_pairs: Some(dc), ..CorpusConfig::default() };
    let corpus = build_corpus(&cfg).unwrap();
    for p in corpus.pairs() {
        assert_eq!(p.original.dims(), p.retouched.dims());
        assert!(p.original.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(corpus.users, build_corpus(&cfg).unwrap().users);
}
