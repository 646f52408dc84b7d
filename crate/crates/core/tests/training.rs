use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssept::autodiff::Graph;
use ssept::checkpoint;
use ssept::dataio::{split_leave_last_two, DatasetSplit, UserSequence};
use ssept::evaluation::{evaluate, EvalConfig, EvalSplit, ModelScorer, PopRec};
use ssept::model::{bind, Dropout, ModelConfig, ModelParams};
use ssept::regularization::{DecayConfig, SseConfig, SseExample};
use ssept::synthetic::{markov_corpus, two_population, MarkovCorpus, TwoPopulation};
use ssept::training::{batch_loss, train, Example, LossKind, TrainConfig, Trainer};
use ssept::Error;

fn tiny_split() -> DatasetSplit {
    let seqs: Vec<UserSequence> = (1..=6)
        .map(|u| UserSequence {
            user: u,
            items: (0..6).map(|t| (u + 2 * t) % 12 + 1).collect(),
        })
        .collect();
    split_leave_last_two(&seqs, 6, 12)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_users: 6,
        n_items: 12,
        d_user: 2,
        d_item: 4,
        max_len: 5,
        blocks: 1,
        dropout: 0.0,
    }
}

fn quiet(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 0.01,
        batch_size: 3,
        sse: None,
        eval: EvalConfig {
            k: 3,
            negatives: 2,
            seed: 0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_on_a_tiny_dataset() {
    let out = train(&tiny_split(), &tiny_model(), &quiet(60), |_| {}).unwrap();
    let first = out.log[0].train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} → {last}");
    assert!(out.best.is_finite());
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let out = train(&tiny_split(), &tiny_model(), &quiet(0), |_| {}).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, 0);
    let init = Trainer::new(tiny_split(), tiny_model(), quiet(0)).unwrap();
    assert_eq!(&out.best, init.params());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = TrainConfig {
        sse: Some(SseConfig {
            p_user: 0.3,
            p_input_item: 0.1,
            p_output_item: 0.1,
        }),
        sampling_prob: 0.5,
        decay: DecayConfig { lambda: 0.01 },
        ..quiet(5)
    };
    let model = ModelConfig {
        dropout: 0.2,
        ..tiny_model()
    };
    let a = train(&tiny_split(), &model, &cfg, |_| {}).unwrap();
    let b = train(&tiny_split(), &model, &cfg, |_| {}).unwrap();
    assert_eq!(checkpoint::to_bytes(&model, &a.best), checkpoint::to_bytes(&model, &b.best));
    let c = train(&tiny_split(), &model, &TrainConfig { seed: 1, ..cfg }, |_| {}).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn all_zero_sse_matches_disabled_sse_bit_for_bit() {
    let model = ModelConfig {
        dropout: 0.2,
        ..tiny_model()
    };
    let off = train(&tiny_split(), &model, &quiet(4), |_| {}).unwrap();
    let zero = train(
        &tiny_split(),
        &model,
        &TrainConfig {
            sse: Some(SseConfig::default()),
            ..quiet(4)
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(off.last, zero.last);
    assert_eq!(off.log.len(), zero.log.len());
    for (a, b) in off.log.iter().zip(&zero.log) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }
}

fn loss_of(params: &ModelParams, batch: &[Example]) -> f64 {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let mut none: Option<Dropout<'_, ChaCha8Rng>> = None;
    let l = batch_loss(&mut g, &bound, batch, LossKind::Bce, &mut none).unwrap();
    g.value(l.node).data()[0]
}

#[test]
fn padding_only_examples_leave_the_loss_unchanged() {
    let params = ModelParams::init(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batch = vec![Example {
        steps: vec![3, 4],
        indices: SseExample {
            user: 2,
            inputs: vec![0, 0, 0, 3, 4],
            targets: vec![4, 5],
            negatives: vec![1, 6],
        },
    }];
    let base = loss_of(&params, &batch);
    let mut padded = batch.clone();
    padded.push(Example::padding(5));
    padded.insert(0, Example::padding(5));
    assert_eq!(base.to_bits(), loss_of(&params, &padded).to_bits());
    assert_eq!(loss_of(&params, &[Example::padding(5)]), 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    let params = ModelParams::init(&tiny_model(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = vec![Example {
        steps: vec![1, 2, 3, 4],
        indices: SseExample {
            user: 1,
            inputs: vec![0, 1, 2, 3, 4],
            targets: vec![2, 3, 4, 5],
            negatives: vec![6, 7, 6, 7],
        },
    }];
    let mut g = Graph::new();
    let bound = bind(&mut g, &params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dropout = Some(Dropout { rate: 0.1, rng: &mut rng });
    let l = batch_loss(&mut g, &bound, &batch, LossKind::Bce, &mut dropout).unwrap();
    let grads = g.backward(l.node).unwrap();
    for (id, name) in bound.all.iter().zip(params.names()) {
        let gr = grads.get(*id).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(gr.data().iter().any(|&v| v != 0.0), "zero gradient for {name}");
        assert!(gr.is_finite());
    }
}

#[test]
fn saturated_user_history_is_a_sampling_error() {
    let seqs = vec![UserSequence {
        user: 1,
        items: vec![1, 2, 3, 1, 2],
    }];
    let split = split_leave_last_two(&seqs, 1, 3);
    let model = ModelConfig {
        n_users: 1,
        n_items: 3,
        ..tiny_model()
    };
    let err = train(&split, &model, &quiet(1), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Sampling { user: 1 }), "{err}");
}

#[test]
fn divergent_learning_rate_is_reported_not_hidden() {
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quiet(3)
    };
    match train(&tiny_split(), &tiny_model(), &cfg, |_| {}) {
        Err(Error::NonFinite { .. }) => {}
        Ok(out) => assert!(out.last.is_finite(), "non-finite parameters escaped without an error"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn mismatched_model_size_is_rejected() {
    let model = ModelConfig {
        n_items: 13,
        ..tiny_model()
    };
    assert!(matches!(
        Trainer::new(tiny_split(), model, quiet(1)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn epoch_log_line_names_every_field() {
    let out = train(&tiny_split(), &tiny_model(), &quiet(1), |_| {}).unwrap();
    let line = out.log[0].to_line();
    for key in ["epoch=1", "train_loss=", "valid_ndcg3=", "valid_recall3=", "wall_seconds="] {
        assert!(line.contains(key), "{line}");
    }
}

#[test]
fn trained_model_beats_popularity_on_sequential_data() {
    let seqs = markov_corpus(&MarkovCorpus {
        users: 300,
        items: 120,
        min_len: 12,
        max_len: 30,
        seed: 2,
    });
    let split = split_leave_last_two(&seqs, 300, 120);
    let model = ModelConfig {
        n_users: 300,
        n_items: 120,
        d_user: 4,
        d_item: 12,
        max_len: 12,
        blocks: 1,
        dropout: 0.1,
    };
    let eval = EvalConfig {
        k: 10,
        negatives: 50,
        seed: 0,
    };
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 0.01,
        batch_size: 32,
        eval,
        ..TrainConfig::default()
    };
    let out = train(&split, &model, &cfg, |_| {}).unwrap();
    let ours = evaluate(&ModelScorer { params: &out.best }, &split, EvalSplit::Test, &eval).unwrap();
    let pop = evaluate(&PopRec::fit(&split), &split, EvalSplit::Test, &eval).unwrap();
    assert!(ours.ndcg_at_k > pop.ndcg_at_k, "{} vs {}", ours.ndcg_at_k, pop.ndcg_at_k);
}

#[test]
fn two_population_data_trains_both_modes() {
    let pops = two_population(&TwoPopulation::default());
    let split = split_leave_last_two(&pops.sequences, 200, 40);
    for (d_user, d_item) in [(8, 16), (0, 24)] {
        let model = ModelConfig {
            n_users: 200,
            n_items: 40,
            d_user,
            d_item,
            max_len: 20,
            blocks: 1,
            dropout: 0.1,
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            eval: EvalConfig {
                k: 10,
                negatives: 15,
                seed: 0,
            },
            ..TrainConfig::default()
        };
        let out = train(&split, &model, &cfg, |_| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.best_valid_ndcg > 0.0);
    }
}
