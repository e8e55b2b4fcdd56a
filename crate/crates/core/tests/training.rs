//! Training-loop contracts on small synthetic corpora.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use styleshift::autograd::Graph;
use styleshift::config::TrainConfig;
use styleshift::corpus::{tokenize, EncodedCorpus, Split, StyleCorpus, Vocabulary};
use styleshift::lm::{load_into_generator, pretrain_lm, LanguageModel};
use styleshift::losses::{discriminator_pass, generator_pass, DiscriminatorInputs};
use styleshift::params::Adam;
use styleshift::retriever::RetrieverKind;
use styleshift::synthetic::toy_corpus;
use styleshift::trainer::{LiveRetrieval, Trainer};

fn toy(per_style: usize, seed: u64) -> (EncodedCorpus, usize) {
    let subsets = toy_corpus(per_style, seed)
        .into_iter()
        .map(|s| s.iter().map(|l| tokenize(l)).collect())
        .collect();
    let corpus = StyleCorpus::new(vec!["0".into(), "1".into()], Split::Train, subsets).unwrap();
    let vocab = Vocabulary::build(&corpus, 1);
    (corpus.encode(&vocab), vocab.len())
}

fn small_config() -> TrainConfig {
    TrainConfig {
        embed: 8,
        hidden: 8,
        attn: 8,
        k: 2,
        batch: 4,
        max_len: 12,
        disc_maps: 4,
        lr: 1e-3,
        refresh_interval: 200,
        ..TrainConfig::default()
    }
}

#[test]
fn each_update_uses_only_its_own_objective() {
    let (corpus, vocab) = toy(60, 2);
    let config = small_config();
    let mut trainer = Trainer::new(config.clone(), corpus, vocab).unwrap();
    let batch = trainer.sample_batch();

    // Replay the step by hand on copies of both models.
    let mut gen = trainer.generator.clone();
    let mut disc = trainer.discriminator.clone();
    let mut g = Graph::new();
    let mut source = LiveRetrieval {
        retriever: &mut trainer.retriever,
        k: config.k,
    };
    let pass = generator_pass(&mut g, &gen, &disc, &batch, &mut source, config.weights, config.k).unwrap();
    let sum = g.scalar(pass.rec) + g.scalar(pass.cyc) + g.scalar(pass.adv) + g.scalar(pass.ret) + g.scalar(pass.bow);
    assert!((g.scalar(pass.total) - sum).abs() < 1e-9);
    let grads = g.backward(pass.total);
    Adam::new(&gen.store, config.lr)
        .with_clip(Some(config.clip))
        .apply(&mut gen.store, &grads);

    disc.power_iteration();
    let mut g = Graph::new();
    let inputs = DiscriminatorInputs {
        real: &batch.sentences,
        source: &batch.source,
        target: &batch.target,
        self_soft: &pass.self_soft,
        transfer_soft: &pass.transfer_soft,
        retrieved_forward: &pass.retrieved_forward,
        retrieved_backward: &pass.retrieved_backward,
    };
    let (c1, c2) = discriminator_pass(&mut g, &disc, &inputs);
    let loss = g.add(c1, c2);
    let grads = g.backward(loss);
    Adam::new(&disc.store, config.lr)
        .with_clip(Some(config.clip))
        .apply(&mut disc.store, &grads);

    let before_gen = trainer.generator.store.clone();
    let bundle = trainer.train_on(&batch).unwrap();
    assert!((bundle.total - (bundle.rec + bundle.cyc + bundle.adv + bundle.ret + bundle.bow)).abs() < 1e-9);
    for id in gen.store.ids() {
        assert_eq!(trainer.generator.store.value(id), gen.store.value(id), "{}", gen.store.name(id));
    }
    for id in disc.store.ids() {
        assert_eq!(trainer.discriminator.store.value(id), disc.store.value(id), "{}", disc.store.name(id));
    }
    assert!(before_gen.ids().any(|id| before_gen.value(id) != gen.store.value(id)));
}

#[test]
fn one_refresh_per_interval() {
    let (corpus, vocab) = toy(60, 3);
    let mut trainer = Trainer::new(small_config(), corpus, vocab).unwrap();
    trainer.run(200, None).unwrap();
    assert_eq!(trainer.refresh_steps, vec![200]);
}

#[test]
fn sparse_and_random_retrievers_never_refresh() {
    for kind in [RetrieverKind::Sparse, RetrieverKind::Random] {
        let (corpus, vocab) = toy(30, 4);
        let config = TrainConfig {
            retriever: kind,
            refresh_interval: 2,
            ..small_config()
        };
        let mut trainer = Trainer::new(config, corpus, vocab).unwrap();
        let history = trainer.run(4, None).unwrap();
        assert!(trainer.refresh_steps.is_empty());
        assert!(history.iter().all(|b| b.is_finite()));
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let run = |seed| {
        let (corpus, vocab) = toy(60, 5);
        let config = TrainConfig {
            seed,
            ..small_config()
        };
        Trainer::new(config, corpus, vocab).unwrap().run(10, None).unwrap()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
}

#[test]
fn five_hundred_step_run_stays_finite_and_nonnegative() {
    let (corpus, vocab) = toy(200, 6);
    let mut trainer = Trainer::new(small_config(), corpus, vocab).unwrap();
    let history = trainer.run(500, None).unwrap();
    assert_eq!(history.len(), 500);
    for b in &history {
        assert!(b.is_finite(), "step {}", b.step);
        for v in [b.rec, b.cyc, b.adv, b.ret, b.bow, b.c1, b.c2] {
            assert!(v >= -1e-12, "step {}: {:?}", b.step, b);
        }
    }
}

#[test]
fn warmup_steps_train_reconstruction_only() {
    let (corpus, vocab) = toy(30, 7);
    let config = TrainConfig {
        warmup_steps: 3,
        ..small_config()
    };
    let mut trainer = Trainer::new(config, corpus, vocab).unwrap();
    let disc_before = trainer.discriminator.store.clone();
    let history = trainer.run(3, None).unwrap();
    assert!(history.iter().all(|b| b.rec > 0.0 && b.cyc == 0.0 && b.c1 == 0.0));
    for id in disc_before.ids() {
        assert_eq!(disc_before.value(id), trainer.discriminator.store.value(id));
    }
    let next = trainer.train_step().unwrap();
    assert!(next.cyc > 0.0 && next.c1 > 0.0);
}

#[test]
fn language_model_beats_shuffled_text_and_initializes_generator() {
    let (corpus, vocab) = toy(300, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lm = LanguageModel::new(vocab, 16, 16, &mut rng);
    pretrain_lm(&mut lm, &corpus, 2, 32, 1e-2, &mut rng);
    let sentences: Vec<Vec<usize>> = corpus.subsets.iter().flatten().cloned().collect();
    let shuffled: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    let (trained, control) = (lm.token_nll(&sentences), lm.token_nll(&shuffled));
    assert!(trained < control, "{trained} vs {control}");

    let config = TrainConfig {
        embed: 16,
        hidden: 16,
        ..small_config()
    };
    let mut trainer = Trainer::new(config, corpus, vocab).unwrap();
    let report = load_into_generator(&lm, &mut trainer.generator);
    assert!(report.loaded.iter().any(|n| n == "embed"));
    assert!(report.loaded.iter().any(|n| n == "dec.w_hh"));
    // The encoder runs half-width per direction, so its forward weights
    // cannot take the language model's shapes here.
    assert!(report.skipped.iter().any(|n| n.starts_with("enc.fwd")));
    assert!(trainer.train_step().unwrap().is_finite());
}
