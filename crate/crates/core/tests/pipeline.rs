use std::collections::BTreeSet;

use graphtext::convert::{evaluate_pairs, graphs_to_texts, texts_to_graphs};
use graphtext::corpus::{gen_toy_corpus, split_nonparallel, Graph, ToySpec};
use graphtext::graphseq::ParseMode;
use graphtext::seqmodel::{load_checkpoint, save_checkpoint, ModelConfig, Seq2SeqModel};
use graphtext::trainer::{graph_target, text_target, train_unsupervised, RmlMode, TrainConfig};
use graphtext::vocab::{build_vocab, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        d_ff: 32,
        max_len: 48,
    }
}

fn setup(n: usize) -> (Vec<Graph>, Vec<Vec<String>>, Vocabulary) {
    let corpus = gen_toy_corpus(&ToySpec::default(), n).unwrap();
    let np = split_nonparallel(&corpus, 11).unwrap();
    let vocab = build_vocab(&np.graphs, &np.texts, 1).unwrap();
    (np.graphs, np.texts, vocab)
}

#[test]
fn permuting_texts_keeps_the_synthetic_pairs() {
    let (_, texts, vocab) = setup(30);
    let model = Seq2SeqModel::<f32>::new(small(), vocab.len(), 5).unwrap();
    let pairs = |ts: &[Vec<String>]| -> BTreeSet<(Vec<String>, Graph)> {
        let out = texts_to_graphs(&model, &vocab, ts, 1, ParseMode::Repair).unwrap();
        ts.iter().cloned().zip(out.into_iter().map(|e| e.graph)).collect()
    };
    let mut shuffled = texts.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    assert_ne!(shuffled, texts);
    assert_eq!(pairs(&texts), pairs(&shuffled));
}

#[test]
fn early_losses_fall_and_checkpoints_reproduce_outputs() {
    let (graphs, texts, vocab) = setup(64);
    let g: Vec<_> = graphs.iter().map(|x| graph_target(x, &vocab)).collect();
    let t: Vec<_> = texts.iter().map(|x| text_target(x, &vocab)).collect();
    let config = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 3e-3,
        rml_mode: RmlMode::Graph,
        model: small(),
        ..TrainConfig::default()
    };
    let mut first_vs_fifth = 0.0;
    let mut last = None;
    for seed in 0..3 {
        let config = TrainConfig { seed, ..config.clone() };
        let mut model = Seq2SeqModel::<f32>::new(config.model, vocab.len(), seed).unwrap();
        let out = train_unsupervised(&mut model, &g, &t, &config, &mut |_, _| Ok(())).unwrap();
        let losses = out.epoch_losses();
        assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        first_vs_fifth += losses[0] - losses[4];
        last = Some(model);
    }
    assert!(first_vs_fifth > 0.0, "mean loss did not fall by epoch 5");

    let model = last.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &vocab).unwrap();
    let (loaded, loaded_vocab) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.fingerprint(), model.fingerprint());
    assert_eq!(
        graphs_to_texts(&loaded, &loaded_vocab, &graphs[..8], 2).unwrap(),
        graphs_to_texts(&model, &vocab, &graphs[..8], 2).unwrap()
    );
    let report = evaluate_pairs(&loaded, &loaded_vocab, &graphs[..8], &texts[..8], 2).unwrap();
    assert_eq!(report.records, 8);
    assert!((0.0..=1.0).contains(&report.bleu));
}
