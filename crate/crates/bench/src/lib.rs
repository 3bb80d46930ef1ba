//! Fixtures shared by the benchmarks.

use cmc_core::pipeline::build_training_set;
use cmc_core::synthetic::coreference_corpus;
use cmc_core::training::{build_vocab, TrainConfig, Trainer};
use cmc_core::Corpus;

pub fn config(k: usize, hidden: usize) -> TrainConfig {
    TrainConfig {
        k,
        hidden,
        layers: 1,
        heads: 2,
        ff_dim: 2 * hidden,
        dropout: 0.0,
        max_seq_len: 128,
        max_query_len: 24,
        doc_stride: 64,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

/// A freshly initialized trainer over a synthetic corpus of six-person
/// paragraphs.
pub fn trainer(k: usize, hidden: usize) -> (Trainer, Corpus) {
    let corpus = coreference_corpus(16, 3, 6, 0);
    let cfg = config(k, hidden);
    let vocab = build_vocab(&corpus, &cfg);
    (Trainer::new(cfg, vocab, 1_000_000).expect("valid config"), corpus)
}

pub use cmc_core::pipeline::TrainingSet;

pub fn training_set(t: &Trainer, corpus: &Corpus) -> TrainingSet {
    let packing = t.model.config().packing;
    build_training_set(corpus, &t.vocab, &packing, t.cfg.k, t.cfg.history_flags()).expect("training set")
}
