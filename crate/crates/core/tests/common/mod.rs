#![allow(dead_code)]

use msr_core::data::{gen_corpus, Corpus, CorpusConfig, HomophoneVocab};
use msr_core::encoder::EncoderConfig;
use msr_core::mfd_decoder::DecoderConfig;
use msr_core::model::{Model, ModelConfig};

pub fn tiny_corpus(n_train: usize) -> (HomophoneVocab, Corpus) {
    gen_corpus(&CorpusConfig { n_train, n_valid: 8, n_test: 8, ..Default::default() }).unwrap()
}

pub fn tiny_model(vocab: &HomophoneVocab, visual_frozen: bool, seed: u64) -> Model {
    let enc = EncoderConfig {
        d_in: vocab.d_in(),
        n_blocks: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        conv_width: 3,
        subsample_factor: 2,
        intermediate_ctc_layer: None,
    };
    let dec = DecoderConfig { n_blocks: 1, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 0 };
    Model::new(ModelConfig::new(vocab.size, enc, dec, visual_frozen).unwrap(), seed).unwrap()
}
