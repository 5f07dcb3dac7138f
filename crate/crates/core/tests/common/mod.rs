#![allow(dead_code)]

use tse_core::data::{DataSource, Pool, Sampling};
use tse_core::frontend::{Frontend, FrontendConfig};
use tse_core::kmeans::KMeansParams;
use tse_core::model::{ModelConfig, SizePreset};
use tse_core::synth::{synthesize_corpus, Corpus, SynthConfig};
use tse_core::tokenizer::{fit_codebook, Codebook};

/// Three speakers, two feature layers, K = 5: small enough to train in a test.
pub struct Tiny {
    pub corpus: Corpus,
    pub fe: Frontend,
    pub cb: Codebook,
    pub data: DataSource,
}

pub fn tiny() -> Tiny {
    let corpus = synthesize_corpus(&SynthConfig {
        speakers: 3,
        utterances: 3,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let fe = Frontend::new(FrontendConfig {
        layer_count: 2,
        feat_dim: 8,
        ..FrontendConfig::default()
    })
    .unwrap();
    let stacks: Vec<_> = corpus.utterances.iter().map(|u| fe.extract(&u.wave).unwrap()).collect();
    let cb = fit_codebook(&stacks, &KMeansParams { k: 5, ..KMeansParams::default() }).unwrap();
    let data = DataSource {
        pool: Pool::from_corpus(&corpus, |_, _| true),
        sampling: Sampling::Random,
    };
    Tiny { corpus, fe, cb, data }
}

pub fn tiny_model(hybrid: bool) -> ModelConfig {
    ModelConfig {
        hybrid,
        feat_dim: 8,
        ..ModelConfig::preset(SizePreset::Tiny)
    }
}
