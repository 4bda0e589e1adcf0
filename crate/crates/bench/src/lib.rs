//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unikw_core::synth::prefix_heavy_catalog;
use unikw_core::{
    encode, Catalog, Direction, EncoderParams, KeywordId, KeywordTrie, ModelDims, ProbTable, Role, Vocab,
};

pub const MAX_LEN: usize = 8;

/// A randomly initialized encoder over a prefix-heavy catalog.
pub struct Fixture {
    pub vocab: Vocab,
    pub catalog: Catalog,
    pub params: EncoderParams,
    pub forward: KeywordTrie,
    pub reversed: KeywordTrie,
}

impl Fixture {
    pub fn new(keywords: usize, seed: u64) -> Self {
        let lines = prefix_heavy_catalog(keywords, seed);
        let vocab = Vocab::from_lines(lines.iter().map(String::as_str), 1).expect("non-empty catalog");
        let catalog = Catalog::from_lines(lines);
        let (unique, _) = catalog.tokenize_unique(&vocab, MAX_LEN);
        let trie = |dir| {
            KeywordTrie::build(unique.iter().map(|(id, s)| (*id, s.ids())), dir, vocab.checksum())
                .expect("deduplicated catalog")
        };
        let dims = ModelDims {
            vocab: vocab.len(),
            dim: 32,
            dense_dim: 32,
            hidden: 64,
            max_len: MAX_LEN,
        };
        let params = EncoderParams::random(dims, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid dims");
        Self {
            forward: trie(Direction::Forward),
            reversed: trie(Direction::Reversed),
            vocab,
            catalog,
            params,
        }
    }

    /// Log-probability table for the text of keyword `id`, as a query.
    pub fn table(&self, id: u32) -> ProbTable {
        let text = self.catalog.text(KeywordId(id)).expect("id in range");
        let tokens = self.vocab.tokenize(text, Role::Query, MAX_LEN);
        encode(&self.params, tokens.ids()).expect("in-vocab query").logprobs
    }

    pub fn embeddings(&self) -> (Vec<Vec<f64>>, Vec<KeywordId>) {
        self.catalog
            .iter()
            .map(|(id, text)| {
                let tokens = self.vocab.tokenize(text, Role::Keyword, MAX_LEN);
                (self.params.embed(tokens.surface()).expect("in-vocab keyword"), id)
            })
            .unzip()
    }
}
