//! Seeded synthetic corpora for tests, benches and demos.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::KeywordId;

const ONSETS: [&str; 16] = [
    "b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// The `i`-th pseudo-word: two or three syllables, distinct for distinct `i`.
pub fn word(i: usize) -> String {
    let syllables = ONSETS.len() * VOWELS.len();
    let mut n = i;
    let mut out = String::new();
    let count = if i < syllables * syllables { 2 } else { 3 };
    for _ in 0..count {
        let s = n % syllables;
        n /= syllables;
        out.push_str(ONSETS[s % ONSETS.len()]);
        out.push_str(VOWELS[s / ONSETS.len()]);
    }
    out
}

fn words(range: std::ops::Range<usize>) -> Vec<String> {
    range.map(word).collect()
}

/// `n` distinct keywords sharing long prefixes: a head word, a category
/// word and one to three modifier words.
pub fn prefix_heavy_catalog(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = words(0..60);
    let cats = words(60..180);
    let mods = words(180..480);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut kw = vec![
            heads.choose(&mut rng).unwrap().as_str(),
            cats[rng.random_range(0..cats.len().min(8 + out.len() / 500))].as_str(),
        ];
        for _ in 0..rng.random_range(1..=3) {
            kw.push(mods.choose(&mut rng).unwrap());
        }
        let text = kw.join(" ");
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    out
}

/// Keywords, noisy training queries and held-out queries with known gold.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub keywords: Vec<String>,
    /// (query, keyword text)
    pub train: Vec<(String, String)>,
    /// (query, gold keyword id)
    pub heldout: Vec<(String, KeywordId)>,
}

impl SynthCorpus {
    pub fn pairs_tsv(&self) -> String {
        self.train.iter().map(|(q, k)| format!("{q}\t{k}\n")).collect()
    }

    pub fn keywords_txt(&self) -> String {
        self.keywords.iter().map(|k| format!("{k}\n")).collect()
    }

    /// Held-out queries as a labels file.
    pub fn labels_tsv(&self) -> String {
        self.heldout.iter().map(|(q, id)| format!("{q}\t{id}\n")).collect()
    }

    pub fn heldout_queries(&self) -> String {
        self.heldout.iter().map(|(q, _)| format!("{q}\n")).collect()
    }
}

/// Noisy copy of a keyword: shuffled tokens, one token sometimes dropped,
/// one filler word sometimes added.
fn noisy<R: Rng>(keyword: &str, fillers: &[String], rng: &mut R) -> String {
    let mut toks: Vec<&str> = keyword.split(' ').collect();
    if toks.len() > 2 && rng.random_bool(0.3) {
        toks.remove(rng.random_range(0..toks.len()));
    }
    if rng.random_bool(0.5) {
        toks.push(fillers.choose(rng).unwrap());
    }
    toks.shuffle(rng);
    toks.join(" ")
}

/// A one-to-one corpus: `keywords` distinct keywords of two to four
/// tokens, `per_keyword` noisy training queries each, and
/// `heldout_per_keyword` fresh noisy queries each for evaluation.
pub fn mapping_corpus(
    keywords: usize,
    per_keyword: usize,
    heldout_per_keyword: usize,
    seed: u64,
) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = words(0..25);
    let tails = words(25..175);
    let fillers = words(175..215);
    let mut seen = BTreeSet::new();
    let mut kws = Vec::with_capacity(keywords);
    while kws.len() < keywords {
        let mut t = vec![heads.choose(&mut rng).unwrap().clone()];
        for _ in 0..rng.random_range(1..=3) {
            let w = tails.choose(&mut rng).unwrap();
            if !t.contains(w) {
                t.push(w.clone());
            }
        }
        let text = t.join(" ");
        // Token sets must differ too, since queries are order-free.
        let mut key = t.clone();
        key.sort();
        if seen.insert(key) {
            kws.push(text);
        }
    }
    let mut train = Vec::with_capacity(keywords * per_keyword);
    for kw in &kws {
        for _ in 0..per_keyword {
            train.push((noisy(kw, &fillers, &mut rng), kw.clone()));
        }
    }
    train.shuffle(&mut rng);
    let mut heldout = Vec::with_capacity(keywords * heldout_per_keyword);
    for (i, kw) in kws.iter().enumerate() {
        for _ in 0..heldout_per_keyword {
            heldout.push((noisy(kw, &fillers, &mut rng), KeywordId(i as u32)));
        }
    }
    SynthCorpus {
        keywords: kws,
        train,
        heldout,
    }
}

/// `base` distinct keywords followed by near-duplicates of a `fraction`
/// of them. Each duplicate repeats its original's tokens in another order,
/// so under an order-blind encoder it embeds identically. Returns the
/// catalog and the (duplicate id, original id) pairs.
pub fn catalog_with_duplicates(
    base: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<String>, Vec<(KeywordId, KeywordId)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words(0..400);
    let mut seen = BTreeSet::new();
    let mut catalog = Vec::with_capacity(base);
    while catalog.len() < base {
        let mut t: Vec<&str> = Vec::new();
        while t.len() < 3 {
            let w = vocab.choose(&mut rng).unwrap().as_str();
            if !t.contains(&w) {
                t.push(w);
            }
        }
        let mut key = t.clone();
        key.sort();
        if seen.insert(key) {
            catalog.push(t.join(" "));
        }
    }
    let copies = ((base as f64) * fraction / (1.0 - fraction)).round() as usize;
    let originals = rand::seq::index::sample(&mut rng, base, copies.min(base)).into_vec();
    let mut planted = Vec::with_capacity(copies);
    for orig in originals {
        let mut t: Vec<&str> = catalog[orig].split(' ').collect();
        t.reverse();
        planted.push((KeywordId(catalog.len() as u32), KeywordId(orig as u32)));
        catalog.push(t.join(" "));
    }
    (catalog, planted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_distinct() {
        let w: BTreeSet<String> = (0..2000).map(word).collect();
        assert_eq!(w.len(), 2000);
    }

    #[test]
    fn catalogs_are_deterministic_and_distinct() {
        let a = prefix_heavy_catalog(500, 1);
        assert_eq!(a, prefix_heavy_catalog(500, 1));
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 500);
        let c = mapping_corpus(20, 5, 1, 2);
        assert_eq!(c.keywords.len(), 20);
        assert_eq!(c.train.len(), 100);
        assert_eq!(c.heldout.len(), 20);
        let (cat, dup) = catalog_with_duplicates(90, 0.1, 3);
        assert_eq!(cat.len(), 100);
        assert_eq!(dup.len(), 10);
    }
}
