//! Tokenization, n-gram extraction and IDF statistics shared by the metrics
//! and the models.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TextError;

/// Highest n-gram order used anywhere in the crate.
pub const MAX_NGRAM_ORDER: usize = 4;

/// A tokenized caption: lowercase words, no punctuation, no empty tokens.
///
/// Serializes as its space-joined text; deserializing re-tokenizes, so the
/// invariants survive any input.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Sentence {
    tokens: Vec<String>,
}

impl From<String> for Sentence {
    fn from(raw: String) -> Self {
        tokenize(&raw)
    }
}

impl From<Sentence> for String {
    fn from(s: Sentence) -> String {
        s.text()
    }
}

impl Sentence {
    /// Builds a sentence from pre-tokenized words by re-tokenizing their
    /// space-join, so the invariants hold no matter what was passed in.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .collect::<Vec<_>>()
            .join(" ");
        tokenize(&joined)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-join of the tokens. `tokenize(s.text())` reproduces `s`.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl std::fmt::Display for Sentence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// Lowercases, replaces every character outside `[a-z0-9']` by a space and
/// splits on whitespace. Total: any input (including empty) is accepted.
///
/// Apostrophes stay inside tokens, so "man's" is a single token.
pub fn tokenize(raw: &str) -> Sentence {
    let lowered = raw.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    Sentence {
        tokens: cleaned.split_whitespace().map(str::to_string).collect(),
    }
}

/// Multiset of the n-grams of one sentence. Keys are space-joined token
/// tuples, which is lossless because tokens contain no whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramMultiset {
    n: usize,
    counts: BTreeMap<String, usize>,
}

impl NGramMultiset {
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, gram: &str) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }
}

/// Sliding-window n-gram counts. Empty multiset when the sentence is shorter
/// than `n`.
pub fn ngrams(s: &Sentence, n: usize) -> Result<NGramMultiset, TextError> {
    if n == 0 || n > MAX_NGRAM_ORDER {
        return Err(TextError::InvalidNgramOrder(n));
    }
    let mut counts = BTreeMap::new();
    let tokens = s.tokens();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join(" ")).or_insert(0) += 1;
        }
    }
    Ok(NGramMultiset { n, counts })
}

/// All n-gram multisets of a sentence for n = 1..=4.
pub fn ngrams_up_to_max(s: &Sentence) -> [NGramMultiset; MAX_NGRAM_ORDER] {
    // n is in range by construction, so the unwraps cannot fire.
    [
        ngrams(s, 1).unwrap(),
        ngrams(s, 2).unwrap(),
        ngrams(s, 3).unwrap(),
        ngrams(s, 4).unwrap(),
    ]
}

/// Per-order document frequencies over a reference corpus. One "document" is
/// one video's whole reference-sentence set.
///
/// Immutable after construction; shared freely across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    num_docs: usize,
    df: BTreeMap<String, BTreeMap<String, usize>>,
}

impl IdfTable {
    /// Document frequency of a gram at order `n`; unseen grams resolve to 1
    /// so their idf is the finite maximum `ln(num_docs)`.
    pub fn df(&self, n: usize, gram: &str) -> usize {
        self.df
            .get(&n.to_string())
            .and_then(|m| m.get(gram).copied())
            .unwrap_or(1)
            .max(1)
    }

    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        (self.num_docs as f64 / self.df(n, gram) as f64).ln()
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::error::DataError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, self)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, crate::error::DataError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let line = lines.next().transpose()?.unwrap_or_default();
        let table: IdfTable = serde_json::from_str(&line)?;
        Ok(table)
    }
}

/// Document frequencies over `docs`, where each doc is one video's reference
/// set: `df(g)` counts the docs in which `g` appears in at least one sentence.
pub fn build_idf(docs: &[Vec<Sentence>]) -> Result<IdfTable, TextError> {
    if docs.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut df: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for n in 1..=MAX_NGRAM_ORDER {
        df.insert(n.to_string(), BTreeMap::new());
    }
    for doc in docs {
        for n in 1..=MAX_NGRAM_ORDER {
            let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
            let mut grams: Vec<NGramMultiset> = Vec::with_capacity(doc.len());
            for sentence in doc {
                grams.push(ngrams(sentence, n).expect("order in range"));
            }
            for g in &grams {
                for gram in g.counts().keys() {
                    seen.entry(gram).or_insert(());
                }
            }
            let level = df.get_mut(&n.to_string()).expect("level exists");
            for (gram, ()) in seen {
                *level.entry(gram.to_string()).or_insert(0) += 1;
            }
        }
    }
    Ok(IdfTable {
        num_docs: docs.len(),
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        let s = tokenize("A man is PLAYING tennis.");
        assert_eq!(s.tokens(), ["a", "man", "is", "playing", "tennis"]);
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  .,!  ").is_empty());
    }

    #[test]
    fn tokenize_collapses_whitespace_runs() {
        let s = tokenize("two  men,   playing!");
        assert_eq!(s.tokens(), ["two", "men", "playing"]);
    }

    #[test]
    fn tokenize_keeps_apostrophes() {
        let s = tokenize("the man's dog");
        assert_eq!(s.tokens(), ["the", "man's", "dog"]);
    }

    #[test]
    fn ngram_counts_sliding_window() {
        let s = Sentence::from_tokens(["a", "b", "a"]);
        let bi = ngrams(&s, 2).unwrap();
        assert_eq!(bi.get("a b"), 1);
        assert_eq!(bi.get("b a"), 1);
        assert_eq!(bi.total(), 2);

        let uni = ngrams(&Sentence::from_tokens(["a", "a", "a"]), 1).unwrap();
        assert_eq!(uni.get("a"), 3);
    }

    #[test]
    fn ngrams_too_short_is_empty() {
        let s = Sentence::from_tokens(["a"]);
        assert_eq!(ngrams(&s, 2).unwrap().total(), 0);
    }

    #[test]
    fn ngrams_rejects_bad_order() {
        let s = tokenize("a b c");
        assert!(matches!(ngrams(&s, 0), Err(TextError::InvalidNgramOrder(0))));
        assert!(matches!(ngrams(&s, 5), Err(TextError::InvalidNgramOrder(5))));
    }

    #[test]
    fn idf_zero_when_gram_in_every_doc() {
        let docs = vec![
            vec![tokenize("a man runs")],
            vec![tokenize("a dog runs")],
            vec![tokenize("a cat runs")],
        ];
        let idf = build_idf(&docs).unwrap();
        assert_eq!(idf.idf(1, "a"), 0.0);
        assert_eq!(idf.idf(1, "runs"), 0.0);
        assert!((idf.idf(1, "dog") - 3.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_single_doc_out_of_four() {
        let docs = vec![
            vec![tokenize("x y")],
            vec![tokenize("p q")],
            vec![tokenize("r s")],
            vec![tokenize("t u")],
        ];
        let idf = build_idf(&docs).unwrap();
        assert!((idf.idf(1, "x") - 4.0_f64.ln()).abs() < 1e-15);
        assert!((idf.idf(2, "x y") - 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_unseen_gram_maximal() {
        let docs = vec![vec![tokenize("a b")], vec![tokenize("c d")]];
        let idf = build_idf(&docs).unwrap();
        assert!((idf.idf(1, "zzz") - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn idf_rejects_empty_corpus() {
        assert!(matches!(build_idf(&[]), Err(TextError::EmptyCorpus)));
    }

    // Brute-force oracle for build_idf: direct set membership over all
    // n-grams, recomputed per query.
    fn df_oracle(docs: &[Vec<Sentence>], n: usize, gram: &str) -> usize {
        docs.iter()
            .filter(|doc| {
                doc.iter().any(|s| {
                    s.tokens()
                        .windows(n)
                        .any(|w| w.join(" ") == gram)
                })
            })
            .count()
    }

    #[test]
    fn idf_matches_membership_oracle_on_hand_corpus() {
        let docs = vec![
            vec![tokenize("a man is playing tennis"), tokenize("a man plays")],
            vec![tokenize("a woman is playing a guitar")],
            vec![tokenize("a dog runs in a field"), tokenize("the dog is running")],
        ];
        let idf = build_idf(&docs).unwrap();
        for n in 1..=MAX_NGRAM_ORDER {
            let mut grams: Vec<String> = Vec::new();
            for doc in &docs {
                for s in doc {
                    for w in s.tokens().windows(n) {
                        grams.push(w.join(" "));
                    }
                }
            }
            grams.sort();
            grams.dedup();
            for gram in grams {
                assert_eq!(idf.df(n, &gram), df_oracle(&docs, n, &gram), "n={n} gram={gram}");
            }
        }
    }

    #[test]
    fn idf_invariant_to_doc_order_and_duplicates() {
        let a = vec![tokenize("a man is playing tennis"), tokenize("a man plays")];
        let b = vec![tokenize("a woman sings a song")];
        let fwd = build_idf(&[a.clone(), b.clone()]).unwrap();
        let rev = build_idf(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(fwd.df(1, "man"), rev.df(1, "man"));
        assert_eq!(fwd.df(2, "a man"), rev.df(2, "a man"));

        let mut dup = a.clone();
        dup.push(a[0].clone());
        let with_dup = build_idf(&[dup, b]).unwrap();
        assert_eq!(fwd, with_dup);
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(raw in "\\PC{0,60}") {
            let once = tokenize(&raw);
            let twice = tokenize(&once.text());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn ngram_total_matches_length(words in proptest::collection::vec("[a-z]{1,6}", 0..12), n in 1usize..=4) {
            let s = Sentence::from_tokens(words);
            let g = ngrams(&s, n).unwrap();
            let expected = s.len().saturating_sub(n - 1);
            let expected = if s.len() < n { 0 } else { expected };
            prop_assert_eq!(g.total(), expected);
            for key in g.counts().keys() {
                prop_assert_eq!(key.split(' ').count(), n);
            }
        }
    }
}
