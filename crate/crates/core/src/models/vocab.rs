//! Word and label vocabularies for the toy decoders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::text::Sentence;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

/// Reserved token strings use angle brackets, which the tokenizer strips, so
/// they can never collide with real tokens.
const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary over all tokens seen at least `min_count` times, in
    /// lexicographic order after the reserved ids.
    pub fn build<'a, I>(sentences: I, min_count: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in s.tokens() {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count)
                .map(|(t, _)| t),
        );
        Vocab::from(tokens)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, s: &Sentence) -> Vec<usize> {
        s.tokens().iter().map(|t| self.id(t)).collect()
    }
}

/// Stopword-ish tokens excluded from the label vocabulary; the stand-in for
/// the full-scale noun/verb filter.
const LABEL_STOPWORDS: [&str; 10] = ["a", "an", "the", "is", "are", "in", "on", "at", "of", "and"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub threshold: usize,
}

impl LabelVocabulary {
    pub fn build<'a, I>(sentences: I, threshold: usize) -> LabelVocabulary
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in s.tokens() {
                if !LABEL_STOPWORDS.contains(&t.as_str()) {
                    *counts.entry(t.clone()).or_insert(0) += 1;
                }
            }
        }
        let labels: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= threshold)
            .map(|(t, _)| t)
            .collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelVocabulary {
            labels,
            index,
            threshold,
        }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Sorted, deduplicated label ids present in a sentence set.
    pub fn labels_of<'a, I>(&self, sentences: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut ids: Vec<usize> = sentences
            .into_iter()
            .flat_map(|s| s.tokens().iter())
            .filter_map(|t| self.id(t))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocab::build([tokenize("b a")].iter(), 1);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_serde_rebuilds_index() {
        let v = Vocab::build([tokenize("cat dog")].iter(), 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("dog"), v.id("dog"));
    }

    #[test]
    fn labels_exclude_stopwords_and_apply_threshold() {
        let sents = [
            tokenize("a man is playing a guitar"),
            tokenize("a man is riding the horse"),
        ];
        let lv = LabelVocabulary::build(sents.iter(), 2);
        assert_eq!(lv.len(), 1);
        assert_eq!(lv.label(0), "man");
        let all = LabelVocabulary::build(sents.iter(), 1);
        assert!(all.id("guitar").is_some());
        assert!(all.id("a").is_none());
    }

    #[test]
    fn labels_of_collects_sorted_unique_ids() {
        let sents = [tokenize("a man holds a guitar"), tokenize("a man plays")];
        let lv = LabelVocabulary::build(sents.iter(), 1);
        let ids = lv.labels_of(sents.iter());
        let names: Vec<&str> = ids.iter().map(|&i| lv.label(i)).collect();
        assert_eq!(names, ["guitar", "holds", "man", "plays"]);
    }
}
