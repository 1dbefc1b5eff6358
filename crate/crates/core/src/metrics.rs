//! From-scratch sentence metrics: CIDEr (D and plain), BLEU, ROUGE-L and a
//! simplified exact-match METEOR, at sentence and corpus level.
//!
//! METEOR here skips WordNet synonym and paraphrase matching, so its absolute
//! values are not comparable to scorers that use them; an optional crude
//! suffix-strip stemmer is the only relaxation offered.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::text::{build_idf, ngrams, IdfTable, Sentence, MAX_NGRAM_ORDER};

pub const CIDER_SIGMA: f64 = 6.0;
pub const BLEU_SMOOTHING_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA_FRAG: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Which CIDEr formula to apply. `D` clips candidate counts per reference and
/// applies the Gaussian length penalty; `Plain` is the raw TF-IDF cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CiderVariant {
    #[default]
    D,
    Plain,
}

fn require_refs(refs: &[Sentence], video_id: Option<&str>) -> Result<(), MetricError> {
    if refs.is_empty() {
        return Err(MetricError::MissingReference {
            video_id: video_id.map(str::to_string),
        });
    }
    Ok(())
}

/// TF-IDF weight vector of one sentence at order `n`, with its L2 norm.
fn tfidf_vec(s: &Sentence, n: usize, idf: &IdfTable) -> (BTreeMap<String, f64>, f64) {
    let grams = ngrams(s, n).expect("order in range");
    let mut vec = BTreeMap::new();
    let mut sq = 0.0;
    for (gram, &count) in grams.counts() {
        let w = count as f64 * idf.idf(n, gram);
        sq += w * w;
        vec.insert(gram.clone(), w);
    }
    (vec, sq.sqrt())
}

/// CIDEr with a selectable variant. Scores live in `[0, 10]`; an empty
/// candidate scores 0 without error.
pub fn cider(
    cand: &Sentence,
    refs: &[Sentence],
    idf: &IdfTable,
    variant: CiderVariant,
    n_max: usize,
    sigma: f64,
) -> Result<f64, MetricError> {
    require_refs(refs, None)?;
    let mut total = 0.0;
    for n in 1..=n_max.min(MAX_NGRAM_ORDER) {
        let (cand_vec, cand_norm) = tfidf_vec(cand, n, idf);
        let mut level = 0.0;
        for r in refs {
            let (ref_vec, ref_norm) = tfidf_vec(r, n, idf);
            if cand_norm == 0.0 || ref_norm == 0.0 {
                continue;
            }
            let mut num = 0.0;
            for (gram, &cw) in &cand_vec {
                if let Some(&rw) = ref_vec.get(gram) {
                    num += match variant {
                        CiderVariant::D => cw.min(rw) * rw,
                        CiderVariant::Plain => cw * rw,
                    };
                }
            }
            let mut sim = num / (cand_norm * ref_norm);
            if variant == CiderVariant::D {
                let delta = cand.len() as f64 - r.len() as f64;
                sim *= (-delta * delta / (2.0 * sigma * sigma)).exp();
            }
            level += sim;
        }
        total += level / refs.len() as f64;
    }
    Ok(10.0 * total / n_max.min(MAX_NGRAM_ORDER) as f64)
}

/// CIDEr-D with the defaults used throughout the pipeline.
pub fn cider_d(cand: &Sentence, refs: &[Sentence], idf: &IdfTable) -> Result<f64, MetricError> {
    cider(cand, refs, idf, CiderVariant::D, MAX_NGRAM_ORDER, CIDER_SIGMA)
}

/// Clipped n-gram match statistics of one candidate, reusable for both
/// sentence-level smoothing and corpus-level aggregation.
#[derive(Debug, Clone, Default)]
pub struct BleuStats {
    pub clipped: Vec<usize>,
    pub total: Vec<usize>,
    pub cand_len: usize,
    pub closest_ref_len: usize,
}

pub fn bleu_stats(cand: &Sentence, refs: &[Sentence], n_max: usize) -> Result<BleuStats, MetricError> {
    require_refs(refs, None)?;
    let mut stats = BleuStats {
        clipped: vec![0; n_max],
        total: vec![0; n_max],
        cand_len: cand.len(),
        closest_ref_len: 0,
    };
    for n in 1..=n_max {
        let cand_grams = ngrams(cand, n)?;
        let ref_grams: Vec<_> = refs.iter().map(|r| ngrams(r, n)).collect::<Result<_, _>>()?;
        for (gram, &count) in cand_grams.counts() {
            let max_ref = ref_grams.iter().map(|g| g.get(gram)).max().unwrap_or(0);
            stats.clipped[n - 1] += count.min(max_ref);
            stats.total[n - 1] += count;
        }
    }
    // Closest reference length; ties resolved toward the shorter reference.
    let c = cand.len() as i64;
    stats.closest_ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c).abs(), l))
        .unwrap_or(0);
    Ok(stats)
}

fn bleu_from_counts(clipped: &[usize], total: &[usize], c: usize, r: usize, eps: Option<f64>) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for i in 0..clipped.len() {
        let p = if total[i] > 0 && clipped[i] > 0 {
            clipped[i] as f64 / total[i] as f64
        } else {
            match eps {
                Some(e) => e,
                None => return 0.0,
            }
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / clipped.len() as f64).exp();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * geo
}

/// Sentence-level BLEU with epsilon smoothing of zero precisions.
pub fn bleu(cand: &Sentence, refs: &[Sentence], n_max: usize, smoothing_eps: f64) -> Result<f64, MetricError> {
    let stats = bleu_stats(cand, refs, n_max)?;
    Ok(bleu_from_counts(
        &stats.clipped,
        &stats.total,
        stats.cand_len,
        stats.closest_ref_len,
        Some(smoothing_eps),
    ))
}

pub fn bleu4(cand: &Sentence, refs: &[Sentence]) -> Result<f64, MetricError> {
    bleu(cand, refs, MAX_NGRAM_ORDER, BLEU_SMOOTHING_EPS)
}

/// Corpus-level BLEU over raw aggregate counts, without smoothing.
pub fn bleu_corpus(stats: &[BleuStats]) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    let n = stats[0].clipped.len();
    let mut clipped = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut c = 0usize;
    let mut r = 0usize;
    for s in stats {
        for i in 0..n {
            clipped[i] += s.clipped[i];
            total[i] += s.total[i];
        }
        c += s.cand_len;
        r += s.closest_ref_len;
    }
    bleu_from_counts(&clipped, &total, c, r, None)
}

/// Longest-common-subsequence length by dynamic programming.
pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score, maximized over references.
pub fn rouge_l(cand: &Sentence, refs: &[Sentence], beta: f64) -> Result<f64, MetricError> {
    require_refs(refs, None)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs_len(cand.tokens(), r.tokens()) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / cand.len() as f64;
        let rec = l / r.len() as f64;
        let f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
        best = best.max(f);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta_frag: f64,
    pub gamma: f64,
    /// When set, tokens are compared on their first four characters.
    pub stem: bool,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams {
            alpha: METEOR_ALPHA,
            beta_frag: METEOR_BETA_FRAG,
            gamma: METEOR_GAMMA,
            stem: false,
        }
    }
}

fn meteor_key(token: &str, stem: bool) -> &str {
    if stem && token.len() > 4 {
        &token[..4]
    } else {
        token
    }
}

/// Greedy left-to-right exact unigram alignment against one reference:
/// returns (matches, chunks).
fn meteor_align(cand: &Sentence, r: &Sentence, stem: bool) -> (usize, usize) {
    let mut used = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in cand.tokens().iter().enumerate() {
        let key = meteor_key(tok, stem);
        for (j, rtok) in r.tokens().iter().enumerate() {
            if !used[j] && meteor_key(rtok, stem) == key {
                used[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    let m = pairs.len();
    let mut chunks = 0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if k == 0 || pairs[k - 1].0 + 1 != i || pairs[k - 1].1 + 1 != j {
            chunks += 1;
        }
    }
    (m, chunks)
}

/// Exact-match METEOR variant, maximized over references.
pub fn meteor_lite(cand: &Sentence, refs: &[Sentence], params: MeteorParams) -> Result<f64, MetricError> {
    require_refs(refs, None)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    for r in refs {
        if r.is_empty() {
            continue;
        }
        let (m, ch) = meteor_align(cand, r, params.stem);
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f_mean = p * rec / (params.alpha * p + (1.0 - params.alpha) * rec);
        let penalty = params.gamma * (ch as f64 / m as f64).powf(params.beta_frag);
        best = best.max(f_mean * (1.0 - penalty));
    }
    Ok(best)
}

/// Per-video sentence scores inside a [`MetricReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
}

/// Corpus-level report. `cider`, `rouge_l` and `meteor_lite` are arithmetic
/// means of the per-video values; `bleu4` is the mean of smoothed sentence
/// scores and `bleu4_corpus` re-derives BLEU from aggregate counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub cider: f64,
    pub bleu4: f64,
    pub bleu4_corpus: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub per_video: Vec<VideoScores>,
}

/// Scores one candidate per video against that video's references. The IDF
/// table is built from the references themselves, one document per video.
pub fn corpus_scores(
    candidates: &BTreeMap<String, Sentence>,
    refs: &BTreeMap<String, Vec<Sentence>>,
    variant: CiderVariant,
) -> Result<MetricReport, MetricError> {
    for (video_id, _) in candidates.iter() {
        match refs.get(video_id) {
            Some(r) if !r.is_empty() => {}
            _ => {
                return Err(MetricError::MissingReference {
                    video_id: Some(video_id.clone()),
                })
            }
        }
    }
    if candidates.is_empty() {
        return Err(MetricError::MissingReference { video_id: None });
    }
    let docs: Vec<Vec<Sentence>> = refs.values().cloned().collect();
    let idf = build_idf(&docs)?;

    use rayon::prelude::*;
    let items: Vec<(&String, &Sentence)> = candidates.iter().collect();
    let mut rows: Vec<(VideoScores, BleuStats)> = items
        .par_iter()
        .map(|(video_id, cand)| {
            let r = &refs[*video_id];
            let scores = VideoScores {
                video_id: (*video_id).clone(),
                cider: cider(cand, r, &idf, variant, MAX_NGRAM_ORDER, CIDER_SIGMA)?,
                bleu4: bleu4(cand, r)?,
                rouge_l: rouge_l(cand, r, ROUGE_BETA)?,
                meteor_lite: meteor_lite(cand, r, MeteorParams::default())?,
            };
            let stats = bleu_stats(cand, r, MAX_NGRAM_ORDER)?;
            Ok((scores, stats))
        })
        .collect::<Result<_, MetricError>>()?;
    // Aggregation order is fixed by video id regardless of worker count.
    rows.sort_by(|a, b| a.0.video_id.cmp(&b.0.video_id));

    let n = rows.len() as f64;
    let mut report = MetricReport {
        cider: 0.0,
        bleu4: 0.0,
        bleu4_corpus: 0.0,
        rouge_l: 0.0,
        meteor_lite: 0.0,
        per_video: Vec::with_capacity(rows.len()),
    };
    let mut all_stats = Vec::with_capacity(rows.len());
    for (scores, stats) in rows {
        report.cider += scores.cider;
        report.bleu4 += scores.bleu4;
        report.rouge_l += scores.rouge_l;
        report.meteor_lite += scores.meteor_lite;
        report.per_video.push(scores);
        all_stats.push(stats);
    }
    report.cider /= n;
    report.bleu4 /= n;
    report.rouge_l /= n;
    report.meteor_lite /= n;
    report.bleu4_corpus = bleu_corpus(&all_stats);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn idf_for(docs: &[Vec<Sentence>]) -> IdfTable {
        build_idf(docs).unwrap()
    }

    /// Five-document corpus where no gram appears in every document.
    fn hand_corpus() -> Vec<Vec<Sentence>> {
        vec![
            vec![tokenize("a man is playing tennis"), tokenize("a man plays")],
            vec![tokenize("a woman is singing a song")],
            vec![tokenize("a dog runs across the field")],
            vec![tokenize("two children play in the park")],
            vec![tokenize("someone rides a horse on the beach")],
        ]
    }

    #[test]
    fn cider_exact_match_scores_ten() {
        let refs = vec![tokenize("a man is playing tennis")];
        let idf = idf_for(&hand_corpus());
        let got = cider_d(&refs[0].clone(), &refs, &idf).unwrap();
        assert!((got - 10.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cider_disjoint_scores_zero() {
        let refs = vec![tokenize("a man is playing tennis")];
        let idf = idf_for(&hand_corpus());
        let got = cider_d(&tokenize("purple elephants dance tonight"), &refs, &idf).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn cider_empty_candidate_is_zero_not_error() {
        let refs = vec![tokenize("a man is playing tennis")];
        let idf = idf_for(&hand_corpus());
        assert_eq!(cider_d(&tokenize(""), &refs, &idf).unwrap(), 0.0);
    }

    #[test]
    fn cider_empty_refs_is_error() {
        let idf = idf_for(&hand_corpus());
        assert!(matches!(
            cider_d(&tokenize("a man"), &[], &idf),
            Err(MetricError::MissingReference { .. })
        ));
    }

    // Frozen from the brute-force TF-IDF/cosine oracle in
    // tests/common/mod.rs (see tests/oracle_metrics.rs, which keeps the two
    // implementations in agreement).
    #[test]
    fn cider_hand_example_frozen_value() {
        let cand = tokenize("a man is playing");
        let refs = vec![tokenize("a man is playing tennis"), tokenize("a man plays")];
        let idf = idf_for(&hand_corpus());
        let got = cider_d(&cand, &refs, &idf).unwrap();
        assert!((got - 5.0587823010435073).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn bleu_identical_equal_length_is_one() {
        let cand = tokenize("a man rides a horse");
        let refs = vec![tokenize("a man rides a horse")];
        assert!((bleu4(&cand, &refs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_formula() {
        // All precisions are 1, candidate shorter than the only reference.
        let cand = tokenize("a man is playing");
        let refs = vec![tokenize("a man is playing tennis today")];
        let got = bleu4(&cand, &refs).unwrap();
        let want = (1.0f64 - 6.0 / 4.0).exp();
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn bleu_smoothing_hand_value() {
        // p1 = p2 = p3 = 1, p4 smoothed to eps, BP = exp(1 - 6/3).
        let cand = tokenize("the cat sat");
        let refs = vec![tokenize("the cat sat on the mat")];
        let got = bleu4(&cand, &refs).unwrap();
        let want = (BLEU_SMOOTHING_EPS.ln() / 4.0).exp() * (1.0f64 - 2.0).exp();
        assert!((got - want).abs() < 1e-15, "got {got} want {want}");
    }

    #[test]
    fn rouge_identical_is_one() {
        let cand = tokenize("a man rides a horse");
        assert!((rouge_l(&cand, &[cand.clone()], ROUGE_BETA).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_lcs_value() {
        // lcs = 3, P = R = 0.75, beta cancels.
        let cand = Sentence::from_tokens(["a", "b", "c", "d"]);
        let r = Sentence::from_tokens(["a", "c", "d", "e"]);
        let got = rouge_l(&cand, &[r], ROUGE_BETA).unwrap();
        assert!((got - 0.75).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        let cand = tokenize("x y z");
        let r = tokenize("p q r s");
        assert_eq!(rouge_l(&cand, &[r], ROUGE_BETA).unwrap(), 0.0);
    }

    #[test]
    fn meteor_identical_five_tokens() {
        let cand = tokenize("a man rides a horse");
        let got = meteor_lite(&cand, &[cand.clone()], MeteorParams::default()).unwrap();
        assert!((got - 0.996).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn meteor_swapped_pair() {
        let cand = Sentence::from_tokens(["b", "a"]);
        let r = Sentence::from_tokens(["a", "b"]);
        let got = meteor_lite(&cand, &[r], MeteorParams::default()).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn meteor_no_match_is_zero() {
        let got = meteor_lite(&tokenize("x y"), &[tokenize("p q")], MeteorParams::default()).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn corpus_scores_exact_matches() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        for (i, text) in [
            "a man is playing tennis",
            "a woman is singing a song",
            "a dog runs across the field",
        ]
        .iter()
        .enumerate()
        {
            let id = format!("v{i}");
            cands.insert(id.clone(), tokenize(text));
            refs.insert(id, vec![tokenize(text)]);
        }
        let report = corpus_scores(&cands, &refs, CiderVariant::D).unwrap();
        assert!((report.cider - 10.0).abs() < 1e-9);
        assert!((report.bleu4 - 1.0).abs() < 1e-12);
        assert!((report.bleu4_corpus - 1.0).abs() < 1e-12);
        assert!((report.rouge_l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_scores_missing_refs_names_video() {
        let mut cands = BTreeMap::new();
        cands.insert("v9".to_string(), tokenize("a man"));
        let refs = BTreeMap::new();
        match corpus_scores(&cands, &refs, CiderVariant::D) {
            Err(MetricError::MissingReference { video_id: Some(v) }) => assert_eq!(v, "v9"),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
