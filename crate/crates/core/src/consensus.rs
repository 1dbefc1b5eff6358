//! Two-phase consensus over a candidate pool: leave-one-out CIDEr agreement,
//! top-C selection, and optional oracle re-ranking of the survivors.

use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::error::ConsensusError;
use crate::metrics::cider_d;
use crate::oracle::{tournament_rank, PairwiseComparator};
use crate::error::TextError;
use crate::text::{build_idf, IdfTable, Sentence};

/// The paper's phase-2 pool width.
pub const DEFAULT_TOP_C: usize = 3;

/// Per-video candidates, ordered by model id. Model ids are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    video_id: String,
    candidates: Vec<(String, Sentence)>,
}

impl CandidatePool {
    pub fn new(video_id: &str, mut candidates: Vec<(String, Sentence)>) -> Result<Self, ConsensusError> {
        if candidates.is_empty() {
            return Err(ConsensusError::EmptyPool(video_id.to_string()));
        }
        candidates.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in candidates.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(ConsensusError::DuplicateModelId {
                    video_id: video_id.to_string(),
                    model_id: pair[0].0.clone(),
                });
            }
        }
        Ok(CandidatePool {
            video_id: video_id.to_string(),
            candidates,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn candidates(&self) -> &[(String, Sentence)] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// IDF over the candidate corpus itself: one document per video's pool. The
/// default phase-1 statistic; an externally built table may replace it.
pub fn build_candidate_idf(pools: &[CandidatePool]) -> Result<IdfTable, TextError> {
    let docs: Vec<Vec<Sentence>> = pools
        .iter()
        .map(|p| p.candidates.iter().map(|(_, s)| s.clone()).collect())
        .collect();
    build_idf(&docs)
}

/// Leave-one-out agreement: each candidate's CIDEr-D against all the other
/// pool sentences, duplicates included as references.
pub fn phase1_scores(pool: &CandidatePool, idf: &IdfTable) -> Result<Vec<f64>, ConsensusError> {
    if pool.len() < 2 {
        return Err(ConsensusError::DegeneratePool(pool.video_id.clone()));
    }
    let mut scores = Vec::with_capacity(pool.len());
    for (i, (_, cand)) in pool.candidates.iter().enumerate() {
        let refs: Vec<Sentence> = pool
            .candidates
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (_, s))| s.clone())
            .collect();
        scores.push(cider_d(cand, &refs, idf)?);
    }
    Ok(scores)
}

/// Indices of the `min(c, n)` highest scores, descending; ties go to the
/// candidate earlier in model-id order.
pub fn top_c(scores: &[f64], c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(c.max(1).min(scores.len()));
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusResult {
    /// Agreement score per candidate, in pool (model-id) order.
    pub phase1_scores: Vec<f64>,
    /// Pool indices of the phase-1 survivors, best first.
    pub top_c: Vec<usize>,
    /// Tournament order over the survivors, when an oracle ran.
    pub oracle_ranking: Option<Vec<usize>>,
    pub selected_model: String,
    pub selected: Sentence,
}

/// Full consensus for one pool. Pools of one bypass both phases; the
/// tournament runs whenever an oracle is supplied and at least two
/// candidates survive phase 1.
pub fn consensus_select<C: PairwiseComparator>(
    pool: &CandidatePool,
    idf: &IdfTable,
    oracle: Option<(&C, &VideoRecord)>,
    c: usize,
) -> Result<ConsensusResult, ConsensusError> {
    if pool.len() == 1 {
        let (model, sentence) = pool.candidates[0].clone();
        return Ok(ConsensusResult {
            phase1_scores: vec![0.0],
            top_c: vec![0],
            oracle_ranking: None,
            selected_model: model,
            selected: sentence,
        });
    }
    let scores = phase1_scores(pool, idf)?;
    let survivors = top_c(&scores, c);
    let mut oracle_ranking = None;
    let mut selected_idx = survivors[0];
    if let Some((net, video)) = oracle {
        if survivors.len() >= 2 {
            let entrants: Vec<(String, Sentence, f64)> = survivors
                .iter()
                .map(|&i| {
                    let (m, s) = &pool.candidates[i];
                    (m.clone(), s.clone(), scores[i])
                })
                .collect();
            let order = tournament_rank(net, video, &entrants)?;
            let ranked: Vec<usize> = order.into_iter().map(|r| survivors[r]).collect();
            selected_idx = ranked[0];
            oracle_ranking = Some(ranked);
        }
    }
    let (model, sentence) = pool.candidates[selected_idx].clone();
    Ok(ConsensusResult {
        phase1_scores: scores,
        top_c: survivors,
        oracle_ranking,
        selected_model: model,
        selected: sentence,
    })
}

fn extremum_against_gt(
    pool: &CandidatePool,
    annotations: &[Sentence],
    idf: &IdfTable,
    take_max: bool,
) -> Result<(String, Sentence), ConsensusError> {
    let mut best_idx = 0usize;
    let mut best_score = f64::NAN;
    for (i, (_, cand)) in pool.candidates.iter().enumerate() {
        let score = cider_d(cand, annotations, idf)?;
        let better = if best_score.is_nan() {
            true
        } else if take_max {
            score > best_score
        } else {
            score < best_score
        };
        if better {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(pool.candidates[best_idx].clone())
}

/// The diagnostic upper bound: the pool sentence with the highest CIDEr-D
/// against the ground-truth annotations. Ties go to the lower model id.
pub fn best_against_gt(
    pool: &CandidatePool,
    annotations: &[Sentence],
    idf: &IdfTable,
) -> Result<(String, Sentence), ConsensusError> {
    extremum_against_gt(pool, annotations, idf, true)
}

/// The matching lower bound (argmin).
pub fn worst_against_gt(
    pool: &CandidatePool,
    annotations: &[Sentence],
    idf: &IdfTable,
) -> Result<(String, Sentence), ConsensusError> {
    extremum_against_gt(pool, annotations, idf, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MetricError;
    use crate::text::tokenize;

    fn pool_of(video: &str, entries: &[(&str, &str)]) -> CandidatePool {
        CandidatePool::new(
            video,
            entries
                .iter()
                .map(|(m, s)| (m.to_string(), tokenize(s)))
                .collect(),
        )
        .unwrap()
    }

    fn idf_of(pools: &[CandidatePool]) -> IdfTable {
        build_candidate_idf(pools).unwrap()
    }

    #[test]
    fn duplicate_model_ids_are_rejected() {
        let r = CandidatePool::new(
            "v",
            vec![
                ("m0".to_string(), tokenize("a")),
                ("m0".to_string(), tokenize("b")),
            ],
        );
        assert!(matches!(r, Err(ConsensusError::DuplicateModelId { .. })));
    }

    #[test]
    fn identical_cluster_beats_disjoint_outlier() {
        let pool = pool_of(
            "v",
            &[
                ("m0", "a man is playing tennis"),
                ("m1", "a man is playing tennis"),
                ("m2", "a man is playing tennis"),
                ("m3", "purple quantum elephants dance"),
            ],
        );
        // a second pool so the shared n-grams keep positive idf
        let other = pool_of("w", &[("m0", "a dog runs"), ("m1", "the cat sleeps")]);
        let idf = idf_of(&[pool.clone(), other]);
        let scores = phase1_scores(&pool, &idf).unwrap();
        assert_eq!(scores[3], 0.0);
        assert!(scores[0] > 0.0);
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[1], scores[2]);
    }

    #[test]
    fn two_identical_sentences_score_equally() {
        let pool = pool_of("v", &[("m0", "a man runs fast"), ("m1", "a man runs fast")]);
        let other = pool_of("w", &[("m0", "something different here"), ("m1", "entirely other words")]);
        let idf = idf_of(&[pool.clone(), other]);
        let scores = phase1_scores(&pool, &idf).unwrap();
        assert_eq!(scores[0], scores[1]);
    }

    #[test]
    fn degenerate_pool_signals() {
        let pool = pool_of("v", &[("m0", "a man")]);
        let other = pool_of("w", &[("m0", "a dog"), ("m1", "a cat")]);
        let idf = idf_of(&[pool.clone(), other]);
        assert!(matches!(
            phase1_scores(&pool, &idf),
            Err(ConsensusError::DegeneratePool(v)) if v == "v"
        ));
    }

    #[test]
    fn top_c_breaks_ties_by_pool_order() {
        let got = top_c(&[1.0, 3.0, 2.0, 3.0], 3);
        assert_eq!(got, vec![1, 3, 2]);
        assert_eq!(top_c(&[1.0, 2.0], 3), vec![1, 0]);
        assert_eq!(top_c(&[5.0, 5.0, 5.0, 5.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn size_one_pool_short_circuits() {
        let pool = pool_of("v", &[("m0", "a man runs")]);
        let other = pool_of("w", &[("m0", "a dog"), ("m1", "a cat")]);
        let idf = idf_of(&[pool.clone(), other]);
        let r = consensus_select::<crate::oracle::OracleNet>(&pool, &idf, None, DEFAULT_TOP_C).unwrap();
        assert_eq!(r.phase1_scores, vec![0.0]);
        assert_eq!(r.selected_model, "m0");
        assert!(r.oracle_ranking.is_none());
    }

    #[test]
    fn selection_is_invariant_under_pool_permutation() {
        let entries = [
            ("m2", "a man is playing tennis outside"),
            ("m0", "a man is playing tennis"),
            ("m3", "unrelated gibberish entirely"),
            ("m1", "a man plays tennis"),
        ];
        let pool_a = pool_of("v", &entries);
        let mut rev = entries;
        rev.reverse();
        let pool_b = pool_of("v", &rev);
        assert_eq!(pool_a, pool_b);
        let other = pool_of("w", &[("m0", "a dog runs"), ("m1", "a cat sits")]);
        let idf = idf_of(&[pool_a.clone(), other]);
        let ra = consensus_select::<crate::oracle::OracleNet>(&pool_a, &idf, None, 3).unwrap();
        let rb = consensus_select::<crate::oracle::OracleNet>(&pool_b, &idf, None, 3).unwrap();
        assert_eq!(ra.selected_model, rb.selected_model);
        assert_eq!(ra.phase1_scores, rb.phase1_scores);
    }

    #[test]
    fn selected_is_always_in_top_c() {
        let pool = pool_of(
            "v",
            &[
                ("m0", "a man is playing tennis"),
                ("m1", "a man plays tennis"),
                ("m2", "two men play tennis on a court"),
                ("m3", "a dog barks"),
            ],
        );
        let other = pool_of("w", &[("m0", "a cat sits"), ("m1", "rain falls")]);
        let idf = idf_of(&[pool.clone(), other]);
        let r = consensus_select::<crate::oracle::OracleNet>(&pool, &idf, None, 3).unwrap();
        let sel_idx = pool
            .candidates()
            .iter()
            .position(|(m, _)| *m == r.selected_model)
            .unwrap();
        assert!(r.top_c.contains(&sel_idx));
        // no oracle: the selection is the phase-1 argmax
        assert_eq!(sel_idx, r.top_c[0]);
    }

    #[test]
    fn best_against_gt_picks_verbatim_match() {
        let pool = pool_of(
            "v",
            &[
                ("m0", "a man is playing tennis"),
                ("m1", "somebody does something"),
            ],
        );
        let annotations = vec![tokenize("a man is playing tennis"), tokenize("a man plays")];
        let other = pool_of("w", &[("m0", "a dog"), ("m1", "a cat")]);
        let idf = idf_of(&[pool.clone(), other]);
        let (model, _) = best_against_gt(&pool, &annotations, &idf).unwrap();
        assert_eq!(model, "m0");
        let (worst, _) = worst_against_gt(&pool, &annotations, &idf).unwrap();
        assert_eq!(worst, "m1");
    }

    #[test]
    fn all_disjoint_ties_resolve_to_first_model_id() {
        let pool = pool_of("v", &[("m0", "alpha beta"), ("m1", "gamma delta")]);
        let annotations = vec![tokenize("completely different reference text")];
        let other = pool_of("w", &[("m0", "a dog"), ("m1", "a cat")]);
        let idf = idf_of(&[pool.clone(), other]);
        let (model, _) = best_against_gt(&pool, &annotations, &idf).unwrap();
        assert_eq!(model, "m0");
    }

    #[test]
    fn empty_annotations_error() {
        let pool = pool_of("v", &[("m0", "a man"), ("m1", "a dog")]);
        let other = pool_of("w", &[("m0", "x y"), ("m1", "z w")]);
        let idf = idf_of(&[pool.clone(), other]);
        assert!(matches!(
            best_against_gt(&pool, &[], &idf),
            Err(ConsensusError::Metric(MetricError::MissingReference { .. }))
        ));
    }
}
