//! The paper-style analyses behind the CLI: per-model evaluation tables,
//! leave-one-out human agreement, and consensus-vs-ground-truth rank
//! diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::{build_candidate_idf, phase1_scores, CandidatePool};
use crate::error::MetricError;
use crate::metrics::{
    bleu4, cider_d, corpus_scores, meteor_lite, rouge_l, CiderVariant, MeteorParams, MetricReport,
    ROUGE_BETA,
};
use crate::text::{build_idf, tokenize, Sentence};

/// Means of the four metrics, the common row shape of every table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
}

impl MetricRow {
    fn from_report(r: &MetricReport) -> Self {
        MetricRow {
            cider: r.cider,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            meteor_lite: r.meteor_lite,
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.cider, self.bleu4, self.rouge_l, self.meteor_lite]
    }

    fn from_values(v: [f64; 4]) -> Self {
        MetricRow {
            cider: v[0],
            bleu4: v[1],
            rouge_l: v[2],
            meteor_lite: v[3],
        }
    }

    /// Table formatting: values x100, one decimal.
    pub fn table_cells(&self) -> String {
        format!(
            "{:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            self.cider * 100.0,
            self.bleu4 * 100.0,
            self.rouge_l * 100.0,
            self.meteor_lite * 100.0
        )
    }
}

fn mean_std(rows: &[MetricRow]) -> (MetricRow, MetricRow) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 4];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    // population standard deviation, so a single model reports exactly 0
    let mut var = [0.0; 4];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in var.iter_mut() {
        *s = (*s / n).sqrt();
    }
    (MetricRow::from_values(mean), MetricRow::from_values(var))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateReport {
    /// Per-model corpus means, keyed by model id.
    pub models: BTreeMap<String, MetricRow>,
    pub mean: MetricRow,
    pub std: MetricRow,
    /// Model id with the highest CIDEr and its row.
    pub best_individual: (String, MetricRow),
    /// One row per consensus output file, keyed by label.
    pub consensus: BTreeMap<String, MetricRow>,
}

/// Per-model evaluation plus optional consensus rows, the structure of the
/// paper's main results table.
pub fn evaluate_models(
    per_model: &BTreeMap<String, BTreeMap<String, Sentence>>,
    refs: &BTreeMap<String, Vec<Sentence>>,
    consensus_selections: &BTreeMap<String, BTreeMap<String, Sentence>>,
) -> Result<EvaluateReport, MetricError> {
    let all_videos: Vec<&String> = refs.keys().collect();
    for (model_id, cands) in per_model {
        let missing: Vec<&str> = all_videos
            .iter()
            .filter(|v| !cands.contains_key(**v))
            .map(|v| v.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(MetricError::MissingReference {
                video_id: Some(format!("model {model_id} lacks videos: {}", missing.join(", "))),
            });
        }
    }
    let mut models = BTreeMap::new();
    for (model_id, cands) in per_model {
        let report = corpus_scores(cands, refs, CiderVariant::D)?;
        models.insert(model_id.clone(), MetricRow::from_report(&report));
    }
    let rows: Vec<MetricRow> = models.values().cloned().collect();
    let (mean, std) = mean_std(&rows);
    let best_individual = models
        .iter()
        .max_by(|a, b| {
            a.1.cider
                .partial_cmp(&b.1.cider)
                .expect("finite")
                .then(b.0.cmp(a.0))
        })
        .map(|(k, v)| (k.clone(), *v))
        .expect("at least one model");
    let mut consensus = BTreeMap::new();
    for (label, selections) in consensus_selections {
        let report = corpus_scores(selections, refs, CiderVariant::D)?;
        consensus.insert(label.clone(), MetricRow::from_report(&report));
    }
    Ok(EvaluateReport {
        models,
        mean,
        std,
        best_individual,
        consensus,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanAgreementReport {
    /// Mean over all (video, annotation) pairs.
    pub avg: MetricRow,
    /// Population standard deviation over the same pairs.
    pub std: MetricRow,
    /// Mean over videos of the per-video best annotation, per metric.
    pub best: MetricRow,
    /// Mean over videos of the per-video worst annotation, per metric.
    pub worst: MetricRow,
    pub videos_scored: usize,
    pub videos_skipped: usize,
    pub pairs: usize,
}

/// Leave-one-out agreement: each annotation scored against the rest of its
/// video's annotations. Videos with fewer than two annotations are skipped
/// and counted.
pub fn human_agreement(
    annotations: &BTreeMap<String, Vec<Sentence>>,
) -> Result<HumanAgreementReport, MetricError> {
    let docs: Vec<Vec<Sentence>> = annotations.values().cloned().collect();
    let idf = build_idf(&docs)?;
    let mut pair_rows: Vec<MetricRow> = Vec::new();
    let mut best_rows: Vec<MetricRow> = Vec::new();
    let mut worst_rows: Vec<MetricRow> = Vec::new();
    let mut skipped = 0usize;
    let mut scored = 0usize;
    for anns in annotations.values() {
        if anns.len() < 2 {
            skipped += 1;
            continue;
        }
        scored += 1;
        let mut rows = Vec::with_capacity(anns.len());
        for (i, cand) in anns.iter().enumerate() {
            let refs: Vec<Sentence> = anns
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| s.clone())
                .collect();
            rows.push(MetricRow {
                cider: cider_d(cand, &refs, &idf)?,
                bleu4: bleu4(cand, &refs)?,
                rouge_l: rouge_l(cand, &refs, ROUGE_BETA)?,
                meteor_lite: meteor_lite(cand, &refs, MeteorParams::default())?,
            });
        }
        let fold = |pick: fn(f64, f64) -> f64| -> MetricRow {
            let mut acc = rows[0].values();
            for r in &rows[1..] {
                for (a, v) in acc.iter_mut().zip(r.values()) {
                    *a = pick(*a, v);
                }
            }
            MetricRow::from_values(acc)
        };
        best_rows.push(fold(f64::max));
        worst_rows.push(fold(f64::min));
        pair_rows.extend(rows);
    }
    if pair_rows.is_empty() {
        return Err(MetricError::MissingReference { video_id: None });
    }
    let (avg, std) = mean_std(&pair_rows);
    let (best, _) = mean_std(&best_rows);
    let (worst, _) = mean_std(&worst_rows);
    Ok(HumanAgreementReport {
        avg,
        std,
        best,
        worst,
        videos_scored: scored,
        videos_skipped: skipped,
        pairs: pair_rows.len(),
    })
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side has zero rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRankDiagnostics {
    pub video_id: String,
    /// Model ids ordered by phase-1 consensus score, best first.
    pub consensus_order: Vec<String>,
    /// Model ids ordered by CIDEr against ground truth, best first.
    pub gt_order: Vec<String>,
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankDiagnosticsReport {
    pub mean_spearman: f64,
    pub videos: Vec<VideoRankDiagnostics>,
    /// Pools with a single candidate carry no ranking and are skipped.
    pub videos_skipped: usize,
}

/// Compares the consensus-score ordering of each pool with its ordering by
/// CIDEr against ground truth.
pub fn rank_diagnostics(
    pools: &[CandidatePool],
    refs: &BTreeMap<String, Vec<Sentence>>,
) -> Result<RankDiagnosticsReport, crate::error::ConsensusError> {
    let idf_cand = build_candidate_idf(pools).map_err(MetricError::from)?;
    let ref_docs: Vec<Vec<Sentence>> = refs.values().cloned().collect();
    let idf_gt = build_idf(&ref_docs).map_err(MetricError::from)?;
    let mut videos = Vec::new();
    let mut skipped = 0usize;
    for pool in pools {
        if pool.len() < 2 {
            skipped += 1;
            continue;
        }
        let annotations = refs.get(pool.video_id()).ok_or_else(|| {
            MetricError::MissingReference {
                video_id: Some(pool.video_id().to_string()),
            }
        })?;
        let consensus_scores = phase1_scores(pool, &idf_cand)?;
        let mut gt_scores = Vec::with_capacity(pool.len());
        for (_, cand) in pool.candidates() {
            gt_scores.push(cider_d(cand, annotations, &idf_gt).map_err(crate::error::ConsensusError::from)?);
        }
        let order_of = |scores: &[f64]| -> Vec<String> {
            crate::consensus::top_c(scores, scores.len())
                .into_iter()
                .map(|i| pool.candidates()[i].0.clone())
                .collect()
        };
        videos.push(VideoRankDiagnostics {
            video_id: pool.video_id().to_string(),
            consensus_order: order_of(&consensus_scores),
            gt_order: order_of(&gt_scores),
            spearman: spearman(&consensus_scores, &gt_scores),
        });
    }
    if videos.is_empty() {
        return Err(MetricError::MissingReference { video_id: None }.into());
    }
    let mean_spearman = videos.iter().map(|v| v.spearman).sum::<f64>() / videos.len() as f64;
    Ok(RankDiagnosticsReport {
        mean_spearman,
        videos,
        videos_skipped: skipped,
    })
}

/// Tokenized annotation map of a corpus, the reference side of every report.
pub fn reference_map(corpus: &[crate::data::VideoRecord]) -> BTreeMap<String, Vec<Sentence>> {
    corpus
        .iter()
        .map(|v| {
            (
                v.video_id.clone(),
                v.annotations.iter().map(|a| tokenize(a)).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_identical_and_reversed() {
        let a = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &a) - 1.0).abs() < 1e-12);
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &b) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_degenerate_input() {
        let a = [1.0, 1.0, 2.0];
        let b = [2.0, 2.0, 4.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[0.5, 0.7]), 0.0);
    }

    #[test]
    fn single_model_mean_row_equals_model_row_with_zero_std() {
        let mut per_model = BTreeMap::new();
        let mut refs = BTreeMap::new();
        let mut cands = BTreeMap::new();
        for (i, text) in ["a man is playing tennis", "a dog runs across the field"]
            .iter()
            .enumerate()
        {
            let id = format!("v{i}");
            cands.insert(id.clone(), tokenize(text));
            refs.insert(id, vec![tokenize(text)]);
        }
        per_model.insert("m0".to_string(), cands);
        let report = evaluate_models(&per_model, &refs, &BTreeMap::new()).unwrap();
        assert_eq!(report.mean, report.models["m0"]);
        assert_eq!(report.std, MetricRow::default());
        assert_eq!(report.best_individual.0, "m0");
    }

    #[test]
    fn two_model_mean_std_match_hand_computation() {
        // model rows are fully determined by exact/disjoint candidates
        let mut refs = BTreeMap::new();
        refs.insert("v0".to_string(), vec![tokenize("a man is playing tennis")]);
        refs.insert("v1".to_string(), vec![tokenize("a dog runs across the field")]);
        let exact: BTreeMap<String, Sentence> = refs
            .iter()
            .map(|(k, v)| (k.clone(), v[0].clone()))
            .collect();
        let disjoint: BTreeMap<String, Sentence> = refs
            .keys()
            .map(|k| (k.clone(), tokenize("zzz qqq www")))
            .collect();
        let mut per_model = BTreeMap::new();
        per_model.insert("good".to_string(), exact);
        per_model.insert("bad".to_string(), disjoint);
        let report = evaluate_models(&per_model, &refs, &BTreeMap::new()).unwrap();
        // good: cider 10, bleu 1; bad: 0 (bleu epsilon-smoothed but far below 1e-6)
        assert!((report.models["good"].cider - 10.0).abs() < 1e-9);
        assert!(report.models["bad"].cider.abs() < 1e-12);
        // mean 5, population std 5
        assert!((report.mean.cider - 5.0).abs() < 1e-9);
        assert!((report.std.cider - 5.0).abs() < 1e-9);
        assert_eq!(report.best_individual.0, "good");
    }

    #[test]
    fn missing_video_coverage_is_reported() {
        let mut refs = BTreeMap::new();
        refs.insert("v0".to_string(), vec![tokenize("a")]);
        refs.insert("v1".to_string(), vec![tokenize("b")]);
        let mut per_model = BTreeMap::new();
        let mut cands = BTreeMap::new();
        cands.insert("v0".to_string(), tokenize("a"));
        per_model.insert("m0".to_string(), cands);
        match evaluate_models(&per_model, &refs, &BTreeMap::new()) {
            Err(MetricError::MissingReference { video_id: Some(msg) }) => {
                assert!(msg.contains("v1"), "{msg}");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn identical_annotations_agree_at_cider_ten() {
        let mut annotations = BTreeMap::new();
        annotations.insert(
            "v0".to_string(),
            vec![tokenize("a man is playing tennis"); 3],
        );
        annotations.insert(
            "v1".to_string(),
            vec![tokenize("a dog runs across the field"); 3],
        );
        let report = human_agreement(&annotations).unwrap();
        assert!((report.avg.cider - 10.0).abs() < 1e-9);
        assert!(report.std.cider.abs() < 1e-9);
        assert_eq!(report.pairs, 6);
    }

    #[test]
    fn single_annotation_videos_are_skipped_and_counted() {
        let mut annotations = BTreeMap::new();
        annotations.insert("v0".to_string(), vec![tokenize("only one caption here")]);
        annotations.insert(
            "v1".to_string(),
            vec![tokenize("a man is playing"), tokenize("a man plays")],
        );
        let report = human_agreement(&annotations).unwrap();
        assert_eq!(report.videos_skipped, 1);
        assert_eq!(report.videos_scored, 1);
        assert_eq!(report.pairs, 2);
    }
}
