//! The phase-2 oracle: a pairwise comparator over (video, sentence, sentence)
//! and the round-robin tournament it drives.
//!
//! Both sentences go through one shared recurrent encoder; the video enters
//! as the mean of its frame features through a learned projection; three
//! fully connected layers produce the raw preference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::error::{NnError, OracleError};
use crate::metrics::cider_d;
use crate::models::Vocab;
use crate::nn::{lstm_step, stable_sigmoid, xavier, AdamConfig, NodeId, ParamSet, Tape, Tensor};
use crate::text::{IdfTable, Sentence};

/// Output probabilities are clamped into this open interval.
const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleConfig {
    pub embed: usize,
    pub hidden: usize,
    pub video_proj: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub video_dim: usize,
    pub vocab: Vocab,
    pub seed: u64,
}

impl OracleConfig {
    /// Desk-scale dimensions: token embedding 64, shared encoder 128,
    /// projection 128, fully connected 256 -> 64 -> 1.
    pub fn desk(video_dim: usize, vocab: Vocab, seed: u64) -> Self {
        OracleConfig {
            embed: 64,
            hidden: 128,
            video_proj: 128,
            fc1: 256,
            fc2: 64,
            video_dim,
            vocab,
            seed,
        }
    }
}

pub struct OracleNet {
    pub config: OracleConfig,
    pub params: ParamSet,
}

/// Arithmetic mean over frame features; the oracle's video encoding.
pub fn video_embed(video: &VideoRecord) -> Result<Vec<f64>, OracleError> {
    if video.frames.is_empty() {
        return Err(OracleError::EmptyVideo);
    }
    let dim = video.frames[0].len();
    let mut mean = vec![0.0; dim];
    for frame in &video.frames {
        if frame.len() != dim {
            return Err(OracleError::FrameDim {
                expected: dim,
                found: frame.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(frame) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= video.frames.len() as f64;
    }
    Ok(mean)
}

/// Label provenance of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SameVideo,
    CrossVideo,
}

/// A labeled comparison: `a_wins` iff sentence A scores strictly higher
/// CIDEr against the video's annotations.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub video_id: String,
    pub sent_a: Sentence,
    pub sent_b: Sentence,
    pub a_wins: bool,
    pub provenance: Provenance,
}

fn numeric(e: NnError) -> OracleError {
    match e {
        NnError::NonFinite { op } => OracleError::NumericFailure { layer: op },
        other => OracleError::Nn(other),
    }
}

impl OracleNet {
    pub fn new(config: OracleConfig) -> Result<OracleNet, OracleError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (e, h, p) = (config.embed, config.hidden, config.video_proj);
        let v = config.vocab.len();
        params.insert("embed", xavier(&mut rng, v, e))?;
        params.insert("sent.lstm.w", xavier(&mut rng, 4 * h, e + h))?;
        let mut bias = vec![0.0; 4 * h];
        for b in bias.iter_mut().take(2 * h).skip(h) {
            *b = 1.0;
        }
        params.insert("sent.lstm.b", Tensor::vector(bias))?;
        params.insert("vid.proj.w", xavier(&mut rng, p, config.video_dim))?;
        params.insert("vid.proj.b", Tensor::zeros(vec![p]))?;
        params.insert("fc1.w", xavier(&mut rng, config.fc1, 2 * h + p))?;
        // small positive bias keeps the relu stack alive at init
        params.insert("fc1.b", Tensor::vector(vec![0.05; config.fc1]))?;
        params.insert("fc2.w", xavier(&mut rng, config.fc2, config.fc1))?;
        params.insert("fc2.b", Tensor::vector(vec![0.05; config.fc2]))?;
        // zero final layer: an untrained oracle says 0.5 for every pair
        params.insert("fc3.w", Tensor::zeros(vec![1, config.fc2]))?;
        params.insert("fc3.b", Tensor::zeros(vec![1]))?;
        Ok(OracleNet { config, params })
    }

    /// Names of the parameters implementing the shared sentence encoder;
    /// there is exactly one copy by construction.
    pub fn sentence_encoder_params(&self) -> Vec<&String> {
        self.params
            .names()
            .filter(|n| n.starts_with("sent."))
            .collect()
    }

    fn encode_sentence(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId, OracleError> {
        let h = self.config.hidden;
        let table = tape.param(&self.params, "embed").map_err(numeric)?;
        let w = tape.param(&self.params, "sent.lstm.w").map_err(numeric)?;
        let b = tape.param(&self.params, "sent.lstm.b").map_err(numeric)?;
        let mut hid = tape.input(Tensor::zeros(vec![h])).map_err(numeric)?;
        let mut cell = tape.input(Tensor::zeros(vec![h])).map_err(numeric)?;
        for &id in ids {
            let x = tape.embedding(table, id).map_err(numeric)?;
            let (h2, c2) = lstm_step(tape, x, hid, cell, w, b, h).map_err(numeric)?;
            hid = h2;
            cell = c2;
        }
        Ok(hid)
    }

    /// Raw pre-sigmoid preference logit for the ordered pair (A, B).
    fn raw_logit(
        &self,
        tape: &mut Tape,
        video_mean: &[f64],
        a_ids: &[usize],
        b_ids: &[usize],
    ) -> Result<NodeId, OracleError> {
        let ha = self.encode_sentence(tape, a_ids)?;
        let hb = self.encode_sentence(tape, b_ids)?;
        let vid = tape.input(Tensor::vector(video_mean.to_vec())).map_err(numeric)?;
        let pw = tape.param(&self.params, "vid.proj.w").map_err(numeric)?;
        let pb = tape.param(&self.params, "vid.proj.b").map_err(numeric)?;
        let vp = tape.dense(vid, pw, pb).map_err(numeric)?;
        let joint = tape.concat(&[ha, hb, vp]).map_err(numeric)?;
        let mut y = joint;
        for (w_name, b_name) in [("fc1.w", "fc1.b"), ("fc2.w", "fc2.b")] {
            let w = tape.param(&self.params, w_name).map_err(numeric)?;
            let b = tape.param(&self.params, b_name).map_err(numeric)?;
            y = tape.dense(y, w, b).map_err(numeric)?;
            y = tape.relu(y).map_err(numeric)?;
        }
        let w3 = tape.param(&self.params, "fc3.w").map_err(numeric)?;
        let b3 = tape.param(&self.params, "fc3.b").map_err(numeric)?;
        tape.dense(y, w3, b3).map_err(numeric)
    }

    fn ids(&self, s: &Sentence) -> Result<Vec<usize>, OracleError> {
        if s.is_empty() {
            return Err(OracleError::EmptySentence);
        }
        Ok(self.config.vocab.encode(s))
    }

    /// Probability that A beats B, symmetrized so that
    /// `compare(A, B) + compare(B, A) == 1` exactly and `compare(s, s) == 0.5`.
    pub fn compare(
        &self,
        video: &VideoRecord,
        sent_a: &Sentence,
        sent_b: &Sentence,
    ) -> Result<f64, OracleError> {
        let mean = video_embed(video)?;
        if mean.len() != self.config.video_dim {
            return Err(OracleError::FrameDim {
                expected: self.config.video_dim,
                found: mean.len(),
            });
        }
        let a_ids = self.ids(sent_a)?;
        let b_ids = self.ids(sent_b)?;
        // Evaluate in a canonical order so both argument orders share one
        // computation; the swapped call returns the exact complement.
        let flip = a_ids > b_ids;
        let (x, y) = if flip { (&b_ids, &a_ids) } else { (&a_ids, &b_ids) };
        let mut tape = Tape::new();
        let fxy = self.raw_logit(&mut tape, &mean, x, y)?;
        let fyx = self.raw_logit(&mut tape, &mean, y, x)?;
        let sxy = stable_sigmoid(tape.value(fxy).scalar_value());
        let syx = stable_sigmoid(tape.value(fyx).scalar_value());
        let p = (0.5 + (sxy - syx) / 2.0).clamp(P_MIN, 1.0 - P_MIN);
        Ok(if flip { 1.0 - p } else { p })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), crate::error::DataError> {
        let config = serde_json::to_value(&self.config)?;
        crate::data::save_params(path, "oracle_net", &config, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<OracleNet, crate::error::DataError> {
        let (arch, config, params) = crate::data::load_params(path)?;
        if arch != "oracle_net" {
            return Err(crate::error::DataError::ArchMismatch {
                expected: "oracle_net".to_string(),
                found: arch,
            });
        }
        let config: OracleConfig = serde_json::from_value(config)?;
        Ok(OracleNet { config, params })
    }
}

/// Anything that can judge a pair of sentences against a video. Lets the
/// tournament be driven by stub comparators in tests.
pub trait PairwiseComparator {
    fn compare(&self, video: &VideoRecord, a: &Sentence, b: &Sentence) -> Result<f64, OracleError>;
}

impl PairwiseComparator for OracleNet {
    fn compare(&self, video: &VideoRecord, a: &Sentence, b: &Sentence) -> Result<f64, OracleError> {
        OracleNet::compare(self, video, a, b)
    }
}

/// Round-robin ranking of the top-C candidates. Every unordered pair is
/// compared once; `p > 0.5` is a victory for the first sentence, an exact
/// tie goes to the better phase-1 score. Returns candidate indices ranked by
/// victories, ties by phase-1 score then model id.
pub fn tournament_rank<C: PairwiseComparator>(
    comparator: &C,
    video: &VideoRecord,
    candidates: &[(String, Sentence, f64)],
) -> Result<Vec<usize>, OracleError> {
    assert!(candidates.len() >= 2, "tournament needs at least 2 candidates");
    let n = candidates.len();
    let mut victories = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            let p = comparator.compare(video, &candidates[i].1, &candidates[j].1)?;
            let i_wins = if p > 0.5 {
                true
            } else if p < 0.5 {
                false
            } else {
                // exact tie: better phase-1 score, then lower model id
                let (pi, pj) = (candidates[i].2, candidates[j].2);
                pi > pj || (pi == pj && candidates[i].0 <= candidates[j].0)
            };
            if i_wins {
                victories[i] += 1;
            } else {
                victories[j] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        victories[b]
            .cmp(&victories[a])
            .then(candidates[b].2.partial_cmp(&candidates[a].2).expect("finite"))
            .then(candidates[a].0.cmp(&candidates[b].0))
    });
    Ok(order)
}

/// Pair construction knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    /// Cross-video pairs per same-video pair.
    pub cross_ratio: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec { cross_ratio: 0.5 }
    }
}

/// Builds CIDEr-labeled training pairs from per-video candidate sentences.
///
/// Same-video pairs are every 2-combination with unequal CIDEr; cross-video
/// pairs are sampled at `cross_ratio` per same-video pair, the foreign
/// sentence losing unless its CIDEr against the reference video's
/// annotations is strictly higher.
pub fn make_training_pairs(
    candidates: &BTreeMap<String, Vec<Sentence>>,
    annotations: &BTreeMap<String, Vec<Sentence>>,
    idf_train: &IdfTable,
    spec: &PairSpec,
    seed: u64,
) -> Result<Vec<TrainingPair>, OracleError> {
    let videos: Vec<&String> = candidates
        .keys()
        .filter(|v| annotations.contains_key(*v))
        .collect();
    if videos.len() < 2 {
        return Err(OracleError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();

    let mut scores: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
    for &vid in &videos {
        let refs = &annotations[vid];
        let mut per_cand = Vec::new();
        for cand in &candidates[vid] {
            per_cand.push(cider_d(cand, refs, idf_train)?);
        }
        scores.insert(vid, per_cand);
    }

    for &vid in &videos {
        let cands = &candidates[vid];
        let s = &scores[vid];
        for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                if s[i] == s[j] {
                    continue;
                }
                pairs.push(TrainingPair {
                    video_id: vid.clone(),
                    sent_a: cands[i].clone(),
                    sent_b: cands[j].clone(),
                    a_wins: s[i] > s[j],
                    provenance: Provenance::SameVideo,
                });
            }
        }
    }
    let n_same = pairs.len();

    let n_cross = (spec.cross_ratio * n_same as f64).round() as usize;
    for _ in 0..n_cross {
        let vid = videos[rng.gen_range(0..videos.len())];
        if candidates[vid].is_empty() {
            continue;
        }
        let own_idx = rng.gen_range(0..candidates[vid].len());
        let own = &candidates[vid][own_idx];
        let other = loop {
            let w = videos[rng.gen_range(0..videos.len())];
            if w != vid && !candidates[w].is_empty() {
                break w;
            }
        };
        let foreign = &candidates[other][rng.gen_range(0..candidates[other].len())];
        let own_score = scores[vid][own_idx];
        let foreign_score = cider_d(foreign, &annotations[vid], idf_train)?;
        pairs.push(TrainingPair {
            video_id: vid.clone(),
            sent_a: own.clone(),
            sent_b: foreign.clone(),
            a_wins: foreign_score <= own_score,
            provenance: Provenance::CrossVideo,
        });
    }

    if pairs.is_empty() {
        return Err(OracleError::EmptyDataset);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTrainOptions {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for OracleTrainOptions {
    fn default() -> Self {
        OracleTrainOptions { epochs: 4, lr: 0.001 }
    }
}

/// Trains the comparator with Adam on binary cross-entropy. Both orderings
/// of every pair are included as augmented examples. Returns the net and the
/// per-epoch mean loss.
pub fn train_oracle(
    pairs: &[TrainingPair],
    videos: &BTreeMap<String, &VideoRecord>,
    opts: &OracleTrainOptions,
    seed: u64,
) -> Result<(OracleNet, Vec<f64>), OracleError> {
    if pairs.is_empty() {
        return Err(OracleError::EmptyDataset);
    }
    let sentences: Vec<Sentence> = pairs
        .iter()
        .flat_map(|p| [p.sent_a.clone(), p.sent_b.clone()])
        .collect();
    let vocab = Vocab::build(sentences.iter(), 1);
    let first_video = videos
        .get(&pairs[0].video_id)
        .ok_or_else(|| OracleError::UnknownVideo(pairs[0].video_id.clone()))?;
    let config = OracleConfig::desk(first_video.feature_dim(), vocab, seed);
    let mut net = OracleNet::new(config)?;

    struct Example<'a> {
        video_id: &'a str,
        a: &'a Sentence,
        b: &'a Sentence,
        label: f64,
    }
    let mut examples = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        let label = if p.a_wins { 1.0 } else { 0.0 };
        examples.push(Example {
            video_id: &p.video_id,
            a: &p.sent_a,
            b: &p.sent_b,
            label,
        });
        examples.push(Example {
            video_id: &p.video_id,
            a: &p.sent_b,
            b: &p.sent_a,
            label: 1.0 - label,
        });
    }

    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        if !means.contains_key(p.video_id.as_str()) {
            let video = videos
                .get(&p.video_id)
                .ok_or_else(|| OracleError::UnknownVideo(p.video_id.clone()))?;
            means.insert(&p.video_id, video_embed(video)?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    let cfg = AdamConfig::with_lr(opts.lr);
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let ex = &examples[idx];
            step += 1;
            let mean = &means[ex.video_id];
            let a_ids = net.ids(ex.a)?;
            let b_ids = net.ids(ex.b)?;
            let mut tape = Tape::new();
            let logit = net.raw_logit(&mut tape, mean, &a_ids, &b_ids)?;
            let loss = tape
                .sigmoid_bce(logit, Tensor::vector(vec![ex.label]))
                .map_err(|_| OracleError::TrainingFailure { step })?;
            total += tape.value(loss).scalar_value();
            let grads = tape.backward(loss).map_err(|_| OracleError::TrainingFailure { step })?;
            let pg = tape
                .param_grads(&grads)
                .map_err(|_| OracleError::TrainingFailure { step })?;
            net.params
                .adam_step(&pg, &cfg)
                .map_err(|_| OracleError::TrainingFailure { step })?;
        }
        losses.push(total / examples.len() as f64);
    }
    Ok((net, losses))
}

/// Fraction of pairs where the comparator agrees with the label; an exact
/// 0.5 counts as wrong.
pub fn pairwise_accuracy(
    net: &OracleNet,
    pairs: &[TrainingPair],
    videos: &BTreeMap<String, &VideoRecord>,
) -> Result<f64, OracleError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for p in pairs {
        let video = videos
            .get(&p.video_id)
            .ok_or_else(|| OracleError::UnknownVideo(p.video_id.clone()))?;
        let prob = net.compare(video, &p.sent_a, &p.sent_b)?;
        if (prob > 0.5) == p.a_wins && prob != 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}
