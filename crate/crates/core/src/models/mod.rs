//! Toy-scale versions of the four encoder-decoder architectures and the pool
//! generator. All share one decoder structure; they differ in how the video
//! is encoded.

mod gradcheck;
mod train;
mod vocab;

pub use gradcheck::arch_suite;
pub use train::{overfit_one, train_model, EpochLog, TrainOptions, TrainingLog};
pub use vocab::{LabelVocabulary, Vocab, BOS, EOS, UNK};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::CandidatePool;
use crate::data::VideoRecord;
use crate::error::{DataError, ModelError, NnError};
use crate::nn::{lstm_step, xavier, xavier_shaped, NodeId, ParamSet, Tape, Tensor};
use crate::text::Sentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Seq2Seq,
    Seq2SeqAttn,
    TwoWings,
    TwoStage,
    Tcn,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::Seq2Seq,
        Arch::Seq2SeqAttn,
        Arch::TwoWings,
        Arch::TwoStage,
        Arch::Tcn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Seq2Seq => "seq2seq",
            Arch::Seq2SeqAttn => "seq2seq_attn",
            Arch::TwoWings => "two_wings",
            Arch::TwoStage => "two_stage",
            Arch::Tcn => "tcn",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "seq2seq" => Ok(Arch::Seq2Seq),
            "seq2seq_attn" => Ok(Arch::Seq2SeqAttn),
            "two_wings" => Ok(Arch::TwoWings),
            "two_stage" => Ok(Arch::TwoStage),
            "tcn" => Ok(Arch::Tcn),
            other => Err(ModelError::Config(format!("unknown architecture {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub arch: Arch,
    /// Encoder hidden size; also the width of the base video encoding.
    pub hidden: usize,
    /// Word embedding size.
    pub embed: usize,
    pub max_decode_len: usize,
    /// Frame feature width the encoder was built for.
    pub feature_dim: usize,
    /// Extra per-video feature channels concatenated to the encoding.
    pub extra_features: Vec<String>,
    pub extra_dims: BTreeMap<String, usize>,
    pub vocab: Vocab,
    pub label_vocab: Option<LabelVocabulary>,
    pub label_embed: usize,
    /// How many predicted labels feed the second stage.
    pub top_k: usize,
    /// Number of TCN blocks; block `i` uses dilation `2^i`.
    pub tcn_blocks: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: hidden 64, embeddings 32.
    pub fn desk(arch: Arch, model_id: &str, feature_dim: usize, vocab: Vocab, seed: u64) -> Self {
        ModelConfig {
            model_id: model_id.to_string(),
            arch,
            hidden: 64,
            embed: 32,
            max_decode_len: 16,
            feature_dim,
            extra_features: Vec::new(),
            extra_dims: BTreeMap::new(),
            vocab,
            label_vocab: None,
            label_embed: 32,
            top_k: 10,
            tcn_blocks: 1,
            seed,
        }
    }

    /// Decoder hidden width: video encoding plus every extra feature channel.
    pub fn decoder_hidden(&self) -> usize {
        self.hidden + self.extra_dims.values().sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_decode_len < 1 {
            return Err(ModelError::Config("max_decode_len must be at least 1".into()));
        }
        if self.hidden == 0 || self.embed == 0 {
            return Err(ModelError::Config("hidden and embed must be positive".into()));
        }
        if self.arch == Arch::TwoStage {
            let lv = self
                .label_vocab
                .as_ref()
                .ok_or_else(|| ModelError::Config("two_stage needs a label vocabulary".into()))?;
            if lv.is_empty() {
                return Err(ModelError::Config("label vocabulary is empty".into()));
            }
            if self.top_k < 1 {
                return Err(ModelError::Config("top_k must be at least 1".into()));
            }
            if self.top_k > lv.len() {
                return Err(ModelError::Config(format!(
                    "top_k {} exceeds label vocabulary size {}",
                    self.top_k,
                    lv.len()
                )));
            }
        }
        if self.arch == Arch::Tcn && self.tcn_blocks == 0 {
            return Err(ModelError::Config("tcn needs at least one block".into()));
        }
        for name in &self.extra_features {
            if !self.extra_dims.contains_key(name) {
                return Err(ModelError::Config(format!("extra feature {name} has no dimension")));
            }
        }
        Ok(())
    }
}

/// Deferred batch-norm running-statistics update produced by a train-mode
/// forward pass; the trainer folds these in after the optimizer step.
#[derive(Debug)]
pub struct BnUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

pub const BN_MOMENTUM: f64 = 0.9;

/// Video encoding plus the bookkeeping tests and trainers need.
#[derive(Debug)]
pub struct EncodeOut {
    pub encoding: NodeId,
    pub frame_nodes: Vec<NodeId>,
    pub bn_updates: Vec<BnUpdate>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let dh = config.decoder_hidden();
        let e = config.embed;
        let v = config.vocab.len();
        let f = config.feature_dim;

        let lstm = |params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize| {
            params
                .insert(&format!("{prefix}.w"), xavier(rng, 4 * hidden, input + hidden))
                .expect("fresh name");
            let mut bias = vec![0.0; 4 * hidden];
            // forget-gate bias starts open
            for b in bias.iter_mut().take(2 * hidden).skip(hidden) {
                *b = 1.0;
            }
            params
                .insert(&format!("{prefix}.b"), Tensor::vector(bias))
                .expect("fresh name");
        };

        // shared decoder
        params.insert("dec.embed", xavier(&mut rng, v, e))?;
        lstm(&mut params, &mut rng, "dec.lstm", e, dh);
        params.insert("dec.out.w", xavier(&mut rng, v, dh))?;
        params.insert("dec.out.b", Tensor::zeros(vec![v]))?;

        match config.arch {
            Arch::Seq2Seq => {
                lstm(&mut params, &mut rng, "enc.lstm", f, h);
            }
            Arch::Seq2SeqAttn => {
                lstm(&mut params, &mut rng, "enc.lstm", f, h);
                params.insert("enc.attn.q", xavier_shaped(&mut rng, vec![h], h, 1))?;
            }
            Arch::TwoWings => {
                lstm(&mut params, &mut rng, "enc.lstm", f, h);
                // language wing encodes straight to decoder width
                lstm(&mut params, &mut rng, "lang.lstm", e, h);
            }
            Arch::TwoStage => {
                let l = config.label_vocab.as_ref().expect("validated").len();
                lstm(&mut params, &mut rng, "enc.lstm", f, h);
                params.insert("s1.fc1.w", xavier(&mut rng, h, h))?;
                // small positive bias keeps the relu stack alive at init
                params.insert("s1.fc1.b", Tensor::vector(vec![0.05; h]))?;
                params.insert("s1.fc2.w", xavier(&mut rng, h, h))?;
                params.insert("s1.fc2.b", Tensor::vector(vec![0.05; h]))?;
                // zero final layer: an untrained stage outputs probability 0.5
                params.insert("s1.fc3.w", Tensor::zeros(vec![l, h]))?;
                params.insert("s1.fc3.b", Tensor::zeros(vec![l]))?;
                params.insert("lbl.embed", xavier(&mut rng, l, config.label_embed))?;
                lstm(&mut params, &mut rng, "lang.lstm", config.label_embed, h);
            }
            Arch::Tcn => {
                for i in 0..config.tcn_blocks {
                    let c_in = if i == 0 { f } else { h };
                    params.insert(
                        &format!("tcn.b{i}.conv1.w"),
                        xavier_shaped(&mut rng, vec![h, 3, c_in], 3 * c_in, h),
                    )?;
                    params.insert(
                        &format!("tcn.b{i}.conv2.w"),
                        xavier_shaped(&mut rng, vec![h, 3, h], 3 * h, h),
                    )?;
                    for bn in ["bn1", "bn2"] {
                        params.insert(&format!("tcn.b{i}.{bn}.gamma"), Tensor::vector(vec![1.0; h]))?;
                        params.insert(&format!("tcn.b{i}.{bn}.beta"), Tensor::zeros(vec![h]))?;
                        params.insert(&format!("tcn.b{i}.{bn}.mean"), Tensor::zeros(vec![h]))?;
                        params.insert(&format!("tcn.b{i}.{bn}.var"), Tensor::vector(vec![1.0; h]))?;
                    }
                    if c_in != h {
                        params.insert(&format!("tcn.b{i}.proj.w"), xavier(&mut rng, h, c_in))?;
                        params.insert(&format!("tcn.b{i}.proj.b"), Tensor::zeros(vec![h]))?;
                    }
                }
            }
        }
        Ok(Model { config, params })
    }

    /// Parameter names never updated by the optimizer (running statistics).
    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".mean") || name.ends_with(".var")
    }

    fn frames_on_tape(&self, tape: &mut Tape, video: &VideoRecord) -> Result<Vec<NodeId>, ModelError> {
        if video.feature_dim() != self.config.feature_dim {
            return Err(ModelError::Nn(NnError::ShapeMismatch {
                op: "encode",
                left: vec![video.feature_dim()],
                right: vec![self.config.feature_dim],
            }));
        }
        let mut nodes = Vec::with_capacity(video.frames.len());
        for frame in &video.frames {
            nodes.push(tape.input(Tensor::vector(frame.clone())).map_err(ModelError::Nn)?);
        }
        Ok(nodes)
    }

    /// Runs the frame encoder LSTM and returns all step hidden states.
    fn lstm_over(
        &self,
        tape: &mut Tape,
        inputs: &[NodeId],
        prefix: &str,
        hidden: usize,
    ) -> Result<Vec<NodeId>, ModelError> {
        let w = tape.param(&self.params, &format!("{prefix}.w"))?;
        let b = tape.param(&self.params, &format!("{prefix}.b"))?;
        let mut h = tape.input(Tensor::zeros(vec![hidden]))?;
        let mut c = tape.input(Tensor::zeros(vec![hidden]))?;
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (h2, c2) = lstm_step(tape, x, h, c, w, b, hidden)?;
            h = h2;
            c = c2;
            states.push(h);
        }
        Ok(states)
    }

    fn attention_pool(&self, tape: &mut Tape, states: &[NodeId]) -> Result<NodeId, ModelError> {
        let q = tape.param(&self.params, "enc.attn.q")?;
        let mut logits = Vec::with_capacity(states.len());
        for &s in states {
            logits.push(tape.dot(s, q)?);
        }
        let packed = tape.concat(&logits)?;
        let weights = tape.softmax(packed)?;
        let mut terms = Vec::with_capacity(states.len());
        for (t, &s) in states.iter().enumerate() {
            let w_t = tape.slice(weights, t, 1)?;
            terms.push(tape.scale_by(s, w_t)?);
        }
        Ok(tape.add_n(&terms)?)
    }

    fn tcn_encode(
        &self,
        tape: &mut Tape,
        frame_nodes: &[NodeId],
        train: bool,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId, ModelError> {
        let mut x = tape.stack_rows(frame_nodes)?;
        for i in 0..self.config.tcn_blocks {
            let dilation = 1 << i;
            x = self
                .tcn_block(tape, x, i, dilation, train, bn_updates)
                .map_err(|e| match e {
                    ModelError::Nn(NnError::SequenceTooShort { len, dilation, .. }) => {
                        ModelError::Nn(NnError::SequenceTooShort {
                            len,
                            dilation,
                            block: Some(i),
                        })
                    }
                    other => other,
                })?;
        }
        Ok(tape.mean_over_axis(x, 0)?)
    }

    fn tcn_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        i: usize,
        dilation: usize,
        train: bool,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> Result<NodeId, ModelError> {
        let bn = |tape: &mut Tape, y: NodeId, which: &str, updates: &mut Vec<BnUpdate>| -> Result<NodeId, ModelError> {
            let gamma = tape.param(&self.params, &format!("tcn.b{i}.{which}.gamma"))?;
            let beta = tape.param(&self.params, &format!("tcn.b{i}.{which}.beta"))?;
            if train {
                let (out, mean, var) = tape.batchnorm_train(y, gamma, beta)?;
                updates.push(BnUpdate {
                    mean_name: format!("tcn.b{i}.{which}.mean"),
                    var_name: format!("tcn.b{i}.{which}.var"),
                    mean,
                    var,
                });
                Ok(out)
            } else {
                let mean = self.params.get(&format!("tcn.b{i}.{which}.mean")).expect("buffer").clone();
                let var = self.params.get(&format!("tcn.b{i}.{which}.var")).expect("buffer").clone();
                Ok(tape.batchnorm_eval(y, gamma, beta, &mean, &var)?)
            }
        };

        let w1 = tape.param(&self.params, &format!("tcn.b{i}.conv1.w"))?;
        let y = tape.dilated_conv1d(x, w1, dilation)?;
        let y = bn(tape, y, "bn1", bn_updates)?;
        let y = tape.relu(y)?;
        let w2 = tape.param(&self.params, &format!("tcn.b{i}.conv2.w"))?;
        let y = tape.dilated_conv1d(y, w2, dilation)?;
        let y = bn(tape, y, "bn2", bn_updates)?;
        let y = tape.relu(y)?;

        let out_len = tape.value(y).rows();
        let mut residual = tape.crop_rows(x, 2 * dilation, out_len)?;
        if self.params.contains(&format!("tcn.b{i}.proj.w")) {
            let pw = tape.param(&self.params, &format!("tcn.b{i}.proj.w"))?;
            let pb = tape.param(&self.params, &format!("tcn.b{i}.proj.b"))?;
            residual = tape.dense(residual, pw, pb)?;
        }
        Ok(tape.add(y, residual)?)
    }

    /// Stage-1 label logits for the two-stage model.
    fn label_logits(&self, tape: &mut Tape, frame_nodes: &[NodeId]) -> Result<NodeId, ModelError> {
        let states = self.lstm_over(tape, frame_nodes, "enc.lstm", self.config.hidden)?;
        let last = *states.last().expect("at least one frame");
        let w1 = tape.param(&self.params, "s1.fc1.w")?;
        let b1 = tape.param(&self.params, "s1.fc1.b")?;
        let w2 = tape.param(&self.params, "s1.fc2.w")?;
        let b2 = tape.param(&self.params, "s1.fc2.b")?;
        let w3 = tape.param(&self.params, "s1.fc3.w")?;
        let b3 = tape.param(&self.params, "s1.fc3.b")?;
        let y = tape.dense(last, w1, b1)?;
        let y = tape.relu(y)?;
        let y = tape.dense(y, w2, b2)?;
        let y = tape.relu(y)?;
        Ok(tape.dense(y, w3, b3)?)
    }

    /// Soft label embeddings `L_j = p_j * E(j)` for the current top-K labels,
    /// keeping gradients flowing through the probabilities. The top-K set is
    /// chosen by probability; the sequence is emitted in label-index order
    /// since the label set carries no order.
    fn soft_label_sequence(
        &self,
        tape: &mut Tape,
        probs: NodeId,
    ) -> Result<Vec<NodeId>, ModelError> {
        let k = self.config.top_k.min(tape.value(probs).numel());
        let mut chosen = top_k_indices(tape.value(probs).data(), k);
        chosen.sort_unstable();
        let table = tape.param(&self.params, "lbl.embed")?;
        let mut seq = Vec::with_capacity(k);
        for idx in chosen {
            let e = tape.embedding(table, idx)?;
            let p = tape.slice(probs, idx, 1)?;
            seq.push(tape.scale_by(e, p)?);
        }
        Ok(seq)
    }

    /// Video encoding for any architecture, extras concatenated.
    pub fn encode(&self, tape: &mut Tape, video: &VideoRecord, train: bool) -> Result<EncodeOut, ModelError> {
        let frame_nodes = self.frames_on_tape(tape, video)?;
        let mut bn_updates = Vec::new();
        let base = match self.config.arch {
            Arch::Seq2Seq | Arch::TwoWings => {
                let states = self.lstm_over(tape, &frame_nodes, "enc.lstm", self.config.hidden)?;
                *states.last().expect("at least one frame")
            }
            Arch::Seq2SeqAttn => {
                let states = self.lstm_over(tape, &frame_nodes, "enc.lstm", self.config.hidden)?;
                self.attention_pool(tape, &states)?
            }
            Arch::TwoStage => {
                let logits = self.label_logits(tape, &frame_nodes)?;
                let probs = tape.sigmoid(logits)?;
                let seq = self.soft_label_sequence(tape, probs)?;
                let states = self.lstm_over(tape, &seq, "lang.lstm", self.config.hidden)?;
                *states.last().expect("top_k >= 1")
            }
            Arch::Tcn => self.tcn_encode(tape, &frame_nodes, train, &mut bn_updates)?,
        };
        let encoding = self.attach_extras(tape, base, Some(video))?;
        Ok(EncodeOut {
            encoding,
            frame_nodes,
            bn_updates,
        })
    }

    /// Language-wing encoding of a (corrupted) word sequence, padded with
    /// zeros in place of the extra feature channels.
    pub fn encode_words(&self, tape: &mut Tape, word_ids: &[usize]) -> Result<NodeId, ModelError> {
        let table = tape.param(&self.params, "dec.embed")?;
        let mut inputs = Vec::with_capacity(word_ids.len().max(1));
        for &id in word_ids {
            inputs.push(tape.embedding(table, id)?);
        }
        if inputs.is_empty() {
            inputs.push(tape.input(Tensor::zeros(vec![self.config.embed]))?);
        }
        let states = self.lstm_over(tape, &inputs, "lang.lstm", self.config.hidden)?;
        let base = *states.last().expect("non-empty");
        self.attach_extras(tape, base, None)
    }

    /// Stage-2 encoding from ground-truth labels (probability one each).
    pub fn encode_from_labels(&self, tape: &mut Tape, label_ids: &[usize]) -> Result<NodeId, ModelError> {
        let table = tape.param(&self.params, "lbl.embed")?;
        let mut seq = Vec::with_capacity(label_ids.len());
        for &id in label_ids {
            seq.push(tape.embedding(table, id)?);
        }
        if seq.is_empty() {
            seq.push(tape.input(Tensor::zeros(vec![self.config.label_embed]))?);
        }
        let states = self.lstm_over(tape, &seq, "lang.lstm", self.config.hidden)?;
        let base = *states.last().expect("non-empty");
        self.attach_extras(tape, base, None)
    }

    fn attach_extras(
        &self,
        tape: &mut Tape,
        base: NodeId,
        video: Option<&VideoRecord>,
    ) -> Result<NodeId, ModelError> {
        if self.config.extra_features.is_empty() {
            return Ok(base);
        }
        let mut parts = vec![base];
        for name in &self.config.extra_features {
            let dim = self.config.extra_dims[name];
            let tensor = match video {
                Some(v) => {
                    let values = v.extra_features.get(name).ok_or_else(|| {
                        ModelError::Config(format!("video {} lacks extra feature {name}", v.video_id))
                    })?;
                    if values.len() != dim {
                        return Err(ModelError::Nn(NnError::ShapeMismatch {
                            op: "extra_feature",
                            left: vec![values.len()],
                            right: vec![dim],
                        }));
                    }
                    Tensor::vector(values.clone())
                }
                None => Tensor::zeros(vec![dim]),
            };
            parts.push(tape.input(tensor)?);
        }
        Ok(tape.concat(&parts)?)
    }

    /// Teacher-forced decoder logits: one row per supervised position, the
    /// end token included, so `len == sentence.len() + 1`.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        encoding: NodeId,
        target: &Sentence,
    ) -> Result<Vec<NodeId>, ModelError> {
        let dh = self.config.decoder_hidden();
        let table = tape.param(&self.params, "dec.embed")?;
        let w = tape.param(&self.params, "dec.lstm.w")?;
        let b = tape.param(&self.params, "dec.lstm.b")?;
        let ow = tape.param(&self.params, "dec.out.w")?;
        let ob = tape.param(&self.params, "dec.out.b")?;
        let mut h = encoding;
        let mut c = tape.input(Tensor::zeros(vec![dh]))?;
        let mut prev = BOS;
        let mut logits = Vec::with_capacity(target.len() + 1);
        let mut ids = self.config.vocab.encode(target);
        ids.push(EOS);
        for &next in &ids {
            let x = tape.embedding(table, prev)?;
            let (h2, c2) = lstm_step(tape, x, h, c, w, b, dh)?;
            h = h2;
            c = c2;
            logits.push(tape.dense(h, ow, ob)?);
            prev = next;
        }
        Ok(logits)
    }

    /// Mean teacher-forced cross-entropy over the target positions.
    pub fn caption_loss(
        &self,
        tape: &mut Tape,
        encoding: NodeId,
        target: &Sentence,
    ) -> Result<NodeId, ModelError> {
        let logits = self.decode_teacher_forced(tape, encoding, target)?;
        let mut ids = self.config.vocab.encode(target);
        ids.push(EOS);
        let mut losses = Vec::with_capacity(logits.len());
        for (node, &id) in logits.iter().zip(&ids) {
            losses.push(tape.softmax_xent(*node, id)?);
        }
        let total = tape.add_n(&losses)?;
        Ok(tape.scale(total, 1.0 / losses.len() as f64)?)
    }

    /// Greedy decode: argmax per step, reserved tokens masked, stops at the
    /// end token or `max_decode_len`.
    pub fn greedy_decode(&self, video: &VideoRecord) -> Result<Sentence, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, video, false)?;
        self.greedy_loop(&mut tape, enc.encoding)
    }

    /// Greedy decode from a bag of words through the language wing; the
    /// sentence-reconstruction path of the two-wings model.
    pub fn greedy_decode_from_words(&self, word_ids: &[usize]) -> Result<Sentence, ModelError> {
        let mut tape = Tape::new();
        let encoding = self.encode_words(&mut tape, word_ids)?;
        self.greedy_loop(&mut tape, encoding)
    }

    fn greedy_loop(&self, tape: &mut Tape, encoding: NodeId) -> Result<Sentence, ModelError> {
        if self.config.max_decode_len < 1 {
            return Err(ModelError::Config("max_decode_len must be at least 1".into()));
        }
        let dh = self.config.decoder_hidden();
        let table = tape.param(&self.params, "dec.embed")?;
        let w = tape.param(&self.params, "dec.lstm.w")?;
        let b = tape.param(&self.params, "dec.lstm.b")?;
        let ow = tape.param(&self.params, "dec.out.w")?;
        let ob = tape.param(&self.params, "dec.out.b")?;
        let mut h = encoding;
        let mut c = tape.input(Tensor::zeros(vec![dh]))?;
        let mut prev = BOS;
        let mut words = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let x = tape.embedding(table, prev)?;
            let (h2, c2) = lstm_step(tape, x, h, c, w, b, dh)?;
            h = h2;
            c = c2;
            let logits = tape.dense(h, ow, ob)?;
            let next = argmax_masked(tape.value(logits).data(), &[BOS, UNK]);
            if next == EOS {
                break;
            }
            words.push(self.config.vocab.token(next).to_string());
            prev = next;
        }
        Ok(Sentence::from_tokens(words))
    }

    /// Top-K word labels with sigmoid probabilities, two-stage only.
    pub fn predict_word_labels(&self, video: &VideoRecord, k: usize) -> Result<Vec<(String, f64)>, ModelError> {
        let lv = self
            .config
            .label_vocab
            .as_ref()
            .ok_or_else(|| ModelError::Config("model has no label vocabulary".into()))?;
        if k < 1 {
            return Err(ModelError::Config("k must be at least 1".into()));
        }
        if k > lv.len() {
            return Err(ModelError::Config(format!(
                "k {k} exceeds label vocabulary size {}",
                lv.len()
            )));
        }
        let mut tape = Tape::new();
        let frame_nodes = self.frames_on_tape(&mut tape, video)?;
        let logits = self.label_logits(&mut tape, &frame_nodes)?;
        let probs = tape.sigmoid(logits)?;
        let data = tape.value(probs).data();
        let ranked = top_k_indices(data, k);
        Ok(ranked
            .into_iter()
            .map(|i| (lv.label(i).to_string(), data[i]))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let config = serde_json::to_value(&self.config)?;
        crate::data::save_params(path, self.config.arch.as_str(), &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Model, DataError> {
        let (arch, config, params) = crate::data::load_params(path)?;
        let mut config: ModelConfig = serde_json::from_value(config)?;
        if arch != config.arch.as_str() {
            return Err(DataError::ArchMismatch {
                expected: config.arch.as_str().to_string(),
                found: arch,
            });
        }
        if let Some(lv) = config.label_vocab.as_mut() {
            lv.rebuild_index();
        }
        Ok(Model { config, params })
    }

    /// Load and require a specific architecture.
    pub fn load_as(path: &Path, arch: Arch) -> Result<Model, DataError> {
        let model = Model::load(path)?;
        if model.config.arch != arch {
            return Err(DataError::ArchMismatch {
                expected: arch.as_str().to_string(),
                found: model.config.arch.as_str().to_string(),
            });
        }
        Ok(model)
    }
}

/// Indices of the k largest values, descending, ties to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn argmax_masked(values: &[f64], masked: &[usize]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if masked.contains(&i) {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Keeps `ceil(len * keep_ratio)` words, sampled without replacement, in
/// shuffled order: the reconstruction input of the two-wings language wing.
pub fn corrupt_sentence(s: &Sentence, keep_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let keep = ((s.len() as f64 * keep_ratio).ceil() as usize).clamp(1, s.len().max(1));
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .take(keep)
        .map(|i| s.tokens()[i].clone())
        .collect()
}

/// One greedy-decoded candidate per model, pool ordered by model id.
pub fn generate_pool(models: &[Model], video: &VideoRecord) -> Result<CandidatePool, ModelError> {
    assert!(!models.is_empty(), "generate_pool needs at least one model");
    let mut candidates = Vec::with_capacity(models.len());
    for m in models {
        let sentence = m.greedy_decode(video).map_err(|e| ModelError::Decode {
            model_id: m.config.model_id.clone(),
            source: Box::new(e),
        })?;
        candidates.push((m.config.model_id.clone(), sentence));
    }
    CandidatePool::new(&video.video_id, candidates)
        .map_err(|e| ModelError::Config(format!("pool construction failed: {e}")))
}
