//! Teacher-forced training for all architectures: plateau-based learning-rate
//! decay, the two-wings alternation schedule and the two-stage
//! pretrain-then-finetune recipe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, VideoRecord};
use crate::error::{ModelError, NnError};
use crate::models::{corrupt_sentence, Arch, BnUpdate, Model, ModelConfig, BN_MOMENTUM};
use crate::nn::{AdamConfig, Tape, Tensor};
use crate::text::{tokenize, Sentence};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Epochs without validation improvement before the rate drops by 10x.
    pub patience: usize,
    pub min_delta: f64,
    /// Two-wings corruption ratio and alternation schedule.
    pub keep_ratio: f64,
    pub k_text: usize,
    pub k_vision: usize,
    /// Two-stage label-noise probabilities, applied at training time only.
    pub label_drop_p: f64,
    pub label_add_p: f64,
    pub pretrain_epochs: usize,
    /// Optional external text corpus for the language wing; defaults to the
    /// training annotations.
    pub text_corpus: Option<Vec<String>>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 8,
            lr: 0.001,
            min_lr: 1e-6,
            patience: 2,
            min_delta: 1e-4,
            keep_ratio: 0.5,
            k_text: 1,
            k_vision: 1,
            label_drop_p: 0.1,
            label_add_p: 0.1,
            pretrain_epochs: 3,
            text_corpus: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<EpochLog>,
    pub lr_decays: usize,
}

fn diverged(e: ModelError, step: usize) -> ModelError {
    match e {
        ModelError::Nn(NnError::NonFinite { .. }) | ModelError::Nn(NnError::NonFiniteGrad { .. }) => {
            ModelError::Diverged { step }
        }
        other => other,
    }
}

fn apply_bn_updates(model: &mut Model, updates: Vec<BnUpdate>) {
    for u in updates {
        let fold = |running: &mut Tensor, fresh: &Tensor| {
            for (r, f) in running.data_mut().iter_mut().zip(fresh.data()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * f;
            }
        };
        fold(model.params.get_mut(&u.mean_name).expect("buffer"), &u.mean);
        fold(model.params.get_mut(&u.var_name).expect("buffer"), &u.var);
    }
}

fn adam_update(model: &mut Model, tape: &Tape, loss: usize, lr: f64) -> Result<(), ModelError> {
    let grads = tape.backward(loss)?;
    let mut pg = tape.param_grads(&grads)?;
    // running statistics are not trainable
    pg.retain(|name, _| !Model::is_buffer(name));
    model.params.adam_step(&pg, &AdamConfig::with_lr(lr))?;
    Ok(())
}

/// One teacher-forced captioning step on a video.
pub fn vision_step(model: &mut Model, video: &VideoRecord, target: &Sentence, lr: f64) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, video, true)?;
    let loss = model.caption_loss(&mut tape, enc.encoding, target)?;
    let value = tape.value(loss).scalar_value();
    adam_update(model, &tape, loss, lr)?;
    apply_bn_updates(model, enc.bn_updates);
    Ok(value)
}

/// One language-wing reconstruction step: corrupt, encode the word set,
/// decode the original sentence.
pub fn text_step(
    model: &mut Model,
    sentence: &Sentence,
    keep_ratio: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let kept = corrupt_sentence(sentence, keep_ratio, rng);
    let ids: Vec<usize> = kept.iter().map(|w| model.config.vocab.id(w)).collect();
    let mut tape = Tape::new();
    let enc = model.encode_words(&mut tape, &ids)?;
    let loss = model.caption_loss(&mut tape, enc, sentence)?;
    let value = tape.value(loss).scalar_value();
    adam_update(model, &tape, loss, lr)?;
    Ok(value)
}

/// One multi-label step for the two-stage first stage, with label noise.
fn label_step(
    model: &mut Model,
    video: &VideoRecord,
    drop_p: f64,
    add_p: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let lv = model.config.label_vocab.clone().expect("two_stage");
    let sentences: Vec<Sentence> = video.annotations.iter().map(|a| tokenize(a)).collect();
    let present = lv.labels_of(sentences.iter());
    let mut target = vec![0.0; lv.len()];
    for id in &present {
        if rng.gen_range(0.0..1.0) >= drop_p {
            target[*id] = 1.0;
        }
        if rng.gen_range(0.0..1.0) < add_p {
            target[rng.gen_range(0..lv.len())] = 1.0;
        }
    }
    let mut tape = Tape::new();
    let frames: Vec<usize> = video
        .frames
        .iter()
        .map(|f| tape.input(Tensor::vector(f.clone())))
        .collect::<Result<_, _>>()?;
    let logits = model.label_logits_public(&mut tape, &frames)?;
    let loss = tape.sigmoid_bce(logits, Tensor::vector(target))?;
    let value = tape.value(loss).scalar_value();
    adam_update(model, &tape, loss, lr)?;
    Ok(value)
}

/// Stage-2 pretraining step: decode a caption from the video's true labels.
fn stage2_step(model: &mut Model, video: &VideoRecord, target: &Sentence, lr: f64) -> Result<f64, ModelError> {
    let lv = model.config.label_vocab.clone().expect("two_stage");
    let sentences: Vec<Sentence> = video.annotations.iter().map(|a| tokenize(a)).collect();
    let labels = lv.labels_of(sentences.iter());
    let mut tape = Tape::new();
    let enc = model.encode_from_labels(&mut tape, &labels)?;
    let loss = model.caption_loss(&mut tape, enc, target)?;
    let value = tape.value(loss).scalar_value();
    adam_update(model, &tape, loss, lr)?;
    Ok(value)
}

fn val_loss(model: &Model, val: &[&VideoRecord]) -> Result<Option<f64>, ModelError> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for video in val {
        let target = tokenize(&video.annotations[0]);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, video, false)?;
        let loss = model.caption_loss(&mut tape, enc.encoding, &target)?;
        total += tape.value(loss).scalar_value();
    }
    Ok(Some(total / val.len() as f64))
}

struct LrSchedule {
    lr: f64,
    min_lr: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
    decays: usize,
}

impl LrSchedule {
    fn new(opts: &TrainOptions) -> Self {
        LrSchedule {
            lr: opts.lr,
            min_lr: opts.min_lr,
            patience: opts.patience,
            min_delta: opts.min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
            decays: 0,
        }
    }

    fn observe(&mut self, val: Option<f64>) {
        let Some(v) = val else { return };
        if v < self.best - self.min_delta {
            self.best = v;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience && self.lr > self.min_lr {
                self.lr = (self.lr / 10.0).max(self.min_lr);
                self.decays += 1;
                self.bad_epochs = 0;
            }
        }
    }
}

/// Trains a model on the corpus train split. Deterministic given the seed.
pub fn train_model(
    config: ModelConfig,
    corpus: &[VideoRecord],
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Model, TrainingLog), ModelError> {
    let train: Vec<&VideoRecord> = corpus.iter().filter(|v| v.split == Split::Train).collect();
    let val: Vec<&VideoRecord> = corpus.iter().filter(|v| v.split == Split::Val).collect();
    if train.is_empty() {
        return Err(ModelError::Config("corpus has no train split".into()));
    }
    let arch = config.arch;
    if arch == Arch::TwoWings {
        let has_text = opts.text_corpus.as_ref().map(|t| !t.is_empty()).unwrap_or(true);
        if !has_text {
            return Err(ModelError::Config("two_wings text corpus is empty".into()));
        }
    }
    let mut model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = TrainingLog::default();
    let mut step = 0usize;

    let text_pool: Vec<Sentence> = match (&opts.text_corpus, arch) {
        (Some(texts), Arch::TwoWings) => texts.iter().map(|t| tokenize(t)).collect(),
        (None, Arch::TwoWings) => train
            .iter()
            .flat_map(|v| v.annotations.iter())
            .map(|a| tokenize(a))
            .collect(),
        _ => Vec::new(),
    };

    let epoch_pass = |model: &mut Model,
                          rng: &mut ChaCha8Rng,
                          step: &mut usize,
                          lr: f64,
                          phase: &str|
     -> Result<f64, ModelError> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for vi in order {
            let video = train[vi];
            let target = tokenize(&video.annotations[rng.gen_range(0..video.annotations.len())]);
            *step += 1;
            let loss = match phase {
                "labels" => label_step(model, video, opts.label_drop_p, opts.label_add_p, lr, rng),
                "stage2" => stage2_step(model, video, &target, lr),
                _ => {
                    if arch == Arch::TwoWings && !text_pool.is_empty() {
                        for _ in 0..opts.k_text {
                            let s = &text_pool[rng.gen_range(0..text_pool.len())];
                            if !s.is_empty() {
                                text_step(model, s, opts.keep_ratio, lr, rng)
                                    .map_err(|e| diverged(e, *step))?;
                            }
                        }
                        let mut last = 0.0;
                        let mut result = Ok(0.0);
                        for _ in 0..opts.k_vision.max(1) {
                            result = vision_step(model, video, &target, lr);
                            if let Ok(v) = &result {
                                last = *v;
                            } else {
                                break;
                            }
                        }
                        result.map(|_| last)
                    } else {
                        vision_step(model, video, &target, lr)
                    }
                }
            }
            .map_err(|e| diverged(e, *step))?;
            total += loss;
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    };

    // two-stage: both stages pretrained separately, then finetuned end to end
    if arch == Arch::TwoStage {
        for phase in ["labels", "stage2"] {
            for epoch in 0..opts.pretrain_epochs {
                let train_loss = epoch_pass(&mut model, &mut rng, &mut step, opts.lr, phase)?;
                log.entries.push(EpochLog {
                    phase: phase.to_string(),
                    epoch,
                    train_loss,
                    val_loss: None,
                    lr: opts.lr,
                });
            }
        }
    }

    let mut schedule = LrSchedule::new(opts);
    for epoch in 0..opts.epochs {
        let train_loss = epoch_pass(&mut model, &mut rng, &mut step, schedule.lr, "caption")?;
        let v = val_loss(&model, &val).map_err(|e| diverged(e, step))?;
        log.entries.push(EpochLog {
            phase: "caption".to_string(),
            epoch,
            train_loss,
            val_loss: v,
            lr: schedule.lr,
        });
        schedule.observe(v);
    }
    log.lr_decays = schedule.decays;
    Ok((model, log))
}

/// Repeated Adam steps on a single (video, sentence) pair; returns the final
/// loss. The capacity check behind the decode-reproduction guarantee.
pub fn overfit_one(
    model: &mut Model,
    video: &VideoRecord,
    target: &Sentence,
    steps: usize,
    lr: f64,
) -> Result<f64, ModelError> {
    let mut last = f64::INFINITY;
    for step in 0..steps {
        last = vision_step(model, video, target, lr).map_err(|e| diverged(e, step))?;
    }
    Ok(last)
}

impl Model {
    /// Stage-1 logits exposed for the label trainer.
    pub(crate) fn label_logits_public(
        &self,
        tape: &mut Tape,
        frame_nodes: &[usize],
    ) -> Result<usize, ModelError> {
        self.label_logits(tape, frame_nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::vocab::{LabelVocabulary, Vocab};
    use crate::models::ModelConfig;
    use crate::synth::{synth_corpus, SynthSpec};

    fn small_corpus() -> Vec<VideoRecord> {
        synth_corpus(&SynthSpec {
            train: 6,
            val: 2,
            test: 0,
            feature_dim: 8,
            frames_min: 5,
            frames_max: 7,
            annotations_per_video: 4,
            noise: 0.1,
            seed: 5,
        })
    }

    fn config_for(arch: Arch, corpus: &[VideoRecord]) -> ModelConfig {
        let sents: Vec<Sentence> = corpus
            .iter()
            .filter(|v| v.split == Split::Train)
            .flat_map(|v| v.annotations.iter())
            .map(|a| tokenize(a))
            .collect();
        let vocab = Vocab::build(sents.iter(), 1);
        let mut config = ModelConfig::desk(arch, "m", 8, vocab, 3);
        config.hidden = 16;
        config.embed = 8;
        config.label_embed = 8;
        if arch == Arch::TwoStage {
            config.label_vocab = Some(LabelVocabulary::build(sents.iter(), 1));
            config.top_k = 4;
        }
        config
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let corpus = small_corpus();
        let config = config_for(Arch::Seq2Seq, &corpus);
        let opts = TrainOptions {
            epochs: 2,
            ..Default::default()
        };
        let (_, log_a) = train_model(config.clone(), &corpus, &opts, 7).unwrap();
        let (_, log_b) = train_model(config, &corpus, &opts, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&log_a).unwrap(),
            serde_json::to_string(&log_b).unwrap()
        );
    }

    #[test]
    fn text_branch_loss_decreases() {
        let corpus = small_corpus();
        let mut model = Model::new(config_for(Arch::TwoWings, &corpus)).unwrap();
        let sents: Vec<Sentence> = corpus[0].annotations.iter().map(|a| tokenize(a)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..200 {
            let s = &sents[i % sents.len()];
            let loss = text_step(&mut model, s, 0.5, 0.003, &mut rng).unwrap();
            if i == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first * 0.5, "text loss {first} -> {last}");
    }

    #[test]
    fn decoder_parameters_are_shared_across_wings() {
        let corpus = small_corpus();
        let mut model = Model::new(config_for(Arch::TwoWings, &corpus)).unwrap();
        let target = tokenize(&corpus[0].annotations[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);

        let before = model.params.get("dec.lstm.w").unwrap().data().to_vec();
        text_step(&mut model, &target, 0.5, 0.01, &mut rng).unwrap();
        let after_text = model.params.get("dec.lstm.w").unwrap().data().to_vec();
        assert_ne!(before, after_text, "text step must move the shared decoder");

        vision_step(&mut model, &corpus[0], &target, 0.01).unwrap();
        let after_vision = model.params.get("dec.lstm.w").unwrap().data().to_vec();
        assert_ne!(after_text, after_vision, "vision step must move the same decoder");
        // exactly one decoder parameter set exists
        assert_eq!(model.params.names().filter(|n| n.starts_with("dec.lstm")).count(), 2);
    }

    #[test]
    fn reconstruction_covers_original_words_after_overfit() {
        let corpus = small_corpus();
        let mut model = Model::new(config_for(Arch::TwoWings, &corpus)).unwrap();
        let target = tokenize("a man is playing a guitar");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            text_step(&mut model, &target, 0.5, 0.003, &mut rng).unwrap();
        }
        let kept = corrupt_sentence(&target, 0.5, &mut rng);
        let ids: Vec<usize> = kept.iter().map(|w| model.config.vocab.id(w)).collect();
        let rebuilt = model.greedy_decode_from_words(&ids).unwrap();
        for w in target.tokens() {
            assert!(
                rebuilt.tokens().contains(w),
                "missing {w} in reconstruction {rebuilt}"
            );
        }
    }

    #[test]
    fn lr_decays_are_bounded_by_schedule_arithmetic() {
        let corpus = small_corpus();
        let config = config_for(Arch::Seq2Seq, &corpus);
        let opts = TrainOptions {
            epochs: 10,
            lr: 1e-3,
            min_lr: 1e-5,
            patience: 1,
            min_delta: 10.0, // every epoch counts as a plateau
            ..Default::default()
        };
        let (_, log) = train_model(config, &corpus, &opts, 1).unwrap();
        let bound = (1e-3f64 / 1e-5).log10().floor() as usize;
        assert!(log.lr_decays <= bound, "{} > {bound}", log.lr_decays);
        assert_eq!(log.lr_decays, 2);
    }

    #[test]
    fn overfit_two_stage_pipeline_trains() {
        let corpus = small_corpus();
        let config = config_for(Arch::TwoStage, &corpus);
        let opts = TrainOptions {
            epochs: 1,
            pretrain_epochs: 1,
            ..Default::default()
        };
        let (model, log) = train_model(config, &corpus, &opts, 11).unwrap();
        assert!(log.entries.iter().any(|e| e.phase == "labels"));
        assert!(log.entries.iter().any(|e| e.phase == "stage2"));
        assert!(log.entries.iter().any(|e| e.phase == "caption"));
        // the stage-1 head moved away from its zero init
        assert!(model
            .params
            .get("s1.fc3.w")
            .unwrap()
            .data()
            .iter()
            .any(|v| v.abs() > 0.0));
    }
}
