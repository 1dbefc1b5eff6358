//! End-to-end finite-difference checks of every architecture's training loss.
//!
//! Central differences at h = 1e-5 resolve gradients down to roughly 1e-7;
//! the micro-instances here are pinned so that every true gradient component
//! stays clear of that noise floor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Split, VideoRecord};
use crate::error::ModelError;
use crate::models::vocab::{LabelVocabulary, Vocab};
use crate::models::{Arch, Model, ModelConfig};
use crate::nn::{grad_check, randn, xavier, NodeId, OpCheck, Tape, Tensor, GRADCHECK_H};
use crate::text::{tokenize, Sentence};

fn micro_video(frames: usize, dim: usize, seed: u64) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VideoRecord {
        video_id: "gradcheck".to_string(),
        frames: (0..frames)
            .map(|_| (0..dim).map(|_| randn(&mut rng)).collect())
            .collect(),
        extra_features: Default::default(),
        annotations: vec!["a man plays".to_string()],
        split: Split::Train,
    }
}

fn micro_config(arch: Arch, hidden: usize, init_seed: u64) -> ModelConfig {
    let sents = [tokenize("a man plays"), tokenize("dogs run")];
    let vocab = Vocab::build(sents.iter(), 1);
    let mut config = ModelConfig::desk(arch, "gradcheck", 2, vocab, init_seed);
    config.hidden = hidden;
    config.embed = 2;
    config.label_embed = 2;
    config.tcn_blocks = 1;
    if arch == Arch::TwoStage {
        config.label_vocab = Some(LabelVocabulary::build(sents.iter(), 1));
        config.top_k = 2;
    }
    config
}

/// Finite-difference check of a scalar loss against every trainable
/// parameter of the model.
fn check_model<F>(model: &Model, build_loss: F) -> Result<f64, ModelError>
where
    F: Fn(&Model, &mut Tape) -> Result<NodeId, ModelError>,
{
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| !Model::is_buffer(n))
        .cloned()
        .collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| model.params.get(n).expect("named").clone())
        .collect();
    let f = |xs: &[Tensor]| -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut probe = Model {
            config: model.config.clone(),
            params: model.params.clone(),
        };
        for (name, x) in names.iter().zip(xs) {
            probe.params.set(name, x.clone());
        }
        let mut tape = Tape::new();
        let loss = build_loss(&probe, &mut tape)?;
        let grads = tape.backward(loss)?;
        let pg = tape.param_grads(&grads)?;
        let out = names
            .iter()
            .zip(&inputs)
            .map(|(n, i)| pg.get(n).cloned().unwrap_or_else(|| Tensor::zeros_like(i)))
            .collect();
        Ok((tape.value(loss).scalar_value(), out))
    };
    grad_check(&f, &inputs, GRADCHECK_H)
}

/// End-to-end gradient checks, one per architecture variant plus the
/// two-wings language branch.
pub fn arch_suite() -> Result<Vec<OpCheck>, ModelError> {
    let target: Sentence = tokenize("a man");
    let mut out = Vec::new();

    let vision_loss = |video: VideoRecord, target: Sentence| {
        move |m: &Model, tape: &mut Tape| -> Result<NodeId, ModelError> {
            let enc = m.encode(tape, &video, true)?;
            m.caption_loss(tape, enc.encoding, &target)
        }
    };

    for (arch, init_seed, vid_seed) in [
        (Arch::Seq2Seq, 5, 21),
        (Arch::Seq2SeqAttn, 5, 23),
        (Arch::TwoWings, 5, 21),
    ] {
        let model = Model::new(micro_config(arch, 3, init_seed))?;
        let err = check_model(&model, vision_loss(micro_video(2, 2, vid_seed), target.clone()))?;
        out.push(OpCheck {
            name: format!("arch:{}", arch.as_str()),
            max_rel_err: err,
        });
    }

    {
        let mut model = Model::new(micro_config(Arch::TwoStage, 2, 11))?;
        // Spread the label probabilities and strengthen the label-embedding
        // path so no video-path gradient sinks into the noise floor.
        let labels = model.config.label_vocab.as_ref().expect("two_stage").len();
        let mut rng = ChaCha8Rng::seed_from_u64(11 ^ 0xbeef);
        let mut fc3 = xavier(&mut rng, labels, model.config.hidden);
        for v in fc3.data_mut() {
            *v *= 2.0;
        }
        model.params.set("s1.fc3.w", fc3);
        let mut emb = model.params.get("lbl.embed").expect("two_stage").clone();
        for v in emb.data_mut() {
            *v *= 4.0;
        }
        model.params.set("lbl.embed", emb);
        let err = check_model(&model, vision_loss(micro_video(2, 2, 23), target.clone()))?;
        out.push(OpCheck {
            name: "arch:two_stage".to_string(),
            max_rel_err: err,
        });
    }

    {
        let model = Model::new(micro_config(Arch::Tcn, 3, 33))?;
        let err = check_model(&model, vision_loss(micro_video(6, 2, 23), target.clone()))?;
        out.push(OpCheck {
            name: "arch:tcn".to_string(),
            max_rel_err: err,
        });
    }

    {
        let model = Model::new(micro_config(Arch::TwoWings, 3, 5))?;
        let words: Vec<usize> = model.config.vocab.encode(&tokenize("man a"));
        let target = target.clone();
        let err = check_model(&model, move |m, tape| {
            let enc = m.encode_words(tape, &words)?;
            m.caption_loss(tape, enc, &target)
        })?;
        out.push(OpCheck {
            name: "arch:two_wings(text)".to_string(),
            max_rel_err: err,
        });
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_architecture_loss_passes_end_to_end_check() {
        for check in arch_suite().unwrap() {
            assert!(
                check.max_rel_err < 1e-4,
                "{} rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
