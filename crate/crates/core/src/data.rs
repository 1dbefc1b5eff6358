//! JSON-lines corpus and candidate formats plus model/parameter
//! serialization. Reals round-trip at full precision, so saved artifacts are
//! bit-exact regression fixtures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::nn::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One video: opaque per-frame feature vectors, optional named extra feature
/// vectors, and its human annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_features: BTreeMap<String, Vec<f64>>,
    pub annotations: Vec<String>,
    pub split: Split,
}

impl VideoRecord {
    fn validate(&self) -> Result<(), DataError> {
        let fail = |message: &str| {
            Err(DataError::Validation {
                video_id: self.video_id.clone(),
                message: message.to_string(),
            })
        };
        if self.frames.is_empty() {
            return fail("no frames");
        }
        let dim = self.frames[0].len();
        if dim == 0 {
            return fail("zero-width frame features");
        }
        if self.frames.iter().any(|f| f.len() != dim) {
            return fail("frame rows differ in length");
        }
        if self.annotations.is_empty() {
            return fail("no annotations");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.first().map(Vec::len).unwrap_or(0)
    }
}

/// One candidate sentence produced by one model for one video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub video_id: String,
    pub model_id: String,
    pub sentence: String,
}

/// Consensus output for one video, with raw scores at full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsensusOutRecord {
    pub video_id: String,
    pub selected: String,
    pub selected_model: String,
    pub phase1: Vec<f64>,
    pub top_c: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_order: Option<Vec<String>>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut file = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Loads and validates a corpus file. An empty file is a valid empty corpus;
/// duplicate video ids are rejected.
pub fn load_corpus(path: &Path) -> Result<Vec<VideoRecord>, DataError> {
    let records: Vec<VideoRecord> = read_jsonl(path)?;
    let mut seen = BTreeMap::new();
    for r in &records {
        r.validate()?;
        if seen.insert(r.video_id.clone(), ()).is_some() {
            return Err(DataError::DuplicateVideo(r.video_id.clone()));
        }
    }
    Ok(records)
}

pub fn save_corpus(path: &Path, records: &[VideoRecord]) -> Result<(), DataError> {
    write_jsonl(path, records)
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateRecord>, DataError> {
    read_jsonl(path)
}

pub fn save_candidates(path: &Path, records: &[CandidateRecord]) -> Result<(), DataError> {
    write_jsonl(path, records)
}

pub fn load_consensus_out(path: &Path) -> Result<Vec<ConsensusOutRecord>, DataError> {
    read_jsonl(path)
}

pub fn save_consensus_out(path: &Path, records: &[ConsensusOutRecord]) -> Result<(), DataError> {
    write_jsonl(path, records)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    arch: String,
    config: serde_json::Value,
    params: BTreeMap<String, ParamEntry>,
}

/// Saves named parameters with an architecture tag and an arbitrary config
/// object.
pub fn save_params(
    path: &Path,
    arch: &str,
    config: &serde_json::Value,
    params: &ParamSet,
) -> Result<(), DataError> {
    let mut entries = BTreeMap::new();
    for (name, tensor) in params.iter() {
        entries.insert(
            name.clone(),
            ParamEntry {
                shape: tensor.shape().to_vec(),
                data: tensor.data().to_vec(),
            },
        );
    }
    let file = ModelFile {
        arch: arch.to_string(),
        config: config.clone(),
        params: entries,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Loads a parameter file, verifying every declared shape against its data.
pub fn load_params(path: &Path) -> Result<(String, serde_json::Value, ParamSet), DataError> {
    let file = BufReader::new(File::open(path)?);
    let model: ModelFile = serde_json::from_reader(file)?;
    let mut params = ParamSet::new();
    for (name, entry) in model.params {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.data.len() {
            return Err(DataError::CorruptModel {
                param: name,
                message: format!(
                    "shape {:?} wants {numel} values, file holds {}",
                    entry.shape,
                    entry.data.len()
                ),
            });
        }
        let tensor = Tensor::new(entry.shape, entry.data).map_err(|e| DataError::CorruptModel {
            param: name.clone(),
            message: e.to_string(),
        })?;
        params.set(&name, tensor);
    }
    Ok((model.arch, model.config, params))
}
