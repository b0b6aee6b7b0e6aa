//! Zero-shot cross-lingual classification, paired-distance diagnostics,
//! PCA plots and the embedding file format.

mod classifier;
mod distance;
mod matrix;
mod pca;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{frame_encoder_input, Model, ModelError, TokenBatch};
use crate::tensor::TensorError;
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::train::{Checkpoint, TrainError};

pub use classifier::{train_classifier, Classifier, ClassifierHyper};
pub use distance::{embed_corpus, paired_distance_report, DistanceReport, PairDistance};
pub use matrix::{zero_shot_matrix, AccessEvent, AccuracyMatrix, EvalDataset, Split};
pub use pca::{pca_project, render_svg, Projection};

pub const DEFAULT_MAX_DOC_TOKENS: usize = 750;
const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("document {index} is empty after tokenization")]
    EmptyDocument { index: usize },
    #[error("no documents to embed")]
    NoDocuments,
    #[error("embedding format: {0}")]
    Format(String),
    #[error("embedding file truncated: header says {rows}x{dim}, payload holds {bytes} bytes")]
    Truncated { rows: u32, dim: u32, bytes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("training labels contain a single class ({0:?})")]
    SingleClass(String),
    #[error("label sets differ between {a} and {b}")]
    LabelMismatch { a: String, b: String },
    #[error("all points coincide; no variance to project")]
    DegenerateVariance,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Footer {
    #[serde(skip_serializing_if = "Option::is_none")]
    language: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

/// Row-major `rows × dim` document embeddings with optional language tag and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    pub language: Option<String>,
    pub labels: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EvalError> {
        if data.len() != rows * dim {
            return Err(EvalError::Invalid(format!("{} values for {rows}x{dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(EvalError::Invalid(format!("non-finite entry at row {}", i / dim.max(1))));
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            language: None,
            labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EvalError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EvalError::Invalid("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn with_language(mut self, lang: impl Into<String>) -> Self {
        self.language = Some(lang.into());
        self
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, EvalError> {
        if labels.len() != self.rows {
            return Err(EvalError::Invalid(format!("{} labels for {} rows", labels.len(), self.rows)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if self.language.is_some() || self.labels.is_some() {
            let footer = Footer {
                language: self.language.clone(),
                labels: self.labels.clone(),
            };
            out.extend_from_slice(serde_json::to_string(&footer).expect("footer serializes").as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EvalError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(EvalError::Format("missing EMB1 magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let n = rows as usize * dim as usize;
        let payload = &bytes[12..];
        if payload.len() < n * 4 {
            return Err(EvalError::Truncated {
                rows,
                dim,
                bytes: payload.len(),
            });
        }
        let data: Vec<f32> = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rest = &payload[n * 4..];
        let footer: Footer = if rest.is_empty() {
            Footer::default()
        } else {
            let text = std::str::from_utf8(rest).map_err(|_| EvalError::Format("footer is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| EvalError::Format(format!("footer: {e}")))?
        };
        let mut m = EmbeddingMatrix::new(rows as usize, dim as usize, data)?;
        m.language = footer.language;
        if let Some(l) = footer.labels {
            m = m.with_labels(l)?;
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Anything that maps documents to fixed-width vectors.
pub trait DocumentEmbedder {
    fn embed_documents(&self, docs: &[String]) -> Result<EmbeddingMatrix, EvalError>;
}

/// A trained model with its vocabulary, ready to embed text.
pub struct ModelEmbedder {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub languages: Vec<String>,
    pub max_doc_tokens: usize,
    /// Documents per forward pass; results do not depend on it.
    pub batch_size: usize,
}

impl ModelEmbedder {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EvalError> {
        let vocab = Vocabulary::parse(&ckpt.meta.vocab)?;
        let model = Model::from_params(ckpt.meta.model.clone(), ckpt.params.clone())?;
        Ok(ModelEmbedder {
            model,
            vocab,
            languages: ckpt.meta.languages.clone(),
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            batch_size: 64,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `[STR_TAG, first max_doc_tokens BPE tokens, EOS]`.
    pub fn frame(&self, index: usize, doc: &str) -> Result<Vec<u32>, EvalError> {
        let mut ids = self.vocab.encode(doc);
        if ids.is_empty() {
            return Err(EvalError::EmptyDocument { index });
        }
        ids.truncate(self.max_doc_tokens);
        Ok(frame_encoder_input(&ids))
    }
}

impl DocumentEmbedder for ModelEmbedder {
    fn embed_documents(&self, docs: &[String]) -> Result<EmbeddingMatrix, EvalError> {
        if docs.is_empty() {
            return Err(EvalError::NoDocuments);
        }
        let framed = docs
            .iter()
            .enumerate()
            .map(|(i, d)| self.frame(i, d))
            .collect::<Result<Vec<_>, _>>()?;
        // Group similar lengths to limit padding.
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by_key(|&i| (framed[i].len(), i));
        let d = self.model.config().d_model;
        let mut data = vec![0f32; docs.len() * d];
        for chunk in order.chunks(self.batch_size.max(1)) {
            let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| framed[i].clone()).collect();
            let p = self.model.embed(&TokenBatch::from_rows(&rows))?;
            for (k, &i) in chunk.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(p.row(k));
            }
        }
        EmbeddingMatrix::new(docs.len(), d, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_and_errors() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0e-8]])
            .unwrap()
            .with_language("L1")
            .with_labels(vec!["a".into(), "b".into()])
            .unwrap();
        let bytes = m.to_bytes();
        assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), m);
        let plain = EmbeddingMatrix::from_rows(&[vec![7.0]]).unwrap();
        assert_eq!(plain.to_bytes().len(), 16);
        assert_eq!(EmbeddingMatrix::from_bytes(&plain.to_bytes()).unwrap(), plain);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingMatrix::from_bytes(&bad), Err(EvalError::Format(_))));
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes[..12 + 4 * 3]),
            Err(EvalError::Truncated { rows: 2, dim: 2, .. })
        ));
    }
}
