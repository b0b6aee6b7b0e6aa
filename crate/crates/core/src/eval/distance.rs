use serde::{Deserialize, Serialize};

use crate::data::ParallelCorpus;

use super::{DocumentEmbedder, EmbeddingMatrix, EvalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: String,
    pub b: String,
    pub mean_d_p: f64,
    pub median_d_p: f64,
    /// Nearest-neighbour translation retrieval, averaged over both directions.
    pub retrieval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub pairs: Vec<PairDistance>,
    pub mean_d_p: f64,
    pub mean_retrieval: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of rows of `q` whose nearest row of `k` (first on ties) is the same index.
fn retrieval(q: &EmbeddingMatrix, k: &EmbeddingMatrix) -> f64 {
    let hits = (0..q.rows())
        .filter(|&i| {
            let mut best = (0, f64::INFINITY);
            for j in 0..k.rows() {
                let d = sq_dist(q.row(i), k.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0 == i
        })
        .count();
    hits as f64 / q.rows() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Paired-distance statistics over every language pair of aligned embeddings.
/// `v_norm` is the mean row norm over both languages of a pair.
pub fn paired_distance_report(embs: &[EmbeddingMatrix], eps: f64) -> Result<DistanceReport, EvalError> {
    if embs.len() < 2 {
        return Err(EvalError::Invalid("need embeddings for at least 2 languages".into()));
    }
    let n = embs[0].rows();
    if n == 0 || embs.iter().any(|e| e.rows() != n || e.dim() != embs[0].dim()) {
        return Err(EvalError::Invalid("embeddings are not aligned".into()));
    }
    let name = |i: usize| embs[i].language.clone().unwrap_or_else(|| i.to_string());
    let mut pairs = Vec::new();
    for a in 0..embs.len() {
        for b in a + 1..embs.len() {
            let (ea, eb) = (&embs[a], &embs[b]);
            let v_norm = (0..n).map(|i| norm(ea.row(i)) + norm(eb.row(i))).sum::<f64>() / (2 * n) as f64;
            let d: Vec<f64> = (0..n).map(|i| sq_dist(ea.row(i), eb.row(i)) / (v_norm + eps)).collect();
            pairs.push(PairDistance {
                a: name(a),
                b: name(b),
                mean_d_p: d.iter().sum::<f64>() / n as f64,
                median_d_p: median(d),
                retrieval: 0.5 * (retrieval(ea, eb) + retrieval(eb, ea)),
            });
        }
    }
    let k = pairs.len() as f64;
    Ok(DistanceReport {
        mean_d_p: pairs.iter().map(|p| p.mean_d_p).sum::<f64>() / k,
        mean_retrieval: pairs.iter().map(|p| p.retrieval).sum::<f64>() / k,
        pairs,
    })
}

/// Embeds each listed language of an aligned corpus.
pub fn embed_corpus(
    embedder: &dyn DocumentEmbedder,
    corpus: &ParallelCorpus,
    languages: &[String],
) -> Result<Vec<EmbeddingMatrix>, EvalError> {
    languages
        .iter()
        .map(|l| {
            let i = corpus
                .lang_index(l)
                .ok_or_else(|| EvalError::Invalid(format!("corpus lacks language {l}")))?;
            Ok(embedder.embed_documents(corpus.sentences(i))?.with_language(l.clone()))
        })
        .collect()
}
