//! Seeded generator of perfectly parallel pseudo-language corpora with class labels.
//!
//! Every language renders the same base-token sequence; language `ℓ` writes
//! base token `t` as `L<ℓ>_w<t>`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not draw {want} distinct documents after {tries} attempts")]
    Exhausted { want: usize, tries: usize },
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_languages: usize,
    pub base_vocab_size: usize,
    pub n_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Dirichlet concentration of each class's token distribution; smaller is peakier.
    pub class_topic_skew: f64,
    /// Window for a per-language word-order permutation; 0 keeps a shared order.
    pub reorder_window: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_languages: 4,
            base_vocab_size: 200,
            n_classes: 4,
            train_size: 2000,
            dev_size: 200,
            test_size: 400,
            min_len: 5,
            max_len: 15,
            class_topic_skew: 0.1,
            reorder_window: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_languages < 2 {
            return bad(format!("n_languages must be >= 2, got {}", self.n_languages));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.base_vocab_size < 10 * self.n_classes {
            return bad(format!(
                "base_vocab_size {} must be >= 10 * n_classes",
                self.base_vocab_size
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        if !(self.class_topic_skew > 0.0 && self.class_topic_skew.is_finite()) {
            return bad("class_topic_skew must be positive".into());
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return bad("split sizes must be positive".into());
        }
        Ok(())
    }

    pub fn language_names(&self) -> Vec<String> {
        (0..self.n_languages).map(|l| format!("L{l}")).collect()
    }

    fn split_size(&self, split: usize) -> usize {
        [self.train_size, self.dev_size, self.test_size][split]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub class: usize,
    pub base: Vec<usize>,
}

/// Base-token documents per split, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub splits: [Vec<Document>; 3],
    /// Per-class token distributions.
    pub topics: Vec<Vec<f64>>,
}

impl SynthData {
    pub fn split(&self, name: &str) -> Option<&[Document]> {
        SPLITS.iter().position(|s| *s == name).map(|i| self.splits[i].as_slice())
    }

    /// Surface text of one document in language `lang`.
    pub fn render(&self, doc: &Document, lang: usize) -> String {
        let order = self.word_order(doc.base.len(), lang);
        let mut s = String::new();
        for (k, &i) in order.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "L{lang}_w{}", doc.base[i]);
        }
        s
    }

    fn word_order(&self, len: usize, lang: usize) -> Vec<usize> {
        let w = self.spec.reorder_window;
        if w < 2 {
            return (0..len).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ (0x5045_524d << 8) ^ lang as u64);
        let mut perm: Vec<usize> = (0..w).collect();
        perm.shuffle(&mut rng);
        let mut out = Vec::with_capacity(len);
        for start in (0..len).step_by(w) {
            let r = (len - start).min(w);
            out.extend(perm.iter().filter(|&&p| p < r).map(|&p| start + p));
        }
        out
    }
}

/// Draws topics and documents. Identical specs give identical data.
pub fn sample(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gamma = Gamma::new(spec.class_topic_skew, 1.0).map_err(|e| SynthError::Spec(e.to_string()))?;
    let mut topics = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let raw: Vec<f64> = (0..spec.base_vocab_size).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
        let z: f64 = raw.iter().sum();
        topics.push(raw.into_iter().map(|x| x / z).collect::<Vec<f64>>());
    }
    let samplers = topics
        .iter()
        .map(|t| WeightedIndex::new(t).map_err(|e| SynthError::Spec(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut splits: [Vec<Document>; 3] = Default::default();
    for (s, docs) in splits.iter_mut().enumerate() {
        let want = spec.split_size(s);
        let budget = want * 100;
        let mut tries = 0;
        while docs.len() < want {
            tries += 1;
            if tries > budget {
                return Err(SynthError::Exhausted { want, tries: budget });
            }
            let class = rng.random_range(0..spec.n_classes);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let base: Vec<usize> = (0..len).map(|_| samplers[class].sample(&mut rng)).collect();
            if seen.insert(base.clone()) {
                docs.push(Document { class, base });
            }
        }
    }
    Ok(SynthData {
        spec: spec.clone(),
        splits,
        topics,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), SynthError> {
    fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<split>.<lang>.txt`, `<split>.labels.txt` and `spec.json` into `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthData, SynthError> {
    let data = sample(spec)?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for (s, name) in SPLITS.iter().enumerate() {
        for (l, lang) in spec.language_names().iter().enumerate() {
            let mut text = String::new();
            for d in &data.splits[s] {
                text.push_str(&data.render(d, l));
                text.push('\n');
            }
            write_file(&out_dir.join(format!("{name}.{lang}.txt")), &text)?;
        }
        let labels: String = data.splits[s].iter().map(|d| format!("c{}\n", d.class)).collect();
        write_file(&out_dir.join(format!("{name}.labels.txt")), &labels)?;
    }
    let json = serde_json::to_string_pretty(spec).map_err(|e| SynthError::Spec(e.to_string()))?;
    write_file(&out_dir.join("spec.json"), &(json + "\n"))?;
    Ok(data)
}

/// Test accuracy of a multinomial naive Bayes classifier over base tokens
/// (add-one smoothing), trained on `train`.
pub fn bag_of_tokens_accuracy(train: &[Document], test: &[Document], n_classes: usize, vocab: usize) -> f64 {
    let mut counts = vec![vec![1.0f64; vocab]; n_classes];
    let mut prior = vec![1.0f64; n_classes];
    for d in train {
        prior[d.class] += 1.0;
        for &t in &d.base {
            counts[d.class][t] += 1.0;
        }
    }
    let log_p: Vec<Vec<f64>> = counts
        .iter()
        .map(|c| {
            let z: f64 = c.iter().sum();
            c.iter().map(|x| (x / z).ln()).collect()
        })
        .collect();
    let correct = test
        .iter()
        .filter(|d| {
            let best = (0..n_classes)
                .map(|c| (c, prior[c].ln() + d.base.iter().map(|&t| log_p[c][t]).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
            best.0 == d.class
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
