use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ParallelCorpus};

use super::classifier::{train_classifier, ClassifierHyper};
use super::{DocumentEmbedder, EmbeddingMatrix, EvalError};

/// Train-language × test-language accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub languages: Vec<String>,
    pub cells: Vec<Vec<f64>>,
    /// Per-row dev accuracy (percent) of the selected classifier epoch; empty when not measured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dev_accuracy: Vec<f64>,
}

#[derive(Serialize)]
struct Report<'a> {
    languages: &'a [String],
    cells: &'a [Vec<f64>],
    cross: Option<f64>,
    same: f64,
    all: f64,
    x_cross: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "<[f64]>::is_empty")]
    dev_accuracy: &'a [f64],
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl AccuracyMatrix {
    pub fn new(languages: Vec<String>, cells: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let l = languages.len();
        if l == 0 || cells.len() != l || cells.iter().any(|r| r.len() != l) {
            return Err(EvalError::Invalid(format!("accuracy matrix must be {l}x{l}")));
        }
        Ok(AccuracyMatrix {
            languages,
            cells,
            dev_accuracy: Vec::new(),
        })
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &v)| v))
    }

    /// Mean of the off-diagonal cells; absent for a single language.
    pub fn cross(&self) -> Option<f64> {
        mean(self.off_diagonal())
    }

    pub fn same(&self) -> f64 {
        mean(self.cells.iter().enumerate().map(|(i, r)| r[i])).expect("non-empty")
    }

    pub fn all(&self) -> f64 {
        mean(self.cells.iter().flatten().copied()).expect("non-empty")
    }

    /// Mean same-language dev accuracy over rows; the zero-shot-safe model-selection signal.
    pub fn mean_dev(&self) -> Option<f64> {
        mean(self.dev_accuracy.iter().copied())
    }

    /// Mean of row `row`'s off-diagonal cells.
    pub fn x_cross(&self, row: usize) -> Option<f64> {
        mean(self.cells[row].iter().enumerate().filter(|(j, _)| *j != row).map(|(_, &v)| v))
    }

    pub fn to_json(&self) -> String {
        let r = Report {
            languages: &self.languages,
            cells: &self.cells,
            cross: self.cross(),
            same: self.same(),
            all: self.all(),
            x_cross: (0..self.languages.len()).map(|i| self.x_cross(i)).collect(),
            dev_accuracy: &self.dev_accuracy,
        };
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    /// Grid with train languages as rows and an `X_cross` column.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("train\\test");
        for l in &self.languages {
            s.push('\t');
            s.push_str(l);
        }
        s.push_str("\tX_cross\n");
        for (i, row) in self.cells.iter().enumerate() {
            s.push_str(&self.languages[i]);
            for v in row {
                let _ = write!(s, "\t{v:.2}");
            }
            match self.x_cross(i) {
                Some(x) => {
                    let _ = writeln!(s, "\t{x:.2}");
                }
                None => s.push_str("\t-\n"),
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessEvent {
    pub split: Split,
    pub language: String,
}

/// Per-language labelled documents for the three splits. Every read is logged.
#[derive(Debug)]
pub struct EvalDataset {
    languages: Vec<String>,
    docs: BTreeMap<(Split, usize), (Vec<String>, Vec<String>)>,
    log: RefCell<Vec<AccessEvent>>,
}

impl EvalDataset {
    pub fn new(
        languages: Vec<String>,
        docs: BTreeMap<(Split, usize), (Vec<String>, Vec<String>)>,
    ) -> Result<Self, EvalError> {
        for split in [Split::Train, Split::Dev, Split::Test] {
            for l in 0..languages.len() {
                match docs.get(&(split, l)) {
                    Some((d, lab)) if d.len() == lab.len() && !d.is_empty() => {}
                    _ => {
                        return Err(EvalError::Invalid(format!(
                            "{split:?} split of {} is missing, empty or unlabelled",
                            languages[l]
                        )))
                    }
                }
            }
        }
        let label_set = |l: usize| {
            let mut s: Vec<&String> = docs[&(Split::Train, l)].1.iter().collect();
            s.sort();
            s.dedup();
            s
        };
        for l in 1..languages.len() {
            if label_set(l) != label_set(0) {
                return Err(EvalError::LabelMismatch {
                    a: languages[0].clone(),
                    b: languages[l].clone(),
                });
            }
        }
        Ok(EvalDataset {
            languages,
            docs,
            log: RefCell::new(Vec::new()),
        })
    }

    /// Builds the dataset from labelled parallel train/dev/test corpora, using `languages`.
    pub fn from_corpora(
        languages: &[String],
        train: &ParallelCorpus,
        dev: &ParallelCorpus,
        test: &ParallelCorpus,
    ) -> Result<Self, EvalError> {
        let mut docs = BTreeMap::new();
        for (split, c) in [(Split::Train, train), (Split::Dev, dev), (Split::Test, test)] {
            let labels = c
                .labels()
                .ok_or_else(|| EvalError::Invalid(format!("{split:?} corpus has no labels")))?;
            for (li, lang) in languages.iter().enumerate() {
                let idx = c
                    .lang_index(lang)
                    .ok_or_else(|| EvalError::Invalid(format!("{split:?} corpus lacks language {lang}")))?;
                docs.insert((split, li), (c.sentences(idx).to_vec(), labels.to_vec()));
            }
        }
        Self::new(languages.to_vec(), docs)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn read(&self, split: Split, lang: usize) -> (&[String], &[String]) {
        self.log.borrow_mut().push(AccessEvent {
            split,
            language: self.languages[lang].clone(),
        });
        let (d, l) = &self.docs[&(split, lang)];
        (d, l)
    }

    pub fn access_log(&self) -> Vec<AccessEvent> {
        self.log.borrow().clone()
    }
}

fn embed(
    embedder: &dyn DocumentEmbedder,
    data: &EvalDataset,
    split: Split,
    lang: usize,
) -> Result<EmbeddingMatrix, EvalError> {
    let (docs, labels) = data.read(split, lang);
    embedder
        .embed_documents(docs)?
        .with_language(data.languages()[lang].clone())
        .with_labels(labels.to_vec())
}

/// For each training language: fit a classifier on its train split (dev for
/// model selection), then score it on every language's test split.
pub fn zero_shot_matrix(
    embedder: &dyn DocumentEmbedder,
    data: &EvalDataset,
    hyper: &ClassifierHyper,
) -> Result<AccuracyMatrix, EvalError> {
    let n = data.languages().len();
    let mut tests: Vec<Option<EmbeddingMatrix>> = vec![None; n];
    let mut cells = vec![vec![0.0; n]; n];
    let mut dev_accuracy = Vec::with_capacity(n);
    for x in 0..n {
        let train = embed(embedder, data, Split::Train, x)?;
        let dev = embed(embedder, data, Split::Dev, x)?;
        let row_hyper = ClassifierHyper {
            seed: derive_seed(hyper.seed, &[x as u64]),
            ..hyper.clone()
        };
        let clf = train_classifier(&train, &dev, &row_hyper)?;
        dev_accuracy.push(100.0 * clf.dev_accuracy);
        for y in 0..n {
            if tests[y].is_none() {
                tests[y] = Some(embed(embedder, data, Split::Test, y)?);
            }
            cells[x][y] = 100.0 * clf.accuracy(tests[y].as_ref().expect("filled above"))?;
        }
    }
    let mut m = AccuracyMatrix::new(data.languages().to_vec(), cells)?;
    m.dev_accuracy = dev_accuracy;
    Ok(m)
}
