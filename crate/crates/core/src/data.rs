//! Parallel corpora, the pivot curriculum, token-budget batching and negative sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::NegativeMatrix;
use crate::model::{decoder_views, frame_encoder_input, TokenBatch};
use crate::tokenizer::{normalize, TokenId, Vocabulary, PAD};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not valid UTF-8")]
    NotUtf8 { path: PathBuf },
    #[error("line counts differ: {}", format_counts(.0))]
    Alignment(Vec<(String, usize)>),
    #[error("{name} line {line}: empty after normalization")]
    EmptyLine { name: String, line: usize },
    #[error("no corpus files for split {split:?} in {dir}")]
    MissingSplit { split: String, dir: PathBuf },
    #[error("need at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("pivot {0:?} is not a corpus language")]
    UnknownPivot(String),
    #[error("pivots must be two different languages")]
    SamePivots,
    #[error("bilingual training needs exactly 2 languages, got {0}")]
    NotBilingual(usize),
    #[error("line {line}: framed length {len} exceeds max_tokens {max}")]
    TooLong { line: usize, len: usize, max: usize },
    #[error("{n_neg} negatives requested from a batch of {rows}")]
    TooManyNegatives { n_neg: usize, rows: usize },
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
}

fn format_counts(counts: &[(String, usize)]) -> String {
    counts
        .iter()
        .map(|(n, c)| format!("{n}={c}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Sentence-aligned text in several languages. Languages are kept sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    languages: Vec<String>,
    lines: Vec<Vec<String>>,
    labels: Option<Vec<String>>,
}

impl ParallelCorpus {
    pub fn new(per_language: BTreeMap<String, Vec<String>>, labels: Option<Vec<String>>) -> Result<Self, DataError> {
        let mut counts: Vec<(String, usize)> = per_language.iter().map(|(l, v)| (l.clone(), v.len())).collect();
        if let Some(lab) = &labels {
            counts.push(("labels".to_string(), lab.len()));
        }
        if counts.windows(2).any(|w| w[0].1 != w[1].1) {
            return Err(DataError::Alignment(counts));
        }
        let mut languages = Vec::new();
        let mut lines = Vec::new();
        for (lang, raw) in per_language {
            let mut norm = Vec::with_capacity(raw.len());
            for (i, s) in raw.iter().enumerate() {
                let n = normalize(s);
                if n.is_empty() {
                    return Err(DataError::EmptyLine {
                        name: lang.clone(),
                        line: i + 1,
                    });
                }
                norm.push(n);
            }
            languages.push(lang);
            lines.push(norm);
        }
        let labels = match labels {
            Some(lab) => {
                let mut out = Vec::with_capacity(lab.len());
                for (i, l) in lab.iter().enumerate() {
                    let n = normalize(l);
                    if n.is_empty() {
                        return Err(DataError::EmptyLine {
                            name: "labels".into(),
                            line: i + 1,
                        });
                    }
                    out.push(n);
                }
                Some(out)
            }
            None => None,
        };
        Ok(ParallelCorpus {
            languages,
            lines,
            labels,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.lines.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lang_index(&self, lang: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    pub fn sentences(&self, lang: usize) -> &[String] {
        &self.lines[lang]
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Every sentence of every language, language-major.
    pub fn all_sentences(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().flatten().map(String::as_str)
    }

    /// Restricts the corpus to the named languages.
    pub fn select(&self, langs: &[String]) -> Result<ParallelCorpus, DataError> {
        let mut map = BTreeMap::new();
        for l in langs {
            let i = self.lang_index(l).ok_or_else(|| DataError::UnknownLanguage(l.clone()))?;
            map.insert(l.clone(), self.lines[i].clone());
        }
        ParallelCorpus::new(map, self.labels.clone())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|_| DataError::NotUtf8 {
        path: path.to_path_buf(),
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Loads one file per language plus an optional labels file.
pub fn load_parallel(paths: &BTreeMap<String, PathBuf>, labels: Option<&Path>) -> Result<ParallelCorpus, DataError> {
    let mut per_language = BTreeMap::new();
    for (lang, p) in paths {
        per_language.insert(lang.clone(), read_lines(p)?);
    }
    let labels = labels.map(read_lines).transpose()?;
    ParallelCorpus::new(per_language, labels)
}

/// Loads `<split>.<lang>.txt` files from `dir`, with `<split>.labels.txt` when present.
pub fn load_split(dir: &Path, split: &str) -> Result<ParallelCorpus, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = BTreeMap::new();
    let prefix = format!("{split}.");
    for e in entries {
        let e = e.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(lang) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".txt")) {
            if lang != "labels" && !lang.is_empty() && !lang.contains('.') {
                paths.insert(lang.to_string(), e.path());
            }
        }
    }
    if paths.is_empty() {
        return Err(DataError::MissingSplit {
            split: split.to_string(),
            dir: dir.to_path_buf(),
        });
    }
    let labels = dir.join(format!("{split}.labels.txt"));
    load_parallel(&paths, labels.exists().then_some(labels.as_path()))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CurriculumDirection {
    pub src: String,
    pub tgt: String,
}

impl std::fmt::Display for CurriculumDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

/// Which languages and directions a training run uses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Target languages of the curriculum; the first two corpus languages when unset.
    pub pivots: Option<[String; 2]>,
    /// Train only `a→b` and `b→a` on a two-language selection.
    pub bilingual: bool,
    /// Restrict training to these languages; all corpus languages when unset.
    pub languages: Option<Vec<String>>,
}

impl DataConfig {
    pub fn select_languages(&self, available: &[String]) -> Result<Vec<String>, DataError> {
        let mut langs = match &self.languages {
            Some(l) => {
                if let Some(bad) = l.iter().find(|x| !available.contains(x)) {
                    return Err(DataError::UnknownLanguage(bad.clone()));
                }
                l.clone()
            }
            None => available.to_vec(),
        };
        langs.sort();
        langs.dedup();
        Ok(langs)
    }

    pub fn curriculum(&self, languages: &[String]) -> Result<Vec<CurriculumDirection>, DataError> {
        let pivots = match &self.pivots {
            Some([a, b]) => (a.clone(), b.clone()),
            None => {
                if languages.len() < 2 {
                    return Err(DataError::TooFewLanguages(languages.len()));
                }
                (languages[0].clone(), languages[1].clone())
            }
        };
        build_curriculum(languages, (&pivots.0, &pivots.1), self.bilingual)
    }
}

/// Directions for pivot training: each non-pivot source to both pivots and
/// each pivot to the other, sources in sorted order.
pub fn build_curriculum(
    languages: &[String],
    pivots: (&str, &str),
    bilingual: bool,
) -> Result<Vec<CurriculumDirection>, DataError> {
    let mut langs = languages.to_vec();
    langs.sort();
    langs.dedup();
    if langs.len() < 2 {
        return Err(DataError::TooFewLanguages(langs.len()));
    }
    let dir = |s: &str, t: &str| CurriculumDirection {
        src: s.to_string(),
        tgt: t.to_string(),
    };
    if bilingual {
        if langs.len() != 2 {
            return Err(DataError::NotBilingual(langs.len()));
        }
        return Ok(vec![dir(&langs[0], &langs[1]), dir(&langs[1], &langs[0])]);
    }
    for p in [pivots.0, pivots.1] {
        if !langs.iter().any(|l| l == p) {
            return Err(DataError::UnknownPivot(p.to_string()));
        }
    }
    if pivots.0 == pivots.1 {
        return Err(DataError::SamePivots);
    }
    let mut out = Vec::new();
    for src in &langs {
        for tgt in [pivots.0, pivots.1] {
            if src != tgt {
                out.push(dir(src, tgt));
            }
        }
    }
    Ok(out)
}

/// Groups line indices into batches: sort by framed length, fill greedily
/// while `rows × max length ≤ max_tokens`, then shuffle the batch order.
pub fn plan_batches(framed_lens: &[usize], max_tokens: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if let Some((i, &len)) = framed_lens.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(DataError::TooLong {
            line: i + 1,
            len,
            max: max_tokens,
        });
    }
    let mut order: Vec<usize> = (0..framed_lens.len()).collect();
    order.sort_by_key(|&i| (framed_lens[i], i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for i in order {
        let len = framed_lens[i];
        let m = cur_max.max(len);
        if !cur.is_empty() && (cur.len() + 1) * m > max_tokens {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(len);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// `n_neg` distinct in-batch negatives per row, never the row itself, drawn
/// independently for the two directions.
pub fn sample_negatives(
    n: usize,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<(NegativeMatrix, NegativeMatrix), DataError> {
    if n_neg > n.saturating_sub(1) {
        return Err(DataError::TooManyNegatives { n_neg, rows: n });
    }
    let draw = |rng: &mut _| {
        let mut idx = Vec::with_capacity(n * n_neg);
        for i in 0..n {
            for j in rand::seq::index::sample(rng, n - 1, n_neg) {
                idx.push(if j >= i { j + 1 } else { j });
            }
        }
        NegativeMatrix::new(n, n_neg, idx)
    };
    let ab = draw(rng);
    let ba = draw(rng);
    Ok((ab, ba))
}

/// Corpus sentences encoded once with a vocabulary, unframed.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub languages: Vec<String>,
    pub ids: Vec<Vec<Vec<TokenId>>>,
}

impl EncodedCorpus {
    pub fn new(corpus: &ParallelCorpus, vocab: &Vocabulary) -> Self {
        let ids = (0..corpus.languages().len())
            .map(|l| corpus.sentences(l).iter().map(|s| vocab.encode(s)).collect())
            .collect();
        EncodedCorpus {
            languages: corpus.languages().to_vec(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lang_index(&self, lang: &str) -> Result<usize, DataError> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| DataError::UnknownLanguage(lang.to_string()))
    }
}

/// One training batch for a single direction.
#[derive(Clone, Debug)]
pub struct Batch {
    pub direction: CurriculumDirection,
    pub src_lang: usize,
    pub tgt_lang: usize,
    /// Framed, right-padded source rows.
    pub src: TokenBatch,
    /// Framed target rows, for the target-side embedding.
    pub tgt_framed: TokenBatch,
    /// EOS-fronted decoder input `G`.
    pub tgt_in: TokenBatch,
    /// Gold outputs `Y`, padded to `tgt_in`'s shape, row-major.
    pub tgt_out: Vec<TokenId>,
    pub pairs: Vec<usize>,
    pub neg_ab: NegativeMatrix,
    pub neg_ba: NegativeMatrix,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.pairs.len()
    }

    /// Source plus target tokens, padding excluded.
    pub fn token_count(&self) -> usize {
        self.src.count_tokens() + self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Batches for one direction. `n_neg` is clamped to `rows - 1` per batch.
pub fn make_batches(
    corpus: &EncodedCorpus,
    direction: &CurriculumDirection,
    max_tokens: usize,
    epoch_seed: u64,
    n_neg: usize,
) -> Result<Vec<Batch>, DataError> {
    let s = corpus.lang_index(&direction.src)?;
    let t = corpus.lang_index(&direction.tgt)?;
    let lens: Vec<usize> = corpus.ids[s].iter().map(|x| x.len() + 2).collect();
    let plan = plan_batches(&lens, max_tokens, epoch_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, &[0x6e6567]));
    let mut out = Vec::with_capacity(plan.len());
    for pairs in plan {
        let src: Vec<Vec<TokenId>> = pairs.iter().map(|&i| frame_encoder_input(&corpus.ids[s][i])).collect();
        let tgt_framed: Vec<Vec<TokenId>> = pairs.iter().map(|&i| frame_encoder_input(&corpus.ids[t][i])).collect();
        let (g, y): (Vec<_>, Vec<_>) = pairs.iter().map(|&i| decoder_views(&corpus.ids[t][i])).unzip();
        let tgt_in = TokenBatch::from_rows(&g);
        let tgt_out = TokenBatch::padded_to(&y, tgt_in.len()).ids().to_vec();
        let k = n_neg.min(pairs.len() - 1);
        let (neg_ab, neg_ba) = sample_negatives(pairs.len(), k, &mut rng)?;
        out.push(Batch {
            direction: direction.clone(),
            src_lang: s,
            tgt_lang: t,
            src: TokenBatch::from_rows(&src),
            tgt_framed: TokenBatch::from_rows(&tgt_framed),
            tgt_in,
            tgt_out,
            pairs,
            neg_ab,
            neg_ba,
        });
    }
    Ok(out)
}

/// Interleaves per-direction batch lists batch-by-batch; exhausted lists drop out.
pub fn round_robin<B>(lists: Vec<Vec<B>>) -> Vec<B> {
    let total = lists.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = lists.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for it in iters.iter_mut() {
            if let Some(b) = it.next() {
                out.push(b);
            }
        }
    }
    out
}

/// Mixes a base seed with a path of integers (splitmix64 finaliser per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut x = base;
    for &p in path {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// All batches of one epoch, directions interleaved round-robin.
pub fn epoch_batches(
    corpus: &EncodedCorpus,
    curriculum: &[CurriculumDirection],
    max_tokens: usize,
    seed: u64,
    epoch: usize,
    n_neg: usize,
) -> Result<Vec<Batch>, DataError> {
    let lists = curriculum
        .iter()
        .enumerate()
        .map(|(d, dir)| make_batches(corpus, dir, max_tokens, derive_seed(seed, &[epoch as u64, d as u64]), n_neg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(round_robin(lists))
}
