//! Joint byte-pair-encoding vocabulary shared by every language.
//!
//! Words carry an explicit end-of-word marker on their final symbol, so
//! `"ab"` starts as `["a", "b</w>"]`. Merges are learned greedily by pair
//! frequency; ties go to the lexicographically smallest `(left, right)` pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;
pub const STR_TAG: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "</s>", "<str>"];
pub const END_OF_WORD: &str = "</w>";

const HEADER: &str = "BPEV1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary {target} is smaller than the {needed} reserved and base symbols")]
    VocabTooSmall { target: usize, needed: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Collapses runs of Unicode whitespace to single spaces and trims the ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    n_base: usize,
    merges: Vec<(String, String)>,
    index: HashMap<String, TokenId>,
    /// (left id, right id) -> (merge rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Learns merges until the vocabulary reaches `target_vocab` or no pair repeats.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Vocabulary, TokenizerError> {
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (initial_symbols(&w), f))
        .collect();
    let base: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let needed = RESERVED.len() + base.len();
    if target_vocab < needed {
        return Err(TokenizerError::VocabTooSmall {
            target: target_vocab,
            needed,
        });
    }
    let mut known: BTreeSet<String> = base.clone();
    let mut merges = Vec::new();
    while needed + merges.len() < target_vocab {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &counts {
            if c < 2 || known.contains(&format!("{}{}", pair.0, pair.1)) {
                continue;
            }
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in &mut words {
            apply_merge(syms, &l, &r, &merged);
        }
        known.insert(merged);
        merges.push((l, r));
    }
    Ok(Vocabulary::from_parts(base.into_iter().collect(), merges))
}

fn apply_merge(syms: &mut Vec<String>, l: &str, r: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == l && syms[i + 1] == r {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

impl Vocabulary {
    fn from_parts(base: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(base.iter().cloned());
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            let id = tokens.len() as TokenId;
            if let (Some(&li), Some(&ri)) = (index.get(l), index.get(r)) {
                ranks.insert((li, ri), (rank, id));
            }
            index.insert(merged.clone(), id);
            tokens.push(merged);
        }
        Vocabulary {
            tokens,
            n_base: base.len(),
            merges,
            index,
            ranks,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = initial_symbols(word)
            .iter()
            .map(|s| self.index.get(s).copied().unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            ids[i] = id;
            ids.remove(i + 1);
        }
        out.extend(ids);
    }

    /// BPE ids for `text`; never contains PAD, EOS or STR_TAG.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace normalization; reserved ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if Self::is_reserved(id) {
                continue;
            }
            match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    s.push_str(stem);
                    s.push(' ');
                }
                None => s.push_str(tok),
            }
        }
        Ok(s.trim_end().to_string())
    }

    /// Serialized vocabulary file contents.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.len());
        for t in &self.tokens[..RESERVED.len() + self.n_base] {
            s.push_str(t);
            s.push('\n');
        }
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let fmt_err = |line: usize, reason: &str| TokenizerError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.split_terminator('\n').enumerate();
        let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header"))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| fmt_err(1, "expected `BPEV1 <size>`"))?;
        for (i, want) in RESERVED.iter().enumerate() {
            match lines.next() {
                Some((_, got)) if got == *want => {}
                _ => return Err(fmt_err(i + 2, &format!("expected reserved token {want}"))),
            }
        }
        let mut base = Vec::new();
        let mut merges = Vec::new();
        for (i, line) in lines {
            match line.split_once(' ') {
                None if merges.is_empty() && !line.is_empty() => base.push(line.to_string()),
                Some((l, r)) if !l.is_empty() && !r.is_empty() && !r.contains(' ') => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(fmt_err(i + 1, "expected a base symbol or `<left> <right>` merge")),
            }
        }
        let vocab = Vocabulary::from_parts(base, merges);
        if vocab.len() != size {
            return Err(fmt_err(1, &format!("header size {size} but file defines {}", vocab.len())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
