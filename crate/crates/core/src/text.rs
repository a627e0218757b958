//! Tokenization, vocabulary and the stochastic masking function.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const N_RESERVED: usize = 5;
const RESERVED: [&str; N_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
const VOCAB_HEADER: &str = "#vocab v1 reserved=5";

/// Lowercases and splits on whitespace; every punctuation character becomes a
/// token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("token {t:?} listed twice")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Keeps tokens seen at least `min_count` times; ids follow count
    /// descending, then token ascending.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[CLS]` + content (truncated to `max_len - 2`) + `[SEP]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let mut ids = vec![CLS];
        ids.extend(
            split_words(text)
                .iter()
                .take(max_len - 2)
                .map(|w| self.id(w)),
        );
        ids.push(SEP);
        TokenSequence { ids }
    }

    /// Joins content tokens with spaces; reserved tokens are skipped.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token\tid` lines after a header line; reserved tokens come first.
    pub fn to_text(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let mut lines = src.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Version("vocabulary header missing or unsupported".into()));
        }
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or(Error::Parse {
                line: i + 2,
                message: "expected `token<TAB>id`".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("ids must be dense and ordered, found {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED {
            return Err(Error::invalid("reserved tokens missing from vocabulary file"));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(self.to_text().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `[CLS] T_1 ... T_n [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// Number of content tokens `n_v`.
    pub fn n_content(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub indicator: Vec<bool>,
    /// Original id wherever `indicator` is set.
    pub targets: Vec<Option<u32>>,
}

impl MaskedSequence {
    /// Wraps a sequence without masking anything (inference path).
    pub fn unmasked(seq: &TokenSequence) -> Self {
        MaskedSequence {
            ids: seq.ids.clone(),
            indicator: vec![false; seq.ids.len()],
            targets: vec![None; seq.ids.len()],
        }
    }

    pub fn n_masked(&self) -> usize {
        self.indicator.iter().filter(|&&b| b).count()
    }
}

/// Replaces each content token with `[MASK]` independently with probability
/// `rate`. If nothing was drawn and the sequence has content, one content
/// position chosen uniformly is masked instead.
pub fn apply_mask(seq: &TokenSequence, rate: f64, rng: &mut impl Rng) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let len = seq.ids.len();
    let mut out = MaskedSequence::unmasked(seq);
    let mut any = false;
    for i in 1..len - 1 {
        if rng.gen::<f64>() < rate {
            out.ids[i] = MASK;
            out.indicator[i] = true;
            out.targets[i] = Some(seq.ids[i]);
            any = true;
        }
    }
    if !any && len > 2 {
        let i = rng.gen_range(1..len - 1);
        out.ids[i] = MASK;
        out.indicator[i] = true;
        out.targets[i] = Some(seq.ids[i]);
    }
    Ok(out)
}

/// Right-padded batch of masked sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub max_len: usize,
    /// Row-major `batch x max_len`.
    pub masked_ids: Vec<u32>,
    pub mask_indicator: Vec<bool>,
    pub targets: Vec<Option<u32>>,
    pub lengths: Vec<usize>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.masked_ids[b * self.max_len..b * self.max_len + self.lengths[b]]
    }

    /// Recovers the sequences that were padded.
    pub fn unpad(&self) -> Vec<MaskedSequence> {
        (0..self.batch_size())
            .map(|b| {
                let r = b * self.max_len..b * self.max_len + self.lengths[b];
                MaskedSequence {
                    ids: self.masked_ids[r.clone()].to_vec(),
                    indicator: self.mask_indicator[r.clone()].to_vec(),
                    targets: self.targets[r].to_vec(),
                }
            })
            .collect()
    }

    pub fn total_masked(&self) -> usize {
        self.mask_indicator.iter().filter(|&&b| b).count()
    }
}

pub fn pad_batch(seqs: &[MaskedSequence]) -> Result<MaskedBatch> {
    if seqs.is_empty() {
        return Err(Error::invalid("cannot pad an empty batch"));
    }
    let max_len = seqs.iter().map(|s| s.ids.len()).max().unwrap();
    let n = seqs.len() * max_len;
    let mut batch = MaskedBatch {
        max_len,
        masked_ids: vec![PAD; n],
        mask_indicator: vec![false; n],
        targets: vec![None; n],
        lengths: Vec::with_capacity(seqs.len()),
    };
    for (b, s) in seqs.iter().enumerate() {
        let o = b * max_len;
        batch.masked_ids[o..o + s.ids.len()].copy_from_slice(&s.ids);
        batch.mask_indicator[o..o + s.ids.len()].copy_from_slice(&s.indicator);
        batch.targets[o..o + s.ids.len()].copy_from_slice(&s.targets);
        batch.lengths.push(s.ids.len());
    }
    Ok(batch)
}
