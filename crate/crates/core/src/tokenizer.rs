//! Vocabulary, greedy longest-match subword tokenization, two-segment packing
//! and sliding passage windows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Prefix marking a word-continuation piece.
pub const CONTINUATION: &str = "##";

/// Words longer than this (in chars) map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Token to id map. Ids are dense in `0..len`; the four special tokens
/// always occupy ids 0 to 3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TokenizerError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub const SPECIALS: [&'static str; 4] = [PAD, UNK, CLS, SEP];

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, special) in Self::SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(TokenizerError::Vocab(format!(
                    "line {} must be {special}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from raw texts: every word seen at least
    /// `min_count` times (most frequent first, capped at `max_words`), every
    /// `extra` word, and single-character pieces in both word-initial and
    /// `##` continuation form so any word of seen characters tokenizes
    /// without `[UNK]`.
    pub fn build<'a, I>(texts: I, min_count: usize, max_words: usize, extra: &[&str]) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut chars: BTreeMap<String, ()> = BTreeMap::new();
        for text in texts {
            for word in pre_tokenize(text) {
                for c in word.text.chars() {
                    chars.insert(c.to_string(), ());
                }
                *counts.entry(word.text).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_words);

        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for e in extra {
            push(e.to_lowercase(), &mut tokens);
        }
        for (w, _) in words {
            push(w, &mut tokens);
        }
        for c in chars.keys() {
            push(c.clone(), &mut tokens);
            push(format!("{CONTINUATION}{c}"), &mut tokens);
        }
        Self::from_tokens(tokens).expect("specials are placed first")
    }

    /// Reads the one-token-per-line format.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }
}

/// Byte span `[begin, end)` of one token in the raw text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub begin: usize,
    pub end: usize,
}

/// Source spans of every token, in token order. Offsets are byte offsets
/// into the raw string, always on char boundaries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    pub spans: Vec<CharSpan>,
}

impl TokenAlignment {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Index of the first token whose span ends after `byte`.
    pub fn token_at_or_after(&self, byte: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.end > byte)
    }

    /// Index of the last token that starts before `byte`.
    pub fn token_before(&self, byte: usize) -> Option<usize> {
        self.spans.iter().rposition(|s| s.begin < byte)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
    pub alignment: TokenAlignment,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Whether token `i` begins a word (is not a `##` continuation).
    pub fn starts_word(&self, i: usize) -> bool {
        !self.pieces[i].starts_with(CONTINUATION)
    }
}

struct Word {
    text: String,
    // (byte begin, byte end) in the source for each char of `text`
    char_spans: Vec<(usize, usize)>,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercased words: maximal alphanumeric runs, and every punctuation char
/// on its own.
fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Option<Word> = None;
    for (b, c) in text.char_indices() {
        let e = b + c.len_utf8();
        if c.is_whitespace() || is_punct(c) {
            if let Some(w) = current.take() {
                words.push(w);
            }
            if is_punct(c) {
                let lower: String = c.to_lowercase().collect();
                let n = lower.chars().count();
                words.push(Word {
                    text: lower,
                    char_spans: vec![(b, e); n],
                });
            }
            continue;
        }
        let w = current.get_or_insert_with(|| Word {
            text: String::new(),
            char_spans: Vec::new(),
        });
        for lc in c.to_lowercase() {
            w.text.push(lc);
            w.char_spans.push((b, e));
        }
    }
    if let Some(w) = current.take() {
        words.push(w);
    }
    words
}

/// Lowercases, splits on whitespace and punctuation, then splits each word
/// into the longest vocabulary pieces from left to right. A word with any
/// unmatched remainder becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Tokenized {
    let mut out = Tokenized::default();
    for word in pre_tokenize(text) {
        let chars: Vec<char> = word.text.chars().collect();
        let word_span = CharSpan {
            begin: word.char_spans[0].0,
            end: word.char_spans[chars.len() - 1].1,
        };
        let pieces = if chars.len() > MAX_WORD_CHARS {
            None
        } else {
            greedy_pieces(&chars, vocab)
        };
        match pieces {
            Some(pieces) => {
                for (start, end, id) in pieces {
                    out.ids.push(id);
                    out.pieces.push(vocab.token(id).unwrap_or(UNK).to_string());
                    out.alignment.spans.push(CharSpan {
                        begin: word.char_spans[start].0,
                        end: word.char_spans[end - 1].1,
                    });
                }
            }
            None => {
                out.ids.push(vocab.unk_id());
                out.pieces.push(UNK.to_string());
                out.alignment.spans.push(word_span);
            }
        }
    }
    // Lowercasing can expand one source char into several; merge pieces that
    // would otherwise share or overlap a source span.
    for i in 1..out.alignment.spans.len() {
        let prev_end = out.alignment.spans[i - 1].end;
        let span = &mut out.alignment.spans[i];
        if span.begin < prev_end {
            span.begin = prev_end.min(span.end);
        }
    }
    out
}

/// `(char start, char end, id)` for each piece, or `None` if some suffix of
/// the word has no matching piece.
fn greedy_pieces(chars: &[char], vocab: &Vocabulary) -> Option<Vec<(usize, usize, u32)>> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        let mut end = chars.len();
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        let id = found?;
        pieces.push((start, end, id));
        start = end;
    }
    Some(pieces)
}

/// Renders tokens `start..=end` as the raw paragraph substring they cover.
pub fn span_to_text(
    paragraph: &str,
    alignment: &TokenAlignment,
    start: usize,
    end: usize,
) -> Result<String, TokenizerError> {
    if start > end || end >= alignment.len() {
        return Err(TokenizerError::Index(format!(
            "span ({start}, {end}) invalid for {} tokens",
            alignment.len()
        )));
    }
    let begin = alignment.spans[start].begin;
    let stop = alignment.spans[end].end;
    Ok(paragraph[begin..stop].trim().to_string())
}

/// Sequence lengths for packing and windowing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub max_seq_len: usize,
    pub max_query_len: usize,
    pub doc_stride: usize,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 384,
            max_query_len: 64,
            doc_stride: 128,
        }
    }
}

impl PackingConfig {
    /// Passage tokens per window. Sized for the longest allowed query so
    /// that every query packed against a window keeps all of its tokens.
    pub fn window_capacity(&self) -> Result<usize, TokenizerError> {
        self.validate()?;
        Ok(self.max_seq_len - self.max_query_len - 3)
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.max_query_len == 0 || self.max_seq_len < self.max_query_len + 4 {
            return Err(TokenizerError::Config(format!(
                "max_seq_len {} cannot hold 3 special tokens, a {}-token query and a passage token",
                self.max_seq_len, self.max_query_len
            )));
        }
        let capacity = self.max_seq_len - self.max_query_len - 3;
        if self.doc_stride == 0 || self.doc_stride > capacity {
            return Err(TokenizerError::Config(format!(
                "doc_stride {} must lie in 1..={capacity}",
                self.doc_stride
            )));
        }
        Ok(())
    }
}

/// One encoder input: `[CLS] query [SEP] passage [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// Positions of the passage tokens inside `token_ids`.
    pub paragraph_cols: Vec<usize>,
    /// Offset of the first passage token within the full passage.
    pub window_origin: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Packs a query and a passage fragment. The query keeps its leading
/// `max_query_len` tokens; the passage is cut to the remaining capacity.
pub fn pack(
    query: &[u32],
    passage: &[u32],
    max_seq_len: usize,
    max_query_len: usize,
    vocab: &Vocabulary,
) -> Result<PackedSequence, TokenizerError> {
    if max_query_len == 0 || max_seq_len < 5 {
        return Err(TokenizerError::Config(format!(
            "max_seq_len {max_seq_len} too small for specials, one query and one passage token"
        )));
    }
    let query = if query.len() > max_query_len {
        log::warn!(
            "query of {} tokens truncated to {max_query_len}",
            query.len()
        );
        &query[..max_query_len]
    } else {
        query
    };
    let capacity = max_seq_len.saturating_sub(query.len() + 3);
    if capacity == 0 {
        return Err(TokenizerError::Config(format!(
            "max_seq_len {max_seq_len} leaves no room for passage after a {}-token query",
            query.len()
        )));
    }
    let passage = &passage[..passage.len().min(capacity)];
    let mut token_ids = Vec::with_capacity(query.len() + passage.len() + 3);
    token_ids.push(vocab.cls_id());
    token_ids.extend_from_slice(query);
    token_ids.push(vocab.sep_id());
    let first_passage = token_ids.len();
    token_ids.extend_from_slice(passage);
    token_ids.push(vocab.sep_id());
    let mut segment_ids = vec![0u8; first_passage];
    segment_ids.resize(token_ids.len(), 1);
    Ok(PackedSequence {
        token_ids,
        segment_ids,
        paragraph_cols: (first_passage..first_passage + passage.len()).collect(),
        window_origin: 0,
    })
}

/// A contiguous slice of the passage seen by one encoder call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageWindow {
    pub origin: usize,
    pub ids: Vec<u32>,
}

impl PassageWindow {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, global: usize) -> bool {
        global >= self.origin && global < self.origin + self.ids.len()
    }
}

/// Window start offsets `0, stride, 2*stride, ...` until the final passage
/// token is covered.
pub fn window_offsets(
    passage_len: usize,
    capacity: usize,
    stride: usize,
) -> Result<Vec<usize>, TokenizerError> {
    if capacity == 0 || stride == 0 || stride > capacity {
        return Err(TokenizerError::Config(format!(
            "need capacity >= 1 and 1 <= stride <= capacity, got capacity {capacity}, stride {stride}"
        )));
    }
    let mut offsets = vec![0];
    let mut start = 0;
    while start + capacity < passage_len {
        start += stride;
        offsets.push(start);
    }
    Ok(offsets)
}

pub fn windows(
    passage: &[u32],
    capacity: usize,
    stride: usize,
) -> Result<Vec<PassageWindow>, TokenizerError> {
    Ok(window_offsets(passage.len(), capacity, stride)?
        .into_iter()
        .map(|origin| PassageWindow {
            origin,
            ids: passage[origin..(origin + capacity).min(passage.len())].to_vec(),
        })
        .collect())
}
