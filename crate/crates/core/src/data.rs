//! Dialogue corpora: QuAC and CoQA readers, gold-span derivation and
//! history contexts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoding::CANNOTANSWER;
use crate::error::{Error, Result};
use crate::metrics::normalize;
use crate::model::{AnswerType, DatasetMode, DialogueContext};

pub const CACHE_VERSION: u32 = 1;

/// Paragraph length limit for the optional long-paragraph filter.
pub const LONG_PARAGRAPH_CHARS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    /// Reference answer texts; the first is the training reference.
    pub answers: Vec<String>,
    /// Byte range `[begin, end)` of the gold span in the paragraph.
    pub span: Option<(usize, usize)>,
    pub answer_type: AnswerType,
    pub human_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domain: String,
    pub paragraph: String,
    /// Turn `i` lives at index `i - 1`.
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Paragraph text under the gold span of turn `i` (1-based).
    pub fn span_text(&self, turn: usize) -> Option<&str> {
        let (b, e) = self.turns.get(turn.checked_sub(1)?)?.span?;
        self.paragraph.get(b..e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub mode: DatasetMode,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn num_questions(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    /// Dialogue counts per domain.
    pub fn domain_counts(&self) -> HashMap<&str, usize> {
        let mut out = HashMap::new();
        for d in &self.dialogues {
            *out.entry(d.domain.as_str()).or_default() += 1;
        }
        out
    }

    /// Keeps dialogues whose paragraph has fewer than `max_chars` chars.
    pub fn filter_long_paragraphs(&mut self, max_chars: usize) -> usize {
        let before = self.dialogues.len();
        self.dialogues.retain(|d| d.paragraph.chars().count() < max_chars);
        before - self.dialogues.len()
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Cache<'a> {
            version: u32,
            corpus: &'a Corpus,
        }
        let json = serde_json::to_string(&Cache {
            version: CACHE_VERSION,
            corpus: self,
        })
        .expect("corpus serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Cache {
            version: u32,
            corpus: Corpus,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: Cache = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if cache.version != CACHE_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("cache version {} (expected {CACHE_VERSION})", cache.version),
            });
        }
        Ok(cache.corpus)
    }
}

/// Byte offset of char index `c`; `c == char count` maps to `text.len()`.
pub fn char_to_byte(text: &str, c: usize) -> Option<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .nth(c)
}

/// Char index of byte offset `b`, which must lie on a char boundary.
pub fn byte_to_char(text: &str, b: usize) -> Option<usize> {
    text.is_char_boundary(b).then(|| text[..b].chars().count())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_err(at: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: at.to_string(),
        message: message.into(),
    }
}

fn field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| parse_err(&format!("{at}.{key}"), "missing field"))
}

fn str_field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a str> {
    field(v, key, at)?
        .as_str()
        .ok_or_else(|| parse_err(&format!("{at}.{key}"), "expected a string"))
}

fn int_field(v: &Value, key: &str, at: &str) -> Result<i64> {
    field(v, key, at)?
        .as_i64()
        .ok_or_else(|| parse_err(&format!("{at}.{key}"), "expected an integer"))
}

fn array_field<'a>(v: &'a Value, key: &str, at: &str) -> Result<&'a Vec<Value>> {
    field(v, key, at)?
        .as_array()
        .ok_or_else(|| parse_err(&format!("{at}.{key}"), "expected an array"))
}

/// Locates `text` at char offset `start`, falling back to the first
/// occurrence when the offset is off.
fn locate(paragraph: &str, text: &str, start: i64, at: &str) -> Result<(usize, usize)> {
    if let Some(b) = usize::try_from(start).ok().and_then(|c| char_to_byte(paragraph, c)) {
        if paragraph[b..].starts_with(text) {
            return Ok((b, b + text.len()));
        }
    }
    match paragraph.find(text) {
        Some(b) => {
            log::warn!("{at}: answer offset {start} does not match its text, using first occurrence");
            Ok((b, b + text.len()))
        }
        None => Err(parse_err(at, format!("answer text {text:?} not found in paragraph"))),
    }
}

/// Reads the QuAC layout `data[].paragraphs[].{context, id, qas[]}`. Every
/// paragraph ends with the [`CANNOTANSWER`] sentinel.
pub fn load_quac(path: &Path) -> Result<Corpus> {
    let root = read_json(path)?;
    parse_quac(&root, &path.display().to_string())
}

pub fn parse_quac(root: &Value, origin: &str) -> Result<Corpus> {
    let mut dialogues = Vec::new();
    for (di, doc) in array_field(root, "data", origin)?.iter().enumerate() {
        let at_doc = format!("{origin}:data[{di}]");
        for (pi, para) in array_field(doc, "paragraphs", &at_doc)?.iter().enumerate() {
            let at = format!("{at_doc}.paragraphs[{pi}]");
            let mut paragraph = str_field(para, "context", &at)?.to_string();
            if !paragraph.trim_end().ends_with(CANNOTANSWER) {
                paragraph.push(' ');
                paragraph.push_str(CANNOTANSWER);
            }
            let sentinel = paragraph.rfind(CANNOTANSWER).expect("sentinel present");
            let id = para
                .get("id")
                .and_then(Value::as_str)
                .map_or_else(|| format!("quac-{di}-{pi}"), str::to_string);
            let mut turns = Vec::new();
            for (qi, qa) in array_field(para, "qas", &at)?.iter().enumerate() {
                let at_q = format!("{at}.qas[{qi}]");
                let question = str_field(qa, "question", &at_q)?.to_string();
                let answers = array_field(qa, "answers", &at_q)?;
                let gold = qa.get("orig_answer").or_else(|| answers.first()).ok_or_else(|| {
                    parse_err(&format!("{at_q}.answers"), "no reference answers")
                })?;
                let gold_text = str_field(gold, "text", &at_q)?;
                let mut refs: Vec<String> = answers
                    .iter()
                    .enumerate()
                    .map(|(ai, a)| str_field(a, "text", &format!("{at_q}.answers[{ai}]")).map(str::to_string))
                    .collect::<Result<_>>()?;
                if refs.is_empty() {
                    refs.push(gold_text.to_string());
                }
                let (span, answer_type) = if gold_text == CANNOTANSWER {
                    (
                        (sentinel, sentinel + CANNOTANSWER.len()),
                        AnswerType::Unanswerable,
                    )
                } else {
                    let start = int_field(gold, "answer_start", &at_q)?;
                    (locate(&paragraph, gold_text, start, &at_q)?, AnswerType::Span)
                };
                turns.push(Turn {
                    question,
                    answers: refs,
                    span: Some(span),
                    answer_type,
                    human_f1: None,
                });
            }
            dialogues.push(Dialogue {
                id,
                domain: "wikipedia".into(),
                paragraph,
                turns,
            });
        }
    }
    Ok(Corpus {
        mode: DatasetMode::Quac,
        dialogues,
    })
}

/// Reads a corpus cache or, failing that, the dataset layout for `mode`.
pub fn load_corpus(path: &Path, mode: DatasetMode) -> Result<Corpus> {
    let root = read_json(path)?;
    let origin = path.display().to_string();
    if root.get("corpus").is_some() && root.get("version").is_some() {
        let corpus = Corpus::load_cache(path)?;
        if corpus.mode != mode {
            return Err(parse_err(&origin, format!("cached corpus is {:?}, expected {mode:?}", corpus.mode)));
        }
        return Ok(corpus);
    }
    match mode {
        DatasetMode::Quac => parse_quac(&root, &origin),
        DatasetMode::Coqa => parse_coqa(&root, &origin),
    }
}

/// Answer type implied by a CoQA free-form answer.
pub fn infer_type(input_text: &str) -> AnswerType {
    match normalize(input_text).join(" ").as_str() {
        "yes" => AnswerType::Yes,
        "no" => AnswerType::No,
        "unknown" => AnswerType::Unanswerable,
        _ => AnswerType::Span,
    }
}

/// Reads the CoQA layout `data[].{id, source, story, questions[], answers[],
/// additional_answers?}`. Span answers are re-derived as the paragraph span
/// with the best F1 against the free-form answer.
pub fn load_coqa(path: &Path) -> Result<Corpus> {
    let root = read_json(path)?;
    parse_coqa(&root, &path.display().to_string())
}

pub fn parse_coqa(root: &Value, origin: &str) -> Result<Corpus> {
    let mut dialogues = Vec::new();
    let mut skipped = 0usize;
    for (di, doc) in array_field(root, "data", origin)?.iter().enumerate() {
        let at = format!("{origin}:data[{di}]");
        let id = str_field(doc, "id", &at)?.to_string();
        let domain = str_field(doc, "source", &at)?.to_string();
        let paragraph = str_field(doc, "story", &at)?.to_string();
        let questions = array_field(doc, "questions", &at)?;
        let answers = array_field(doc, "answers", &at)?;
        if questions.len() != answers.len() {
            return Err(parse_err(
                &at,
                format!("{} questions but {} answers", questions.len(), answers.len()),
            ));
        }
        let extra: Vec<&Vec<Value>> = match doc.get("additional_answers").and_then(Value::as_object) {
            Some(m) => m.values().filter_map(Value::as_array).collect(),
            None => Vec::new(),
        };
        let mut turns = Vec::with_capacity(questions.len());
        for (qi, (q, a)) in questions.iter().zip(answers).enumerate() {
            let at_q = format!("{at}.questions[{qi}]");
            let at_a = format!("{at}.answers[{qi}]");
            let question = str_field(q, "input_text", &at_q)?.to_string();
            let input_text = str_field(a, "input_text", &at_a)?.to_string();
            let answer_type = infer_type(&input_text);
            let rationale = rationale_bytes(&paragraph, a, &at_a)?;
            let span = match answer_type {
                AnswerType::Span => {
                    let derived = derive_gold_span(&paragraph, &input_text, rationale)
                        .or_else(|| rationale.and_then(|_| derive_gold_span(&paragraph, &input_text, None)))
                        .or(rationale);
                    if derived.is_none() {
                        skipped += 1;
                    }
                    derived
                }
                _ => rationale,
            };
            let mut refs = vec![input_text];
            for set in &extra {
                if let Some(text) = set.get(qi).and_then(|x| x.get("input_text")).and_then(Value::as_str) {
                    refs.push(text.to_string());
                }
            }
            turns.push(Turn {
                question,
                answers: refs,
                span,
                answer_type,
                human_f1: None,
            });
        }
        dialogues.push(Dialogue {
            id,
            domain,
            paragraph,
            turns,
        });
    }
    if skipped > 0 {
        log::warn!("{origin}: {skipped} span answers without a derivable gold span");
    }
    Ok(Corpus {
        mode: DatasetMode::Coqa,
        dialogues,
    })
}

/// Rationale byte range, trimmed of surrounding whitespace; `None` when the
/// offsets are negative or empty.
fn rationale_bytes(paragraph: &str, a: &Value, at: &str) -> Result<Option<(usize, usize)>> {
    let (Some(s), Some(e)) = (
        a.get("span_start").and_then(Value::as_i64),
        a.get("span_end").and_then(Value::as_i64),
    ) else {
        return Ok(None);
    };
    if s < 0 || e <= s {
        return Ok(None);
    }
    let (Some(b), Some(eb)) = (char_to_byte(paragraph, s as usize), char_to_byte(paragraph, e as usize)) else {
        return Err(parse_err(at, format!("rationale [{s}, {e}) outside the story")));
    };
    let raw = &paragraph[b..eb];
    let lead = raw.len() - raw.trim_start().len();
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    Ok(Some((b + lead, b + lead + trimmed.len())))
}

/// Whitespace-delimited words as byte ranges.
fn words(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (b, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, b));
                start = None;
            }
            (false, None) => start = Some(b),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Byte range of the paragraph span, at word granularity, whose text has
/// the best token F1 against `answer`. The search covers words overlapping
/// `window` (the whole paragraph when `None`). Ties go to the shortest span,
/// then the earliest. Leading and trailing ASCII punctuation is trimmed
/// from the result. `None` when no span overlaps the answer at all.
pub fn derive_gold_span(paragraph: &str, answer: &str, window: Option<(usize, usize)>) -> Option<(usize, usize)> {
    let reference = normalize(answer);
    if reference.is_empty() {
        return None;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in &reference {
        *ref_counts.entry(w).or_default() += 1;
    }
    let (lo, hi) = window.unwrap_or((0, paragraph.len()));
    let spans: Vec<(usize, usize)> = words(paragraph)
        .into_iter()
        .filter(|&(b, e)| e > lo && b < hi)
        .collect();
    // A word without whitespace normalizes to at most one token.
    let units: Vec<Option<String>> = spans
        .iter()
        .map(|&(b, e)| normalize(&paragraph[b..e]).pop())
        .collect();
    let r = reference.len();
    // Best as (common, pred_len, s, e); F1 = 2c / (p + r).
    let mut best: Option<(usize, usize, usize, usize)> = None;
    for s in 0..units.len() {
        let mut used: HashMap<&str, usize> = HashMap::new();
        let (mut common, mut pred) = (0usize, 0usize);
        for e in s..units.len() {
            if let Some(w) = &units[e] {
                pred += 1;
                if let Some(&limit) = ref_counts.get(w.as_str()) {
                    let n = used.entry(w).or_default();
                    if *n < limit {
                        common += 1;
                    }
                    *n += 1;
                }
            }
            if common == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bc, bp, bs, be)) => {
                    let lhs = common * (bp + r);
                    let rhs = bc * (pred + r);
                    lhs > rhs || (lhs == rhs && (e - s < be - bs || (e - s == be - bs && s < bs)))
                }
            };
            if better {
                best = Some((common, pred, s, e));
            }
        }
    }
    let (_, _, s, e) = best?;
    let (mut b, mut end) = (spans[s].0, spans[e].1);
    let text = &paragraph[b..end];
    let inner = text.trim_matches(|c: char| c.is_ascii_punctuation());
    if !inner.is_empty() {
        b += text.len() - text.trim_start_matches(|c: char| c.is_ascii_punctuation()).len();
        end = b + inner.len();
    }
    Some((b, end))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    Gold,
    Predicted,
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gold" => Ok(HistoryMode::Gold),
            "predicted" => Ok(HistoryMode::Predicted),
            other => Err(Error::Config(format!("unknown history mode {other:?}"))),
        }
    }
}

/// Finalized answers per dialogue, appended strictly in turn order.
#[derive(Clone, Debug, Default)]
pub struct PredictionStore {
    answers: HashMap<String, Vec<String>>,
}

impl PredictionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the answer for `turn` (1-based), which must be the next one.
    pub fn record(&mut self, dialogue_id: &str, turn: usize, answer: impl Into<String>) -> Result<()> {
        let log = self.answers.entry(dialogue_id.to_string()).or_default();
        if turn != log.len() + 1 {
            return Err(Error::Sequencing(format!(
                "dialogue {dialogue_id}: recording turn {turn} after {} stored turns",
                log.len()
            )));
        }
        log.push(answer.into());
        Ok(())
    }

    pub fn get(&self, dialogue_id: &str, turn: usize) -> Option<&str> {
        self.answers
            .get(dialogue_id)?
            .get(turn.checked_sub(1)?)
            .map(String::as_str)
    }

    pub fn turns(&self, dialogue_id: &str) -> usize {
        self.answers.get(dialogue_id).map_or(0, Vec::len)
    }
}

/// History switches applied when building contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryFlags {
    pub questions: bool,
    pub answers: bool,
}

impl Default for HistoryFlags {
    fn default() -> Self {
        Self {
            questions: true,
            answers: true,
        }
    }
}

/// Context for turn `turn` (1-based) with `k` slots, most recent first.
pub fn build_context(
    dialogue: &Dialogue,
    turn: usize,
    k: usize,
    mode: HistoryMode,
    predicted: &PredictionStore,
    flags: HistoryFlags,
) -> Result<DialogueContext> {
    let current = turn
        .checked_sub(1)
        .and_then(|i| dialogue.turns.get(i))
        .ok_or_else(|| {
            Error::Index(format!(
                "dialogue {} has no turn {turn} ({} turns)",
                dialogue.id,
                dialogue.turns.len()
            ))
        })?;
    if mode == HistoryMode::Predicted && predicted.turns(&dialogue.id) < turn - 1 {
        return Err(Error::Sequencing(format!(
            "dialogue {}: turn {turn} needs predictions for turns 1..{}, have {}",
            dialogue.id,
            turn - 1,
            predicted.turns(&dialogue.id)
        )));
    }
    let mut ctx = DialogueContext::first_turn(current.question.clone(), k);
    ctx.turn = turn;
    for l in 1..=k.min(turn - 1) {
        let prev = turn - l;
        if flags.questions {
            ctx.prev_questions[l - 1] = Some(dialogue.turns[prev - 1].question.clone());
        }
        if flags.answers {
            let text = match mode {
                HistoryMode::Gold => dialogue.turns[prev - 1].answers[0].clone(),
                HistoryMode::Predicted => predicted
                    .get(&dialogue.id, prev)
                    .expect("checked above")
                    .to_string(),
            };
            ctx.prev_answers[l - 1] = Some(text);
        }
    }
    Ok(ctx)
}
