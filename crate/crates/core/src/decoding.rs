//! Best-span search, window aggregation and answer finalization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnswerType, DatasetMode, NUM_ANSWER_TYPES};

/// The literal appended to every QuAC paragraph and emitted for
/// unanswerable questions.
pub const CANNOTANSWER: &str = "CANNOTANSWER";

/// Best `(s, e, p_start[s] * p_end[e])` with `s <= e < s + max_len`.
///
/// One left-to-right sweep; a monotone deque holds the window maximum of
/// `p_start` over the admissible starts for each end. Ties go to the
/// smallest `s`, then the smallest `e`.
pub fn dp_best_span(p_start: &[f64], p_end: &[f64], max_len: usize) -> Result<(usize, usize, f64)> {
    let t_len = p_start.len();
    if t_len == 0 {
        return Err(Error::Index("best span over zero tokens".into()));
    }
    if p_end.len() != t_len {
        return Err(Error::Index(format!(
            "start/end lengths differ: {t_len} vs {}",
            p_end.len()
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("max_answer_len must be positive".into()));
    }
    let mut deque: VecDeque<usize> = VecDeque::new();
    let mut best: Option<(usize, usize, f64)> = None;
    for e in 0..t_len {
        // Strict comparison keeps the earliest index among equal maxima.
        while deque.back().is_some_and(|&b| p_start[b] < p_start[e]) {
            deque.pop_back();
        }
        deque.push_back(e);
        while deque.front().is_some_and(|&f| f + max_len <= e) {
            deque.pop_front();
        }
        let s = deque[0];
        let score = p_start[s] * p_end[e];
        let better = match best {
            None => true,
            Some((bs, _, bscore)) => score > bscore || (score == bscore && s < bs),
        };
        if better {
            best = Some((s, e, score));
        }
    }
    Ok(best.expect("non-empty sweep"))
}

/// Answer for one window, or after aggregation, for the whole paragraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedAnswer {
    pub start_local: usize,
    pub end_local: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub window_index: usize,
    pub answer_type: AnswerType,
    /// Paragraph text under the span.
    pub text: String,
}

impl DecodedAnswer {
    /// Builds a window-local answer; global indices come from the origin.
    pub fn from_window(
        window_index: usize,
        window_origin: usize,
        span: (usize, usize, f64),
        answer_type: AnswerType,
    ) -> Self {
        let (s, e, score) = span;
        Self {
            start_local: s,
            end_local: e,
            start: window_origin + s,
            end: window_origin + e,
            score,
            window_index,
            answer_type,
            text: String::new(),
        }
    }
}

/// Highest-scoring answer; ties go to the earliest window.
pub fn aggregate_windows(answers: Vec<DecodedAnswer>) -> Result<DecodedAnswer> {
    let mut best: Option<DecodedAnswer> = None;
    for a in answers {
        let replace = match &best {
            None => true,
            Some(b) => a.score > b.score || (a.score == b.score && a.window_index < b.window_index),
        };
        if replace {
            best = Some(a);
        }
    }
    best.ok_or_else(|| Error::Index("no windows to aggregate".into()))
}

/// Most probable type; ties go to the lower index (SPAN first).
pub fn argmax_type(p_type: &[f64; NUM_ANSWER_TYPES]) -> AnswerType {
    let mut best = 0;
    for (i, p) in p_type.iter().enumerate() {
        if *p > p_type[best] {
            best = i;
        }
    }
    AnswerType::from_index(best).expect("index below NUM_ANSWER_TYPES")
}

/// Final answer text and type.
///
/// CoQA replaces non-span types with "yes", "no" or "unknown". QuAC has no
/// type head: a span that covers the sentinel becomes [`CANNOTANSWER`].
pub fn finalize(
    answer_type: AnswerType,
    span_text: &str,
    covers_sentinel: bool,
    mode: DatasetMode,
) -> (String, AnswerType) {
    match mode {
        DatasetMode::Coqa => {
            let text = match answer_type {
                AnswerType::Span => span_text.to_string(),
                AnswerType::Yes => "yes".into(),
                AnswerType::No => "no".into(),
                AnswerType::Unanswerable => "unknown".into(),
            };
            (text, answer_type)
        }
        DatasetMode::Quac => {
            if covers_sentinel || span_text == CANNOTANSWER {
                (CANNOTANSWER.into(), AnswerType::Unanswerable)
            } else {
                (span_text.to_string(), AnswerType::Span)
            }
        }
    }
}
