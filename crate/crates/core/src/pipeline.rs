//! Paragraph preparation, training examples and the single prediction path
//! shared by batch evaluation and the interactive service.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    build_context, byte_to_char, Corpus, Dialogue, HistoryFlags, HistoryMode, PredictionStore, Turn,
};
use crate::decoding::{aggregate_windows, argmax_type, dp_best_span, finalize, DecodedAnswer, CANNOTANSWER};
use crate::encoder::ForwardMode;
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, PredictionLine};
use crate::model::{AnswerType, CmcModel, DatasetMode, DialogueContext, Theta};
use crate::numerics::{Graph, ParamStore};
use crate::tokenizer::{tokenize, windows, PackingConfig, PassageWindow, Tokenized, Vocabulary};

/// A paragraph tokenized and cut into encoder windows once.
#[derive(Clone, Debug)]
pub struct PreparedParagraph {
    pub text: String,
    pub tokens: Tokenized,
    pub windows: Vec<PassageWindow>,
    /// Byte offset of the QuAC sentinel, when present.
    pub sentinel: Option<usize>,
}

impl PreparedParagraph {
    /// In QuAC mode the sentinel is appended unless already present.
    pub fn new(text: &str, vocab: &Vocabulary, packing: &PackingConfig, mode: DatasetMode) -> Result<Self> {
        let mut text = text.to_string();
        let mut sentinel = None;
        if mode == DatasetMode::Quac {
            if !text.trim_end().ends_with(CANNOTANSWER) {
                text.push(' ');
                text.push_str(CANNOTANSWER);
            }
            sentinel = text.rfind(CANNOTANSWER);
        }
        let tokens = tokenize(&text, vocab);
        if tokens.is_empty() {
            return Err(Error::Index("paragraph has no tokens".into()));
        }
        let windows = windows(&tokens.ids, packing.window_capacity()?, packing.doc_stride)?;
        Ok(Self {
            text,
            tokens,
            windows,
            sentinel,
        })
    }

    /// Char offsets `[begin, end)` of every token, for highlighting spans
    /// given as token indices.
    pub fn char_alignment(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::with_capacity(self.tokens.alignment.len());
        let mut chars = 0;
        let mut byte = 0;
        for span in &self.tokens.alignment.spans {
            chars += self.text[byte..span.begin].chars().count();
            let begin = chars;
            chars += self.text[span.begin..span.end].chars().count();
            byte = span.end;
            out.push([begin, chars]);
        }
        out
    }

    /// Token span `(start, end)` covering byte range `[b, e)`.
    pub fn token_span(&self, b: usize, e: usize) -> Option<(usize, usize)> {
        let s = self.tokens.alignment.token_at_or_after(b)?;
        let t = self.tokens.alignment.token_before(e)?;
        (s <= t).then_some((s, t))
    }
}

/// One (turn, window) training example with window-local gold indices.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub paragraph: usize,
    pub window: usize,
    pub context: DialogueContext,
    pub start: usize,
    pub end: usize,
    pub answer_type: AnswerType,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub paragraphs: Vec<PreparedParagraph>,
    pub examples: Vec<TrainExample>,
    /// Turns without a usable gold span.
    pub skipped_turns: usize,
    /// Windows that do not contain the gold span.
    pub skipped_windows: usize,
}

/// Builds gold-history examples for every turn and every window that holds
/// its gold span. Non-span turns without a span target token 0 of the
/// first window.
pub fn build_training_set(
    corpus: &Corpus,
    vocab: &Vocabulary,
    packing: &PackingConfig,
    k: usize,
    flags: HistoryFlags,
) -> Result<TrainingSet> {
    let mut set = TrainingSet {
        paragraphs: Vec::with_capacity(corpus.dialogues.len()),
        examples: Vec::new(),
        skipped_turns: 0,
        skipped_windows: 0,
    };
    let empty = PredictionStore::new();
    for dialogue in &corpus.dialogues {
        let prepared = PreparedParagraph::new(&dialogue.paragraph, vocab, packing, corpus.mode)?;
        let pi = set.paragraphs.len();
        for (ti, turn) in dialogue.turns.iter().enumerate() {
            let gold = match turn.span {
                Some((b, e)) => prepared.token_span(b, e),
                None if turn.answer_type != AnswerType::Span => Some((0, 0)),
                None => None,
            };
            let Some((s, e)) = gold else {
                set.skipped_turns += 1;
                continue;
            };
            let context = build_context(dialogue, ti + 1, k, HistoryMode::Gold, &empty, flags)?;
            for (wi, w) in prepared.windows.iter().enumerate() {
                if w.contains(s) && w.contains(e) {
                    set.examples.push(TrainExample {
                        paragraph: pi,
                        window: wi,
                        context: context.clone(),
                        start: s - w.origin,
                        end: e - w.origin,
                        answer_type: turn.answer_type,
                    });
                } else {
                    set.skipped_windows += 1;
                }
            }
        }
        set.paragraphs.push(prepared);
    }
    Ok(set)
}

/// One answered question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Final answer after type substitution.
    pub answer: String,
    pub answer_type: AnswerType,
    /// Paragraph text under the decoded span.
    pub span_text: String,
    /// Global token indices.
    pub start_token: usize,
    pub end_token: usize,
    /// Char offsets `[start, end)` of the span in the paragraph.
    pub char_start: usize,
    pub char_end: usize,
    pub score: f64,
    pub window: usize,
}

/// A trained model ready for inference.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: CmcModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub mode: DatasetMode,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        Ok(Self {
            model,
            store: ckpt.store,
            vocab: ckpt.meta.vocab,
            mode: ckpt.meta.mode,
        })
    }

    pub fn k(&self) -> usize {
        self.model.config().cmc.k
    }

    pub fn prepare(&self, paragraph: &str) -> Result<PreparedParagraph> {
        PreparedParagraph::new(paragraph, &self.vocab, &self.model.config().packing, self.mode)
    }

    /// Decodes every window, keeps the best-scoring one and finalizes it.
    pub fn predict(&self, paragraph: &PreparedParagraph, ctx: &DialogueContext) -> Result<Prediction> {
        let max_len = self.model.config().cmc.max_answer_len;
        let mut per_window = Vec::with_capacity(paragraph.windows.len());
        for (wi, window) in paragraph.windows.iter().enumerate() {
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let fwd = self.model.forward(
                &mut g,
                Theta::Shared(&p),
                &self.vocab,
                ctx,
                window,
                &mut ForwardMode::Inference,
            )?;
            let dist = self.model.distributions(&mut g, &p, &fwd, window.origin, None)?;
            let span = dp_best_span(&dist.p_start, &dist.p_end, max_len)?;
            let answer_type = if self.mode.uses_type_head() {
                argmax_type(&self.model.type_distribution(&mut g, &p, fwd.end_input, span.1)?)
            } else {
                AnswerType::Span
            };
            per_window.push(DecodedAnswer::from_window(wi, window.origin, span, answer_type));
        }
        let mut best = aggregate_windows(per_window)?;
        let align = &paragraph.tokens.alignment;
        let b = align.spans[best.start].begin;
        let e = align.spans[best.end].end;
        best.text = paragraph.text[b..e].to_string();
        let covers_sentinel = paragraph.sentinel.is_some_and(|s| e > s);
        let (answer, answer_type) = finalize(best.answer_type, &best.text, covers_sentinel, self.mode);
        Ok(Prediction {
            answer,
            answer_type,
            span_text: best.text,
            start_token: best.start,
            end_token: best.end,
            char_start: byte_to_char(&paragraph.text, b).expect("token boundary"),
            char_end: byte_to_char(&paragraph.text, e).expect("token boundary"),
            score: best.score,
            window: best.window_index,
        })
    }
}

/// Widens a `k'`-slot context to the model's `k` slots with empty slots.
fn pad_context(mut ctx: DialogueContext, k: usize) -> DialogueContext {
    ctx.prev_questions.resize(k, None);
    ctx.prev_answers.resize(k, None);
    ctx
}

fn check_history_limit(limit: Option<usize>, model_k: usize) -> Result<usize> {
    match limit {
        Some(n) if n > model_k => Err(Error::Config(format!(
            "history limit {n} exceeds the model's k = {model_k}"
        ))),
        Some(n) => Ok(n),
        None => Ok(model_k),
    }
}

/// A live dialogue over one paragraph whose history is the model's own
/// earlier answers.
#[derive(Clone, Debug)]
pub struct DialogueState {
    dialogue: Dialogue,
    paragraph: PreparedParagraph,
    answers: PredictionStore,
    history_limit: usize,
    flags: HistoryFlags,
    log: Vec<(String, Prediction)>,
}

impl DialogueState {
    /// `history_limit` (at most the model's k) caps how many previous
    /// turns are filled in.
    pub fn new(
        predictor: &Predictor,
        id: impl Into<String>,
        paragraph: &str,
        history_limit: Option<usize>,
        flags: HistoryFlags,
    ) -> Result<Self> {
        let history_limit = check_history_limit(history_limit, predictor.k())?;
        let prepared = predictor.prepare(paragraph)?;
        Ok(Self {
            dialogue: Dialogue {
                id: id.into(),
                domain: String::new(),
                paragraph: prepared.text.clone(),
                turns: Vec::new(),
            },
            paragraph: prepared,
            answers: PredictionStore::new(),
            history_limit,
            flags,
            log: Vec::new(),
        })
    }

    pub fn paragraph(&self) -> &PreparedParagraph {
        &self.paragraph
    }

    pub fn history(&self) -> &[(String, Prediction)] {
        &self.log
    }

    pub fn history_limit(&self) -> usize {
        self.history_limit
    }

    /// Context the next question would see.
    pub fn next_context(&self, predictor: &Predictor, question: &str) -> Result<DialogueContext> {
        let mut dialogue = self.dialogue.clone();
        dialogue.turns.push(question_turn(question));
        let turn = dialogue.turns.len();
        let ctx = build_context(
            &dialogue,
            turn,
            self.history_limit,
            HistoryMode::Predicted,
            &self.answers,
            self.flags,
        )?;
        Ok(pad_context(ctx, predictor.k()))
    }

    pub fn ask(&mut self, predictor: &Predictor, question: &str) -> Result<Prediction> {
        let ctx = self.next_context(predictor, question)?;
        let prediction = predictor.predict(&self.paragraph, &ctx)?;
        self.dialogue.turns.push(question_turn(question));
        let turn = self.dialogue.turns.len();
        self.answers.record(&self.dialogue.id, turn, prediction.answer.clone())?;
        self.log.push((question.to_string(), prediction.clone()));
        Ok(prediction)
    }
}

fn question_turn(question: &str) -> Turn {
    Turn {
        question: question.to_string(),
        answers: vec![String::new()],
        span: None,
        answer_type: AnswerType::Span,
        human_f1: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub history: HistoryMode,
    /// Use only the `n` most recent turns (at most the model's k).
    pub history_limit: Option<usize>,
    pub flags: HistoryFlags,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            history: HistoryMode::Gold,
            history_limit: None,
            flags: HistoryFlags::default(),
        }
    }
}

/// Answers every turn of a dialogue in order.
pub fn predict_dialogue(predictor: &Predictor, dialogue: &Dialogue, opts: &EvalOptions) -> Result<Vec<Prediction>> {
    match opts.history {
        HistoryMode::Predicted => {
            let mut state = DialogueState::new(
                predictor,
                dialogue.id.clone(),
                &dialogue.paragraph,
                opts.history_limit,
                opts.flags,
            )?;
            dialogue
                .turns
                .iter()
                .map(|t| state.ask(predictor, &t.question))
                .collect()
        }
        HistoryMode::Gold => {
            let limit = check_history_limit(opts.history_limit, predictor.k())?;
            let prepared = predictor.prepare(&dialogue.paragraph)?;
            let empty = PredictionStore::new();
            (1..=dialogue.turns.len())
                .map(|turn| {
                    let ctx = build_context(dialogue, turn, limit, HistoryMode::Gold, &empty, opts.flags)?;
                    predictor.predict(&prepared, &pad_context(ctx, predictor.k()))
                })
                .collect()
        }
    }
}

/// Predictions and scored records for a whole corpus.
pub fn evaluate(
    predictor: &Predictor,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<(Vec<PredictionLine>, Vec<EvalRecord>)> {
    let mut lines = Vec::with_capacity(corpus.num_questions());
    let mut records = Vec::with_capacity(corpus.num_questions());
    for dialogue in &corpus.dialogues {
        let predictions = predict_dialogue(predictor, dialogue, opts)?;
        for (i, (turn, p)) in dialogue.turns.iter().zip(predictions).enumerate() {
            let mut record = EvalRecord::score(
                dialogue.id.clone(),
                i + 1,
                p.answer.clone(),
                turn.answers.clone(),
                dialogue.domain.clone(),
            )?;
            record.human_f1 = turn.human_f1;
            records.push(record);
            lines.push(PredictionLine {
                dialogue_id: dialogue.id.clone(),
                turn: i + 1,
                answer: p.answer,
                answer_type: p.answer_type,
            });
        }
    }
    Ok((lines, records))
}
