//! History-conditioned span model.
//!
//! For a turn `i` with `k` history slots the paragraph window is encoded
//! `2k + 1` times with the same encoder weights: against the current
//! question, each previous question, and each previous answer text. The
//! paragraph features are stacked row-wise into `G` (`(2k+1)d x T`), fed
//! through two stacked BiGRUs, and projected to start, end and answer-type
//! distributions.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{linear, lookup, register, Encoder, EncoderConfig, ForwardMode, Init};
use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, ParamId, ParamStore, ParamVars, Tensor, Var};
use crate::tokenizer::{PackingConfig, PassageWindow, Vocabulary};

pub const NUM_ANSWER_TYPES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerType {
    Span,
    Yes,
    No,
    Unanswerable,
}

impl AnswerType {
    pub const ALL: [AnswerType; NUM_ANSWER_TYPES] = [
        AnswerType::Span,
        AnswerType::Yes,
        AnswerType::No,
        AnswerType::Unanswerable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnswerType::Span => "SPAN",
            AnswerType::Yes => "YES",
            AnswerType::No => "NO",
            AnswerType::Unanswerable => "UNANSWERABLE",
        };
        f.write_str(s)
    }
}

/// Dataset convention for non-span answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// Four-way type head; non-span types replace the span text.
    Coqa,
    /// No type head; unanswerable is a span over an appended sentinel token.
    Quac,
}

impl DatasetMode {
    pub fn uses_type_head(self) -> bool {
        self == DatasetMode::Coqa
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coqa" => Ok(DatasetMode::Coqa),
            "quac" => Ok(DatasetMode::Quac),
            other => Err(Error::Config(format!("unknown dataset mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcConfig {
    /// Number of history turns.
    pub k: usize,
    pub use_question_history: bool,
    pub use_answer_history: bool,
    pub max_answer_len: usize,
}

impl Default for CmcConfig {
    fn default() -> Self {
        Self {
            k: 2,
            use_question_history: true,
            use_answer_history: true,
            max_answer_len: 30,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cmc: CmcConfig,
    pub packing: PackingConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(Some(&self.packing))?;
        self.packing.validate()?;
        if self.cmc.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be positive".into()));
        }
        Ok(())
    }

    /// Rows of `[G; M]`: `(2k + 3) d`.
    pub fn projection_rows(&self) -> usize {
        (2 * self.cmc.k + 3) * self.encoder.hidden
    }
}

/// The current question and `k` history slots; `None` marks a turn that
/// does not exist (or has been ablated away).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub question: String,
    /// `Q_{i-1}, ..., Q_{i-k}`
    pub prev_questions: Vec<Option<String>>,
    /// `A_{i-1}, ..., A_{i-k}`
    pub prev_answers: Vec<Option<String>>,
    /// 1-based turn index.
    pub turn: usize,
}

impl DialogueContext {
    /// A context with every history slot empty.
    pub fn first_turn(question: impl Into<String>, k: usize) -> Self {
        Self {
            question: question.into(),
            prev_questions: vec![None; k],
            prev_answers: vec![None; k],
            turn: 1,
        }
    }

    pub fn k(&self) -> usize {
        self.prev_questions.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.prev_questions.len() != k || self.prev_answers.len() != k {
            return Err(Error::Config(format!(
                "context has {} question and {} answer slots, model expects {k}",
                self.prev_questions.len(),
                self.prev_answers.len()
            )));
        }
        Ok(())
    }

    /// Query text for encoder pass `pass` (0 = current question,
    /// `1..=k` = previous questions, `k+1..=2k` = previous answers).
    fn pass_query(&self, pass: usize, cfg: &CmcConfig) -> Option<&str> {
        let k = self.k();
        if pass == 0 {
            Some(&self.question)
        } else if pass <= k {
            if !cfg.use_question_history {
                return None;
            }
            self.prev_questions[pass - 1].as_deref()
        } else {
            if !cfg.use_answer_history {
                return None;
            }
            self.prev_answers[pass - k - 1].as_deref()
        }
    }
}

/// Which encoder weights each of the `2k + 1` passes reads.
#[derive(Clone, Copy)]
pub enum Theta<'a> {
    /// One binding for every pass and for the heads.
    Shared(&'a ParamVars),
    /// A separate binding per pass; the first one also serves the heads.
    PerPass(&'a [ParamVars]),
}

impl<'a> Theta<'a> {
    fn pass(&self, i: usize) -> &'a ParamVars {
        match self {
            Theta::Shared(p) => p,
            Theta::PerPass(ps) => &ps[i],
        }
    }

    fn heads(&self) -> &'a ParamVars {
        self.pass(0)
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    w_x: ParamId,
    u_zr: ParamId,
    u_n: ParamId,
    bias: ParamId,
}

/// Bidirectional GRU over the token axis of an `r x T` input, producing
/// `2h x T` (forward states stacked over backward states).
#[derive(Clone, Debug)]
pub struct BiGru {
    hidden: usize,
    input: usize,
    forward: GruDirection,
    backward: GruDirection,
}

impl BiGru {
    fn specs(input: usize, hidden: usize) -> [(&'static str, usize, usize, Init); 4] {
        [
            ("w_x", 3 * hidden, input, Init::Fan(input)),
            ("u_zr", 2 * hidden, hidden, Init::Fan(hidden)),
            ("u_n", hidden, hidden, Init::Fan(hidden)),
            ("bias", 3 * hidden, 1, Init::Zero),
        ]
    }

    pub fn init(
        prefix: &str,
        input: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut dir = |d: &str| {
            let ids: Vec<ParamId> = Self::specs(input, hidden)
                .into_iter()
                .map(|(n, r, c, init)| register(store, format!("{prefix}.{d}.{n}"), r, c, init, rng))
                .collect();
            GruDirection {
                w_x: ids[0],
                u_zr: ids[1],
                u_n: ids[2],
                bias: ids[3],
            }
        };
        let forward = dir("fwd");
        let backward = dir("bwd");
        Self {
            hidden,
            input,
            forward,
            backward,
        }
    }

    pub fn from_store(prefix: &str, input: usize, hidden: usize, store: &ParamStore) -> Result<Self> {
        let dir = |d: &str| -> Result<GruDirection> {
            let ids = Self::specs(input, hidden)
                .into_iter()
                .map(|(n, r, c, _)| lookup(store, &format!("{prefix}.{d}.{n}"), r, c))
                .collect::<Result<Vec<_>>>()?;
            Ok(GruDirection {
                w_x: ids[0],
                u_zr: ids[1],
                u_n: ids[2],
                bias: ids[3],
            })
        };
        Ok(Self {
            hidden,
            input,
            forward: dir("fwd")?,
            backward: dir("bwd")?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, input: Var) -> Result<Var> {
        let t_len = g.value(input).cols();
        if t_len == 0 {
            return Err(Error::Config("BiGRU over zero tokens".into()));
        }
        if g.value(input).rows() != self.input {
            return Err(Error::Config(format!(
                "BiGRU expects {} input rows, got {}",
                self.input,
                g.value(input).rows()
            )));
        }
        let order: Vec<usize> = (0..t_len).collect();
        let fwd = self.run(g, p, &self.forward, input, &order)?;
        let rev: Vec<usize> = (0..t_len).rev().collect();
        let mut bwd = self.run(g, p, &self.backward, input, &rev)?;
        bwd.reverse();
        let f = g.concat_cols(&fwd)?;
        let b = g.concat_cols(&bwd)?;
        Ok(g.concat_rows(&[f, b])?)
    }

    /// Hidden states in visiting order.
    fn run(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        dir: &GruDirection,
        input: Var,
        order: &[usize],
    ) -> Result<Vec<Var>> {
        let h_dim = self.hidden;
        let projected = linear(g, p, dir.w_x, dir.bias, input)?;
        let mut h = g.constant(Tensor::zeros(h_dim, 1));
        let mut states = Vec::with_capacity(order.len());
        for &t in order {
            let x_t = g.select_cols(projected, &[t])?;
            let x_zr = g.slice_rows(x_t, 0, 2 * h_dim)?;
            let x_n = g.slice_rows(x_t, 2 * h_dim, 3 * h_dim)?;
            let u_zr = g.matmul(p.var(dir.u_zr), h)?;
            let zr = g.add(x_zr, u_zr)?;
            let zr = g.sigmoid(zr)?;
            let z = g.slice_rows(zr, 0, h_dim)?;
            let r = g.slice_rows(zr, h_dim, 2 * h_dim)?;
            let rh = g.mul(r, h)?;
            let u_n = g.matmul(p.var(dir.u_n), rh)?;
            let n = g.add(x_n, u_n)?;
            let n = g.tanh(n)?;
            // h' = h + z * (n - h)
            let neg_h = g.scale(h, -1.0)?;
            let diff = g.add(n, neg_h)?;
            let step = g.mul(z, diff)?;
            h = g.add(h, step)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Intermediate values of one forward pass over one window.
#[derive(Clone, Copy, Debug)]
pub struct SpanForward {
    /// `(2k+1)d x T`
    pub g_matrix: Var,
    /// `2d x T`
    pub m1: Var,
    /// `2d x T`
    pub m2: Var,
    /// `[G; M1]`, `(2k+3)d x T`
    pub start_input: Var,
    /// `[G; M2]`, `(2k+3)d x T`
    pub end_input: Var,
    /// `1 x T`
    pub start_logits: Var,
    /// `1 x T`
    pub end_logits: Var,
}

/// Probability vectors produced for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanLogits {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    /// Present when the type head ran.
    pub p_type: Option<[f64; NUM_ANSWER_TYPES]>,
    pub window_origin: usize,
}

#[derive(Clone, Debug)]
pub struct CmcModel {
    cfg: ModelConfig,
    encoder: Encoder,
    gru1: BiGru,
    gru2: BiGru,
    w_start: ParamId,
    b_start: ParamId,
    w_end: ParamId,
    b_end: ParamId,
    w_type: ParamId,
    b_type: ParamId,
}

impl CmcModel {
    pub fn init(cfg: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(cfg.encoder, store, rng)?;
        let d = cfg.encoder.hidden;
        let g_rows = (2 * cfg.cmc.k + 1) * d;
        let proj = cfg.projection_rows();
        let gru1 = BiGru::init("gru1", g_rows, d, store, rng);
        let gru2 = BiGru::init("gru2", 2 * d, d, store, rng);
        let mut reg = |name: &str, r, c, init| register(store, name.to_string(), r, c, init, rng);
        let w_start = reg("head.start.w", 1, proj, Init::Fan(proj));
        let b_start = reg("head.start.b", 1, 1, Init::Zero);
        let w_end = reg("head.end.w", 1, proj, Init::Fan(proj));
        let b_end = reg("head.end.b", 1, 1, Init::Zero);
        let w_type = reg("head.type.w", NUM_ANSWER_TYPES, proj, Init::Fan(proj));
        let b_type = reg("head.type.b", NUM_ANSWER_TYPES, 1, Init::Zero);
        Ok(Self {
            cfg,
            encoder,
            gru1,
            gru2,
            w_start,
            b_start,
            w_end,
            b_end,
            w_type,
            b_type,
        })
    }

    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::from_store(cfg.encoder, store)?;
        let d = cfg.encoder.hidden;
        let g_rows = (2 * cfg.cmc.k + 1) * d;
        let proj = cfg.projection_rows();
        Ok(Self {
            cfg,
            encoder,
            gru1: BiGru::from_store("gru1", g_rows, d, store)?,
            gru2: BiGru::from_store("gru2", 2 * d, d, store)?,
            w_start: lookup(store, "head.start.w", 1, proj)?,
            b_start: lookup(store, "head.start.b", 1, 1)?,
            w_end: lookup(store, "head.end.w", 1, proj)?,
            b_end: lookup(store, "head.end.b", 1, 1)?,
            w_type: lookup(store, "head.type.w", NUM_ANSWER_TYPES, proj)?,
            b_type: lookup(store, "head.type.b", NUM_ANSWER_TYPES, 1)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Toggles history ablation flags; parameter shapes are unaffected.
    pub fn set_history_flags(&mut self, use_questions: bool, use_answers: bool) {
        self.cfg.cmc.use_question_history = use_questions;
        self.cfg.cmc.use_answer_history = use_answers;
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head_params(&self) -> [ParamId; 6] {
        [
            self.w_start,
            self.b_start,
            self.w_end,
            self.b_end,
            self.w_type,
            self.b_type,
        ]
    }

    /// `G = [O_i; O_{i-1}; ...; O_{i-k}; R_{i-1}; ...; R_{i-k}]`. Missing or
    /// ablated slots contribute zero blocks and skip their encoder pass.
    pub fn build_g(
        &self,
        g: &mut Graph,
        theta: Theta<'_>,
        vocab: &Vocabulary,
        ctx: &DialogueContext,
        window: &PassageWindow,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        let k = self.cfg.cmc.k;
        ctx.validate(k)?;
        if window.is_empty() {
            return Err(Error::Index("empty passage window".into()));
        }
        let d = self.cfg.encoder.hidden;
        let mut blocks = Vec::with_capacity(2 * k + 1);
        let mut zero_block = None;
        for pass in 0..=2 * k {
            let block = match ctx.pass_query(pass, &self.cfg.cmc) {
                Some(query) => self.encoder.encode_pair(
                    g,
                    theta.pass(pass),
                    vocab,
                    &self.cfg.packing,
                    query,
                    window,
                    mode,
                )?,
                None => *zero_block.get_or_insert_with(|| g.constant(Tensor::zeros(d, window.len()))),
            };
            blocks.push(block);
        }
        Ok(g.concat_rows(&blocks)?)
    }

    /// Start logits `w1^T [G; M1] + b1` (`1 x T`).
    pub fn start_logits(&self, g: &mut Graph, p: &ParamVars, start_input: Var) -> Result<Var> {
        self.check_projection_rows(g, start_input)?;
        linear(g, p, self.w_start, self.b_start, start_input)
    }

    /// End logits `w2^T [G; M2] + b2` (`1 x T`).
    pub fn end_logits(&self, g: &mut Graph, p: &ParamVars, end_input: Var) -> Result<Var> {
        self.check_projection_rows(g, end_input)?;
        linear(g, p, self.w_end, self.b_end, end_input)
    }

    fn check_projection_rows(&self, g: &Graph, x: Var) -> Result<()> {
        let rows = g.value(x).rows();
        if rows != self.cfg.projection_rows() {
            return Err(Error::Config(format!(
                "projection input has {rows} rows, expected {}",
                self.cfg.projection_rows()
            )));
        }
        Ok(())
    }

    /// Forward pass up to start and end logits for one window.
    pub fn forward(
        &self,
        g: &mut Graph,
        theta: Theta<'_>,
        vocab: &Vocabulary,
        ctx: &DialogueContext,
        window: &PassageWindow,
        mode: &mut ForwardMode<'_>,
    ) -> Result<SpanForward> {
        let g_matrix = self.build_g(g, theta, vocab, ctx, window, mode)?;
        let p = theta.heads();
        let m1 = self.gru1.forward(g, p, g_matrix)?;
        let m2 = self.gru2.forward(g, p, m1)?;
        let start_input = g.concat_rows(&[g_matrix, m1])?;
        let end_input = g.concat_rows(&[g_matrix, m2])?;
        let start_logits = self.start_logits(g, p, start_input)?;
        let end_logits = self.end_logits(g, p, end_input)?;
        Ok(SpanForward {
            g_matrix,
            m1,
            m2,
            start_input,
            end_input,
            start_logits,
            end_logits,
        })
    }

    /// Four-way answer-type logits from column `end_index` of `[G; M2]`.
    pub fn type_logits(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        end_input: Var,
        end_index: usize,
    ) -> Result<Var> {
        self.check_projection_rows(g, end_input)?;
        let t_len = g.value(end_input).cols();
        if end_index >= t_len {
            return Err(Error::Index(format!(
                "end index {end_index} outside window of {t_len} tokens"
            )));
        }
        let column = g.select_cols(end_input, &[end_index])?;
        linear(g, p, self.w_type, self.b_type, column)
    }

    /// Softmax over the four answer types at column `end_index`.
    pub fn type_distribution(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        end_input: Var,
        end_index: usize,
    ) -> Result<[f64; NUM_ANSWER_TYPES]> {
        let logits = self.type_logits(g, p, end_input, end_index)?;
        let probs = g.softmax(logits, Axis::Rows)?;
        let v = g.value(probs).data();
        Ok([v[0], v[1], v[2], v[3]])
    }

    /// Runs the heads in inference mode and returns plain distributions.
    /// The type head (when requested) reads the DP-decoded end index, which
    /// the caller provides through `end_for_type`.
    pub fn distributions(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        fwd: &SpanForward,
        window_origin: usize,
        end_for_type: Option<usize>,
    ) -> Result<SpanLogits> {
        let ps = g.softmax(fwd.start_logits, Axis::Cols)?;
        let pe = g.softmax(fwd.end_logits, Axis::Cols)?;
        let p_type = match end_for_type {
            Some(e) => Some(self.type_distribution(g, p, fwd.end_input, e)?),
            None => None,
        };
        Ok(SpanLogits {
            p_start: g.value(ps).data().to_vec(),
            p_end: g.value(pe).data().to_vec(),
            p_type,
            window_origin,
        })
    }
}

/// One training example's view of the graph for the loss.
#[derive(Clone, Copy, Debug)]
pub struct LossItem {
    pub start_logits: Var,
    pub end_logits: Var,
    /// `4 x 1` type logits, read only when the type loss is enabled.
    pub type_logits: Option<Var>,
    pub gold_start: usize,
    pub gold_end: usize,
    pub gold_type: AnswerType,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    /// `None` when every item was skipped.
    pub loss: Option<Var>,
    pub used: usize,
    pub skipped: usize,
}

/// Mean over items of `-(log p_start[gold_start] + log p_end[gold_end])`,
/// plus the mean answer-type cross-entropy when `type_loss` is set. Items
/// whose gold indices fall outside their window are skipped and counted.
pub fn loss(g: &mut Graph, items: &[LossItem], type_loss: bool) -> Result<LossOutput> {
    let mut terms = Vec::with_capacity(items.len());
    let mut skipped = 0;
    for item in items {
        let t_len = g.value(item.start_logits).cols();
        if item.gold_start >= t_len || item.gold_end >= t_len || item.gold_start > item.gold_end {
            skipped += 1;
            continue;
        }
        let ls = g.log_softmax(item.start_logits, Axis::Cols)?;
        let le = g.log_softmax(item.end_logits, Axis::Cols)?;
        let s = g.pick(ls, 0, item.gold_start)?;
        let e = g.pick(le, 0, item.gold_end)?;
        let mut total = g.add(s, e)?;
        if type_loss {
            let logits = item.type_logits.ok_or_else(|| {
                Error::Config("type loss enabled but no type logits supplied".into())
            })?;
            let lt = g.log_softmax(logits, Axis::Rows)?;
            let t = g.pick(lt, item.gold_type.index(), 0)?;
            total = g.add(total, t)?;
        }
        terms.push(total);
    }
    if skipped > 0 {
        log::debug!("loss: skipped {skipped} items with gold outside the window");
    }
    if terms.is_empty() {
        return Ok(LossOutput {
            loss: None,
            used: 0,
            skipped,
        });
    }
    let stacked = g.concat_cols(&terms)?;
    let mean = g.mean(stacked)?;
    let neg = g.scale(mean, -1.0)?;
    Ok(LossOutput {
        loss: Some(neg),
        used: terms.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    pub(crate) fn tiny_config(vocab: usize, k: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocab,
                hidden,
                layers: 1,
                heads: 2,
                ff_dim: 2 * hidden,
                max_positions: 64,
                dropout: 0.0,
            },
            cmc: CmcConfig {
                k,
                ..CmcConfig::default()
            },
            packing: PackingConfig {
                max_seq_len: 64,
                max_query_len: 16,
                doc_stride: 16,
            },
        }
    }

    fn setup(k: usize, hidden: usize) -> (CmcModel, ParamStore, Vocabulary, PassageWindow) {
        let vocab = Vocabulary::build(
            ["alice lives in paris . bob owns a red car . who lives where ? what does he own ? paris red"],
            1,
            200,
            &[],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let model = CmcModel::init(tiny_config(vocab.len(), k, hidden), &mut store, &mut rng).unwrap();
        let passage = tokenize("alice lives in paris . bob owns a red car", &vocab);
        let window = PassageWindow {
            origin: 0,
            ids: passage.ids,
        };
        (model, store, vocab, window)
    }

    fn ctx(k: usize, answer: &str) -> DialogueContext {
        let mut c = DialogueContext::first_turn("what does he own ?", k);
        c.turn = k + 1;
        for l in 0..k {
            c.prev_questions[l] = Some("who lives where ?".into());
            c.prev_answers[l] = Some(answer.into());
        }
        c
    }

    #[test]
    fn shape_ladder() {
        for k in 0..=3 {
            let (model, store, vocab, window) = setup(k, 8);
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let f = model
                .forward(&mut g, Theta::Shared(&p), &vocab, &ctx(k, "paris"), &window, &mut ForwardMode::Inference)
                .unwrap();
            let t = window.len();
            assert_eq!(g.value(f.g_matrix).shape(), [(2 * k + 1) * 8, t]);
            assert_eq!(g.value(f.m1).shape(), [16, t]);
            assert_eq!(g.value(f.m2).shape(), [16, t]);
            assert_eq!(g.value(f.start_input).shape(), [(2 * k + 3) * 8, t]);
            assert_eq!(g.value(f.end_input).shape(), [(2 * k + 3) * 8, t]);
            assert_eq!(g.value(f.start_logits).shape(), [1, t]);
        }
        assert_eq!(setup(2, 16).0.config().projection_rows(), 112);
    }

    #[test]
    fn first_turn_history_blocks_are_zero() {
        let (model, store, vocab, window) = setup(2, 16);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let c = DialogueContext::first_turn("who lives where ?", 2);
        let gm = model
            .build_g(&mut g, Theta::Shared(&p), &vocab, &c, &window, &mut ForwardMode::Inference)
            .unwrap();
        let v = g.value(gm);
        assert_eq!(v.shape(), [80, window.len()]);
        assert!(v.slice_rows(16, 80).data().iter().all(|x| *x == 0.0));
        assert!(v.slice_rows(0, 16).data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn context_slot_count_is_checked() {
        let (model, store, vocab, window) = setup(2, 8);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let c = DialogueContext::first_turn("q", 1);
        assert!(model
            .build_g(&mut g, Theta::Shared(&p), &vocab, &c, &window, &mut ForwardMode::Inference)
            .is_err());
    }

    fn bigru_fixture(input: usize, hidden: usize) -> (BiGru, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gru = BiGru::init("gru", input, hidden, &mut store, &mut rng);
        (gru, store)
    }

    #[test]
    fn bigru_shapes_and_zero_fixed_point() {
        let (gru, store) = bigru_fixture(5, 3);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        for t in [1, 4] {
            let x = g.constant(Tensor::zeros(5, t));
            let y = gru.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.value(y).shape(), [6, t]);
            assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        }
        let empty = g.constant(Tensor::zeros(5, 0));
        assert!(gru.forward(&mut g, &p, empty).is_err());
        let wrong = g.constant(Tensor::zeros(4, 2));
        assert!(gru.forward(&mut g, &p, wrong).is_err());
    }

    #[test]
    fn bigru_single_step_both_directions_see_same_input() {
        // With identical direction weights, T = 1 gives identical halves.
        let (gru, mut store) = bigru_fixture(3, 2);
        for n in ["w_x", "u_zr", "u_n", "bias"] {
            let f = store.get(store.id(&format!("gru.fwd.{n}")).unwrap()).clone();
            let b = store.id(&format!("gru.bwd.{n}")).unwrap();
            *store.value_mut(b) = f;
        }
        let bias = store.id("gru.fwd.bias").unwrap();
        store.value_mut(bias).data_mut().iter_mut().for_each(|v| *v = 0.3);
        let bias = store.id("gru.bwd.bias").unwrap();
        store.value_mut(bias).data_mut().iter_mut().for_each(|v| *v = 0.3);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_rows(&[&[0.5], &[-1.0], &[2.0]]));
        let y = gru.forward(&mut g, &p, x).unwrap();
        let v = g.value(y);
        assert_eq!(v.slice_rows(0, 2), v.slice_rows(2, 4));
        assert!(v.data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn bigru_matches_hand_recurrence() {
        let (gru, store) = bigru_fixture(2, 2);
        let x = Tensor::from_rows(&[&[0.3, -0.2, 0.9], &[1.0, 0.5, -0.4]]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = gru.forward(&mut g, &p, xv).unwrap();

        let get = |n: &str| store.get(store.id(&format!("gru.fwd.{n}")).unwrap()).clone();
        let (wx, uzr, un, b) = (get("w_x"), get("u_zr"), get("u_n"), get("bias"));
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = [0.0f64; 2];
        for t in 0..3 {
            let xt = [x.get(0, t), x.get(1, t)];
            let pre = |row: usize| b.get(row, 0) + wx.get(row, 0) * xt[0] + wx.get(row, 1) * xt[1];
            let uz = |row: usize| uzr.get(row, 0) * h[0] + uzr.get(row, 1) * h[1];
            let z = [sig(pre(0) + uz(0)), sig(pre(1) + uz(1))];
            let r = [sig(pre(2) + uz(2)), sig(pre(3) + uz(3))];
            let rh = [r[0] * h[0], r[1] * h[1]];
            let n = [
                (pre(4) + un.get(0, 0) * rh[0] + un.get(0, 1) * rh[1]).tanh(),
                (pre(5) + un.get(1, 0) * rh[0] + un.get(1, 1) * rh[1]).tanh(),
            ];
            h = [(1.0 - z[0]) * h[0] + z[0] * n[0], (1.0 - z[1]) * h[1] + z[1] * n[1]];
            assert_abs_diff_eq!(g.value(y).get(0, t), h[0], epsilon = 1e-14);
            assert_abs_diff_eq!(g.value(y).get(1, t), h[1], epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_heads_give_uniform_distributions() {
        let (model, mut store, vocab, window) = setup(1, 8);
        for id in model.head_params() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = model
            .forward(&mut g, Theta::Shared(&p), &vocab, &ctx(1, "paris"), &window, &mut ForwardMode::Inference)
            .unwrap();
        let d = model.distributions(&mut g, &p, &f, 0, Some(2)).unwrap();
        let t = window.len() as f64;
        for v in d.p_start.iter().chain(&d.p_end) {
            assert_abs_diff_eq!(*v, 1.0 / t, epsilon = 1e-15);
        }
        for v in d.p_type.unwrap() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn distributions_normalize_and_type_depends_on_end() {
        let (model, store, vocab, window) = setup(1, 8);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = model
            .forward(&mut g, Theta::Shared(&p), &vocab, &ctx(1, "paris"), &window, &mut ForwardMode::Inference)
            .unwrap();
        let a = model.distributions(&mut g, &p, &f, 0, Some(1)).unwrap();
        let b = model.distributions(&mut g, &p, &f, 0, Some(6)).unwrap();
        assert_abs_diff_eq!(a.p_start.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.p_end.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.p_type.unwrap().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let (ta, tb) = (a.p_type.unwrap(), b.p_type.unwrap());
        assert!(ta.iter().zip(&tb).any(|(x, y)| (x - y).abs() > 1e-9));
        assert!(model
            .type_logits(&mut g, &p, f.end_input, window.len())
            .is_err());
    }

    #[test]
    fn history_sensitivity() {
        for k in [0, 1] {
            let (model, store, vocab, window) = setup(k, 8);
            let run = |answer: &str| {
                let mut g = Graph::new();
                let p = store.bind_frozen(&mut g);
                let f = model
                    .forward(&mut g, Theta::Shared(&p), &vocab, &ctx(k, answer), &window, &mut ForwardMode::Inference)
                    .unwrap();
                model.distributions(&mut g, &p, &f, 0, None).unwrap().p_start
            };
            let (a, b) = (run("paris"), run("a red car"));
            let delta = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if k == 0 {
                assert_eq!(a, b);
            } else {
                assert!(delta > 0.0);
            }
        }
    }

    #[test]
    fn ablation_flags_equal_null_slots() {
        let (mut model, store, vocab, window) = setup(2, 8);
        let full = ctx(2, "paris");
        let run = |model: &CmcModel, c: &DialogueContext| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let f = model
                .forward(&mut g, Theta::Shared(&p), &vocab, c, &window, &mut ForwardMode::Inference)
                .unwrap();
            model.distributions(&mut g, &p, &f, 0, Some(0)).unwrap()
        };
        let mut no_answers = full.clone();
        no_answers.prev_answers = vec![None; 2];
        let mut no_questions = full.clone();
        no_questions.prev_questions = vec![None; 2];

        model.set_history_flags(true, false);
        assert_eq!(run(&model, &full), run(&model, &no_answers));
        model.set_history_flags(false, true);
        let flagged = run(&model, &full);
        model.set_history_flags(true, true);
        assert_eq!(flagged, run(&model, &no_questions));
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        // Mass ~1 on gold via huge logit margin.
        let mut logits = Tensor::filled(1, 5, -800.0);
        logits.set(0, 2, 0.0);
        let s = g.constant(logits.clone());
        let item = LossItem {
            start_logits: s,
            end_logits: s,
            type_logits: None,
            gold_start: 2,
            gold_end: 2,
            gold_type: AnswerType::Span,
        };
        let out = loss(&mut g, &[item], false).unwrap();
        assert_eq!(g.value(out.loss.unwrap()).item().unwrap(), 0.0);

        let u = g.constant(Tensor::zeros(1, 10));
        let uniform = LossItem {
            start_logits: u,
            end_logits: u,
            gold_start: 3,
            gold_end: 7,
            ..item
        };
        let out = loss(&mut g, &[uniform], false).unwrap();
        assert_abs_diff_eq!(
            g.value(out.loss.unwrap()).item().unwrap(),
            2.0 * 10f64.ln(),
            epsilon = 1e-12
        );

        let both = loss(&mut g, &[item, uniform], false).unwrap();
        assert_abs_diff_eq!(
            g.value(both.loss.unwrap()).item().unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );

        let outside = LossItem {
            gold_end: 10,
            ..uniform
        };
        let out = loss(&mut g, &[outside, uniform], false).unwrap();
        assert_eq!((out.used, out.skipped), (1, 1));
        assert!(loss(&mut g, &[outside], false).unwrap().loss.is_none());

        let types = g.constant(Tensor::zeros(4, 1));
        let typed = LossItem {
            type_logits: Some(types),
            ..uniform
        };
        let out = loss(&mut g, &[typed], true).unwrap();
        assert_abs_diff_eq!(
            g.value(out.loss.unwrap()).item().unwrap(),
            2.0 * 10f64.ln() + 4f64.ln(),
            epsilon = 1e-12
        );
        assert!(loss(&mut g, &[uniform], true).is_err());
    }
}
