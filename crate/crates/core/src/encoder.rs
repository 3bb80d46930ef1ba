//! Micro-BERT encoder and the paragraph-feature extractor.
//!
//! Hidden states are feature-major: `encode` returns a `hidden x len`
//! matrix whose columns are token positions. Every encoder call in a
//! forward pass reads the same [`ParamStore`] entries, so question,
//! question-history and answer-history encodings share one set of weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, ParamId, ParamStore, ParamVars, Tensor, Var};
use crate::tokenizer::{pack, tokenize, PackedSequence, PackingConfig, PassageWindow, Vocabulary};

const LAYER_NORM_EPS: f64 = 1e-12;
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Small defaults that train in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            max_positions: 384,
            dropout: 0.1,
        }
    }

    pub fn validate(&self, packing: Option<&PackingConfig>) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if let Some(p) = packing {
            if self.max_positions < p.max_seq_len {
                return Err(Error::Config(format!(
                    "max_positions {} < max_seq_len {}",
                    self.max_positions, p.max_seq_len
                )));
            }
        }
        Ok(())
    }
}

/// Whether a forward pass trains (dropout on, drawing from the given RNG)
/// or infers.
pub enum ForwardMode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

impl ForwardMode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, ForwardMode::Training(_))
    }

    pub(crate) fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            ForwardMode::Inference => Ok(x),
            ForwardMode::Training(rng) => Ok(g.dropout(x, rate, *rng)?),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// Parameter handles of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    token_emb: ParamId,
    segment_emb: ParamId,
    position_emb: ParamId,
    layers: Vec<LayerIds>,
}

/// `(name suffix, rows, cols, init)` for every parameter of one layer.
fn layer_specs(cfg: &EncoderConfig) -> Vec<(&'static str, usize, usize, Init)> {
    let (d, f) = (cfg.hidden, cfg.ff_dim);
    vec![
        ("attn.wq", d, d, Init::Fan(d)),
        ("attn.bq", d, 1, Init::Zero),
        ("attn.wk", d, d, Init::Fan(d)),
        ("attn.bk", d, 1, Init::Zero),
        ("attn.wv", d, d, Init::Fan(d)),
        ("attn.bv", d, 1, Init::Zero),
        ("attn.wo", d, d, Init::Fan(d)),
        ("attn.bo", d, 1, Init::Zero),
        ("ln1.gamma", d, 1, Init::One),
        ("ln1.beta", d, 1, Init::Zero),
        ("ffn.w1", f, d, Init::Fan(d)),
        ("ffn.b1", f, 1, Init::Zero),
        ("ffn.w2", d, f, Init::Fan(f)),
        ("ffn.b2", d, 1, Init::Zero),
        ("ln2.gamma", d, 1, Init::One),
        ("ln2.beta", d, 1, Init::Zero),
    ]
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Zero,
    One,
    /// Normal with std `1 / sqrt(fan_in)`.
    Fan(usize),
    Normal(f64),
}

pub(crate) fn register(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    match init {
        Init::Zero => store.insert(name, Tensor::zeros(rows, cols)),
        Init::One => store.insert(name, Tensor::filled(rows, cols, 1.0)),
        Init::Fan(fan_in) => store.insert_normal(name, rows, cols, 1.0 / (fan_in as f64).sqrt(), rng),
        Init::Normal(std) => store.insert_normal(name, rows, cols, std, rng),
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
    let shape = store.get(id).shape();
    if shape != [rows, cols] {
        return Err(Error::Checkpoint(format!(
            "parameter {name}: expected shape [{rows}, {cols}], found {shape:?}"
        )));
    }
    Ok(id)
}

const EMBEDDING_STD: f64 = 0.5;

impl Encoder {
    /// Registers freshly initialized encoder weights in `store`.
    pub fn init(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate(None)?;
        let d = cfg.hidden;
        let emb = Init::Normal(EMBEDDING_STD);
        let token_emb = register(store, "encoder.token_emb".into(), cfg.vocab_size, d, emb, rng);
        let segment_emb = register(store, "encoder.segment_emb".into(), 2, d, emb, rng);
        let position_emb =
            register(store, "encoder.position_emb".into(), cfg.max_positions, d, emb, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ids: Vec<ParamId> = layer_specs(&cfg)
                .into_iter()
                .map(|(name, r, c, init)| {
                    register(store, format!("encoder.layer{l}.{name}"), r, c, init, rng)
                })
                .collect();
            layers.push(Self::layer_from_ids(&ids));
        }
        Ok(Self {
            cfg,
            token_emb,
            segment_emb,
            position_emb,
            layers,
        })
    }

    /// Resolves encoder parameters already present in `store`, checking shapes.
    pub fn from_store(cfg: EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate(None)?;
        let d = cfg.hidden;
        let token_emb = lookup(store, "encoder.token_emb", cfg.vocab_size, d)?;
        let segment_emb = lookup(store, "encoder.segment_emb", 2, d)?;
        let position_emb = lookup(store, "encoder.position_emb", cfg.max_positions, d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ids = layer_specs(&cfg)
                .into_iter()
                .map(|(name, r, c, _)| lookup(store, &format!("encoder.layer{l}.{name}"), r, c))
                .collect::<Result<Vec<_>>>()?;
            layers.push(Self::layer_from_ids(&ids));
        }
        Ok(Self {
            cfg,
            token_emb,
            segment_emb,
            position_emb,
            layers,
        })
    }

    fn layer_from_ids(ids: &[ParamId]) -> LayerIds {
        LayerIds {
            wq: ids[0],
            bq: ids[1],
            wk: ids[2],
            bk: ids[3],
            wv: ids[4],
            bv: ids[5],
            wo: ids[6],
            bo: ids[7],
            ln1_gamma: ids[8],
            ln1_beta: ids[9],
            w1: ids[10],
            b1: ids[11],
            w2: ids[12],
            b2: ids[13],
            ln2_gamma: ids[14],
            ln2_beta: ids[15],
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_emb
    }

    /// Token + segment + position embeddings, `hidden x len`.
    pub fn embed(&self, g: &mut Graph, p: &ParamVars, seq: &PackedSequence) -> Result<Var> {
        if seq.len() > self.cfg.max_positions {
            return Err(Error::Index(format!(
                "sequence length {} exceeds max_positions {}",
                seq.len(),
                self.cfg.max_positions
            )));
        }
        let ids: Vec<usize> = seq.token_ids.iter().map(|i| *i as usize).collect();
        let segments: Vec<usize> = seq.segment_ids.iter().map(|s| *s as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok = g.gather_rows(p.var(self.token_emb), &ids)?;
        let seg = g.gather_rows(p.var(self.segment_emb), &segments)?;
        let pos = g.gather_rows(p.var(self.position_emb), &positions)?;
        let sum = g.add(tok, seg)?;
        let sum = g.add(sum, pos)?;
        Ok(g.transpose(sum)?)
    }

    /// Final hidden states, `hidden x len`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        seq: &PackedSequence,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        self.encode_traced(g, p, seq, mode, None)
    }

    /// Like [`Encoder::encode`], also collecting each layer's per-head
    /// attention matrices (`len x len`, one row per query position).
    pub fn encode_traced(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        seq: &PackedSequence,
        mode: &mut ForwardMode<'_>,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut x = self.embed(g, p, seq)?;
        let pad_mask = self.pad_mask(g, seq);
        for layer in &self.layers {
            let attn = self.self_attention(g, p, layer, x, pad_mask, attention.as_deref_mut())?;
            let attn = mode.dropout(g, attn, self.cfg.dropout)?;
            let res = g.add(x, attn)?;
            x = self.norm(g, p, res, layer.ln1_gamma, layer.ln1_beta)?;

            let h = linear(g, p, layer.w1, layer.b1, x)?;
            let h = g.gelu(h)?;
            let ff = linear(g, p, layer.w2, layer.b2, h)?;
            let ff = mode.dropout(g, ff, self.cfg.dropout)?;
            let res = g.add(x, ff)?;
            x = self.norm(g, p, res, layer.ln2_gamma, layer.ln2_beta)?;
        }
        Ok(x)
    }

    fn pad_mask(&self, g: &mut Graph, seq: &PackedSequence) -> Option<Var> {
        // [PAD] has id 0 in every vocabulary.
        if !seq.token_ids.contains(&0) {
            return None;
        }
        let row = seq
            .token_ids
            .iter()
            .map(|id| if *id == 0 { MASKED_LOGIT } else { 0.0 })
            .collect::<Vec<_>>();
        let t = Tensor::new(1, row.len(), row).expect("mask shape");
        Some(g.constant(t))
    }

    fn norm(&self, g: &mut Graph, p: &ParamVars, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let n = g.layer_norm_cols(x, LAYER_NORM_EPS)?;
        let scaled = g.mul(n, p.var(gamma))?;
        Ok(g.add(scaled, p.var(beta))?)
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        layer: &LayerIds,
        x: Var,
        pad_mask: Option<Var>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let q = linear(g, p, layer.wq, layer.bq, x)?;
        let k = linear(g, p, layer.wk, layer.bk, x)?;
        let v = linear(g, p, layer.wv, layer.bv, x)?;
        let head_dim = self.cfg.hidden / self.cfg.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_rows(q, lo, hi)?;
            let kh = g.slice_rows(k, lo, hi)?;
            let vh = g.slice_rows(v, lo, hi)?;
            let qt = g.transpose(qh)?;
            let scores = g.matmul(qt, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(mask) = pad_mask {
                scores = g.add(scores, mask)?;
            }
            let probs = g.softmax(scores, Axis::Cols)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            let pt = g.transpose(probs)?;
            heads.push(g.matmul(vh, pt)?);
        }
        let merged = g.concat_rows(&heads)?;
        linear(g, p, layer.wo, layer.bo, merged)
    }

    /// `z = f(BERT(query, window))`: the paragraph columns of the final
    /// hidden states for `query_text` packed against `window`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_pair(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        vocab: &Vocabulary,
        packing: &PackingConfig,
        query_text: &str,
        window: &PassageWindow,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        let query = tokenize(query_text, vocab);
        let mut seq = pack(
            &query.ids,
            &window.ids,
            packing.max_seq_len,
            packing.max_query_len,
            vocab,
        )?;
        seq.window_origin = window.origin;
        if seq.paragraph_cols.len() != window.len() {
            return Err(Error::Config(format!(
                "window of {} tokens does not fit max_seq_len {}",
                window.len(),
                packing.max_seq_len
            )));
        }
        let hidden = self.encode(g, p, &seq, mode)?;
        extract_paragraph_features(g, hidden, &seq)
    }
}

/// `W x + b` with the bias broadcast over columns.
pub(crate) fn linear(g: &mut Graph, p: &ParamVars, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
    let y = g.matmul(p.var(w), x)?;
    Ok(g.add(y, p.var(b))?)
}

/// Selects the passage columns of `hidden`, in passage order.
pub fn extract_paragraph_features(g: &mut Graph, hidden: Var, seq: &PackedSequence) -> Result<Var> {
    if seq.paragraph_cols.is_empty() {
        return Err(Error::Index("packed sequence has no passage tokens".into()));
    }
    Ok(g.select_cols(hidden, &seq.paragraph_cols)?)
}

/// Random token ids in `4..vocab_size`, used by tests and benches.
pub fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab_size: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(4..vocab_size as u32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(layers: usize) -> (Encoder, ParamStore, Vocabulary) {
        let vocab = Vocabulary::build(
            ["the cat sat on the mat while a dog barked who sat where did it sit"],
            1,
            100,
            &[],
        );
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden: 8,
            layers,
            heads: 2,
            ff_dim: 16,
            max_positions: 64,
            dropout: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::init(cfg, &mut store, &mut rng).unwrap();
        (enc, store, vocab)
    }

    fn packed(vocab: &Vocabulary, q: &str, p: &str) -> PackedSequence {
        let q = tokenize(q, vocab);
        let p = tokenize(p, vocab);
        pack(&q.ids, &p.ids, 64, 16, vocab).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::desk(100);
        assert!(cfg.validate(Some(&PackingConfig::default())).is_ok());
        cfg.heads = 3;
        assert!(cfg.validate(None).is_err());
        let mut cfg = EncoderConfig::desk(100);
        cfg.max_positions = 100;
        assert!(cfg.validate(Some(&PackingConfig::default())).is_err());
    }

    #[test]
    fn output_shape_and_overflow() {
        let (enc, store, vocab) = tiny(2);
        let seq = packed(&vocab, "who sat", "the cat sat on the mat");
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let h = enc.encode(&mut g, &p, &seq, &mut ForwardMode::Inference).unwrap();
        assert_eq!(g.value(h).shape(), [8, seq.len()]);

        let mut long = seq.clone();
        long.token_ids = vec![5; 65];
        long.segment_ids = vec![1; 65];
        assert!(matches!(
            enc.encode(&mut g, &p, &long, &mut ForwardMode::Inference),
            Err(Error::Index(_))
        ));
        let mut bad = seq.clone();
        bad.token_ids[1] = vocab.len() as u32;
        assert!(enc.encode(&mut g, &p, &bad, &mut ForwardMode::Inference).is_err());
    }

    #[test]
    fn zero_layers_is_embedding_sum() {
        let (enc, store, vocab) = tiny(0);
        let seq = packed(&vocab, "who", "the cat sat");
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let h = enc.encode(&mut g, &p, &seq, &mut ForwardMode::Inference).unwrap();
        let tok = store.get(store.id("encoder.token_emb").unwrap());
        let seg = store.get(store.id("encoder.segment_emb").unwrap());
        let pos = store.get(store.id("encoder.position_emb").unwrap());
        for (col, (&id, &s)) in seq.token_ids.iter().zip(&seq.segment_ids).enumerate() {
            for r in 0..8 {
                let expected = tok.get(id as usize, r) + seg.get(s as usize, r) + pos.get(col, r);
                assert_eq!(g.value(h).get(r, col), expected);
            }
        }
    }

    #[test]
    fn swapping_passage_tokens_swaps_embedding_columns() {
        let (enc, store, vocab) = tiny(1);
        let a = packed(&vocab, "who", "cat dog");
        let mut b = a.clone();
        let (i, j) = (a.paragraph_cols[0], a.paragraph_cols[1]);
        b.token_ids.swap(i, j);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let ea = enc.embed(&mut g, &p, &a).unwrap();
        let eb = enc.embed(&mut g, &p, &b).unwrap();
        let pos = store.get(store.id("encoder.position_emb").unwrap());
        for r in 0..8 {
            let tok_a_i = g.value(ea).get(r, i) - pos.get(i, r);
            let tok_b_j = g.value(eb).get(r, j) - pos.get(j, r);
            assert!((tok_a_i - tok_b_j).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_respect_padding() {
        let (enc, store, vocab) = tiny(2);
        let mut seq = packed(&vocab, "who sat", "the cat sat on the mat");
        seq.token_ids.push(vocab.pad_id());
        seq.segment_ids.push(1);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut trace = Vec::new();
        enc.encode_traced(&mut g, &p, &seq, &mut ForwardMode::Inference, Some(&mut trace))
            .unwrap();
        assert_eq!(trace.len(), 4);
        let last = seq.len() - 1;
        for a in trace {
            let t = g.value(a);
            for r in 0..t.rows() {
                let unmasked: f64 = (0..last).map(|c| t.get(r, c)).sum();
                assert!((unmasked - 1.0).abs() < 1e-12);
                assert!(t.get(r, last) < 1e-300);
            }
        }
    }

    #[test]
    fn paragraph_feature_extraction() {
        let mut g = Graph::new();
        let v = Vocabulary::build(["a b c"], 1, 10, &[]);
        let seq = pack(&[4, 5, 6], &[7, 8, 9, 10, 11], 384, 64, &v).unwrap();
        let mut hidden = Tensor::zeros(3, seq.len());
        hidden.set(1, 7, 42.0);
        let h = g.constant(hidden);
        let z = extract_paragraph_features(&mut g, h, &seq).unwrap();
        assert_eq!(g.value(z).shape(), [3, 5]);
        assert_eq!(g.value(z).get(1, 2), 42.0);
        assert_eq!(g.value(z).sum(), 42.0);

        let mut empty = seq.clone();
        empty.paragraph_cols.clear();
        assert!(extract_paragraph_features(&mut g, h, &empty).is_err());
    }

    #[test]
    fn encode_pair_probes() {
        let (enc, mut store, vocab) = tiny(2);
        let passage = tokenize("the cat sat on the mat while a dog barked", &vocab);
        let window = PassageWindow {
            origin: 0,
            ids: passage.ids.clone(),
        };
        let packing = PackingConfig {
            max_seq_len: 64,
            max_query_len: 16,
            doc_stride: 8,
        };
        let run = |store: &ParamStore, q: &str| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let z = enc
                .encode_pair(&mut g, &p, &vocab, &packing, q, &window, &mut ForwardMode::Inference)
                .unwrap();
            g.value(z).clone()
        };
        let a = run(&store, "who sat");
        assert_eq!(a.shape(), [8, window.len()]);
        assert_eq!(a, run(&store, "who sat"));
        assert!(a.max_abs_diff(&run(&store, "where did it sit")) > 1e-6);

        let id = store.id("encoder.layer1.ffn.w2").unwrap();
        store.value_mut(id).data_mut()[3] += 0.5;
        assert!(a.max_abs_diff(&run(&store, "who sat")) > 1e-9);
    }

    #[test]
    fn from_store_checks_shapes() {
        let (enc, store, _) = tiny(1);
        assert!(Encoder::from_store(*enc.config(), &store).is_ok());
        let mut wrong = *enc.config();
        wrong.ff_dim = 32;
        let err = Encoder::from_store(wrong, &store).unwrap_err().to_string();
        assert!(err.contains("encoder.layer0.ffn.w1"), "{err}");
    }

    #[test]
    fn dropout_only_in_training() {
        let (enc, store, vocab) = tiny(1);
        let seq = packed(&vocab, "who sat", "the cat sat on the mat");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let a = enc.encode(&mut g, &p, &seq, &mut ForwardMode::Inference).unwrap();
        let b = enc.encode(&mut g, &p, &seq, &mut ForwardMode::Inference).unwrap();
        let c = enc
            .encode(&mut g, &p, &seq, &mut ForwardMode::Training(&mut rng))
            .unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
    }
}
