//! Gradient checks of the full model on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, ForwardMode};
use crate::error::{Error, Result};
use crate::model::{loss, AnswerType, CmcConfig, CmcModel, DialogueContext, LossItem, ModelConfig, Theta};
use crate::numerics::gradcheck::{check_param_gradients, relative_error, sample_param_coords, GradcheckReport};
use crate::numerics::{Graph, NumericsError, ParamStore, ParamVars, Tensor, Var};
use crate::tokenizer::{tokenize, PackingConfig, PassageWindow, Vocabulary};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A tiny model, one six-token window and a full-history context.
pub struct TinyProblem {
    pub model: CmcModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub window: PassageWindow,
    pub context: DialogueContext,
    pub gold: (usize, usize, AnswerType),
}

impl TinyProblem {
    /// `d = 8`, one layer, two heads, history depth `k`.
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        let passage = "ann keeps a red kite .";
        let vocab = Vocabulary::build(
            [passage, "what does ann keep ? who is ann ? a friend from school"],
            1,
            100,
            &[],
        );
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocab.len(),
                hidden: 8,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                max_positions: 32,
                dropout: 0.0,
            },
            cmc: CmcConfig {
                k,
                ..CmcConfig::default()
            },
            packing: PackingConfig {
                max_seq_len: 32,
                max_query_len: 12,
                doc_stride: 8,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = CmcModel::init(cfg, &mut store, &mut rng)?;
        // Random rather than zero biases so their gradients are exercised
        // away from the symmetric point.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let ids = tokenize(passage, &vocab).ids;
        debug_assert_eq!(ids.len(), 6);
        let mut context = DialogueContext::first_turn("what does ann keep ?", k);
        context.turn = k + 1;
        for l in 0..k {
            context.prev_questions[l] = Some("who is ann ?".into());
            context.prev_answers[l] = Some(if l == 0 { "a friend" } else { "from school" }.into());
        }
        Ok(Self {
            model,
            store,
            vocab,
            window: PassageWindow { origin: 0, ids },
            context,
            gold: (2, 4, AnswerType::Span),
        })
    }

    /// Span loss plus type loss with the given parameter bindings.
    pub fn loss(&self, g: &mut Graph, theta: Theta<'_>, heads: &ParamVars) -> Result<Var> {
        let fwd = self.model.forward(
            g,
            theta,
            &self.vocab,
            &self.context,
            &self.window,
            &mut ForwardMode::Inference,
        )?;
        let (s, e, t) = self.gold;
        let type_logits = self.model.type_logits(g, heads, fwd.end_input, e)?;
        let item = LossItem {
            start_logits: fwd.start_logits,
            end_logits: fwd.end_logits,
            type_logits: Some(type_logits),
            gold_start: s,
            gold_end: e,
            gold_type: t,
        };
        loss(g, &[item], true)?
            .loss
            .ok_or_else(|| Error::Training("gold outside window".into()))
    }
}

fn to_numerics(e: Error) -> NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => NumericsError::Graph(other.to_string()),
    }
}

/// Analytic versus central-difference gradients of the full loss at
/// `coords` sampled parameter coordinates.
pub fn full_gradcheck(problem: &TinyProblem, coords: usize, seed: u64) -> Result<GradcheckReport> {
    let picked = sample_param_coords(&problem.store, coords, seed);
    let report = check_param_gradients(&problem.store, &picked, FD_STEP, |store| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let model = CmcModel::from_store(*problem.model.config(), store).map_err(to_numerics)?;
        let tiny = TinyProblem {
            model,
            store: ParamStore::new(),
            vocab: problem.vocab.clone(),
            window: problem.window.clone(),
            context: problem.context.clone(),
            gold: problem.gold,
        };
        let l = tiny.loss(&mut g, Theta::Shared(&p), &p).map_err(to_numerics)?;
        Ok((g, p, l))
    })?;
    Ok(report)
}

/// Largest relative error between the gradient of a shared parameter and
/// the sum of its gradients when each of the `2k + 1` encoder passes binds
/// its own copy.
pub fn shared_theta_adjoint(problem: &TinyProblem) -> Result<f64> {
    let passes = 2 * problem.model.config().cmc.k + 1;

    let mut g = Graph::new();
    let shared = problem.store.bind(&mut g);
    let l = problem.loss(&mut g, Theta::Shared(&shared), &shared)?;
    g.backward(l)?;
    let joint = shared.grads(&g, &problem.store);

    let mut g = Graph::new();
    let per_pass: Vec<ParamVars> = (0..passes).map(|_| problem.store.bind(&mut g)).collect();
    let l = problem.loss(&mut g, Theta::PerPass(&per_pass), &per_pass[0])?;
    g.backward(l)?;
    let mut summed: Vec<Tensor> = per_pass[0].grads(&g, &problem.store);
    for vars in &per_pass[1..] {
        for (acc, part) in summed.iter_mut().zip(vars.grads(&g, &problem.store)) {
            acc.add_assign(&part);
        }
    }

    let mut worst = 0.0f64;
    let mut nonzero = 0usize;
    for (a, b) in joint.iter().zip(&summed) {
        for (x, y) in a.data().iter().zip(b.data()) {
            nonzero += (*x != 0.0) as usize;
            worst = worst.max(relative_error(*x, *y));
        }
    }
    if nonzero == 0 {
        return Err(Error::Training("shared gradient is identically zero".into()));
    }
    Ok(worst)
}
