//! Fine-tuning: configuration, learning-rate schedule, AdamW and the loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{Corpus, HistoryFlags, LONG_PARAGRAPH_CHARS};
use crate::decoding::CANNOTANSWER;
use crate::encoder::{EncoderConfig, ForwardMode};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, GroupBy};
use crate::model::{loss, CmcConfig, CmcModel, DatasetMode, LossItem, ModelConfig, Theta};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::pipeline::{build_training_set, evaluate, EvalOptions, Predictor, TrainingSet};
use crate::tokenizer::{PackingConfig, Vocabulary};

/// Flat training configuration; every key is optional in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay weights directly instead of adding `wd * w` to the gradient.
    pub decoupled_weight_decay: bool,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dataset_mode: DatasetMode,

    pub k: usize,
    pub use_question_history: bool,
    pub use_answer_history: bool,
    pub max_answer_len: usize,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub max_query_len: usize,
    pub doc_stride: usize,

    pub vocab_min_count: usize,
    pub vocab_max_words: usize,
    /// Drop dialogues whose paragraph has 5000 chars or more.
    pub filter_long_paragraphs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk(0);
        let pack = PackingConfig::default();
        let cmc = CmcConfig::default();
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decoupled_weight_decay: true,
            warmup_fraction: 0.1,
            epochs: 2,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            dataset_mode: DatasetMode::Coqa,
            k: cmc.k,
            use_question_history: cmc.use_question_history,
            use_answer_history: cmc.use_answer_history,
            max_answer_len: cmc.max_answer_len,
            hidden: enc.hidden,
            layers: enc.layers,
            heads: enc.heads,
            ff_dim: enc.ff_dim,
            dropout: enc.dropout,
            max_seq_len: pack.max_seq_len,
            max_query_len: pack.max_query_len,
            doc_stride: pack.doc_stride,
            vocab_min_count: 1,
            vocab_max_words: 30_000,
            filter_long_paragraphs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                hidden: self.hidden,
                layers: self.layers,
                heads: self.heads,
                ff_dim: self.ff_dim,
                max_positions: self.max_seq_len,
                dropout: self.dropout,
            },
            cmc: CmcConfig {
                k: self.k,
                use_question_history: self.use_question_history,
                use_answer_history: self.use_answer_history,
                max_answer_len: self.max_answer_len,
            },
            packing: PackingConfig {
                max_seq_len: self.max_seq_len,
                max_query_len: self.max_query_len,
                doc_stride: self.doc_stride,
            },
        }
    }

    pub fn history_flags(&self) -> HistoryFlags {
        HistoryFlags {
            questions: self.use_question_history,
            answers: self.use_answer_history,
        }
    }
}

/// Vocabulary over paragraphs, questions and answers, plus the QuAC
/// sentinel.
pub fn build_vocab(corpus: &Corpus, cfg: &TrainConfig) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for d in &corpus.dialogues {
        texts.push(&d.paragraph);
        for t in &d.turns {
            texts.push(&t.question);
            texts.extend(t.answers.iter().map(String::as_str));
        }
    }
    Vocabulary::build(texts, cfg.vocab_min_count, cfg.vocab_max_words, &[CANNOTANSWER])
}

/// Linear warmup over the first `ceil(warmup_fraction * total)` steps, then
/// linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule over zero steps".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond schedule of {total}")));
    }
    let warmup = ((cfg.warmup_fraction * total as f64).ceil() as usize).max(1);
    if step == total {
        Ok(0.0)
    } else if step < warmup {
        Ok(cfg.lr * step as f64 / warmup as f64)
    } else {
        Ok(cfg.lr * (total - step) as f64 / (total - warmup) as f64)
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id| {
            let t: &Tensor = store.get(id);
            Tensor::zeros(t.rows(), t.cols())
        };
        Self {
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with weight decay. A non-finite gradient
/// aborts before any parameter changes.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Training(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Training(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                store.name(id),
                g.shape(),
                store.get(id).shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {} in {} at element {i} (step {})",
                g.data()[i],
                store.name(id),
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let w = store.value_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, g) in grads[i].data().iter().enumerate() {
            let mut g = *g;
            if !cfg.decoupled_weight_decay {
                g += cfg.weight_decay * w[j];
            }
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            let decay = if cfg.decoupled_weight_decay {
                cfg.weight_decay * w[j]
            } else {
                0.0
            };
            w[j] -= lr * (update + decay);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Owns the parameters and optimizer state during training.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CmcModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub optimizer: OptimizerState,
    pub total_steps: usize,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = CmcModel::init(cfg.model_config(vocab.len()), &mut store, &mut rng)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(2);
        Ok(Self {
            optimizer: OptimizerState::new(&store),
            cfg,
            model,
            store,
            vocab,
            total_steps,
            dropout_rng,
        })
    }

    /// Mean loss over `batch` (indices into `set.examples`). With
    /// `training`, dropout is active and gradients are returned.
    fn batch(&mut self, set: &TrainingSet, batch: &[usize], training: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::new();
        let p = if training {
            self.store.bind(&mut g)
        } else {
            self.store.bind_frozen(&mut g)
        };
        let type_loss = self.cfg.dataset_mode.uses_type_head();
        let mut items = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &set.examples[i];
            let window = &set.paragraphs[ex.paragraph].windows[ex.window];
            let mut mode = if training {
                ForwardMode::Training(&mut self.dropout_rng)
            } else {
                ForwardMode::Inference
            };
            let fwd = self
                .model
                .forward(&mut g, Theta::Shared(&p), &self.vocab, &ex.context, window, &mut mode)?;
            let type_logits = if type_loss {
                Some(self.model.type_logits(&mut g, &p, fwd.end_input, ex.end)?)
            } else {
                None
            };
            items.push(LossItem {
                start_logits: fwd.start_logits,
                end_logits: fwd.end_logits,
                type_logits,
                gold_start: ex.start,
                gold_end: ex.end,
                gold_type: ex.answer_type,
            });
        }
        let out = loss(&mut g, &items, type_loss)?;
        let Some(l) = out.loss else {
            return Err(Error::Training("batch has no usable examples".into()));
        };
        let value = g.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::Training(format!("non-finite loss {value}")));
        }
        if !training {
            return Ok((value, None));
        }
        g.backward(l)?;
        Ok((value, Some(p.grads(&g, &self.store))))
    }

    /// Loss on `batch` without dropout or updates.
    pub fn eval_loss(&mut self, set: &TrainingSet, batch: &[usize]) -> Result<f64> {
        Ok(self.batch(set, batch, false)?.0)
    }

    /// Forward, backward and one optimizer update.
    pub fn step(&mut self, set: &TrainingSet, batch: &[usize], epoch: usize) -> Result<StepLog> {
        let (value, grads) = self.batch(set, batch, true)?;
        let step = self.optimizer.step + 1;
        let lr = lr_at(step.min(self.total_steps), self.total_steps, &self.cfg)?;
        adam_step(
            &mut self.store,
            &grads.expect("training batch has gradients"),
            &mut self.optimizer,
            lr,
            &self.cfg,
        )?;
        Ok(StepLog {
            step,
            epoch,
            lr,
            loss: value,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: *self.model.config(),
                mode: self.cfg.dataset_mode,
                vocab: self.vocab.clone(),
                train: Some(self.cfg.clone()),
                step: self.optimizer.step,
            },
            store: self.store.clone(),
        }
    }

    pub fn predictor(&self) -> Predictor {
        Predictor {
            model: self.model.clone(),
            store: self.store.clone(),
            vocab: self.vocab.clone(),
            mode: self.cfg.dataset_mode,
        }
    }
}

/// Result of [`train`].
pub struct TrainRun {
    pub last: Checkpoint,
    pub best: Checkpoint,
    /// Dev F1 of `best` when a dev corpus was given.
    pub best_dev_f1: Option<f64>,
    pub curve: Vec<StepLog>,
    pub examples: usize,
    pub skipped_turns: usize,
}

/// Trains from scratch. Batches are drawn from a seeded shuffle each epoch.
/// The best checkpoint maximizes dev F1 (gold history) when `dev` is given,
/// otherwise it minimizes the epoch's mean training loss. With `out_dir`,
/// writes `train_log.jsonl`, `last.ckpt` and `best.ckpt` there.
pub fn train(
    corpus: &Corpus,
    dev: Option<&Corpus>,
    vocab: Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if corpus.mode != cfg.dataset_mode {
        return Err(Error::Config(format!(
            "corpus is {:?} but dataset_mode is {:?}",
            corpus.mode, cfg.dataset_mode
        )));
    }
    let mut corpus = corpus.clone();
    if cfg.filter_long_paragraphs {
        let dropped = corpus.filter_long_paragraphs(LONG_PARAGRAPH_CHARS);
        log::info!("dropped {dropped} dialogues with long paragraphs");
    }
    let model_cfg = cfg.model_config(vocab.len());
    let set = build_training_set(&corpus, &vocab, &model_cfg.packing, cfg.k, cfg.history_flags())?;
    if set.examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    log::info!(
        "{} examples, {} turns without gold span, {} windows without it",
        set.examples.len(),
        set.skipped_turns,
        set.skipped_windows
    );
    let per_epoch = set.examples.len().div_ceil(cfg.batch_size);
    let total = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut trainer = Trainer::new(cfg.clone(), vocab, total)?;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let save = |ckpt: &Checkpoint, name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(name))?;
        }
        Ok(())
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..set.examples.len()).collect();
    let mut curve = Vec::with_capacity(total);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut best_dev_f1 = None;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if trainer.optimizer.step >= total {
                break 'epochs;
            }
            let entry = trainer.step(&set, batch, epoch)?;
            if let Some((path, w)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log line serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            log::debug!("step {} lr {:.3e} loss {:.5}", entry.step, entry.lr, entry.loss);
            epoch_loss += entry.loss;
            epoch_steps += 1;
            curve.push(entry);
        }
        let score = match dev {
            Some(dev) => {
                let (_, records) = evaluate(&trainer.predictor(), dev, &EvalOptions::default())?;
                let f1 = aggregate(&records, GroupBy::Overall, false)
                    .first()
                    .map_or(0.0, |r| r.f1);
                log::info!("epoch {epoch}: dev F1 {:.2}", 100.0 * f1);
                f1
            }
            None => -epoch_loss / epoch_steps.max(1) as f64,
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            let ckpt = trainer.checkpoint();
            save(&ckpt, "best.ckpt")?;
            if dev.is_some() {
                best_dev_f1 = Some(score);
            }
            best = Some((score, ckpt));
        }
    }
    if let Some((path, w)) = log_file.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    let last = trainer.checkpoint();
    save(&last, "last.ckpt")?;
    let best = match best {
        Some((_, ckpt)) => ckpt,
        None => {
            save(&last, "best.ckpt")?;
            last.clone()
        }
    };
    Ok(TrainRun {
        last,
        best,
        best_dev_f1,
        curve,
        examples: set.examples.len(),
        skipped_turns: set.skipped_turns,
    })
}

/// Default output directory for a config file: `runs/<file stem>`.
pub fn default_run_dir(config_path: &Path) -> PathBuf {
    let stem = config_path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}
