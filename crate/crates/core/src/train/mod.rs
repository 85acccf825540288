//! Fine-tuning regimes, child-model initialization, Adam, and the training
//! loop.
//!
//! A *regime* names which parameter groups train when a model transfers to a
//! new language; everything else stays frozen at the parent's values. The
//! training loop builds one fresh computation graph per step (so gradients
//! for frozen groups never even materialize), token-weights the sentence
//! losses into a scalar, and runs one backward pass per step.

use rand::seq::SliceRandom;

use crate::ckpt;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, GroupTag, Model, ModelConfig};
use crate::rng::{derive_seed, stream};
use crate::tasks::bleu::corpus_bleu;
use crate::tasks::{Corpora, ParallelCorpus, BOS, EOS, NUM_SPECIALS};

/// Extra tokens greedy decode may emit beyond the source length.
pub const DECODE_EXTRA: usize = 8;

// ── regimes ─────────────────────────────────────────────────────────

/// Which parameter groups a fine-tuning run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegimeSetting {
    /// No transfer: a fresh random model, all groups trainable.
    Scratch,
    /// Only the new side's embedding group trains.
    EmbOnly,
    /// New embeddings plus the whole body (encoder, decoder, cross-attn).
    EmbBody,
    /// New embeddings plus cross-attention.
    EmbXattn,
    /// Like EmbXattn, but cross-attention restarts from random values —
    /// the control for whether *parent-trained* cross-attention matters.
    EmbRandXattn,
}

impl RegimeSetting {
    pub const ALL: [RegimeSetting; 5] = [
        RegimeSetting::Scratch,
        RegimeSetting::EmbOnly,
        RegimeSetting::EmbBody,
        RegimeSetting::EmbXattn,
        RegimeSetting::EmbRandXattn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RegimeSetting::Scratch => "SCRATCH",
            RegimeSetting::EmbOnly => "EMB_ONLY",
            RegimeSetting::EmbBody => "EMB_BODY",
            RegimeSetting::EmbXattn => "EMB_XATTN",
            RegimeSetting::EmbRandXattn => "EMB_RANDXATTN",
        }
    }

    pub fn parse(s: &str) -> Result<RegimeSetting> {
        RegimeSetting::ALL
            .into_iter()
            .find(|r| r.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

/// Which side of the model meets a new language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferSide {
    NewSource,
    NewTarget,
}

impl TransferSide {
    pub const ALL: [TransferSide; 2] = [TransferSide::NewSource, TransferSide::NewTarget];

    /// The embedding group that belongs to the new language.
    pub fn new_embedding_group(self) -> GroupTag {
        match self {
            TransferSide::NewSource => GroupTag::Src,
            TransferSide::NewTarget => GroupTag::Tgt,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TransferSide::NewSource => "NEW_SOURCE",
            TransferSide::NewTarget => "NEW_TARGET",
        }
    }

    pub fn parse(s: &str) -> Result<TransferSide> {
        TransferSide::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown transfer side {s:?}")))
    }
}

/// A complete fine-tuning prescription: what trains, on which side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FineTuneRegime {
    pub setting: RegimeSetting,
    pub side: TransferSide,
}

impl FineTuneRegime {
    pub fn new(setting: RegimeSetting, side: TransferSide) -> Self {
        FineTuneRegime { setting, side }
    }

    /// The parameter groups this regime trains. Everything else is frozen.
    pub fn trainable_tags(&self) -> Vec<GroupTag> {
        let emb = self.side.new_embedding_group();
        match self.setting {
            RegimeSetting::Scratch => GroupTag::ALL.to_vec(),
            RegimeSetting::EmbOnly => vec![emb],
            RegimeSetting::EmbBody => {
                vec![emb, GroupTag::Enc, GroupTag::Dec, GroupTag::Xattn]
            }
            RegimeSetting::EmbXattn | RegimeSetting::EmbRandXattn => {
                vec![emb, GroupTag::Xattn]
            }
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.setting.label(), self.side.label())
    }
}

// ── child initialization ────────────────────────────────────────────

/// A model derived from a parent for a transfer experiment, together with
/// the provenance needed for later embedding swaps.
#[derive(Debug, Clone)]
pub struct Child {
    pub model: Model,
    pub regime: FineTuneRegime,
    /// Lineage hash of the parent's full parameter payload.
    pub parent_lineage: u64,
}

pub(crate) fn check_compatible(
    parent: &ModelConfig,
    child: &ModelConfig,
    side: TransferSide,
) -> Result<()> {
    let same_arch = parent.d_model == child.d_model
        && parent.n_heads == child.n_heads
        && parent.n_enc_layers == child.n_enc_layers
        && parent.n_dec_layers == child.n_dec_layers
        && parent.d_ff == child.d_ff
        && parent.max_len == child.max_len;
    if !same_arch {
        return Err(Error::Transfer(
            "child architecture differs from parent (d_model/heads/layers/d_ff/max_len)".into(),
        ));
    }
    let preserved_ok = match side {
        TransferSide::NewSource => parent.tgt_vocab_size == child.tgt_vocab_size,
        TransferSide::NewTarget => parent.src_vocab_size == child.src_vocab_size,
    };
    if !preserved_ok {
        return Err(Error::Transfer(
            "the preserved side's vocabulary must match the parent's".into(),
        ));
    }
    Ok(())
}

/// Derive a child model from `parent` for a fine-tuning regime.
///
/// The child starts as a fresh seeded build; then every group the transfer
/// preserves is overwritten with the parent's tensors. The new side's
/// embedding group keeps its fresh random values, and `EmbRandXattn`
/// additionally keeps fresh random cross-attention.
pub fn init_child(
    parent: &Model,
    child_config: ModelConfig,
    regime: FineTuneRegime,
    seed: u64,
) -> Result<Child> {
    if regime.setting == RegimeSetting::Scratch {
        return Err(Error::Transfer(
            "SCRATCH is not a transfer: build a fresh model instead".into(),
        ));
    }
    check_compatible(&parent.config, &child_config, regime.side)?;

    let mut fresh_groups = vec![regime.side.new_embedding_group()];
    if regime.setting == RegimeSetting::EmbRandXattn {
        fresh_groups.push(GroupTag::Xattn);
    }

    let mut child = Model::build(child_config, seed)?;
    for idx in 0..child.registry().len() {
        let p = child.registry().get(idx);
        if fresh_groups.contains(&p.tag) {
            continue;
        }
        let name = p.name.clone();
        let parent_idx = parent.registry().index_of(&name).ok_or_else(|| {
            Error::Transfer(format!("parent has no parameter named {name:?}"))
        })?;
        child.set_param(idx, parent.registry().get(parent_idx).tensor.clone())?;
    }

    Ok(Child {
        model: child,
        regime,
        parent_lineage: ckpt::lineage_hash(parent),
    })
}

// ── optimizer ───────────────────────────────────────────────────────

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup steps; 0 disables warmup.
    pub warmup: usize,
    /// Global gradient-norm clip, applied before the update.
    pub clip_norm: f64,
    pub smoothing: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Dev-BLEU cadence in steps; 0 disables evaluation.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 100,
            clip_norm: 1.0,
            smoothing: 0.1,
            batch_size: 16,
            max_steps: 1000,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("smoothing must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with linear warmup and global-norm clipping. Moment
/// slots exist only for parameters that actually receive gradients, so
/// frozen parameters carry no optimizer state at all.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: usize,
    clip_norm: f64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: usize,
}

impl Adam {
    pub fn new(n_slots: usize, cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            warmup: cfg.warmup,
            clip_norm: cfg.clip_norm,
            m: vec![None; n_slots],
            v: vec![None; n_slots],
            t: 0,
        }
    }

    /// Open an optimizer step: advances the step counter and fixes the
    /// clip scale (from the joint norm over every gradient in the step),
    /// the warmed-up learning rate, and the bias corrections. Follow with
    /// one [`apply`](Self::apply) per parameter.
    pub fn begin_step<'g>(&mut self, grads: impl IntoIterator<Item = &'g [f64]>) -> AdamStep {
        self.t += 1;
        let t = self.t as f64;

        let sq_norm: f64 = grads
            .into_iter()
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum();
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (t / self.warmup as f64).min(1.0)
        };
        AdamStep {
            clip_scale,
            lr_t: self.lr * warm,
            bc1: 1.0 - self.beta1.powf(t),
            bc2: 1.0 - self.beta2.powf(t),
        }
    }

    /// Update one parameter within an open step.
    pub fn apply(&mut self, step: &AdamStep, slot: usize, theta: &mut [f64], grad: &[f64]) {
        let m = self.m[slot].get_or_insert_with(|| vec![0.0; grad.len()]);
        let v = self.v[slot].get_or_insert_with(|| vec![0.0; grad.len()]);
        for i in 0..grad.len() {
            let g = grad[i] * step.clip_scale;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / step.bc1;
            let v_hat = v[i] / step.bc2;
            theta[i] -= step.lr_t * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    #[cfg(test)]
    fn steps_taken(&self) -> usize {
        self.t
    }
}

/// Per-step factors shared by every parameter update in one Adam step.
pub struct AdamStep {
    clip_scale: f64,
    lr_t: f64,
    bc1: f64,
    bc2: f64,
}

// ── evaluation ──────────────────────────────────────────────────────

/// Drop special tokens, keeping surface tokens in order.
pub fn strip_specials(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t >= NUM_SPECIALS).collect()
}

/// Corpus BLEU of greedy decodes against the corpus references.
pub fn evaluate_bleu(model: &Model, corpus: &ParallelCorpus) -> Result<f64> {
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for pair in &corpus.pairs {
        let decoded = model.decode_greedy(&pair.src, BOS, EOS, DECODE_EXTRA)?;
        hyps.push(strip_specials(&decoded));
        refs.push(strip_specials(&pair.tgt));
    }
    corpus_bleu(&hyps, &refs)
}

// ── training loop ───────────────────────────────────────────────────

/// One recorded scalar, for metrics files.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// What a training run produced.
pub struct TrainOutcome {
    /// The best dev-BLEU model if evaluation ran, otherwise the final model.
    pub model: Model,
    pub best_dev_bleu: Option<f64>,
    pub metrics: Vec<MetricRecord>,
}

/// Train `model` on `corpora.train`, updating only the groups in
/// `trainable`. Dev BLEU is measured every `eval_every` steps and at the
/// final step; the best-scoring state is returned (ties keep the earliest).
pub fn train(
    mut model: Model,
    trainable: &[GroupTag],
    corpora: &Corpora,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if trainable.is_empty() {
        return Err(Error::Config("no trainable parameter groups".into()));
    }
    if corpora.train.len() < cfg.batch_size {
        return Err(Error::Contract(format!(
            "training set ({} pairs) is smaller than one batch ({})",
            corpora.train.len(),
            cfg.batch_size
        )));
    }

    let mut optimizer = Adam::new(model.registry().len(), cfg);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, Model)> = None;

    let mut order: Vec<usize> = (0..corpora.train.len()).collect();
    let mut epoch = 0usize;
    let mut cursor = order.len(); // forces a shuffle before the first batch

    for step in 1..=cfg.max_steps {
        if cursor + cfg.batch_size > order.len() {
            // new epoch: reshuffle, drop the ragged tail of the previous one
            let mut rng = stream(cfg.seed, &format!("shuffle/{epoch}"));
            order.shuffle(&mut rng);
            epoch += 1;
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let dropout_seed = derive_seed(cfg.seed, &format!("step/{step}"));
        let mut fwd = model.forward(ForwardMode::Train { dropout_seed }, trainable);

        let total_tokens: usize = batch
            .iter()
            .map(|&i| corpora.train.pairs[i].tgt.len() - 1)
            .sum();
        let mut batch_loss = None;
        for &i in batch {
            let pair = &corpora.train.pairs[i];
            let (loss, tokens) = fwd.sentence_loss(&pair.src, &pair.tgt, cfg.smoothing)?;
            let weighted = fwd
                .graph
                .scale(loss, tokens as f64 / total_tokens as f64)?;
            batch_loss = Some(match batch_loss {
                None => weighted,
                Some(acc) => fwd.graph.add(acc, weighted)?,
            });
        }
        let batch_loss = batch_loss.expect("batch is non-empty");
        let loss_value = fwd.graph.data(batch_loss)[0];
        fwd.graph.backward(batch_loss)?;

        // registry order keeps clipping and updates deterministic
        let grads: Vec<(usize, Vec<f64>)> = (0..model.registry().len())
            .filter_map(|idx| fwd.grad_of(idx).map(|g| (idx, g.to_vec())))
            .collect();
        drop(fwd);

        let opt_step = optimizer.begin_step(grads.iter().map(|(_, g)| g.as_slice()));
        for (idx, grad) in &grads {
            optimizer.apply(&opt_step, *idx, model.param_data_mut(*idx), grad);
        }

        metrics.push(MetricRecord {
            step,
            metric: "train_loss".into(),
            value: loss_value,
        });

        let eval_now = cfg.eval_every > 0
            && (step % cfg.eval_every == 0 || step == cfg.max_steps);
        if eval_now {
            let bleu = evaluate_bleu(&model, &corpora.dev)?;
            metrics.push(MetricRecord {
                step,
                metric: "dev_bleu".into(),
                value: bleu,
            });
            let improved = best.as_ref().map(|(b, _)| bleu > *b).unwrap_or(true);
            if improved {
                best = Some((bleu, model.clone()));
            }
        }
    }

    let (best_dev_bleu, out_model) = match best {
        Some((b, m)) => (Some(b), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model: out_model,
        best_dev_bleu,
        metrics,
    })
}
