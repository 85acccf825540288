//! Encoder–decoder Transformer with a named, group-tagged parameter registry.
//!
//! Every parameter belongs to exactly one of five groups:
//!
//! * `Src`   — source token embeddings, source positions, source embedding LN
//! * `Tgt`   — tied target token embeddings (input *and* output projection),
//!   target positions, target embedding LN
//! * `Enc`   — encoder self-attention, feed-forward, and their layer norms
//! * `Dec`   — decoder self-attention, feed-forward, and their layer norms
//! * `Xattn` — cross-attention Q/K/V/O projections and the layer norm that
//!   follows each cross-attention sublayer
//!
//! The partition is what makes selective fine-tuning and embedding swaps
//! well-defined: a regime freezes or re-initializes whole groups, and a
//! checkpoint delta stores whole groups.
//!
//! Architecture (post-norm): `x = LN(x + Dropout(Sublayer(x)))` around each
//! sublayer; embeddings are scaled by `sqrt(d_model)`, summed with learned
//! positions, layer-normed, then dropped out. Output logits are the decoder
//! states times the transposed target embedding table — no extra projection.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, TensorId};

/// Additive mask value for disallowed attention positions. Large enough that
/// `exp(mask - rowmax)` underflows to exactly 0.0, so masked positions
/// contribute nothing — bit-for-bit — to attention output.
pub const ATTN_MASK: f64 = -1e30;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

// ── parameter groups ────────────────────────────────────────────────

/// The five disjoint parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    Src,
    Tgt,
    Enc,
    Dec,
    Xattn,
}

impl GroupTag {
    pub const ALL: [GroupTag; 5] = [
        GroupTag::Src,
        GroupTag::Tgt,
        GroupTag::Enc,
        GroupTag::Dec,
        GroupTag::Xattn,
    ];

    /// Stable uppercase label, used in manifests and CLI output.
    pub fn label(self) -> &'static str {
        match self {
            GroupTag::Src => "SRC",
            GroupTag::Tgt => "TGT",
            GroupTag::Enc => "ENC",
            GroupTag::Dec => "DEC",
            GroupTag::Xattn => "XATTN",
        }
    }

    /// Inverse of [`label`](Self::label).
    pub fn parse(s: &str) -> Result<GroupTag> {
        GroupTag::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

impl std::fmt::Display for GroupTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

// ── configuration ───────────────────────────────────────────────────

/// Architecture hyperparameters. Vocabulary sizes are per side; everything
/// else is shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl Default for ModelConfig {
    /// The desk-scale configuration every experiment in this lab runs at.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_len: 64,
            dropout: 0.1,
            src_vocab_size: 604,
            tgt_vocab_size: 604,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("need at least one layer per stack".into()));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("d_ff and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.src_vocab_size < 4 || self.tgt_vocab_size < 4 {
            return Err(Error::Config(
                "vocabularies must hold at least the four special tokens".into(),
            ));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ── parameter specs and initialization ──────────────────────────────

#[derive(Debug, Clone, Copy)]
enum InitKind {
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    /// All zeros (biases, LN biases).
    Zeros,
    /// All ones (LN gains).
    Ones,
    /// Normal(0, d_model^(-1/2)) (token and position embeddings).
    Embedding { d_model: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub(crate) name: String,
    pub(crate) tag: GroupTag,
    pub(crate) shape: Vec<usize>,
    init: InitKind,
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, tag: GroupTag, d: usize) {
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            name: format!("{prefix}.{proj}"),
            tag,
            shape: vec![d, d],
            init: InitKind::Xavier { fan_in: d, fan_out: d },
        });
        out.push(ParamSpec {
            name: format!("{prefix}.{}", proj.replace('w', "b")),
            tag,
            shape: vec![d],
            init: InitKind::Zeros,
        });
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, tag: GroupTag, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gain"),
        tag,
        shape: vec![d],
        init: InitKind::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        tag,
        shape: vec![d],
        init: InitKind::Zeros,
    });
}

fn ff_specs(out: &mut Vec<ParamSpec>, prefix: &str, tag: GroupTag, d: usize, d_ff: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w1"),
        tag,
        shape: vec![d, d_ff],
        init: InitKind::Xavier { fan_in: d, fan_out: d_ff },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b1"),
        tag,
        shape: vec![d_ff],
        init: InitKind::Zeros,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.w2"),
        tag,
        shape: vec![d_ff, d],
        init: InitKind::Xavier { fan_in: d_ff, fan_out: d },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b2"),
        tag,
        shape: vec![d],
        init: InitKind::Zeros,
    });
}

fn emb_specs(out: &mut Vec<ParamSpec>, side: &str, tag: GroupTag, vocab: usize, cfg: &ModelConfig) {
    out.push(ParamSpec {
        name: format!("{side}.tok_emb"),
        tag,
        shape: vec![vocab, cfg.d_model],
        init: InitKind::Embedding { d_model: cfg.d_model },
    });
    out.push(ParamSpec {
        name: format!("{side}.pos_emb"),
        tag,
        shape: vec![cfg.max_len, cfg.d_model],
        init: InitKind::Embedding { d_model: cfg.d_model },
    });
    ln_specs(out, &format!("{side}.emb_ln"), tag, cfg.d_model);
}

/// The full parameter list, in canonical definition order. This order is the
/// registry order and the checkpoint payload order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    emb_specs(&mut out, "src", GroupTag::Src, cfg.src_vocab_size, cfg);
    emb_specs(&mut out, "tgt", GroupTag::Tgt, cfg.tgt_vocab_size, cfg);
    for i in 0..cfg.n_enc_layers {
        attn_specs(&mut out, &format!("enc.{i}.self_attn"), GroupTag::Enc, d);
        ln_specs(&mut out, &format!("enc.{i}.self_ln"), GroupTag::Enc, d);
        ff_specs(&mut out, &format!("enc.{i}.ff"), GroupTag::Enc, d, cfg.d_ff);
        ln_specs(&mut out, &format!("enc.{i}.ff_ln"), GroupTag::Enc, d);
    }
    for i in 0..cfg.n_dec_layers {
        attn_specs(&mut out, &format!("dec.{i}.self_attn"), GroupTag::Dec, d);
        ln_specs(&mut out, &format!("dec.{i}.self_ln"), GroupTag::Dec, d);
        attn_specs(&mut out, &format!("dec.{i}.xattn"), GroupTag::Xattn, d);
        ln_specs(&mut out, &format!("dec.{i}.xattn_ln"), GroupTag::Xattn, d);
        ff_specs(&mut out, &format!("dec.{i}.ff"), GroupTag::Dec, d, cfg.d_ff);
        ln_specs(&mut out, &format!("dec.{i}.ff_ln"), GroupTag::Dec, d);
    }
    out
}

fn init_data(init: InitKind, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        InitKind::Xavier { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        }
        InitKind::Zeros => vec![0.0; len],
        InitKind::Ones => vec![1.0; len],
        InitKind::Embedding { d_model } => {
            let normal = Normal::new(0.0, (d_model as f64).powf(-0.5))
                .expect("valid embedding stddev");
            (0..len).map(|_| normal.sample(rng)).collect()
        }
    }
}

// ── registry ────────────────────────────────────────────────────────

/// One named, group-tagged parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tag: GroupTag,
    pub tensor: Tensor,
}

/// All parameters of a model, in canonical definition order.
#[derive(Debug, Clone)]
pub struct ParameterRegistry {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParameterRegistry {
    fn new(params: Vec<Param>) -> Self {
        let by_name = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ParameterRegistry { params, by_name }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Registry indices of every parameter carrying one of `tags`.
    pub fn indices_by_tags(&self, tags: &[GroupTag]) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| tags.contains(&p.tag))
            .map(|(i, _)| i)
            .collect()
    }
}

// ── model ───────────────────────────────────────────────────────────

/// A concrete model: configuration plus instantiated parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    registry: ParameterRegistry,
}

impl Model {
    /// Build a freshly initialized model. Each parameter draws from its own
    /// named RNG stream, so initialization is independent of construction
    /// order and reproducible per parameter.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let len = spec.shape.iter().product();
                let mut rng = stream(seed, &format!("init/{}", spec.name));
                let data = init_data(spec.init, len, &mut rng);
                Ok(Param {
                    tensor: Tensor::new(spec.shape, data)?,
                    name: spec.name,
                    tag: spec.tag,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            registry: ParameterRegistry::new(params),
        })
    }

    /// Assemble a model from a configuration and tensors in canonical
    /// parameter order, with no random initialization. Used when every
    /// value comes from elsewhere (checkpoints, group transplants).
    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Model> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters for this configuration, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(tensors)
            .map(|(spec, tensor)| {
                if tensor.shape() != spec.shape.as_slice() {
                    return Err(Error::Shape {
                        op: "from_parts",
                        lhs: spec.shape.clone(),
                        rhs: tensor.shape().to_vec(),
                    });
                }
                Ok(Param { name: spec.name, tag: spec.tag, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            registry: ParameterRegistry::new(params),
        })
    }

    /// Per-group scalar parameter counts for a configuration, without
    /// allocating any data. Useful for storage accounting at any scale.
    pub fn count_by_group(config: &ModelConfig) -> HashMap<GroupTag, usize> {
        let mut counts: HashMap<GroupTag, usize> =
            GroupTag::ALL.iter().map(|&t| (t, 0)).collect();
        for spec in param_specs(config) {
            *counts.get_mut(&spec.tag).unwrap() += spec.shape.iter().product::<usize>();
        }
        counts
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.registry.iter().map(|p| p.tensor.len()).sum()
    }

    /// Scalar parameter count for one group.
    pub fn param_count_by_tag(&self, tag: GroupTag) -> usize {
        self.registry
            .iter()
            .filter(|p| p.tag == tag)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Mutable view of one parameter's data (for optimizer updates and
    /// group transplants). Copy-on-write: cheap unless the buffer is shared.
    pub fn param_data_mut(&mut self, idx: usize) -> &mut [f64] {
        self.registry.params[idx].tensor.data_mut()
    }

    /// Replace one parameter's tensor. Shape must match the registry entry.
    pub fn set_param(&mut self, idx: usize, tensor: Tensor) -> Result<()> {
        let have = &self.registry.params[idx];
        if have.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: have.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.registry.params[idx].tensor = tensor;
        Ok(())
    }

    /// Start a forward pass. `trainable` lists the groups whose parameters
    /// should receive gradients; everything else enters the graph frozen.
    pub fn forward(&self, mode: ForwardMode, trainable: &[GroupTag]) -> Forward<'_> {
        let trainable_mask = self
            .registry
            .iter()
            .map(|p| trainable.contains(&p.tag))
            .collect();
        let (is_train, rng) = match mode {
            ForwardMode::Train { dropout_seed } => (true, stream(dropout_seed, "dropout")),
            ForwardMode::Eval => (false, stream(0, "dropout-unused")),
        };
        Forward {
            model: self,
            graph: Graph::new(),
            leaf_ids: vec![None; self.registry.len()],
            trainable_mask,
            tied_logit_weights: None,
            is_train,
            rng,
        }
    }

    /// Greedy decode: encode `src` once, then extend from BOS one token at a
    /// time, picking the highest logit (ties break toward the lowest token
    /// id). Stops after emitting `eos`, after `src.len() + max_extra`
    /// generated tokens, or when the target context window fills, whichever
    /// comes first. The returned sequence includes the leading `bos` and the
    /// trailing `eos` when one was produced.
    pub fn decode_greedy(
        &self,
        src: &[usize],
        bos: usize,
        eos: usize,
        max_extra: usize,
    ) -> Result<Vec<usize>> {
        let mut fwd = self.forward(ForwardMode::Eval, &[]);
        let enc = fwd.encode(src)?;
        let enc_data = fwd.graph.data(enc).to_vec();
        let enc_shape = fwd.graph.shape(enc).to_vec();

        let cap = src.len() + max_extra;
        let vocab = self.config.tgt_vocab_size;
        let mut out = vec![bos];
        loop {
            let mut f = self.forward(ForwardMode::Eval, &[]);
            let enc_c = f.graph.constant(enc_shape.clone(), enc_data.clone())?;
            let logits = f.decode_logits(enc_c, &out)?;
            let data = f.graph.data(logits);
            let row = &data[(out.len() - 1) * vocab..out.len() * vocab];
            let next = argmax_lowest(row);
            out.push(next);
            if next == eos || out.len() - 1 >= cap || out.len() >= self.config.max_len {
                return Ok(out);
            }
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Finite-difference check of the full translation loss: a seeded model,
/// one fixed sentence pair, dropout off, no label smoothing, `n_coords`
/// sampled parameter coordinates. `perturb` adds that amount to one checked
/// analytic coordinate — the negative control proving the check can fail.
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    n_coords: usize,
    perturb: Option<f64>,
) -> Result<crate::tensor::FiniteDiffReport> {
    use crate::tensor::{finite_diff_check, sample_coords, GRADCHECK_H, GRADCHECK_TOL};

    config.validate()?;
    let src = [4usize, 5, 6];
    let tgt = [1usize, 7, 8, 2];
    if config.src_vocab_size < 7 || config.tgt_vocab_size < 9 || config.max_len < 4 {
        return Err(Error::Contract(
            "model gradcheck needs vocabularies of at least 7/9 tokens and max_len >= 4".into(),
        ));
    }

    let base = Model::build(config.clone(), seed)?;
    let sizes: Vec<usize> = base.registry().iter().map(|p| p.tensor.len()).collect();
    let total: usize = sizes.iter().sum();
    let starts: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let v = *acc;
            *acc += s;
            Some(v)
        })
        .collect();

    let mut theta = vec![0.0; total];
    for (idx, (&start, &size)) in starts.iter().zip(&sizes).enumerate() {
        theta[start..start + size].copy_from_slice(base.registry().get(idx).tensor.data());
    }

    let mut fwd = base.forward(ForwardMode::Eval, &GroupTag::ALL);
    let (loss, _) = fwd.sentence_loss(&src, &tgt, 0.0)?;
    fwd.graph.backward(loss)?;
    let mut analytic = vec![0.0; total];
    for (idx, (&start, &size)) in starts.iter().zip(&sizes).enumerate() {
        if let Some(g) = fwd.grad_of(idx) {
            analytic[start..start + size].copy_from_slice(g);
        }
    }
    drop(fwd);

    let coords = sample_coords(total, n_coords, seed);
    if let Some(eps) = perturb {
        analytic[coords[0]] += eps;
    }

    let loss_at = |t: &[f64]| -> f64 {
        let mut m = base.clone();
        for (idx, (&start, &size)) in starts.iter().zip(&sizes).enumerate() {
            m.param_data_mut(idx).copy_from_slice(&t[start..start + size]);
        }
        let mut f = m.forward(ForwardMode::Eval, &[]);
        let (loss, _) = f.sentence_loss(&src, &tgt, 0.0).expect("same shapes");
        f.graph.data(loss)[0]
    };
    Ok(finite_diff_check(loss_at, &theta, &analytic, &coords, GRADCHECK_H, GRADCHECK_TOL))
}

// ── forward pass ────────────────────────────────────────────────────

/// Whether a forward pass samples dropout.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    /// Dropout active at the configured rate, masks drawn from a stream
    /// derived from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Dropout off; evaluation is deterministic.
    Eval,
}

/// One computation graph bound to a model's parameters. Parameter leaves are
/// inserted lazily and exactly once each, so a parameter used several times
/// (the tied target embedding) accumulates gradient from all of its uses.
pub struct Forward<'m> {
    model: &'m Model,
    pub graph: Graph,
    leaf_ids: Vec<Option<TensorId>>,
    trainable_mask: Vec<bool>,
    tied_logit_weights: Option<TensorId>,
    is_train: bool,
    rng: ChaCha8Rng,
}

impl<'m> Forward<'m> {
    /// Graph leaf for registry entry `idx`, inserting it on first use.
    pub fn param_leaf(&mut self, idx: usize) -> TensorId {
        if let Some(id) = self.leaf_ids[idx] {
            return id;
        }
        let mut tensor = self.model.registry.get(idx).tensor.clone();
        tensor.requires_grad = self.trainable_mask[idx];
        let id = self.graph.leaf(tensor);
        self.leaf_ids[idx] = Some(id);
        id
    }

    fn p(&mut self, name: &str) -> TensorId {
        let idx = self
            .model
            .registry
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not in registry"));
        self.param_leaf(idx)
    }

    /// Gradient accumulated for registry entry `idx`, if that parameter was
    /// used, trainable, and `backward` has run.
    pub fn grad_of(&self, idx: usize) -> Option<&[f64]> {
        self.leaf_ids[idx].and_then(|id| self.graph.grad(id))
    }

    fn dropout(&mut self, x: TensorId) -> Result<TensorId> {
        let rate = self.model.config.dropout;
        if !self.is_train || rate == 0.0 {
            return Ok(x);
        }
        self.graph.dropout(x, rate, &mut self.rng)
    }

    fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Contract(format!("{what} sequence is empty")));
        }
        if len > self.model.config.max_len {
            return Err(Error::Contract(format!(
                "{what} sequence length {len} exceeds max_len {}",
                self.model.config.max_len
            )));
        }
        Ok(())
    }

    /// Token + position embedding pipeline for one side ("src" or "tgt").
    fn embed(&mut self, side: &str, tokens: &[usize]) -> Result<TensorId> {
        let d = self.model.config.d_model;
        let tok_emb = self.p(&format!("{side}.tok_emb"));
        let pos_emb = self.p(&format!("{side}.pos_emb"));
        let gain = self.p(&format!("{side}.emb_ln.gain"));
        let bias = self.p(&format!("{side}.emb_ln.bias"));

        let tok = self.graph.gather(tok_emb, tokens)?;
        let tok = self.graph.scale(tok, (d as f64).sqrt())?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = self.graph.gather(pos_emb, &positions)?;
        let x = self.graph.add(tok, pos)?;
        let x = self.graph.layer_norm(x, gain, bias, LN_EPS)?;
        self.dropout(x)
    }

    /// Multi-head attention. Queries come from `q_in`, keys and values from
    /// `kv_in`; `mask` is an optional additive [Tq, Tk] bias.
    fn attention(
        &mut self,
        prefix: &str,
        q_in: TensorId,
        kv_in: TensorId,
        mask: Option<TensorId>,
    ) -> Result<TensorId> {
        let cfg = &self.model.config;
        let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());

        let wq = self.p(&format!("{prefix}.wq"));
        let bq = self.p(&format!("{prefix}.bq"));
        let wk = self.p(&format!("{prefix}.wk"));
        let bk = self.p(&format!("{prefix}.bk"));
        let wv = self.p(&format!("{prefix}.wv"));
        let bv = self.p(&format!("{prefix}.bv"));
        let wo = self.p(&format!("{prefix}.wo"));
        let bo = self.p(&format!("{prefix}.bo"));

        let q = self.graph.matmul(q_in, wq)?;
        let q = self.graph.add(q, bq)?;
        let k = self.graph.matmul(kv_in, wk)?;
        let k = self.graph.add(k, bk)?;
        let v = self.graph.matmul(kv_in, wv)?;
        let v = self.graph.add(v, bv)?;

        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            let kt = self.graph.transpose(kh)?;
            let scores = self.graph.matmul(qh, kt)?;
            let scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let scores = match mask {
                Some(m) => self.graph.add(scores, m)?,
                None => scores,
            };
            let attn = self.graph.softmax(scores)?;
            heads.push(self.graph.matmul(attn, vh)?);
        }
        let merged = self.graph.concat(&heads)?;
        let out = self.graph.matmul(merged, wo)?;
        self.graph.add(out, bo)
    }

    /// Post-norm residual sublayer: `LN(x + Dropout(sub))`.
    fn residual(&mut self, ln_prefix: &str, x: TensorId, sub: TensorId) -> Result<TensorId> {
        let gain = self.p(&format!("{ln_prefix}.gain"));
        let bias = self.p(&format!("{ln_prefix}.bias"));
        let sub = self.dropout(sub)?;
        let y = self.graph.add(x, sub)?;
        self.graph.layer_norm(y, gain, bias, LN_EPS)
    }

    fn feed_forward(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.add(h, b1)?;
        let h = self.graph.relu(h)?;
        let h = self.graph.matmul(h, w2)?;
        self.graph.add(h, b2)
    }

    fn causal_mask(&mut self, t: usize) -> Result<TensorId> {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                data[i * t + j] = ATTN_MASK;
            }
        }
        self.graph.constant(vec![t, t], data)
    }

    /// Run the encoder over raw source tokens. Returns the [T, d] encoder
    /// states.
    pub fn encode(&mut self, src: &[usize]) -> Result<TensorId> {
        self.check_len("source", src.len())?;
        let mut x = self.embed("src", src)?;
        for i in 0..self.model.config.n_enc_layers {
            let attn = self.attention(&format!("enc.{i}.self_attn"), x, x, None)?;
            x = self.residual(&format!("enc.{i}.self_ln"), x, attn)?;
            let ff = self.feed_forward(&format!("enc.{i}.ff"), x)?;
            x = self.residual(&format!("enc.{i}.ff_ln"), x, ff)?;
        }
        Ok(x)
    }

    /// Run the decoder over a BOS-led target prefix against encoder states
    /// (an `encode` result or a constant leaf holding saved states). Returns
    /// [T, tgt_vocab] logits, one row per prefix position.
    pub fn decode_logits(&mut self, enc_states: TensorId, tgt_prefix: &[usize]) -> Result<TensorId> {
        self.check_len("target", tgt_prefix.len())?;
        let t = tgt_prefix.len();
        let mask = self.causal_mask(t)?;
        let mut x = self.embed("tgt", tgt_prefix)?;
        for i in 0..self.model.config.n_dec_layers {
            let attn = self.attention(&format!("dec.{i}.self_attn"), x, x, Some(mask))?;
            x = self.residual(&format!("dec.{i}.self_ln"), x, attn)?;
            let xatt = self.attention(&format!("dec.{i}.xattn"), x, enc_states, None)?;
            x = self.residual(&format!("dec.{i}.xattn_ln"), x, xatt)?;
            let ff = self.feed_forward(&format!("dec.{i}.ff"), x)?;
            x = self.residual(&format!("dec.{i}.ff_ln"), x, ff)?;
        }
        // Tied output projection: logits = x · tok_embᵀ. The transpose is
        // cached so repeated sentences in one graph share it.
        let weights = match self.tied_logit_weights {
            Some(w) => w,
            None => {
                let emb = self.p("tgt.tok_emb");
                let w = self.graph.transpose(emb)?;
                self.tied_logit_weights = Some(w);
                w
            }
        };
        self.graph.matmul(x, weights)
    }

    /// Label-smoothed token-mean cross-entropy for one sentence pair.
    /// `tgt` must carry BOS and EOS; the decoder consumes `tgt[..n-1]` and
    /// predicts `tgt[1..]`. Returns the scalar loss id and the number of
    /// predicted tokens.
    pub fn sentence_loss(
        &mut self,
        src: &[usize],
        tgt: &[usize],
        smoothing: f64,
    ) -> Result<(TensorId, usize)> {
        if tgt.len() < 2 {
            return Err(Error::Contract(
                "target must hold at least BOS and EOS".into(),
            ));
        }
        let enc = self.encode(src)?;
        let logits = self.decode_logits(enc, &tgt[..tgt.len() - 1])?;
        let loss = self
            .graph
            .cross_entropy(logits, &tgt[1..], smoothing, None)?;
        Ok((loss, tgt.len() - 1))
    }
}
