//! Language-model assembly: token embedding, sinusoidal positions, a stack of
//! blocks, a final LayerNorm and a (tied by default) output projection.

pub mod checkpoint;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::blocks::{
    block_forward, normal_tensor, BlockCtx, BlockDims, BlockParams, BlockVariant, Dropout, InitScheme, LayerNormParams,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Precision, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Causal,
    Masked,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Causal => "causal",
            Self::Masked => "masked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "causal" | "clm" => Some(Self::Causal),
            "masked" | "mlm" => Some(Self::Masked),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub variant: BlockVariant,
    pub objective: Objective,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub seed: u64,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Token embeddings are multiplied by √d_model before positions are added.
    pub scale_embeddings: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ffn: 256,
            max_seq_len: 64,
            variant: BlockVariant::normformer(),
            objective: Objective::Causal,
            tie_embeddings: true,
            dropout: 0.0,
            seed: 1,
            ln_eps: 1e-5,
            init_std: 0.02,
            scale_embeddings: true,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail(format!(
                "d_model ({}) must be even for sinusoidal positions",
                self.d_model
            ));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size ({}) must be at least 2", self.vocab_size));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_ffn == 0 || self.max_seq_len == 0 {
            return fail("d_ffn and max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps ({}) must be positive", self.ln_eps));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std ({}) must be positive", self.init_std));
        }
        self.variant.validate()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
        }
    }
}

/// Closed-form parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub added_by_modifications: usize,
}

impl ParamCount {
    pub fn added_fraction(&self) -> f64 {
        self.added_by_modifications as f64 / self.total as f64
    }
}

/// Counts parameters without allocating them.
///
/// Per layer, a Pre-LN block holds `4d² + 4d` attention weights and biases,
/// `2·d·d_ffn + d_ffn + d` FFN weights and biases, and two LayerNorms. The
/// NormFormer additions are
///
/// ```text
/// post-attention LN   ln(d)
/// FFN LN              ln(d_ffn)
/// head scales         n_heads
/// residual scale      d
/// q/k/v LNs           3·ln(d)
/// ```
///
/// where `ln(n)` is `2n`, or `n` for the bias-free LN style. The model adds
/// `vocab·d` embedding entries, a final LN, and `d·vocab` more when the
/// output projection is untied.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let d = config.d_model;
    let f = config.d_ffn;
    let v = &config.variant;
    let ln = |n: usize| v.ln_style.params_per_ln(n);
    let base_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 2 * ln(d);
    let mut added_layer = 0;
    if v.post_attn_ln {
        added_layer += ln(d);
    }
    if v.ffn_ln {
        added_layer += ln(f);
    }
    if v.head_scale {
        added_layer += config.n_heads;
    }
    if v.res_scale {
        added_layer += d;
    }
    if v.qkv_ln {
        added_layer += 3 * ln(d);
    }
    let mut shared = config.vocab_size * d + ln(d);
    if !config.tie_embeddings {
        shared += d * config.vocab_size;
    }
    let added = config.n_layers * added_layer;
    ParamCount {
        total: shared + config.n_layers * base_layer + added,
        added_by_modifications: added,
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal positions need an even d_model, got {d_model}"
        )));
    }
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be positive".into()));
    }
    let mut pe = Tensor::zeros(&[seq_len, d_model]);
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            pe.set(&[pos, 2 * i], angle.sin());
            pe.set(&[pos, 2 * i + 1], angle.cos());
        }
    }
    Ok(pe)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln: LayerNormParams<T>,
    /// `None` when tied to the token embedding.
    pub output_projection: Option<T>,
}

impl<T> ModelParams<T> {
    /// Visits every parameter with its full name
    /// (`token_embedding`, `blocks.{l}.{name}`, `final_ln.*`, `output_projection`).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("token_embedding", &self.token_embedding);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, t| f(&format!("blocks.{l}.{n}"), t));
        }
        f("final_ln.gamma", &self.final_ln.gamma);
        if let Some(b) = &self.final_ln.beta {
            f("final_ln.beta", b);
        }
        if let Some(o) = &self.output_projection {
            f("output_projection", o);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("token_embedding", &mut self.token_embedding);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, t| f(&format!("blocks.{l}.{n}"), t));
        }
        f("final_ln.gamma", &mut self.final_ln.gamma);
        if let Some(b) = &mut self.final_ln.beta {
            f("final_ln.beta", b);
        }
        if let Some(o) = &mut self.output_projection {
            f("output_projection", o);
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        let token_embedding = f("token_embedding", &self.token_embedding);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| b.map(&mut |n, t| f(&format!("blocks.{l}.{n}"), t)))
            .collect();
        let final_ln = LayerNormParams {
            gamma: f("final_ln.gamma", &self.final_ln.gamma),
            beta: self.final_ln.beta.as_ref().map(|b| f("final_ln.beta", b)),
        };
        let output_projection = self.output_projection.as_ref().map(|o| f("output_projection", o));
        ModelParams {
            token_embedding,
            blocks,
            final_ln,
            output_projection,
        }
    }

    /// Mutable references to every parameter, in visiting order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.extend(b.leaves_mut());
        }
        self.final_ln.push_leaves(&mut out);
        if let Some(o) = &mut self.output_projection {
            out.push(o);
        }
        out
    }

    /// Parameters in visiting order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let init = InitScheme {
            std: config.init_std,
            ..InitScheme::gpt2(config.n_layers)
        };
        let token_embedding = normal_tensor(&mut rng, &[config.vocab_size, d], config.init_std);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(&config.variant, config.block_dims(), init, &mut rng))
            .collect();
        let final_ln = LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: config.variant.ln_style.has_bias().then(|| Tensor::zeros(&[d])),
        };
        let output_projection =
            (!config.tie_embeddings).then(|| normal_tensor(&mut rng, &[d, config.vocab_size], config.init_std));
        Ok(Self {
            token_embedding,
            blocks,
            final_ln,
            output_projection,
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, t| Tensor::zeros(t.shape()))
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        let a = self.flatten();
        let b = other.flatten();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub params: ModelParams<Var>,
    pub block_outputs: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = count_parameters(&config).total;
        if params.blocks.len() != config.n_layers
            || params.num_params() != expected
            || params.blocks.iter().any(|b| !b.matches_variant(&config.variant))
        {
            return Err(Error::InvalidArgument(
                "parameters do not match the model config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::InvalidArgument(format!(
                "{} tokens cannot be split into sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass over `tokens` (a batch of sequences of length
    /// `seq_len`, flattened row-major) on `g`, binding parameters as leaves.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        seq_len: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.forward_graph_with(g, &self.params, tokens, seq_len, dropout_rng)
    }

    /// As [`Model::forward_graph`], with explicit parameter values.
    pub fn forward_graph_with(
        &self,
        g: &mut Graph,
        params: &ModelParams<Tensor>,
        tokens: &[usize],
        seq_len: usize,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.check_tokens(tokens, seq_len)?;
        let cfg = &self.config;
        let pv = params.map(&mut |_, t| g.leaf(t.clone()));
        let batch = tokens.len() / seq_len;

        let mut x = g.embedding(pv.token_embedding, tokens)?;
        if cfg.scale_embeddings {
            x = g.scale(x, (cfg.d_model as f64).sqrt());
        }
        let pe = sinusoidal_positions(seq_len, cfg.d_model)?;
        let mut tiled = Vec::with_capacity(batch * pe.len());
        for _ in 0..batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.leaf(Tensor::new(vec![batch * seq_len, cfg.d_model], tiled)?);
        x = g.add(x, pe)?;

        let dropout = match dropout_rng {
            Some(rng) if cfg.dropout > 0.0 => Some(Dropout { p: cfg.dropout, rng }),
            _ => None,
        };
        let mut ctx = BlockCtx {
            variant: cfg.variant,
            n_heads: cfg.n_heads,
            seq_len,
            causal: cfg.objective == Objective::Causal,
            ln_eps: cfg.ln_eps,
            dropout,
        };
        let mut block_outputs = Vec::with_capacity(cfg.n_layers);
        for bp in &pv.blocks {
            x = block_forward(g, x, bp, &mut ctx)?;
            block_outputs.push(x);
        }
        let h = g.layer_norm(
            x,
            pv.final_ln.gamma,
            pv.final_ln.beta,
            cfg.ln_eps,
            cfg.variant.ln_style.center(),
        )?;
        let logits = match pv.output_projection {
            Some(w) => g.matmul(h, w)?,
            None => g.matmul_bt(h, pv.token_embedding)?,
        };
        Ok(Forward {
            params: pv,
            block_outputs,
            logits,
        })
    }

    fn eval_logits(&self, tokens: &[usize], objective: Objective) -> Result<Tensor> {
        let model = if self.config.objective == objective {
            std::borrow::Cow::Borrowed(self)
        } else {
            let mut m = self.clone();
            m.config.objective = objective;
            std::borrow::Cow::Owned(m)
        };
        let mut g = Graph::with_precision(self.config.precision);
        let fwd = model.forward_graph(&mut g, tokens, tokens.len(), None)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Causal logits `[seq, vocab]` for one sequence.
    pub fn forward_clm(&self, tokens: &[usize]) -> Result<Tensor> {
        self.eval_logits(tokens, Objective::Causal)
    }

    /// Bidirectional logits `[seq, vocab]` for one sequence. The loss is
    /// taken only at `mask_positions`, which must index into `tokens`.
    pub fn forward_mlm(&self, tokens: &[usize], mask_positions: &BTreeSet<usize>) -> Result<Tensor> {
        if let Some(&p) = mask_positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::InvalidArgument(format!(
                "mask position {p} outside sequence of length {}",
                tokens.len()
            )));
        }
        self.eval_logits(tokens, Objective::Masked)
    }
}
