//! Transformer layer variants: Post-LN, Pre-LN, and NormFormer.
//!
//! NormFormer adds, on top of Pre-LN, head-wise scaling of attention outputs,
//! a LayerNorm after the attention module, and a LayerNorm after the first FFN
//! activation. Residual scaling of the FFN branch and LayerNorm on the
//! projected queries, keys and values are available as extra toggles.
//!
//! Parameter bundles are generic over their leaf type so the same structure
//! holds tensors (storage, optimizer moments, gradients) and graph handles
//! (during a forward pass).

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arrangement {
    PostLn,
    PreLn,
    NormFormer,
}

impl Arrangement {
    pub fn name(self) -> &'static str {
        match self {
            Self::PostLn => "post_ln",
            Self::PreLn => "pre_ln",
            Self::NormFormer => "normformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "post_ln" => Some(Self::PostLn),
            "pre_ln" => Some(Self::PreLn),
            "normformer" => Some(Self::NormFormer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    ReluSquared,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::ReluSquared => "relu_squared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Self::Gelu),
            "relu_squared" | "relu2" => Some(Self::ReluSquared),
            _ => None,
        }
    }
}

/// `NoBiasNoMean` drops both the mean subtraction and the additive bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LnStyle {
    Standard,
    NoBiasNoMean,
}

impl LnStyle {
    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::NoBiasNoMean => "no_bias_no_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Self::Standard),
            "no_bias_no_mean" => Some(Self::NoBiasNoMean),
            _ => None,
        }
    }

    pub fn center(self) -> bool {
        self == Self::Standard
    }

    pub fn has_bias(self) -> bool {
        self == Self::Standard
    }

    /// Trainable entries in one LayerNorm over `d` features.
    pub fn params_per_ln(self, d: usize) -> usize {
        if self.has_bias() {
            2 * d
        } else {
            d
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockVariant {
    pub arrangement: Arrangement,
    pub head_scale: bool,
    pub post_attn_ln: bool,
    pub ffn_ln: bool,
    pub res_scale: bool,
    pub qkv_ln: bool,
    pub activation: Activation,
    pub ln_style: LnStyle,
}

impl BlockVariant {
    pub fn post_ln() -> Self {
        Self::bare(Arrangement::PostLn)
    }

    pub fn pre_ln() -> Self {
        Self::bare(Arrangement::PreLn)
    }

    /// Head scale, post-attention LN and FFN LN on; residual scaling and
    /// q/k/v LN off.
    pub fn normformer() -> Self {
        Self {
            head_scale: true,
            post_attn_ln: true,
            ffn_ln: true,
            ..Self::bare(Arrangement::NormFormer)
        }
    }

    fn bare(arrangement: Arrangement) -> Self {
        Self {
            arrangement,
            head_scale: false,
            post_attn_ln: false,
            ffn_ln: false,
            res_scale: false,
            qkv_ln: false,
            activation: Activation::Gelu,
            ln_style: LnStyle::Standard,
        }
    }

    pub fn any_modification(&self) -> bool {
        self.head_scale || self.post_attn_ln || self.ffn_ln || self.res_scale || self.qkv_ln
    }

    pub fn validate(&self) -> Result<()> {
        if self.arrangement != Arrangement::NormFormer && self.any_modification() {
            return Err(Error::Validation(format!(
                "{} blocks cannot enable NormFormer modifications",
                self.arrangement.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.arrangement.name())?;
        if self.arrangement == Arrangement::NormFormer {
            let flags = [
                ("head_scale", self.head_scale),
                ("post_attn_ln", self.post_attn_ln),
                ("ffn_ln", self.ffn_ln),
                ("res_scale", self.res_scale),
                ("qkv_ln", self.qkv_ln),
            ];
            let on: Vec<_> = flags.iter().filter(|(_, b)| *b).map(|(n, _)| *n).collect();
            write!(f, "[{}]", on.join("+"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub b_q: T,
    pub b_k: T,
    pub b_v: T,
    pub b_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadScaleParams<T> {
    pub gamma: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResScaleParams<T> {
    pub lambda: T,
}

/// One layer's parameters. `ln_pre_attn`/`ln_pre_ffn` are the per-sublayer
/// LayerNorms; in Post-LN blocks they are applied after the residual sum.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attention: AttentionParams<T>,
    pub ffn: FfnParams<T>,
    pub ln_pre_attn: LayerNormParams<T>,
    pub ln_pre_ffn: LayerNormParams<T>,
    pub ln_post_attn: Option<LayerNormParams<T>>,
    pub ln_ffn_mid: Option<LayerNormParams<T>>,
    pub ln_q: Option<LayerNormParams<T>>,
    pub ln_k: Option<LayerNormParams<T>>,
    pub ln_v: Option<LayerNormParams<T>>,
    pub head_scale: Option<HeadScaleParams<T>>,
    pub res_scale: Option<ResScaleParams<T>>,
}

/// Every per-layer parameter name, in traversal order.
pub const BLOCK_PARAM_NAMES: &[&str] = &[
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "attn.b_q",
    "attn.b_k",
    "attn.b_v",
    "attn.b_o",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln_pre_attn.gamma",
    "ln_pre_attn.beta",
    "ln_pre_ffn.gamma",
    "ln_pre_ffn.beta",
    "ln_post_attn.gamma",
    "ln_post_attn.beta",
    "ln_ffn_mid.gamma",
    "ln_ffn_mid.beta",
    "ln_q.gamma",
    "ln_q.beta",
    "ln_k.gamma",
    "ln_k.beta",
    "ln_v.gamma",
    "ln_v.beta",
    "head_scale.gamma",
    "res_scale.lambda",
];

impl<T> LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        if let Some(b) = &self.beta {
            f(&format!("{prefix}.beta"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        if let Some(b) = &mut self.beta {
            f(&format!("{prefix}.beta"), b);
        }
    }

    pub(crate) fn push_leaves<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gamma);
        if let Some(b) = &mut self.beta {
            out.push(b);
        }
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: self.beta.as_ref().map(|b| f(&format!("{prefix}.beta"), b)),
        }
    }
}

impl<T> BlockParams<T> {
    /// Calls `f` on every present parameter with its per-layer name, in
    /// [`BLOCK_PARAM_NAMES`] order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        let a = &self.attention;
        for (n, t) in [
            ("attn.w_q", &a.w_q),
            ("attn.w_k", &a.w_k),
            ("attn.w_v", &a.w_v),
            ("attn.w_o", &a.w_o),
            ("attn.b_q", &a.b_q),
            ("attn.b_k", &a.b_k),
            ("attn.b_v", &a.b_v),
            ("attn.b_o", &a.b_o),
        ] {
            f(n, t);
        }
        let p = &self.ffn;
        for (n, t) in [
            ("ffn.w1", &p.w1),
            ("ffn.b1", &p.b1),
            ("ffn.w2", &p.w2),
            ("ffn.b2", &p.b2),
        ] {
            f(n, t);
        }
        self.ln_pre_attn.visit("ln_pre_attn", f);
        self.ln_pre_ffn.visit("ln_pre_ffn", f);
        for (prefix, ln) in [
            ("ln_post_attn", &self.ln_post_attn),
            ("ln_ffn_mid", &self.ln_ffn_mid),
            ("ln_q", &self.ln_q),
            ("ln_k", &self.ln_k),
            ("ln_v", &self.ln_v),
        ] {
            if let Some(ln) = ln {
                ln.visit(prefix, f);
            }
        }
        if let Some(hs) = &self.head_scale {
            f("head_scale.gamma", &hs.gamma);
        }
        if let Some(rs) = &self.res_scale {
            f("res_scale.lambda", &rs.lambda);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        let a = &mut self.attention;
        f("attn.w_q", &mut a.w_q);
        f("attn.w_k", &mut a.w_k);
        f("attn.w_v", &mut a.w_v);
        f("attn.w_o", &mut a.w_o);
        f("attn.b_q", &mut a.b_q);
        f("attn.b_k", &mut a.b_k);
        f("attn.b_v", &mut a.b_v);
        f("attn.b_o", &mut a.b_o);
        let p = &mut self.ffn;
        f("ffn.w1", &mut p.w1);
        f("ffn.b1", &mut p.b1);
        f("ffn.w2", &mut p.w2);
        f("ffn.b2", &mut p.b2);
        self.ln_pre_attn.visit_mut("ln_pre_attn", f);
        self.ln_pre_ffn.visit_mut("ln_pre_ffn", f);
        for (prefix, ln) in [
            ("ln_post_attn", &mut self.ln_post_attn),
            ("ln_ffn_mid", &mut self.ln_ffn_mid),
            ("ln_q", &mut self.ln_q),
            ("ln_k", &mut self.ln_k),
            ("ln_v", &mut self.ln_v),
        ] {
            if let Some(ln) = ln {
                ln.visit_mut(prefix, f);
            }
        }
        if let Some(hs) = &mut self.head_scale {
            f("head_scale.gamma", &mut hs.gamma);
        }
        if let Some(rs) = &mut self.res_scale {
            f("res_scale.lambda", &mut rs.lambda);
        }
    }

    /// Mutable references to every present parameter, in visiting order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let BlockParams {
            attention: a,
            ffn: p,
            ln_pre_attn,
            ln_pre_ffn,
            ln_post_attn,
            ln_ffn_mid,
            ln_q,
            ln_k,
            ln_v,
            head_scale,
            res_scale,
        } = self;
        let mut out = vec![
            &mut a.w_q, &mut a.w_k, &mut a.w_v, &mut a.w_o, &mut a.b_q, &mut a.b_k, &mut a.b_v, &mut a.b_o, &mut p.w1,
            &mut p.b1, &mut p.w2, &mut p.b2,
        ];
        ln_pre_attn.push_leaves(&mut out);
        ln_pre_ffn.push_leaves(&mut out);
        for ln in [ln_post_attn, ln_ffn_mid, ln_q, ln_k, ln_v].into_iter().flatten() {
            ln.push_leaves(&mut out);
        }
        if let Some(hs) = head_scale {
            out.push(&mut hs.gamma);
        }
        if let Some(rs) = res_scale {
            out.push(&mut rs.lambda);
        }
        out
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        let a = &self.attention;
        let attention = AttentionParams {
            w_q: f("attn.w_q", &a.w_q),
            w_k: f("attn.w_k", &a.w_k),
            w_v: f("attn.w_v", &a.w_v),
            w_o: f("attn.w_o", &a.w_o),
            b_q: f("attn.b_q", &a.b_q),
            b_k: f("attn.b_k", &a.b_k),
            b_v: f("attn.b_v", &a.b_v),
            b_o: f("attn.b_o", &a.b_o),
        };
        let p = &self.ffn;
        let ffn = FfnParams {
            w1: f("ffn.w1", &p.w1),
            b1: f("ffn.b1", &p.b1),
            w2: f("ffn.w2", &p.w2),
            b2: f("ffn.b2", &p.b2),
        };
        let ln_pre_attn = self.ln_pre_attn.map("ln_pre_attn", f);
        let ln_pre_ffn = self.ln_pre_ffn.map("ln_pre_ffn", f);
        let ln_post_attn = self.ln_post_attn.as_ref().map(|l| l.map("ln_post_attn", f));
        let ln_ffn_mid = self.ln_ffn_mid.as_ref().map(|l| l.map("ln_ffn_mid", f));
        let ln_q = self.ln_q.as_ref().map(|l| l.map("ln_q", f));
        let ln_k = self.ln_k.as_ref().map(|l| l.map("ln_k", f));
        let ln_v = self.ln_v.as_ref().map(|l| l.map("ln_v", f));
        let head_scale = self.head_scale.as_ref().map(|h| HeadScaleParams {
            gamma: f("head_scale.gamma", &h.gamma),
        });
        let res_scale = self.res_scale.as_ref().map(|r| ResScaleParams {
            lambda: f("res_scale.lambda", &r.lambda),
        });
        BlockParams {
            attention,
            ffn,
            ln_pre_attn,
            ln_pre_ffn,
            ln_post_attn,
            ln_ffn_mid,
            ln_q,
            ln_k,
            ln_v,
            head_scale,
            res_scale,
        }
    }
}

/// Sizes and initialization scales for one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct InitScheme {
    pub std: f64,
    /// Extra factor applied to output-side projections (`w_o`, `w2`).
    pub output_scale: f64,
}

impl InitScheme {
    /// normal(0, 0.02) with output projections scaled by 1/√(2·n_layers).
    pub fn gpt2(n_layers: usize) -> Self {
        Self {
            std: 0.02,
            output_scale: 1.0 / (2.0 * n_layers as f64).sqrt(),
        }
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn ln_init(d: usize, style: LnStyle) -> LayerNormParams<Tensor> {
    LayerNormParams {
        gamma: Tensor::ones(&[d]),
        beta: style.has_bias().then(|| Tensor::zeros(&[d])),
    }
}

impl BlockParams<Tensor> {
    /// Draws projection weights; every scale parameter starts at exactly 1
    /// and every bias at exactly 0.
    pub fn init(variant: &BlockVariant, dims: BlockDims, init: InitScheme, rng: &mut impl Rng) -> Self {
        let BlockDims {
            d_model: d,
            n_heads,
            d_ffn,
        } = dims;
        let style = variant.ln_style;
        let out_std = init.std * init.output_scale;
        let attention = AttentionParams {
            w_q: normal_tensor(rng, &[d, d], init.std),
            w_k: normal_tensor(rng, &[d, d], init.std),
            w_v: normal_tensor(rng, &[d, d], init.std),
            w_o: normal_tensor(rng, &[d, d], out_std),
            b_q: Tensor::zeros(&[d]),
            b_k: Tensor::zeros(&[d]),
            b_v: Tensor::zeros(&[d]),
            b_o: Tensor::zeros(&[d]),
        };
        let ffn = FfnParams {
            w1: normal_tensor(rng, &[d, d_ffn], init.std),
            b1: Tensor::zeros(&[d_ffn]),
            w2: normal_tensor(rng, &[d_ffn, d], out_std),
            b2: Tensor::zeros(&[d]),
        };
        Self {
            attention,
            ffn,
            ln_pre_attn: ln_init(d, style),
            ln_pre_ffn: ln_init(d, style),
            ln_post_attn: variant.post_attn_ln.then(|| ln_init(d, style)),
            ln_ffn_mid: variant.ffn_ln.then(|| ln_init(d_ffn, style)),
            ln_q: variant.qkv_ln.then(|| ln_init(d, style)),
            ln_k: variant.qkv_ln.then(|| ln_init(d, style)),
            ln_v: variant.qkv_ln.then(|| ln_init(d, style)),
            head_scale: variant.head_scale.then(|| HeadScaleParams {
                gamma: Tensor::ones(&[n_heads]),
            }),
            res_scale: variant.res_scale.then(|| ResScaleParams {
                lambda: Tensor::ones(&[d]),
            }),
        }
    }

    /// Checks that optional parameters are present exactly when the variant
    /// asks for them.
    pub fn matches_variant(&self, variant: &BlockVariant) -> bool {
        self.ln_post_attn.is_some() == variant.post_attn_ln
            && self.ln_ffn_mid.is_some() == variant.ffn_ln
            && self.ln_q.is_some() == variant.qkv_ln
            && self.ln_k.is_some() == variant.qkv_ln
            && self.ln_v.is_some() == variant.qkv_ln
            && self.head_scale.is_some() == variant.head_scale
            && self.res_scale.is_some() == variant.res_scale
            && self.ln_pre_attn.beta.is_some() == variant.ln_style.has_bias()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

impl BlockParams<Var> {
    /// Places every tensor of `p` on the tape as a leaf.
    pub fn bind(graph: &mut Graph, p: &BlockParams<Tensor>) -> Self {
        p.map(&mut |_, t| graph.leaf(t.clone()))
    }
}

/// Inverted dropout on sublayer outputs.
pub struct Dropout<'r, R: Rng> {
    pub p: f64,
    pub rng: &'r mut R,
}

/// Everything a block forward needs besides parameters.
pub struct BlockCtx<'r, R: Rng> {
    pub variant: BlockVariant,
    pub n_heads: usize,
    pub seq_len: usize,
    pub causal: bool,
    pub ln_eps: f64,
    pub dropout: Option<Dropout<'r, R>>,
}

impl<R: Rng> BlockCtx<'_, R> {
    fn ln(&self, g: &mut Graph, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
        g.layer_norm(x, p.gamma, p.beta, self.ln_eps, self.variant.ln_style.center())
    }

    fn activation(&self, g: &mut Graph, x: Var) -> Var {
        match self.variant.activation {
            Activation::Gelu => g.gelu(x),
            Activation::ReluSquared => g.relu_squared(x),
        }
    }

    fn maybe_dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some(d) if d.p > 0.0 => {
                let n = g.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= d.p).collect();
                g.dropout(x, &keep, d.p)
            }
            _ => Ok(x),
        }
    }
}

/// Context without dropout, for deterministic evaluation.
pub fn eval_ctx(
    variant: BlockVariant,
    n_heads: usize,
    seq_len: usize,
    causal: bool,
    ln_eps: f64,
) -> BlockCtx<'static, rand_chacha::ChaCha8Rng> {
    BlockCtx {
        variant,
        n_heads,
        seq_len,
        causal,
        ln_eps,
        dropout: None,
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Optional LayerNorms on the projected queries, keys and values.
pub struct QkvNorms<'a> {
    pub q: &'a LayerNormParams<Var>,
    pub k: &'a LayerNormParams<Var>,
    pub v: &'a LayerNormParams<Var>,
}

fn attention_core<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams<Var>,
    head_scale: Option<&HeadScaleParams<Var>>,
    qkv_norms: Option<QkvNorms<'_>>,
    ctx: &BlockCtx<'_, R>,
) -> Result<Var> {
    let d = g.value(x).last_dim();
    let wshape = g.value(p.w_q).shape().to_vec();
    if wshape != [d, d] {
        return Err(Error::Shape {
            op: "multi_head_attention",
            operand: "w_q",
            expected: vec![d, d],
            got: wshape,
        });
    }
    let mut q = affine(g, x, p.w_q, p.b_q)?;
    let mut k = affine(g, x, p.w_k, p.b_k)?;
    let mut v = affine(g, x, p.w_v, p.b_v)?;
    if let Some(n) = qkv_norms {
        q = ctx.ln(g, q, n.q)?;
        k = ctx.ln(g, k, n.k)?;
        v = ctx.ln(g, v, n.v)?;
    }
    let mut heads = g.attention(q, k, v, ctx.n_heads, ctx.seq_len, ctx.causal)?;
    if let Some(hs) = head_scale {
        heads = g.head_scale(heads, hs.gamma)?;
    }
    affine(g, heads, p.w_o, p.b_o)
}

/// `Concat(h₁,…,hₙ)·W^O` with `hᵢ = softmax(QWᵢ^Q (KWᵢ^K)ᵀ/√d_head)·VWᵢ^V`,
/// self-attention over `x[rows, d]` where `rows` is a multiple of
/// `ctx.seq_len`.
pub fn multi_head_attention<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams<Var>,
    ctx: &BlockCtx<'_, R>,
) -> Result<Var> {
    attention_core(g, x, p, None, None, ctx)
}

/// As [`multi_head_attention`], with head `i` multiplied by `γᵢ` before the
/// output projection.
pub fn head_scale_mha<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams<Var>,
    hs: &HeadScaleParams<Var>,
    ctx: &BlockCtx<'_, R>,
) -> Result<Var> {
    attention_core(g, x, p, Some(hs), None, ctx)
}

/// `λ ∘ x + sublayer_out`, with λ broadcast over positions.
pub fn res_scale_combine(g: &mut Graph, x: Var, sublayer_out: Var, rs: &ResScaleParams<Var>) -> Result<Var> {
    let (xs, ss) = (g.value(x).shape(), g.value(sublayer_out).shape());
    if xs != ss {
        return Err(Error::Shape {
            op: "res_scale_combine",
            operand: "sublayer_out",
            expected: xs.to_vec(),
            got: ss.to_vec(),
        });
    }
    let scaled = g.mul_row(x, rs.lambda)?;
    g.add(scaled, sublayer_out)
}

fn check_arrangement<R: Rng>(ctx: &BlockCtx<'_, R>, expected: Arrangement) -> Result<()> {
    if ctx.variant.arrangement != expected {
        return Err(Error::VariantMismatch {
            expected: expected.name(),
            got: ctx.variant.arrangement.name(),
        });
    }
    Ok(())
}

/// `x + MHA(LN(x))` followed by `x + σ(LN(x)W₁ + b₁)W₂ + b₂`.
pub fn pre_ln_block<R: Rng>(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &mut BlockCtx<'_, R>) -> Result<Var> {
    check_arrangement(ctx, Arrangement::PreLn)?;
    prenorm_block(g, x, p, ctx)
}

/// NormFormer layer: `x + LN(HeadScaleMHA(LN(x)))` followed by
/// `λ ∘ x + LN(σ(LN(x)W₁ + b₁))W₂ + b₂`, each addition gated by its flag.
pub fn normformer_block<R: Rng>(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &mut BlockCtx<'_, R>) -> Result<Var> {
    check_arrangement(ctx, Arrangement::NormFormer)?;
    prenorm_block(g, x, p, ctx)
}

// Shared by Pre-LN and NormFormer; with every flag off the op sequence is
// exactly the Pre-LN one.
fn prenorm_block<R: Rng>(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &mut BlockCtx<'_, R>) -> Result<Var> {
    let v = ctx.variant;
    let h = ctx.ln(g, x, &p.ln_pre_attn)?;
    let qkv = if v.qkv_ln {
        Some(QkvNorms {
            q: p.ln_q.as_ref().ok_or_else(|| missing("ln_q"))?,
            k: p.ln_k.as_ref().ok_or_else(|| missing("ln_k"))?,
            v: p.ln_v.as_ref().ok_or_else(|| missing("ln_v"))?,
        })
    } else {
        None
    };
    let hs = if v.head_scale {
        Some(p.head_scale.as_ref().ok_or_else(|| missing("head_scale"))?)
    } else {
        None
    };
    let mut a = attention_core(g, h, &p.attention, hs, qkv, ctx)?;
    if v.post_attn_ln {
        let ln = p.ln_post_attn.as_ref().ok_or_else(|| missing("ln_post_attn"))?;
        a = ctx.ln(g, a, ln)?;
    }
    let a = ctx.maybe_dropout(g, a)?;
    let x = g.add(x, a)?;

    let h = ctx.ln(g, x, &p.ln_pre_ffn)?;
    let u = affine(g, h, p.ffn.w1, p.ffn.b1)?;
    let mut u = ctx.activation(g, u);
    if v.ffn_ln {
        let ln = p.ln_ffn_mid.as_ref().ok_or_else(|| missing("ln_ffn_mid"))?;
        u = ctx.ln(g, u, ln)?;
    }
    let f = affine(g, u, p.ffn.w2, p.ffn.b2)?;
    let f = ctx.maybe_dropout(g, f)?;
    if v.res_scale {
        let rs = p.res_scale.as_ref().ok_or_else(|| missing("res_scale"))?;
        res_scale_combine(g, x, f, rs)
    } else {
        g.add(x, f)
    }
}

/// `LN(x + MHA(x))` followed by `LN(x + FFN(x))`.
pub fn post_ln_block<R: Rng>(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &mut BlockCtx<'_, R>) -> Result<Var> {
    check_arrangement(ctx, Arrangement::PostLn)?;
    let a = attention_core(g, x, &p.attention, None, None, ctx)?;
    let a = ctx.maybe_dropout(g, a)?;
    let s = g.add(x, a)?;
    let x = ctx.ln(g, s, &p.ln_pre_attn)?;

    let u = affine(g, x, p.ffn.w1, p.ffn.b1)?;
    let u = ctx.activation(g, u);
    let f = affine(g, u, p.ffn.w2, p.ffn.b2)?;
    let f = ctx.maybe_dropout(g, f)?;
    let s = g.add(x, f)?;
    ctx.ln(g, s, &p.ln_pre_ffn)
}

/// Dispatches on the context's arrangement.
pub fn block_forward<R: Rng>(g: &mut Graph, x: Var, p: &BlockParams<Var>, ctx: &mut BlockCtx<'_, R>) -> Result<Var> {
    match ctx.variant.arrangement {
        Arrangement::PostLn => post_ln_block(g, x, p, ctx),
        Arrangement::PreLn => pre_ln_block(g, x, p, ctx),
        Arrangement::NormFormer => normformer_block(g, x, p, ctx),
    }
}

fn missing(name: &str) -> Error {
    Error::InvalidArgument(format!("block variant requires `{name}` parameters"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BlockDims {
        BlockDims {
            d_model: 8,
            n_heads: 2,
            d_ffn: 32,
        }
    }

    #[test]
    fn variant_presets() {
        let nf = BlockVariant::normformer();
        assert!(nf.head_scale && nf.post_attn_ln && nf.ffn_ln);
        assert!(!nf.res_scale && !nf.qkv_ln);
        assert!(!BlockVariant::pre_ln().any_modification());
        let bad = BlockVariant {
            head_scale: true,
            ..BlockVariant::pre_ln()
        };
        assert!(bad.validate().is_err());
        assert!(nf.validate().is_ok());
    }

    #[test]
    fn init_scales_are_exactly_one() {
        let v = BlockVariant {
            res_scale: true,
            qkv_ln: true,
            ..BlockVariant::normformer()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = BlockParams::init(&v, dims(), InitScheme::gpt2(2), &mut rng);
        assert!(p.matches_variant(&v));
        p.visit(&mut |name, t| {
            if name.ends_with("gamma") || name.ends_with("lambda") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
            if name.ends_with("beta") || name.contains(".b") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        });
    }

    #[test]
    fn visit_order_follows_name_table() {
        let v = BlockVariant {
            res_scale: true,
            qkv_ln: true,
            ..BlockVariant::normformer()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::init(&v, dims(), InitScheme::gpt2(2), &mut rng);
        let mut names = Vec::new();
        p.visit(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names, BLOCK_PARAM_NAMES);
    }

    #[test]
    fn wrong_arrangement_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BlockParams::init(&BlockVariant::pre_ln(), dims(), InitScheme::gpt2(1), &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(normal_tensor(&mut rng, &[4, 8], 1.0));
        let pv = BlockParams::bind(&mut g, &p);
        let mut ctx = eval_ctx(BlockVariant::pre_ln(), 2, 4, true, 1e-5);
        assert!(matches!(
            post_ln_block(&mut g, x, &pv, &mut ctx),
            Err(Error::VariantMismatch { .. })
        ));
        assert!(normformer_block(&mut g, x, &pv, &mut ctx).is_err());
        assert!(pre_ln_block(&mut g, x, &pv, &mut ctx).is_ok());
    }

    #[test]
    fn res_scale_combine_extremes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = g.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let ones = ResScaleParams {
            lambda: g.leaf(Tensor::ones(&[3])),
        };
        let zeros = ResScaleParams {
            lambda: g.leaf(Tensor::zeros(&[3])),
        };
        let a = res_scale_combine(&mut g, x, s, &ones).unwrap();
        assert_eq!(g.value(a).data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
        let b = res_scale_combine(&mut g, x, s, &zeros).unwrap();
        assert_eq!(g.value(b).data(), &[0.5; 6]);
        let wrong = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(res_scale_combine(&mut g, x, wrong, &ones).is_err());
    }
}
