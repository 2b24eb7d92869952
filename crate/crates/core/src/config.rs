//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`model.d_model`, `train.peak_lr`, ...); `#` starts a
//! comment. Setting `model.arrangement` resets the variant toggles to that
//! arrangement's preset before any explicit toggle is applied, regardless of
//! line order.

use std::fmt::Write as _;
use std::path::Path;

use crate::blocks::{Activation, Arrangement, BlockVariant, LnStyle};
use crate::data::DataConfig;
use crate::diagnostics::DiagConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Objective};
use crate::numerics::Precision;
use crate::training::{Schedule, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub diag: DiagConfig,
    pub sweep: SweepConfig,
}

/// Settings for multi-run commands.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Arrangements compared by the stability sweep, each at its preset.
    pub variants: Vec<Arrangement>,
    /// Stability runs stop after this many updates if they have not diverged.
    pub step_cap: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            variants: vec![Arrangement::PreLn, Arrangement::NormFormer],
            step_cap: 2000,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "model.vocab_size",
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.d_ffn",
    "model.max_seq_len",
    "model.arrangement",
    "model.head_scale",
    "model.post_attn_ln",
    "model.ffn_ln",
    "model.res_scale",
    "model.qkv_ln",
    "model.activation",
    "model.ln_style",
    "model.objective",
    "model.tie_embeddings",
    "model.dropout",
    "model.seed",
    "model.ln_eps",
    "model.init_std",
    "model.scale_embeddings",
    "model.precision",
];

const OTHER_KEYS: &[&str] = &[
    "train.peak_lr",
    "train.warmup_steps",
    "train.total_steps",
    "train.schedule",
    "train.ramp_increment",
    "train.batch_size",
    "train.seq_len",
    "train.clip_norm",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.eval_every",
    "train.eval_batches",
    "train.log_every",
    "train.explosion_factor",
    "train.loss_smoothing",
    "train.record_wall_time",
    "data.paths",
    "data.train_fraction",
    "data.synthetic_bytes",
    "data.synthetic_seed",
    "data.mask_prob",
    "diag.enabled",
    "diag.gradnorm_every",
    "diag.gradnorm_params",
    "diag.scales_every",
    "diag.ratio_window",
    "sweep.variants",
    "sweep.step_cap",
];

/// Every recognised key, in canonical order.
pub fn all_keys() -> impl Iterator<Item = &'static str> {
    MODEL_KEYS.iter().chain(OTHER_KEYS).copied()
}

/// Expands a bare key (`d_model`) to its dotted form when exactly one key
/// ends with it. `variant` is accepted for `model.arrangement`.
pub fn resolve_key(key: &str) -> std::result::Result<&'static str, String> {
    if key == "variant" || key == "model.variant" {
        return Ok("model.arrangement");
    }
    if let Some(k) = all_keys().find(|&k| k == key) {
        return Ok(k);
    }
    let suffix = format!(".{key}");
    let hits: Vec<&str> = all_keys().filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(format!("unknown key `{key}`")),
        many => Err(format!("ambiguous key `{key}`: could be {}", many.join(", "))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    /// 1-based source line; 0 for command-line overrides.
    pub line: usize,
    pub key: &'static str,
    pub value: String,
}

/// Splits config text into entries without interpreting values.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = resolve_key(k.trim()).map_err(|msg| Error::Config { line, msg })?;
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses `key=value` command-line overrides.
pub fn parse_overrides(sets: &[String]) -> Result<Vec<Entry>> {
    sets.iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override `{s}` is not `key=value`"),
            })?;
            let key = resolve_key(k.trim()).map_err(|msg| Error::Config { line: 0, msg })?;
            Ok(Entry {
                line: 0,
                key,
                value: v.trim().to_string(),
            })
        })
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn named<T>(v: &str, parse: fn(&str) -> Option<T>, what: &str) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("unknown {what} `{v}`"))
}

fn parse_precision(s: &str) -> Option<Precision> {
    match s {
        "f64" => Some(Precision::F64),
        "f32" => Some(Precision::F32),
        _ => None,
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    }
}

fn apply(cfg: &mut LabConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    let d = &mut cfg.data;
    match key {
        "model.vocab_size" => m.vocab_size = num(v)?,
        "model.d_model" => m.d_model = num(v)?,
        "model.n_heads" => m.n_heads = num(v)?,
        "model.n_layers" => m.n_layers = num(v)?,
        "model.d_ffn" => m.d_ffn = num(v)?,
        "model.max_seq_len" => m.max_seq_len = num(v)?,
        "model.arrangement" => {
            m.variant = match named(v, Arrangement::parse, "arrangement")? {
                Arrangement::PostLn => BlockVariant::post_ln(),
                Arrangement::PreLn => BlockVariant::pre_ln(),
                Arrangement::NormFormer => BlockVariant::normformer(),
            }
        }
        "model.head_scale" => m.variant.head_scale = boolean(v)?,
        "model.post_attn_ln" => m.variant.post_attn_ln = boolean(v)?,
        "model.ffn_ln" => m.variant.ffn_ln = boolean(v)?,
        "model.res_scale" => m.variant.res_scale = boolean(v)?,
        "model.qkv_ln" => m.variant.qkv_ln = boolean(v)?,
        "model.activation" => m.variant.activation = named(v, Activation::parse, "activation")?,
        "model.ln_style" => m.variant.ln_style = named(v, LnStyle::parse, "ln_style")?,
        "model.objective" => m.objective = named(v, Objective::parse, "objective")?,
        "model.tie_embeddings" => m.tie_embeddings = boolean(v)?,
        "model.dropout" => m.dropout = num(v)?,
        "model.seed" => m.seed = num(v)?,
        "model.ln_eps" => m.ln_eps = num(v)?,
        "model.init_std" => m.init_std = num(v)?,
        "model.scale_embeddings" => m.scale_embeddings = boolean(v)?,
        "model.precision" => m.precision = named(v, parse_precision, "precision")?,
        "train.peak_lr" => t.peak_lr = num(v)?,
        "train.warmup_steps" => t.warmup_steps = num(v)?,
        "train.total_steps" => t.total_steps = num(v)?,
        "train.schedule" => t.schedule = named(v, Schedule::parse, "schedule")?,
        "train.ramp_increment" => t.ramp_increment = num(v)?,
        "train.batch_size" => t.batch_size = num(v)?,
        "train.seq_len" => t.seq_len = num(v)?,
        "train.clip_norm" => t.clip_norm = if v == "none" { None } else { Some(num(v)?) },
        "train.adam_beta1" => t.adam.beta1 = num(v)?,
        "train.adam_beta2" => t.adam.beta2 = num(v)?,
        "train.adam_eps" => t.adam.eps = num(v)?,
        "train.seed" => t.seed = num(v)?,
        "train.eval_every" => t.eval_every = num(v)?,
        "train.eval_batches" => t.eval_batches = num(v)?,
        "train.log_every" => t.log_every = num(v)?,
        "train.explosion_factor" => t.explosion_factor = num(v)?,
        "train.loss_smoothing" => t.loss_smoothing = num(v)?,
        "train.record_wall_time" => t.record_wall_time = boolean(v)?,
        "data.paths" => {
            d.paths = v
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect()
        }
        "data.train_fraction" => d.train_fraction = num(v)?,
        "data.synthetic_bytes" => d.synthetic_bytes = num(v)?,
        "data.synthetic_seed" => d.synthetic_seed = num(v)?,
        "data.mask_prob" => d.mask_prob = num(v)?,
        "diag.enabled" => cfg.diag.enabled = boolean(v)?,
        "diag.gradnorm_every" => cfg.diag.gradnorm_every = num(v)?,
        "diag.gradnorm_params" => {
            cfg.diag.gradnorm_params = v
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect()
        }
        "diag.scales_every" => cfg.diag.scales_every = num(v)?,
        "diag.ratio_window" => cfg.diag.ratio_window = num(v)?,
        "sweep.variants" => {
            cfg.sweep.variants = v
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| named(p, Arrangement::parse, "arrangement"))
                .collect::<std::result::Result<_, _>>()?
        }
        "sweep.step_cap" => cfg.sweep.step_cap = num(v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

impl LabConfig {
    /// Applies entries in order, with every `model.arrangement` entry first.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        let (arr, rest): (Vec<&Entry>, Vec<&Entry>) = entries.iter().partition(|e| e.key == "model.arrangement");
        for e in arr.into_iter().chain(rest) {
            apply(&mut cfg, e.key, &e.value).map_err(|msg| Error::Config { line: e.line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_entries(&parse_entries(text)?)
    }

    /// Reads `path` (if any) and applies `overrides` after it.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = match path {
            Some(p) => parse_entries(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        entries.extend(parse_overrides(overrides)?);
        Self::from_entries(&entries)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Validation(format!(
                "train.seq_len ({}) exceeds model.max_seq_len ({})",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "data.train_fraction ({}) must lie in (0, 1)",
                d.train_fraction
            )));
        }
        if !(d.mask_prob > 0.0 && d.mask_prob < 1.0) {
            return Err(Error::Validation(format!(
                "data.mask_prob ({}) must lie in (0, 1)",
                d.mask_prob
            )));
        }
        if self.sweep.variants.is_empty() || self.sweep.step_cap == 0 {
            return Err(Error::Validation(
                "sweep.variants must be non-empty and sweep.step_cap positive".into(),
            ));
        }
        self.diag.validate()
    }

    /// Canonical text: every key, in canonical order. Parsing it yields an
    /// identical config.
    pub fn to_kv(&self) -> String {
        let mut s = model_config_to_kv(&self.model);
        let t = &self.train;
        let d = &self.data;
        let clip = t.clip_norm.map_or("none".to_string(), |c| format!("{c:?}"));
        let variants: Vec<&str> = self.sweep.variants.iter().map(|a| a.name()).collect();
        let lines: [(&str, String); 30] = [
            ("train.peak_lr", format!("{:?}", t.peak_lr)),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.schedule", t.schedule.name().to_string()),
            ("train.ramp_increment", format!("{:?}", t.ramp_increment)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seq_len", t.seq_len.to_string()),
            ("train.clip_norm", clip),
            ("train.adam_beta1", format!("{:?}", t.adam.beta1)),
            ("train.adam_beta2", format!("{:?}", t.adam.beta2)),
            ("train.adam_eps", format!("{:?}", t.adam.eps)),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_batches", t.eval_batches.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.explosion_factor", format!("{:?}", t.explosion_factor)),
            ("train.loss_smoothing", format!("{:?}", t.loss_smoothing)),
            ("train.record_wall_time", t.record_wall_time.to_string()),
            ("data.paths", d.paths.join(",")),
            ("data.train_fraction", format!("{:?}", d.train_fraction)),
            ("data.synthetic_bytes", d.synthetic_bytes.to_string()),
            ("data.synthetic_seed", d.synthetic_seed.to_string()),
            ("data.mask_prob", format!("{:?}", d.mask_prob)),
            ("diag.enabled", self.diag.enabled.to_string()),
            ("diag.gradnorm_every", self.diag.gradnorm_every.to_string()),
            ("diag.gradnorm_params", self.diag.gradnorm_params.join(",")),
            ("diag.scales_every", self.diag.scales_every.to_string()),
            ("diag.ratio_window", self.diag.ratio_window.to_string()),
            ("sweep.variants", variants.join(",")),
            ("sweep.step_cap", self.sweep.step_cap.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Canonical `model.*` lines.
pub fn model_config_to_kv(m: &ModelConfig) -> String {
    let v = &m.variant;
    let lines: [(&str, String); 22] = [
        ("model.vocab_size", m.vocab_size.to_string()),
        ("model.d_model", m.d_model.to_string()),
        ("model.n_heads", m.n_heads.to_string()),
        ("model.n_layers", m.n_layers.to_string()),
        ("model.d_ffn", m.d_ffn.to_string()),
        ("model.max_seq_len", m.max_seq_len.to_string()),
        ("model.arrangement", v.arrangement.name().to_string()),
        ("model.head_scale", v.head_scale.to_string()),
        ("model.post_attn_ln", v.post_attn_ln.to_string()),
        ("model.ffn_ln", v.ffn_ln.to_string()),
        ("model.res_scale", v.res_scale.to_string()),
        ("model.qkv_ln", v.qkv_ln.to_string()),
        ("model.activation", v.activation.name().to_string()),
        ("model.ln_style", v.ln_style.name().to_string()),
        ("model.objective", m.objective.name().to_string()),
        ("model.tie_embeddings", m.tie_embeddings.to_string()),
        ("model.dropout", format!("{:?}", m.dropout)),
        ("model.seed", m.seed.to_string()),
        ("model.ln_eps", format!("{:?}", m.ln_eps)),
        ("model.init_std", format!("{:?}", m.init_std)),
        ("model.scale_embeddings", m.scale_embeddings.to_string()),
        ("model.precision", precision_name(m.precision).to_string()),
    ];
    let mut s = String::new();
    for (k, val) in lines {
        let _ = writeln!(s, "{k} = {val}");
    }
    s
}

/// Parses text containing only `model.*` keys.
pub fn model_config_from_kv(text: &str) -> Result<ModelConfig> {
    let entries = parse_entries(text)?;
    if let Some(e) = entries.iter().find(|e| !e.key.starts_with("model.")) {
        return Err(Error::Config {
            line: e.line,
            msg: format!("`{}` is not a model key", e.key),
        });
    }
    let mut cfg = LabConfig::default();
    let (arr, rest): (Vec<&Entry>, Vec<&Entry>) = entries.iter().partition(|e| e.key == "model.arrangement");
    for e in arr.into_iter().chain(rest) {
        apply(&mut cfg, e.key, &e.value).map_err(|msg| Error::Config { line: e.line, msg })?;
    }
    cfg.model.validate()?;
    Ok(cfg.model)
}
