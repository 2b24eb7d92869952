//! Per-layer gradient magnitudes, learned scale trajectories, and the ratio
//! reports built from them.
//!
//! "L1 norm" here is the mean absolute entry of a gradient tensor.

use std::collections::BTreeMap;
use std::io::Write;

use crate::blocks::{BlockParams, LayerNormParams, BLOCK_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::training::{MetricLog, Split, TrainHooks};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagConfig {
    pub enabled: bool,
    pub gradnorm_every: usize,
    /// Block-relative parameter names; empty records every parameter.
    pub gradnorm_params: Vec<String>,
    pub scales_every: usize,
    /// Width, in steps, of the early and late report windows.
    pub ratio_window: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gradnorm_every: 1,
            gradnorm_params: ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ffn.w1", "ffn.w2"]
                .map(String::from)
                .to_vec(),
            scales_every: 50,
            ratio_window: 100,
        }
    }
}

impl DiagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gradnorm_every == 0 || self.scales_every == 0 || self.ratio_window == 0 {
            return Err(Error::Validation(
                "diag.gradnorm_every, diag.scales_every and diag.ratio_window must be positive".into(),
            ));
        }
        for p in &self.gradnorm_params {
            check_param_name(p)?;
        }
        Ok(())
    }
}

fn check_param_name(name: &str) -> Result<()> {
    if BLOCK_PARAM_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownParam(name.to_string()))
    }
}

/// 17 significant digits; reparses to the identical `f64`.
pub fn fmt_exact(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradNormRecord {
    pub step: usize,
    pub layer: usize,
    pub param_name: String,
    pub l1_norm: f64,
}

/// One record per (layer, filtered parameter). Parameters absent from the
/// variant produce no records; names outside the fixed enumeration are an
/// error.
pub fn record_grad_norms(
    grads: &ModelParams<Tensor>,
    param_filter: &[&str],
    step: usize,
) -> Result<Vec<GradNormRecord>> {
    for p in param_filter {
        check_param_name(p)?;
    }
    let mut out = Vec::new();
    for (layer, b) in grads.blocks.iter().enumerate() {
        b.visit(&mut |name, g| {
            if param_filter.is_empty() || param_filter.contains(&name) {
                out.push(GradNormRecord {
                    step,
                    layer,
                    param_name: name.to_string(),
                    l1_norm: g.mean_abs(),
                });
            }
        });
    }
    Ok(out)
}

pub const GRADNORM_HEADER: &str = "step,layer,param,l1";

pub fn write_gradnorm_csv(records: &[GradNormRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{GRADNORM_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.step, r.layer, r.param_name, fmt_exact(r.l1_norm))?;
    }
    Ok(())
}

fn parse_err(file: &str, line: usize, msg: &str) -> Error {
    Error::Parse {
        file: file.to_string(),
        msg: format!("line {line}: {msg}"),
    }
}

pub fn parse_gradnorm_csv(text: &str, file: &str) -> Result<Vec<GradNormRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(GRADNORM_HEADER) {
        return Err(parse_err(file, 1, "missing gradnorm header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let e = |m: &str| parse_err(file, i + 2, m);
            if f.len() != 4 {
                return Err(e("expected 4 fields"));
            }
            Ok(GradNormRecord {
                step: f[0].parse().map_err(|_| e("bad step"))?,
                layer: f[1].parse().map_err(|_| e("bad layer"))?,
                param_name: f[2].to_string(),
                l1_norm: f[3].parse().map_err(|_| e("bad l1"))?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleKind {
    FfnLnGamma,
    PostAttnLnGamma,
    HeadScaleGamma,
    LambdaResid,
}

impl ScaleKind {
    pub const ALL: [ScaleKind; 4] = [
        Self::FfnLnGamma,
        Self::PostAttnLnGamma,
        Self::HeadScaleGamma,
        Self::LambdaResid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FfnLnGamma => "ffn_ln_gamma",
            Self::PostAttnLnGamma => "post_attn_ln_gamma",
            Self::HeadScaleGamma => "head_scale_gamma",
            Self::LambdaResid => "lambda_resid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn get(self, b: &BlockParams<Tensor>) -> Option<&Tensor> {
        fn gamma(ln: &Option<LayerNormParams<Tensor>>) -> Option<&Tensor> {
            ln.as_ref().map(|l| &l.gamma)
        }
        match self {
            Self::FfnLnGamma => gamma(&b.ln_ffn_mid),
            Self::PostAttnLnGamma => gamma(&b.ln_post_attn),
            Self::HeadScaleGamma => b.head_scale.as_ref().map(|h| &h.gamma),
            Self::LambdaResid => b.res_scale.as_ref().map(|r| &r.lambda),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSnapshot {
    pub step: usize,
    pub layer: usize,
    pub kind: ScaleKind,
    pub values: Vec<f64>,
}

/// Copies of every scale parameter the variant has, layer by layer.
pub fn snapshot_scales(params: &ModelParams<Tensor>, step: usize) -> Vec<ScaleSnapshot> {
    ScaleKind::ALL
        .into_iter()
        .flat_map(|k| snapshot_kind(params, k, step))
        .collect()
}

/// Empty when the variant lacks `kind`.
pub fn snapshot_kind(params: &ModelParams<Tensor>, kind: ScaleKind, step: usize) -> Vec<ScaleSnapshot> {
    params
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(layer, b)| {
            kind.get(b).map(|t| ScaleSnapshot {
                step,
                layer,
                kind,
                values: t.data().to_vec(),
            })
        })
        .collect()
}

pub const SCALES_HEADER: &str = "step,layer,kind,index,value";

pub fn write_scales_csv(snaps: &[ScaleSnapshot], mut w: impl Write) -> Result<()> {
    writeln!(w, "{SCALES_HEADER}")?;
    for s in snaps {
        for (i, v) in s.values.iter().enumerate() {
            writeln!(w, "{},{},{},{},{}", s.step, s.layer, s.kind.name(), i, fmt_exact(*v))?;
        }
    }
    Ok(())
}

/// Regroups rows into snapshots; rows of one snapshot must be contiguous
/// with consecutive indices from 0.
pub fn parse_scales_csv(text: &str, file: &str) -> Result<Vec<ScaleSnapshot>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCALES_HEADER) {
        return Err(parse_err(file, 1, "missing scales header"));
    }
    let mut out: Vec<ScaleSnapshot> = Vec::new();
    for (i, line) in lines.enumerate() {
        let e = |m: &str| parse_err(file, i + 2, m);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(e("expected 5 fields"));
        }
        let step: usize = f[0].parse().map_err(|_| e("bad step"))?;
        let layer: usize = f[1].parse().map_err(|_| e("bad layer"))?;
        let kind = ScaleKind::parse(f[2]).ok_or_else(|| e("bad kind"))?;
        let index: usize = f[3].parse().map_err(|_| e("bad index"))?;
        let value: f64 = f[4].parse().map_err(|_| e("bad value"))?;
        match out.last_mut() {
            Some(s) if s.step == step && s.layer == layer && s.kind == kind && index == s.values.len() => {
                s.values.push(value)
            }
            _ if index == 0 => out.push(ScaleSnapshot {
                step,
                layer,
                kind,
                values: vec![value],
            }),
            _ => return Err(e("index out of sequence")),
        }
    }
    Ok(out)
}

/// Training hooks collecting gradient norms and scale snapshots.
pub struct DiagRecorder {
    pub config: DiagConfig,
    pub grad_norms: Vec<GradNormRecord>,
    pub scales: Vec<ScaleSnapshot>,
}

impl DiagRecorder {
    pub fn new(config: DiagConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            grad_norms: Vec::new(),
            scales: Vec::new(),
        })
    }
}

impl TrainHooks for DiagRecorder {
    fn on_start(&mut self, params: &ModelParams<Tensor>) -> Result<()> {
        self.scales.extend(snapshot_scales(params, 0));
        Ok(())
    }

    fn on_gradients(&mut self, step: usize, _params: &ModelParams<Tensor>, grads: &ModelParams<Tensor>) -> Result<()> {
        if step.is_multiple_of(self.config.gradnorm_every) {
            let filter: Vec<&str> = self.config.gradnorm_params.iter().map(String::as_str).collect();
            self.grad_norms.extend(record_grad_norms(grads, &filter, step)?);
        }
        Ok(())
    }

    fn on_update(&mut self, step: usize, params: &ModelParams<Tensor>) -> Result<()> {
        if step.is_multiple_of(self.config.scales_every) {
            self.scales.extend(snapshot_scales(params, step));
        }
        Ok(())
    }

    fn on_finish(&mut self, step: usize, params: &ModelParams<Tensor>) -> Result<()> {
        if !step.is_multiple_of(self.config.scales_every) {
            self.scales.extend(snapshot_scales(params, step));
        }
        Ok(())
    }
}

/// Inclusive step range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start..=self.end).contains(&step)
    }

    fn empty(&self) -> Error {
        Error::EmptyWindow {
            start: self.start,
            end: self.end,
        }
    }
}

/// Mean l1 per layer for `param` over the window.
pub fn layer_means(records: &[GradNormRecord], param: &str, window: Window) -> Result<BTreeMap<usize, f64>> {
    check_param_name(param)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.param_name == param && window.contains(r.step))
    {
        let e = acc.entry(r.layer).or_insert((0.0, 0));
        e.0 += r.l1_norm;
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(window.empty());
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MismatchReport {
    pub param_name: String,
    pub window: Window,
    pub layer_means: BTreeMap<usize, f64>,
    /// Earliest-layer mean over latest-layer mean.
    pub mismatch_ratio: f64,
}

pub fn mismatch_report(records: &[GradNormRecord], param: &str, window: Window) -> Result<MismatchReport> {
    let means = layer_means(records, param, window)?;
    let first = *means.values().next().expect("non-empty");
    let last = *means.values().next_back().expect("non-empty");
    Ok(MismatchReport {
        param_name: param.to_string(),
        window,
        mismatch_ratio: first / last,
        layer_means: means,
    })
}

/// Mean l1 of the first layer over that of the last layer.
pub fn mismatch_ratio(records: &[GradNormRecord], param: &str, window: Window) -> Result<f64> {
    mismatch_report(records, param, window).map(|r| r.mismatch_ratio)
}

/// One run's logs as consumed by the ratio report.
pub struct RunLogs<'a> {
    pub metrics: &'a MetricLog,
    pub grad_norms: &'a [GradNormRecord],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub layer: usize,
    pub param_name: String,
    pub ratio: f64,
}

fn mean_train_loss(log: &MetricLog, window: Window) -> Result<f64> {
    let losses: Vec<f64> = log
        .rows
        .iter()
        .filter(|r| r.split == Split::Train && window.contains(r.step))
        .map(|r| r.loss)
        .collect();
    if losses.is_empty() {
        return Err(window.empty());
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Window-mean l1 of run `a` over that of run `b`, each divided by its run's
/// window-mean training loss, for every (layer, param) both runs logged.
pub fn grad_ratio_report(a: &RunLogs, b: &RunLogs, window: Window) -> Result<Vec<RatioRow>> {
    let la = mean_train_loss(a.metrics, window)?;
    let lb = mean_train_loss(b.metrics, window)?;
    let means = |recs: &[GradNormRecord]| {
        let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
        for r in recs.iter().filter(|r| window.contains(r.step)) {
            let e = acc.entry((r.param_name.clone(), r.layer)).or_insert((0.0, 0));
            e.0 += r.l1_norm;
            e.1 += 1;
        }
        acc
    };
    let ma = means(a.grad_norms);
    let mb = means(b.grad_norms);
    let mut rows: Vec<RatioRow> = ma
        .iter()
        .filter_map(|(key, &(sa, na))| {
            mb.get(key).map(|&(sb, nb)| RatioRow {
                layer: key.1,
                param_name: key.0.clone(),
                ratio: (sa / na as f64 / la) / (sb / nb as f64 / lb),
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(window.empty());
    }
    rows.sort_by(|x, y| (x.param_name.as_str(), x.layer).cmp(&(y.param_name.as_str(), y.layer)));
    Ok(rows)
}
