//! Loss, optimizer, learning-rate schedules, and the training loop with
//! divergence detection.

mod optim;
mod stability;

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{adam_step, adam_update, clip_gradients, clip_tensors, global_norm, AdamConfig, AdamState};
pub use stability::{
    median, stability_configs, stability_ramp_test, stability_result, summarize, StabilityResult, StabilitySummary,
};

use crate::data::{self, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, Objective};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
    LinearDecay,
    /// `lr = ramp_increment · step`, without bound.
    Ramp,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearDecay => "linear_decay",
            Self::Ramp => "ramp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear_decay" => Some(Self::LinearDecay),
            "ramp" => Some(Self::Ramp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub ramp_increment: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation cadence in updates.
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Training-loss rows are averaged over this many updates.
    pub log_every: usize,
    /// Divergence when the smoothed loss exceeds this multiple of its minimum.
    pub explosion_factor: f64,
    /// EMA coefficient of the smoothed training loss.
    pub loss_smoothing: f64,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: 500,
            total_steps: 2000,
            schedule: Schedule::LinearDecay,
            ramp_increment: 5e-5,
            batch_size: 4,
            seq_len: 64,
            clip_norm: None,
            adam: AdamConfig::default(),
            seed: 1,
            eval_every: 50,
            eval_batches: 8,
            log_every: 10,
            explosion_factor: 3.0,
            loss_smoothing: 0.9,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if !(self.peak_lr > 0.0) {
            return fail(format!("peak_lr ({}) must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam.eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive".into());
        }
        if self.eval_every == 0 || self.log_every == 0 || self.eval_batches == 0 {
            return fail("eval_every, eval_batches and log_every must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm ({c}) must be positive"));
            }
        }
        if !(self.ramp_increment >= 0.0) {
            return fail("ramp_increment must be non-negative".into());
        }
        if !(self.explosion_factor > 1.0) {
            return fail("explosion_factor must exceed 1".into());
        }
        if !(0.0..1.0).contains(&self.loss_smoothing) {
            return fail("loss_smoothing must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Learning rate for update number `step` (the first update is step 1).
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> f64 {
    match cfg.schedule {
        Schedule::Ramp => cfg.ramp_increment * step as f64,
        Schedule::LinearDecay => {
            if step >= cfg.total_steps {
                0.0
            } else if step <= cfg.warmup_steps {
                if cfg.warmup_steps == 0 {
                    cfg.peak_lr
                } else {
                    cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
                }
            } else {
                let remaining = (cfg.total_steps - step) as f64;
                cfg.peak_lr * remaining / (cfg.total_steps - cfg.warmup_steps) as f64
            }
        }
    }
}

/// Mean token cross entropy over positions where `loss_mask` is set.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let loss = g.cross_entropy(l, targets, loss_mask)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceCause {
    NanLoss,
    InfActivation,
    LossExplosion,
    NonFiniteGradient,
}

impl DivergenceCause {
    pub fn name(self) -> &'static str {
        match self {
            Self::NanLoss => "nan_loss",
            Self::InfActivation => "inf_activation",
            Self::LossExplosion => "loss_explosion",
            Self::NonFiniteGradient => "non_finite_gradient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::NanLoss,
            Self::InfActivation,
            Self::LossExplosion,
            Self::NonFiniteGradient,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

impl fmt::Display for DivergenceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed updates.
    pub step: usize,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub diverged: Option<DivergenceCause>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let adam = AdamState::new(&model.params);
        Self {
            step: 0,
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409),
            diverged: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub ppl: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Append-only metric log; CSV header `step,split,loss,ppl,lr,wall_ms`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const METRIC_HEADER: &str = "step,split,loss,ppl,lr,wall_ms";

impl MetricLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{METRIC_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:?},{:?},{:?},{}",
                r.step,
                r.split.name(),
                r.loss,
                r.ppl,
                r.lr,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    pub fn parse_csv(text: &str, file: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            file: file.to_string(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(METRIC_HEADER) {
            return Err(perr(1, "missing metric header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(perr(i + 2, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr(i + 2, "bad number"));
            rows.push(MetricRow {
                step: f[0].parse().map_err(|_| perr(i + 2, "bad step"))?,
                split: match f[1] {
                    "train" => Split::Train,
                    "valid" => Split::Valid,
                    _ => return Err(perr(i + 2, "bad split")),
                },
                loss: num(f[2])?,
                ppl: num(f[3])?,
                lr: num(f[4])?,
                wall_ms: f[5].parse().map_err(|_| perr(i + 2, "bad wall_ms"))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.split == Split::Valid)
    }

    pub fn final_valid_loss(&self) -> Option<f64> {
        self.valid_rows().last().map(|r| r.loss)
    }
}

/// Observers invoked synchronously from the training loop. They see state
/// read-only.
pub trait TrainHooks {
    /// Before the first update, with the initial parameters.
    fn on_start(&mut self, _params: &ModelParams<Tensor>) -> Result<()> {
        Ok(())
    }

    /// After backward (and clipping) for update `step`, before it is applied.
    fn on_gradients(
        &mut self,
        _step: usize,
        _params: &ModelParams<Tensor>,
        _grads: &ModelParams<Tensor>,
    ) -> Result<()> {
        Ok(())
    }

    /// After update `step` has been applied.
    fn on_update(&mut self, _step: usize, _params: &ModelParams<Tensor>) -> Result<()> {
        Ok(())
    }

    /// Once, after the last completed update.
    fn on_finish(&mut self, _step: usize, _params: &ModelParams<Tensor>) -> Result<()> {
        Ok(())
    }
}

/// Hooks that observe nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Result of one training step's forward/backward.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Option<ModelParams<Tensor>>,
    pub divergence: Option<DivergenceCause>,
}

/// Forward + backward on one batch. Gradients are `None` when the forward
/// pass already diverged.
pub fn loss_and_grads(model: &Model, batch: &Batch, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<StepOutput> {
    let mut g = Graph::with_precision(model.config.precision);
    let fwd = model.forward_graph(&mut g, &batch.inputs, batch.seq_len, dropout_rng)?;
    let loss = g.cross_entropy(fwd.logits, &batch.targets, &batch.loss_mask)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(StepOutput {
            loss: value,
            grads: None,
            divergence: Some(DivergenceCause::NanLoss),
        });
    }
    if g.first_non_finite().is_some() {
        return Ok(StepOutput {
            loss: value,
            grads: None,
            divergence: Some(DivergenceCause::InfActivation),
        });
    }
    let mut grads = g.backward(loss)?;
    let pg = fwd.params.map(&mut |_, &v| grads.take(&g, v));
    Ok(StepOutput {
        loss: value,
        grads: Some(pg),
        divergence: None,
    })
}

/// Token-weighted mean loss over fixed evaluation batches.
pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let n = b.masked_count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::with_precision(model.config.precision);
        let fwd = model.forward_graph(&mut g, &b.inputs, b.seq_len, None)?;
        let loss = g.cross_entropy(fwd.logits, &b.targets, &b.loss_mask)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(total / count as f64)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricLog,
    /// Update at which divergence was detected, with its cause.
    pub divergence: Option<(usize, DivergenceCause)>,
}

impl TrainOutcome {
    /// Updates completed before divergence (or all of them).
    pub fn steps_survived(&self) -> usize {
        self.state.step
    }
}

enum Batches<'a> {
    Clm(data::ClmBatches<'a>),
    Mlm(data::MlmBatches<'a>),
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match self {
            Self::Clm(b) => b.next(),
            Self::Mlm(b) => b.next(),
        }
    }
}

/// Trains for `total_steps` updates or until divergence.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    mask_prob: f64,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Validation(format!(
            "train seq_len ({}) exceeds model max_seq_len ({})",
            train_cfg.seq_len, model_cfg.max_seq_len
        )));
    }
    if corpus.vocab_size > model_cfg.vocab_size {
        return Err(Error::Validation(format!(
            "corpus vocabulary ({}) exceeds model vocab_size ({})",
            corpus.vocab_size, model_cfg.vocab_size
        )));
    }
    let (bs, seq) = (train_cfg.batch_size, train_cfg.seq_len);
    let masked = model_cfg.objective == Objective::Masked;
    let mut batches = if masked {
        Batches::Mlm(data::make_mlm_batches(
            &corpus.train_tokens,
            bs,
            seq,
            mask_prob,
            train_cfg.seed,
        )?)
    } else {
        Batches::Clm(data::make_clm_batches(&corpus.train_tokens, bs, seq, train_cfg.seed)?)
    };
    let eval = data::eval_batches(
        &corpus.valid_tokens,
        bs,
        seq,
        train_cfg.eval_batches,
        masked.then_some((mask_prob, train_cfg.seed ^ 0xe7a1)),
    )?;

    let model = Model::new(model_cfg.clone())?;
    let mut state = TrainState::new(model, train_cfg.seed);
    let mut log = MetricLog::default();
    let start = Instant::now();
    let wall = |start: &Instant| {
        if train_cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };

    hooks.on_start(&state.model.params)?;
    let initial = evaluate(&state.model, &eval)?;
    log.rows.push(MetricRow {
        step: 0,
        split: Split::Valid,
        loss: initial,
        ppl: initial.exp(),
        lr: 0.0,
        wall_ms: wall(&start),
    });

    let mut smoothed: Option<f64> = None;
    let mut best_smoothed = f64::INFINITY;
    let mut window_loss = 0.0;
    let mut window_n = 0usize;
    let mut last_lr = 0.0;
    let mut divergence = None;

    for step in 1..=train_cfg.total_steps {
        let batch = batches.next().expect("batch streams are infinite");
        let lr = lr_at_step(train_cfg, step);
        if batch.masked_count() == 0 {
            // nothing to learn from; the update still counts
            state.step = step;
            continue;
        }
        let use_dropout = model_cfg.dropout > 0.0;
        let out = loss_and_grads(&state.model, &batch, use_dropout.then_some(&mut state.rng))?;
        if let Some(cause) = out.divergence {
            divergence = Some((step, cause));
            break;
        }
        let s = match smoothed {
            None => out.loss,
            Some(prev) => train_cfg.loss_smoothing * prev + (1.0 - train_cfg.loss_smoothing) * out.loss,
        };
        smoothed = Some(s);
        best_smoothed = best_smoothed.min(s);
        if s > train_cfg.explosion_factor * best_smoothed {
            divergence = Some((step, DivergenceCause::LossExplosion));
            break;
        }
        let mut grads = out.grads.expect("finite forward yields gradients");
        if let Some(c) = train_cfg.clip_norm {
            clip_gradients(&mut grads, c);
        }
        hooks.on_gradients(step, &state.model.params, &grads)?;
        if !adam_step(&mut state.model.params, &mut state.adam, &grads, lr, &train_cfg.adam) {
            divergence = Some((step, DivergenceCause::NonFiniteGradient));
            break;
        }
        state.step = step;
        last_lr = lr;
        hooks.on_update(step, &state.model.params)?;

        window_loss += out.loss;
        window_n += 1;
        if step % train_cfg.log_every == 0 || step == train_cfg.total_steps {
            let l = window_loss / window_n as f64;
            log.rows.push(MetricRow {
                step,
                split: Split::Train,
                loss: l,
                ppl: l.exp(),
                lr,
                wall_ms: wall(&start),
            });
            window_loss = 0.0;
            window_n = 0;
        }
        if step % train_cfg.eval_every == 0 || step == train_cfg.total_steps {
            let v = evaluate(&state.model, &eval)?;
            log.rows.push(MetricRow {
                step,
                split: Split::Valid,
                loss: v,
                ppl: v.exp(),
                lr,
                wall_ms: wall(&start),
            });
        }
    }

    if let Some((_, cause)) = divergence {
        state.diverged = Some(cause);
        if window_n > 0 {
            let l = window_loss / window_n as f64;
            log.rows.push(MetricRow {
                step: state.step,
                split: Split::Train,
                loss: l,
                ppl: l.exp(),
                lr: last_lr,
                wall_ms: wall(&start),
            });
        }
    }
    hooks.on_finish(state.step, &state.model.params)?;
    Ok(TrainOutcome { state, log, divergence })
}
