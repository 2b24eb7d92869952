use super::{lr_at_step, train, NoHooks, Schedule, TrainConfig, TrainOutcome};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::DivergenceCause;

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityResult {
    pub seed: u64,
    /// Updates completed before divergence, or the cap if none occurred.
    pub steps_survived: usize,
    pub cause: Option<DivergenceCause>,
    /// Learning rate of the update that diverged (or of the last update).
    pub lr_reached: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilitySummary {
    pub runs: Vec<StabilityResult>,
    pub median_steps: f64,
    pub step_cap: usize,
    pub increment: f64,
}

impl StabilitySummary {
    pub fn diverged_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.cause.is_some()).count()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Model and training configs for one ramp run: the learning rate rises by
/// `increment` per update from zero, for at most `step_cap` updates. `seed`
/// sets both initialization and batch order.
pub fn stability_configs(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    increment: f64,
    seed: u64,
    step_cap: usize,
) -> Result<(ModelConfig, TrainConfig)> {
    if !(increment > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ramp increment ({increment}) must be positive"
        )));
    }
    if step_cap == 0 {
        return Err(Error::InvalidArgument("stability step cap must be positive".into()));
    }
    let mcfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    let tcfg = TrainConfig {
        schedule: Schedule::Ramp,
        ramp_increment: increment,
        total_steps: step_cap,
        seed,
        ..base.clone()
    };
    Ok((mcfg, tcfg))
}

/// Summarizes a finished ramp run.
pub fn stability_result(seed: u64, tcfg: &TrainConfig, out: &TrainOutcome) -> StabilityResult {
    match out.divergence {
        Some((step, cause)) => StabilityResult {
            seed,
            steps_survived: step - 1,
            cause: Some(cause),
            lr_reached: lr_at_step(tcfg, step),
        },
        None => StabilityResult {
            seed,
            steps_survived: out.steps_survived(),
            cause: None,
            lr_reached: lr_at_step(tcfg, out.steps_survived()),
        },
    }
}

pub fn summarize(runs: Vec<StabilityResult>, increment: f64, step_cap: usize) -> StabilitySummary {
    let steps: Vec<f64> = runs.iter().map(|r| r.steps_survived as f64).collect();
    StabilitySummary {
        median_steps: median(&steps).unwrap_or(f64::NAN),
        runs,
        step_cap,
        increment,
    }
}

/// Ramp runs for seeds `1..=n_seeds`, sequentially.
pub fn stability_ramp_test(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    corpus: &Corpus,
    mask_prob: f64,
    increment: f64,
    n_seeds: usize,
    step_cap: usize,
) -> Result<StabilitySummary> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("stability test needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(n_seeds);
    for seed in 1..=n_seeds as u64 {
        let (mcfg, tcfg) = stability_configs(model_cfg, base, increment, seed, step_cap)?;
        let out = train(&mcfg, &tcfg, corpus, mask_prob, &mut NoHooks)?;
        runs.push(stability_result(seed, &tcfg, &out));
    }
    Ok(summarize(runs, increment, step_cap))
}
