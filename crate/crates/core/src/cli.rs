//! `normformer-lab` subcommands: `train`, `stability`, `ablate`, `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Arrangement, BlockVariant};
use crate::config::LabConfig;
use crate::data::Corpus;
use crate::diagnostics::{self, DiagRecorder, GradNormRecord, RunLogs, ScaleSnapshot, Window};
use crate::error::{Error, Result};
use crate::model::{checkpoint, count_parameters};
use crate::training::{self, median, MetricLog, NoHooks, StabilityResult, TrainHooks, TrainOutcome};

pub const THREADS_ENV: &str = "NORMFORMER_LAB_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "normformer-lab",
    version,
    about = "Train and compare Pre-LN, Post-LN and NormFormer language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write its logs, diagnostics and checkpoint.
    Train(CommonArgs),
    /// Learning-rate ramp until divergence, per arrangement and seed.
    Stability {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 5e-5)]
        increment: f64,
    },
    /// The seven-row ablation grid at equal step count.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Comparison tables over finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides; bare keys resolve by unique suffix.
    #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

impl CommonArgs {
    pub fn load(&self) -> Result<LabConfig> {
        LabConfig::load(self.config.as_deref(), &self.set)
    }
}

/// 0 on success (divergence included), 1 for usage or config errors, 2 for
/// I/O errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 2,
        _ => 1,
    }
}

/// FNV-1a over the canonical config text.
pub fn run_id(canonical: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub output_dir: String,
    pub completed: bool,
    pub diverged: bool,
    pub divergence_cause: Option<String>,
    pub divergence_step: Option<usize>,
    pub steps_completed: usize,
    pub final_valid_loss: Option<f64>,
    pub final_valid_ppl: Option<f64>,
    pub parameter_count: usize,
    /// Every effective setting, defaults included.
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &LabConfig, out: &Path) -> Self {
        let canonical = cfg.to_kv();
        let config = canonical
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            run_id: run_id(&canonical),
            output_dir: out.display().to_string(),
            completed: false,
            diverged: false,
            divergence_cause: None,
            divergence_step: None,
            steps_completed: 0,
            final_valid_loss: None,
            final_valid_ppl: None,
            parameter_count: count_parameters(&cfg.model).total,
            config,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const GRADNORM: &str = "gradnorm.csv";
pub const SCALES: &str = "scales.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CONFIG_ECHO: &str = "config.cfg";

pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
}

/// Trains under `cfg`, writing manifest (before and after), metrics,
/// diagnostics and checkpoint into `out`.
pub fn run_training(cfg: &LabConfig, corpus: &Corpus, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(cfg, out);
    fs::write(out.join(CONFIG_ECHO), cfg.to_kv())?;
    manifest.write(out)?;

    let mut recorder = if cfg.diag.enabled {
        Some(DiagRecorder::new(cfg.diag.clone())?)
    } else {
        None
    };
    let hooks: &mut dyn TrainHooks = match recorder.as_mut() {
        Some(r) => r,
        None => &mut NoHooks,
    };
    let outcome = training::train(&cfg.model, &cfg.train, corpus, cfg.data.mask_prob, hooks)?;

    let mut f = BufWriter::new(fs::File::create(out.join(METRICS))?);
    outcome.log.write_csv(&mut f)?;
    drop(f);
    if let Some(r) = &recorder {
        diagnostics::write_gradnorm_csv(&r.grad_norms, BufWriter::new(fs::File::create(out.join(GRADNORM))?))?;
        diagnostics::write_scales_csv(&r.scales, BufWriter::new(fs::File::create(out.join(SCALES))?))?;
    }
    checkpoint::save_checkpoint(&outcome.state.model, &out.join(CHECKPOINT))?;

    manifest.completed = true;
    manifest.steps_completed = outcome.steps_survived();
    if let Some((step, cause)) = outcome.divergence {
        manifest.diverged = true;
        manifest.divergence_cause = Some(cause.name().to_string());
        manifest.divergence_step = Some(step);
    }
    manifest.final_valid_loss = outcome.log.final_valid_loss();
    manifest.final_valid_ppl = manifest.final_valid_loss.map(f64::exp);
    manifest.write(out)?;
    Ok(RunArtifacts { manifest, outcome })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))
            })?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn preset(a: Arrangement) -> BlockVariant {
    match a {
        Arrangement::PostLn => BlockVariant::post_ln(),
        Arrangement::PreLn => BlockVariant::pre_ln(),
        Arrangement::NormFormer => BlockVariant::normformer(),
    }
}

pub fn cmd_train(args: &CommonArgs) -> Result<String> {
    let cfg = args.load()?;
    let corpus = Corpus::load(&cfg.data)?;
    let art = run_training(&cfg, &corpus, &args.out)?;
    let m = &art.manifest;
    let mut s = format!(
        "run {} ({}): {} updates",
        m.run_id, cfg.model.variant, m.steps_completed
    );
    if let Some(l) = m.final_valid_loss {
        let _ = write!(s, ", valid loss {l:.4}, ppl {:.3}", l.exp());
    }
    if let Some(c) = &m.divergence_cause {
        let _ = write!(s, ", diverged ({c}) at update {}", m.divergence_step.unwrap_or(0));
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub arrangement: Arrangement,
    pub result: StabilityResult,
}

pub fn run_stability(
    cfg: &LabConfig,
    corpus: &Corpus,
    out: &Path,
    seeds: usize,
    increment: f64,
) -> Result<Vec<StabilityRow>> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let jobs: Vec<(Arrangement, u64)> = cfg
        .sweep
        .variants
        .iter()
        .flat_map(|&a| (1..=seeds as u64).map(move |s| (a, s)))
        .collect();
    let pool = thread_pool()?;
    let rows: Vec<Result<StabilityRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, seed)| {
                let mut model = cfg.model.clone();
                model.variant = BlockVariant {
                    activation: cfg.model.variant.activation,
                    ln_style: cfg.model.variant.ln_style,
                    ..preset(a)
                };
                let (mcfg, tcfg) =
                    training::stability_configs(&model, &cfg.train, increment, seed, cfg.sweep.step_cap)?;
                let run_cfg = LabConfig {
                    model: mcfg,
                    train: tcfg.clone(),
                    ..cfg.clone()
                };
                let dir = out.join(a.name()).join(format!("seed{seed}"));
                let art = run_training(&run_cfg, corpus, &dir)?;
                Ok(StabilityRow {
                    arrangement: a,
                    result: training::stability_result(seed, &tcfg, &art.outcome),
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut s = String::from("arrangement,seed,steps_survived,cause,lr_reached\n");
    for r in rows {
        let cause = r.result.cause.map_or("none", |c| c.name());
        let _ = writeln!(
            s,
            "{},{},{},{},{:?}",
            r.arrangement.name(),
            r.result.seed,
            r.result.steps_survived,
            cause,
            r.result.lr_reached
        );
    }
    s
}

/// Median steps survived per arrangement, in sweep order.
pub fn stability_medians(rows: &[StabilityRow]) -> Vec<(Arrangement, f64)> {
    let mut order: Vec<Arrangement> = Vec::new();
    for r in rows {
        if !order.contains(&r.arrangement) {
            order.push(r.arrangement);
        }
    }
    order
        .into_iter()
        .map(|a| {
            let steps: Vec<f64> = rows
                .iter()
                .filter(|r| r.arrangement == a)
                .map(|r| r.result.steps_survived as f64)
                .collect();
            (a, median(&steps).expect("at least one run"))
        })
        .collect()
}

pub fn cmd_stability(args: &CommonArgs, seeds: usize, increment: f64) -> Result<String> {
    let cfg = args.load()?;
    let corpus = Corpus::load(&cfg.data)?;
    fs::create_dir_all(&args.out)?;
    let rows = run_stability(&cfg, &corpus, &args.out, seeds, increment)?;
    fs::write(args.out.join("stability.csv"), stability_csv(&rows))?;
    let mut md = "| arrangement | median steps survived | runs diverged |\n|---|---|---|\n".to_string();
    let mut summary = String::from("arrangement,median_steps,seeds,increment,step_cap\n");
    for (a, m) in stability_medians(&rows) {
        let diverged = rows
            .iter()
            .filter(|r| r.arrangement == a && r.result.cause.is_some())
            .count();
        let _ = writeln!(md, "| {} | {} | {}/{} |", a.name(), m, diverged, seeds);
        let _ = writeln!(
            summary,
            "{},{},{},{:?},{}",
            a.name(),
            m,
            seeds,
            increment,
            cfg.sweep.step_cap
        );
    }
    fs::write(args.out.join("stability_summary.csv"), summary)?;
    fs::write(args.out.join("stability.md"), &md)?;
    Ok(md)
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub label: &'static str,
    pub variant: BlockVariant,
}

/// Full NormFormer (with residual scaling), each single removal, the
/// QKV-LayerNorm addition, and the Pre-LN baseline, in table order.
pub fn ablation_grid(base: &BlockVariant) -> Vec<AblationEntry> {
    let full = BlockVariant {
        activation: base.activation,
        ln_style: base.ln_style,
        res_scale: true,
        ..BlockVariant::normformer()
    };
    let with = |label, f: fn(&mut BlockVariant)| {
        let mut v = full;
        f(&mut v);
        AblationEntry { label, variant: v }
    };
    vec![
        with("normformer", |_| {}),
        with("-post_attn_ln", |v| v.post_attn_ln = false),
        with("-ffn_ln", |v| v.ffn_ln = false),
        with("-head_scale", |v| v.head_scale = false),
        with("-res_scale", |v| v.res_scale = false),
        with("+qkv_ln", |v| v.qkv_ln = true),
        AblationEntry {
            label: "baseline",
            variant: BlockVariant {
                activation: base.activation,
                ln_style: base.ln_style,
                ..BlockVariant::pre_ln()
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub variant: BlockVariant,
    pub params: usize,
    pub added_params: usize,
    pub steps: usize,
    pub seeds: usize,
    pub diverged: usize,
    pub median_valid_loss: f64,
    pub ms_per_step: f64,
}

pub fn run_ablation(cfg: &LabConfig, corpus: &Corpus, out: &Path, seeds: usize) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let grid = ablation_grid(&cfg.model.variant);
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|i| (1..=seeds as u64).map(move |s| (i, s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<Result<(usize, RunArtifacts)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let mut run_cfg = cfg.clone();
                run_cfg.model.variant = grid[i].variant;
                run_cfg.model.seed = seed;
                run_cfg.train.seed = seed;
                let dir = out.join(grid[i].label).join(format!("seed{seed}"));
                Ok((i, run_training(&run_cfg, corpus, &dir)?))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let runs: Vec<&RunArtifacts> = results.iter().filter(|(j, _)| *j == i).map(|(_, r)| r).collect();
            let losses: Vec<f64> = runs
                .iter()
                .map(|r| r.manifest.final_valid_loss.unwrap_or(f64::NAN))
                .collect();
            let wall: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let last = r.outcome.log.rows.last().map_or(0, |x| x.wall_ms);
                    last as f64 / r.outcome.steps_survived().max(1) as f64
                })
                .collect();
            let mut mcfg = cfg.model.clone();
            mcfg.variant = e.variant;
            let count = count_parameters(&mcfg);
            AblationRow {
                label: e.label,
                variant: e.variant,
                params: count.total,
                added_params: count.added_by_modifications,
                steps: cfg.train.total_steps,
                seeds,
                diverged: runs.iter().filter(|r| r.manifest.diverged).count(),
                median_valid_loss: median(&losses).expect("at least one seed"),
                ms_per_step: wall.iter().sum::<f64>() / wall.len() as f64,
            }
        })
        .collect())
}

/// Deterministic table: everything except timing.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,variant,params,added_params,steps,seeds,diverged,valid_loss,valid_ppl\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:?},{:?}",
            r.label,
            r.variant,
            r.params,
            r.added_params,
            r.steps,
            r.seeds,
            r.diverged,
            r.median_valid_loss,
            r.median_valid_loss.exp()
        );
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("| row | params | added | valid loss | valid ppl | diverged |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.3} | {}/{} |",
            r.label,
            r.params,
            r.added_params,
            r.median_valid_loss,
            r.median_valid_loss.exp(),
            r.diverged,
            r.seeds
        );
    }
    s
}

/// Mean wall time per update relative to the baseline row.
pub fn overhead_csv(rows: &[AblationRow]) -> String {
    let base = rows
        .iter()
        .find(|r| r.label == "baseline")
        .map_or(f64::NAN, |r| r.ms_per_step);
    let mut s = String::from("row,ms_per_step,relative_to_baseline\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.3},{:.4}", r.label, r.ms_per_step, r.ms_per_step / base);
    }
    s
}

pub fn cmd_ablate(args: &CommonArgs, seeds: usize) -> Result<String> {
    let cfg = args.load()?;
    let corpus = Corpus::load(&cfg.data)?;
    fs::create_dir_all(&args.out)?;
    let rows = run_ablation(&cfg, &corpus, &args.out, seeds)?;
    let md = ablation_markdown(&rows);
    fs::write(args.out.join("ablation.csv"), ablation_csv(&rows))?;
    fs::write(args.out.join("ablation.md"), &md)?;
    fs::write(args.out.join("overhead.csv"), overhead_csv(&rows))?;
    Ok(md)
}

/// Logs of one finished run directory.
pub struct LoadedRun {
    pub label: String,
    pub manifest: RunManifest,
    pub metrics: MetricLog,
    pub grad_norms: Vec<GradNormRecord>,
    pub scales: Vec<ScaleSnapshot>,
}

/// Loads every run, collecting all missing or malformed files into one error.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut problems = Vec::new();
    let mut runs = Vec::new();
    for dir in dirs {
        let read = |name: &str| -> std::result::Result<String, String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
        };
        let manifest = RunManifest::read(dir).map_err(|e| format!("{}: {e}", dir.join(MANIFEST).display()));
        let file = |n: &str| dir.join(n).display().to_string();
        let metrics = read(METRICS).and_then(|t| MetricLog::parse_csv(&t, &file(METRICS)).map_err(|e| e.to_string()));
        let grads = read(GRADNORM)
            .and_then(|t| diagnostics::parse_gradnorm_csv(&t, &file(GRADNORM)).map_err(|e| e.to_string()));
        let scales =
            read(SCALES).and_then(|t| diagnostics::parse_scales_csv(&t, &file(SCALES)).map_err(|e| e.to_string()));
        match (manifest, metrics, grads, scales) {
            (Ok(manifest), Ok(metrics), Ok(grad_norms), Ok(scales)) => runs.push(LoadedRun {
                label: dir.display().to_string(),
                manifest,
                metrics,
                grad_norms,
                scales,
            }),
            (m, me, g, s) => problems.extend([m.err(), me.err(), g.err(), s.err()].into_iter().flatten()),
        }
    }
    if !problems.is_empty() {
        let io = problems
            .iter()
            .any(|p| p.contains("No such file") || p.contains("os error"));
        let msg = format!("cannot load run logs:\n  {}", problems.join("\n  "));
        return Err(if io {
            Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg))
        } else {
            Error::InvalidArgument(msg)
        });
    }
    Ok(runs)
}

pub struct Report {
    pub markdown: String,
    pub files: Vec<(&'static str, String)>,
}

fn last_step(run: &LoadedRun) -> usize {
    run.metrics.rows.iter().map(|r| r.step).max().unwrap_or(0)
}

fn windows(run: &LoadedRun, width: usize) -> (Window, Window) {
    let last = last_step(run).max(1);
    (
        Window::new(1, width.min(last)),
        Window::new(last.saturating_sub(width) + 1, last),
    )
}

/// Pure function of the loaded logs.
pub fn build_report(runs: &[LoadedRun]) -> Result<Report> {
    let mut md = String::from("# Run comparison\n\n");
    md.push_str("Gradient norms are mean absolute entries. Divergence is a non-finite value or a smoothed training loss above a fixed multiple of its running minimum.\n\n");

    md.push_str("## Runs\n\n| run | variant | updates | diverged | final valid loss | final valid ppl |\n|---|---|---|---|---|---|\n");
    for r in runs {
        let m = &r.manifest;
        let variant = m.config.get("model.arrangement").cloned().unwrap_or_default();
        let loss = m.final_valid_loss.map_or("-".into(), |l| format!("{l:.4}"));
        let ppl = m.final_valid_ppl.map_or("-".into(), |p| format!("{p:.3}"));
        let div = m.divergence_cause.clone().unwrap_or_else(|| "no".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.label, variant, m.steps_completed, div, loss, ppl
        );
    }

    let mut loss_csv = String::from("run,step,split,loss,ppl\n");
    for r in runs {
        for row in &r.metrics.rows {
            let _ = writeln!(
                loss_csv,
                "{},{},{},{:?},{:?}",
                r.label,
                row.step,
                row.split.name(),
                row.loss,
                row.ppl
            );
        }
    }

    md.push_str("\n## Gradient mismatch (first layer / last layer)\n\n| run | param | early window | early ratio | late window | late ratio |\n|---|---|---|---|---|---|\n");
    let mut mismatch_csv = String::from("run,param,window_start,window_end,layer,mean_l1,mismatch_ratio\n");
    for r in runs {
        let width: usize = r
            .manifest
            .config
            .get("diag.ratio_window")
            .and_then(|v| v.parse().ok())
            .unwrap_or(100);
        let (early, late) = windows(r, width);
        let params: Vec<&str> = {
            let mut p: Vec<&str> = r.grad_norms.iter().map(|g| g.param_name.as_str()).collect();
            p.sort_unstable();
            p.dedup();
            p
        };
        for p in params {
            let mut cells = Vec::new();
            for w in [early, late] {
                match diagnostics::mismatch_report(&r.grad_norms, p, w) {
                    Ok(rep) => {
                        for (layer, mean) in &rep.layer_means {
                            let _ = writeln!(
                                mismatch_csv,
                                "{},{},{},{},{},{},{}",
                                r.label,
                                p,
                                w.start,
                                w.end,
                                layer,
                                diagnostics::fmt_exact(*mean),
                                diagnostics::fmt_exact(rep.mismatch_ratio)
                            );
                        }
                        cells.push(format!("{}-{}", w.start, w.end));
                        cells.push(format!("{:.4}", rep.mismatch_ratio));
                    }
                    Err(Error::EmptyWindow { .. }) => {
                        cells.push(format!("{}-{}", w.start, w.end));
                        cells.push("-".into());
                    }
                    Err(e) => return Err(e),
                }
            }
            let _ = writeln!(md, "| {} | {} | {} |", r.label, p, cells.join(" | "));
        }
    }

    let mut ratio_csv = String::from("run,reference,window_start,window_end,param,layer,ratio\n");
    if let Some(reference) = runs.first() {
        md.push_str(&format!(
            "\n## Loss-normalized gradient ratios against {}\n\n| run | param | layer | ratio |\n|---|---|---|---|\n",
            reference.label
        ));
        for r in runs {
            let width: usize = r
                .manifest
                .config
                .get("diag.ratio_window")
                .and_then(|v| v.parse().ok())
                .unwrap_or(100);
            let (_, late) = windows(r, width);
            let a = RunLogs {
                metrics: &r.metrics,
                grad_norms: &r.grad_norms,
            };
            let b = RunLogs {
                metrics: &reference.metrics,
                grad_norms: &reference.grad_norms,
            };
            match diagnostics::grad_ratio_report(&a, &b, late) {
                Ok(rows) => {
                    for row in rows {
                        let _ = writeln!(
                            ratio_csv,
                            "{},{},{},{},{},{},{}",
                            r.label,
                            reference.label,
                            late.start,
                            late.end,
                            row.param_name,
                            row.layer,
                            diagnostics::fmt_exact(row.ratio)
                        );
                        let _ = writeln!(
                            md,
                            "| {} | {} | {} | {:.4} |",
                            r.label, row.param_name, row.layer, row.ratio
                        );
                    }
                }
                Err(Error::EmptyWindow { .. }) => {
                    let _ = writeln!(md, "| {} | - | - | no overlapping records |", r.label);
                }
                Err(e) => return Err(e),
            }
        }
    }

    md.push_str("\n## Learned scales at the last snapshot\n\n| run | kind | layer | mean | min | max |\n|---|---|---|---|---|---|\n");
    let mut scales_csv = String::from("run,step,kind,layer,mean,min,max\n");
    for r in runs {
        let Some(last) = r.scales.iter().map(|s| s.step).max() else {
            continue;
        };
        for s in r.scales.iter().filter(|s| s.step == last) {
            let n = s.values.len() as f64;
            let mean = s.values.iter().sum::<f64>() / n;
            let min = s.values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                scales_csv,
                "{},{},{},{},{},{},{}",
                r.label,
                s.step,
                s.kind.name(),
                s.layer,
                diagnostics::fmt_exact(mean),
                diagnostics::fmt_exact(min),
                diagnostics::fmt_exact(max)
            );
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                r.label,
                s.kind.name(),
                s.layer,
                mean,
                min,
                max
            );
        }
    }

    Ok(Report {
        markdown: md,
        files: vec![
            ("loss.csv", loss_csv),
            ("mismatch.csv", mismatch_csv),
            ("grad_ratio.csv", ratio_csv),
            ("scales_summary.csv", scales_csv),
        ],
    })
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let loaded = load_runs(runs)?;
    let report = build_report(&loaded)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.md"), &report.markdown)?;
        for (name, text) in &report.files {
            fs::write(dir.join(name), text)?;
        }
    }
    Ok(report.markdown)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Stability {
            common,
            seeds,
            increment,
        } => cmd_stability(common, *seeds, *increment),
        Command::Ablate { common, seeds } => cmd_ablate(common, *seeds),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref()),
    };
    match result {
        Ok(s) => {
            println!("{s}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
