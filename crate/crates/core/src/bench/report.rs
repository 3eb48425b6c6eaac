use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::AppConfig;
use crate::drafting::{FspadProposer, TreeConfig};
use crate::error::{Error, Result};
use crate::models::{DraftStack, TargetModel, Variant};
use crate::training::{TaskKind, TokenizedCorpus, EOS};
use crate::verification::{generate, vanilla_generate, GenerateConfig, StepStats};

/// One (task, temperature, variant) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub task: TaskKind,
    pub temperature: f64,
    pub variant: Variant,
    /// Emitted tokens per target forward pass.
    pub tau: f64,
    /// Vanilla wall time over speculative wall time, warmup prompts excluded.
    pub speedup: f64,
    pub tokens_emitted: usize,
    pub target_passes: usize,
    pub draft_passes: usize,
    pub wall_ms_vanilla: f64,
    pub wall_ms_spec: f64,
    pub seed: u64,
    pub config_hash: String,
    pub prompts: usize,
    /// Prompt indices skipped because they do not fit the context.
    pub skipped: Vec<usize>,
}

/// Per-step stats of the speculative arm, one line per draft/verify round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: TaskKind,
    pub temperature: f64,
    pub variant: Variant,
    pub prompt: usize,
    #[serde(flatten)]
    pub stats: StepStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchRun {
    pub reports: Vec<BenchReport>,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    task: TaskKind,
    temperature: f64,
    variant: Variant,
    tau: f64,
    speedup: f64,
    tokens_emitted: usize,
    target_passes: usize,
    draft_passes: usize,
    wall_ms_vanilla: f64,
    wall_ms_spec: f64,
    seed: u64,
    config_hash: &'a str,
    prompts: usize,
    skipped: usize,
}

/// Prompts (`[BOS] prompt`) of the first `n` eval documents of `task`.
pub fn task_prompts(corpus: &TokenizedCorpus, task: TaskKind, n: usize) -> Vec<Vec<u32>> {
    corpus
        .eval
        .iter()
        .filter(|d| d.kind == task)
        .take(n)
        .map(|d| d.prompt_tokens().to_vec())
        .collect()
}

/// Prompts for every configured task.
pub fn bench_prompts(cfg: &AppConfig, corpus: &TokenizedCorpus) -> Result<BTreeMap<TaskKind, Vec<Vec<u32>>>> {
    let mut out = BTreeMap::new();
    for &task in &cfg.bench.tasks {
        let p = task_prompts(corpus, task, cfg.bench.prompts_per_task);
        if p.is_empty() {
            return Err(Error::Config(format!("eval split has no {task} documents")));
        }
        out.insert(task, p);
    }
    Ok(out)
}

/// Settings shared by every cell of one run.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub task: TaskKind,
    pub temperature: f64,
    pub tree: TreeConfig,
    pub max_new: usize,
    pub warmup: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Vanilla then speculative decoding over the same seeded prompts.
pub fn run_cell(
    target: &TargetModel,
    stack: &DraftStack,
    prompts: &[Vec<u32>],
    spec: &CellSpec,
) -> Result<(BenchReport, Vec<StepRecord>)> {
    if prompts.is_empty() {
        return Err(Error::contract("no prompts for benchmark cell"));
    }
    let max = target.config.max_seq_len;
    let mut proposer = FspadProposer::new(target, stack)?;
    let mut skipped = Vec::new();
    let mut steps = Vec::new();
    let (mut emitted, mut passes, mut draft_passes) = (0, 0, 0);
    let (mut us_vanilla, mut us_spec) = (0u64, 0u64);
    let timed_from = if prompts.len() > spec.warmup { spec.warmup } else { 0 };
    for (i, prompt) in prompts.iter().enumerate() {
        if prompt.is_empty() || prompt.len() + spec.max_new > max {
            skipped.push(i);
            continue;
        }
        let seed = spec.seed.wrapping_add(i as u64);
        let t = Instant::now();
        let vanilla = vanilla_generate(target, prompt, spec.max_new, spec.temperature, seed, Some(EOS))?;
        let v_us = t.elapsed().as_micros() as u64;
        let cfg = GenerateConfig {
            max_new: spec.max_new,
            temperature: spec.temperature,
            seed,
            tree: spec.tree,
            eos: Some(EOS),
        };
        let t = Instant::now();
        let g = generate(target, &mut proposer, prompt, &cfg)?;
        let s_us = t.elapsed().as_micros() as u64;
        if spec.temperature == 0.0 && g.tokens != vanilla.tokens {
            return Err(Error::contract(format!(
                "greedy outputs diverge on {} prompt {i}",
                spec.task
            )));
        }
        if i >= timed_from {
            us_vanilla += v_us;
            us_spec += s_us;
        }
        emitted += g.emitted();
        passes += g.target_passes();
        draft_passes += g.draft_passes();
        steps.extend(g.steps.into_iter().map(|stats| StepRecord {
            task: spec.task,
            temperature: spec.temperature,
            variant: stack.variant,
            prompt: i,
            stats,
        }));
    }
    if passes == 0 {
        return Err(Error::contract(format!("every {} prompt was skipped", spec.task)));
    }
    let report = BenchReport {
        task: spec.task,
        temperature: spec.temperature,
        variant: stack.variant,
        tau: emitted as f64 / passes as f64,
        speedup: if us_spec == 0 { 0.0 } else { us_vanilla as f64 / us_spec as f64 },
        tokens_emitted: emitted,
        target_passes: passes,
        draft_passes,
        wall_ms_vanilla: us_vanilla as f64 / 1e3,
        wall_ms_spec: us_spec as f64 / 1e3,
        seed: spec.seed,
        config_hash: spec.config_hash.clone(),
        prompts: prompts.len(),
        skipped,
    };
    Ok((report, steps))
}

/// Every (task, temperature, variant) cell, serially, in config order.
pub fn run_bench(
    cfg: &AppConfig,
    target: &TargetModel,
    stacks: &[&DraftStack],
    prompts: &BTreeMap<TaskKind, Vec<Vec<u32>>>,
) -> Result<BenchRun> {
    let mut run = BenchRun::default();
    let hash = cfg.hash();
    for &task in &cfg.bench.tasks {
        let p = prompts
            .get(&task)
            .ok_or_else(|| Error::Config(format!("no prompts for task {task}")))?;
        for &temperature in &cfg.bench.temperatures {
            for stack in stacks {
                let spec = CellSpec {
                    task,
                    temperature,
                    tree: cfg.drafting,
                    max_new: cfg.bench.max_new,
                    warmup: cfg.bench.warmup,
                    seed: cfg.bench.seed,
                    config_hash: hash.clone(),
                };
                let (r, s) = run_cell(target, stack, p, &spec)?;
                log::info!(
                    "{task} T={temperature} {}: tau {:.3} speedup {:.2}",
                    r.variant,
                    r.tau,
                    r.speedup
                );
                run.reports.push(r);
                run.steps.extend(s);
            }
        }
    }
    Ok(run)
}

/// The four-variant grid. Every variant must be present.
pub fn run_ablation(
    cfg: &AppConfig,
    target: &TargetModel,
    stacks: &[&DraftStack],
    prompts: &BTreeMap<TaskKind, Vec<Vec<u32>>>,
) -> Result<BenchRun> {
    let mut ordered = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let s = stacks
            .iter()
            .find(|s| s.variant == v)
            .ok_or_else(|| Error::Config(format!("missing draft for variant {v}")))?;
        ordered.push(*s);
    }
    run_bench(cfg, target, &ordered, prompts)
}

/// tau recomputed from the step log for one cell.
pub fn recount_tau(steps: &[StepRecord], task: TaskKind, temperature: f64, variant: Variant) -> Option<f64> {
    let (mut e, mut p) = (0usize, 0usize);
    for s in steps
        .iter()
        .filter(|s| s.task == task && s.temperature == temperature && s.variant == variant)
    {
        e += s.stats.emitted;
        p += s.stats.target_passes;
    }
    (p > 0).then(|| e as f64 / p as f64)
}

/// Checks the report arithmetic against itself and the step log.
pub fn check_consistency(run: &BenchRun) -> Result<()> {
    for r in &run.reports {
        let direct = r.tokens_emitted as f64 / r.target_passes as f64;
        let recount = recount_tau(&run.steps, r.task, r.temperature, r.variant);
        if (r.tau - direct).abs() > 1e-9 || recount.map_or(true, |t| (t - r.tau).abs() > 1e-9) || r.tau < 1.0 {
            return Err(Error::contract(format!(
                "{} T={} {}: tau {} inconsistent with counts or step log",
                r.task, r.temperature, r.variant, r.tau
            )));
        }
    }
    Ok(())
}

/// Paths written by [`write_run`]: JSON report, CSV and step log.
pub fn output_paths(json: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        json.to_path_buf(),
        json.with_extension("csv"),
        json.with_extension("steps.ndjson"),
    )
}

pub fn reports_csv(reports: &[BenchReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            task: r.task,
            temperature: r.temperature,
            variant: r.variant,
            tau: r.tau,
            speedup: r.speedup,
            tokens_emitted: r.tokens_emitted,
            target_passes: r.target_passes,
            draft_passes: r.draft_passes,
            wall_ms_vanilla: r.wall_ms_vanilla,
            wall_ms_spec: r.wall_ms_spec,
            seed: r.seed,
            config_hash: &r.config_hash,
            prompts: r.prompts,
            skipped: r.skipped.len(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON array at `json`, CSV and step log alongside.
pub fn write_run(run: &BenchRun, json: &Path) -> Result<()> {
    let (j, c, s) = output_paths(json);
    if let Some(dir) = j.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(&j, serde_json::to_string_pretty(&run.reports)?.as_bytes())?;
    write_file(&c, reports_csv(&run.reports)?.as_bytes())?;
    let mut steps = Vec::new();
    for r in &run.steps {
        serde_json::to_writer(&mut steps, r)?;
        steps.write_all(b"\n").expect("vec write");
    }
    write_file(&s, &steps)
}

pub fn read_reports(path: &Path) -> Result<Vec<BenchReport>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// `task,variant,tau` rows for plotting, one per (task, variant), taken
/// from the lowest temperature present for that pair.
pub fn emit_plots(reports: &[BenchReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::contract("no reports to plot"));
    }
    let mut best: BTreeMap<(TaskKind, Variant), &BenchReport> = BTreeMap::new();
    for r in reports {
        best.entry((r.task, r.variant))
            .and_modify(|b| {
                if r.temperature < b.temperature {
                    *b = r;
                }
            })
            .or_insert(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "variant", "tau"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for ((task, variant), r) in best {
        w.write_record([task.as_str(), variant.as_str(), &r.tau.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Soft ordering check on greedy cells: per task, does fspad match or beat
/// both no_fs and no_pad?
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub per_task: Vec<(TaskKind, bool)>,
    pub wins: usize,
    pub tasks: usize,
}

impl AblationSummary {
    /// Ordering holds on at least two of three tasks (or all, if fewer).
    pub fn holds(&self) -> bool {
        self.wins >= self.tasks.min(2)
    }
}

pub fn ablation_summary(reports: &[BenchReport]) -> AblationSummary {
    let tau = |task, v| {
        reports
            .iter()
            .find(|r| r.task == task && r.variant == v && r.temperature == 0.0)
            .map(|r| r.tau)
    };
    let mut tasks: Vec<TaskKind> = reports.iter().filter(|r| r.temperature == 0.0).map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    let per_task: Vec<(TaskKind, bool)> = tasks
        .iter()
        .map(|&t| {
            let ok = match (tau(t, Variant::Fspad), tau(t, Variant::NoFs), tau(t, Variant::NoPad)) {
                (Some(f), Some(a), Some(b)) => f >= a && f >= b,
                _ => false,
            };
            (t, ok)
        })
        .collect();
    AblationSummary {
        wins: per_task.iter().filter(|p| p.1).count(),
        tasks: per_task.len(),
        per_task,
    }
}
