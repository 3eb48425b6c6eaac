use std::collections::BTreeMap;

use fspad::bench::{
    ablation_summary, bench_prompts, check_consistency, emit_plots, output_paths, read_reports, recount_tau,
    reports_csv, run_ablation, run_bench, write_run, AppConfig, BenchReport, BenchRun,
};
use fspad::drafting::TreeConfig;
use fspad::models::{DraftStack, ModelConfig, TargetModel, Variant};
use fspad::training::{Corpus, CorpusConfig, TaskKind, TokenizedCorpus};
use fspad::Error;

fn micro_app() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.model = ModelConfig {
        vocab_size: 300,
        hidden_size: 16,
        intermediate_size: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 160,
        rope_base: 10_000.0,
    };
    cfg.training.corpus = CorpusConfig {
        documents: 120,
        eval_fraction: 0.25,
        ..CorpusConfig::default()
    };
    cfg.training.target.seq_len = 64;
    cfg.training.draft.seq_len = 64;
    cfg.drafting = TreeConfig {
        depth: 3,
        top_k: 3,
        select_m: 2,
        budget: 8,
    };
    cfg.bench.prompts_per_task = 3;
    cfg.bench.max_new = 12;
    cfg.bench.temperatures = vec![0.0, 0.8];
    cfg.validate().unwrap();
    cfg
}

struct Fixture {
    cfg: AppConfig,
    target: TargetModel,
    stacks: Vec<DraftStack>,
    prompts: BTreeMap<TaskKind, Vec<Vec<u32>>>,
}

fn fixture() -> Fixture {
    let cfg = micro_app();
    let corpus = Corpus::generate(&cfg.training.corpus).unwrap();
    let tc = TokenizedCorpus::build(&corpus, 300).unwrap();
    let target = TargetModel::new(cfg.model.clone(), 1).unwrap();
    let stacks = Variant::ALL
        .iter()
        .map(|&v| DraftStack::new(cfg.model.clone(), v, 2).unwrap())
        .collect();
    let prompts = bench_prompts(&cfg, &tc).unwrap();
    Fixture {
        cfg,
        target,
        stacks,
        prompts,
    }
}

fn strip_times(r: &[BenchReport]) -> Vec<BenchReport> {
    r.iter()
        .cloned()
        .map(|mut r| {
            r.speedup = 0.0;
            r.wall_ms_spec = 0.0;
            r.wall_ms_vanilla = 0.0;
            r
        })
        .collect()
}

#[test]
fn ablation_grid_is_complete_and_consistent() {
    let f = fixture();
    let refs: Vec<&DraftStack> = f.stacks.iter().collect();
    let run = run_ablation(&f.cfg, &f.target, &refs, &f.prompts).unwrap();
    assert_eq!(run.reports.len(), 3 * 2 * 4);
    for task in TaskKind::ALL {
        for t in [0.0, 0.8] {
            let vs: Vec<Variant> = run
                .reports
                .iter()
                .filter(|r| r.task == task && r.temperature == t)
                .map(|r| r.variant)
                .collect();
            assert_eq!(vs, Variant::ALL.to_vec());
        }
    }
    check_consistency(&run).unwrap();
    for r in &run.reports {
        assert!(r.tau >= 1.0);
        assert!((r.tau - r.tokens_emitted as f64 / r.target_passes as f64).abs() <= 1e-9);
        assert_eq!(recount_tau(&run.steps, r.task, r.temperature, r.variant), Some(r.tau));
        assert!(r.draft_passes > 0);
        assert_eq!(r.config_hash, f.cfg.hash());
    }
    // Every variant sees the same prompt indices for a given task.
    for task in TaskKind::ALL {
        let ids = |v: Variant| {
            let mut s: Vec<usize> = run
                .steps
                .iter()
                .filter(|s| s.task == task && s.variant == v && s.temperature == 0.0)
                .map(|s| s.prompt)
                .collect();
            s.dedup();
            s
        };
        for v in Variant::ALL {
            assert_eq!(ids(v), ids(Variant::Fspad));
        }
    }
    let s = ablation_summary(&run.reports);
    assert_eq!(s.tasks, 3);

    let missing: Vec<&DraftStack> = refs.iter().copied().filter(|s| s.variant != Variant::NoFs).collect();
    match run_ablation(&f.cfg, &f.target, &missing, &f.prompts) {
        Err(Error::Config(m)) => assert!(m.contains("no_fs"), "{m}"),
        other => panic!("expected missing-variant error, got {:?}", other.map(|r| r.reports.len())),
    }
}

#[test]
fn reports_are_reproducible_apart_from_wall_time() {
    let f = fixture();
    let refs: Vec<&DraftStack> = f.stacks.iter().filter(|s| s.variant == Variant::Fspad).collect();
    let a = run_bench(&f.cfg, &f.target, &refs, &f.prompts).unwrap();
    let b = run_bench(&f.cfg, &f.target, &refs, &f.prompts).unwrap();
    assert_eq!(strip_times(&a.reports), strip_times(&b.reports));
    let c = run_bench(&f.cfg.clone().with_seed(9), &f.target, &refs, &f.prompts).unwrap();
    assert_ne!(a.reports[0].config_hash, c.reports[0].config_hash);
}

#[test]
fn written_reports_round_trip_and_plot_deterministically() {
    let f = fixture();
    let refs: Vec<&DraftStack> = f.stacks.iter().take(2).collect();
    let run = run_bench(&f.cfg, &f.target, &refs, &f.prompts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("out/bench.json");
    write_run(&run, &json).unwrap();
    let (j, c, s) = output_paths(&json);
    let back = read_reports(&j).unwrap();
    assert_eq!(back, run.reports);
    let csv = std::fs::read_to_string(c).unwrap();
    assert_eq!(csv, reports_csv(&run.reports).unwrap());
    assert_eq!(csv.lines().count(), run.reports.len() + 1);
    assert!(csv.starts_with("task,temperature,variant,tau,speedup"));
    let steps = std::fs::read_to_string(s).unwrap();
    assert_eq!(steps.lines().count(), run.steps.len());

    let plot = emit_plots(&back).unwrap();
    assert_eq!(plot, emit_plots(&read_reports(&j).unwrap()).unwrap());
    let rows: Vec<&str> = plot.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let r = back
            .iter()
            .find(|r| r.task.as_str() == cols[0] && r.variant.as_str() == cols[1] && r.temperature == 0.0)
            .unwrap();
        assert_eq!(cols[2].parse::<f64>().unwrap(), r.tau);
    }
    assert!(matches!(emit_plots(&[]), Err(Error::Contract(_))));
}

#[test]
fn prompts_that_do_not_fit_are_skipped() {
    let f = fixture();
    let mut prompts = f.prompts.clone();
    let long = vec![5u32; f.cfg.model.max_seq_len];
    prompts.get_mut(&TaskKind::Continuation).unwrap().insert(0, long);
    let mut cfg = f.cfg.clone();
    cfg.bench.tasks = vec![TaskKind::Continuation];
    cfg.bench.temperatures = vec![0.0];
    let refs: Vec<&DraftStack> = f.stacks.iter().take(1).collect();
    let run = run_bench(&cfg, &f.target, &refs, &prompts).unwrap();
    assert_eq!(run.reports[0].skipped, vec![0]);
    assert_eq!(run.reports[0].prompts, 4);
}

#[test]
fn shipped_toy_config_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json");
    let cfg = AppConfig::load(std::path::Path::new(path)).unwrap();
    assert_eq!(cfg, AppConfig::default());
    assert_eq!(cfg.drafting, TreeConfig::default());
}

#[test]
fn empty_run_has_no_inconsistency() {
    check_consistency(&BenchRun::default()).unwrap();
}
