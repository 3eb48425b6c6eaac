use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fspad::bench::{
    ablation_summary, bench_prompts, check_consistency, corpus_with, emit_plots, run_ablation, run_bench, selftest,
    train_draft_stage, train_target_stage, write_run, AppConfig, Artifacts,
};
use fspad::drafting::FspadProposer;
use fspad::models::Variant;
use fspad::training::{BOS, EOS};
use fspad::verification::{generate, vanilla_generate, GenerateConfig};
use fspad::{Error, Result};

#[derive(Parser)]
#[command(name = "fspad", version, about = "Train draft models and benchmark speculative decoding")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config with model, training, drafting and bench sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifacts directory for checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Tree budget N (drafted nodes per step).
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    topk: Option<usize>,
    #[arg(long, global = true)]
    depth: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, learn the tokenizer and pretrain the target.
    TrainTarget,
    /// Distil one draft variant against the saved target.
    TrainDraft {
        #[arg(long, default_value = "fspad")]
        variant: Variant,
    },
    /// Decode one prompt with the speculative engine and report tau.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "fspad")]
        variant: Variant,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Decode with the target alone.
        #[arg(long)]
        vanilla: bool,
    },
    /// Vanilla vs speculative decoding over eval prompts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "fspad")]
        variant: Vec<Variant>,
    },
    /// Four-variant ablation grid.
    Ablate,
    /// Quick internal consistency checks on tiny random models.
    Selftest,
}

fn load_config(c: &Common) -> Result<AppConfig> {
    let mut cfg = match &c.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = c.temperature {
        cfg.bench.temperatures = vec![t];
    }
    if let Some(n) = c.budget {
        cfg.drafting.budget = n;
    }
    if let Some(k) = c.topk {
        cfg.drafting.top_k = k;
    }
    if let Some(d) = c.depth {
        cfg.drafting.depth = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn bench(cfg: &AppConfig, art: &Artifacts, variants: Option<&[Variant]>, name: &str) -> Result<()> {
    let target = art.load_target()?;
    let corpus = corpus_with(cfg, art.load_tokenizer()?)?;
    let prompts = bench_prompts(cfg, &corpus)?;
    let wanted = variants.map_or(Variant::ALL.to_vec(), |v| v.to_vec());
    let stacks = wanted.iter().map(|&v| art.load_draft(v)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = stacks.iter().collect();
    let run = match variants {
        Some(_) => run_bench(cfg, &target, &refs, &prompts)?,
        None => run_ablation(cfg, &target, &refs, &prompts)?,
    };
    check_consistency(&run)?;
    let json = art.dir.join(format!("{name}.json"));
    write_run(&run, &json)?;
    write_text(&art.dir.join(format!("{name}_plot.csv")), &emit_plots(&run.reports)?)?;
    println!("task\ttemp\tvariant\ttau\tspeedup");
    for r in &run.reports {
        println!("{}\t{}\t{}\t{:.3}\t{:.2}", r.task, r.temperature, r.variant, r.tau, r.speedup);
    }
    if variants.is_none() {
        let s = ablation_summary(&run.reports);
        if s.holds() {
            println!("ablation ordering holds on {}/{} tasks", s.wins, s.tasks);
        } else {
            println!("!!! ABLATION ORDERING REGRESSION: fspad leads on only {}/{} tasks !!!", s.wins, s.tasks);
        }
    }
    println!("wrote {}", json.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let art = Artifacts::new(&cli.common.out);
    if let Command::Selftest = cli.command {
        let checks = selftest(cli.common.seed.unwrap_or(0))?;
        for c in &checks {
            println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        return Ok(checks.iter().all(|c| c.passed));
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::TrainTarget => {
            let out = train_target_stage(&cfg, &art)?;
            println!(
                "target eval loss {:.4} -> {:.4}; saved {}",
                out.initial_eval_loss,
                out.final_eval_loss,
                art.target().display()
            );
        }
        Command::TrainDraft { variant } => {
            let out = train_draft_stage(&cfg, &art, variant)?;
            if let Some(last) = out.log.last() {
                println!(
                    "{variant}: L {:.4} L_t {:.4} L_f {:.4} top1 {:.3}; saved {}",
                    last.loss,
                    last.l_t,
                    last.l_f,
                    last.top1_acc,
                    art.draft(variant).display()
                );
            }
        }
        Command::Generate {
            prompt,
            variant,
            max_new,
            vanilla,
        } => {
            let tok = art.load_tokenizer()?;
            let target = art.load_target()?;
            let mut ids = vec![BOS];
            ids.extend(tok.encode(prompt.as_bytes()));
            let temperature = cli.common.temperature.unwrap_or(0.0);
            let seed = cfg.bench.seed;
            let g = if vanilla {
                vanilla_generate(&target, &ids, max_new, temperature, seed, Some(EOS))?
            } else {
                let stack = art.load_draft(variant)?;
                let mut p = FspadProposer::new(&target, &stack)?;
                let gc = GenerateConfig {
                    max_new,
                    temperature,
                    seed,
                    tree: cfg.drafting,
                    eos: Some(EOS),
                };
                generate(&target, &mut p, &ids, &gc)?
            };
            println!("{}{}", prompt, tok.decode_lossy(&g.tokens));
            eprintln!(
                "tokens {} target passes {} tau {:.3} wall {:.1} ms",
                g.emitted(),
                g.target_passes(),
                g.tau(),
                g.wall_us as f64 / 1e3
            );
        }
        Command::Bench { variant } => bench(&cfg, &art, Some(&variant), "bench")?,
        Command::Ablate => bench(&cfg, &art, None, "ablation")?,
        Command::Selftest => unreachable!(),
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric { .. } | Error::Training { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
