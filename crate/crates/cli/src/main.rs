//! Command-line driver: target pretraining, draft training, decoding,
//! benchmarking and analysis, with deterministic seeded outputs.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use config::Config;
use sparrow_core::bench::{
    self, analysis, gen_workload, grounded_accuracy, BenchConfig, Fig1aRow, GroundedTask, Method,
    Workload, WorkloadKind,
};
use sparrow_core::draft::DraftModel;
use sparrow_core::model::TargetModel;
use sparrow_core::numkernel::Rng;
use sparrow_core::specdec::{
    decode, vanilla_decode, DecodeOptions, DecodeRecord, DraftInputMode, TreeConfig,
};
use sparrow_core::train::{
    pretrain_target, teacher_trace, train_draft_two_stage, TrainConfig, TrainStage,
};

#[derive(Parser)]
#[command(name = "sparrow", version, about = "Speculative decoding workbench")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (falls back to config, then SPARROW_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CkptArgs {
    /// Target checkpoint (default <out-dir>/target.sprw).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Draft checkpoint (default <out-dir>/draft.sprw).
    #[arg(long)]
    draft: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy target on the synthetic grounded task.
    TrainTarget,
    /// Train the draft with the two-stage schedule.
    TrainDraft {
        #[arg(long)]
        stage1_epochs: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        mtp_depth: Option<usize>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Decode prompts from a JSON-lines prompt file.
    Decode {
        #[arg(long)]
        prompt_file: PathBuf,
        /// Candidate-tree budget as total-depth-width.
        #[arg(long)]
        tree: Option<String>,
        #[arg(long)]
        temperature: Option<f32>,
        /// sparrow | baseline | vanilla.
        #[arg(long, default_value = "sparrow")]
        method: String,
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Visual-length sweep benchmark plus the pruning sweep.
    Bench {
        #[command(flatten)]
        ckpt: CkptArgs,
    },
    /// Layer truncation, attention flow and retention experiments.
    Analyze {
        #[command(flatten)]
        ckpt: CkptArgs,
    },
}

/// Usage/config problems exit 2; runtime failures exit 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<sparrow_core::Error> for CliError {
    fn from(e: sparrow_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).map_err(CliError::Usage)?,
        None => Config::default(),
    };
    for assignment in &cli.set {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {assignment:?} is not key=value")))?;
        cfg.set(key.trim(), value.trim()).map_err(CliError::Usage)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if cli.config.is_none() || cfg.seed == 0 {
        if let Ok(env_seed) = std::env::var("SPARROW_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|e| CliError::Usage(format!("SPARROW_SEED: {e}")))?;
        }
    }
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cli.out_dir.display())))?;

    match cli.command {
        Command::TrainTarget => cmd_train_target(&cfg, &cli.out_dir),
        Command::TrainDraft { stage1_epochs, stage2_epochs, alpha, beta, mtp_depth, target } => {
            let mut cfg = cfg;
            if let Some(v) = stage1_epochs {
                cfg.draft_stage1_epochs = v;
            }
            if let Some(v) = stage2_epochs {
                cfg.draft_stage2_epochs = v;
            }
            if let Some(v) = alpha {
                cfg.draft_alpha = v;
            }
            if let Some(v) = beta {
                cfg.draft_beta = v;
            }
            if let Some(v) = mtp_depth {
                cfg.draft_mtp_depth = v;
            }
            cmd_train_draft(&cfg, &cli.out_dir, target.as_deref())
        }
        Command::Decode { prompt_file, tree, temperature, method, ckpt } => {
            let mut cfg = cfg;
            if let Some(t) = tree {
                cfg.tree = t;
            }
            if let Some(t) = temperature {
                cfg.temperature = t;
            }
            cmd_decode(&cfg, &cli.out_dir, &prompt_file, &method, &ckpt)
        }
        Command::Bench { ckpt } => cmd_bench(&cfg, &cli.out_dir, &ckpt),
        Command::Analyze { ckpt } => cmd_analyze(&cfg, &cli.out_dir, &ckpt),
    }
}

fn task_from(cfg: &Config) -> Result<GroundedTask, CliError> {
    GroundedTask::new(&cfg.model, cfg.task_informative, cfg.task_jitter, cfg.task_seed)
        .map_err(CliError::from)
}

fn grounded_workload(cfg: &Config, l_vis: usize, prompts: usize, seed: u64) -> Workload {
    Workload {
        kind: WorkloadKind::GroundedTask,
        l_vis,
        queries: cfg.task_queries,
        num_prompts: prompts,
        seed,
        task_seed: cfg.task_seed,
        informative: cfg.task_informative,
        jitter: cfg.task_jitter,
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| CliError::Runtime(format!("create {}: {e}", path.display())))?,
    );
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| CliError::Runtime(format!("serialize: {e}")))?;
        writeln!(w).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn load_target(out_dir: &Path, explicit: Option<&Path>) -> Result<TargetModel, CliError> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join("target.sprw"));
    TargetModel::load(&path)
        .map_err(|e| CliError::Runtime(format!("load target {}: {e}", path.display())))
}

fn load_draft(out_dir: &Path, explicit: Option<&Path>) -> Result<DraftModel, CliError> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join("draft.sprw"));
    DraftModel::load(&path)
        .map_err(|e| CliError::Runtime(format!("load draft {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// train-target
// ---------------------------------------------------------------------------

fn cmd_train_target(cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    let task = task_from(cfg)?;
    let train_cfg = TrainConfig {
        learning_rate: cfg.target_lr,
        batch_size: cfg.target_batch,
        epochs: 1,
        alpha: 1.0,
        beta: 1.0,
        seed: cfg.seed,
        stage: TrainStage::Multimodal,
    };
    let queries = cfg.task_queries;
    let steps = cfg.target_total_steps();
    // Call-indexed curriculum phases (one generator call per batch element).
    let phases: Vec<(usize, Vec<usize>)> = {
        let mut acc = 0usize;
        cfg.target_curriculum
            .iter()
            .map(|(n, lens)| {
                acc += n * cfg.target_batch;
                (acc, lens.clone())
            })
            .collect()
    };
    let mut calls = 0usize;
    let mut gen = |rng: &mut Rng| {
        let choices = phases
            .iter()
            .find(|(end, _)| calls < *end)
            .map(|(_, lens)| lens)
            .unwrap_or(&phases.last().expect("curriculum non-empty").1);
        calls += 1;
        let l_vis = choices[rng.next_below(choices.len())];
        let seq = task.training_sequence(l_vis, queries, rng).expect("task dimensions validated");
        let rows = task.weighted_rows(&seq);
        (seq, rows)
    };
    eprintln!(
        "training target: {} steps, batch {}, lr {}",
        steps, cfg.target_batch, cfg.target_lr
    );
    let started = std::time::Instant::now();
    let (model, log) = pretrain_target(cfg.model, &train_cfg, steps, &mut gen)?;
    let elapsed = started.elapsed().as_secs_f64();
    let eval = gen_workload(&cfg.model, &grounded_workload(cfg, 64, 32, cfg.seed ^ 0xe7a1))?;
    let accuracy = grounded_accuracy(&model, &eval, None)?;
    let ckpt_path = out_dir.join("target.sprw");
    model.save(&ckpt_path)?;
    write_jsonl(&out_dir.join("train_target_log.jsonl"), &log)?;
    std::fs::write(out_dir.join("effective_config.txt"), cfg.to_text())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "target trained in {elapsed:.1}s, held-out symbol recall {:.1}%, saved {}",
        accuracy * 100.0,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-draft
// ---------------------------------------------------------------------------

fn cmd_train_draft(
    cfg: &Config,
    out_dir: &Path,
    target_path: Option<&Path>,
) -> Result<(), CliError> {
    let target = load_target(out_dir, target_path)?;
    let task = task_from(cfg)?;
    let queries = cfg.task_queries;
    eprintln!("generating {} teacher examples per stage", cfg.draft_examples);
    let mut rng = Rng::new(cfg.seed ^ 0xd5af7);
    let stage1_seqs: Vec<_> =
        (0..cfg.draft_examples).map(|_| task.text_only_sequence(queries, &mut rng)).collect();
    let stage2_seqs: Vec<_> = (0..cfg.draft_examples)
        .map(|_| task.training_sequence(cfg.draft_l_vis, queries, &mut rng))
        .collect::<sparrow_core::Result<_>>()?;
    let stage1_data = teacher_trace(&stage1_seqs, &target)?;
    let stage2_data = teacher_trace(&stage2_seqs, &target)?;
    let stage1 = TrainConfig {
        learning_rate: cfg.draft_lr,
        batch_size: cfg.draft_batch,
        epochs: cfg.draft_stage1_epochs,
        alpha: cfg.draft_alpha,
        beta: cfg.draft_beta,
        seed: cfg.seed,
        stage: TrainStage::TextOnly,
    };
    let stage2 = TrainConfig { epochs: cfg.draft_stage2_epochs, stage: TrainStage::Multimodal, ..stage1 };
    eprintln!(
        "training draft: {}+{} epochs, mtp depth {}",
        stage1.epochs, stage2.epochs, cfg.draft_mtp_depth
    );
    let started = std::time::Instant::now();
    let (draft, log) = train_draft_two_stage(
        &target,
        &stage1,
        &stage2,
        cfg.draft_mtp_depth,
        &stage1_data,
        &stage2_data,
    )?;
    let elapsed = started.elapsed().as_secs_f64();
    let ckpt_path = out_dir.join("draft.sprw");
    draft.save(&ckpt_path)?;
    write_jsonl(&out_dir.join("train_draft_log.jsonl"), &log)?;
    println!("draft trained in {elapsed:.1}s, saved {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct PromptSpec {
    prompt_id: Option<String>,
    #[serde(default)]
    kind: Option<String>,
    l_vis: usize,
    queries: Option<usize>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
}

fn cmd_decode(
    cfg: &Config,
    out_dir: &Path,
    prompt_file: &Path,
    method: &str,
    ckpt: &CkptArgs,
) -> Result<(), CliError> {
    let method = Method::parse(method).map_err(|e| CliError::Usage(e.to_string()))?;
    let tree = TreeConfig::parse_triple(&cfg.tree).map_err(|e| CliError::Usage(e.to_string()))?;
    let target = load_target(out_dir, ckpt.target.as_deref())?;
    let draft = if method == Method::Vanilla {
        None
    } else {
        Some(load_draft(out_dir, ckpt.draft.as_deref())?)
    };
    let text = std::fs::read_to_string(prompt_file)
        .map_err(|e| CliError::Usage(format!("prompt file {}: {e}", prompt_file.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: PromptSpec = serde_json::from_str(line).map_err(|e| {
            CliError::Usage(format!("prompt file line {}: {e}", lineno + 1))
        })?;
        let kind = match spec.kind.as_deref() {
            None | Some("grounded_task") => WorkloadKind::GroundedTask,
            Some("random_model") => WorkloadKind::RandomModel,
            Some(other) => {
                return Err(CliError::Usage(format!("unknown prompt kind {other:?}")))
            }
        };
        let workload = Workload {
            kind,
            l_vis: spec.l_vis,
            queries: spec.queries.unwrap_or(cfg.task_queries),
            num_prompts: 1,
            seed: spec.seed.unwrap_or(cfg.seed),
            task_seed: cfg.task_seed,
            informative: cfg.task_informative,
            jitter: cfg.task_jitter,
        };
        let data = gen_workload(&target.cfg, &workload)?;
        let prompt = &data.prompts[0];
        let stop = data.task.as_ref().map(|t| t.tokens.eos);
        let max_tokens = spec
            .max_tokens
            .unwrap_or_else(|| data.references[0].len().max(cfg.max_tokens - 1) + 1);
        let seed = spec.seed.unwrap_or(cfg.seed);
        let out = match method {
            Method::Vanilla => {
                vanilla_decode(&target, prompt, cfg.temperature, max_tokens, stop, seed)?
            }
            Method::Sparrow => decode(
                &target,
                draft.as_ref().expect("draft loaded"),
                prompt,
                &DecodeOptions {
                    tree,
                    temperature: cfg.temperature,
                    max_tokens,
                    stop_token: stop,
                    seed,
                    draft_input: DraftInputMode::Sparrow,
                },
            )?,
            Method::FullVisualDraft => decode(
                &target,
                draft.as_ref().expect("draft loaded"),
                prompt,
                &DecodeOptions {
                    tree,
                    temperature: cfg.temperature,
                    max_tokens,
                    stop_token: stop,
                    seed,
                    draft_input: DraftInputMode::FullVisual { keep_rows: None },
                },
            )?,
        };
        let record = DecodeRecord {
            prompt_id: spec.prompt_id.unwrap_or_else(|| format!("p{lineno}")),
            tokens: out.tokens,
            tau: out.stats.tau(),
            target_calls: out.stats.target_calls,
            prefill_time_s: out.stats.prefill_time_s,
            decode_time_s: out.stats.decode_time_s,
            wall_time_s: out.stats.wall_time_s,
        };
        println!(
            "{}",
            serde_json::to_string(&record).map_err(|e| CliError::Runtime(e.to_string()))?
        );
        records.push(record);
    }
    write_jsonl(&out_dir.join("decode.jsonl"), &records)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bench / analyze
// ---------------------------------------------------------------------------

fn bench_config(cfg: &Config) -> Result<BenchConfig, CliError> {
    Ok(BenchConfig {
        tree: TreeConfig::parse_triple(&cfg.tree).map_err(|e| CliError::Usage(e.to_string()))?,
        temperature: cfg.temperature,
        max_tokens: None,
        reps: cfg.bench_reps,
        seed: cfg.seed,
        parallel: cfg.bench_parallel,
    })
}

fn cmd_bench(cfg: &Config, out_dir: &Path, ckpt: &CkptArgs) -> Result<(), CliError> {
    let target = load_target(out_dir, ckpt.target.as_deref())?;
    let draft = load_draft(out_dir, ckpt.draft.as_deref())?;
    let bench = bench_config(cfg)?;
    let methods = [Method::Sparrow, Method::FullVisualDraft, Method::Vanilla];
    let mut all_reports = Vec::new();
    let mut fig1a_rows = Vec::new();
    for &l_vis in &cfg.bench_l_vis_sweep {
        eprintln!("benchmarking l_vis = {l_vis}");
        let workload = grounded_workload(cfg, l_vis, cfg.bench_prompts, cfg.seed ^ 0xb3);
        let reports = bench::run_benchmark(&target, &draft, &workload, &bench, &methods)?;
        for r in &reports {
            println!(
                "l_vis {:>5}  {:<18} tau {:.3}  dsr {:.3}  esr {:.3}  prefill {:.1}%",
                r.l_vis,
                r.method,
                r.tau,
                r.dsr,
                r.esr,
                r.prefill_ratio * 100.0
            );
            fig1a_rows.push(Fig1aRow {
                experiment: "length_sweep".to_string(),
                method: r.method.clone(),
                l_vis: r.l_vis,
                fraction: if r.method == "full_visual_draft" { 1.0 } else { 0.0 },
                tau: r.tau,
                draft_multiplies_per_call: r.draft_multiplies as f64 / r.target_calls as f64,
            });
        }
        all_reports.extend(reports);
    }
    // Pruning sweep at the longest visual length in the sweep.
    if let Some(&l_vis) = cfg.bench_l_vis_sweep.iter().max() {
        eprintln!("pruning sweep at l_vis = {l_vis}");
        let workload = grounded_workload(cfg, l_vis, cfg.bench_prompts, cfg.seed ^ 0xb3);
        let results = analysis::pruning_sweep(
            &target,
            &draft,
            &workload,
            &bench,
            &cfg.prune_fractions,
            analysis::PruneRanking::LastInstruction,
        )?;
        for r in &results {
            println!("prune fraction {:.2}  tau {:.3}", r.fraction, r.tau);
            fig1a_rows.push(Fig1aRow {
                experiment: "pruning_sweep".to_string(),
                method: "full_visual_draft".to_string(),
                l_vis,
                fraction: r.fraction,
                tau: r.tau,
                draft_multiplies_per_call: r.draft_multiplies_per_call,
            });
        }
    }
    let mut table5 = file_writer(&out_dir.join("table5.csv"))?;
    bench::write_table5_csv(&mut table5, &all_reports)?;
    let mut fig1a = file_writer(&out_dir.join("fig1a.csv"))?;
    bench::write_fig1a_csv(&mut fig1a, &fig1a_rows)?;
    write_jsonl(&out_dir.join("bench.jsonl"), &all_reports)?;
    println!("wrote table5.csv, fig1a.csv, bench.jsonl under {}", out_dir.display());
    Ok(())
}

fn cmd_analyze(cfg: &Config, out_dir: &Path, ckpt: &CkptArgs) -> Result<(), CliError> {
    let target = load_target(out_dir, ckpt.target.as_deref())?;
    let l_vis = cfg.bench_l_vis_sweep.first().copied().unwrap_or(64);
    let workload = grounded_workload(cfg, l_vis, cfg.bench_prompts.max(16), cfg.seed ^ 0xa7);
    let data = gen_workload(&target.cfg, &workload)?;
    let native = grounded_accuracy(&target, &data, None)?;
    if native < 0.5 {
        eprintln!(
            "warning: target symbol recall is only {:.1}% (untrained?); running anyway",
            native * 100.0
        );
    }
    let report = analysis::analyze(&target, &workload)?;
    let mut f = file_writer(&out_dir.join("fig3a.csv"))?;
    bench::write_fig3a_csv(&mut f, &report.truncation)?;
    let mut f = file_writer(&out_dir.join("fig3b.csv"))?;
    bench::write_fig3b_csv(&mut f, &report.attention)?;
    let mut f = file_writer(&out_dir.join("retention.csv"))?;
    bench::write_retention_csv(&mut f, &report.retention_visual, &report.retention_text)?;
    for (x, acc) in &report.truncation {
        println!("truncate from layer {x}: accuracy {:.3}", acc);
    }
    println!("wrote fig3a.csv, fig3b.csv, retention.csv under {}", out_dir.display());
    Ok(())
}

fn file_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| {
        CliError::Runtime(format!("create {}: {e}", path.display()))
    })?))
}
