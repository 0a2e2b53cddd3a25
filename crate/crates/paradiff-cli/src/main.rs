//! Single-binary CLI: data generation, training, sampling, RL, evaluation,
//! and experiment reports over the joint text+image diffusion engine.
//!
//! Configuration is layered: built-in defaults, then `--config <toml>`,
//! then `PARADIFF_*` environment variables, then the global flags. On
//! failure the process exits nonzero after printing one machine-parsable
//! line: `error: category=<category> message="..."`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use paradiff_core::checkpoint;
use paradiff_core::config::{load_config, Config};
use paradiff_core::error::{Error, Result};
use paradiff_core::harness::{
    self, emit_report, evaluate_model, training_evaluator, ExperimentSpec,
};
use paradiff_core::layout::{Role, SequenceDump};
use paradiff_core::metrics::{write_csv, JsonlWriter};
use paradiff_core::model::MaskPredictor;
use paradiff_core::real::{Precision, Real};
use paradiff_core::rl::rl_train;
use paradiff_core::sampler::decode;
use paradiff_core::schedule::DecodeMode;
use paradiff_core::seeds;
use paradiff_core::sft;
use paradiff_core::task::{
    eval_axes, generate_dataset, task_layout, task_vocab, ColorGridOracle, DatasetManifest,
};

#[derive(Parser)]
#[command(name = "paradiff", about = "Joint text+image masked diffusion at desk scale")]
struct Cli {
    /// Layered TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master run seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Numeric precision for the run.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task instances and a regeneration manifest.
    GenData,
    /// Supervised training; writes a checkpoint and a JSONL metrics log.
    Train,
    /// Decode held-out instances; writes trajectory JSONL and output dumps.
    Sample {
        /// Checkpoint to sample from (default: <out>/model.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Reinforcement learning from a trained checkpoint.
    Rl {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Six-axis oracle evaluation of a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run the configured experiment and emit report files.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!(
            "error: category={} message={:?}",
            e.category(),
            e.to_string()
        );
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let lookup = |name: &str| std::env::var(name).ok();
    let mut cfg = load_config(cli.config.as_deref(), &lookup)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out.display().to_string();
    }
    if let Some(p) = cli.precision {
        cfg.precision = p.parse().map_err(Error::Config)?;
    }
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cli.command, cfg),
        Precision::F64 => dispatch::<f64>(cli.command, cfg),
    }
}

fn dispatch<R: Real>(command: Command, cfg: Config) -> Result<()> {
    match command {
        Command::GenData => gen_data(&cfg),
        Command::Train => train_cmd::<R>(&cfg),
        Command::Sample { ckpt } => sample_cmd::<R>(&cfg, ckpt.as_deref()),
        Command::Rl { ckpt } => rl_cmd::<R>(&cfg, ckpt.as_deref()),
        Command::Eval { ckpt } => eval_cmd::<R>(&cfg, ckpt.as_deref()),
        Command::Report => report_cmd::<R>(&cfg),
    }
}

fn out_dir(cfg: &Config) -> PathBuf {
    PathBuf::from(&cfg.out)
}

/// Sub-seeds are always derived from the master run seed so one `--seed`
/// flag reproduces a whole run.
fn derived_config(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    c.model.seed = seeds::derive(cfg.seed, 0x0de1, 0);
    c.train.seed = seeds::derive(cfg.seed, 0x7a11, 0);
    c
}

fn default_ckpt(cfg: &Config) -> PathBuf {
    out_dir(cfg).join("model.ckpt")
}

fn load_model<R: Real>(cfg: &Config, ckpt: Option<&Path>) -> Result<MaskPredictor<R>> {
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| default_ckpt(cfg));
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    checkpoint::load::<R>(&path)
}

fn gen_data(cfg: &Config) -> Result<()> {
    let dir = out_dir(cfg);
    let base_seed = seeds::derive(cfg.seed, 0xda7a, cfg.data.base_seed);
    for (split, count, stream) in [
        ("train", cfg.data.train_size, 0u64),
        ("eval", cfg.data.eval_size, 1u64),
    ] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir)?;
        let split_seed = seeds::derive(base_seed, 0x5eed, stream);
        let instances = generate_dataset(&cfg.task, split_seed, count)?;
        for (i, inst) in instances.iter().enumerate() {
            let path = split_dir.join(format!("{i:05}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(inst)?)?;
        }
        let manifest = DatasetManifest {
            config: cfg.task,
            base_seed: split_seed,
            count,
            seeds: instances.iter().map(|i| i.seed).collect(),
        };
        std::fs::write(
            split_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        println!("wrote {count} {split} instances to {}", split_dir.display());
    }
    Ok(())
}

fn train_cmd<R: Real>(cfg: &Config) -> Result<()> {
    let cfg = derived_config(cfg);
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let layout = task_layout(cfg.task.grid_n);
    let vocab = task_vocab();
    let data = generate_dataset(
        &cfg.task,
        seeds::derive(cfg.seed, 0xda7a, cfg.data.base_seed),
        cfg.data.train_size,
    )?;
    let gold = data
        .iter()
        .map(|i| i.gold_sequence(&layout))
        .collect::<Result<Vec<_>>>()?;
    let held = generate_dataset(
        &cfg.task,
        seeds::derive(cfg.seed, 0xe5a1, 1),
        cfg.data.eval_size,
    )?;

    let mut model = MaskPredictor::<R>::init(cfg.model.clone())?;
    let mut log = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
    let evaluator = training_evaluator::<R>(&held, &cfg.decode, seeds::derive(cfg.seed, 0xe5a1, 2));
    let outcome = sft::train(
        &mut model,
        &vocab,
        &gold,
        &cfg.train,
        Some(&evaluator),
        Some(&mut log),
    )?;
    let ckpt = default_ckpt(&cfg);
    checkpoint::save(&ckpt, &model)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last:.4}, checkpoint {}",
        cfg.train.steps,
        ckpt.display()
    );
    Ok(())
}

fn sample_cmd<R: Real>(cfg: &Config, ckpt: Option<&Path>) -> Result<()> {
    let model = load_model::<R>(cfg, ckpt)?;
    let dir = out_dir(cfg).join("samples");
    std::fs::create_dir_all(&dir)?;
    let layout = task_layout(cfg.task.grid_n);
    let vocab = task_vocab();
    let instances = generate_dataset(
        &cfg.task,
        seeds::derive(cfg.seed, 0xe5a1, 1),
        cfg.data.eval_size,
    )?;
    let settings = cfg.decode.settings();
    let mut mean_alignment = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let query = inst.query_sequence(&layout)?;
        let (traj, _) = decode(
            &model,
            &vocab,
            &query,
            &settings,
            seeds::derive(cfg.seed, 0x5a3e, i as u64),
        )?;
        let mut tlog = JsonlWriter::create(&dir.join(format!("{i:05}.trajectory.jsonl")))?;
        for record in traj.records() {
            tlog.write(&record)?;
        }
        tlog.flush()?;
        let (text, _) = traj.final_seq.segment_view(Role::OutputText);
        let (grid, _) = traj.final_seq.segment_view(Role::OutputImage);
        let axes = eval_axes(&text, &grid, inst)?;
        mean_alignment += axes.output_alignment;
        let dump = serde_json::json!({
            "instance": inst,
            "sequence": SequenceDump::new(&vocab, &traj.final_seq),
            "axes": axes,
        });
        std::fs::write(
            dir.join(format!("{i:05}.output.json")),
            serde_json::to_string_pretty(&dump)?,
        )?;
    }
    println!(
        "sampled {} instances, mean output alignment {:.3}, wrote {}",
        instances.len(),
        mean_alignment / instances.len() as f64,
        dir.display()
    );
    Ok(())
}

fn rl_cmd<R: Real>(cfg: &Config, ckpt: Option<&Path>) -> Result<()> {
    let mut model = load_model::<R>(cfg, ckpt)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let layout = task_layout(cfg.task.grid_n);
    let vocab = task_vocab();
    let mut rl_task = cfg.task;
    rl_task.difficulty = cfg.rl.difficulty;
    let queries = generate_dataset(
        &rl_task,
        seeds::derive(cfg.seed, 0x41d5, 2),
        cfg.rl.dataset_size,
    )?
    .iter()
    .map(|i| i.query_sequence(&layout))
    .collect::<Result<Vec<_>>>()?;
    let oracle = ColorGridOracle {
        grid_n: cfg.task.grid_n,
    };
    let rl_cfg = cfg.rl.rl_config(seeds::derive(cfg.seed, 0x01e4, 0));
    let mut log = JsonlWriter::create(&dir.join("rl_metrics.jsonl"))?;
    let outcome = rl_train(&mut model, &vocab, &queries, &oracle, &rl_cfg, Some(&mut log))?;

    let rows: Vec<Vec<String>> = outcome
        .curve
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format!("{:.6}", r.mean_raw_final),
                format!("{:.6}", r.mean_reward),
            ]
        })
        .collect();
    write_csv(
        dir.join("rl_curves.csv"),
        &["step", "mean_raw_final", "mean_reward"],
        &rows,
    )?;
    let ckpt_out = dir.join("model_rl.ckpt");
    checkpoint::save(&ckpt_out, &model)?;
    let last = outcome.curve.last();
    println!(
        "rl finished: {} outer steps, final mean raw score {:.3}, checkpoint {}",
        outcome.curve.len(),
        last.map(|r| r.mean_raw_final).unwrap_or(f64::NAN),
        ckpt_out.display()
    );
    Ok(())
}

fn eval_cmd<R: Real>(cfg: &Config, ckpt: Option<&Path>) -> Result<()> {
    let model = load_model::<R>(cfg, ckpt)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let held = generate_dataset(
        &cfg.task,
        seeds::derive(cfg.seed, 0xe5a1, 1),
        cfg.data.eval_size,
    )?;
    let axes = evaluate_model(
        &model,
        &held,
        &cfg.decode.settings(),
        seeds::derive(cfg.seed, 0xe5a1, 3),
    )?;
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&axes)?)?;
    println!(
        "eval over {} instances: output_alignment {:.3}, text_alignment {:.3} -> {}",
        held.len(),
        axes.output_alignment,
        axes.text_alignment,
        dir.join("eval.json").display()
    );
    Ok(())
}

fn spec_from_config(cfg: &Config) -> ExperimentSpec {
    ExperimentSpec {
        name: cfg.report.experiment.clone(),
        task: cfg.task,
        train_size: cfg.data.train_size,
        eval_size: cfg.data.eval_size,
        eval_difficulty: Some(cfg.report.eval_difficulty),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        rl: cfg.rl.clone(),
        rl_s_values: cfg.report.rl_s_values.clone(),
        eval_decode: cfg.decode.clone(),
        decode_modes: vec![
            DecodeMode::Parallel,
            DecodeMode::Sequential,
            DecodeMode::SemiParallel,
        ],
        seeds: cfg.report.seeds.clone(),
        sequential_train: cfg.report.sequential_train,
    }
}

fn report_cmd<R: Real>(cfg: &Config) -> Result<()> {
    let spec = spec_from_config(cfg);
    let report = match cfg.report.experiment.as_str() {
        "rq1" => harness::run_rq1::<R>(&spec)?,
        "rq2" => harness::run_rq2::<R>(&spec)?,
        "reweighting" => harness::run_reweighting_ablation::<R>(&spec)?,
        other => {
            return Err(Error::Config(format!(
                "unknown experiment `{other}` (expected rq1, rq2, or reweighting)"
            )))
        }
    };
    let dir = out_dir(cfg).join(&report.name);
    emit_report(&report, &dir)?;
    println!("report `{}` written to {}", report.name, dir.display());
    for c in &report.comparisons {
        println!(
            "  {} vs {} on {}: {:.4} vs {:.4} (margin {:+.4})",
            c.better, c.worse, c.axis, c.median_better, c.median_worse, c.margin
        );
    }
    Ok(())
}
