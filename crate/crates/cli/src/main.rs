//! Command line front end: training runs, detector benchmarks, a verbose
//! walkthrough of the token mixing pipeline, and curriculum traces.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use tokenmixup::error::Error;
use tokenmixup::harness::{
    benchmark_saliency, curriculum_trace, generate_synthetic_dataset, parse_config_file,
    parse_metrics_csv, run_training, Mode, RunConfig,
};
use tokenmixup::htm::{pairwise_gain, plan_token_mixup};
use tokenmixup::saliency::{attention_rollout, token_saliency};
use tokenmixup::scorenet::{difficulty_of, select_easy};
use tokenmixup::transformer::Model;

#[derive(Parser)]
#[command(
    name = "tokenmixup",
    version,
    about = "Attention-guided token-level mixup on a desk-scale transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing per-epoch metrics and a final checkpoint
    Train(Overrides),
    /// Compare the cost of attention rollout against a full gradient pass
    BenchSaliency {
        #[command(flatten)]
        overrides: Overrides,
        /// Timed repetitions per detector (at least 10)
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Walk one batch through gating, assignment, masking and relabeling
    DemoMix(Overrides),
    /// Compare mixing counts in the first and last third of training
    TraceCurriculum {
        #[command(flatten)]
        overrides: Overrides,
        /// Trace an existing metrics CSV instead of training fresh
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::from_str(s).map_err(|e| e.to_string())
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args)]
struct Overrides {
    /// Key=value config file; omitted keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, htm, vtm, htm_vtm, random_sample or random_token
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Master seed for data, initialization, shuffling and mixing
    #[arg(long)]
    seed: Option<u64>,
    /// Difficulty threshold below which an instance counts as easy
    #[arg(long)]
    tau: Option<f64>,
    /// Saliency margin a token replacement must clear
    #[arg(long)]
    rho: Option<f64>,
    /// Tokens pooled per earlier layer for key/value extension
    #[arg(long)]
    kappa: Option<usize>,
    /// Extra layers in the saliency rollout window
    #[arg(long)]
    ell: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for metrics.csv and model.tkmx
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock times in metrics (breaks byte-reproducibility)
    #[arg(long)]
    timings: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => parse_config_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tau {
            cfg.model.tau = t;
        }
        if let Some(r) = self.rho {
            cfg.model.rho = r;
        }
        if let Some(k) = self.kappa {
            cfg.model.kappa = k;
        }
        if let Some(e) = self.ell {
            cfg.model.ell = e;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.timings {
            cfg.timings = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_train(o: &Overrides) -> Result<(), Error> {
    let cfg = o.resolve()?;
    let out = run_training(&cfg)?;
    for row in &out.rows {
        println!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.4} mixed {:>4}",
            row.epoch,
            row.split.as_str(),
            row.loss,
            row.accuracy,
            row.num_mixed
        );
    }
    println!("wrote {}", out.metrics_path.display());
    println!("wrote {}", out.checkpoint_path.display());
    println!("final val accuracy {:.4}", out.final_val_accuracy);
    Ok(())
}

fn cmd_bench(o: &Overrides, repeats: usize) -> Result<(), Error> {
    let cfg = o.resolve()?;
    let report = benchmark_saliency(&cfg, repeats)?;
    println!("attention saliency median {:.4} ms", report.attention_ms);
    println!("gradient saliency median  {:.4} ms", report.gradient_ms);
    println!("gradient / attention ratio {:.2}", report.ratio);
    Ok(())
}

/// Runs the selection, assignment and relabeling stages on one batch of a
/// freshly initialized model and prints every intermediate. An untrained
/// scorer rates most instances near ln(num_classes), so pass a generous
/// --tau to see mixing happen.
fn cmd_demo(o: &Overrides) -> Result<(), Error> {
    let cfg = o.resolve()?;
    let layer = cfg
        .model
        .htm_layer
        .ok_or_else(|| Error::config("the demo needs htm_layer set"))?;
    let (train, _) = generate_synthetic_dataset::<f32>(&cfg.dataset, cfg.seed)?;
    // stride across the class-ordered set so the batch holds several labels
    let b = cfg.batch_size.min(train.len());
    let idx: Vec<usize> = (0..b).map(|i| i * train.len() / b).collect();
    let (images, labels) = train.batch(&idx)?;
    let model = Model::<f32>::new(&cfg.model, true, cfg.seed)?;
    let tau = cfg.model.tau as f32;
    let rho = cfg.model.rho as f32;

    let (_, trace) = model.infer(&images)?;
    let tokens = &trace.layer_inputs[layer - 1];
    let u = difficulty_of(&model, tokens, &labels)?;
    println!(
        "difficulty (per-instance scorer loss), threshold {}:",
        cfg.model.tau
    );
    for i in 0..u.len() {
        let tag = if u.get(i) < tau { "easy" } else { "hard" };
        println!("  [{i:>2}] u = {:.4}  {tag}", u.get(i));
    }
    let selection = select_easy(&u, tau);
    if selection.is_empty() {
        println!("no instance fell below the threshold; raise --tau to see mixing");
        return Ok(());
    }
    println!("selected for mixing: {:?}", selection.indices);

    let phis = model.eval_attention_records(tokens, layer, cfg.model.ell)?;
    let rollout = attention_rollout(&phis)?;
    let s = token_saliency(&rollout)?;
    let gain = pairwise_gain(&s, &selection, rho)?;
    println!(
        "gain matrix, {} easy rows x {} source columns:",
        gain.rows(),
        gain.cols()
    );
    for r in 0..gain.rows() {
        let row: Vec<String> = (0..gain.cols())
            .map(|c| format!("{:.4}", gain.get(r, c)))
            .collect();
        println!("  easy {:>2}: [{}]", gain.easy_indices()[r], row.join(", "));
    }

    let plan = plan_token_mixup(&labels, &s, &u, tau, rho)?;
    println!(
        "assignment (easy <- source), total gain {:.4}:",
        plan.assignment.realized_gain
    );
    for &(i, j) in &plan.assignment.pairs {
        println!("  {i:>2} <- {j:>2}");
    }
    println!("keep masks (1 keeps own token) and relabeled targets:");
    let n = s.tokens();
    let classes = labels.dims()[1];
    for &(i, count) in &plan.report.tokens_replaced {
        let mask: String = (0..n)
            .map(|t| {
                if plan.keep_mask.get(&[i, t]) > 0.5 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect();
        let y: Vec<String> = (0..classes)
            .map(|c| format!("{:.3}", plan.labels.get(&[i, c])))
            .collect();
        println!(
            "  [{i:>2}] source {:>2}, {count} tokens replaced, keep {mask}, y = [{}]",
            plan.source_index[i],
            y.join(", ")
        );
    }
    if plan.report.num_mixed == 0 {
        println!("  every candidate replacement fell below the margin; nothing mixed");
    }
    Ok(())
}

fn cmd_trace(o: &Overrides, metrics: Option<&Path>) -> Result<(), Error> {
    let rows = match metrics {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_metrics_csv(&text)?
        }
        None => {
            let cfg = o.resolve()?;
            println!("training {} epochs in mode {}", cfg.epochs, cfg.mode);
            run_training(&cfg)?.rows
        }
    };
    let summary = curriculum_trace(&rows)?;
    println!("early third mean mixed {:.2}", summary.early_mean);
    println!("late third mean mixed  {:.2}", summary.late_mean);
    println!(
        "curriculum rising: {}",
        if summary.rising { "yes" } else { "no" }
    );
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Train(o) => cmd_train(o),
        Command::BenchSaliency { overrides, repeats } => cmd_bench(overrides, *repeats),
        Command::DemoMix(o) => cmd_demo(o),
        Command::TraceCurriculum { overrides, metrics } => {
            cmd_trace(overrides, metrics.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
