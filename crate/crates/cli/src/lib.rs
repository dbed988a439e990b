//! `mcanet` command-line tool.
//!
//! Exit codes: 0 on success, 1 for user errors (bad arguments, configs,
//! data or checkpoints, diverged training), 2 for internal invariant
//! failures.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use log::{info, warn};
use mcanet::accounting::model_stats;
use mcanet::checkpoint::Checkpoint;
use mcanet::config::RunConfig;
use mcanet::data::{load_dataset, read_image, read_pgm, save_dataset, split_validation, synth_generate, Task};
use mcanet::loss::predict_labels;
use mcanet::model::McaNet;
use mcanet::selfcheck::{self, Suite};
use mcanet::tensor::no_grad;
use mcanet::train::{evaluate, train};
use mcanet::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "mcanet", version, about = "Train, evaluate and inspect MCANet segmentation models")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint.
    Train {
        /// Preset name or JSON config file.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; synthesized from the config's `data` section if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-iteration JSONL log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset and write a JSON metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Segment one image (.mcaf or 8-bit .pgm) and write the label mask as PGM.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "mask-out")]
        mask_out: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Suite,
    },
    /// Print parameter and FLOP counts for one forward pass.
    Stats {
        #[arg(long)]
        config: String,
        #[arg(long = "input-size", default_value = "512x512", value_parser = parse_size)]
        input_size: (usize, usize),
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// `binary_lesion` or `multi_organ:K`.
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad extent {v:?} in {s:?}"));
    Ok((dim(h)?, dim(w)?))
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::User(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the command,
/// printing results to stdout and errors to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    run_with_output(argv, &mut stdout.lock())
}

/// [`run_cli`] with the normal output sent to `out`.
pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Train { config, out: ckpt, data, log } => cmd_train(&config, &ckpt, data.as_deref(), log.as_deref(), out),
        Command::Eval { ckpt, data, report } => cmd_eval(&ckpt, &data, &report, out),
        Command::Predict { ckpt, image, mask_out } => cmd_predict(&ckpt, &image, &mask_out, out),
        Command::Gradcheck { module } => cmd_gradcheck(module, out),
        Command::Stats { config, input_size } => cmd_stats(&config, input_size, out),
        Command::Synth { seed, count, out: dir, task, size, channels } => {
            cmd_synth(seed, count, &dir, task, size, channels, out)
        }
    }
}

fn cmd_train(config: &str, ckpt: &Path, data: Option<&Path>, log_path: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let samples = match data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let d = &cfg.data;
            info!("synthesizing {} {} samples at {}x{}", d.count, d.task, d.size, d.size);
            synth_generate(d.seed, d.count, d.size, d.size, cfg.model.encoder.in_channels, d.task)?
        }
    };
    let (train_set, val_set) = split_validation(&samples);
    let mut log: Box<dyn Write> = match log_path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::sink()),
    };
    let outcome = match train(&cfg.model, &cfg.train, train_set, val_set, &mut log) {
        Ok(o) => o,
        Err(Error::Diverged { iteration, reason, last_good }) => {
            let rescue = ckpt.with_extension("last_good.mcaw");
            last_good.save(&rescue)?;
            return Err(Failure::User(format!(
                "training diverged at iteration {iteration}: {reason}; last good weights saved to {}",
                rescue.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    log.flush()?;
    outcome.checkpoint.save(ckpt)?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    writeln!(out, "trained {} iterations on {} samples", outcome.losses.len(), train_set.len())?;
    writeln!(out, "loss: {first:.6} -> {last:.6} (mean of last {})", tail.len())?;
    if !val_set.is_empty() {
        let ev = evaluate(&outcome.model, val_set)?;
        writeln!(out, "validation mIoU: {:.4}, mDice: {:.4}", ev.scores.miou, ev.scores.mdice)?;
    }
    writeln!(out, "checkpoint: {}", ckpt.display())?;
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<McaNet, Failure> {
    Ok(Checkpoint::load(ckpt)?.build_model()?)
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path, out: &mut dyn Write) -> CmdResult {
    let model = load_model(ckpt)?;
    let samples = load_dataset(data)?;
    let ev = evaluate(&model, &samples)?;
    if ev.hd_one_empty > 0 {
        warn!("{} class instances had an empty prediction or ground truth; HD used the image diagonal", ev.hd_one_empty);
    }
    fs::write(report, serde_json::to_string_pretty(&ev.report).map_err(|e| Failure::Internal(e.to_string()))?)?;
    let r = &ev.report;
    writeln!(out, "samples: {}", samples.len())?;
    writeln!(out, "mIoU: {:.4}  mDice: {:.4}  DSC: {:.4}", r.miou, r.mdice, r.dsc_mean)?;
    writeln!(out, "HD: {:.3}  HD95: {:.3}", r.hd, r.hd95)?;
    writeln!(out, "report: {}", report.display())?;
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, mask_out: &Path, out: &mut dyn Write) -> CmdResult {
    let model = load_model(ckpt)?;
    let is_pgm = image.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let (c, h, w, values) = if is_pgm {
        let (w, h, px) = read_pgm(image)?;
        (1, h, w, px.iter().map(|&p| p as f32 / 255.0).collect())
    } else {
        read_image(image)?
    };
    let want = model.spec.encoder.in_channels;
    if c != want {
        return Err(Failure::User(format!("image has {c} channels, model expects {want}")));
    }
    let x = Tensor::from_vec(&[1, c, h, w], values.iter().map(|&v| v as f64).collect())?;
    let logits = no_grad(|| model.forward(&x))?;
    let labels = predict_labels(&logits)?;
    mcanet::data::write_pgm(mask_out, w, h, &labels)?;
    writeln!(out, "wrote {w}x{h} mask to {}", mask_out.display())?;
    Ok(())
}

fn cmd_gradcheck(suite: Suite, out: &mut dyn Write) -> CmdResult {
    let results = selfcheck::run(suite)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        writeln!(out, "{:<40} {:.3e} {}", r.name, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" })?;
        worst = worst.max(r.max_rel_error);
    }
    writeln!(out, "max rel err: {worst:.3e} (tolerance {:e})", selfcheck::TOLERANCE)?;
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Internal(format!("gradient check failed: max rel err {worst:.3e}")))
    }
}

fn cmd_stats(config: &str, (h, w): (usize, usize), out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let model = McaNet::new(&cfg.model, 0)?;
    let stats = model_stats(&model, h, w)?;
    let f = &stats.flops;
    writeln!(out, "input: {h}x{w}")?;
    writeln!(out, "params: {} ({:.3} M)", stats.params, stats.params as f64 / 1e6)?;
    writeln!(out, "flops: {} ({:.3} G)", f.total, f.total as f64 / 1e9)?;
    writeln!(out, "macs: {} ({:.3} G)", f.total / 2, f.total as f64 / 2e9)?;
    writeln!(out, "attention flops: {}", f.attention)?;
    for (kind, n) in &f.by_kind {
        writeln!(out, "  {:<12} {n}", serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())?;
    }
    Ok(())
}

fn cmd_synth(seed: u64, count: usize, dir: &Path, task: Task, size: usize, channels: usize, out: &mut dyn Write) -> CmdResult {
    let samples = synth_generate(seed, count, size, size, channels, task)?;
    save_dataset(dir, &samples)?;
    writeln!(out, "wrote {count} {task} samples ({size}x{size}, {channels} channel) to {}", dir.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("512x256").unwrap(), (512, 256));
        assert_eq!(parse_size("64X64").unwrap(), (64, 64));
        assert!(parse_size("512").is_err());
        assert!(parse_size("ax2").is_err());
    }

    #[test]
    fn exit_codes_for_bad_arguments() {
        let mut sink = Vec::new();
        assert_eq!(run_with_output(["mcanet", "frobnicate"], &mut sink), 1);
        assert_eq!(run_with_output(["mcanet", "--help"], &mut sink), 0);
        assert_eq!(run_with_output(["mcanet", "gradcheck", "--module", "bogus"], &mut sink), 1);
    }
}
