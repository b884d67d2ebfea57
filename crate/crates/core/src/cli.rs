//! Command-line front end: argument parsing, command dispatch and exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::diff::EigKernelOrientation;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{load_config, RunConfig};
use crate::io::pgm::{load_pgm, save_pgm};
use crate::io::write_atomic;
use crate::metrics::MetricReport;
use crate::network::{fuse_forward, ImagePair};
use crate::selfcheck;
use crate::synth::synthetic_set;
use crate::train::{load_pairs, train, StepRecord, Trainer};

pub const EXIT_OK: u8 = 0;
/// Bad flags or config file (clap uses 2 for usage errors too).
pub const EXIT_CONFIG: u8 = 2;
/// Missing or malformed data, images, checkpoints; size mismatches; I/O.
pub const EXIT_DATA: u8 = 3;
/// Non-finite values or failed decompositions.
pub const EXIT_NUMERIC: u8 = 4;
/// `gradcheck` found a gradient outside tolerance.
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "grformer", version, about = "Grassmann-attention infrared/visible image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from `<name>_ir.pgm` / `<name>_vi.pgm` pairs and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `checkpoint` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse an infrared/visible pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print fusion metrics as `key=value` lines.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probes for the full-network check (at least 100 are always taken).
        #[arg(long, default_value_t = selfcheck::MIN_NETWORK_PROBES)]
        probes: usize,
        /// Swap in a wrong eigen-backward kernel; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write seeded synthetic bright-disc/grating pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numeric(_) | Error::Decomposition(_) | Error::Rank(_) => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Argument(_) | Error::Format { .. } | Error::Data(_) | Error::Io(_) => {
            EXIT_DATA
        }
    }
}

/// Runs one command, writing its report to `out`. Returns the exit code for
/// outcomes that are not errors (a failed gradient check).
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Train { config, data, out: ckpt } => cmd_train(&config, data, ckpt, out),
        Command::Fuse { ckpt, ir, vi, out: fused } => {
            cmd_fuse(&ckpt, &ir, &vi, &fused)?;
            writeln!(out, "wrote {}", fused.display())?;
            Ok(EXIT_OK)
        }
        Command::Eval { fused, ir, vi } => {
            out.write_all(cmd_eval(&fused, &ir, &vi)?.to_lines().as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seed, probes, corrupt_backward } => {
            let orientation = if corrupt_backward {
                EigKernelOrientation::Untransposed
            } else {
                EigKernelOrientation::default()
            };
            let report = selfcheck::run(seed, probes, orientation)?;
            write!(out, "{}", report.render())?;
            writeln!(out, "probed {} parameters", report.probes())?;
            Ok(if report.passes() { EXIT_OK } else { EXIT_GRADCHECK })
        }
        Command::Synth { out: dir, count, size, seed } => {
            let n = cmd_synth(&dir, count, size, seed)?;
            writeln!(out, "wrote {n} pairs to {}", dir.display())?;
            Ok(EXIT_OK)
        }
    }
}

/// `<ckpt>.log.csv`
pub fn log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".log.csv");
    PathBuf::from(name)
}

fn cmd_train(config: &Path, data: Option<PathBuf>, ckpt: Option<PathBuf>, out: &mut dyn Write) -> Result<u8> {
    let mut cfg = load_config(config)?;
    if data.is_some() {
        cfg.data = data;
    }
    if ckpt.is_some() {
        cfg.checkpoint = ckpt;
    }
    let missing = |key: &str| Error::Config { line: 0, msg: format!("no {key} given in the config or on the command line") };
    let dir = cfg.data.clone().ok_or_else(|| missing("data"))?;
    let ckpt = cfg.checkpoint.clone().ok_or_else(|| missing("checkpoint"))?;
    for line in cfg.to_text().lines() {
        info!("config: {line}");
    }

    let pairs = load_pairs(&dir)?;
    info!("{} training pairs from {}", pairs.len(), dir.display());
    let (trainer, csv) = train_logged(&cfg, &pairs);
    write_atomic(&log_path(&ckpt), csv.as_bytes())?;
    let trainer = trainer?;
    trainer.checkpoint(cfg.extractor_seed).save(&ckpt)?;
    match trainer.state.history.back() {
        Some(last) => writeln!(out, "trained {} steps, final loss {last:e}", trainer.state.step)?,
        None => writeln!(out, "trained 0 steps")?,
    }
    writeln!(out, "wrote {}", ckpt.display())?;
    Ok(EXIT_OK)
}

/// Trains and collects the CSV log; the log is returned even when training
/// aborts, so the failing run still leaves its telemetry behind.
fn train_logged(cfg: &RunConfig, pairs: &[ImagePair]) -> (Result<Trainer>, String) {
    let mut csv = format!("{}\n", StepRecord::CSV_HEADER);
    let result = train(cfg, pairs, |rec| {
        csv += &rec.csv_row();
        csv.push('\n');
        if rec.step % 10 == 0 || rec.step == cfg.steps {
            info!("step {} loss {:e}", rec.step, rec.loss.total);
        }
        Ok(())
    });
    (result, csv)
}

pub fn cmd_fuse(ckpt: &Path, ir: &Path, vi: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let pair = ImagePair::new(load_pgm(ir)?, load_pgm(vi)?)?;
    let (h, w) = pair.dims();
    let b = ck.net.block_side;
    if h % b != 0 || w % b != 0 {
        return Err(Error::dim(format!("{h}×{w} images are not divisible by the block side {b}")));
    }
    save_pgm(&fuse_forward(&pair, &ck.params, &ck.net)?, out)
}

pub fn cmd_eval(fused: &Path, ir: &Path, vi: &Path) -> Result<MetricReport> {
    MetricReport::compute(&load_pgm(fused)?, &load_pgm(ir)?, &load_pgm(vi)?)
}

/// Writes `pair_NN_ir.pgm` / `pair_NN_vi.pgm`; returns the number of pairs.
pub fn cmd_synth(dir: &Path, count: usize, size: usize, seed: u64) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let set = synthetic_set(count, size, seed)?;
    for (k, s) in set.iter().enumerate() {
        save_pgm(&s.pair.ir, &dir.join(format!("pair_{k:02}_ir.pgm")))?;
        save_pgm(&s.pair.vi, &dir.join(format!("pair_{k:02}_vi.pgm")))?;
    }
    Ok(set.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let cfg = exit_code(&Error::Config { line: 1, msg: String::new() });
        let data = exit_code(&Error::Data(String::new()));
        let num = exit_code(&Error::Numeric(String::new()));
        assert_eq!([cfg, data, num], [EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC]);
        assert_eq!(exit_code(&Error::Format { offset: 0, msg: String::new() }), EXIT_DATA);
        assert_eq!(exit_code(&Error::Rank(String::new())), EXIT_NUMERIC);
        assert!(![EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC].contains(&EXIT_GRADCHECK));
    }

    #[test]
    fn parses_commands() {
        let cli = Cli::try_parse_from(["grformer", "gradcheck", "--seed", "3"]).unwrap();
        assert!(matches!(cli.command, Command::Gradcheck { seed: 3, probes: 100, corrupt_backward: false }));
        let cli = Cli::try_parse_from(["grformer", "train", "--config", "c.txt", "--out", "m.grf"]).unwrap();
        assert!(matches!(cli.command, Command::Train { data: None, out: Some(_), .. }));
        assert!(Cli::try_parse_from(["grformer", "fuse", "--ckpt", "m"]).is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(log_path(Path::new("runs/m.grf")), PathBuf::from("runs/m.grf.log.csv"));
    }
}
