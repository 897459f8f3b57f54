//! `canids`: generate labeled CAN captures, split them, train encoder or
//! decoder classifiers (optionally with LoRA), evaluate, and classify
//! single log lines.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use canids_core::can::{self, AttackClass};
use canids_core::dataset::{self, SplitConfig};
use canids_core::lora;
use canids_core::model::TransformerModel;
use canids_core::sim::{self, AttackSpec, BackgroundProfile, BackgroundSource, PayloadMode};
use canids_core::textify::Vocab;
use canids_core::train::{self, TrainOutcome};
use canids_core::{derive_seed, fnv1a64};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "canids", version, about = "CAN bus intrusion detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled capture: per-class CSVs plus a manifest.
    Generate {
        /// Profile file, or "default" for 10 background ids at 5 ms over 60 s.
        #[arg(long, default_value = "default")]
        profile: String,
        /// Attacks to inject: comma-separated `kind[:start-end]` with times
        /// in seconds, e.g. "dos:0-15,fuzzy:15-30,gear:30-45,rpm:45-60".
        /// "none" injects nothing.
        #[arg(long, default_value = "dos:0-15,fuzzy:15-30,gear:30-45,rpm:45-60")]
        attacks: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split per-class captures into train/validation/test CSVs.
    Split {
        /// Directory holding normal.csv / dos.csv / fuzzy.csv / gear.csv /
        /// rpm.csv (any subset).
        #[arg(long = "in")]
        input: PathBuf,
        /// Subsample fraction per attack class; normal uses p/10.
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a split directory.
    Train {
        /// Run configuration file (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured architecture: encoder | decoder.
        #[arg(long)]
        arch: Option<String>,
        /// Fine-tune with low-rank adapters on a frozen base checkpoint
        /// (requires init_checkpoint in the config).
        #[arg(long)]
        lora: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled CSV and write a metrics report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Classify one log line.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// A log line: `timestamp,canid_hex,dlc,bytes...[,flag]`.
        #[arg(long)]
        line: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // One exit code for every failure class, usage text included.
            eprint!("{err}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("canids: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            profile,
            attacks,
            seed,
            out,
        } => generate(&profile, &attacks, seed, &out),
        Command::Split {
            input,
            p,
            seed,
            out,
        } => split(&input, p, seed, &out),
        Command::Train {
            config,
            arch,
            lora,
            out,
        } => train_cmd(config.as_deref(), arch.as_deref(), lora, &out),
        Command::Eval {
            model,
            data,
            report,
        } => eval_cmd(&model, &data, &report),
        Command::Predict { model, line } => predict(&model, &line),
    }
}

/// Ten periodic ids at 5 ms with mixed payload modes; 60 s capture.
fn default_profile(seed: u64) -> BackgroundProfile {
    let ids = [
        0x100, 0x110, 0x120, 0x130, 0x200, 0x210, 0x220, 0x260, 0x2a0, 0x350,
    ];
    let sources = ids
        .iter()
        .enumerate()
        .map(|(i, &can_id)| BackgroundSource {
            can_id,
            period_us: 5_000,
            mode: match i % 3 {
                0 => PayloadMode::Counter,
                1 => PayloadMode::Constant,
                _ => PayloadMode::RandomWalk,
            },
        })
        .collect();
    BackgroundProfile {
        sources,
        duration_us: 60_000_000,
        seed,
    }
}

fn parse_ms(value: &str, what: &str) -> Result<u64> {
    let number = value
        .strip_suffix("ms")
        .ok_or_else(|| anyhow!("{what} {value:?} must end in ms"))?;
    let ms: f64 = number
        .parse()
        .map_err(|_| anyhow!("invalid {what} {value:?}"))?;
    if !ms.is_finite() || ms <= 0.0 {
        bail!("{what} must be positive, got {value:?}");
    }
    Ok((ms * 1000.0).round() as u64)
}

/// Profile file: `duration_secs = 60` plus one `background = ...` line with
/// comma-separated `0xID@5ms:mode` entries (modes: constant, counter, walk).
fn load_profile(path: &Path, seed: u64) -> Result<BackgroundProfile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read profile {}", path.display()))?;
    let mut duration_us = 60_000_000u64;
    let mut sources = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), no + 1))?;
        match key.trim() {
            "duration_secs" => {
                let secs: f64 = value.trim().parse().context("bad duration_secs")?;
                duration_us = (secs * 1e6).round() as u64;
            }
            "background" => {
                for entry in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (id_part, rest) = entry
                        .split_once('@')
                        .ok_or_else(|| anyhow!("background entry {entry:?} missing @period"))?;
                    let (period_part, mode_part) = rest
                        .split_once(':')
                        .ok_or_else(|| anyhow!("background entry {entry:?} missing :mode"))?;
                    let can_id =
                        u16::from_str_radix(id_part.trim_start_matches("0x"), 16)
                            .map_err(|_| anyhow!("bad id in {entry:?}"))?;
                    let mode = match mode_part {
                        "constant" => PayloadMode::Constant,
                        "counter" => PayloadMode::Counter,
                        "walk" | "random-walk" => PayloadMode::RandomWalk,
                        other => bail!("unknown payload mode {other:?}"),
                    };
                    sources.push(BackgroundSource {
                        can_id,
                        period_us: parse_ms(period_part, "period")?,
                        mode,
                    });
                }
            }
            other => bail!("{}:{}: unknown profile key {other:?}", path.display(), no + 1),
        }
    }
    Ok(BackgroundProfile {
        sources,
        duration_us,
        seed,
    })
}

fn parse_attacks(arg: &str, duration_us: u64) -> Result<Vec<AttackSpec>> {
    let mut specs = Vec::new();
    if arg.trim() == "none" || arg.trim().is_empty() {
        return Ok(specs);
    }
    for entry in arg.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (kind_str, window) = match entry.split_once(':') {
            Some((k, w)) => (k, Some(w)),
            None => (entry, None),
        };
        let (start_us, end_us) = match window {
            None => (0, duration_us),
            Some(w) => {
                let (a, b) = w
                    .split_once('-')
                    .ok_or_else(|| anyhow!("window {w:?} must be start-end seconds"))?;
                let start: f64 = a.parse().map_err(|_| anyhow!("bad window start {a:?}"))?;
                let end: f64 = b.parse().map_err(|_| anyhow!("bad window end {b:?}"))?;
                ((start * 1e6).round() as u64, (end * 1e6).round() as u64)
            }
        };
        let spec = match kind_str {
            "dos" => AttackSpec::dos(start_us, end_us),
            "fuzzy" => AttackSpec::fuzzy(start_us, end_us),
            "gear" => AttackSpec::gear_spoof(start_us, end_us),
            "rpm" => AttackSpec::rpm_spoof(start_us, end_us),
            other => bail!("unknown attack kind {other:?}"),
        };
        specs.push(spec);
    }
    Ok(specs)
}

fn generate(profile_arg: &str, attacks_arg: &str, seed: u64, out: &Path) -> Result<()> {
    let profile = if profile_arg == "default" {
        default_profile(derive_seed(seed, 1))
    } else {
        load_profile(Path::new(profile_arg), derive_seed(seed, 1))?
    };
    let specs = parse_attacks(attacks_arg, profile.duration_us)?;
    let (records, manifest) = sim::simulate_capture(&profile, &specs, derive_seed(seed, 2))?;
    std::fs::create_dir_all(out)?;
    for class in AttackClass::ALL {
        let subset: Vec<_> = records.iter().filter(|r| r.label == class).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        can::write_log_file(out.join(format!("{}.csv", class.stem())), &subset)?;
    }
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "generated {} records ({} normal) into {}",
        manifest.total(),
        manifest.normal.normal,
        out.display()
    );
    Ok(())
}

fn split(input: &Path, p: f64, seed: u64, out: &Path) -> Result<()> {
    let records = dataset::read_capture_dir(input)?;
    let config = SplitConfig {
        train_fraction: 0.7,
        subsample: p,
        inner_train_fraction: 0.7,
        seed,
    };
    let (bundle, manifest) = dataset::prepare_bundle(&records, config)?;
    std::fs::create_dir_all(out)?;
    dataset::write_labeled_csv_file(out.join("train.csv"), &bundle.train)?;
    dataset::write_labeled_csv_file(out.join("val.csv"), &bundle.validation)?;
    dataset::write_labeled_csv_file(out.join("test.csv"), &bundle.test)?;
    std::fs::write(
        out.join("split_manifest.json"),
        serde_json::to_string(&manifest)?,
    )?;
    println!(
        "split {} records: train {} / val {} / test {}",
        records.len(),
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test.len()
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, arch: Option<&str>, use_lora: bool, out: &Path) -> Result<()> {
    let mut run = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(arch) = arch {
        run.set("arch", arch)?;
    }
    let data_dir = run
        .data_dir
        .clone()
        .ok_or_else(|| anyhow!("config key data_dir is required for train"))?;
    let bundle = canids_core::dataset::DatasetBundle {
        train: dataset::read_labeled_csv_file(data_dir.join("train.csv"))?,
        validation: dataset::read_labeled_csv_file(data_dir.join("val.csv"))?,
        test: Vec::new(),
    };
    let vocab = Vocab::built_in();
    let train_config = run.train_config();

    let (mut model, base_hash) = match (&run.init_checkpoint, use_lora) {
        (Some(path), _) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("cannot read init checkpoint {}", path.display()))?;
            let model = TransformerModel::from_bytes(&bytes)?;
            (model, Some(fnv1a64(&bytes)))
        }
        (None, true) => bail!("--lora requires init_checkpoint in the config"),
        (None, false) => (
            TransformerModel::new(run.model_config(), vocab, derive_seed(run.seed, 10))?,
            None,
        ),
    };

    if use_lora {
        model.reinit_head(derive_seed(run.seed, 11));
        let attached = lora::attach_adapters(&mut model, &run.lora, derive_seed(run.seed, 12))?;
        let counts = lora::count_trainable(&model);
        println!(
            "lora: adapted {} layers (r={}, alpha={}); trainable {} / {} ({:.2}%)",
            attached.len(),
            run.lora.rank,
            run.lora.alpha,
            counts.trainable,
            counts.total,
            counts.fraction * 100.0
        );
    } else {
        println!(
            "training {} model: {} parameters",
            model.config.arch.name(),
            model.param_count()
        );
    }

    let TrainOutcome {
        history,
        mut best,
        best_epoch,
    } = train::train_run(&mut model, &bundle, &train_config)?;
    for row in &history.rows {
        println!(
            "epoch {}: train_loss {:.6} val_loss {:.6} ba {:.6} prec {:.6} dr {:.6} f1 {:.6}",
            row.epoch, row.train_loss, row.val_loss, row.ba, row.prec, row.dr, row.f1
        );
    }
    println!("best epoch: {best_epoch}");

    std::fs::create_dir_all(out)?;
    if use_lora {
        lora::save_adapters(&best, base_hash.unwrap_or(0), out.join("adapters.ckpt"))?;
        lora::merge_adapters(&mut best);
    }
    best.save_checkpoint(out.join("model.ckpt"))?;
    std::fs::write(out.join("history.csv"), history.to_csv())?;
    std::fs::write(out.join("vocab.tsv"), best.vocab.to_tsv())?;
    if run.plot {
        std::fs::write(out.join("curves.svg"), history.to_svg())?;
    }
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn eval_cmd(model_path: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let model = TransformerModel::load_checkpoint(model_path)?;
    let records = dataset::read_labeled_csv_file(data)?;
    let eval = train::evaluate(&model, &records, 32)?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(report_path, serde_json::to_string_pretty(&eval.report)?)?;
    print!("{}", eval.report.render_table());
    println!("loss {:.6}  report {}", eval.loss, report_path.display());
    Ok(())
}

fn predict(model_path: &Path, line: &str) -> Result<()> {
    let model = TransformerModel::load_checkpoint(model_path)?;
    let frame = can::parse_frame_line(line).map_err(|e| anyhow!("cannot parse line: {e}"))?;
    let (label, probs) = model.predict_label(&frame)?;
    println!("{label}");
    let rendered: Vec<String> = AttackClass::ALL
        .iter()
        .zip(probs.values())
        .map(|(class, p)| format!("{class}={p:.6}"))
        .collect();
    println!("{}", rendered.join(" "));
    Ok(())
}
