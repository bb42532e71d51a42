//! `scws` — scribble-supervised saliency training pipeline.
//!
//! Subcommands: `synth` (dataset generation), `train`, `eval`, `infer`,
//! `gradcheck`. Every run prints its fully-resolved configuration to stderr
//! before acting; stdout carries exactly one JSON payload. Exit codes:
//! 0 success, 1 usage error, 2 data/IO error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use scws_core::data::{self, DatasetManifest};
use scws_core::trainer::{self, TrainConfig};
use scws_core::{verify, Error};

#[derive(Parser)]
#[command(name = "scws", version, about = "Scribble-supervised saliency detection pipeline")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scribble-annotated dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train on a manifest; writes checkpoints and a JSONL log under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file mirroring the training config; missing fields take
        /// defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key overrides, e.g. --set objective.beta=0.3
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Resume from an existing checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate prediction maps against a manifest's ground-truth masks.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Run a checkpoint on one image and write the saliency map.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), Error> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{spec}'")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("--set {key}: '{}' is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("--set {key}: unknown key '{part}'")));
            }
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("--set {key}: unknown key '{part}'")))?;
    }
    Ok(())
}

fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<TrainConfig, Error> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if !sets.is_empty() {
        let mut value = serde_json::to_value(&cfg)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        for spec in sets {
            apply_override(&mut value, spec)?;
        }
        cfg = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("after --set overrides: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_resolved<T: serde::Serialize>(what: &str, value: &T) {
    eprintln!(
        "resolved {what}: {}",
        serde_json::to_string(value).unwrap_or_else(|_| "<unserializable>".to_string())
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    match cli.cmd {
        Cmd::Synth {
            out,
            count,
            size,
            seed,
        } => {
            print_resolved(
                "synth args",
                &serde_json::json!({"out": out, "count": count, "size": size, "seed": seed}),
            );
            data::synth_generate(&out, count, size, seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "count": count,
                    "size": size,
                    "seed": seed,
                    "manifest": out.join("manifest.tsv"),
                })
            );
            Ok(())
        }
        Cmd::Train {
            data,
            out,
            config,
            sets,
            resume,
        } => {
            let cfg = resolve_config(config.as_deref(), &sets)?;
            print_resolved("train config", &cfg);
            let manifest = DatasetManifest::load(&data)?;
            eprintln!(
                "training on {} samples ({} parameter scalars)",
                manifest.len(),
                scws_core::network::Network::new(cfg.network_config(), cfg.seed)?
                    .param_scalar_count()
            );
            let report = trainer::train_with_resume(&manifest, &cfg, &out, resume.as_deref())?;
            let final_eval = report.final_eval.as_ref().map(|e| {
                serde_json::json!({"f_beta": e.f_beta, "e_xi": e.e_xi, "mae": e.mae})
            });
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": report.checkpoint,
                    "log": report.log,
                    "iterations": report.iterations,
                    "param_scalars": report.param_scalars,
                    "final": final_eval,
                })
            );
            Ok(())
        }
        Cmd::Eval { data, pred } => {
            print_resolved(
                "eval args",
                &serde_json::json!({"data": data, "pred": pred}),
            );
            let manifest = DatasetManifest::load(&data)?;
            let result = scws_core::metrics::evaluate_dataset(&manifest, &pred)?;
            println!("{}", scws_core::metrics::report_json(&result));
            Ok(())
        }
        Cmd::Infer { ckpt, image, out } => {
            print_resolved(
                "infer args",
                &serde_json::json!({"ckpt": ckpt, "image": image, "out": out}),
            );
            let (mut net, _) = scws_core::network::Network::load_checkpoint(&ckpt)?;
            let img = data::load_image(&image)?;
            let sample = data::Sample {
                scribble: scws_core::losses::ScribbleMask::unlabeled(
                    img.shape()[2],
                    img.shape()[1],
                ),
                full_mask: None,
                id: "infer".to_string(),
                image: img,
            };
            let map = trainer::infer_sample(&mut net, &sample)?;
            data::save_map(&out, &map)?;
            println!(
                "{}",
                serde_json::json!({"out": out, "width": map.width, "height": map.height})
            );
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            print_resolved("gradcheck args", &serde_json::json!({"seed": seed}));
            let checks = verify::run_full_suite(seed)?;
            let mut all_pass = true;
            let mut items = Vec::new();
            for c in &checks {
                let pass = c.passed();
                all_pass &= pass;
                eprintln!(
                    "{:<36} {} (max rel err {:.3e}, {} coords, tol {:.0e})",
                    c.name,
                    if pass { "ok" } else { "FAIL" },
                    c.report.max_rel_err,
                    c.report.checked,
                    c.report.tol
                );
                items.push(serde_json::json!({
                    "name": c.name,
                    "max_rel_err": c.report.max_rel_err,
                    "checked": c.report.checked,
                    "tol": c.report.tol,
                    "pass": pass,
                }));
            }
            println!(
                "{}",
                serde_json::json!({"checks": items, "pass": all_pass})
            );
            if all_pass {
                Ok(())
            } else {
                Err(Error::GradCheck("one or more checks failed".to_string()))
            }
        }
    }
}

fn error_exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } | Error::NonFinite { .. } | Error::GradCheck(_) => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}
