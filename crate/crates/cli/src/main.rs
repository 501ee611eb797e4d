//! `fasternam`: complexity analysis, gradient checks, detection evaluation and
//! a demo training loop from the command line.
//!
//! Exit codes: 0 success, 1 validation or degenerate input, 2 unreadable or
//! malformed files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use fasternam::complexity::{analyze_graph, compare_reports, ComplexityReport};
use fasternam::gradcheck::{standard_suite, DEFAULT_TOLERANCE};
use fasternam::graph::{parse_model_config, GraphSpec};
use fasternam::metrics::{evaluate, read_detections, read_ground_truth, RANGE_THRESHOLDS};
use fasternam::train::run_demo_train;
use fasternam::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fasternam",
    version,
    about = "Efficient CNN block analysis and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and FLOP counts for a model config.
    Analyze {
        config: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Parameter and FLOP reduction of NEW relative to BASE.
    Compare {
        base: PathBuf,
        new: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every layer's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Precision, recall and mAP of detections against ground truth.
    Evaluate {
        /// Ground truth: `image_id category x1 y1 x2 y2` per line.
        #[arg(long)]
        gt: PathBuf,
        /// Detections: ground-truth columns plus `confidence`.
        #[arg(long)]
        det: PathBuf,
        /// IoU threshold for a true positive (ignored with --range).
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also report mAP over IoU 0.50:0.95.
        #[arg(long)]
        range: bool,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train a config on synthetic 16x16 images and print the loss log tail.
    TrainDemo {
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_graph(path: &Path) -> Result<GraphSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model_config(&text).map_err(|e| match e {
        Error::Parse { line, reason } => Error::Parse {
            line,
            reason: format!("{reason} (in {})", path.display()),
        },
        other => other,
    })
}

fn analyze(path: &Path) -> Result<ComplexityReport> {
    let graph = load_graph(path)?;
    analyze_graph(&graph, graph.input_shape)
}

fn json_text(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json values always serialize")
}

/// `writeln!` into the output buffer; writing to a `String` cannot fail.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {{
        use std::fmt::Write as _;
        let _ = writeln!($out, $($arg)*);
    }};
}

fn run(cli: Cli, out: &mut String) -> Result<()> {
    match cli.command {
        Command::Analyze { config, json } => {
            let report = analyze(&config)?;
            if json {
                say!(
                    out,
                    "{}",
                    json_text(&serde_json::to_value(&report).expect("report serializes"))
                );
            } else {
                say!(out, "{report}");
            }
        }
        Command::Compare { base, new, json } => {
            let b = analyze(&base)?;
            let n = analyze(&new)?;
            let diff = compare_reports(&b, &n)?;
            if json {
                let mut v = serde_json::to_value(&diff).expect("diff serializes");
                v["base"] = json!(b.name);
                v["new"] = json!(n.name);
                say!(out, "{}", json_text(&v));
            } else {
                say!(out, "{} -> {}", b.name, n.name);
                say!(out, "{diff}");
            }
        }
        Command::Gradcheck { seed, tol, json } => {
            let reports = standard_suite(seed, tol)?;
            if json {
                say!(
                    out,
                    "{}",
                    json_text(&serde_json::to_value(&reports).expect("reports serialize"))
                );
            } else {
                for r in &reports {
                    say!(
                        out,
                        "{:<32} max_rel_error {:.3e}  checked {:>4}  {}",
                        r.unit_name,
                        r.max_rel_error,
                        r.param_count_checked,
                        if r.passed { "PASS" } else { "FAIL" }
                    );
                }
            }
            let failed: Vec<_> = reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.unit_name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Error::Validation(format!(
                    "gradient check failed at tolerance {tol:e} for: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Evaluate {
            gt,
            det,
            iou,
            range,
            json,
        } => {
            let gts = read_ground_truth(&gt)?;
            let dets = read_detections(&det)?;
            let thresholds = if range {
                RANGE_THRESHOLDS.to_vec()
            } else {
                vec![iou]
            };
            let r = evaluate(&dets, &gts, &thresholds)?;
            if json {
                let per_cat: serde_json::Map<_, _> = r
                    .per_category_ap
                    .iter()
                    .map(|(c, aps)| (c.to_string(), json!(aps)))
                    .collect();
                say!(
                    out,
                    "{}",
                    json_text(&json!({
                        "thresholds": r.thresholds,
                        "map50": r.map50,
                        "map5095": if range { json!(r.map5095) } else { json!(null) },
                        "precision": r.dataset_precision,
                        "recall": r.dataset_recall,
                        "precision_defined": r.precision_defined,
                        "true_positives": r.true_positives,
                        "false_positives": r.false_positives,
                        "false_negatives": r.false_negatives,
                        "per_category_ap": per_cat,
                    }))
                );
            } else {
                let label = if range {
                    "mAP@.5".to_string()
                } else {
                    format!("mAP@{iou}")
                };
                say!(out, "categories {}", r.per_category_ap.len());
                for (c, aps) in &r.per_category_ap {
                    say!(out, "  category {c}: AP {:.4}", aps[0]);
                }
                let note = if r.precision_defined {
                    ""
                } else {
                    " (no detections)"
                };
                say!(out, "precision {:.4}{note}", r.dataset_precision);
                say!(out, "recall {:.4}", r.dataset_recall);
                say!(out, "{label} {:.4}", r.map50);
                if range {
                    say!(out, "mAP@.5:.95 {:.4}", r.map5095);
                }
            }
        }
        Command::TrainDemo {
            config,
            steps,
            lr,
            seed,
        } => {
            let graph = load_graph(&config)?;
            let log = run_demo_train(&graph, seed, steps, lr)?;
            say!(out, "step loss");
            for r in log.tail(10) {
                say!(out, "{} {:.6}", r.step, r.loss);
            }
            say!(out, "initial_loss {:.6}", log.initial_loss());
            say!(out, "final_loss {:.6}", log.final_loss());
            say!(out, "ratio {:.4}", log.final_loss() / log.initial_loss());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut out = String::new();
    let result = run(Cli::parse(), &mut out);
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout
        .write_all(out.as_bytes())
        .and_then(|_| stdout.flush())
    {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
            return ExitCode::from(2);
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_file_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
