//! `bineye` command line: every pipeline stage as a subcommand.
//!
//! Machine output goes to stdout (JSON by default), diagnostics to stderr. Exit codes: 0 on
//! success, 1 on a domain error, 2 on a usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::corpus::{flag_substitution_recipe, CorpusError, CorpusManifest, OptLevel, Split, DEFAULT_TEST_FRACTION};
use crate::elf::{load_code_image, split_blocks, ElfError, DEFAULT_MIN_FILL};
use crate::eval::{classify_file, evaluate, evaluate_files, write_roc_csv, EvalError, FileVerdict, Metrics};
use crate::explain::{compare_files, explain_file, render_diff, render_sites};
use crate::model::{grad_check, load_checkpoint, param_count, save_checkpoint, CheckpointError, GradCheckConfig, HyperParams, ModelError};
use crate::nn::AdamConfig;
use crate::train::{train, write_history_csv, BlockPolicy, TrainConfig, TrainError};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Msg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Parser)]
#[command(name = "bineye", version, about = "Recognize the compiler optimization level of ARM ELF object files")]
struct Cli {
    /// Seed for every random choice (init, shuffling, splits, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ExtractOpts {
    /// Take every executable section instead of only `.text`.
    #[arg(long)]
    all_exec: bool,
    /// Minimum real bytes for a final partial block to be kept.
    #[arg(long, default_value_t = DEFAULT_MIN_FILL)]
    min_fill: usize,
}

#[derive(Debug, Args)]
struct HyperOpts {
    /// Filters per kernel length.
    #[arg(long, default_value_t = 128)]
    filters: usize,
    /// Comma separated kernel lengths, ascending.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    kernels: Vec<usize>,
    /// Width of an optional hidden ReLU layer before the output layer.
    #[arg(long)]
    hidden: Option<usize>,
}

impl HyperOpts {
    fn hyper(&self) -> HyperParams {
        HyperParams {
            num_filters: self.filters,
            kernel_lengths: self.kernels.clone(),
            hidden_units: self.hidden,
            ..HyperParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show the code image and block layout of an object file.
    Extract {
        file: PathBuf,
        #[command(flatten)]
        opts: ExtractOpts,
    },
    /// Build and maintain labeled sample manifests.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a model on a split manifest and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Use every block of each file rather than the first one.
        #[arg(long)]
        all_blocks: bool,
        /// Stop early once train accuracy reaches this value.
        #[arg(long)]
        target_accuracy: Option<f64>,
        /// Save the final parameters instead of the best held-out ones.
        #[arg(long)]
        keep_last: bool,
        /// Write the per-epoch history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        hyper: HyperOpts,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// Block-level (or, with --files, file-level) metrics on a split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        all_blocks: bool,
        /// Vote per file instead of scoring blocks.
        #[arg(long)]
        files: bool,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// Classify one object file by voting over its blocks.
    Classify {
        file: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// File-level one-vs-rest ROC curves for a split.
    Roc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Emit `class,threshold,tpr,fpr` CSV instead of JSON.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// Instruction addresses behind the strongest filter activations, with pattern tags.
    Explain {
        file: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Number of sites to list.
        #[arg(long, default_value_t = 20)]
        top: usize,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// Compare pattern frequencies behind the activations of two files.
    Compare {
        file_a: PathBuf,
        file_b: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        top: usize,
        #[command(flatten)]
        extract: ExtractOpts,
    },
    /// Finite-difference gradient check on a small random configuration.
    Gradcheck {
        /// Width of an optional hidden layer in the checked network.
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Number of trainable parameters.
    Params {
        #[command(flatten)]
        hyper: HyperOpts,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Add object files compiled with one optimization flag.
    Add {
        #[arg(long)]
        manifest: PathBuf,
        /// Compiler flag the files were built with (-O0, -O1, -O2, -O3, -Os).
        #[arg(long, allow_hyphen_values = true)]
        flag: String,
        /// Compiler description recorded in the manifest provenance.
        #[arg(long)]
        compiler: Option<String>,
        #[arg(long)]
        all_exec: bool,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Drop cross-label duplicates and collapse same-label copies by code hash.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        /// Output path; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified train/test assignment.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
        test_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-label file and byte counts.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print a shell recipe that forces one optimization flag across package sources.
    Recipe {
        #[arg(long, allow_hyphen_values = true)]
        flag: String,
    },
}

struct Output {
    json: Value,
    text: Option<String>,
    /// Overrides the success exit code (used by gradcheck).
    exit: i32,
    /// Print `text` whatever `--format` says.
    text_only: bool,
}

impl Output {
    fn json<S: Serialize>(v: &S) -> Self {
        Output {
            json: serde_json::to_value(v).expect("serializable output"),
            text: None,
            exit: 0,
            text_only: false,
        }
    }

    fn text_only(text: String) -> Self {
        Output {
            json: Value::Null,
            text: Some(text),
            exit: 0,
            text_only: true,
        }
    }

    fn with_text(mut self, text: String) -> Self {
        self.text = Some(text);
        self
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(rendered.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(rendered.as_bytes());
                    2
                }
            };
        }
    };
    // Diagnostics are buffered so the command can run inside a sized thread pool.
    let mut diag = Vec::new();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, &mut diag)),
            Err(e) => Err(CliError::Msg(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli, &mut diag),
    };
    let _ = stderr.write_all(&diag);
    match result {
        Ok(out) => {
            let body = match (cli.format == Format::Text || out.text_only, out.text) {
                (true, Some(t)) => t,
                _ => {
                    let mut s = serde_json::to_string_pretty(&out.json).expect("json value");
                    s.push('\n');
                    s
                }
            };
            if stdout.write_all(body.as_bytes()).is_err() {
                return 1;
            }
            out.exit
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn read_manifest_or_new(path: &Path) -> Result<CorpusManifest, CliError> {
    if path.exists() {
        Ok(CorpusManifest::read(path)?)
    } else {
        Ok(CorpusManifest::new())
    }
}

fn dispatch(cli: &Cli, stderr: &mut Vec<u8>) -> Result<Output, CliError> {
    match &cli.command {
        Command::Extract { file, opts } => {
            let (info, image) = load_code_image(file, opts.all_exec)?;
            let blocks = split_blocks(&image, opts.min_fill);
            let v = json!({
                "path": file.display().to_string(),
                "machine": info.machine,
                "file_type": format!("{:?}", info.file_type),
                "relocatable": !info.not_relocatable,
                "code_sections": image.sections,
                "code_bytes": image.len(),
                "instructions": image.len() / 4,
                "truncated_bytes": image.truncated,
                "blocks": blocks.iter().map(|b| json!({
                    "base_offset": b.base_offset,
                    "pad_bytes": b.pad_len,
                })).collect::<Vec<_>>(),
            });
            let text = format!(
                "{}: {} code bytes from [{}], {} block(s)\n",
                file.display(),
                image.len(),
                image.sections.join(", "),
                blocks.len()
            );
            Ok(Output::json(&v).with_text(text))
        }
        Command::Corpus(cmd) => corpus(cmd, cli.seed, stderr),
        Command::Train {
            manifest,
            out,
            epochs,
            batch_size,
            lr,
            all_blocks,
            target_accuracy,
            keep_last,
            history,
            hyper,
            extract,
        } => {
            let m = CorpusManifest::read(manifest)?;
            let hyper = hyper.hyper();
            let cfg = TrainConfig {
                epochs: *epochs,
                batch_size: *batch_size,
                adam: AdamConfig {
                    lr: *lr,
                    ..AdamConfig::default()
                },
                seed: cli.seed,
                blocks: if *all_blocks { BlockPolicy::AllBlocks } else { BlockPolicy::FirstBlock },
                min_fill: extract.min_fill,
                all_exec: extract.all_exec,
                target_train_accuracy: *target_accuracy,
            };
            let res = train(&m, &hyper, &cfg)?;
            for (p, why) in &res.skipped {
                let _ = writeln!(stderr, "skipped {p}: {why}");
            }
            for r in &res.history {
                let _ = writeln!(
                    stderr,
                    "epoch {:>3}  loss {:.4}  train acc {:.4}  held-out acc {}",
                    r.epoch,
                    r.train_loss,
                    r.train_accuracy,
                    r.heldout_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            let params = if *keep_last { &res.last } else { &res.best };
            save_checkpoint(params, out)?;
            if let Some(h) = history {
                let f = std::fs::File::create(h).map_err(|e| CliError::Msg(format!("{}: {e}", h.display())))?;
                write_history_csv(&res.history, f)?;
            }
            let last = res.history.last().expect("epoch 0 always recorded");
            Ok(Output::json(&json!({
                "checkpoint": out.display().to_string(),
                "param_count": param_count(&hyper),
                "epochs_run": last.epoch,
                "best_epoch": if *keep_last { last.epoch } else { res.best_epoch },
                "final": last,
                "skipped": res.skipped.len(),
            })))
        }
        Command::Eval {
            model,
            manifest,
            split,
            all_blocks,
            files,
            extract,
        } => {
            let params = load_checkpoint(model)?;
            let m = CorpusManifest::read(manifest)?;
            if *files {
                let rep = evaluate_files(&params, &m, (*split).into(), extract.min_fill, extract.all_exec)?;
                for (p, why) in &rep.skipped {
                    let _ = writeln!(stderr, "skipped {p}: {why}");
                }
                let text = format!("files {}  accuracy {:.4}\n", rep.files, rep.accuracy);
                Ok(Output::json(&rep).with_text(text))
            } else {
                let policy = if *all_blocks { BlockPolicy::AllBlocks } else { BlockPolicy::FirstBlock };
                let metrics = evaluate(&params, &m, (*split).into(), policy, extract.min_fill, extract.all_exec)?;
                let text = render_metrics(&metrics);
                Ok(Output::json(&metrics).with_text(text))
            }
        }
        Command::Classify { file, model, extract } => {
            let params = load_checkpoint(model)?;
            let v = classify_file(&params, file, extract.min_fill, extract.all_exec)?;
            let text = render_verdict(&v);
            Ok(Output::json(&v).with_text(text))
        }
        Command::Roc {
            model,
            manifest,
            split,
            csv,
            extract,
        } => {
            let params = load_checkpoint(model)?;
            let m = CorpusManifest::read(manifest)?;
            let rep = evaluate_files(&params, &m, (*split).into(), extract.min_fill, extract.all_exec)?;
            let mut buf = Vec::new();
            write_roc_csv(&rep.roc, &mut buf)?;
            let csv_text = String::from_utf8(buf).expect("csv is utf-8");
            Ok(if *csv {
                Output::text_only(csv_text)
            } else {
                Output::json(&rep.roc).with_text(csv_text)
            })
        }
        Command::Explain {
            file,
            model,
            threshold,
            top,
            extract,
        } => {
            let params = load_checkpoint(model)?;
            let rep = explain_file(&params, file, *threshold, extract.min_fill, extract.all_exec, *top)?;
            let text = render_sites(&rep.top_sites);
            Ok(Output::json(&rep).with_text(text))
        }
        Command::Compare {
            file_a,
            file_b,
            model,
            threshold,
            top,
            extract,
        } => {
            let params = load_checkpoint(model)?;
            let d = compare_files(&params, file_a, file_b, *threshold, extract.min_fill, extract.all_exec, *top)?;
            let text = render_diff(&d);
            Ok(Output::json(&d).with_text(text))
        }
        Command::Gradcheck { hidden } => {
            let mut cfg = GradCheckConfig::default();
            cfg.hyper.hidden_units = *hidden;
            let rep = grad_check(&cfg, cli.seed)?;
            let pass = rep.max_rel_error < GRADCHECK_TOLERANCE;
            let text = format!(
                "max relative error {:.3e} ({})\n",
                rep.max_rel_error,
                if pass { "pass" } else { "FAIL" }
            );
            let mut out = Output::json(&json!({
                "max_rel_error": rep.max_rel_error,
                "tolerance": GRADCHECK_TOLERANCE,
                "pass": pass,
                "groups": rep.groups,
            }))
            .with_text(text);
            out.exit = if pass { 0 } else { 1 };
            Ok(out)
        }
        Command::Params { hyper } => {
            let h = hyper.hyper();
            h.validate()?;
            let n = param_count(&h);
            Ok(Output::json(&json!({ "param_count": n })).with_text(format!("{n}\n")))
        }
    }
}

fn corpus(cmd: &CorpusCommand, seed: u64, stderr: &mut Vec<u8>) -> Result<Output, CliError> {
    match cmd {
        CorpusCommand::Add {
            manifest,
            flag,
            compiler,
            all_exec,
            files,
        } => {
            OptLevel::from_flag(flag)?;
            let mut m = read_manifest_or_new(manifest)?;
            if let Some(c) = compiler {
                m.provenance.compiler = Some(c.clone());
            }
            let items: Vec<(PathBuf, String)> = files.iter().map(|f| (f.clone(), flag.clone())).collect();
            let rep = m.add_samples(&items, *all_exec);
            for (p, why) in &rep.failed {
                let _ = writeln!(stderr, "skipped {p}: {why}");
            }
            m.write(manifest)?;
            let text = format!("added {} file(s), skipped {}\n", rep.added, rep.failed.len());
            Ok(Output::json(&json!({
                "manifest": manifest.display().to_string(),
                "added": rep.added,
                "failed": rep.failed,
                "records": m.records.len(),
            }))
            .with_text(text))
        }
        CorpusCommand::Dedup { manifest, out } => {
            let m = CorpusManifest::read(manifest)?;
            let (d, rep) = m.dedup();
            d.write(out.as_deref().unwrap_or(manifest))?;
            let text = format!(
                "removed {} conflicting, collapsed {} duplicate(s); {} records remain\n",
                rep.conflicting_removed,
                rep.duplicates_collapsed,
                d.records.len()
            );
            Ok(Output::json(&json!({ "report": rep, "records": d.records.len() })).with_text(text))
        }
        CorpusCommand::Split {
            manifest,
            test_fraction,
            out,
        } => {
            let m = CorpusManifest::read(manifest)?;
            let s = m.split(*test_fraction, seed)?;
            s.write(out.as_deref().unwrap_or(manifest))?;
            let st = s.stats();
            let text = format!("train {}  test {}\n", st.train, st.test);
            Ok(Output::json(&st).with_text(text))
        }
        CorpusCommand::Stats { manifest } => {
            let st = CorpusManifest::read(manifest)?.stats();
            let mut text = String::new();
            for (l, s) in &st.per_label {
                let _ = writeln!(text, "{:<5} {:>6} files {:>10} bytes", l.to_string(), s.files, s.code_bytes);
            }
            let _ = writeln!(text, "total {:>6} files {:>10} bytes", st.total_files, st.total_code_bytes);
            Ok(Output::json(&st).with_text(text))
        }
        CorpusCommand::Recipe { flag } => {
            Ok(Output::text_only(flag_substitution_recipe(flag)?))
        }
    }
}

fn render_metrics(m: &Metrics) -> String {
    let mut s = format!("samples {}  accuracy {:.4}\n", m.samples, m.accuracy);
    for l in OptLevel::ALL {
        let p = m.precision[l.index()].map_or("undefined".into(), |p| format!("{p:.4}"));
        let auc = m.roc.get(l.index()).map_or(0.0, |r| r.auc);
        let _ = writeln!(s, "{:<5} precision {p}  auc {auc:.4}  confusion {:?}", l.to_string(), m.confusion[l.index()]);
    }
    s
}

fn render_verdict(v: &FileVerdict) -> String {
    let mut s = format!("{}: {} (confidence {:.4})\n", v.path, v.final_class, v.confidence);
    for b in &v.blocks {
        let _ = writeln!(s, "  (0x{:x}) {} {:.4}", b.base_offset, b.class, b.probs[b.class.index()]);
    }
    s
}
