// SPDX-License-Identifier: MIT OR Apache-2.0

//! `channels`: command-line front end for channel discovery, edits, and
//! intervention experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use channel_core::composition::{
    Analyzer, BuildOptions, ComponentRef, CompositionKind, DecomposedSide, HeadRef, ScanDirection,
};
use channel_core::editor::{apply_edit, EditPlan};
use channel_core::harness::{self, ExperimentConfig, Preset, ASSERTION_EXIT_CODE};
use channel_core::intervention::{
    alpha_range, patch_dataset, run_scale_sweep, traverse_grid, write_curve_csv, write_traversal_csv, GridSpec,
    PatchSpec, ScaleSweep, SweepMetric, SweepPosition, MOVER,
};
use channel_core::model_io::{fetch, fetch_all, HubSource, Model};
use channel_core::runtime::greedy_next;
use channel_core::tasks::{
    gen_duplicate_seqs, gen_ioi, gen_laundry, minimal_pairs, printable_ids, task_accuracy, write_dataset,
    DEFAULT_TEMPLATE, NAME_POOL,
};
use channel_core::tokenizer::Tokenizer;

#[derive(Parser)]
#[command(name = "channels", version, about = "Low-rank communication channels between attention heads")]
struct Cli {
    /// Flat JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Exit with a distinct status when acceptance checks fail.
    #[arg(long = "assert", global = true)]
    assert_checks: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint directory (defaults to the reference checkpoint).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Upstream,
    Downstream,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Ioi,
    Laundry,
    Duplicates,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Inhibition,
    LogitDiff,
    Accuracy,
}

#[derive(Subcommand)]
enum Command {
    /// Download (or verify the cache of) the reference checkpoint.
    Fetch {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Encode text to ids, or decode ids with --decode.
    Tokenize {
        text: String,
        #[arg(long)]
        decode: bool,
    },
    /// Per-component composition scores between two heads.
    Compose {
        #[arg(long)]
        source: HeadRef,
        #[arg(long)]
        target: HeadRef,
        #[arg(long, default_value = "query")]
        kind: CompositionKind,
        /// Narrow the target to one of its components.
        #[arg(long)]
        target_component: Option<usize>,
        /// Decompose the target instead of the source.
        #[arg(long)]
        decompose_target: bool,
        #[arg(long)]
        fold_ln: bool,
    },
    /// Rank heads by composition with one component.
    Scan {
        component: ComponentRef,
        #[arg(long, value_enum, default_value = "downstream")]
        direction: Direction,
        #[arg(long, default_value = "query")]
        kind: CompositionKind,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        fold_ln: bool,
    },
    /// Apply an edit plan and save the edited checkpoint to --out.
    Edit { plan: PathBuf },
    /// Replace a component's head output with α·w over IOI prompts.
    Sweep {
        component: ComponentRef,
        #[arg(long, default_value_t = 10.0)]
        step: f64,
        #[arg(long, value_enum, default_value = "inhibition")]
        metric: Metric,
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Three-component grid traversal on a Laundry List dataset.
    Traverse {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20.0)]
        step: f64,
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Subspace patching over IOI minimal pairs.
    Patch {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
    },
    /// Generate a dataset as JSON lines (written under --out).
    Gen {
        #[arg(value_enum)]
        task: Task,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Object count for Laundry List.
        #[arg(long, default_value_t = 3)]
        n: usize,
    },
    /// Clean (or edited, with --plan) task accuracy.
    Eval {
        #[arg(value_enum)]
        task: Task,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run a named recipe.
    Run { recipe: Option<String> },
    /// Summarize run directories.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(ASSERTION_EXIT_CODE as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

impl Cli {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn model(&self) -> Result<Model> {
        let model = match &self.checkpoint {
            Some(dir) => Model::load_dir(dir)?,
            None => channel_core::model_io::load_reference_model(&HubSource::gpt2_small())?,
        };
        Ok(model)
    }

    fn experiment(&self, recipe: Option<&str>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::new(recipe.unwrap_or_default()),
        };
        if let Some(name) = recipe {
            cfg.name = name.to_string();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.preset {
            cfg.preset = match p {
                PresetArg::Full => Preset::Full,
                PresetArg::Desk => Preset::Desk,
            };
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(dir) = &self.checkpoint {
            cfg.checkpoint = Some(dir.clone());
        }
        Ok(cfg)
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Returns whether every requested check passed.
fn dispatch(cli: &Cli) -> Result<bool> {
    let tok = Tokenizer::gpt2();
    match &cli.command {
        Command::Fetch { cache_dir } => {
            let dir = cache_dir.clone().unwrap_or_else(fetch::default_cache_dir);
            println!("{}", fetch_all(&HubSource::gpt2_small(), &dir)?.display());
        }
        Command::Tokenize { text, decode } => {
            if *decode {
                let ids = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<u32>().with_context(|| format!("bad token id {s:?}")))
                    .collect::<Result<Vec<_>>>()?;
                println!("{}", tok.decode(&ids)?);
            } else {
                println!("{}", serde_json::to_string(&tok.encode(text))?);
            }
        }
        Command::Compose {
            source,
            target,
            kind,
            target_component,
            decompose_target,
            fold_ln,
        } => {
            let model = cli.model()?;
            let analyzer = Analyzer::new(&model, BuildOptions { fold_ln: *fold_ln, attn_scale: false });
            let side = if *decompose_target { DecomposedSide::Target } else { DecomposedSide::Source };
            let report = analyzer.component_scores(*source, *target, *kind, side, *target_component)?;
            let json = report.to_json()?;
            match &cli.out {
                Some(out) => write_out(&out.join(format!("{kind}_{source}_{target}.json")), &json)?,
                None => println!("{json}"),
            }
        }
        Command::Scan {
            component,
            direction,
            kind,
            top,
            fold_ln,
        } => {
            let model = cli.model()?;
            let analyzer = Analyzer::new(&model, BuildOptions { fold_ln: *fold_ln, attn_scale: false });
            let dir = match direction {
                Direction::Upstream => ScanDirection::Upstream,
                Direction::Downstream => ScanDirection::Downstream,
            };
            let result = analyzer.scan_channel(*component, dir, *kind)?;
            for e in result.entries.iter().take(*top) {
                println!("{}\t{:.6}\t{:+.3}", e.head, e.score, e.z);
            }
            if let Some(out) = &cli.out {
                write_out(&out.join(format!("scan_{component}.json")), &serde_json::to_string_pretty(&result)?)?;
            }
        }
        Command::Edit { plan } => {
            let Some(out) = &cli.out else { bail!("edit needs --out for the edited checkpoint") };
            let plan = EditPlan::from_json(&std::fs::read_to_string(plan)?)?;
            let base = Arc::new(cli.model()?);
            let edited = apply_edit(&base, &plan)?;
            edited.model().save_dir(out)?;
            write_out(&out.join("edit_plan.json"), &plan.to_json()?)?;
            println!("refactorization error {:.3e}", edited.refactorization_error()?);
        }
        Command::Sweep {
            component,
            step,
            metric,
            count,
        } => {
            let model = cli.model()?;
            let analyzer = Analyzer::new(&model, BuildOptions::default());
            let examples = gen_ioi(tok, *count, cli.seed(), NAME_POOL, DEFAULT_TEMPLATE)?;
            let sweep = ScaleSweep {
                component: *component,
                alphas: alpha_range(-100.0, 100.0, *step),
                position: SweepPosition::Final,
                dataset: "ioi".into(),
            };
            let metric = match metric {
                Metric::Inhibition => SweepMetric::Inhibition { mover: MOVER },
                Metric::LogitDiff => SweepMetric::LogitDiff,
                Metric::Accuracy => SweepMetric::Accuracy,
            };
            let out = cli.out_dir();
            std::fs::create_dir_all(&out)?;
            for (tag, io_first) in [("io_first", true), ("s1_first", false)] {
                let subset: Vec<_> = examples.iter().filter(|e| e.io_first == io_first).cloned().collect();
                let curve = run_scale_sweep(&analyzer, &sweep, &subset, metric)?;
                let path = out.join(format!("sweep_{component}_{tag}.csv"));
                write_curve_csv(&path, &curve)?;
                println!("{}", path.display());
            }
        }
        Command::Traverse { n, step, count } => {
            let model = cli.model()?;
            let analyzer = Analyzer::new(&model, BuildOptions::default());
            let data = gen_laundry(tok, *n, *count, cli.seed())?;
            let t = traverse_grid(&analyzer, &GridSpec::new(alpha_range(-100.0, 100.0, *step)), &data)?;
            let out = cli.out_dir();
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("traverse_N{n}.csv"));
            write_traversal_csv(&path, &t)?;
            println!("{}", path.display());
        }
        Command::Patch { pairs } => {
            let model = cli.model()?;
            let analyzer = Analyzer::new(&model, BuildOptions::default());
            let examples = gen_ioi(tok, *pairs, cli.seed(), NAME_POOL, DEFAULT_TEMPLATE)?;
            let pairs: Vec<_> = minimal_pairs(&examples)
                .into_iter()
                .map(|(i, j)| (&examples[i], &examples[j]))
                .collect();
            let (summary, _) = patch_dataset(&analyzer, &PatchSpec::default(), &pairs)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Gen { task, count, n } => {
            let out = cli.out_dir();
            std::fs::create_dir_all(&out)?;
            let seed = cli.seed();
            let path = match task {
                Task::Ioi => {
                    let data = gen_ioi(tok, *count, seed, NAME_POOL, DEFAULT_TEMPLATE)?;
                    let path = out.join("ioi.jsonl");
                    write_dataset(&path, &data, "ioi", seed, serde_json::json!({"count_per_order": count, "template": DEFAULT_TEMPLATE}))?;
                    path
                }
                Task::Laundry => {
                    let data = gen_laundry(tok, *n, *count, seed)?;
                    let path = out.join(format!("laundry_N{n}.jsonl"));
                    write_dataset(&path, &data, "laundry", seed, serde_json::json!({"n": n, "count": count}))?;
                    path
                }
                Task::Duplicates => {
                    let params = channel_core::harness::ExperimentConfig::new("duplicate-separability").resolve()?;
                    let data = gen_duplicate_seqs(&printable_ids(tok), params.dup_length, params.dup_copies, *count, 1024, seed)?;
                    let path = out.join("duplicates.jsonl");
                    write_dataset(
                        &path,
                        &data,
                        "duplicates",
                        seed,
                        serde_json::json!({"length": params.dup_length, "duplicates": params.dup_copies, "count": count}),
                    )?;
                    path
                }
            };
            println!("{}", path.display());
        }
        Command::Eval { task, count, n, plan } => {
            let base = Arc::new(cli.model()?);
            let model: Arc<Model> = match plan {
                Some(p) => {
                    let plan = EditPlan::from_json(&std::fs::read_to_string(p)?)?;
                    Arc::new(apply_edit(&base, &plan)?.model().clone())
                }
                None => base,
            };
            let predict = |ids: &[u32]| -> channel_core::Result<u32> { Ok(greedy_next(&model.forward_final(ids, &[])?)) };
            match task {
                Task::Ioi => {
                    let data = gen_ioi(tok, *count, cli.seed(), NAME_POOL, DEFAULT_TEMPLATE)?;
                    let acc = task_accuracy(&data, |e| predict(&e.ids))?;
                    let inhib = harness::mean_inhibition(&model, &data, MOVER)?;
                    println!("accuracy {acc:.4}\tmean inhibition {inhib:.4}");
                }
                Task::Laundry => {
                    let data = gen_laundry(tok, *n, *count, cli.seed())?;
                    println!("accuracy {:.4}", task_accuracy(&data, |e| predict(&e.ids))?);
                }
                Task::Duplicates => bail!("duplicate sequences have no answer to evaluate"),
            }
        }
        Command::Run { recipe } => {
            let cfg = cli.experiment(recipe.as_deref())?;
            let manifest = harness::run(&cfg)?;
            for c in &manifest.checks {
                println!(
                    "{}  {}: measured {:.4}, target {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.target
                );
            }
            println!("{}", cfg.run_dir().display());
            return Ok(!cli.assert_checks || manifest.passed());
        }
        Command::Report { dirs, csv } => {
            let report = harness::report(dirs)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                report.write_csv(path)?;
            }
            return Ok(!cli.assert_checks || report.all_pass());
        }
    }
    Ok(true)
}
