//! `leci`: dataset generation, training, evaluation, explanation, oracle
//! checks and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! failure, 4 oracle counterexample.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use leci_core::checkpoint;
use leci_core::config::{expand_grid_file, Method, RunConfig};
use leci_core::exec::{thread_cap_from_env, with_threads, Exec};
use leci_core::graph::{DatasetSplit, SplitName};
use leci_core::jsonl::{load_dir, save_dir};
use leci_core::metrics::{
    accuracy, edge_selection_score, independence_probe, pfsc_probe, random_selector_f1, ProbeView,
};
use leci_core::micro::build_micro_universe;
use leci_core::model::AnyModel;
use leci_core::motif::{generate_with, Manifest};
use leci_core::oracle::oracle_check;
use leci_core::report::{EvalReport, MethodSummary, RankedPoint, Ranking, SeedRun, SplitAccuracy, Stat, TrainReport};
use leci_core::rng::Rng;
use leci_core::selector::{explain, to_dot, ExplainMode};
use leci_core::train::{train_erm_with, train_leci_with, EpochLog, TrainConfig};
use leci_core::{Error, Result};

const ORACLE_EXIT: u8 = 4;

#[derive(Parser)]
#[command(name = "leci", version, about = "Label and environment causal independence for graph OOD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `KEY=VALUE`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train LECI and/or ERM on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `leci` or `erm`; defaults to the configured methods.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint: accuracies, edge selection and independence probes.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the probes, which train fresh classifiers.
        #[arg(long)]
        no_probes: bool,
    },
    /// Write DOT renderings of selected edges for chosen graphs.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ood_test")]
        split: String,
        /// Comma-separated graph indices within the split.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        graphs: Vec<usize>,
        #[arg(long, conflicts_with = "threshold")]
        top_k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustively check the independence characterization on the micro universe.
    Oracle {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every point of a configuration grid and rank by ood_val accuracy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Method used for ranking; defaults to the first configured method.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Grid points trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Worker threads for `jobs` concurrent runs, capped by `LECI_THREADS`.
fn pool_size(jobs: usize) -> usize {
    thread_cap_from_env().map_or(jobs, |cap| jobs.min(cap))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// Record the resolved configuration next to a command's outputs.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = cfg.resolved();
    log::info!("resolved configuration:\n{text}");
    write(&dir.join("config.resolved"), text)
}

fn load_data(dir: &Path) -> Result<DatasetSplit> {
    if !dir.join("train.jsonl").is_file() {
        return Err(Error::Config(format!("no dataset found in {}", dir.display())));
    }
    load_dir(dir)
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s)
}

fn epochlogs(logs: &[EpochLog]) -> Result<String> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}

/// Train one method for one seed and write its run directory.
fn train_one(
    split: &DatasetSplit,
    cfg: &RunConfig,
    method: Method,
    seed: u64,
    dir: &Path,
    exec: Exec,
) -> Result<SeedRun> {
    create_dir(dir)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model, logs, by_ood, by_id) = match method {
        Method::Leci => {
            let o = train_leci_with(split, &train_cfg, train_cfg.objective(), exec)?;
            (AnyModel::Leci(o.best_model), o.logs, o.by_ood_val, o.by_id_val)
        }
        Method::Erm => {
            let o = train_erm_with(split, &train_cfg, exec)?;
            (AnyModel::Classifier(o.best_model), o.logs, o.by_ood_val, o.by_id_val)
        }
    };
    write(&dir.join("epochlogs.jsonl"), epochlogs(&logs)?)?;
    let extra = serde_json::json!({
        "method": method.name(),
        "seed": seed,
        "selected_epoch": by_ood.epoch,
        "config": cfg.entries(),
    });
    checkpoint::save(&model, extra, dir.join("model.ckpt"))?;
    Ok(SeedRun {
        seed,
        by_ood_val: by_ood,
        by_id_val: by_id,
        epochs_run: logs.len(),
        checkpoint: format!("{}/{seed}/model.ckpt", method.name()),
    })
}

/// Train every method and seed of `cfg`, writing `report.json` into `out`.
fn train_all(split: &DatasetSplit, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<TrainReport> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let start = Instant::now();
    let units: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds as u64).map(move |k| (m, cfg.train.seed + k)))
        .collect();
    let run = |i: usize| {
        let (m, seed) = units[i];
        log::info!("training {} seed {seed}", m.name());
        train_one(split, cfg, m, seed, &out.join(m.name()).join(seed.to_string()), Exec::Parallel)
    };
    let runs = if jobs > 1 {
        with_threads(pool_size(jobs), || Exec::Parallel.try_map(units.len(), run))?
    } else {
        Exec::Sequential.try_map(units.len(), run)?
    };
    let methods = cfg
        .methods
        .iter()
        .map(|&m| {
            let mine = units
                .iter()
                .zip(&runs)
                .filter(|((um, _), _)| *um == m)
                .map(|(_, r)| r.clone())
                .collect();
            MethodSummary::new(m, mine)
        })
        .collect();
    let report = TrainReport::new(
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        methods,
        start.elapsed().as_secs_f64(),
    );
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn print_summary(report: &TrainReport) {
    for m in &report.methods {
        let fmt = |s: &Option<Stat>| s.as_ref().map_or("n/a".to_string(), |s| s.formatted.clone());
        println!(
            "{}: ood_test {} (ood_val selection), {} (id_val selection)",
            m.method.name(),
            fmt(&m.ood_test_by_ood_val),
            fmt(&m.ood_test_by_id_val)
        );
    }
}

fn cmd_gen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(cfg)?;
    create_dir(out)?;
    let split = generate_with(&cfg.data, Exec::Parallel)?;
    save_dir(&split, out)?;
    write_json(&out.join("manifest.json"), &Manifest::new(&cfg.data, &split))?;
    echo_config(&cfg, out)?;
    println!("wrote {} graphs to {}", split.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &ConfigArgs,
    data: &Path,
    out: &Path,
    method: Option<&str>,
    seeds: Option<usize>,
    epochs: Option<usize>,
    jobs: usize,
) -> Result<()> {
    let mut cfg = load_config(cfg)?;
    if let Some(m) = method {
        cfg.methods = vec![parse_method(m)?];
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        if e > 0 && cfg.train.warmup_epochs >= e {
            cfg.train.warmup_epochs = e / 5;
        }
    }
    cfg.validate()?;
    let split = load_data(data)?;
    let report = train_all(&split, &cfg, out, jobs)?;
    print_summary(&report);
    Ok(())
}

fn cmd_eval(cfg: &ConfigArgs, ckpt: &Path, data: &Path, out: Option<&Path>, no_probes: bool) -> Result<()> {
    let cfg = load_config(cfg)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let split = load_data(data)?;
    let exec = Exec::Parallel;
    let eb = cfg.train.eval_batch_size;
    let mut acc = Vec::new();
    for name in SplitName::ALL {
        let gs = split.get(name);
        if !gs.is_empty() {
            acc.push(SplitAccuracy {
                split: name.as_str().into(),
                accuracy: accuracy(&model, gs, eb, exec)?,
                num_graphs: gs.len(),
            });
        }
    }
    let mut report = EvalReport {
        schema: leci_core::report::EVAL_SCHEMA.into(),
        method: model.method().into(),
        accuracy: acc,
        edge_selection: None,
        random_selector_f1: None,
        probes: Vec::new(),
        feature_disc: None,
    };
    if let AnyModel::Leci(m) = &model {
        let test = &split.ood_test;
        if !test.is_empty() {
            report.edge_selection = Some(edge_selection_score(m, test, eb, exec)?);
            report.random_selector_f1 = Some(random_selector_f1(test, 20, &mut Rng::new(cfg.train.seed))?);
        }
        let probe_cfg = TrainConfig {
            epochs: cfg.probe_epochs,
            warmup_epochs: 0,
            ..cfg.train.clone()
        };
        if !no_probes {
            for view in [ProbeView::EnvOnCausal, ProbeView::LabelOnSpurious] {
                report.probes.push(independence_probe(m, &split.id_val, view, &probe_cfg, exec)?);
            }
        }
        report.feature_disc = pfsc_probe(m, &split.id_val, eb, exec)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    ckpt: &Path,
    data: &Path,
    split_name: &str,
    graphs: &[usize],
    top_k: Option<usize>,
    threshold: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    let AnyModel::Leci(m) = model else {
        return Err(Error::Config("explain needs a LECI checkpoint".into()));
    };
    let split = load_data(data)?;
    let name = SplitName::parse(split_name).ok_or_else(|| Error::Config(format!("unknown split {split_name:?}")))?;
    let gs = split.get(name);
    let mode = match (top_k, threshold) {
        (Some(k), _) => ExplainMode::TopK(k),
        (None, Some(t)) => ExplainMode::Threshold(t),
        (None, None) => ExplainMode::Threshold(0.5),
    };
    create_dir(out)?;
    for &i in graphs {
        let g = gs
            .get(i)
            .ok_or_else(|| Error::Config(format!("graph {i} out of range for {split_name} ({} graphs)", gs.len())))?;
        let ex = explain(&m.selector, &m.store, g, mode)?;
        if let Some(w) = &ex.warning {
            eprintln!("warning: graph {i}: {w}");
        }
        let path = out.join(format!("{split_name}_{i}.dot"));
        write(&path, to_dot(g, &ex.selected))?;
        println!("{}: {} of {} edges selected", path.display(), ex.selected.len(), g.num_edges());
    }
    Ok(())
}

fn cmd_oracle(out: Option<&Path>) -> Result<bool> {
    let report = oracle_check(&build_micro_universe())?;
    println!(
        "checked {} subsets over {} outcomes: {} counterexamples",
        report.subsets_checked,
        report.outcomes,
        report.counterexamples()
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report.passed())
}

fn cmd_sweep(
    config: &Path,
    data: &Path,
    out: &Path,
    method: Option<&str>,
    seeds: Option<usize>,
    jobs: usize,
) -> Result<()> {
    let mut points = expand_grid_file(config)?;
    let split = load_data(data)?;
    let rank_method = match method {
        Some(m) => parse_method(m)?,
        None => points[0].config.methods[0],
    };
    for p in &mut points {
        p.config.methods = vec![rank_method];
        if let Some(s) = seeds {
            p.config.seeds = s;
        }
    }
    create_dir(out)?;
    let run = |i: usize| -> Result<RankedPoint> {
        let p = &points[i];
        let dir_name = format!("point_{i:03}");
        let report = train_all(&split, &p.config, &out.join(&dir_name), 1)?;
        let m = &report.methods[0];
        let ood_val = Stat::of(m.runs.iter().map(|r| r.by_ood_val.ood_val_acc)).map(|s| s.mean);
        Ok(RankedPoint {
            rank: 0,
            directory: dir_name,
            assignment: p.assignment.clone(),
            ood_val,
            ood_test: m.ood_test_by_ood_val.clone(),
        })
    };
    let ranked = if jobs > 1 {
        with_threads(pool_size(jobs), || Exec::Parallel.try_map(points.len(), run))?
    } else {
        Exec::Sequential.try_map(points.len(), run)?
    };
    let ranking = Ranking::new(rank_method, ranked);
    write_json(&out.join("ranking.json"), &ranking)?;
    for p in &ranking.points {
        println!(
            "{:>3} {} ood_val {}",
            p.rank,
            p.directory,
            p.ood_val.map_or("n/a".into(), |v| format!("{:.4}", v))
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { cfg, out } => cmd_gen(&cfg, &out)?,
        Command::Train {
            cfg,
            data,
            out,
            method,
            seeds,
            epochs,
            jobs,
        } => cmd_train(&cfg, &data, &out, method.as_deref(), seeds, epochs, jobs)?,
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            no_probes,
        } => cmd_eval(&cfg, &checkpoint, &data, out.as_deref(), no_probes)?,
        Command::Explain {
            checkpoint,
            data,
            split,
            graphs,
            top_k,
            threshold,
            out,
        } => cmd_explain(&checkpoint, &data, &split, &graphs, top_k, threshold, &out)?,
        Command::Oracle { out } => return cmd_oracle(out.as_deref()),
        Command::Sweep {
            config,
            data,
            out,
            method,
            seeds,
            jobs,
        } => cmd_sweep(&config, &data, &out, method.as_deref(), seeds, jobs)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match thread_cap_from_env() {
        Some(cap) => with_threads(cap, || run(cli)),
        None => run(cli),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(ORACLE_EXIT),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
