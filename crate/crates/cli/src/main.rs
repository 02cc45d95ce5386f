//! `m3jepa`: one binary for the whole pipeline — synthetic data generation,
//! training, evaluation, gradient checking, the α sweep, ablation
//! comparisons, and similarity-matrix export. Runs are described by a JSON
//! config (or a named preset) plus dotted-path overrides such as
//! `--train.steps=100`. `M3JEPA_SEED` overrides the config seeds.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use m3jepa_core::config::{parse_config, preset, preset_names, RunConfig};
use m3jepa_core::eval::{
    alpha_sweep, build_index, classify_metrics, classify_via_retrieval, export_similarity_matrix,
    latency_harness, mean_pair_energy, recall_at_k, retrieve, similarity_matrix, write_alpha_csv,
    EvalReport, RetrievalMode,
};
use m3jepa_core::gradcheck::gradcheck;
use m3jepa_core::moe::{Model, PredictorKind};
use m3jepa_core::synth::{generate, load_dataset, save_dataset, Dataset, ModalityKind, Split};
use m3jepa_core::train::{
    convergence_gap, load_checkpoint, save_checkpoint, train, ScheduleMode, StepRecord,
    TrainState,
};
use m3jepa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "m3jepa", version, about = "Latent multimodal alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a JSON run config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see --help for the list).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-modality dataset and write it to disk.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output path; defaults to paths.dataset or "dataset.m3ds".
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a predictor and write the final checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: retrieval, energy, latency, classification.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify gradients against finite differences on a tiny config.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per alpha and emit a CSV of (alpha, R@1).
    SweepAlpha {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated alpha values, e.g. "0,0.5,1".
        #[arg(long)]
        alphas: String,
    },
    /// Paired comparison runs from a shared seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// moe-vs-mlp | agd-vs-joint | topk:2,4,6 | experts:2,8,12
        #[arg(long)]
        which: String,
    },
    /// Export the test-split similarity matrix of a checkpoint as CSV.
    ExportSim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Pull `--a.b.c=value` style overrides out of argv before clap sees them.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for arg in argv {
        let looks_dotted = arg.starts_with("--")
            && arg.contains('=')
            && arg[2..arg.find('=').unwrap()].contains('.');
        if looks_dotted {
            let eq = arg.find('=').unwrap();
            overrides.push((arg[2..eq].to_string(), arg[eq + 1..].to_string()));
        } else {
            plain.push(arg);
        }
    }
    (plain, overrides)
}

fn load_run_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut run = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            parse_config(&text, overrides)?
        }
        (None, Some(name)) => {
            let base = preset(name)?;
            let text = serde_json::to_string(&base)?;
            parse_config(&text, overrides)?
        }
        _ => {
            return Err(Error::config(format!(
                "exactly one of --config or --preset is required (presets: {})",
                preset_names().join(", ")
            )))
        }
    };
    if let Ok(seed) = std::env::var("M3JEPA_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::config(format!("M3JEPA_SEED must be an integer, got {seed}")))?;
        run.synth.seed = seed;
        run.train.seed = seed;
        run.validate()?;
    }
    Ok(run)
}

fn obtain_dataset(run: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &run.paths.dataset {
        if path.exists() {
            return load_dataset(path);
        }
    }
    let registry = run.registry()?;
    Ok(generate(&run.synth, &registry)?.0)
}

fn cmd_gen_data(run: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    run.validate()?;
    let registry = run.registry()?;
    let (ds, _) = generate(&run.synth, &registry)?;
    let path = out
        .or_else(|| run.paths.dataset.clone())
        .unwrap_or_else(|| PathBuf::from("dataset.m3ds"));
    save_dataset(&ds, &path)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        ds.num_samples,
        ds.split_range(Split::Train).len(),
        ds.split_range(Split::Val).len(),
        ds.split_range(Split::Test).len(),
        path.display()
    );
    for m in &registry.modalities {
        println!("  modality {} \"{}\": dim {}", m.id, m.name, m.dim);
    }
    Ok(())
}

fn per_task_final_losses(history: &[StepRecord]) -> BTreeMap<usize, f64> {
    let mut last: BTreeMap<usize, f64> = BTreeMap::new();
    for rec in history {
        last.insert(rec.task, rec.total);
    }
    last
}

fn cmd_train(run: &RunConfig, resume: Option<PathBuf>) -> Result<()> {
    let registry = run.validate()?;
    let ds = obtain_dataset(run)?;
    let (model, mut state, train_cfg) = match resume {
        Some(path) => {
            let loaded = load_checkpoint(&path)?;
            println!("resuming from step {}", loaded.state.step);
            let mut cfg = loaded.meta.train.clone();
            cfg.steps = run.train.steps;
            (loaded.model, loaded.state, cfg)
        }
        None => (
            Model::init(
                run.predictor,
                &run.moe,
                &registry,
                &run.tasks,
                &run.adapter_modalities,
                run.train.seed,
            )?,
            TrainState::new(),
            run.train.clone(),
        ),
    };
    let mut log_file = match &run.paths.log {
        Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    let history = train(
        &model,
        &ds,
        &registry,
        &run.tasks,
        &run.loss,
        &train_cfg,
        &mut state,
        log_file.as_mut().map(|w| w as &mut dyn Write),
    )?;
    let ckpt = run
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from("checkpoint.m3jp"));
    let mut meta = run.checkpoint_meta();
    meta.train = train_cfg.clone();
    save_checkpoint(&model, &state, &meta, &ckpt)?;
    println!("checkpoint written to {} at step {}", ckpt.display(), state.step);
    for (task, loss) in per_task_final_losses(&history) {
        println!("final loss task {task}: {loss:.6}");
    }
    if train_cfg.mode == ScheduleMode::Agd && train_cfg.task_order.len() == 2 {
        match convergence_gap(&history, 20) {
            Ok(gap) => println!("convergence_gap(W=20): {gap:.6}"),
            Err(e) => println!("convergence_gap unavailable: {e}"),
        }
    }
    Ok(())
}

fn write_output(run: &RunConfig, default_name: &str, contents: &str) -> Result<PathBuf> {
    let path = run
        .paths
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(default_name));
    fs::write(&path, contents)?;
    Ok(path)
}

fn cmd_eval(run: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    run.validate()?;
    let ckpt_path = checkpoint
        .or_else(|| run.paths.checkpoint.clone())
        .ok_or_else(|| Error::config("eval needs --checkpoint or paths.checkpoint"))?;
    let loaded = load_checkpoint(&ckpt_path)?;
    let ds = obtain_dataset(run)?;
    let task = run.eval_task();
    let queries: Vec<usize> = ds.split_range(Split::Test).collect();
    let index = build_index(&ds, Split::Test, task)?;

    let sim = similarity_matrix(&loaded.model, &ds, task, &queries, &index)?;
    let ks: Vec<usize> = run
        .eval
        .ks
        .iter()
        .copied()
        .filter(|&k| k <= index.ids.len())
        .collect();
    let recalls = recall_at_k(&sim, &ks)?;
    let mode = match run.eval.mode.as_str() {
        "energy" => RetrievalMode::Energy {
            alpha: run.loss.alpha,
        },
        _ => RetrievalMode::Cosine,
    };
    // ranked retrieval exercised in the requested mode
    retrieve(&loaded.model, &ds, task, queries[0], &index, mode)?;

    let latency = latency_harness(&loaded.model, &ds, task, &queries, &index, 5)?;
    let energy_mean = mean_pair_energy(&loaded.model, &ds, task, &queries, run.loss.alpha)?;

    let classification = {
        let one_hot = task.outputs.len() == 1
            && run
                .modalities
                .iter()
                .any(|m| m.id == task.outputs[0] && m.kind == ModalityKind::OneHot);
        if one_hot {
            let label_mod = task.outputs[0];
            let classes = run.modalities.iter().find(|m| m.id == label_mod).unwrap().dim;
            let pred = classify_via_retrieval(&loaded.model, &ds, task, &queries, classes)?;
            let truth: Vec<usize> = queries
                .iter()
                .map(|&q| ds.label(label_mod, q))
                .collect::<Result<_>>()?;
            Some(classify_metrics(&pred, &truth, classes)?)
        } else {
            None
        }
    };

    let report = EvalReport {
        r_at: recalls
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        classification,
        latency: Some(latency),
        energy_mean,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if run.paths.output.is_some() {
        let path = write_output(run, "eval.json", &json)?;
        eprintln!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(run: &RunConfig) -> Result<()> {
    let report = gradcheck(run)?;
    println!("{:<12} {:>12} {:>8} {:>8}", "family", "rel_err", "tensors", "pass");
    for f in &report.families {
        println!(
            "{:<12} {:>12.3e} {:>8} {:>8}",
            f.family,
            f.rel_err,
            f.tensors,
            if f.pass { "ok" } else { "FAIL" }
        );
    }
    if !report.all_pass() {
        return Err(Error::numeric("gradient check failed; see table above"));
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("bad {what} value \"{s}\"")))
        })
        .collect()
}

fn cmd_sweep_alpha(run: &RunConfig, alphas_raw: &str) -> Result<()> {
    let registry = run.validate()?;
    let alphas: Vec<f64> = parse_list(alphas_raw, "alpha")?;
    let ds = obtain_dataset(run)?;
    let points = alpha_sweep(
        &alphas,
        run.predictor,
        &run.moe,
        &ds,
        &registry,
        &run.tasks,
        &run.train,
        run.eval_task().id,
    )?;
    let mut csv = Vec::new();
    write_alpha_csv(&points, &mut csv)?;
    let csv = String::from_utf8(csv).expect("csv is utf-8");
    print!("{csv}");
    if run.paths.output.is_some() {
        let path = write_output(run, "alpha_sweep.csv", &csv)?;
        eprintln!("sweep written to {}", path.display());
    }
    Ok(())
}

/// Train one variant and report mean R@1 over all tasks plus param count.
fn run_variant(run: &RunConfig, label: &str) -> Result<(String, f64, usize)> {
    let registry = run.validate()?;
    let ds = obtain_dataset(run)?;
    let model = Model::init(
        run.predictor,
        &run.moe,
        &registry,
        &run.tasks,
        &run.adapter_modalities,
        run.train.seed,
    )?;
    let params = model.param_count();
    let mut state = TrainState::new();
    train(
        &model, &ds, &registry, &run.tasks, &run.loss, &run.train, &mut state, None,
    )?;
    let mut total = 0.0;
    let mut counted = 0;
    for task in &run.tasks {
        let index = build_index(&ds, Split::Test, task)?;
        let queries: Vec<usize> = ds.split_range(Split::Test).collect();
        let sim = similarity_matrix(&model, &ds, task, &queries, &index)?;
        total += recall_at_k(&sim, &[1])?[&1];
        counted += 1;
    }
    Ok((label.to_string(), total / counted as f64, params))
}

fn print_table(rows: &[(String, f64, usize)]) {
    println!("{:<24} {:>10} {:>12}", "variant", "mean R@1", "params");
    for (label, r, p) in rows {
        println!("{label:<24} {r:>10.4} {p:>12}");
    }
}

fn cmd_ablate(run: &RunConfig, which: &str) -> Result<()> {
    run.validate()?;
    let mut rows = Vec::new();
    if which == "moe-vs-mlp" {
        let mut moe_run = run.clone();
        moe_run.predictor = PredictorKind::Moe;
        let mut mlp_run = run.clone();
        mlp_run.predictor = PredictorKind::Mlp;
        rows.push(run_variant(&moe_run, "moe")?);
        rows.push(run_variant(&mlp_run, "mlp")?);
        let (a, b) = (rows[0].2 as f64, rows[1].2 as f64);
        println!(
            "parameter budget difference: {:.2}%",
            100.0 * (a - b).abs() / a
        );
    } else if which == "agd-vs-joint" {
        let mut agd_run = run.clone();
        agd_run.train.mode = ScheduleMode::Agd;
        let mut joint_run = run.clone();
        joint_run.train.mode = ScheduleMode::Joint;
        rows.push(run_variant(&agd_run, "agd")?);
        rows.push(run_variant(&joint_run, "joint")?);
    } else if let Some(list) = which.strip_prefix("topk:") {
        for k in parse_list::<usize>(list, "top_k")? {
            let mut variant = run.clone();
            variant.moe.top_k = k;
            rows.push(run_variant(&variant, &format!("top_k={k}"))?);
        }
    } else if let Some(list) = which.strip_prefix("experts:") {
        for n in parse_list::<usize>(list, "experts")? {
            let mut variant = run.clone();
            variant.moe.experts_per_modality = n;
            rows.push(run_variant(&variant, &format!("experts={n}"))?);
        }
    } else {
        return Err(Error::config(format!(
            "unknown ablation \"{which}\"; use moe-vs-mlp, agd-vs-joint, topk:<list>, experts:<list>"
        )));
    }
    print_table(&rows);
    if run.paths.output.is_some() {
        let mut csv = String::from("variant,mean_r_at_1,params\n");
        for (label, r, p) in &rows {
            csv.push_str(&format!("{label},{r},{p}\n"));
        }
        let path = write_output(run, "ablation.csv", &csv)?;
        eprintln!("table written to {}", path.display());
    }
    Ok(())
}

fn cmd_export_sim(run: &RunConfig, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    run.validate()?;
    let ckpt_path = checkpoint
        .or_else(|| run.paths.checkpoint.clone())
        .ok_or_else(|| Error::config("export-sim needs --checkpoint or paths.checkpoint"))?;
    let loaded = load_checkpoint(&ckpt_path)?;
    let ds = obtain_dataset(run)?;
    let task = run.eval_task();
    let cap = run.eval.matrix_cap;
    let queries: Vec<usize> = ds.split_range(Split::Test).take(cap).collect();
    let index = build_index(&ds, Split::Test, task)?;
    let capped = m3jepa_core::eval::CandidateIndex {
        output_sig: index.output_sig.clone(),
        ids: index.ids.iter().copied().take(cap).collect(),
        vectors: index.vectors.iter().cloned().take(cap).collect(),
        norms: index.norms.iter().copied().take(cap).collect(),
        computations: std::cell::Cell::new(0),
    };
    let sim = similarity_matrix(&loaded.model, &ds, task, &queries, &capped)?;
    let path = out
        .or_else(|| run.paths.output.clone())
        .unwrap_or_else(|| PathBuf::from("similarity.csv"));
    export_similarity_matrix(&sim, &path)?;
    println!(
        "{}x{} matrix written to {}; diagonal margin {:.6}",
        sim.rows,
        sim.cols,
        path.display(),
        sim.diagonal_margin()
    );
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_gen_data(&run, out)
        }
        Command::Train { cfg, resume } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_train(&run, resume)
        }
        Command::Eval { cfg, checkpoint } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_eval(&run, checkpoint)
        }
        Command::Gradcheck { cfg } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_gradcheck(&run)
        }
        Command::SweepAlpha { cfg, alphas } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_sweep_alpha(&run, &alphas)
        }
        Command::Ablate { cfg, which } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_ablate(&run, &which)
        }
        Command::ExportSim {
            cfg,
            checkpoint,
            out,
        } => {
            let run = load_run_config(&cfg, overrides)?;
            cmd_export_sim(&run, checkpoint, out)
        }
    }
}

fn main() -> ExitCode {
    let (argv, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(argv);
    match dispatch(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
