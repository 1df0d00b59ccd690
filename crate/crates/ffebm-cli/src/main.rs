//! `ffebm` command line: training, gradient checking, GDU tracing, the
//! block-splitting benchmark, and evaluation. Every subcommand is a thin
//! composition of library calls; no numerical logic lives here.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ffebm::data::{load_dataset, DatasetSpec, Split};
use ffebm::engines::{
    ep_gradients_explicit, ep_gradients_implicit, finite_difference_gradients, id_gradients,
    EngineKind, EngineSettings,
};
use ffebm::error::Error;
use ffebm::gdu::{cosine_report, emit_report, gdu_traces, render_report, Report, ReportFormat};
use ffebm::model::{
    build_model, forward_inference, load_checkpoint, Mode, Model, ModelConfig,
};
use ffebm::presets::{push_states_interior, seeded_batch};
use ffebm::train::{evaluate, split_bench, train, SplitBenchConfig, TrainRunConfig};

#[derive(Parser)]
#[command(
    name = "ffebm",
    about = "Feedforward-tied energy-based models: block-wise equilibrium inference, \
             BP-EP gradient chaining, and an implicit-differentiation baseline",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    /// Implicit BP-EP gradient chaining
    Ep,
    /// Explicit BP-EP gradient chaining
    EpExplicit,
    /// Implicit differentiation (recurrent backprop)
    Id,
}

impl From<EngineArg> for EngineKind {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Ep => EngineKind::Ep,
            EngineArg::EpExplicit => EngineKind::EpExplicit,
            EngineArg::Id => EngineKind::Id,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run-spec JSON file (model config plus per-command sections)
    #[arg(long)]
    config: PathBuf,
    /// Override the model and run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient engine
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Override the nudging factor
    #[arg(long)]
    beta: Option<f32>,
    /// Override the free-phase iteration count
    #[arg(long)]
    t_free: Option<u32>,
    /// Override the nudged-phase iteration count
    #[arg(long)]
    t_nudge: Option<u32>,
    /// Worker-thread cap (falls back to FFEBM_THREADS, then 1)
    #[arg(long)]
    threads: Option<u32>,
    /// Output path (file or directory depending on the subcommand)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a metrics log plus checkpoints
    Train(CommonArgs),
    /// Compare a gradient engine against the finite-difference oracle
    Gradcheck(CommonArgs),
    /// Emit truncated EP/ID gradient traces
    Gdu(CommonArgs),
    /// Train one model per block split and tabulate final accuracies
    SplitBench(CommonArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(CommonArgs),
}

#[derive(Debug, Deserialize)]
struct GradcheckSpec {
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_fd_eps")]
    fd_eps: f32,
    #[serde(default)]
    data_seed: u64,
    /// Push the energy-block biases toward the interior of the activation
    /// range before checking (keeps finite differences off the kinks).
    #[serde(default)]
    interior_bias_seed: Option<u64>,
}

fn default_batch() -> usize {
    2
}
fn default_fd_eps() -> f32 {
    1e-2
}

#[derive(Debug, Deserialize)]
struct GduSpec {
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default)]
    data_seed: u64,
    #[serde(default)]
    t_block: Option<usize>,
    #[serde(default)]
    interior_bias_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct RunSpec {
    model: ModelConfig,
    #[serde(default)]
    dataset: Option<DatasetSpec>,
    #[serde(default)]
    val_dataset: Option<DatasetSpec>,
    #[serde(default)]
    train: Option<TrainRunConfig>,
    #[serde(default)]
    split_bench: Option<SplitBenchConfig>,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    gradcheck: Option<GradcheckSpec>,
    #[serde(default)]
    gdu: Option<GduSpec>,
}

fn load_spec(path: &Path) -> Result<RunSpec, Error> {
    let text = std::fs::read_to_string(path)?;
    let spec: RunSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("run spec: {e}")))?;
    spec.model.validate()?;
    Ok(spec)
}

fn apply_overrides(spec: &mut RunSpec, args: &CommonArgs) {
    if let Some(seed) = args.seed {
        spec.model.seed = seed;
        if let Some(t) = &mut spec.train {
            t.seed = seed;
        }
    }
    if let Some(beta) = args.beta {
        spec.model.beta = beta;
    }
    if let Some(t) = args.t_free {
        spec.model.t_free = t as usize;
    }
    if let Some(t) = args.t_nudge {
        spec.model.t_nudge = t as usize;
    }
    if let Some(engine) = args.engine {
        if let Some(t) = &mut spec.train {
            t.engine = engine.into();
        }
    }
    let threads = args
        .threads
        .map(|t| t as usize)
        .or_else(|| {
            std::env::var("FFEBM_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    ffebm::threads::set_thread_cap(threads);
}

fn build_configured_model(spec: &RunSpec) -> Result<Model, Error> {
    let (_, mut model) = build_model(&spec.model)?;
    if let Some(path) = &spec.checkpoint {
        let store = load_checkpoint(path)?;
        model.load_parameter_store(&store)?;
    }
    Ok(model)
}

fn val_spec_of(spec: &RunSpec) -> Result<DatasetSpec, Error> {
    if let Some(v) = &spec.val_dataset {
        return Ok(v.clone());
    }
    let mut v = spec
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("run spec needs a dataset".into()))?;
    v.split = Split::Test;
    Ok(v)
}

fn write_or_print(text: &str, out: &Option<PathBuf>) -> Result<(), Error> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(args: &CommonArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.config)?;
    apply_overrides(&mut spec, args);
    let run = {
        let mut run = spec
            .train
            .clone()
            .ok_or_else(|| Error::Config("train needs a \"train\" section".into()))?;
        if let Some(out) = &args.out {
            run.out_dir = Some(out.clone());
        }
        run
    };
    let data_spec = spec
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("train needs a dataset".into()))?;
    let train_data = load_dataset(&data_spec)?;
    let val_data = load_dataset(&val_spec_of(&spec)?)?;
    let mut model = build_configured_model(&spec)?;
    let metrics = train(&mut model, &train_data, &val_data, &run, &data_spec.augment)?;
    let last = metrics.last().expect("at least one epoch");
    println!(
        "{}",
        serde_json::to_string(last).expect("metrics serialize")
    );
    Ok(())
}

fn cmd_gradcheck(args: &CommonArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.config)?;
    apply_overrides(&mut spec, args);
    let gc = spec.gradcheck.as_ref().map_or_else(
        || GradcheckSpec {
            batch: default_batch(),
            fd_eps: default_fd_eps(),
            data_seed: 0,
            interior_bias_seed: None,
        },
        |g| GradcheckSpec {
            batch: g.batch,
            fd_eps: g.fd_eps,
            data_seed: g.data_seed,
            interior_bias_seed: g.interior_bias_seed,
        },
    );
    let mut model = build_configured_model(&spec)?;
    if let Some(seed) = gc.interior_bias_seed {
        push_states_interior(&mut model, seed);
    }
    let (x, y) = seeded_batch(
        &spec.model.input,
        gc.batch,
        spec.model.readout_classes,
        gc.data_seed,
    );
    let record = forward_inference(&model, &x, Mode::Train)?;
    let engine: EngineKind = args.engine.map_or(EngineKind::Ep, Into::into);
    let settings = EngineSettings::from_model(&model, engine);
    let grads = match engine {
        EngineKind::Ep => ep_gradients_implicit(&model, &record, &y, &settings)?.0,
        EngineKind::EpExplicit => ep_gradients_explicit(&model, &record, &y, &settings)?,
        EngineKind::Id => id_gradients(&model, &record, &y, &settings)?,
    };
    let oracle = finite_difference_gradients(&model, &x, &y, gc.fd_eps, None)?;
    let report = cosine_report(&grads, &oracle)?;
    let text = render_report(&Report::Cosine(&report), args.format.into())?;
    write_or_print(&text, &args.out)
}

fn cmd_gdu(args: &CommonArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.config)?;
    apply_overrides(&mut spec, args);
    let gd = spec.gdu.as_ref().map_or(
        GduSpec {
            batch: default_batch(),
            data_seed: 0,
            t_block: None,
            interior_bias_seed: None,
        },
        |g| GduSpec {
            batch: g.batch,
            data_seed: g.data_seed,
            t_block: g.t_block,
            interior_bias_seed: g.interior_bias_seed,
        },
    );
    let mut model = build_configured_model(&spec)?;
    if let Some(seed) = gd.interior_bias_seed {
        push_states_interior(&mut model, seed);
    }
    let (x, y) = seeded_batch(
        &spec.model.input,
        gd.batch,
        spec.model.readout_classes,
        gd.data_seed,
    );
    let t_block = gd.t_block.unwrap_or(spec.model.t_nudge);
    let trace = gdu_traces(&model, &x, &y, spec.model.beta, t_block, None)?;
    match &args.out {
        Some(path) => emit_report(&Report::Trace(&trace), path, args.format.into()),
        None => {
            let text = render_report(&Report::Trace(&trace), args.format.into())?;
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_split_bench(args: &CommonArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.config)?;
    apply_overrides(&mut spec, args);
    let bench = spec
        .split_bench
        .clone()
        .ok_or_else(|| Error::Config("split-bench needs a \"split_bench\" section".into()))?;
    let run = spec
        .train
        .clone()
        .ok_or_else(|| Error::Config("split-bench needs a \"train\" section".into()))?;
    let data_spec = spec
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("split-bench needs a dataset".into()))?;
    let train_data = load_dataset(&data_spec)?;
    let val_data = load_dataset(&val_spec_of(&spec)?)?;
    let table = split_bench(
        &spec.model,
        &bench,
        &train_data,
        &val_data,
        &run,
        &data_spec.augment,
    )?;
    let text = match args.format {
        FormatArg::Csv => table.to_csv(),
        FormatArg::Json => serde_json::to_string_pretty(&table).expect("table serialize"),
    };
    write_or_print(&text, &args.out)
}

fn cmd_eval(args: &CommonArgs) -> Result<(), Error> {
    let mut spec = load_spec(&args.config)?;
    apply_overrides(&mut spec, args);
    let data_spec = spec
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("eval needs a dataset".into()))?;
    let data = load_dataset(&data_spec)?;
    let model = build_configured_model(&spec)?;
    let (top1, top5) = evaluate(&model, &data, 128)?;
    println!("{{\"top1\":{top1},\"top5\":{top5}}}");
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        // clap's help/version "errors" exit 0; real usage errors exit 1
        let code = if e.use_stderr() { 1 } else { 0 };
        let _ = e.print();
        std::process::exit(code);
    });
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Gdu(args) => cmd_gdu(args),
        Command::SplitBench(args) => cmd_split_bench(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
