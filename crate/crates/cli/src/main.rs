use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use p3dc_core::sweep::{self, SweepGrid, SweepResult};
use p3dc_core::synth::{self, Preset};
use p3dc_core::{
    compute_base_prototypes, evaluate, BasePrototypeSet, CalibConfig, Error, EvalParams,
    EvalReport, FeatureStore, PredictMode, PrototypeMode, Split, Transform,
};

#[derive(Parser, Debug)]
#[command(name = "p3dc", version = p3dc_core::episode::BUILD_VERSION)]
#[command(about = "Calibrated few-shot evaluation over extracted feature stores")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a store's manifest and split files.
    Validate {
        #[arg(env = "P3DC_STORE")]
        store: PathBuf,
    },
    /// Write base-class prototypes to a JSON file.
    Prototypes {
        #[arg(env = "P3DC_STORE")]
        store: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Episodic evaluation of one classifier configuration.
    Eval(EvalArgs),
    /// Evaluate every (alpha, beta) on a triangular grid.
    Sweep(SweepArgs),
    /// Generate a synthetic store.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Nn,
    L2n,
    Cl2n,
    Dc,
    P3dc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtoArg {
    Average,
    Attentive,
}

impl From<ProtoArg> for PrototypeMode {
    fn from(p: ProtoArg) -> Self {
        match p {
            ProtoArg::Average => PrototypeMode::Average,
            ProtoArg::Attentive => PrototypeMode::Attentive,
        }
    }
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CalibArgs {
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Clamp negative entries to zero before the power transform.
    #[arg(long)]
    clamp_negative: bool,
    #[arg(long = "proto", value_enum, default_value_t = ProtoArg::Average)]
    proto: ProtoArg,
    /// Attention logits use the normalized query.
    #[arg(long)]
    normalized_query_attention: bool,
}

impl CalibArgs {
    fn config(&self) -> CalibConfig {
        CalibConfig {
            lambda: self.lambda,
            m: self.m,
            clamp_negative: self.clamp_negative,
            ..CalibConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(env = "P3DC_STORE")]
    store: PathBuf,
    #[arg(long, default_value = "novel")]
    split: Split,
    #[arg(long, value_enum, default_value_t = ModeArg::P3dc)]
    mode: ModeArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long, default_value_t = 2000)]
    tasks: usize,
    /// Base prototypes from `p3dc prototypes` instead of the base split.
    #[arg(long)]
    prototypes: Option<PathBuf>,
    /// Write the report as JSON (`-` for stdout).
    #[arg(long)]
    json: Option<PathBuf>,
    /// Leave wall-clock timings out of the JSON report.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(env = "P3DC_STORE")]
    store: PathBuf,
    #[arg(long, default_value = "validation")]
    split: Split,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[command(flatten)]
    calib: CalibArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long, default_value_t = 500)]
    tasks: usize,
    #[arg(long)]
    prototypes: Option<PathBuf>,
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "boundary-bias")]
    preset: Preset,
    #[arg(short, long)]
    output: PathBuf,
    /// Dataset name in the manifest (defaults to the directory name).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    base_classes: Option<usize>,
    #[arg(long)]
    validation_classes: Option<usize>,
    #[arg(long)]
    novel_classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    stddev: Option<f64>,
    /// Base centroids mixed into each validation or novel centroid.
    #[arg(long)]
    mix_k: Option<usize>,
    #[arg(long)]
    boundary_bias: Option<f64>,
    #[arg(long)]
    shell_fraction: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    /// Keep signed features instead of folding them to absolute values.
    #[arg(long)]
    signed: bool,
}

/// Failure of one subcommand, with the usage of the offending subcommand
/// when the flags themselves were wrong.
struct Failure {
    error: Error,
    usage: Option<&'static str>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { error, usage: None }
    }
}

fn usage_error(sub: &'static str, error: Error) -> Failure {
    Failure {
        error,
        usage: Some(sub),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 1 {
                let text = e.render().to_string();
                eprint!(
                    "error_code: usage: {}",
                    text.strip_prefix("error: ").unwrap_or(&text)
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { error, usage }) => {
            eprintln!("error_code: {}: {error}", error.root().code());
            if let Some(sub) = usage {
                let mut cli = Cli::command();
                cli.build();
                if let Some(cmd) = cli.find_subcommand_mut(sub) {
                    eprintln!("{}", cmd.render_usage());
                }
            }
            ExitCode::from(if error.root().is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    match cli.command {
        Command::Validate { store } => validate(&store),
        Command::Prototypes { store, output } => prototypes(&store, &output),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => sweep_cmd(args),
        Command::Synth(args) => synth_cmd(args),
    }
}

fn validate(root: &Path) -> Result<(), Failure> {
    let store = FeatureStore::open(root)?;
    let m = store.manifest();
    println!(
        "store      {} ({}, dim {})",
        root.display(),
        m.dataset,
        m.dim
    );
    for split in store.splits() {
        let ds = store.load(split)?;
        let nonneg = if ds.first_negative().is_none() {
            "nonneg"
        } else {
            "signed"
        };
        println!(
            "{:<10} {:>7} records {:>5} classes  {nonneg}",
            split.as_str(),
            ds.len(),
            ds.num_classes()
        );
    }
    if !store.splits().contains(&Split::Base) {
        log::warn!("store has no base split; calibration needs external prototypes");
    }
    println!("ok");
    Ok(())
}

fn load_prototypes(store: &FeatureStore, file: Option<&Path>) -> Result<BasePrototypeSet, Error> {
    let protos = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            BasePrototypeSet::from_json(&text)?
        }
        None => compute_base_prototypes(&store.load(Split::Base)?)?,
    };
    if protos.dim() != store.manifest().dim {
        return Err(Error::Schema(format!(
            "prototype dim {} does not match store dim {}",
            protos.dim(),
            store.manifest().dim
        )));
    }
    Ok(protos)
}

fn prototypes(root: &Path, output: &Path) -> Result<(), Failure> {
    let store = FeatureStore::open(root)?;
    let protos = load_prototypes(&store, None)?;
    write_output(output, &protos.to_json())?;
    println!(
        "wrote {} prototypes (dim {}) to {}",
        protos.len(),
        protos.dim(),
        output.display()
    );
    Ok(())
}

fn write_output(path: &Path, text: &str) -> Result<(), Error> {
    if path == Path::new("-") {
        let mut out = std::io::stdout().lock();
        return out.write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        });
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn episode_params(e: &EpisodeArgs, tasks: usize) -> Result<EvalParams, Error> {
    if e.way == 0 || e.shot == 0 || tasks == 0 {
        return Err(Error::InvalidConfig(
            "--way, --shot and --tasks must be positive".into(),
        ));
    }
    Ok(EvalParams {
        way: e.way,
        shot: e.shot,
        queries: e.queries,
        tasks,
        seed: e.seed,
    })
}

fn predict_mode(args: &EvalArgs) -> Result<PredictMode, Error> {
    if args.mode != ModeArg::P3dc && (args.alpha.is_some() || args.beta.is_some()) {
        return Err(Error::InvalidConfig(
            "--alpha and --beta only apply to --mode p3dc".into(),
        ));
    }
    let cfg = args.calib.config();
    let transform = match args.mode {
        ModeArg::Nn => Transform::RawNn,
        ModeArg::L2n => Transform::L2n,
        ModeArg::Cl2n => Transform::Cl2n,
        ModeArg::Dc => Transform::DcStyle(cfg),
        ModeArg::P3dc => {
            Transform::P3dc(cfg.with_weights(args.alpha.unwrap_or(0.0), args.beta.unwrap_or(0.0)))
        }
    };
    let mode = PredictMode {
        normalized_query_attention: args.calib.normalized_query_attention,
        ..PredictMode::new(transform, args.calib.proto.into())
    };
    mode.validate()?;
    Ok(mode)
}

fn describe(mode: &PredictMode) -> String {
    let mut s = mode.transform.name().to_string();
    if let Transform::P3dc(c) = &mode.transform {
        s += &format!(" alpha {:.2} beta {:.2}", c.alpha, c.beta);
    }
    if let Some(c) = mode.transform.calib_config() {
        s += &format!(" lambda {} M {}", c.lambda, c.m);
    }
    s + &format!(", {} prototypes", mode.prototype)
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mode = predict_mode(&args).map_err(|e| usage_error("eval", e))?;
    let params = episode_params(&args.episodes, args.tasks).map_err(|e| usage_error("eval", e))?;

    let store = FeatureStore::open(&args.store)?;
    let protos = load_prototypes(&store, args.prototypes.as_deref())?;
    let split = store.load(args.split)?;
    let report = evaluate(&split, &protos, &mode, &params)?;

    let to_stdout = args.json.as_deref() == Some(Path::new("-"));
    if !to_stdout {
        print_report(&report);
    }
    if let Some(path) = &args.json {
        let report = if args.no_timing {
            report.without_timing()
        } else {
            report
        };
        write_output(path, &report.to_json())?;
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let p = &r.params;
    println!("mode      {}", describe(&r.mode));
    println!("split     {}", r.split);
    println!(
        "tasks     {} x {}-way {}-shot, {} queries per class, seed {}",
        p.tasks, p.way, p.shot, p.queries, p.seed
    );
    println!(
        "accuracy  {:.2}% ± {:.2}",
        100.0 * r.mean,
        100.0 * r.ci95_halfwidth
    );
    if let Some(t) = &r.timing {
        println!("calibrate {:.5} s/task", t.calib_seconds_per_task);
        println!("classify  {:.5} s/task", t.classify_seconds_per_task);
    }
    if r.clamped_entries > 0 {
        println!("clamped   {} negative entries", r.clamped_entries);
    }
}

fn sweep_cmd(args: SweepArgs) -> Result<(), Failure> {
    let grid = SweepGrid::new(args.step).map_err(|e| usage_error("sweep", e))?;
    let cfg = args.calib.config();
    cfg.validate().map_err(|e| usage_error("sweep", e))?;
    let params = episode_params(&args.episodes, args.tasks).map_err(|e| usage_error("sweep", e))?;
    if args.calib.normalized_query_attention {
        return Err(usage_error(
            "sweep",
            Error::InvalidConfig("--normalized-query-attention is not supported by sweep".into()),
        ));
    }

    let store = FeatureStore::open(&args.store)?;
    let protos = load_prototypes(&store, args.prototypes.as_deref())?;
    let split = store.load(args.split)?;
    let result = sweep::grid_sweep(
        &split,
        &protos,
        &grid,
        &cfg,
        args.calib.proto.into(),
        &params,
    )?;

    if let Some(path) = &args.heatmap {
        sweep::emit_heatmap_csv(&result, path)?;
    }
    let to_stdout = args.json.as_deref() == Some(Path::new("-"));
    if !to_stdout {
        print_sweep(&result);
    }
    if let Some(path) = &args.json {
        write_output(path, &result.to_json())?;
    }
    Ok(())
}

/// Accuracy triangle: rows are alpha, columns beta.
fn print_sweep(r: &SweepResult) {
    let levels = (1.0 / r.step).round() as usize;
    let at = |i: usize| i as f64 / levels as f64;
    print!("alpha\\beta");
    for j in 0..=levels {
        print!(" {:>6.2}", at(j));
    }
    println!();
    for i in 0..=levels {
        print!("{:>10.2}", at(i));
        for j in 0..=levels - i {
            match r.entry(at(i), at(j)) {
                Some(e) => print!(" {:>6.2}", 100.0 * e.accuracy),
                None => print!(" {:>6}", "-"),
            }
        }
        println!();
    }
    let best = r.best_entry();
    println!(
        "best      alpha {:.2} beta {:.2}: {:.2}% ± {:.2} on {} ({} tasks)",
        best.alpha,
        best.beta,
        100.0 * best.accuracy,
        100.0 * best.ci95,
        r.split,
        r.params.tasks
    );
}

fn synth_cmd(args: SynthArgs) -> Result<(), Failure> {
    let mut cfg = args.preset.config();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    set!(
        seed => seed,
        dim => dim,
        base_classes => num_base_classes,
        validation_classes => num_validation_classes,
        novel_classes => num_novel_classes,
        samples_per_class => samples_per_class,
        stddev => intra_class_stddev,
        mix_k => novel_mix_k,
        boundary_bias => boundary_bias,
        shell_fraction => shell_fraction,
        radius => radius
    );
    if args.signed {
        cfg.nonneg = false;
    }
    cfg.validate().map_err(|e| usage_error("synth", e))?;

    let out = synth::generate(&cfg)?;
    let name = args.name.unwrap_or_else(|| {
        args.output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "synthetic".into())
    });
    out.write(&args.output, &name)?;
    println!(
        "wrote {} to {}: base {} / validation {} / novel {} records, dim {}",
        name,
        args.output.display(),
        out.base.len(),
        out.validation.len(),
        out.novel.len(),
        cfg.dim
    );
    Ok(())
}
