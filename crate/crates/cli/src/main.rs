mod manifest;

use artigauss::fusion::{fuse_states, FusionConfig, MatchCost};
use artigauss::gaussian::SceneState;
use artigauss::io::{read_ply, write_ply, write_points_ply, PlyEncoding};
use artigauss::metrics::{evaluate, EvalReport};
use artigauss::pipeline::{ablate, ablation_delta_csv, run_pipeline, Ablation};
use artigauss::render::{render_orthographic, View, ViewAxis};
use artigauss::synth::{make_object, presets, GroundTruth, ObjectSpec};
use artigauss::trainer::{fit, TrainConfig, TrainedModel};
use clap::{Args, Parser, Subcommand};
use manifest::{hash_outputs, sha256_file, RunManifest, FORMAT_VERSION, MANIFEST_FILE};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_ENV: &str = "ARTIGAUSS_SEED";
const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (ply format 1, checkpoint format 1)");

#[derive(Parser, Debug)]
#[command(name = "artigauss", version = VERSION, about = "Part-aware articulated object reconstruction from two Gaussian-field states")]
struct Cli {
    /// Cap on worker threads (1 gives fully sequential execution).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-state object: state0.ply, state1.ply, gt.json.
    Synth(SynthArgs),
    /// Match and blend two states into canonical.ply and fusion.json.
    Fuse(FuseArgs),
    /// Fit part assignments and per-part transforms; writes model.json and train_log.jsonl.
    ///
    /// Training is geometry supervised: the photometric term is not optimized
    /// and lambda_render only weights the render loss reported by `eval`.
    /// A short multi-start search on a subset picks the initialization;
    /// set explore.starts to 1 in the config to skip it.
    Train(TrainArgs),
    /// Score a trained model against ground truth; writes eval.json and eval.csv.
    Eval(EvalArgs),
    /// Orthographic rendering of a PLY field to PNG.
    Render(RenderArgs),
    /// synth, train and eval in one invocation.
    Pipeline(PipelineArgs),
    /// Pipeline with each component toggled off; writes ablation.csv of metric deltas.
    Ablate(AblateArgs),
    /// Re-run a recorded command and compare output hashes with its manifest.
    Replay(ReplayArgs),
    /// Print a preset object as JSON.
    Spec {
        #[arg(long, default_value = "door")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default training configuration as JSON.
    Config,
}

#[derive(Args, Debug, Clone)]
struct ObjectArgs {
    /// ObjectSpec JSON file.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in object: door, drawer, flush_drawer or table5.
    #[arg(long, alias = "object")]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    object: ObjectArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Center noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ascii: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    state0: PathBuf,
    #[arg(long)]
    state1: PathBuf,
    /// Use squared distances as the assignment cost.
    #[arg(long)]
    squared_cost: bool,
    /// Blend with β = 0.5 instead of the motion-aware weight.
    #[arg(long)]
    fixed_beta: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// TrainConfig JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Upper bound on the number of parts.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    state0: PathBuf,
    #[arg(long)]
    state1: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    state0: PathBuf,
    #[arg(long)]
    state1: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    ply: PathBuf,
    /// Viewing direction: +x, -x, +y, -y, +z or -z.
    #[arg(long, default_value = "-y")]
    view: String,
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Half width of the square window; defaults to fit the field.
    #[arg(long)]
    half: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    object: ObjectArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    object: ObjectArgs,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Where to write the replayed outputs; defaults to a fresh temporary directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Input(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<artigauss::Error> for CliError {
    fn from(e: artigauss::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_ply(path: &Path) -> CliResult<SceneState> {
    read_ply(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Flag, then environment, then whatever the file said.
fn resolve_seed(flag: Option<u64>, current: u64) -> CliResult<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(current))
}

fn load_object(args: &ObjectArgs, seed: Option<u64>) -> CliResult<ObjectSpec> {
    let mut spec = match (&args.spec, &args.preset) {
        (Some(path), _) => read_json::<ObjectSpec>(path)?,
        (None, Some(name)) => presets::by_name(name, 0).ok_or_else(|| {
            CliError::Usage(format!("unknown preset `{name}`; expected one of {}", presets::NAMES.join(", ")))
        })?,
        (None, None) => return Err(CliError::Usage("give --spec FILE or --preset NAME".into())),
    };
    spec.seed = resolve_seed(seed, spec.seed)?;
    spec.validate()?;
    Ok(spec)
}

fn load_train_config(o: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = resolve_seed(o.seed, cfg.seed)?;
    if let Some(s) = o.steps {
        cfg.steps = s;
    }
    if let Some(k) = o.k {
        cfg.k_parts = k;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

struct RunRecord<'a> {
    args: &'a [String],
    threads: Option<usize>,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<&'a Path>,
}

fn finish(out: &Path, rec: RunRecord<'_>) -> CliResult<()> {
    let mut inputs = BTreeMap::new();
    for p in rec.inputs {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        tool: "artigauss".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        format_version: FORMAT_VERSION,
        args: rec.args.to_vec(),
        seed: rec.seed,
        threads: rec.threads,
        config: rec.config,
        inputs,
        outputs: hash_outputs(out)?,
    };
    manifest.write(out)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn write_synth(out: &Path, spec: &ObjectSpec, ascii: bool) -> CliResult<artigauss::synth::SynthObject> {
    let obj = make_object(spec)?;
    for w in &obj.warnings {
        eprintln!("warning: {w}");
    }
    let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
    write_ply(&out.join("state0.ply"), &obj.state0, None, enc)?;
    write_ply(&out.join("state1.ply"), &obj.state1, None, enc)?;
    write_json(&out.join("gt.json"), &obj.gt)?;
    Ok(obj)
}

fn write_model(out: &Path, model: &TrainedModel) -> CliResult<()> {
    write_json(&out.join("model.json"), model)?;
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    for rec in &model.loss_history {
        let line = serde_json::to_string(rec).map_err(|e| CliError::Input(e.to_string()))?;
        writeln!(log, "{line}")?;
    }
    write_ply(&out.join("canonical.ply"), &model.canonical, Some(&model.labels), PlyEncoding::BinaryLittleEndian)?;
    if !model.repel.is_empty() {
        write_points_ply(&out.join("repel.ply"), &model.repel.points)?;
    }
    Ok(())
}

fn write_eval(out: &Path, report: &EvalReport, label: &str) -> CliResult<()> {
    write_json(&out.join("eval.json"), report)?;
    fs::write(out.join("eval.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row(label)))?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    for j in &report.joints {
        println!(
            "part {} ({}): ang_err {:.4} deg, pos_err {}, motion_err {:.5}",
            j.part,
            j.name,
            j.errors.ang_err,
            j.errors.pos_err.map_or("-".into(), |p| format!("{p:.5}")),
            j.errors.motion_err
        );
    }
    println!(
        "part_accuracy {:.4}, cd_static {:.4}, cd_movable {:.4}, cd_whole {:.4}, penetration {:.3e}",
        report.part_accuracy, report.cd_static, report.cd_movable, report.cd_whole, report.penetration
    );
}

fn run(cli: Cli, args: &[String]) -> CliResult<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Synth(a) => {
            let mut spec = load_object(&a.object, a.seed)?;
            if let Some(n) = a.noise {
                spec.noise_sigma = n;
            }
            spec.validate()?;
            prepare_out(&a.out)?;
            let obj = write_synth(&a.out, &spec, a.ascii)?;
            println!("wrote {} gaussians per state to {}", obj.state0.len(), a.out.display());
            let inputs: Vec<&Path> = a.object.spec.as_deref().into_iter().collect();
            finish(&a.out, RunRecord { args, threads, seed: Some(spec.seed), config: to_value(&spec), inputs })
        }
        Command::Fuse(a) => {
            let s0 = load_ply(&a.state0)?;
            let s1 = load_ply(&a.state1)?;
            let mut cfg = FusionConfig::default();
            if a.squared_cost {
                cfg.matching.cost = MatchCost::SquaredDistance;
            }
            cfg.adaptive_beta = !a.fixed_beta;
            let report = fuse_states(&s0, &s1, &cfg)?;
            prepare_out(&a.out)?;
            write_ply(&a.out.join("canonical.ply"), &report.canonical, None, PlyEncoding::BinaryLittleEndian)?;
            write_json(&a.out.join("fusion.json"), &report)?;
            println!("beta {:.4}, matched {} of {}/{}", report.beta, report.matched, report.count0, report.count1);
            let inputs = vec![a.state0.as_path(), a.state1.as_path()];
            finish(&a.out, RunRecord { args, threads, seed: None, config: to_value(&cfg), inputs })
        }
        Command::Train(a) => {
            let cfg = load_train_config(&a.train)?;
            let s0 = load_ply(&a.state0)?;
            let s1 = load_ply(&a.state1)?;
            let model = fit(&s0, &s1, &cfg)?;
            prepare_out(&a.out)?;
            write_model(&a.out, &model)?;
            println!("final loss {:.6e} after {} steps", model.final_loss.total, cfg.steps);
            let mut inputs = vec![a.state0.as_path(), a.state1.as_path()];
            inputs.extend(a.train.config.as_deref());
            finish(&a.out, RunRecord { args, threads, seed: Some(cfg.seed), config: to_value(&cfg), inputs })
        }
        Command::Eval(a) => {
            let model: TrainedModel = read_json(&a.model)?;
            let gt: GroundTruth = read_json(&a.gt)?;
            let s0 = load_ply(&a.state0)?;
            let s1 = load_ply(&a.state1)?;
            let report = evaluate(&model, &s0, &s1, &gt).map_err(|e| match e {
                artigauss::Error::NonFinite { .. } => CliError::from(e),
                other => CliError::Input(other.to_string()),
            })?;
            prepare_out(&a.out)?;
            write_eval(&a.out, &report, "eval")?;
            print_summary(&report);
            let inputs = vec![a.model.as_path(), a.state0.as_path(), a.state1.as_path(), a.gt.as_path()];
            finish(&a.out, RunRecord { args, threads, seed: None, config: serde_json::Value::Null, inputs })
        }
        Command::Render(a) => {
            let axis = ViewAxis::parse(&a.view).ok_or_else(|| CliError::Usage(format!("unknown view `{}`", a.view)))?;
            if a.size == 0 {
                return Err(CliError::Usage("--size must be positive".into()));
            }
            let state = load_ply(&a.ply)?;
            if state.is_empty() {
                return Err(CliError::Input(format!("{} holds no gaussians", a.ply.display())));
            }
            let centers = state.centers();
            let lo = centers.iter().fold(centers[0], |m, c| m.inf(c));
            let hi = centers.iter().fold(centers[0], |m, c| m.sup(c));
            let half = a.half.unwrap_or(0.55 * (hi - lo).max() + 1e-6);
            let view = View::centered(axis, &((lo + hi) / 2.0), half);
            let img = render_orthographic(&state.gaussians, &view, a.size, a.size)?;
            img.save_png(&a.out)?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Pipeline(a) => {
            let spec = load_object(&a.object, a.train.seed)?;
            let cfg = load_train_config(&a.train)?;
            prepare_out(&a.out)?;
            let run = run_pipeline(&spec, &cfg)?;
            write_ply(&a.out.join("state0.ply"), &run.object.state0, None, PlyEncoding::BinaryLittleEndian)?;
            write_ply(&a.out.join("state1.ply"), &run.object.state1, None, PlyEncoding::BinaryLittleEndian)?;
            write_json(&a.out.join("gt.json"), &run.object.gt)?;
            write_model(&a.out, &run.model)?;
            write_eval(&a.out, &run.report, "pipeline")?;
            print_summary(&run.report);
            let mut inputs: Vec<&Path> = a.object.spec.as_deref().into_iter().collect();
            inputs.extend(a.train.config.as_deref());
            let config = serde_json::json!({ "object": to_value(&spec), "train": to_value(&cfg) });
            finish(&a.out, RunRecord { args, threads, seed: Some(cfg.seed), config, inputs })
        }
        Command::Ablate(a) => {
            let spec = load_object(&a.object, a.train.seed)?;
            let cfg = load_train_config(&a.train)?;
            prepare_out(&a.out)?;
            let rows = ablate(&spec, &cfg, &Ablation::TOGGLES)?;
            let csv = ablation_delta_csv(&rows);
            fs::write(a.out.join("ablation.csv"), &csv)?;
            write_json(&a.out.join("ablation.json"), &rows)?;
            print!("{csv}");
            let mut inputs: Vec<&Path> = a.object.spec.as_deref().into_iter().collect();
            inputs.extend(a.train.config.as_deref());
            let config = serde_json::json!({ "object": to_value(&spec), "train": to_value(&cfg) });
            finish(&a.out, RunRecord { args, threads, seed: Some(cfg.seed), config, inputs })
        }
        Command::Replay(a) => replay(&a),
        Command::Spec { preset, seed } => {
            let spec = presets::by_name(&preset, seed).ok_or_else(|| CliError::Usage(format!("unknown preset `{preset}`")))?;
            println!("{}", serde_json::to_string_pretty(&spec).map_err(|e| CliError::Input(e.to_string()))?);
            Ok(())
        }
        Command::Config => {
            let text = serde_json::to_string_pretty(&TrainConfig::default()).map_err(|e| CliError::Input(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::read(&a.manifest).map_err(|e| CliError::Input(format!("{}: {e}", a.manifest.display())))?;
    for (path, hash) in &manifest.inputs {
        let now = sha256_file(Path::new(path))?;
        if &now != hash {
            return Err(CliError::Input(format!("input {path} changed since the recorded run")));
        }
    }
    let tmp;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut args = manifest.args.clone();
    let pos = args
        .iter()
        .position(|s| s == "--out")
        .filter(|&i| i + 1 < args.len())
        .ok_or_else(|| CliError::Input("recorded command has no --out".into()))?;
    args[pos + 1] = out.display().to_string();
    if args.iter().any(|s| s == "replay") {
        return Err(CliError::Input("a replay manifest cannot be replayed".into()));
    }
    let argv: Vec<String> = std::iter::once("artigauss".to_string()).chain(args.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Input(format!("recorded arguments: {e}")))?;
    let seed_env = std::env::var(SEED_ENV).ok();
    if seed_env.is_some() && manifest.seed.is_some() && seed_env.as_deref() != manifest.seed.map(|s| s.to_string()).as_deref() {
        eprintln!("warning: {SEED_ENV} is set; the recorded seed comes from the stored configuration");
    }
    run(cli, &args)?;
    let fresh = hash_outputs(&out)?;
    let mut mismatched = Vec::new();
    for (name, hash) in &manifest.outputs {
        match fresh.get(name) {
            Some(h) if h == hash => {}
            _ => mismatched.push(name.clone()),
        }
    }
    if mismatched.is_empty() {
        println!("replay reproduced {} outputs", manifest.outputs.len());
        Ok(())
    } else {
        Err(CliError::Input(format!("outputs differ from {}: {}", MANIFEST_FILE, mismatched.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("usage error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
