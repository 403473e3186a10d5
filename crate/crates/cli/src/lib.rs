//! The `slimdet` command line: analyze, insert-spp, prune, verify,
//! sparsity-train, infer and eval.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input,
//! 3 failed verification or invariant.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use slimdet::cfg::NetworkDef;
use slimdet::eval::{self, Bbox, EvalConfig, EvalError, GroundTruth, ScoredBox};
use slimdet::graph::{count_flops, CostReport};
use slimdet::inference::{self, run_network, Detection, InferenceError, RunOptions, Tensor};
use slimdet::prune::{iterative_prune, PruneConfig, PruneError};
use slimdet::sparsity::{gamma_histogram, loss_curve_csv, SparsityConfig, SparsityError, ToyNet, ToyProblem, Trainer};
use slimdet::spp::{count_spp_blocks, insert_spp, SppOptions};
use slimdet::{emit_cfg, parse_cfg, read_weights, validate, write_weights, Shape, WeightStore};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::Argument(_) => CliError::Usage(e.to_string()),
            PruneError::Structure { .. } => CliError::Input(format!("network cannot be pruned: {e}")),
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<SparsityError> for CliError {
    fn from(e: SparsityError) -> Self {
        match e {
            SparsityError::Argument(_) => CliError::Usage(e.to_string()),
            SparsityError::Unsupported { .. } => CliError::Input(e.to_string()),
            SparsityError::Divergence { .. } => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Argument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "slimdet", version, about = "Channel pruning toolkit for Darknet YOLOv3-family detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer output shapes, parameters and FLOPs.
    Analyze(AnalyzeArgs),
    /// Add an SPP block in front of every detection head lacking one.
    InsertSpp(InsertSppArgs),
    /// Prune channels by batch-norm scaling factor.
    Prune(PruneArgs),
    /// Compare the outputs of two models on seeded random inputs.
    Verify(VerifyArgs),
    /// Train a toy network with an L1 penalty on its scaling factors.
    SparsityTrain(TrainArgs),
    /// Run a forward pass on a raw float32 tensor.
    Infer(InferArgs),
    /// Score detections against VisDrone annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    cfg: PathBuf,
    /// Square input side in pixels; defaults to the cfg's size.
    #[arg(long = "input", value_name = "PX")]
    input: Option<usize>,
    #[arg(long)]
    csv: bool,
    #[arg(short = 'o', value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InsertSppArgs {
    cfg: PathBuf,
    /// Same insertion depth for every head instead of the default schedule.
    #[arg(long)]
    depth: Option<usize>,
    /// Emit the 1x1 branch as an explicit size-1 maxpool.
    #[arg(long)]
    literal_pool: bool,
    #[arg(long = "input", value_name = "PX")]
    input: Option<usize>,
    /// Write `<stem>-spp.cfg` here; prints the cfg otherwise.
    #[arg(short = 'o', value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PruneArgs {
    cfg: PathBuf,
    weights: PathBuf,
    /// Share of scaling factors under the global threshold.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// Per-layer percentile capping the threshold.
    #[arg(long, default_value_t = 0.9)]
    local_percentile: f64,
    #[arg(long, default_value_t = 1)]
    iterations: usize,
    #[arg(long = "input", value_name = "PX")]
    input: Option<usize>,
    #[arg(long)]
    csv: bool,
    #[arg(short = 'o', value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    a_cfg: PathBuf,
    a_weights: PathBuf,
    b_cfg: PathBuf,
    b_weights: PathBuf,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "input", value_name = "PX")]
    input: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Write a checkpoint and histogram every this many epochs (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 0.01)]
    probe: f64,
    /// Start from this stack of stride-1 convolutions instead of the
    /// built-in toy network.
    #[arg(long, requires = "weights")]
    cfg: Option<PathBuf>,
    #[arg(long, requires = "cfg")]
    weights: Option<PathBuf>,
    #[arg(long)]
    csv: bool,
    #[arg(short = 'o', value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    cfg: PathBuf,
    weights: PathBuf,
    /// Little-endian float32 tensor, channel-major.
    blob: PathBuf,
    /// `c h w` sidecar; defaults to the blob path with `.shape` appended.
    #[arg(long)]
    shape: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    conf: f32,
    #[arg(long, default_value_t = 0.5)]
    nms: f64,
    #[arg(short = 'o', value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Lines of `image_id class_id score x y w h`.
    detections: PathBuf,
    /// Annotation files or directories of `<image_id>.txt` files.
    #[arg(required = true)]
    annotations: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    conf: f64,
    #[arg(long, default_value_t = 0.5)]
    nms: f64,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    csv: bool,
    #[arg(short = 'o', value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit code. Normal output goes to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::InsertSpp(a) => insert_spp_cmd(a),
        Command::Prune(a) => prune(a),
        Command::Verify(a) => verify(a),
        Command::SparsityTrain(a) => sparsity_train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(text) => {
            let _ = write!(stdout, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_cfg(path: &Path) -> Result<NetworkDef> {
    let def = parse_cfg(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let diags = validate(&def);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(CliError::Input(format!("{}: {}", path.display(), lines.join("; "))));
    }
    Ok(def)
}

fn load_weights(path: &Path, def: &NetworkDef) -> Result<WeightStore> {
    read_weights(&read_bytes(path)?, def).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn side(input: Option<usize>) -> Result<Option<(usize, usize)>> {
    match input {
        Some(0) => Err(CliError::Usage("--input must be positive".into())),
        Some(px) => Ok(Some((px, px))),
        None => Ok(None),
    }
}

fn costs(def: &NetworkDef, input: Option<(usize, usize)>) -> Result<CostReport> {
    count_flops(def, input).map_err(|e| CliError::Usage(format!("network does not fit the requested input: {e}")))
}

fn analyze(a: AnalyzeArgs) -> Result<String> {
    let def = load_cfg(&a.cfg)?;
    let report = costs(&def, side(a.input)?)?;
    let text = if a.csv { report.to_csv() } else { report.to_table() };
    if let Some(dir) = &a.out {
        let ext = if a.csv { "csv" } else { "txt" };
        write_file(dir, &format!("{}-cost.{ext}", stem(&a.cfg)), text.as_bytes())?;
    }
    Ok(text)
}

fn insert_spp_cmd(a: InsertSppArgs) -> Result<String> {
    let def = load_cfg(&a.cfg)?;
    let opts = SppOptions {
        literal_unit_pool: a.literal_pool,
        ..a.depth.map_or_else(SppOptions::default, SppOptions::uniform)
    };
    let out = insert_spp(&def, &opts).map_err(|e| CliError::Input(e.to_string()))?;
    let text = emit_cfg(&out);
    let Some(dir) = &a.out else {
        return Ok(text);
    };
    let path = write_file(dir, &format!("{}-spp.cfg", stem(&a.cfg)), text.as_bytes())?;
    let hw = side(a.input)?;
    let (before, after) = (costs(&def, hw)?, costs(&out, hw)?);
    Ok(format!(
        "wrote {}\nSPP blocks {} -> {}\nparams {} -> {}\nBFLOPS at {}x{}: {:.3} -> {:.3}\n",
        path.display(),
        count_spp_blocks(&def),
        count_spp_blocks(&out),
        before.total_params,
        after.total_params,
        after.input_hw.0,
        after.input_hw.1,
        before.bflops(),
        after.bflops()
    ))
}

fn prune(a: PruneArgs) -> Result<String> {
    let def = load_cfg(&a.cfg)?;
    let store = load_weights(&a.weights, &def)?;
    let config = PruneConfig {
        global_ratio: a.ratio,
        local_percentile: a.local_percentile,
        iterations: a.iterations,
    };
    config.check()?;
    let hw = side(a.input)?;
    let mut eval_def = def.clone();
    if let Some((h, w)) = hw {
        costs(&def, hw)?;
        eval_def.net.height = h;
        eval_def.net.width = w;
    }
    // no training data here, so rounds run back to back
    let outcome = iterative_prune(&eval_def, &store, &config, |_, _, _| {});
    if let Some(e) = outcome.error {
        return Err(e.into());
    }
    let mut pruned = outcome.def;
    pruned.net.height = def.net.height;
    pruned.net.width = def.net.width;
    let name = stem(&a.cfg);
    let bytes = write_weights(&outcome.store, &pruned).map_err(|e| CliError::Invariant(e.to_string()))?;
    let cfg_path = write_file(&a.out, &format!("{name}-pruned.cfg"), emit_cfg(&pruned).as_bytes())?;
    let weights_path = write_file(&a.out, &format!("{name}-pruned.weights"), &bytes)?;
    let mut text = String::new();
    for (i, r) in outcome.rounds.iter().enumerate() {
        if outcome.rounds.len() > 1 && !a.csv {
            text.push_str(&format!("round {}\n", i + 1));
        }
        text.push_str(&if a.csv { r.to_csv() } else { r.to_table() });
    }
    let ext = if a.csv { "csv" } else { "txt" };
    write_file(&a.out, &format!("{name}-prune-report.{ext}"), text.as_bytes())?;
    if !a.csv {
        text.push_str(&format!("wrote {}\nwrote {}\n", cfg_path.display(), weights_path.display()));
    }
    Ok(text)
}

/// Outputs worth comparing: every yolo layer's input map, or the last
/// layer when there are no heads.
fn compared_layers(def: &NetworkDef) -> Vec<usize> {
    let heads = def.yolo_layers();
    if heads.is_empty() {
        vec![def.layers.len() - 1]
    } else {
        heads
    }
}

fn with_input(def: &NetworkDef, hw: Option<(usize, usize)>) -> NetworkDef {
    let mut d = def.clone();
    if let Some((h, w)) = hw {
        d.net.height = h;
        d.net.width = w;
    }
    d
}

fn run_layers(def: &NetworkDef, store: &WeightStore, x: &Tensor, keep: &[usize]) -> Result<Vec<Tensor>> {
    let opts = RunOptions {
        keep_all: true,
        ..RunOptions::default()
    };
    let out = run_network(def, store, x, &opts).map_err(|e| CliError::Invariant(e.to_string()))?;
    Ok(keep
        .iter()
        .map(|&i| out.layers[i].clone().expect("kept"))
        .collect())
}

fn verify(a: VerifyArgs) -> Result<String> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let hw = side(a.input)?;
    let da = with_input(&load_cfg(&a.a_cfg)?, hw);
    let db = with_input(&load_cfg(&a.b_cfg)?, hw);
    let sa = load_weights(&a.a_weights, &da)?;
    let sb = load_weights(&a.b_weights, &db)?;
    costs(&da, None)?;
    costs(&db, None)?;
    let (la, lb) = (compared_layers(&da), compared_layers(&db));
    if la != lb || da.net.channels != db.net.channels || (da.net.height, da.net.width) != (db.net.height, db.net.width) {
        return Err(CliError::Invariant("the two models do not have comparable outputs".into()));
    }
    let shape = Shape::new(da.net.channels, da.net.height, da.net.width);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut text = String::new();
    let mut worst = 0.0f32;
    for t in 0..a.trials {
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).expect("sized");
        let ya = run_layers(&da, &sa, &x, &la)?;
        let yb = run_layers(&db, &sb, &x, &lb)?;
        let mut dev = 0.0f32;
        for (p, q) in ya.iter().zip(&yb) {
            let d = p
                .max_abs_diff(q)
                .ok_or_else(|| CliError::Invariant(format!("output shapes differ: {} vs {}", p.shape, q.shape)))?;
            dev = dev.max(d);
        }
        worst = worst.max(dev);
        text.push_str(&format!("trial {}: max deviation {dev:e}\n", t + 1));
    }
    text.push_str(&format!("max deviation {worst:e} (tolerance {:e})\n", a.tol));
    if !(worst <= a.tol) {
        return Err(CliError::Invariant(format!("{text}verification failed")));
    }
    Ok(text)
}

fn sparsity_train(a: TrainArgs) -> Result<String> {
    let config = SparsityConfig {
        alpha: a.alpha,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        seed: a.seed,
        task_weight: 1.0,
    };
    config.check()?;
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be positive".into()));
    }
    let problem = match (&a.cfg, &a.weights) {
        (Some(c), Some(w)) => {
            let def = load_cfg(c)?;
            let store = load_weights(w, &def)?;
            ToyProblem::for_net(ToyNet::from_network(&def, &store)?, a.seed)
        }
        _ => ToyProblem::new(a.seed),
    };
    let (def, _) = problem.net.to_network();
    write_file(&a.out, "toy.cfg", emit_cfg(&def).as_bytes())?;
    let mut trainer = Trainer::new(problem.net, config)?;
    let mut saved: Vec<(String, f64)> = Vec::new();
    let mut failure: Option<CliError> = None;
    let out = a.out.clone();
    let (bins, probe) = (a.bins, a.probe);
    let save = |label: String, net: &ToyNet| -> Result<f64> {
        let (def, store) = net.to_network();
        let bytes = write_weights(&store, &def).map_err(|e| CliError::Invariant(e.to_string()))?;
        write_file(&out, &format!("{label}.weights"), &bytes)?;
        let hist = gamma_histogram(&store, bins, probe, None)?;
        write_file(&out, &format!("histogram-{label}.csv"), hist.to_csv().as_bytes())?;
        Ok(hist.fraction_below)
    };
    trainer.run(&problem.batch, a.checkpoint_every, |step, net| {
        if failure.is_none() {
            match save(format!("checkpoint-{step:06}"), net) {
                Ok(f) => saved.push((format!("checkpoint-{step:06}"), f)),
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_fraction = save("final".into(), &trainer.net)?;
    saved.push(("final".into(), final_fraction));
    let curve = loss_curve_csv(&trainer.history);
    write_file(&a.out, "loss.csv", curve.as_bytes())?;
    if a.csv {
        return Ok(curve);
    }
    let mut text = String::new();
    if let (Some(first), Some(last)) = (trainer.history.first(), trainer.history.last()) {
        text.push_str(&format!(
            "loss {:.6} -> {:.6} (task {:.6}, penalty {:.6}) over {} epochs\n",
            first.loss.total,
            last.loss.total,
            last.loss.task,
            last.loss.penalty,
            trainer.history.len()
        ));
    }
    for (label, f) in saved {
        text.push_str(&format!("{label}: {:.1}% of |gamma| below {}\n", 100.0 * f, a.probe));
    }
    text.push_str(&format!("wrote {}\n", a.out.display()));
    Ok(text)
}

fn infer(a: InferArgs) -> Result<String> {
    let sidecar_path = a.shape.clone().unwrap_or_else(|| {
        let mut p = a.blob.clone().into_os_string();
        p.push(".shape");
        PathBuf::from(p)
    });
    let x = inference::read_tensor_blob(&read_text(&sidecar_path)?, &read_bytes(&a.blob)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.blob.display())))?;
    let def = with_input(&load_cfg(&a.cfg)?, Some((x.shape.h, x.shape.w)));
    if x.shape.c != def.net.channels {
        return Err(CliError::Input(format!(
            "tensor has {} channels, network expects {}",
            x.shape.c, def.net.channels
        )));
    }
    costs(&def, None)?;
    let store = load_weights(&a.weights, &def)?;
    let opts = RunOptions {
        objectness_threshold: a.conf,
        keep_all: false,
    };
    let out = run_network(&def, &store, &x, &opts).map_err(|e| match e {
        InferenceError::Shape { .. } => CliError::Input(e.to_string()),
        _ => CliError::Invariant(e.to_string()),
    })?;
    if def.yolo_layers().is_empty() {
        let last = out.last().expect("network has layers");
        let (sidecar, blob) = inference::write_tensor_blob(last);
        if let Some(dir) = &a.out {
            write_file(dir, "output.bin", &blob)?;
            write_file(dir, "output.bin.shape", sidecar.as_bytes())?;
        }
        return Ok(format!("output {}\n", last.shape));
    }
    let boxes: Vec<ScoredBox> = out
        .detections
        .iter()
        .map(|d| ScoredBox {
            image: String::new(),
            class_id: d.class_id,
            score: d.score as f64,
            bbox: Bbox::from_center(d.x as f64, d.y as f64, d.w as f64, d.h as f64),
        })
        .collect();
    let kept: Vec<Detection> = eval::nms_indices(&boxes, a.nms)
        .into_iter()
        .map(|i| out.detections[i].clone())
        .collect();
    let text = inference::format_detections(&kept);
    if let Some(dir) = &a.out {
        write_file(dir, "detections.txt", text.as_bytes())?;
    }
    Ok(text)
}

fn load_annotations(paths: &[PathBuf]) -> Result<Vec<GroundTruth>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "txt"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut gts = Vec::new();
    for f in files {
        let parsed = eval::parse_visdrone(&read_text(&f)?, &stem(&f))
            .map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        gts.extend(parsed);
    }
    Ok(gts)
}

fn eval_cmd(a: EvalArgs) -> Result<String> {
    let dets = eval::parse_detections(&read_text(&a.detections)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.detections.display())))?;
    let gts = load_annotations(&a.annotations)?;
    let config = EvalConfig {
        conf_threshold: a.conf,
        nms_threshold: a.nms,
        iou_threshold: a.iou,
    };
    let summary = eval::evaluate(&dets, &gts, &config)?;
    let text = if a.csv { summary.to_csv() } else { summary.to_table() };
    if let Some(dir) = &a.out {
        let ext = if a.csv { "csv" } else { "txt" };
        write_file(dir, &format!("eval.{ext}"), text.as_bytes())?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run(args.iter().copied(), &mut Vec::new(), &mut Vec::new())
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(PruneError::Argument("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(SparsityError::Argument("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(SparsityError::Divergence { step: 1, loss: f64::NAN }).exit_code(), 3);
        assert_eq!(CliError::from(EvalError::NoGroundTruth).exit_code(), 2);
    }

    #[test]
    fn help_and_version_succeed() {
        assert_eq!(code(&["slimdet", "--help"]), 0);
        assert_eq!(code(&["slimdet", "--version"]), 0);
        assert_eq!(code(&["slimdet", "prune"]), 1);
        assert_eq!(code(&["slimdet", "analyze", "x.cfg", "--input", "0"]), 2);
    }
}
