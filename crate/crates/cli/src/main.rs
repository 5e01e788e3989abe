use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use vfa_core::cost::{model_cost, Convention};
use vfa_core::eval::{run_benchmark, write_scores, PlccMode};
use vfa_core::io::{load_checkpoint, read_frames, save_checkpoint, write_frames};
use vfa_core::lmm::{parse_logits, softmax_score, LEVELS};
use vfa_core::model::{FluNet, ModelConfig};
use vfa_core::synth::{emit_commands, synthesize_ranked_set, unique_frames, SynthSpec};
use vfa_core::toy::{procedural_anchor, procedural_anchors, procedural_labeled, AnchorStyle};
use vfa_core::train::{eval_rank_accuracy, finetune, train_joint, train_rank, Stage, TrainConfig, TrainState};
use vfa_core::Tensor;

#[derive(Parser)]
#[command(name = "vfa", version, about = "Video fluency assessment toolkit")]
struct Cli {
    /// Seed for every random choice; recorded in all outputs.
    #[arg(long, global = true, env = "VFA_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a ranked stutter chain from one anchor.
    Synth(SynthArgs),
    /// Score frame directories with a checkpoint.
    Score(ScoreArgs),
    /// Train rank learning, fine-tuning, or the joint objective.
    Train(TrainArgs),
    /// Correlate prediction files with MOS.
    Eval(EvalArgs),
    /// Turn level-token logits into a 1-5 score.
    LmmScore(LmmArgs),
    /// Report GFLOPs and parameters for model configurations.
    Cost(CostArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Anchor frame directory; a procedural anchor is generated when absent.
    #[arg(long)]
    anchor: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 56)]
    height: usize,
    #[arg(long, default_value_t = 56)]
    width: usize,
    /// Strictly increasing drop rates, one per level.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    rates: Vec<f64>,
    /// Number of dropped spans per level.
    #[arg(long, visible_alias = "m", default_value_t = 5)]
    intervals: usize,
    /// Source name used in the emitted ffmpeg commands.
    #[arg(long, default_value = "input.mp4")]
    input_name: String,
    /// Output directory for frames, schedules and commands.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint; a freshly initialized toy model is used when absent.
    #[arg(long, visible_alias = "ckpt")]
    checkpoint: Option<PathBuf>,
    /// Model config JSON, checked against the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional `video_id,score` CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frame directories; the directory name is the video id.
    #[arg(required_unless_present = "video")]
    videos: Vec<PathBuf>,
    /// Frame directory, as an alternative to the positional list.
    #[arg(long)]
    video: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Rank,
    Finetune,
    Joint,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Rank => Stage::Rank,
            StageArg::Finetune => Stage::Finetune,
            StageArg::Joint => Stage::Joint,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Training config JSON; the toy preset for the stage when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model config JSON; the toy model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Anchor frame directories (rank stage).
    #[arg(long, num_args = 1..)]
    anchors: Vec<PathBuf>,
    /// `video_id,score` CSV whose ids are frame directories next to it
    /// (fine-tune and joint stages).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Procedural training videos generated when no data is given.
    #[arg(long, default_value_t = 64)]
    procedural: usize,
    /// Procedural held-out anchors for rank accuracy.
    #[arg(long, default_value_t = 16)]
    held_out: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited JSON training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlccArg {
    Raw,
    Logistic,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction CSVs (`video_id,score`), one per method.
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    /// MOS CSV, per video or per annotator.
    #[arg(long)]
    mos: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    plcc: PlccArg,
    /// JSON report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LmmArgs {
    /// Five comma-separated logits, bad to excellent.
    #[arg(long, allow_hyphen_values = true)]
    logits: Vec<String>,
    /// CSV with a header and rows of five logits, optionally led by an id
    /// column.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Copy of the CSV with a score column appended.
    #[arg(long, requires = "csv")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// JSON model config or array of configs; the full-size model when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Windows as `D,S`; each config is reported once per window.
    #[arg(long = "window")]
    windows: Vec<String>,
    /// Override the frame count of every config.
    #[arg(long)]
    frames: Option<usize>,
    /// Count one FLOP per multiply-accumulate instead of two.
    #[arg(long)]
    macs_only: bool,
    /// JSON report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation or configuration; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<vfa_core::Error>() {
        Some(vfa_core::Error::Config(_)) | Some(vfa_core::Error::Argument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Score(a) => score(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::LmmScore(a) => lmm_score(a, seed),
        Command::Cost(a) => cost(a, seed),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("{} is not a directory", p.display())));
    }
    Ok(())
}

fn video_id(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    if let Some(dir) = &a.anchor {
        require_dir(dir)?;
    }
    let anchor = match &a.anchor {
        Some(dir) => read_frames(dir)?,
        None => procedural_anchor(a.frames, a.height, a.width, &AnchorStyle::default(), seed)?,
    };
    let spec = SynthSpec {
        frames: anchor.shape()[0],
        drop_rates: a.rates.clone(),
        intervals: a.intervals,
        seed,
    };
    spec.validate()?;
    let set = synthesize_ranked_set(&anchor, &spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut levels = Vec::new();
    for (k, v) in set.videos.iter().enumerate() {
        let name = format!("level_{k}");
        write_frames(&a.out.join(&name), v)?;
        levels.push(json!({
            "level": k,
            "dir": name,
            "drop_rate": if k == 0 { 0.0 } else { set.schedules[k - 1].drop_rate },
            "dropped": if k == 0 { 0 } else { set.schedules[k - 1].dropped() },
            "unique_frames": unique_frames(v)?,
        }));
    }
    write_json(&a.out.join("schedules.json"), &set.schedules)?;
    let stem = Path::new(&a.input_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    let commands = emit_commands(&set.schedules, &a.input_name, &stem);
    fs::write(a.out.join("commands.sh"), commands.join("\n") + "\n")
        .with_context(|| format!("writing commands to {}", a.out.display()))?;
    print_json(&json!({
        "seed": seed,
        "frames": spec.frames,
        "intervals": spec.intervals,
        "drop_rates": spec.drop_rates,
        "levels": levels,
        "schedules": set.schedules,
        "commands": commands,
    }))
}

fn load_model(ckpt: Option<&Path>, seed: u64) -> Result<(FluNet, vfa_core::params::ParamSet)> {
    match ckpt {
        Some(p) => {
            let (cfg, params) = load_checkpoint(p)?;
            Ok((FluNet::new(cfg)?, params))
        }
        None => {
            let net = FluNet::new(ModelConfig::toy())?;
            let params = net.init_params(seed)?;
            Ok((net, params))
        }
    }
}

fn score(a: ScoreArgs, seed: u64) -> Result<()> {
    let dirs: Vec<PathBuf> = a.videos.iter().chain(&a.video).cloned().collect();
    for v in &dirs {
        require_dir(v)?;
    }
    let expected = match &a.config {
        Some(p) => Some(read_json::<ModelConfig>(p)?),
        None => None,
    };
    let (net, params) = match (a.checkpoint.as_deref(), expected) {
        (None, Some(cfg)) => {
            let net = FluNet::new(cfg)?;
            let params = net.init_params(seed)?;
            (net, params)
        }
        (ckpt, expected) => {
            let (net, params) = load_model(ckpt, seed)?;
            if expected.is_some_and(|c| &c != net.config()) {
                return Err(usage("--config disagrees with the checkpoint"));
            }
            (net, params)
        }
    };
    let videos = dirs
        .iter()
        .map(|d| read_frames(d).map_err(anyhow::Error::from))
        .collect::<Result<Vec<Tensor>>>()?;
    let scores = net.score_batch(&params, &videos)?;
    let rows: Vec<(String, f64)> = dirs.iter().map(|p| video_id(p)).zip(scores).collect();
    if let Some(out) = &a.out {
        write_scores(out, &rows)?;
    }
    print_json(&json!({
        "seed": seed,
        "scores": rows.iter().map(|(id, s)| json!({"video_id": id, "score": s})).collect::<Vec<_>>(),
    }))
}

fn read_labeled(csv_path: &Path) -> Result<Vec<(Tensor, f64)>> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    vfa_core::eval::read_scores(csv_path)?
        .into_iter()
        .map(|(id, y)| Ok((read_frames(&base.join(&id))?, y)))
        .collect()
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let stage: Stage = a.stage.into();
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None if stage == Stage::Finetune => TrainConfig::toy_finetune(),
        None => TrainConfig::toy_rank(),
    };
    cfg.stage = stage;
    cfg.seed = seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let model_cfg = match &a.model {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::toy(),
    };
    for d in &a.anchors {
        require_dir(d)?;
    }
    if let Some(l) = &a.labels {
        if !l.is_file() {
            return Err(usage(format!("{} is not a file", l.display())));
        }
    }
    if stage == Stage::Rank && a.labels.is_some() {
        return Err(usage("--labels applies to the finetune and joint stages"));
    }
    if stage != Stage::Rank && !a.anchors.is_empty() {
        return Err(usage("--anchors applies to the rank stage"));
    }

    let (net, params) = match &a.init {
        Some(p) => {
            let (c, params) = load_checkpoint(p)?;
            if a.model.is_some() && c != model_cfg {
                return Err(usage("--model disagrees with the --init checkpoint"));
            }
            (FluNet::new(c)?, params)
        }
        None => {
            let net = FluNet::new(model_cfg)?;
            let params = net.init_params(seed)?;
            (net, params)
        }
    };
    let mc = net.config().clone();
    let state = TrainState::new(params, &cfg);
    let state = match stage {
        Stage::Rank => {
            let anchors = if a.anchors.is_empty() {
                procedural_anchors(a.procedural, mc.frames, mc.height, mc.width, &AnchorStyle::default(), seed)?
            } else {
                a.anchors
                    .iter()
                    .map(|d| read_frames(d).map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?
            };
            train_rank(&net, &anchors, &cfg, state)?
        }
        Stage::Finetune | Stage::Joint => {
            let labeled = match &a.labels {
                Some(p) => read_labeled(p)?,
                None => procedural_labeled(a.procedural, mc.frames, mc.height, mc.width, 0.9, seed)?,
            };
            if stage == Stage::Finetune {
                finetune(&net, &labeled, &cfg, state)?
            } else {
                train_joint(&net, &labeled, &cfg, state)?
            }
        }
    };
    save_checkpoint(&a.out, &mc, &state.params)?;
    if let Some(log) = &a.log {
        let f = fs::File::create(log).with_context(|| format!("creating {}", log.display()))?;
        state.write_log(std::io::BufWriter::new(f))?;
    }
    let accuracy = if a.held_out > 0 && stage != Stage::Finetune {
        let held = procedural_anchors(
            a.held_out,
            mc.frames,
            mc.height,
            mc.width,
            &AnchorStyle::default(),
            seed.wrapping_add(1 << 40),
        )?;
        let spec = SynthSpec {
            frames: mc.frames,
            drop_rates: cfg.drop_rates.clone(),
            intervals: cfg.intervals,
            seed: seed.wrapping_add(1 << 41),
        };
        Some(eval_rank_accuracy(&net, &state.params, &held, &spec)?)
    } else {
        None
    };
    let last = state.history.last();
    print_json(&json!({
        "seed": seed,
        "stage": stage,
        "epochs": cfg.epochs,
        "steps": state.history.len(),
        "final_loss": last.map(|e| e.loss),
        "held_out_rank_accuracy": accuracy,
        "checkpoint": a.out.display().to_string(),
        "config": cfg,
    }))
}

fn eval(a: EvalArgs, seed: u64) -> Result<()> {
    for p in a.preds.iter().chain([&a.mos]) {
        if !p.is_file() {
            return Err(usage(format!("{} is not a file", p.display())));
        }
    }
    let mode = match a.plcc {
        PlccArg::Raw => PlccMode::Raw,
        PlccArg::Logistic => PlccMode::Logistic,
    };
    let report = run_benchmark(&a.preds, &a.mos, mode)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        let mut v = serde_json::to_value(&report)?;
        v["seed"] = json!(seed);
        write_json(out, &v)?;
    }
    Ok(())
}

fn lmm_score(a: LmmArgs, seed: u64) -> Result<()> {
    let mut rows: Vec<(String, [f64; 5])> = Vec::new();
    for (i, l) in a.logits.iter().enumerate() {
        rows.push((format!("{i}"), parse_logits(l)?));
    }
    if let Some(path) = &a.csv {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut header = rdr.headers()?.clone();
        let mut writer = match &a.out {
            Some(out) => {
                let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
                header.push_field("score");
                w.write_record(&header)?;
                Some(w)
            }
            None => None,
        };
        for (i, rec) in rdr.records().enumerate() {
            let mut rec = rec?;
            let (id, fields) = match rec.len() {
                5 => (format!("{}", i), rec.iter().collect::<Vec<_>>()),
                6 => (rec[0].to_string(), rec.iter().skip(1).collect()),
                n => bail!("{}: expected 5 logits with an optional id, got {n} fields", path.display()),
            };
            let logits = parse_logits(&fields.join(","))?;
            if let Some(w) = writer.as_mut() {
                rec.push_field(&softmax_score(&logits)?.to_string());
                w.write_record(&rec)?;
            }
            rows.push((id, logits));
        }
        if let Some(mut w) = writer {
            w.flush()?;
        }
    }
    if rows.is_empty() {
        return Err(usage("give --logits or --csv"));
    }
    let scores = rows
        .iter()
        .map(|(id, l)| Ok(json!({"id": id, "logits": l, "score": softmax_score(l)?})))
        .collect::<Result<Vec<Value>>>()?;
    print_json(&json!({"seed": seed, "levels": LEVELS, "scores": scores}))
}

fn parse_window(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || usage(format!("window must be D,S with positive integers, got {text:?}"));
    match parts[..] {
        [d, s] => Ok((d.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct CostRow {
    frames: usize,
    window: [usize; 3],
    gamma: usize,
    gflops: f64,
    params: u64,
    bias_table_params: u64,
    total_params: u64,
    macs: u64,
}

fn cost(a: CostArgs, seed: u64) -> Result<()> {
    let configs: Vec<ModelConfig> = match &a.config {
        Some(p) => {
            let v: Value = read_json(p)?;
            let list = if v.is_array() { v } else { Value::Array(vec![v]) };
            serde_json::from_value(list).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => vec![ModelConfig::full()],
    };
    if configs.is_empty() {
        return Err(usage("no model configurations given"));
    }
    let windows = a
        .windows
        .iter()
        .map(|w| parse_window(w))
        .collect::<Result<Vec<_>>>()?;
    let mut expanded = Vec::new();
    for c in configs {
        let mut c = c;
        if let Some(f) = a.frames {
            c.frames = f;
        }
        if windows.is_empty() {
            expanded.push(c);
        } else {
            for &(d, s) in &windows {
                expanded.push(ModelConfig {
                    window_t: d,
                    window_s: s,
                    ..c.clone()
                });
            }
        }
    }
    let conv = if a.macs_only {
        Convention::macs_only()
    } else {
        Convention::default()
    };
    let mut rows = Vec::new();
    for c in &expanded {
        c.validate().map_err(|e| usage(format!("invalid model config: {e}")))?;
        let mc = model_cost(c)?;
        rows.push(CostRow {
            frames: c.frames,
            window: [c.window_t, c.window_s, c.window_s],
            gamma: c.gamma,
            gflops: mc.total.gflops(&conv),
            params: mc.total.weight_params(),
            bias_table_params: mc.total.bias_table_params,
            total_params: mc.total.params,
            macs: mc.total.macs,
        });
    }
    println!(
        "{:>6}  {:>12}  {:>5}  {:>10}  {:>10}  {:>10}",
        "frames", "window", "gamma", "GFLOPs", "params(M)", "bias(K)"
    );
    for r in &rows {
        println!(
            "{:>6}  {:>12}  {:>5}  {:>10.1}  {:>10.2}  {:>10.1}",
            r.frames,
            format!("({},{},{})", r.window[0], r.window[1], r.window[2]),
            r.gamma,
            r.gflops,
            r.params as f64 / 1e6,
            r.bias_table_params as f64 / 1e3
        );
    }
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({
                "seed": seed,
                "convention": conv,
                "rows": rows,
            }),
        )?;
    }
    Ok(())
}
