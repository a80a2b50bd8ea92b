use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use higarment::config::ENV_PREFIX;
use higarment::eval;
use higarment::fabric::{FabricDb, FabricMention, RetrievalPath};
use higarment::gradsuite::{self, Suite};
use higarment::manifest::{RunManifest, MANIFEST_NAME};
use higarment::model::FabricTrace;
use higarment::sample::{attention_heatmap, ddim_sample};
use higarment::synth::{self, foreground_from_sketch, parse_caption, Dataset};
use higarment::{checkpoint, train, Error, Image, Model, RunConfig};

const CHECKPOINT_FILE: &str = "model.hgck";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "higarment", version, about = "Sketch + prompt + fabric conditioned garment diffusion at desk scale")]
struct Cli {
    /// Flat `key=value` config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (`key=value`); applied after the file and
    /// `HIGARMENT_<KEY>` environment variables. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate a procedural dataset with its manifest.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        conflict_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one image with deterministic DDIM.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Fix α instead of computing it from the similarity score.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one dataset input over a grid of α values.
    SweepAlpha {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding the input.
        #[arg(long)]
        input: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `start:end:step`, inclusive.
        #[arg(long, default_value = "0.6:1.0:0.1")]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build, list or query the fabric database.
    FabricDb(FabricDbArgs),
    /// Finite-difference gradient checks; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: shift every analytic gradient entry.
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Proxy metrics of generated images against a dataset's targets.
    Eval {
        #[arg(long)]
        generated_dir: PathBuf,
        #[arg(long)]
        reference_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun a command from its run manifest and compare output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct FabricDbArgs {
    /// Key embeddings from this checkpoint (default: freshly initialized encoder).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(subcommand)]
    action: DbAction,
}

#[derive(Subcommand, Debug, Clone)]
enum DbAction {
    /// Write the grammar database (records plus swatch images).
    Build {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print entries and aliases.
    List {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace extraction, normalization and retrieval for a prompt.
    Query {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code: 1 usage, 2 validation, 3 numeric.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    fn validation(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::numeric(e.to_string()),
            _ => Failure::validation(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::validation(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    match resolve_config(&cli).and_then(|cfg| run(&cli.command, cfg, args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Defaults, then the config file (or the checkpoint's saved config for
/// commands that load one), then environment, then `--set`.
fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let base = match (&cli.config, checkpoint_of(&cli.command)) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(ckpt)) => Some(sibling_config(ckpt)),
        (None, None) => None,
    };
    let mut cfg = match base {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    for key in cfg.apply_env()? {
        log::info!("config key {key} overridden from {ENV_PREFIX}{}", key.to_uppercase());
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_of(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Sample { ckpt, .. } | Command::SweepAlpha { ckpt, .. } => Some(ckpt),
        Command::FabricDb(a) => a.ckpt.as_deref(),
        _ => None,
    }
}

fn sibling_config(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cmd: &Command, cfg: RunConfig, args: Vec<String>) -> CliResult<()> {
    match cmd {
        Command::GenData {
            n,
            seed,
            conflict_fraction,
            out,
        } => gen_data(&cfg, args, *n as usize, *seed, *conflict_fraction, out),
        Command::Train { data, out } => train_cmd(cfg, args, data, out),
        Command::Sample {
            ckpt,
            sketch,
            prompt,
            alpha,
            seed,
            out,
        } => sample_cmd(cfg, args, ckpt, sketch, prompt, *alpha, *seed, out),
        Command::SweepAlpha {
            ckpt,
            input,
            index,
            grid,
            seed,
            out,
        } => sweep_cmd(cfg, args, ckpt, input, *index, grid, *seed, out),
        Command::FabricDb(a) => fabric_db_cmd(cfg, args, a),
        Command::Gradcheck { module, out, corrupt } => gradcheck_cmd(&cfg, args, module, out.as_deref(), *corrupt),
        Command::Eval {
            generated_dir,
            reference_manifest,
            out,
        } => eval_cmd(&cfg, args, generated_dir, reference_manifest, out),
        Command::Replay { manifest, out } => replay_cmd(manifest, out),
    }
}

fn manifest(cmd: &str, args: Vec<String>, seed: u64, cfg: &RunConfig) -> RunManifest {
    RunManifest::new(cmd, args, seed, cfg.to_text())
}

fn finish(mut m: RunManifest, dir: &Path, started: Instant) -> CliResult<()> {
    m.metrics
        .insert("wall_seconds".into(), serde_json::json!(started.elapsed().as_secs_f64()));
    m.save(dir)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, args: Vec<String>, n: usize, seed: u64, cf: f64, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    if !(0.0..=1.0).contains(&cf) {
        return Err(Failure::usage(format!("--conflict-fraction {cf} outside [0, 1]")));
    }
    let data = synth::gen_dataset(n, seed, cf, cfg.image_size)?;
    data.save(out)?;
    let mut m = manifest("gen-data", args, seed, cfg);
    m.add_output(out, synth::MANIFEST_FILE)?;
    for r in &data.records {
        m.add_output(out, &r.sketch)?;
        m.add_output(out, &r.target)?;
    }
    let conflicts = data.records.iter().filter(|r| r.spec.is_conflict()).count();
    m.metrics.insert("samples".into(), n.into());
    m.metrics.insert("conflicts".into(), conflicts.into());
    m.metrics.insert("manifest_sha256".into(), data.manifest_hash().into());
    println!("wrote {n} samples ({conflicts} conflicted) to {}", out.display());
    println!("manifest sha256 {}", data.manifest_hash());
    finish(m, out, started)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    samples: usize,
    probe_initial: f64,
    probe_final: f64,
    probe_ratio: f64,
}

fn train_cmd(cfg: RunConfig, args: Vec<String>, data_dir: &Path, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let data = Dataset::load(data_dir)?;
    let size = data.samples[0].target.width;
    if size != cfg.image_size {
        return Err(Failure::validation(format!(
            "dataset images are {size}x{size} but image_size={}",
            cfg.image_size
        )));
    }
    let mut model = Model::new(&cfg)?;
    let db = model.fabric_db()?;
    let items = train::prepare(&model, &data, &db)?;
    let every = (cfg.steps / 20).max(1);
    let (trainer, report) = train::train(&mut model, &items, |i, l| {
        if i % every == 0 || i + 1 == cfg.steps {
            log::info!("step {i} loss {l:.6}");
        }
    })?;
    create_dir(out)?;
    checkpoint::save(&model.store, &out.join(CHECKPOINT_FILE))?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    write(&out.join("loss.csv"), trainer.loss_csv())?;
    let summary = TrainSummary {
        steps: report.steps,
        samples: items.len(),
        probe_initial: report.probe_initial,
        probe_final: report.probe_final,
        probe_ratio: report.probe_final / report.probe_initial,
    };
    write(&out.join("report.json"), to_json(&summary))?;

    let mut m = manifest("train", args, cfg.seed, &cfg);
    m.add_input(data_dir)?;
    if !cfg.db.is_empty() {
        m.add_input(Path::new(&cfg.db))?;
    }
    for name in [CHECKPOINT_FILE, CONFIG_FILE, "report.json"] {
        m.add_output(out, name)?;
    }
    m.volatile.push("loss.csv".into());
    m.metrics.insert("probe_initial".into(), report.probe_initial.into());
    m.metrics.insert("probe_final".into(), report.probe_final.into());
    m.metrics.insert("train_seconds".into(), report.seconds.into());
    println!(
        "trained {} steps on {} samples: probe loss {:.6} -> {:.6} ({:.2}% of initial) in {:.1}s",
        report.steps,
        items.len(),
        report.probe_initial,
        report.probe_final,
        100.0 * summary.probe_ratio,
        report.seconds
    );
    finish(m, out, started)
}

#[derive(Serialize)]
struct AttentionFile {
    layer: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct Diagnostics {
    prompt: String,
    seed: u64,
    variant: String,
    s: f64,
    alpha: f64,
    alpha_source: &'static str,
    z_norm: Option<f64>,
    context_tokens: usize,
    denoiser_evaluations: usize,
    fabric: FabricTrace,
    attention: Vec<AttentionFile>,
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> CliResult<Model> {
    if !ckpt.exists() {
        return Err(Failure::validation(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(Model::load(cfg, ckpt)?)
}

fn check_sketch(sketch: &Image, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    if sketch.channels != 1 || sketch.width != cfg.image_size || sketch.height != cfg.image_size {
        return Err(Failure::validation(format!(
            "{}: need a {s}x{s} grayscale sketch, got {}x{}x{}",
            path.display(),
            sketch.width,
            sketch.height,
            sketch.channels,
            s = cfg.image_size
        )));
    }
    Ok(())
}

fn attention_name(layer: &str) -> String {
    format!("attn_{}.pgm", layer.replace('.', "_"))
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    cfg: RunConfig,
    args: Vec<String>,
    ckpt: &Path,
    sketch_path: &Path,
    prompt: &str,
    alpha: Option<f64>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let started = Instant::now();
    let model = load_model(&cfg, ckpt)?;
    let sketch = Image::load(sketch_path)?;
    check_sketch(&sketch, &cfg, sketch_path)?;
    let db = model.fabric_db()?;
    let req = model.request(&sketch, prompt, &db)?;
    let mut hca = cfg.hca();
    if alpha.is_some() {
        hca.alpha_override = alpha;
    }
    let res = ddim_sample(&model, &req, &hca, seed)?;
    create_dir(out)?;
    res.image.save(&out.join("image.ppm"))?;

    let mut files = Vec::new();
    for (layer, w) in res.bundle.attention.iter().chain(&res.denoiser_attention) {
        let file = attention_name(layer);
        attention_heatmap(w)?.save(&out.join(&file))?;
        files.push(AttentionFile {
            layer: layer.clone(),
            file,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let diag = Diagnostics {
        prompt: prompt.to_string(),
        seed,
        variant: cfg.variant.to_string(),
        s: res.bundle.s,
        alpha: res.bundle.alpha,
        alpha_source: if hca.alpha_override.is_some() { "override" } else { "similarity" },
        z_norm: res.bundle.z.as_ref().map(|z| z.norm()),
        context_tokens: res.bundle.context.rows(),
        denoiser_evaluations: res.evaluations,
        fabric: FabricTrace::of(req.fabric.as_ref()),
        attention: files,
    };
    write(&out.join("diagnostics.json"), to_json(&diag))?;

    let mut m = manifest("sample", args, seed, &cfg);
    m.add_input(ckpt)?;
    m.add_input(sketch_path)?;
    m.add_output(out, "image.ppm")?;
    m.add_output(out, "diagnostics.json")?;
    for f in &diag.attention {
        m.add_output(out, &f.file)?;
    }
    m.metrics.insert("alpha".into(), diag.alpha.into());
    m.metrics.insert("s".into(), diag.s.into());
    m.metrics.insert("denoiser_evaluations".into(), diag.denoiser_evaluations.into());
    println!(
        "s={:.6} alpha={:.6} ({}) evaluations={} -> {}",
        diag.s,
        diag.alpha,
        diag.alpha_source,
        diag.denoiser_evaluations,
        out.join("image.ppm").display()
    );
    finish(m, out, started)
}

/// `start:end:step`, inclusive of `end` up to rounding.
fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Failure::usage(format!("--grid expects start:end:step, got {spec:?}")))?;
    let (start, end, step) = match nums[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(Failure::usage(format!("--grid expects start:end:step, got {spec:?}"))),
    };
    if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
        return Err(Failure::validation(format!("grid {spec:?} is empty")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| start + k as f64 * step).map(|a| (a * 1e9).round() / 1e9).collect())
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    cfg: RunConfig,
    args: Vec<String>,
    ckpt: &Path,
    input: &Path,
    index: usize,
    grid: &str,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let started = Instant::now();
    let grid = parse_grid(grid)?;
    let model = load_model(&cfg, ckpt)?;
    let data = Dataset::load(input)?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| Failure::validation(format!("index {index} out of range (dataset has {})", data.len())))?;
    check_sketch(&sample.sketch, &cfg, input)?;
    let text = parse_caption(&sample.caption)?;
    let mask = foreground_from_sketch(&sample.sketch);
    let db = model.fabric_db()?;
    let swatch = db.entry(text.fabric.name()).map(|e| e.image.clone());
    let req = model.request(&sample.sketch, &sample.caption, &db)?;
    create_dir(out)?;

    let mut m = manifest("sweep-alpha", args, seed, &cfg);
    m.add_input(ckpt)?;
    m.add_input(&input.join(synth::MANIFEST_FILE))?;
    let mut csv = String::from("alpha,s,z_norm,color_err,silhouette_iou,texture_chi2,image\n");
    for &a in &grid {
        let mut hca = cfg.hca();
        hca.alpha_override = Some(a);
        let res = ddim_sample(&model, &req, &hca, seed)?;
        let file = format!("alpha_{a:.3}.ppm");
        res.image.save(&out.join(&file))?;
        m.add_output(out, &file)?;
        let z_norm = res.bundle.z.as_ref().map_or(0.0, |z| z.norm());
        let color = eval::color_err(&res.image, text.color.rgb(), &mask)?;
        let iou = eval::silhouette_iou(&res.image, &sample.sketch)?;
        let chi2 = match &swatch {
            Some(sw) => eval::texture_chi2(&res.image, Some(&mask.eroded()), sw, None)?,
            None => f64::NAN,
        };
        csv.push_str(&format!(
            "{a},{},{z_norm},{color},{iou},{chi2},{file}\n",
            res.bundle.s
        ));
    }
    write(&out.join("sweep.csv"), &csv)?;
    m.add_output(out, "sweep.csv")?;
    print!("{csv}");
    finish(m, out, started)
}

fn db_model(cfg: &RunConfig, ckpt: Option<&Path>) -> CliResult<Model> {
    match ckpt {
        Some(p) => load_model(cfg, p),
        None => Ok(Model::new(cfg)?),
    }
}

fn open_db(model: &Model, path: Option<&Path>) -> CliResult<FabricDb> {
    match path {
        Some(p) => Ok(FabricDb::load(p, &|w| model.term_embedding(w))?),
        None => Ok(model.fabric_db()?),
    }
}

fn fabric_db_cmd(cfg: RunConfig, args: Vec<String>, a: &FabricDbArgs) -> CliResult<()> {
    let started = Instant::now();
    let model = db_model(&cfg, a.ckpt.as_deref())?;
    let (text, out, db_path) = match &a.action {
        DbAction::Build { out } => {
            let db = model.grammar_db()?;
            let path = out.join("db.jsonl");
            db.save(&path)?;
            let text = format!("wrote {} entries to {}\n", db.len(), path.display());
            let mut m = manifest("fabric-db", args, cfg.seed, &cfg);
            m.add_output(out, "db.jsonl")?;
            for e in &db.entries {
                m.add_output(out, &e.image_path)?;
            }
            print!("{text}");
            return finish(m, out, started);
        }
        DbAction::List { db, out } => {
            let d = open_db(&model, db.as_deref())?;
            let mut text = String::new();
            for e in &d.entries {
                text.push_str(&format!("{}\t{}\t{}\n", e.canonical, e.aliases.join(","), e.image_path));
            }
            (text, out, db)
        }
        DbAction::Query { prompt, db, out } => {
            let d = open_db(&model, db.as_deref())?;
            (query_trace(&model, &d, prompt)?, out, db)
        }
    };
    print!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("trace.txt"), &text)?;
        let mut m = manifest("fabric-db", args, cfg.seed, &cfg);
        if let Some(p) = db_path {
            m.add_input(p)?;
        }
        m.add_output(out, "trace.txt")?;
        finish(m, out, started)?;
    }
    Ok(())
}

fn query_trace(model: &Model, db: &FabricDb, prompt: &str) -> CliResult<String> {
    let mut t = format!("prompt: {prompt}\n");
    let hit = db.lookup(prompt, &model.arch.vocab, &|w| model.term_embedding(w))?;
    let Some((mention, r)) = hit else {
        t.push_str("extraction: no fabric term; no-fabric path\n");
        return Ok(t);
    };
    match &mention {
        FabricMention::Known(term) => {
            t.push_str(&format!("extraction: \"{term}\" (dictionary term)\n"));
            t.push_str(&format!("normalization: {term} -> {}\n", db.normalize(term)?));
        }
        FabricMention::Unrecognized(term) => {
            t.push_str(&format!("extraction: \"{term}\" (unrecognized term before a garment noun)\n"));
            t.push_str("normalization: not in dictionary\n");
        }
    }
    let entry = &db.entries[r.index];
    match &r.path {
        RetrievalPath::Exact => {
            t.push_str(&format!("retrieval: exact -> {} ({})\n", r.canonical, entry.image_path));
        }
        RetrievalPath::Fallback { scores } => {
            t.push_str("retrieval: fallback by cosine similarity\n");
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (name, s) in &sorted {
                t.push_str(&format!("  {name}\t{s:.6}\n"));
            }
            t.push_str(&format!("retrieval: nearest -> {} ({})\n", r.canonical, entry.image_path));
        }
    }
    Ok(t)
}

fn gradcheck_cmd(cfg: &RunConfig, args: Vec<String>, module: &str, out: Option<&Path>, corrupt: Option<f64>) -> CliResult<()> {
    let started = Instant::now();
    let suite: Suite = module.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let results = gradsuite::run(suite, corrupt)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        if !ok {
            failed.push(r.name);
        }
        text.push_str(&format!(
            "{:<9} max_rel_err={:.3e} tolerance={:.0e} coords={} {}\n",
            r.name,
            r.max_rel_err(),
            r.tolerance,
            r.report.coords(),
            if ok { "ok" } else { "FAILED" }
        ));
    }
    print!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("gradcheck.txt"), &text)?;
        let mut m = manifest("gradcheck", args, cfg.seed, cfg);
        m.add_output(out, "gradcheck.txt")?;
        finish(m, out, started)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct EvalSummary {
    note: &'static str,
    count: usize,
    mean_silhouette_iou: f64,
    mean_color_err: f64,
    mean_texture_chi2: f64,
}

fn eval_cmd(cfg: &RunConfig, args: Vec<String>, gen_dir: &Path, reference: &Path, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let ref_dir = reference.parent().unwrap_or(Path::new("."));
    let records = Dataset::load(ref_dir)?.records;
    let generated: Vec<PathBuf> = fs::read_dir(gen_dir)
        .map_err(io_err(gen_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    if generated.len() != records.len() {
        return Err(Failure::validation(format!(
            "{} holds {} images but the reference lists {}",
            gen_dir.display(),
            generated.len(),
            records.len()
        )));
    }
    let mut csv = String::from("index,file,silhouette_iou,color_err,texture_chi2\n");
    let mut sums = [0.0; 3];
    for r in &records {
        let path = gen_dir.join(&r.target);
        if !path.exists() {
            return Err(Failure::validation(format!("missing generated image {}", path.display())));
        }
        let g = Image::load(&path)?;
        let t = Image::load(&ref_dir.join(&r.target))?;
        let rep = eval::compare(&g, &t)?;
        sums[0] += rep.silhouette_iou;
        sums[1] += rep.color_err;
        sums[2] += rep.texture_chi2;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.target, rep.silhouette_iou, rep.color_err, rep.texture_chi2
        ));
    }
    let n = records.len() as f64;
    let summary = EvalSummary {
        note: "proxy metrics (silhouette IoU, RGB error, orientation-histogram chi2); not CLIPScore/FID/LPIPS",
        count: records.len(),
        mean_silhouette_iou: sums[0] / n,
        mean_color_err: sums[1] / n,
        mean_texture_chi2: sums[2] / n,
    };
    create_dir(out)?;
    write(&out.join("eval.csv"), &csv)?;
    write(&out.join("summary.json"), to_json(&summary))?;
    let mut m = manifest("eval", args, cfg.seed, cfg);
    m.add_input(gen_dir)?;
    m.add_input(reference)?;
    m.add_output(out, "eval.csv")?;
    m.add_output(out, "summary.json")?;
    println!(
        "{} images: mean iou {:.4}, color_err {:.4}, texture_chi2 {:.4} (proxy metrics)",
        summary.count, summary.mean_silhouette_iou, summary.mean_color_err, summary.mean_texture_chi2
    );
    finish(m, out, started)
}

/// Swap the value of `--out` for `out`.
fn retarget(args: &[String], out: &Path) -> Vec<String> {
    let mut v = Vec::with_capacity(args.len());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            v.push(a.clone());
            v.push(out.display().to_string());
        } else if a.starts_with("--out=") {
            v.push(format!("--out={}", out.display()));
        } else {
            v.push(a.clone());
        }
    }
    v
}

fn replay_cmd(path: &Path, out: &Path) -> CliResult<()> {
    let original = RunManifest::load(path)?;
    let args = retarget(&original.args, out);
    let cli = Cli::try_parse_from(std::iter::once("higarment".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Failure::usage(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Failure::usage("cannot replay a replay"));
    }
    if original.outputs.is_empty() {
        return Err(Failure::validation("manifest records no outputs to compare"));
    }
    let cfg = RunConfig::parse(&original.config)?;
    run(&cli.command, cfg, args)?;
    let fresh = RunManifest::load(&out.join(MANIFEST_NAME))?;
    let bad = original.output_mismatches(&fresh);
    if bad.is_empty() {
        println!("replay matches: {} outputs identical", original.outputs.len());
        Ok(())
    } else {
        Err(Failure::validation(format!("replay differs in: {}", bad.join(", "))))
    }
}
