use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use sha2::{Digest, Sha256};

use grad2task::adaptation::{Conditioner, Variant};
use grad2task::encoder::{pretrain_encoder, BaseModel};
use grad2task::episodes::{sample_episode_from, Benchmark, Role, Split};
use grad2task::eval::{eval_tasks, evaluate_all, run_ablation, run_samediff, stage2_budget, EvalReport, BASELINE_TAG};
use grad2task::taskemb::{export_embeddings, EmbeddingRecord};
use grad2task::tensor::{load_checkpoint, save_checkpoint, Rng};
use grad2task::trainer::{train_stage1, train_stage2, MetricsLog, TrainConfig};

const MODEL_STREAM: u64 = 0x4d4f_4445;
const PRETRAIN_STREAM: u64 = 0x5052_4554;
const COND_STREAM: u64 = 0x434f_4e44;
const EMBED_STREAM: u64 = 0x454d_4244;

#[derive(Parser)]
#[command(name = "grad2task", version, about = "Gradient-conditioned few-shot text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task suite and its registry.
    GenData(Common),
    /// Masked-token warmup of the encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Stage 1: episodic training of the base model.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Start from this checkpoint (e.g. the pretrained encoder).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Stage 2: train the conditioner against a frozen base model.
    TrainAdapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        base: BaseArg,
    },
    /// k-shot evaluation on meta-test tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        base: BaseArg,
        /// Conditioner checkpoint; the base model alone is evaluated without it.
        #[arg(long)]
        adapt: Option<PathBuf>,
        /// Comma-separated task names (default: all meta-test tasks).
        #[arg(long)]
        tasks: Option<String>,
    },
    /// Same-task / different-task classification from gradient features.
    Samediff {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        base: BaseArg,
    },
    /// Train and evaluate every conditioning variant from one base model.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        base: BaseArg,
    },
    /// Export per-layer task embeddings of sampled episodes.
    EmbedTasks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        base: BaseArg,
        #[arg(long)]
        adapt: Option<PathBuf>,
        /// Episodes per task.
        #[arg(long, default_value_t = 8)]
        episodes: usize,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shot count; sets the shots used by the command.
    #[arg(long)]
    k: Option<usize>,
    /// Evaluation runs per task and shot count.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Allow evaluation on meta-train tasks.
    #[arg(long)]
    allow_overlap: bool,
    #[arg(long)]
    deterministic: bool,
    /// Config overrides, `key=value`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Task registry written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Clone)]
struct BaseArg {
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
}

/// Errors the user can fix by changing the command line.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    Usage(e.into()).into()
}

/// Which config key `--k` sets for a verb.
fn k_key(verb: &str) -> &'static str {
    match verb {
        "eval" | "ablate" => "eval_shots",
        "samediff" => "samediff_shots",
        _ => "shots",
    }
}

/// File config, then `key=value` overrides, then flags.
fn resolve_config(verb: &str, c: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(anyhow::anyhow!("config file not found: {}", p.display())));
            }
            TrainConfig::load(p).map_err(usage)?
        }
        None => TrainConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(anyhow::anyhow!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(s) = c.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(k) = c.k {
        flags.push((k_key(verb), k.to_string()));
    }
    if let Some(r) = c.runs {
        flags.push(("eval_runs", r.to_string()));
    }
    if let Some(v) = &c.variant {
        flags.push(("variant", v.clone()));
    }
    if c.allow_overlap {
        flags.push(("allow_overlap", "true".into()));
    }
    if c.deterministic {
        flags.push(("deterministic", "true".into()));
    }
    for (k, v) in flags {
        cfg.set(k, &v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Git-style blob id: SHA-256 over `blob <len>\0<content>`.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn hash_file(p: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(blob_hash(&bytes))
}

/// The registry and every file beside it it refers to.
fn data_inputs(registry: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(registry).with_context(|| format!("reading {}", registry.display()))?;
    let dir = registry.parent().unwrap_or(Path::new("."));
    let mut out = vec![("data".to_string(), registry.to_path_buf())];
    for line in text.lines().filter(|l| !l.trim_start().starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["vocab", p] => out.push(("data".into(), dir.join(p))),
            ["task", _, _, a, b, c] => {
                for p in [a, b, c] {
                    out.push(("data".into(), dir.join(p)));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Command line without `--out-dir`, so re-runs elsewhere agree.
fn recorded_argv() -> Vec<String> {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--out-dir" {
            args.next();
        } else if !a.starts_with("--out-dir=") {
            out.push(a);
        }
    }
    out
}

struct Run {
    verb: &'static str,
    argv: Vec<String>,
    cfg: TrainConfig,
    out: PathBuf,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<String>,
}

impl Run {
    fn new(verb: &'static str, common: &Common) -> anyhow::Result<Self> {
        let cfg = resolve_config(verb, common)?;
        fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
        let mut inputs = Vec::new();
        if let Some(p) = &common.config {
            inputs.push(("config".to_string(), p.clone()));
        }
        Ok(Self {
            verb,
            argv: recorded_argv(),
            cfg,
            out: common.out_dir.clone(),
            inputs,
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, role: &str, p: &Path) {
        self.inputs.push((role.to_string(), p.to_path_buf()));
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    /// `manifest.txt`: header comments followed by the resolved config,
    /// so `--config manifest.txt` reproduces the run.
    fn finish(self) -> anyhow::Result<()> {
        let mut m = String::new();
        writeln!(m, "# grad2task {}", self.verb)?;
        writeln!(m, "# argv: {}", self.argv.join(" "))?;
        for (role, p) in &self.inputs {
            writeln!(m, "# input {role} {} {}", p.display(), hash_file(p)?)?;
        }
        for name in &self.outputs {
            writeln!(m, "# output {name} {}", hash_file(&self.out.join(name))?)?;
        }
        m.push('\n');
        m.push_str(&self.cfg.to_text());
        let p = self.out.join("manifest.txt");
        fs::write(&p, m).with_context(|| format!("writing {}", p.display()))?;
        info!("wrote {}", p.display());
        Ok(())
    }
}

fn load_bench(run: &mut Run, data: &DataArg) -> anyhow::Result<Benchmark> {
    if !data.data.is_file() {
        return Err(usage(anyhow::anyhow!("registry not found: {}", data.data.display())));
    }
    run.inputs.extend(data_inputs(&data.data)?);
    Ok(Benchmark::load(&data.data, run.cfg.max_len)?)
}

fn fresh_model(cfg: &TrainConfig, bench: &Benchmark) -> anyhow::Result<BaseModel> {
    let enc = cfg.encoder_config(bench.vocab.len())?;
    Ok(BaseModel::new(enc, &mut Rng::new(cfg.seed).child(MODEL_STREAM))?)
}

fn load_model(run: &mut Run, bench: &Benchmark, path: &Path) -> anyhow::Result<BaseModel> {
    if !path.is_file() {
        return Err(usage(anyhow::anyhow!("checkpoint not found: {}", path.display())));
    }
    run.input("checkpoint", path);
    let mut model = fresh_model(&run.cfg, bench)?;
    load_checkpoint(path, &mut [("model", &mut model.params)])
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn new_conditioner(cfg: &TrainConfig, model: &BaseModel) -> anyhow::Result<Conditioner> {
    let variant = cfg.variant()?;
    Ok(Conditioner::new(
        variant,
        &model.config,
        cfg.conditioner_config(),
        &mut Rng::new(cfg.seed).child(COND_STREAM),
    )?)
}

fn load_conditioner(run: &mut Run, model: &BaseModel, path: &Path) -> anyhow::Result<Conditioner> {
    if !path.is_file() {
        return Err(usage(anyhow::anyhow!("checkpoint not found: {}", path.display())));
    }
    run.input("checkpoint", path);
    let mut cond = new_conditioner(&run.cfg, model)?;
    load_checkpoint(path, &mut cond.stores_mut())
        .with_context(|| format!("loading {} as a {} conditioner", path.display(), cond.variant))?;
    Ok(cond)
}

fn gen_data(common: &Common) -> anyhow::Result<()> {
    let mut run = Run::new("gen-data", common)?;
    let bench = run.cfg.benchmark()?;
    let dir = run.out.join("data");
    bench.save(&dir)?;
    for (d, role) in &bench.tasks {
        info!("{} ({role}): {} classes, {} train examples", d.name, d.class_names.len(), d.train.len());
        for s in ["train", "val", "test"] {
            run.outputs.push(format!("data/{}.{s}.jsonl", d.name));
        }
    }
    run.outputs.push("data/vocab.txt".into());
    run.outputs.push("data/registry.txt".into());
    println!("{}", dir.join("registry.txt").display());
    run.finish()
}

fn pretrain(common: &Common, data: &DataArg) -> anyhow::Result<()> {
    let mut run = Run::new("pretrain", common)?;
    let bench = load_bench(&mut run, data)?;
    let mut model = fresh_model(&run.cfg, &bench)?;
    let log = pretrain_encoder(
        &mut model,
        &bench.corpus(),
        &run.cfg.pretrain_config(),
        &mut Rng::new(run.cfg.seed).child(PRETRAIN_STREAM),
    )?;
    let mut csv = String::from("step,loss,accuracy\n");
    for (s, l, a) in &log.steps {
        writeln!(csv, "{s},{l},{a}")?;
    }
    run.write("pretrain.csv", &csv)?;
    let p = run.path("pretrained.ckpt");
    save_checkpoint(&p, &[("model", &model.params)])?;
    println!("{}", p.display());
    run.finish()
}

fn train_base(common: &Common, data: &DataArg, init: Option<&Path>) -> anyhow::Result<()> {
    let mut run = Run::new("train-base", common)?;
    let bench = load_bench(&mut run, data)?;
    let mut model = match init {
        Some(p) => load_model(&mut run, &bench, p)?,
        None => fresh_model(&run.cfg, &bench)?,
    };
    let reg = bench.registry(Role::MetaTrain)?;
    let mut log = MetricsLog::default();
    let mut cfg = run.cfg.clone();
    cfg.stage = 1;
    cfg.checkpoint.clear();
    let s = train_stage1(&mut model, &reg, &cfg, &mut log)?;
    info!(
        "stage 1: {} steps, val accuracy {:.4} -> {:.4} (epoch {})",
        s.steps, s.initial_val_accuracy, s.best_val_accuracy, s.best_epoch
    );
    run.write("metrics.csv", &log.to_csv())?;
    let p = run.path("base.ckpt");
    save_checkpoint(&p, &[("model", &model.params)])?;
    println!("{}", p.display());
    run.finish()
}

fn train_adapt(common: &Common, data: &DataArg, base: &BaseArg) -> anyhow::Result<()> {
    let mut run = Run::new("train-adapt", common)?;
    let bench = load_bench(&mut run, data)?;
    let mut model = load_model(&mut run, &bench, &base.base)?;
    if run.cfg.variant()? == Variant::PnLonger {
        return Err(usage(anyhow::anyhow!(
            "variant pn-longer has no conditioner; use train-base --init to continue stage 1"
        )));
    }
    let mut cond = new_conditioner(&run.cfg, &model)?;
    let reg = bench.registry(Role::MetaTrain)?;
    let mut log = MetricsLog::default();
    let mut cfg = run.cfg.clone();
    cfg.stage = 2;
    cfg.checkpoint.clear();
    let s = train_stage2(&mut model, &mut cond, Some(&bench.vocab), &reg, &cfg, &mut log)?;
    info!(
        "stage 2 ({}): {} steps, val accuracy {:.4} -> {:.4} (epoch {})",
        cond.variant, s.steps, s.initial_val_accuracy, s.best_val_accuracy, s.best_epoch
    );
    run.write("metrics.csv", &log.to_csv())?;
    let p = run.path("adapt.ckpt");
    save_checkpoint(&p, &cond.stores())?;
    println!("{}", p.display());
    run.finish()
}

fn task_names(tasks: Option<&str>) -> Vec<String> {
    tasks
        .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

fn eval(common: &Common, data: &DataArg, base: &BaseArg, adapt: Option<&Path>, tasks: Option<&str>) -> anyhow::Result<()> {
    let mut run = Run::new("eval", common)?;
    let bench = load_bench(&mut run, data)?;
    let model = load_model(&mut run, &bench, &base.base)?;
    let cond = adapt.map(|p| load_conditioner(&mut run, &model, p)).transpose()?;
    let names = task_names(tasks);
    let tasks = eval_tasks(&bench, &names, run.cfg.allow_overlap).map_err(usage)?;
    let tag = match &cond {
        Some(c) => c.variant.tag(),
        None => BASELINE_TAG,
    };
    let cfg = &run.cfg;
    let report = evaluate_all(&model, cond.as_ref(), &bench, &tasks, &cfg.eval_shot_list()?, cfg.eval_runs, cfg.seed, tag)?;
    write_report(&mut run, "eval", &report)?;
    run.finish()
}

fn write_report(run: &mut Run, stem: &str, report: &EvalReport) -> anyhow::Result<()> {
    run.write(&format!("{stem}.csv"), &report.to_csv())?;
    let table = report.to_table();
    run.write(&format!("{stem}.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn samediff(common: &Common, data: &DataArg, base: &BaseArg) -> anyhow::Result<()> {
    let mut run = Run::new("samediff", common)?;
    let bench = load_bench(&mut run, data)?;
    let model = load_model(&mut run, &bench, &base.base)?;
    let results = run_samediff(&model, &bench, &run.cfg)?;
    let mut csv = String::from("k,train_loss,auc\n");
    for r in &results {
        writeln!(csv, "{},{},{}", r.k, r.train_loss, r.auc)?;
        println!("k={:<3} auc={:.4}", r.k, r.auc);
    }
    run.write("samediff.csv", &csv)?;
    run.finish()
}

fn ablate(common: &Common, data: &DataArg, base: &BaseArg) -> anyhow::Result<()> {
    let mut run = Run::new("ablate", common)?;
    let bench = load_bench(&mut run, data)?;
    let model = load_model(&mut run, &bench, &base.base)?;
    let tasks = eval_tasks(&bench, &[], run.cfg.allow_overlap)?;
    let cfg = run.cfg.clone();
    let budget = stage2_budget(&bench, &cfg)?;
    let mut report = evaluate_all(&model, None, &bench, &tasks, &cfg.eval_shot_list()?, cfg.eval_runs, cfg.seed, BASELINE_TAG)?;
    for v in Variant::ALL {
        let r = run_ablation(v, &model, &bench, &tasks, &cfg, budget)?;
        run.write(&format!("metrics-{}.csv", v.tag()), &r.log.to_csv())?;
        report.extend(r.report);
    }
    write_report(&mut run, "ablation", &report)?;
    run.finish()
}

fn embed_tasks(common: &Common, data: &DataArg, base: &BaseArg, adapt: Option<&Path>, episodes: usize) -> anyhow::Result<()> {
    let mut run = Run::new("embed-tasks", common)?;
    let bench = load_bench(&mut run, data)?;
    let model = load_model(&mut run, &bench, &base.base)?;
    let cond = match adapt {
        Some(p) => load_conditioner(&mut run, &model, p)?,
        None => {
            warn!("no --adapt checkpoint; embeddings come from an untrained conditioner");
            new_conditioner(&run.cfg, &model)?
        }
    };
    if cond.variant == Variant::PnLonger {
        return Err(usage(anyhow::anyhow!("variant pn-longer has no task embedding")));
    }
    let tasks: Vec<_> = if run.cfg.allow_overlap {
        bench.tasks.iter().map(|t| &t.0).collect()
    } else {
        bench.with_role(Role::MetaTest)
    };
    let root = Rng::new(run.cfg.seed).child(EMBED_STREAM);
    let mut records = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        for i in 0..episodes {
            let mut r = root.child(ti as u64).child(i as u64);
            let ep = sample_episode_from(task, Split::Test, run.cfg.shots, 0, &mut r)?;
            records.push(EmbeddingRecord {
                episode_id: records.len(),
                task_name: task.name.clone(),
                layers: cond.embed_episode(&model, Some(&bench.vocab), &ep, &mut r)?,
            });
        }
    }
    let p = run.path("embeddings.csv");
    export_embeddings(&records, &p)?;
    println!("{}", p.display());
    run.finish()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain { common, data } => pretrain(common, data),
        Command::TrainBase { common, data, init } => train_base(common, data, init.as_deref()),
        Command::TrainAdapt { common, data, base } => train_adapt(common, data, base),
        Command::Eval {
            common,
            data,
            base,
            adapt,
            tasks,
        } => eval(common, data, base, adapt.as_deref(), tasks.as_deref()),
        Command::Samediff { common, data, base } => samediff(common, data, base),
        Command::Ablate { common, data, base } => ablate(common, data, base),
        Command::EmbedTasks {
            common,
            data,
            base,
            adapt,
            episodes,
        } => embed_tasks(common, data, base, adapt.as_deref(), *episodes),
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("GRAD2TASK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(anyhow::anyhow!("GRAD2TASK_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
