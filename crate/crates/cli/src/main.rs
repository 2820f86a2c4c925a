use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use phasekd::checkpoint::Checkpoint;
use phasekd::data::{self, DomainSpec, SyntheticDataset};
use phasekd::experiments::{self, SweepParam};
use phasekd::gradcheck::{self, GradcheckConfig};
use phasekd::graph::{Fault, KlDirection};
use phasekd::networks::NetworkSpec;
use phasekd::train::{self, TrainingConfig, Variant};
use phasekd::Error;

mod manifest;

use manifest::{file_digest, RunManifest};

#[derive(Parser)]
#[command(name = "phasekd", version, about = "Cross-domain distillation with Fourier adapters on synthetic data")]
struct Cli {
    /// Root directory for command outputs that are not given explicitly.
    #[arg(long, global = true, env = "PHASEKD_OUT", default_value = "phasekd-runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets.
    GenData(GenDataArgs),
    /// Train a teacher on the source domain.
    Pretrain(PretrainArgs),
    /// Distil a student on the target domain.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
    /// Compare training variants.
    Ablate(AblateArgs),
    /// Train once per value of beta or gamma.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML file with `n_per_class`, `seed`, `[source]` and `[target]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Overrides for [`TrainingConfig`] shared by the training commands.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML training config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    student_lr: Option<f64>,
    #[arg(long)]
    adapter_lr: Option<f64>,
    /// `target-first` or `learner-first`.
    #[arg(long, value_parser = parse_kl)]
    kl_direction: Option<KlDirection>,
    /// Feed the student update from the pre-update teacher pass.
    #[arg(long)]
    reuse_teacher_forward: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Also train the plain student and report it.
    #[arg(long)]
    with_baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "target", value_parser = ["source", "target"])]
    domain: String,
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    split: String,
    /// Network inside a training checkpoint.
    #[arg(long, default_value = "student", value_parser = ["student", "teacher"])]
    network: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
    cases: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Only checks whose name contains one of these.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Test fixture: corrupt a backward rule.
    #[arg(long, hide = true, value_parser = ["couple-sign-flip"])]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// `all` or a comma-separated list.
    #[arg(long, default_value = "all")]
    variants: String,
    /// Seeds averaged per variant; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_parser = parse_sweep_param)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_SWEEP_VALUES)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sweep_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kl(s: &str) -> Result<KlDirection, String> {
    match s {
        "target-first" => Ok(KlDirection::TargetFirst),
        "learner-first" => Ok(KlDirection::LearnerFirst),
        _ => Err(format!("unknown KL direction `{s}` (target-first|learner-first)")),
    }
}

/// Failure with its exit status: 1 for runtime and I/O, 2 for bad input.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Pretrain(a) => pretrain(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_dir(cli: &Cli, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    let dir = explicit.clone().unwrap_or_else(|| cli.out_root.join(name));
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    n_per_class: usize,
    seed: u64,
    source: DomainSpec,
    target: DomainSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_class: data::REFERENCE_N_PER_CLASS,
            seed: data::REFERENCE_SEED,
            source: DomainSpec::reference_source(),
            target: DomainSpec::reference_target(),
        }
    }
}

const SOURCE_FILE: &str = "source.pkd";
const TARGET_FILE: &str = "target.pkd";

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let mut m = RunManifest::start("gen-data");
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => DataConfig::default(),
    };
    if let Some(n) = a.n_per_class {
        cfg.n_per_class = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (src, tgt) = data::generate_dataset(cfg.n_per_class, &cfg.source, &cfg.target, cfg.seed)?;
    let dir = out_dir(cli, &a.out, "data")?;
    let text = toml::to_string(&cfg).map_err(|e| runtime(e.to_string()))?;
    m.config = serde_json::to_value(&cfg).map_err(|e| runtime(e.to_string()))?;
    for (file, ds) in [(SOURCE_FILE, &src), (TARGET_FILE, &tgt)] {
        let path = dir.join(file);
        ds.save(&path)?;
        let digest = ds.digest()?;
        println!("{:<8} {:>5} images  sha256 {digest}", ds.meta.spec.name, ds.len());
        m.output(&path, digest);
    }
    let manifest_text = format!(
        "# Generated datasets\n{text}\n[digests]\nsource = \"{}\"\ntarget = \"{}\"\n",
        src.digest()?,
        tgt.digest()?
    );
    let spec_path = dir.join("dataset.toml");
    write_text(&spec_path, &manifest_text)?;
    m.output(&spec_path, file_digest(&spec_path)?);
    m.finish(&dir)
}

fn load_domain(data_dir: &Path, file: &str, m: &mut RunManifest) -> Result<SyntheticDataset, Failure> {
    let path = data_dir.join(file);
    let ds = SyntheticDataset::load(&path)?;
    m.input(&path, ds.digest()?);
    Ok(ds)
}

fn resolve_config(base: TrainingConfig, a: &ConfigArgs) -> Result<TrainingConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainingConfig::from_toml(&read_text(p)?)?,
        None => base,
    };
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field.clone() { cfg.$field = v; })*
        };
    }
    overlay!(epochs, seed, batch_size, beta, gamma, tau, student_lr, adapter_lr, kl_direction);
    if a.reuse_teacher_forward {
        cfg.reuse_teacher_forward = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> CmdResult {
    let mut m = RunManifest::start("pretrain");
    let cfg = resolve_config(TrainingConfig::pretrain(), &a.cfg)?;
    m.config = serde_json::to_value(&cfg).map_err(|e| runtime(e.to_string()))?;
    let src = load_domain(&a.data, SOURCE_FILE, &mut m)?;
    let tgt = load_domain(&a.data, TARGET_FILE, &mut m)?;
    let (mut teacher, log) = train::pretrain_teacher(NetworkSpec::teacher(), &src.train()?, &src.test()?, &cfg)?;
    println!("{:>5}  {:>8}  {:>8}", "epoch", "loss", "src acc");
    for (e, (loss, acc)) in log.iter().enumerate() {
        println!("{:>5}  {:>8.4}  {:>8.4}", e + 1, loss, acc);
    }
    let source_acc = train::evaluate(&mut teacher, &src.test()?)?;
    let target_acc = train::evaluate(&mut teacher, &tgt.test()?)?;
    println!("source test accuracy {source_acc:.4}");
    println!("target test accuracy {target_acc:.4}");
    let dir = out_dir(cli, &a.out, "teacher")?;
    let ck = train::network_checkpoint(
        &teacher,
        "teacher",
        serde_json::json!({ "config": cfg, "source_accuracy": source_acc, "target_accuracy": target_acc }),
    );
    let path = dir.join("teacher.ckpt");
    ck.save(&path)?;
    m.output(&path, ck.digest()?);
    m.finish(&dir)
}

fn load_teacher(path: &Path, m: &mut RunManifest) -> Result<phasekd::networks::Network, Failure> {
    let ck = Checkpoint::load(path)?;
    m.input(path, ck.digest()?);
    Ok(train::network_from_checkpoint(&ck, "network")?)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut m = RunManifest::start("train");
    let mut cfg = resolve_config(TrainingConfig::default(), &a.cfg)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    m.config = serde_json::to_value(&cfg).map_err(|e| runtime(e.to_string()))?;
    let teacher = load_teacher(&a.teacher, &mut m)?;
    let tgt = load_domain(&a.data, TARGET_FILE, &mut m)?;
    let (train_split, test_split) = (tgt.train()?, tgt.test()?);
    let dir = out_dir(cli, &a.out, "train")?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| runtime(format!("{}: {e}", ckpt_dir.display())))?;
    let out = train::train(&cfg, &teacher, NetworkSpec::student(), &train_split, &test_split, Some(&ckpt_dir))?;
    println!("{:>5}  {:>7}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}", "epoch", "lr", "ce", "kt", "dikt", "acc", "t-acc");
    for r in &out.records {
        println!(
            "{:>5}  {:>7.1e}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8}",
            r.epoch,
            r.student_lr,
            r.student.ce,
            r.student.kt,
            r.student.dikt,
            r.student_accuracy,
            r.teacher_accuracy.map_or("-".into(), |t| format!("{t:.4}"))
        );
    }
    let header = train::MetricsHeader::new(&cfg)?;
    let metrics_path = dir.join("metrics.jsonl");
    write_text(&metrics_path, &train::metrics_jsonl(&header, &out.records)?)?;
    m.output(&metrics_path, file_digest(&metrics_path)?);
    let ck = out.session.checkpoint()?;
    let ck_path = dir.join("student.ckpt");
    ck.save(&ck_path)?;
    m.output(&ck_path, ck.digest()?);
    let final_acc = out.records.last().map_or(out.initial_student_accuracy, |r| r.student_accuracy);
    let mut summary = format!("final {} student target accuracy {final_acc:.4}", cfg.variant);
    if a.with_baseline {
        let base =
            train::run_ablation(Variant::NoBoth, &cfg, &teacher, NetworkSpec::student(), &train_split, &test_split)?;
        let b = base.records.last().map_or(base.initial_student_accuracy, |r| r.student_accuracy);
        summary.push_str(&format!("  baseline (no_both) {b:.4}  delta {:+.2} pts", 100.0 * (final_acc - b)));
    }
    println!("{summary}");
    m.finish(&dir)
}

fn eval(a: &EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let store = if ck.has_store("network") { "network" } else { a.network.as_str() };
    let mut net = train::network_from_checkpoint(&ck, store)?;
    let file = if a.domain == "source" { SOURCE_FILE } else { TARGET_FILE };
    let ds = SyntheticDataset::load(&a.data.join(file))?;
    let acc = train::evaluate(&mut net, &ds.split(&a.split)?)?;
    println!("{} {} {} accuracy {acc:.4}", store, a.domain, a.split);
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        seed: a.seed,
        cases: a.cases,
        tolerance: a.tolerance,
        fault: a.inject_fault.as_ref().map(|_| Fault::CoupleSignFlip),
        only: a.only.clone(),
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{:<26}  {:>6}  {:>7}  {:>7}  {:>10}  result", "operation", "cases", "coords", "kinks", "worst");
    for o in &report.ops {
        println!(
            "{:<26}  {:>6}  {:>7}  {:>7}  {:>10.3e}  {}",
            o.name,
            o.cases,
            o.coordinates,
            o.skipped,
            o.worst_relative_error,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    for o in &report.ops {
        println!("{}", serde_json::to_string(o).map_err(|e| runtime(e.to_string()))?);
    }
    if report.passed() {
        println!("gradcheck passed: worst relative error {:.3e}", report.worst());
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|o| o.name.as_str()).collect();
        Err(runtime(format!("gradcheck failed for: {}", names.join(", "))))
    }
}

fn ablate(cli: &Cli, a: &AblateArgs) -> CmdResult {
    let variants = experiments::parse_variants(&a.variants)?;
    let mut m = RunManifest::start("ablate");
    let cfg = resolve_config(TrainingConfig::default(), &a.cfg)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    m.config = serde_json::json!({ "config": cfg, "variants": variants, "seeds": seeds });
    let teacher = load_teacher(&a.teacher, &mut m)?;
    let tgt = load_domain(&a.data, TARGET_FILE, &mut m)?;
    let table = experiments::ablate(
        &cfg,
        &variants,
        &seeds,
        &teacher,
        &NetworkSpec::student(),
        &tgt.train()?,
        &tgt.test()?,
        a.jobs,
    )?;
    let text = table.to_text();
    print!("{text}");
    let dir = out_dir(cli, &a.out, "ablate")?;
    for (name, body) in [("ablation.txt", text), ("ablation.jsonl", table.to_jsonl()?)] {
        let p = dir.join(name);
        write_text(&p, &body)?;
        m.output(&p, file_digest(&p)?);
    }
    m.finish(&dir)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let mut m = RunManifest::start("sweep");
    let cfg = resolve_config(TrainingConfig::default(), &a.cfg)?;
    m.config = serde_json::json!({ "config": cfg, "param": a.param, "values": a.values });
    let teacher = load_teacher(&a.teacher, &mut m)?;
    let tgt = load_domain(&a.data, TARGET_FILE, &mut m)?;
    let table = experiments::sweep(
        &cfg,
        a.param,
        &a.values,
        &teacher,
        &NetworkSpec::student(),
        &tgt.train()?,
        &tgt.test()?,
        a.jobs,
    )?;
    let text = table.to_text();
    print!("{text}");
    println!("spread {:.2} pts", 100.0 * table.spread());
    let dir = out_dir(cli, &a.out, "sweep")?;
    for (name, body) in [("sweep.txt", text), ("sweep.jsonl", table.to_jsonl()?)] {
        let p = dir.join(name);
        write_text(&p, &body)?;
        m.output(&p, file_digest(&p)?);
    }
    m.finish(&dir)
}
