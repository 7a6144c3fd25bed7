//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use zeroddi_core::data::{make_splits, resample_imbalance, Dataset, DEFAULT_MIN_COUNT};
use zeroddi_core::eval::{FoldSelection, Mode};
use zeroddi_core::gradcheck::GradCheck;
use zeroddi_core::gradsuite::{run_suites, Scope};
use zeroddi_core::model::Conditioning;
use zeroddi_core::synth::{synth_generate, SynthConfig};
use zeroddi_core::train::TrainConfig;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{format_config, parse_config};
use crate::error::{Error, Result};
use crate::experiment::{self, threads};
use crate::formats::{self, load_dataset, write_dataset, write_file, write_json};
use crate::report::{self, ReportContext};
use crate::run::{hash_path, sha256_hex, RunLock, RunManifest};

pub const MODEL_FILE: &str = "model.zdck";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const CONFIG_FILE: &str = "config.cfg";
pub const REPORT_FILE: &str = "report.json";

pub fn best_fold_file(k: usize) -> String {
    format!("best_fold{k}.zdck")
}

#[derive(Parser, Debug)]
#[command(name = "zeroddi", version, about = "Zero-shot drug-drug interaction event prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Validate a dataset directory and summarize it.
    Prepare(PrepareArgs),
    /// Train on the seen classes of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the zero-shot protocols.
    Eval(EvalArgs),
    /// Write a class-rebalanced copy of a dataset.
    Resample(ResampleArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump the substructure-to-token attention of one pair and class.
    InspectAttention(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub n_seen: usize,
    #[arg(long, default_value_t = 4)]
    pub n_unseen: usize,
    #[arg(long, default_value_t = 4)]
    pub n_effects: usize,
    #[arg(long, default_value_t = 32)]
    pub d_t: usize,
    /// Target mean class size.
    #[arg(long, default_value_t = 60)]
    pub instances_per_class: usize,
    /// Largest over smallest class size.
    #[arg(long, default_value_t = 10.0)]
    pub rho: f64,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/prepare")]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum LossArg {
    Dua,
    Ce,
    Hinge,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint up to the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep the best epoch per validation fold as best_fold<k>.zdck.
    #[arg(long)]
    pub select_folds: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ModeArg {
    Czsl,
    Gzsl,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ConditioningArg {
    Pair,
    Prototype,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A checkpoint file, or a training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "czsl")]
    pub mode: ModeArg,
    /// 0, 1, 2, all, or pooled.
    #[arg(long, default_value = "all")]
    pub fold: String,
    #[arg(long, value_enum, default_value = "pair")]
    pub conditioning: ConditioningArg,
    /// Write per-instance top-5 predictions.
    #[arg(long)]
    pub predictions: bool,
    /// Write 2-D PCA coordinates of the pair representations.
    #[arg(long)]
    pub pca: bool,
}

#[derive(Args, Debug)]
pub struct ResampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Unseen class count of the regenerated split (default: surviving unseen classes).
    #[arg(long)]
    pub n_unseen: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScopeArg {
    All,
    Losses,
    Encoder,
    Brl,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/gradcheck")]
    pub out: PathBuf,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ordered pair as DRUG1,DRUG2.
    #[arg(long)]
    pub pair: String,
    #[arg(long)]
    pub ddie: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn parse_fold(s: &str) -> Result<FoldSelection> {
    match s {
        "all" => Ok(FoldSelection::All),
        "pooled" => Ok(FoldSelection::Pooled),
        k => k
            .parse::<usize>()
            .ok()
            .filter(|&k| k < zeroddi_core::data::N_FOLDS)
            .map(FoldSelection::Fold)
            .ok_or_else(|| usage(format!("--fold must be 0, 1, 2, all or pooled, got {s:?}"))),
    }
}

fn fold_name(f: FoldSelection) -> String {
    match f {
        FoldSelection::All => "all".into(),
        FoldSelection::Pooled => "pooled".into(),
        FoldSelection::Fold(k) => k.to_string(),
    }
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<()> {
    let cfg = SynthConfig {
        n_seen: a.n_seen,
        n_unseen: a.n_unseen,
        n_effects: a.n_effects,
        d_t: a.d_t,
        instances_per_class: a.instances_per_class,
        rho: a.rho,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let s = synth_generate(&cfg)?;
    write_dataset(&a.out, &s.dataset, &s.split)?;
    let attrs: serde_json::Map<String, serde_json::Value> = s
        .attributes
        .iter()
        .map(|(id, at)| (id.clone(), json!({"sign": at.sign, "effect": at.effect, "pattern": at.pattern})))
        .collect();
    write_json(&a.out.join("attributes.json"), &attrs)?;
    m.seed = Some(a.seed);
    m.output(&a.out)?;
    println!(
        "synth: {} classes ({} seen, {} unseen), {} instances, {} drugs, dataset hash {}",
        s.dataset.semantics.len(),
        s.split.seen.len(),
        s.split.unseen.len(),
        s.dataset.instances.len(),
        s.dataset.graphs.len(),
        hash_path(&a.out)?
    );
    Ok(())
}

fn prepare(a: &PrepareArgs, m: &mut RunManifest) -> Result<()> {
    let dd = load_dataset(&a.data)?;
    m.input(&a.data)?;
    let ds = &dd.dataset;
    let summary = json!({
        "drugs": ds.graphs.len(),
        "classes": ds.semantics.len(),
        "instances": ds.instances.len(),
        "seen": dd.split.seen.len(),
        "unseen": dd.split.unseen.len(),
        "fold_sizes": dd.split.folds.iter().map(Vec::len).collect::<Vec<_>>(),
        "d_t": ds.token_dim(),
        "atom_vocab": ds.atom_vocab(),
        "class_counts": ds.class_counts(),
        "dataset_hash": hash_path(&a.data)?,
    });
    let path = a.out.join("summary.json");
    write_json(&path, &summary)?;
    m.output(&path)?;
    println!(
        "prepare: ok, {} drugs, {} classes, {} instances",
        ds.graphs.len(),
        ds.semantics.len(),
        ds.instances.len()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs, m: &mut RunManifest) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            m.config_path = Some(p.display().to_string());
            m.input(p)?;
            let text = formats::read_file(p)?;
            parse_config(&String::from_utf8_lossy(&text))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(l) = a.lambda {
        c.lambda = l;
    }
    if let Some(t) = a.tau {
        c.tau = t;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(l) = a.loss {
        c.loss = match l {
            LossArg::Dua => zeroddi_core::train::LossKind::Dua,
            LossArg::Ce => zeroddi_core::train::LossKind::Ce,
            LossArg::Hinge => zeroddi_core::train::LossKind::Hinge,
        };
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn train(a: &TrainArgs, m: &mut RunManifest) -> Result<()> {
    let mut config = resolve_config(a, m)?;
    let dd = load_dataset(&a.data)?;
    m.input(&a.data)?;
    let atom_vocab;
    let resume = match &a.resume {
        Some(p) => {
            m.input(p)?;
            let ck = checkpoint::load(p)?;
            if ck.config.model_config(0) != config.model_config(0) && a.config.is_some() {
                return Err(usage("--config model settings differ from the resumed checkpoint"));
            }
            if a.config.is_none() {
                let epochs = config.epochs;
                config = ck.config.clone();
                if a.epochs.is_some() {
                    config.epochs = epochs;
                }
            }
            atom_vocab = ck.atom_vocab;
            Some(ck.state)
        }
        None => {
            atom_vocab = dd.dataset.atom_vocab();
            None
        }
    };
    m.seed = Some(config.seed);
    let outcome = experiment::train(&dd.dataset, &dd.split, &config, resume, a.select_folds, threads())?;

    let cfg_path = a.out.join(CONFIG_FILE);
    write_file(&cfg_path, format_config(&config).as_bytes())?;
    let model_path = a.out.join(MODEL_FILE);
    checkpoint::save(&model_path, &Checkpoint { config: config.clone(), atom_vocab, state: outcome.state })?;
    let mut history = String::new();
    for e in &outcome.epochs {
        let s = &e.stats;
        let mut rec = json!({"epoch": s.epoch, "align": s.align, "cla": s.cla, "ins": s.ins, "total": s.total, "wall_ms": e.wall_ms});
        if !e.validation.is_empty() {
            rec["validation_acc_ave"] = json!(e.validation);
        }
        history.push_str(&rec.to_string());
        history.push('\n');
    }
    let hist_path = a.out.join(HISTORY_FILE);
    write_file(&hist_path, history.as_bytes())?;
    let mut steps = String::new();
    for s in &outcome.steps {
        steps.push_str(&json!({"step": s.step, "align": s.align, "cla": s.cla, "ins": s.ins, "total": s.total}).to_string());
        steps.push('\n');
    }
    let steps_path = a.out.join(STEPS_FILE);
    write_file(&steps_path, steps.as_bytes())?;
    for p in [&cfg_path, &model_path, &hist_path, &steps_path] {
        m.output(p)?;
    }
    for (k, best) in outcome.best.into_iter().enumerate() {
        if let Some(b) = best {
            let p = a.out.join(best_fold_file(k));
            checkpoint::save(&p, &Checkpoint { config: config.clone(), atom_vocab, state: b.state })?;
            m.output(&p)?;
            println!("train: fold {k} best epoch {} (validation acc_ave {:.2})", b.epoch, b.acc_ave);
        }
    }
    if let Some(last) = outcome.epochs.last() {
        println!(
            "train: {} epochs, final align {:.4} cla {:.4} ins {:.4} total {:.4}",
            last.stats.epoch, last.stats.align, last.stats.cla, last.stats.ins, last.stats.total
        );
    }
    Ok(())
}

/// Checkpoints for the requested folds: a single file, or the best-per-fold
/// files of a run directory when present (falling back to its final model).
fn eval_checkpoints(path: &Path, selection: FoldSelection) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let fold_files = |ks: Vec<usize>| -> Option<Vec<PathBuf>> {
        let files: Vec<PathBuf> = ks.into_iter().map(|k| path.join(best_fold_file(k))).collect();
        files.iter().all(|f| f.is_file()).then_some(files)
    };
    let chosen = match selection {
        FoldSelection::All => fold_files((0..zeroddi_core::data::N_FOLDS).collect()),
        FoldSelection::Fold(k) => fold_files(vec![k]),
        FoldSelection::Pooled => None,
    };
    Ok(chosen.unwrap_or_else(|| vec![path.join(MODEL_FILE)]))
}

fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    let selection = parse_fold(&a.fold)?;
    let mode = match a.mode {
        ModeArg::Czsl => Mode::Czsl,
        ModeArg::Gzsl => Mode::Gzsl,
    };
    let conditioning = match a.conditioning {
        ConditioningArg::Pair => Conditioning::Pair,
        ConditioningArg::Prototype => Conditioning::Prototype,
    };
    let dd = load_dataset(&a.data)?;
    m.input(&a.data)?;
    let paths = eval_checkpoints(&a.checkpoint, selection)?;
    let mut cks = Vec::new();
    let mut hashes = Vec::new();
    for p in &paths {
        m.input(p)?;
        let bytes = formats::read_file(p)?;
        hashes.push(sha256_hex(&bytes));
        cks.push(checkpoint::decode(p, &bytes)?);
    }
    let config_hash = sha256_hex(format_config(&cks[0].config).as_bytes());
    m.seed = Some(cks[0].config.seed);
    let models: Vec<_> = cks.iter().map(Checkpoint::model).collect();
    let ev = experiment::evaluate(&models, &dd.dataset, &dd.split, mode, selection, conditioning, threads())?;
    let ctx = ReportContext {
        selection: &fold_name(selection),
        conditioning: match conditioning {
            Conditioning::Pair => "pair",
            Conditioning::Prototype => "prototype",
        },
        config_hash: &config_hash,
        checkpoint_hashes: &hashes,
    };
    let report = report::report_json(&ev.report, &ev.classes, &ctx);
    let path = a.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    m.output(&path)?;
    if a.predictions {
        for (suffix, text) in report::predictions(&ev)? {
            let p = a.out.join(format!("predictions_{suffix}.tsv"));
            write_file(&p, text.as_bytes())?;
            m.output(&p)?;
        }
    }
    if a.pca {
        let p = a.out.join("pca.tsv");
        write_file(&p, report::pca_dump(&ev).as_bytes())?;
        m.output(&p)?;
    }
    let u = &ev.report.unseen;
    print!(
        "eval: {} unseen acc@1 {:.2} acc@3 {:.2} acc@5 {:.2} acc_ave {:.2}",
        report::mode_name(mode),
        u.acc_at1,
        u.acc_at3,
        u.acc_at5,
        u.acc_ave
    );
    if let (Some(s), Some(h)) = (&ev.report.seen, ev.report.h_at1_of_means) {
        print!(" | seen acc@1 {:.2} | H@1 {:.2}", s.acc_at1, h);
    }
    println!();
    Ok(())
}

fn resample(a: &ResampleArgs, m: &mut RunManifest) -> Result<()> {
    let dd = load_dataset(&a.data)?;
    m.input(&a.data)?;
    m.seed = Some(a.seed);
    let kept = resample_imbalance(&dd.dataset.instances, a.rho, a.min_count, a.seed)?;
    let classes: std::collections::BTreeSet<String> = kept.iter().map(|i| i.ddie.clone()).collect();
    let mut semantics = dd.dataset.semantics.clone();
    semantics.retain(|id, _| classes.contains(id));
    let dataset = Dataset::new(dd.dataset.graphs.clone(), semantics, kept)?;
    let n_unseen = a.n_unseen.unwrap_or_else(|| dd.split.unseen.iter().filter(|c| classes.contains(*c)).count());
    let split = make_splits(&dataset.class_counts(), n_unseen, dd.split.seed, dd.split.gzsl_seen_holdout_fraction)?;
    write_dataset(&a.out, &dataset, &split)?;
    m.output(&a.out)?;
    let counts = dataset.class_counts();
    let (max, min) = (counts.values().max().unwrap(), counts.values().min().unwrap());
    println!(
        "resample: {} instances in {} classes, max/min count {max}/{min}",
        dataset.instances.len(),
        counts.len()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, m: &mut RunManifest) -> Result<()> {
    let scope = match a.scope {
        ScopeArg::All => Scope::All,
        ScopeArg::Losses => Scope::Losses,
        ScopeArg::Encoder => Scope::Encoder,
        ScopeArg::Brl => Scope::Brl,
    };
    m.seed = Some(a.seed);
    let gc = GradCheck { corrupt_analytic: a.corrupt, ..GradCheck::default() };
    let checks = run_suites(scope, &gc, a.seed)?;
    let mut lines = Vec::new();
    for c in &checks {
        let status = if c.report.passed { "pass" } else { "FAIL" };
        let line = format!("{status} {:<28} max_rel_err {:.3e}", c.component, c.report.max_rel_err);
        println!("{line}");
        lines.push(json!({
            "component": c.component,
            "max_rel_err": c.report.max_rel_err,
            "passed": c.report.passed,
            "worst_param": c.report.worst().map(|w| w.name.clone()),
        }));
    }
    let path = a.out.join("gradcheck.json");
    write_json(&path, &lines)?;
    m.output(&path)?;
    let worst = checks.iter().filter(|c| !c.report.passed).max_by(|x, y| x.report.max_rel_err.total_cmp(&y.report.max_rel_err));
    match worst {
        Some(c) => Err(Error::GradCheck(format!(
            "{} (parameter {}) has relative error {:.3e} > {:.0e}",
            c.component,
            c.report.worst().map_or("?", |w| w.name.as_str()),
            c.report.max_rel_err,
            c.report.tol
        ))),
        None => Ok(()),
    }
}

fn inspect(a: &InspectArgs, m: &mut RunManifest) -> Result<()> {
    let dd = load_dataset(&a.data)?;
    m.input(&a.data)?;
    m.input(&a.checkpoint)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let (d1, d2) = a.pair.split_once(',').ok_or_else(|| usage("--pair must be DRUG1,DRUG2"))?;
    let graph = |id: &str| {
        dd.dataset.graphs.get(id).ok_or_else(|| Error::Core(zeroddi_core::Error::Validation(format!("unknown drug {id}"))))
    };
    let record = dd
        .dataset
        .semantics
        .get(&a.ddie)
        .ok_or_else(|| Error::Core(zeroddi_core::Error::Validation(format!("unknown ddie {}", a.ddie))))?;
    let att = ck.model().attention_map((graph(d1)?, graph(d2)?), record)?;
    let m_tokens = record.class_tokens.rows();
    let mut text = String::from("substructure");
    for j in 0..att.cols() {
        if j < m_tokens {
            text.push_str(&format!("\tclass_token_{j}"));
        } else {
            text.push_str("\tattributes");
        }
    }
    text.push('\n');
    for r in 0..att.rows() {
        let drug = if r < att.rows() / 2 { d1 } else { d2 };
        text.push_str(&format!("{drug}:{}", r % (att.rows() / 2)));
        for v in att.row_slice(r) {
            text.push_str(&format!("\t{v}"));
        }
        text.push('\n');
    }
    let path = a.out.join("attention.tsv");
    write_file(&path, text.as_bytes())?;
    m.output(&path)?;
    print!("{text}");
    Ok(())
}

fn out_dir(c: &Command) -> &Path {
    match c {
        Command::Synth(a) => &a.out,
        Command::Prepare(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Resample(a) => &a.out,
        Command::Gradcheck(a) => &a.out,
        Command::InspectAttention(a) => &a.out,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Prepare(_) => "prepare",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Resample(_) => "resample",
        Command::Gradcheck(_) => "gradcheck",
        Command::InspectAttention(_) => "inspect-attention",
    }
}

/// Runs a parsed command inside its locked output directory and writes the
/// run manifest on success.
pub fn execute(cli: &Cli, args: Vec<String>) -> Result<()> {
    let started = Instant::now();
    let out = out_dir(&cli.command);
    let _lock = RunLock::acquire(out)?;
    let mut m = RunManifest::new(command_name(&cli.command), args);
    match &cli.command {
        Command::Synth(a) => synth(a, &mut m)?,
        Command::Prepare(a) => prepare(a, &mut m)?,
        Command::Train(a) => train(a, &mut m)?,
        Command::Eval(a) => eval(a, &mut m)?,
        Command::Resample(a) => resample(a, &mut m)?,
        Command::Gradcheck(a) => {
            let r = gradcheck(a, &mut m);
            if !matches!(r, Err(Error::GradCheck(_))) {
                r?;
            } else {
                m.wall_ms = started.elapsed().as_millis();
                m.write(out)?;
                return r;
            }
        }
        Command::InspectAttention(a) => inspect(a, &mut m)?,
    }
    m.wall_ms = started.elapsed().as_millis();
    m.write(out)
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print `error[<category>]: <message>` on one line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
