use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use msstyle::autodiff::Primitive;
use msstyle::checkpoint::{load_checkpoint, save_checkpoint, TOOL_VERSION};
use msstyle::config::RunConfig;
use msstyle::corpus::{generate_corpus, load_corpus, write_summary, Corpus, FeatureMatrix};
use msstyle::eval::{alignment_pgm, evaluate, write_alignment_csv};
use msstyle::gradsuite::{run_suite, CASES};
use msstyle::model::{Model, Variant};
use msstyle::train::{train_stage1, train_stage2};
use msstyle::{Error, Result};

#[derive(Parser)]
#[command(name = "msstyle", version, about = "Multi-scale style transfer on a synthetic emotional corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel emotional corpus.
    GenData(GenDataArgs),
    /// Train one variant (one or both stages).
    Train(TrainArgs),
    /// Synthesize text with separate local and global references.
    Transfer(TransferArgs),
    /// Run the transfer, multi-reference and granularity experiments.
    Eval(EvalArgs),
    /// Finite-difference gradient suite in f64.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    neutral_frac: Option<f64>,
    #[arg(long)]
    parallel_frac: Option<f64>,
    #[arg(long)]
    d_spec: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    #[arg(long, default_value = "proposed")]
    variant: Variant,
    /// Output directory; checkpoints are `<variant>.stage<k>.ckpt`.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from (required for `--stage 2`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Space-separated symbol ids.
    #[arg(long)]
    text: String,
    #[arg(long)]
    local_ref: String,
    /// Defaults to the local reference (parallel transfer).
    #[arg(long)]
    global_ref: Option<String>,
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// One checkpoint per variant.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Run only cases whose name starts with this.
    #[arg(long)]
    case: Option<String>,
    /// Corrupt one primitive's backward rule (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = run_config(a.config.as_deref())?;
    let c = &mut cfg.corpus;
    if let Some(v) = a.utterances {
        c.n_utterances = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.neutral_frac {
        c.neutral_frac = v;
    }
    if let Some(v) = a.parallel_frac {
        c.parallel_frac = v;
    }
    if let Some(v) = a.d_spec {
        c.d_spec = v;
    }
    let corpus = generate_corpus(&cfg.corpus, &a.out)?;
    write_summary(&corpus, io::stdout().lock()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    if corpus.config.d_spec != cfg.model.backbone.d_spec {
        return Err(Error::Config(format!(
            "corpus has d_spec {}, model expects {}",
            corpus.config.d_spec, cfg.model.backbone.d_spec
        )));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(a.config.as_deref())?;
    let meta = cfg.to_value();
    let corpus = load_corpus(&a.data)?;
    check_corpus(&cfg, &corpus)?;
    let v = a.variant;
    if a.stage == StageArg::Two && !v.two_stage() {
        let why = if v.has_global() {
            "variant trains in a single stage"
        } else {
            "variant has no global head"
        };
        return Err(Error::Config(format!("{v} --stage 2: {why}")));
    }
    let mut model = match &a.resume {
        Some(p) => {
            let m = load_checkpoint(p)?.model;
            if m.variant() != v {
                return Err(Error::Provenance(format!(
                    "{} is a {} checkpoint, --variant is {v}",
                    p.display(),
                    m.variant()
                )));
            }
            m
        }
        None if a.stage == StageArg::Two => {
            return Err(Error::Provenance("--stage 2 needs a stage-1 checkpoint via --resume".into()));
        }
        None => Model::new(&cfg.model, v, cfg.train.seed)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join(format!("{v}.train.jsonl"));
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let save = |m: &Model| -> Result<()> {
        let path = a.out.join(format!("{v}.stage{}.ckpt", m.stage));
        save_checkpoint(m, Some(&meta), &path)?;
        println!("wrote {}", path.display());
        Ok(())
    };
    if a.stage != StageArg::Two {
        train_stage1(&mut model, &corpus, &cfg.train, &mut log)?;
        save(&model)?;
    }
    if a.stage != StageArg::One && v.two_stage() {
        train_stage2(&mut model, &corpus, &cfg.train, &mut log)?;
        save(&model)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(())
}

fn parse_text(s: &str) -> Result<Vec<usize>> {
    let ids: std::result::Result<Vec<usize>, _> = s.split_whitespace().map(str::parse).collect();
    match ids {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!("--text must be space-separated symbol ids, got {s:?}"))),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn transfer(a: TransferArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let model = ck.model;
    model.expect_final()?;
    let corpus = load_corpus(&a.data)?;
    let text = parse_text(&a.text)?;
    let find = |id: &str| {
        corpus
            .get(id)
            .ok_or_else(|| Error::Config(format!("no record {id:?} in {}", a.data.display())))
    };
    let local = find(&a.local_ref)?;
    let global = find(a.global_ref.as_deref().unwrap_or(&a.local_ref))?;
    if local.text != text {
        return Err(Error::ContentMismatch(format!(
            "local reference {} reads {:?}, --text is {:?}",
            local.id, local.text, text
        )));
    }
    let syn = model.synthesize(&text, &local.features.values, &global.features.values)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let frames = FeatureMatrix {
        values: syn.frames.clone(),
        frame_shift_ms: corpus.voice.frame_shift_ms,
    };
    frames.write(&with_suffix(&a.out, ".f32"))?;
    let csv = |m: &msstyle::autodiff::Tensor<f32>, path: PathBuf| -> Result<()> {
        let mut buf = Vec::new();
        write_alignment_csv(m, &mut buf).map_err(|e| Error::io(&path, e))?;
        write_bytes(&path, &buf)
    };
    if let Some(ra) = &syn.ref_align {
        csv(ra, with_suffix(&a.out, ".refattn.csv"))?;
        write_bytes(&with_suffix(&a.out, ".refattn.pgm"), &alignment_pgm(ra))?;
    }
    csv(&syn.dec_align, with_suffix(&a.out, ".decattn.csv"))?;
    let summary = json!({
        "tool_version": TOOL_VERSION,
        "run_config": ck.run_config,
        "variant": model.variant(),
        "stage": model.stage,
        "text": text,
        "local_ref": local.id,
        "global_ref": global.id,
        "decoder_steps": syn.steps,
        "frames": syn.frames.cols(),
        "incomplete": syn.incomplete,
        "ref_attn_shape": syn.ref_align.as_ref().map(|m| m.shape().to_vec()),
    });
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write_bytes(&with_suffix(&a.out, ".json"), &bytes)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = run_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.data)?;
    let mut models = Vec::new();
    for p in &a.ckpt {
        models.push(load_checkpoint(p)?.model);
    }
    let report = evaluate(&models, &corpus, &cfg, a.jobs)?;
    for v in &report.variants {
        let o = &v.overall;
        println!(
            "{:<9} global match {:.3}  duration r {:.3}  pause F1 {:.3}  completion {:.3}",
            v.variant.name(),
            o.global_probe_match.mean,
            o.duration_pearson.mean,
            o.pause_f1.mean,
            o.completion.mean
        );
    }
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_bytes(&a.report, &bytes)
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let fault = match &a.corrupt {
        Some(name) => Some(
            Primitive::from_name(name).ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
        ),
        None => None,
    };
    let cases: Vec<&str> = CASES
        .iter()
        .copied()
        .filter(|c| a.case.as_deref().is_none_or(|p| c.starts_with(p)))
        .collect();
    if cases.is_empty() {
        return Err(Error::Config(format!("no grad-check case matches {:?}", a.case)));
    }
    let report = run_suite(&cases, a.seeds, fault)?;
    for r in &report.results {
        println!(
            "{} {:<28} seed {} max rel err {:.3e}{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.case,
            r.seed,
            r.max_rel_err,
            match (&r.worst_param, r.passed) {
                (Some(p), false) => format!(" in {p}"),
                _ => String::new(),
            }
        );
    }
    let failed = report.failures().len();
    println!(
        "{} of {} checks passed in {:.1} s",
        report.results.len() - failed,
        report.results.len(),
        report.millis as f64 / 1000.0
    );
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Transfer(a) => transfer(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(5),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
