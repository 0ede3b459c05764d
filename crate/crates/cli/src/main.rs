mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mvam_core::checkpoint::{load_checkpoint, param_diff, save_checkpoint, Checkpoint};
use mvam_core::data::mvf::manifest_path;
use mvam_core::data::{generate_synthetic, load_split, save_split, Corpus, Dataset, Split, SynthSpec};
use mvam_core::grad::{
    finite_diff_check, gradcheck_problem, GradCheckShape, PairBatch, DEFAULT_FD_STEP, GRADCHECK_PASS,
};
use mvam_core::losses::{DiversityVariant, LossConfig};
use mvam_core::retrieval::{evaluate, export_attention, sweep_views, InstanceRef, RecallRecord};
use mvam_core::trainer::{finish, EpochMetrics, Trainer};
use serde::Serialize;

use config::{read_json, ConfigError, RunConfigFile, CONFIG_HELP};

#[derive(Parser)]
#[command(name = "mvam", version, about = "Multi-view attention pooling: training, retrieval evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-aspect dataset (train/val/test MVF1 files + manifests).
    #[command(after_help = CONFIG_HELP)]
    GenSynth(GenSynthArgs),
    /// Train from a run file; writes last.ckpt, best.ckpt and metrics.jsonl.
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Recall@K in both directions for a checkpoint on one split.
    Eval(EvalArgs),
    /// Dump per-view attention weights for selected instances.
    Attn(AttnArgs),
    /// Compare analytic and central-difference gradients on random problems.
    Gradcheck(GradcheckArgs),
    /// Largest absolute difference per parameter tensor between two checkpoints.
    CkptDiff(CkptDiffArgs),
    /// Train once per view count and report validation recall for each.
    #[command(after_help = CONFIG_HELP)]
    SweepViews(SweepArgs),
}

#[derive(clap::Args)]
struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Bare generator spec (JSON). Flags below override its fields.
    #[arg(long, conflicts_with = "config")]
    spec: Option<PathBuf>,
    /// Run file; its `synth` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training images.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    /// Aspects per image (k).
    #[arg(long)]
    aspects: Option<usize>,
    /// Aspect vocabulary size.
    #[arg(long)]
    vocab: Option<usize>,
    /// Noise tokens per image.
    #[arg(long)]
    noise_tokens: Option<usize>,
    /// Noise tokens per caption.
    #[arg(long)]
    caption_noise_tokens: Option<usize>,
    /// Expected norm of a noise token.
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Token width.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Run file (JSON); omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-synth (or ingested features).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from last.ckpt / best.ckpt / metrics.jsonl in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Cutoffs, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    k: Vec<usize>,
    /// Evaluate on this many contiguous image folds and average.
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the results JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instances, comma-separated, each `image:ID` or `caption:ID`.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<InstanceRef>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    None,
    Base,
    Sqrt,
}

impl From<VariantArg> for DiversityVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::None => DiversityVariant::None,
            VariantArg::Base => DiversityVariant::Base,
            VariantArg::Sqrt => DiversityVariant::Sqrt,
        }
    }
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diversity variant; all three when omitted.
    #[arg(long)]
    variant: Option<VariantArg>,
    /// Random problems (seeds seed, seed+1, ...); view counts cycle 1, 2, 4.
    #[arg(long, default_value_t = 1)]
    instances: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = GRADCHECK_PASS)]
    threshold: f64,
}

#[derive(clap::Args)]
struct CkptDiffArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// View counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 16, 32])]
    views: Vec<usize>,
    #[arg(long, default_value = "val")]
    split: Split,
}

/// Exit 1: bad input or configuration. Exit 2: failure while running.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<mvam_core::Error> for Failure {
    fn from(e: mvam_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read(..) => Failure::Runtime(e.to_string()),
            ConfigError::Schema(..) => Failure::Validation(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Attn(a) => attn(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::CkptDiff(a) => ckpt_diff(a),
        Command::SweepViews(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("plain data serializes"));
}

fn run_file(path: Option<&Path>) -> Result<RunConfigFile, Failure> {
    Ok(match path {
        Some(p) => read_json(p)?,
        None => RunConfigFile::default(),
    })
}

fn pick_dir(flag: Option<PathBuf>, file: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or(file)
        .ok_or_else(|| Failure::Validation(format!("no {what} directory: pass --{what} or set `{what}` in the run file")))
}

fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let mut spec: SynthSpec = match (&a.spec, &a.config) {
        (Some(p), _) => read_json(p)?,
        (None, Some(p)) => read_json::<RunConfigFile>(p)?.synth,
        (None, None) => SynthSpec::default(),
    };
    let overrides = [
        (a.images, &mut spec.num_images),
        (a.val_images, &mut spec.val_images),
        (a.test_images, &mut spec.test_images),
        (a.aspects, &mut spec.aspects_per_image),
        (a.vocab, &mut spec.aspect_vocab_size),
        (a.noise_tokens, &mut spec.noise_tokens),
        (a.caption_noise_tokens, &mut spec.caption_noise_tokens),
        (a.captions_per_image, &mut spec.captions_per_image),
        (a.dim, &mut spec.aspect_dim),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.noise_scale {
        spec.noise_scale = s;
    }
    spec.validate()?;

    let sc = generate_synthetic(&spec)?;
    if !sc.audit.passed() {
        return Err(Failure::Runtime(format!("dataset audit failed: {:?}", sc.audit)));
    }
    let splits = [Some(&sc.corpus.train), Some(&sc.corpus.val), sc.corpus.test.as_ref()];
    for ds in splits.into_iter().flatten() {
        save_split(&a.out, ds)?;
    }
    let spec_path = a.out.join("synth.json");
    let json = serde_json::to_string_pretty(&spec).expect("plain data serializes");
    std::fs::write(&spec_path, json + "\n").map_err(|e| io_failure(&spec_path, e))?;
    print_json(&sc.audit);
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    let test = if manifest_path(dir, Split::Test).exists() {
        Some(load_split(dir, Split::Test)?)
    } else {
        None
    };
    Ok(Corpus::new(load_split(dir, Split::Train)?, load_split(dir, Split::Val)?, test)?)
}

fn load_dataset(dir: &Path, split: Split) -> Result<Dataset, Failure> {
    Ok(load_split(dir, split)?)
}

fn read_log(path: &Path) -> Result<Vec<EpochMetrics>, Failure> {
    let file = File::open(path).map_err(|e| io_failure(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| io_failure(path, e))?;
            config::parse_json(&line)
                .map_err(|e| Failure::Validation(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    best_val_mean_r1: f64,
    final_loss_cl: f64,
}

fn train(a: TrainArgs) -> CmdResult {
    let file = run_file(a.config.as_deref())?;
    file.train.validate()?;
    let data = pick_dir(a.data, file.data, "data")?;
    let out = pick_dir(a.out, file.out, "out")?;
    let corpus = load_corpus(&data)?;
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let (last_path, best_path, log_path) = (out.join("last.ckpt"), out.join("best.ckpt"), out.join("metrics.jsonl"));

    let mut trainer = if a.resume {
        let last: Checkpoint = load_checkpoint(&last_path)?;
        if last.config != file.train {
            return Err(Failure::Validation(format!(
                "{} was trained with a different configuration than the run file",
                last_path.display()
            )));
        }
        let best = match last.best {
            Some(_) => Some(load_checkpoint(&best_path)?),
            None => None,
        };
        let mut log = read_log(&log_path)?;
        // Lines past the checkpoint belong to an epoch whose checkpoint was never written.
        log.truncate(last.epoch);
        Trainer::resume(&corpus, last, best, log)?
    } else {
        Trainer::new(&corpus, file.train.clone())?
    };

    let mut log_file = File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    for m in trainer.log() {
        writeln!(log_file, "{}", m.to_json_line()).map_err(|e| io_failure(&log_path, e))?;
    }
    let mut failure = None;
    let outcome = finish(&mut trainer, &mut |t, m| {
        if let Some(best) = t.best_checkpoint().filter(|b| b.epoch == t.epoch()) {
            save_checkpoint(best, &best_path)?;
        }
        save_checkpoint(&t.checkpoint(), &last_path)?;
        if let Err(e) = writeln!(log_file, "{}", m.to_json_line()).and_then(|_| log_file.flush()) {
            failure = Some(io_failure(&log_path, e));
        }
        Ok(())
    })?;
    if let Some(f) = failure {
        return Err(f);
    }
    let best = outcome.best.best.expect("best checkpoint records its score");
    print_json(&TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: best.epoch,
        best_val_mean_r1: best.mean_r1,
        final_loss_cl: outcome.log.last().map_or(f64::NAN, |m| m.loss_cl),
    });
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    split: Split,
    folds: usize,
    results: Vec<RecallRecord>,
}

fn eval(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data, a.split)?;
    let report = evaluate(&ckpt.params, &ds, &a.k, a.folds)?;
    let output = EvalOutput {
        split: a.split,
        folds: report.folds,
        results: report.records(),
    };
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&output).expect("plain data serializes");
        std::fs::write(path, json + "\n").map_err(|e| io_failure(path, e))?;
    }
    print_json(&output);
    Ok(())
}

fn attn(a: AttnArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data, a.split)?;
    for path in export_attention(&ckpt.params, &ds, &a.ids, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(Failure::Validation(format!("--h must be positive, got {}", a.h)));
    }
    let variants: Vec<DiversityVariant> = match a.variant {
        Some(v) => vec![v.into()],
        None => vec![DiversityVariant::None, DiversityVariant::Base, DiversityVariant::Sqrt],
    };
    println!("{:<6} {:>5} {:<8} {:<16} {:>7} {:>12} {:>12}", "seed", "views", "variant", "tensor", "entries", "max_rel", "max_abs");
    let mut worst = 0.0f64;
    for i in 0..a.instances {
        let seed = a.seed + i;
        let shape = GradCheckShape { views: [1, 2, 4][(i % 3) as usize], ..GradCheckShape::default() };
        let (params, imgs, txts) = gradcheck_problem(&shape, seed)?;
        let batch = PairBatch::new(imgs.iter().collect(), txts.iter().collect())?;
        for &variant in &variants {
            let cfg = LossConfig { variant, ..LossConfig::default() };
            let report = finite_diff_check(&batch, &params, &cfg, a.h)?;
            for t in &report.tensors {
                let flag = if t.max_rel_error < a.threshold { "" } else { "  FAIL" };
                println!(
                    "{seed:<6} {:>5} {:<8} {:<16} {:>7} {:>12.3e} {:>12.3e}{flag}",
                    shape.views,
                    variant.name(),
                    t.name,
                    t.entries,
                    t.max_rel_error,
                    t.max_abs_error
                );
            }
            worst = worst.max(report.max_rel_error());
        }
    }
    println!("max relative error {worst:.3e} (threshold {:.0e})", a.threshold);
    if worst < a.threshold {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {worst:.3e} >= {:.0e}", a.threshold)))
    }
}

fn ckpt_diff(a: CkptDiffArgs) -> CmdResult {
    let (x, y) = (load_checkpoint(&a.a)?, load_checkpoint(&a.b)?);
    for (name, d) in param_diff(&x.params, &y.params)? {
        println!("{name}\t{d:e}");
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CmdResult {
    let file = run_file(a.config.as_deref())?;
    file.train.validate()?;
    let corpus = load_corpus(&pick_dir(a.data, file.data, "data")?)?;
    for row in sweep_views(&corpus, &file.train, &a.views, a.split, &[1, 5, 10])? {
        print_json(&row);
    }
    Ok(())
}
