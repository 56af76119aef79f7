mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use config::{Precision, RunConfig};
use patchocr::checkpoint;
use patchocr::dataset::{load_samples, read_manifest};
use patchocr::generate::recognize;
use patchocr::gradcheck::check_model;
use patchocr::metrics::Protocol;
use patchocr::model::{OcrModel, VocabInfo};
use patchocr::synthgen::{self, StyleMix, SynthSpec};
use patchocr::tensor::Float;
use patchocr::tokenizer::{train_bpe, Vocab};
use patchocr::train::{self, Phase};
use patchocr::vision::preprocess_file;

const OUT_ENV: &str = "PATCHOCR_OUT";

#[derive(Parser, Debug)]
#[command(name = "patchocr", version, about = "Decoder-only transformer text recognition")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; defaults to `$PATCHOCR_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Learn a BPE vocabulary from a corpus or manifest labels.
    TrainTokenizer(TokenizerArgs),
    /// Train from scratch on a manifest.
    Pretrain(TrainArgs),
    /// Continue training a checkpoint at the fine-tuning rate.
    Finetune(FinetuneArgs),
    /// Print the recognized text of each image.
    Recognize(RecognizeArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One label per line; defaults to the built-in word list.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Scene, printed and handwritten fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    mix: Vec<f64>,
}

#[derive(Args, Debug)]
struct TokenizerArgs {
    /// Text corpus, one entry per line.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    corpus: Option<PathBuf>,
    /// Use the labels of a manifest as the corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides `tokenizer.vocab_size`.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeFlags {
    /// Beam width.
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    /// Greedy decoding (beam width 1).
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Args, Debug)]
struct RecognizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// str36, cer or word_prf.
    #[arg(long)]
    protocol: Option<Protocol>,
    #[command(flatten)]
    decode: DecodeFlags,
}

/// Failure classes with distinct exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait DataErr<T> {
    fn data(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> DataErr<T> for Result<T, E> {
    fn data(self) -> Outcome<T> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Verification(msg) => eprintln!("verification failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::TrainTokenizer(_) => "train-tokenizer",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Recognize(_) => "recognize",
        Command::Eval(_) => "eval",
        Command::Gradcheck => "gradcheck",
    }
}

fn decode_overrides(d: &DecodeFlags, sets: &mut Vec<String>) {
    if d.greedy {
        sets.push("generate.beam=1".into());
    }
    if let Some(b) = d.beam {
        sets.push(format!("generate.beam={b}"));
    }
    if let Some(n) = d.max_new {
        sets.push(format!("generate.max_new={n}"));
    }
}

/// Runs `$body` with `T` bound to the configured float type.
macro_rules! dispatch {
    ($p:expr, |$t:ident| $body:expr) => {
        match $p {
            Precision::F32 => {
                type $t = f32;
                $body
            }
            Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn run(cli: Cli) -> Outcome {
    let mut sets = cli.overrides.clone();
    match &cli.command {
        Command::Recognize(a) => decode_overrides(&a.decode, &mut sets),
        Command::Eval(a) => {
            decode_overrides(&a.decode, &mut sets);
            if let Some(p) = a.protocol {
                sets.push(format!("eval.protocol=\"{p}\""));
            }
        }
        Command::TrainTokenizer(a) => {
            if let Some(s) = a.size {
                sets.push(format!("tokenizer.vocab_size={s}"));
            }
        }
        _ => {}
    }
    let cfg = config::resolve(cli.config.as_deref(), &sets).map_err(Failure::Usage)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage(anyhow!("--workers must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    let name = command_name(&cli.command);
    let out = cli.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
    });
    let resolved = cfg.to_toml();
    eprintln!("# resolved configuration ({name})\n{resolved}");
    let save_config = || -> Outcome {
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating {}", out.display()))
            .data()?;
        let p = out.join("config.toml");
        std::fs::write(&p, &resolved)
            .with_context(|| format!("writing {}", p.display()))
            .data()
    };
    match &cli.command {
        Command::Synth(a) => {
            save_config()?;
            synth(a, &out)
        }
        Command::TrainTokenizer(a) => {
            save_config()?;
            train_tokenizer(a, &cfg, &out)
        }
        Command::Pretrain(a) => {
            save_config()?;
            let vocab = Vocab::load(&a.vocab).data()?;
            dispatch!(cfg.precision, |T| {
                let mut model = OcrModel::<T>::new(&cfg.model, &cfg.patch, VocabInfo::from(&vocab), cfg.train.seed)
                    .map_err(|e| Failure::Usage(e.into()))?;
                fit(&mut model, &vocab, &a.manifest, &cfg, Phase::Pretrain, &out)
            })
        }
        Command::Finetune(a) => {
            save_config()?;
            let vocab = Vocab::load(&a.vocab).data()?;
            dispatch!(cfg.precision, |T| {
                let mut model = checkpoint::load::<T>(&a.checkpoint, &vocab).data()?;
                fit(&mut model, &vocab, &a.manifest, &cfg, Phase::Finetune, &out)
            })
        }
        Command::Recognize(a) => {
            let vocab = Vocab::load(&a.vocab).data()?;
            dispatch!(cfg.precision, |T| recognize_images::<T>(a, &vocab, &cfg))
        }
        Command::Eval(a) => {
            save_config()?;
            let vocab = Vocab::load(&a.vocab).data()?;
            dispatch!(cfg.precision, |T| evaluate::<T>(a, &vocab, &cfg, &out))
        }
        Command::Gradcheck => gradcheck(&cfg),
    }
}

fn synth(a: &SynthArgs, out: &Path) -> Outcome {
    let corpus = match &a.corpus {
        Some(p) => synthgen::read_corpus(p).data()?,
        None => synthgen::builtin_corpus(),
    };
    let mix = StyleMix {
        scene: a.mix[0],
        printed: a.mix[1],
        handwritten: a.mix[2],
    };
    mix.validate().map_err(|e| Failure::Usage(e.into()))?;
    let spec = SynthSpec {
        corpus,
        mix,
        count: a.count,
        seed: a.seed,
    };
    let samples = synthgen::generate(&spec).data()?;
    let manifest = synthgen::write_dataset(&samples, out).data()?;
    let counts = mix.counts(a.count);
    println!(
        "wrote {} samples (scene {}, printed {}, handwritten {}) to {}",
        samples.len(),
        counts[0],
        counts[1],
        counts[2],
        manifest.display()
    );
    Ok(())
}

fn train_tokenizer(a: &TokenizerArgs, cfg: &RunConfig, out: &Path) -> Outcome {
    let corpus: Vec<String> = match (&a.corpus, &a.manifest) {
        (Some(p), _) => synthgen::read_corpus(p).data()?,
        (None, Some(m)) => read_manifest(m).data()?.into_iter().map(|e| e.label).collect(),
        (None, None) => return Err(Failure::Usage(anyhow!("need --corpus or --manifest"))),
    };
    let vocab = train_bpe(&corpus, cfg.tokenizer.vocab_size).map_err(|e| Failure::Usage(e.into()))?;
    let path = out.join("vocab.txt");
    vocab.save(&path).data()?;
    println!("vocabulary of {} tokens written to {}", vocab.size(), path.display());
    Ok(())
}

fn fit<T: Float>(
    model: &mut OcrModel<T>,
    vocab: &Vocab,
    manifest: &Path,
    cfg: &RunConfig,
    phase: Phase,
    out: &Path,
) -> Outcome {
    let res = train::train_manifest(model, vocab, manifest, &cfg.train, phase, out).data()?;
    let last = res.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "{} steps, final loss {last:.4}, skipped {} samples; checkpoint {}, log {}",
        res.records.len(),
        res.skipped.len(),
        res.checkpoint.display(),
        res.metrics_log.display()
    );
    Ok(())
}

fn recognize_images<T: Float>(a: &RecognizeArgs, vocab: &Vocab, cfg: &RunConfig) -> Outcome {
    let model = checkpoint::load::<T>(&a.checkpoint, vocab).data()?;
    for path in &a.images {
        let img = preprocess_file(path, model.patch_config().channels).data()?;
        let (text, decoded) = recognize(&model, vocab, &img, &cfg.generate).data()?;
        if !decoded.finished {
            log::warn!("{}: stopped at max_new without [EOS]", path.display());
        }
        println!("{text}");
    }
    Ok(())
}

fn evaluate<T: Float>(a: &EvalArgs, vocab: &Vocab, cfg: &RunConfig, out: &Path) -> Outcome {
    let model = checkpoint::load::<T>(&a.checkpoint, vocab).data()?;
    let entries = read_manifest(&a.manifest).data()?;
    let loaded = load_samples(&entries, vocab, model.patch_config().channels, model.max_text_len());
    if loaded.samples.is_empty() {
        return Err(Failure::Data(anyhow!("no usable samples in {}", a.manifest.display())));
    }
    let report = train::evaluate(&model, vocab, &loaded.samples, &cfg.generate, cfg.eval.protocol).data()?;
    let path = out.join("report.jsonl");
    std::fs::write(&path, report.to_jsonl())
        .with_context(|| format!("writing {}", path.display()))
        .data()?;
    println!("{}", report.summary());
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Outcome {
    let vocab = Vocab::bytes_only();
    let report = check_model(&cfg.model, &cfg.patch, VocabInfo::from(&vocab), &cfg.gradcheck).data()?;
    for p in &report.params {
        println!(
            "{:<32} checked {:>3}  max rel err {:.3e}",
            p.name, p.checked, p.max_rel_err
        );
    }
    println!(
        "max relative error {:.3e} ({}), tolerance {:.0e}",
        report.max_rel_err, report.worst_param, report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "max relative error {:.3e} in {} exceeds {:.0e}",
            report.max_rel_err, report.worst_param, report.tolerance
        )))
    }
}
