//! `hmer`: corpus synthesis, InkML rendering, training, evaluation and plots.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hmer_core::checkpoint::Checkpoint;
use hmer_core::config::{BranchPolicy, TrainConfig};
use hmer_core::data::corpus::{corpus_vocabulary, save_png};
use hmer_core::data::{load_corpus, parse_inkml, render_strokes, synth_sample, write_corpus, Sample, Source, SynthConfig, Vocabulary};
use hmer_core::error::Error;
use hmer_core::eval::evaluate;
use hmer_core::seed::derive_seed;
use hmer_core::trainer::Trainer;

/// Environment variable naming a default training config file.
const CONFIG_ENV: &str = "SEMIHMER_CONFIG";

#[derive(Parser)]
#[command(name = "hmer", version, about = "Handwritten math expression recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (PNG images, manifest and vocabulary).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_labeled: usize,
        #[arg(long, default_value_t = 0)]
        n_unlabeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator settings file (key = value lines).
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Vocabulary file, one token per line [default: built-in symbol set]
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Rasterize an InkML file to a grey PNG.
    RenderInkml {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Train from a config file plus `--key value` overrides.
    Train {
        /// Config file; SEMIHMER_CONFIG is read first when set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Config overrides such as `--train.epochs 3`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Greedy-decode a labeled corpus and report recognition rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Decoder to use (1 or 2) [default: the checkpoint's train.eval_branch]
        #[arg(long)]
        branch: Option<usize>,
        /// Longest decoded sequence [default: the checkpoint's train.max_len]
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Write `prediction TAB reference TAB distance` lines here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train a small model on 10 synthetic samples until it reproduces them.
    OverfitCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optimisation step budget.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Draw per-component loss curves and the learning rate from a metrics log.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code: 2 for bad usage or configuration, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { 2 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, n_labeled, n_unlabeled, seed, grammar, vocab } => {
            cmd_synth(&out, n_labeled, n_unlabeled, seed, grammar.as_deref(), vocab.as_deref())
        }
        Command::RenderInkml { input, out, height } => cmd_render(&input, &out, height),
        Command::Train { config, resume, overrides } => cmd_train(config.as_deref(), resume.as_deref(), &overrides),
        Command::Eval { checkpoint, data, branch, max_len, batch_size, dump } => {
            cmd_eval(&checkpoint, &data, branch, max_len, batch_size, dump.as_deref())
        }
        Command::OverfitCheck { seed, steps } => cmd_overfit(seed, steps),
        Command::Plot { metrics, out } => plot::cmd_plot(&metrics, &out).map_err(runtime),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_vocab(path: Option<&Path>) -> Result<Vocabulary, Failure> {
    Ok(match path {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::crohme(),
    })
}

fn cmd_synth(out: &Path, n_lab: usize, n_unl: usize, seed: u64, grammar: Option<&Path>, vocab: Option<&Path>) -> CmdResult {
    let vocab = load_vocab(vocab)?;
    let cfg = match grammar {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate(&vocab)?;
    let mut samples = Vec::with_capacity(n_lab + n_unl);
    for i in 0..n_lab {
        samples.push(synth_sample(derive_seed(&[seed, 1, i as u64]), &cfg, &vocab)?);
    }
    for i in 0..n_unl {
        let s = synth_sample(derive_seed(&[seed, 2, i as u64]), &cfg, &vocab)?;
        samples.push(Sample::unlabeled(s.image)?);
    }
    write_corpus(out, &vocab, &samples)?;
    println!("wrote {n_lab} labeled and {n_unl} unlabeled samples to {}", out.display());
    Ok(())
}

fn cmd_render(input: &Path, out: &Path, height: usize) -> CmdResult {
    let text = std::fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let doc = parse_inkml(&text)?;
    let image = render_strokes(&doc, height)?;
    save_png(&image, out)?;
    match &doc.annotation {
        Some(a) => println!("{} strokes, label: {a}", doc.strokes.len()),
        None => println!("{} strokes", doc.strokes.len()),
    }
    Ok(())
}

/// Applies `--key value` / `--key=value` pairs.
fn apply_overrides(config: &mut TrainConfig, args: &[String]) -> CmdResult {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(usage(format!("unexpected argument {arg:?}; overrides take the form --key value")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("--{flag} needs a value")))?;
                (flag, v.clone())
            }
        };
        config.set(key, &value)?;
    }
    Ok(())
}

/// Labeled and unlabeled pools from `data.train` plus `data.unlabeled`.
fn load_pools(config: &TrainConfig, vocab: &Vocabulary) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let train = config.data_train.as_ref().ok_or_else(|| usage("data.train is not set"))?;
    let (mut labeled, mut unlabeled): (Vec<Sample>, Vec<Sample>) =
        load_corpus(train, vocab)?.into_iter().partition(Sample::is_labeled);
    if let Some(path) = &config.data_unlabeled {
        for s in load_corpus(path, vocab)? {
            unlabeled.push(Sample { label: Vec::new(), source: Source::Unlabeled, ..s });
        }
    }
    if labeled.is_empty() {
        return Err(runtime(format!("{} has no labeled samples", train.display())));
    }
    labeled.shrink_to_fit();
    Ok((labeled, unlabeled))
}

fn cmd_train(config_path: Option<&Path>, resume: Option<&Path>, overrides: &[String]) -> CmdResult {
    let mut trainer = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            apply_overrides(&mut ck.config, overrides)?;
            ck.config.validate()?;
            let (labeled, unlabeled) = load_pools(&ck.config, &ck.model.vocab)?;
            Trainer::resume(ck, labeled, unlabeled)?
        }
        None => {
            let mut config = TrainConfig::default();
            if let Some(env) = std::env::var_os(CONFIG_ENV) {
                config.apply_file(Path::new(&env))?;
            }
            if let Some(p) = config_path {
                config.apply_file(p)?;
            }
            apply_overrides(&mut config, overrides)?;
            config.validate()?;
            let train = config.data_train.clone().ok_or_else(|| usage("data.train is not set"))?;
            let vocab = match &config.data_vocab {
                Some(p) => Vocabulary::load(p)?,
                None => corpus_vocabulary(&train)?,
            };
            let (labeled, unlabeled) = load_pools(&config, &vocab)?;
            Trainer::new(config, &vocab, labeled, unlabeled)?
        }
    };
    eprintln!(
        "training {} parameters on {} labeled samples, epochs {}..{}",
        trainer.model.num_params(),
        trainer.labeled().len(),
        trainer.epoch,
        trainer.config.epochs
    );
    let history = trainer.run()?;
    if let Some(last) = history.last() {
        println!("{last}");
    }
    if let Some(test) = &trainer.config.data_test {
        let samples = labeled_only(load_corpus(test, &trainer.model.vocab)?, test)?;
        let cfg = &trainer.config;
        let report = evaluate(&trainer.model, &samples, cfg.eval_branch - 1, cfg.max_len, 16)?;
        println!("{report}");
    }
    Ok(())
}

/// Unlabeled entries carry no reference and are skipped.
fn labeled_only(samples: Vec<Sample>, path: &Path) -> Result<Vec<Sample>, Failure> {
    let labeled: Vec<Sample> = samples.into_iter().filter(Sample::is_labeled).collect();
    if labeled.is_empty() {
        return Err(runtime(format!("{} contains no labeled samples", path.display())));
    }
    Ok(labeled)
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    branch: Option<usize>,
    max_len: Option<usize>,
    batch_size: usize,
    dump: Option<&Path>,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    let branch = branch.unwrap_or(ck.config.eval_branch);
    if !(1..=2).contains(&branch) {
        return Err(usage(format!("--branch must be 1 or 2, got {branch}")));
    }
    let samples = labeled_only(load_corpus(data, &ck.model.vocab)?, data)?;
    let report = evaluate(&ck.model, &samples, branch - 1, max_len.unwrap_or(ck.config.max_len), batch_size)?;
    print!("{}", report.table());
    println!("{report}");
    if let Some(path) = dump {
        std::fs::write(path, report.per_sample_dump(&ck.model.vocab))
            .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Settings of the small model used by the overfit check.
pub const OVERFIT_CONFIG: &str = "\
enc.growth = 8
enc.blocks = 3,3
enc.init_ch = 16
train.batch_size = 10
train.branch_policy = all_weak
train.cross = false
";

fn cmd_overfit(seed: u64, steps: usize) -> CmdResult {
    let vocab = Vocabulary::crohme();
    let synth = SynthConfig::default();
    let samples: Vec<Sample> = (0..10)
        .map(|i| synth_sample(derive_seed(&[seed, 0x0f17, i]), &synth, &vocab))
        .collect::<Result<_, _>>()?;
    let mut config = TrainConfig::from_text(OVERFIT_CONFIG)?;
    config.seed = seed;
    config.epochs = steps;
    config.warmup_epochs = steps;
    debug_assert_eq!(config.branch_policy, BranchPolicy::AllWeak);
    let mut trainer = Trainer::new(config, &vocab, samples.clone(), Vec::new())?;
    let mut rate = 0.0;
    while trainer.step < steps {
        trainer.run_epoch(&mut |_| Ok(()))?;
        let report = evaluate(&trainer.model, &samples, 0, trainer.config.max_len, 10)?;
        rate = report.exprate;
        if rate == 1.0 {
            println!("pass: exprate=1.0000 steps={}", trainer.step);
            return Ok(());
        }
    }
    println!("fail: exprate={rate:.4} steps={}", trainer.step);
    Err(runtime(format!("step budget of {steps} exhausted at exprate {rate:.4}")))
}
