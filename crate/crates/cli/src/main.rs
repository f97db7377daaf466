mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "docnmt", version, about = "Multilingual document-level translation experiments")]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Manifest path, relative to the workdir.
    #[arg(long, global = true, default_value = "manifest.toml")]
    manifest: PathBuf,
    /// Manifest override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set experiment.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate corpora, train the vocabulary and write statistics.
    Prepare,
    /// Pretrain the multilingual sentence-level model.
    Train,
    /// Finetune the pretrained model on the manifest's schedule.
    Finetune,
    /// Translate a document corpus file.
    Translate(commands::TranslateArgs),
    /// Synthesize pseudo documents for teacher pairs from monolingual data.
    Backtranslate(commands::PairsArgs),
    /// Score hypothesis documents against references.
    Evaluate(commands::EvaluateArgs),
    /// Contrastive pronoun accuracy of a trained model.
    Contrastive(commands::ContrastiveArgs),
    /// Run the manifest's transfer grid.
    Sweep,
    /// Write a synthetic cipher-language corpus set.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory, relative to the workdir.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "xa,xb,xc")]
    pub languages: Vec<String>,
    /// Training documents per language (one value, or one per language).
    #[arg(long, value_delimiter = ',', default_value = "400")]
    pub train_docs: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    pub test_docs: usize,
    #[arg(long, default_value_t = 100)]
    pub mono_docs: usize,
    #[arg(long, default_value_t = 300)]
    pub items: usize,
    /// Translate into English instead of out of it.
    #[arg(long)]
    pub many_to_one: bool,
    #[arg(long = "synth-seed", default_value_t = 1)]
    pub synth_seed: u64,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<docnmt::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
        if cause.is::<manifest::ManifestError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    let manifest = cli.workdir.join(&cli.manifest);
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&cli.workdir, &args),
        command => commands::Ctx::load(&cli.workdir, &manifest, &overrides).and_then(|ctx| match command {
            Command::Prepare => ctx.prepare(),
            Command::Train => ctx.train(),
            Command::Finetune => ctx.finetune(),
            Command::Translate(a) => ctx.translate(&a),
            Command::Backtranslate(a) => ctx.backtranslate(&a),
            Command::Evaluate(a) => ctx.evaluate(&a),
            Command::Contrastive(a) => ctx.contrastive(&a),
            Command::Sweep => ctx.sweep(),
            Command::Synth(_) => unreachable!("handled above"),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
