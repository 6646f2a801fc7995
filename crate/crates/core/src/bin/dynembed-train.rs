//! Skip-gram training against the service or the in-process reference.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use dynembed::client::corpus::{tokenize, ZipfCorpus};
use dynembed::client::skipgram::{
    eval_vocab_accuracy, train_skipgram, ReferenceBackend, ServiceBackend, SkipGramConfig, SkipGramData,
    TrainingBackend,
};
use dynembed::client::DynEmbedClient;
use dynembed::{OptimizerKind, OptimizerSpec};

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adagrad,
    Momentum,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum BackendKind {
    Service,
    Reference,
}

#[derive(Parser)]
#[command(about = "Train skip-gram embeddings and report loss and accuracy")]
struct Args {
    /// Whitespace-tokenized text, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Write a synthetic Zipf corpus of this many bytes to --corpus first.
    #[arg(long)]
    generate_zipf: Option<usize>,
    #[arg(long, default_value_t = 32)]
    dim: u32,
    #[arg(long, default_value_t = 5000)]
    steps: u64,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: Opt,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long, value_enum, default_value = "reference")]
    backend: BackendKind,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Keep only the N most frequent tokens; others map to `oov`.
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    master: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    num_sampled: u32,
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// `center context` pairs to evaluate on; defaults to the first 1000 training pairs.
    #[arg(long)]
    heldout: Option<PathBuf>,
}

fn default_lr(kind: OptimizerKind) -> f32 {
    match kind {
        OptimizerKind::Sgd => 5.0,
        OptimizerKind::Adagrad => 0.2,
        OptimizerKind::Momentum => 0.1,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args = Args::parse();
    if let Some(bytes) = args.generate_zipf {
        std::fs::write(&args.corpus, ZipfCorpus::default().generate(bytes))?;
    }
    let text = std::fs::read_to_string(&args.corpus)?;
    let kind = match args.optimizer {
        Opt::Sgd => OptimizerKind::Sgd,
        Opt::Adagrad => OptimizerKind::Adagrad,
        Opt::Momentum => OptimizerKind::Momentum,
    };
    let cfg = SkipGramConfig {
        window: args.window,
        dim: args.dim,
        num_sampled: args.num_sampled,
        optimizer: OptimizerSpec::with_defaults(kind, args.learning_rate.unwrap_or(default_lr(kind))),
        steps: args.steps,
        batch: args.batch,
        seed: args.seed,
        cutoff: args.cutoff,
        ..Default::default()
    };
    let data = SkipGramData::from_text(&text, cfg.window, cfg.cutoff)?;
    let heldout: Vec<(String, String)> = match &args.heldout {
        Some(p) => tokenize(&std::fs::read_to_string(p)?)
            .into_iter()
            .filter(|l| l.len() == 2)
            .map(|l| (l[0].clone(), l[1].clone()))
            .collect(),
        None => dynembed::client::corpus::skipgram_pairs(&tokenize(&text), cfg.window)
            .into_iter()
            .take(1000)
            .collect(),
    };

    let client;
    let backend: Box<dyn TrainingBackend> = match args.backend {
        BackendKind::Reference => Box::new(ReferenceBackend::new(&cfg)?),
        BackendKind::Service => {
            client = DynEmbedClient::connect(&args.master)?;
            Box::new(ServiceBackend::new(&client, &cfg)?)
        }
    };
    let report = train_skipgram(backend.as_ref(), &data, &cfg)?;
    let accuracy = eval_vocab_accuracy(backend.as_ref(), &data.vocab, &heldout, cfg.cutoff, cfg.dim as usize)?;

    std::fs::create_dir_all(&args.out)?;
    let mut trace = String::new();
    for (step, loss) in report.losses.iter().enumerate() {
        writeln!(trace, "{step} {loss}")?;
    }
    std::fs::write(args.out.join("loss.txt"), trace)?;
    let tail = report.losses.len().saturating_sub(1000)..report.losses.len();
    let mut acc = String::new();
    writeln!(
        acc,
        "backend={}",
        if args.backend == BackendKind::Service {
            "service"
        } else {
            "reference"
        }
    )?;
    writeln!(acc, "optimizer={kind:?}")?;
    writeln!(acc, "steps={}", cfg.steps)?;
    writeln!(acc, "seed={}", cfg.seed)?;
    writeln!(
        acc,
        "cutoff={}",
        cfg.cutoff.map_or("none".to_string(), |c| c.to_string())
    )?;
    writeln!(acc, "vocab={}", data.vocab.len())?;
    writeln!(acc, "heldout_pairs={}", heldout.len())?;
    writeln!(acc, "accuracy={accuracy}")?;
    if !tail.is_empty() {
        writeln!(acc, "mean_loss_tail={}", report.mean_loss(tail))?;
    }
    std::fs::write(args.out.join("accuracy.txt"), &acc)?;
    print!("{acc}");
    Ok(())
}
