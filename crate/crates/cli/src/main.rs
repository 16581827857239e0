use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracing::info;

use layout_mcl_client::Client;
use layout_mcl_core::api::{self, Format, GenerateRequest, GenerateResponse, SoftItem};
use layout_mcl_core::layout::{
    corpus_hash, load_corpus, save_corpus, synth_grammar, CategoryVocabulary, FilterRules, Layout, Profile,
    WireObject,
};
use layout_mcl_core::mcl::LossKind;
use layout_mcl_core::metrics::{self, train_discriminator, Discriminator, DiscriminatorConfig};
use layout_mcl_core::model::ModelConfig;
use layout_mcl_core::toylab::{compare_variants, write_comparison, ToySummary, ToyTask};
use layout_mcl_core::trainer::{TrainConfig, Trainer, Warmup};
use layout_mcl_service::{serve, AppState, Snapshot};

const TOY_MANIFEST: &str = "toy.json";

#[derive(Parser)]
#[command(name = "layout-mcl", version, about = "Diverse layout generation with multi-choice learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    Synth {
        #[arg(long, default_value = "double-column-doc")]
        profile: Profile,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Generate candidates locally or through a running server.
    Generate(GenerateArgs),
    /// Train a real-vs-fake discriminator for FID and fake-positive scores.
    Discriminator {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DiscriminatorConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = DiscriminatorConfig::default().magnitude)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a generated corpus; alignment only without a discriminator.
    Eval {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        discriminator: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the 2-D toy experiment and write CSV snapshots.
    Toy {
        #[arg(long, default_value = "mcl")]
        variant: Vec<LossKind>,
        #[arg(long, default_value_t = 3)]
        gts: usize,
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = ToyTask::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP generation API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Print a checkpoint manifest with its pairing summary.
    Inspect { dir: PathBuf },
}

#[derive(Args)]
struct VocabArgs {
    /// Built-in vocabulary to use.
    #[arg(long, default_value = "double-column-doc")]
    profile: Profile,
    /// JSON array of category names; overrides --profile.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl VocabArgs {
    fn load(&self) -> Result<CategoryVocabulary> {
        Ok(match &self.vocab {
            Some(p) => CategoryVocabulary::from_file(p)?,
            None => self.profile.vocabulary(),
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    /// JSON-lines corpus; when absent a synthetic corpus of --synth layouts is drawn.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    synth: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ModelConfig::default().m)]
    m: usize,
    #[arg(long, default_value = "mcl")]
    loss: LossKind,
    /// Leading phase `LOSS:EPOCHS` (for example `ewta:10`) before --loss takes over.
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inclusive aspect window `MIN:MAX` for file corpora.
    #[arg(long)]
    aspect: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, conflicts_with = "server", required_unless_present = "server")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    server: Option<String>,
    /// Full request body as JSON; other request flags are ignored.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Hard object `category:x,y,w,h`; repeatable, in order.
    #[arg(long)]
    hard: Vec<String>,
    /// Soft object `category` or `category:WxH`; repeatable, in order.
    #[arg(long)]
    soft: Vec<String>,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_numbers(s: &str, sep: char, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(sep)
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad numbers `{s}`"))?;
    if v.len() != n {
        bail!("expected {n} numbers in `{s}`");
    }
    Ok(v)
}

fn parse_warmup(s: &str) -> Result<Warmup> {
    let (loss, epochs) = s.split_once(':').context("warmup must be `loss:epochs`")?;
    Ok(Warmup {
        loss: loss.parse()?,
        epochs: epochs.parse().with_context(|| format!("bad warmup epochs `{epochs}`"))?,
    })
}

fn parse_hard(s: &str) -> Result<WireObject> {
    let (cat, rest) = s.split_once(':').context("hard object must be `category:x,y,w,h`")?;
    let b = parse_numbers(rest, ',', 4)?;
    Ok(WireObject {
        category: cat.to_owned(),
        bbox: [b[0], b[1], b[2], b[3]],
    })
}

fn parse_soft(s: &str) -> Result<SoftItem> {
    Ok(match s.split_once(':') {
        Some((cat, size)) => {
            let v = parse_numbers(size, 'x', 2)?;
            SoftItem {
                category: cat.to_owned(),
                size: Some([v[0], v[1]]),
            }
        }
        None => SoftItem {
            category: s.to_owned(),
            size: None,
        },
    })
}

impl GenerateArgs {
    fn request(&self) -> Result<GenerateRequest> {
        if let Some(p) = &self.request {
            return Ok(serde_json::from_slice(&std::fs::read(p)?)?);
        }
        Ok(GenerateRequest {
            hard: self.hard.iter().map(|s| parse_hard(s)).collect::<Result<_>>()?,
            soft: self.soft.iter().map(|s| parse_soft(s)).collect::<Result<_>>()?,
            count: self.count,
            seed: self.seed,
            format: serde_json::from_value(serde_json::Value::String(self.format.clone()))
                .with_context(|| format!("unknown format `{}` (json|svg)", self.format))?,
            ..GenerateRequest::default()
        })
    }
}

/// Reads JSON lines, or the saved output of `generate`.
fn load_layouts(path: &Path, vocab: &CategoryVocabulary) -> Result<Vec<Layout>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(response) = serde_json::from_slice::<GenerateResponse>(&bytes) {
        let source = path.display().to_string();
        return response
            .candidates
            .iter()
            .map(|c| Ok(c.layout.to_layout(vocab, &source)?))
            .collect();
    }
    let (layouts, report) = load_corpus(path, vocab, &FilterRules::default())?;
    info!(path = %path.display(), loaded = report.loaded, dropped = report.dropped_count, "corpus");
    Ok(layouts)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ToyManifest {
    task: ToyTask,
    runs: Vec<ToyRunSummary>,
}

#[derive(Serialize, Deserialize)]
struct ToyRunSummary {
    variant: LossKind,
    seed: u64,
    summary: ToySummary,
    unpaired_probability: f64,
    poor_probability: f64,
}

fn train(args: TrainArgs) -> Result<()> {
    let vocab = args.vocab.load()?;
    let corpus = match &args.corpus {
        Some(p) => {
            let mut rules = FilterRules::default();
            if let Some(a) = &args.aspect {
                let v = parse_numbers(a, ':', 2)?;
                rules.aspect_range = Some((v[0], v[1]));
            }
            let (layouts, report) = load_corpus(p, &vocab, &rules)?;
            info!(loaded = report.loaded, dropped = report.dropped_count, "corpus");
            layouts
        }
        None => synth_grammar(args.seed, args.synth, args.vocab.profile),
    };
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        loss: args.loss,
        seed: args.seed,
        warmup: args.warmup.as_deref().map(parse_warmup).transpose()?,
        model: ModelConfig {
            m: args.m,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &corpus, vocab.clone()).with_out_dir(&args.out);
    trainer.corpus_hash = Some(corpus_hash(&corpus, &vocab)?);
    let outcome = trainer.run()?;
    println!(
        "best epoch {} loss {:.5}; paired {} unpaired mass {:.4}; checkpoint {}",
        outcome.log.best_epoch,
        outcome.log.best_eval.total,
        outcome.pairing.paired_count,
        outcome.pairing.unpaired_mass,
        args.out.display()
    );
    Ok(())
}

async fn generate(args: GenerateArgs) -> Result<()> {
    let request = args.request()?;
    let response: GenerateResponse = match (&args.checkpoint, &args.server) {
        (Some(dir), _) => {
            let snap = Snapshot::load(dir)?;
            tokio::task::spawn_blocking(move || api::generate(&snap.model, snap.pairing.as_ref(), &request)).await??
        }
        (None, Some(url)) => Client::new(url.clone()).generate(&request).await?,
        (None, None) => bail!("one of --checkpoint or --server is required"),
    };
    let text = if request_format(&args)? == Format::Svg && args.out.is_none() {
        response
            .candidates
            .iter()
            .filter_map(|c| c.svg.clone())
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        serde_json::to_string_pretty(&response)?
    };
    write_output(args.out.as_deref(), &text)
}

fn request_format(args: &GenerateArgs) -> Result<Format> {
    Ok(args.request()?.format)
}

fn inspect(dir: &Path) -> Result<()> {
    let toy = dir.join(TOY_MANIFEST);
    if toy.exists() {
        let m: ToyManifest = serde_json::from_slice(&std::fs::read(&toy)?)?;
        for r in &m.runs {
            println!(
                "toy {} seed {}: P={} unpaired_mass={:.4} stuck={}",
                r.variant, r.seed, r.summary.paired_count, r.summary.unpaired_mass, r.summary.stuck_count
            );
        }
        return Ok(());
    }
    let snap = Snapshot::load(dir)?;
    let manifest = snap.model.manifest();
    println!("checkpoint {}", snap.checkpoint);
    println!("categories {}", manifest.vocabulary.names().join(","));
    println!("model {}", serde_json::to_string(&manifest.model)?);
    println!("parameters {}", snap.model.params.num_scalars());
    match &snap.pairing {
        Some(p) => println!("P={} unpaired_mass={:.4} tau={}", p.paired_count, p.unpaired_mass, p.tau),
        None => println!("no pairing report"),
    }
    Ok(())
}

fn toy(variant: Vec<LossKind>, gts: usize, m: usize, steps: usize, seeds: u64, out: &Path) -> Result<()> {
    let task = ToyTask {
        m,
        steps,
        ..ToyTask::with_ground_truths(gts)
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = if seeds.len() >= 5 {
        compare_variants(&task, &variant, &seeds)?
    } else {
        bail!("--seeds must be at least 5");
    };
    write_comparison(&rows, out)?;
    let runs = rows
        .iter()
        .flat_map(|row| {
            row.runs.iter().map(|r| ToyRunSummary {
                variant: row.kind,
                seed: r.seed,
                summary: r.summary.clone(),
                unpaired_probability: r.unpaired_probability,
                poor_probability: r.poor_probability,
            })
        })
        .collect();
    std::fs::write(out.join(TOY_MANIFEST), serde_json::to_vec_pretty(&ToyManifest { task, runs })?)?;
    for row in &rows {
        println!(
            "{}: unpaired {:.4}±{:.4} poor {:.4}±{:.4} stuck {:.2} coverage {:.2}",
            row.kind,
            row.unpaired_probability.mean,
            row.unpaired_probability.std,
            row.poor_probability.mean,
            row.poor_probability.std,
            row.stuck_count.mean,
            row.coverage.mean
        );
    }
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { profile, count, seed, out } => {
            save_corpus(&out, &synth_grammar(seed, count, profile), &profile.vocabulary())?;
            println!("wrote {count} {profile} layouts to {}", out.display());
        }
        Command::Train(args) => tokio::task::spawn_blocking(move || train(args)).await??,
        Command::Generate(args) => generate(args).await?,
        Command::Discriminator { vocab, real, out, epochs, magnitude, seed } => {
            let vocab = vocab.load()?;
            let real = load_layouts(&real, &vocab)?;
            let config = DiscriminatorConfig {
                epochs,
                magnitude,
                seed,
                ..DiscriminatorConfig::default()
            };
            let d = tokio::task::spawn_blocking(move || train_discriminator(&real, &vocab, config)).await??;
            d.save_dir(&out)?;
            println!("{}", serde_json::to_string_pretty(&d.report)?);
        }
        Command::Eval { vocab, real, generated, discriminator, report } => {
            let vocab = vocab.load()?;
            let generated = load_layouts(&generated, &vocab)?;
            let real = real.map(|p| load_layouts(&p, &vocab)).transpose()?;
            let disc = discriminator.map(|p| Discriminator::load_dir(&p)).transpose()?;
            let r = metrics::evaluate(&generated, real.as_deref(), disc.as_ref(), &vocab)?;
            write_output(report.as_deref(), &serde_json::to_string_pretty(&r)?)?;
        }
        Command::Toy { variant, gts, m, steps, seeds, out } => {
            tokio::task::spawn_blocking(move || toy(variant, gts, m, steps, seeds, &out)).await??
        }
        Command::Serve { checkpoint, host, port } => {
            let snap = Snapshot::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
            serve(listener, AppState::new(snap)).await?;
        }
        Command::Inspect { dir } => inspect(&dir)?,
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
