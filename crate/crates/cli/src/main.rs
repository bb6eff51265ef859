use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use wwh_core::augment::NegativeSource;
use wwh_core::corpus::{corpus_stats, load_corpus, scan_corpus, Demographics, Rtl};
use wwh_core::eval::{evaluate, format_table, run_sweep, EvalOptions, SweepSpec};
use wwh_core::model::{DecodeConfig, ModelConfig, TrainConfig};
use wwh_core::pipeline::{
    blend, build_eval_set, build_training_set, fit, manifest_paths, BlendSpecFile, BuildOptions, CorpusSet, Manifest,
};
use wwh_core::serialize::{read_training_file, write_training_file, LayoutConfig, DEFAULT_MAX_SEQ_LEN};
use wwh_core::synth::{generate_casual_with, generate_mspd_with, Flavor, GeneratorConfig, TemplateBank};
use wwh_core::Checkpoint;
use wwh_service::{router, CheckpointGenerator, Engine, EngineConfig};

#[derive(Parser)]
#[command(name = "wwh", version, about = "Persona-grounded dialogue toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect corpus files.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Generate a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Resolve a blend spec into an instance manifest.
    Blend {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach persona subsets to a manifest and write the training file.
    Augment(AugmentArgs),
    /// Train a model on a training file.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print the loss every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Interactive chat with a checkpoint.
    Chat(ChatArgs),
    /// Evaluate a checkpoint on a held-out corpus.
    Eval(EvalArgs),
    /// Train and evaluate every row of a sweep spec.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Check every episode against the schema.
    Validate { path: PathBuf },
    /// Print corpus statistics.
    Stats {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mspd,
    Daily,
    Knowledge,
    Empathy,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Template bank; the built-in bank when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// TOML file overriding generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Negatives {
    SameUser,
    OtherUser,
    Mixed,
}

impl From<Negatives> for NegativeSource {
    fn from(n: Negatives) -> Self {
        match n {
            Negatives::SameUser => NegativeSource::SameUserIrrelevant,
            Negatives::OtherUser => NegativeSource::OtherUser,
            Negatives::Mixed => NegativeSource::Mixed,
        }
    }
}

#[derive(Args)]
struct AugmentOpts {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "same-user")]
    negatives: Negatives,
    /// Omit the response-type label from the layout.
    #[arg(long)]
    no_rtl: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_SEQ_LEN)]
    max_seq_len: usize,
    /// Template bank used to judge topic overlap.
    #[arg(long)]
    bank: Option<PathBuf>,
}

impl AugmentOpts {
    fn build(&self) -> BuildOptions {
        BuildOptions {
            k: self.k,
            seed: self.seed,
            negative_source: self.negatives.into(),
            layout: LayoutConfig {
                max_seq_len: self.max_seq_len,
                rtl_slot: !self.no_rtl,
            },
        }
    }
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: AugmentOpts,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 24)]
    max_new_tokens: usize,
    /// Sample from the k most likely tokens instead of greedy decoding.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: self.max_new_tokens,
            top_k: self.top_k,
            temperature: self.temperature,
            seed: self.decode_seed,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out corpus file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "same-user")]
    negatives: Negatives,
    /// Evaluate at most this many instances.
    #[arg(long)]
    limit: Option<usize>,
    /// Score F1 and P-Cover against positive attributes only.
    #[arg(long)]
    positives_only: bool,
    /// Also compare forced-PRTL and forced-CRTL responses on personalized contexts.
    #[arg(long)]
    forced: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "me")]
    user: String,
    #[arg(long, default_value = "unknown")]
    gender: String,
    #[arg(long, default_value = "unknown")]
    age_band: String,
    /// Load the persona pool of the corpus episode whose user id matches `--user`.
    #[arg(long)]
    personas: Option<PathBuf>,
    /// Persona attributes retrieved per turn.
    #[arg(long, default_value_t = 5)]
    retrieve_k: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Journal file holding sessions and persona pools.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Seed persona pools from a corpus for users the store does not know.
    #[arg(long)]
    personas: Option<PathBuf>,
    /// Persona attributes retrieved per turn.
    #[arg(long, default_value_t = 5)]
    retrieve_k: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn bank(path: Option<&Path>) -> Result<TemplateBank> {
    Ok(match path {
        Some(p) => TemplateBank::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TemplateBank::builtin(),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn pools(path: &Path) -> Result<Vec<(String, Vec<wwh_core::PersonaAttribute>)>> {
    let c = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(c.episodes.into_iter().map(|e| (e.user_id, e.persona_pool)).collect())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus { command } => corpus(command),
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Blend { spec, seed, out } => {
            let s = BlendSpecFile::load(&spec)?;
            let (m, _) = blend(&s, seed)?;
            m.write(&out)?;
            for d in &m.header.datasets {
                println!(
                    "{:<16} weight {:<6} available {:>7} target {:>7} {:?}",
                    d.id, d.weight, d.available, d.target, d.mode
                );
            }
            println!("{} instances -> {}", m.instances.len(), out.display());
            Ok(())
        }
        Command::Augment(a) => {
            let m = Manifest::read(&a.manifest)?;
            let paths = manifest_paths(&m.header);
            let corpora = CorpusSet::load(paths.iter().map(PathBuf::as_path))?;
            let (h, inst) = build_training_set(&m, &corpora, &a.opts.build(), &bank(a.opts.bank.as_deref())?)?;
            write_training_file(&a.out, &h, &inst)?;
            println!("{} instances, vocab {} -> {}", inst.len(), h.vocab.len(), a.out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            log_every,
        } => {
            let cfg: TrainFile = match config {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => TrainFile::default(),
            };
            let (h, inst) = read_training_file(&data)?;
            let total = cfg.train.total_steps(inst.len());
            let ck: Checkpoint = fit(&h, &inst, cfg.model, &cfg.train, |s| {
                if log_every > 0 && (s.step % log_every == 0 || s.step + 1 == total) {
                    println!("step {:>6}/{total}  loss {:.4}  lr {:.2e}  |g| {:.3}", s.step + 1, s.loss, s.lr, s.grad_norm);
                }
            })?;
            ck.save(&out)?;
            println!("{} parameters, {} steps -> {}", ck.model.n_params(), ck.step, out.display());
            Ok(())
        }
        Command::Chat(a) => chat(a),
        Command::Eval(a) => eval(a),
        Command::Sweep { spec, out } => {
            let s = SweepSpec::load(&spec)?;
            let results = run_sweep(&s, &out, |r| {
                eprintln!("{}: f1 {:.4}, ppl {:.3} ({:.0}s training)", r.name, r.report.f1, r.report.ppl, r.train_seconds)
            })?;
            print!("{}", format_table(&results));
            Ok(())
        }
        Command::Serve(a) => serve(a),
    }
}

fn corpus(cmd: CorpusCommand) -> Result<()> {
    match cmd {
        CorpusCommand::Validate { path } => {
            let scan = scan_corpus(&path)?;
            for (id, vs) in &scan.violations {
                for v in vs {
                    println!("{id}: {v}");
                }
            }
            let n = scan.corpus.episodes.len();
            if scan.violations.is_empty() {
                println!("{}: {} corpus, {n} episodes, ok", path.display(), scan.corpus.kind().as_str());
                Ok(())
            } else {
                bail!("{} of {n} episodes violate the schema", scan.violations.len())
            }
        }
        CorpusCommand::Stats { path, json } => {
            let c = load_corpus(&path)?;
            let s = corpus_stats(&c.episodes)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                print!("{s}");
            }
            Ok(())
        }
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => GeneratorConfig::default(),
    };
    cfg.n_episodes = a.n;
    cfg.seed = a.seed;
    if a.bank.is_some() {
        cfg.template_bank_path = a.bank.clone();
    }
    let bank = cfg.bank()?;
    let c = match a.kind {
        Kind::Mspd => generate_mspd_with(&cfg, &bank)?,
        Kind::Daily => generate_casual_with(&cfg, &bank, Flavor::Daily)?,
        Kind::Knowledge => generate_casual_with(&cfg, &bank, Flavor::Knowledge)?,
        Kind::Empathy => generate_casual_with(&cfg, &bank, Flavor::Empathy)?,
    };
    c.write(&a.out)?;
    println!("{} episodes -> {}", c.episodes.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.data)?;
    let opts = BuildOptions {
        k: a.k,
        seed: a.seed,
        negative_source: a.negatives.into(),
        layout: ck.layout,
    };
    let mut set = build_eval_set(&corpus, &ck.vocab, &opts, &TemplateBank::builtin())?;
    if let Some(n) = a.limit {
        set.truncate(n);
    }
    let report = evaluate(
        &ck,
        &set,
        &EvalOptions {
            decode: a.decode.config(),
            positives_only: a.positives_only,
            forced_comparison: a.forced,
        },
    )?;
    let line = serde_json::to_string(&report)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&a.report)?;
    writeln!(f, "{line}")?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn chat(a: ChatArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let generator = CheckpointGenerator {
        checkpoint: ck,
        decode: a.decode.config(),
    };
    let engine = Engine::in_memory(Arc::new(generator), EngineConfig { top_k: a.retrieve_k });
    if let Some(p) = &a.personas {
        let pool = pools(p)?.into_iter().filter(|(u, _)| *u == a.user);
        let n = engine.preload(pool)?;
        println!("loaded {n} persona attributes for {}", a.user);
    }
    let demographics = Demographics {
        gender: a.gender.clone(),
        age_band: a.age_band.clone(),
    };
    let mut session = engine.create_session(&a.user, demographics.clone())?;
    let rt = runtime()?;
    let mut force: Option<Rtl> = None;
    println!("commands: /force prtl|crtl|off  /persona add <text>|list|del <id>  /reset  /quit");
    let stdin = io::stdin();
    loop {
        print!("> ");
        io::stdout().flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(cmd) = line.strip_prefix('/') {
            let mut parts = cmd.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("quit"), _, _) => break,
                (Some("reset"), _, _) => {
                    session = engine.create_session(&a.user, demographics.clone())?;
                    println!("new session {session}");
                }
                (Some("force"), Some("prtl"), _) => force = Some(Rtl::Prtl),
                (Some("force"), Some("crtl"), _) => force = Some(Rtl::Crtl),
                (Some("force"), Some("off"), _) => force = None,
                (Some("persona"), Some("list"), _) => {
                    for p in engine.list_personas(&a.user)? {
                        println!("  {}  {}", p.id, p.text);
                    }
                }
                (Some("persona"), Some("add"), Some(text)) => match engine.add_persona(&a.user, None, text) {
                    Ok(p) => println!("  added {}", p.id),
                    Err(e) => println!("  {e}"),
                },
                (Some("persona"), Some("del"), Some(id)) => match engine.delete_persona(&a.user, id.trim()) {
                    Ok(p) => println!("  deleted {}", p.id),
                    Err(e) => println!("  {e}"),
                },
                _ => println!("unknown command"),
            }
            continue;
        }
        match rt.block_on(engine.post_message(&session, line, force)) {
            Ok(t) => {
                let rtl = t.rtl.map_or("-".to_string(), |r| r.to_string());
                println!("[{rtl}] {}", t.response);
                let g = &t.diagnostics.grounding;
                println!(
                    "    grounding {:?} {:.2} {}  f1 {:.3}  p_cover {:.3}",
                    g.level,
                    g.similarity,
                    g.matched_id.as_deref().unwrap_or("-"),
                    t.diagnostics.f1,
                    t.diagnostics.p_cover
                );
            }
            Err(e) => println!("error: {e}"),
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    let ck = load_checkpoint(&a.ckpt)?;
    let generator = CheckpointGenerator {
        checkpoint: ck,
        decode: a.decode.config(),
    };
    let engine = Engine::open(Arc::new(generator), EngineConfig { top_k: a.retrieve_k }, &a.store)?;
    if let Some(p) = &a.personas {
        let n = engine.preload(pools(p)?)?;
        tracing::info!(attributes = n, "seeded persona pools");
    }
    let app = router(Arc::new(engine));
    let addr = format!("{}:{}", a.host, a.port);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, app).await?;
        Ok(())
    })
}
