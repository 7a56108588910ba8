use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ssm_compose::attribution::{leave_one_in, leave_one_out};
use ssm_compose::bench::{run_bench, BenchConfig};
use ssm_compose::compose::{compose_piconcat_r, compose_states, ComposedState, Method};
use ssm_compose::corpus::{gen_corpus, read_jsonl, sample_examples, CorpusRecord};
use ssm_compose::eval::{evaluate, retrieval_examples, EvalConfig, EvalMethod};
use ssm_compose::ssm::{ToyModelConfig, ToyModelParams, TokenSequence};
use ssm_compose::store::{write_state_file, StateStore, WriteLock, STORE_PATH_ENV};
use ssm_compose::train::{train, Objective, Optimizer, TrainConfig};
use ssm_compose::Error;

#[derive(Parser)]
#[command(name = "ssmc", version, about = "Compose SSM context states from a database of states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArg {
    /// State database file.
    #[arg(long, env = STORE_PATH_ENV)]
    store: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write freshly initialized model parameters as JSON.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        state_dim: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        conv_width: usize,
        #[arg(long, default_value_t = ssm_compose::ssm::DEFAULT_INIT_SCALE)]
        init_scale: f64,
        #[arg(long, default_value_t = ssm_compose::ssm::DEFAULT_DECAY_BIAS)]
        decay_bias: f64,
    },
    /// Generate the synthetic fact-recall corpus as JSON lines.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        num_docs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every corpus context and insert it into a state database.
    BuildDb {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        store: StoreArg,
    },
    /// Print the id, token count and text of every stored context.
    List {
        #[command(flatten)]
        store: StoreArg,
    },
    /// Compose stored contexts and write the result as a state file.
    Compose {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, default_value = "picaso-r")]
        method: String,
        /// Required for piconcat-r, which re-reads the context tokens.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print per-layer summaries of the composed state.
        #[arg(long)]
        verbose: bool,
        #[arg(required = true)]
        ids: Vec<String>,
    },
    /// Retrieval-conditioned loss and cost of every method for k = 0..=k_max.
    Eval {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,concat,soup,caso,caso-worst,picaso-s,picaso-r,piconcat-r")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 5)]
        k_max: usize,
        /// Evaluate only the first N corpus records.
        #[arg(long)]
        queries: Option<usize>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Operation counts and wall time of each composition method against n.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_value = "soup,caso,picaso-s,picaso-r,piconcat-r")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination for the rows; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// CSV destination for the fitted log-log slopes; stderr when omitted.
        #[arg(long)]
        slopes_csv: Option<PathBuf>,
    },
    /// Train a single-layer model and write the loss curve as CSV.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "bptc")]
        objective: String,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value = "sgd")]
        optimizer: String,
        /// Draw contexts by retrieval from this store (built with the same
        /// model) instead of sampling random distractors.
        #[arg(long)]
        retrieval_store: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        min_contexts: usize,
        #[arg(long, default_value_t = 10)]
        max_contexts: usize,
        /// Probability of shuffling sampled contexts; otherwise the relevant
        /// one is placed last.
        #[arg(long, default_value_t = 0.0)]
        shuffle_prob: f64,
        /// Number of sampled examples (random distractors only); defaults to
        /// one per corpus record.
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        out_params: PathBuf,
        /// Loss curve destination; stdout when omitted.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Rank stored contexts by how much an answer depends on them (JSON).
    Attribute {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        answer: String,
        #[arg(long, value_enum, default_value_t = Mode::Loo)]
        mode: Mode,
        #[arg(long, default_value = "picaso-r")]
        method: String,
        #[arg(required = true)]
        ids: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Loi,
    Loo,
}

fn load_model(path: &Path) -> Result<ToyModelParams> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    let params: ToyModelParams = serde_json::from_reader(BufReader::new(file))
        .map_err(Error::from)
        .with_context(|| format!("reading model {}", path.display()))?;
    params.validate()?;
    Ok(params)
}

fn save_model(path: &Path, params: &ToyModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, params)?;
    w.flush()?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

fn open_store(path: &Path) -> Result<StateStore> {
    StateStore::open(path).with_context(|| format!("opening store {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> Result<Vec<T>> {
    Ok(items.iter().map(|s| s.trim().parse()).collect::<Result<Vec<T>, Error>>()?)
}

fn print_summary(state: &ComposedState) {
    for (l, layer) in state.layers.iter().enumerate() {
        let norm = layer.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (lo, hi) = layer
            .decay
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        eprintln!("layer {l}: |x| = {norm:.6e}, decay in [{lo:.6e}, {hi:.6e}]");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel {
            out,
            seed,
            embed_dim,
            state_dim,
            layers,
            conv_width,
            init_scale,
            decay_bias,
        } => {
            let cfg = ToyModelConfig::new(embed_dim, state_dim, layers).with_conv_width(conv_width);
            let params = ToyModelParams::init_with_scale(cfg, seed, init_scale)?.with_decay_bias(decay_bias);
            save_model(&out, &params)?;
            println!("{}", params.fingerprint());
        }
        Command::GenCorpus { seed, num_docs, out } => {
            let docs = gen_corpus(seed, num_docs)?;
            let mut w = BufWriter::new(File::create(&out)?);
            ssm_compose::corpus::write_jsonl(&mut w, &docs)?;
            w.flush()?;
            println!("{}", docs.len());
        }
        Command::BuildDb { corpus, model, store } => {
            let params = load_model(&model)?;
            let docs = load_corpus(&corpus)?;
            let _lock = WriteLock::acquire(&store.store)?;
            let mut db = if store.store.exists() {
                let db = open_store(&store.store)?;
                db.check_params(&params)?;
                db
            } else {
                StateStore::new(&params)
            };
            for d in &docs {
                db.insert(&d.context_tokens(), &params)
                    .with_context(|| format!("encoding {}", d.id))?;
            }
            db.save(&store.store)?;
            println!("{}", db.len());
        }
        Command::List { store } => {
            let db = open_store(&store.store)?;
            let mut out = io::stdout().lock();
            for id in db.ids() {
                let e = db.entry(id)?;
                writeln!(out, "{id}\t{}\t{}", e.tokens.len(), e.tokens.to_text_lossy())?;
            }
        }
        Command::Compose {
            store,
            method,
            model,
            out,
            verbose,
            ids,
        } => {
            let method: Method = method.parse()?;
            let db = open_store(&store.store)?;
            let entries = db.load_entries(&ids)?;
            let state = match method {
                Method::PiConcatR => {
                    let Some(model) = model else {
                        bail!(Error::InvalidInput("piconcat-r needs --model".into()));
                    };
                    let params = load_model(&model)?;
                    db.check_params(&params)?;
                    let seqs: Vec<TokenSequence> = entries.iter().map(|e| e.tokens.clone()).collect();
                    let mut s = compose_piconcat_r(&seqs, &params)?;
                    s.provenance = ids.clone();
                    s
                }
                other => compose_states(other, &ssm_compose::store::StoreEntry::states(&entries))?,
            };
            if !state.is_finite() {
                return Err(Error::NumericOverflow {
                    step: 0,
                    detail: "composed state is not finite".into(),
                }
                .into());
            }
            let mut w = BufWriter::new(File::create(&out)?);
            write_state_file(&mut w, &state, db.fingerprint())?;
            w.flush()?;
            if verbose {
                print_summary(&state);
            }
            println!("{}", out.display());
        }
        Command::Eval {
            store,
            corpus,
            model,
            methods,
            k_max,
            queries,
            csv,
            json,
        } => {
            let params = load_model(&model)?;
            let db = open_store(&store.store)?;
            let docs = load_corpus(&corpus)?;
            let cfg = EvalConfig {
                methods: parse_list::<EvalMethod>(&methods)?,
                k_max,
                max_queries: queries,
            };
            let report = evaluate(&db, &docs, &params, &cfg)?;
            let mut w = output(csv.as_deref())?;
            report.write_csv(&mut w)?;
            w.flush()?;
            if let Some(path) = json {
                let mut w = BufWriter::new(File::create(path)?);
                serde_json::to_writer_pretty(&mut w, &report)?;
                w.flush()?;
            }
        }
        Command::Bench {
            n_list,
            m,
            layers,
            repeats,
            methods,
            seed,
            csv,
            slopes_csv,
        } => {
            let cfg = BenchConfig {
                n_list,
                m,
                layers,
                repeats,
                methods: parse_list::<Method>(&methods)?,
                seed,
            };
            let report = run_bench(&cfg)?;
            let mut w = output(csv.as_deref())?;
            report.write_csv(&mut w)?;
            w.flush()?;
            match slopes_csv {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(p)?);
                    report.write_slopes_csv(&mut w)?;
                    w.flush()?;
                }
                None => report.write_slopes_csv(io::stderr().lock())?,
            }
        }
        Command::Train {
            corpus,
            model,
            objective,
            steps,
            lr,
            seed,
            batch_size,
            optimizer,
            retrieval_store,
            min_contexts,
            max_contexts,
            shuffle_prob,
            examples,
            out_params,
            loss_csv,
        } => {
            let params = load_model(&model)?;
            let docs = load_corpus(&corpus)?;
            let dataset = match retrieval_store {
                Some(path) => {
                    let db = open_store(&path)?;
                    db.check_params(&params)?;
                    retrieval_examples(&db, &docs, min_contexts, max_contexts, seed)?
                }
                None => sample_examples(
                    &docs,
                    examples.unwrap_or(docs.len()),
                    min_contexts,
                    max_contexts,
                    shuffle_prob,
                    seed,
                )?,
            };
            let cfg = TrainConfig {
                steps,
                lr,
                objective: objective.parse::<Objective>()?,
                seed,
                batch_size,
                optimizer: optimizer.parse::<Optimizer>()?,
            };
            let outcome = train(&dataset, &params, &cfg)?;
            save_model(&out_params, &outcome.params)?;
            let mut w = output(loss_csv.as_deref())?;
            writeln!(w, "# train.v1")?;
            writeln!(w, "step,loss")?;
            for (step, loss) in outcome.losses.iter().enumerate() {
                writeln!(w, "{step},{loss:.12}")?;
            }
            w.flush()?;
        }
        Command::Attribute {
            store,
            model,
            question,
            answer,
            mode,
            method,
            ids,
        } => {
            let params = load_model(&model)?;
            let db = open_store(&store.store)?;
            db.check_params(&params)?;
            let entries = db.load_entries(&ids)?;
            let (q, a) = (TokenSequence::from_text(&question), TokenSequence::from_text(&answer));
            let result = match mode {
                Mode::Loi => leave_one_in(&q, &a, &entries, &params)?,
                Mode::Loo => leave_one_out(&q, &a, &entries, &params, method.parse()?)?,
            };
            let out = serde_json::json!({
                "mode": result.mode,
                "method": result.method,
                "ids": ids,
                "scores": result.scores,
                "selected": result.selected,
                "selected_id": ids[result.selected],
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        return match e {
            Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 2,
            e => e.exit_code() as u8,
        };
    }
    let missing = err
        .chain()
        .any(|e| e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::NotFound));
    if missing {
        2
    } else {
        1
    }
}

/// Output cut short by a closed pipe (e.g. `| head`) is not a failure.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        let io = e
            .downcast_ref::<io::Error>()
            .or_else(|| match e.downcast_ref::<Error>() {
                Some(Error::Io(io)) => Some(io),
                _ => None,
            });
        io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
