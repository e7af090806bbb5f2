use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spgl::checkpoint::Checkpoint;
use spgl::config::RunConfig;
use spgl::data::{parse_events, preprocess, DatasetBundle, FormatDescriptor, GraphSection, Holdout, PreprocessConfig};
use spgl::error::{Error, ErrorKind, Result};
use spgl::eval::{evaluate, popularity_baseline, EvalConfig};
use spgl::graph::{graph_stats, row_normalize};
use spgl::loss::{CeForm, SplScope};
use spgl::model::Preset;
use spgl::synth::{generate, write_tsv, SynthSpec};
use spgl::train::{check_full_loss, graph_for, toy_problem, train, TrainOptions};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nbundle format v1, checkpoint format v1, f64 tensors"
);

#[derive(Parser)]
#[command(name = "spgl", version, long_version = LONG_VERSION, about = "Session-based next-item recommendation")]
struct Cli {
    /// Worker thread cap; 1 gives bit-exact reproducibility.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write JSON-lines logs here instead of stderr.
    #[arg(long, global = true)]
    log_file: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log with planted item chains.
    Synth(SynthArgs),
    /// Turn a raw event log into a dataset bundle.
    Preprocess(PreprocessArgs),
    /// Build the global item graph and store it in the bundle.
    BuildGraph(BuildGraphArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a bundle's test examples.
    Eval(EvalArgs),
    /// Finite-difference check of the full objective on a toy problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write the planted chains, one per line.
    #[arg(long)]
    chains_out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 2000)]
    sessions: usize,
    #[arg(long, default_value_t = 20)]
    chains: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Field delimiter; `tab` or `\t` for tab.
    #[arg(long, default_value = "tab")]
    delimiter: String,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 0.01)]
    max_error_ratio: f64,
    #[arg(long, default_value_t = 5)]
    min_item_freq: usize,
    #[arg(long, default_value_t = 2)]
    min_session_len: usize,
    #[arg(long, default_value_t = 1)]
    min_prefix_len: usize,
    /// Latest fraction of sessions held out for test.
    #[arg(long, conflicts_with = "holdout_window")]
    holdout_fraction: Option<f64>,
    /// Sessions starting within this many time units of the latest start
    /// are held out.
    #[arg(long)]
    holdout_window: Option<i64>,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epsilon: usize,
    /// Include test sessions in the graph.
    #[arg(long)]
    include_test: bool,
    /// Also write a `src<TAB>dst<TAB>weight` edge list.
    #[arg(long)]
    edges_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_spl_scope)]
    spl_scope: Option<SplScope>,
    #[arg(long, value_parser = parse_ce_form)]
    ce_form: Option<CeForm>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    no_spl: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    no_reverse_pos: bool,
    #[arg(long)]
    graph_include_test: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_spl_scope(s: &str) -> std::result::Result<SplScope, String> {
    match s {
        "all_items" => Ok(SplScope::AllItems),
        "batch_items" => Ok(SplScope::BatchItems),
        _ => Err("expected all_items or batch_items".into()),
    }
}

fn parse_ce_form(s: &str) -> std::result::Result<CeForm, String> {
    match s {
        "as_printed" => Ok(CeForm::AsPrinted),
        "softmax_ce" => Ok(CeForm::SoftmaxCe),
        _ => Err("expected as_printed or softmax_ce".into()),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::MissingFile => 5,
        ErrorKind::VocabMismatch => 6,
        ErrorKind::Io => 7,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
        ErrorKind::MissingFile => "missing-file",
        ErrorKind::VocabMismatch => "vocab-mismatch",
        ErrorKind::Io => "io",
    }
}

fn init_logging(cli: &Cli) -> Result<()> {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(cli.log_level).format(|buf, record| {
        let line = json!({
            "level": record.level().as_str(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        writeln!(buf, "{line}")
    });
    if let Some(path) = &cli.log_file {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        builder.target(env_logger::Target::Pipe(Box::new(file)));
    } else {
        builder.target(env_logger::Target::Stderr);
    }
    builder.init();
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_items: a.items,
        sessions: a.sessions,
        chains: a.chains,
        noise: a.noise,
        seed: a.seed,
        min_len: a.min_len,
        max_len: a.max_len,
    };
    let log = generate(&spec)?;
    let file = File::create(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut w = BufWriter::new(file);
    write_tsv(&log.events, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&a.out, e))?;
    if let Some(path) = &a.chains_out {
        let text: String = log.chains.iter().map(|c| c.join("\t") + "\n").collect();
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    println!("wrote {} events in {} sessions to {}", log.events.len(), a.sessions, a.out.display());
    Ok(())
}

fn parse_delimiter(s: &str) -> Result<char> {
    match s {
        "tab" | "\\t" | "\t" => Ok('\t'),
        "comma" => Ok(','),
        _ => {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok(c),
                _ => Err(Error::Config(format!("delimiter must be one character, got {s:?}"))),
            }
        }
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let format = FormatDescriptor {
        delimiter: parse_delimiter(&a.delimiter)?,
        has_header: a.header,
        max_error_ratio: a.max_error_ratio,
    };
    let holdout = match (a.holdout_fraction, a.holdout_window) {
        (_, Some(w)) => Holdout::Window(w),
        (Some(f), None) => Holdout::Fraction(f),
        (None, None) => Holdout::default(),
    };
    let config = PreprocessConfig {
        min_item_freq: a.min_item_freq,
        min_session_len: a.min_session_len,
        holdout,
        min_prefix_len: a.min_prefix_len,
    };
    let file = File::open(&a.input).map_err(|e| io_err(&a.input, e))?;
    let parsed = parse_events(BufReader::new(file), &format)?;
    for err in parsed.errors.iter().take(20) {
        log::warn!("{}:{}: {}", a.input.display(), err.line, err.reason);
    }
    let bundle = preprocess(&parsed.events, &config)?;
    bundle.save(&a.out)?;
    let s = &bundle.stats;
    println!(
        "{} items, {} train / {} test sessions, {} train / {} test examples, mean length {:.2}",
        s.items, s.train_sessions, s.test_sessions, s.train_examples, s.test_examples, s.mean_length
    );
    Ok(())
}

fn cmd_build_graph(a: BuildGraphArgs) -> Result<()> {
    let mut bundle = DatasetBundle::load(&a.input)?;
    let hyper = spgl::model::Hyperparams {
        epsilon: a.epsilon,
        graph_include_test: a.include_test,
        ..Default::default()
    };
    bundle.graph = None;
    let graph = graph_for(&bundle, &hyper)?;
    let stats = graph_stats(&graph);
    if let Some(path) = &a.edges_out {
        fs::write(path, graph.to_edge_list()).map_err(|e| io_err(path, e))?;
    }
    bundle.graph = Some(GraphSection {
        epsilon: a.epsilon,
        include_test: a.include_test,
        graph,
    });
    bundle.save(&a.out)?;
    println!(
        "{} items, {} edges ({} self-loops), density {:.5}",
        stats.items, stats.edges, stats.self_loops, stats.density
    );
    log::info!("graph stats {}", serde_json::to_string(&stats).expect("stats serialize"));
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = RunConfig::resolve(a.config.as_deref(), a.preset)?;
    let h = &mut c.hyper;
    if let Some(v) = a.beta {
        h.beta = v;
    }
    if let Some(v) = a.tau {
        h.tau = v;
    }
    if let Some(v) = a.epochs {
        h.epochs = v;
    }
    if let Some(v) = a.dim {
        h.dim = v;
    }
    if let Some(v) = a.layers {
        h.layers = v;
    }
    if let Some(v) = a.lr {
        h.lr = v;
    }
    if let Some(v) = a.batch_size {
        h.batch_size = v;
    }
    if let Some(v) = a.epsilon {
        h.epsilon = v;
    }
    if let Some(v) = a.seed {
        h.seed = v;
    }
    if let Some(v) = a.spl_scope {
        h.spl_scope = v;
    }
    if let Some(v) = a.ce_form {
        h.ce_form = v;
    }
    if a.no_spl {
        h.use_spl = false;
    }
    if a.no_attention {
        h.use_attention = false;
    }
    if a.no_reverse_pos {
        h.use_reverse_pos = false;
    }
    if a.graph_include_test {
        h.graph_include_test = true;
    }
    if let Some(ks) = &a.ks {
        c.ks = ks.clone();
    }
    if let Some(p) = &a.data {
        c.data = Some(p.clone());
    }
    if let Some(p) = &a.out {
        c.out = Some(p.clone());
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs, threads: Option<usize>) -> Result<()> {
    let config = resolve_train_config(&a)?;
    set_threads(threads.unwrap_or(config.threads))?;
    let data = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data`".into()))?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    let bundle = DatasetBundle::load(&data)?;
    config.echo_to(&out)?;
    let opts = TrainOptions {
        eval: config.eval_config()?,
        select_k: config.ks.iter().copied().max().unwrap_or(20),
        evaluate_each_epoch: true,
        out_dir: Some(out.clone()),
    };
    let outcome = train(&bundle, &config.hyper, &opts)?;
    for r in &outcome.history {
        let test = r.test.as_ref().map_or(String::new(), |t| {
            t.metrics
                .iter()
                .map(|m| format!(" P@{} {:.4} MRR@{} {:.4}", m.k, m.precision, m.k, m.mrr))
                .collect()
        });
        println!("epoch {:>3}  loss {:.5}{}", r.epoch, r.loss.total, test);
    }
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}; outputs in {}", out.display()),
        None => println!("no epochs run; outputs in {}", out.display()),
    }
    Ok(())
}

fn checkpoint_path(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    for candidate in [p.join("checkpoints/best.ckpt"), p.join("best.ckpt")] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::MissingFile(p.to_path_buf()))
}

fn cmd_eval(a: EvalArgs, threads: Option<usize>) -> Result<()> {
    set_threads(threads.unwrap_or(1))?;
    let config = EvalConfig::new(a.ks.clone())?;
    let bundle = DatasetBundle::load(&a.data)?;
    let path = checkpoint_path(&a.checkpoint)?;
    let ck = Checkpoint::load_for_vocab(&path, &bundle.vocab.content_hash())?;
    let adj = row_normalize(&graph_for(&bundle, &ck.hyper)?);
    let model = evaluate(&ck.params, &adj, &bundle.test, &ck.hyper, &config)?;
    let popularity = popularity_baseline(&bundle, &config)?;
    for (name, r) in [("model", &model), ("popularity", &popularity)] {
        let cols: String = r
            .metrics
            .iter()
            .map(|m| format!("  P@{} {:.4}  MRR@{} {:.4}", m.k, m.precision, m.k, m.mrr))
            .collect();
        println!("{name:<10}{cols}");
    }
    if let Some(out) = &a.out {
        write_json(out, &json!({ "model": model, "popularity": popularity }))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = check_full_loss(&toy_problem(a.seed), a.eps)?;
    println!(
        "max relative error {:.3e} over {} entries",
        report.max_rel_error, report.entries_checked
    );
    if report.max_rel_error < a.tolerance {
        Ok(())
    } else {
        Err(Error::GradientCheck(format!(
            "max relative error {:.3e} exceeds {:.1e} (parameter {}, entry {})",
            report.max_rel_error, a.tolerance, report.worst.0, report.worst.1
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    init_logging(&cli)?;
    let threads = cli.threads;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Train(a) => cmd_train(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("error[{}]: {e}", kind_name(kind));
            ExitCode::from(exit_code(kind))
        }
    }
}
