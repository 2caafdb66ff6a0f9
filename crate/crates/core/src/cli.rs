//! `ragforge` command line. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::AppConfig;
use crate::dataset::{read_records, write_dataset, DocFormat, QAExample, RetrievalPairExample, ValidationOptions};
use crate::eval::{evaluate_generation, evaluate_retrieval, write_report, GenerationMetric, RetrievalEval};
use crate::gateway::{Gateway, ModelRole};
use crate::knowledge::{BuildOptions, ChunkingConfig, IngestOptions, KbStore, KnowledgeBase};
use crate::retrieval::{search, search_then_rerank, IvfConfig, IvfIndex, SearchBackend};
use crate::service::AppState;
use crate::synth::{
    build_ddr_preferences, build_kbalign_sft, export_training_files, mine_hard_negatives, synthesize_queries,
    ExportFormat, SynthesisConfig, TrainingRecord,
};
use crate::templates::TemplateSet;
use crate::workflow::{new_run_id, stream_run, RunContext, TraceStore, WorkflowConfig, WorkflowKind};

#[derive(Parser, Debug)]
#[command(name = "ragforge", version, about = "Retrieval-augmented generation toolkit")]
pub struct Cli {
    /// Service and storage config; defaults to `./ragforge.toml` when present.
    #[arg(long = "ragforge-config", global = true)]
    pub ragforge_config: Option<PathBuf>,
    /// Model registry; overrides the config's `models`.
    #[arg(long, global = true)]
    pub models: Option<PathBuf>,
    /// Data directory; overrides config and environment.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Knowledge-base management.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Top-k search; prints one JSON hit per line.
    Search(SearchArgs),
    /// Runs an inference workflow.
    Run(RunArgs),
    /// Builds training data from a knowledge base.
    Synth(SynthArgs),
    /// Evaluates retrieval or generation over a QA dataset.
    Eval(EvalArgs),
    /// Starts the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum KbCommand {
    /// Adds documents, creating the knowledge base if needed.
    Ingest(IngestArgs),
    /// Embeds all chunks and marks the index ready.
    Build(BuildArgs),
    /// Prints knowledge-base status as JSON.
    Stat(KbArg),
}

#[derive(Args, Debug)]
pub struct KbArg {
    #[arg(long)]
    pub kb: String,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub kb: String,
    /// File or directory to ingest.
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DocFormat>,
    #[arg(long, default_value_t = 512)]
    pub chunk_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub overlap: f64,
    /// Embedder for a new knowledge base; defaults to the first registered.
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub text_column: Option<String>,
    #[arg(long)]
    pub id_column: Option<String>,
}

fn parse_format(s: &str) -> Result<DocFormat, String> {
    s.parse::<DocFormat>().map_err(|f| format!("unknown format `{f}` (txt, markdown, jsonl, csv)"))
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub kb: String,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub kb: String,
    #[arg(long)]
    pub query: String,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Use the inverted-file index.
    #[arg(long)]
    pub approx: bool,
    #[arg(long)]
    pub n_probes: Option<usize>,
    #[arg(long)]
    pub reranker: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WorkflowArg {
    Vanilla,
    Deepnote,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub workflow: Option<WorkflowArg>,
    #[arg(long)]
    pub kb: Option<String>,
    #[arg(long)]
    pub query: String,
    /// Print events as JSON lines while the run progresses.
    #[arg(long)]
    pub stream: bool,
    /// `workflow.toml`; flags override its values.
    #[arg(long)]
    pub workflow_config: Option<PathBuf>,
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub reranker: Option<String>,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum SynthKind {
    Queries,
    Negatives,
    Ddr,
    Kbalign,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub kb: String,
    /// `synth.toml`.
    #[arg(long = "config")]
    pub synth_config: Option<PathBuf>,
    /// Output in the unified dataset format.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write trainer-ready JSONL here (negatives, ddr, kbalign).
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long)]
    pub generator: Option<String>,
    /// Input records: retrieval pairs for `negatives`, QA examples for `ddr`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EvalKind {
    Retrieval,
    Generation,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub kind: EvalKind,
    #[arg(long)]
    pub kb: String,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workflow_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub workflow: Option<WorkflowArg>,
    #[arg(long)]
    pub generator: Option<String>,
    /// Comma-separated: rouge_l, exact_match, token_f1.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// 0 binds an ephemeral port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// `ragforge.toml`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Runtime failure with its message for standard error.
#[derive(Debug)]
pub struct Failure {
    pub usage: bool,
    pub message: String,
}

fn fail(e: impl std::fmt::Display) -> Failure {
    Failure { usage: false, message: e.to_string() }
}

fn usage(m: impl Into<String>) -> Failure {
    Failure { usage: true, message: m.into() }
}

type CliResult = Result<(), Failure>;

struct Env {
    cfg: AppConfig,
    gw: Gateway,
    store: KbStore,
    templates: TemplateSet,
}

impl Env {
    fn load(cli: &Cli, config: Option<&Path>) -> Result<Self, Failure> {
        let default = Path::new("ragforge.toml");
        let path = config.or(cli.ragforge_config.as_deref()).or(default.is_file().then_some(default));
        let mut cfg = AppConfig::load(path).map_err(fail)?;
        if let Some(m) = &cli.models {
            cfg.models = Some(m.clone());
        }
        if let Some(d) = &cli.data_dir {
            cfg.data_dir = d.clone();
        }
        let state = AppState::from_config(cfg.clone()).map_err(fail)?;
        Ok(Self { store: KbStore::new(cfg.kb_dir()), gw: state.gw, templates: state.templates, cfg })
    }

    fn kb(&self, id: &str) -> Result<KnowledgeBase, Failure> {
        self.store.load(id).map_err(fail)
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(v).expect("output serializes"));
}

/// Parses arguments and runs; the process exit code follows the module
/// contract.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(if f.usage { 1 } else { 2 })
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    if let Command::Serve(args) = &cli.command {
        return serve(&cli, args);
    }
    let env = Env::load(&cli, None)?;
    match cli.command {
        Command::Kb(KbCommand::Ingest(a)) => kb_ingest(&env, a),
        Command::Kb(KbCommand::Build(a)) => kb_build(&env, a),
        Command::Kb(KbCommand::Stat(a)) => {
            print_json(&env.kb(&a.kb)?.status());
            Ok(())
        }
        Command::Search(a) => search_cmd(&env, a),
        Command::Run(a) => run_cmd(&env, a),
        Command::Synth(a) => synth_cmd(&env, a),
        Command::Eval(a) => eval_cmd(&env, a),
        Command::Serve(_) => unreachable!("handled above"),
    }
}

fn kb_ingest(env: &Env, a: IngestArgs) -> CliResult {
    let mut kb = if env.store.exists(&a.kb) {
        env.kb(&a.kb)?
    } else {
        let embedder = match a.embedder {
            Some(e) => e,
            None => env
                .gw
                .list()
                .into_iter()
                .find(|s| s.role == ModelRole::Embedder)
                .map(|s| s.model_id)
                .ok_or_else(|| usage("no --embedder given and no embedder registered"))?,
        };
        let dim = env.gw.embedding_dim(&embedder).map_err(fail)?;
        KnowledgeBase::new(&a.kb, ChunkingConfig::new(a.chunk_size, a.overlap), &embedder, dim).map_err(fail)?
    };
    let format = match a.format {
        Some(f) => f,
        // a directory without --format holds plain-text files
        None if a.path.is_dir() => DocFormat::Txt,
        None => a
            .path
            .extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| usage("cannot infer --format from the path"))?,
    };
    let opts = IngestOptions { text_column: a.text_column, id_column: a.id_column };
    let added = kb.ingest(&a.path, format, &opts).map_err(fail)?;
    env.store.save(&kb).map_err(fail)?;
    print_json(&serde_json::json!({ "kb_id": kb.kb_id(), "added": added, "status": kb.status() }));
    Ok(())
}

fn kb_build(env: &Env, a: BuildArgs) -> CliResult {
    let mut kb = env.kb(&a.kb)?;
    let result = kb.build_index(&env.gw, &BuildOptions { batch_size: a.batch_size, parallelism: a.parallelism });
    // keep committed batches even when the build aborts
    env.store.save(&kb).map_err(fail)?;
    print_json(&result.map_err(fail)?);
    Ok(())
}

fn search_cmd(env: &Env, a: SearchArgs) -> CliResult {
    let kb = env.kb(&a.kb)?;
    let hits = match (&a.reranker, a.approx) {
        (Some(r), _) => search_then_rerank(&kb, &env.gw, &a.query, (a.k * 4).max(a.k), a.k, r),
        (None, true) => {
            let cfg = IvfConfig { n_probes: a.n_probes, ..IvfConfig::default() };
            let ivf = IvfIndex::build(&kb, &cfg).map_err(fail)?;
            search(&kb, &env.gw, &a.query, a.k, &SearchBackend::Approx(&ivf))
        }
        (None, false) => search(&kb, &env.gw, &a.query, a.k, &SearchBackend::Exact),
    }
    .map_err(fail)?;
    for h in hits {
        let text = kb.chunk(&h.chunk_id).map(|c| c.text.clone());
        print_json(&serde_json::json!({ "chunk_id": h.chunk_id, "score": h.score, "rank": h.rank, "text": text }));
    }
    Ok(())
}

fn workflow_config(
    path: Option<&Path>,
    workflow: Option<WorkflowArg>,
    kb: Option<String>,
    generator: Option<String>,
) -> Result<WorkflowConfig, Failure> {
    let kind = |w: WorkflowArg| match w {
        WorkflowArg::Vanilla => WorkflowKind::Vanilla,
        WorkflowArg::Deepnote => WorkflowKind::Deepnote,
    };
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(format!("{}: {e}", p.display())))?;
            let mut v: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            // flags may supply fields the file leaves out
            if let Some(w) = workflow {
                v.insert("workflow".into(), toml::Value::String(format!("{:?}", kind(w)).to_lowercase()));
            }
            if let Some(k) = &kb {
                v.insert("kb_id".into(), toml::Value::String(k.clone()));
            }
            if let Some(g) = &generator {
                v.insert("generator_id".into(), toml::Value::String(g.clone()));
            }
            WorkflowConfig::from_toml_str(&toml::to_string(&v).expect("table serializes")).map_err(|e| usage(e.to_string()))?
        }
        None => {
            let kb = kb.ok_or_else(|| usage("--kb is required"))?;
            let generator = generator.ok_or_else(|| usage("--generator is required without --workflow-config"))?;
            WorkflowConfig::new(kind(workflow.unwrap_or(WorkflowArg::Vanilla)), &kb, &generator)
        }
    };
    cfg.fill_defaults();
    Ok(cfg)
}

fn run_cmd(env: &Env, a: RunArgs) -> CliResult {
    if a.kb.is_none() && a.workflow_config.is_none() {
        return Err(usage("--kb is required"));
    }
    let generator = a.generator.clone().or_else(|| {
        env.gw.list().into_iter().find(|s| s.role == ModelRole::Generator).map(|s| s.model_id)
    });
    let mut cfg = workflow_config(a.workflow_config.as_deref(), a.workflow, a.kb, generator)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if a.max_iterations.is_some() {
        cfg.max_iterations = a.max_iterations;
    }
    if a.reranker.is_some() {
        cfg.reranker_id = a.reranker;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let kb = env.kb(&cfg.kb_id)?;
    let ctx = RunContext { kb: &kb, gw: &env.gw, templates: &env.templates };
    let run_id = a.run_id.unwrap_or_else(new_run_id);
    let traces = TraceStore::new(env.cfg.traces_dir());
    let stdout = std::io::stdout();
    let stream = a.stream;
    let trace = stream_run(&cfg, &ctx, &a.query, &run_id, Some(&traces), &mut |e| {
        if stream {
            let mut out = stdout.lock();
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("event serializes"));
            let _ = out.flush();
        }
    })
    .map_err(fail)?;
    if !stream {
        print_json(&serde_json::json!({ "run_id": trace.run_id, "final_answer": trace.final_answer, "trace": trace }));
    }
    Ok(())
}

fn synth_cmd(env: &Env, a: SynthArgs) -> CliResult {
    let cfg = match &a.synth_config {
        Some(p) => SynthesisConfig::from_toml_file(p).map_err(|e| usage(e.to_string()))?,
        None => SynthesisConfig::default(),
    };
    let kb = env.kb(&a.kb)?;
    let generator = || {
        a.generator
            .clone()
            .or_else(|| env.gw.list().into_iter().find(|s| s.role == ModelRole::Generator).map(|s| s.model_id))
            .ok_or_else(|| usage("--generator is required"))
    };
    let input = || a.input.clone().ok_or_else(|| usage("--input is required"));
    let opts = ValidationOptions { reward_gap_min: cfg.reward_gap_min };
    let (count, records, format) = match a.kind {
        SynthKind::Queries => {
            let r = synthesize_queries(&kb, &env.gw, &generator()?, &cfg, &env.templates).map_err(fail)?;
            let pairs: Vec<RetrievalPairExample> = r
                .pairs
                .into_iter()
                .map(|p| RetrievalPairExample {
                    query: p.query,
                    positive_chunk_ids: vec![p.source_chunk_id],
                    negative_chunk_ids: vec![],
                    metadata: [("template_id".to_string(), r.template_id.clone())].into(),
                })
                .collect();
            eprintln!("{} chunks sampled, {} duplicate queries removed", r.chunks_sampled, r.duplicates_removed);
            let n = write_dataset(&pairs, &a.out).map_err(fail)?;
            (n, pairs.into_iter().map(TrainingRecord::RetrievalPair).collect::<Vec<_>>(), ExportFormat::RetrievalJsonl)
        }
        SynthKind::Negatives => {
            let pairs: Vec<RetrievalPairExample> = read_records(&input()?, &opts).map_err(fail)?;
            let pairs: Vec<(String, Vec<String>)> = pairs.into_iter().map(|p| (p.query, p.positive_chunk_ids)).collect();
            let out = mine_hard_negatives(&kb, &env.gw, &pairs, &cfg).map_err(fail)?;
            let n = write_dataset(&out, &a.out).map_err(fail)?;
            (n, out.into_iter().map(TrainingRecord::RetrievalPair).collect(), ExportFormat::RetrievalJsonl)
        }
        SynthKind::Ddr => {
            let qa: Vec<QAExample> = read_records(&input()?, &opts).map_err(fail)?;
            let r = build_ddr_preferences(&kb, &env.gw, &qa, &generator()?, &cfg, &env.templates).map_err(fail)?;
            eprintln!("{} pairs kept, {} skipped for a small reward gap", r.pairs.len(), r.skipped_small_gap);
            let n = write_dataset(&r.pairs, &a.out).map_err(fail)?;
            (n, r.pairs.into_iter().map(TrainingRecord::Preference).collect(), ExportFormat::DpoJsonl)
        }
        SynthKind::Kbalign => {
            let r = build_kbalign_sft(&kb, &env.gw, &generator()?, &cfg, &env.templates).map_err(fail)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            let n = write_dataset(&r.examples, &a.out).map_err(fail)?;
            (n, r.examples.into_iter().map(TrainingRecord::Sft).collect(), ExportFormat::SftJsonl)
        }
    };
    if let Some(p) = &a.export {
        export_training_files(&records, format, p, Some(&kb)).map_err(fail)?;
    }
    print_json(&serde_json::json!({ "records": count, "out": a.out }));
    Ok(())
}

fn eval_cmd(env: &Env, a: EvalArgs) -> CliResult {
    let kb = env.kb(&a.kb)?;
    let dataset: Vec<QAExample> = read_records(&a.dataset, &ValidationOptions::default()).map_err(fail)?;
    let dataset_id = a.dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let run_id = a.run_id.unwrap_or_else(new_run_id);
    let workers = env.cfg.workers;
    let report = match a.kind {
        EvalKind::Retrieval => {
            if a.k == 0 {
                return Err(usage("-k must be at least 1"));
            }
            evaluate_retrieval(&RetrievalEval { kb: &kb, gw: &env.gw, k: a.k, workers }, &dataset, &dataset_id, &run_id)
        }
        EvalKind::Generation => {
            let generator = a.generator.clone().or_else(|| {
                env.gw.list().into_iter().find(|s| s.role == ModelRole::Generator).map(|s| s.model_id)
            });
            let cfg = workflow_config(a.workflow_config.as_deref(), a.workflow, Some(a.kb.clone()), generator)?;
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let metrics = if a.metrics.is_empty() {
                GenerationMetric::ALL.to_vec()
            } else {
                a.metrics.iter().map(|m| m.parse()).collect::<Result<_, _>>().map_err(usage)?
            };
            let ctx = RunContext { kb: &kb, gw: &env.gw, templates: &env.templates };
            evaluate_generation(&cfg, &ctx, &dataset, &metrics, &dataset_id, &run_id, workers)
        }
    }
    .map_err(fail)?;
    match &a.out {
        Some(p) => {
            write_report(&report, p).map_err(fail)?;
            print_json(&serde_json::json!({ "run_id": report.run_id, "metrics": report.metrics, "out": p }));
        }
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> CliResult {
    let env = Env::load(cli, a.config.as_deref())?;
    let port = a.port.unwrap_or(env.cfg.port);
    let state = Arc::new(AppState::new(env.cfg.clone(), env.gw, env.templates));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(fail)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), port)).await.map_err(fail)?;
        let addr = listener.local_addr().map_err(fail)?;
        println!("listening on http://{addr}");
        println!("port {}", addr.port());
        let _ = std::io::stdout().flush();
        crate::service::serve(state, listener).await.map_err(fail)
    })
}
