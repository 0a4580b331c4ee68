use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use bias_audit::corpus_store::{
    collect, existing_keys, read_instances, validate_against_corpus, write_instances, CollectionPlan, EndpointConfig,
    HttpClient, InstanceReader, InstanceWriter, ReplayClient, TextClient,
};
use bias_audit::demography::{build_table_from_file, LikelihoodTable, Provider, RaceBaselineSource, Tables};
use bias_audit::exec::{configure_threads, Exec};
use bias_audit::extraction::{
    evaluate_extraction, heuristic_label_instances, label_instances, HttpLabeler, Labeler, ReplayLabeler,
};
use bias_audit::metrics::{keyword_terms, Smoothing, ThresholdGrid};
use bias_audit::prompt_corpus::{generate_prompts, PromptIndex};
use bias_audit::report::{analyze_accumulated, emit_report, Accumulator, Baselines, ReportFormat, RunConfig};
use bias_audit::synth_oracle::{generate_corpus, synth_tables, SynthParams};

/// Audits generated stories for omission, subordination and stereotyping
/// of demographic groups.
#[derive(Debug, Parser)]
#[command(name = "bias-audit", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Increase log detail (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the fixed prompt corpus.
    GenPrompts {
        #[arg(long, value_enum, default_value_t = PromptFormat::Jsonl)]
        format: PromptFormat,
    },
    /// Collect story responses from an endpoint or a replay file.
    Collect(CollectArgs),
    /// Label characters (names and gender references) in collected stories.
    Extract(ExtractArgs),
    /// Compare extracted labels against a gold-labeled file.
    EvalExtraction {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Build name likelihood tables from provider files.
    BuildTables {
        /// Voter-file rows (`first_name`, `race`).
        #[arg(long)]
        voter: Option<PathBuf>,
        /// Country-of-origin rows (`first_name`, `country`).
        #[arg(long, alias = "wiki")]
        country: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show race likelihoods for first names.
    Lookup {
        #[arg(long)]
        tables: PathBuf,
        #[arg(required = true)]
        names: Vec<String>,
    },
    /// Compute all metrics and write the report tables.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic corpus with injected distributions.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PromptFormat {
    Jsonl,
    Table,
}

#[derive(Debug, Args)]
struct CollectArgs {
    /// TOML with a `[plan]` table and, unless replaying, an `[endpoint]` table.
    #[arg(long, visible_alias = "plan")]
    config: PathBuf,
    /// Endpoint URL; overrides the config's `[endpoint] url`.
    #[arg(long)]
    endpoint: Option<String>,
    /// Instance file; existing records are kept and skipped.
    #[arg(long)]
    out: PathBuf,
    /// Serve responses from a recorded file instead of the endpoint.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectConfig {
    plan: CollectionPlan,
    endpoint: Option<EndpointConfig>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rule-based extraction without a labeling model.
    #[arg(long, conflicts_with_all = ["replay_labels", "labeler_config"])]
    heuristic: bool,
    /// Recorded labeler replies (JSONL with `label_query` and `label_response`).
    #[arg(long, conflicts_with = "labeler_config")]
    replay_labels: Option<PathBuf>,
    /// TOML with `model` and an `[endpoint]` table.
    #[arg(long)]
    labeler_config: Option<PathBuf>,
    /// Single selector: `heuristic`, `replay:<path>` or a labeler config path.
    #[arg(long, conflicts_with_all = ["heuristic", "replay_labels", "labeler_config"])]
    labeler: Option<String>,
    #[arg(long, default_value_t = 8)]
    max_parallel: usize,
    #[arg(long, default_value_t = 3)]
    retries: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelerConfig {
    model: String,
    endpoint: EndpointConfig,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Labeled instance files.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Directory with the likelihood tables.
    #[arg(long)]
    tables: PathBuf,
    /// `census2022` or a race baseline TSV.
    #[arg(long, default_value = "census2022")]
    baselines: RaceBaselineSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Delimited)]
    format: OutputFormat,
    /// Disable add-one smoothing of zero counts.
    #[arg(long)]
    no_smoothing: bool,
    #[arg(long, default_value_t = 1)]
    threshold_min: u32,
    #[arg(long, default_value_t = 100)]
    threshold_max: u32,
    /// Keep instances flagged ambiguous by extraction.
    #[arg(long)]
    include_ambiguous: bool,
    #[arg(long, default_value_t = 0.6)]
    top_threshold: f64,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Keyword probe terms (default: built-in identity terms).
    #[arg(long = "keyword")]
    keywords: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Delimited,
    Human,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML parameter file.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write likelihood tables realizing the injected vectors.
    #[arg(long)]
    tables_out: Option<PathBuf>,
    /// Leave stories unlabeled instead of running heuristic extraction.
    #[arg(long)]
    no_label: bool,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn stdout_lines(lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = BufWriter::new(io::stdout().lock());
    for l in lines {
        if let Err(e) = writeln!(out, "{l}") {
            if e.kind() == io::ErrorKind::BrokenPipe {
                return Ok(());
            }
            return Err(e.into());
        }
    }
    match out.flush() {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn gen_prompts(format: PromptFormat) -> Result<()> {
    let prompts = generate_prompts()?;
    let lines: Vec<String> = match format {
        PromptFormat::Jsonl => prompts.iter().map(serde_json::to_string).collect::<Result<_, _>>()?,
        PromptFormat::Table => std::iter::once("prompt_id\tdomain\tcondition\ttext".to_string())
            .chain(prompts.iter().map(|p| format!("{}\t{}\t{}\t{}", p.id, p.domain, p.condition.as_str(), p.text)))
            .collect(),
    };
    stdout_lines(lines)
}

fn run_collect(args: &CollectArgs, exec: Exec) -> Result<()> {
    let config: CollectConfig = read_toml(&args.config)?;
    config.plan.validate().map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let prompts = generate_prompts()?;
    let endpoint = match (&args.endpoint, config.endpoint) {
        (Some(url), Some(mut e)) => {
            e.url = url.clone();
            Some(e)
        }
        (Some(url), None) => Some(EndpointConfig::new(url)),
        (None, e) => e,
    };
    let client: Box<dyn TextClient> = match (&args.replay, &endpoint) {
        (Some(path), _) => Box::new(ReplayClient::open(path)?),
        (None, Some(endpoint)) => Box::new(HttpClient::new(endpoint)),
        (None, None) => return Err(usage("collect needs --endpoint, an [endpoint] table in the config, or --replay")),
    };
    let existing = existing_keys(&args.out)?;
    let mut sink = InstanceWriter::append(&args.out)?;
    let report = collect(client.as_ref(), &config.plan, &prompts, &mut sink, &existing, exec)?;
    sink.flush()?;
    for e in &report.errors {
        log::warn!("{e}");
    }
    log::info!(
        "collected {} of {} ({} failed, {} already present, {} retries) in {:.1}s",
        report.success,
        report.expected,
        report.failed,
        report.skipped_existing,
        report.retries,
        report.wall_time_secs
    );
    stdout_lines([serde_json::to_string_pretty(&report)?])?;
    if !report.is_complete() {
        bail!("collection incomplete: {} of {} instances failed", report.failed, report.expected);
    }
    Ok(())
}

fn run_extract(args: &ExtractArgs, exec: Exec) -> Result<()> {
    let mut instances = read_instances(&args.input)?;
    validate_against_corpus(&instances, &PromptIndex::standard()?, &args.input)?;
    let (heuristic, replay, config) = match args.labeler.as_deref() {
        Some("heuristic") => (true, None, None),
        Some(sel) => match sel.strip_prefix("replay:") {
            Some(path) => (false, Some(PathBuf::from(path)), None),
            None => (false, None, Some(PathBuf::from(sel))),
        },
        None => (args.heuristic, args.replay_labels.clone(), args.labeler_config.clone()),
    };
    let labeler: Option<Box<dyn Labeler>> = match (replay, config) {
        (Some(path), _) => Some(Box::new(ReplayLabeler::open(&path)?)),
        (None, Some(path)) => {
            let cfg: LabelerConfig = read_toml(&path)?;
            Some(Box::new(HttpLabeler::new(&cfg.endpoint, &cfg.model)))
        }
        (None, None) if heuristic => None,
        (None, None) => return Err(usage("extract needs --labeler, --heuristic, --replay-labels or --labeler-config")),
    };
    match labeler {
        Some(l) => {
            let report = label_instances(&mut instances, l.as_ref(), args.max_parallel, args.retries, exec);
            log::info!(
                "labeled {} ({} flagged for re-labeling, {} ambiguous; dropped {} names and {} references)",
                report.labeled,
                report.relabel,
                report.ambiguous,
                report.dropped_names,
                report.dropped_references
            );
        }
        None => heuristic_label_instances(&mut instances, exec),
    }
    write_instances(&instances, &args.out)?;
    Ok(())
}

fn run_eval(pred: &Path, gold: &Path) -> Result<()> {
    let report = evaluate_extraction(&read_instances(pred)?, &read_instances(gold)?)?;
    stdout_lines([serde_json::to_string_pretty(&report)?])
}

fn run_build_tables(voter: Option<&Path>, country: Option<&Path>, out: &Path, exec: Exec) -> Result<()> {
    if voter.is_none() && country.is_none() {
        return Err(usage("build-tables needs --voter, --country or both"));
    }
    let build = |provider: Provider, path: Option<&Path>| -> Result<LikelihoodTable> {
        let Some(path) = path else { return Ok(LikelihoodTable::empty(provider)) };
        let (table, report) = build_table_from_file(provider, path, exec)?;
        log::info!(
            "{}: {} names from {} rows ({} rejected, {} unusable names)",
            path.display(),
            table.total_names(),
            report.accepted,
            report.rejected,
            report.unusable_names
        );
        for (code, n) in &report.rejected_codes {
            log::debug!("rejected code {code:?}: {n}");
        }
        Ok(table)
    };
    let tables = Tables::new(build(Provider::Voter, voter)?, build(Provider::Country, country)?);
    tables.write_dir(out)?;
    Ok(())
}

fn run_lookup(dir: &Path, names: &[String]) -> Result<()> {
    let tables = Tables::load_dir(dir)?;
    let mut lines = vec!["name\tprovider\trace\tlikelihood".to_string()];
    for name in names {
        let Some(found) = tables.lookup(name) else {
            lines.push(format!("{name}\tNA\tNA\tNA"));
            continue;
        };
        for (provider, ls) in [("voter", &found.voter), ("country", &found.country)] {
            match ls {
                Some(ls) => lines.extend(ls.iter().map(|(r, l)| format!("{name}\t{provider}\t{}\t{l:.4}", r.as_str()))),
                None => lines.push(format!("{name}\t{provider}\tunmatched\tNA")),
            }
        }
    }
    stdout_lines(lines)
}

fn run_analyze(args: &AnalyzeArgs, exec: Exec) -> Result<()> {
    let config = RunConfig {
        smoothing: if args.no_smoothing { Smoothing::Off } else { Smoothing::Laplace },
        grid: ThresholdGrid { min: args.threshold_min, max: args.threshold_max },
        include_ambiguous: args.include_ambiguous,
        top_threshold: args.top_threshold,
        top_k: args.top_k,
        keyword_terms: if args.keywords.is_empty() { keyword_terms() } else { args.keywords.clone() },
        race_baseline: args.baselines.clone(),
        seed: args.seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let tables = Tables::load_dir(&args.tables)?;
    let baselines = Baselines::load(&config.race_baseline, &tables)?;
    let index = PromptIndex::standard()?;
    let mut acc = Accumulator::new(&config);
    for path in &args.inputs {
        for (i, inst) in InstanceReader::open(path, false)?.enumerate() {
            let inst = inst?;
            if !inst.matches_corpus(&index) {
                bail!("{}: line {}: query is not a known prompt", path.display(), i + 2);
            }
            acc.push(&inst);
        }
    }
    let results = analyze_accumulated(&acc, &tables, &baselines, &config, exec)?;
    let format = match args.format {
        OutputFormat::Delimited => ReportFormat::Delimited,
        OutputFormat::Human => ReportFormat::Human,
    };
    for path in emit_report(&results, format, &args.out)? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn run_simulate(args: &SimulateArgs, exec: Exec) -> Result<()> {
    let params: SynthParams = read_toml(&args.params)?;
    let prompts = generate_prompts()?;
    let mut corpus = generate_corpus(&params, &prompts, exec).with_context(|| format!("{}", args.params.display()))?;
    if !args.no_label {
        heuristic_label_instances(&mut corpus, exec);
    }
    write_instances(&corpus, &args.out)?;
    if let Some(dir) = &args.tables_out {
        synth_tables(&params).write_dir(dir)?;
    }
    log::info!("wrote {} stories to {}", corpus.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        configure_threads(n).map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::GenPrompts { format } => gen_prompts(*format),
        Command::Collect(a) => run_collect(a, exec),
        Command::Extract(a) => run_extract(a, exec),
        Command::EvalExtraction { pred, gold } => run_eval(pred, gold),
        Command::BuildTables { voter, country, out } => {
            run_build_tables(voter.as_deref(), country.as_deref(), out, exec)
        }
        Command::Lookup { tables, names } => run_lookup(tables, names),
        Command::Analyze(a) => run_analyze(a, exec),
        Command::Simulate(a) => run_simulate(a, exec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(e) => {
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !message.contains(&cause) {
                    message = format!("{message}: {cause}");
                }
            }
            log::error!("{message}");
            ExitCode::from(2)
        }
    }
}
