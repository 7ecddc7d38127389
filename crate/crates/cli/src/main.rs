mod config;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sopbench_core::eval::{evaluate_corpus, render_table, EvalReport};
use sopbench_core::ingest::{parse_corpus, split_corpus, write_corpus, Corpus, ParseOptions};
use sopbench_core::policy::{
    prepare_episode, replay_all, OraclePolicy, Policy, PreparedEpisode, RandomPolicy, ReplayMode, RuleSopPolicy,
    StepRecord,
};
use sopbench_core::prompt::{build_dataset, DatasetOptions, PromptOptions};
use sopbench_core::remote::{GoldenTable, RemotePolicy, StubMode, StubServer};
use sopbench_core::synthetic::{bundled_templates, generate_mixed, SyntheticTemplate};
use sopbench_core::{CanonicalAction, RuleSet, SopPipeline, Variant};

use crate::config::RunConfig;

/// A failure with its exit code: 2 for configuration, 3 for data, 4 for the model endpoint.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    fn category(&self) -> &'static str {
        match self.code {
            2 => "config",
            4 => "endpoint",
            _ => "data",
        }
    }
}

impl From<sopbench_core::Error> for CliError {
    fn from(e: sopbench_core::Error) -> Self {
        use sopbench_core::Error as E;
        let code = match e {
            E::Config(_)
            | E::RuleSet(_)
            | E::InvalidFractions(_)
            | E::InvalidTemplate(_)
            | E::UnrealizableTemplate(_) => 2,
            E::EndpointUnavailable(_) => 4,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "sopbench", version, about = "Annotate, serialize, replay and score mobile device-control episodes")]
struct Cli {
    /// TOML run configuration. Flags override its keys.
    #[arg(long, global = true, env = "SOPBENCH_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Io {
    /// Input file, `-` for stdin.
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Output file, `-` for stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Oracle,
    #[value(name = "rule_sop")]
    RuleSop,
    Remote,
    Random,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Model endpoint URL for the remote policy.
    #[arg(long)]
    endpoint: Option<String>,
    /// Prompt variant sent to the remote policy.
    #[arg(long)]
    variant: Option<String>,
    /// Rule set name (aitw, aia_medical) or path.
    #[arg(long)]
    rules: Option<String>,
    /// Name recorded in the report instead of the policy name.
    #[arg(long)]
    model_name: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a corpus, optionally writing train/val/test splits.
    Ingest {
        #[command(flatten)]
        io: Io,
        /// Skip malformed records instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Directory receiving train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Split fractions as `train,val,test`.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Canonicalize gold actions and build each episode's SOP pipeline.
    Annotate {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        rules: Option<String>,
    },
    /// Serialize every grounded step into a prompt/response sample.
    BuildPrompts {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        rules: Option<String>,
        #[arg(long)]
        variant: Option<String>,
        /// With the sop variant, also emit the base sample of every step.
        #[arg(long)]
        mix: bool,
        #[arg(long)]
        max_history: Option<usize>,
        /// Also write the responses as a golden table for `serve-stub`.
        #[arg(long)]
        golden_out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus from templates.
    GenSynthetic {
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Bundled template name or path; repeatable. Defaults to every bundled template.
        #[arg(long = "template")]
        templates: Vec<String>,
        #[arg(long)]
        rules: Option<String>,
    },
    /// Teacher-forced evaluation; writes the score report as JSON.
    Evaluate {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Replay episodes through a policy and write the per-step traces.
    Replay {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Feed predictions back as history instead of the gold actions.
        #[arg(long)]
        free_running: bool,
        #[arg(long, requires = "free_running")]
        step_cap: Option<usize>,
    },
    /// Tabulate one or more evaluation reports.
    Report {
        #[arg(short, long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Serve canned responses over the remote model protocol until killed.
    ServeStub {
        /// Golden table written by `build-prompts --golden-out`.
        #[arg(long, conflicts_with = "fixed")]
        golden: Option<PathBuf>,
        /// Answer every request with this text.
        #[arg(long)]
        fixed: Option<String>,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Annotate { .. } => "annotate",
            Command::BuildPrompts { .. } => "build-prompts",
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::Evaluate { .. } => "evaluate",
            Command::Replay { .. } => "replay",
            Command::Report { .. } => "report",
            Command::ServeStub { .. } => "serve-stub",
        }
    }
}

/// Merged view of flags and config file.
struct Ctx {
    cfg: RunConfig,
    seed: Option<u64>,
}

fn is_std(p: &Path) -> bool {
    p.as_os_str() == "-"
}

impl Ctx {
    fn input(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().or_else(|| self.cfg.paths.input.clone()).unwrap_or_else(|| "-".into())
    }

    fn output(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().or_else(|| self.cfg.paths.output.clone()).unwrap_or_else(|| "-".into())
    }

    fn rules(&self, flag: &Option<String>) -> Result<RuleSet, CliError> {
        let name = flag.as_deref().or(self.cfg.rules.as_deref()).unwrap_or("aitw");
        RuleSet::resolve(name).map_err(|e| CliError::config(e.to_string()))
    }

    fn variant(&self, flag: &Option<String>) -> Result<Variant, CliError> {
        Ok(flag.as_deref().or(self.cfg.variant.as_deref()).unwrap_or("base").parse::<Variant>()?)
    }

    fn seed(&self) -> u64 {
        self.seed.or(self.cfg.seed).unwrap_or(0)
    }

    fn corpus(&self, path: &Path, lenient: bool) -> Result<(Corpus, usize), CliError> {
        let reader: Box<dyn BufRead> = if is_std(path) {
            Box::new(io::stdin().lock())
        } else {
            Box::new(BufReader::new(
                File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?,
            ))
        };
        let parsed = parse_corpus(reader, ParseOptions { lenient })?;
        if parsed.corpus.is_empty() {
            return Err(sopbench_core::Error::EmptyCorpus.into());
        }
        Ok((parsed.corpus, parsed.skipped.len()))
    }

    fn policy(&self, a: &PolicyArgs, rules: &RuleSet) -> Result<Box<dyn Policy>, CliError> {
        let kind = match (a.policy, self.cfg.policy.as_deref()) {
            (Some(k), _) => k,
            (None, Some(s)) => {
                PolicyKind::from_str(s, true).map_err(|_| CliError::config(format!("unknown policy {s:?}")))?
            }
            (None, None) => PolicyKind::Oracle,
        };
        Ok(match kind {
            PolicyKind::Oracle => Box::new(OraclePolicy),
            PolicyKind::RuleSop => Box::new(RuleSopPolicy { rules: rules.clone() }),
            PolicyKind::Random => Box::new(RandomPolicy { seed: self.seed() }),
            PolicyKind::Remote => {
                let mut ep = self.cfg.remote.clone();
                if let Some(url) = &a.endpoint {
                    ep.url = url.clone();
                }
                Box::new(RemotePolicy::new(ep, self.variant(&a.variant)?)?)
            }
        })
    }
}

fn open_output(path: &Path) -> Result<Box<dyn Write>, CliError> {
    if is_std(path) {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = File::create(path).map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = open_output(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = open_output(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_corpus_to(path: &Path, c: &Corpus) -> Result<(), CliError> {
    let mut w = open_output(path)?;
    write_corpus(c, &mut w)?;
    w.flush()?;
    Ok(())
}

/// What a command reports: its summary fields, where the summary goes, and whether the run
/// should still exit with an error code after writing its outputs.
struct Outcome {
    fields: Value,
    summary_to_stderr: bool,
    late_error: Option<CliError>,
}

impl Outcome {
    fn new(fields: Value, output: &Path) -> Self {
        Self { fields, summary_to_stderr: is_std(output), late_error: None }
    }
}

#[derive(Serialize)]
struct Annotation {
    episode_id: String,
    subset: String,
    pipeline: Option<SopPipeline>,
    actions: Vec<CanonicalAction>,
    ungrounded: Vec<usize>,
}

#[derive(Serialize)]
struct Trace<'a> {
    episode_id: &'a str,
    steps: &'a [StepRecord],
}

fn prepare<'a>(c: &'a Corpus, rules: &RuleSet, ctx: &Ctx) -> Vec<PreparedEpisode<'a>> {
    use rayon::prelude::*;
    c.episodes.par_iter().map(|e| prepare_episode(e, rules, &ctx.cfg.grounding)).collect()
}

fn run(command: Command, ctx: &Ctx) -> Result<Outcome, CliError> {
    match command {
        Command::Ingest { io, lenient, split, fractions } => {
            let out = ctx.output(&io.output);
            let (corpus, skipped) = ctx.corpus(&ctx.input(&io.input), lenient || ctx.cfg.lenient.unwrap_or(false))?;
            write_corpus_to(&out, &corpus)?;
            let mut fields = json!({
                "episodes": corpus.len(),
                "steps": corpus.episodes.iter().map(|e| e.len()).sum::<usize>(),
                "skipped": skipped,
                "manifest": corpus.manifest,
            });
            if let Some(dir) = split {
                let fr = match fractions {
                    Some(v) => <[f64; 3]>::try_from(v.as_slice())
                        .map_err(|_| CliError::config(format!("--fractions needs three values, got {}", v.len())))?,
                    None => ctx.cfg.split.fractions.unwrap_or([0.8, 0.1, 0.1]),
                };
                let seed = ctx.seed.or(ctx.cfg.split.seed).or(ctx.cfg.seed).unwrap_or(0);
                let s = split_corpus(&corpus, fr, seed)?;
                std::fs::create_dir_all(&dir)?;
                for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                    write_corpus_to(&dir.join(format!("{name}.jsonl")), part)?;
                }
                fields["split"] =
                    json!({ "train": s.train.len(), "val": s.val.len(), "test": s.test.len(), "seed": seed });
            }
            Ok(Outcome::new(fields, &out))
        }
        Command::Annotate { io, rules } => {
            let out = ctx.output(&io.output);
            let rules = ctx.rules(&rules)?;
            let (corpus, _) = ctx.corpus(&ctx.input(&io.input), ctx.cfg.lenient.unwrap_or(false))?;
            let prepared = prepare(&corpus, &rules, ctx);
            let rows: Vec<Annotation> = prepared
                .iter()
                .map(|p| Annotation {
                    episode_id: p.episode.episode_id.clone(),
                    subset: p.episode.subset.clone(),
                    pipeline: p.pipeline.clone(),
                    actions: p.gold_actions(),
                    ungrounded: p.gold.iter().enumerate().filter(|(_, g)| !g.grounded).map(|(i, _)| i).collect(),
                })
                .collect();
            let empty = rows.iter().filter(|r| r.pipeline.is_none()).count();
            let entries: usize = rows.iter().filter_map(|r| r.pipeline.as_ref()).map(SopPipeline::len).sum();
            let ungrounded: usize = rows.iter().map(|r| r.ungrounded.len()).sum();
            write_jsonl(&out, &rows)?;
            let fields = json!({
                "rules": rules.name,
                "episodes": rows.len(),
                "sop_entries": entries,
                "empty_pipelines": empty,
                "ungrounded_steps": ungrounded,
            });
            Ok(Outcome::new(fields, &out))
        }
        Command::BuildPrompts { io, rules, variant, mix, max_history, golden_out } => {
            let out = ctx.output(&io.output);
            let rules = ctx.rules(&rules)?;
            let variant = ctx.variant(&variant)?;
            let (corpus, _) = ctx.corpus(&ctx.input(&io.input), ctx.cfg.lenient.unwrap_or(false))?;
            let opts =
                DatasetOptions { mix: mix || ctx.cfg.mix.unwrap_or(false), prompt: PromptOptions { max_history } };
            let data = build_dataset(&corpus, &rules, &ctx.cfg.grounding, variant, opts);
            write_jsonl(&out, &data.samples)?;
            if let Some(path) = golden_out {
                let mut w = open_output(&path)?;
                GoldenTable::from_samples(&data.samples).write(&mut w)?;
                w.flush()?;
            }
            let fields = json!({
                "variant": variant,
                "mix": opts.mix,
                "stats": data.stats,
                "token_stats": sopbench_core::eval::token_stats(data.samples.iter()),
            });
            Ok(Outcome::new(fields, &out))
        }
        Command::GenSynthetic { output, count, templates, rules } => {
            let out = ctx.output(&output);
            let rules = ctx.rules(&rules)?;
            let templates = if templates.is_empty() {
                bundled_templates()
            } else {
                templates.iter().map(|t| SyntheticTemplate::resolve(t)).collect::<Result<_, _>>()?
            };
            let seed = ctx.seed();
            let corpus = generate_mixed(&templates, &rules, count, seed)?;
            write_corpus_to(&out, &corpus)?;
            let fields = json!({
                "episodes": corpus.len(),
                "seed": seed,
                "templates": templates.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
                "manifest": corpus.manifest,
            });
            Ok(Outcome::new(fields, &out))
        }
        Command::Evaluate { io, policy } => {
            let out = ctx.output(&io.output);
            let rules = ctx.rules(&policy.rules)?;
            let pol = ctx.policy(&policy, &rules)?;
            let (corpus, _) = ctx.corpus(&ctx.input(&io.input), ctx.cfg.lenient.unwrap_or(false))?;
            let mut report = evaluate_corpus(
                &corpus,
                &rules,
                &ctx.cfg.grounding,
                pol.as_ref(),
                ReplayMode::TeacherForced,
                &ctx.cfg.matching,
            );
            if let Some(name) = policy.model_name.or_else(|| ctx.cfg.model_name.clone()) {
                report.model = name;
            }
            write_text(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            let mut outcome = Outcome::new(
                json!({
                    "model": report.model,
                    "overall": report.overall,
                    "subsets": report.subsets,
                    "steps": report.counts.steps,
                    "correct": report.counts.correct,
                    "unevaluated": report.counts.unevaluated,
                }),
                &out,
            );
            if report.counts.unevaluated > 0 {
                outcome.late_error = Some(CliError {
                    code: 4,
                    message: format!(
                        "{} step(s) in {} episode(s) could not be evaluated",
                        report.counts.unevaluated,
                        report.counts.unevaluated_episodes.len()
                    ),
                });
            }
            Ok(outcome)
        }
        Command::Replay { io, policy, free_running, step_cap } => {
            let out = ctx.output(&io.output);
            let rules = ctx.rules(&policy.rules)?;
            let pol = ctx.policy(&policy, &rules)?;
            let (corpus, _) = ctx.corpus(&ctx.input(&io.input), ctx.cfg.lenient.unwrap_or(false))?;
            let mode = if free_running { ReplayMode::FreeRunning { step_cap } } else { ReplayMode::TeacherForced };
            let prepared = prepare(&corpus, &rules, ctx);
            let traces = replay_all(&prepared, pol.as_ref(), mode);
            let rows = prepared.iter().zip(&traces).map(|(p, t)| Trace { episode_id: &p.episode.episode_id, steps: t });
            write_jsonl(&out, rows)?;
            let steps: usize = traces.iter().map(Vec::len).sum();
            let terminal = traces
                .iter()
                .filter(|t| t.last().and_then(|r| r.predicted.action()).is_some_and(CanonicalAction::is_terminal))
                .count();
            let fields = json!({
                "policy": pol.name(),
                "mode": mode,
                "episodes": traces.len(),
                "steps": steps,
                "ended_on_status": terminal,
            });
            Ok(Outcome::new(fields, &out))
        }
        Command::Report { inputs, output, format } => {
            let out = output.unwrap_or_else(|| "-".into());
            let reports = inputs
                .iter()
                .map(|p| {
                    let f = File::open(p).map_err(|e| CliError::data(format!("cannot open {}: {e}", p.display())))?;
                    serde_json::from_reader::<_, EvalReport>(BufReader::new(f))
                        .map_err(|e| CliError::data(format!("{}: not an evaluation report: {e}", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let text = match format {
                Format::Text => render_table(&reports),
                Format::Json => {
                    let rows: Vec<Value> = reports
                        .iter()
                        .map(|r| json!({ "model": r.model, "overall": r.overall, "subsets": r.subsets, "counts": r.counts }))
                        .collect();
                    serde_json::to_string_pretty(&rows)? + "\n"
                }
            };
            write_text(&out, &text)?;
            Ok(Outcome::new(json!({ "reports": reports.len() }), &out))
        }
        Command::ServeStub { golden, fixed, addr, threads } => {
            let (mode, records) = match (fixed, golden.or_else(|| ctx.cfg.paths.golden.clone())) {
                (Some(text), _) => (StubMode::Fixed(text), 0),
                (None, Some(path)) => {
                    let t = GoldenTable::load(&path)?;
                    let n = t.len();
                    (StubMode::Golden(t), n)
                }
                (None, None) => return Err(CliError::config("serve-stub needs --golden or --fixed")),
            };
            let server = StubServer::start(&addr, mode, threads)?;
            let fields =
                json!({ "command": "serve-stub", "status": "listening", "url": server.url(), "records": records });
            println!("{fields}");
            io::stdout().flush()?;
            info!("stub listening on {}", server.url());
            loop {
                std::thread::park();
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = (|| {
        let cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let jobs = cli.jobs.or(cfg.jobs);
        if let Some(n) = jobs {
            if n == 0 {
                return Err(CliError::config("--jobs must be at least 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(e.to_string()))?;
        }
        run(cli.command, &Ctx { cfg, seed: cli.seed })
    })();
    match result {
        Ok(outcome) => {
            let mut summary = json!({ "command": name, "status": "ok" });
            if let (Some(dst), Value::Object(src)) = (summary.as_object_mut(), outcome.fields) {
                dst.extend(src);
            }
            if let Some(e) = &outcome.late_error {
                summary["status"] = json!("error");
                summary["category"] = json!(e.category());
                summary["message"] = json!(e.message);
            }
            if outcome.summary_to_stderr {
                eprintln!("{summary}");
            } else {
                println!("{summary}");
            }
            ExitCode::from(outcome.late_error.map_or(0, |e| e.code))
        }
        Err(e) => {
            let summary = json!({ "command": name, "status": "error", "category": e.category(), "message": e.message });
            eprintln!("{summary}");
            ExitCode::from(e.code)
        }
    }
}
