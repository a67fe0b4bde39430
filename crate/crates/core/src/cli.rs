//! `poe convert | run | inspect`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{MockBackend, ScorerBackend};
use crate::config::{BackendKind, ConfigLayer, RunConfig};
use crate::datasets;
use crate::metrics;
use crate::runner::{self, RunError};
use crate::scoring::MethodOutcome;
use crate::templating::{self, MASK_TOKEN};
use crate::types::{BaseMethod, ImageCheck, QuestionInstance, ScoringMethod};

#[derive(Debug, Parser)]
#[command(
    name = "poe",
    version,
    about = "Process-of-elimination scoring for multiple-choice VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a ScienceQA or AI2D distribution into canonical JSONL.
    Convert(ConvertArgs),
    /// Evaluate a scoring method over a canonical JSONL file.
    Run(RunArgs),
    /// Print the full scoring trace for a single instance.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceDataset {
    Scienceqa,
    Ai2d,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    dataset: SourceDataset,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Lm,
    Avg,
    Calibration,
    Channel,
    Mcp,
    Poe,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Step1Arg {
    Lm,
    Avg,
    Calibration,
    Channel,
    Mcp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Network,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DemoSplitArg {
    Train,
    Dev,
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

/// Flags shared by `run` and `inspect`.
#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    step1_method: Option<Step1Arg>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    n_shot: Option<usize>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long, value_enum)]
    demo_split: Option<DemoSplitArg>,
    /// Score table for the mock backend (JSON).
    #[arg(long)]
    mock_fixture: Option<PathBuf>,
}

impl CommonArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            data_path: self.data.clone(),
            method: self.method.map(value_name),
            step1_method: self.step1_method.map(value_name),
            n_shot: self.n_shot,
            backend: self.backend.map(value_name),
            endpoint: self.endpoint.clone(),
            max_parallel: self.max_parallel,
            demo_split: self.demo_split.map(value_name),
            mock_fixture: self.mock_fixture.clone(),
            ..ConfigLayer::default()
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat TOML file whose keys mirror the run configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit per-instance traces from the report.
    #[arg(long)]
    no_traces: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    id: String,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Convert(a) => cmd_convert(&a, out),
        Command::Run(a) => cmd_run(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_convert(a: &ConvertArgs, out: &mut dyn Write) -> Result<(), RunError> {
    let stats = match a.dataset {
        SourceDataset::Scienceqa => datasets::convert_scienceqa(&a.input, &a.output)?,
        SourceDataset::Ai2d => datasets::convert_ai2d(&a.input, &a.output)?,
    };
    let json = serde_json::to_string(&stats).expect("stats serialize");
    writeln!(out, "{json}").map_err(|e| RunError::Data(e.to_string()))
}

fn resolve_run_config(a: &RunArgs) -> Result<RunConfig, RunError> {
    let file = match &a.config {
        Some(p) => ConfigLayer::from_file(p)?,
        None => ConfigLayer::default(),
    };
    let flags = ConfigLayer {
        seeds: a.seeds.clone(),
        output_path: a.out.clone(),
        no_traces: a.no_traces.then_some(true),
        ..a.common.layer()
    };
    Ok(ConfigLayer::resolve(flags, ConfigLayer::from_env(), file)?)
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<(), RunError> {
    let cfg = resolve_run_config(a)?;
    let report = runner::run(&cfg)?;
    write!(out, "{}", metrics::render_table(&report)).map_err(|e| RunError::Data(e.to_string()))
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), RunError> {
    let flags = ConfigLayer {
        output_path: Some(PathBuf::from("-")),
        seeds: Some(vec![a.seed]),
        ..a.common.layer()
    };
    let cfg = ConfigLayer::resolve(flags, ConfigLayer::from_env(), ConfigLayer::default())?;
    let instances = datasets::load_jsonl(&cfg.data_path, ImageCheck::Require)?;
    let instance = instances
        .iter()
        .find(|q| q.id == a.id)
        .ok_or_else(|| RunError::Data(format!("unknown instance id {:?}", a.id)))?;
    let pool: Vec<QuestionInstance> = instances
        .iter()
        .filter(|q| q.split == cfg.demo_split && q.split != instance.split)
        .cloned()
        .collect();
    let backend: Box<dyn ScorerBackend> = match cfg.backend {
        BackendKind::Mock => {
            let fixture = runner::load_fixture(cfg.mock_fixture.as_deref())?;
            Box::new(MockBackend::new(fixture.as_ref(), a.seed))
        }
        BackendKind::Network => Box::new(runner::network_backend(
            cfg.endpoint.as_deref().unwrap_or_default(),
            cfg.max_parallel,
        )),
    };
    let (_, outcome) = runner::evaluate_instance(instance, &pool, &cfg, a.seed, backend.as_ref())?;
    let demos = datasets::sample_demos(
        &pool,
        cfg.n_shot,
        datasets::demo_seed(a.seed, &instance.id),
        &instance.id,
    )?;
    let text = render_inspection(instance, cfg.method, &demos, &outcome)
        .map_err(|e| RunError::Data(e.to_string()))?;
    write!(out, "{text}").map_err(|e| RunError::Data(e.to_string()))
}

fn letter_scores(items: impl IntoIterator<Item = (usize, f64)>) -> String {
    items
        .into_iter()
        .map(|(i, s)| {
            let l = templating::label(i)
                .map(|c| c.to_string())
                .unwrap_or_default();
            format!("{l}={s:.4}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn first_prompt(
    instance: &QuestionInstance,
    method: BaseMethod,
    demos: &[QuestionInstance],
) -> Result<templating::RenderedPrompt, templating::TemplateError> {
    match method {
        BaseMethod::Lm | BaseMethod::Avg => templating::render_lm(instance, 0, demos),
        BaseMethod::Calibration => templating::render_calibration(instance, 0, demos, false),
        BaseMethod::Channel => templating::render_channel(instance, 0, demos),
        BaseMethod::Mcp => templating::render_mcp(instance, 0, None, demos),
    }
}

/// Human-readable trace: prompts, scores, masks and the final choice.
pub fn render_inspection(
    instance: &QuestionInstance,
    method: ScoringMethod,
    demos: &[QuestionInstance],
    outcome: &MethodOutcome,
) -> Result<String, templating::TemplateError> {
    let mut s = String::new();
    let _ = writeln!(s, "Question: {}", instance.question);
    let _ = writeln!(s, "Options: {}", instance.options.join(", "));
    let _ = writeln!(s, "Ground Truth Option: {}", instance.gold_text());
    let _ = writeln!(s, "Method: {method}");
    let step1 = match method {
        ScoringMethod::Base(m) => m,
        ScoringMethod::Poe { step1 } => step1,
    };
    let p = first_prompt(instance, step1, demos)?;
    let stage = if method.is_poe() { "Step 1 " } else { "" };
    let _ = writeln!(s, "--- {stage}Prompt (option A) ---");
    let _ = writeln!(s, "{}", p.parts.render_text());
    let _ = writeln!(s, "--- Continuation: {:?}", p.parts.continuation);
    match outcome {
        MethodOutcome::Baseline {
            scores,
            predicted_index,
        } => {
            let _ = writeln!(
                s,
                "Scores: {}",
                letter_scores(scores.scores().iter().copied().enumerate())
            );
            let _ = writeln!(
                s,
                "Predicted Option: {}",
                instance.options[*predicted_index]
            );
        }
        MethodOutcome::Poe(p) => {
            let _ = writeln!(
                s,
                "Step 1 Scores: {}",
                letter_scores(p.step1.score_vector.scores().iter().copied().enumerate())
            );
            let _ = writeln!(s, "Mean Score: {:.4}", p.step1.mean_score);
            let masked: Vec<&str> = instance
                .options
                .iter()
                .enumerate()
                .map(|(i, o)| match p.step1.mask.get(i) {
                    Some(true) => o.as_str(),
                    _ => MASK_TOKEN,
                })
                .collect();
            let _ = writeln!(s, "Predicted Masks: {}", masked.join(", "));
            let _ = writeln!(s, "--- Step 2 Prompt ---");
            let _ = writeln!(s, "{}", p.masked_prompt_preview);
            if p.short_circuited {
                let _ = writeln!(s, "Step 2 Scores: skipped (single survivor)");
            } else {
                let _ = writeln!(
                    s,
                    "Step 2 Scores: {}",
                    letter_scores(p.step2_scores.iter().copied())
                );
            }
            let _ = writeln!(
                s,
                "Predicted Option: {}",
                instance.options[p.predicted_index]
            );
        }
    }
    let _ = writeln!(
        s,
        "Correct: {}",
        outcome.predicted_index() == instance.gold_index
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(
            std::iter::once("poe").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run(&["run", "--bogus"]);
        assert_eq!(code, 2);
        assert!(err.contains("--bogus"));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("inspect"));
    }

    #[test]
    fn network_without_endpoint_is_config_error() {
        std::env::remove_var(crate::config::ENDPOINT_ENV);
        let (code, _, err) = run(&[
            "run",
            "--data",
            "x.jsonl",
            "--method",
            "poe",
            "--backend",
            "network",
            "--out",
            "o.json",
        ]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn missing_data_file_is_data_error() {
        let (code, _, _) = run(&[
            "run",
            "--data",
            "/nonexistent/x.jsonl",
            "--method",
            "lm",
            "--out",
            "/tmp/o.json",
        ]);
        assert_eq!(code, 3);
    }
}
