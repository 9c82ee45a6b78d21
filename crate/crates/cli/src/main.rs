use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bumper_core::fixtures;
use bumper_core::guidelines::CheckVariant;
use bumper_core::pipeline::{Bumper, BumperAnswer, CheckClass, PipelineError, Thread};
use bumper_core::stability::{self, EvaluateSettings, ReportSummary, StabilityError};
use bumper_core::Verdict;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bumper", version, about = "Guardrailed question answering over a knowledge base")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the starter, rugby and measles configs into <dir>.
    Init {
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Prompt-reply loop on stdin.
    Chat {
        #[arg(long)]
        config: PathBuf,
        /// Replay this mock script instead of the configured provider.
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "bumper-data")]
        data_dir: PathBuf,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Sample answers and checks for one query and write a report bundle.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = stability::DEFAULT_ANSWERS)]
        answers: usize,
        #[arg(long, default_value_t = stability::DEFAULT_CHECKS)]
        checks: usize,
        /// whole, whole-explain, per-element or per-element-explain; defaults to the config's.
        #[arg(long)]
        variant: Option<CheckVariant>,
        #[arg(long, default_value_t = stability::DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value = "bumper-report")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    /// Print a text summary of a report bundle.
    Report { bundle: PathBuf },
}

/// A failure with its exit code: 1 for config/user errors, 2 for the environment.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn env(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::user(e.to_string())
    }
}

impl From<StabilityError> for Failure {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::InvalidK { .. } | StabilityError::EmptyProtocol | StabilityError::Bundle { .. } => Failure::user(e.to_string()),
            _ => Failure::env(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors; here a bad invocation is a user error
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Init { dir, force } => init(&dir, force),
        Command::Chat { config, mock } => chat(&config, mock.as_deref()),
        Command::Serve { config, port, data_dir, mock } => serve(&config, port, &data_dir, mock.as_deref()),
        Command::Evaluate { config, query, answers, checks, variant, clusters, out, seed, mock } => {
            let bumper = match Bumper::load(&config, mock.as_deref()) {
                Ok(b) => b,
                Err(e) => return fail(e.into()),
            };
            let settings = EvaluateSettings {
                n_answers: answers,
                n_checks: checks,
                variant: variant.unwrap_or_else(|| bumper.config().check.variant()),
                k: clusters,
                seed,
                ..Default::default()
            };
            evaluate(&bumper, &query, &settings, &out)
        }
        Command::Report { bundle } => report(&bundle),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("bumper: {}", f.message);
    ExitCode::from(f.code)
}

fn init(dir: &Path, force: bool) -> Result<(), Failure> {
    // refuse before writing anything so a partial init never happens
    if !force {
        for fx in &fixtures::ALL {
            for f in fx.files {
                let p = dir.join(fx.name).join(f.path);
                if p.exists() {
                    return Err(Failure::user(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
        }
    }
    for fx in &fixtures::ALL {
        let config = fx.write_to(dir, force).map_err(|e| Failure::env(format!("writing into {}: {e}", dir.display())))?;
        println!("{}", config.display());
    }
    Ok(())
}

fn color_enabled() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && io::stdout().is_terminal()
}

fn badge(answer: &BumperAnswer, color: bool) -> String {
    let (label, code) = match (answer.check_class, answer.verdict()) {
        (CheckClass::CheckFlag | CheckClass::CheckFail, Some(Verdict::Pass)) => ("PASS", "32"),
        (CheckClass::CheckFlag | CheckClass::CheckFail, _) => ("FAIL", "31"),
        (CheckClass::OutOfScope, _) => ("OUT OF SCOPE", "33"),
        (CheckClass::Error, _) => ("ERROR", "31"),
    };
    if color {
        format!("\x1b[1;{code}m[{label}]\x1b[0m")
    } else {
        format!("[{label}]")
    }
}

fn chat(config: &Path, mock: Option<&Path>) -> Result<(), Failure> {
    let bumper = Bumper::load(config, mock)?;
    let color = color_enabled();
    let interactive = io::stdin().is_terminal();
    let mut thread = Thread::new();
    let mut out = io::stdout().lock();
    let mut lines = io::stdin().lock().lines();
    loop {
        if interactive {
            write!(out, "> ").and_then(|_| out.flush()).map_err(|e| Failure::env(e.to_string()))?;
        }
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| Failure::env(format!("reading stdin: {e}")))?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        let answer = bumper.ask(&mut thread, query);
        let mut text = format!("{}\n{}", answer.evidence, badge(&answer, color));
        if let Some(score) = answer.score() {
            text.push_str(&format!(" score {score:.3}"));
        }
        if let Some(explanation) = answer.outcome.as_ref().and_then(|o| o.explanation.as_deref()) {
            text.push_str(&format!("\n{explanation}"));
        }
        writeln!(out, "{text}\n").map_err(|e| Failure::env(e.to_string()))?;
    }
    Ok(())
}

fn serve(config: &Path, port: u16, data_dir: &Path, mock: Option<&Path>) -> Result<(), Failure> {
    let bumper = Bumper::load(config, mock)?;
    let state = bumper_server::AppState::new(bumper, data_dir).map_err(|e| Failure::env(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::env(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| Failure::env(format!("binding port {port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Failure::env(e.to_string()))?;
        println!("listening on http://{addr}");
        let shutdown = async {
            tokio::signal::ctrl_c().await.ok();
        };
        bumper_server::serve(listener, Arc::new(state), shutdown).await.map_err(|e| Failure::env(e.to_string()))
    })
}

fn evaluate(bumper: &Bumper, query: &str, settings: &EvaluateSettings, out: &Path) -> Result<(), Failure> {
    if query.trim().is_empty() {
        return Err(Failure::user("query is empty"));
    }
    if settings.n_answers == 0 || settings.n_checks == 0 {
        return Err(Failure::user("--answers and --checks must be at least 1"));
    }
    let eval = stability::evaluate(bumper, query, settings)?;
    let paths = stability::write_bundle(out, &eval).map_err(|e| Failure::env(e.to_string()))?;
    if let Some(failure) = &eval.samples.failure {
        eprintln!("bumper: stopped early: {failure}");
    }
    println!("{}", paths.scores_csv.display());
    println!("{}", paths.clusters_csv.display());
    println!("{}", paths.report_json.display());
    Ok(())
}

fn report(bundle: &Path) -> Result<(), Failure> {
    let summary = stability::read_bundle(bundle)?;
    if summary.n_answers == 0 {
        return Err(Failure::user(format!("{} holds no answers", bundle.display())));
    }
    print!("{}", render_report(&summary));
    Ok(())
}

const BAR_WIDTH: usize = 40;

fn render_report(s: &ReportSummary) -> String {
    let mut out = format!("query: {}\nvariant: {}\n", s.query, s.variant);
    out.push_str(&format!("answers: {}  checks: {}{}\n", s.n_answers, s.n_checks, if s.complete { "" } else { "  (incomplete)" }));
    if let Some(f) = &s.failure {
        out.push_str(&format!("stopped: {f}\n"));
    }
    if let (Some(mean), Some(std), Some(min), Some(max)) = (s.score_mean, s.score_std, s.score_min, s.score_max) {
        out.push_str(&format!("score mean {mean:.3}  std {std:.3}  min {min:.3}  max {max:.3}\n"));
    }
    if let Some(p) = s.pass_rate {
        out.push_str(&format!("pass rate {:.1}%  distinct scores {}\n", p * 100.0, s.distinct_scores));
    }

    out.push_str("\nscore histogram\n");
    let peak = s.histogram.iter().copied().max().unwrap_or(0).max(1);
    let width = 1.0 / s.histogram.len().max(1) as f64;
    for (i, &count) in s.histogram.iter().enumerate() {
        let bar = "#".repeat((count * BAR_WIDTH).div_ceil(peak));
        let close = if i + 1 == s.histogram.len() { ']' } else { ')' };
        out.push_str(&format!("[{:.2}, {:.2}{close} {count:>5} {bar}\n", i as f64 * width, (i + 1) as f64 * width));
    }

    out.push_str("\ncluster  size  jaccard  example answer\n");
    for c in &s.clusters {
        let jaccard = c.mean_jaccard.map_or_else(|| "—".to_string(), |j| format!("{j:.3}"));
        let example = c.example_answer.as_deref().map(one_line).unwrap_or_default();
        out.push_str(&format!("{:>7}  {:>4}  {:>7}  {example}\n", c.cluster, c.size, jaccard));
    }
    out
}

const EXAMPLE_CHARS: usize = 72;

fn one_line(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= EXAMPLE_CHARS {
        flat
    } else {
        format!("{}…", flat.chars().take(EXAMPLE_CHARS - 1).collect::<String>())
    }
}
