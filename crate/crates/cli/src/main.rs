use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use how2_core::agent::{ActorPolicy, Mode};
use how2_core::dataset::{build_split, write_split, SplitHeader, SplitName, SplitSpec, DESK_SIZE};
use how2_core::gateway::HttpConfig;
use how2_core::harness::{
    self, parse_list, to_f64, BackendConfig, RunConfig,
};
use how2_core::memory::{AskMode, MemoryRoles, ParseMode, RelevanceMode};
use how2_core::teacher::TeacherKind;

#[derive(Parser)]
#[command(name = "how2", version, about = "Lifelong crafting agent with a teacher-backed procedural memory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate paired low/high repetition splits.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Examples per split.
        #[arg(long, default_value_t = DESK_SIZE)]
        size: u32,
        /// Use the full-size class histogram and target budgets.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        recipes: Option<PathBuf>,
    },
    /// Run one configuration.
    Run {
        /// JSON run config; flags are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "how2")]
        mode: String,
        #[arg(long, default_value = "executable")]
        teacher: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the cross product of modes, teachers and seeds.
    Sweep {
        #[arg(long, default_value = "how2,just_ask")]
        modes: String,
        #[arg(long, default_value = "all")]
        teachers: String,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate run directories into CSV tables.
    Report {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run the acceptance suite.
    Validate {
        /// Build in debug mode.
        #[arg(long)]
        debug: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Scripted,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Roles {
    /// Rule-based relevance, ask and parse.
    Rule,
    /// Model-backed relevance, ask and parse.
    Llm,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "scripted")]
    policy: Policy,
    #[arg(long, value_enum, default_value = "rule")]
    roles: Roles,
    #[arg(long)]
    curriculum: bool,
    #[arg(long)]
    fixed_ask_first: bool,
    /// Remove the think tool.
    #[arg(long)]
    no_think: bool,
    #[arg(long, default_value_t = 30)]
    max_steps: u32,
    #[arg(long, value_enum, default_value = "mock")]
    backend: Backend,
    /// Mock scenario file (JSON list of rules).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "http://localhost:8000/v1")]
    base_url: String,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Request and strip the backend's reasoning channel.
    #[arg(long)]
    reasoning: bool,
    #[arg(long)]
    recipes: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl Common {
    fn template(&self, mode: Mode, teacher: TeacherKind, seed: u64) -> Result<RunConfig> {
        let split = self.split.clone().context("--split is required")?;
        let mut policy = match self.policy {
            Policy::Scripted => ActorPolicy::scripted(),
            Policy::Llm => ActorPolicy::llm(),
        };
        policy.fixed_ask_first = self.fixed_ask_first;
        policy.think_enabled = !self.no_think;
        let roles = match self.roles {
            Roles::Rule => MemoryRoles::rule_based(),
            Roles::Llm => MemoryRoles {
                relevance: RelevanceMode::Llm,
                parse: ParseMode::Llm,
                ask: AskMode::Llm,
            },
        };
        let backend = match self.backend {
            Backend::Mock => BackendConfig::Mock {
                scenario: self.scenario.clone(),
            },
            Backend::Http => {
                if self.model.is_empty() {
                    bail!("--model is required with --backend http");
                }
                BackendConfig::Http(HttpConfig {
                    base_url: self.base_url.clone(),
                    model: self.model.clone(),
                    api_key_env: self.api_key_env.clone(),
                    reasoning: self.reasoning,
                    timeout_secs: 120,
                })
            }
        };
        Ok(RunConfig {
            mode,
            teacher,
            split,
            seed,
            policy,
            curriculum: self.curriculum,
            max_steps: self.max_steps,
            roles,
            backend,
            recipes: self.recipes.clone(),
        })
    }
}

fn parse_one<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T> {
    s.parse().map_err(anyhow::Error::msg)
}

fn gen_data(out: &Path, seed: u64, size: u32, full: bool, recipes: Option<&Path>) -> Result<()> {
    let book = harness::load_recipes(recipes)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for name in [SplitName::Low, SplitName::High] {
        let spec = if full { SplitSpec::full(name) } else { SplitSpec::scaled(name, size) };
        let examples = build_split(&spec, seed, &book)?;
        let path = out.join(format!("{name}.jsonl"));
        let header = SplitHeader {
            spec,
            seed,
            recipes_fingerprint: book.fingerprint().to_string(),
        };
        write_split(&path, &header, &examples)?;
        println!(
            "{}: {} examples, {} unique targets",
            path.display(),
            examples.len(),
            how2_core::dataset::unique_targets(&examples)
        );
    }
    Ok(())
}

fn print_summary(dir: &Path, report: &harness::RunReport) {
    let a = &report.aggregates;
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.3}"));
    println!(
        "{}  SR={} ImpF1={} CacheMiss={} Intervention={} tokens={}",
        dir.display(),
        f(to_f64(&a.success_rate)),
        f(to_f64(&a.impossible_f1)),
        f(to_f64(&a.avg_cache_miss)),
        f(to_f64(&a.intervention_rate)),
        a.total_tokens
    );
}

fn validate(debug: bool) -> Result<()> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/Cargo.toml");
    let mut cmd = Command::new(std::env::var("CARGO").unwrap_or_else(|_| "cargo".into()));
    cmd.args(["test", "--manifest-path"]).arg(&manifest).args(["--test", "acceptance"]);
    if !debug {
        cmd.arg("--release");
    }
    cmd.args(["--", "--nocapture", "--test-threads=1"]);
    let status = cmd.status().context("running cargo; validate needs a source checkout")?;
    if !status.success() {
        bail!("acceptance suite failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData { out, seed, size, full, recipes } => gen_data(&out, seed, size, full, recipes.as_deref()),
        Cmd::Run { config, mode, teacher, seed, common } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => common.template(parse_one(&mode)?, parse_one(&teacher)?, seed)?,
            };
            let (dir, out) = harness::run(&cfg, &common.out)?;
            print_summary(&dir, &out.report);
            Ok(())
        }
        Cmd::Sweep { modes, teachers, seeds, jobs, common } => {
            let modes = parse_list(&modes, &Mode::ALL).map_err(anyhow::Error::msg)?;
            let teachers = parse_list(&teachers, &TeacherKind::ALL).map_err(anyhow::Error::msg)?;
            let template = common.template(modes[0], teachers[0], 0)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let configs = harness::sweep_configs(&template, &modes, &teachers, &seeds);
            let mut failed = 0;
            for (cfg, result) in configs.iter().zip(harness::sweep(&configs, &common.out, jobs)) {
                match result {
                    Ok(dir) => print_summary(&dir, &harness::load_report(&dir)?),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{} {} seed {}: {e}", cfg.mode, cfg.teacher, cfg.seed);
                    }
                }
            }
            let paths = harness::write_report(&common.out, &common.out.join("aggregate"))?;
            println!("wrote {}", paths[0].display());
            if failed > 0 {
                bail!("{failed} of {} runs failed", configs.len());
            }
            Ok(())
        }
        Cmd::Report { runs, out } => {
            for p in harness::write_report(&runs, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Cmd::Validate { debug } => validate(debug),
    }
}
