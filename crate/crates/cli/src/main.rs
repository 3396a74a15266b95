use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obsdesign::pipeline::{self, MatcherSpec, PipelineConfig, PipelineError};
use obsdesign::simbench::{self, BenchDesign, Scenario};
use obsdesign::Estimand;

/// Design and analyse an observational study: fit propensity scores, match or
/// weight, check balance, and estimate the treatment effect.
#[derive(Parser, Debug)]
#[command(name = "obsdesign", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV data file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// ATT or ATE.
    #[arg(long)]
    estimand: Option<String>,
    /// greedy, optimal, full, subclass, exact, iptw or odds.
    #[arg(long)]
    method: Option<String>,
    /// Greedy caliper in SDs of the propensity score (also sets the
    /// Mahalanobis-within-caliper width).
    #[arg(long)]
    caliper: Option<f64>,
    /// Number of propensity-score subclasses.
    #[arg(long)]
    subclasses: Option<usize>,
    /// Bootstrap replicates for the standard error.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after the design and balance check; the outcome is never read.
    #[arg(long)]
    design_only: bool,
    /// Exit with status 3 when post-design balance fails.
    #[arg(long)]
    strict: bool,
    /// Output directory for the report bundle.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic study from a scenario file and write it as CSV.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure percent bias reduction of a design over simulated replicates.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        /// JSON design: {"kind": "identity"} or {"kind": "fitted"|"true_scores", "design": {...}}.
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        covariate: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn build_config(a: &RunArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
            PipelineConfig::from_json_str(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(e) = &a.estimand {
        cfg.design.estimand = e.parse::<Estimand>().map_err(invalid)?;
    }
    if let Some(m) = &a.method {
        if cfg.design.matcher.name() != m {
            cfg.design.matcher = MatcherSpec::from_name(m)?;
        }
    }
    if let Some(c) = a.caliper {
        match &mut cfg.design.matcher {
            MatcherSpec::Greedy { caliper, .. } => *caliper = Some(c),
            _ => cfg.design.distance.caliper_sd = c,
        }
    }
    if let Some(n) = a.subclasses {
        match &mut cfg.design.matcher {
            MatcherSpec::Subclass { n_subclasses } => *n_subclasses = n,
            other => return Err(invalid(format!("--subclasses needs method subclass, not {}", other.name()))),
        }
    }
    if let Some(b) = a.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.design_only |= a.design_only;
    cfg.strict |= a.strict;
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if cfg.out.is_none() {
        return Err(invalid("no output directory given (--out)"));
    }
    Ok(cfg)
}

fn run(a: &RunArgs) -> Result<i32, PipelineError> {
    let cfg = build_config(a)?;
    let outcome = pipeline::run_pipeline(&cfg)?;
    let report = &outcome.bundle.report;
    for adv in &report.advisories {
        eprintln!("advice [{}]: {}", adv.code, adv.message);
    }
    let out = cfg.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    println!(
        "{} design on {} units ({} treated): max |post std diff| = {:.4}",
        report.matching.provenance.method,
        report.data.n_units,
        report.data.n_treated,
        report.balance.max_abs_std_diff_post()
    );
    if let Some(e) = &report.effect {
        println!(
            "{} estimate {:.6} (se {:.6}, 95% CI [{:.6}, {:.6}])",
            e.estimand, e.tau_hat, e.se, e.ci95.0, e.ci95.1
        );
    }
    if report.imbalanced {
        eprintln!("balance check failed: some |std diff| exceeds {}", report.balance.thresholds.std_diff_max);
    }
    println!("report written to {out}");
    Ok(outcome.exit_code)
}

fn simulate(scenario: &PathBuf, seed: Option<u64>, out: &PathBuf) -> Result<i32, String> {
    let text = fs::read_to_string(scenario).map_err(|e| e.to_string())?;
    let mut s = Scenario::from_json(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let g = simbench::generate(&s).map_err(|e| e.to_string())?;
    let file = fs::File::create(out).map_err(|e| e.to_string())?;
    obsdesign::dataset::write_csv(&g.frame, "treat", "y", file).map_err(|e| e.to_string())?;
    Ok(0)
}

fn bench(scenario: &PathBuf, design: &PathBuf, covariate: &str, reps: usize, out: Option<&PathBuf>) -> Result<i32, String> {
    let s = Scenario::from_json(&fs::read_to_string(scenario).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let d: BenchDesign =
        serde_json::from_str(&fs::read_to_string(design).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r = simbench::bias_reduction(&s, &d, covariate, reps).map_err(|e| e.to_string())?;
    match out {
        Some(p) => r.write_csv(fs::File::create(p).map_err(|e| e.to_string())?),
        None => r.write_csv(std::io::stdout()),
    }
    .map_err(|e| e.to_string())?;
    eprintln!("mean percent bias reduction: {:.2}", r.mean_percent);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        None => run(&cli.run).unwrap_or_else(|e| {
            eprintln!("{}", e.to_json());
            e.code()
        }),
        Some(cmd) => {
            let res = match cmd {
                Command::Simulate { scenario, seed, out } => simulate(scenario, *seed, out),
                Command::Bench {
                    scenario,
                    design,
                    covariate,
                    reps,
                    out,
                } => bench(scenario, design, covariate, *reps, out.as_ref()),
            };
            res.unwrap_or_else(|msg| {
                eprintln!("{}", serde_json::json!({ "error": { "code": 2, "kind": "simbench", "message": msg } }));
                2
            })
        }
    };
    ExitCode::from(code as u8)
}
