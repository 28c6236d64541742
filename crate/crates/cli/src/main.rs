//! Command-line driver: ingest, truncate, model, synthesize and evaluate with
//! reproducible configuration.

use clap::{Args, Parser, Subcommand};
use relsynth::data::{load_database, truncate, write_database, Database};
use relsynth::eval::{evaluate, gen_benchmark, BenchmarkProfile};
use relsynth::pipeline::{default_delta, load_bundle, model_database, PipelineConfig};
use relsynth::privacy::{consumption_single, LedgerAudit, PlanConfig};
use relsynth::schema::{parse_schema, to_toml, DatabaseSchema};
use relsynth::synth::{synthesize, SynthOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "relsynth",
    version,
    about = "Differentially private synthesis of multi-relation categorical databases"
)]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, truncate, model and synthesize a database.
    Synth(SynthArgs),
    /// Compare a synthetic database against ground truth with count queries.
    Eval(EvalArgs),
    /// Summarize a ledger audit (optionally cross-checked against the bundle's
    /// closed-form consumption).
    Audit(AuditArgs),
    /// Generate a planted benchmark database.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Schema file (TOML).
    #[arg(long)]
    schema: PathBuf,
    /// Directory with one <relation>.csv per relation.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (synthetic/, bundle/).
    #[arg(long)]
    out: PathBuf,
    /// Privacy budget epsilon.
    #[arg(long)]
    epsilon: f64,
    /// Privacy parameter delta (default: 1/n of the largest secondary private
    /// relation).
    #[arg(long)]
    delta: Option<f64>,
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// EM assignment mode.
    #[arg(long, value_parser = ["soft", "hard"], default_value = "soft")]
    em_mode: String,
    /// Disable noise entirely (no DP guarantee; for calibration runs).
    #[arg(long, default_value_t = false)]
    noiseless: bool,
    /// EM iterations per FK (T).
    #[arg(long, default_value_t = 6)]
    t_em: usize,
    /// Candidate-selection rounds (T_C).
    #[arg(long, default_value_t = 2)]
    t_rounds: usize,
    /// Candidates sampled per round (n_C).
    #[arg(long, default_value_t = 400)]
    n_candidates: usize,
    /// Usefulness constant (lambda).
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    /// Budget fraction for the single-relation stage.
    #[arg(long, default_value_t = 0.20)]
    frac_single: f64,
    /// Budget fraction for the EM invocations.
    #[arg(long, default_value_t = 0.75)]
    frac_em: f64,
    /// Budget fraction for candidate scoring.
    #[arg(long, default_value_t = 0.05)]
    frac_score: f64,
    /// Cap on the latent domain size.
    #[arg(long, default_value_t = 12)]
    k_cap: usize,
    /// Fixed latent domain size (bypasses the usefulness rule).
    #[arg(long)]
    latent_domain: Option<usize>,
    /// Gradient-ascent step budget per fit.
    #[arg(long, default_value_t = 120)]
    fit_steps: usize,
    /// Override the primary relation's synthetic size.
    #[arg(long)]
    target_primary: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Ground-truth data directory.
    #[arg(long)]
    truth: PathBuf,
    /// Synthetic data directory.
    #[arg(long)]
    synth: PathBuf,
    /// Number of random queries.
    #[arg(long, default_value_t = 500)]
    queries: usize,
    /// Child predicates per query (1 or 2).
    #[arg(long, default_value_t = 1)]
    c: usize,
    /// Attributes per predicate (1 or 2).
    #[arg(long, default_value_t = 1)]
    attrs_per_pred: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full per-query report here (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// A ledger.json file, or a bundle directory containing one.
    #[arg(long)]
    ledger: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark profile: two_cluster_households | chain_3level | public_parent.
    #[arg(long)]
    profile: String,
    /// Primary-relation size parameter.
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (schema.toml + data/ + planted.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl std::fmt::Display) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

macro_rules! wrap {
    ($cat:literal, $ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($cat, e)
            }
        }
    };
}
wrap!("schema", relsynth::schema::SchemaError);
wrap!("data", relsynth::data::DataError);
wrap!("pipeline", relsynth::pipeline::PipelineError);
wrap!("synth", relsynth::synth::SynthError);
wrap!("model", relsynth::select::SelectError);
wrap!("io", std::io::Error);
wrap!("serialize", serde_json::Error);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Eval(args) => run_eval(args),
        Command::Audit(args) => run_audit(args),
        Command::Bench(args) => run_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error:{}: {}", e.category, e.message);
            ExitCode::FAILURE
        }
    }
}

fn verbose() -> bool {
    std::env::var("RELSYNTH_LOG")
        .map(|v| !v.is_empty() && v != "off")
        .unwrap_or(false)
}

fn log(msg: impl std::fmt::Display) {
    if verbose() {
        eprintln!("[relsynth] {msg}");
    }
}

fn load_inputs(schema_path: &Path, data: &Path) -> Result<Database, CliError> {
    let text = std::fs::read_to_string(schema_path)?;
    let schema: DatabaseSchema = parse_schema(&text)?;
    let db = load_database(&schema, data)?;
    Ok(truncate(&db))
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let db = load_inputs(&args.schema, &args.data)?;
    log(format!(
        "loaded {} relations after truncation",
        db.relations.len()
    ));
    let delta = args.delta.unwrap_or_else(|| default_delta(&db));
    let mut plan = if args.noiseless {
        PlanConfig::noiseless()
    } else {
        PlanConfig::new(args.epsilon, delta)
    };
    plan.t_em = args.t_em;
    plan.t_rounds = args.t_rounds;
    plan.n_candidates = args.n_candidates;
    plan.lambda = args.lambda;
    plan.frac_single = args.frac_single;
    plan.frac_em = args.frac_em;
    plan.frac_score = args.frac_score;

    let mut config = PipelineConfig::new(plan, args.seed);
    config.soft_em = args.em_mode == "soft";
    config.fit_steps = args.fit_steps;
    config.k_cap = args.k_cap;
    config.k_override = args.latent_domain;

    let bundle = model_database(&db, &config)?;
    for w in &bundle.warnings {
        log(format!("warning: {w}"));
    }
    log(format!(
        "modeling done: ledger total {:.6} of budget {:.6}",
        bundle.ledger.total(),
        bundle.ledger.gamma_sq_bound
    ));

    let options = SynthOptions {
        target_primary: args.target_primary,
    };
    let (synthetic, report) = synthesize(&bundle, &db, &options, args.seed)?;
    for w in &report.warnings {
        log(format!("warning: {w}"));
    }

    std::fs::create_dir_all(&args.out)?;
    relsynth::pipeline::save_bundle(&bundle, &args.out.join("bundle"))?;
    write_database(&synthetic, &args.out.join("synthetic"))?;
    println!(
        "synthesized {} relations; privacy consumption {:.9} (bound {:.9})",
        synthetic.relations.len(),
        bundle.ledger.total(),
        bundle.ledger.gamma_sq_bound
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    if !(1..=2).contains(&args.c) || !(1..=2).contains(&args.attrs_per_pred) {
        return Err(CliError::new(
            "args",
            "--c and --attrs-per-pred must be 1 or 2",
        ));
    }
    let text = std::fs::read_to_string(&args.schema)?;
    let schema: DatabaseSchema = parse_schema(&text)?;
    let truth = load_database(&schema, &args.truth)?;
    let synth = load_database(&schema, &args.synth)?;
    let fk = *schema
        .private_fk_order()
        .first()
        .ok_or_else(|| CliError::new("args", "schema has no private foreign key to query"))?;
    let report = evaluate(
        &truth,
        &synth,
        fk,
        args.queries,
        args.c,
        args.attrs_per_pred,
        args.seed,
    );
    println!(
        "mean relative error over {} queries (c={}, attrs/pred={}): {:.6}",
        report.queries, report.c, report.attrs_per_pred, report.mean_relative_error
    );
    if let Some(path) = args.out {
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn run_audit(args: AuditArgs) -> Result<(), CliError> {
    let (ledger_path, bundle_dir) = if args.ledger.is_dir() {
        (args.ledger.join("ledger.json"), Some(args.ledger.clone()))
    } else {
        (args.ledger.clone(), None)
    };
    let audit: LedgerAudit = serde_json::from_str(&std::fs::read_to_string(&ledger_path)?)?;
    println!(
        "epsilon = {}, delta = {}, budget gamma^2 = {:.9}",
        audit.epsilon, audit.delta, audit.gamma_sq_bound
    );
    // Group entries by component (the first label segment).
    let mut by_component: std::collections::BTreeMap<String, (u64, f64)> = Default::default();
    for e in &audit.entries {
        let key = e.label.split('/').next().unwrap_or("?").to_string();
        let slot = by_component.entry(key).or_insert((0, 0.0));
        slot.0 += e.count;
        slot.1 += e.count as f64 * (e.sensitivity / e.sigma).powi(2);
    }
    for (component, (count, consumption)) in &by_component {
        println!("  {component}: {count} queries, consumption {consumption:.9}");
    }
    println!("total consumption = {:.9}", audit.total);
    let ok = audit.total <= audit.gamma_sq_bound + 1e-9;
    println!(
        "budget check: {}",
        if ok { "within budget" } else { "EXCEEDED" }
    );

    if let Some(dir) = bundle_dir {
        if dir.join("manifest.json").exists() {
            let bundle = load_bundle(&dir)?;
            let mut closed = 0.0;
            for e in &bundle.fk_models {
                let label = e.label.trim_start_matches("fk:");
                let noise = bundle.plan.fk_noise(label);
                let c = relsynth::privacy::consumption_c2(&e.c2, noise);
                println!("  closed form {}: {c:.9}", e.label);
                closed += c;
            }
            for s in &bundle.standalone {
                let label = s.label.trim_start_matches("rel:");
                let noise = bundle.plan.standalone_noise(label);
                let c = consumption_single(noise.mu, &s.model.realized, &noise.single);
                println!("  closed form {}: {c:.9}", s.label);
                closed += c;
            }
            println!("closed-form total = {closed:.9}");
            let rel = (audit.total - closed).abs() / closed.max(1e-12);
            println!("ledger vs closed form: relative difference {rel:.3e}");
        }
    }
    if !ok {
        return Err(CliError::new("privacy", "ledger total exceeds the budget"));
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<(), CliError> {
    let profile: BenchmarkProfile = args
        .profile
        .parse()
        .map_err(|e: String| CliError::new("args", e))?;
    let (db, planted) = gen_benchmark(profile, args.size, args.seed);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("schema.toml"), to_toml(&db.schema))?;
    write_database(&db, &args.out.join("data"))?;
    std::fs::write(
        args.out.join("planted.json"),
        serde_json::to_string_pretty(&planted)? + "\n",
    )?;
    println!(
        "wrote benchmark '{}' with {} relations to {}",
        args.profile,
        db.relations.len(),
        args.out.display()
    );
    Ok(())
}
