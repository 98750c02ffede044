//! `roekit` — computes robust operating envelopes for unbalanced three-phase
//! distribution feeders, exports linear feasible regions, validates envelope
//! files against the exact power flow, and runs the brute-force oracles.
//!
//! Exit codes: 0 success, 1 usage/parse error, 2 infeasible problem,
//! 3 validation violations.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use roe_core::expand::ExpandError;
use roe_core::linfr::{build_fr, linearize};
use roe_core::netmodel::{NetworkModel, Status};
use roe_core::pipeline::{
    baseline_envelopes, compute_roe, deterministic_baseline, monte_carlo_validate, EnvelopeSet,
    PipelineError, RoeConfig,
};
use roe_core::polytope::{ccw_polygon, enumerate_vertices, exact_dfr_small, GeomError, Polyhedron};
use roe_core::utpf::trace_fr_boundary;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "roekit", version, about = "Robust operating envelope toolkit")]
struct Cli {
    /// Cap the worker-thread fan-out for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "roekit-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute envelopes for every active customer of a network.
    Compute(ComputeArgs),
    /// Deterministic single-point baseline allocation, written in envelope
    /// format so it can run through `validate`.
    Baseline(BaselineArgs),
    /// Export the linear feasible region at a fixed or optimised reactive
    /// setpoint.
    Fr(FrArgs),
    /// Replay random utilisation scenarios against the exact power flow.
    Validate(ValidateArgs),
    /// Brute-force oracles for cross-checking.
    #[command(subcommand)]
    Oracle(OracleCmd),
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long)]
    net: PathBuf,
    /// JSON file with a full run configuration (overrides the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimise reactive setpoints (default) / keep them at mid-bounds.
    #[arg(long, overrides_with = "no_q_opt")]
    q_opt: bool,
    #[arg(long = "no-q-opt")]
    no_q_opt: bool,
    /// Exploit the import/export statuses stored in the network file.
    #[arg(long)]
    use_statuses: bool,
    /// JSON map customer-id -> "importing" | "exporting" | "free" applied on
    /// top of the network file.
    #[arg(long)]
    statuses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.005)]
    v_margin: f64,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    net: PathBuf,
    /// JSON map customer-id -> "importing" | "exporting" | "free".
    #[arg(long)]
    statuses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FrArgs {
    #[arg(long)]
    net: PathBuf,
    /// Comma-separated reactive setpoints in kVar, one per active customer.
    #[arg(long, conflicts_with = "optimized")]
    q: Option<String>,
    /// Use the stage-1 optimised reactive setpoints.
    #[arg(long)]
    optimized: bool,
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    envelopes: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenarios: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.005)]
    v_margin: f64,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Enumerate all vertices of a 2-D/3-D polyhedron file.
    Vertices {
        #[arg(long)]
        poly: PathBuf,
    },
    /// Exact maximal decoupled box of a small-dimension region file.
    ExactDfr {
        #[arg(long)]
        fr: PathBuf,
    },
    /// Nonlinear feasible-region boundary of a two-customer network.
    Boundary {
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value_t = 50)]
        points: usize,
        /// Comma-separated reactive powers in kVar (default all zero).
        #[arg(long)]
        q: Option<String>,
        /// Swept / bound customer ids (defaults: first and second active).
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        bound: Option<String>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    inputs: Vec<String>,
    config: serde_json::Value,
    tool_version: String,
    seed: u64,
    timings_ms: BTreeMap<String, u128>,
}

fn log_enabled() -> bool {
    std::env::var("ROEKIT_LOG")
        .map(|v| !v.is_empty() && v != "off")
        .unwrap_or(false)
}

macro_rules! progress {
    ($($arg:tt)*) => {
        if log_enabled() {
            eprintln!($($arg)*);
        }
    };
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("roekit: could not configure {n} threads: {e}");
            std::process::exit(1);
        }
    }
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("roekit: {e:#}");
            classify(&e)
        }
    };
    std::process::exit(code);
}

/// Maps error chains onto the documented exit codes.
fn classify(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Geom(GeomError::EmptyInterior)
                | PipelineError::NoActiveCustomers => 2,
                _ => 1,
            };
        }
        if let Some(g) = cause.downcast_ref::<GeomError>() {
            if matches!(g, GeomError::EmptyInterior) {
                return 2;
            }
        }
        if let Some(x) = cause.downcast_ref::<ExpandError>() {
            if matches!(x, ExpandError::InitialNotContained { .. }) {
                return 2;
            }
        }
    }
    1
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.command {
        Command::Compute(args) => cmd_compute(cli, args),
        Command::Baseline(args) => cmd_baseline(cli, args),
        Command::Fr(args) => cmd_fr(cli, args),
        Command::Validate(args) => cmd_validate(cli, args),
        Command::Oracle(cmd) => cmd_oracle(cli, cmd),
    }
}

fn cmd_baseline(cli: &Cli, args: &BaselineArgs) -> anyhow::Result<i32> {
    let t0 = Instant::now();
    let mut net = load_net(&args.net)?;
    if let Some(path) = &args.statuses {
        net = apply_status_file(&net, path)?;
    }
    let statuses: Vec<i8> = net
        .active_customers()
        .iter()
        .map(|&ci| match net.doc.customers[ci].status() {
            Status::Importing => 1,
            Status::Exporting => -1,
            Status::Free => 1, // the baseline needs a direction; default to import
        })
        .collect();
    let (alloc, q) = deterministic_baseline(&net, &statuses)?;
    let env = baseline_envelopes(&net, &alloc, &q, &statuses);
    std::fs::write(cli.out.join("baseline_envelopes.json"), env.to_json())?;
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), t0.elapsed().as_millis());
    write_manifest(
        &cli.out,
        "baseline",
        &[&args.net],
        serde_json::json!({"statuses": statuses}),
        args.seed,
        timings,
    )?;
    Ok(0)
}

fn load_net(path: &Path) -> anyhow::Result<NetworkModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkModel::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    inputs: &[&Path],
    config: serde_json::Value,
    seed: u64,
    timings: BTreeMap<String, u128>,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        timings_ms: timings,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn apply_status_file(net: &NetworkModel, path: &Path) -> anyhow::Result<NetworkModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let map: BTreeMap<String, String> = serde_json::from_str(&text)
        .with_context(|| format!("parsing status file {}", path.display()))?;
    let mut doc = net.doc.clone();
    for cust in &mut doc.customers {
        if let Some(s) = map.get(&cust.id) {
            let status = match s.as_str() {
                "importing" => Status::Importing,
                "exporting" => Status::Exporting,
                "free" => Status::Free,
                other => return Err(anyhow!("unknown status '{other}' for customer {}", cust.id)),
            };
            if let roe_core::netmodel::CustomerKind::Active { status: st, .. } = &mut cust.kind {
                *st = status;
            }
        }
    }
    NetworkModel::from_doc(doc).map_err(|e| anyhow!("{e}"))
}

fn cmd_compute(cli: &Cli, args: &ComputeArgs) -> anyhow::Result<i32> {
    let t0 = Instant::now();
    let mut net = load_net(&args.net)?;
    if let Some(path) = &args.statuses {
        net = apply_status_file(&net, path)?;
    }
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<RoeConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RoeConfig::default(),
    };
    if args.config.is_none() {
        cfg.optimize_q = !args.no_q_opt;
        cfg.use_statuses = args.use_statuses || args.statuses.is_some();
        cfg.seed = args.seed;
        cfg.v_margin = args.v_margin;
    }
    progress!("computing envelopes for {} ...", args.net.display());
    let env = compute_roe(&net, &cfg)?;
    let mut timings = BTreeMap::new();
    if let Some(t) = &env.timings {
        timings.insert("inscribe".into(), t.inscribe);
        timings.insert("reduce".into(), t.reduce);
        timings.insert("expand".into(), t.expand);
    }
    timings.insert("total".into(), t0.elapsed().as_millis());
    std::fs::write(cli.out.join("envelopes.json"), env.to_json())?;
    write_manifest(
        &cli.out,
        "compute",
        &[&args.net],
        serde_json::to_value(&cfg)?,
        cfg.seed,
        timings,
    )?;
    progress!(
        "wrote {} (region {} -> {} rows, {} expansion rounds)",
        cli.out.join("envelopes.json").display(),
        env.stages.fr_rows_full,
        env.stages.fr_rows_reduced,
        env.stages.expansion_rounds
    );
    Ok(0)
}

fn parse_q(arg: &Option<String>, n: usize) -> anyhow::Result<Array1<f64>> {
    match arg {
        None => Ok(Array1::zeros(n)),
        Some(text) => {
            let vals: Result<Vec<f64>, _> =
                text.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| anyhow!("bad --q value: {e}"))?;
            if vals.len() != n {
                return Err(anyhow!("--q has {} entries, need {}", vals.len(), n));
            }
            Ok(Array1::from_vec(vals))
        }
    }
}

fn polygon_csv(poly: &Polyhedron) -> anyhow::Result<String> {
    let verts = enumerate_vertices(poly).map_err(|e| anyhow!("{e}"))?;
    let ring = ccw_polygon(&verts, true);
    let mut csv = String::from("p1_kw,p2_kw\n");
    for v in ring {
        csv.push_str(&format!("{:.6},{:.6}\n", v[0], v[1]));
    }
    Ok(csv)
}

fn cmd_fr(cli: &Cli, args: &FrArgs) -> anyhow::Result<i32> {
    let t0 = Instant::now();
    let net = load_net(&args.net)?;
    let lm = linearize(&net, None)?;
    let n = lm.n_p();
    let q = if args.optimized {
        let cfg = RoeConfig {
            seed: args.seed,
            ..RoeConfig::default()
        };
        let env = compute_roe(&net, &cfg)?;
        Array1::from_vec(env.stages.q_star.clone())
    } else {
        parse_q(&args.q, n)?
    };
    let fr = build_fr(&lm, &q)?;
    std::fs::write(cli.out.join("fr.json"), fr.to_json())?;
    let mut wrote_polygon = false;
    if n == 2 {
        std::fs::write(cli.out.join("fr_polygon.csv"), polygon_csv(&fr)?)?;
        wrote_polygon = true;
    }
    if args.format == "csv" && !wrote_polygon {
        progress!("csv polygon output only available for two active customers");
    }
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), t0.elapsed().as_millis());
    write_manifest(
        &cli.out,
        "fr",
        &[&args.net],
        serde_json::json!({"q": q.to_vec(), "optimized": args.optimized, "format": args.format}),
        args.seed,
        timings,
    )?;
    Ok(0)
}

fn cmd_validate(cli: &Cli, args: &ValidateArgs) -> anyhow::Result<i32> {
    if args.scenarios == 0 {
        return Err(anyhow!("--scenarios must be at least 1"));
    }
    let t0 = Instant::now();
    let net = load_net(&args.net)?;
    let text = std::fs::read_to_string(&args.envelopes)
        .with_context(|| format!("reading {}", args.envelopes.display()))?;
    let env = EnvelopeSet::parse(&text)
        .with_context(|| format!("parsing {}", args.envelopes.display()))?;
    let cfg = RoeConfig {
        scenarios_per_k: args.scenarios,
        seed: args.seed,
        v_margin: args.v_margin,
        ..RoeConfig::default()
    };
    let report = monte_carlo_validate(&net, &env, &cfg)?;
    std::fs::write(cli.out.join("validation.json"), report.to_json())?;
    std::fs::write(cli.out.join("validation.csv"), report.to_csv())?;
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), t0.elapsed().as_millis());
    write_manifest(
        &cli.out,
        "validate",
        &[&args.net, &args.envelopes],
        serde_json::json!({"scenarios": args.scenarios, "v_margin": args.v_margin}),
        args.seed,
        timings,
    )?;
    if report.total_violations > 0 {
        eprintln!(
            "roekit: {} violating scenarios ({} non-converged)",
            report.total_violations, report.total_nonconverged
        );
        return Ok(3);
    }
    progress!("no violations across {} scenario levels", report.rows.len());
    Ok(0)
}

fn cmd_oracle(cli: &Cli, cmd: &OracleCmd) -> anyhow::Result<i32> {
    let t0 = Instant::now();
    let manifest = |inputs: &[&Path], config: serde_json::Value| -> anyhow::Result<()> {
        let mut timings = BTreeMap::new();
        timings.insert("total".into(), t0.elapsed().as_millis());
        write_manifest(&cli.out, "oracle", inputs, config, 0, timings)
    };
    match cmd {
        OracleCmd::Vertices { poly } => {
            let text = std::fs::read_to_string(poly)
                .with_context(|| format!("reading {}", poly.display()))?;
            let p = Polyhedron::parse(&text).map_err(|e| anyhow!("{e}"))?;
            let verts = enumerate_vertices(&p).map_err(|e| anyhow!("{e}"))?;
            let mut csv = String::new();
            csv.push_str(&p.var_names.join(","));
            csv.push('\n');
            for v in &verts {
                let row: Vec<String> = v.iter().map(|x| format!("{x:.9}")).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            std::fs::write(cli.out.join("vertices.csv"), csv)?;
            manifest(&[poly], serde_json::json!({"subcommand": "vertices"}))?;
            println!("{} vertices", verts.len());
            Ok(0)
        }
        OracleCmd::ExactDfr { fr } => {
            let text =
                std::fs::read_to_string(fr).with_context(|| format!("reading {}", fr.display()))?;
            let p = Polyhedron::parse(&text).map_err(|e| anyhow!("{e}"))?;
            let bx = exact_dfr_small(&p, None, None).map_err(|e| anyhow!("{e}"))?;
            let per_var: Vec<serde_json::Value> = p
                .var_names
                .iter()
                .zip(bx.lo.iter().zip(&bx.hi))
                .map(|(name, (lo, hi))| {
                    serde_json::json!({"id": name, "export_kw": lo, "import_kw": hi})
                })
                .collect();
            std::fs::write(
                cli.out.join("exact_dfr.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "bounds": per_var,
                    "volume": bx.volume(),
                }))?,
            )?;
            manifest(&[fr], serde_json::json!({"subcommand": "exact-dfr"}))?;
            println!("exact box volume {:.6}", bx.volume());
            Ok(0)
        }
        OracleCmd::Boundary {
            net,
            points,
            q,
            sweep,
            bound,
        } => {
            let model = load_net(net)?;
            let acts = model.active_customers();
            if acts.len() != 2 {
                return Err(anyhow!(
                    "boundary oracle needs exactly two active customers"
                ));
            }
            let ids: Vec<String> = acts
                .iter()
                .map(|&ci| model.doc.customers[ci].id.clone())
                .collect();
            let sweep_id = sweep.clone().unwrap_or_else(|| ids[0].clone());
            let bound_id = bound.clone().unwrap_or_else(|| ids[1].clone());
            let qv = parse_q(q, 2)?;
            let pts = trace_fr_boundary(
                &model,
                &sweep_id,
                &bound_id,
                *points,
                qv.as_slice().unwrap(),
            )?;
            let mut csv = String::from("sweep_kw,min_kw,max_kw\n");
            for p in &pts {
                csv.push_str(&format!(
                    "{:.6},{},{}\n",
                    p.sweep_kw,
                    p.min_kw.map_or(String::from(""), |v| format!("{v:.6}")),
                    p.max_kw.map_or(String::from(""), |v| format!("{v:.6}")),
                ));
            }
            std::fs::write(cli.out.join("boundary.csv"), csv)?;
            manifest(
                &[net],
                serde_json::json!({
                    "subcommand": "boundary",
                    "points": points,
                    "sweep": sweep_id,
                    "bound": bound_id,
                    "q": qv.to_vec(),
                }),
            )?;
            println!("{} sweep points", pts.len());
            Ok(0)
        }
    }
}
