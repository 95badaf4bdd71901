use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use recalign::error::Error as CoreError;
use recalign::frontier::{
    best_response_decoder, bound_report, default_convexity_tolerance, parse_gamma_grid, trade_off_curve_on,
    verify_prop2, BoundReport, FrontierPoint, MapSource, MapTable, DEFAULT_SEARCH_CAP, SLACK_TOL,
};
use recalign::instance::{shipped, Instance, SHIPPED};
use recalign::prob::DivergenceKind;
use recalign::repmap::{case_report, Decoder, GoldenRisks, Counterexample, GOLDEN_RISKS};
use recalign::trainer::{
    format_report, log_jsonl, parse_results_csv, run_sweep, summarize, train_on_config_data, write_results_csv,
    ResultRow, SweepSpec, TrainConfig,
};

/// Tolerance for the `examples` golden comparison.
const GOLDEN_TOL: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "recalign", version, about = "Finite-domain alignment/reconstruction trade-offs and a small training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Seen/unseen risks of the two alignment counterexamples, checked
    /// against golden values.
    Examples {
        #[arg(long)]
        json: bool,
        /// JSON file of expected risks, `{"example1": [s, u], "example2": [s, u]}`.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Both lower bounds on the unseen-domain information, per map.
    Bounds {
        #[command(flatten)]
        inst: InstanceArgs,
        /// `all`, or the id of one map in the search order.
        #[arg(long, default_value = "all")]
        map: String,
        /// Decoder paired with each map.
        #[arg(long, value_enum, default_value_t = ThetaMode::Best)]
        theta: ThetaMode,
        #[command(flatten)]
        out: OutArgs,
    },
    /// The alignment-versus-reconstruction curve T(γ) and its shape check.
    Frontier {
        #[command(flatten)]
        inst: InstanceArgs,
        /// `start:stop:count`.
        #[arg(long, default_value = "0:1:11")]
        gamma_grid: String,
        /// Fixed decoder for the curve.
        #[arg(long, value_enum, default_value_t = ThetaMode::Instance)]
        theta: ThetaMode,
        #[command(flatten)]
        out: OutArgs,
    },
    /// One training run from a JSON config.
    Train {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_timing: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// A hyperparameter sweep from a JSON sweep file, with per-variant
    /// model selection.
    Sweep {
        sweep: PathBuf,
        /// Replaces the sweep's seeds with `seed, seed+1, ...`, keeping
        /// their count.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_timing: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Mean ± std of the validation-selected runs in a results CSV.
    Report {
        results: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug)]
struct InstanceArgs {
    /// Instance JSON file, or the name of a built-in instance
    /// (demo, identical, covariate_shift).
    instance: String,
    #[arg(long, value_enum, default_value_t = Div::Kl)]
    divergence: Div,
    /// Search stochastic maps on this simplex grid instead of deterministic
    /// maps.
    #[arg(long)]
    resolution: Option<u32>,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Div {
    Kl,
    Js,
}

impl From<Div> for DivergenceKind {
    fn from(d: Div) -> Self {
        match d {
            Div::Kl => DivergenceKind::Kl,
            Div::Js => DivergenceKind::Js,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ThetaMode {
    /// The decoder given in the instance file.
    Instance,
    /// The truncated identity.
    Identity,
    /// The reconstruction-optimal decoder for each map.
    Best,
}

/// A property or golden check failed; exit status 1.
#[derive(Debug)]
struct Violation(String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Violation>().is_some() {
        return 1;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::DivergedLoss { .. }) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Examples { json, golden } => cmd_examples(json, golden.as_deref()),
        Command::Bounds { inst, map, theta, out } => cmd_bounds(&inst, &map, theta, &out),
        Command::Frontier { inst, gamma_grid, theta, out } => cmd_frontier(&inst, &gamma_grid, theta, &out),
        Command::Train { config, seed, no_timing, out } => cmd_train(&config, seed, no_timing, &out),
        Command::Sweep { sweep, seed, no_timing, out } => cmd_sweep(&sweep, seed, no_timing, &out),
        Command::Report { results, out } => cmd_report(&results, &out),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(anyhow::Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_instance(spec: &str) -> Result<Instance> {
    let p = Path::new(spec);
    if !p.exists() {
        if let Some(i) = shipped(spec) {
            return Ok(i);
        }
        let names: Vec<&str> = SHIPPED.iter().map(|(n, _)| *n).collect();
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{spec}: no such file or built-in instance ({})", names.join(", "))
        ));
    }
    Ok(Instance::from_json(&read(p)?).with_context(|| format!("parsing {spec}"))?)
}

fn search_for(inst: &Instance, args: &InstanceArgs) -> Result<MapSource> {
    let x = inst.unseen.x_space().size();
    Ok(match args.resolution {
        None => MapSource::deterministic(x, inst.z_size, DEFAULT_SEARCH_CAP)?,
        Some(r) => MapSource::stochastic_grid(x, inst.z_size, r, DEFAULT_SEARCH_CAP)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

// ---------------------------------------------------------------- examples

fn cmd_examples(as_json: bool, golden: Option<&Path>) -> Result<()> {
    let golden = match golden {
        Some(p) => GoldenRisks::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => GOLDEN_RISKS,
    };
    let mut reports = Vec::new();
    let mut bad = Vec::new();
    for case in [Counterexample::Example1, Counterexample::Example2] {
        let r = case_report(case)?;
        let (s, u) = golden.expected(case);
        if (r.seen_risk - s).abs() > GOLDEN_TOL || (r.unseen_risk - u).abs() > GOLDEN_TOL {
            bad.push(format!(
                "{case:?}: computed {:.12}/{:.12}, expected {s}/{u}",
                r.seen_risk, r.unseen_risk
            ));
        }
        reports.push(r);
    }
    if as_json {
        print!("{}", json(&serde_json::json!({ "cases": reports, "golden": golden, "matches": bad.is_empty() })));
    } else {
        println!("{:<9} {:>10} {:>12} {:>10} {:>12} {:>10} {:>12}", "case", "seen risk", "unseen risk",
                 "I_s(Y;Z)", "I_u(Y;Z)", "KL(Y,Z)", "KL(Z)");
        for r in &reports {
            println!(
                "{:<9} {:>10.4} {:>12.4} {:>10.6} {:>12.6} {:>10.6} {:>12.6}",
                format!("{:?}", r.case).to_lowercase(),
                r.seen_risk,
                r.unseen_risk,
                r.i_seen_yz,
                r.i_unseen_yz,
                r.kl_joint,
                r.kl_z_marginal
            );
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Violation(format!("golden mismatch: {}", bad.join("; "))).into())
    }
}

// ---------------------------------------------------------------- bounds

fn decoder_for(inst: &Instance, theta: ThetaMode, f: &recalign::repmap::RepresentationMap) -> Result<Decoder> {
    let x = inst.unseen.x_space().size();
    Ok(match theta {
        ThetaMode::Instance => inst.decoder.clone(),
        ThetaMode::Identity => Decoder::truncated_identity(inst.z_size, x),
        ThetaMode::Best => best_response_decoder(&inst.unseen, f, &inst.distortion)?,
    })
}

fn cmd_bounds(args: &InstanceArgs, map: &str, theta: ThetaMode, out: &OutArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let search = search_for(&inst, args)?;
    let div = args.divergence.into();
    let ids: Vec<u64> = if map == "all" {
        (0..search.count()).collect()
    } else {
        let id: u64 = map
            .parse()
            .map_err(|e| CoreError::Parse(format!("--map {map:?}: {e}")))?;
        if id >= search.count() {
            bail!(CoreError::InvalidConfig(format!("map id {id} is outside 0..{}", search.count())));
        }
        vec![id]
    };
    let table = MapTable::build(&inst.unseen, &inst.seen, &search, div, &inst.distortion,
                                recalign::frontier::ReconDomain::Unseen)?;
    let reports = ids
        .iter()
        .map(|&id| {
            let f = search.map(id);
            let th = decoder_for(&inst, theta, &f)?;
            Ok(bound_report(&table, &inst.unseen, &inst.seen, &f, &th, &inst.distortion, div)?)
        })
        .collect::<Result<Vec<BoundReport>>>()?;
    let min1 = reports.iter().map(|r| r.slack_1).fold(f64::INFINITY, f64::min);
    let min2 = reports.iter().map(|r| r.slack_2).fold(f64::INFINITY, f64::min);
    let failing: Vec<u64> = reports.iter().filter(|r| !r.holds()).map(|r| r.map_id).collect();
    let doc = serde_json::json!({
        "instance": inst.name,
        "divergence": format!("{:?}", args.divergence).to_lowercase(),
        "resolution": args.resolution,
        "maps": reports.len(),
        "min_slack_1": min1,
        "min_slack_2": min2,
        "violations": failing,
        "reports": reports,
    });
    if let Some(dir) = &out.out {
        write_out(dir, "bounds.json", &json(&doc))?;
    }
    if out.json {
        print!("{}", json(&doc));
    } else {
        println!("instance {}: {} maps, min slack {min1:.3e} (seen bound) / {min2:.3e} (reconstruction bound)",
                 inst.name, reports.len());
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Violation(format!("{} maps have slack below -{SLACK_TOL:e}: {failing:?}", failing.len())).into())
    }
}

// ---------------------------------------------------------------- frontier

fn frontier_csv(curve: &[FrontierPoint]) -> String {
    let mut s = String::from("gamma,k_min,map_id,decoder_id,feasible\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{:?},{},{},{},{}",
            p.gamma,
            fmt_opt(p.k_min),
            p.map_id.map_or(String::new(), |v| v.to_string()),
            p.decoder_id.map_or(String::new(), |v| v.to_string()),
            u8::from(p.feasible())
        );
    }
    s
}

fn cmd_frontier(args: &InstanceArgs, grid: &str, theta: ThetaMode, out: &OutArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let search = search_for(&inst, args)?;
    let grid = parse_gamma_grid(grid)?;
    if theta == ThetaMode::Best {
        bail!(CoreError::InvalidConfig("the frontier needs a fixed decoder: use --theta instance or identity".into()));
    }
    let th = decoder_for(&inst, theta, &search.map(0))?;
    let curve = trade_off_curve_on(&inst.unseen, &inst.seen, &th, &inst.distortion, &grid, &search,
                                   args.divergence.into(), inst.reconstruction_domain)?;
    let tol = default_convexity_tolerance(&curve, args.resolution);
    let shape = verify_prop2(&curve, tol)?;
    let csv = frontier_csv(&curve);
    if let Some(dir) = &out.out {
        write_out(dir, "frontier.csv", &csv)?;
        write_out(dir, "shape.json", &json(&shape))?;
    }
    if out.json {
        print!("{}", json(&serde_json::json!({ "instance": inst.name, "curve": curve, "shape": shape })));
    } else {
        print!("{csv}");
        eprintln!(
            "shape: {} feasible points, monotonicity violation {:.3e}, convexity violation {:.3e} (tolerance {:.3e})",
            shape.feasible_points, shape.max_monotonicity_violation, shape.max_convexity_violation,
            shape.convexity_tolerance
        );
    }
    if shape.passes() {
        Ok(())
    } else {
        Err(Violation(format!(
            "curve shape check failed (monotone: {}, convex: {})",
            shape.monotone, shape.convex
        ))
        .into())
    }
}

// ---------------------------------------------------------------- training

fn cmd_train(path: &Path, seed: Option<u64>, no_timing: bool, out: &OutArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut o = train_on_config_data(&cfg).context("training")?;
    if no_timing {
        o.result.wall_ms = 0;
    }
    if let Some(dir) = &out.out {
        write_out(dir, "result.json", &json(&o.result))?;
        write_out(dir, "log.jsonl", &log_jsonl(0, &o.log))?;
        write_out(dir, "params.json", &o.params.to_checkpoint_json())?;
    }
    if out.json {
        print!("{}", json(&o.result));
    } else {
        let r = &o.result;
        println!(
            "{} seed {}: train {:.4}, val {:.4}, test {:.4}; final loss {:.6} (risk {:.6}, discrepancy {:.6}, reconstruction {:.6}); {} ms",
            r.algorithm, r.seed, r.train_acc, r.val_acc, r.test_acc, r.final_loss.total, r.final_loss.risk,
            r.final_loss.discrepancy, r.final_loss.reconstruction, r.wall_ms
        );
    }
    Ok(())
}

fn cmd_sweep(path: &Path, seed: Option<u64>, no_timing: bool, out: &OutArgs) -> Result<()> {
    let mut spec = SweepSpec::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        let n = spec.seeds.len() as u64;
        spec.seeds = (0..n).map(|k| s.wrapping_add(k)).collect();
    }
    let outcomes = run_sweep(&spec)?;
    let mut diverged = String::new();
    for o in outcomes.iter().filter(|o| o.result.is_none()) {
        let _ = writeln!(
            diverged,
            "trial {} ({} seed {}, config {}): {}",
            o.trial.index,
            o.trial.variant,
            o.trial.config.seed,
            o.trial.config_index,
            o.error.as_deref().unwrap_or("no result")
        );
    }
    let n_div = diverged.lines().count();
    if n_div > 0 {
        eprintln!("{n_div} of {} trials diverged{}", outcomes.len(),
                  if out.out.is_some() { " (listed in diverged.txt)" } else { "" });
    }
    let rows: Vec<ResultRow> = outcomes.iter().map(ResultRow::from_outcome).collect();
    let summary = summarize(&rows)?;
    let table = format_report(&summary);
    if let Some(dir) = &out.out {
        write_out(dir, "results.csv", &write_results_csv(&rows, !no_timing))?;
        write_out(dir, "diverged.txt", &diverged)?;
        write_out(dir, "report.txt", &table)?;
        write_out(dir, "report.json", &json(&summary))?;
    }
    if out.json {
        print!("{}", json(&summary));
    } else {
        print!("{table}");
    }
    Ok(())
}

fn cmd_report(path: &Path, out: &OutArgs) -> Result<()> {
    let rows = parse_results_csv(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let summary = summarize(&rows)?;
    let table = format_report(&summary);
    if let Some(dir) = &out.out {
        write_out(dir, "report.txt", &table)?;
        write_out(dir, "report.json", &json(&summary))?;
    }
    if out.json {
        print!("{}", json(&summary));
    } else {
        print!("{table}");
    }
    if summary.iter().all(|s| s.seeds == 0) {
        return Err(anyhow!(CoreError::EmptyInput("every run in the file diverged".into())));
    }
    Ok(())
}
