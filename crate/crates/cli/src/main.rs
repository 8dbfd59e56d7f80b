use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covsel::fit::{fit_class, FitOptions};
use covsel::gauss_criterion::{compute_moments, SampleMoments};
use covsel::io;
use covsel::penalties::{classify_penalty, PenaltySystem};
use covsel::population::{diagnose_assumptions, pseudo_true_summary, OptimalSets, DEFAULT_ETA};
use covsel::select::{fit_family, score_fits};
use covsel::simulate::{pathology_two_point, run_monte_carlo, with_workers};
use covsel::{CandidateFamily, CovselError};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "covsel",
    version,
    about = "Penalized-likelihood order selection for factor-analysis covariance classes",
    after_help = "\
Examples:
  covsel select --data d.csv --family f.json --penalty bic --seed 7 --out r.json
  covsel population --family f.json --target t.json
  covsel simulate --plan plan.json --out mc.json --threads 8
  covsel pathology --sigma-minus 0.5 --out p.json"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for every random choice (starts, probes, simulated data)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; changes wall time only
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the JSON report instead of the summary table
    #[arg(long, global = true)]
    json: bool,

    /// Write the JSON report here
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Optimizer starts per factor class
    #[arg(long, global = true, default_value_t = 8)]
    starts: usize,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file, one observation per row
    #[arg(long, required_unless_present = "moments")]
    data: Option<PathBuf>,

    /// First CSV row is a header
    #[arg(long)]
    header: bool,

    /// Read cached moments instead of data
    #[arg(long, conflicts_with = "data")]
    moments: Option<PathBuf>,

    /// Cache the computed moments as JSON
    #[arg(long)]
    save_moments: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every model and select one by penalized likelihood
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        family: PathBuf,
        /// bic, caic, hbic, ssbic, hq, aic or custom:<file>
        #[arg(long)]
        penalty: Option<String>,
    },
    /// Fit one model (or all) by profiled likelihood
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        family: PathBuf,
        /// Zero-based model index; all models when omitted
        #[arg(long)]
        model: Option<usize>,
    },
    /// Population optima and pseudo-true sets for a target covariance
    Population {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        epsilon_v: Option<f64>,
    },
    /// Common-projection and margin diagnostics
    Diagnose {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 60)]
        probes: usize,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
    },
    /// Monte Carlo selection frequencies for a plan
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        /// Flat CSV of frequencies; defaults to the --out path with .csv
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Two equally good singletons at different covariances
    Pathology {
        #[arg(long)]
        sigma_minus: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [1000usize, 10_000, 100_000])]
        n_grid: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        replications: usize,
    },
    /// Check a penalty against the growth conditions
    ClassifyPenalty {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        penalty: Option<String>,
        /// Target covariance used to compute the optimal sets
        #[arg(long, required_unless_present = "k_star")]
        target: Option<PathBuf>,
        /// Hypothesized globally optimal models (zero-based)
        #[arg(long, value_delimiter = ',', conflicts_with = "target")]
        k_star: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 1000, 10_000, 100_000])]
        n_grid: Vec<usize>,
    },
}

struct Output {
    report: Value,
    table: String,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn load_moments(args: &DataArgs) -> Result<SampleMoments, CovselError> {
    let moments = match (&args.data, &args.moments) {
        (_, Some(path)) => io::load_moments(path)?,
        (Some(path), None) => compute_moments(&io::read_csv_data(path, args.header)?)?,
        (None, None) => return Err(CovselError::InvalidArgument("--data or --moments is required".into())),
    };
    if let Some(path) = &args.save_moments {
        io::save_moments(path, &moments)?;
    }
    Ok(moments)
}

fn resolve_penalty(flag: Option<&str>, from_family: Option<PenaltySystem>) -> Result<PenaltySystem, CovselError> {
    match flag {
        Some(s) => match s.strip_prefix("custom:") {
            Some(file) => io::parse_json(&fs::read_to_string(file)?),
            None => PenaltySystem::from_name(s)
                .ok_or_else(|| CovselError::InvalidArgument(format!("unknown penalty {s:?}"))),
        },
        None => Ok(from_family.unwrap_or(PenaltySystem::Bic)),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn run(cli: &Cli) -> Result<Output, CovselError> {
    let opts = FitOptions { starts: cli.starts, seed: cli.seed, ..FitOptions::default() };
    match &cli.command {
        Command::Select { data, family, penalty } => {
            let (family, fam_penalty) = io::load_family(family)?;
            let system = resolve_penalty(penalty.as_deref(), fam_penalty)?;
            let moments = load_moments(data)?;
            system.validate(&family)?;
            covsel::penalties::model_penalty(&system, &family, 0, moments.n)?;
            let fits = fit_family(&family, &moments, &opts)?;
            let report = score_fits(&family, &fits, &system, moments.n)?;
            let mut table = format!("{:>5} {:>5} {:>8} {:>14} {:>12} {:>14}\n", "model", "order", "d", "T", "penalty", "score");
            for k in 0..family.len() {
                table.push_str(&format!(
                    "{:>5} {:>5} {:>8} {:>14} {:>12.4} {:>14}{}\n",
                    k,
                    family.models[k].order(),
                    family.complexities[k],
                    fmt_opt(report.t_values[k]),
                    report.penalties_applied[k],
                    fmt_opt(report.scores[k]),
                    if k == report.selected_index { "  *" } else { "" }
                ));
            }
            table.push_str(&format!(
                "selected model {} (order {}) under {}, n = {}, margin {}\n",
                report.selected_index,
                report.selected_order,
                report.penalty,
                report.n,
                fmt_opt(report.runner_up_margin)
            ));
            Ok(Output { report: to_value(&report), table })
        }
        Command::Fit { data, family, model } => {
            let (family, _) = io::load_family(family)?;
            let moments = load_moments(data)?;
            let fits = match model {
                Some(k) => {
                    let spec = family
                        .models
                        .get(*k)
                        .ok_or_else(|| CovselError::InvalidArgument(format!("model index {k} out of range")))?;
                    let opts = opts.clone().with_seed(covsel::rng::derive_seed(opts.seed, &[*k as u64]));
                    vec![to_value(&fit_class(spec, &moments, &opts)?)]
                }
                None => fit_family(&family, &moments, &opts)?.iter().map(to_value).collect(),
            };
            let table = fits
                .iter()
                .map(|f| {
                    let r = f.get("result").unwrap_or(f);
                    format!("T = {}  status = {}\n", r.get("t_value").unwrap_or(&Value::Null), r.get("status").unwrap_or(&Value::Null))
                })
                .collect();
            Ok(Output { report: json!({ "n": moments.n, "fits": fits }), table })
        }
        Command::Population { family, target, epsilon_v } => {
            let (family, _) = io::load_family(family)?;
            let target = io::load_target(target)?;
            let s = pseudo_true_summary(&family, &target, *epsilon_v, &opts)?;
            let mut table = format!("{:>5} {:>5} {:>16}\n", "model", "order", "V_k");
            for (k, v) in s.v_values.iter().enumerate() {
                table.push_str(&format!("{:>5} {:>5} {:>16.10}\n", k, s.orders[k], v));
            }
            table.push_str(&format!(
                "V* = {:.10}, K* = {:?}, q* = {}, K0 = {:?}, K** = {:?}, G* exact: {}\n",
                s.v_star, s.k_star, s.q_star, s.k_zero, s.k_double_star, s.g_star.exact
            ));
            Ok(Output { report: to_value(&s), table })
        }
        Command::Diagnose { family, target, probes, eta } => {
            let (family, _) = io::load_family(family)?;
            let target = io::load_target(target)?;
            let s = pseudo_true_summary(&family, &target, None, &opts)?;
            let d = diagnose_assumptions(&family, &s, &target, *probes, *eta, &opts)?;
            let mut table = format!("M2: max Hausdorff {:.3e} ({:?})\n", d.m2_hausdorff, d.m2_verdict);
            for m in &d.m3 {
                table.push_str(&format!(
                    "M3 model {}: exponent {} constant {} from {} probes ({:?})\n",
                    m.model,
                    fmt_opt(m.exponent),
                    fmt_opt(m.constant),
                    m.probes_used,
                    m.verdict
                ));
            }
            Ok(Output { report: json!({ "summary": s, "diagnostics": d }), table })
        }
        Command::Simulate { plan, csv } => {
            let plan = io::load_plan(plan)?;
            let report = run_monte_carlo(&plan, &opts)?;
            let csv_path = csv.clone().or_else(|| cli.out.as_ref().map(|p| p.with_extension("csv")));
            if let Some(path) = csv_path {
                fs::write(path, report.to_csv())?;
            }
            let mut table = format!("{:>10} {:>8} {:>6} {:>10}\n", "system", "n", "order", "frequency");
            for c in &report.cells {
                for o in &c.orders {
                    table.push_str(&format!("{:>10} {:>8} {:>6} {:>10.4}\n", c.system, c.n, o.order, o.frequency));
                }
            }
            Ok(Output { report: to_value(&report), table })
        }
        Command::Pathology { sigma_minus, n_grid, replications } => {
            let r = pathology_two_point(*sigma_minus, n_grid, *replications, cli.seed, &[PenaltySystem::Bic])?;
            let mut table = format!("sigma_minus = {}, sigma_plus = {:.6}\n", r.sigma_minus, r.sigma_plus);
            for row in &r.rows {
                let f = &row.selections[0].frequencies;
                table.push_str(&format!(
                    "n = {:>7}: picks {{σ₋}} {:.3}, {{σ₊}} {:.3}; sd(contrast/√n) = {:.4}\n",
                    row.n, f[0], f[1], row.contrast_over_sqrt_n_sd
                ));
            }
            Ok(Output { report: to_value(&r), table })
        }
        Command::ClassifyPenalty { family, penalty, target, k_star, n_grid } => {
            let (family, fam_penalty) = io::load_family(family)?;
            let system = resolve_penalty(penalty.as_deref(), fam_penalty)?;
            let sets = optimal_sets(&family, target.as_deref(), k_star.as_deref(), &opts)?;
            let c = classify_penalty(&system, &family, &sets, n_grid)?;
            let table = format!(
                "{}: P1 {:?}, P2 {:?}, P3 {:?}, admissible {}\n{}",
                c.system,
                c.p1,
                c.p2,
                c.p3,
                c.admissible,
                c.notes.iter().map(|n| format!("  {n}\n")).collect::<String>()
            );
            Ok(Output { report: to_value(&c), table })
        }
    }
}

fn optimal_sets(
    family: &CandidateFamily,
    target: Option<&Path>,
    k_star: Option<&[usize]>,
    opts: &FitOptions,
) -> Result<OptimalSets, CovselError> {
    match (target, k_star) {
        (Some(t), _) => Ok(pseudo_true_summary(family, &io::load_target(t)?, None, opts)?.sets()),
        (None, Some(k)) => OptimalSets::hypothesized(family.orders(), k.to_vec()),
        (None, None) => Err(CovselError::InvalidArgument("--target or --k-star is required".into())),
    }
}

fn write_report(path: &Path, report: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
    text.push('\n');
    fs::write(path, text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(t) => with_workers(t, || run(&cli)).and_then(|r| r),
        None => run(&cli),
    };
    match result {
        Ok(out) => {
            if let Some(path) = &cli.out {
                if let Err(e) = write_report(path, &out.report) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(1);
                }
            }
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.report).expect("reports serialize"));
            } else {
                print!("{}", out.table);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_validation() { 1 } else { 2 };
            if code == 2 {
                if let Some(path) = &cli.out {
                    let partial = json!({ "status": "numerical_failure", "error": e.to_string() });
                    write_report(path, &partial).ok();
                }
            }
            ExitCode::from(code)
        }
    }
}
