use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use ivlate::cells::{build_cells, build_partition, cell_stats_table, CellTable};
use ivlate::data::{load_dataset, validate, ColumnMap, Dataset};
use ivlate::dgp::{brute_force_late, brute_force_weights, generate, DgpSpec};
use ivlate::error::{Error, Result};
use ivlate::estimators::{
    decompose_weights, estimate_beta_ai, estimate_beta_iv, estimate_beta_iv_linear,
    estimate_beta_late_saturated, EstimateReport, WeightFamily,
};
use ivlate::many_iv::{jive, many_tsls, ujive, ManyIVFit};
use nalgebra::DMatrix;
use ivlate::propensity::{fit_binary_index, ipw_late, ipw_late_bootstrap, Link, DEFAULT_TRIM};
use ivlate::regression::SeType;
use ivlate::report::{fmt3, fmt3_opt, fmt_sig3, fmt_sig3_opt};
use ivlate::reset::{reset_binary_index, reset_linear, TestReport, DEFAULT_POWERS};
use ivlate::validity::{
    bp_test, first_stage_nonneg_test, mw_test, OutcomeSetPartition, ValidityReport,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug, Serialize)]
#[command(name = "ivlate", version, about = "LATE, linear IV and jackknife IV estimation with specification and validity tests")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Cmd {
    /// beta_IV, beta_AI and beta_LATE (saturated and IPW) with standard errors
    Estimate(EstimateArgs),
    /// Per-cell weights of the three estimands
    Weights(DataArgs),
    /// RESET tests of the instrument propensity model
    Reset(ResetArgs),
    /// Instrument validity tests (BP, MW, FS)
    Validity(ValidityArgs),
    /// 2SLS, JIVE and UJIVE in the interacted specification
    Manyiv(DataArgs),
    /// Draw a synthetic dataset from a DGP spec and report oracle truths
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SeArg {
    Hc1,
    Cluster,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum LinkArg {
    Logit,
    Probit,
    Linear,
}

impl LinkArg {
    fn link(self) -> Link {
        match self {
            LinkArg::Logit => Link::Logit,
            LinkArg::Probit => Link::Probit,
            LinkArg::Linear => Link::Linear,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// CSV file with a header row
    #[arg(long)]
    input: PathBuf,
    /// JSON column map {outcome, treatment, instrument, covariates, cluster}
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    instrument: Option<String>,
    /// Comma-separated covariate columns
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long)]
    cluster: Option<String>,
    /// Standard errors; defaults to cluster when a cluster column is mapped
    #[arg(long, value_enum)]
    se: Option<SeArg>,
    #[arg(long, default_value_t = 1)]
    min_cell: usize,
    #[arg(long, default_value_t = 3)]
    min_arm: usize,
    /// Emit JSON instead of text tables
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Covariates enter linearly instead of as cells
    #[arg(long)]
    linear: bool,
    /// Propensity link for the IPW estimate
    #[arg(long, value_enum, default_value = "logit")]
    link: LinkArg,
    /// Propensity trimming bounds lo,hi
    #[arg(long, value_delimiter = ',', num_args = 1)]
    trim: Option<Vec<f64>>,
    /// Bootstrap replications for the IPW standard error (0 = delta method)
    #[arg(long, default_value_t = 0)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ResetArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Propensity model to test; all three when omitted
    #[arg(long, value_enum)]
    link: Option<LinkArg>,
    #[arg(long, value_delimiter = ',')]
    powers: Option<Vec<u32>>,
}

#[derive(Args, Debug, Serialize)]
struct ValidityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Outcome partition: deciles, support, auto or a comma list of cut points
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    cuts: String,
    #[arg(long, default_value_t = 999)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// DGP spec as JSON
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    /// Overrides the seed in the DGP file; 0 when neither is given
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic CSV (y, d, z, cell)
    #[arg(long)]
    output: PathBuf,
    /// Also write the latent table (types and potential outcomes)
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

struct Report {
    results: Value,
    warnings: Vec<String>,
    text: String,
}

fn column_map(a: &DataArgs) -> Result<ColumnMap> {
    let mut map = match &a.config {
        Some(p) => ColumnMap::from_json_file(p)?,
        None => ColumnMap::new("y", "d", "z", &[]),
    };
    if let Some(v) = &a.outcome {
        map.outcome = v.clone();
    }
    if let Some(v) = &a.treatment {
        map.treatment = v.clone();
    }
    if let Some(v) = &a.instrument {
        map.instrument = v.clone();
    }
    if let Some(v) = &a.covariates {
        map.covariates = v.iter().filter(|c| !c.is_empty()).cloned().collect();
    }
    if a.cluster.is_some() {
        map.cluster = a.cluster.clone();
    }
    Ok(map)
}

fn load(a: &DataArgs, warnings: &mut Vec<String>) -> Result<Dataset> {
    let ds = load_dataset(&a.input, &column_map(a)?)?;
    let v = validate(&ds);
    warnings.extend(v.warnings);
    if !v.passed {
        return Err(Error::Identification(v.messages.join("; ")));
    }
    Ok(ds)
}

fn se_type(a: &DataArgs, ds: &Dataset) -> SeType {
    match a.se {
        Some(SeArg::Hc1) => SeType::Hc1,
        Some(SeArg::Cluster) => SeType::Cluster,
        None => SeType::default_for(ds.cluster()),
    }
}

fn cells(a: &DataArgs, ds: &Dataset, warnings: &mut Vec<String>) -> Result<CellTable> {
    let ct = build_cells(ds, a.min_cell, a.min_arm)?;
    warnings.extend(ct.warnings.iter().cloned());
    Ok(ct)
}

fn trim(v: &Option<Vec<f64>>) -> Result<(f64, f64)> {
    match v.as_deref() {
        None => Ok(DEFAULT_TRIM),
        Some([lo, hi]) => Ok((*lo, *hi)),
        Some(_) => Err(Error::Config("--trim takes two values: lo,hi".into())),
    }
}

fn covariate_matrix(ds: &Dataset) -> DMatrix<f64> {
    let cov = ds.covariates();
    DMatrix::from_fn(ds.n(), cov.len(), |i, j| cov[j].values[i])
}

fn estimate_line(r: &EstimateReport) -> String {
    format!(
        "{:<18} {:>10} {:>10}  {:<34} n={}\n",
        r.estimand.label(),
        fmt3(r.estimate),
        format!("({})", fmt3(r.se)),
        r.se_type,
        r.n_used
    )
}

fn run_estimate(a: &EstimateArgs) -> Result<Report> {
    let mut warnings = Vec::new();
    let ds = load(&a.data, &mut warnings)?;
    let se = se_type(&a.data, &ds);
    let trim = trim(&a.trim)?;
    if a.link == LinkArg::Linear {
        return Err(Error::Config("IPW needs --link logit or probit".into()));
    }
    let ipw = |ds: &Dataset, x: &DMatrix<f64>| -> Result<EstimateReport> {
        if a.reps > 0 {
            ipw_late_bootstrap(ds, x, a.link.link(), trim, a.reps, a.seed)
        } else {
            let pf = fit_binary_index(ds.z(), x, a.link.link())?;
            ipw_late(ds, &pf, trim)
        }
    };
    let mut estimates = Vec::new();
    if a.linear {
        estimates.push(estimate_beta_iv_linear(&ds, se)?);
        estimates.push(ipw(&ds, &covariate_matrix(&ds))?);
    } else {
        let ct = cells(&a.data, &ds, &mut warnings)?;
        estimates.push(estimate_beta_iv(&ds, &ct, se)?);
        estimates.push(estimate_beta_ai(&ds, &ct, se)?);
        estimates.push(estimate_beta_late_saturated(&ds, &ct, se)?);
        let rd = ct.retained_design(&ds);
        estimates.push(ipw(&ds.subset(&rd.rows), &rd.dummies)?);
    }
    let mut text = format!(
        "{:<18} {:>10} {:>10}  {:<34}\n",
        "estimand", "estimate", "(se)", "se type"
    );
    for e in &estimates {
        text.push_str(&estimate_line(e));
    }
    Ok(Report {
        results: json!({ "estimates": estimates }),
        warnings,
        text,
    })
}

fn run_weights(a: &DataArgs) -> Result<Report> {
    let mut warnings = Vec::new();
    let ds = load(a, &mut warnings)?;
    let ct = cells(a, &ds, &mut warnings)?;
    let wt = decompose_weights(&ct);
    let table = cell_stats_table(&ct, Some(&wt));
    let implied = [WeightFamily::Late, WeightFamily::Iv, WeightFamily::Ai].map(|f| wt.implied(f));
    for (f, v) in ["LATE", "IV", "AI"].iter().zip(&implied) {
        if v.is_none() {
            warnings.push(format!("{f} weights undefined: normalizer is zero"));
        }
    }
    let mut text = table.render_text();
    text.push_str(&format!(
        "implied: beta_LATE {}  beta_IV {}  beta_AI {}\n",
        fmt3_opt(implied[0]),
        fmt3_opt(implied[1]),
        fmt3_opt(implied[2])
    ));
    Ok(Report {
        results: json!({
            "cells": table,
            "weights": wt,
            "implied": {
                "beta_late": implied[0],
                "beta_iv": implied[1],
                "beta_ai": implied[2],
            },
        }),
        warnings,
        text,
    })
}

fn reset_line(r: &TestReport) -> String {
    let df = r.df.iter().map(|d| format!("{d}")).collect::<Vec<_>>().join(", ");
    let mut line = format!(
        "{:<16} {:>10} {:>12} {:>10}",
        r.test,
        fmt3(r.statistic),
        format!("({df})"),
        fmt_sig3_opt(r.p_value)
    );
    if r.trivial {
        line.push_str("  trivial");
    }
    if let Some(e) = &r.error {
        line.push_str(&format!("  {e}"));
    }
    line.push('\n');
    line
}

fn run_reset(a: &ResetArgs) -> Result<Report> {
    let mut warnings = Vec::new();
    let ds = load(&a.data, &mut warnings)?;
    let powers = a.powers.clone().unwrap_or(DEFAULT_POWERS.to_vec());
    let x = covariate_matrix(&ds);
    let links = match a.link {
        Some(l) => vec![l],
        None => vec![LinkArg::Linear, LinkArg::Logit, LinkArg::Probit],
    };
    let mut reports = Vec::new();
    for l in links {
        let r = match l {
            LinkArg::Linear => reset_linear(ds.z(), &x, &powers)?,
            _ => {
                let pf = fit_binary_index(ds.z(), &x, l.link())?;
                reset_binary_index(&pf, ds.z(), &x, &powers)?
            }
        };
        if let Some(e) = &r.error {
            warnings.push(format!("{}: {e}", r.test));
        }
        reports.push(r);
    }
    let mut text = format!("{:<16} {:>10} {:>12} {:>10}\n", "test", "statistic", "(df)", "p-value");
    for r in &reports {
        text.push_str(&reset_line(r));
    }
    Ok(Report {
        results: json!({ "tests": reports }),
        warnings,
        text,
    })
}

fn partition(spec: &str, y: &[f64]) -> Result<OutcomeSetPartition> {
    match spec {
        "deciles" => OutcomeSetPartition::deciles(y),
        "support" => OutcomeSetPartition::support(y),
        "auto" => OutcomeSetPartition::auto(y),
        list => {
            let cuts = list
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad cut point '{t}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            OutcomeSetPartition::new(cuts)
        }
    }
}

fn run_validity(a: &ValidityArgs) -> Result<Report> {
    let mut warnings = Vec::new();
    let ds = load(&a.data, &mut warnings)?;
    if a.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let part = partition(&a.cuts, ds.y())?;
    let ct = build_partition(&ds, a.data.min_cell, a.data.min_arm)?;
    warnings.extend(ct.warnings.iter().cloned());
    let runs: [(&str, Result<ValidityReport>); 3] = [
        ("BP", bp_test(&ds, Some(&ct), &part, a.reps, a.seed)),
        ("MW", mw_test(&ds, &ct, &part, a.reps, a.seed)),
        ("FS", first_stage_nonneg_test(&ct, a.reps, a.seed)),
    ];
    let mut tests = Vec::new();
    let mut first_err = None;
    let mut text = format!(
        "{:<5} {:>10} {:>10} {:>8}  worst moment\n",
        "test", "statistic", "p-value", "moments"
    );
    for (name, r) in runs {
        match r {
            Ok(r) => {
                text.push_str(&format!(
                    "{:<5} {:>10} {:>10} {:>8}  {}\n",
                    name,
                    fmt3(r.statistic),
                    fmt_sig3(r.p_value),
                    r.moments,
                    r.worst_set
                ));
                tests.push(serde_json::to_value(&r)?);
            }
            Err(e) => {
                text.push_str(&format!("{name:<5} not computed: {e}\n"));
                warnings.push(format!("{name}: {e}"));
                tests.push(json!({ "test": name, "error": e.to_string() }));
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err.filter(|_| tests.iter().all(|t| t.get("error").is_some())) {
        return Err(e);
    }
    text.push_str(&format!(
        "partition: {} sets; {} bootstrap draws, seed {}\n",
        part.bins(),
        a.reps,
        a.seed
    ));
    Ok(Report {
        results: json!({ "partition": part.cut_points(), "tests": tests }),
        warnings,
        text,
    })
}

fn run_manyiv(a: &DataArgs) -> Result<Report> {
    let mut warnings = Vec::new();
    let ds = load(a, &mut warnings)?;
    let se = se_type(a, &ds);
    let ct = cells(a, &ds, &mut warnings)?;
    let fits: Vec<ManyIVFit> = vec![
        many_tsls(&ds, &ct, se)?,
        jive(&ds, &ct, se)?,
        ujive(&ds, &ct, se)?,
    ];
    let mut text = format!(
        "{:<6} {:>10} {:>10} {:>6} {:>6} {:>10}\n",
        "", "estimate", "(se)", "K", "L", "max h"
    );
    for f in &fits {
        text.push_str(&format!(
            "{:<6} {:>10} {:>10} {:>6} {:>6} {:>10}\n",
            f.estimator.label(),
            fmt3(f.estimate),
            format!("({})", fmt3(f.se)),
            f.k,
            f.l,
            fmt3(f.leverage_max)
        ));
    }
    Ok(Report {
        results: json!({ "fits": fits, "se_type": se.label() }),
        warnings,
        text,
    })
}

fn run_simulate(a: &SimulateArgs) -> Result<Report> {
    let spec = DgpSpec::from_json_file(&a.spec)?;
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let seed = a.seed.or(spec.seed).unwrap_or(0);
    let (ds, latent) = generate(&spec, a.n, seed)?;
    ds.write_csv(&a.output)?;
    if let Some(p) = &a.latent {
        latent.write_csv(p)?;
    }
    let mut warnings = Vec::new();
    let late = brute_force_late(&latent)
        .map_err(|e| warnings.push(format!("oracle LATE undefined: {e}")))
        .ok();
    let weights = brute_force_weights(&latent)
        .map_err(|e| warnings.push(format!("oracle weights undefined: {e}")))
        .ok();
    let implied = |f| weights.as_ref().and_then(|w| w.implied(f));
    let truths = json!({
        "late": late,
        "beta_iv": implied(WeightFamily::Iv),
        "beta_ai": implied(WeightFamily::Ai),
        "weights": weights,
    });
    let text = format!(
        "wrote {} rows to {} (seed {seed})\noracle: LATE {}  beta_IV {}  beta_AI {}\n",
        ds.n(),
        a.output.display(),
        fmt3_opt(late),
        fmt3_opt(implied(WeightFamily::Iv)),
        fmt3_opt(implied(WeightFamily::Ai)),
    );
    Ok(Report {
        results: json!({ "n": ds.n(), "seed": seed, "output": a.output, "truths": truths }),
        warnings,
        text,
    })
}

fn emit(cli: &Cli, report: Report) -> Result<()> {
    let (as_json, output) = match &cli.command {
        Cmd::Estimate(a) => (a.data.json, a.data.output.as_ref()),
        Cmd::Weights(a) | Cmd::Manyiv(a) => (a.json, a.output.as_ref()),
        Cmd::Reset(a) => (a.data.json, a.data.output.as_ref()),
        Cmd::Validity(a) => (a.data.json, a.data.output.as_ref()),
        Cmd::Simulate(a) => (a.json, None),
    };
    let body = if as_json {
        let name = serde_json::to_value(&cli.command)?
            .as_object()
            .and_then(|o| o.keys().next().cloned())
            .unwrap_or_default();
        let doc = json!({
            "command": name,
            "config_echo": cli.command,
            "results": report.results,
            "warnings": report.warnings,
            "version": VERSION,
        });
        serde_json::to_string_pretty(&doc)? + "\n"
    } else {
        let mut t = report.text;
        for w in &report.warnings {
            t.push_str(&format!("warning: {w}\n"));
        }
        t
    };
    match output {
        Some(p) => std::fs::write(p, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let report = match &cli.command {
        Cmd::Estimate(a) => run_estimate(a)?,
        Cmd::Weights(a) => run_weights(a)?,
        Cmd::Reset(a) => run_reset(a)?,
        Cmd::Validity(a) => run_validity(a)?,
        Cmd::Manyiv(a) => run_manyiv(a)?,
        Cmd::Simulate(a) => run_simulate(a)?,
    };
    emit(cli, report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ivlate: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ivlate: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
