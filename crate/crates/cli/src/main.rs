//! `logfield`: reproducible experiment runner.
//!
//! Exit status: 0 on success, 2 when a requested check fails, 1 on error.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use logfield::comparison::{
    certify_left, certify_right, default_cy_scales, measure_mgff_c_y, reevaluate, CertifyOptions, FieldClassParams,
    Provenance, YField,
};
use logfield::extremes::{lower_bound_from_maxima, tail_from_maxima, FieldDesign, ScaleGap};
use logfield::golden::{mgff_moment_pairs, validate_golden, GoldenFile};
use logfield::green::{
    bulk_grid, bulk_points, harmonic_correction_bound, moment_bound_check_with, scaling_identity_residual, GreenSeries,
    PairEvaluator,
};
use logfield::kernels::{kernel_matrix, KernelSpec};
use logfield::lattice::{Lattice, PointSet};
use logfield::samplers::{CholeskySampler, Sampler, SheetSampler, TreeSampler};
use logfield::SeedSpec;
use rand::Rng;
use serde::Serialize;

use config::{Command, ExperimentConfig, RawConfig};
use output::{csv_row, OutputDir};

#[derive(Parser)]
#[command(name = "logfield", version, about = "Log-correlated Gaussian field experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Covariance matrix of a kernel on its grid, as CSV.
    Cov(RunArgs),
    /// Exact samples of a field, as CSV.
    Sample(RunArgs),
    /// Tail probabilities, decay rates and the mean of the recentered maximum.
    Extremes(RunArgs),
    /// Comparison certificate for the right or left tail.
    Certify(RunArgs),
    /// Green-function identities and the mollified moment bounds.
    GreenCheck(RunArgs),
    /// Reruns the golden experiments at reduced budget.
    ValidateGolden(GoldenArgs),
}

/// Flags override keys of the config file; both use the same value syntax.
#[derive(Args)]
struct RunArgs {
    /// TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// mbrw | brw | sheet | mgff | whole-plane.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    d: Option<String>,
    /// Scale, as a decimal or `2^-k`.
    #[arg(long)]
    eps: Option<String>,
    /// BRW depth.
    #[arg(long)]
    n: Option<String>,
    /// Brownian sheet block parameter.
    #[arg(long)]
    p: Option<String>,
    /// Green series truncation.
    #[arg(long)]
    truncation: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Replicas.
    #[arg(long = "M")]
    m: Option<String>,
    /// Sheet grid points per box side.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long = "lambda-step")]
    lambda_step: Option<String>,
    #[arg(long = "lambda-max")]
    lambda_max: Option<String>,
    /// right | left.
    #[arg(long)]
    side: Option<String>,
    /// Comma-separated scales.
    #[arg(long = "eps-list")]
    eps_list: Option<String>,
    #[arg(long = "pair-budget")]
    pair_budget: Option<String>,
    #[arg(long = "p-step")]
    p_step: Option<String>,
    /// Class constant of the field; measured for the MGFF when absent.
    #[arg(long = "c-y")]
    c_y: Option<String>,
    #[arg(long = "require-valid")]
    require_valid: Option<String>,
    /// Worker threads; falls back to LOGFIELD_THREADS.
    #[arg(long)]
    threads: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("kernel", &self.kernel),
            ("d", &self.d),
            ("eps", &self.eps),
            ("n", &self.n),
            ("p", &self.p),
            ("truncation", &self.truncation),
            ("seed", &self.seed),
            ("M", &self.m),
            ("resolution", &self.resolution),
            ("lambda_step", &self.lambda_step),
            ("lambda_max", &self.lambda_max),
            ("side", &self.side),
            ("eps_list", &self.eps_list),
            ("pair_budget", &self.pair_budget),
            ("p_step", &self.p_step),
            ("c_y", &self.c_y),
            ("require_valid", &self.require_valid),
            ("threads", &self.threads),
        ]
    }
}

#[derive(Args)]
struct GoldenArgs {
    /// Golden file; the bundled one when absent.
    path: Option<PathBuf>,
    /// Directory for the validation report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

enum Status {
    Ok,
    CheckFailed,
}

fn default_threads() -> usize {
    std::env::var("LOGFIELD_THREADS")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn init_pool(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| anyhow!(e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Cov(a) => run(Command::Cov, &a),
        Cmd::Sample(a) => run(Command::Sample, &a),
        Cmd::Extremes(a) => run(Command::Extremes, &a),
        Cmd::Certify(a) => run(Command::Certify, &a),
        Cmd::GreenCheck(a) => run(Command::GreenCheck, &a),
        Cmd::ValidateGolden(a) => run_validate(&a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, args: &RunArgs) -> Result<Status> {
    let mut raw = match &args.config {
        Some(path) => config::read_file(path).map_err(|errs| anyhow!("config errors:\n  {}", errs.join("\n  ")))?,
        None => RawConfig::new(),
    };
    for (key, value) in args.overrides() {
        if let Some(v) = value {
            raw.insert(key.to_string(), toml::Value::String(v.clone()));
        }
    }
    let cfg = config::resolve(command, &raw, default_threads())
        .map_err(|errs| anyhow!("config errors:\n  {}", errs.join("\n  ")))?;
    init_pool(cfg.threads)?;
    let mut out = OutputDir::create(&args.out, command.as_str())?;
    out.write_json("config.json", &cfg)?;
    let status = match command {
        Command::Cov => cov(&cfg, &mut out)?,
        Command::Sample => sample(&cfg, &mut out)?,
        Command::Extremes => extremes(&cfg, &mut out)?,
        Command::Certify => certify(&cfg, &mut out)?,
        Command::GreenCheck => green_check(&cfg, &mut out)?,
    };
    out.finish()?;
    Ok(status)
}

// Mollified kernels live on the bulk square at radius eps/2, as in the extremes designs.
fn kernel_and_points(cfg: &ExperimentConfig) -> Result<(KernelSpec, PointSet)> {
    let (d, eps) = (cfg.d, cfg.eps);
    Ok(match cfg.kernel.as_str() {
        "mbrw" => {
            let k = KernelSpec::Mbrw { d, eps };
            (k, k.lattice_points()?)
        }
        "brw" => {
            let k = KernelSpec::Brw { d, n: cfg.n };
            (k, k.lattice_points()?)
        }
        "sheet" => {
            let k = KernelSpec::BrownianSheet { d, eps, p: cfg.p };
            (k, Lattice::from_eps(d, eps / cfg.resolution as f64)?.points())
        }
        "mgff" => (KernelSpec::Mgff { eps: eps / 2.0, truncation: cfg.truncation }, bulk_points(eps)?),
        "whole-plane" => (KernelSpec::WholePlaneLog { eps: eps / 2.0 }, bulk_points(eps)?),
        other => bail!("unknown kernel {other}"),
    })
}

fn points_csv(points: &PointSet) -> String {
    let header: Vec<String> = (1..=points.dim()).map(|i| format!("x{i}")).collect();
    let mut s = header.join(",") + "\n";
    for p in points.iter() {
        s += &csv_row(p.iter().copied());
        s.push('\n');
    }
    s
}

fn cov(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Status> {
    let (kernel, points) = kernel_and_points(cfg)?;
    let m = kernel_matrix(&kernel, &points)?;
    let mut s = String::new();
    for i in 0..m.size() {
        s += &csv_row(m.row(i).iter().copied());
        s.push('\n');
    }
    out.write("points.csv", points_csv(&points).as_bytes())?;
    out.write("matrix.csv", s.as_bytes())?;
    Ok(Status::Ok)
}

fn sample(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Status> {
    let (kernel, points) = kernel_and_points(cfg)?;
    let seed = SeedSpec::new(cfg.seed, 0, format!("cli/sample/{}", kernel.name()));
    let range = 0..cfg.replicas as u64;
    let collect = |_: u64, v: &[f64]| v.to_vec();
    let (points, replicas) = match kernel {
        KernelSpec::Brw { d, n } => {
            let s = TreeSampler::new(n, d)?;
            (s.points().clone(), s.draw_map(&seed, range, collect)?)
        }
        KernelSpec::BrownianSheet { .. } => {
            let s = SheetSampler::new(&kernel, cfg.resolution)?;
            (s.points().clone(), s.draw_map(&seed, range, collect)?)
        }
        _ => (points.clone(), CholeskySampler::new(&kernel, &points)?.draw_map_batched(&seed, range, collect)?),
    };
    let mut header: Vec<String> = (1..=points.dim()).map(|i| format!("x{i}")).collect();
    header.extend((0..replicas.len()).map(|r| format!("r{r}")));
    let mut s = header.join(",") + "\n";
    for (i, p) in points.iter().enumerate() {
        s += &csv_row(p.iter().copied().chain(replicas.iter().map(|r| r[i])));
        s.push('\n');
    }
    out.write("sample.csv", s.as_bytes())?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct ExtremesReport {
    schema_version: u32,
    tails: logfield::extremes::TailEstimate,
    lower_bound: logfield::extremes::LowerBound,
    gap: ScaleGap,
}

fn extremes(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Status> {
    let design = match cfg.kernel.as_str() {
        "mbrw" => FieldDesign::mbrw(cfg.d, cfg.eps)?,
        "brw" => FieldDesign::brw(cfg.d, cfg.n)?,
        "mgff" => FieldDesign::mgff_bulk(cfg.eps, cfg.truncation)?,
        other => bail!("no extremes design for kernel {other}"),
    };
    let maxima = design.maxima(cfg.replicas, cfg.seed)?;
    let steps = (cfg.lambda_max / cfg.lambda_step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (1..=steps).map(|k| k as f64 * cfg.lambda_step).collect();
    let report = ExtremesReport {
        schema_version: config::SCHEMA_VERSION,
        tails: tail_from_maxima(&design, &maxima, &grid, cfg.seed, true)?,
        lower_bound: lower_bound_from_maxima(&design, &maxima),
        gap: ScaleGap::from_maxima(design.eps(), design.recentering.value, &maxima),
    };
    out.write_json("extremes.json", &report)?;
    let mut s = "max\n".to_string();
    for m in &maxima {
        s += &format!("{m}\n");
    }
    out.write("maxima.csv", s.as_bytes())?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct CertificateReport {
    schema_version: u32,
    class_constant: Option<logfield::comparison::CyMeasurement>,
    link_summary: Vec<(logfield::comparison::Link, logfield::comparison::LinkSummary)>,
    reevaluation: logfield::comparison::SoundnessReport,
    /// The certificate without its ledger, which is in `ledger.csv`.
    certificate: logfield::comparison::ComparisonCertificate,
}

fn certify(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Status> {
    let (field, params, measured) = match cfg.kernel.as_str() {
        "mbrw" => {
            let field = YField::SyntheticMbrw { d: cfg.d };
            let params = match cfg.c_y {
                Some(c) => FieldClassParams::new(c, cfg.d, Provenance::Assumed)?,
                None => FieldClassParams::synthetic(cfg.d)?,
            };
            (field, params, None)
        }
        "mgff" => match cfg.c_y {
            Some(c) => (YField::MgffBulk, FieldClassParams::new(c, 2, Provenance::Assumed)?, None),
            None => {
                let m = measure_mgff_c_y(&default_cy_scales())?;
                (YField::MgffBulk, FieldClassParams::new(m.c_y, 2, Provenance::MeasuredFromMgff)?, Some(m))
            }
        },
        other => bail!("no comparison field for kernel {other}"),
    };
    let d = field.dim();
    let mut cert = if cfg.side == "right" {
        let mut opts = CertifyOptions::right(d, cfg.eps_list.clone(), cfg.seed);
        if cfg.p_step != 1.0 {
            opts = opts.with_p_step(cfg.p_step);
        }
        opts.pair_budget = cfg.pair_budget;
        certify_right(&params, &field, &opts)?
    } else {
        let opts = CertifyOptions { pair_budget: cfg.pair_budget, ..CertifyOptions::left(d, cfg.eps_list.clone(), cfg.seed) };
        certify_left(&params, &field, &opts)?
    };
    let reevaluation = reevaluate(&cert)?;
    let mut ledger = "grid,link,i,j,lhs,rhs,margin\n".to_string();
    for e in &cert.ledger {
        let link = serde_json::to_value(e.link)?;
        ledger += &format!("{},{},{},{},{},{},{}\n", e.grid, link.as_str().unwrap_or(""), e.i, e.j, e.lhs, e.rhs, e.margin());
    }
    let link_summary = cert.link_summary().into_iter().collect();
    let ok = cert.valid && !cert.degenerate && reevaluation.passed;
    cert.ledger.clear();
    let report = CertificateReport {
        schema_version: config::SCHEMA_VERSION,
        class_constant: measured,
        link_summary,
        reevaluation,
        certificate: cert,
    };
    out.write_json("certificate.json", &report)?;
    out.write("ledger.csv", ledger.as_bytes())?;
    Ok(if cfg.require_valid && !ok { Status::CheckFailed } else { Status::Ok })
}

#[derive(Serialize)]
struct MomentSummary {
    eps: f64,
    pairs: usize,
    max_deviation: f64,
    max_ratio: Option<f64>,
}

#[derive(Serialize)]
struct GreenCheckReport {
    schema_version: u32,
    scaling_residual_max: f64,
    scaling_tolerance: f64,
    harmonic: logfield::green::HarmonicReport,
    moments: Vec<MomentSummary>,
    passed: bool,
}

fn green_check(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Status> {
    const SCALING_TOL: f64 = 1e-8;
    let mut rng = SeedSpec::new(cfg.seed, 0, "cli/green-check").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut p = || [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
        let (u, v) = (p(), p());
        worst = worst.max(scaling_identity_residual(cfg.truncation, &u, &v)?.value);
    }
    let harmonic = harmonic_correction_bound(&GreenSeries::unit(cfg.truncation)?, 0.25, &bulk_grid(0.25, 9))?;
    let moments = cfg
        .eps_list
        .iter()
        .map(|&eps| {
            let pairs = mgff_moment_pairs(eps);
            let r = moment_bound_check_with(&PairEvaluator::Bulk { eps }, eps, 0.25, &pairs)?;
            Ok(MomentSummary { eps, pairs: pairs.len(), max_deviation: r.max_deviation, max_ratio: r.max_ratio })
        })
        .collect::<logfield::Result<Vec<_>>>()?;
    let passed = worst <= SCALING_TOL && harmonic.holds();
    out.write_json(
        "green_check.json",
        &GreenCheckReport {
            schema_version: config::SCHEMA_VERSION,
            scaling_residual_max: worst,
            scaling_tolerance: SCALING_TOL,
            harmonic,
            moments,
            passed,
        },
    )?;
    Ok(if passed { Status::Ok } else { Status::CheckFailed })
}

fn run_validate(args: &GoldenArgs) -> Result<Status> {
    init_pool(args.threads.unwrap_or_else(default_threads))?;
    let file = match &args.path {
        Some(path) => load_goldens(path)?,
        None => GoldenFile::bundled(),
    };
    let report = validate_golden(&file)?;
    for c in &report.checks {
        println!(
            "{} {}: expected {} measured {} (|diff| {:e}, tolerance {:e})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.expected,
            c.measured,
            c.difference,
            c.tolerance
        );
    }
    if let Some(dir) = &args.out {
        let mut out = OutputDir::create(dir, "validate-golden")?;
        out.write_json("golden_report.json", &report)?;
        out.finish()?;
    }
    Ok(if report.passed { Status::Ok } else { Status::CheckFailed })
}

fn load_goldens(path: &Path) -> Result<GoldenFile> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(GoldenFile::parse(&text)?)
}
