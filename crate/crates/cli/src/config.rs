//! Experiment configuration: a TOML key/value file overridden by flags, resolved
//! against documented defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

/// Every key a config file or flag may set, with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("kernel", "mbrw"),
    ("d", "1"),
    ("eps", "2^-4"),
    ("n", "log2(1/eps)"),
    ("p", "1"),
    ("truncation", "400"),
    ("seed", "0"),
    ("M", "1"),
    ("resolution", "4"),
    ("lambda_step", "0.25"),
    ("lambda_max", "4"),
    ("side", "right"),
    ("eps_list", "[eps]"),
    ("pair_budget", "100000"),
    ("p_step", "1"),
    ("c_y", "class constant of the field"),
    ("require_valid", "true"),
    ("threads", "LOGFIELD_THREADS or all cores"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Cov,
    Sample,
    Extremes,
    Certify,
    GreenCheck,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Cov => "cov",
            Command::Sample => "sample",
            Command::Extremes => "extremes",
            Command::Certify => "certify",
            Command::GreenCheck => "green-check",
        }
    }
}

/// The fully resolved configuration, echoed into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub command: Command,
    pub kernel: String,
    pub d: usize,
    pub eps: f64,
    pub n: u32,
    pub p: f64,
    pub truncation: usize,
    pub seed: u64,
    #[serde(rename = "M")]
    pub replicas: usize,
    pub resolution: usize,
    pub lambda_step: f64,
    pub lambda_max: f64,
    pub side: String,
    pub eps_list: Vec<f64>,
    pub pair_budget: usize,
    pub p_step: f64,
    pub c_y: Option<f64>,
    pub require_valid: bool,
    pub threads: usize,
}

/// Raw values by key, from the file and then from flags.
pub type RawConfig = BTreeMap<String, toml::Value>;

/// Reads a TOML key/value file. Unknown keys are reported with every other error.
pub fn read_file(path: &Path) -> Result<RawConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let table: toml::Table = text.parse().map_err(|e| vec![format!("{}: {e}", path.display())])?;
    Ok(table.into_iter().collect())
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// `2^-k`, `2^k`, or a decimal.
pub fn parse_dyadic(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Some(exp) = s.strip_prefix("2^") {
        let k: i32 = exp.trim_matches(|c| c == '(' || c == ')').parse().map_err(|_| format!("bad exponent in {s:?}"))?;
        return Ok((k as f64).exp2());
    }
    s.parse::<f64>().map_err(|_| format!("{s:?} is not a number or 2^k literal"))
}

struct Reader<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn get<T>(&mut self, key: &str, parse: impl Fn(&toml::Value) -> Result<T, String>) -> Option<T> {
        let v = self.raw.get(key)?;
        match parse(v) {
            Ok(x) => Some(x),
            Err(e) => {
                self.errors.push(format!("{key}: {e}"));
                None
            }
        }
    }

    fn real(&mut self, key: &str) -> Option<f64> {
        self.get(key, |v| match v {
            toml::Value::Float(x) => Ok(*x),
            toml::Value::Integer(i) => Ok(*i as f64),
            toml::Value::String(s) => parse_dyadic(s),
            other => Err(format!("expected a number, got {other}")),
        })
    }

    fn uint(&mut self, key: &str) -> Option<u64> {
        self.get(key, |v| match v {
            toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            toml::Value::String(s) => s.trim().parse::<u64>().map_err(|_| format!("{s:?} is not a nonnegative integer")),
            other => Err(format!("expected a nonnegative integer, got {other}")),
        })
    }

    fn text(&mut self, key: &str) -> Option<String> {
        self.get(key, |v| match v {
            toml::Value::String(s) => Ok(s.trim().to_string()),
            other => Err(format!("expected a string, got {other}")),
        })
    }

    fn flag(&mut self, key: &str) -> Option<bool> {
        self.get(key, |v| match v {
            toml::Value::Boolean(b) => Ok(*b),
            toml::Value::String(s) => s.trim().parse::<bool>().map_err(|_| format!("{s:?} is not true or false")),
            other => Err(format!("expected true or false, got {other}")),
        })
    }

    fn reals(&mut self, key: &str) -> Option<Vec<f64>> {
        self.get(key, |v| {
            let one = |v: &toml::Value| match v {
                toml::Value::Float(x) => Ok(*x),
                toml::Value::Integer(i) => Ok(*i as f64),
                toml::Value::String(s) => parse_dyadic(s),
                other => Err(format!("expected a number, got {other}")),
            };
            match v {
                toml::Value::Array(items) => items.iter().map(one).collect(),
                toml::Value::String(s) => s.split(',').map(parse_dyadic).collect(),
                other => Err(format!("expected a list of numbers, got {other}")),
            }
        })
    }
}

/// Resolves `raw` for `command`, listing every offending key on failure.
pub fn resolve(command: Command, raw: &RawConfig, default_threads: usize) -> Result<ExperimentConfig, Vec<String>> {
    let mut r = Reader { raw, errors: Vec::new() };
    for key in raw.keys() {
        if !known(key) {
            r.errors.push(format!("{key}: unknown key"));
        }
    }
    let kernel = r.text("kernel").unwrap_or_else(|| "mbrw".into());
    let kernels: &[&str] = match command {
        Command::Certify => &["mbrw", "mgff"],
        Command::Extremes => &["mbrw", "brw", "mgff"],
        Command::GreenCheck => &["mgff"],
        _ => &["mbrw", "brw", "sheet", "mgff", "whole-plane"],
    };
    let kernel = if command == Command::GreenCheck && !raw.contains_key("kernel") { "mgff".to_string() } else { kernel };
    if !kernels.contains(&kernel.as_str()) {
        r.errors.push(format!("kernel: {kernel:?} is not one of {kernels:?} for {}", command.as_str()));
    }
    let d = r.uint("d").unwrap_or(if kernel == "mgff" || kernel == "whole-plane" { 2 } else { 1 }) as usize;
    let eps = r.real("eps").unwrap_or(0.0625);
    if !(eps > 0.0 && eps < 1.0) {
        r.errors.push(format!("eps: {eps} outside (0,1)"));
    }
    let n = match r.uint("n") {
        Some(n) => n as u32,
        None => (1.0 / eps).log2().round().max(0.0) as u32,
    };
    let p = r.real("p").unwrap_or(1.0);
    let truncation = r.uint("truncation").unwrap_or(400) as usize;
    let seed = r.uint("seed").unwrap_or(0);
    let replicas = r.uint("M").unwrap_or(1) as usize;
    let resolution = r.uint("resolution").unwrap_or(4) as usize;
    let lambda_step = r.real("lambda_step").unwrap_or(0.25);
    let lambda_max = r.real("lambda_max").unwrap_or(4.0);
    if !(lambda_step > 0.0 && lambda_max >= lambda_step) {
        r.errors.push(format!("lambda_step/lambda_max: need 0 < {lambda_step} <= {lambda_max}"));
    }
    let side = r.text("side").unwrap_or_else(|| "right".into());
    if side != "right" && side != "left" {
        r.errors.push(format!("side: {side:?} is not right or left"));
    }
    let eps_list = r.reals("eps_list").unwrap_or_else(|| vec![eps]);
    let pair_budget = r.uint("pair_budget").unwrap_or(100_000) as usize;
    let p_step = r.real("p_step").unwrap_or(1.0);
    if !(p_step > 0.0) {
        r.errors.push(format!("p_step: {p_step} must be positive"));
    }
    let c_y = r.real("c_y");
    let require_valid = r.flag("require_valid").unwrap_or(true);
    let threads = r.uint("threads").map(|t| t as usize).unwrap_or(default_threads);
    if threads == 0 {
        r.errors.push("threads: must be at least 1".into());
    }
    if !r.errors.is_empty() {
        return Err(r.errors);
    }
    Ok(ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        command,
        kernel,
        d,
        eps,
        n,
        p,
        truncation,
        seed,
        replicas,
        resolution,
        lambda_step,
        lambda_max,
        side,
        eps_list,
        pair_budget,
        p_step,
        c_y,
        require_valid,
        threads,
    })
}
