//! Flat key-value config files and CSV data loading.
//!
//! Config format: one `key = value` pair per line, `#` comments. Recognized
//! keys:
//!
//! ```text
//! p, n, n_grid, ratio, replicates, seed, lambda, lambda_grid,
//! theta_out0, theta_out, theta_prop0, theta_prop, mu_x, sigma,
//! link.kind (offset-logistic | logistic), link.floor,
//! sigma_matrix (identity | path to a p x p CSV),
//! methods, misspecify_outcome, masking_audit, workers
//! ```
//!
//! Coefficient vectors accept `zero`, `e1`, `e1*<scale>`, or a comma list.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::harness::{CoefPattern, ExperimentConfig, MethodId};
use crate::link::LinkFunction;

/// Parsed, un-merged config file contents.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub p: Option<usize>,
    pub n: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub ratio: Option<f64>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub theta_out0: Option<f64>,
    pub theta_out: Option<CoefPattern>,
    pub theta_prop0: Option<f64>,
    pub theta_prop: Option<CoefPattern>,
    pub mu_x: Option<CoefPattern>,
    pub sigma: Option<f64>,
    pub link_kind: Option<String>,
    pub link_floor: Option<f64>,
    pub sigma_matrix: Option<String>,
    pub methods: Option<Vec<MethodId>>,
    pub misspecify_outcome: Option<bool>,
    pub masking_audit: Option<bool>,
    pub workers: Option<usize>,
}

fn parse_coef_pattern(raw: &str) -> Result<CoefPattern> {
    let v = raw.trim();
    if v.eq_ignore_ascii_case("zero") {
        return Ok(CoefPattern::Zero);
    }
    if v.eq_ignore_ascii_case("e1") {
        return Ok(CoefPattern::E1(1.0));
    }
    if let Some(rest) = v.strip_prefix("e1*") {
        let scale: f64 = rest
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad e1 scale `{rest}`")))?;
        return Ok(CoefPattern::E1(scale));
    }
    let values: Result<Vec<f64>> = v
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad coefficient `{tok}`")))
        })
        .collect();
    Ok(CoefPattern::Dense(values?))
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry `{tok}`")))
        })
        .collect()
}

fn parse_bool(raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!("bad boolean `{other}`"))),
    }
}

/// Parses config text; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut cfg = ConfigFile::default();
    for (key, value) in pairs {
        match key.as_str() {
            "p" => cfg.p = Some(value.parse().map_err(bad("p"))?),
            "n" => cfg.n = Some(value.parse().map_err(bad("n"))?),
            "n_grid" => cfg.n_grid = Some(parse_list(&value, "n_grid")?),
            "ratio" => cfg.ratio = Some(value.parse().map_err(bad("ratio"))?),
            "replicates" => cfg.replicates = Some(value.parse().map_err(bad("replicates"))?),
            "seed" => cfg.seed = Some(value.parse().map_err(bad("seed"))?),
            "lambda" => cfg.lambda = Some(value.parse().map_err(bad("lambda"))?),
            "lambda_grid" => cfg.lambda_grid = Some(parse_list(&value, "lambda_grid")?),
            "theta_out0" => cfg.theta_out0 = Some(value.parse().map_err(bad("theta_out0"))?),
            "theta_out" => cfg.theta_out = Some(parse_coef_pattern(&value)?),
            "theta_prop0" => cfg.theta_prop0 = Some(value.parse().map_err(bad("theta_prop0"))?),
            "theta_prop" => cfg.theta_prop = Some(parse_coef_pattern(&value)?),
            "mu_x" => cfg.mu_x = Some(parse_coef_pattern(&value)?),
            "sigma" => cfg.sigma = Some(value.parse().map_err(bad("sigma"))?),
            "link.kind" => cfg.link_kind = Some(value),
            "link.floor" => cfg.link_floor = Some(value.parse().map_err(bad("link.floor"))?),
            "sigma_matrix" => cfg.sigma_matrix = Some(value),
            "methods" => {
                let methods: Result<Vec<MethodId>> = value
                    .split(',')
                    .map(|m| MethodId::parse(m.trim()))
                    .collect();
                cfg.methods = Some(methods?);
            }
            "misspecify_outcome" => cfg.misspecify_outcome = Some(parse_bool(&value)?),
            "masking_audit" => cfg.masking_audit = Some(parse_bool(&value)?),
            "workers" => cfg.workers = Some(value.parse().map_err(bad("workers"))?),
            other => {
                return Err(Error::InvalidConfig(format!("unknown key `{other}`")));
            }
        }
    }
    Ok(cfg)
}

fn bad<E>(key: &'static str) -> impl Fn(E) -> Error {
    move |_| Error::InvalidConfig(format!("bad value for `{key}`"))
}

impl ConfigFile {
    /// Builds the link function described by the config (default:
    /// offset-logistic with floor 0.1).
    pub fn link(&self) -> Result<LinkFunction> {
        match self.link_kind.as_deref() {
            None | Some("offset-logistic") => {
                LinkFunction::offset_logistic(self.link_floor.unwrap_or(0.1))
            }
            Some("logistic") => {
                if self.link_floor.is_some() {
                    return Err(Error::InvalidConfig(
                        "link.floor applies only to offset-logistic".into(),
                    ));
                }
                Ok(LinkFunction::Logistic)
            }
            Some(other) => Err(Error::InvalidConfig(format!("unknown link `{other}`"))),
        }
    }

    /// Overlays the config onto an experiment (preset or default).
    pub fn apply_to(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(n) = self.n {
            cfg.n_grid = vec![n];
        }
        if let Some(grid) = &self.n_grid {
            cfg.n_grid = grid.clone();
        }
        if let Some(ratio) = self.ratio {
            cfg.ratio = ratio;
        }
        if let (Some(p), Some(n)) = (self.p, cfg.n_grid.first().copied()) {
            if self.ratio.is_none() {
                cfg.ratio = p as f64 / n as f64;
            }
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(grid) = &self.lambda_grid {
            cfg.lambda_grid = grid.clone();
        }
        if let Some(v) = self.theta_out0 {
            cfg.template.theta_out0 = v;
        }
        if let Some(p) = &self.theta_out {
            cfg.template.theta_out = p.clone();
        }
        if let Some(v) = self.theta_prop0 {
            cfg.template.theta_prop0 = v;
        }
        if let Some(p) = &self.theta_prop {
            cfg.template.theta_prop = p.clone();
        }
        if let Some(p) = &self.mu_x {
            cfg.template.mu_x = p.clone();
        }
        if let Some(s) = self.sigma {
            cfg.template.noise_sd = s;
        }
        if self.link_kind.is_some() || self.link_floor.is_some() {
            cfg.template.link = self.link()?;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(v) = self.misspecify_outcome {
            cfg.misspecify_outcome = v;
        }
        if let Some(v) = self.masking_audit {
            cfg.masking_audit = v;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        Ok(cfg)
    }
}

/// Reads a numeric CSV (no header) into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidConfig(format!(
                        "{}:{}: bad number `{tok}`",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        let row = row?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::InvalidConfig(format!(
                    "{}: ragged rows ({} vs {})",
                    path.display(),
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{}: empty matrix",
            path.display()
        )));
    }
    let (n, p) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Reads a single-column (or single-row) numeric CSV into a vector.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() == 1 {
        Ok(DVector::from_fn(m.nrows(), |i, _| m[(i, 0)]))
    } else if m.nrows() == 1 {
        Ok(DVector::from_fn(m.ncols(), |j, _| m[(0, j)]))
    } else {
        Err(Error::InvalidConfig(format!(
            "{}: expected a vector, got {}x{}",
            path.display(),
            m.nrows(),
            m.ncols()
        )))
    }
}
