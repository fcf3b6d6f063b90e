//! Run configuration: flat `key = value` lines, `#` comments, unknown keys rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::cnf::NoiseDist;
use crate::error::{Error, Result};
use crate::multires::TransformKind;
use crate::odeint::{IntegrationSpec, Method};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub levels: usize,
    pub transform: TransformKind,
    pub noise_schedule: bool,
    /// Training solver.
    pub solver_method: Method,
    pub solver_steps: usize,
    /// Evaluation (adaptive) tolerances.
    pub solver_rtol: f64,
    pub solver_atol: f64,
    pub net_blocks: usize,
    pub net_hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_k: f64,
    pub lambda_j: f64,
    pub grad_clip: f64,
    pub trace_noise: NoiseDist,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            levels: 2,
            transform: TransformKind::Unimodular,
            noise_schedule: true,
            solver_method: Method::Rk4,
            solver_steps: 8,
            solver_rtol: 1e-5,
            solver_atol: 1e-5,
            net_blocks: 2,
            net_hidden: 64,
            lr: 1e-3,
            batch: 16,
            epochs: 10,
            lambda_k: 0.01,
            lambda_j: 0.01,
            grad_clip: 100.0,
            trace_noise: NoiseDist::Gaussian,
            seed: 0,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "levels",
    "transform",
    "noise_schedule",
    "solver.method",
    "solver.steps",
    "solver.rtol",
    "solver.atol",
    "net.blocks",
    "net.hidden",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.lambda_k",
    "train.lambda_j",
    "train.grad_clip",
    "trace.noise",
    "seed",
];

fn num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` has invalid value `{v}`")))
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            c.set(k.trim(), v.trim(), line)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, k: &str, v: &str, line: usize) -> Result<()> {
        let bad = || Error::Config(format!("line {line}: `{k}` has invalid value `{v}`"));
        match k {
            "levels" => self.levels = num(k, v, line)?,
            "transform" => self.transform = TransformKind::parse(v).ok_or_else(bad)?,
            "noise_schedule" => self.noise_schedule = parse_bool(v).ok_or_else(bad)?,
            "solver.method" => self.solver_method = Method::parse(v).ok_or_else(bad)?,
            "solver.steps" => self.solver_steps = num(k, v, line)?,
            "solver.rtol" => self.solver_rtol = num(k, v, line)?,
            "solver.atol" => self.solver_atol = num(k, v, line)?,
            "net.blocks" => self.net_blocks = num(k, v, line)?,
            "net.hidden" => self.net_hidden = num(k, v, line)?,
            "train.lr" => self.lr = num(k, v, line)?,
            "train.batch" => self.batch = num(k, v, line)?,
            "train.epochs" => self.epochs = num(k, v, line)?,
            "train.lambda_k" => self.lambda_k = num(k, v, line)?,
            "train.lambda_j" => self.lambda_j = num(k, v, line)?,
            "train.grad_clip" => self.grad_clip = num(k, v, line)?,
            "trace.noise" => {
                self.trace_noise = match v {
                    "gaussian" => NoiseDist::Gaussian,
                    "rademacher" => NoiseDist::Rademacher,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = num(k, v, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 {
            return fail("levels must be at least 1");
        }
        if self.net_blocks == 0 || self.net_hidden == 0 {
            return fail("net.blocks and net.hidden must be positive");
        }
        if self.batch == 0 {
            return fail("train.batch must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be a non-negative number");
        }
        if !(self.lambda_k >= 0.0 && self.lambda_j >= 0.0) {
            return fail("regularizer weights must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return fail("train.grad_clip must be positive");
        }
        self.training_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.evaluation_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn training_spec(&self) -> IntegrationSpec {
        match self.solver_method {
            Method::AdaptiveRk45 => IntegrationSpec::adaptive(self.solver_rtol, self.solver_atol),
            m => IntegrationSpec::fixed(m, self.solver_steps),
        }
    }

    pub fn evaluation_spec(&self) -> IntegrationSpec {
        IntegrationSpec::adaptive(self.solver_rtol, self.solver_atol)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let noise = match self.trace_noise {
            NoiseDist::Gaussian => "gaussian",
            NoiseDist::Rademacher => "rademacher",
        };
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "transform = {}", self.transform.name());
        let _ = writeln!(s, "noise_schedule = {}", if self.noise_schedule { "on" } else { "off" });
        let _ = writeln!(s, "solver.method = {}", self.solver_method.name());
        let _ = writeln!(s, "solver.steps = {}", self.solver_steps);
        let _ = writeln!(s, "solver.rtol = {:e}", self.solver_rtol);
        let _ = writeln!(s, "solver.atol = {:e}", self.solver_atol);
        let _ = writeln!(s, "net.blocks = {}", self.net_blocks);
        let _ = writeln!(s, "net.hidden = {}", self.net_hidden);
        let _ = writeln!(s, "train.lr = {:e}", self.lr);
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.lambda_k = {:e}", self.lambda_k);
        let _ = writeln!(s, "train.lambda_j = {:e}", self.lambda_j);
        let _ = writeln!(s, "train.grad_clip = {:e}", self.grad_clip);
        let _ = writeln!(s, "trace.noise = {noise}");
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}
