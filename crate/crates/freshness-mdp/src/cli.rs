//! Experiment driver behind the `freshness-mdp` binary.
//!
//! A run is described by an [`ExperimentSpec`]: a family (which sweep or
//! single-instance command to execute), model parameters, solver and search
//! settings, and the simulation protocol. Specs are assembled from defaults,
//! an optional line-oriented `key = value` config file, and command-line
//! overrides, in that order.
//!
//! Every produced CSV starts with a `#`-prefixed provenance preamble echoing
//! the fully resolved spec and the master seed, so a file can always be
//! regenerated bit-for-bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::aoii::{
    self, build_aoii_lagrangian_mdp, build_aoii_token_mdp, derive_chain_params,
    solve_rate_constrained, AoiiParamError, AoiiParams, TokenParams,
};
use crate::mdp::{long_run_average, rvia, EvalError, SolveError, SolverConfig};
use crate::search::{SearchConfig, SearchError};
use crate::sim::{
    simulate, simulate_with_trace, BaselineKind, BaselineSpec, DecisionSource, SimConfig,
    SimError, SimModel, StateView,
};
use crate::two_rate::{
    self, build_two_rate_lagrangian_mdp, build_two_rate_token_mdp, solve_constrained,
    TwoRateChainLayout, TwoRateParams,
};

/// Experiment families exposed as CLI subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    AoiiSweepAlpha,
    AoiiSweepPr,
    Aoi2SweepQ,
    Aoi2SweepAlphamax,
    Aoi2GapBmax,
    Solve,
    Simulate,
}

impl Family {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "aoii-sweep-alpha" => Some(Self::AoiiSweepAlpha),
            "aoii-sweep-pr" => Some(Self::AoiiSweepPr),
            "aoi2-sweep-q" => Some(Self::Aoi2SweepQ),
            "aoi2-sweep-alphamax" => Some(Self::Aoi2SweepAlphamax),
            "aoi2-gap-bmax" => Some(Self::Aoi2GapBmax),
            "solve" => Some(Self::Solve),
            "simulate" => Some(Self::Simulate),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AoiiSweepAlpha => "aoii-sweep-alpha",
            Self::AoiiSweepPr => "aoii-sweep-pr",
            Self::Aoi2SweepQ => "aoi2-sweep-q",
            Self::Aoi2SweepAlphamax => "aoi2-sweep-alphamax",
            Self::Aoi2GapBmax => "aoi2-gap-bmax",
            Self::Solve => "solve",
            Self::Simulate => "simulate",
        }
    }

    pub const ALL: [Family; 7] = [
        Self::AoiiSweepAlpha,
        Self::AoiiSweepPr,
        Self::Aoi2SweepQ,
        Self::Aoi2SweepAlphamax,
        Self::Aoi2GapBmax,
        Self::Solve,
        Self::Simulate,
    ];
}

/// Model selector for the `solve` and `simulate` families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    AoiiToken,
    AoiiChain,
    Aoi2Token,
    Aoi2Chain,
}

impl ModelKind {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "aoii-token" => Some(Self::AoiiToken),
            "aoii-chain" => Some(Self::AoiiChain),
            "aoi2-token" => Some(Self::Aoi2Token),
            "aoi2-chain" => Some(Self::Aoi2Chain),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::AoiiToken => "aoii-token",
            Self::AoiiChain => "aoii-chain",
            Self::Aoi2Token => "aoi2-token",
            Self::Aoi2Chain => "aoi2-chain",
        }
    }
}

/// Decision source for the `simulate` family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Solve the token model and simulate its optimal policy.
    Token,
    /// Solve the constrained chain problem and simulate the mixture.
    Cmdp,
    Uniform,
    Random,
    Never,
    Greedy,
}

impl SourceKind {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "token" => Some(Self::Token),
            "cmdp" => Some(Self::Cmdp),
            "uniform" => Some(Self::Uniform),
            "random" => Some(Self::Random),
            "never" => Some(Self::Never),
            "greedy" => Some(Self::Greedy),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Token => "token",
            Self::Cmdp => "cmdp",
            Self::Uniform => "uniform",
            Self::Random => "random",
            Self::Never => "never",
            Self::Greedy => "greedy",
        }
    }
}

/// Fully resolved description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub family: Family,
    // Single-rate AoII model.
    pub n_source_states: u32,
    pub stay_prob: f64,
    pub success_prob: f64,
    pub alpha: f64,
    // Two-rate AoI model.
    pub request_prob: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    // Shared.
    pub delta_max: u32,
    /// Values of the swept variable (budgets, stay probabilities, request
    /// probabilities, or rate caps depending on the family).
    pub grid: Vec<f64>,
    pub b_max_list: Vec<u32>,
    pub epsilon_v: f64,
    pub epsilon_lambda: f64,
    pub gamma: f64,
    pub max_iterations: usize,
    pub horizon: u32,
    pub n_runs: u32,
    pub master_seed: u64,
    pub burn_in: u32,
    pub out_path: PathBuf,
    // `solve` / `simulate` extras.
    pub model: ModelKind,
    pub lambda0: f64,
    pub lambda1: f64,
    pub source: SourceKind,
    pub trace_out: Option<PathBuf>,
    pub trace_runs: u32,
}

impl ExperimentSpec {
    /// Family defaults; the standard setups need no config file at all.
    pub fn defaults(family: Family) -> Self {
        let aoii = !matches!(
            family,
            Family::Aoi2SweepQ | Family::Aoi2SweepAlphamax | Family::Aoi2GapBmax
        );
        let grid = match family {
            Family::AoiiSweepAlpha => (1..=10).map(|k| k as f64 / 20.0).collect(),
            Family::AoiiSweepPr => (2..=9).map(|k| k as f64 / 10.0).collect(),
            Family::Aoi2SweepQ => (1..=9).map(|k| k as f64 / 10.0).collect(),
            Family::Aoi2SweepAlphamax => (2..=8).map(|k| k as f64 / 10.0).collect(),
            Family::Aoi2GapBmax => vec![0.2, 0.5],
            Family::Solve | Family::Simulate => vec![0.0],
        };
        let b_max_list = match family {
            Family::AoiiSweepAlpha | Family::AoiiSweepPr => vec![5, 10, 20],
            Family::Aoi2GapBmax => (1..=15).collect(),
            _ => vec![5],
        };
        Self {
            family,
            n_source_states: 8,
            stay_prob: 0.5,
            success_prob: 1.0,
            alpha: 0.1,
            request_prob: 0.2,
            alpha_min: 0.1,
            alpha_max: 0.5,
            delta_max: if aoii { 30 } else { 20 },
            grid,
            b_max_list,
            epsilon_v: 0.1,
            epsilon_lambda: 0.1,
            gamma: 0.1,
            max_iterations: 100_000,
            horizon: 20_000,
            n_runs: 400,
            master_seed: 1,
            burn_in: 0,
            out_path: PathBuf::from(format!("{}.csv", family.name())),
            model: if aoii { ModelKind::AoiiToken } else { ModelKind::Aoi2Token },
            lambda0: 0.0,
            lambda1: 0.0,
            source: SourceKind::Token,
            trace_out: None,
            trace_runs: 1,
        }
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            epsilon_v: self.epsilon_v,
            max_iterations: self.max_iterations,
            ref_state: 0,
        }
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            epsilon_lambda: self.epsilon_lambda,
            gamma: self.gamma,
            max_outer: 200,
        }
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            n_runs: self.n_runs,
            master_seed: self.master_seed,
            burn_in: self.burn_in,
        }
    }

    fn aoii_chain(&self, stay_prob: f64) -> Result<AoiiParams, CliError> {
        derive_chain_params(self.n_source_states, stay_prob, self.success_prob, self.delta_max)
            .map_err(CliError::from)
    }

    fn two_rate_params(&self, q: f64, alpha_max: f64, b_max: u32) -> Result<TwoRateParams, CliError> {
        TwoRateParams::new(q, self.alpha_min, alpha_max, self.delta_max, b_max)
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Provenance preamble: the fully resolved spec, one `# key = value`
    /// line each, in a fixed order.
    fn provenance(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "# {k} = {v}");
        };
        kv("family", self.family.name().into());
        kv("n", self.n_source_states.to_string());
        kv("p_r", self.stay_prob.to_string());
        kv("p_s", self.success_prob.to_string());
        kv("alpha", self.alpha.to_string());
        kv("q", self.request_prob.to_string());
        kv("alpha_min", self.alpha_min.to_string());
        kv("alpha_max", self.alpha_max.to_string());
        kv("delta_max", self.delta_max.to_string());
        kv("grid", join(&self.grid));
        kv("bmax", join(&self.b_max_list));
        kv("eps_v", self.epsilon_v.to_string());
        kv("eps_lambda", self.epsilon_lambda.to_string());
        kv("gamma", self.gamma.to_string());
        kv("max_iter", self.max_iterations.to_string());
        kv("T", self.horizon.to_string());
        kv("runs", self.n_runs.to_string());
        kv("burn_in", self.burn_in.to_string());
        kv("master_seed", self.master_seed.to_string());
        if matches!(self.family, Family::Solve | Family::Simulate) {
            kv("model", self.model.name().into());
            kv("lambda0", self.lambda0.to_string());
            kv("lambda1", self.lambda1.to_string());
            kv("source", self.source.name().into());
        }
        out
    }

    /// Checks every invariant, naming the violated one. The negated
    /// comparisons are deliberate: they also reject NaN inputs.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if !(self.request_prob > 0.0 && self.request_prob < 1.0) {
            return bad(format!("q = {} violates the invariant 0 < q < 1", self.request_prob));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max < 1.0) {
            return bad(format!(
                "(alpha_min, alpha_max) = ({}, {}) violates 0 < alpha_min <= alpha_max < 1",
                self.alpha_min, self.alpha_max
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} violates 0 < alpha < 1", self.alpha));
        }
        if self.n_source_states < 2 {
            return bad(format!("n = {} violates n >= 2", self.n_source_states));
        }
        if !(self.success_prob > 0.0 && self.success_prob <= 1.0) {
            return bad(format!("p_s = {} violates 0 < p_s <= 1", self.success_prob));
        }
        let min_stay = 1.0 / self.n_source_states as f64;
        if !(self.stay_prob > min_stay && self.stay_prob < 1.0) {
            return bad(format!(
                "p_r = {} violates 1/n < p_r < 1 (n = {})",
                self.stay_prob, self.n_source_states
            ));
        }
        if self.delta_max == 0 {
            return bad("delta_max = 0 violates delta_max >= 1".into());
        }
        if self.grid.is_empty() {
            return bad("grid is empty".into());
        }
        if self.b_max_list.is_empty() || self.b_max_list.contains(&0) {
            return bad("bmax list must be nonempty with entries >= 1".into());
        }
        let grid_ok: Box<dyn Fn(f64) -> bool> = match self.family {
            Family::AoiiSweepAlpha => Box::new(|v| v > 0.0 && v < 1.0),
            Family::AoiiSweepPr => Box::new(move |v| v > min_stay && v < 1.0),
            Family::Aoi2SweepQ | Family::Aoi2GapBmax => Box::new(|v| v > 0.0 && v < 1.0),
            Family::Aoi2SweepAlphamax => {
                let lo = self.alpha_min;
                Box::new(move |v| v >= lo && v < 1.0)
            }
            Family::Solve | Family::Simulate => Box::new(|_| true),
        };
        if let Some(v) = self.grid.iter().find(|&&v| !grid_ok(v)) {
            return bad(format!(
                "grid value {v} is out of range for family {}",
                self.family.name()
            ));
        }
        if !(self.epsilon_v > 0.0) {
            return bad(format!("eps_v = {} violates eps_v > 0", self.epsilon_v));
        }
        if !(self.epsilon_lambda > 0.0) {
            return bad(format!("eps_lambda = {} violates eps_lambda > 0", self.epsilon_lambda));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma = {} violates gamma > 0", self.gamma));
        }
        if self.max_iterations == 0 {
            return bad("max_iter = 0 violates max_iter >= 1".into());
        }
        if self.horizon == 0 || self.n_runs == 0 {
            return bad("T and runs must be >= 1".into());
        }
        if self.burn_in >= self.horizon {
            return bad(format!(
                "burn_in = {} violates burn_in < T = {}",
                self.burn_in, self.horizon
            ));
        }
        if !(self.lambda0 >= 0.0 && self.lambda1 >= 0.0) {
            return bad("lambda0 and lambda1 must be nonnegative".into());
        }
        Ok(())
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub b_max_list: Option<Vec<u32>>,
    pub master_seed: Option<u64>,
    pub out_path: Option<PathBuf>,
    pub epsilon_v: Option<f64>,
    pub epsilon_lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub horizon: Option<u32>,
    pub n_runs: Option<u32>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at {path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("invalid spec: {0}")]
    Validation(String),
    #[error("{context}: {source}")]
    Solve {
        context: String,
        #[source]
        source: SolveError,
    },
    #[error("{context}: {source}")]
    Search {
        context: String,
        #[source]
        source: SearchError,
    },
    #[error("{context}: {source}")]
    Eval {
        context: String,
        #[source]
        source: EvalError,
    },
    #[error("{context}: {source}")]
    Sim {
        context: String,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AoiiParamError> for CliError {
    fn from(err: AoiiParamError) -> Self {
        CliError::Validation(err.to_string())
    }
}

impl CliError {
    /// Exit-code contract: 0 success, 2 validation, 3 solver
    /// non-convergence, 4 infeasible search, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Validation(_) => 2,
            Self::Solve { .. } => 3,
            Self::Search { source, .. } => match source {
                SearchError::Solve(_) => 3,
                _ => 4,
            },
            Self::Eval { .. } | Self::Sim { .. } | Self::Io(_) => 1,
        }
    }
}

/// Applies a `key = value` line to the spec. Line numbers are 1-based for
/// error reporting.
fn apply_key(spec: &mut ExperimentSpec, path: &str, line_no: usize, key: &str, value: &str) -> Result<(), CliError> {
    let parse_err = |message: String| CliError::Parse {
        path: path.to_string(),
        line: line_no,
        message,
    };
    macro_rules! num {
        ($ty:ty) => {
            value
                .parse::<$ty>()
                .map_err(|_| parse_err(format!("cannot parse `{value}` for key `{key}`")))?
        };
    }
    match key {
        "family" => {
            spec.family = Family::parse(value)
                .ok_or_else(|| parse_err(format!("unknown family `{value}`")))?;
        }
        "n" => spec.n_source_states = num!(u32),
        "p_r" => spec.stay_prob = num!(f64),
        "p_s" => spec.success_prob = num!(f64),
        "alpha" => spec.alpha = num!(f64),
        "q" => spec.request_prob = num!(f64),
        "alpha_min" => spec.alpha_min = num!(f64),
        "alpha_max" => spec.alpha_max = num!(f64),
        "delta_max" => spec.delta_max = num!(u32),
        "grid" => {
            spec.grid = parse_list::<f64>(value)
                .map_err(|bad| parse_err(format!("cannot parse `{bad}` in grid list")))?;
        }
        "bmax" => {
            spec.b_max_list = parse_list::<u32>(value)
                .map_err(|bad| parse_err(format!("cannot parse `{bad}` in bmax list")))?;
        }
        "eps_v" => spec.epsilon_v = num!(f64),
        "eps_lambda" => spec.epsilon_lambda = num!(f64),
        "gamma" => spec.gamma = num!(f64),
        "max_iter" => spec.max_iterations = num!(usize),
        "T" => spec.horizon = num!(u32),
        "runs" => spec.n_runs = num!(u32),
        "seed" => spec.master_seed = num!(u64),
        "burn_in" => spec.burn_in = num!(u32),
        "out" => spec.out_path = PathBuf::from(value),
        "model" => {
            spec.model = ModelKind::parse(value)
                .ok_or_else(|| parse_err(format!("unknown model `{value}`")))?;
        }
        "lambda0" => spec.lambda0 = num!(f64),
        "lambda1" => spec.lambda1 = num!(f64),
        "source" => {
            spec.source = SourceKind::parse(value)
                .ok_or_else(|| parse_err(format!("unknown source `{value}`")))?;
        }
        "trace_out" => spec.trace_out = Some(PathBuf::from(value)),
        "trace_runs" => spec.trace_runs = num!(u32),
        other => return Err(parse_err(format!("unknown key `{other}`"))),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| s.to_string()))
        .collect()
}

/// Builds the spec for `family` from defaults, an optional config file, and
/// command-line overrides; validates the result.
pub fn load_spec(
    family: Family,
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<ExperimentSpec, CliError> {
    let mut spec = ExperimentSpec::defaults(family);
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)?;
        let shown = path.display().to_string();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Parse {
                path: shown.clone(),
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            apply_key(&mut spec, &shown, idx + 1, key.trim(), value.trim())?;
        }
    }
    // The subcommand wins over a family key in the file.
    spec.family = family;
    if let Some(ref b) = overrides.b_max_list {
        spec.b_max_list = b.clone();
    }
    if let Some(seed) = overrides.master_seed {
        spec.master_seed = seed;
    }
    if let Some(ref out) = overrides.out_path {
        spec.out_path = out.clone();
    }
    if let Some(eps) = overrides.epsilon_v {
        spec.epsilon_v = eps;
    }
    if let Some(eps) = overrides.epsilon_lambda {
        spec.epsilon_lambda = eps;
    }
    if let Some(gamma) = overrides.gamma {
        spec.gamma = gamma;
    }
    if let Some(horizon) = overrides.horizon {
        spec.horizon = horizon;
    }
    if let Some(runs) = overrides.n_runs {
        spec.n_runs = runs;
    }
    spec.validate()?;
    Ok(spec)
}

/// What a finished run reports back to the caller.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_path: PathBuf,
    pub rows_written: usize,
    /// Human-readable lines printed by the binary after the run.
    pub notes: Vec<String>,
}

struct CsvSink {
    writer: BufWriter<File>,
    rows: usize,
}

impl CsvSink {
    fn create(spec: &ExperimentSpec, header: &str) -> Result<Self, CliError> {
        let file = File::create(&spec.out_path)?;
        let mut writer = BufWriter::new(file);
        writer.write_all(spec.provenance().as_bytes())?;
        writeln!(writer, "{header}")?;
        writer.flush()?;
        Ok(Self { writer, rows: 0 })
    }

    /// Writes one row and flushes, so completed rows survive a later error.
    fn row(&mut self, line: &str) -> Result<(), CliError> {
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        self.rows += 1;
        Ok(())
    }
}

fn fmt_f64(value: f64) -> String {
    format!("{value}")
}

/// Runs the experiment described by `spec`, writing its CSV artifact.
///
/// Rows follow grid order, then method order (token, cmdp, uniform,
/// random). Solver failures abort the run with the offending grid point in
/// the error context; rows already written remain flushed on disk.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    spec.validate()?;
    match spec.family {
        Family::AoiiSweepAlpha | Family::AoiiSweepPr => run_aoii_sweep(spec),
        Family::Aoi2SweepQ | Family::Aoi2SweepAlphamax => run_two_rate_sweep(spec),
        Family::Aoi2GapBmax => run_gap_sweep(spec),
        Family::Solve => run_solve(spec),
        Family::Simulate => run_simulate(spec),
    }
}

fn run_aoii_sweep(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let sweep_name = match spec.family {
        Family::AoiiSweepAlpha => "alpha",
        _ => "p_r",
    };
    let mut sink = CsvSink::create(spec, &format!("{sweep_name},bmax,method,J_exact,J_sim,rate_sim,stderr"))?;
    let solver = spec.solver_config();
    let sim_cfg = spec.sim_config();
    for &value in &spec.grid {
        let at = |e: String| format!("{sweep_name} = {value}: {e}");
        let (alpha, stay_prob) = match spec.family {
            Family::AoiiSweepAlpha => (value, spec.stay_prob),
            _ => (spec.alpha, value),
        };
        let chain = spec.aoii_chain(stay_prob)?;
        for &b_max in &spec.b_max_list {
            let token = TokenParams::new(alpha, b_max).map_err(CliError::from)?;
            let model = build_aoii_token_mdp(&chain, &token);
            let solved = rvia(&model.mdp, &solver)
                .map_err(|e| CliError::Solve { context: at(e.to_string()), source: e })?;
            let exact = long_run_average(&model.mdp, &solved.policy, |s, a| model.mdp.cost(s, a))
                .map_err(|e| CliError::Eval { context: at(e.to_string()), source: e })?;
            let sim_model = SimModel {
                mdp: &model.mdp,
                view: StateView::AoiiToken(model.layout),
                initial_state: model.layout.index(0, 0),
            };
            let sim = simulate(&sim_model, &DecisionSource::Policy(&solved.policy), &sim_cfg)
                .map_err(|e| CliError::Sim { context: at(e.to_string()), source: e })?;
            sink.row(&format!(
                "{value},{b_max},token,{},{},{},{}",
                fmt_f64(exact),
                fmt_f64(sim.avg_cost),
                fmt_f64(sim.total_rate),
                fmt_f64(sim.stderr_cost)
            ))?;
        }
        let constrained = solve_rate_constrained(&chain, alpha, &solver, spec.epsilon_lambda)
            .map_err(|e| CliError::Search { context: at(e.to_string()), source: e })?;
        let chain_mdp = build_aoii_lagrangian_mdp(&chain, 0.0);
        let mixture = constrained.mixture();
        let sim_model = SimModel {
            mdp: &chain_mdp,
            view: StateView::AoiiChain { delta_max: chain.delta_max },
            initial_state: 0,
        };
        let sim = simulate(&sim_model, &DecisionSource::Mixture(&mixture), &sim_cfg)
            .map_err(|e| CliError::Sim { context: at(e.to_string()), source: e })?;
        sink.row(&format!(
            "{value},,cmdp,{},{},{},{}",
            fmt_f64(constrained.average_cost()),
            fmt_f64(sim.avg_cost),
            fmt_f64(sim.total_rate),
            fmt_f64(sim.stderr_cost)
        ))?;
    }
    Ok(RunSummary {
        out_path: spec.out_path.clone(),
        rows_written: sink.rows,
        notes: Vec::new(),
    })
}

fn run_two_rate_sweep(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let sweep_name = match spec.family {
        Family::Aoi2SweepQ => "q",
        _ => "alpha_max",
    };
    let mut sink = CsvSink::create(
        spec,
        &format!("{sweep_name},bmax,method,J_exact,J_sim,rate0_sim,rate1_sim,stderr"),
    )?;
    let solver = spec.solver_config();
    let search = spec.search_config();
    let sim_cfg = spec.sim_config();
    for &value in &spec.grid {
        let at = |e: String| format!("{sweep_name} = {value}: {e}");
        let (q, alpha_max) = match spec.family {
            Family::Aoi2SweepQ => (value, spec.alpha_max),
            _ => (spec.request_prob, value),
        };
        for &b_max in &spec.b_max_list {
            let params = spec.two_rate_params(q, alpha_max, b_max)?;
            let model = build_two_rate_token_mdp(&params);
            let solved = rvia(&model.mdp, &solver)
                .map_err(|e| CliError::Solve { context: at(e.to_string()), source: e })?;
            let exact = long_run_average(&model.mdp, &solved.policy, |s, a| model.mdp.cost(s, a))
                .map_err(|e| CliError::Eval { context: at(e.to_string()), source: e })?;
            let sim_model = SimModel {
                mdp: &model.mdp,
                view: StateView::TwoRateToken(model.layout),
                initial_state: model.layout.index(0, 0, 1, 0),
            };
            let sim = simulate(&sim_model, &DecisionSource::Policy(&solved.policy), &sim_cfg)
                .map_err(|e| CliError::Sim { context: at(e.to_string()), source: e })?;
            sink.row(&format!(
                "{value},{b_max},token,{},{},{},{},{}",
                fmt_f64(exact),
                fmt_f64(sim.avg_cost),
                fmt_f64(sim.rate0),
                fmt_f64(sim.rate1),
                fmt_f64(sim.stderr_cost)
            ))?;
        }

        let params = spec.two_rate_params(q, alpha_max, spec.b_max_list[0])?;
        let chain_mdp = build_two_rate_lagrangian_mdp(&params, crate::search::LagrangeVec::ZERO);
        let chain_layout = TwoRateChainLayout { delta_max: params.delta_max };
        let chain_model = SimModel {
            mdp: &chain_mdp,
            view: StateView::TwoRateChain(chain_layout),
            initial_state: chain_layout.index(1, 0),
        };

        let constrained = solve_constrained(&params, &solver, &search)
            .map_err(|e| CliError::Search { context: at(e.to_string()), source: e })?;
        let mixture = constrained.mixture();
        let sim = simulate(&chain_model, &DecisionSource::Mixture(&mixture), &sim_cfg)
            .map_err(|e| CliError::Sim { context: at(e.to_string()), source: e })?;
        sink.row(&format!(
            "{value},,cmdp,{},{},{},{},{}",
            fmt_f64(constrained.average_cost),
            fmt_f64(sim.avg_cost),
            fmt_f64(sim.rate0),
            fmt_f64(sim.rate1),
            fmt_f64(sim.stderr_cost)
        ))?;

        for (kind, label) in [
            (BaselineKind::UniformTwoRate, "uniform"),
            (BaselineKind::RandomTwoRate, "random"),
        ] {
            let source = DecisionSource::Baseline(BaselineSpec {
                kind,
                alpha_min: params.alpha_min,
                alpha_max: params.alpha_max,
            });
            let sim = simulate(&chain_model, &source, &sim_cfg)
                .map_err(|e| CliError::Sim { context: at(e.to_string()), source: e })?;
            sink.row(&format!(
                "{value},,{label},,{},{},{},{}",
                fmt_f64(sim.avg_cost),
                fmt_f64(sim.rate0),
                fmt_f64(sim.rate1),
                fmt_f64(sim.stderr_cost)
            ))?;
        }
    }
    Ok(RunSummary {
        out_path: spec.out_path.clone(),
        rows_written: sink.rows,
        notes: Vec::new(),
    })
}

fn run_gap_sweep(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let mut sink = CsvSink::create(spec, "q,bmax,J_token,J_cmdp,gap")?;
    let solver = spec.solver_config();
    let search = spec.search_config();
    for &q in &spec.grid {
        let at = |e: String| format!("q = {q}: {e}");
        let base = spec.two_rate_params(q, spec.alpha_max, spec.b_max_list[0])?;
        let constrained = solve_constrained(&base, &solver, &search)
            .map_err(|e| CliError::Search { context: at(e.to_string()), source: e })?;
        for &b_max in &spec.b_max_list {
            let params = spec.two_rate_params(q, spec.alpha_max, b_max)?;
            let model = build_two_rate_token_mdp(&params);
            let solved = rvia(&model.mdp, &solver)
                .map_err(|e| CliError::Solve { context: at(e.to_string()), source: e })?;
            let token = long_run_average(&model.mdp, &solved.policy, |s, a| model.mdp.cost(s, a))
                .map_err(|e| CliError::Eval { context: at(e.to_string()), source: e })?;
            let gap = token - constrained.average_cost;
            sink.row(&format!(
                "{q},{b_max},{},{},{}",
                fmt_f64(token),
                fmt_f64(constrained.average_cost),
                fmt_f64(gap)
            ))?;
        }
    }
    Ok(RunSummary {
        out_path: spec.out_path.clone(),
        rows_written: sink.rows,
        notes: Vec::new(),
    })
}

fn run_solve(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let solver = spec.solver_config();
    let mut notes = Vec::new();
    let file = File::create(&spec.out_path)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(spec.provenance().as_bytes())?;
    let context = |e: String| format!("solve {}: {e}", spec.model.name());
    let rows;
    match spec.model {
        ModelKind::AoiiToken => {
            let chain = spec.aoii_chain(spec.stay_prob)?;
            let token =
                TokenParams::new(spec.alpha, spec.b_max_list[0]).map_err(CliError::from)?;
            let model = build_aoii_token_mdp(&chain, &token);
            let solved = rvia(&model.mdp, &solver)
                .map_err(|e| CliError::Solve { context: context(e.to_string()), source: e })?;
            let rate = long_run_average(&model.mdp, &solved.policy, |_, a| a as f64)
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            let cost = long_run_average(&model.mdp, &solved.policy, |s, a| model.mdp.cost(s, a))
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            aoii::write_token_policy_csv(&solved.policy, &model.layout, &mut writer)?;
            rows = model.mdp.n_states();
            notes.push(format!("J = {cost}"));
            notes.push(format!("c0 = {} (rate - alpha)", rate - spec.alpha));
            notes.push(format!("iterations = {}", solved.n_iterations));
        }
        ModelKind::AoiiChain => {
            let chain = spec.aoii_chain(spec.stay_prob)?;
            let mdp = build_aoii_lagrangian_mdp(&chain, spec.lambda0);
            let solved = rvia(&mdp, &solver)
                .map_err(|e| CliError::Solve { context: context(e.to_string()), source: e })?;
            let rate = long_run_average(&mdp, &solved.policy, |_, a| a as f64)
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            let cost = long_run_average(&mdp, &solved.policy, |s, _| s as f64)
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            aoii::write_chain_policy_csv(&solved.policy, &mut writer)?;
            rows = mdp.n_states();
            notes.push(format!("J = {cost}"));
            notes.push(format!("c0 = {} (rate - alpha)", rate - spec.alpha));
            notes.push(format!("iterations = {}", solved.n_iterations));
        }
        ModelKind::Aoi2Token => {
            let params =
                spec.two_rate_params(spec.request_prob, spec.alpha_max, spec.b_max_list[0])?;
            let model = build_two_rate_token_mdp(&params);
            let solved = rvia(&model.mdp, &solver)
                .map_err(|e| CliError::Solve { context: context(e.to_string()), source: e })?;
            let layout = model.layout;
            let rate = |want: u8| {
                long_run_average(&model.mdp, &solved.policy, |s, a| {
                    if layout.unpack(s).3 == want {
                        a as f64
                    } else {
                        0.0
                    }
                })
            };
            let rate0 = rate(0)
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            let rate1 = rate(1)
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            let cost = long_run_average(&model.mdp, &solved.policy, |s, a| model.mdp.cost(s, a))
                .map_err(|e| CliError::Eval { context: context(e.to_string()), source: e })?;
            two_rate::write_token_policy_csv(&solved.policy, &model.layout, &mut writer)?;
            rows = model.mdp.n_states();
            notes.push(format!("J = {cost}"));
            notes.push(format!("c0 = {}", rate0 - params.alpha0()));
            notes.push(format!("c1 = {}", rate1 - params.alpha1()));
            notes.push(format!("iterations = {}", solved.n_iterations));
        }
        ModelKind::Aoi2Chain => {
            let params =
                spec.two_rate_params(spec.request_prob, spec.alpha_max, spec.b_max_list[0])?;
            let search = spec.search_config();
            let constrained = solve_constrained(&params, &solver, &search)
                .map_err(|e| CliError::Search { context: context(e.to_string()), source: e })?;
            // Serialize the multiplier-optimal policy; the mixture metadata
            // goes to the notes.
            let layout = TwoRateChainLayout { delta_max: params.delta_max };
            let representative = &constrained.mixture()[0].1;
            two_rate::write_chain_policy_csv(representative, &layout, &mut writer)?;
            if let Some(ref trace_path) = spec.trace_out {
                let trace_file = File::create(trace_path)?;
                let mut trace_writer = BufWriter::new(trace_file);
                crate::search::write_trace_csv(&constrained.trace, &mut trace_writer)?;
                trace_writer.flush()?;
                notes.push(format!(
                    "search trace: {} rows to {}",
                    constrained.trace.len(),
                    trace_path.display()
                ));
            }
            rows = layout.n_states();
            notes.push(format!("J = {}", constrained.average_cost));
            notes.push(format!("c0 = {}", constrained.slack.c0));
            notes.push(format!("c1 = {}", constrained.slack.c1));
            notes.push(format!(
                "lambda* = ({}, {})",
                constrained.lambda_star.lambda0, constrained.lambda_star.lambda1
            ));
            notes.push(format!("outer iterations = {}", constrained.n_outer_iterations));
        }
    }
    writer.flush()?;
    Ok(RunSummary { out_path: spec.out_path.clone(), rows_written: rows, notes })
}

fn run_simulate(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let solver = spec.solver_config();
    let sim_cfg = spec.sim_config();
    let context = |e: String| format!("simulate {}: {e}", spec.source.name());

    // Build the model matching the requested view.
    let mut notes = Vec::new();
    let result;
    match spec.model {
        ModelKind::AoiiToken | ModelKind::AoiiChain => {
            let chain = spec.aoii_chain(spec.stay_prob)?;
            let baseline = |kind| {
                DecisionSource::Baseline(BaselineSpec {
                    kind,
                    alpha_min: spec.alpha_min,
                    alpha_max: spec.alpha_max,
                })
            };
            if spec.model == ModelKind::AoiiToken {
                let token =
                    TokenParams::new(spec.alpha, spec.b_max_list[0]).map_err(CliError::from)?;
                let model = build_aoii_token_mdp(&chain, &token);
                let sim_model = SimModel {
                    mdp: &model.mdp,
                    view: StateView::AoiiToken(model.layout),
                    initial_state: model.layout.index(0, 0),
                };
                let solved;
                let source = match spec.source {
                    SourceKind::Token => {
                        solved = rvia(&model.mdp, &solver).map_err(|e| CliError::Solve {
                            context: context(e.to_string()),
                            source: e,
                        })?;
                        DecisionSource::Policy(&solved.policy)
                    }
                    SourceKind::Never => baseline(BaselineKind::NeverUpdate),
                    SourceKind::Greedy => baseline(BaselineKind::GreedyToken),
                    other => {
                        return Err(CliError::Validation(format!(
                            "source `{}` does not apply to model `aoii-token`",
                            other.name()
                        )))
                    }
                };
                result = run_sim_source(spec, &sim_model, &source, &sim_cfg)?;
            } else {
                let mdp = build_aoii_lagrangian_mdp(&chain, 0.0);
                let sim_model = SimModel {
                    mdp: &mdp,
                    view: StateView::AoiiChain { delta_max: chain.delta_max },
                    initial_state: 0,
                };
                let mixture;
                let source = match spec.source {
                    SourceKind::Cmdp => {
                        let constrained =
                            solve_rate_constrained(&chain, spec.alpha, &solver, spec.epsilon_lambda)
                                .map_err(|e| CliError::Search {
                                    context: context(e.to_string()),
                                    source: e,
                                })?;
                        mixture = constrained.mixture();
                        DecisionSource::Mixture(&mixture)
                    }
                    SourceKind::Never => baseline(BaselineKind::NeverUpdate),
                    other => {
                        return Err(CliError::Validation(format!(
                            "source `{}` does not apply to model `aoii-chain`",
                            other.name()
                        )))
                    }
                };
                result = run_sim_source(spec, &sim_model, &source, &sim_cfg)?;
            }
        }
        ModelKind::Aoi2Token | ModelKind::Aoi2Chain => {
            let params =
                spec.two_rate_params(spec.request_prob, spec.alpha_max, spec.b_max_list[0])?;
            let baseline = |kind| {
                DecisionSource::Baseline(BaselineSpec {
                    kind,
                    alpha_min: params.alpha_min,
                    alpha_max: params.alpha_max,
                })
            };
            if spec.model == ModelKind::Aoi2Token {
                let model = build_two_rate_token_mdp(&params);
                let sim_model = SimModel {
                    mdp: &model.mdp,
                    view: StateView::TwoRateToken(model.layout),
                    initial_state: model.layout.index(0, 0, 1, 0),
                };
                let solved;
                let source = match spec.source {
                    SourceKind::Token => {
                        solved = rvia(&model.mdp, &solver).map_err(|e| CliError::Solve {
                            context: context(e.to_string()),
                            source: e,
                        })?;
                        DecisionSource::Policy(&solved.policy)
                    }
                    SourceKind::Never => baseline(BaselineKind::NeverUpdate),
                    SourceKind::Greedy => baseline(BaselineKind::GreedyToken),
                    other => {
                        return Err(CliError::Validation(format!(
                            "source `{}` does not apply to model `aoi2-token`",
                            other.name()
                        )))
                    }
                };
                result = run_sim_source(spec, &sim_model, &source, &sim_cfg)?;
            } else {
                let mdp = build_two_rate_lagrangian_mdp(&params, crate::search::LagrangeVec::ZERO);
                let layout = TwoRateChainLayout { delta_max: params.delta_max };
                let sim_model = SimModel {
                    mdp: &mdp,
                    view: StateView::TwoRateChain(layout),
                    initial_state: layout.index(1, 0),
                };
                let mixture;
                let source = match spec.source {
                    SourceKind::Cmdp => {
                        let search = spec.search_config();
                        let constrained =
                            solve_constrained(&params, &solver, &search).map_err(|e| {
                                CliError::Search { context: context(e.to_string()), source: e }
                            })?;
                        mixture = constrained.mixture();
                        DecisionSource::Mixture(&mixture)
                    }
                    SourceKind::Uniform => baseline(BaselineKind::UniformTwoRate),
                    SourceKind::Random => baseline(BaselineKind::RandomTwoRate),
                    SourceKind::Never => baseline(BaselineKind::NeverUpdate),
                    other => {
                        return Err(CliError::Validation(format!(
                            "source `{}` does not apply to model `aoi2-chain`",
                            other.name()
                        )))
                    }
                };
                result = run_sim_source(spec, &sim_model, &source, &sim_cfg)?;
            }
        }
    }

    let mut sink = CsvSink::create(spec, "model,source,J_sim,rate0_sim,rate1_sim,stderr")?;
    sink.row(&format!(
        "{},{},{},{},{},{}",
        spec.model.name(),
        spec.source.name(),
        fmt_f64(result.avg_cost),
        fmt_f64(result.rate0),
        fmt_f64(result.rate1),
        fmt_f64(result.stderr_cost)
    ))?;
    notes.push(format!("J_sim = {}", result.avg_cost));
    notes.push(format!("rates = ({}, {})", result.rate0, result.rate1));
    Ok(RunSummary { out_path: spec.out_path.clone(), rows_written: sink.rows, notes })
}

fn run_sim_source(
    spec: &ExperimentSpec,
    model: &SimModel,
    source: &DecisionSource,
    cfg: &SimConfig,
) -> Result<crate::sim::SimResult, CliError> {
    let outcome = if let Some(ref trace_path) = spec.trace_out {
        let file = File::create(trace_path)?;
        let mut writer = BufWriter::new(file);
        let result = simulate_with_trace(model, source, cfg, spec.trace_runs, &mut writer);
        writer.flush()?;
        result
    } else {
        simulate(model, source, cfg)
    };
    outcome.map_err(|e| CliError::Sim { context: format!("simulation: {e}"), source: e })
}
