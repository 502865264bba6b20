//! Monte Carlo replay of schedules on the freshness models.
//!
//! The engine walks the sparse transition kernel of a [`FiniteMdp`] slot by
//! slot, decides actions from a deterministic policy, a randomized mixture
//! (drawn once per run at time zero), or one of the reference baselines, and
//! reports time-averaged cost and per-context update rates with standard
//! errors across runs.
//!
//! All randomness is counter-based: every draw is a hash of
//! `(master_seed, run, slot, purpose)`, so results are bit-reproducible and
//! independent of execution order. Two invocations with the same inputs
//! produce identical [`SimResult`]s.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::aoii::AoiiTokenLayout;
use crate::mdp::FiniteMdp;
use crate::two_rate::{TwoRateChainLayout, TwoRateLayout};

const DRAW_POLICY_PICK: u64 = 0;
const DRAW_ACTION: u64 = 1;
const DRAW_TRANSITION: u64 = 2;

/// splitmix64 finalizer; full 64-bit avalanche.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` addressed by `(master_seed, run, slot, purpose)`.
pub fn unit_draw(master_seed: u64, run: u64, slot: u64, purpose: u64) -> f64 {
    let mut h = mix64(master_seed ^ 0x9E37_79B9_7F4A_7C15);
    h = mix64(h ^ run.wrapping_mul(0xA24B_AED4_963E_E407));
    h = mix64(h ^ slot.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    h = mix64(h ^ purpose.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// How to read semantic components out of a flat state index.
#[derive(Debug, Clone, Copy)]
pub enum StateView {
    /// AoII token model: `(tokens, delta)`.
    AoiiToken(AoiiTokenLayout),
    /// AoII chain without tokens: the state index is the AoII value.
    AoiiChain { delta_max: u32 },
    /// Two-rate token model: `(b0, b1, delta, r)`.
    TwoRateToken(TwoRateLayout),
    /// Two-rate chain without tokens: `(delta, r)`.
    TwoRateChain(TwoRateChainLayout),
}

impl StateView {
    /// Request flag of a state, for models that carry one.
    pub fn request_flag(&self, state: usize) -> Option<u8> {
        match self {
            Self::AoiiToken(_) | Self::AoiiChain { .. } => None,
            Self::TwoRateToken(layout) => Some(layout.unpack(state).3),
            Self::TwoRateChain(layout) => Some(layout.unpack(state).1),
        }
    }
}

/// A model instance ready for simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimModel<'a> {
    pub mdp: &'a FiniteMdp,
    pub view: StateView,
    pub initial_state: usize,
}

/// Reference schedules simulated alongside the solved policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Deterministic credit accumulator per context: updates fire evenly at
    /// exactly the context's rate cap.
    UniformTwoRate,
    /// Bernoulli coin per slot at the context's rate cap.
    RandomTwoRate,
    /// Always idle.
    NeverUpdate,
    /// Update whenever the action mask allows it.
    GreedyToken,
}

/// Baseline plus the rate caps the two-rate baselines fire at.
#[derive(Debug, Clone, Copy)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

/// Where actions come from during a run.
#[derive(Debug, Clone)]
pub enum DecisionSource<'a> {
    Policy(&'a [usize]),
    /// Weighted deterministic policies; the component is drawn once at the
    /// start of each run.
    Mixture(&'a [(f64, Arc<[usize]>)]),
    Baseline(BaselineSpec),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("decision source covers {got} states but the model has {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("mixture weights sum to {0}, expected 1")]
    BadMixture(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Slots per run.
    pub horizon: u32,
    pub n_runs: u32,
    pub master_seed: u64,
    /// Leading slots excluded from the averages.
    pub burn_in: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { horizon: 20_000, n_runs: 400, master_seed: 1, burn_in: 0 }
    }
}

/// Monte Carlo estimates, averaged over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub avg_cost: f64,
    /// Updates fired in `r = 0` slots (or all slots for single-context
    /// models), per slot.
    pub rate0: f64,
    /// Updates fired in `r = 1` slots, per slot.
    pub rate1: f64,
    pub total_rate: f64,
    /// Standard error of the per-run cost averages.
    pub stderr_cost: f64,
    pub stderr_rate0: f64,
    pub stderr_rate1: f64,
}

/// Per-run mutable state of [`BaselineKind::UniformTwoRate`]: one credit
/// accumulator per context. Every slot in context `r` adds that context's
/// rate cap; an update fires when a full credit accumulates.
#[derive(Debug, Clone)]
pub struct BaselineRunner {
    spec: BaselineSpec,
    credit: [f64; 2],
}

impl BaselineRunner {
    pub fn new(spec: BaselineSpec) -> Self {
        Self { spec, credit: [0.0; 2] }
    }

    /// Decides the baseline action for `state`, consuming the slot's action
    /// draw where the baseline is randomized. Masked updates degrade to
    /// idling.
    pub fn decide(&mut self, mdp: &FiniteMdp, view: &StateView, state: usize, draw: f64) -> usize {
        let wanted = match self.spec.kind {
            BaselineKind::NeverUpdate => 0,
            BaselineKind::GreedyToken => 1,
            BaselineKind::RandomTwoRate => {
                let context = view.request_flag(state).unwrap_or(0) as usize;
                let p = if context == 1 { self.spec.alpha_max } else { self.spec.alpha_min };
                usize::from(draw < p)
            }
            BaselineKind::UniformTwoRate => {
                let context = view.request_flag(state).unwrap_or(0) as usize;
                let rate = if context == 1 { self.spec.alpha_max } else { self.spec.alpha_min };
                self.credit[context] += rate;
                if self.credit[context] >= 1.0 - 1e-9 {
                    self.credit[context] -= 1.0;
                    1
                } else {
                    0
                }
            }
        };
        if wanted == 1 && !mdp.is_allowed(state, 1) {
            0
        } else {
            wanted
        }
    }
}

struct RunStats {
    cost: f64,
    rate0: f64,
    rate1: f64,
}

fn check_source(model: &SimModel, source: &DecisionSource) -> Result<(), SimError> {
    let expected = model.mdp.n_states();
    match source {
        DecisionSource::Policy(policy) => {
            if policy.len() != expected {
                return Err(SimError::LayoutMismatch { got: policy.len(), expected });
            }
        }
        DecisionSource::Mixture(components) => {
            let total: f64 = components.iter().map(|(w, _)| w).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(SimError::BadMixture(total));
            }
            for (_, policy) in components.iter() {
                if policy.len() != expected {
                    return Err(SimError::LayoutMismatch { got: policy.len(), expected });
                }
            }
        }
        DecisionSource::Baseline(_) => {}
    }
    Ok(())
}

fn sample_successor(mdp: &FiniteMdp, state: usize, action: usize, draw: f64) -> usize {
    let row = mdp.successors(state, action);
    let mut cumulative = 0.0;
    for &(succ, p) in row {
        cumulative += p;
        if draw < cumulative {
            return succ;
        }
    }
    // Rounding can leave the cumulative a hair under one.
    row.last().expect("allowed action has successors").0
}

fn run_trajectory(
    model: &SimModel,
    source: &DecisionSource,
    cfg: &SimConfig,
    run: u64,
    mut trace: Option<&mut dyn FnMut(u64, usize, usize, f64) -> io::Result<()>>,
) -> Result<RunStats, SimError> {
    let run_policy: Option<&[usize]> = match source {
        DecisionSource::Policy(policy) => Some(policy),
        DecisionSource::Mixture(components) => {
            let pick = unit_draw(cfg.master_seed, run, 0, DRAW_POLICY_PICK);
            let mut cumulative = 0.0;
            let mut chosen: &[usize] = &components[components.len() - 1].1;
            for (weight, policy) in components.iter() {
                cumulative += weight;
                if pick < cumulative {
                    chosen = policy;
                    break;
                }
            }
            Some(chosen)
        }
        DecisionSource::Baseline(_) => None,
    };
    let mut baseline = match source {
        DecisionSource::Baseline(spec) => Some(BaselineRunner::new(*spec)),
        _ => None,
    };

    let mut state = model.initial_state;
    let mut cost_sum = 0.0;
    let mut updates = [0u64; 2];
    let counted = (cfg.horizon - cfg.burn_in) as f64;
    for slot in 0..cfg.horizon {
        let action = match (&run_policy, &mut baseline) {
            (Some(policy), _) => policy[state],
            (None, Some(runner)) => {
                let draw = unit_draw(cfg.master_seed, run, slot as u64, DRAW_ACTION);
                runner.decide(model.mdp, &model.view, state, draw)
            }
            (None, None) => unreachable!("decision source is policy, mixture, or baseline"),
        };
        let cost = model.mdp.cost(state, action);
        if slot >= cfg.burn_in {
            cost_sum += cost;
            let context = model.view.request_flag(state).unwrap_or(0) as usize;
            updates[context] += action as u64;
        }
        if let Some(ref mut emit) = trace {
            emit(run, state, action, cost)?;
        }
        let draw = unit_draw(cfg.master_seed, run, slot as u64, DRAW_TRANSITION);
        state = sample_successor(model.mdp, state, action, draw);
    }
    Ok(RunStats {
        cost: cost_sum / counted,
        rate0: updates[0] as f64 / counted,
        rate1: updates[1] as f64 / counted,
    })
}

fn aggregate(stats: &[RunStats]) -> SimResult {
    let n = stats.len() as f64;
    let mean = |f: &dyn Fn(&RunStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let stderr = |f: &dyn Fn(&RunStats) -> f64, mu: f64| {
        if stats.len() < 2 {
            return 0.0;
        }
        let variance = stats.iter().map(|s| (f(s) - mu).powi(2)).sum::<f64>() / (n - 1.0);
        (variance / n).sqrt()
    };
    let cost = mean(&|s: &RunStats| s.cost);
    let rate0 = mean(&|s: &RunStats| s.rate0);
    let rate1 = mean(&|s: &RunStats| s.rate1);
    SimResult {
        avg_cost: cost,
        rate0,
        rate1,
        total_rate: rate0 + rate1,
        stderr_cost: stderr(&|s: &RunStats| s.cost, cost),
        stderr_rate0: stderr(&|s: &RunStats| s.rate0, rate0),
        stderr_rate1: stderr(&|s: &RunStats| s.rate1, rate1),
    }
}

/// Simulates `n_runs` independent trajectories and averages them.
///
/// Runs are indexed deterministically; the result is a pure function of
/// `(model, source, cfg)`.
pub fn simulate(
    model: &SimModel,
    source: &DecisionSource,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    assert!(cfg.horizon >= 1 && cfg.n_runs >= 1 && cfg.burn_in < cfg.horizon, "invalid sim config");
    check_source(model, source)?;
    let mut stats = Vec::with_capacity(cfg.n_runs as usize);
    for run in 0..cfg.n_runs {
        stats.push(run_trajectory(model, source, cfg, run as u64, None)?);
    }
    Ok(aggregate(&stats))
}

/// [`simulate`], additionally dumping the first `trace_runs` runs as CSV.
///
/// Columns are `run,t,b0,b1,delta,r,action,cost` for two-rate views and
/// `run,t,b,delta,action,cost` for AoII views; token columns are left empty
/// for the chain models. Tracing does not perturb the estimates.
pub fn simulate_with_trace<W: Write>(
    model: &SimModel,
    source: &DecisionSource,
    cfg: &SimConfig,
    trace_runs: u32,
    out: &mut W,
) -> Result<SimResult, SimError> {
    assert!(cfg.horizon >= 1 && cfg.n_runs >= 1 && cfg.burn_in < cfg.horizon, "invalid sim config");
    check_source(model, source)?;
    match model.view {
        StateView::AoiiToken(_) | StateView::AoiiChain { .. } => {
            writeln!(out, "run,t,b,delta,action,cost")?
        }
        StateView::TwoRateToken(_) | StateView::TwoRateChain(_) => {
            writeln!(out, "run,t,b0,b1,delta,r,action,cost")?
        }
    }
    let mut stats = Vec::with_capacity(cfg.n_runs as usize);
    for run in 0..cfg.n_runs {
        if run < trace_runs {
            let mut slot = 0u64;
            let view = model.view;
            let mut emit = |run: u64, state: usize, action: usize, cost: f64| {
                let t = slot;
                slot += 1;
                match view {
                    StateView::AoiiToken(layout) => {
                        let (b, delta) = layout.unpack(state);
                        writeln!(out, "{run},{t},{b},{delta},{action},{cost}")
                    }
                    StateView::AoiiChain { .. } => {
                        writeln!(out, "{run},{t},,{state},{action},{cost}")
                    }
                    StateView::TwoRateToken(layout) => {
                        let (b0, b1, delta, r) = layout.unpack(state);
                        writeln!(out, "{run},{t},{b0},{b1},{delta},{r},{action},{cost}")
                    }
                    StateView::TwoRateChain(layout) => {
                        let (delta, r) = layout.unpack(state);
                        writeln!(out, "{run},{t},,,{delta},{r},{action},{cost}")
                    }
                }
            };
            stats.push(run_trajectory(model, source, cfg, run as u64, Some(&mut emit))?);
        } else {
            stats.push(run_trajectory(model, source, cfg, run as u64, None)?);
        }
    }
    Ok(aggregate(&stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aoii::{build_aoii_token_mdp, derive_chain_params, TokenParams};
    use crate::mdp::{long_run_average, rvia, SolverConfig};
    use crate::search::LagrangeVec;
    use crate::two_rate::{build_two_rate_lagrangian_mdp, build_two_rate_token_mdp, TwoRateParams};

    fn two_rate_chain_model(params: &TwoRateParams) -> (FiniteMdp, TwoRateChainLayout) {
        let mdp = build_two_rate_lagrangian_mdp(params, LagrangeVec::ZERO);
        (mdp, TwoRateChainLayout { delta_max: params.delta_max })
    }

    #[test]
    fn draws_are_deterministic_and_uniform_ish() {
        assert_eq!(unit_draw(7, 1, 2, 3), unit_draw(7, 1, 2, 3));
        assert_ne!(unit_draw(7, 1, 2, 3), unit_draw(8, 1, 2, 3));
        let n = 10_000;
        let mean: f64 =
            (0..n).map(|i| unit_draw(42, 0, i, DRAW_TRANSITION)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn never_updating_saturates_the_aoi() {
        let params = TwoRateParams::new(0.2, 0.1, 0.5, 20, 3).unwrap();
        let (mdp, layout) = two_rate_chain_model(&params);
        let model = SimModel {
            mdp: &mdp,
            view: StateView::TwoRateChain(layout),
            initial_state: layout.index(1, 0),
        };
        let source = DecisionSource::Baseline(BaselineSpec {
            kind: BaselineKind::NeverUpdate,
            alpha_min: 0.1,
            alpha_max: 0.5,
        });
        let cfg = SimConfig { horizon: 2_000, n_runs: 8, master_seed: 9, burn_in: 0 };
        let result = simulate(&model, &source, &cfg).unwrap();
        assert!(result.avg_cost > 19.5);
        assert_eq!(result.total_rate, 0.0);
    }

    #[test]
    fn greedy_spender_matches_the_arrival_rate() {
        let chain = derive_chain_params(8, 0.5, 1.0, 15).unwrap();
        let token = TokenParams::new(0.3, 4).unwrap();
        let built = build_aoii_token_mdp(&chain, &token);
        let model = SimModel {
            mdp: &built.mdp,
            view: StateView::AoiiToken(built.layout),
            initial_state: built.layout.index(0, 0),
        };
        let source = DecisionSource::Baseline(BaselineSpec {
            kind: BaselineKind::GreedyToken,
            alpha_min: 0.0,
            alpha_max: 0.0,
        });
        let cfg = SimConfig { horizon: 20_000, n_runs: 50, master_seed: 4, burn_in: 0 };
        let result = simulate(&model, &source, &cfg).unwrap();
        assert!((result.total_rate - 0.3).abs() <= 3.0 * result.stderr_rate0.max(1e-4));
        assert_eq!(result.rate1, 0.0);
    }

    #[test]
    fn simulated_policy_average_matches_exact_evaluation() {
        let chain = derive_chain_params(8, 0.5, 1.0, 20).unwrap();
        let token = TokenParams::new(0.2, 3).unwrap();
        let built = build_aoii_token_mdp(&chain, &token);
        let solved = rvia(&built.mdp, &SolverConfig::new(1e-8)).unwrap();
        let exact =
            long_run_average(&built.mdp, &solved.policy, |s, a| built.mdp.cost(s, a)).unwrap();
        let model = SimModel {
            mdp: &built.mdp,
            view: StateView::AoiiToken(built.layout),
            initial_state: built.layout.index(0, 0),
        };
        let cfg = SimConfig { horizon: 20_000, n_runs: 100, master_seed: 11, burn_in: 0 };
        let result = simulate(&model, &DecisionSource::Policy(&solved.policy), &cfg).unwrap();
        assert!(
            (result.avg_cost - exact).abs() <= 4.0 * result.stderr_cost,
            "sim {} vs exact {} (stderr {})",
            result.avg_cost,
            exact,
            result.stderr_cost
        );
    }

    #[test]
    fn uniform_baseline_fires_evenly() {
        // Pure r=0 trajectory at rate cap 1/2: the accumulator fires on
        // every second slot.
        let params = TwoRateParams::new(0.2, 0.5, 0.5, 5, 1).unwrap();
        let (mdp, layout) = two_rate_chain_model(&params);
        let spec =
            BaselineSpec { kind: BaselineKind::UniformTwoRate, alpha_min: 0.5, alpha_max: 0.5 };
        let mut runner = BaselineRunner::new(spec);
        let view = StateView::TwoRateChain(layout);
        let state = layout.index(3, 0);
        let pattern: Vec<usize> = (0..6).map(|_| runner.decide(&mdp, &view, state, 0.0)).collect();
        assert_eq!(pattern, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn random_baseline_hits_the_context_rates() {
        let params = TwoRateParams::new(0.2, 0.1, 0.5, 20, 1).unwrap();
        let (mdp, layout) = two_rate_chain_model(&params);
        let model = SimModel {
            mdp: &mdp,
            view: StateView::TwoRateChain(layout),
            initial_state: layout.index(1, 0),
        };
        let source = DecisionSource::Baseline(BaselineSpec {
            kind: BaselineKind::RandomTwoRate,
            alpha_min: 0.1,
            alpha_max: 0.5,
        });
        let cfg = SimConfig { horizon: 20_000, n_runs: 100, master_seed: 3, burn_in: 0 };
        let result = simulate(&model, &source, &cfg).unwrap();
        // rate1 estimates q * alpha_max.
        assert!((result.rate1 - 0.2 * 0.5).abs() <= 3.0 * result.stderr_rate1);
        assert!((result.rate0 - 0.8 * 0.1).abs() <= 3.0 * result.stderr_rate0);

        // The credit accumulator saturates both budgets too.
        let uniform = DecisionSource::Baseline(BaselineSpec {
            kind: BaselineKind::UniformTwoRate,
            alpha_min: 0.1,
            alpha_max: 0.5,
        });
        let result = simulate(&model, &uniform, &cfg).unwrap();
        assert!((result.rate1 - 0.2 * 0.5).abs() <= 3.0 * result.stderr_rate1.max(1e-4));
        assert!((result.rate0 - 0.8 * 0.1).abs() <= 3.0 * result.stderr_rate0.max(1e-4));
    }

    #[test]
    fn identical_seeds_reproduce_identical_results() {
        let params = TwoRateParams::new(0.3, 0.1, 0.4, 10, 2).unwrap();
        let built = build_two_rate_token_mdp(&params);
        let solved = rvia(&built.mdp, &SolverConfig::new(1e-6)).unwrap();
        let model = SimModel {
            mdp: &built.mdp,
            view: StateView::TwoRateToken(built.layout),
            initial_state: built.layout.index(0, 0, 1, 0),
        };
        let cfg = SimConfig { horizon: 5_000, n_runs: 10, master_seed: 77, burn_in: 100 };
        let a = simulate(&model, &DecisionSource::Policy(&solved.policy), &cfg).unwrap();
        let b = simulate(&model, &DecisionSource::Policy(&solved.policy), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(
            &model,
            &DecisionSource::Policy(&solved.policy),
            &SimConfig { master_seed: 78, ..cfg },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_draws_one_component_per_run() {
        // Mix "never update" with "always update" on a tiny chain; per-run
        // averages must mix the two extremes.
        let params = TwoRateParams::new(0.5, 0.2, 0.2, 8, 1).unwrap();
        let (mdp, layout) = two_rate_chain_model(&params);
        let idle: Arc<[usize]> = vec![0usize; layout.n_states()].into();
        let always: Arc<[usize]> = vec![1usize; layout.n_states()].into();
        let components = vec![(0.5, idle), (0.5, always)];
        let model = SimModel {
            mdp: &mdp,
            view: StateView::TwoRateChain(layout),
            initial_state: layout.index(1, 0),
        };
        let cfg = SimConfig { horizon: 4_000, n_runs: 60, master_seed: 5, burn_in: 0 };
        let result = simulate(&model, &DecisionSource::Mixture(&components), &cfg).unwrap();
        // Total rate sits between the components, far from both.
        assert!(result.total_rate > 0.2 && result.total_rate < 0.8);
        // The mixed average cost is near the average of the two extremes:
        // idling saturates at 8, always updating pins the AoI at 1.
        assert!((result.avg_cost - 4.5).abs() < 0.8);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let params = TwoRateParams::new(0.3, 0.1, 0.4, 5, 1).unwrap();
        let (mdp, layout) = two_rate_chain_model(&params);
        let short = vec![0usize; 3];
        let model =
            SimModel { mdp: &mdp, view: StateView::TwoRateChain(layout), initial_state: 0 };
        assert!(matches!(
            simulate(&model, &DecisionSource::Policy(&short), &SimConfig::default()),
            Err(SimError::LayoutMismatch { got: 3, .. })
        ));
    }

    #[test]
    fn trace_rows_match_the_view_schema() {
        let chain = derive_chain_params(4, 0.6, 1.0, 5).unwrap();
        let token = TokenParams::new(0.4, 2).unwrap();
        let built = build_aoii_token_mdp(&chain, &token);
        let model = SimModel {
            mdp: &built.mdp,
            view: StateView::AoiiToken(built.layout),
            initial_state: built.layout.index(0, 0),
        };
        let policy = vec![0usize; built.mdp.n_states()];
        let cfg = SimConfig { horizon: 4, n_runs: 3, master_seed: 2, burn_in: 0 };
        let mut buf = Vec::new();
        let traced =
            simulate_with_trace(&model, &DecisionSource::Policy(&policy), &cfg, 2, &mut buf)
                .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("run,t,b,delta,action,cost"));
        // Two traced runs of four slots each.
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,0,0,0,"));

        let untraced = simulate(&model, &DecisionSource::Policy(&policy), &cfg).unwrap();
        assert_eq!(traced, untraced);
    }
}
