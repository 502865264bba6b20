//! Age of Information with separate rate budgets for requested and
//! unrequested slots.
//!
//! A pull-capable receiver raises a request flag `r(t)` (i.i.d. Bernoulli
//! with parameter `q`). The scheduler may update in any slot, but the
//! long-run update rate is budgeted separately per context: at most
//! `alpha0 = (1-q) * alpha_min` of all slots may carry an update while
//! `r = 0`, and at most `alpha1 = q * alpha_max` while `r = 1`. The forward
//! channel is error-free with one slot of lag, so AoI is `1` the slot after
//! an update and otherwise grows by one up to a cap. The per-slot cost is
//! the AoI itself.
//!
//! Two MDPs are built:
//!
//! - [`build_two_rate_token_mdp`]: state `(b0, b1, delta, r)` with one token
//!   bucket per context. A bucket only moves in its own context's slots:
//!   tokens arrive with probability `alpha_min` while `r = 0` (filling `b0`)
//!   and `alpha_max` while `r = 1` (filling `b1`), and an update spends from
//!   the active context's bucket. Empty buckets mask the update action.
//! - [`build_two_rate_lagrangian_mdp`]: the token-free chain on `(delta, r)`
//!   with the two rates priced by a multiplier pair. This is the per-λ inner
//!   problem of the dual search; [`constraint_values`] measures a chain
//!   policy's signed slack against both budgets.

use std::io::{self, Write};

use thiserror::Error;

use crate::mdp::{long_run_average, rvia, EvalError, FiniteMdp, MdpBuilder, SolverConfig};
use crate::search::{
    solve_two_constraint_cmdp, CmdpSolution, DualOracle, DualSample, FnDualOracle, LagrangeVec,
    SearchConfig, SearchError,
};

/// Parameter validation failures for the two-rate model.
#[derive(Debug, Error)]
pub enum TwoRateParamError {
    #[error("request probability q = {0} must lie strictly inside (0, 1)")]
    RequestProbOutOfRange(f64),
    #[error("rate caps must satisfy 0 < alpha_min <= alpha_max < 1, got ({0}, {1})")]
    BadRateCaps(f64, f64),
    #[error("delta_max and b_max must be at least 1")]
    EmptyStateSpace,
}

/// Model parameters for the two-rate AoI problem.
#[derive(Debug, Clone, Copy)]
pub struct TwoRateParams {
    /// Per-slot request probability (q).
    pub request_prob: f64,
    /// Update-rate cap while no request is pending.
    pub alpha_min: f64,
    /// Update-rate cap while a request is pending.
    pub alpha_max: f64,
    /// AoI cap.
    pub delta_max: u32,
    /// Token bucket capacity (shared by both buckets).
    pub b_max: u32,
}

impl TwoRateParams {
    pub fn new(
        request_prob: f64,
        alpha_min: f64,
        alpha_max: f64,
        delta_max: u32,
        b_max: u32,
    ) -> Result<Self, TwoRateParamError> {
        if !(request_prob > 0.0 && request_prob < 1.0) {
            return Err(TwoRateParamError::RequestProbOutOfRange(request_prob));
        }
        if !(alpha_min > 0.0 && alpha_min <= alpha_max && alpha_max < 1.0) {
            return Err(TwoRateParamError::BadRateCaps(alpha_min, alpha_max));
        }
        if delta_max == 0 || b_max == 0 {
            return Err(TwoRateParamError::EmptyStateSpace);
        }
        Ok(Self { request_prob, alpha_min, alpha_max, delta_max, b_max })
    }

    /// Budget on updates during `r = 0` slots, counted over all slots.
    pub fn alpha0(&self) -> f64 {
        (1.0 - self.request_prob) * self.alpha_min
    }

    /// Budget on updates during `r = 1` slots, counted over all slots.
    pub fn alpha1(&self) -> f64 {
        self.request_prob * self.alpha_max
    }
}

/// Index mapping for the token model, row-major in `(b0, b1, delta, r)` with
/// `delta` starting at 1: `index = ((b0*(b_max+1) + b1)*delta_max + delta-1)*2 + r`.
///
/// The order is fixed so serialized policies are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoRateLayout {
    pub b_max: u32,
    pub delta_max: u32,
}

impl TwoRateLayout {
    pub fn n_states(&self) -> usize {
        let b = self.b_max as usize + 1;
        b * b * self.delta_max as usize * 2
    }

    pub fn index(&self, b0: u32, b1: u32, delta: u32, r: u8) -> usize {
        debug_assert!(b0 <= self.b_max && b1 <= self.b_max);
        debug_assert!((1..=self.delta_max).contains(&delta) && r <= 1);
        let b = self.b_max as usize + 1;
        (((b0 as usize * b + b1 as usize) * self.delta_max as usize) + delta as usize - 1) * 2
            + r as usize
    }

    /// Inverse of [`Self::index`].
    pub fn unpack(&self, index: usize) -> (u32, u32, u32, u8) {
        let r = (index % 2) as u8;
        let rest = index / 2;
        let delta = (rest % self.delta_max as usize) as u32 + 1;
        let rest = rest / self.delta_max as usize;
        let b = self.b_max as usize + 1;
        let b1 = (rest % b) as u32;
        let b0 = (rest / b) as u32;
        (b0, b1, delta, r)
    }
}

/// Index mapping for the token-free chain: `index = (delta - 1) * 2 + r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoRateChainLayout {
    pub delta_max: u32,
}

impl TwoRateChainLayout {
    pub fn n_states(&self) -> usize {
        self.delta_max as usize * 2
    }

    pub fn index(&self, delta: u32, r: u8) -> usize {
        debug_assert!((1..=self.delta_max).contains(&delta) && r <= 1);
        (delta as usize - 1) * 2 + r as usize
    }

    pub fn unpack(&self, index: usize) -> (u32, u8) {
        ((index / 2) as u32 + 1, (index % 2) as u8)
    }
}

/// The token-based two-rate MDP plus its layout and parameters.
#[derive(Debug, Clone)]
pub struct TwoRateTokenModel {
    pub mdp: FiniteMdp,
    pub layout: TwoRateLayout,
    pub params: TwoRateParams,
}

/// Token-based two-rate MDP over `(b0, b1, delta, r)`.
///
/// Updating is masked when the active context's bucket is empty. Each
/// transition touches at most one bucket (the active context's), steps the
/// AoI deterministically given the action, and resamples the request flag.
pub fn build_two_rate_token_mdp(p: &TwoRateParams) -> TwoRateTokenModel {
    let layout = TwoRateLayout { b_max: p.b_max, delta_max: p.delta_max };
    let q = p.request_prob;
    let mut builder = MdpBuilder::new(layout.n_states(), 2);
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
    for b0 in 0..=p.b_max {
        for b1 in 0..=p.b_max {
            for delta in 1..=p.delta_max {
                for r in 0..2u8 {
                    let state = layout.index(b0, b1, delta, r);
                    for action in 0..2u32 {
                        let blocked = (r == 0 && b0 == 0) || (r == 1 && b1 == 0);
                        if action == 1 && blocked {
                            continue;
                        }
                        let next_delta =
                            if action == 1 { 1 } else { (delta + 1).min(p.delta_max) };
                        // The active bucket spends and may refill; the idle
                        // context's bucket is frozen.
                        let (arrival, active) =
                            if r == 0 { (p.alpha_min, b0) } else { (p.alpha_max, b1) };
                        let spent = active - action;
                        let gained = (spent + 1).min(p.b_max);
                        let branches = [(gained, arrival), (spent, 1.0 - arrival)];
                        row.clear();
                        for &(bucket, bucket_prob) in &branches {
                            let (nb0, nb1) = if r == 0 { (bucket, b1) } else { (b0, bucket) };
                            row.push((layout.index(nb0, nb1, next_delta, 1), bucket_prob * q));
                            row.push((
                                layout.index(nb0, nb1, next_delta, 0),
                                bucket_prob * (1.0 - q),
                            ));
                        }
                        builder.set(state, action as usize, delta as f64, &row);
                    }
                }
            }
        }
    }
    let mdp = builder.build().expect("two-rate token rows are normalized by construction");
    TwoRateTokenModel { mdp, layout, params: *p }
}

/// Token-free penalized chain on `(delta, r)` with cost
/// `delta + lambda0 * (1-r) * a + lambda1 * r * a`. Both actions are always
/// available; this is the inner problem of the Lagrangian dual.
pub fn build_two_rate_lagrangian_mdp(p: &TwoRateParams, lambda: LagrangeVec) -> FiniteMdp {
    assert!(lambda.lambda0 >= 0.0 && lambda.lambda1 >= 0.0, "multipliers must be nonnegative");
    let layout = TwoRateChainLayout { delta_max: p.delta_max };
    let q = p.request_prob;
    let mut builder = MdpBuilder::new(layout.n_states(), 2);
    for delta in 1..=p.delta_max {
        for r in 0..2u8 {
            let state = layout.index(delta, r);
            for action in 0..2u32 {
                let next_delta = if action == 1 { 1 } else { (delta + 1).min(p.delta_max) };
                let row = [
                    (layout.index(next_delta, 1), q),
                    (layout.index(next_delta, 0), 1.0 - q),
                ];
                let price = if r == 1 { lambda.lambda1 } else { lambda.lambda0 };
                let cost = delta as f64 + price * action as f64;
                builder.set(state, action as usize, cost, &row);
            }
        }
    }
    builder.build().expect("two-rate chain rows are normalized by construction")
}

/// Signed slack of a policy against the two rate budgets; nonpositive values
/// mean the budget is met.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintEval {
    /// Long-run rate of updates in `r = 0` slots minus `alpha0`.
    pub c0: f64,
    /// Long-run rate of updates in `r = 1` slots minus `alpha1`.
    pub c1: f64,
}

/// Exact constraint slacks of a policy on the token-free chain.
pub fn constraint_values(p: &TwoRateParams, policy: &[usize]) -> Result<ConstraintEval, EvalError> {
    let mdp = build_two_rate_lagrangian_mdp(p, LagrangeVec::ZERO);
    let layout = TwoRateChainLayout { delta_max: p.delta_max };
    let rate = |want_r: u8| {
        long_run_average(&mdp, policy, |s, a| {
            if layout.unpack(s).1 == want_r {
                a as f64
            } else {
                0.0
            }
        })
    };
    Ok(ConstraintEval { c0: rate(0)? - p.alpha0(), c1: rate(1)? - p.alpha1() })
}

/// Threshold-structure check for token-model policies, per `(b0, b1, r)`
/// group along the AoI axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TwoRateThresholdCheck {
    /// `profile[(b0*(b_max+1) + b1)*2 + r]` is the smallest AoI at which the
    /// group updates; `delta_max + 1` encodes "never".
    Threshold { profile: Vec<u32> },
    NotThreshold { b0: u32, b1: u32, r: u8, update_at: u32, idle_at: u32 },
}

/// Verifies the optimal-policy shape: within each `(b0, b1, r)` group the
/// policy must switch from idle to update at most once along the AoI axis.
pub fn extract_threshold_profile(
    policy: &[usize],
    layout: &TwoRateLayout,
) -> TwoRateThresholdCheck {
    assert_eq!(policy.len(), layout.n_states(), "policy length mismatch");
    let b = layout.b_max as usize + 1;
    let mut profile = Vec::with_capacity(b * b * 2);
    for b0 in 0..=layout.b_max {
        for b1 in 0..=layout.b_max {
            for r in 0..2u8 {
                let mut first_update: Option<u32> = None;
                for delta in 1..=layout.delta_max {
                    let acts = policy[layout.index(b0, b1, delta, r)] == 1;
                    match (first_update, acts) {
                        (None, true) => first_update = Some(delta),
                        (Some(at), false) => {
                            return TwoRateThresholdCheck::NotThreshold {
                                b0,
                                b1,
                                r,
                                update_at: at,
                                idle_at: delta,
                            }
                        }
                        _ => {}
                    }
                }
                profile.push(first_update.unwrap_or(layout.delta_max + 1));
            }
        }
    }
    TwoRateThresholdCheck::Threshold { profile }
}

/// Serializes a token-model policy as CSV with columns
/// `b0,b1,delta,r,action`, one row per state in layout order.
pub fn write_token_policy_csv<W: Write>(
    policy: &[usize],
    layout: &TwoRateLayout,
    out: &mut W,
) -> io::Result<()> {
    assert_eq!(policy.len(), layout.n_states(), "policy length mismatch");
    writeln!(out, "b0,b1,delta,r,action")?;
    for (state, &action) in policy.iter().enumerate() {
        let (b0, b1, delta, r) = layout.unpack(state);
        writeln!(out, "{b0},{b1},{delta},{r},{action}")?;
    }
    Ok(())
}

/// Serializes a chain policy as CSV with columns `delta,r,action`.
pub fn write_chain_policy_csv<W: Write>(
    policy: &[usize],
    layout: &TwoRateChainLayout,
    out: &mut W,
) -> io::Result<()> {
    assert_eq!(policy.len(), layout.n_states(), "policy length mismatch");
    writeln!(out, "delta,r,action")?;
    for (state, &action) in policy.iter().enumerate() {
        let (delta, r) = layout.unpack(state);
        writeln!(out, "{delta},{r},{action}")?;
    }
    Ok(())
}

/// Dual oracle for the two-rate problem: maps a multiplier pair to the
/// λ-optimal chain policy with its exact slacks and AoI average.
pub fn dual_oracle(params: TwoRateParams, solver: SolverConfig) -> impl DualOracle {
    let layout = TwoRateChainLayout { delta_max: params.delta_max };
    FnDualOracle::new(move |lambda: LagrangeVec| {
        let mdp = build_two_rate_lagrangian_mdp(&params, lambda);
        let solved = rvia(&mdp, &solver)?;
        let mu = crate::mdp::stationary_distribution(&mdp, &solved.policy)?;
        let mut cost = 0.0;
        let mut rate = [0.0f64; 2];
        for (state, &weight) in mu.iter().enumerate() {
            let (delta, r) = layout.unpack(state);
            cost += weight * delta as f64;
            rate[r as usize] += weight * solved.policy[state] as f64;
        }
        Ok(DualSample {
            policy: solved.policy.into(),
            slack: ConstraintEval {
                c0: rate[0] - params.alpha0(),
                c1: rate[1] - params.alpha1(),
            },
            cost,
        })
    })
}

/// Exact constrained solution of the two-rate AoI problem via triangle
/// bisection and policy mixing, with the multiplier scan ceiling at
/// `10 * delta_max`.
pub fn solve_constrained(
    params: &TwoRateParams,
    solver: &SolverConfig,
    search: &SearchConfig,
) -> Result<CmdpSolution, SearchError> {
    let mut oracle = dual_oracle(*params, *solver);
    solve_two_constraint_cmdp(&mut oracle, 10.0 * params.delta_max as f64, search)
}
