//! Age of Incorrect Information under a single update-rate budget.
//!
//! The source is an `N`-state symmetric Markov chain that stays put with
//! probability `p_R` and jumps to each other state with probability `p_t`,
//! where `p_R + (N-1) p_t = 1`. The transmitter may push an update over a
//! Bernoulli channel with success probability `p_s`. AoII counts the slots
//! since the receiver's copy last matched the source; it resets to zero when
//! an update lands while the source holds still, or when the source happens
//! to wander back to the stored value. Conditioned on an update attempt the
//! reset probability is `beta = p_R * p_s + (1 - p_s) * p_t`, and the
//! standing assumption `p_R > p_t` makes updating worthwhile (`beta > p_t`).
//!
//! Two MDPs are built over this chain:
//!
//! - [`build_aoii_lagrangian_mdp`]: state is the AoII value alone and the
//!   update rate is priced at `lambda` per update. Feeding this into the
//!   scalar dual search recovers the exact constrained optimum.
//! - [`build_aoii_token_mdp`]: state is `(tokens, AoII)`. Tokens arrive with
//!   probability `alpha` per slot up to a cap, an update spends one, and the
//!   empty bucket masks the update action, enforcing the rate budget
//!   structurally.
//!
//! The optimal token policy is a per-bucket-level threshold in AoII;
//! [`extract_threshold_profile`] verifies that shape and [`dv_profile`]
//! exposes the underlying monotone action-preference function.

use std::sync::Arc;

use thiserror::Error;

use crate::mdp::{rvia, stationary_distribution, FiniteMdp, MdpBuilder, SolverConfig};
use crate::search::{
    bisection_1d, FnScalarOracle, ScalarDualOracle, ScalarSample, SearchError, TwoPolicyMix,
};

/// Parameter validation failures for the AoII chain.
#[derive(Debug, Error)]
pub enum AoiiParamError {
    #[error("need at least two source states, got {0}")]
    TooFewStates(u32),
    #[error("stay probability {p_r} must exceed the switch probability {p_t}")]
    StayNotDominant { p_r: f64, p_t: f64 },
    #[error("probability {name} = {value} outside its valid range")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("delta_max must be at least 1")]
    DeltaMaxZero,
}

/// Source-chain and channel parameters for the AoII model.
#[derive(Debug, Clone, Copy)]
pub struct AoiiParams {
    /// Number of source states (N ≥ 2).
    pub n_source_states: u32,
    /// Probability the source keeps its value for a slot (p_R).
    pub stay_prob: f64,
    /// Probability of moving to one specific other state (p_t, derived).
    pub switch_prob: f64,
    /// Channel success probability (p_s).
    pub success_prob: f64,
    /// Channel failure probability (1 - p_s).
    pub failure_prob: f64,
    /// Probability an update attempt resets AoII to zero (beta).
    pub resync_prob: f64,
    /// Cap on the AoII value; growth saturates here.
    pub delta_max: u32,
}

/// Derives the dependent chain quantities from the free parameters.
///
/// `switch_prob` is `(1 - stay_prob) / (n - 1)` and the update-reset
/// probability is `beta = stay_prob * success_prob + failure_prob *
/// switch_prob`. Rejects parameter sets where staying does not strictly
/// dominate switching, which would make never updating optimal.
pub fn derive_chain_params(
    n_source_states: u32,
    stay_prob: f64,
    success_prob: f64,
    delta_max: u32,
) -> Result<AoiiParams, AoiiParamError> {
    if n_source_states < 2 {
        return Err(AoiiParamError::TooFewStates(n_source_states));
    }
    if !(0.0..1.0).contains(&stay_prob) || stay_prob <= 0.0 {
        return Err(AoiiParamError::ProbabilityOutOfRange { name: "stay_prob", value: stay_prob });
    }
    if !(success_prob > 0.0 && success_prob <= 1.0) {
        return Err(AoiiParamError::ProbabilityOutOfRange {
            name: "success_prob",
            value: success_prob,
        });
    }
    if delta_max == 0 {
        return Err(AoiiParamError::DeltaMaxZero);
    }
    let switch_prob = (1.0 - stay_prob) / (n_source_states - 1) as f64;
    if stay_prob <= switch_prob {
        return Err(AoiiParamError::StayNotDominant { p_r: stay_prob, p_t: switch_prob });
    }
    let failure_prob = 1.0 - success_prob;
    let resync_prob = stay_prob * success_prob + failure_prob * switch_prob;
    Ok(AoiiParams {
        n_source_states,
        stay_prob,
        switch_prob,
        success_prob,
        failure_prob,
        resync_prob,
        delta_max,
    })
}

/// Token-bucket parameters shared by the token-based models.
#[derive(Debug, Clone, Copy)]
pub struct TokenParams {
    /// Per-slot token arrival probability; equals the update-rate budget.
    pub arrival_rate: f64,
    /// Bucket capacity; arrivals beyond it are discarded.
    pub capacity: u32,
}

impl TokenParams {
    pub fn new(arrival_rate: f64, capacity: u32) -> Result<Self, AoiiParamError> {
        if !(arrival_rate > 0.0 && arrival_rate < 1.0) {
            return Err(AoiiParamError::ProbabilityOutOfRange {
                name: "arrival_rate",
                value: arrival_rate,
            });
        }
        if capacity == 0 {
            return Err(AoiiParamError::DeltaMaxZero);
        }
        Ok(Self { arrival_rate, capacity })
    }
}

/// Index mapping between `(tokens, aoii)` pairs and flat state ids.
///
/// States are laid out row-major with the token count outermost:
/// `index = b * (delta_max + 1) + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AoiiTokenLayout {
    pub b_max: u32,
    pub delta_max: u32,
}

impl AoiiTokenLayout {
    pub fn n_states(&self) -> usize {
        (self.b_max as usize + 1) * (self.delta_max as usize + 1)
    }

    pub fn index(&self, tokens: u32, delta: u32) -> usize {
        debug_assert!(tokens <= self.b_max && delta <= self.delta_max);
        tokens as usize * (self.delta_max as usize + 1) + delta as usize
    }

    /// Inverse of [`Self::index`].
    pub fn unpack(&self, index: usize) -> (u32, u32) {
        let width = self.delta_max as usize + 1;
        ((index / width) as u32, (index % width) as u32)
    }
}

/// The token-based AoII MDP plus the metadata needed to interpret it.
#[derive(Debug, Clone)]
pub struct AoiiTokenModel {
    pub mdp: FiniteMdp,
    pub layout: AoiiTokenLayout,
    pub chain: AoiiParams,
    pub token: TokenParams,
}

/// AoII successor distribution conditioned on the action, before tokens are
/// attached: pairs of (next delta, probability).
fn aoii_chain_step(p: &AoiiParams, delta: u32, update: bool) -> [(u32, f64); 2] {
    let grown = (delta + 1).min(p.delta_max);
    if delta == 0 {
        // The action is irrelevant while source and receiver agree.
        [(0, p.stay_prob), (1, 1.0 - p.stay_prob)]
    } else if update {
        [(0, p.resync_prob), (grown, 1.0 - p.resync_prob)]
    } else {
        [(0, p.switch_prob), (grown, 1.0 - p.switch_prob)]
    }
}

/// Unconstrained penalized chain: state is the AoII value, cost is
/// `delta + lambda * action`, and both actions are always available.
pub fn build_aoii_lagrangian_mdp(p: &AoiiParams, lambda: f64) -> FiniteMdp {
    assert!(lambda >= 0.0, "multiplier must be nonnegative");
    let n = p.delta_max as usize + 1;
    let mut b = MdpBuilder::new(n, 2);
    for delta in 0..=p.delta_max {
        for action in 0..2usize {
            let row: Vec<(usize, f64)> = aoii_chain_step(p, delta, action == 1)
                .iter()
                .map(|&(d, prob)| (d as usize, prob))
                .collect();
            let cost = delta as f64 + lambda * action as f64;
            b.set(delta as usize, action, cost, &row);
        }
    }
    b.build().expect("AoII chain rows are normalized by construction")
}

/// Token-based AoII MDP over `(tokens, aoii)` states.
///
/// Updating is masked out at zero tokens. Transitions factor into the token
/// evolution (arrival with probability `alpha`, saturating at the cap, one
/// token spent per update) and the AoII chain step; the cost is the AoII
/// value itself.
pub fn build_aoii_token_mdp(chain: &AoiiParams, token: &TokenParams) -> AoiiTokenModel {
    let layout = AoiiTokenLayout { b_max: token.capacity, delta_max: chain.delta_max };
    let alpha = token.arrival_rate;
    let mut b = MdpBuilder::new(layout.n_states(), 2);
    for tokens in 0..=token.capacity {
        for delta in 0..=chain.delta_max {
            let state = layout.index(tokens, delta);
            for action in 0..2u32 {
                if action == 1 && tokens == 0 {
                    continue;
                }
                let spent = tokens - action;
                let gained = (spent + 1).min(token.capacity);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(next_delta, chain_prob) in &aoii_chain_step(chain, delta, action == 1) {
                    row.push((layout.index(gained, next_delta), alpha * chain_prob));
                    row.push((layout.index(spent, next_delta), (1.0 - alpha) * chain_prob));
                }
                b.set(state, action as usize, delta as f64, &row);
            }
        }
    }
    let mdp = b.build().expect("token rows are normalized by construction");
    AoiiTokenModel { mdp, layout, chain: *chain, token: *token }
}

/// Result of checking a token-model policy for threshold structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThresholdCheck {
    /// `profile[b - 1]` is the smallest AoII at which the policy updates with
    /// `b` tokens; `delta_max + 1` encodes "never updates at this level".
    Threshold { profile: Vec<u32> },
    /// The policy updates at `update_at` but idles at the larger `idle_at`.
    NotThreshold { tokens: u32, update_at: u32, idle_at: u32 },
}

/// Verifies that `policy` is a threshold policy in the AoII value for every
/// positive token level, returning either the threshold profile or a
/// monotonicity violation witness.
pub fn extract_threshold_profile(policy: &[usize], layout: &AoiiTokenLayout) -> ThresholdCheck {
    assert_eq!(policy.len(), layout.n_states(), "policy length mismatch");
    let mut profile = Vec::with_capacity(layout.b_max as usize);
    for tokens in 1..=layout.b_max {
        let mut first_update: Option<u32> = None;
        for delta in 0..=layout.delta_max {
            let acts = policy[layout.index(tokens, delta)] == 1;
            match (first_update, acts) {
                (None, true) => first_update = Some(delta),
                (Some(at), false) => {
                    return ThresholdCheck::NotThreshold {
                        tokens,
                        update_at: at,
                        idle_at: delta,
                    }
                }
                _ => {}
            }
        }
        profile.push(first_update.unwrap_or(layout.delta_max + 1));
    }
    ThresholdCheck::Threshold { profile }
}

/// Action-preference profile `DV(b, delta) = V1 - V0` along the AoII axis at
/// token level `b`, where `Va` is the expected next-slot value under action
/// `a`. Negative values mean updating is preferred.
///
/// At `delta = 0` the chain component is action-independent, so the entry
/// reduces to the opportunity cost of spending a token while in sync; it is
/// nonnegative (idling is optimal there) and dominates the rest of the
/// profile, which is nonincreasing in the AoII value.
pub fn dv_profile(model: &AoiiTokenModel, values: &[f64], tokens: u32) -> Vec<f64> {
    assert!(tokens >= 1, "the update action is masked at zero tokens");
    assert_eq!(values.len(), model.layout.n_states(), "value vector length mismatch");
    let mut out = Vec::with_capacity(model.layout.delta_max as usize + 1);
    for delta in 0..=model.layout.delta_max {
        let state = model.layout.index(tokens, delta);
        let expected = |action: usize| -> f64 {
            model
                .mdp
                .successors(state, action)
                .iter()
                .map(|&(succ, p)| p * values[succ])
                .sum()
        };
        out.push(expected(1) - expected(0));
    }
    out
}

/// Serializes a token-model policy as CSV with columns `b,delta,action`,
/// one row per state in layout order.
pub fn write_token_policy_csv<W: std::io::Write>(
    policy: &[usize],
    layout: &AoiiTokenLayout,
    out: &mut W,
) -> std::io::Result<()> {
    assert_eq!(policy.len(), layout.n_states(), "policy length mismatch");
    writeln!(out, "b,delta,action")?;
    for (state, &action) in policy.iter().enumerate() {
        let (b, delta) = layout.unpack(state);
        writeln!(out, "{b},{delta},{action}")?;
    }
    Ok(())
}

/// Serializes a chain policy as CSV with columns `delta,action`.
pub fn write_chain_policy_csv<W: std::io::Write>(
    policy: &[usize],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "delta,action")?;
    for (delta, &action) in policy.iter().enumerate() {
        writeln!(out, "{delta},{action}")?;
    }
    Ok(())
}

/// Dual oracle for the single rate budget: maps a multiplier to the
/// λ-optimal chain policy with its exact update rate and AoII average.
pub fn rate_dual_oracle(
    chain: AoiiParams,
    alpha: f64,
    solver: SolverConfig,
) -> impl ScalarDualOracle {
    FnScalarOracle::new(move |lambda: f64| {
        let mdp = build_aoii_lagrangian_mdp(&chain, lambda);
        let solved = rvia(&mdp, &solver)?;
        let mu = stationary_distribution(&mdp, &solved.policy)?;
        let mut rate = 0.0;
        let mut cost = 0.0;
        for (state, &weight) in mu.iter().enumerate() {
            rate += weight * solved.policy[state] as f64;
            cost += weight * state as f64;
        }
        Ok(ScalarSample { policy: solved.policy.into(), slack: rate - alpha, cost })
    })
}

/// Exact solution of the rate-constrained AoII problem.
#[derive(Debug, Clone)]
pub enum RateConstrainedSolution {
    /// The budget binds: randomize between the two policies bracketing it.
    Mixed(TwoPolicyMix),
    /// The unpenalized optimum already fits the budget.
    Unconstrained(Arc<ScalarSample>),
}

impl RateConstrainedSolution {
    pub fn average_cost(&self) -> f64 {
        match self {
            Self::Mixed(mix) => mix.average_cost(),
            Self::Unconstrained(sample) => sample.cost,
        }
    }

    /// Signed slack against the budget; zero when the budget binds.
    pub fn slack(&self) -> f64 {
        match self {
            Self::Mixed(mix) => mix.mixed_slack(),
            Self::Unconstrained(sample) => sample.slack,
        }
    }

    pub fn mixture(&self) -> Vec<(f64, Arc<[usize]>)> {
        match self {
            Self::Mixed(mix) => mix.mixture(),
            Self::Unconstrained(sample) => vec![(1.0, Arc::clone(&sample.policy))],
        }
    }
}

/// Solves the constrained AoII problem by scalar dual bisection.
///
/// The multiplier ceiling starts at `10 * delta_max` and doubles while the
/// λ-optimal policy still violates the budget there. A budget slack at
/// λ = 0 means the constraint never binds and the unpenalized optimum is
/// returned unmixed.
pub fn solve_rate_constrained(
    chain: &AoiiParams,
    alpha: f64,
    solver: &SolverConfig,
    epsilon_lambda: f64,
) -> Result<RateConstrainedSolution, SearchError> {
    let mut oracle = rate_dual_oracle(*chain, alpha, *solver);
    let mut lambda_hi = 10.0 * chain.delta_max as f64;
    for _ in 0..8 {
        match bisection_1d(&mut oracle, lambda_hi, epsilon_lambda) {
            Ok(mix) => return Ok(RateConstrainedSolution::Mixed(mix)),
            Err(SearchError::InvalidBracket { c_at_hi: None, .. }) => {
                let sample = oracle.evaluate(0.0)?;
                return Ok(RateConstrainedSolution::Unconstrained(sample));
            }
            Err(SearchError::InvalidBracket { c_at_hi: Some(_), .. }) => lambda_hi *= 2.0,
            Err(other) => return Err(other),
        }
    }
    Err(SearchError::InvalidBracket { c_at_zero: f64::NAN, c_at_hi: Some(f64::NAN) })
}
