//! Exact constrained solutions via Lagrangian duality.
//!
//! Pricing the rate constraints into the cost turns the constrained problem
//! into a family of unconstrained MDPs indexed by the multiplier(s). The dual
//! search then looks for multipliers whose optimal policy meets the budgets
//! with equality:
//!
//! - One constraint: the constraint slack of the λ-optimal policy is
//!   nonincreasing in λ, so [`bisection_1d`] brackets the crossing and mixes
//!   the two policies straddling it ([`TwoPolicyMix`]) to land exactly on the
//!   budget.
//! - Two constraints: scalar bisection does not apply. [`triangle_bisection`]
//!   generalizes it: a triangle in multiplier space is repeatedly split at
//!   the midpoint of its longest edge, keeping the half whose image under the
//!   constraint map contains the origin ([`point_in_triangle`]). Because the
//!   action space is discrete, the λ-optimal policy rarely hits both budgets
//!   exactly; [`neighbor_policies`] finds the four nearest policies realizing
//!   every violation/satisfaction sign pattern and [`solve_mixing`] computes
//!   the randomization ([`MixedPolicy`]) that zeroes both slacks.
//!
//! Every λ is solved at most once: oracles cache their policies keyed by the
//! multiplier rounded to twelve decimals, so repeated vertices cost nothing
//! and return bitwise-identical policies.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::mdp::{EvalError, SolveError};
use crate::two_rate::ConstraintEval;

/// Sign tolerance when classifying constraint slacks.
pub const SIGN_TOL: f64 = 1e-9;

/// Collinearity tolerance for the signed-area containment test.
const GEOM_TOL: f64 = 1e-12;

/// Scaling budget per sign pattern in [`neighbor_policies`].
const PATTERN_BUDGET: usize = 200;

/// Dual-search failures.
#[derive(Debug, Error)]
pub enum SearchError {
    #[error("image triangle is degenerate (vertices collinear within {GEOM_TOL})")]
    DegenerateTriangle,
    #[error("quadrant scan exhausted without realizing sign patterns {missing:?}")]
    QuadrantNotFound { missing: Vec<&'static str> },
    #[error("initial point for pattern {pattern} has slack ({c0}, {c1})")]
    InvalidInit { pattern: &'static str, c0: f64, c1: f64 },
    #[error("triangle bisection did not converge within {0} outer iterations")]
    MaxIterations(usize),
    #[error("no neighbor policy realizes sign pattern {pattern} within {budget} scalings")]
    PatternNotFound { pattern: &'static str, budget: usize },
    #[error("mixing equations unsolved in [0,1]^2; best residual {best_residual}")]
    NoMixSolution { best_residual: f64 },
    #[error("bisection bracket invalid: c(0) = {c_at_zero}, c(lambda_hi) = {c_at_hi:?}")]
    InvalidBracket { c_at_zero: f64, c_at_hi: Option<f64> },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A pair of Lagrange multipliers, one per rate constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangeVec {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl LagrangeVec {
    pub const ZERO: Self = Self { lambda0: 0.0, lambda1: 0.0 };

    pub fn new(lambda0: f64, lambda1: f64) -> Self {
        Self { lambda0, lambda1 }
    }

    pub fn distance(self, other: Self) -> f64 {
        let d0 = self.lambda0 - other.lambda0;
        let d1 = self.lambda1 - other.lambda1;
        (d0 * d0 + d1 * d1).sqrt()
    }

    fn midpoint(self, other: Self) -> Self {
        Self::new(0.5 * (self.lambda0 + other.lambda0), 0.5 * (self.lambda1 + other.lambda1))
    }
}

fn centroid(t: [LagrangeVec; 3]) -> LagrangeVec {
    LagrangeVec::new(
        (t[0].lambda0 + t[1].lambda0 + t[2].lambda0) / 3.0,
        (t[0].lambda1 + t[1].lambda1 + t[2].lambda1) / 3.0,
    )
}

/// One dual evaluation: the λ-optimal policy, its exact constraint slacks,
/// and its exact raw average cost (multipliers excluded).
#[derive(Debug, Clone)]
pub struct DualSample {
    pub policy: Arc<[usize]>,
    pub slack: ConstraintEval,
    pub cost: f64,
}

impl DualSample {
    /// Value of the Lagrangian dual function at `lambda` for this policy:
    /// raw cost plus multiplier-weighted slacks.
    pub fn dual_value(&self, lambda: LagrangeVec) -> f64 {
        self.cost + lambda.lambda0 * self.slack.c0 + lambda.lambda1 * self.slack.c1
    }
}

/// The inner problem of the two-constraint dual: maps a multiplier pair to
/// the λ-optimal policy and its exact evaluation.
pub trait DualOracle {
    fn evaluate(&mut self, lambda: LagrangeVec) -> Result<Arc<DualSample>, SearchError>;
}

fn cache_key(value: f64) -> i64 {
    (value * 1e12).round() as i64
}

/// Caching wrapper turning a closure into a [`DualOracle`]. Keys are the
/// multipliers rounded to twelve decimals; hits return the identical sample.
pub struct FnDualOracle<F> {
    solve: F,
    cache: HashMap<(i64, i64), Arc<DualSample>>,
    fresh: usize,
}

impl<F> FnDualOracle<F>
where
    F: FnMut(LagrangeVec) -> Result<DualSample, SearchError>,
{
    pub fn new(solve: F) -> Self {
        Self { solve, cache: HashMap::new(), fresh: 0 }
    }

    /// Number of cache-missing evaluations so far.
    pub fn fresh_evaluations(&self) -> usize {
        self.fresh
    }
}

impl<F> DualOracle for FnDualOracle<F>
where
    F: FnMut(LagrangeVec) -> Result<DualSample, SearchError>,
{
    fn evaluate(&mut self, lambda: LagrangeVec) -> Result<Arc<DualSample>, SearchError> {
        let key = (cache_key(lambda.lambda0), cache_key(lambda.lambda1));
        if let Some(hit) = self.cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let sample = Arc::new((self.solve)(lambda)?);
        self.fresh += 1;
        self.cache.insert(key, Arc::clone(&sample));
        Ok(sample)
    }
}

/// Whether the origin lies inside or on the boundary of the triangle with
/// vertices `fa`, `fb`, `fc`, by the three-signed-areas test.
///
/// Errors if the vertices are collinear within 1e-12, in which case
/// containment is not decidable robustly.
pub fn point_in_triangle(fa: [f64; 2], fb: [f64; 2], fc: [f64; 2]) -> Result<bool, SearchError> {
    fn cross(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    }
    if cross(fa, fb, fc).abs() <= GEOM_TOL {
        return Err(SearchError::DegenerateTriangle);
    }
    let origin = [0.0, 0.0];
    let d = [cross(fa, fb, origin), cross(fb, fc, origin), cross(fc, fa, origin)];
    let has_pos = d.iter().any(|&x| x > GEOM_TOL);
    let has_neg = d.iter().any(|&x| x < -GEOM_TOL);
    Ok(!(has_pos && has_neg))
}

/// Sign patterns of the constraint slacks, in the fixed order used for
/// mixing: `(c0, c1)` signs `(+,+)`, `(+,-)`, `(-,+)`, `(-,-)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern {
    PlusPlus,
    PlusMinus,
    MinusPlus,
    MinusMinus,
}

impl Pattern {
    const ALL: [Pattern; 4] = [Self::PlusPlus, Self::PlusMinus, Self::MinusPlus, Self::MinusMinus];

    fn name(self) -> &'static str {
        match self {
            Self::PlusPlus => "(+,+)",
            Self::PlusMinus => "(+,-)",
            Self::MinusPlus => "(-,+)",
            Self::MinusMinus => "(-,-)",
        }
    }

    /// Wanted signs per component: `true` means the slack should be `>= 0`.
    fn wants(self) -> [bool; 2] {
        match self {
            Self::PlusPlus => [true, true],
            Self::PlusMinus => [true, false],
            Self::MinusPlus => [false, true],
            Self::MinusMinus => [false, false],
        }
    }

    fn matches(self, slack: ConstraintEval) -> bool {
        let ok = |value: f64, plus: bool| {
            if plus {
                value >= -SIGN_TOL
            } else {
                value <= SIGN_TOL
            }
        };
        let wants = self.wants();
        ok(slack.c0, wants[0]) && ok(slack.c1, wants[1])
    }
}

/// The four starting multipliers required by the triangle bisection, one per
/// slack sign pattern.
#[derive(Debug, Clone, Copy)]
pub struct QuadrantPoints {
    /// Both budgets violated (λ_A).
    pub plus_plus: LagrangeVec,
    /// Both budgets met (λ_B).
    pub minus_minus: LagrangeVec,
    /// First violated, second met (λ_C).
    pub plus_minus: LagrangeVec,
    /// First met, second violated (λ_D).
    pub minus_plus: LagrangeVec,
}

/// Scans a dyadic multiplier grid for the four sign patterns required by the
/// triangle bisection.
///
/// Candidates are `{0} ∪ {lambda_bar * 2^-k}` per axis. Among the candidates
/// matching a pattern, the one with the smallest slack norm is kept: the
/// image-triangle test that steers the bisection is a linear proxy for a
/// saturating constraint map, and it is only trustworthy when the starting
/// quadrilateral hugs the crossing region. Fails if the scan completes with
/// a pattern missing, which signals an instance where some constraint never
/// binds (or `lambda_bar` is too small to silence updates).
pub fn find_initial_quadrant_points<O: DualOracle>(
    oracle: &mut O,
    lambda_bar: f64,
) -> Result<QuadrantPoints, SearchError> {
    assert!(lambda_bar > 0.0, "lambda_bar must be positive");
    let mut axis = vec![0.0f64];
    for k in (0..=12).rev() {
        axis.push(lambda_bar * 0.5f64.powi(k));
    }

    let mut found: [Option<(LagrangeVec, f64)>; 4] = [None; 4];
    for &l0 in &axis {
        for &l1 in &axis {
            let lambda = LagrangeVec::new(l0, l1);
            let sample = oracle.evaluate(lambda)?;
            let norm = (sample.slack.c0.powi(2) + sample.slack.c1.powi(2)).sqrt();
            for (slot, pattern) in Pattern::ALL.iter().enumerate() {
                if pattern.matches(sample.slack)
                    && found[slot].is_none_or(|(_, best)| norm < best)
                {
                    found[slot] = Some((lambda, norm));
                }
            }
        }
    }
    if found.iter().all(|f| f.is_some()) {
        return Ok(QuadrantPoints {
            plus_plus: found[0].unwrap().0,
            plus_minus: found[1].unwrap().0,
            minus_plus: found[2].unwrap().0,
            minus_minus: found[3].unwrap().0,
        });
    }
    let missing = Pattern::ALL
        .iter()
        .enumerate()
        .filter(|(slot, _)| found[*slot].is_none())
        .map(|(_, p)| p.name())
        .collect();
    Err(SearchError::QuadrantNotFound { missing })
}

/// Termination settings for the dual searches.
#[derive(Debug, Clone, Copy)]
pub struct SearchConfig {
    /// Outer-loop termination: stop when the candidate multiplier moves less
    /// than this (Euclidean norm).
    pub epsilon_lambda: f64,
    /// Multiplier scaling step for the neighbor-policy search.
    pub gamma: f64,
    pub max_outer: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { epsilon_lambda: 0.1, gamma: 0.1, max_outer: 200 }
    }
}

/// One outer iteration of the triangle bisection, as recorded in the trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    /// Triangle of record (λ_A, λ_B, λ_C) and the split point λ_D at the top
    /// of the iteration.
    pub lambda_a: LagrangeVec,
    pub lambda_b: LagrangeVec,
    pub lambda_c: LagrangeVec,
    pub lambda_d: LagrangeVec,
    /// Candidate multiplier after the update.
    pub lambda_e: LagrangeVec,
    /// Slacks at the vertices of the tested triangle R = (λ_A, λ_D, λ_C).
    pub slack_a: ConstraintEval,
    pub slack_d: ConstraintEval,
    pub slack_c: ConstraintEval,
    /// Whether R's image contained the origin.
    pub contains_origin: bool,
    /// Longest edge of the selected triangle, for convergence diagnostics.
    pub longest_edge: f64,
}

/// Serializes a bisection trace with the fixed column set
/// `iter,lambda0_A,...,lambda1_E,c0_A,c1_A,c0_D,c1_D,c0_C,c1_C,contains_origin`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "iter,lambda0_A,lambda1_A,lambda0_B,lambda1_B,lambda0_C,lambda1_C,\
         lambda0_D,lambda1_D,lambda0_E,lambda1_E,c0_A,c1_A,c0_D,c1_D,c0_C,c1_C,contains_origin"
    )?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.iteration,
            row.lambda_a.lambda0,
            row.lambda_a.lambda1,
            row.lambda_b.lambda0,
            row.lambda_b.lambda1,
            row.lambda_c.lambda0,
            row.lambda_c.lambda1,
            row.lambda_d.lambda0,
            row.lambda_d.lambda1,
            row.lambda_e.lambda0,
            row.lambda_e.lambda1,
            row.slack_a.c0,
            row.slack_a.c1,
            row.slack_d.c0,
            row.slack_d.c1,
            row.slack_c.c0,
            row.slack_c.c1,
            row.contains_origin,
        )?;
    }
    Ok(())
}

/// Converged outcome of [`triangle_bisection`].
#[derive(Debug, Clone)]
pub struct TriangleOutcome {
    pub lambda_star: LagrangeVec,
    /// λ-optimal policy at `lambda_star`.
    pub sample: Arc<DualSample>,
    /// Multiplier with the largest dual value among all evaluated vertices.
    /// By weak duality it lower-bounds the constrained optimum at least as
    /// tightly as `lambda_star` and is the better center for policy mixing.
    pub best_dual_lambda: LagrangeVec,
    pub best_dual_value: f64,
    pub n_iterations: usize,
    pub trace: Vec<TraceRow>,
}

fn rotate_longest_edge_first(t: [LagrangeVec; 3]) -> [LagrangeVec; 3] {
    let d01 = t[0].distance(t[1]);
    let d12 = t[1].distance(t[2]);
    let d20 = t[2].distance(t[0]);
    if d01 >= d12 && d01 >= d20 {
        t
    } else if d12 >= d20 {
        [t[1], t[2], t[0]]
    } else {
        [t[2], t[0], t[1]]
    }
}

fn slack_point(s: ConstraintEval) -> [f64; 2] {
    [s.c0, s.c1]
}

/// Containment of the origin in the image of `tri` under the constraint map;
/// a degenerate image (identical policies at several vertices) counts as not
/// containing.
fn image_contains_origin<O: DualOracle>(
    oracle: &mut O,
    tri: [LagrangeVec; 3],
) -> Result<(bool, [ConstraintEval; 3]), SearchError> {
    let sa = oracle.evaluate(tri[0])?.slack;
    let sb = oracle.evaluate(tri[1])?.slack;
    let sc = oracle.evaluate(tri[2])?.slack;
    let contains =
        point_in_triangle(slack_point(sa), slack_point(sb), slack_point(sc)).unwrap_or(false);
    Ok((contains, [sa, sb, sc]))
}

fn image_centroid_norm<O: DualOracle>(
    oracle: &mut O,
    tri: [LagrangeVec; 3],
) -> Result<f64, SearchError> {
    let mut c0 = 0.0;
    let mut c1 = 0.0;
    for v in tri {
        let s = oracle.evaluate(v)?.slack;
        c0 += s.c0 / 3.0;
        c1 += s.c1 / 3.0;
    }
    Ok((c0 * c0 + c1 * c1).sqrt())
}

/// Iterative triangle bisection over the multiplier plane.
///
/// Starting from the four sign-pattern points, the quadrilateral is split
/// into triangles `R = (λ_A, λ_D, λ_C)` and `S = (λ_D, λ_B, λ_C)`. Each
/// iteration keeps the triangle whose image under the constraint map
/// contains the origin (falling back to the nearer image centroid when the
/// discrete constraint map leaves the origin in neither), rotates it so its
/// longest edge comes first, bisects that edge, and moves the candidate
/// multiplier to the centroid. Terminates when the candidate moves less than
/// `epsilon_lambda`.
pub fn triangle_bisection<O: DualOracle>(
    oracle: &mut O,
    init: &QuadrantPoints,
    cfg: &SearchConfig,
) -> Result<TriangleOutcome, SearchError> {
    assert!(cfg.epsilon_lambda > 0.0 && cfg.gamma > 0.0, "invalid search config");
    let mut best_dual = (LagrangeVec::ZERO, f64::NEG_INFINITY);
    let mut track = |lambda: LagrangeVec, sample: &DualSample| {
        let value = sample.dual_value(lambda);
        if value > best_dual.1 {
            best_dual = (lambda, value);
        }
    };
    let checks = [
        (init.plus_plus, Pattern::PlusPlus),
        (init.minus_minus, Pattern::MinusMinus),
        (init.plus_minus, Pattern::PlusMinus),
        (init.minus_plus, Pattern::MinusPlus),
    ];
    for (point, pattern) in checks {
        let sample = oracle.evaluate(point)?;
        track(point, &sample);
        if !pattern.matches(sample.slack) {
            return Err(SearchError::InvalidInit {
                pattern: pattern.name(),
                c0: sample.slack.c0,
                c1: sample.slack.c1,
            });
        }
    }

    let (a, b, c, d) = (init.plus_plus, init.minus_minus, init.plus_minus, init.minus_plus);
    let mut tri_r = [a, d, c];
    let mut tri_s = [d, b, c];
    // The triangle of record and its split point, for the trace.
    let mut labels = ([a, b, c], d);
    let mut e_new = d;
    let mut e_old = LagrangeVec::new(f64::INFINITY, f64::INFINITY);
    let mut trace = Vec::new();
    let mut iteration = 0usize;

    while e_new.distance(e_old) >= cfg.epsilon_lambda {
        iteration += 1;
        if iteration > cfg.max_outer {
            return Err(SearchError::MaxIterations(cfg.max_outer));
        }
        let (contains_r, slacks_r) = image_contains_origin(oracle, tri_r)?;
        for vertex in tri_r {
            let sample = oracle.evaluate(vertex)?;
            track(vertex, &sample);
        }
        let selected = if contains_r {
            tri_r
        } else {
            let (contains_s, _) = image_contains_origin(oracle, tri_s)?;
            if contains_s {
                tri_s
            } else {
                // Discrete constraint maps can leave the origin in neither
                // image; keep the triangle whose image centroid is closer.
                if image_centroid_norm(oracle, tri_r)? <= image_centroid_norm(oracle, tri_s)? {
                    tri_r
                } else {
                    tri_s
                }
            }
        };

        let rotated = rotate_longest_edge_first(selected);
        let (ta, tb, tc) = (rotated[0], rotated[1], rotated[2]);
        e_old = e_new;
        e_new = centroid(rotated);
        let td = ta.midpoint(tb);
        trace.push(TraceRow {
            iteration,
            lambda_a: labels.0[0],
            lambda_b: labels.0[1],
            lambda_c: labels.0[2],
            lambda_d: labels.1,
            lambda_e: e_new,
            slack_a: slacks_r[0],
            slack_d: slacks_r[1],
            slack_c: slacks_r[2],
            contains_origin: contains_r,
            longest_edge: ta.distance(tb),
        });
        labels = ([ta, tb, tc], td);
        tri_r = [ta, td, tc];
        tri_s = [td, tb, tc];
    }

    let sample = oracle.evaluate(e_new)?;
    track(e_new, &sample);
    Ok(TriangleOutcome {
        lambda_star: e_new,
        sample,
        best_dual_lambda: best_dual.0,
        best_dual_value: best_dual.1,
        n_iterations: iteration,
        trace,
    })
}

/// The four λ-optimal policies nearest `lambda_star` realizing every slack
/// sign pattern, in the order `(+,+)`, `(+,-)`, `(-,+)`, `(-,-)`.
///
/// Each pattern is chased independently: the multiplier component whose
/// slack has the wrong sign is divided by `1 + gamma` (to relax toward a
/// violation) or multiplied (to tighten toward satisfaction), zero
/// components being nudged to `gamma * epsilon_lambda` before a
/// multiplication can take hold.
pub fn neighbor_policies<O: DualOracle>(
    oracle: &mut O,
    lambda_star: LagrangeVec,
    cfg: &SearchConfig,
) -> Result<[(LagrangeVec, Arc<DualSample>); 4], SearchError> {
    let nudge = cfg.gamma * cfg.epsilon_lambda;
    let mut out: Vec<(LagrangeVec, Arc<DualSample>)> = Vec::with_capacity(4);
    for pattern in Pattern::ALL {
        let wants = pattern.wants();
        let mut lambda = lambda_star;
        let mut matched = None;
        for _ in 0..PATTERN_BUDGET {
            let sample = oracle.evaluate(lambda)?;
            if pattern.matches(sample.slack) {
                matched = Some((lambda, sample));
                break;
            }
            let slack = [sample.slack.c0, sample.slack.c1];
            let mut moved = false;
            let mut components = [lambda.lambda0, lambda.lambda1];
            for i in 0..2 {
                if wants[i] && slack[i] < -SIGN_TOL {
                    // Need a violation: relax the price on this constraint.
                    if components[i] > 0.0 {
                        components[i] /= 1.0 + cfg.gamma;
                        if components[i] < 1e-15 {
                            components[i] = 0.0;
                        }
                        moved = true;
                    }
                } else if !wants[i] && slack[i] > SIGN_TOL {
                    // Need satisfaction: tighten the price.
                    if components[i] == 0.0 {
                        components[i] = nudge;
                    }
                    components[i] *= 1.0 + cfg.gamma;
                    moved = true;
                }
            }
            lambda = LagrangeVec::new(components[0], components[1]);
            if !moved {
                break;
            }
        }
        match matched {
            Some(hit) => out.push(hit),
            None => {
                return Err(SearchError::PatternNotFound {
                    pattern: pattern.name(),
                    budget: PATTERN_BUDGET,
                })
            }
        }
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone(), out[3].clone()])
}

/// Mixing residual of the weighted slacks at `(rho0, rho1)`; `slacks` rows
/// follow the pattern order `(+,+)`, `(+,-)`, `(-,+)`, `(-,-)`.
fn mixing_residual(slacks: &[[f64; 2]; 4], rho0: f64, rho1: f64) -> [f64; 2] {
    let weights = mixture_weights(rho0, rho1);
    let mut out = [0.0; 2];
    for j in 0..2 {
        out[j] = (0..4).map(|i| weights[i] * slacks[i][j]).sum();
    }
    out
}

fn mixture_weights(rho0: f64, rho1: f64) -> [f64; 4] {
    [rho0 * rho1, rho0 * (1.0 - rho1), (1.0 - rho0) * rho1, (1.0 - rho0) * (1.0 - rho1)]
}

fn residual_norm(r: [f64; 2]) -> f64 {
    r[0].abs().max(r[1].abs())
}

/// Solves the bilinear mixing system: find `(rho0, rho1)` in the unit square
/// making both weighted slack combinations vanish.
///
/// Damped Newton from `(0.5, 0.5)` normally converges in a few steps; if it
/// stalls (singular Jacobian, no interior root along its path) a three-stage
/// grid refinement (steps 1e-2, 1e-4, 1e-6) provides the best point found,
/// which is rejected if its residual exceeds 1e-6.
pub fn solve_mixing(slacks: &[[f64; 2]; 4]) -> Result<(f64, f64), SearchError> {
    let mut rho = [0.5f64, 0.5];
    let mut res = mixing_residual(slacks, rho[0], rho[1]);
    for _ in 0..100 {
        if residual_norm(res) <= 1e-9 {
            return Ok((rho[0], rho[1]));
        }
        let [a, b, c, d] = [slacks[0], slacks[1], slacks[2], slacks[3]];
        let (r0, r1) = (rho[0], rho[1]);
        // Partial derivatives of the two bilinear forms.
        let j = [
            [
                r1 * a[0] + (1.0 - r1) * b[0] - r1 * c[0] - (1.0 - r1) * d[0],
                r0 * a[0] - r0 * b[0] + (1.0 - r0) * c[0] - (1.0 - r0) * d[0],
            ],
            [
                r1 * a[1] + (1.0 - r1) * b[1] - r1 * c[1] - (1.0 - r1) * d[1],
                r0 * a[1] - r0 * b[1] + (1.0 - r0) * c[1] - (1.0 - r0) * d[1],
            ],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-14 {
            break;
        }
        let step = [
            (res[0] * j[1][1] - res[1] * j[0][1]) / det,
            (res[1] * j[0][0] - res[0] * j[1][0]) / det,
        ];
        let mut damping = 1.0;
        let mut improved = false;
        while damping >= 1e-4 {
            let candidate = [
                (rho[0] - damping * step[0]).clamp(0.0, 1.0),
                (rho[1] - damping * step[1]).clamp(0.0, 1.0),
            ];
            let candidate_res = mixing_residual(slacks, candidate[0], candidate[1]);
            if residual_norm(candidate_res) < residual_norm(res) {
                rho = candidate;
                res = candidate_res;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if residual_norm(res) <= 1e-9 {
        return Ok((rho[0], rho[1]));
    }

    // Grid fallback: coarse-to-fine scan of the unit square.
    let mut best = (rho[0], rho[1]);
    let mut best_res = residual_norm(res);
    let scan =
        |center: (f64, f64), half_width: f64, step: f64, best: &mut (f64, f64), best_res: &mut f64| {
            let lo0 = (center.0 - half_width).max(0.0);
            let hi0 = (center.0 + half_width).min(1.0);
            let lo1 = (center.1 - half_width).max(0.0);
            let hi1 = (center.1 + half_width).min(1.0);
            let n0 = ((hi0 - lo0) / step).round() as usize;
            let n1 = ((hi1 - lo1) / step).round() as usize;
            for i in 0..=n0 {
                let r0 = lo0 + i as f64 * step;
                for j in 0..=n1 {
                    let r1 = lo1 + j as f64 * step;
                    let r = residual_norm(mixing_residual(slacks, r0, r1));
                    if r < *best_res {
                        *best_res = r;
                        *best = (r0, r1);
                    }
                }
            }
        };
    scan((0.5, 0.5), 0.5, 1e-2, &mut best, &mut best_res);
    scan(best, 1e-2, 1e-4, &mut best, &mut best_res);
    scan(best, 1e-4, 1e-6, &mut best, &mut best_res);
    if best_res <= 1e-6 {
        Ok(best)
    } else {
        Err(SearchError::NoMixSolution { best_residual: best_res })
    }
}

/// A randomized stationary policy mixing the four pattern policies: one
/// component is drawn once at time zero with the product weights derived
/// from `(rho0, rho1)`.
#[derive(Debug, Clone)]
pub struct MixedPolicy {
    /// Components in pattern order `(+,+)`, `(+,-)`, `(-,+)`, `(-,-)`.
    pub components: [MixComponent; 4],
    pub rho0: f64,
    pub rho1: f64,
}

/// One deterministic component of a [`MixedPolicy`] with its exact
/// evaluation.
#[derive(Debug, Clone)]
pub struct MixComponent {
    pub lambda: LagrangeVec,
    pub policy: Arc<[usize]>,
    pub slack: ConstraintEval,
    pub cost: f64,
}

impl MixedPolicy {
    pub fn weights(&self) -> [f64; 4] {
        mixture_weights(self.rho0, self.rho1)
    }

    /// Weighted components for simulation: `(probability, policy)` pairs.
    pub fn mixture(&self) -> Vec<(f64, Arc<[usize]>)> {
        self.weights()
            .iter()
            .zip(&self.components)
            .map(|(&w, comp)| (w, Arc::clone(&comp.policy)))
            .collect()
    }
}

/// Probability-weighted exact evaluation of a mixed policy: average cost and
/// both constraint slacks.
pub fn evaluate_mixed_policy(mix: &MixedPolicy) -> (f64, ConstraintEval) {
    let weights = mix.weights();
    let mut cost = 0.0;
    let mut c0 = 0.0;
    let mut c1 = 0.0;
    for (w, comp) in weights.iter().zip(&mix.components) {
        cost += w * comp.cost;
        c0 += w * comp.slack.c0;
        c1 += w * comp.slack.c1;
    }
    (cost, ConstraintEval { c0, c1 })
}

/// One dual evaluation of a single-constraint problem.
#[derive(Debug, Clone)]
pub struct ScalarSample {
    pub policy: Arc<[usize]>,
    /// Update rate of the λ-optimal policy minus the budget.
    pub slack: f64,
    pub cost: f64,
}

/// The inner problem of a single-constraint dual.
pub trait ScalarDualOracle {
    fn evaluate(&mut self, lambda: f64) -> Result<Arc<ScalarSample>, SearchError>;
}

/// Caching wrapper turning a closure into a [`ScalarDualOracle`].
pub struct FnScalarOracle<F> {
    solve: F,
    cache: HashMap<i64, Arc<ScalarSample>>,
    fresh: usize,
}

impl<F> FnScalarOracle<F>
where
    F: FnMut(f64) -> Result<ScalarSample, SearchError>,
{
    pub fn new(solve: F) -> Self {
        Self { solve, cache: HashMap::new(), fresh: 0 }
    }

    pub fn fresh_evaluations(&self) -> usize {
        self.fresh
    }
}

impl<F> ScalarDualOracle for FnScalarOracle<F>
where
    F: FnMut(f64) -> Result<ScalarSample, SearchError>,
{
    fn evaluate(&mut self, lambda: f64) -> Result<Arc<ScalarSample>, SearchError> {
        let key = cache_key(lambda);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let sample = Arc::new((self.solve)(lambda)?);
        self.fresh += 1;
        self.cache.insert(key, Arc::clone(&sample));
        Ok(sample)
    }
}

/// Two-policy randomization meeting a single constraint with equality:
/// weight `weight_plus` on the violating-side policy, the rest on the
/// feasible-side policy.
#[derive(Debug, Clone)]
pub struct TwoPolicyMix {
    pub lambda_star: f64,
    pub lambda_plus: f64,
    /// Policy at the last multiplier with nonnegative slack.
    pub plus: Arc<ScalarSample>,
    pub lambda_minus: f64,
    /// Policy at the last multiplier with nonpositive slack.
    pub minus: Arc<ScalarSample>,
    pub weight_plus: f64,
}

impl TwoPolicyMix {
    pub fn average_cost(&self) -> f64 {
        self.weight_plus * self.plus.cost + (1.0 - self.weight_plus) * self.minus.cost
    }

    pub fn mixed_slack(&self) -> f64 {
        self.weight_plus * self.plus.slack + (1.0 - self.weight_plus) * self.minus.slack
    }

    pub fn mixture(&self) -> Vec<(f64, Arc<[usize]>)> {
        vec![
            (self.weight_plus, Arc::clone(&self.plus.policy)),
            (1.0 - self.weight_plus, Arc::clone(&self.minus.policy)),
        ]
    }
}

/// Scalar bisection on the multiplier of a single-constraint dual.
///
/// Requires a sign bracket: the unpenalized optimum must violate the budget
/// (`c(0) > 0`) and `lambda_hi` must satisfy it (`c < 0`). Bisects until the
/// bracket is narrower than `eps`, then mixes the two bracketing policies so
/// the expected slack is exactly zero.
pub fn bisection_1d<O: ScalarDualOracle>(
    oracle: &mut O,
    lambda_hi: f64,
    eps: f64,
) -> Result<TwoPolicyMix, SearchError> {
    assert!(lambda_hi > 0.0 && eps > 0.0, "invalid bisection parameters");
    let at_zero = oracle.evaluate(0.0)?;
    if at_zero.slack <= 0.0 {
        return Err(SearchError::InvalidBracket { c_at_zero: at_zero.slack, c_at_hi: None });
    }
    let at_hi = oracle.evaluate(lambda_hi)?;
    if at_hi.slack >= 0.0 {
        return Err(SearchError::InvalidBracket {
            c_at_zero: at_zero.slack,
            c_at_hi: Some(at_hi.slack),
        });
    }

    let (mut lo, mut lo_sample) = (0.0, at_zero);
    let (mut hi, mut hi_sample) = (lambda_hi, at_hi);
    while hi - lo >= eps {
        let mid = 0.5 * (lo + hi);
        let sample = oracle.evaluate(mid)?;
        if sample.slack >= 0.0 {
            lo = mid;
            lo_sample = sample;
        } else {
            hi = mid;
            hi_sample = sample;
        }
    }
    let (c_plus, c_minus) = (lo_sample.slack, hi_sample.slack);
    let denom = c_plus - c_minus;
    // weight_plus * c_plus + (1 - weight_plus) * c_minus = 0.
    let weight_plus = if denom.abs() < 1e-15 { 0.0 } else { -c_minus / denom };
    Ok(TwoPolicyMix {
        lambda_star: 0.5 * (lo + hi),
        lambda_plus: lo,
        plus: lo_sample,
        lambda_minus: hi,
        minus: hi_sample,
        weight_plus,
    })
}

/// How a two-constraint solution meets the budgets.
#[derive(Debug, Clone)]
pub enum CmdpMix {
    /// Four-policy randomization zeroing both slacks.
    Four(MixedPolicy),
    /// One budget never binds: two-policy mix on the binding one, the other
    /// multiplier pinned.
    Scalar {
        /// Index of the binding constraint (0 or 1).
        binding: usize,
        plus: (LagrangeVec, Arc<DualSample>),
        minus: (LagrangeVec, Arc<DualSample>),
        weight_plus: f64,
    },
    /// The unconstrained optimum already satisfies both budgets.
    Single { lambda: LagrangeVec, sample: Arc<DualSample> },
}

/// Full solution of a two-constraint problem.
#[derive(Debug, Clone)]
pub struct CmdpSolution {
    pub lambda_star: LagrangeVec,
    pub mix: CmdpMix,
    /// Exact average cost of the (possibly randomized) solution.
    pub average_cost: f64,
    /// Exact slacks of the solution; within ±1e-6 of zero for [`CmdpMix::Four`].
    pub slack: ConstraintEval,
    pub n_outer_iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl CmdpSolution {
    /// Weighted deterministic components for simulation.
    pub fn mixture(&self) -> Vec<(f64, Arc<[usize]>)> {
        match &self.mix {
            CmdpMix::Four(mix) => mix.mixture(),
            CmdpMix::Scalar { plus, minus, weight_plus, .. } => vec![
                (*weight_plus, Arc::clone(&plus.1.policy)),
                (1.0 - weight_plus, Arc::clone(&minus.1.policy)),
            ],
            CmdpMix::Single { sample, .. } => vec![(1.0, Arc::clone(&sample.policy))],
        }
    }
}

/// A bracketing pair of dual samples plus the weight on the violating side.
type AxisBracket = ((LagrangeVec, Arc<DualSample>), (LagrangeVec, Arc<DualSample>), f64);

/// Scalar bisection along one multiplier axis of a two-constraint oracle,
/// used when only that constraint binds. The other component stays pinned.
fn axis_bisection<O: DualOracle>(
    oracle: &mut O,
    axis: usize,
    pinned: f64,
    lambda_hi: f64,
    eps: f64,
) -> Result<AxisBracket, SearchError> {
    let point = |value: f64| {
        if axis == 0 {
            LagrangeVec::new(value, pinned)
        } else {
            LagrangeVec::new(pinned, value)
        }
    };
    let slack_of = |sample: &DualSample| if axis == 0 { sample.slack.c0 } else { sample.slack.c1 };

    let at_zero = oracle.evaluate(point(0.0))?;
    if slack_of(&at_zero) <= 0.0 {
        return Err(SearchError::InvalidBracket { c_at_zero: slack_of(&at_zero), c_at_hi: None });
    }
    let at_hi = oracle.evaluate(point(lambda_hi))?;
    if slack_of(&at_hi) >= 0.0 {
        return Err(SearchError::InvalidBracket {
            c_at_zero: slack_of(&at_zero),
            c_at_hi: Some(slack_of(&at_hi)),
        });
    }
    let (mut lo, mut lo_sample) = (0.0, at_zero);
    let (mut hi, mut hi_sample) = (lambda_hi, at_hi);
    while hi - lo >= eps {
        let mid = 0.5 * (lo + hi);
        let sample = oracle.evaluate(point(mid))?;
        if slack_of(&sample) >= 0.0 {
            lo = mid;
            lo_sample = sample;
        } else {
            hi = mid;
            hi_sample = sample;
        }
    }
    let (c_plus, c_minus) = (slack_of(&lo_sample), slack_of(&hi_sample));
    let denom = c_plus - c_minus;
    let weight_plus = if denom.abs() < 1e-15 { 0.0 } else { -c_minus / denom };
    Ok(((point(lo), lo_sample), (point(hi), hi_sample), weight_plus))
}

/// [`axis_bisection`] with a growing ceiling: doubles `lambda_hi` while the
/// λ-optimal policy still violates the budget there.
fn axis_bisection_growing<O: DualOracle>(
    oracle: &mut O,
    axis: usize,
    pinned: f64,
    lambda_hi: f64,
    eps: f64,
) -> Result<AxisBracket, SearchError> {
    let mut hi = lambda_hi;
    for _ in 0..4 {
        match axis_bisection(oracle, axis, pinned, hi, eps) {
            Err(SearchError::InvalidBracket { c_at_hi: Some(_), .. }) => hi *= 2.0,
            other => return other,
        }
    }
    axis_bisection(oracle, axis, pinned, hi, eps)
}

/// End-to-end two-constraint solver: quadrant scan, triangle bisection,
/// neighbor policies, and mixing.
///
/// Degenerate instances short-circuit: if the unpenalized optimum already
/// meets both budgets it is returned as-is, and if only one budget binds the
/// problem collapses to a scalar bisection on that axis. The scan ceiling
/// `lambda_bar` doubles up to three times if the initial scan cannot realize
/// all four sign patterns.
pub fn solve_two_constraint_cmdp<O: DualOracle>(
    oracle: &mut O,
    lambda_bar: f64,
    cfg: &SearchConfig,
) -> Result<CmdpSolution, SearchError> {
    let base = oracle.evaluate(LagrangeVec::ZERO)?;
    let c0_binds = base.slack.c0 > SIGN_TOL;
    let c1_binds = base.slack.c1 > SIGN_TOL;
    if !c0_binds && !c1_binds {
        return Ok(CmdpSolution {
            lambda_star: LagrangeVec::ZERO,
            average_cost: base.cost,
            slack: base.slack,
            mix: CmdpMix::Single { lambda: LagrangeVec::ZERO, sample: base },
            n_outer_iterations: 0,
            trace: Vec::new(),
        });
    }
    if c0_binds != c1_binds {
        let binding = usize::from(c1_binds);
        let (plus, minus, weight_plus) =
            axis_bisection_growing(oracle, binding, 0.0, lambda_bar, cfg.epsilon_lambda)?;
        return Ok(finish_scalar(binding, plus, minus, weight_plus));
    }

    let mut bar = lambda_bar;
    let mut init = find_initial_quadrant_points(oracle, bar);
    for _ in 0..3 {
        if init.is_ok() {
            break;
        }
        bar *= 2.0;
        init = find_initial_quadrant_points(oracle, bar);
    }
    let init = init?;
    let outcome = triangle_bisection(oracle, &init, cfg)?;
    // Mix around the multiplier with the best dual value: by weak duality it
    // is the tightest lower-bound certificate seen, so the four neighboring
    // policies there bracket the optimum most closely.
    let center = if outcome.best_dual_value
        > outcome.sample.dual_value(outcome.lambda_star)
    {
        outcome.best_dual_lambda
    } else {
        outcome.lambda_star
    };

    match neighbor_policies(oracle, center, cfg) {
        Ok(neighbors) => {
            let slacks = [
                [neighbors[0].1.slack.c0, neighbors[0].1.slack.c1],
                [neighbors[1].1.slack.c0, neighbors[1].1.slack.c1],
                [neighbors[2].1.slack.c0, neighbors[2].1.slack.c1],
                [neighbors[3].1.slack.c0, neighbors[3].1.slack.c1],
            ];
            let (rho0, rho1) = solve_mixing(&slacks)?;
            let components = neighbors.map(|(lambda, sample)| MixComponent {
                lambda,
                policy: Arc::clone(&sample.policy),
                slack: sample.slack,
                cost: sample.cost,
            });
            let mixed = MixedPolicy { components, rho0, rho1 };
            let (average_cost, slack) = evaluate_mixed_policy(&mixed);
            Ok(CmdpSolution {
                lambda_star: center,
                mix: CmdpMix::Four(mixed),
                average_cost,
                slack,
                n_outer_iterations: outcome.n_iterations,
                trace: outcome.trace,
            })
        }
        Err(SearchError::PatternNotFound { .. }) => {
            // One constraint stopped binding near the optimum; mix on the
            // other axis, pinning this one at its converged multiplier.
            let star = center;
            let try_axis = |oracle: &mut O, axis: usize| {
                let pinned = if axis == 0 { star.lambda1 } else { star.lambda0 };
                axis_bisection_growing(oracle, axis, pinned, bar, cfg.epsilon_lambda)
            };
            let mut solution = None;
            for axis in 0..2 {
                if let Ok((plus, minus, weight_plus)) = try_axis(oracle, axis) {
                    let candidate = finish_scalar(axis, plus, minus, weight_plus);
                    let other = if axis == 0 { candidate.slack.c1 } else { candidate.slack.c0 };
                    if other <= SIGN_TOL {
                        solution = Some(candidate);
                        break;
                    }
                    if solution.is_none() {
                        solution = Some(candidate);
                    }
                }
            }
            solution
                .ok_or(SearchError::PatternNotFound { pattern: "fallback", budget: PATTERN_BUDGET })
                .map(|mut s| {
                    s.n_outer_iterations = outcome.n_iterations;
                    s.trace = outcome.trace;
                    s
                })
        }
        Err(other) => Err(other),
    }
}

fn finish_scalar(
    binding: usize,
    plus: (LagrangeVec, Arc<DualSample>),
    minus: (LagrangeVec, Arc<DualSample>),
    weight_plus: f64,
) -> CmdpSolution {
    let w = weight_plus;
    let average_cost = w * plus.1.cost + (1.0 - w) * minus.1.cost;
    let slack = ConstraintEval {
        c0: w * plus.1.slack.c0 + (1.0 - w) * minus.1.slack.c0,
        c1: w * plus.1.slack.c1 + (1.0 - w) * minus.1.slack.c1,
    };
    let lambda_star = LagrangeVec::new(
        w * plus.0.lambda0 + (1.0 - w) * minus.0.lambda0,
        w * plus.0.lambda1 + (1.0 - w) * minus.0.lambda1,
    );
    CmdpSolution {
        lambda_star,
        mix: CmdpMix::Scalar { binding, plus, minus, weight_plus: w },
        average_cost,
        slack,
        n_outer_iterations: 0,
        trace: Vec::new(),
    }
}
