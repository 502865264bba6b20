//! Solvers and simulators for information-freshness scheduling under
//! update-rate constraints.
//!
//! A status-update system samples a source and pushes updates to a receiver,
//! but must keep its long-run update rate below a budget. This crate covers
//! both standard routes to an optimal schedule:
//!
//! - **Token relaxation.** A token bucket is folded into the state so the
//!   rate constraint becomes structural: updates spend tokens, tokens arrive
//!   at the budgeted rate, and the constrained problem turns into an
//!   unconstrained average-cost MDP solved by relative value iteration
//!   ([`mdp::rvia`]).
//! - **Lagrangian duality.** The constraint is priced into the cost and the
//!   multipliers are searched: scalar bisection for one constraint
//!   ([`search::bisection_1d`]), iterative triangle bisection for two
//!   ([`search::triangle_bisection`]), with randomized policy mixing to meet
//!   the constraints with equality.
//!
//! Two concrete models are built in: an Age of Incorrect Information (AoII)
//! model with one rate budget ([`aoii`]) and an Age of Information (AoI)
//! model with separate budgets for requested and unrequested slots
//! ([`two_rate`]). [`sim`] replays any policy under a reproducible
//! counter-based RNG, and [`cli`] drives full experiment sweeps from config
//! files.
//!
//! The `book/` directory of the repository walks through the theory chapter
//! by chapter; its code snippets compile and run as doctests of this crate.

pub mod aoii;
pub mod cli;
pub mod mdp;
pub mod search;
pub mod sim;
pub mod two_rate;

/// Book snippets double as doctests so the guide cannot drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! doc_check {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(unused)]
            mod $name {}
        };
    }

    doc_check!(introduction, "../../../book/src/introduction.md");
    doc_check!(mdp_solvers, "../../../book/src/mdp-solvers.md");
    doc_check!(aoii_model, "../../../book/src/aoii-model.md");
    doc_check!(two_rate_model, "../../../book/src/two-rate-model.md");
    doc_check!(constrained_search, "../../../book/src/constrained-search.md");
    doc_check!(simulation, "../../../book/src/simulation.md");
    doc_check!(experiments, "../../../book/src/experiments.md");
}
