//! Constraint-aware output layers for neural networks.
//!
//! Domain knowledge is written as a quantifier-free linear-arithmetic formula
//! over the network's real-valued outputs. The formula is normalized to
//! disjunctive normal form, and every conjunctive term is compiled into a
//! differentiable transformation that maps *any* unconstrained network output
//! to a point satisfying that term. A latent categorical variable gates the
//! resulting branches, so the composite output layer behaves like a logical
//! multiplexor: whichever branch is selected, the output satisfies the
//! constraint by construction.
//!
//! The crate is organized along the pipeline:
//!
//! - [`logic`] — formula AST, parser and exact-rational evaluation
//! - [`dnf`] — negation normal form, DNF conversion, term simplification
//! - [`layerc`] — term-to-transform compilation ([`layerc::MultiplexHead`])
//! - [`grad`] — a minimal reverse-mode differentiation tape
//! - [`nets`] — MLP/VAE building blocks and the marginalized gating losses
//! - [`bench`] — data generators, training loops, metrics and reports
//!
//! See the crate examples for runnable walkthroughs of each stage, and the
//! `multiplexnet` binary for the command-line interface.

pub mod bench;
pub mod dnf;
pub mod grad;
pub mod layerc;
pub mod logic;
pub mod math;
pub mod nets;
