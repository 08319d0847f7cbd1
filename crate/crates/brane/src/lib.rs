//! Branching multitask networks for graph-algorithm execution traces.
//!
//! The crate is organized as a pipeline:
//!
//! * [`tracegen`] builds seeded random graphs and step-by-step execution
//!   traces of classical graph algorithms (the supervision signal).
//! * [`diffcore`] is a minimal reverse-mode autodiff engine over a flat
//!   parameter vector, with an Adam optimizer and checkpointing.
//! * [`branchnet`] defines the tree-structured message-passing model whose
//!   processor layers can branch into task-group-specific modules.
//! * [`trainer`] runs multitask teacher-forced training and evaluation.
//! * [`linearizer`] turns a trained initialization into projected gradient
//!   features and fits logistic surrogates that predict subset losses.
//! * [`clusterer`] relaxes partition selection to a semidefinite program and
//!   rounds the solution back to task groups.
//! * [`search`] is the top-down branch-structure search built from the above.
//! * [`bench`] holds experiment configs, baselines, sweeps, and reports.

pub mod fsio;
pub mod rng;

pub mod bench;
pub mod branchnet;
pub mod clusterer;
pub mod diffcore;
pub mod linearizer;
pub mod search;
pub mod tracegen;
pub mod trainer;
