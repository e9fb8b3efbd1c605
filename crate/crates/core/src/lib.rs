//! Semantic object-SLAM backend: factor-graph estimation over camera poses
//! and object landmarks, chi-square and embedding-based data association,
//! confusion-matrix label debiasing and evaluator-driven map refinement.

pub mod association;
pub mod cli;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod map;
pub mod pipeline;
pub mod semantics;
pub mod simulator;
pub mod supervision;
