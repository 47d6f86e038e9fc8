//! Reverse-mode automatic differentiation over small static graphs.
//!
//! Graphs are built once per network shape and evaluated per sample. Every
//! node produces a dense vector; parameters live outside the graph in a flat
//! [`ParamVector`] addressed through a [`ParamLayout`], so several graph
//! instances can evaluate concurrently against the same read-only values.

mod activation;
mod fd;
mod graph;
mod params;

pub use activation::ActivationKind;
pub use fd::fd_gradient;
pub use graph::{ExprGraph, GraphBuilder, Gradients, LinearLayer, NodeId, Op};
pub use params::{LayoutEntry, ParamLayout, ParamVector};
