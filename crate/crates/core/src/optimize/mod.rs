//! Whole-graph optimization: dead-node pruning, elementwise fusion and
//! static buffer planning.

mod dce;
mod fuse;
mod plan;

pub use dce::{dce, Pruned};
pub use fuse::{fuse, Fusion};
pub use plan::{plan_buffers, BufferPlan, Schedule};

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::Result;
use crate::graph::Graph;

/// Summary of what the optimizer did, suitable for benchmark records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub removed_nodes: usize,
    /// Parameter slots the outputs do not depend on.
    pub dead_params: Vec<usize>,
    /// Fused groups of two or more nodes.
    pub fused_groups: usize,
    /// Nodes inside those groups.
    pub fused_nodes: usize,
    pub buffers: usize,
    pub peak_planned_bytes: u64,
    pub no_reuse_bytes: u64,
}

/// A pruned graph with its fusion groups, schedule and buffer plan.
#[derive(Clone, Debug)]
pub struct Optimized<T> {
    pub graph: Graph<T>,
    pub fusion: Fusion,
    pub schedule: Schedule,
    pub plan: BufferPlan,
    pub report: OptimizerReport,
}

/// Runs every pass. `fusion` can be disabled to measure its effect.
pub fn optimize<T: Element>(g: &Graph<T>, fusion: bool) -> Result<Optimized<T>> {
    let pruned = dce(g)?;
    let graph = pruned.graph;
    let fz = if fusion { fuse(&graph) } else { Fusion::none(&graph) };
    let schedule = Schedule::new(&graph, &fz);
    let plan = plan_buffers(&graph, &schedule);
    plan.audit(&graph, &schedule)?;
    let width = (T::BITS / 8) as u64;
    let report = OptimizerReport {
        nodes_before: g.len(),
        nodes_after: graph.len(),
        removed_nodes: pruned.removed,
        dead_params: pruned.dead_params,
        fused_groups: fz.groups().filter(|m| m.len() > 1).count(),
        fused_nodes: fz.groups().filter(|m| m.len() > 1).map(|m| m.len()).sum(),
        buffers: plan.buffer_sizes.len(),
        peak_planned_bytes: plan.peak_elems() as u64 * width,
        no_reuse_bytes: plan.no_reuse_elems as u64 * width,
    };
    Ok(Optimized {
        graph,
        fusion: fz,
        schedule,
        plan,
        report,
    })
}
