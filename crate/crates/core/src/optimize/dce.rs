use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, NodeId, Node};
use crate::ops::Op;

/// Result of dead-node elimination.
#[derive(Clone, Debug)]
pub struct Pruned<T> {
    pub graph: Graph<T>,
    /// Non-leaf nodes dropped.
    pub removed: usize,
    /// Parameter slots no root depends on.
    pub dead_params: Vec<usize>,
    /// Old id to new id, `None` for removed nodes.
    pub remap: Vec<Option<NodeId>>,
}

/// Keeps nodes reachable from the outputs or the loss. Input and parameter
/// leaves always survive so binding slots stay stable.
pub fn dce<T: Element>(g: &Graph<T>) -> Result<Pruned<T>> {
    let mut live = vec![false; g.len()];
    for r in g.roots() {
        live[r.0] = true;
    }
    for i in (0..g.len()).rev() {
        if live[i] {
            for a in &g.nodes[i].inputs {
                live[a.0] = true;
            }
        }
    }
    let dead_params: Vec<usize> = g
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| !live[p.0])
        .map(|(slot, _)| slot)
        .collect();

    let mut out = Graph::new();
    let mut remap = vec![None; g.len()];
    let mut removed = 0;
    for (i, n) in g.nodes.iter().enumerate() {
        let keep = live[i] || matches!(n.op, Op::Input(_) | Op::Param(_));
        if !keep {
            if !n.op.is_leaf() {
                removed += 1;
            }
            continue;
        }
        let inputs = n.inputs.iter().map(|a| remap[a.0].expect("operand of a live node is live")).collect();
        out.nodes.push(Node {
            op: n.op.clone(),
            inputs,
            shape: n.shape.clone(),
        });
        let id = NodeId(out.nodes.len() - 1);
        remap[i] = Some(id);
    }
    out.inputs = g.inputs.iter().map(|a| remap[a.0].unwrap()).collect();
    out.params = g.params.iter().map(|a| remap[a.0].unwrap()).collect();
    out.outputs = g.outputs.iter().map(|a| remap[a.0].unwrap()).collect();
    out.loss = g.loss.map(|a| remap[a.0].unwrap());
    Ok(Pruned {
        graph: out,
        removed,
        dead_params,
        remap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Emitter;
    use crate::tensor::UnaryKind;

    #[test]
    fn removes_unreachable_and_reports_dead_params() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3]);
        let w = g.param(&[3]);
        let unused = g.param(&[2]);
        let a = g.mul(&x, &w).unwrap();
        let _dead = g.unary(UnaryKind::Exp, &a).unwrap();
        let _dead2 = g.unary(UnaryKind::Tanh, &unused).unwrap();
        let s = g.sum_all(&a).unwrap();
        g.outputs = vec![s];
        let p = dce(&g).unwrap();
        assert_eq!(p.removed, 2);
        assert_eq!(p.dead_params, vec![1]);
        assert_eq!(p.graph.len(), g.len() - 2);
        assert_eq!(p.graph.params.len(), 2);
        p.graph.validate().unwrap();
    }

    #[test]
    fn idempotent() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[3]);
        let a = g.unary(UnaryKind::Exp, &x).unwrap();
        let _ = g.unary(UnaryKind::Neg, &a).unwrap();
        g.outputs = vec![a];
        let once = dce(&g).unwrap().graph;
        let twice = dce(&once).unwrap();
        assert_eq!(twice.removed, 0);
        assert_eq!(twice.graph.len(), once.len());
    }
}
