use crate::element::Element;
use crate::graph::{Graph, NodeId};

/// Assignment of elementwise nodes to fused groups. Every non-leaf node
/// belongs to exactly one group; most groups are singletons.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// Root (last node, the one that writes memory) of each node's group.
    pub root_of: Vec<NodeId>,
    /// Members of each root's group in topological order; empty for
    /// non-roots.
    pub members: Vec<Vec<NodeId>>,
}

impl Fusion {
    /// Every node its own group.
    pub fn none<T: Element>(g: &Graph<T>) -> Self {
        Fusion {
            root_of: g.ids().collect(),
            members: g.ids().map(|i| vec![i]).collect(),
        }
    }

    pub fn is_root(&self, id: NodeId) -> bool {
        self.root_of[id.0] == id
    }

    /// Member lists of all groups, roots only.
    pub fn groups(&self) -> impl Iterator<Item = &Vec<NodeId>> {
        self.members.iter().filter(|m| !m.is_empty())
    }
}

/// Greedy producer-into-consumer fusion, visiting nodes last to first.
///
/// An elementwise node joins its consumer's group when it has exactly one
/// consumer, that consumer is elementwise, both have the same shape, and the
/// node is not itself an output or the loss.
pub fn fuse<T: Element>(g: &Graph<T>) -> Fusion {
    let consumers = g.consumers();
    let roots = g.roots();
    let mut root_of: Vec<NodeId> = g.ids().collect();
    for i in (0..g.len()).rev() {
        let n = &g.nodes[i];
        if !n.op.is_elementwise() || roots.contains(&NodeId(i)) {
            continue;
        }
        let [c] = consumers[i].as_slice() else { continue };
        let cn = g.node(*c);
        if cn.op.is_elementwise() && cn.shape == n.shape {
            root_of[i] = root_of[c.0];
        }
    }
    let mut members = vec![Vec::new(); g.len()];
    for i in 0..g.len() {
        if !g.nodes[i].op.is_leaf() {
            members[root_of[i].0].push(NodeId(i));
        }
    }
    Fusion { root_of, members }
}
