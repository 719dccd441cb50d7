use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

use super::fuse::Fusion;

/// Execution order: one step per fused group (identified by its root),
/// leaves excluded.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub steps: Vec<NodeId>,
    /// Step index of each group root.
    pub step_of: Vec<Option<usize>>,
    /// Last step reading each root's value; `steps.len()` for roots of the
    /// graph, which outlive execution.
    pub last_use: Vec<Option<usize>>,
}

impl Schedule {
    pub fn new<T: Element>(g: &Graph<T>, f: &Fusion) -> Self {
        let mut steps = Vec::new();
        let mut step_of = vec![None; g.len()];
        for id in g.ids() {
            if !g.node(id).op.is_leaf() && f.is_root(id) {
                step_of[id.0] = Some(steps.len());
                steps.push(id);
            }
        }
        let mut last_use: Vec<Option<usize>> = step_of.clone();
        for (i, n) in g.nodes.iter().enumerate() {
            let Some(s) = step_of[f.root_of[i].0] else { continue };
            for a in &n.inputs {
                if let Some(l) = last_use[a.0].as_mut() {
                    *l = (*l).max(s);
                }
            }
        }
        for r in g.roots() {
            if let Some(l) = last_use[r.0].as_mut() {
                *l = steps.len();
            }
        }
        Schedule {
            steps,
            step_of,
            last_use,
        }
    }
}

/// Static assignment of every scheduled value to a reusable buffer.
#[derive(Clone, Debug)]
pub struct BufferPlan {
    pub buffer_of: Vec<Option<usize>>,
    /// Capacity of each buffer in elements.
    pub buffer_sizes: Vec<usize>,
    /// Total elements if every value had its own buffer.
    pub no_reuse_elems: usize,
}

impl BufferPlan {
    /// Elements the arena holds at once: the sum of buffer capacities.
    pub fn peak_elems(&self) -> usize {
        self.buffer_sizes.iter().sum()
    }

    /// Checks that values sharing a buffer have disjoint lifetimes and fit.
    pub fn audit<T: Element>(&self, g: &Graph<T>, s: &Schedule) -> Result<()> {
        let mut per_buffer: Vec<Vec<(usize, usize, NodeId)>> = vec![Vec::new(); self.buffer_sizes.len()];
        for &id in &s.steps {
            let b = self.buffer_of[id.0].ok_or_else(|| Error::Contract(format!("{id} has no buffer")))?;
            if g.node(id).numel() > self.buffer_sizes[b] {
                return Err(Error::Contract(format!("{id} overflows buffer {b}")));
            }
            per_buffer[b].push((s.step_of[id.0].unwrap(), s.last_use[id.0].unwrap(), id));
        }
        for (b, mut v) in per_buffer.into_iter().enumerate() {
            v.sort();
            for w in v.windows(2) {
                if w[1].0 <= w[0].1 {
                    return Err(Error::Contract(format!(
                        "{} and {} overlap in buffer {b}",
                        w[0].2, w[1].2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Greedy interval allocation in schedule order.
///
/// At each step buffers whose value was last read at an earlier step are
/// released; the new value then takes a free buffer of exactly its size, or
/// else the smallest larger one, or else a fresh buffer.
pub fn plan_buffers<T: Element>(g: &Graph<T>, s: &Schedule) -> BufferPlan {
    let mut buffer_of = vec![None; g.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    let mut active: Vec<(usize, usize)> = Vec::new();
    let mut no_reuse = 0;
    for (step, &id) in s.steps.iter().enumerate() {
        active.retain(|&(end, b)| {
            if end < step {
                free.push(b);
                false
            } else {
                true
            }
        });
        let need = g.node(id).numel();
        no_reuse += need;
        let exact = free.iter().position(|&b| sizes[b] == need);
        let best = exact.or_else(|| {
            free.iter()
                .enumerate()
                .filter(|(_, &b)| sizes[b] > need)
                .min_by_key(|(_, &b)| sizes[b])
                .map(|(i, _)| i)
        });
        let b = match best {
            Some(i) => free.swap_remove(i),
            None => {
                sizes.push(need);
                sizes.len() - 1
            }
        };
        buffer_of[id.0] = Some(b);
        active.push((s.last_use[id.0].unwrap(), b));
    }
    BufferPlan {
        buffer_of,
        buffer_sizes: sizes,
        no_reuse_elems: no_reuse,
    }
}

#[cfg(test)]
mod tests {
    use super::super::fuse::fuse;
    use super::*;
    use crate::graph::Emitter;
    use crate::tensor::UnaryKind;
    use proptest::prelude::*;

    fn chain(len: usize) -> Graph<f64> {
        let mut g = Graph::<f64>::new();
        let mut x = g.input(&[8]);
        for _ in 0..len {
            let y = g.unary(UnaryKind::Exp, &x).unwrap();
            // sum to a scalar and broadcast back: breaks fusion
            let s = g.sum_all(&y).unwrap();
            x = g.broadcast_to(&s, &[8]).unwrap();
        }
        g.outputs = vec![x];
        g
    }

    #[test]
    fn chain_reuses_two_buffers_per_size() {
        let g = chain(10);
        let f = Fusion::none(&g);
        let s = Schedule::new(&g, &f);
        let p = plan_buffers(&g, &s);
        p.audit(&g, &s).unwrap();
        assert_eq!(p.no_reuse_elems, 10 * (8 + 1 + 8));
        assert!(p.peak_elems() <= 8 + 8 + 1 + 1, "{:?}", p.buffer_sizes);
    }

    #[test]
    fn outputs_are_not_recycled() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&[4]);
        let a = g.unary(UnaryKind::Exp, &x).unwrap();
        let b = g.unary(UnaryKind::Neg, &x).unwrap();
        let c = g.unary(UnaryKind::Tanh, &b).unwrap();
        g.outputs = vec![a, c];
        let f = Fusion::none(&g);
        let s = Schedule::new(&g, &f);
        let p = plan_buffers(&g, &s);
        p.audit(&g, &s).unwrap();
        assert_ne!(p.buffer_of[a.0], p.buffer_of[c.0]);
        assert_ne!(p.buffer_of[a.0], p.buffer_of[b.0]);
    }

    proptest! {
        #[test]
        fn random_graphs_plan_without_overlap(ops in prop::collection::vec((0usize..4, 0usize..100, 0usize..100), 1..40)) {
            let mut g = Graph::<f64>::new();
            let x = g.input(&[3, 5]);
            let mut vals = vec![x];
            for (kind, i, j) in ops {
                let a = vals[i % vals.len()];
                let b = vals[j % vals.len()];
                let v = match kind {
                    0 => g.unary(UnaryKind::Tanh, &a).unwrap(),
                    1 => g.add(&a, &b).unwrap(),
                    2 => g.mul(&a, &b).unwrap(),
                    _ => {
                        let s = g.reduce(crate::tensor::ReduceKind::Sum, &a, &[1]).unwrap();
                        let s = g.reshape(&s, &[3, 1]).unwrap();
                        g.broadcast_to(&s, &[3, 5]).unwrap()
                    }
                };
                vals.push(v);
            }
            g.outputs = vec![*vals.last().unwrap()];
            let f = fuse(&g);
            let s = Schedule::new(&g, &f);
            let p = plan_buffers(&g, &s);
            prop_assert!(p.audit(&g, &s).is_ok());
            prop_assert!(p.peak_elems() <= p.no_reuse_elems);
        }
    }
}
