use std::collections::{HashMap, HashSet};

use super::{Node, Result, Tensor, TensorError};

impl Tensor {
    /// Back-propagates from this scalar, accumulating into every reachable
    /// leaf created with `requires_grad`. Leaves reached along several paths
    /// (shared weights) receive the sum of all contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if self.mark_consumed() {
            return Err(TensorError::BackwardTwice);
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = topo_order(self);
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.ptr()) else {
                continue;
            };
            match node.op() {
                None => node.accumulate_grad(&g),
                Some(op) => op.backward(node, &g, &mut |parent, pg| {
                    if !parent.requires_grad() {
                        return;
                    }
                    grads
                        .entry(parent.ptr())
                        .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                        .or_insert(pg);
                }),
            }
        }
        Ok(())
    }
}

/// Post-order over the grad-requiring subgraph; parents precede children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.ptr()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
