use std::collections::{HashMap, HashSet};

use crate::tensor::{no_grad, Tensor};
use crate::GraphError;

/// Post-order over the recorded history reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in op.parents() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients carry history and can be
/// differentiated again; otherwise they are constants. Inputs that `output`
/// does not depend on receive zeros.
pub fn grad(output: &Tensor, inputs: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>, GraphError> {
    if output.numel() != 1 {
        return Err(GraphError::NonScalarOutput(output.shape().to_vec()));
    }
    let _guard = (!create_graph).then(no_grad);

    let wanted: HashSet<u64> = inputs.iter().map(Tensor::id).collect();
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    let mut kept: HashMap<u64, Tensor> = HashMap::new();

    if output.requires_grad() {
        grads.insert(output.id(), Tensor::full(output.shape(), 1.0));
        let order = topo_order(output);
        // Only nodes with a wanted input among their ancestors need gradients.
        let mut relevant: HashSet<u64> = HashSet::new();
        for node in &order {
            let hit = wanted.contains(&node.id())
                || node.0.op.as_ref().is_some_and(|op| {
                    op.parents().iter().any(|p| relevant.contains(&p.id()))
                });
            if hit {
                relevant.insert(node.id());
            }
        }
        for node in order.iter().rev() {
            if !relevant.contains(&node.id()) {
                continue;
            }
            let Some(g) = grads.remove(&node.id()) else { continue };
            if wanted.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(op) = &node.0.op else { continue };
            for (parent, pg) in op.vjp(node, &g) {
                if !parent.requires_grad() || !relevant.contains(&parent.id()) {
                    continue;
                }
                let acc = match grads.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), acc);
            }
        }
    }

    Ok(inputs
        .iter()
        .map(|x| {
            kept.get(&x.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect())
}
