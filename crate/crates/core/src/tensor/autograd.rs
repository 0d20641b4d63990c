use std::collections::{HashMap, HashSet};

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `t` as an untracked tensor of the same shape.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        self.grads.get(&t.id()).map(|g| Tensor::new(g.clone(), t.shape()).expect("gradient shape"))
    }

    pub fn get_slice(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tensor {
    /// Reverse-mode differentiation of a scalar.
    ///
    /// Nodes are visited in the reverse of a depth-first post-order that
    /// follows parents in their recorded order, so accumulation order (and
    /// therefore every bit of the result) depends only on graph structure.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward() needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(Gradients::default());
        }

        let order = topo_order(self);
        let mut pending: HashMap<TensorId, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut leaves = Gradients::default();

        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = t.node() else {
                leaves.grads.insert(t.id(), grad);
                continue;
            };
            let parent_grads = (node.backward)(t.data(), &grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.id(), g);
                    }
                }
            }
        }
        Ok(leaves)
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    // (tensor, next parent index to explore)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, idx)) = stack.pop() {
        let parents = t.node().map(|n| n.parents.as_slice()).unwrap_or(&[]);
        if idx < parents.len() {
            let p = parents[idx].clone();
            stack.push((t, idx + 1));
            if p.requires_grad() && visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(vec![1.0, -2.0, 3.0], &[3]).unwrap().to_param();
        let g = x.sum_all().backward().unwrap();
        assert_eq!(g.get_slice(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_input() {
        let x = Tensor::new(vec![1.0, -2.0, 0.5], &[3]).unwrap().to_param();
        let loss = x.mul(&x).unwrap().sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.get_slice(&x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::ones(&[2]).to_param();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x*x -> dy/dx = 4x
        let x = Tensor::new(vec![3.0], &[1]).unwrap().to_param();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap().sum_all();
        let g = y.backward().unwrap();
        assert_eq!(g.get_slice(&x).unwrap(), &[12.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let x = Tensor::new((0..16).map(|i| (i as f64 * 0.37).sin()).collect(), &[4, 4]).unwrap().to_param();
        let run = || {
            let y = x.softmax_lastdim().unwrap();
            let z = y.mul(&x).unwrap().leaky_relu(0.01).sum_all();
            z.backward().unwrap().get_slice(&x).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
