use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: Option<Vec<f64>>,
}

/// What a backward rule can see: the upstream gradient, the node's own
/// output, and the values of its inputs.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    parents: &'a [Var],
    out: &'a Tensor,
    pub grad: &'a [f64],
}

impl<'a> BackwardCtx<'a> {
    /// Value of input `i`.
    pub fn input(&self, i: usize) -> &'a Tensor {
        &self.nodes[self.parents[i].0].value
    }

    pub fn num_inputs(&self) -> usize {
        self.parents.len()
    }

    pub fn output(&self) -> &'a Tensor {
        self.out
    }

    /// Whether input `i` wants a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.nodes[self.parents[i].0].requires_grad
    }
}

/// Execution tape. Nodes are appended in execution order, so the node list
/// is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node; `requires_grad` leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Records a differentiable operation. `backward` returns one optional
    /// gradient per parent, each the size of that parent's value.
    pub fn custom<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element root. Every node reachable from the
    /// root that requires grad ends up with a populated gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Usage(
                "backward root does not depend on any requires_grad tensor".into(),
            ));
        }
        accumulate(&mut self.nodes[root.0], &[1.0]);
        for i in (0..=root.0).rev() {
            let parent_grads = {
                let node = &self.nodes[i];
                let (Some(bw), Some(g)) = (node.backward.as_ref(), node.grad.as_ref()) else {
                    continue;
                };
                let ctx = BackwardCtx {
                    nodes: &self.nodes,
                    parents: &node.parents,
                    out: &node.value,
                    grad: g,
                };
                let grads = bw(&ctx);
                debug_assert_eq!(grads.len(), node.parents.len());
                node.parents.iter().copied().zip(grads).collect::<Vec<_>>()
            };
            for (p, g) in parent_grads {
                if let Some(g) = g {
                    if self.nodes[p.0].requires_grad {
                        accumulate(&mut self.nodes[p.0], &g);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    debug_assert_eq!(g.len(), node.value.numel());
    match node.grad.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => node.grad = Some(g.to_vec()),
    }
}
