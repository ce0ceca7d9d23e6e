use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::OnceLock;

use super::{Result, Tensor, TensorError};

/// Local derivative rule for one recorded op.
///
/// `inputs` are the op's forward inputs, `output` its forward result and
/// `grad` the upstream gradient (same shape as `output`). Implementations
/// return one entry per input; an entry may be `None` when `needs_grad` is
/// false for that input.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// A dynamically built computation graph. Nodes are appended in execution
/// order, so the node list is always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.shape())
    }
}

/// Returns true when `AIR_CHECK_NAN=1` is set. Read once per process.
pub fn check_nan_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var("AIR_CHECK_NAN")
            .map(|v| v == "1")
            .unwrap_or(false)
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        })
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
        })
    }

    /// Records `output = op(inputs)`.
    ///
    /// The backward rule is dropped when no input requires a gradient, so
    /// constant subgraphs cost nothing in [`Graph::backward`].
    pub fn apply<'g>(
        &'g self,
        inputs: &[Var<'g>],
        output: Tensor,
        op: impl Backward + 'static,
    ) -> Var<'g> {
        if cfg!(debug_assertions) || check_nan_enabled() {
            self.check_finite(inputs, &output, op.name());
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.graph, self), "Var from another graph");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
            requires_grad,
        })
    }

    fn check_finite(&self, inputs: &[Var<'_>], output: &Tensor, name: &str) {
        if output.all_finite() {
            return;
        }
        let nodes = self.nodes.borrow();
        let inputs_finite = inputs.iter().all(|v| nodes[v.id].value.all_finite());
        assert!(
            !inputs_finite,
            "{name} produced a non-finite value from finite inputs"
        );
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Every leaf created with [`Graph::param`] receives a gradient of its own
    /// shape; leaves the root does not depend on get zeros. Gradients
    /// accumulate across fan-out.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.graph, self) {
            return Err(TensorError::Argument {
                op: "backward",
                detail: "root belongs to a different graph".into(),
            });
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root_node.value.shape().to_vec()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.len(),
                    nodes[input].value.len(),
                    "{} returned a gradient of the wrong size",
                    op.name()
                );
                match &mut grads[input] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g.reshaped(nodes[input].value.shape().to_vec())?),
                }
            }
        }

        let mut leaf_grads = vec![None; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad && node.inputs.is_empty() {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                leaf_grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}
