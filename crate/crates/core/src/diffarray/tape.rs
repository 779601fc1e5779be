use std::sync::atomic::{AtomicU32, Ordering};

use super::{Float, Tensor};
use crate::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
    tape: u32,
}

/// What a backward closure sees for its node.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub output: &'a [T],
    pub inputs: Vec<&'a [T]>,
    /// Whether each input wants a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, each matching the input's length.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
pub struct Tape<T: Float> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        &self.nodes[v.id]
    }

    /// Records an array that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// Records an array whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            op: if requires_grad { "leaf" } else { "const" },
            shape,
            value: t.into_data(),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{op}");
        let requires_grad = inputs.iter().any(|v| self.node(*v).requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for idx in (0..=loss.id).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value[..]).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| self.nodes[i].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input].value.len(), "{}", node.op);
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    tape: u32,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "Var used with a foreign tape");
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.tape, self.tape, "Var used with a foreign tape");
        self.grads[v.id].as_deref()
    }
}
