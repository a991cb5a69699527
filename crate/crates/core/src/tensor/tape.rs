use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

/// Maps the upstream gradient of a node to gradients for each parent.
///
/// The flag slice says which parents need a gradient; entries for the others
/// may be `None` and are ignored.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records primitive operations in execution order.
///
/// Node ids are assigned sequentially, so every parent precedes its
/// children and a reverse sweep is a valid topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A differentiable input: receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, true, Vec::new(), None)
    }

    /// A value the loss is not differentiated against.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, false, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(
        &self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records the result of a primitive. The backward closure is dropped
    /// when no parent requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        if requires_grad {
            self.insert(
                value,
                true,
                parents.iter().map(|p| p.id).collect(),
                Some(Box::new(backward)),
            )
        } else {
            self.insert(value, false, Vec::new(), None)
        }
    }

    /// Reverse sweep from a scalar loss. Every leaf reachable from `loss`
    /// receives its total derivative. A tape supports a single sweep.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::NoTape);
        }
        if self.consumed.get() {
            return Err(TensorError::BackwardRepeated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                got: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(TensorError::NoTape);
        }
        self.consumed.set(true);

        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(vec![1.0]);
        let mut out = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        out.insert(id, Tensor::from_parts(node.value.shape().to_vec(), grad));
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = f(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(g.len(), nodes[p].value.len());
                        match &mut pending[p] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The current value, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        self.value()
    }

    /// Same value re-entered as a constant; gradients stop here.
    pub fn stop_gradient(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

/// Gradients of the leaves reached by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id())
    }

    /// Gradient of `var`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::BackwardRepeated)
        ));
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Rank { .. })));
        let c = tape.constant(Tensor::ones(&[2])).sum();
        assert!(matches!(tape.backward(c), Err(TensorError::NoTape)));
        let other = Tape::new();
        let y = other.leaf(Tensor::ones(&[1])).sum();
        assert!(matches!(tape.backward(y), Err(TensorError::NoTape)));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let z = y.add(x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.len(), 1);
    }
}
