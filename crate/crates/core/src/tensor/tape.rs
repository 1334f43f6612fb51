use std::collections::{BTreeMap, HashMap};

use super::DenseTensor;
use crate::error::{Error, Result};
use crate::nn::ParamId;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a DenseTensor>,
    pub output: &'a DenseTensor,
    pub grad: &'a [f32],
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// Whether input `i` participates in differentiation.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Maps the output cotangent to one cotangent per input (`None` when not needed).
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    value: DenseTensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Per-step record of operations. Inputs always precede the operations that use
/// them, so a reverse sweep over the node list is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn bind_param(&mut self, var: Var, id: ParamId) {
        self.params.push((var, id));
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward rule is dropped when no input needs a
    /// gradient. Fails if the forward value contains NaN or Inf.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: DenseTensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                leaves,
                params: self.params,
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        leaves.insert(i, DenseTensor::new(node.value.shape(), g)?);
                    }
                }
                Some(rule) => {
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        output: &node.value,
                        grad: &g,
                        needs: node
                            .inputs
                            .iter()
                            .map(|v| self.nodes[v.0].requires_grad)
                            .collect(),
                    };
                    let input_grads = rule(&ctx);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                    for (v, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), self.nodes[v.0].value.numel(), "op {}", node.op);
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, DenseTensor>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.leaves.get(&v.0)
    }

    /// Gradients summed per parameter across every binding made during the step.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Vec<f32>> {
        let mut out: BTreeMap<ParamId, Vec<f32>> = BTreeMap::new();
        for (var, id) in &self.params {
            if let Some(g) = self.leaves.get(&var.0) {
                match out.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(*id, g.data().to_vec());
                    }
                }
            }
        }
        out
    }
}
