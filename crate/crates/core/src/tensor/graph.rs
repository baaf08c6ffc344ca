use super::{Real, Tensor, NORM_EPS};
use crate::error::{contract_err, Result};

/// Backward rule of one recorded operation.
///
/// Receives the gradient w.r.t. the operation's output, the input values and
/// the output value; returns one gradient per input (`None` when the input
/// receives no gradient from this rule).
pub trait Function {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

impl<F> Function for F
where
    F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>,
{
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        self(grad, inputs, output)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    func: Option<Box<dyn Function>>,
    tracked: bool,
}

/// Append-only record of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    eps: Real,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_eps(NORM_EPS)
    }

    /// Graph whose norm and division guards use `eps`.
    pub fn with_eps(eps: Real) -> Self {
        Self {
            nodes: Vec::new(),
            eps,
        }
    }

    pub fn eps(&self) -> Real {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records `output = f(inputs)` with a custom backward rule.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor, func: impl Function + 'static) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let parents = inputs.iter().map(|v| v.0).collect();
        let func: Option<Box<dyn Function>> = if tracked {
            Some(Box::new(func))
        } else {
            None
        };
        self.push(output, parents, func, tracked)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        func: Option<Box<dyn Function>>,
        tracked: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            func,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let seed = Tensor::ones(self.nodes[loss.0].value.shape());
        self.backward_with_seed(loss, seed)
    }

    /// Reverse pass seeded with an explicit output gradient (a vector-Jacobian
    /// product). Consumes the graph.
    pub fn backward_with_seed(mut self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.nodes[out.0].value.shape() {
            return contract_err(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[out.0].value.shape()
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(func) = self.nodes[i].func.take() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &before[p].value).collect();
            let parent_grads = func.backward(g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !before[p].tracked {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
            // Interior values are no longer needed once their rule has run.
            if !self.nodes[i].parents.is_empty() {
                self.nodes[i].value = Tensor::scalar(0.0);
            }
        }
        // Every tracked node upstream of `out` ends up with a gradient, even
        // if nothing flowed into it.
        let reach = self.reachable(out.0);
        for (i, node) in self.nodes.iter().enumerate() {
            if reach[i] && node.tracked && grads[i].is_none() && node.parents.is_empty() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn reachable(&self, out: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![out];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            stack.extend(self.nodes[i].parents.iter().copied());
        }
        seen
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
