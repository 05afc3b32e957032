use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// `backward` receives the operation's output value and the gradient of the
/// loss with respect to it, and accumulates input gradients through the sink.
pub trait BackwardOp {
    fn name(&self) -> &'static str;
    fn backward(&self, out: &Tensor, out_grad: &[f64], sink: &mut GradSink<'_>);
}

/// Gradient accumulator handed to [`BackwardOp::backward`].
pub struct GradSink<'a> {
    values: &'a [Tensor],
    requires: &'a [bool],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.values[v.0]
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable gradient buffer of `v`, zero-initialised on first use.
    /// `None` when `v` does not require a gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.grad_mut(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// One executed operator as seen by the FLOPs counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpCount {
    pub kind: &'static str,
    pub flops: u64,
}

/// A tape of executed operations.
///
/// Values are immutable once recorded. A graph is single-threaded; distinct
/// graphs share nothing and may live on distinct threads.
pub struct Graph {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Option<Box<dyn BackwardOp>>>,
    grad_enabled: bool,
    counts: Option<Vec<OpCount>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.values.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
            counts: None,
        }
    }

    /// A graph that never records backward rules.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables per-operator FLOPs recording.
    pub fn with_op_counts(mut self) -> Self {
        self.counts = Some(Vec::new());
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that receives a gradient (unless the graph is inference-only).
    pub fn param(&mut self, t: Tensor) -> Var {
        let req = self.grad_enabled;
        self.push_leaf(t, req)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, requires: bool) -> Var {
        self.values.push(t);
        self.requires.push(requires);
        self.grads.push(None);
        self.ops.push(None);
        Var(self.values.len() - 1)
    }

    /// Records the result of an operation over `inputs`. The backward rule is
    /// kept only when some input requires a gradient.
    pub fn record<O: BackwardOp + 'static>(&mut self, value: Tensor, inputs: &[Var], op: O) -> Var {
        let requires = self.grad_enabled && inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        self.ops
            .push(if requires { Some(Box::new(op)) } else { None });
        Var(self.values.len() - 1)
    }

    pub fn count(&mut self, kind: &'static str, flops: u64) {
        if let Some(c) = &mut self.counts {
            c.push(OpCount { kind, flops });
        }
    }

    pub fn op_counts(&self) -> &[OpCount] {
        self.counts.as_deref().unwrap_or(&[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.values[v.0].numel()])
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.ops[v.0].as_ref().map(|op| op.name())
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Afterwards every requires-grad leaf reachable from `loss` holds a
    /// populated gradient; leaves that require a gradient but are not
    /// reachable get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.values[loss.0].shape()
                ),
            ));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.ops[i].as_ref() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                values: &self.values,
                requires: &self.requires,
                grads: &mut self.grads,
            };
            op.backward(&self.values[i], &g, &mut sink);
            self.grads[i] = Some(g);
        }
        for i in 0..self.values.len() {
            if self.requires[i] && self.ops[i].is_none() && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].numel()]);
            }
        }
        Ok(())
    }
}
