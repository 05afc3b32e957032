//! Parameter storage, forward contexts and the stateful layers built on the
//! functional ops.

use super::{batch_norm, conv2d, RunningStats};
use crate::error::Result;
use crate::tensor::{ops, Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; serialized but never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    kind: ParamKind,
}

/// Named, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(Entry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal: `std = sqrt(2 / fan_in)`.
    Kaiming,
    Zeros,
}

/// Binds parameters to a graph for one forward pass.
///
/// Parameters enter the graph lazily on first use, so parameters of
/// disabled branches never appear in it.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Ctx {
            graph,
            store,
            bound: vec![None; n],
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = match self.store.kind(id) {
            ParamKind::Trainable => self.graph.param(t),
            ParamKind::Buffer => self.graph.constant(t),
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Substitutes an existing graph value for a parameter (used to
    /// differentiate with respect to externally supplied tensors).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    fn running_stats(&self, mean: ParamId, var: ParamId) -> RunningStats {
        let mut s = RunningStats::new(self.store.get(mean).numel());
        s.mean = self.store.get(mean).data().to_vec();
        s.var = self.store.get(var).data().to_vec();
        s
    }

    fn store_running_stats(&mut self, mean: ParamId, var: ParamId, s: &RunningStats) {
        self.store.get_mut(mean).data_mut().copy_from_slice(&s.mean);
        self.store.get_mut(var).data_mut().copy_from_slice(&s.var);
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let id = ParamId(i);
                (self.store.kind(id) == ParamKind::Trainable && self.graph.requires_grad(v))
                    .then(|| (id, self.graph.grad_or_zeros(v)))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        assert!(k == 1 || k == 3, "only 1×1 and 3×3 kernels are supported");
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::Kaiming => Tensor::randn(shape, (2.0 / (cin * k * k) as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout]), ParamKind::Trainable));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn pointwise(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(store, rng, name, cin, cout, 1, 1, bias, Init::Kaiming)
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        conv2d(ctx.graph, x, w, b, self.stride, self.padding())
    }

    /// FLOPs for an output of `out_h×out_w` per image.
    pub fn flops(&self, out_h: usize, out_w: usize) -> u64 {
        2 * (self.cin * self.cout * self.k * self.k * out_h * out_w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), ParamKind::Buffer),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let mut stats = ctx.running_stats(self.running_mean, self.running_var);
        let training = ctx.training();
        let y = batch_norm(ctx.graph, x, gamma, beta, &mut stats, training)?;
        if training {
            ctx.store_running_stats(self.running_mean, self.running_var, &stats);
        }
        Ok(y)
    }
}

/// Convolution, batch normalisation and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, k, stride, false, Init::Kaiming),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
            relu: true,
        }
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ops::relu(ctx.graph, y) } else { y })
    }
}
