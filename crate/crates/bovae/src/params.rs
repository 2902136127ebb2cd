//! Named parameter storage shared by all models, plus the Adam optimizer.
//!
//! Master values live here between steps; each training step binds them
//! into a fresh graph, reads gradients back out, and updates in place.

use std::cell::RefCell;

use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    /// Xavier-uniform initialized matrix parameter.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Replaces every value with the same-named tensor from `named`,
    /// checking shapes. Extra or missing names are an error.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<(), String> {
        if named.len() != self.entries.len() {
            return Err(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                named.len(),
                self.entries.len()
            ));
        }
        for (name, tensor) in named {
            let id = self
                .find(name)
                .ok_or_else(|| format!("checkpoint parameter {name} not in model"))?;
            let cur = self.value(id);
            if cur.shape() != tensor.shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                    tensor.shape(),
                    cur.shape()
                ));
            }
            *self.value_mut(id) = tensor.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Memoized bridge from a ParamStore into one graph instance. Trainable
/// bindings become leaves with gradients; frozen bindings become constants
/// so backward never touches them.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    nodes: RefCell<Vec<Option<NodeId>>>,
}

impl<'s> Binder<'s> {
    pub fn trainable(store: &'s ParamStore) -> Self {
        Binder { store, trainable: true, nodes: RefCell::new(vec![None; store.len()]) }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Binder { store, trainable: false, nodes: RefCell::new(vec![None; store.len()]) }
    }

    pub fn node(&self, g: &Graph, id: ParamId) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        if let Some(n) = nodes[id.0] {
            return n;
        }
        let t = self.store.value(id).clone();
        let n = if self.trainable { g.param(t) } else { g.constant(t) };
        nodes[id.0] = Some(n);
        n
    }

    /// Pre-binds `id` to an existing node so later lookups return it.
    /// Lets a probe own one parameter's leaf while the rest stay as built.
    pub fn override_node(&self, id: ParamId, node: NodeId) {
        self.nodes.borrow_mut()[id.0] = Some(node);
    }

    /// Gradients of every parameter bound into `g`, in store order.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Tensor)> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for (i, bound) in nodes.iter().enumerate() {
            if let Some(n) = bound {
                if let Some(grad) = g.grad(*n) {
                    out.push((ParamId(i), grad));
                }
            }
        }
        out
    }
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = store.value_mut(*id).data_mut();
            for (p, &gp) in grad.data().iter().enumerate() {
                m[p] = self.beta1 * m[p] + (1.0 - self.beta1) * gp;
                v[p] = self.beta2 * v[p] + (1.0 - self.beta2) * gp * gp;
                let mhat = m[p] / bc1;
                let vhat = v[p] / bc2;
                w[p] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
