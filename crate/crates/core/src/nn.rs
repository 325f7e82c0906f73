//! Parameter storage and the forward context that wires parameters into a
//! tape. Parameters live outside any graph as named tensors; each forward
//! pass loads the ones it touches as graph leaves, and training applies
//! updates back to the store between passes.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Tensor, TensorId};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub learnable: bool,
}

/// Named tensors in creation order. Creation order is the canonical order
/// for optimizer state and checkpoints, so builders must register parameters
/// deterministically.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, tensor: Tensor, learnable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, tensor, learnable });
        id
    }

    pub fn learnable(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, true)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.numel() != values.len() {
            return Err(Error::shape(
                "param_store",
                format!("'{}' holds {} values, got {}", entry.name, entry.tensor.numel(), values.len()),
            ));
        }
        entry.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Ids of learnable entries, in creation order.
    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.learnable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Mutable views of every learnable buffer, in creation order. Parallel
    /// to [`ParamStore::learnable_ids`] and the gradient list, which is what
    /// the optimizer step consumes.
    pub fn learnable_data_mut(&mut self) -> Vec<&mut [f64]> {
        self.entries
            .iter_mut()
            .filter(|e| e.learnable)
            .map(|e| e.tensor.data_mut())
            .collect()
    }

    /// Total learnable scalar count.
    pub fn learnable_scalars(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    /// Two distinct buffers borrowed mutably at once (for running stats).
    fn two_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (lo[a.0].tensor.data_mut(), hi[0].tensor.data_mut())
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            let (bm, am) = (lo[b.0].tensor.data_mut(), hi[0].tensor.data_mut());
            (am, bm)
        }
    }
}

/// Linear layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

/// Normalization parameters plus running-statistic buffers.
#[derive(Debug, Clone, Copy)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Fan-in-scaled uniform init: U(-1/sqrt(cin), 1/sqrt(cin)) for weights and bias.
pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> LinearP {
    let bound = 1.0 / (cin as f64).sqrt();
    let w = uniform(rng, cin * cout, bound);
    let b = uniform(rng, cout, bound);
    LinearP {
        w: store.learnable(format!("{name}/w"), Tensor::new(vec![cin, cout], w).unwrap()),
        b: store.learnable(format!("{name}/b"), Tensor::new(vec![cout], b).unwrap()),
    }
}

/// Zero-initialized linear; used for the last layer of residual branches so
/// a fresh block starts as an identity.
pub fn init_linear_zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> LinearP {
    LinearP {
        w: store.learnable(format!("{name}/w"), Tensor::zeros(vec![cin, cout])),
        b: store.learnable(format!("{name}/b"), Tensor::zeros(vec![cout])),
    }
}

pub fn init_norm(store: &mut ParamStore, name: &str, c: usize) -> NormP {
    NormP {
        gamma: store.learnable(format!("{name}/gamma"), Tensor::full(vec![c], 1.0)),
        beta: store.learnable(format!("{name}/beta"), Tensor::zeros(vec![c])),
        running_mean: store.buffer(format!("{name}/running_mean"), Tensor::zeros(vec![c])),
        running_var: store.buffer(format!("{name}/running_var"), Tensor::full(vec![c], 1.0)),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    use rand::RngExt;
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
}

/// Stage-sharing instrumentation filled during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Counters {
    /// One entry (stage label) per neighbor-table build in an ABS stage.
    pub abs_tables: Vec<String>,
    /// One entry per neighbor-table build in a REF stage.
    pub ref_tables: Vec<String>,
    /// One entry per positional-code tensor build in a REF stage.
    pub ref_codes: Vec<String>,
    /// Geometry work (FPS / KNN / interpolation neighbor search), counted as
    /// comparisons; kept out of the FLOP totals.
    pub comparisons: u64,
}

/// Everything one forward pass needs: the tape, the parameter store, the
/// mode, and instrumentation.
pub struct ForwardCtx<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    pub counters: Counters,
    param_map: Vec<Option<TensorId>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode) -> Self {
        let n = store.len();
        ForwardCtx {
            graph: Graph::new(),
            store,
            mode,
            counters: Counters::default(),
            param_map: vec![None; n],
        }
    }

    /// Load a learnable parameter into the tape (memoized, so several uses
    /// share one leaf and gradient contributions accumulate there).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.param_map[id.0] {
            return t;
        }
        let tensor = self.store.tensor(id).clone();
        let t = self.graph.param(tensor);
        self.param_map[id.0] = Some(t);
        t
    }

    pub fn linear(&mut self, x: TensorId, lp: &LinearP) -> Result<TensorId> {
        let w = self.param(lp.w);
        let b = self.param(lp.b);
        self.graph.linear(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, x: TensorId, np: &NormP) -> Result<TensorId> {
        let gamma = self.param(np.gamma);
        let beta = self.param(np.beta);
        let (mean, var) = self.store.two_mut(np.running_mean, np.running_var);
        self.graph
            .batch_norm(x, gamma, beta, mean, var, self.mode, NORM_EPS, NORM_MOMENTUM)
    }

    /// linear -> norm -> relu, the standard block used throughout.
    /// The norm and activation are attributed to the norm_act cost bucket;
    /// the linear keeps the caller's current bucket.
    pub fn linear_norm_relu(&mut self, x: TensorId, lp: &LinearP, np: &NormP) -> Result<TensorId> {
        let kind = self.graph.kind();
        let h = self.linear(x, lp)?;
        self.graph.set_kind(crate::tensor::CostKind::NormAct);
        let h = self.batch_norm(h, np)?;
        let h = self.graph.relu(h);
        self.graph.set_kind(kind);
        Ok(h)
    }

    /// Gradient for every learnable parameter, in store creation order.
    /// Parameters never touched by this pass get zero gradients.
    pub fn learnable_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .learnable_ids()
            .iter()
            .map(|id| match self.param_map[id.0] {
                Some(t) => self
                    .graph
                    .grad(t)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.store.tensor(*id).numel()]),
                None => vec![0.0; self.store.tensor(*id).numel()],
            })
            .collect()
    }
}
