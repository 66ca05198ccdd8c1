//! Named parameter storage and the per-forward [`Session`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named parameter collection. Order is registration order and is
/// the checkpoint manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replace every value with its nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in p.tensor.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Overwrite values from another store with the same manifest.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::contract("parameter manifests differ in length"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::contract(format!("parameter `{}` does not match `{}`", a.name, b.name)));
            }
            a.tensor.data_mut().copy_from_slice(b.tensor.data());
        }
        Ok(())
    }
}

/// One forward pass: a fresh [`Graph`] with parameters bound lazily as
/// leaves, plus the dropout stream when training.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track_grad: bool,
    dropout: Option<Rng>,
}

impl<'p> Session<'p> {
    /// Inference: no gradients, no dropout.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_graph(params, Graph::new(), false, None)
    }

    /// Gradients tracked; `dropout` enables dropout with that stream.
    pub fn training(params: &'p ParamStore, dropout: Option<Rng>) -> Self {
        Self::with_graph(params, Graph::new(), true, dropout)
    }

    pub fn with_graph(params: &'p ParamStore, graph: Graph, track_grad: bool, dropout: Option<Rng>) -> Self {
        Self {
            graph,
            params,
            bound: vec![None; params.len()],
            track_grad,
            dropout,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for parameter `id`; bound once per session so repeated uses
    /// accumulate into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.track_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Inverted dropout; identity at inference or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.graph.value(x).len();
        let factors = (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        self.graph.mul_const(x, factors)
    }

    /// Gradient of every parameter after `graph.backward`, zeros for
    /// parameters that were not reached.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.graph.grad(v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.params.get(id).numel()])
            })
            .collect()
    }
}

/// Finite-difference check over every coordinate of every parameter in
/// `store`; `f` builds a scalar loss inside the session it is given.
/// Same error measure as [`crate::tensor::finite_diff_check`].
pub fn finite_diff_check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    Ok(finite_diff_report_params(store, step, f)?
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max))
}

/// Per-parameter outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Largest `|analytic|` and `|central|` over the parameter.
    pub max_analytic: f64,
    pub max_central: f64,
}

/// [`finite_diff_check_params`] broken down per parameter.
pub fn finite_diff_report_params<F>(store: &ParamStore, step: f64, mut f: F) -> Result<Vec<GradCheck>>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let analytic = {
        let mut s = Session::training(store, None);
        let loss = f(&mut s)?;
        s.graph.backward(loss)?;
        s.param_grads()
    };
    let mut eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(st);
        let out = f(&mut s)?;
        let v = s.graph.scalar(out);
        if !v.is_finite() {
            return Err(Error::numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut r = GradCheck {
            name: store.name(id).into(),
            max_rel_error: 0.0,
            max_analytic: 0.0,
            max_central: 0.0,
        };
        for i in 0..store.get(id).numel() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let central = (fp - fm) / (2.0 * step);
            let a = analytic[id.0][i];
            r.max_rel_error = r.max_rel_error.max((a - central).abs() / a.abs().max(central.abs()).max(1e-8));
            r.max_analytic = r.max_analytic.max(a.abs());
            r.max_central = r.max_central.max(central.abs());
        }
        report.push(r);
    }
    Ok(report)
}
