//! Reverse-mode execution graph over the closed operator set.
//!
//! Every forward op appends one entry holding its output value and the ids of
//! its operands. [`Graph::backward`] walks the entries in reverse and
//! accumulates gradients with the analytic kernels from [`super::kernels`].

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self as k, Conv1dAttrs, NormCache};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<T> {
    Input,
    Param,
    Conv1d { x: Var, w: Var, b: Option<Var>, attrs: Conv1dAttrs },
    TransposedConv { x: Var, w: Var, stride: usize },
    Interpolate { x: Var, factor: usize },
    PixelShuffle { x: Var, r: usize },
    Relu { x: Var },
    Prelu { x: Var, a: Var },
    Norm { x: Var, gain: Var, cache: NormCache<T>, bias: Var },
    Concat { xs: Vec<Var> },
    Add { xs: Vec<Var> },
    Mul { a: Var, b: Var },
    PadFrames { x: Var },
    TrimFrames { x: Var },
    Narrow { x: Var, start: usize },
}

struct Entry<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    id: u64,
    entries: Vec<Entry<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.entries.push(Entry { value, op });
        Var {
            graph: self.id,
            idx: self.entries.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.idx >= self.entries.len() {
            return Err(Error::Usage(format!("value {v:?} was not recorded in graph {}", self.id)));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "value from a different graph");
        &self.entries[v.idx].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Registers a named parameter. Registering the same name again returns
    /// the existing handle, which is how tied weights share one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Makes later [`param`](Self::param) calls for these names return the
    /// given handles, so existing values can stand in for named parameters.
    pub fn alias_params(&mut self, pairs: impl IntoIterator<Item = (String, Var)>) {
        for (name, v) in pairs {
            self.params.insert(name, v);
        }
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv1dAttrs) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let y = k::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), attrs)?;
        Ok(self.push(y, Op::Conv1d { x, w, b, attrs }))
    }

    pub fn transposed_conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let y = k::transposed_conv1d(self.value(x), self.value(w), stride)?;
        Ok(self.push(y, Op::TransposedConv { x, w, stride }))
    }

    pub fn interpolate(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = k::interpolate(self.value(x), factor)?;
        Ok(self.push(y, Op::Interpolate { x, factor }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = k::pixel_shuffle_1d(self.value(x), r)?;
        Ok(self.push(y, Op::PixelShuffle { x, r }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = k::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let y = k::prelu(self.value(x), self.value(a))?;
        Ok(self.push(y, Op::Prelu { x, a }))
    }

    pub fn global_layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (y, cache) = k::global_layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(y, Op::Norm { x, gain, cache, bias }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let y = k::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn add(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let y = k::add_all(&vals)?;
        Ok(self.push(y, Op::Add { xs: xs.to_vec() }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn pad_frames(&mut self, x: Var, extra: usize) -> Result<Var> {
        if extra == 0 {
            return Ok(x);
        }
        let y = k::pad_frames(self.value(x), extra)?;
        Ok(self.push(y, Op::PadFrames { x }))
    }

    pub fn trim_frames(&mut self, x: Var, len: usize) -> Result<Var> {
        if self.value(x).shape()[1] == len {
            return Ok(x);
        }
        let y = k::trim_frames(self.value(x), len)?;
        Ok(self.push(y, Op::TrimFrames { x }))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = k::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }))
    }

    /// Back-propagates the given output gradients through every recorded op.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<'_, T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        for (v, g) in seeds {
            self.check(*v)?;
            if g.shape() != self.value(*v).shape() {
                return Err(Error::dim(
                    "backward",
                    "seed",
                    format!("seed {:?} for value {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
            accumulate(&mut grads, v.idx, g.clone());
        }
        for idx in (0..self.entries.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            match &entry.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv1d { x, w, b, attrs } => {
                    let g = k::conv1d_backward(self.value(*x), self.value(*w), b.is_some(), *attrs, &dy)?;
                    accumulate(&mut grads, x.idx, g.dx);
                    accumulate(&mut grads, w.idx, g.dw);
                    if let (Some(b), Some(db)) = (b, g.db) {
                        accumulate(&mut grads, b.idx, db);
                    }
                }
                Op::TransposedConv { x, w, stride } => {
                    let (dx, dw) = k::transposed_conv1d_backward(self.value(*x), self.value(*w), *stride, &dy)?;
                    accumulate(&mut grads, x.idx, dx);
                    accumulate(&mut grads, w.idx, dw);
                }
                Op::Interpolate { x, factor } => {
                    accumulate(&mut grads, x.idx, k::interpolate_backward(&dy, *factor)?);
                }
                Op::PixelShuffle { x, r } => {
                    accumulate(&mut grads, x.idx, k::pixel_unshuffle_1d(&dy, *r)?);
                }
                Op::Relu { x } => {
                    accumulate(&mut grads, x.idx, k::relu_backward(self.value(*x), &dy));
                }
                Op::Prelu { x, a } => {
                    let (dx, da) = k::prelu_backward(self.value(*x), self.value(*a), &dy)?;
                    accumulate(&mut grads, x.idx, dx);
                    accumulate(&mut grads, a.idx, da);
                }
                Op::Norm { x, gain, cache, bias } => {
                    let (dx, dg, db) = k::global_layer_norm_backward(cache, self.value(*gain), &dy)?;
                    accumulate(&mut grads, x.idx, dx);
                    accumulate(&mut grads, gain.idx, dg);
                    accumulate(&mut grads, bias.idx, db);
                }
                Op::Concat { xs } => {
                    let mut start = 0;
                    for x in xs {
                        let c = self.value(*x).shape()[0];
                        accumulate(&mut grads, x.idx, k::narrow_channels(&dy, start, c)?);
                        start += c;
                    }
                }
                Op::Add { xs } => {
                    for x in xs {
                        accumulate(&mut grads, x.idx, dy.clone());
                    }
                }
                Op::Mul { a, b } => {
                    accumulate(&mut grads, a.idx, k::mul(&dy, self.value(*b))?);
                    accumulate(&mut grads, b.idx, k::mul(&dy, self.value(*a))?);
                }
                Op::PadFrames { x, .. } => {
                    let f = self.value(*x).shape()[1];
                    accumulate(&mut grads, x.idx, k::trim_frames(&dy, f)?);
                }
                Op::TrimFrames { x } => {
                    let full = self.value(*x).shape()[1];
                    let f = dy.shape()[1];
                    accumulate(&mut grads, x.idx, k::pad_frames(&dy, full - f)?);
                }
                Op::Narrow { x, start } => {
                    let (c, f) = self.value(*x).dims2()?;
                    let len = dy.shape()[0];
                    let mut full = Tensor::zeros(&[c, f]);
                    full.data_mut()[start * f..(start + len) * f].copy_from_slice(dy.data());
                    accumulate(&mut grads, x.idx, full);
                }
            }
        }
        Ok(Gradients { graph: self, grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`]: gradients of inputs and parameters.
pub struct Gradients<'g, T> {
    graph: &'g Graph<T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<'_, T> {
    /// Gradient with respect to an input or parameter. Values the seeds do
    /// not reach get an all-zero gradient.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        self.graph.check(v)?;
        match &self.graph.entries[v.idx].op {
            Op::Input | Op::Param => {}
            _ => {
                return Err(Error::Usage(
                    "gradients are retained only for graph inputs and parameters".into(),
                ))
            }
        }
        Ok(self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape())))
    }

    /// Gradient of every registered parameter, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.graph
            .params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v).expect("registered param")))
            .collect()
    }
}
