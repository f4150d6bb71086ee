//! Named parameter storage and the small layer vocabulary the models are
//! built from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Rng, Tensor, Var};

/// Disjoint groups every model parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Image,
    Text,
    Fusion,
    Heads,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Image, Partition::Text, Partition::Fusion, Partition::Heads];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Image => "image",
            Partition::Text => "text",
            Partition::Fusion => "fusion",
            Partition::Heads => "heads",
        }
    }
}

/// A named tensor. It is trainable iff its tensor requires a gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub tensor: Tensor,
}

impl Param {
    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

/// Ordered parameter collection with name lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, partition: Partition, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            partition,
            tensor: tensor.with_requires_grad(true),
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.params[id].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.tensor_mut(name)?.set_requires_grad(!frozen);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.set_requires_grad(false));
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.set_requires_grad(true));
    }

    /// Sets every parameter trainable iff `pred` holds for it.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&Param) -> bool) {
        for p in &mut self.params {
            let on = pred(p);
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn unfrozen_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Digest of names and values of one partition.
    pub fn checksum(&self, partition: Partition) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.partition == partition) {
            h.update(p.name.as_bytes());
            h.update(p.tensor.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<Partition, String> {
        Partition::ALL.iter().map(|&p| (p, self.checksum(p))).collect()
    }

    /// Trainable tensors in store order, for an optimizer step. Trainable
    /// parameters that received no gradient get a zero gradient.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|p| !p.frozen())
            .map(|p| {
                if p.tensor.grad().is_none() {
                    let z = vec![0.0; p.tensor.numel()];
                    p.tensor.accumulate_grad(&z).expect("same size");
                }
                &mut p.tensor
            })
            .collect()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Names of parameters currently holding a gradient.
    pub fn with_grad(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.tensor.grad().is_some())
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Per-graph view of a [`ParamStore`]: each parameter becomes a leaf the
/// first time it is used.
#[derive(Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

/// Leaves recorded by a [`Binder`], kept after the store borrow ends.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pairs: Vec<(usize, Var)>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let v = g.leaf(&self.store.params[id].tensor);
        self.bound[id] = Some(v);
        Ok(v)
    }

    pub fn finish(self) -> Bound {
        Bound {
            pairs: self
                .bound
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (i, v)))
                .collect(),
        }
    }
}

impl Bound {
    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|(i, _)| *i)
    }

    /// Copies the graph's gradients into the store's tensors.
    pub fn write_grads(&self, g: &Graph, store: &mut ParamStore) -> Result<()> {
        for &(id, v) in &self.pairs {
            if let Some(gr) = g.grad(v) {
                store.params[id].tensor.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }
}

// ---- initialisation --------------------------------------------------------

pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, 0.0, std)).expect("positive extents")
}

/// Registers `{prefix}.w` (in×out, N(0, 1/in)) and, if `bias`, `{prefix}.b`.
pub fn add_linear(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    part: Partition,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.add(&format!("{prefix}.w"), part, normal_tensor(rng, fan_in, fan_out, std))?;
    if bias {
        store.add(&format!("{prefix}.b"), part, Tensor::zeros(&[1, fan_out]))?;
    }
    Ok(())
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, part: Partition, d: usize) -> Result<()> {
    store.add(&format!("{prefix}.gamma"), part, Tensor::full(&[1, d], 1.0))?;
    store.add(&format!("{prefix}.beta"), part, Tensor::zeros(&[1, d]))?;
    Ok(())
}

/// Pre-norm transformer block: self-attention and a GELU MLP, both residual.
pub fn add_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    part: Partition,
    d: usize,
    mlp_ratio: usize,
) -> Result<()> {
    add_layer_norm(store, &format!("{prefix}.ln1"), part, d)?;
    for n in ["q", "k", "v"] {
        add_linear(store, rng, &format!("{prefix}.attn.{n}"), part, d, d, false)?;
    }
    store.add(
        &format!("{prefix}.attn.o.w"),
        part,
        normal_tensor(rng, d, d, 0.5 / (d as f64).sqrt()),
    )?;
    add_layer_norm(store, &format!("{prefix}.ln2"), part, d)?;
    add_linear(store, rng, &format!("{prefix}.mlp.fc1"), part, d, d * mlp_ratio, true)?;
    add_linear(store, rng, &format!("{prefix}.mlp.fc2"), part, d * mlp_ratio, d, true)?;
    store.tensor_mut(&format!("{prefix}.mlp.fc2.w"))?.data_mut().iter_mut().for_each(|x| *x *= 0.5);
    Ok(())
}

// ---- forward helpers ------------------------------------------------------

pub fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if b.store().contains(&bias) {
        let bv = b.var(g, &bias)?;
        g.add_row(y, bv)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.var(g, &format!("{prefix}.gamma"))?;
    let beta = b.var(g, &format!("{prefix}.beta"))?;
    let n = g.layer_norm(x);
    let s = g.mul_row(n, gamma)?;
    g.add_row(s, beta)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows with projections
/// `{prefix}.{q,k,v,o}.w`. Returns the projected context.
pub fn attention(g: &mut Graph, b: &mut Binder, prefix: &str, q_in: Var, kv_in: Var, heads: usize) -> Result<Var> {
    let q = linear(g, b, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, b, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, b, &format!("{prefix}.v"), kv_in)?;
    let ctx = attend(g, q, k, v, heads)?.0;
    linear(g, b, &format!("{prefix}.o"), ctx)
}

/// Scaled dot-product attention split over `heads` column blocks. Returns
/// the concatenated context and each head's attention matrix.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} columns do not split into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh)?);
        attn.push(a);
    }
    let ctx = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((ctx, attn))
}

pub fn block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, b, &format!("{prefix}.attn"), h, h, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}
