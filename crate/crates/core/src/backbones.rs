//! Collaborative-filtering backbones trained pointwise under weighted BCE:
//! GMF, NeuMF and CDAE.
//!
//! Every backbone exposes the same surface: a weighted mean loss over a batch
//! of `(user, item, label)` samples that also returns the raw per-sample BCE,
//! gradient accumulation into a same-shaped buffer, and full-catalog scoring
//! for ranking. Sample weights are treated as constants.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::ingest::InteractionDataset;
use crate::neural::{
    bce_logit_grad, bce_loss, load_tensors, read_container, sigmoid, write_container, Activation,
    DenseLayer, EmbeddingTable, Parameters, TensorView, TensorViewMut,
};
use crate::seed::{rng_for, Purpose};

/// Standard deviation of the Normal used for embedding initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmf,
    NeuMf,
    Cdae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gmf => "gmf",
            ModelKind::NeuMf => "neumf",
            ModelKind::Cdae => "cdae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmf" => Ok(ModelKind::Gmf),
            "neumf" => Ok(ModelKind::NeuMf),
            "cdae" => Ok(ModelKind::Cdae),
            other => Err(contract(format!("unknown model kind {other:?}"))),
        }
    }
}

/// One pointwise training example; `label` is 1 for observed, 0 for sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub user: u32,
    pub item: u32,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// `mean(w * l)` over the batch.
    pub loss: f64,
    /// Unweighted BCE per sample, in batch order.
    pub per_sample: Vec<f64>,
}

/// Each user's observed training items; the CDAE input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRows {
    rows: Vec<Vec<u32>>,
}

impl UserRows {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        Self {
            rows: ds.items_by_user(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        Self { rows }
    }

    pub fn row(&self, user: u32) -> &[u32] {
        self.rows.get(user as usize).map_or(&[], Vec::as_slice)
    }

    pub fn num_users(&self) -> usize {
        self.rows.len()
    }
}

/// Dropout mask over CDAE input rows for one batch. Kept entries are rescaled
/// by `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    rate: f64,
    kept: FxHashMap<u32, Vec<u32>>,
}

impl Corruption {
    pub fn sample<R: Rng + ?Sized>(
        rows: &UserRows,
        users: impl IntoIterator<Item = u32>,
        rate: f64,
        rng: &mut R,
    ) -> Self {
        let mut kept = FxHashMap::default();
        for u in users {
            if kept.contains_key(&u) {
                continue;
            }
            let row: Vec<u32> = rows
                .row(u)
                .iter()
                .copied()
                .filter(|_| rate == 0.0 || rng.random::<f64>() >= rate)
                .collect();
            kept.insert(u, row);
        }
        Self { rate, kept }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub fn kept(&self, user: u32) -> Option<&[u32]> {
        self.kept.get(&user).map(Vec::as_slice)
    }
}

/// Side inputs a forward pass may need beyond `(user, item)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchContext<'a> {
    pub rows: Option<&'a UserRows>,
    pub corruption: Option<&'a Corruption>,
}

fn check_batch(batch: &[Sample], weights: &[f64], users: usize, items: usize) -> Result<()> {
    if batch.len() != weights.len() {
        return Err(contract(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(contract(format!("sample weight {w} is not a finite nonnegative value")));
    }
    for s in batch {
        if s.user as usize >= users || s.item as usize >= items {
            return Err(contract(format!(
                "sample ({}, {}) outside {}x{}",
                s.user, s.item, users, items
            )));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generalized matrix factorization: `sigmoid(h . (p_u * q_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmf {
    pub user_embeddings: EmbeddingTable,
    pub item_embeddings: EmbeddingTable,
    pub output_weights: Vec<f64>,
}

impl Gmf {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            user_embeddings: EmbeddingTable::zeros(num_users, dim),
            item_embeddings: EmbeddingTable::zeros(num_items, dim),
            output_weights: vec![0.0; dim],
        }
    }

    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let user_embeddings = EmbeddingTable::normal(num_users, dim, EMBEDDING_INIT_STD, rng);
        let item_embeddings = EmbeddingTable::normal(num_items, dim, EMBEDDING_INIT_STD, rng);
        let output_weights = DenseLayer::glorot(dim, 1, Activation::Identity, rng).weight;
        Self {
            user_embeddings,
            item_embeddings,
            output_weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.output_weights.len()
    }

    fn logit(&self, u: u32, i: u32) -> f64 {
        let p = self.user_embeddings.row(u as usize);
        let q = self.item_embeddings.row(i as usize);
        p.iter()
            .zip(q)
            .zip(&self.output_weights)
            .map(|((a, b), h)| h * a * b)
            .sum()
    }

    pub fn forward(&self, u: u32, i: u32) -> Result<f64> {
        if u as usize >= self.user_embeddings.rows() || i as usize >= self.item_embeddings.rows() {
            return Err(contract(format!("index ({u}, {i}) out of range")));
        }
        Ok(sigmoid(self.logit(u, i)))
    }

    pub fn weighted_batch_loss(&self, batch: &[Sample], weights: &[f64], grad: &mut Self) -> Result<BatchLoss> {
        check_batch(batch, weights, self.user_embeddings.rows(), self.item_embeddings.rows())?;
        let b = batch.len().max(1) as f64;
        let d = self.dim();
        let mut total = 0.0;
        let mut per_sample = Vec::with_capacity(batch.len());
        for (s, &w) in batch.iter().zip(weights) {
            let y_hat = sigmoid(self.logit(s.user, s.item));
            let l = bce_loss(y_hat, s.label);
            per_sample.push(l);
            total += w * l;
            let g = w * bce_logit_grad(y_hat, s.label) / b;
            if g == 0.0 {
                continue;
            }
            let p = self.user_embeddings.row(s.user as usize);
            let q = self.item_embeddings.row(s.item as usize);
            let h = &self.output_weights;
            for k in 0..d {
                grad.output_weights[k] += g * p[k] * q[k];
            }
            let gp = grad.user_embeddings.row_mut(s.user as usize);
            for k in 0..d {
                gp[k] += g * h[k] * q[k];
            }
            let gq = grad.item_embeddings.row_mut(s.item as usize);
            for k in 0..d {
                gq[k] += g * h[k] * p[k];
            }
        }
        Ok(BatchLoss {
            loss: total / b,
            per_sample,
        })
    }

    pub fn score_items(&self, u: u32, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.logit(u, i as u32);
        }
    }
}

impl Parameters for Gmf {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let d = self.dim();
        vec![
            TensorView {
                name: "gmf.user_embeddings".into(),
                shape: vec![self.user_embeddings.rows(), d],
                data: self.user_embeddings.values(),
            },
            TensorView {
                name: "gmf.item_embeddings".into(),
                shape: vec![self.item_embeddings.rows(), d],
                data: self.item_embeddings.values(),
            },
            TensorView {
                name: "gmf.output_weights".into(),
                shape: vec![d],
                data: &self.output_weights,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            TensorViewMut {
                name: "gmf.user_embeddings".into(),
                data: self.user_embeddings.values_mut(),
            },
            TensorViewMut {
                name: "gmf.item_embeddings".into(),
                data: self.item_embeddings.values_mut(),
            },
            TensorViewMut {
                name: "gmf.output_weights".into(),
                data: &mut self.output_weights,
            },
        ]
    }
}

/// NeuMF: a GMF branch and an MLP branch over separate embeddings, fused by
/// a final linear layer. Tower sizes are `2d -> 2d -> d -> d/2`, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuMf {
    pub gmf_user: EmbeddingTable,
    pub gmf_item: EmbeddingTable,
    pub mlp_user: EmbeddingTable,
    pub mlp_item: EmbeddingTable,
    pub tower: Vec<DenseLayer>,
    pub fusion: Vec<f64>,
}

struct NeuMfTrace {
    gmf: Vec<f64>,
    mlp_input: Vec<f64>,
    activations: Vec<Vec<f64>>,
    logit: f64,
}

impl NeuMf {
    fn tower_sizes(dim: usize) -> [(usize, usize); 3] {
        [(2 * dim, 2 * dim), (2 * dim, dim), (dim, dim / 2)]
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            gmf_user: EmbeddingTable::zeros(num_users, dim),
            gmf_item: EmbeddingTable::zeros(num_items, dim),
            mlp_user: EmbeddingTable::zeros(num_users, dim),
            mlp_item: EmbeddingTable::zeros(num_items, dim),
            tower: Self::tower_sizes(dim)
                .iter()
                .map(|&(i, o)| DenseLayer::zeros(i, o, Activation::Relu))
                .collect(),
            fusion: vec![0.0; dim + dim / 2],
        }
    }

    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let gmf_user = EmbeddingTable::normal(num_users, dim, EMBEDDING_INIT_STD, rng);
        let gmf_item = EmbeddingTable::normal(num_items, dim, EMBEDDING_INIT_STD, rng);
        let mlp_user = EmbeddingTable::normal(num_users, dim, EMBEDDING_INIT_STD, rng);
        let mlp_item = EmbeddingTable::normal(num_items, dim, EMBEDDING_INIT_STD, rng);
        let tower = Self::tower_sizes(dim)
            .iter()
            .map(|&(i, o)| DenseLayer::glorot(i, o, Activation::Relu, rng))
            .collect();
        let fusion = DenseLayer::glorot(dim + dim / 2, 1, Activation::Identity, rng).weight;
        Self {
            gmf_user,
            gmf_item,
            mlp_user,
            mlp_item,
            tower,
            fusion,
        }
    }

    pub fn dim(&self) -> usize {
        self.gmf_user.dim()
    }

    fn trace(&self, u: u32, i: u32) -> NeuMfTrace {
        let p = self.gmf_user.row(u as usize);
        let q = self.gmf_item.row(i as usize);
        let gmf: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
        let mut mlp_input = Vec::with_capacity(2 * self.dim());
        mlp_input.extend_from_slice(self.mlp_user.row(u as usize));
        mlp_input.extend_from_slice(self.mlp_item.row(i as usize));
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.tower.len());
        for layer in &self.tower {
            let x = activations.last().unwrap_or(&mlp_input);
            activations.push(layer.forward(x).expect("tower shapes are fixed at construction"));
        }
        let d = gmf.len();
        let top = activations.last().expect("tower is nonempty");
        let logit = dot(&self.fusion[..d], &gmf) + dot(&self.fusion[d..], top);
        NeuMfTrace {
            gmf,
            mlp_input,
            activations,
            logit,
        }
    }

    pub fn forward(&self, u: u32, i: u32) -> Result<f64> {
        if u as usize >= self.gmf_user.rows() || i as usize >= self.gmf_item.rows() {
            return Err(contract(format!("index ({u}, {i}) out of range")));
        }
        Ok(sigmoid(self.trace(u, i).logit))
    }

    pub fn weighted_batch_loss(&self, batch: &[Sample], weights: &[f64], grad: &mut Self) -> Result<BatchLoss> {
        check_batch(batch, weights, self.gmf_user.rows(), self.gmf_item.rows())?;
        let b = batch.len().max(1) as f64;
        let d = self.dim();
        let mut total = 0.0;
        let mut per_sample = Vec::with_capacity(batch.len());
        for (s, &w) in batch.iter().zip(weights) {
            let tr = self.trace(s.user, s.item);
            let y_hat = sigmoid(tr.logit);
            let l = bce_loss(y_hat, s.label);
            per_sample.push(l);
            total += w * l;
            let g = w * bce_logit_grad(y_hat, s.label) / b;
            if g == 0.0 {
                continue;
            }
            let top = tr.activations.last().expect("tower is nonempty");
            for k in 0..d {
                grad.fusion[k] += g * tr.gmf[k];
            }
            for (k, a) in top.iter().enumerate() {
                grad.fusion[d + k] += g * a;
            }

            let p = self.gmf_user.row(s.user as usize);
            let q = self.gmf_item.row(s.item as usize);
            {
                let gp = grad.gmf_user.row_mut(s.user as usize);
                for k in 0..d {
                    gp[k] += g * self.fusion[k] * q[k];
                }
            }
            {
                let gq = grad.gmf_item.row_mut(s.item as usize);
                for k in 0..d {
                    gq[k] += g * self.fusion[k] * p[k];
                }
            }

            let mut upstream: Vec<f64> = self.fusion[d..].iter().map(|f| g * f).collect();
            for li in (0..self.tower.len()).rev() {
                let input = if li == 0 { &tr.mlp_input } else { &tr.activations[li - 1] };
                upstream = self.tower[li].backward(input, &tr.activations[li], &upstream, &mut grad.tower[li])?;
            }
            for (k, v) in grad.mlp_user.row_mut(s.user as usize).iter_mut().enumerate() {
                *v += upstream[k];
            }
            for (k, v) in grad.mlp_item.row_mut(s.item as usize).iter_mut().enumerate() {
                *v += upstream[d + k];
            }
        }
        Ok(BatchLoss {
            loss: total / b,
            per_sample,
        })
    }

    pub fn score_items(&self, u: u32, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.trace(u, i as u32).logit;
        }
    }
}

impl Parameters for NeuMf {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let d = self.dim();
        let mut v = vec![
            TensorView {
                name: "neumf.gmf_user".into(),
                shape: vec![self.gmf_user.rows(), d],
                data: self.gmf_user.values(),
            },
            TensorView {
                name: "neumf.gmf_item".into(),
                shape: vec![self.gmf_item.rows(), d],
                data: self.gmf_item.values(),
            },
            TensorView {
                name: "neumf.mlp_user".into(),
                shape: vec![self.mlp_user.rows(), d],
                data: self.mlp_user.values(),
            },
            TensorView {
                name: "neumf.mlp_item".into(),
                shape: vec![self.mlp_item.rows(), d],
                data: self.mlp_item.values(),
            },
        ];
        for (k, layer) in self.tower.iter().enumerate() {
            v.push(TensorView {
                name: format!("neumf.tower.{k}.weight"),
                shape: vec![layer.out_dim(), layer.in_dim()],
                data: &layer.weight,
            });
            v.push(TensorView {
                name: format!("neumf.tower.{k}.bias"),
                shape: vec![layer.out_dim()],
                data: &layer.bias,
            });
        }
        v.push(TensorView {
            name: "neumf.fusion".into(),
            shape: vec![self.fusion.len()],
            data: &self.fusion,
        });
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut v = vec![
            TensorViewMut {
                name: "neumf.gmf_user".into(),
                data: self.gmf_user.values_mut(),
            },
            TensorViewMut {
                name: "neumf.gmf_item".into(),
                data: self.gmf_item.values_mut(),
            },
            TensorViewMut {
                name: "neumf.mlp_user".into(),
                data: self.mlp_user.values_mut(),
            },
            TensorViewMut {
                name: "neumf.mlp_item".into(),
                data: self.mlp_item.values_mut(),
            },
        ];
        for (k, layer) in self.tower.iter_mut().enumerate() {
            v.push(TensorViewMut {
                name: format!("neumf.tower.{k}.weight"),
                data: &mut layer.weight,
            });
            v.push(TensorViewMut {
                name: format!("neumf.tower.{k}.bias"),
                data: &mut layer.bias,
            });
        }
        v.push(TensorViewMut {
            name: "neumf.fusion".into(),
            data: &mut self.fusion,
        });
        v
    }
}

/// Collaborative denoising autoencoder. The hidden code of user `u` is
/// `sigmoid(W_enc x~ + b_enc + V_u)` where `x~` is the (corrupted, rescaled)
/// binary row of `u`'s training items; scores are `sigmoid(W_dec h + b_dec)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdae {
    pub encoder: DenseLayer,
    pub user_nodes: EmbeddingTable,
    pub decoder: DenseLayer,
    pub corruption_rate: f64,
}

/// A user's state within one CDAE batch.
struct BatchUser<'a> {
    user: u32,
    input: &'a [u32],
    scale: f64,
    hidden: Vec<f64>,
    grad_hidden: Vec<f64>,
}

impl Cdae {
    pub const DEFAULT_CORRUPTION: f64 = 0.5;

    pub fn zeros(num_users: usize, num_items: usize, dim: usize, corruption_rate: f64) -> Self {
        Self {
            encoder: DenseLayer::zeros(num_items, dim, Activation::Sigmoid),
            user_nodes: EmbeddingTable::zeros(num_users, dim),
            decoder: DenseLayer::zeros(dim, num_items, Activation::Sigmoid),
            corruption_rate,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        corruption_rate: f64,
        rng: &mut R,
    ) -> Self {
        let encoder = DenseLayer::glorot(num_items, dim, Activation::Sigmoid, rng);
        let user_nodes = EmbeddingTable::normal(num_users, dim, EMBEDDING_INIT_STD, rng);
        let decoder = DenseLayer::glorot(dim, num_items, Activation::Sigmoid, rng);
        Self {
            encoder,
            user_nodes,
            decoder,
            corruption_rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn num_items(&self) -> usize {
        self.encoder.in_dim()
    }

    /// Hidden code from a sparse binary input row scaled by `scale`.
    fn hidden(&self, u: u32, input: &[u32], scale: f64) -> Vec<f64> {
        let n = self.num_items();
        let v = self.user_nodes.row(u as usize);
        (0..self.dim())
            .map(|o| {
                let w = &self.encoder.weight[o * n..(o + 1) * n];
                let s: f64 = input.iter().map(|&j| w[j as usize]).sum::<f64>() * scale;
                sigmoid(s + self.encoder.bias[o] + v[o])
            })
            .collect()
    }

    #[inline]
    fn item_logit(&self, h: &[f64], i: u32) -> f64 {
        dot(self.decoder.weight_row(i as usize), h) + self.decoder.bias[i as usize]
    }

    /// Reconstructed scores for every item given an input row of item
    /// indices, already corrupted; `scale` is the inverted-dropout factor.
    pub fn forward(&self, u: u32, input: &[u32], scale: f64) -> Result<Vec<f64>> {
        if u as usize >= self.user_nodes.rows() || input.iter().any(|&j| j as usize >= self.num_items()) {
            return Err(contract("cdae input out of range"));
        }
        let h = self.hidden(u, input, scale);
        Ok((0..self.num_items() as u32)
            .map(|i| sigmoid(self.item_logit(&h, i)))
            .collect())
    }

    fn input_for<'a>(&self, u: u32, ctx: &BatchContext<'a>) -> Result<(&'a [u32], f64)> {
        let rows = ctx
            .rows
            .ok_or_else(|| contract("CDAE needs the users' training rows"))?;
        match ctx.corruption.and_then(|c| c.kept(u).map(|k| (k, c.scale()))) {
            Some(found) => Ok(found),
            None => Ok((rows.row(u), 1.0)),
        }
    }

    pub fn weighted_batch_loss(
        &self,
        batch: &[Sample],
        weights: &[f64],
        ctx: &BatchContext<'_>,
        grad: &mut Self,
    ) -> Result<BatchLoss> {
        check_batch(batch, weights, self.user_nodes.rows(), self.num_items())?;
        let b = batch.len().max(1) as f64;
        let d = self.dim();
        let n = self.num_items();

        // Users in first-appearance order, each with its hidden code and the
        // gradient flowing back into it.
        let mut slot: FxHashMap<u32, usize> = FxHashMap::default();
        let mut users: Vec<BatchUser<'_>> = Vec::new();
        for s in batch {
            if let std::collections::hash_map::Entry::Vacant(e) = slot.entry(s.user) {
                let (input, scale) = self.input_for(s.user, ctx)?;
                e.insert(users.len());
                users.push(BatchUser {
                    user: s.user,
                    input,
                    scale,
                    hidden: self.hidden(s.user, input, scale),
                    grad_hidden: vec![0.0; d],
                });
            }
        }

        let mut total = 0.0;
        let mut per_sample = Vec::with_capacity(batch.len());
        for (s, &w) in batch.iter().zip(weights) {
            let entry = &mut users[slot[&s.user]];
            let h = &entry.hidden;
            let y_hat = sigmoid(self.item_logit(h, s.item));
            let l = bce_loss(y_hat, s.label);
            per_sample.push(l);
            total += w * l;
            let g = w * bce_logit_grad(y_hat, s.label) / b;
            if g == 0.0 {
                continue;
            }
            let i = s.item as usize;
            grad.decoder.bias[i] += g;
            let w_row = self.decoder.weight_row(i);
            let gw = &mut grad.decoder.weight[i * d..(i + 1) * d];
            for k in 0..d {
                gw[k] += g * h[k];
                entry.grad_hidden[k] += g * w_row[k];
            }
        }

        for BatchUser { user, input, scale, hidden: h, grad_hidden: dh } in &users {
            let gv = grad.user_nodes.row_mut(*user as usize);
            for o in 0..d {
                let dpre = dh[o] * h[o] * (1.0 - h[o]);
                if dpre == 0.0 {
                    continue;
                }
                gv[o] += dpre;
                grad.encoder.bias[o] += dpre;
                let ge = &mut grad.encoder.weight[o * n..(o + 1) * n];
                for &j in input.iter() {
                    ge[j as usize] += dpre * scale;
                }
            }
        }

        Ok(BatchLoss {
            loss: total / b,
            per_sample,
        })
    }

    pub fn score_items(&self, u: u32, ctx: &BatchContext<'_>, out: &mut [f64]) -> Result<()> {
        let rows = ctx
            .rows
            .ok_or_else(|| contract("CDAE needs the users' training rows"))?;
        let h = self.hidden(u, rows.row(u), 1.0);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.item_logit(&h, i as u32);
        }
        Ok(())
    }
}

impl Parameters for Cdae {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let (n, d) = (self.num_items(), self.dim());
        vec![
            TensorView {
                name: "cdae.encoder.weight".into(),
                shape: vec![d, n],
                data: &self.encoder.weight,
            },
            TensorView {
                name: "cdae.encoder.bias".into(),
                shape: vec![d],
                data: &self.encoder.bias,
            },
            TensorView {
                name: "cdae.user_nodes".into(),
                shape: vec![self.user_nodes.rows(), d],
                data: self.user_nodes.values(),
            },
            TensorView {
                name: "cdae.decoder.weight".into(),
                shape: vec![n, d],
                data: &self.decoder.weight,
            },
            TensorView {
                name: "cdae.decoder.bias".into(),
                shape: vec![n],
                data: &self.decoder.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            TensorViewMut {
                name: "cdae.encoder.weight".into(),
                data: &mut self.encoder.weight,
            },
            TensorViewMut {
                name: "cdae.encoder.bias".into(),
                data: &mut self.encoder.bias,
            },
            TensorViewMut {
                name: "cdae.user_nodes".into(),
                data: self.user_nodes.values_mut(),
            },
            TensorViewMut {
                name: "cdae.decoder.weight".into(),
                data: &mut self.decoder.weight,
            },
            TensorViewMut {
                name: "cdae.decoder.bias".into(),
                data: &mut self.decoder.bias,
            },
        ]
    }
}

/// Any of the three backbones.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gmf(Gmf),
    NeuMf(NeuMf),
    Cdae(Cdae),
}

impl Model {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn init(kind: ModelKind, num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_users == 0 || num_items == 0 || dim == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        let mut rng = rng_for(seed, Purpose::Init, 0);
        Ok(match kind {
            ModelKind::Gmf => Model::Gmf(Gmf::init(num_users, num_items, dim, &mut rng)),
            ModelKind::NeuMf => {
                if dim < 2 {
                    return Err(contract("NeuMF needs embedding dim >= 2"));
                }
                Model::NeuMf(NeuMf::init(num_users, num_items, dim, &mut rng))
            }
            ModelKind::Cdae => Model::Cdae(Cdae::init(
                num_users,
                num_items,
                dim,
                Cdae::DEFAULT_CORRUPTION,
                &mut rng,
            )),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gmf(_) => ModelKind::Gmf,
            Model::NeuMf(_) => ModelKind::NeuMf,
            Model::Cdae(_) => ModelKind::Cdae,
        }
    }

    /// `(num_users, num_items, dim)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            Model::Gmf(m) => (m.user_embeddings.rows(), m.item_embeddings.rows(), m.dim()),
            Model::NeuMf(m) => (m.gmf_user.rows(), m.gmf_item.rows(), m.dim()),
            Model::Cdae(m) => (m.user_nodes.rows(), m.num_items(), m.dim()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (m, n, d) = self.shape();
        match self {
            Model::Gmf(_) => Model::Gmf(Gmf::zeros(m, n, d)),
            Model::NeuMf(_) => Model::NeuMf(NeuMf::zeros(m, n, d)),
            Model::Cdae(c) => Model::Cdae(Cdae::zeros(m, n, d, c.corruption_rate)),
        }
    }

    pub fn corruption_rate(&self) -> Option<f64> {
        match self {
            Model::Cdae(c) => Some(c.corruption_rate),
            _ => None,
        }
    }

    pub fn set_corruption_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract("corruption rate must lie in [0, 1)"));
        }
        if let Model::Cdae(c) = self {
            c.corruption_rate = rate;
        }
        Ok(())
    }

    /// Weighted mean BCE over `batch`; gradients are added into `grad`, which
    /// must be the same variant and shape (see [`Model::zeros_like`]).
    pub fn weighted_batch_loss(
        &self,
        batch: &[Sample],
        weights: &[f64],
        ctx: &BatchContext<'_>,
        grad: &mut Model,
    ) -> Result<BatchLoss> {
        match (self, grad) {
            (Model::Gmf(m), Model::Gmf(g)) => m.weighted_batch_loss(batch, weights, g),
            (Model::NeuMf(m), Model::NeuMf(g)) => m.weighted_batch_loss(batch, weights, g),
            (Model::Cdae(m), Model::Cdae(g)) => m.weighted_batch_loss(batch, weights, ctx, g),
            _ => Err(contract("gradient buffer is a different model kind")),
        }
    }

    /// Ranking scores (logits) for every item.
    pub fn score_items(&self, user: u32, ctx: &BatchContext<'_>, out: &mut [f64]) -> Result<()> {
        let (m, n, _) = self.shape();
        if user as usize >= m || out.len() != n {
            return Err(contract("score buffer or user out of range"));
        }
        match self {
            Model::Gmf(g) => g.score_items(user, out),
            Model::NeuMf(g) => g.score_items(user, out),
            Model::Cdae(g) => g.score_items(user, ctx, out)?,
        }
        Ok(())
    }

    fn dims_header(&self) -> Vec<u64> {
        let (m, n, d) = self.shape();
        let mut dims = vec![m as u64, n as u64, d as u64];
        if let Model::Cdae(c) = self {
            dims.push(c.corruption_rate.to_bits());
        }
        dims
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_container(out, self.kind().as_str(), &self.dims_header(), self)
    }

    pub fn load<R: Read>(src: R) -> Result<Self> {
        let c = read_container(src)?;
        let kind: ModelKind = c.kind.parse()?;
        let dim = |k: usize| -> Result<usize> {
            c.dims.get(k).map(|&v| v as usize).ok_or_else(|| Error::Format {
                what: "parameter container",
                message: "missing model dimensions".into(),
            })
        };
        let (m, n, d) = (dim(0)?, dim(1)?, dim(2)?);
        let mut model = match kind {
            ModelKind::Gmf => Model::Gmf(Gmf::zeros(m, n, d)),
            ModelKind::NeuMf => Model::NeuMf(NeuMf::zeros(m, n, d)),
            ModelKind::Cdae => Model::Cdae(Cdae::zeros(m, n, d, f64::from_bits(dim(3)? as u64))),
        };
        load_tensors(&mut model, &c)?;
        Ok(model)
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        match self {
            Model::Gmf(m) => m.tensors(),
            Model::NeuMf(m) => m.tensors(),
            Model::Cdae(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        match self {
            Model::Gmf(m) => m.tensors_mut(),
            Model::NeuMf(m) => m.tensors_mut(),
            Model::Cdae(m) => m.tensors_mut(),
        }
    }
}
