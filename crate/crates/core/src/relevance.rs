//! Click-through-rate model that scores how useful a candidate is to a user.
//!
//! The user's recent history is encoded by a bidirectional GRU. Per-step
//! states of both directions are concatenated and pooled by scaled
//! dot-product attention whose query is the last concatenated state. The
//! pooled history, the user embedding and the candidate embedding feed a
//! two-layer ReLU MLP with a sigmoid output.
//!
//! GRU cell, per direction:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + r * (U_n h) + b_n)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! The item embedding table doubles as the latent space in which
//! unexpectedness is measured.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ItemId, UserEvents, UserId};
use crate::linalg::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax, softplus};
use crate::optim::{clip_factor, param_struct, Adam, AdamConfig, ParamTensors, RowAdam};
use crate::rng::stream_rng;
use crate::snapshot::Snapshot;

#[derive(Debug, Error, PartialEq)]
pub enum RelevanceError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("item {0} has no latent embedding")]
    UnknownItem(ItemId),
    #[error("non-finite activation while scoring user {user}, item {item}")]
    NonFinite { user: UserId, item: ItemId },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no training examples: every user has fewer than two events")]
    NoExamples,
    #[error("user {0} has seen every item, no negative can be drawn")]
    NoNegative(UserId),
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtrHyper {
    pub dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_users: usize,
    /// Positions sampled per user per epoch; each yields one positive and one
    /// negative example sharing the same history.
    pub positions_per_user: usize,
    pub max_history: usize,
    pub clip_norm: f64,
    /// Embedding entries start uniform in `±init_scale`.
    pub init_scale: f64,
}

impl Default for CtrHyper {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 32,
            mlp_hidden: 64,
            lr: 0.005,
            epochs: 6,
            batch_users: 32,
            positions_per_user: 8,
            max_history: 100,
            clip_norm: 5.0,
            init_scale: 0.1,
        }
    }
}

param_struct! {
    /// Dense tensors: forward GRU, backward GRU, MLP head.
    pub struct CtrDense {
        fwd_w_z, fwd_u_z, fwd_b_z,
        fwd_w_r, fwd_u_r, fwd_b_r,
        fwd_w_n, fwd_u_n, fwd_b_n,
        bwd_w_z, bwd_u_z, bwd_b_z,
        bwd_w_r, bwd_u_r, bwd_b_r,
        bwd_w_n, bwd_u_n, bwd_b_n,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Gate tensors of one GRU direction in `z, r, n` order.
struct Gru<'a> {
    w: [&'a [f64]; 3],
    u: [&'a [f64]; 3],
    b: [&'a [f64]; 3],
}

struct GruGrad<'a> {
    w: [&'a mut [f64]; 3],
    u: [&'a mut [f64]; 3],
    b: [&'a mut [f64]; 3],
}

impl CtrDense {
    fn gru(&self, dir: Direction) -> Gru<'_> {
        match dir {
            Direction::Forward => Gru {
                w: [&self.fwd_w_z, &self.fwd_w_r, &self.fwd_w_n],
                u: [&self.fwd_u_z, &self.fwd_u_r, &self.fwd_u_n],
                b: [&self.fwd_b_z, &self.fwd_b_r, &self.fwd_b_n],
            },
            Direction::Backward => Gru {
                w: [&self.bwd_w_z, &self.bwd_w_r, &self.bwd_w_n],
                u: [&self.bwd_u_z, &self.bwd_u_r, &self.bwd_u_n],
                b: [&self.bwd_b_z, &self.bwd_b_r, &self.bwd_b_n],
            },
        }
    }

    fn gru_grad(&mut self, dir: Direction) -> GruGrad<'_> {
        match dir {
            Direction::Forward => GruGrad {
                w: [&mut self.fwd_w_z, &mut self.fwd_w_r, &mut self.fwd_w_n],
                u: [&mut self.fwd_u_z, &mut self.fwd_u_r, &mut self.fwd_u_n],
                b: [&mut self.fwd_b_z, &mut self.fwd_b_r, &mut self.fwd_b_n],
            },
            Direction::Backward => GruGrad {
                w: [&mut self.bwd_w_z, &mut self.bwd_w_r, &mut self.bwd_w_n],
                u: [&mut self.bwd_u_z, &mut self.bwd_u_r, &mut self.bwd_u_n],
                b: [&mut self.bwd_b_z, &mut self.bwd_b_r, &mut self.bwd_b_n],
            },
        }
    }

    /// Copy the forward GRU into the backward one.
    pub fn tie_backward_to_forward(&mut self) {
        self.bwd_w_z.clone_from(&self.fwd_w_z);
        self.bwd_u_z.clone_from(&self.fwd_u_z);
        self.bwd_b_z.clone_from(&self.fwd_b_z);
        self.bwd_w_r.clone_from(&self.fwd_w_r);
        self.bwd_u_r.clone_from(&self.fwd_u_r);
        self.bwd_b_r.clone_from(&self.fwd_b_r);
        self.bwd_w_n.clone_from(&self.fwd_w_n);
        self.bwd_u_n.clone_from(&self.fwd_u_n);
        self.bwd_b_n.clone_from(&self.fwd_b_n);
    }
}

/// Embedding rows for known ids plus one trailing shared fallback row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingTable {
    dim: usize,
    ids: Vec<u32>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    fn new(mut ids: Vec<u32>, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        ids.sort_unstable();
        ids.dedup();
        let data = (0..ids.len() * dim)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        let mut t = Self { dim, ids, data };
        t.data.extend(std::iter::repeat_n(0.0, dim));
        t.refresh_fallback();
        t
    }

    fn row_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    fn fallback_row(&self) -> usize {
        self.ids.len()
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn rows(&self) -> usize {
        self.ids.len() + 1
    }

    /// The fallback is the mean of the known rows.
    fn refresh_fallback(&mut self) {
        let n = self.ids.len();
        let mut mean = vec![0.0; self.dim];
        for r in 0..n {
            axpy(1.0, self.row(r), &mut mean);
        }
        if n > 0 {
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        let fb = self.fallback_row();
        self.row_mut(fb).copy_from_slice(&mean);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrModel {
    dim: usize,
    hidden: usize,
    mlp_hidden: usize,
    items: EmbeddingTable,
    users: EmbeddingTable,
    dense: CtrDense,
}

impl Snapshot for CtrModel {
    const KIND: &'static str = "curio-ctr";
    const VERSION: u32 = 1;
}

/// Pooled history representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedHistory {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Usefulness {
    pub value: f64,
    /// Set when the user or the item fell back to the shared embedding.
    pub cold: bool,
}

/// Gradients of one or more examples: dense tensors plus touched embedding
/// rows keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrGrads {
    pub dense: CtrDense,
    pub items: BTreeMap<ItemId, Vec<f64>>,
    pub users: BTreeMap<UserId, Vec<f64>>,
}

impl CtrGrads {
    fn add_assign(&mut self, other: &CtrGrads) {
        self.dense.add_assign(&other.dense);
        for (map, src) in [(&mut self.items, &other.items), (&mut self.users, &other.users)] {
            for (id, g) in src {
                match map.get_mut(id) {
                    Some(acc) => axpy(1.0, g, acc),
                    None => {
                        map.insert(*id, g.clone());
                    }
                }
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let sparse: f64 = self
            .items
            .values()
            .chain(self.users.values())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum();
        self.dense.sq_norm() + sparse
    }
}

struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    un: Vec<f64>,
    n: Vec<f64>,
}

impl GruStep {
    fn output(&self) -> Vec<f64> {
        (0..self.z.len())
            .map(|k| (1.0 - self.z[k]) * self.n[k] + self.z[k] * self.h_prev[k])
            .collect()
    }
}

struct Forward {
    /// Item rows of the history, in order.
    rows: Vec<usize>,
    fwd: Vec<GruStep>,
    /// Backward direction steps in processing order (last item first).
    bwd: Vec<GruStep>,
    states: Vec<Vec<f64>>,
    query: Vec<f64>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

struct HeadCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    logit: f64,
}

impl CtrModel {
    /// Seeded initialization. GRU matrices are uniform in `±1/sqrt(hidden)`,
    /// MLP layers uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(items: &[ItemId], users: &[UserId], hyper: &CtrHyper, seed: u64) -> Self {
        let (d, h, m) = (hyper.dim, hyper.hidden, hyper.mlp_hidden);
        let mut rng = stream_rng(seed, "ctr-init", 0);
        let item_table = EmbeddingTable::new(items.to_vec(), d, hyper.init_scale, &mut rng);
        let user_table = EmbeddingTable::new(users.to_vec(), d, hyper.init_scale, &mut rng);
        let mut mat = |rows: usize, cols: usize, bound: f64| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let g = 1.0 / (h as f64).sqrt();
        let head_in = 2 * h + 2 * d;
        let b1 = 1.0 / (head_in as f64).sqrt();
        let b2 = 1.0 / (m as f64).sqrt();
        let dense = CtrDense {
            fwd_w_z: mat(h, d, g),
            fwd_u_z: mat(h, h, g),
            fwd_b_z: vec![0.0; h],
            fwd_w_r: mat(h, d, g),
            fwd_u_r: mat(h, h, g),
            fwd_b_r: vec![0.0; h],
            fwd_w_n: mat(h, d, g),
            fwd_u_n: mat(h, h, g),
            fwd_b_n: vec![0.0; h],
            bwd_w_z: mat(h, d, g),
            bwd_u_z: mat(h, h, g),
            bwd_b_z: vec![0.0; h],
            bwd_w_r: mat(h, d, g),
            bwd_u_r: mat(h, h, g),
            bwd_b_r: vec![0.0; h],
            bwd_w_n: mat(h, d, g),
            bwd_u_n: mat(h, h, g),
            bwd_b_n: vec![0.0; h],
            mlp_w1: mat(m, head_in, b1),
            mlp_b1: vec![0.0; m],
            mlp_w2: mat(1, m, b2),
            mlp_b2: vec![0.0],
        };
        Self {
            dim: d,
            hidden: h,
            mlp_hidden: m,
            items: item_table,
            users: user_table,
            dense,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.items.ids
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.users.ids
    }

    pub fn dense(&self) -> &CtrDense {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut CtrDense {
        &mut self.dense
    }

    /// Latent vector of a known item.
    pub fn item_latent(&self, item: ItemId) -> Result<&[f64]> {
        let r = self.items.row_of(item).ok_or(RelevanceError::UnknownItem(item))?;
        Ok(self.items.row(r))
    }

    pub fn item_embedding_mut(&mut self, item: ItemId) -> Option<&mut [f64]> {
        let r = self.items.row_of(item)?;
        Some(self.items.row_mut(r))
    }

    pub fn user_embedding(&self, user: UserId) -> Option<&[f64]> {
        self.users.row_of(user).map(|r| self.users.row(r))
    }

    pub fn user_embedding_mut(&mut self, user: UserId) -> Option<&mut [f64]> {
        let r = self.users.row_of(user)?;
        Some(self.users.row_mut(r))
    }

    fn gru_step(&self, dir: Direction, x: &[f64], h_prev: &[f64]) -> GruStep {
        let (h, d) = (self.hidden, self.dim);
        let g = self.dense.gru(dir);
        let mut az = g.b[0].to_vec();
        matvec_acc(g.w[0], h, d, x, &mut az);
        matvec_acc(g.u[0], h, h, h_prev, &mut az);
        let mut ar = g.b[1].to_vec();
        matvec_acc(g.w[1], h, d, x, &mut ar);
        matvec_acc(g.u[1], h, h, h_prev, &mut ar);
        let mut un = vec![0.0; h];
        matvec_acc(g.u[2], h, h, h_prev, &mut un);
        let z: Vec<f64> = az.into_iter().map(sigmoid).collect();
        let r: Vec<f64> = ar.into_iter().map(sigmoid).collect();
        let mut an = g.b[2].to_vec();
        matvec_acc(g.w[2], h, d, x, &mut an);
        let n: Vec<f64> = (0..h).map(|k| (an[k] + r[k] * un[k]).tanh()).collect();
        GruStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            un,
            n,
        }
    }

    /// Backprop one GRU step; returns `(dh_prev, dx)`.
    fn gru_step_back(&self, dir: Direction, s: &GruStep, dh: &[f64], grads: &mut CtrDense) -> (Vec<f64>, Vec<f64>) {
        let (h, d) = (self.hidden, self.dim);
        let mut da = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        let mut dun = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        for k in 0..h {
            let (z, r, n) = (s.z[k], s.r[k], s.n[k]);
            let dn = dh[k] * (1.0 - z);
            let dz = dh[k] * (s.h_prev[k] - n);
            dh_prev[k] = dh[k] * z;
            let dan = dn * (1.0 - n * n);
            let dr = dan * s.un[k];
            dun[k] = dan * r;
            da[0][k] = dz * z * (1.0 - z);
            da[1][k] = dr * r * (1.0 - r);
            da[2][k] = dan;
        }
        let g = self.dense.gru(dir);
        let mut dx = vec![0.0; d];
        for gate in 0..3 {
            matvec_t_acc(g.w[gate], h, d, &da[gate], &mut dx);
        }
        matvec_t_acc(g.u[0], h, h, &da[0], &mut dh_prev);
        matvec_t_acc(g.u[1], h, h, &da[1], &mut dh_prev);
        matvec_t_acc(g.u[2], h, h, &dun, &mut dh_prev);

        let gg = grads.gru_grad(dir);
        let GruGrad { w, u, b } = gg;
        let [wz, wr, wn] = w;
        let [uz, ur, un] = u;
        let [bz, br, bn] = b;
        outer_acc(&da[0], &s.x, wz);
        outer_acc(&da[1], &s.x, wr);
        outer_acc(&da[2], &s.x, wn);
        outer_acc(&da[0], &s.h_prev, uz);
        outer_acc(&da[1], &s.h_prev, ur);
        outer_acc(&dun, &s.h_prev, un);
        axpy(1.0, &da[0], bz);
        axpy(1.0, &da[1], br);
        axpy(1.0, &da[2], bn);
        (dh_prev, dx)
    }

    fn history_rows(&self, history: &[ItemId]) -> Result<Vec<usize>> {
        if history.is_empty() {
            return Err(RelevanceError::EmptyHistory);
        }
        history
            .iter()
            .map(|&i| self.items.row_of(i).ok_or(RelevanceError::UnknownItem(i)))
            .collect()
    }

    fn forward(&self, history: &[ItemId]) -> Result<Forward> {
        let rows = self.history_rows(history)?;
        let h = self.hidden;
        let t = rows.len();
        let mut fwd = Vec::with_capacity(t);
        let mut state = vec![0.0; h];
        for &r in &rows {
            let s = self.gru_step(Direction::Forward, self.items.row(r), &state);
            state = s.output();
            fwd.push(s);
        }
        let mut bwd = Vec::with_capacity(t);
        let mut state = vec![0.0; h];
        for &r in rows.iter().rev() {
            let s = self.gru_step(Direction::Backward, self.items.row(r), &state);
            state = s.output();
            bwd.push(s);
        }
        let states: Vec<Vec<f64>> = (0..t)
            .map(|j| {
                let mut v = fwd[j].output();
                v.extend(bwd[t - 1 - j].output());
                v
            })
            .collect();
        let query = states[t - 1].clone();
        let scale = 1.0 / ((2 * h) as f64).sqrt();
        let scores: Vec<f64> = states.iter().map(|s| dot(&query, s) * scale).collect();
        let weights = softmax(&scores);
        let mut pooled = vec![0.0; 2 * h];
        for (w, s) in weights.iter().zip(&states) {
            axpy(*w, s, &mut pooled);
        }
        Ok(Forward {
            rows,
            fwd,
            bwd,
            states,
            query,
            weights,
            pooled,
        })
    }

    /// Per-position states of each direction, aligned to history positions:
    /// `backward[j]` has consumed items `j..` in reverse.
    pub fn directional_states(&self, history: &[ItemId]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let f = self.forward(history)?;
        let t = f.rows.len();
        let fwd = f.fwd.iter().map(GruStep::output).collect();
        let bwd = (0..t).map(|j| f.bwd[t - 1 - j].output()).collect();
        Ok((fwd, bwd))
    }

    pub fn encode_history(&self, history: &[ItemId]) -> Result<EncodedHistory> {
        let f = self.forward(history)?;
        Ok(EncodedHistory {
            vector: f.pooled,
            weights: f.weights,
        })
    }

    fn head(&self, pooled: &[f64], user_vec: &[f64], item_vec: &[f64]) -> HeadCache {
        let m = self.mlp_hidden;
        let mut input = Vec::with_capacity(pooled.len() + 2 * self.dim);
        input.extend_from_slice(pooled);
        input.extend_from_slice(user_vec);
        input.extend_from_slice(item_vec);
        let mut pre = self.dense.mlp_b1.clone();
        matvec_acc(&self.dense.mlp_w1, m, input.len(), &input, &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
        let logit = dot(&self.dense.mlp_w2, &hidden) + self.dense.mlp_b2[0];
        HeadCache { input, pre, logit }
    }

    fn user_row(&self, user: UserId) -> (usize, bool) {
        match self.users.row_of(user) {
            Some(r) => (r, false),
            None => (self.users.fallback_row(), true),
        }
    }

    fn item_row(&self, item: ItemId) -> (usize, bool) {
        match self.items.row_of(item) {
            Some(r) => (r, false),
            None => (self.items.fallback_row(), true),
        }
    }

    /// Score a candidate against an already-encoded history.
    pub fn usefulness_encoded(&self, encoded: &EncodedHistory, user: UserId, item: ItemId) -> Result<Usefulness> {
        let (ur, ucold) = self.user_row(user);
        let (ir, icold) = self.item_row(item);
        let head = self.head(&encoded.vector, self.users.row(ur), self.items.row(ir));
        let value = sigmoid(head.logit);
        if !head.logit.is_finite() {
            return Err(RelevanceError::NonFinite { user, item });
        }
        Ok(Usefulness {
            value,
            cold: ucold || icold,
        })
    }

    /// Probability that `user` with this `history` finds `item` useful.
    pub fn usefulness(&self, user: UserId, item: ItemId, history: &[ItemId]) -> Result<Usefulness> {
        let encoded = self.encode_history(history)?;
        self.usefulness_encoded(&encoded, user, item)
    }

    /// Summed binary cross-entropy over `(item, label)` targets that share
    /// one history.
    pub fn example_loss(&self, user: UserId, history: &[ItemId], targets: &[(ItemId, bool)]) -> Result<f64> {
        let f = self.forward(history)?;
        let (ur, _) = self.user_row(user);
        let mut loss = 0.0;
        for &(item, label) in targets {
            let (ir, _) = self.item_row(item);
            let head = self.head(&f.pooled, self.users.row(ur), self.items.row(ir));
            loss += bce(head.logit, label);
        }
        Ok(loss)
    }

    /// [`Self::example_loss`] with gradients for every parameter it touches.
    /// Fallback rows receive no gradient.
    pub fn example_loss_and_grad(&self, user: UserId, history: &[ItemId], targets: &[(ItemId, bool)]) -> Result<(f64, CtrGrads)> {
        let mut grads = CtrGrads {
            dense: self.dense.zeros_like(),
            items: BTreeMap::new(),
            users: BTreeMap::new(),
        };
        let loss = self.accumulate(user, history, targets, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate(&self, user: UserId, history: &[ItemId], targets: &[(ItemId, bool)], grads: &mut CtrGrads) -> Result<f64> {
        let (h, d, m) = (self.hidden, self.dim, self.mlp_hidden);
        let f = self.forward(history)?;
        let (ur, ucold) = self.user_row(user);
        let mut loss = 0.0;
        let mut dpooled = vec![0.0; 2 * h];
        let mut duser = vec![0.0; d];
        let head_in = 2 * h + 2 * d;
        for &(item, label) in targets {
            let (ir, icold) = self.item_row(item);
            let head = self.head(&f.pooled, self.users.row(ur), self.items.row(ir));
            loss += bce(head.logit, label);
            let dlogit = sigmoid(head.logit) - if label { 1.0 } else { 0.0 };
            let g = &mut grads.dense;
            g.mlp_b2[0] += dlogit;
            let mut dpre = vec![0.0; m];
            for k in 0..m {
                if head.pre[k] > 0.0 {
                    g.mlp_w2[k] += dlogit * head.pre[k];
                    dpre[k] = dlogit * self.dense.mlp_w2[k];
                }
            }
            outer_acc(&dpre, &head.input, &mut g.mlp_w1);
            axpy(1.0, &dpre, &mut g.mlp_b1);
            let mut dinput = vec![0.0; head_in];
            matvec_t_acc(&self.dense.mlp_w1, m, head_in, &dpre, &mut dinput);
            axpy(1.0, &dinput[..2 * h], &mut dpooled);
            axpy(1.0, &dinput[2 * h..2 * h + d], &mut duser);
            if !icold {
                add_row(&mut grads.items, item, &dinput[2 * h + d..]);
            }
        }
        if !ucold {
            add_row(&mut grads.users, user, &duser);
        }

        // Attention backward.
        let t = f.rows.len();
        let scale = 1.0 / ((2 * h) as f64).sqrt();
        let mut dstates = vec![vec![0.0; 2 * h]; t];
        let dweights: Vec<f64> = f.states.iter().map(|s| dot(&dpooled, s)).collect();
        let mean: f64 = f.weights.iter().zip(&dweights).map(|(a, g)| a * g).sum();
        let mut dquery = vec![0.0; 2 * h];
        for j in 0..t {
            let dscore = f.weights[j] * (dweights[j] - mean);
            axpy(f.weights[j], &dpooled, &mut dstates[j]);
            axpy(dscore * scale, &f.query, &mut dstates[j]);
            axpy(dscore * scale, &f.states[j], &mut dquery);
        }
        axpy(1.0, &dquery, &mut dstates[t - 1]);

        // Forward direction BPTT.
        let mut dx_rows: Vec<Vec<f64>> = vec![vec![0.0; d]; t];
        let mut carry = vec![0.0; h];
        for j in (0..t).rev() {
            let mut dh = dstates[j][..h].to_vec();
            axpy(1.0, &carry, &mut dh);
            let (dprev, dx) = self.gru_step_back(Direction::Forward, &f.fwd[j], &dh, &mut grads.dense);
            axpy(1.0, &dx, &mut dx_rows[j]);
            carry = dprev;
        }
        // Backward direction: processing step k consumed position t-1-k.
        let mut carry = vec![0.0; h];
        for k in (0..t).rev() {
            let j = t - 1 - k;
            let mut dh = dstates[j][h..].to_vec();
            axpy(1.0, &carry, &mut dh);
            let (dprev, dx) = self.gru_step_back(Direction::Backward, &f.bwd[k], &dh, &mut grads.dense);
            axpy(1.0, &dx, &mut dx_rows[j]);
            carry = dprev;
        }
        for (j, dx) in dx_rows.iter().enumerate() {
            add_row(&mut grads.items, self.items.ids[f.rows[j]], dx);
        }
        Ok(loss)
    }

    fn apply(&mut self, grads: &CtrGrads, opt: &mut Adam, item_opt: &mut RowAdam, user_opt: &mut RowAdam, scale: f64) {
        opt.tick();
        opt.update_dense(&mut self.dense, &grads.dense, scale);
        for (id, g) in &grads.items {
            let r = self.items.row_of(*id).expect("gradient rows are known items");
            item_opt.update_row(opt, &mut self.items.data, r, g, scale);
        }
        for (id, g) in &grads.users {
            let r = self.users.row_of(*id).expect("gradient rows are known users");
            user_opt.update_row(opt, &mut self.users.data, r, g, scale);
        }
    }

    fn all_finite(&self) -> bool {
        self.dense.all_finite() && self.items.data.iter().chain(&self.users.data).all(|x| x.is_finite())
    }
}

fn bce(logit: f64, label: bool) -> f64 {
    if label {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

fn add_row(map: &mut BTreeMap<u32, Vec<f64>>, id: u32, g: &[f64]) {
    match map.get_mut(&id) {
        Some(acc) => axpy(1.0, g, acc),
        None => {
            map.insert(id, g.to_vec());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrTraining {
    pub model: CtrModel,
    /// Mean BCE per example, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Positions `t >= 1` of a user's sequence chosen this epoch; each predicts
/// event `t` from the events before it.
fn sample_positions(len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let available = len.saturating_sub(1);
    if available <= k {
        return (1..len).collect();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, available, k).into_iter().map(|p| p + 1).collect();
    picked.sort_unstable();
    picked
}

fn user_batch(
    model: &CtrModel,
    user: UserEvents<'_>,
    pool: &[ItemId],
    hyper: &CtrHyper,
    seed: u64,
    epoch: usize,
) -> Result<(f64, usize, CtrGrads)> {
    let mut rng = stream_rng(seed, "ctr-epoch", ((epoch as u64) << 32) | u64::from(user.user_id));
    let items: Vec<ItemId> = user.events.iter().map(|e| e.item_id).collect();
    let seen: HashSet<ItemId> = items.iter().copied().collect();
    if seen.len() >= pool.len() {
        return Err(RelevanceError::NoNegative(user.user_id));
    }
    let mut grads = CtrGrads {
        dense: model.dense.zeros_like(),
        items: BTreeMap::new(),
        users: BTreeMap::new(),
    };
    let mut loss = 0.0;
    let mut examples = 0;
    for t in sample_positions(items.len(), hyper.positions_per_user, &mut rng) {
        let negative = loop {
            let cand = pool[rng.random_range(0..pool.len())];
            if !seen.contains(&cand) {
                break cand;
            }
        };
        let history = &items[t.saturating_sub(hyper.max_history)..t];
        loss += model.accumulate(user.user_id, history, &[(items[t], true), (negative, false)], &mut grads)?;
        examples += 2;
    }
    Ok((loss, examples, grads))
}

/// Train the CTR model on chronological per-user events.
///
/// Each epoch samples up to `positions_per_user` positions per user. Every
/// position contributes its actual item as a positive and one item the user
/// never interacted with as a negative, both scored against the preceding
/// `max_history` events. Users are processed in seeded minibatches; gradients
/// within a batch are summed in a fixed order.
pub fn train_ctr(users: &[UserEvents<'_>], items: &[ItemId], hyper: &CtrHyper, seed: u64) -> Result<CtrTraining> {
    if hyper.dim == 0 || hyper.hidden == 0 || hyper.mlp_hidden == 0 || hyper.max_history == 0 {
        return Err(RelevanceError::Hyper("dimensions and max_history must be positive".into()));
    }
    let user_ids: Vec<UserId> = users.iter().map(|u| u.user_id).collect();
    let mut model = CtrModel::new(items, &user_ids, hyper, seed);
    let pool = model.items.ids.clone();
    for u in users {
        for e in u.events {
            if model.items.row_of(e.item_id).is_none() {
                return Err(RelevanceError::UnknownItem(e.item_id));
            }
        }
    }
    let active: Vec<UserEvents<'_>> = users.iter().copied().filter(|u| u.events.len() >= 2).collect();
    if active.is_empty() {
        return Err(RelevanceError::NoExamples);
    }
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr), &model.dense);
    let mut item_opt = RowAdam::new(model.items.rows(), hyper.dim);
    let mut user_opt = RowAdam::new(model.users.rows(), hyper.dim);
    let mut order: Vec<usize> = (0..active.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream_rng(seed, "ctr-order", epoch as u64));
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(hyper.batch_users.max(1)) {
            let parts: Vec<Result<(f64, usize, CtrGrads)>> = chunk
                .par_iter()
                .map(|&k| user_batch(&model, active[k], &pool, hyper, seed, epoch))
                .collect();
            let mut grads: Option<CtrGrads> = None;
            let mut n = 0usize;
            for p in parts {
                let (loss, examples, g) = p?;
                total += loss;
                n += examples;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let Some(grads) = grads else { continue };
            if n == 0 {
                continue;
            }
            count += n;
            let mean_scale = 1.0 / n as f64;
            let clip = clip_factor(grads.sq_norm() * mean_scale * mean_scale, hyper.clip_norm);
            model.apply(&grads, &mut opt, &mut item_opt, &mut user_opt, mean_scale * clip);
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() || !model.all_finite() {
            return Err(RelevanceError::Diverged { epoch });
        }
        log::debug!("ctr epoch {epoch}: loss {mean:.6}");
        epoch_loss.push(mean);
    }
    model.items.refresh_fallback();
    model.users.refresh_fallback();
    Ok(CtrTraining { model, epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CtrHyper {
        CtrHyper {
            dim: 4,
            hidden: 3,
            mlp_hidden: 5,
            ..CtrHyper::default()
        }
    }

    #[test]
    fn single_step_history_puts_all_weight_on_it() {
        let m = CtrModel::new(&[1, 2, 3], &[7], &tiny(), 1);
        assert_eq!(m.encode_history(&[2]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let mut m = CtrModel::new(&[1, 2, 3], &[7], &tiny(), 1);
        m.dense.fill_zero();
        m.items.data.fill(0.0);
        let a = m.encode_history(&[1, 2, 3]).unwrap();
        let b = m.encode_history(&[3, 3, 1]).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(m.usefulness(7, 2, &[1]).unwrap().value, 0.5);
    }

    #[test]
    fn zero_head_scores_one_half_for_any_input() {
        let mut m = CtrModel::new(&[1, 2, 3], &[7], &tiny(), 1);
        m.dense.mlp_w1.fill(0.0);
        m.dense.mlp_b1.fill(0.0);
        m.dense.mlp_w2.fill(0.0);
        m.dense.mlp_b2.fill(0.0);
        for item in [1, 2, 3] {
            assert_eq!(m.usefulness(7, item, &[3, 1, 2]).unwrap().value, 0.5);
        }
    }

    #[test]
    fn raising_output_bias_raises_score() {
        let mut m = CtrModel::new(&[1, 2, 3], &[7], &tiny(), 1);
        let before = m.usefulness(7, 2, &[1, 3]).unwrap().value;
        m.dense.mlp_b2[0] += 0.25;
        assert!(m.usefulness(7, 2, &[1, 3]).unwrap().value > before);
    }

    #[test]
    fn cold_entities_are_flagged() {
        let m = CtrModel::new(&[1, 2, 3], &[7], &tiny(), 1);
        assert!(!m.usefulness(7, 2, &[1]).unwrap().cold);
        assert!(m.usefulness(8, 2, &[1]).unwrap().cold);
        assert!(m.usefulness(7, 99, &[1]).unwrap().cold);
        assert_eq!(m.usefulness(7, 2, &[]).unwrap_err(), RelevanceError::EmptyHistory);
        assert_eq!(m.usefulness(7, 2, &[42]).unwrap_err(), RelevanceError::UnknownItem(42));
    }

    #[test]
    fn fallback_row_is_mean_of_known_rows() {
        let m = CtrModel::new(&[1, 2], &[7], &tiny(), 3);
        let fb = m.items.row(m.items.fallback_row());
        for k in 0..4 {
            let mean = (m.items.row(0)[k] + m.items.row(1)[k]) / 2.0;
            assert!((fb[k] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn position_sampling_is_bounded() {
        let mut rng = stream_rng(1, "t", 0);
        assert_eq!(sample_positions(1, 8, &mut rng), Vec::<usize>::new());
        assert_eq!(sample_positions(4, 8, &mut rng), vec![1, 2, 3]);
        let p = sample_positions(50, 8, &mut rng);
        assert_eq!(p.len(), 8);
        assert!(p.iter().all(|&t| (1..50).contains(&t)));
    }
}
