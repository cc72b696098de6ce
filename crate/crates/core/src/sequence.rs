//! Short-term preference modeling with a time-aware LSTM.
//!
//! The cell is a standard LSTM whose input contribution is additionally
//! scaled by a time gate driven by the log-compressed gap since the previous
//! event:
//!
//! ```text
//! T  = sigmoid(W_t x + sigmoid(w_t * ln(1 + dt)) + b_t)
//! c  = f * c_prev + i * T * g
//! h  = o * tanh(c)
//! ```
//!
//! Hidden states over a session are pooled by dot-product attention with a
//! learned projection of the last hidden state as the query. Items are scored
//! by `pooled . q_i` against the frozen item factors of the factorization
//! model, so hidden size equals the factor dimension.
//!
//! Training is next-item prediction with a BPR loss and one uniform negative
//! per step; gradients are derived by hand.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Interaction, ItemId, UserEvents, UserId};
use crate::factorization::{preference_set_from_scores, FactorError, FactorModel, PreferenceKind, PreferenceSet};
use crate::linalg::{dot, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax, softplus};
use crate::optim::{clip_factor, param_struct, Adam, AdamConfig, ParamTensors};
use crate::rng::stream_rng;
use crate::snapshot::Snapshot;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("negative time delta {0}")]
    NegativeDelta(f64),
    #[error("item {0} has no embedding")]
    MissingEmbedding(ItemId),
    #[error("session is empty")]
    EmptySession,
    #[error("input has dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("expected {expected} negatives, got {found}")]
    Negatives { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no training steps: every session has length < 2")]
    NoTrainingSteps,
    #[error("item pool too small to sample negatives")]
    ItemPool,
    #[error(transparent)]
    Preferences(#[from] FactorError),
}

pub type Result<T> = std::result::Result<T, SequenceError>;

param_struct! {
    /// All trainable tensors. `w_*` are `hidden x input`, `u_*` and `query`
    /// are `hidden x hidden`, the rest are per-unit vectors.
    pub struct SeqParams {
        w_input, u_input, b_input,
        w_forget, u_forget, b_forget,
        w_output, u_output, b_output,
        w_cand, u_cand, b_cand,
        w_time, time_scale, b_time,
        query,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqHyper {
    pub lr: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Sessions per optimizer step.
    pub batch_users: usize,
}

impl Default for SeqHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 10,
            clip_norm: 5.0,
            batch_users: 16,
        }
    }
}

/// Time-aware LSTM with attention pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeAwareLstm {
    input: usize,
    hidden: usize,
    params: SeqParams,
}

/// Values cached by a forward cell step for backpropagation.
#[derive(Debug, Clone)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    input: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_o: Vec<f64>,
    cand: Vec<f64>,
    time: Vec<f64>,
    inner_time: Vec<f64>,
    log_dt: f64,
    tanh_c: Vec<f64>,
}

/// Attention-pooled summary of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

fn deltas(session: &[Interaction]) -> Vec<f64> {
    let mut out = Vec::with_capacity(session.len());
    for (k, e) in session.iter().enumerate() {
        let dt = if k == 0 {
            0.0
        } else {
            (e.timestamp - session[k - 1].timestamp) as f64
        };
        out.push(dt);
    }
    out
}

impl TimeAwareLstm {
    /// Seeded initialization: matrices uniform in `±1/sqrt(hidden)`, biases
    /// zero except the forget bias at 1.
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "seq-init", 0);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let params = SeqParams {
            w_input: mat(hidden, input),
            u_input: mat(hidden, hidden),
            b_input: vec![0.0; hidden],
            w_forget: mat(hidden, input),
            u_forget: mat(hidden, hidden),
            b_forget: vec![1.0; hidden],
            w_output: mat(hidden, input),
            u_output: mat(hidden, hidden),
            b_output: vec![0.0; hidden],
            w_cand: mat(hidden, input),
            u_cand: mat(hidden, hidden),
            b_cand: vec![0.0; hidden],
            w_time: mat(hidden, input),
            time_scale: mat(hidden, 1),
            b_time: vec![0.0; hidden],
            query: mat(hidden, hidden),
        };
        Self { input, hidden, params }
    }

    /// Model with every parameter zero.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let mut m = Self::new(input, hidden, 0);
        m.params.fill_zero();
        m
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &SeqParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut SeqParams {
        &mut self.params
    }

    fn forward_step(&self, h_prev: &[f64], c_prev: &[f64], x: &[f64], dt: f64) -> StepCache {
        let (n, d) = (self.hidden, self.input);
        let p = &self.params;
        let gate = |w: &[f64], u: &[f64], b: &[f64], act: fn(f64) -> f64| -> Vec<f64> {
            let mut a = b.to_vec();
            matvec_acc(w, n, d, x, &mut a);
            matvec_acc(u, n, n, h_prev, &mut a);
            a.into_iter().map(act).collect()
        };
        let gate_i = gate(&p.w_input, &p.u_input, &p.b_input, sigmoid);
        let gate_f = gate(&p.w_forget, &p.u_forget, &p.b_forget, sigmoid);
        let gate_o = gate(&p.w_output, &p.u_output, &p.b_output, sigmoid);
        let cand = gate(&p.w_cand, &p.u_cand, &p.b_cand, f64::tanh);

        let log_dt = dt.ln_1p();
        let inner_time: Vec<f64> = p.time_scale.iter().map(|w| sigmoid(w * log_dt)).collect();
        let mut a_t: Vec<f64> = p.b_time.iter().zip(&inner_time).map(|(b, s)| b + s).collect();
        matvec_acc(&p.w_time, n, d, x, &mut a_t);
        let time: Vec<f64> = a_t.into_iter().map(sigmoid).collect();

        let mut tanh_c = vec![0.0; n];
        for k in 0..n {
            let c = gate_f[k] * c_prev[k] + gate_i[k] * time[k] * cand[k];
            tanh_c[k] = c.tanh();
        }
        StepCache {
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            input: x.to_vec(),
            gate_i,
            gate_f,
            gate_o,
            cand,
            time,
            inner_time,
            log_dt,
            tanh_c,
        }
    }

    fn cell_of(cache: &StepCache) -> Vec<f64> {
        (0..cache.c_prev.len())
            .map(|k| cache.gate_f[k] * cache.c_prev[k] + cache.gate_i[k] * cache.time[k] * cache.cand[k])
            .collect()
    }

    fn hidden_of(cache: &StepCache) -> Vec<f64> {
        cache.gate_o.iter().zip(&cache.tanh_c).map(|(o, t)| o * t).collect()
    }

    /// One recurrent update; returns `(hidden, cell)`.
    pub fn cell_step(&self, prev_hidden: &[f64], prev_cell: &[f64], input: &[f64], delta_t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(delta_t >= 0.0) {
            return Err(SequenceError::NegativeDelta(delta_t));
        }
        if input.len() != self.input {
            return Err(SequenceError::Dimension {
                expected: self.input,
                found: input.len(),
            });
        }
        if prev_hidden.len() != self.hidden || prev_cell.len() != self.hidden {
            return Err(SequenceError::Dimension {
                expected: self.hidden,
                found: prev_hidden.len().max(prev_cell.len()),
            });
        }
        let cache = self.forward_step(prev_hidden, prev_cell, input, delta_t);
        Ok((Self::hidden_of(&cache), Self::cell_of(&cache)))
    }

    /// Backpropagate one step. `dh`/`dc` are gradients w.r.t. this step's
    /// hidden and cell outputs; returns the gradients w.r.t. the previous
    /// hidden and cell states.
    fn backward_step(&self, cache: &StepCache, dh: &[f64], dc_next: &[f64], grads: &mut SeqParams) -> (Vec<f64>, Vec<f64>) {
        let n = self.hidden;
        let p = &self.params;
        let mut da_i = vec![0.0; n];
        let mut da_f = vec![0.0; n];
        let mut da_o = vec![0.0; n];
        let mut da_c = vec![0.0; n];
        let mut da_t = vec![0.0; n];
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let (i, f, o, g, t, tc) = (
                cache.gate_i[k],
                cache.gate_f[k],
                cache.gate_o[k],
                cache.cand[k],
                cache.time[k],
                cache.tanh_c[k],
            );
            let d_o = dh[k] * tc;
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            dc_prev[k] = dc * f;
            da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
            da_i[k] = dc * t * g * i * (1.0 - i);
            da_t[k] = dc * i * g * t * (1.0 - t);
            da_c[k] = dc * i * t * (1.0 - g * g);
            da_o[k] = d_o * o * (1.0 - o);
        }

        let x = &cache.input;
        let h = &cache.h_prev;
        outer_acc(&da_i, x, &mut grads.w_input);
        outer_acc(&da_i, h, &mut grads.u_input);
        outer_acc(&da_f, x, &mut grads.w_forget);
        outer_acc(&da_f, h, &mut grads.u_forget);
        outer_acc(&da_o, x, &mut grads.w_output);
        outer_acc(&da_o, h, &mut grads.u_output);
        outer_acc(&da_c, x, &mut grads.w_cand);
        outer_acc(&da_c, h, &mut grads.u_cand);
        outer_acc(&da_t, x, &mut grads.w_time);
        for k in 0..n {
            grads.b_input[k] += da_i[k];
            grads.b_forget[k] += da_f[k];
            grads.b_output[k] += da_o[k];
            grads.b_cand[k] += da_c[k];
            grads.b_time[k] += da_t[k];
            let s = cache.inner_time[k];
            grads.time_scale[k] += da_t[k] * s * (1.0 - s) * cache.log_dt;
        }

        let mut dh_prev = vec![0.0; n];
        matvec_t_acc(&p.u_input, n, n, &da_i, &mut dh_prev);
        matvec_t_acc(&p.u_forget, n, n, &da_f, &mut dh_prev);
        matvec_t_acc(&p.u_output, n, n, &da_o, &mut dh_prev);
        matvec_t_acc(&p.u_cand, n, n, &da_c, &mut dh_prev);
        (dh_prev, dc_prev)
    }

    fn embed<'a>(&self, session: &[Interaction], space: &'a FactorModel) -> Result<Vec<&'a [f64]>> {
        // Pooled states are scored against item factors.
        if self.hidden != space.dim() {
            return Err(SequenceError::Dimension {
                expected: self.hidden,
                found: space.dim(),
            });
        }
        session
            .iter()
            .map(|e| {
                let v = space
                    .item_factors(e.item_id)
                    .ok_or(SequenceError::MissingEmbedding(e.item_id))?;
                if v.len() != self.input {
                    return Err(SequenceError::Dimension {
                        expected: self.input,
                        found: v.len(),
                    });
                }
                Ok(v)
            })
            .collect()
    }

    fn run(&self, inputs: &[&[f64]], dts: &[f64]) -> Vec<StepCache> {
        let n = self.hidden;
        let mut caches: Vec<StepCache> = Vec::with_capacity(inputs.len());
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for (x, &dt) in inputs.iter().zip(dts) {
            let cache = self.forward_step(&h, &c, x, dt);
            h = Self::hidden_of(&cache);
            c = Self::cell_of(&cache);
            caches.push(cache);
        }
        caches
    }

    fn query_of(&self, last: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.hidden];
        matvec_acc(&self.params.query, self.hidden, self.hidden, last, &mut q);
        q
    }

    fn attend(&self, states: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let scale = 1.0 / (self.hidden as f64).sqrt();
        let q = self.query_of(states.last().expect("non-empty prefix"));
        let scores: Vec<f64> = states.iter().map(|h| dot(&q, h) * scale).collect();
        let weights = softmax(&scores);
        let mut pooled = vec![0.0; self.hidden];
        for (w, h) in weights.iter().zip(states) {
            crate::linalg::axpy(*w, h, &mut pooled);
        }
        (pooled, weights, q)
    }

    /// Attention weights over the hidden states of `states`, querying with the
    /// last one.
    pub fn attention_weights(&self, states: &[Vec<f64>]) -> Vec<f64> {
        self.attend(states).1
    }

    /// Run the cell over a session and pool its hidden states.
    pub fn pool_session(&self, session: &[Interaction], space: &FactorModel) -> Result<Pooled> {
        if session.is_empty() {
            return Err(SequenceError::EmptySession);
        }
        let inputs = self.embed(session, space)?;
        let caches = self.run(&inputs, &deltas(session));
        let states: Vec<Vec<f64>> = caches.iter().map(Self::hidden_of).collect();
        let (vector, weights, _) = self.attend(&states);
        Ok(Pooled { vector, weights })
    }

    /// Hidden states for every step of a session.
    pub fn hidden_states(&self, session: &[Interaction], space: &FactorModel) -> Result<Vec<Vec<f64>>> {
        let inputs = self.embed(session, space)?;
        Ok(self.run(&inputs, &deltas(session)).iter().map(Self::hidden_of).collect())
    }

    /// Summed BPR loss of a session: at every step `t < len-1` the pooled
    /// prefix representation must score `session[t+1]` above `negatives[t]`.
    pub fn session_loss(&self, session: &[Interaction], negatives: &[ItemId], space: &FactorModel) -> Result<f64> {
        self.loss_impl(session, negatives, space, None)
    }

    /// Loss plus analytic gradients for every parameter tensor.
    pub fn loss_and_grad(&self, session: &[Interaction], negatives: &[ItemId], space: &FactorModel) -> Result<(f64, SeqParams)> {
        let mut grads = self.params.zeros_like();
        let loss = self.loss_impl(session, negatives, space, Some(&mut grads))?;
        Ok((loss, grads))
    }

    fn loss_impl(&self, session: &[Interaction], negatives: &[ItemId], space: &FactorModel, grads: Option<&mut SeqParams>) -> Result<f64> {
        let steps = session.len().saturating_sub(1);
        if negatives.len() != steps {
            return Err(SequenceError::Negatives {
                expected: steps,
                found: negatives.len(),
            });
        }
        if steps == 0 {
            return Ok(0.0);
        }
        let n = self.hidden;
        let inputs = self.embed(session, space)?;
        let neg_vecs: Vec<&[f64]> = negatives
            .iter()
            .map(|&i| space.item_factors(i).ok_or(SequenceError::MissingEmbedding(i)))
            .collect::<Result<_>>()?;
        let caches = self.run(&inputs, &deltas(session));
        let states: Vec<Vec<f64>> = caches.iter().map(Self::hidden_of).collect();
        let scale = 1.0 / (n as f64).sqrt();

        let mut loss = 0.0;
        let mut dstates = grads.as_ref().map(|_| vec![vec![0.0; n]; states.len()]);
        let mut dquery_w = grads.as_ref().map(|_| vec![0.0; n * n]);

        for t in 0..steps {
            let prefix = &states[..=t];
            let (pooled, weights, q) = self.attend(prefix);
            let pos = inputs[t + 1];
            let neg = neg_vecs[t];
            let margin = dot(&pooled, pos) - dot(&pooled, neg);
            loss += softplus(-margin);

            let Some(dstates) = dstates.as_mut() else {
                continue;
            };
            let dmargin = sigmoid(margin) - 1.0;
            let dpooled: Vec<f64> = pos.iter().zip(neg).map(|(a, b)| dmargin * (a - b)).collect();

            let dweights: Vec<f64> = prefix.iter().map(|h| dot(&dpooled, h)).collect();
            let mean: f64 = weights.iter().zip(&dweights).map(|(a, g)| a * g).sum();
            let mut dq = vec![0.0; n];
            for (j, h) in prefix.iter().enumerate() {
                let dscore = weights[j] * (dweights[j] - mean);
                crate::linalg::axpy(weights[j], &dpooled, &mut dstates[j]);
                crate::linalg::axpy(dscore * scale, &q, &mut dstates[j]);
                crate::linalg::axpy(dscore * scale, h, &mut dq);
            }
            let query_source = &prefix[t];
            outer_acc(&dq, query_source, dquery_w.as_mut().expect("grads enabled"));
            matvec_t_acc(&self.params.query, n, n, &dq, &mut dstates[t]);
        }

        if let (Some(grads), Some(mut dstates), Some(dq)) = (grads, dstates, dquery_w) {
            for (g, d) in grads.query.iter_mut().zip(&dq) {
                *g += d;
            }
            let mut dh_next = vec![0.0; n];
            let mut dc_next = vec![0.0; n];
            for t in (0..states.len()).rev() {
                crate::linalg::axpy(1.0, &dh_next, &mut dstates[t]);
                let (dh_prev, dc_prev) = self.backward_step(&caches[t], &dstates[t], &dc_next, grads);
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        Ok(loss)
    }
}

impl Snapshot for TimeAwareLstm {
    const KIND: &'static str = "curio-sequence";
    const VERSION: u32 = 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTraining {
    pub model: TimeAwareLstm,
    /// Mean BPR loss per prediction step, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

fn sample_negatives(pool: &[ItemId], session: &[Interaction], seed: u64, epoch: usize, user: UserId) -> Result<Vec<ItemId>> {
    if pool.len() < 2 {
        return Err(SequenceError::ItemPool);
    }
    let mut rng = stream_rng(seed, "seq-neg", ((epoch as u64) << 32) | u64::from(user));
    let mut out = Vec::with_capacity(session.len().saturating_sub(1));
    for next in &session[1..] {
        loop {
            let cand = pool[rng.random_range(0..pool.len())];
            if cand != next.item_id {
                out.push(cand);
                break;
            }
        }
    }
    Ok(out)
}

/// Train the sequence model on per-user sessions against frozen item factors.
///
/// Sessions shorter than two events contribute nothing. Per-session
/// gradients are computed in parallel and summed in a fixed order, so results
/// do not depend on the thread count.
pub fn train_sequence_model(sessions: &[UserEvents<'_>], space: &FactorModel, hyper: &SeqHyper, seed: u64) -> Result<SequenceTraining> {
    let dim = space.dim();
    for s in sessions {
        if s.events.is_empty() {
            return Err(SequenceError::EmptySession);
        }
        for e in s.events {
            if space.item_factors(e.item_id).is_none() {
                return Err(SequenceError::MissingEmbedding(e.item_id));
            }
        }
    }
    let usable: Vec<UserEvents<'_>> = sessions.iter().copied().filter(|s| s.events.len() >= 2).collect();
    let total_steps: usize = usable.iter().map(|s| s.events.len() - 1).sum();
    if total_steps == 0 {
        return Err(SequenceError::NoTrainingSteps);
    }
    let pool = space.item_ids();
    let mut model = TimeAwareLstm::new(dim, dim, seed);
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr), &model.params);
    let batch = hyper.batch_users.max(1);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut stream_rng(seed, "seq-order", epoch as u64));
        let mut epoch_total = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<Result<(f64, SeqParams, usize)>> = chunk
                .par_iter()
                .map(|&k| {
                    let s = usable[k];
                    let negs = sample_negatives(pool, s.events, seed, epoch, s.user_id)?;
                    let (loss, g) = model.loss_and_grad(s.events, &negs, space)?;
                    Ok((loss, g, negs.len()))
                })
                .collect();
            let mut grads = model.params.zeros_like();
            let mut steps = 0usize;
            for r in results {
                let (loss, g, n) = r?;
                epoch_total += loss;
                steps += n;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / steps as f64);
            let clip = clip_factor(grads.sq_norm(), hyper.clip_norm);
            opt.tick();
            opt.update_dense(&mut model.params, &grads, clip);
        }
        let mean = epoch_total / total_steps as f64;
        if !mean.is_finite() || !model.params.all_finite() {
            return Err(SequenceError::Diverged { epoch });
        }
        log::debug!("sequence epoch {epoch}: loss {mean:.6}");
        epoch_loss.push(mean);
    }
    Ok(SequenceTraining { model, epoch_loss })
}

/// Top-20 catalog items by `pooled . q_i` for a session, with the shared item
/// factors attached.
pub fn short_term_preferences<I>(model: &TimeAwareLstm, user_id: UserId, session: &[Interaction], space: &FactorModel, catalog: I) -> Result<PreferenceSet>
where
    I: IntoIterator<Item = ItemId>,
{
    let pooled = model.pool_session(session, space)?;
    let scored: Vec<(ItemId, f64)> = catalog
        .into_iter()
        .filter_map(|i| space.item_factors(i).map(|v| (i, dot(&pooled.vector, v))))
        .collect();
    Ok(preference_set_from_scores(space, user_id, PreferenceKind::Short, scored)?)
}
