//! Temporal encoder, temporal decoder and the reconstruction loss.
//!
//! Both encoder and decoder are a single element-wise attention block:
//!
//! ```text
//! Q, K, V = linear(query_src), linear(kv_src), linear(kv_src)
//! weights = Q ⊙ K
//! f'      = V ⊙ weights + kv_src
//! out     = f' + FFN(f')          FFN = linear -> relu -> linear
//! ```
//!
//! With `query_src == kv_src` this is self-attention (encoder, decoder);
//! the domain mixer reuses the block with a different query source.
//! Attention weights are deliberately not normalised.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const W_Q: &str = "w_q";
pub const B_Q: &str = "b_q";
pub const W_K: &str = "w_k";
pub const B_K: &str = "b_k";
pub const W_V: &str = "w_v";
pub const B_V: &str = "b_v";
pub const FFN_W1: &str = "ffn_w1";
pub const FFN_B1: &str = "ffn_b1";
pub const FFN_W2: &str = "ffn_w2";
pub const FFN_B2: &str = "ffn_b2";

/// Parameters of one attention block (encoder, decoder or mixer).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    store: ParamStore,
    dim: usize,
    hidden: usize,
}

impl EncoderParams {
    /// Projections uniform in `±1/√fan_in`, zero biases.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let pb = 1.0 / (dim as f64).sqrt();
        let hb = 1.0 / (hidden as f64).sqrt();
        let mut store = ParamStore::new();
        store.insert(W_Q, uniform(&[dim, dim], pb, rng));
        store.insert(W_K, uniform(&[dim, dim], pb, rng));
        store.insert(W_V, uniform(&[dim, dim], pb, rng));
        store.insert(FFN_W1, uniform(&[dim, hidden], pb, rng));
        store.insert(FFN_W2, uniform(&[hidden, dim], hb, rng));
        for b in [B_Q, B_K, B_V, FFN_B2] {
            store.insert(b, Tensor::zeros(&[dim]));
        }
        store.insert(FFN_B1, Tensor::zeros(&[hidden]));
        Self { store, dim, hidden }
    }

    /// Identity projections, zero biases and an all-zero feed-forward.
    pub fn identity(dim: usize, hidden: usize) -> Self {
        let mut store = ParamStore::new();
        for w in [W_Q, W_K, W_V] {
            store.insert(w, Tensor::identity(dim));
        }
        for b in [B_Q, B_K, B_V, FFN_B2] {
            store.insert(b, Tensor::zeros(&[dim]));
        }
        store.insert(FFN_W1, Tensor::zeros(&[dim, hidden]));
        store.insert(FFN_B1, Tensor::zeros(&[hidden]));
        store.insert(FFN_W2, Tensor::zeros(&[hidden, dim]));
        Self { store, dim, hidden }
    }

    /// Wraps an existing store after validating every expected shape.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let (dim, _) = store.get(W_Q)?.dims2()?;
        let (_, hidden) = store.get(FFN_W1)?.dims2()?;
        let expected: [(&str, Vec<usize>); 10] = [
            (W_Q, vec![dim, dim]),
            (W_K, vec![dim, dim]),
            (W_V, vec![dim, dim]),
            (B_Q, vec![dim]),
            (B_K, vec![dim]),
            (B_V, vec![dim]),
            (FFN_W1, vec![dim, hidden]),
            (FFN_B1, vec![hidden]),
            (FFN_W2, vec![hidden, dim]),
            (FFN_B2, vec![dim]),
        ];
        if store.len() != expected.len() {
            return Err(crate::Error::Structural(format!(
                "attention block expects {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in expected {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(crate::Error::Structural(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            t.check_finite(name)?;
        }
        Ok(Self { store, dim, hidden })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    /// Runs the self-attention block on `frames` without tracking gradients.
    pub fn apply(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = tape.leaf(frames);
        let out = dte_forward(&mut tape, f, &p)?;
        Ok(tape.to_tensor(out))
    }
}

/// The shared block. `query_src` feeds the query projection, `kv_src` feeds
/// key, value and the residual path.
pub fn attention_block(tape: &mut Tape, query_src: Var, kv_src: Var, p: &Bound) -> Result<Var> {
    let (qs, ks) = (tape.shape(query_src).to_vec(), tape.shape(kv_src).to_vec());
    if qs != ks || qs.len() != 2 {
        return shape_err(format!("attention inputs must be equal-shaped matrices, got {qs:?} and {ks:?}"));
    }
    let q = tape.linear(query_src, p.var(W_Q)?, p.var(B_Q)?)?;
    let k = tape.linear(kv_src, p.var(W_K)?, p.var(B_K)?)?;
    let v = tape.linear(kv_src, p.var(W_V)?, p.var(B_V)?)?;
    let weights = tape.mul(q, k)?;
    let reweighted = tape.mul(v, weights)?;
    let residual = tape.add(reweighted, kv_src)?;
    let h = tape.linear(residual, p.var(FFN_W1)?, p.var(FFN_B1)?)?;
    let h = tape.relu(h)?;
    let ffn = tape.linear(h, p.var(FFN_W2)?, p.var(FFN_B2)?)?;
    tape.add(residual, ffn)
}

/// Temporal encoder on an `M × D` frame matrix.
pub fn dte_forward(tape: &mut Tape, frames: Var, p: &Bound) -> Result<Var> {
    attention_block(tape, frames, frames, p)
}

/// Temporal decoder: the same block structure applied to encoded frames.
pub fn dtd_forward(tape: &mut Tape, encoded: Var, p: &Bound) -> Result<Var> {
    attention_block(tape, encoded, encoded, p)
}

/// Reconstruction loss: per-frame squared distance divided by `D`,
/// averaged over the `M` frames.
pub fn cycle_loss(tape: &mut Tape, recon: Var, original: Var) -> Result<Var> {
    let shape = tape.shape(original).to_vec();
    if tape.shape(recon) != shape.as_slice() || shape.len() != 2 {
        return shape_err(format!("cycle loss needs equal matrix shapes, got {:?} and {shape:?}", tape.shape(recon)));
    }
    let diff = tape.sub(recon, original)?;
    let sq = tape.l2_norm_sq(diff)?;
    tape.scale(sq, 1.0 / (shape[0] * shape[1]) as f64)
}
