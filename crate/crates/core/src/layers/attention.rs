use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Linear, ParamSet};
use crate::tensor::{ReduceKind, Tape, TensorError, Var};

/// Floor applied to the linear-attention normalizer.
pub const LINEAR_ATTENTION_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    Softmax,
    Linear,
}

/// Single-head attention.
///
/// `Softmax`: `softmax(Q Kᵀ / sqrt(d_k)) V` (scaling only when `scale_qk`).
/// `Linear`: with `φ(u) = elu(u) + 1`,
/// `out_i = φ(q_i) (Σ_j φ(k_j)ᵀ v_j) / (φ(q_i) · Σ_j φ(k_j))`, which costs
/// `O(l_q + l_kv)` in sequence length.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    kernel: AttentionKernel,
    scale_qk: bool,
) -> Result<Var, TensorError> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let ok = qs.len() == 2 && ks.len() == 2 && vs.len() == 2 && qs[1] == ks[1] && ks[0] == vs[0];
    if !ok {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        });
    }
    match kernel {
        AttentionKernel::Softmax => {
            let kt = tape.transpose(k)?;
            let mut scores = tape.matmul(q, kt)?;
            if scale_qk {
                scores = tape.scalar_mul(scores, 1.0 / (qs[1] as f64).sqrt())?;
            }
            let weights = tape.softmax_rows(scores)?;
            tape.matmul(weights, v)
        }
        AttentionKernel::Linear => {
            let phi_q = tape.elu_plus_one(q)?;
            let phi_k = tape.elu_plus_one(k)?;
            let phi_kt = tape.transpose(phi_k)?;
            let kv = tape.matmul(phi_kt, v)?;
            let num = tape.matmul(phi_q, kv)?;
            let k_sum = tape.reduce(phi_k, Some(0), ReduceKind::Sum)?;
            let k_sum = tape.reshape(k_sum, &[ks[1], 1])?;
            let den = tape.matmul(phi_q, k_sum)?;
            let den = tape.clamp_min(den, LINEAR_ATTENTION_DENOM_FLOOR)?;
            let den = tape.expand_cols(den, vs[1])?;
            tape.div(num, den)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionHeadConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub kernel: AttentionKernel,
    pub scale_qk: bool,
}

impl AttentionHeadConfig {
    /// Splits `d_model` evenly across `n_heads`.
    pub fn new(d_model: usize, n_heads: usize, kernel: AttentionKernel, scale_qk: bool) -> Result<Self, TensorError> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::InvalidArgument(format!(
                "n_heads ({n_heads}) must divide d_model ({d_model})"
            )));
        }
        let cfg = Self {
            d_model,
            n_heads,
            d_k: d_model / n_heads,
            d_v: d_model / n_heads,
            kernel,
            scale_qk,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(TensorError::InvalidArgument("attention dims must be positive".into()));
        }
        if self.n_heads * self.d_k != self.d_model || self.n_heads * self.d_v != self.d_model {
            return Err(TensorError::InvalidArgument(format!(
                "n_heads * d_k and n_heads * d_v must equal d_model: {} * ({}, {}) vs {}",
                self.n_heads, self.d_k, self.d_v, self.d_model
            )));
        }
        Ok(())
    }
}

/// Projections `I_q`, `I_k`, `I_v` (no bias) followed by per-head attention,
/// concatenation and an output projection back to `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionHeadConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    /// `d_query` / `d_source` are the widths of the query-side and key/value-side inputs.
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionHeadConfig,
        d_query: usize,
        d_source: usize,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let inner_qk = cfg.n_heads * cfg.d_k;
        let inner_v = cfg.n_heads * cfg.d_v;
        Ok(Self {
            cfg,
            query: Linear::new(params, rng, &format!("{name}.query"), d_query, inner_qk, false),
            key: Linear::new(params, rng, &format!("{name}.key"), d_source, inner_qk, false),
            value: Linear::new(params, rng, &format!("{name}.value"), d_source, inner_v, false),
            output: Linear::new(params, rng, &format!("{name}.output"), inner_v, cfg.d_model, true),
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x_q: Var, x_kv: Var) -> Result<Var, TensorError> {
        let q = self.query.forward(tape, bound, x_q)?;
        let k = self.key.forward(tape, bound, x_kv)?;
        let v = self.value.forward(tape, bound, x_kv)?;
        let (dk, dv) = (self.cfg.d_k, self.cfg.d_v);
        let heads = (0..self.cfg.n_heads)
            .map(|h| {
                let qh = tape.slice(q, 1, h * dk, (h + 1) * dk)?;
                let kh = tape.slice(k, 1, h * dk, (h + 1) * dk)?;
                let vh = tape.slice(v, 1, h * dv, (h + 1) * dv)?;
                attention(tape, qh, kh, vh, self.cfg.kernel, self.cfg.scale_qk)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        self.output.forward(tape, bound, merged)
    }
}
