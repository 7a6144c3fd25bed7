//! DDIE representation learning from class-level and attribute-level tokens.
//!
//! A DDIE's token bank becomes the bi-level token matrix
//! `T = LN[φ₁(t^c_1..M) ; mean_l φ₂(t^a_l)]` with `M + 1` rows, which is then
//! fused under the guidance of a drug pair's substructures `P`:
//!
//! ```text
//! Q = P W_Q,  K = T W_K,  V = T W_V
//! A = softmax(Q Kᵀ / √d_r),  O = A V,  z = mean over the rows of O
//! ```
//!
//! `T`, `K` and `V` do not depend on the pair, so a [`ClassBank`] computes
//! them once per tape and every pair reuses them.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::DdieSemanticsRecord;
use crate::error::{shape_err, Result};
use crate::nn::{glorot, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the bi-level tokens are reduced to one DDIE representation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Substructure-guided cross attention.
    #[default]
    Ssf,
    /// Plain average of the rows of `T` (the "without SSF" ablation).
    MeanTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrlDims {
    pub d_t: usize,
    pub d_n: usize,
    pub d_r: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Brl {
    pub dims: BrlDims,
    pub fusion: Fusion,
    pub use_attributes: bool,
    pub phi1: Mlp,
    pub phi2: Mlp,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Pair-independent per-class values.
#[derive(Copy, Clone, Debug)]
pub struct ClassKeys {
    pub t: Var,
    pub k: Var,
    pub v: Var,
}

/// Cached [`ClassKeys`] for an ordered list of DDIE records.
#[derive(Clone, Debug)]
pub struct ClassBank {
    pub keys: Vec<ClassKeys>,
}

impl Brl {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: BrlDims, fusion: Fusion, use_attributes: bool) -> Self {
        let BrlDims { d_t, d_n, d_r } = dims;
        let phi1 = Mlp::new(store, rng, "brl.phi1", &[d_t, d_r, d_r]);
        let phi2 = Mlp::new(store, rng, "brl.phi2", &[d_t, d_r, d_r]);
        let ln_gain = store.add("brl.ln.gain", Tensor::filled(1, d_r, 1.0));
        let ln_bias = store.add("brl.ln.bias", Tensor::zeros(1, d_r));
        let w_q = store.add("brl.w_q", glorot(rng, d_n, d_r));
        let w_k = store.add("brl.w_k", glorot(rng, d_r, d_r));
        let w_v = store.add("brl.w_v", glorot(rng, d_r, d_r));
        Self { dims, fusion, use_attributes, phi1, phi2, ln_gain, ln_bias, w_q, w_k, w_v }
    }

    /// Bi-level token matrix `T`: `M + 1` rows (`M` when attributes are
    /// disabled), last row the attribute summary.
    pub fn bilevel_tokens(&self, tape: &mut Tape, p: &Bound, rec: &DdieSemanticsRecord) -> Result<Var> {
        if rec.token_dim() != self.dims.d_t {
            return Err(shape_err(
                "bilevel_tokens",
                alloc::format!("ddie {} has d_t={}, model expects {}", rec.ddie_id, rec.token_dim(), self.dims.d_t),
            ));
        }
        let ct = tape.constant(rec.class_tokens.clone());
        let class_rows = self.phi1.forward(tape, p, ct)?;
        let stacked = if self.use_attributes {
            let at = tape.constant(rec.attr_tokens.clone());
            let attr_rows = self.phi2.forward(tape, p, at)?;
            let attr = tape.mean_rows(attr_rows)?;
            tape.concat_rows(&[class_rows, attr])?
        } else {
            class_rows
        };
        tape.layer_norm(stacked, p[self.ln_gain], p[self.ln_bias], LAYER_NORM_EPS)
    }

    pub fn class_keys(&self, tape: &mut Tape, p: &Bound, t: Var) -> Result<ClassKeys> {
        let k = tape.matmul(t, p[self.w_k])?;
        let v = tape.matmul(t, p[self.w_v])?;
        Ok(ClassKeys { t, k, v })
    }

    pub fn class_bank(&self, tape: &mut Tape, p: &Bound, records: &[&DdieSemanticsRecord]) -> Result<ClassBank> {
        let keys = records
            .iter()
            .map(|rec| {
                let t = self.bilevel_tokens(tape, p, rec)?;
                self.class_keys(tape, p, t)
            })
            .collect::<Result<_>>()?;
        Ok(ClassBank { keys })
    }

    /// Pair queries `P W_Q` (`N x d_r`).
    pub fn queries(&self, tape: &mut Tape, p: &Bound, pair_sub: Var) -> Result<Var> {
        tape.matmul(pair_sub, p[self.w_q])
    }

    /// Cross attention of pair queries over one class's tokens; returns `(z, A)`.
    pub fn attend(&self, tape: &mut Tape, queries: Var, keys: &ClassKeys) -> Result<(Var, Var)> {
        let scores = tape.matmul_nt(queries, keys.k)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(self.dims.d_r as f64))?;
        let a = tape.softmax_rows(scores)?;
        let o = tape.matmul(a, keys.v)?;
        Ok((tape.mean_rows(o)?, a))
    }

    /// DDIE representation `z` (`1 x d_r`) for one class under the configured fusion.
    pub fn represent(&self, tape: &mut Tape, queries: Var, keys: &ClassKeys) -> Result<Var> {
        match self.fusion {
            Fusion::Ssf => Ok(self.attend(tape, queries, keys)?.0),
            Fusion::MeanTokens => tape.mean_rows(keys.t),
        }
    }

    /// Substructure-guided fusion of `T` given the pair substructures `P`.
    pub fn ssf_fuse(&self, tape: &mut Tape, p: &Bound, t: Var, pair_sub: Var) -> Result<Var> {
        let keys = self.class_keys(tape, p, t)?;
        let q = self.queries(tape, p, pair_sub)?;
        Ok(self.attend(tape, q, &keys)?.0)
    }

    /// Rows `z^j` for every class in `bank`, stacked into `C x d_r`.
    pub fn encode_class_set(&self, tape: &mut Tape, p: &Bound, pair_sub: Var, bank: &ClassBank) -> Result<Var> {
        let q = self.queries(tape, p, pair_sub)?;
        let rows = bank.keys.iter().map(|k| self.represent(tape, q, k)).collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    /// The `N x (M+1)` attention matrix used inside SSF.
    pub fn attention_map(&self, tape: &mut Tape, p: &Bound, t: Var, pair_sub: Var) -> Result<Tensor> {
        let keys = self.class_keys(tape, p, t)?;
        let q = self.queries(tape, p, pair_sub)?;
        let (_, a) = self.attend(tape, q, &keys)?;
        Ok(tape.value(a).clone())
    }
}
