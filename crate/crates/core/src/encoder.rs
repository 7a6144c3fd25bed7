//! Drug pair encoder.
//!
//! Each drug goes through atom embedding → GIN message passing → two heads:
//! a sum READOUT giving the graph embedding `h_g`, and a prototype-attention
//! substructure learner giving `P_g` (`N₀ x d_n`):
//!
//! ```text
//! Q = Q₀ W_Q,  K = X W_K,  V = X W_V
//! A = softmax(Q Kᵀ / √d_n)
//! P_g = ReLU((Q + A V) W_P)
//! ```
//!
//! The pair representation is `h = MLP([h_g ; h_g′])` and the pair
//! substructure matrix is the row stack `P = [P_g ; P_g′]`, so the encoder is
//! order-sensitive.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::MolecularGraph;
use crate::error::{Error, Result};
use crate::nn::{glorot, Bound, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDims {
    pub atom_vocab: usize,
    pub d_v: usize,
    pub d_n: usize,
    pub d_r: usize,
    /// Substructures per drug (`N₀`); the pair has twice as many.
    pub per_drug: usize,
    pub gin_layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GinLayer {
    pub eps: ParamId,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEncoder {
    pub dims: EncoderDims,
    pub atom_embedding: ParamId,
    pub gin: Vec<GinLayer>,
    pub q0: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_p: ParamId,
    pub pair_mlp: Mlp,
}

/// Per-drug encoder outputs.
#[derive(Copy, Clone, Debug)]
pub struct DrugEncoding {
    pub x: Var,
    pub h: Var,
    pub p: Var,
    pub attention: Var,
}

#[derive(Copy, Clone, Debug)]
pub struct PairEncoding {
    /// `1 x d_r`
    pub h: Var,
    /// `N x d_n`
    pub p: Var,
    pub drug1: DrugEncoding,
    pub drug2: DrugEncoding,
}

impl PairEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dims: EncoderDims) -> Self {
        let EncoderDims { atom_vocab, d_v, d_n, d_r, per_drug, gin_layers } = dims;
        let atom_embedding = store.add("encoder.atom_embedding", glorot(rng, atom_vocab, d_v));
        let gin = (0..gin_layers)
            .map(|l| GinLayer {
                eps: store.add(format!("encoder.gin.{l}.eps"), Tensor::scalar(0.0)),
                mlp: Mlp::new(store, rng, &format!("encoder.gin.{l}.mlp"), &[d_v, d_v, d_v]),
            })
            .collect();
        let q0 = store.add("encoder.q0", glorot(rng, per_drug, d_n));
        let w_q = store.add("encoder.w_q", glorot(rng, d_n, d_n));
        let w_k = store.add("encoder.w_k", glorot(rng, d_v, d_n));
        let w_v = store.add("encoder.w_v", glorot(rng, d_v, d_n));
        let w_p = store.add("encoder.w_p", glorot(rng, d_n, d_n));
        let pair_mlp = Mlp::new(store, rng, "encoder.pair_mlp", &[2 * d_v, d_r, d_r]);
        Self { dims, atom_embedding, gin, q0, w_q, w_k, w_v, w_p, pair_mlp }
    }

    /// Node embeddings `X` (`|V| x d_v`) after all GIN rounds
    /// `h_v ← MLP((1+ε)·h_v + Σ_{u∈N(v)} h_u)`, ReLU between rounds.
    pub fn gin_forward(&self, tape: &mut Tape, p: &Bound, graph: &MolecularGraph) -> Result<Var> {
        let vocab = self.dims.atom_vocab;
        if let Some(&code) = graph.atom_codes.iter().find(|&&c| c >= vocab) {
            return Err(Error::Vocabulary { code, vocab });
        }
        let neighbors = graph.neighbors();
        let mut x = tape.gather_rows(p[self.atom_embedding], &graph.atom_codes)?;
        for (l, layer) in self.gin.iter().enumerate() {
            if l > 0 {
                x = tape.relu(x)?;
            }
            let agg = tape.gin_aggregate(x, p[layer.eps], &neighbors)?;
            x = layer.mlp.forward(tape, p, agg)?;
        }
        Ok(x)
    }

    /// Sum over nodes.
    pub fn readout(tape: &mut Tape, x: Var) -> Result<Var> {
        tape.sum_rows(x)
    }

    /// `Q₀ W_Q`; shared by every drug, so computed once per tape.
    pub fn prototype_queries(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        tape.matmul(p[self.q0], p[self.w_q])
    }

    /// Returns `(P_g, A_g)`.
    pub fn substructure_learner(&self, tape: &mut Tape, p: &Bound, x: Var, queries: Var) -> Result<(Var, Var)> {
        let k = tape.matmul(x, p[self.w_k])?;
        let v = tape.matmul(x, p[self.w_v])?;
        let scores = tape.matmul_nt(queries, k)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(self.dims.d_n as f64))?;
        let a = tape.softmax_rows(scores)?;
        let av = tape.matmul(a, v)?;
        let mixed = tape.add(queries, av)?;
        let proj = tape.matmul(mixed, p[self.w_p])?;
        Ok((tape.relu(proj)?, a))
    }

    pub fn encode_drug(&self, tape: &mut Tape, p: &Bound, graph: &MolecularGraph, queries: Var) -> Result<DrugEncoding> {
        let x = self.gin_forward(tape, p, graph)?;
        let h = Self::readout(tape, x)?;
        let (sub, attention) = self.substructure_learner(tape, p, x, queries)?;
        Ok(DrugEncoding { x, h, p: sub, attention })
    }

    pub fn combine(&self, tape: &mut Tape, p: &Bound, d1: DrugEncoding, d2: DrugEncoding) -> Result<PairEncoding> {
        let hh = tape.concat_cols(&[d1.h, d2.h])?;
        let h = self.pair_mlp.forward(tape, p, hh)?;
        let sub = tape.concat_rows(&[d1.p, d2.p])?;
        Ok(PairEncoding { h, p: sub, drug1: d1, drug2: d2 })
    }

    pub fn encode_pair(&self, tape: &mut Tape, p: &Bound, g1: &MolecularGraph, g2: &MolecularGraph) -> Result<PairEncoding> {
        let queries = self.prototype_queries(tape, p)?;
        let d1 = self.encode_drug(tape, p, g1, queries)?;
        let d2 = self.encode_drug(tape, p, g2, queries)?;
        self.combine(tape, p, d1, d2)
    }
}
