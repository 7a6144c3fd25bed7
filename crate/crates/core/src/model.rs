//! The full model: pair encoder plus DDIE representation learner, and the
//! batched forward pass used by training and scoring.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::brl::{Brl, BrlDims, ClassBank, Fusion};
use crate::data::{DdieSemanticsRecord, MolecularGraph};
use crate::encoder::{DrugEncoding, EncoderDims, PairEncoder, PairEncoding};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub atom_vocab: usize,
    pub d_v: usize,
    pub d_n: usize,
    pub d_r: usize,
    /// Substructure rows per pair (`N`); each drug contributes `N / 2`.
    pub n_substructures: usize,
    pub d_t: usize,
    pub gin_layers: usize,
    pub fusion: Fusion,
    pub use_attributes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            atom_vocab: 64,
            d_v: 300,
            d_n: 300,
            d_r: 256,
            n_substructures: 30,
            d_t: 768,
            gin_layers: 2,
            fusion: Fusion::Ssf,
            use_attributes: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.atom_vocab, self.d_v, self.d_n, self.d_r, self.d_t, self.gin_layers];
        if dims.contains(&0) {
            return Err(Error::Argument(format!("model dimensions must be positive: {self:?}")));
        }
        if self.n_substructures < 2 || !self.n_substructures.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "substructure count N={} must be even and >= 2",
                self.n_substructures
            )));
        }
        Ok(())
    }

    pub fn per_drug(&self) -> usize {
        self.n_substructures / 2
    }
}

/// Which substructure matrix conditions the DDIE representations at scoring time.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// The query pair's own `P`, as in training.
    #[default]
    Pair,
    /// The learned prototypes `[Q₀ ; Q₀]`, independent of the pair.
    Prototype,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: PairEncoder,
    pub brl: Brl,
}

/// Tape handles for one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// Per-instance pair representations, `1 x d_r` each.
    pub h_rows: Vec<Var>,
    /// Row stack of `h_rows`, `B x d_r`.
    pub h: Var,
    /// Per-instance class representations, `C x d_r` each.
    pub z: Vec<Var>,
    /// Matched class index of each instance into the class list.
    pub labels: Vec<usize>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = PairEncoder::new(
            &mut params,
            &mut rng,
            EncoderDims {
                atom_vocab: config.atom_vocab,
                d_v: config.d_v,
                d_n: config.d_n,
                d_r: config.d_r,
                per_drug: config.per_drug(),
                gin_layers: config.gin_layers,
            },
        );
        let brl = Brl::new(
            &mut params,
            &mut rng,
            BrlDims { d_t: config.d_t, d_n: config.d_n, d_r: config.d_r },
            config.fusion,
            config.use_attributes,
        );
        Ok(Self { config, params, encoder, brl })
    }

    /// Rebuilds a model around previously saved parameters.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn class_bank(&self, tape: &mut Tape, p: &Bound, classes: &[&DdieSemanticsRecord]) -> Result<ClassBank> {
        if classes.is_empty() {
            return Err(Error::Argument("class set is empty".into()));
        }
        self.brl.class_bank(tape, p, classes)
    }

    /// Encodes every pair, reusing per-drug encodings within the tape.
    pub fn encode_pairs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pairs: &[(&MolecularGraph, &MolecularGraph)],
    ) -> Result<Vec<PairEncoding>> {
        let queries = self.encoder.prototype_queries(tape, p)?;
        let mut drugs: BTreeMap<&str, DrugEncoding> = BTreeMap::new();
        let mut out = Vec::with_capacity(pairs.len());
        for &(g1, g2) in pairs {
            let mut encs = [None, None];
            for (slot, g) in encs.iter_mut().zip([g1, g2]) {
                let enc = match drugs.get(g.drug_id.as_str()) {
                    Some(e) => *e,
                    None => {
                        let e = self.encoder.encode_drug(tape, p, g, queries)?;
                        drugs.insert(g.drug_id.as_str(), e);
                        e
                    }
                };
                *slot = Some(enc);
            }
            let [Some(d1), Some(d2)] = encs else { unreachable!() };
            out.push(self.encoder.combine(tape, p, d1, d2)?);
        }
        Ok(out)
    }

    /// Pair representations and per-pair class representations for a batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pairs: &[(&MolecularGraph, &MolecularGraph)],
        classes: &[&DdieSemanticsRecord],
        labels: &[usize],
    ) -> Result<BatchForward> {
        if pairs.len() != labels.len() {
            return Err(Error::Argument(format!("{} pairs but {} labels", pairs.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Argument(format!("label {bad} out of {} classes", classes.len())));
        }
        let bank = self.class_bank(tape, p, classes)?;
        let encs = self.encode_pairs(tape, p, pairs)?;
        let mut h_rows = Vec::with_capacity(encs.len());
        let mut z = Vec::with_capacity(encs.len());
        for enc in &encs {
            h_rows.push(enc.h);
            z.push(self.brl.encode_class_set(tape, p, enc.p, &bank)?);
        }
        let h = tape.concat_rows(&h_rows)?;
        Ok(BatchForward { h_rows, h, z, labels: labels.to_vec() })
    }

    fn prototype_substructures(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        tape.concat_rows(&[p[self.encoder.q0], p[self.encoder.q0]])
    }

    /// Dot-product scores `h · z^j` of every pair against every class, plus the
    /// class representations themselves. Evaluated without gradients.
    pub fn score_pairs(
        &self,
        pairs: &[(&MolecularGraph, &MolecularGraph)],
        classes: &[&DdieSemanticsRecord],
        conditioning: Conditioning,
    ) -> Result<Vec<PairScores>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let bank = self.class_bank(&mut tape, &p, classes)?;
        let encs = self.encode_pairs(&mut tape, &p, pairs)?;
        let proto = match conditioning {
            Conditioning::Pair => None,
            Conditioning::Prototype => {
                let sub = self.prototype_substructures(&mut tape, &p)?;
                Some(self.brl.encode_class_set(&mut tape, &p, sub, &bank)?)
            }
        };
        let mut out = Vec::with_capacity(encs.len());
        for enc in &encs {
            let z = match proto {
                Some(z) => z,
                None => self.brl.encode_class_set(&mut tape, &p, enc.p, &bank)?,
            };
            let s = tape.matmul_nt(enc.h, z)?;
            out.push(PairScores {
                h: tape.value(enc.h).clone(),
                z: tape.value(z).clone(),
                scores: tape.value(s).data().to_vec(),
            });
        }
        Ok(out)
    }

    /// SSF attention `A` (`N x (M+1)`) between a pair and one class.
    pub fn attention_map(
        &self,
        pair: (&MolecularGraph, &MolecularGraph),
        record: &DdieSemanticsRecord,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encoder.encode_pair(&mut tape, &p, pair.0, pair.1)?;
        let t = self.brl.bilevel_tokens(&mut tape, &p, record)?;
        self.brl.attention_map(&mut tape, &p, t, enc.p)
    }
}

/// Scoring output for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub h: Tensor,
    pub z: Tensor,
    pub scores: Vec<f64>,
}
