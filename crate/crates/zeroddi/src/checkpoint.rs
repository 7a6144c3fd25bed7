//! Binary training checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "ZDCK" u32 version
//! u64 atom_vocab
//! u32 len, config text (canonical key = value form)
//! u64 completed epochs, u64 optimizer step
//! f64 learning rate, β₁, β₂, ε
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u32 parameter count, then per parameter:
//!     u32 len, name, u32 rows, u32 cols, rows·cols f64 values, first moments, second moments
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use zeroddi_core::model::Model;
use zeroddi_core::nn::ParamStore;
use zeroddi_core::train::{Adam, TrainConfig, TrainState};
use zeroddi_core::Tensor;

use crate::config::{format_config, parse_config};
use crate::error::{Error, Result};
use crate::formats::{read_file, write_file};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub atom_vocab: usize,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self) -> &Model {
        &self.state.model
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(ck.atom_vocab as u64).to_le_bytes());
    let cfg = format_config(&ck.config);
    b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    b.extend_from_slice(cfg.as_bytes());
    let st = &ck.state;
    let opt = &st.optimizer;
    b.extend_from_slice(&(st.epoch as u64).to_le_bytes());
    b.extend_from_slice(&opt.step.to_le_bytes());
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.eps] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&st.rng.get_seed());
    b.extend_from_slice(&st.rng.get_stream().to_le_bytes());
    b.extend_from_slice(&st.rng.get_word_pos().to_le_bytes());
    let params = &st.model.params;
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, (name, t)) in params.iter().enumerate() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        b.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for src in [t, &opt.m[i], &opt.v[i]] {
            for v in src.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    b
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 in checkpoint"))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::format(self.path, "tensor size overflows"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "tensor size overflows"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::matrix(rows, cols, data)?)
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (missing ZDCK header)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible { path: path.to_path_buf(), found: version, expected: CHECKPOINT_VERSION });
    }
    let atom_vocab = r.u64()? as usize;
    let config = parse_config(&r.string()?)?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let (learning_rate, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let name = r.string()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        params.add(name, r.tensor(rows, cols)?);
        m.push(r.tensor(rows, cols)?);
        v.push(r.tensor(rows, cols)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let model = Model::from_params(config.model_config(atom_vocab), &params)
        .map_err(|e| Error::format(path, format!("parameters do not match the stored config: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let optimizer = Adam { learning_rate, beta1, beta2, eps, step, m, v };
    Ok(Checkpoint { config, atom_vocab, state: TrainState { model, optimizer, epoch, rng } })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;

    fn tiny() -> Checkpoint {
        let config = TrainConfig { d_v: 4, d_n: 4, d_r: 3, n_substructures: 2, d_t: 5, ..TrainConfig::default() };
        let mut state = TrainState::new(&config, 7).unwrap();
        state.rng.next_u64();
        Checkpoint { config, atom_vocab: 7, state }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = encode(&tiny());
        let b = encode(&decode(Path::new("x"), &a).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let a = encode(&tiny());
        for cut in [3, 10, a.len() / 2, a.len() - 1] {
            assert!(matches!(decode(Path::new("x"), &a[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut a = encode(&tiny());
        a[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode(Path::new("x"), &a), Err(Error::Incompatible { found: 99, .. })));
    }

    #[test]
    fn rng_position_survives() {
        let ck = tiny();
        let mut back = decode(Path::new("x"), &encode(&ck)).unwrap();
        let mut orig = ck.state.rng.clone();
        assert_eq!(orig.next_u64(), back.state.rng.next_u64());
    }
}
