//! Dataset files.
//!
//! A dataset directory holds:
//!
//! ```text
//! graphs.jsonl          one {"drug_id", "atom_codes", "bonds"} object per line
//! tokens/manifest.json  {ddie_id: {"class_file", "attr_files": [..]}}, paths relative to tokens/
//! tokens/*.zdtk         token matrices
//! instances.tsv         drug1_id <TAB> drug2_id <TAB> ddie_id
//! splits.json           {"seen", "unseen", "folds", "gzsl_seen_holdout_fraction", "seed"}
//! ```
//!
//! A token matrix file is `"ZDTK"`, u32 LE rows, u32 LE cols, then
//! `rows * cols` f32 LE values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zeroddi_core::data::{Dataset, DdieSemanticsRecord, Instance, MolecularGraph, SplitSpec};
use zeroddi_core::Tensor;

use crate::error::{Error, Result};

pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const TOKENS_DIR: &str = "tokens";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INSTANCES_FILE: &str = "instances.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const ZDTK_MAGIC: &[u8; 4] = b"ZDTK";

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    drug_id: String,
    atom_codes: Vec<usize>,
    bonds: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFiles {
    pub class_file: String,
    pub attr_files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    seen: Vec<String>,
    unseen: Vec<String>,
    folds: Vec<Vec<String>>,
    gzsl_seen_holdout_fraction: f64,
    seed: u64,
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() }
}

pub fn load_graphs(path: &Path) -> Result<BTreeMap<String, MolecularGraph>> {
    let mut graphs = BTreeMap::new();
    for (n, line) in lines(path)? {
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e))?;
        let graph = MolecularGraph::new(rec.drug_id, rec.atom_codes, rec.bonds)?;
        if graphs.contains_key(&graph.drug_id) {
            return Err(parse_err(path, n, format!("duplicate drug_id {}", graph.drug_id)));
        }
        graphs.insert(graph.drug_id.clone(), graph);
    }
    Ok(graphs)
}

pub fn graphs_to_string<'a>(graphs: impl IntoIterator<Item = &'a MolecularGraph>) -> String {
    let mut out = String::new();
    for g in graphs {
        let rec = GraphRecord { drug_id: g.drug_id.clone(), atom_codes: g.atom_codes.clone(), bonds: g.bonds.clone() };
        out.push_str(&serde_json::to_string(&rec).expect("graph records serialize"));
        out.push('\n');
    }
    out
}

pub fn encode_token_matrix(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.len());
    out.extend_from_slice(ZDTK_MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_token_matrix(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != ZDTK_MAGIC {
        return Err(Error::format(path, "missing ZDTK header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::format(
            path,
            format!("header declares {rows}x{cols} but payload holds {} bytes", payload.len()),
        ));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

pub fn load_token_matrix(path: &Path) -> Result<Tensor> {
    decode_token_matrix(path, &read_file(path)?)
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = parts.iter().flat_map(|t| (0..t.rows()).map(|r| t.row_slice(r).to_vec())).collect();
    Ok(Tensor::from_rows(&rows)?)
}

/// Loads every DDIE record listed in a token manifest. Multiple attribute
/// files are concatenated row-wise.
pub fn load_token_bank(manifest_path: &Path) -> Result<BTreeMap<String, DdieSemanticsRecord>> {
    let text = read_file(manifest_path)?;
    let manifest: BTreeMap<String, TokenFiles> =
        serde_json::from_slice(&text).map_err(|e| parse_err(manifest_path, e.line(), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut bank = BTreeMap::new();
    let mut d_t = None;
    for (id, files) in manifest {
        let class_tokens = load_token_matrix(&base.join(&files.class_file))?;
        if files.attr_files.is_empty() {
            return Err(Error::Core(zeroddi_core::Error::Validation(format!("ddie {id} lists no attribute files"))));
        }
        let attrs = files.attr_files.iter().map(|f| load_token_matrix(&base.join(f))).collect::<Result<Vec<_>>>()?;
        let attr_tokens = if attrs.len() == 1 { attrs.into_iter().next().unwrap() } else { stack_rows(&attrs)? };
        let record = DdieSemanticsRecord::new(id.clone(), class_tokens, attr_tokens)?;
        match d_t {
            None => d_t = Some(record.token_dim()),
            Some(d) if d != record.token_dim() => {
                return Err(Error::Core(zeroddi_core::Error::Validation(format!(
                    "ddie {id} has token dimension {} but earlier records have {d}",
                    record.token_dim()
                ))))
            }
            _ => {}
        }
        bank.insert(id, record);
    }
    Ok(bank)
}

/// Writes one class file and one attribute file per record plus the manifest.
pub fn write_token_bank(dir: &Path, bank: &BTreeMap<String, DdieSemanticsRecord>) -> Result<()> {
    let mut manifest = BTreeMap::new();
    for (id, rec) in bank {
        let class_file = format!("{id}.class.zdtk");
        let attr_file = format!("{id}.attr.zdtk");
        write_file(&dir.join(&class_file), &encode_token_matrix(&rec.class_tokens))?;
        write_file(&dir.join(&attr_file), &encode_token_matrix(&rec.attr_tokens))?;
        manifest.insert(id.clone(), TokenFiles { class_file, attr_files: vec![attr_file] });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_instances(path: &Path) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err(path, n, "expected drug1_id<TAB>drug2_id<TAB>ddie_id"));
        }
        out.push(Instance::new(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

pub fn instances_to_string(instances: &[Instance]) -> String {
    instances.iter().map(|i| format!("{}\t{}\t{}\n", i.drug1, i.drug2, i.ddie)).collect()
}

pub fn load_splits(path: &Path) -> Result<SplitSpec> {
    let bytes = read_file(path)?;
    let r: SplitRecord = serde_json::from_slice(&bytes).map_err(|e| parse_err(path, e.line(), e))?;
    let split = SplitSpec {
        seen: r.seen,
        unseen: r.unseen,
        folds: r.folds,
        gzsl_seen_holdout_fraction: r.gzsl_seen_holdout_fraction,
        seed: r.seed,
    };
    split.validate()?;
    Ok(split)
}

pub fn splits_to_string(split: &SplitSpec) -> String {
    let r = SplitRecord {
        seen: split.seen.clone(),
        unseen: split.unseen.clone(),
        folds: split.folds.clone(),
        gzsl_seen_holdout_fraction: split.gzsl_seen_holdout_fraction,
        seed: split.seed,
    };
    let mut s = serde_json::to_string_pretty(&r).expect("splits serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// A dataset directory loaded and cross-checked.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub dataset: Dataset,
    pub split: SplitSpec,
}

pub fn load_dataset(root: &Path) -> Result<DatasetDir> {
    let graphs = load_graphs(&root.join(GRAPHS_FILE))?;
    let semantics = load_token_bank(&root.join(TOKENS_DIR).join(MANIFEST_FILE))?;
    let instances = load_instances(&root.join(INSTANCES_FILE))?;
    let dataset = Dataset::new(graphs, semantics, instances)?;
    let split = load_splits(&root.join(SPLITS_FILE))?;
    dataset.check_split(&split)?;
    Ok(DatasetDir { root: root.to_path_buf(), dataset, split })
}

/// Writes every dataset file under `root`; returns the written paths.
pub fn write_dataset(root: &Path, dataset: &Dataset, split: &SplitSpec) -> Result<Vec<PathBuf>> {
    write_file(&root.join(GRAPHS_FILE), graphs_to_string(dataset.graphs.values()).as_bytes())?;
    write_token_bank(&root.join(TOKENS_DIR), &dataset.semantics)?;
    write_file(&root.join(INSTANCES_FILE), instances_to_string(&dataset.instances).as_bytes())?;
    write_file(&root.join(SPLITS_FILE), splits_to_string(split).as_bytes())?;
    Ok(vec![root.join(GRAPHS_FILE), root.join(TOKENS_DIR), root.join(INSTANCES_FILE), root.join(SPLITS_FILE)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom_graph_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        fs::write(&p, "{\"drug_id\":\"a\",\"atom_codes\":[3],\"bonds\":[]}\n").unwrap();
        let g = load_graphs(&p).unwrap();
        assert_eq!(g["a"].num_atoms(), 1);
    }

    #[test]
    fn dangling_bond_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        fs::write(&p, "{\"drug_id\":\"a\",\"atom_codes\":[0,1,2],\"bonds\":[[0,5]]}\n").unwrap();
        let err = load_graphs(&p).unwrap_err();
        assert_eq!(err.category(), "validation");
    }

    #[test]
    fn malformed_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        fs::write(&p, "{\"drug_id\":\"a\",\"atom_codes\":[0],\"bonds\":[]}\n{oops\n").unwrap();
        match load_graphs(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let t = Tensor::zeros(3, 768);
        let mut bytes = encode_token_matrix(&t);
        bytes[4..8].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_token_matrix(Path::new("x"), &bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn token_matrix_round_trips_bitwise() {
        let vals: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect();
        let t = Tensor::matrix(3, 4, vals).unwrap();
        let back = decode_token_matrix(Path::new("x"), &encode_token_matrix(&t)).unwrap();
        assert_eq!(back, t);
    }
}
