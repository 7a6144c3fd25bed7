//! Dataset records, validation, and the seeded dataset transformations
//! (imbalance resampling, seen/unseen splits, GZSL seen-instance holdout).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const DEFAULT_GZSL_HOLDOUT: f64 = 0.1;
pub const N_FOLDS: usize = 3;

/// One drug as an undirected molecular graph over categorical atom codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MolecularGraph {
    pub drug_id: String,
    pub atom_codes: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
}

impl MolecularGraph {
    pub fn new(drug_id: impl Into<String>, atom_codes: Vec<usize>, bonds: Vec<(usize, usize)>) -> Result<Self> {
        let g = Self { drug_id: drug_id.into(), atom_codes, bonds };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atom_codes.len();
        if n == 0 {
            return Err(Error::Validation(format!("drug {}: graph has no atoms", self.drug_id)));
        }
        let mut seen = BTreeSet::new();
        for &(u, v) in &self.bonds {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "drug {}: bond ({u}, {v}) references an atom outside 0..{n}",
                    self.drug_id
                )));
            }
            if u == v {
                return Err(Error::Validation(format!("drug {}: self-loop on atom {u}", self.drug_id)));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Validation(format!("drug {}: duplicate bond ({u}, {v})", self.drug_id)));
            }
        }
        Ok(())
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_codes.len()
    }

    /// Symmetric adjacency lists, neighbours in bond order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atom_codes.len()];
        for &(u, v) in &self.bonds {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Relabels atoms so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Self {
            drug_id: self.drug_id.clone(),
            atom_codes: perm.iter().map(|&old| self.atom_codes[old]).collect(),
            bonds: self.bonds.iter().map(|&(u, v)| (inverse[u], inverse[v])).collect(),
        }
    }
}

/// Precomputed token features for one DDIE: class-level description tokens
/// (`M x d_t`) and the row-wise concatenation of all attribute-level (Effect)
/// description tokens (`L x d_t`).
#[derive(Clone, Debug, PartialEq)]
pub struct DdieSemanticsRecord {
    pub ddie_id: String,
    pub class_tokens: Tensor,
    pub attr_tokens: Tensor,
}

impl DdieSemanticsRecord {
    pub fn new(ddie_id: impl Into<String>, class_tokens: Tensor, attr_tokens: Tensor) -> Result<Self> {
        let r = Self { ddie_id: ddie_id.into(), class_tokens, attr_tokens };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_tokens.shape().len() != 2 || self.attr_tokens.shape().len() != 2 {
            return Err(Error::Validation(format!("ddie {}: token banks must be matrices", self.ddie_id)));
        }
        if self.class_tokens.cols() != self.attr_tokens.cols() {
            return Err(Error::Validation(format!(
                "ddie {}: class tokens have d_t={} but attribute tokens have d_t={}",
                self.ddie_id,
                self.class_tokens.cols(),
                self.attr_tokens.cols()
            )));
        }
        if !self.class_tokens.is_finite() || !self.attr_tokens.is_finite() {
            return Err(Error::Validation(format!("ddie {}: non-finite token feature", self.ddie_id)));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.class_tokens.cols()
    }
}

/// An ordered drug pair with its DDIE label. Order is significant.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Instance {
    pub drug1: String,
    pub drug2: String,
    pub ddie: String,
}

impl Instance {
    pub fn new(drug1: impl Into<String>, drug2: impl Into<String>, ddie: impl Into<String>) -> Self {
        Self { drug1: drug1.into(), drug2: drug2.into(), ddie: ddie.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub folds: Vec<Vec<String>>,
    pub gzsl_seen_holdout_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let seen: BTreeSet<&String> = self.seen.iter().collect();
        let unseen: BTreeSet<&String> = self.unseen.iter().collect();
        if seen.len() != self.seen.len() || unseen.len() != self.unseen.len() {
            return Err(Error::Validation("split lists a class twice".into()));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Validation(format!("class {c} is both seen and unseen")));
        }
        if self.folds.len() != N_FOLDS {
            return Err(Error::Validation(format!("split has {} folds, expected {N_FOLDS}", self.folds.len())));
        }
        let mut covered = BTreeSet::new();
        for fold in &self.folds {
            for c in fold {
                if !unseen.contains(c) {
                    return Err(Error::Validation(format!("fold class {c} is not an unseen class")));
                }
                if !covered.insert(c) {
                    return Err(Error::Validation(format!("class {c} appears in two folds")));
                }
            }
        }
        if covered.len() != unseen.len() {
            return Err(Error::Validation("folds do not cover every unseen class".into()));
        }
        if !(self.gzsl_seen_holdout_fraction > 0.0 && self.gzsl_seen_holdout_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "gzsl holdout fraction {} outside (0, 1)",
                self.gzsl_seen_holdout_fraction
            )));
        }
        Ok(())
    }

    /// Unseen classes outside fold `k`; the CZSL test candidates of that fold.
    pub fn fold_test_classes(&self, k: usize) -> Vec<String> {
        let val: BTreeSet<&String> = self.folds[k].iter().collect();
        self.unseen.iter().filter(|c| !val.contains(c)).cloned().collect()
    }
}

/// Graphs, token banks and labelled instances, with cross-references checked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub graphs: BTreeMap<String, MolecularGraph>,
    pub semantics: BTreeMap<String, DdieSemanticsRecord>,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(
        graphs: BTreeMap<String, MolecularGraph>,
        semantics: BTreeMap<String, DdieSemanticsRecord>,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let ds = Self { graphs, semantics, instances };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, g) in &self.graphs {
            if id != &g.drug_id {
                return Err(Error::Validation(format!("graph keyed {id} has drug_id {}", g.drug_id)));
            }
            g.validate()?;
        }
        let mut d_t = None;
        for (id, rec) in &self.semantics {
            if id != &rec.ddie_id {
                return Err(Error::Validation(format!("token bank keyed {id} has ddie_id {}", rec.ddie_id)));
            }
            rec.validate()?;
            match d_t {
                None => d_t = Some(rec.token_dim()),
                Some(d) if d != rec.token_dim() => {
                    return Err(Error::Validation(format!(
                        "ddie {id}: token dimension {} differs from {d}",
                        rec.token_dim()
                    )))
                }
                _ => {}
            }
        }
        for (line, inst) in self.instances.iter().enumerate() {
            for drug in [&inst.drug1, &inst.drug2] {
                if !self.graphs.contains_key(drug) {
                    return Err(Error::Validation(format!("instance {line}: unknown drug {drug}")));
                }
            }
            if !self.semantics.contains_key(&inst.ddie) {
                return Err(Error::Validation(format!("instance {line}: unknown ddie {}", inst.ddie)));
            }
        }
        Ok(())
    }

    pub fn token_dim(&self) -> Option<usize> {
        self.semantics.values().next().map(DdieSemanticsRecord::token_dim)
    }

    /// One past the largest atom code in any graph.
    pub fn atom_vocab(&self) -> usize {
        self.graphs.values().flat_map(|g| g.atom_codes.iter().copied()).max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        class_counts(&self.instances)
    }

    pub fn check_split(&self, split: &SplitSpec) -> Result<()> {
        split.validate()?;
        for c in split.seen.iter().chain(&split.unseen) {
            if !self.semantics.contains_key(c) {
                return Err(Error::Validation(format!("split references unknown class {c}")));
            }
        }
        Ok(())
    }
}

pub fn class_counts(instances: &[Instance]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for inst in instances {
        *counts.entry(inst.ddie.clone()).or_insert(0) += 1;
    }
    counts
}

/// Drops classes with fewer than `min_count` instances, then uniformly
/// downsamples every class above `floor(rho_target · min_surviving_count)`.
/// Surviving instances keep their input order.
pub fn resample_imbalance(instances: &[Instance], rho_target: f64, min_count: usize, seed: u64) -> Result<Vec<Instance>> {
    if !(rho_target >= 1.0) || !rho_target.is_finite() {
        return Err(Error::Argument(format!("imbalance ratio must be >= 1, got {rho_target}")));
    }
    if min_count == 0 {
        return Err(Error::Argument("min_count must be >= 1".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_class.entry(inst.ddie.as_str()).or_default().push(i);
    }
    by_class.retain(|_, idx| idx.len() >= min_count);
    let Some(min_obs) = by_class.values().map(Vec::len).min() else {
        return Err(Error::EmptyDataset(format!("no class has at least {min_count} instances")));
    };
    let cap = libm::floor(rho_target * min_obs as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; instances.len()];
    for idx in by_class.values() {
        if idx.len() > cap {
            for k in sample(&mut rng, idx.len(), cap) {
                keep[idx[k]] = true;
            }
        } else {
            for &i in idx {
                keep[i] = true;
            }
        }
    }
    Ok(instances.iter().zip(keep).filter(|(_, k)| *k).map(|(inst, _)| inst.clone()).collect())
}

/// Ranks classes by descending instance count (ties: smaller id first), takes
/// the bottom `n_unseen` as unseen, and deals them into three seeded folds whose
/// sizes differ by at most one.
pub fn make_splits(
    class_counts: &BTreeMap<String, usize>,
    n_unseen: usize,
    seed: u64,
    gzsl_fraction: f64,
) -> Result<SplitSpec> {
    if n_unseen == 0 {
        return Err(Error::Argument("n_unseen must be positive".into()));
    }
    if n_unseen >= class_counts.len() {
        return Err(Error::Argument(format!(
            "n_unseen {n_unseen} leaves no seen class out of {}",
            class_counts.len()
        )));
    }
    let mut ranked: Vec<(&String, usize)> = class_counts.iter().map(|(c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let n_seen = ranked.len() - n_unseen;
    let seen: Vec<String> = ranked[..n_seen].iter().map(|(c, _)| (*c).clone()).collect();
    let unseen: Vec<String> = ranked[n_seen..].iter().map(|(c, _)| (*c).clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, unseen.len(), unseen.len()).into_vec();
    let mut folds = vec![Vec::new(); N_FOLDS];
    let base = unseen.len() / N_FOLDS;
    let extra = unseen.len() % N_FOLDS;
    let mut it = order.into_iter();
    for (k, fold) in folds.iter_mut().enumerate() {
        let size = base + usize::from(k < extra);
        let mut members: Vec<String> = it.by_ref().take(size).map(|i| unseen[i].clone()).collect();
        members.sort();
        *fold = members;
    }
    let split = SplitSpec { seen, unseen, folds, gzsl_seen_holdout_fraction: gzsl_fraction, seed };
    split.validate()?;
    Ok(split)
}

/// Number of instances held out of a class of size `n`: `⌈fraction · n⌉`,
/// with a 1e-9 allowance for decimal fractions that are not exact in binary.
pub fn holdout_count(fraction: f64, n: usize) -> usize {
    (libm::ceil(fraction * n as f64 - 1e-9) as usize).min(n)
}

/// Splits seen-class instances into a training set and a GZSL seen-class
/// evaluation set. Unseen-class instances go to neither side. `classes`
/// restricts the holdout to a subset of seen classes (default: all).
pub fn gzsl_holdout(
    instances: &[Instance],
    split: &SplitSpec,
    fraction: f64,
    seed: u64,
    classes: Option<&[String]>,
) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let seen: BTreeSet<&str> = split.seen.iter().map(String::as_str).collect();
    let eligible: BTreeSet<&str> = match classes {
        Some(cs) => cs.iter().map(String::as_str).filter(|c| seen.contains(c)).collect(),
        None => seen.clone(),
    };
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if eligible.contains(inst.ddie.as_str()) {
            by_class.entry(inst.ddie.as_str()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; instances.len()];
    for idx in by_class.values() {
        let k = holdout_count(fraction, idx.len());
        for j in sample(&mut rng, idx.len(), k) {
            held[idx[j]] = true;
        }
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (inst, h) in instances.iter().zip(held) {
        if h {
            eval.push(inst.clone());
        } else if seen.contains(inst.ddie.as_str()) {
            train.push(inst.clone());
        }
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn insts(counts: &[(&str, usize)]) -> Vec<Instance> {
        let mut out = Vec::new();
        for (c, n) in counts {
            for i in 0..*n {
                out.push(Instance::new(format!("d{i}"), format!("e{i}"), *c));
            }
        }
        out
    }

    #[test]
    fn graph_validation() {
        assert_eq!(MolecularGraph::new("a", vec![3], vec![]).unwrap().num_atoms(), 1);
        assert!(MolecularGraph::new("a", vec![0, 1, 2], vec![(0, 5)]).is_err());
        assert!(MolecularGraph::new("a", vec![0, 1], vec![(1, 1)]).is_err());
        assert!(MolecularGraph::new("a", vec![0, 1], vec![(0, 1), (1, 0)]).is_err());
        assert!(MolecularGraph::new("a", vec![], vec![]).is_err());
    }

    #[test]
    fn resample_already_at_ratio_is_unchanged() {
        let data = insts(&[("A", 1000), ("B", 10)]);
        assert_eq!(resample_imbalance(&data, 100.0, 10, 1).unwrap(), data);
    }

    #[test]
    fn resample_caps_majority() {
        let data = insts(&[("A", 100_000), ("B", 10)]);
        let out = resample_imbalance(&data, 100.0, 10, 1).unwrap();
        let counts = class_counts(&out);
        assert_eq!(counts["A"], 1000);
        assert_eq!(counts["B"], 10);
    }

    #[test]
    fn resample_drops_rare_classes() {
        let out = resample_imbalance(&insts(&[("A", 50), ("B", 3)]), 100.0, DEFAULT_MIN_COUNT, 1).unwrap();
        let counts = class_counts(&out);
        assert_eq!(counts.len(), 1);
        assert_eq!(counts["A"], 50);
        assert!(matches!(
            resample_imbalance(&insts(&[("B", 3)]), 100.0, 10, 1),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn splits_match_reported_sizes() {
        let counts: BTreeMap<String, usize> = (0..175).map(|i| (format!("ddie{i:03}"), 1000 - i)).collect();
        let split = make_splits(&counts, 68, 3, DEFAULT_GZSL_HOLDOUT).unwrap();
        assert_eq!(split.seen.len(), 107);
        assert_eq!(split.unseen.len(), 68);
        let mut sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![22, 23, 23]);
        let mut test_sizes: Vec<usize> = (0..3).map(|k| split.fold_test_classes(k).len()).collect();
        test_sizes.sort();
        assert_eq!(test_sizes, vec![45, 45, 46]);
        // the least frequent classes are unseen
        assert!(split.unseen.contains(&"ddie174".into()));
        assert!(split.seen.contains(&"ddie000".into()));
    }

    #[test]
    fn split_tie_break_prefers_smaller_id_as_seen() {
        let counts: BTreeMap<String, usize> =
            [("a", 50), ("b", 20), ("c", 20), ("d", 5)].iter().map(|(c, n)| (String::from(*c), *n)).collect();
        let split = make_splits(&counts, 2, 0, 0.1).unwrap();
        assert_eq!(split.seen, vec![String::from("a"), String::from("b")]);
        assert!(make_splits(&counts, 0, 0, 0.1).is_err());
        assert!(make_splits(&counts, 4, 0, 0.1).is_err());
    }

    #[test]
    fn holdout_takes_ceil_fraction() {
        let data = insts(&[("A", 10), ("B", 31), ("U", 7)]);
        let split = SplitSpec {
            seen: vec!["A".into(), "B".into()],
            unseen: vec!["U".into()],
            folds: vec![vec!["U".into()], vec![], vec![]],
            gzsl_seen_holdout_fraction: 0.1,
            seed: 0,
        };
        let (train, eval) = gzsl_holdout(&data, &split, 0.1, 9, None).unwrap();
        let tc = class_counts(&train);
        let ec = class_counts(&eval);
        assert_eq!((tc["A"], ec["A"]), (9, 1));
        assert_eq!((tc["B"], ec["B"]), (27, 4));
        assert!(!tc.contains_key("U") && !ec.contains_key("U"));
        assert_eq!(holdout_count(0.1, 30), 3);
    }
}
