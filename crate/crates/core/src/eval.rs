//! Zero-shot evaluation: candidate ranking, top-k and class-macro accuracy,
//! the generalized-setting binary metrics, and the per-fold protocol.
//!
//! All accuracies are percentages in `[0, 100]`. Rankings sort by descending
//! score; equal scores fall back to ascending class index so results do not
//! depend on iteration order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::data::{DdieSemanticsRecord, MolecularGraph};
use crate::error::{Error, Result};
use crate::model::{Conditioning, Model};
use crate::tensor::Tensor;

/// Candidate classes of one instance ordered best-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// `candidates[i]` has score `scores[i]`.
    pub fn new(candidates: &[usize], scores: &[f64]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Argument("ranking needs at least one candidate".into()));
        }
        if candidates.len() != scores.len() {
            return Err(Error::Argument(format!("{} candidates but {} scores", candidates.len(), scores.len())));
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
        Ok(Self {
            classes: order.iter().map(|&i| candidates[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }

    pub fn top1(&self) -> usize {
        self.classes[0]
    }

    pub fn hit(&self, label: usize, k: usize) -> bool {
        self.classes.iter().take(k).any(|&c| c == label)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    Ok(())
}

/// Share of instances whose label is among the top `k`.
pub fn topk_accuracy(rankings: &[Ranking], labels: &[usize], k: usize) -> Result<f64> {
    check_k(k)?;
    if rankings.is_empty() || rankings.len() != labels.len() {
        return Err(Error::Argument(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    let hits = rankings.iter().zip(labels).filter(|(r, &y)| r.hit(y, k)).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean over classes of the per-class top-1 accuracy.
pub fn macro_accuracy(rankings: &[Ranking], labels: &[usize]) -> Result<f64> {
    if rankings.is_empty() || rankings.len() != labels.len() {
        return Err(Error::Argument(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, &y) in rankings.iter().zip(labels) {
        let e = per.entry(y).or_default();
        e.0 += usize::from(r.top1() == y);
        e.1 += 1;
    }
    let sum: f64 = per.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(100.0 * sum / per.len() as f64)
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// How often the top-1 prediction lands on the correct side of the
/// seen/unseen divide, and accuracy conditional on that.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub acc_bi_seen: f64,
    pub acc_bi_unseen: f64,
    /// `acc@1 / acc_bi` on seen instances; `None` when `acc_bi` is 0.
    pub precision_seen: Option<f64>,
    pub precision_unseen: Option<f64>,
}

fn side_binary(rankings: &[&Ranking], labels: &[usize], on_side: impl Fn(usize) -> bool) -> Result<(f64, Option<f64>)> {
    if rankings.is_empty() {
        return Err(Error::EmptyDataset("no instances on one side of the seen/unseen split".into()));
    }
    let n = rankings.len() as f64;
    let bi = rankings.iter().filter(|r| on_side(r.top1())).count() as f64 / n;
    let acc = rankings.iter().zip(labels).filter(|(r, &y)| r.top1() == y).count() as f64 / n;
    let p = if bi == 0.0 { None } else { Some(100.0 * acc / bi) };
    Ok((100.0 * bi, p))
}

pub fn binary_metrics(rankings: &[Ranking], labels: &[usize], seen: &BTreeSet<usize>) -> Result<BinaryMetrics> {
    if rankings.len() != labels.len() {
        return Err(Error::Argument(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    let (mut rs, mut ys, mut ru, mut yu) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, &y) in rankings.iter().zip(labels) {
        if seen.contains(&y) {
            rs.push(r);
            ys.push(y);
        } else {
            ru.push(r);
            yu.push(y);
        }
    }
    let (acc_bi_seen, precision_seen) = side_binary(&rs, &ys, |c| seen.contains(&c))?;
    let (acc_bi_unseen, precision_unseen) = side_binary(&ru, &yu, |c| !seen.contains(&c))?;
    Ok(BinaryMetrics { acc_bi_seen, acc_bi_unseen, precision_seen, precision_unseen })
}

/// Coefficient of variation (std / mean) of the radii `||z_j - c||` of the
/// rows of `z` around their centroid `c`.
pub fn radius_cv(z: &Tensor) -> f64 {
    let (n, d) = (z.rows(), z.cols());
    let mut c = alloc::vec![0.0; d];
    for r in 0..n {
        for (ci, v) in c.iter_mut().zip(z.row_slice(r)) {
            *ci += v / n as f64;
        }
    }
    let radii: Vec<f64> = (0..n)
        .map(|r| libm::sqrt(z.row_slice(r).iter().zip(&c).map(|(v, ci)| (v - ci) * (v - ci)).sum()))
        .collect();
    let mean = radii.iter().sum::<f64>() / n as f64;
    let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    if mean == 0.0 {
        0.0
    } else {
        libm::sqrt(var) / mean
    }
}

/// One evaluated instance: its label and a score against every class column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub instance: usize,
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Scores of a set of instances against the class columns `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScoreTable {
    pub num_classes: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.scores.len() != self.num_classes || row.label >= self.num_classes {
                return Err(Error::Contract(format!("score row for instance {} is malformed", row.instance)));
            }
            if row.scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite("score table"));
            }
        }
        Ok(())
    }
}

/// Scores `pairs[i]` (labelled `labels[i]`) against `classes`, in chunks.
pub fn score_table(
    model: &Model,
    pairs: &[(&MolecularGraph, &MolecularGraph)],
    labels: &[usize],
    classes: &[&DdieSemanticsRecord],
    conditioning: Conditioning,
    chunk: usize,
) -> Result<ScoreTable> {
    if pairs.len() != labels.len() {
        return Err(Error::Argument(format!("{} pairs for {} labels", pairs.len(), labels.len())));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (c, part) in pairs.chunks(chunk.max(1)).enumerate() {
        let base = c * chunk.max(1);
        for (i, s) in model.score_pairs(part, classes, conditioning)?.into_iter().enumerate() {
            rows.push(ScoreRow { instance: base + i, label: labels[base + i], scores: s.scores });
        }
    }
    let table = ScoreTable { num_classes: classes.len(), rows };
    table.validate()?;
    Ok(table)
}

/// Evaluation setting.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Candidates are the test unseen classes only.
    Czsl,
    /// Candidates are all seen and unseen classes.
    Gzsl,
}

/// Which unseen classes are treated as test classes.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    /// Every fold, reported individually and averaged.
    All,
    /// A single fold: its classes validate, the other folds test.
    Fold(usize),
    /// All unseen classes tested together, with no validation fold.
    Pooled,
}

/// Class split expressed as column indices of a [`ScoreTable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl ClassSplit {
    pub fn test_classes(&self, fold: usize) -> Vec<usize> {
        let held: BTreeSet<usize> = self.folds[fold].iter().copied().collect();
        self.unseen.iter().copied().filter(|c| !held.contains(c)).collect()
    }
}

/// Per-class confusion: how often instances of `class` were predicted as each class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCounts {
    pub class: usize,
    pub total: usize,
    pub correct: usize,
    pub predicted: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideMetrics {
    pub acc_at1: f64,
    pub acc_at3: f64,
    pub acc_at5: f64,
    pub acc_ave: f64,
    pub n_instances: usize,
    pub per_class: Vec<ClassCounts>,
}

impl SideMetrics {
    pub fn compute(rankings: &[Ranking], labels: &[usize]) -> Result<Self> {
        if rankings.is_empty() {
            return Err(Error::EmptyDataset("no instances to evaluate".into()));
        }
        let mut per: BTreeMap<usize, ClassCounts> = BTreeMap::new();
        for (r, &y) in rankings.iter().zip(labels) {
            let e = per.entry(y).or_insert_with(|| ClassCounts { class: y, total: 0, correct: 0, predicted: BTreeMap::new() });
            e.total += 1;
            e.correct += usize::from(r.top1() == y);
            *e.predicted.entry(r.top1()).or_default() += 1;
        }
        Ok(Self {
            acc_at1: topk_accuracy(rankings, labels, 1)?,
            acc_at3: topk_accuracy(rankings, labels, 3)?,
            acc_at5: topk_accuracy(rankings, labels, 5)?,
            acc_ave: macro_accuracy(rankings, labels)?,
            n_instances: rankings.len(),
            per_class: per.into_values().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslMetrics {
    pub seen: SideMetrics,
    pub unseen: SideMetrics,
    pub h_at1: f64,
    pub h_ave: f64,
    pub binary: BinaryMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    /// `None` for the pooled setting.
    pub fold: Option<usize>,
    pub test_classes: Vec<usize>,
    pub candidates: Vec<usize>,
    /// Macro accuracy over the fold's validation classes (CZSL-style ranking among them).
    pub validation_acc_ave: Option<f64>,
    pub czsl: Option<SideMetrics>,
    pub gzsl: Option<GzslMetrics>,
}

/// Fold-averaged headline numbers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Summary {
    pub acc_at1: f64,
    pub acc_at3: f64,
    pub acc_at5: f64,
    pub acc_ave: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    pub folds: Vec<FoldReport>,
    /// Unseen-class metrics averaged over folds.
    pub unseen: Summary,
    /// Seen-class metrics averaged over folds (GZSL only).
    pub seen: Option<Summary>,
    /// Harmonic means of the fold-averaged seen and unseen accuracies.
    pub h_at1_of_means: Option<f64>,
    pub h_ave_of_means: Option<f64>,
    /// Fold averages of the per-fold harmonic means.
    pub mean_h_at1: Option<f64>,
    pub mean_h_ave: Option<f64>,
    pub binary: Option<BinaryMetrics>,
}

fn rank_rows(rows: &[&ScoreRow], candidates: &[usize]) -> Result<(Vec<Ranking>, Vec<usize>)> {
    let mut rankings = Vec::with_capacity(rows.len());
    for row in rows {
        let scores: Vec<f64> = candidates.iter().map(|&c| row.scores[c]).collect();
        rankings.push(Ranking::new(candidates, &scores)?);
    }
    Ok((rankings, rows.iter().map(|r| r.label).collect()))
}

fn rows_with<'a>(table: &'a ScoreTable, classes: &[usize]) -> Vec<&'a ScoreRow> {
    let set: BTreeSet<usize> = classes.iter().copied().collect();
    table.rows.iter().filter(|r| set.contains(&r.label)).collect()
}

/// Test classes and ranking candidates of one fold (`None`: pooled).
pub fn fold_classes(split: &ClassSplit, mode: Mode, fold: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let test = match fold {
        Some(k) if k >= split.folds.len() => {
            return Err(Error::Argument(format!("fold {k} out of {}", split.folds.len())));
        }
        Some(k) => split.test_classes(k),
        None => split.unseen.clone(),
    };
    let candidates = match mode {
        Mode::Czsl => test.clone(),
        Mode::Gzsl => {
            let mut all: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
            all.sort_unstable();
            all
        }
    };
    Ok((test, candidates))
}

/// Rankings over `candidates` of every table row labelled with one of `classes`.
pub fn rank_table(table: &ScoreTable, classes: &[usize], candidates: &[usize]) -> Result<Vec<(usize, usize, Ranking)>> {
    let rows = rows_with(table, classes);
    let (rankings, labels) = rank_rows(&rows, candidates)?;
    Ok(rows.iter().zip(labels).zip(rankings).map(|((r, y), rk)| (r.instance, y, rk)).collect())
}

fn side(table: &ScoreTable, classes: &[usize], candidates: &[usize]) -> Result<SideMetrics> {
    let (r, y) = rank_rows(&rows_with(table, classes), candidates)?;
    SideMetrics::compute(&r, &y)
}

/// Evaluates one fold (or the pooled setting) from a score table that
/// covers every class column.
pub fn evaluate_fold(table: &ScoreTable, split: &ClassSplit, mode: Mode, fold: Option<usize>) -> Result<FoldReport> {
    table.validate()?;
    let (test, candidates) = fold_classes(split, mode, fold)?;
    let validation_acc_ave = match fold {
        Some(k) => {
            let val_rows = rows_with(table, &split.folds[k]);
            if val_rows.is_empty() {
                None
            } else {
                let (r, y) = rank_rows(&val_rows, &split.folds[k])?;
                Some(macro_accuracy(&r, &y)?)
            }
        }
        None => None,
    };
    match mode {
        Mode::Czsl => Ok(FoldReport {
            fold,
            czsl: Some(side(table, &test, &candidates)?),
            test_classes: test,
            candidates,
            validation_acc_ave,
            gzsl: None,
        }),
        Mode::Gzsl => {
            let seen = side(table, &split.seen, &candidates)?;
            let unseen = side(table, &test, &candidates)?;
            let rows: Vec<&ScoreRow> = rows_with(table, &split.seen).into_iter().chain(rows_with(table, &test)).collect();
            let (r, y) = rank_rows(&rows, &candidates)?;
            let seen_set: BTreeSet<usize> = split.seen.iter().copied().collect();
            let binary = binary_metrics(&r, &y, &seen_set)?;
            Ok(FoldReport {
                fold,
                test_classes: test,
                candidates,
                validation_acc_ave,
                czsl: None,
                gzsl: Some(GzslMetrics {
                    h_at1: harmonic_mean(seen.acc_at1, unseen.acc_at1),
                    h_ave: harmonic_mean(seen.acc_ave, unseen.acc_ave),
                    seen,
                    unseen,
                    binary,
                }),
            })
        }
    }
}

fn summarize<'a>(sides: impl Iterator<Item = &'a SideMetrics>) -> Summary {
    let mut s = Summary::default();
    let mut n = 0.0;
    for m in sides {
        s.acc_at1 += m.acc_at1;
        s.acc_at3 += m.acc_at3;
        s.acc_at5 += m.acc_at5;
        s.acc_ave += m.acc_ave;
        n += 1.0;
    }
    Summary { acc_at1: s.acc_at1 / n, acc_at3: s.acc_at3 / n, acc_at5: s.acc_at5 / n, acc_ave: s.acc_ave / n }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0.0), |(s, n), x| (s + x, n + 1.0));
    s / n
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.map(|v| mean(v.into_iter()))
}

/// Runs the protocol. `tables` holds either one table shared by every fold
/// or one table per fold (e.g. from fold-specific checkpoints).
pub fn run_protocol(tables: &[&ScoreTable], split: &ClassSplit, mode: Mode, selection: FoldSelection) -> Result<EvalReport> {
    let folds: Vec<Option<usize>> = match selection {
        FoldSelection::All => (0..split.folds.len()).map(Some).collect(),
        FoldSelection::Fold(k) => alloc::vec![Some(k)],
        FoldSelection::Pooled => alloc::vec![None],
    };
    if tables.is_empty() || (tables.len() != 1 && tables.len() != folds.len()) {
        return Err(Error::Argument(format!("{} score tables for {} folds", tables.len(), folds.len())));
    }
    let reports = folds
        .iter()
        .enumerate()
        .map(|(i, &f)| evaluate_fold(tables[if tables.len() == 1 { 0 } else { i }], split, mode, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(match mode {
        Mode::Czsl => EvalReport {
            mode,
            unseen: summarize(reports.iter().filter_map(|r| r.czsl.as_ref())),
            folds: reports,
            seen: None,
            h_at1_of_means: None,
            h_ave_of_means: None,
            mean_h_at1: None,
            mean_h_ave: None,
            binary: None,
        },
        Mode::Gzsl => {
            let g: Vec<&GzslMetrics> = reports.iter().filter_map(|r| r.gzsl.as_ref()).collect();
            let seen = summarize(g.iter().map(|m| &m.seen));
            let unseen = summarize(g.iter().map(|m| &m.unseen));
            let binary = BinaryMetrics {
                acc_bi_seen: mean(g.iter().map(|m| m.binary.acc_bi_seen)),
                acc_bi_unseen: mean(g.iter().map(|m| m.binary.acc_bi_unseen)),
                precision_seen: mean_opt(g.iter().map(|m| m.binary.precision_seen)),
                precision_unseen: mean_opt(g.iter().map(|m| m.binary.precision_unseen)),
            };
            EvalReport {
                mode,
                h_at1_of_means: Some(harmonic_mean(seen.acc_at1, unseen.acc_at1)),
                h_ave_of_means: Some(harmonic_mean(seen.acc_ave, unseen.acc_ave)),
                mean_h_at1: Some(mean(g.iter().map(|m| m.h_at1))),
                mean_h_ave: Some(mean(g.iter().map(|m| m.h_ave))),
                binary: Some(binary),
                seen: Some(seen),
                unseen,
                folds: reports,
            }
        }
    })
}
