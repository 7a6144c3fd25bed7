//! Training and evaluation runs over a loaded dataset directory.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use zeroddi_core::data::{gzsl_holdout, Dataset, DdieSemanticsRecord, Instance, SplitSpec};
use zeroddi_core::eval::{macro_accuracy, rank_table, run_protocol, ClassSplit, EvalReport, FoldSelection, Mode, ScoreRow, ScoreTable};
use zeroddi_core::model::{Conditioning, Model};
use zeroddi_core::train::{fit, EpochStats, StepLog, TrainConfig, TrainData, TrainObserver, TrainState};
use zeroddi_core::Tensor;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "ZERODDI_THREADS";
const SCORE_CHUNK: usize = 64;

/// Worker threads from `ZERODDI_THREADS`, else the available parallelism.
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Column order of score tables: DDIE ids in sorted order.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    pub ids: Vec<String>,
    pos: BTreeMap<String, usize>,
}

impl ClassIndex {
    pub fn new(dataset: &Dataset) -> Self {
        let ids: Vec<String> = dataset.semantics.keys().cloned().collect();
        let pos = ids.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { ids, pos }
    }

    pub fn get(&self, id: &str) -> Result<usize> {
        self.pos
            .get(id)
            .copied()
            .ok_or_else(|| Error::Core(zeroddi_core::Error::Validation(format!("unknown ddie {id}"))))
    }

    pub fn all(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|c| self.get(c)).collect()
    }

    pub fn split(&self, split: &SplitSpec) -> Result<ClassSplit> {
        Ok(ClassSplit {
            seen: self.all(&split.seen)?,
            unseen: self.all(&split.unseen)?,
            folds: split.folds.iter().map(|f| self.all(f)).collect::<Result<_>>()?,
        })
    }

    pub fn records<'a>(&self, dataset: &'a Dataset) -> Vec<&'a DdieSemanticsRecord> {
        self.ids.iter().map(|c| &dataset.semantics[c]).collect()
    }
}

/// Scored instances: the table plus each instance's pair representation.
#[derive(Clone, Debug)]
pub struct Scored {
    pub table: ScoreTable,
    pub h: Vec<Vec<f64>>,
}

/// Scores `instances` (id, instance) against `classes` using up to `threads`
/// workers. Each instance is scored independently and results are placed
/// by index, so the output does not depend on the thread count.
pub fn score(
    model: &Model,
    dataset: &Dataset,
    instances: &[(usize, &Instance)],
    classes: &[&DdieSemanticsRecord],
    labels: &[usize],
    conditioning: Conditioning,
    threads: usize,
) -> Result<Scored> {
    let pairs = instances
        .iter()
        .map(|(_, i)| {
            let g = |id: &String| {
                dataset
                    .graphs
                    .get(id)
                    .ok_or_else(|| Error::Core(zeroddi_core::Error::Validation(format!("unknown drug {id}"))))
            };
            Ok((g(&i.drug1)?, g(&i.drug2)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let per = pairs.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<zeroddi_core::Result<Vec<zeroddi_core::model::PairScores>>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    let mut out = Vec::with_capacity(chunk.len());
                    for c in chunk.chunks(SCORE_CHUNK) {
                        out.extend(model.score_pairs(c, classes, conditioning)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(pairs.len());
    let mut h = Vec::with_capacity(pairs.len());
    let mut k = 0;
    for part in parts {
        for ps in part? {
            rows.push(ScoreRow { instance: instances[k].0, label: labels[k], scores: ps.scores });
            h.push(ps.h.data().to_vec());
            k += 1;
        }
    }
    let table = ScoreTable { num_classes: classes.len(), rows };
    table.validate()?;
    Ok(Scored { table, h })
}

/// Seen-class training instances and the held-out seen instances used by
/// the generalized setting.
pub fn training_split(dataset: &Dataset, split: &SplitSpec) -> Result<(Vec<Instance>, Vec<Instance>)> {
    Ok(gzsl_holdout(&dataset.instances, split, split.gzsl_seen_holdout_fraction, split.seed, None)?)
}

/// Macro accuracy on fold `k`'s validation classes, ranked among themselves.
pub fn validation_score(
    model: &Model,
    dataset: &Dataset,
    split: &SplitSpec,
    k: usize,
    conditioning: Conditioning,
    threads: usize,
) -> Result<Option<f64>> {
    let fold: BTreeSet<&String> = split.folds[k].iter().collect();
    let insts: Vec<(usize, &Instance)> =
        dataset.instances.iter().enumerate().filter(|(_, i)| fold.contains(&i.ddie)).collect();
    if insts.is_empty() {
        return Ok(None);
    }
    let classes: Vec<&DdieSemanticsRecord> = split.folds[k].iter().map(|c| &dataset.semantics[c]).collect();
    let labels: Vec<usize> =
        insts.iter().map(|(_, i)| split.folds[k].iter().position(|c| *c == i.ddie).unwrap()).collect();
    let scored = score(model, dataset, &insts, &classes, &labels, conditioning, threads)?;
    let all: Vec<usize> = (0..classes.len()).collect();
    let ranked = rank_table(&scored.table, &all, &all)?;
    let rankings: Vec<_> = ranked.iter().map(|(_, _, r)| r.clone()).collect();
    let ys: Vec<usize> = ranked.iter().map(|(_, y, _)| *y).collect();
    Ok(Some(macro_accuracy(&rankings, &ys)?))
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub stats: EpochStats,
    pub wall_ms: u128,
    pub validation: Vec<Option<f64>>,
}

/// Best state per fold by validation macro accuracy (earliest epoch on ties).
#[derive(Clone, Debug)]
pub struct FoldBest {
    pub epoch: usize,
    pub acc_ave: f64,
    pub state: TrainState,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLog>,
    pub best: Vec<Option<FoldBest>>,
}

struct Recorder<'a> {
    dataset: &'a Dataset,
    split: &'a SplitSpec,
    select: bool,
    threads: usize,
    started: Instant,
    epochs: Vec<EpochRecord>,
    steps: Vec<StepLog>,
    best: Vec<Option<FoldBest>>,
}

impl TrainObserver for Recorder<'_> {
    fn on_step(&mut self, log: &StepLog) {
        self.steps.push(log.clone());
    }

    fn on_epoch(&mut self, stats: &EpochStats, state: &TrainState) -> zeroddi_core::Result<()> {
        let mut validation = Vec::new();
        if self.select {
            for k in 0..self.split.folds.len() {
                let acc = validation_score(&state.model, self.dataset, self.split, k, Conditioning::Pair, self.threads)
                    .map_err(|e| match e {
                        Error::Core(c) => c,
                        other => zeroddi_core::Error::Contract(other.to_string()),
                    })?;
                if let Some(a) = acc {
                    if self.best[k].as_ref().is_none_or(|b| a > b.acc_ave) {
                        self.best[k] = Some(FoldBest { epoch: stats.epoch, acc_ave: a, state: state.clone() });
                    }
                }
                validation.push(acc);
            }
        }
        self.epochs.push(EpochRecord { stats: stats.clone(), wall_ms: self.started.elapsed().as_millis(), validation });
        Ok(())
    }
}

/// Trains on the seen-class training instances. `resume` continues a saved
/// state; `select` tracks the best epoch per validation fold.
pub fn train(
    dataset: &Dataset,
    split: &SplitSpec,
    config: &TrainConfig,
    resume: Option<TrainState>,
    select: bool,
    threads: usize,
) -> Result<TrainOutcome> {
    let (train_set, _) = training_split(dataset, split)?;
    let data = TrainData::new(dataset, &train_set, &split.seen)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config, dataset.atom_vocab())?,
    };
    let mut rec = Recorder {
        dataset,
        split,
        select,
        threads,
        started: Instant::now(),
        epochs: Vec::new(),
        steps: Vec::new(),
        best: vec![None; split.folds.len()],
    };
    fit(&mut state, &data, config, &mut rec)?;
    Ok(TrainOutcome { state, epochs: rec.epochs, steps: rec.steps, best: rec.best })
}

/// Everything an evaluation produces.
pub struct Evaluation {
    pub report: EvalReport,
    pub classes: ClassIndex,
    pub split: ClassSplit,
    /// One per model (a single shared model or one per fold).
    pub scored: Vec<Scored>,
}

/// Instances evaluated in `mode`: every unseen-class instance, plus the
/// held-out seen instances in the generalized setting.
pub fn eval_instances<'a>(dataset: &'a Dataset, split: &SplitSpec, mode: Mode, holdout: &'a [Instance]) -> Vec<(usize, &'a Instance)> {
    let unseen: BTreeSet<&String> = split.unseen.iter().collect();
    let mut out: Vec<(usize, &Instance)> =
        dataset.instances.iter().enumerate().filter(|(_, i)| unseen.contains(&i.ddie)).collect();
    if mode == Mode::Gzsl {
        // held-out instances are identified by their position in the instances file
        let mut by_value: BTreeMap<&Instance, Vec<usize>> = BTreeMap::new();
        for (i, inst) in dataset.instances.iter().enumerate() {
            by_value.entry(inst).or_default().push(i);
        }
        let mut used: BTreeMap<&Instance, usize> = BTreeMap::new();
        for h in holdout {
            let k = used.entry(h).or_default();
            let idx = by_value[h][*k];
            *k += 1;
            out.push((idx, &dataset.instances[idx]));
        }
        out.sort_by_key(|(i, _)| *i);
    }
    out
}

pub fn evaluate(
    models: &[&Model],
    dataset: &Dataset,
    split: &SplitSpec,
    mode: Mode,
    selection: FoldSelection,
    conditioning: Conditioning,
    threads: usize,
) -> Result<Evaluation> {
    let classes = ClassIndex::new(dataset);
    let class_split = classes.split(split)?;
    let (_, holdout) = training_split(dataset, split)?;
    let insts = eval_instances(dataset, split, mode, &holdout);
    let labels = insts.iter().map(|(_, i)| classes.get(&i.ddie)).collect::<Result<Vec<_>>>()?;
    let records = classes.records(dataset);
    let scored = models
        .iter()
        .map(|m| score(m, dataset, &insts, &records, &labels, conditioning, threads))
        .collect::<Result<Vec<_>>>()?;
    let tables: Vec<&ScoreTable> = scored.iter().map(|s| &s.table).collect();
    let report = run_protocol(&tables, &class_split, mode, selection)?;
    Ok(Evaluation { report, classes, split: class_split, scored })
}

/// First two principal-component coordinates of the rows of `x`.
pub fn pca_2d(x: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if x.is_empty() {
        return Vec::new();
    }
    let (n, d) = (x.len(), x[0].len());
    let m = nalgebra::DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = m.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let comps: Vec<_> = order.iter().take(2).map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (c, v) in comps.iter().enumerate() {
                out[c] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect()
}

/// Mean coefficient of variation of centered class radii over the scored
/// pairs, from each pair's class representations.
pub fn mean_radius_cv(model: &Model, dataset: &Dataset, conditioning: Conditioning) -> Result<f64> {
    let classes = ClassIndex::new(dataset);
    let records = classes.records(dataset);
    let pairs: Vec<_> =
        dataset.instances.iter().map(|i| (&dataset.graphs[&i.drug1], &dataset.graphs[&i.drug2])).collect();
    let mut total = 0.0;
    for chunk in pairs.chunks(SCORE_CHUNK) {
        for ps in model.score_pairs(chunk, &records, conditioning)? {
            total += zeroddi_core::eval::radius_cv(&ps.z);
        }
    }
    Ok(total / pairs.len() as f64)
}

pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}
