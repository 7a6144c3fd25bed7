//! Adam optimization over seen-class training instances.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::brl::Fusion;
use crate::data::{Dataset, DdieSemanticsRecord, Instance, MolecularGraph};
use crate::error::{Error, Result};
use crate::loss::{objective_loss, LossConfig, LossValues, Objective};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Dua,
    Ce,
    Hinge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Classes per batch (matched classes plus sampled negatives); `None` uses every seen class.
    pub class_subsample: Option<usize>,
    pub gin_layers: usize,
    pub d_v: usize,
    pub d_n: usize,
    pub d_r: usize,
    /// Pair substructure count `N`.
    pub n_substructures: usize,
    pub d_t: usize,
    pub loss: LossKind,
    pub ce_scale: f64,
    pub hinge_margin: f64,
    pub fusion: Fusion,
    pub use_attributes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 128,
            tau: crate::loss::DEFAULT_TAU,
            lambda: crate::loss::DEFAULT_LAMBDA,
            seed: 0,
            class_subsample: None,
            gin_layers: 2,
            d_v: 300,
            d_n: 300,
            d_r: 256,
            n_substructures: 30,
            d_t: 768,
            loss: LossKind::Dua,
            ce_scale: 1.0,
            hinge_margin: 0.1,
            fusion: Fusion::Ssf,
            use_attributes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Argument("learning rate and batch size must be positive".into()));
        }
        if let Some(k) = self.class_subsample {
            if k < 2 {
                return Err(Error::Argument(format!("class_subsample must be >= 2, got {k}")));
            }
        }
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau: self.tau, lambda: self.lambda }
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Dua => Objective::Dua(self.loss_config()),
            LossKind::Ce => Objective::Ce { scale: self.ce_scale },
            LossKind::Hinge => Objective::Hinge { margin: self.hinge_margin },
        }
    }

    pub fn model_config(&self, atom_vocab: usize) -> ModelConfig {
        ModelConfig {
            atom_vocab,
            d_v: self.d_v,
            d_n: self.d_n,
            d_r: self.d_r,
            n_substructures: self.n_substructures,
            d_t: self.d_t,
            gin_layers: self.gin_layers,
            fusion: self.fusion,
            use_attributes: self.use_attributes,
        }
    }
}

/// Adam with bias correction; `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8` by default.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (i, param) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mut sq = 0.0;
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let delta = self.learning_rate * (m[k] / bc1) / (libm::sqrt(v[k] / bc2) + self.eps);
                param.data_mut()[k] -= delta;
                sq += delta * delta;
            }
            if !sq.is_finite() {
                return Err(Error::Diverged(format!("non-finite update for parameter {i} at step {}", self.step)));
            }
        }
        Ok(())
    }
}

/// Resolved training examples: pairs and their label index into `classes`.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub classes: Vec<&'a DdieSemanticsRecord>,
    pub examples: Vec<(&'a MolecularGraph, &'a MolecularGraph, usize)>,
}

impl<'a> TrainData<'a> {
    /// Every instance label must be one of `class_ids` (the seen classes).
    pub fn new(dataset: &'a Dataset, instances: &[Instance], class_ids: &[String]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = class_ids.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let classes = class_ids
            .iter()
            .map(|c| dataset.semantics.get(c).ok_or_else(|| Error::Validation(format!("unknown class {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut examples = Vec::with_capacity(instances.len());
        for inst in instances {
            let label = *index.get(inst.ddie.as_str()).ok_or_else(|| {
                Error::Validation(format!("training instance labelled {} is not a seen class", inst.ddie))
            })?;
            let g1 = dataset.graphs.get(&inst.drug1).ok_or_else(|| Error::Validation(format!("unknown drug {}", inst.drug1)))?;
            let g2 = dataset.graphs.get(&inst.drug2).ok_or_else(|| Error::Validation(format!("unknown drug {}", inst.drug2)))?;
            examples.push((g1, g2, label));
        }
        Ok(Self { classes, examples })
    }
}

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig, atom_vocab: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model_config(atom_vocab), config.seed)?;
        let optimizer = Adam::new(config.learning_rate, &model.params);
        // Shuffling stream is independent of the initialization stream.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { model, optimizer, epoch: 0, rng })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    /// Alignment as a per-instance mean.
    pub align: f64,
    pub cla: f64,
    pub ins: f64,
    /// `total` with the alignment term reported as a per-instance mean.
    pub total: f64,
    /// The optimized objective value (alignment summed over the batch).
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub align: f64,
    pub cla: f64,
    pub ins: f64,
    pub total: f64,
}

pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) {}

    fn on_epoch(&mut self, _stats: &EpochStats, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl<F: FnMut(&StepLog)> TrainObserver for F {
    fn on_step(&mut self, log: &StepLog) {
        self(log)
    }
}

fn logged(values: LossValues, objective: Objective, batch: usize) -> (f64, f64) {
    let align_mean = match objective {
        Objective::Hinge { .. } => values.align,
        _ => values.align / batch as f64,
    };
    (align_mean, values.total - values.align + align_mean)
}

/// One optimizer step on the examples at `idx`. Returns the loss values.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainData<'_>,
    idx: &[usize],
    config: &TrainConfig,
) -> Result<LossValues> {
    // class subset: matched classes plus sampled negatives, in class order
    let (classes, labels): (Vec<&DdieSemanticsRecord>, Vec<usize>) = match config.class_subsample {
        Some(k) if k < data.classes.len() => {
            let matched: BTreeSet<usize> = idx.iter().map(|&i| data.examples[i].2).collect();
            let mut chosen = matched.clone();
            let others: Vec<usize> = (0..data.classes.len()).filter(|c| !matched.contains(c)).collect();
            let extra = k.saturating_sub(matched.len()).min(others.len());
            for j in sample(&mut state.rng, others.len(), extra) {
                chosen.insert(others[j]);
            }
            let pos: BTreeMap<usize, usize> = chosen.iter().enumerate().map(|(p, &c)| (c, p)).collect();
            (
                chosen.iter().map(|&c| data.classes[c]).collect(),
                idx.iter().map(|&i| pos[&data.examples[i].2]).collect(),
            )
        }
        _ => (data.classes.clone(), idx.iter().map(|&i| data.examples[i].2).collect()),
    };
    let pairs: Vec<_> = idx.iter().map(|&i| (data.examples[i].0, data.examples[i].1)).collect();

    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, true);
    let diagnose = |e: Error| match e {
        Error::NonFinite(op) => Error::Diverged(format!("{op} produced a non-finite value on batch {idx:?}")),
        other => other,
    };
    let batch = state.model.forward_batch(&mut tape, &bound, &pairs, &classes, &labels).map_err(diagnose)?;
    let terms = objective_loss(&mut tape, &batch, config.objective()).map_err(diagnose)?;
    let values = terms.values(&tape);
    let grads = tape.backward(terms.total)?;
    let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v)).collect();
    state.optimizer.update(&mut state.model.params, &grads)?;
    Ok(values)
}

/// Runs the remaining epochs of `config.epochs`, reshuffling each epoch with
/// the state's RNG. Returns per-epoch mean loss components.
pub fn fit(
    state: &mut TrainState,
    data: &TrainData<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if data.examples.is_empty() {
        return Err(Error::EmptyDataset("no training instances".into()));
    }
    let objective = config.objective();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    while state.epoch < config.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut sums = EpochStats { epoch: state.epoch + 1, ..EpochStats::default() };
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let values = train_step(state, data, chunk, config)?;
            let (align, total) = logged(values, objective, chunk.len());
            let log = StepLog {
                step: state.optimizer.step,
                epoch: state.epoch + 1,
                batch_size: chunk.len(),
                align,
                cla: values.cla,
                ins: values.ins,
                total,
                objective: values.total,
            };
            observer.on_step(&log);
            sums.align += align;
            sums.cla += values.cla;
            sums.ins += values.ins;
            sums.total += total;
            n_batches += 1;
        }
        let n = n_batches as f64;
        let stats = EpochStats {
            epoch: sums.epoch,
            align: sums.align / n,
            cla: sums.cla / n,
            ins: sums.ins / n,
            total: sums.total / n,
        };
        state.epoch += 1;
        observer.on_epoch(&stats, state)?;
        history.push(stats);
    }
    Ok(history)
}
