//! Seeded gradient-check suites over every differentiable component, at
//! small dimensions so a full sweep takes seconds.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brl::Fusion;
use crate::data::{DdieSemanticsRecord, MolecularGraph};
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::loss::{
    align_loss, baseline_ce_loss, baseline_hinge_loss, class_uniformity_loss, instance_uniformity_loss, leaf_batch,
    similarity_logits, total_loss, LossConfig,
};
use crate::model::{Model, ModelConfig};
use crate::nn::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Losses,
    Encoder,
    Brl,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: String,
    pub report: GradCheckReport,
}

const B: usize = 4;
const C: usize = 5;
const D: usize = 6;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar
/// whose gradient exercises every entry.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    tape.sum(prod)
}

fn tiny_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        atom_vocab: 5,
        d_v: 6,
        d_n: 6,
        d_r: 5,
        n_substructures: 4,
        d_t: 7,
        gin_layers: 2,
        fusion,
        use_attributes: true,
    }
}

fn tiny_graphs() -> Vec<MolecularGraph> {
    vec![
        MolecularGraph::new("g0", vec![0, 1, 2, 1], vec![(0, 1), (1, 2), (2, 3)]).unwrap(),
        MolecularGraph::new("g1", vec![3, 4, 0], vec![(0, 1), (0, 2)]).unwrap(),
        MolecularGraph::new("g2", vec![2, 2, 4, 1, 0], vec![(0, 1), (1, 2), (1, 3), (3, 4)]).unwrap(),
    ]
}

fn tiny_records(rng: &mut ChaCha8Rng, n: usize, d_t: usize) -> Vec<DdieSemanticsRecord> {
    (0..n)
        .map(|j| {
            DdieSemanticsRecord::new(alloc::format!("c{j}"), random(rng, 3, d_t), random(rng, 2, d_t)).unwrap()
        })
        .collect()
}

fn model_params(model: &Model) -> Vec<(String, Tensor)> {
    model.params.iter().map(|(n, t)| (String::from(n), t.clone())).collect()
}

fn check<F>(gc: &GradCheck, out: &mut Vec<ComponentCheck>, name: &str, params: &[(String, Tensor)], f: F) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let named: Vec<(&str, Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let report = gc.run(f, &named)?;
    out.push(ComponentCheck { component: String::from(name), report });
    Ok(())
}

fn loss_checks(gc: &GradCheck, rng: &mut ChaCha8Rng, out: &mut Vec<ComponentCheck>) -> Result<()> {
    let labels: Vec<usize> = (0..B).map(|i| i % C).collect();
    let mut params = vec![(String::from("h"), random(rng, B, D))];
    for i in 0..B {
        params.push((alloc::format!("z{i}"), random(rng, C, D)));
    }
    let with_batch = |f: fn(&mut Tape, &crate::model::BatchForward) -> Result<Var>| {
        let labels = labels.clone();
        move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let batch = leaf_batch(tape, v[0], &v[1..], &labels)?;
            f(tape, &batch)
        }
    };
    check(gc, out, "loss.align", &params, with_batch(|t, b| {
        let logits = similarity_logits(t, b)?;
        align_loss(t, logits, &b.labels, 0.9)
    }))?;
    check(gc, out, "loss.class_uniformity", &params, with_batch(|t, b| Ok(class_uniformity_loss(t, &b.z)?.0)))?;
    check(gc, out, "loss.instance_uniformity", &params, with_batch(|t, b| {
        let (_, centers) = class_uniformity_loss(t, &b.z)?;
        instance_uniformity_loss(t, b.h, &centers)
    }))?;
    check(gc, out, "loss.total", &params, with_batch(|t, b| Ok(total_loss(t, b, LossConfig::default())?.total)))?;
    check(gc, out, "loss.ce", &params, with_batch(|t, b| {
        let logits = similarity_logits(t, b)?;
        baseline_ce_loss(t, logits, &b.labels, 1.5)
    }))?;
    check(gc, out, "loss.hinge", &params, with_batch(|t, b| {
        let logits = similarity_logits(t, b)?;
        baseline_hinge_loss(t, logits, &b.labels, 0.3)
    }))?;
    Ok(())
}

fn encoder_checks(gc: &GradCheck, rng: &mut ChaCha8Rng, out: &mut Vec<ComponentCheck>) -> Result<()> {
    let model = Model::init(tiny_config(Fusion::Ssf), rng.random())?;
    let params = model_params(&model);
    let graphs = tiny_graphs();
    let enc = &model.encoder;
    let d = &enc.dims;
    let r_x = random(rng, graphs[0].num_atoms(), d.d_v);
    check(gc, out, "encoder.gin", &params, |t, v| {
        let p = Bound::from(v.to_vec());
        let x = enc.gin_forward(t, &p, &graphs[0])?;
        project(t, x, &r_x)
    })?;
    let r_p = random(rng, d.per_drug, d.d_n);
    let x0 = random(rng, 5, d.d_v);
    let mut sub_params = params.clone();
    sub_params.push((String::from("x"), x0));
    let n = params.len();
    check(gc, out, "encoder.substructure", &sub_params, |t, v| {
        let p = Bound::from(v[..n].to_vec());
        let q = enc.prototype_queries(t, &p)?;
        let (pg, _) = enc.substructure_learner(t, &p, v[n], q)?;
        project(t, pg, &r_p)
    })?;
    let r_h = random(rng, 1, d.d_r);
    let r_pp = random(rng, 2 * d.per_drug, d.d_n);
    check(gc, out, "encoder.pair", &params, |t, v| {
        let p = Bound::from(v.to_vec());
        let e = enc.encode_pair(t, &p, &graphs[1], &graphs[2])?;
        let a = project(t, e.h, &r_h)?;
        let b = project(t, e.p, &r_pp)?;
        t.add(a, b)
    })?;
    Ok(())
}

fn brl_checks(gc: &GradCheck, rng: &mut ChaCha8Rng, out: &mut Vec<ComponentCheck>) -> Result<()> {
    let config = tiny_config(Fusion::Ssf);
    let model = Model::init(config.clone(), rng.random())?;
    let params = model_params(&model);
    let records = tiny_records(rng, 3, config.d_t);
    let brl = &model.brl;
    let r_t = random(rng, 4, config.d_r);
    check(gc, out, "brl.tokens", &params, |t, v| {
        let p = Bound::from(v.to_vec());
        let tokens = brl.bilevel_tokens(t, &p, &records[0])?;
        project(t, tokens, &r_t)
    })?;
    let mut ssf_params = params.clone();
    ssf_params.push((String::from("pair_substructures"), random(rng, config.n_substructures, config.d_n)));
    let n = params.len();
    let r_z = random(rng, records.len(), config.d_r);
    check(gc, out, "brl.ssf", &ssf_params, |t, v| {
        let p = Bound::from(v[..n].to_vec());
        let refs: Vec<&DdieSemanticsRecord> = records.iter().collect();
        let bank = brl.class_bank(t, &p, &refs)?;
        let z = brl.encode_class_set(t, &p, v[n], &bank)?;
        project(t, z, &r_z)
    })?;
    Ok(())
}

fn model_check(gc: &GradCheck, rng: &mut ChaCha8Rng, out: &mut Vec<ComponentCheck>) -> Result<()> {
    let config = tiny_config(Fusion::Ssf);
    let model = Model::init(config.clone(), rng.random())?;
    let params = model_params(&model);
    let graphs = tiny_graphs();
    let records = tiny_records(rng, 3, config.d_t);
    let refs: Vec<&DdieSemanticsRecord> = records.iter().collect();
    let pairs = [(&graphs[0], &graphs[1]), (&graphs[1], &graphs[2]), (&graphs[2], &graphs[0])];
    let labels = [0, 2, 1];
    check(gc, out, "model.total", &params, |t, v| {
        let p = Bound::from(v.to_vec());
        let batch = model.forward_batch(t, &p, &pairs, &refs, &labels)?;
        Ok(total_loss(t, &batch, LossConfig::default())?.total)
    })
}

/// Runs the suites selected by `scope` with seeded random inputs.
pub fn run_suites(scope: Scope, gc: &GradCheck, seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if scope.includes(Scope::Losses) {
        loss_checks(gc, &mut rng, &mut out)?;
    }
    if scope.includes(Scope::Encoder) {
        encoder_checks(gc, &mut rng, &mut out)?;
    }
    if scope.includes(Scope::Brl) {
        brl_checks(gc, &mut rng, &mut out)?;
    }
    if scope == Scope::All {
        model_check(gc, &mut rng, &mut out)?;
    }
    Ok(out)
}
