use zeroddi_core::data::gzsl_holdout;
use zeroddi_core::synth::{synth_generate, SynthConfig, SynthDataset};
use zeroddi_core::train::{fit, train_step, LossKind, TrainConfig, TrainData, TrainState};

fn synth() -> SynthDataset {
    synth_generate(&SynthConfig { instances_per_class: 20, d_t: 12, ..SynthConfig::default() }).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d_v: 16,
        d_n: 16,
        d_r: 12,
        n_substructures: 6,
        d_t: 12,
        batch_size: 32,
        epochs: 2,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn train_set(s: &SynthDataset) -> Vec<zeroddi_core::data::Instance> {
    gzsl_holdout(&s.dataset.instances, &s.split, 0.1, 0, None).unwrap().0
}

#[test]
fn overfits_a_single_batch() {
    let s = synth();
    let insts = train_set(&s);
    let data = TrainData::new(&s.dataset, &insts, &s.split.seen).unwrap();
    let config = TrainConfig { learning_rate: 1e-3, batch_size: 8, ..small_config() };
    let mut state = TrainState::new(&config, s.dataset.atom_vocab()).unwrap();
    // one instance from each of 8 classes, so alignment does not pull batch members together
    let mut idx = Vec::new();
    for (i, ex) in data.examples.iter().enumerate() {
        if idx.len() < 8 && idx.iter().all(|&j: &usize| data.examples[j].2 != ex.2) {
            idx.push(i);
        }
    }
    let losses: Vec<f64> = (0..200).map(|_| train_step(&mut state, &data, &idx, &config).unwrap().total).collect();
    for w in losses[..10].windows(2) {
        assert!(w[1] < w[0], "not strictly decreasing: {:?}", &losses[..10]);
    }
    assert!(losses[199] < 0.1 * losses[0], "start {} end {}", losses[0], losses[199]);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let s = synth();
    let insts = train_set(&s);
    let data = TrainData::new(&s.dataset, &insts, &s.split.seen).unwrap();
    let config = small_config();
    let run = || {
        let mut state = TrainState::new(&config, s.dataset.atom_vocab()).unwrap();
        let mut steps = Vec::new();
        let hist = fit(&mut state, &data, &config, &mut |l: &_| steps.push(Clone::clone(l))).unwrap();
        (state.model.params, hist, steps)
    };
    let (p1, h1, s1) = run();
    let (p2, h2, s2) = run();
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
    assert_eq!(p1, p2);
}

#[test]
fn zero_lambda_matches_plain_cross_entropy() {
    let s = synth();
    let insts = train_set(&s);
    let data = TrainData::new(&s.dataset, &insts, &s.split.seen).unwrap();
    let dua = TrainConfig { lambda: 0.0, ..small_config() };
    let ce = TrainConfig { loss: LossKind::Ce, ce_scale: 1.0 / dua.tau, ..dua.clone() };
    let run = |config: &TrainConfig| {
        let mut state = TrainState::new(config, s.dataset.atom_vocab()).unwrap();
        fit(&mut state, &data, config, &mut ()).unwrap();
        state.model.params
    };
    let (a, b) = (run(&dua), run(&ce));
    for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = synth();
    let insts = train_set(&s);
    let data = TrainData::new(&s.dataset, &insts, &s.split.seen).unwrap();
    let config = TrainConfig { epochs: 3, ..small_config() };
    let mut full = TrainState::new(&config, s.dataset.atom_vocab()).unwrap();
    let mut full_steps = Vec::new();
    fit(&mut full, &data, &config, &mut |l: &_| full_steps.push(Clone::clone(l))).unwrap();

    let first = TrainConfig { epochs: 1, ..config.clone() };
    let mut part = TrainState::new(&config, s.dataset.atom_vocab()).unwrap();
    let mut steps = Vec::new();
    fit(&mut part, &data, &first, &mut |l: &_| steps.push(Clone::clone(l))).unwrap();
    let mut resumed = part.clone();
    fit(&mut resumed, &data, &config, &mut |l: &_| steps.push(Clone::clone(l))).unwrap();
    assert_eq!(steps, full_steps);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.epoch, 3);
}

#[test]
fn empty_training_set_is_rejected() {
    let s = synth();
    let data = TrainData::new(&s.dataset, &[], &s.split.seen).unwrap();
    let config = small_config();
    let mut state = TrainState::new(&config, s.dataset.atom_vocab()).unwrap();
    assert!(fit(&mut state, &data, &config, &mut ()).is_err());
}

#[test]
fn unseen_labels_are_rejected() {
    let s = synth();
    let unseen: Vec<_> = s.dataset.instances.iter().filter(|i| s.split.unseen.contains(&i.ddie)).cloned().collect();
    assert!(TrainData::new(&s.dataset, &unseen, &s.split.seen).is_err());
}
