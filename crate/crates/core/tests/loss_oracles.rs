//! Vectorized losses against scalar loop oracles on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zeroddi_core::loss::{align_loss, evaluate, LossConfig, Objective};
use zeroddi_core::tape::Tape;
use zeroddi_core::Tensor;

const TOL: f64 = 1e-10;

struct Case {
    h: Vec<Vec<f64>>,
    z: Vec<Vec<Vec<f64>>>,
    labels: Vec<usize>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..7);
    let c = rng.random_range(2..6);
    let d = rng.random_range(2..6);
    let mut v = || rng.random_range(-2.0..2.0);
    let h = (0..b).map(|_| (0..d).map(|_| v()).collect()).collect();
    let z = (0..b).map(|_| (0..c).map(|_| (0..d).map(|_| v()).collect()).collect()).collect();
    let labels = (0..b).map(|i| (i * 7 + seed as usize) % c).collect();
    Case { h, z, labels }
}

fn tensors(c: &Case) -> (Tensor, Vec<Tensor>) {
    let h = Tensor::from_rows(&c.h).unwrap();
    let z = c.z.iter().map(|zi| Tensor::from_rows(zi).unwrap()).collect();
    (h, z)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).max(1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn center(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
}

fn minus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn align_oracle(c: &Case, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..c.h.len() {
        let logits: Vec<f64> = c.z[i].iter().map(|zj| dot(&c.h[i], zj) / tau).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[c.labels[i]];
    }
    total
}

fn class_oracle(c: &Case) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for zi in &c.z {
        let ctr = center(zi);
        for j in 0..zi.len() {
            let mut best = f64::MIN;
            for k in 0..zi.len() {
                if k != j {
                    best = best.max(dot(&unit(&minus(&zi[j], &ctr)), &unit(&minus(&zi[k], &ctr))));
                }
            }
            sum += best;
            n += 1.0;
        }
    }
    1.0 + sum / n
}

fn instance_oracle(c: &Case) -> f64 {
    let b = c.h.len();
    let mut sum = 0.0;
    for i in 0..b {
        let ctr = center(&c.z[i]);
        let mut best = f64::MIN;
        for k in 0..b {
            if k != i {
                best = best.max(dot(&unit(&minus(&c.h[i], &ctr)), &unit(&minus(&c.h[k], &ctr))));
            }
        }
        sum += best;
    }
    1.0 + sum / b as f64
}

fn hinge_oracle(c: &Case, margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..c.h.len() {
        let y = c.labels[i];
        let sy = dot(&c.h[i], &c.z[i][y]);
        for (j, zj) in c.z[i].iter().enumerate() {
            if j != y {
                total += (margin - sy + dot(&c.h[i], zj)).max(0.0);
            }
        }
    }
    total / c.h.len() as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

#[test]
fn dua_terms_match_loop_oracles() {
    for seed in 0..100 {
        let c = case(seed);
        let (h, z) = tensors(&c);
        let cfg = LossConfig { tau: 0.9, lambda: 0.7 };
        let v = evaluate(&h, &z, &c.labels, Objective::Dua(cfg)).unwrap();
        let (a, cl, ins) = (align_oracle(&c, 0.9), class_oracle(&c), instance_oracle(&c));
        assert!(close(v.align, a), "seed {seed} align {} vs {a}", v.align);
        assert!(close(v.cla, cl), "seed {seed} cla {} vs {cl}", v.cla);
        assert!(close(v.ins, ins), "seed {seed} ins {} vs {ins}", v.ins);
        assert!(close(v.total, a + 0.7 * (cl + ins)), "seed {seed} total");
    }
}

#[test]
fn baselines_match_loop_oracles() {
    for seed in 100..200 {
        let c = case(seed);
        let (h, z) = tensors(&c);
        let ce = evaluate(&h, &z, &c.labels, Objective::Ce { scale: 2.0 }).unwrap();
        assert!(close(ce.total, align_oracle(&c, 0.5)), "seed {seed} ce");
        let hinge = evaluate(&h, &z, &c.labels, Objective::Hinge { margin: 0.1 }).unwrap();
        assert!(close(hinge.total, hinge_oracle(&c, 0.1)), "seed {seed} hinge");
    }
}

#[test]
fn uniform_similarities_give_b_log_c() {
    for (b, c) in [(1, 2), (3, 4), (8, 16)] {
        let h = Tensor::zeros(b, 3);
        let z: Vec<Tensor> = (0..b).map(|i| Tensor::filled(c, 3, i as f64 + 0.5)).collect();
        let labels = vec![0; b];
        let v = evaluate(&h, &z, &labels, Objective::Ce { scale: 1.0 / 0.9 }).unwrap();
        assert!((v.align - b as f64 * (c as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn align_ignores_per_instance_shifts() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let logits: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let shifts: Vec<f64> = (0..b).map(|_| rng.random_range(-30.0..30.0)).collect();
        let moved: Vec<f64> = logits.iter().enumerate().map(|(k, v)| v + shifts[k / c]).collect();
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let value = |l: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(b, c, l).unwrap());
            let a = align_loss(&mut tape, x, &labels, 0.9).unwrap();
            tape.value(a).item()
        };
        let (p, q) = (value(logits), value(moved));
        assert!((p - q).abs() < 1e-9, "seed {seed}: {p} vs {q}");
    }
}
