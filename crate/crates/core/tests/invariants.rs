use proptest::prelude::*;
use zeroddi_core::brl::Fusion;
use zeroddi_core::data::{DdieSemanticsRecord, MolecularGraph};
use zeroddi_core::model::{Conditioning, Model, ModelConfig};
use zeroddi_core::{Tape, Tensor};

const VOCAB: usize = 6;
const D_T: usize = 5;

fn model(fusion: Fusion, seed: u64) -> Model {
    let config = ModelConfig {
        atom_vocab: VOCAB,
        d_v: 8,
        d_n: 7,
        d_r: 6,
        n_substructures: 6,
        d_t: D_T,
        gin_layers: 2,
        fusion,
        use_attributes: true,
    };
    Model::init(config, seed).unwrap()
}

/// A random tree over `codes.len()` atoms, each atom bonded to an earlier one.
fn graph_strategy(id: &'static str) -> impl Strategy<Value = MolecularGraph> {
    (1usize..8).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..VOCAB, n),
            prop::collection::vec(any::<prop::sample::Index>(), n.saturating_sub(1)),
        )
            .prop_map(move |(codes, parents)| {
                let bonds = parents.iter().enumerate().map(|(k, p)| (p.index(k + 1), k + 1)).collect();
                MolecularGraph::new(id, codes, bonds).unwrap()
            })
    })
}

fn tokens(rows: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * D_T).prop_map(move |d| Tensor::matrix(rows, D_T, d).unwrap())
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&r| t.row_slice(r).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(g1 in graph_strategy("a"), g2 in graph_strategy("b"), ct in tokens(4), at in tokens(3), seed in 0u64..1000) {
        let m = model(Fusion::Ssf, seed);
        let rec = DdieSemanticsRecord::new("c", ct, at).unwrap();
        let a = m.attention_map((&g1, &g2), &rec).unwrap();
        prop_assert_eq!(a.shape(), &[6, 5]);
        for r in 0..a.rows() {
            prop_assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn z_ignores_token_row_order(
        g1 in graph_strategy("a"), g2 in graph_strategy("b"),
        ct in tokens(5), at in tokens(4),
        cperm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        aperm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let m = model(Fusion::Ssf, seed);
        let rec = DdieSemanticsRecord::new("c", ct.clone(), at.clone()).unwrap();
        let moved = DdieSemanticsRecord::new("c", permute_rows(&ct, &cperm), permute_rows(&at, &aperm)).unwrap();
        let a = &m.score_pairs(&[(&g1, &g2)], &[&rec], Conditioning::Pair).unwrap()[0];
        let b = &m.score_pairs(&[(&g1, &g2)], &[&moved], Conditioning::Pair).unwrap()[0];
        prop_assert!(max_diff(&a.z, &b.z) < 1e-9);
    }

    #[test]
    fn encoder_ignores_node_relabeling(
        g in graph_strategy("a"), other in graph_strategy("b"),
        keys in prop::collection::vec(any::<u32>(), 8),
        seed in 0u64..1000,
    ) {
        let n = g.num_atoms();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| keys[i]);
        let relabeled = g.permuted(&perm);
        let m = model(Fusion::Ssf, seed);
        let encode = |x: &MolecularGraph| {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, false);
            let enc = m.encoder.encode_pair(&mut tape, &p, x, &other).unwrap();
            (tape.value(enc.h).clone(), tape.value(enc.p).clone())
        };
        let (h1, p1) = encode(&g);
        let (h2, p2) = encode(&relabeled);
        prop_assert!(max_diff(&h1, &h2) < 1e-9);
        prop_assert!(max_diff(&p1, &p2) < 1e-9);
    }
}

#[test]
fn mean_token_fusion_ignores_the_pair() {
    let m = model(Fusion::MeanTokens, 3);
    let g1 = MolecularGraph::new("a", vec![0, 1, 2], vec![(0, 1), (1, 2)]).unwrap();
    let g2 = MolecularGraph::new("b", vec![3], vec![]).unwrap();
    let g3 = MolecularGraph::new("c", vec![4, 5], vec![(0, 1)]).unwrap();
    let rec = DdieSemanticsRecord::new("x", Tensor::filled(2, D_T, 0.3), Tensor::filled(1, D_T, -0.2)).unwrap();
    let s = m.score_pairs(&[(&g1, &g2), (&g3, &g1)], &[&rec], Conditioning::Pair).unwrap();
    assert_eq!(s[0].z, s[1].z);
}
