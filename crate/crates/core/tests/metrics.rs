use std::collections::BTreeSet;

use proptest::prelude::*;
use zeroddi_core::eval::{
    harmonic_mean, macro_accuracy, run_protocol, topk_accuracy, ClassSplit, FoldSelection, Mode, Ranking, ScoreRow,
    ScoreTable,
};

/// Rank of `label` by counting strictly better candidates and equal-score
/// candidates with a smaller index.
fn rank_of(scores: &[f64], candidates: &[usize], label: usize) -> usize {
    let s = scores[label];
    candidates.iter().filter(|&&c| scores[c] > s || (scores[c] == s && c < label)).count()
}

fn split() -> ClassSplit {
    ClassSplit { seen: (0..5).collect(), unseen: (5..11).collect(), folds: vec![vec![5, 8], vec![6, 9], vec![7, 10]] }
}

fn table_strategy() -> impl Strategy<Value = ScoreTable> {
    prop::collection::vec((0usize..11, prop::collection::vec(0u8..4, 11)), 40..80).prop_map(|rows| {
        // coarse scores produce plenty of ties
        let mut rows: Vec<ScoreRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, s))| ScoreRow { instance: i, label, scores: s.into_iter().map(f64::from).collect() })
            .collect();
        // every class keeps at least one instance
        for (c, row) in rows.iter_mut().take(11).enumerate() {
            row.label = c;
        }
        ScoreTable { num_classes: 11, rows }
    })
}

proptest! {
    #[test]
    fn topk_matches_rank_counting(table in table_strategy(), k in 1usize..6) {
        let candidates: Vec<usize> = (0..11).collect();
        let rankings: Vec<Ranking> = table.rows.iter().map(|r| Ranking::new(&candidates, &r.scores).unwrap()).collect();
        let labels: Vec<usize> = table.rows.iter().map(|r| r.label).collect();
        let hits = table.rows.iter().filter(|r| rank_of(&r.scores, &candidates, r.label) < k).count();
        let want = 100.0 * hits as f64 / table.rows.len() as f64;
        prop_assert!((topk_accuracy(&rankings, &labels, k).unwrap() - want).abs() < 1e-9);

        let mut per = [(0usize, 0usize); 11];
        for r in &table.rows {
            per[r.label].1 += 1;
            per[r.label].0 += usize::from(rank_of(&r.scores, &candidates, r.label) == 0);
        }
        let present: Vec<_> = per.iter().filter(|p| p.1 > 0).collect();
        let macro_want = 100.0 * present.iter().map(|p| p.0 as f64 / p.1 as f64).sum::<f64>() / present.len() as f64;
        prop_assert!((macro_accuracy(&rankings, &labels).unwrap() - macro_want).abs() < 1e-9);
    }

    #[test]
    fn reports_are_ordered_and_consistent(table in table_strategy()) {
        let s = split();
        for mode in [Mode::Czsl, Mode::Gzsl] {
            for sel in [FoldSelection::All, FoldSelection::Pooled, FoldSelection::Fold(1)] {
                let rep = run_protocol(&[&table], &s, mode, sel).unwrap();
                for f in &rep.folds {
                    let sides: Vec<_> = match (&f.czsl, &f.gzsl) {
                        (Some(m), _) => vec![m],
                        (_, Some(g)) => {
                            prop_assert!(g.unseen.acc_at1 <= g.binary.acc_bi_unseen + 1e-9);
                            prop_assert!(g.seen.acc_at1 <= g.binary.acc_bi_seen + 1e-9);
                            prop_assert!((g.h_at1 - harmonic_mean(g.seen.acc_at1, g.unseen.acc_at1)).abs() < 1e-12);
                            vec![&g.seen, &g.unseen]
                        }
                        _ => unreachable!(),
                    };
                    for m in sides {
                        prop_assert!(m.acc_at1 <= m.acc_at3 && m.acc_at3 <= m.acc_at5);
                        let total: usize = m.per_class.iter().map(|c| c.total).sum();
                        prop_assert_eq!(total, m.n_instances);
                        let correct: usize = m.per_class.iter().map(|c| c.correct).sum();
                        prop_assert!((100.0 * correct as f64 / total as f64 - m.acc_at1).abs() < 1e-9);
                    }
                    if mode == Mode::Czsl {
                        let test: BTreeSet<usize> = f.test_classes.iter().copied().collect();
                        prop_assert_eq!(f.candidates.iter().copied().collect::<BTreeSet<_>>(), test);
                    } else {
                        prop_assert_eq!(f.candidates.len(), 11);
                    }
                }
                let n = rep.folds.len() as f64;
                let mean1 = rep.folds.iter().map(|f| f.czsl.as_ref().map_or_else(|| f.gzsl.as_ref().unwrap().unseen.acc_at1, |m| m.acc_at1)).sum::<f64>() / n;
                prop_assert!((rep.unseen.acc_at1 - mean1).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn harmonic_means_of_reported_accuracies() {
    assert!((harmonic_mean(48.30, 8.21) - 14.03).abs() <= 0.01);
    assert!((harmonic_mean(45.29, 12.55) - 19.65).abs() <= 0.01);
}

#[test]
fn fold_test_classes_are_the_other_folds() {
    let s = split();
    let table = ScoreTable {
        num_classes: 11,
        rows: (0..11).map(|c| ScoreRow { instance: c, label: c, scores: vec![0.0; 11] }).collect(),
    };
    let rep = run_protocol(&[&table], &s, Mode::Czsl, FoldSelection::All).unwrap();
    assert_eq!(rep.folds[0].test_classes, vec![6, 7, 9, 10]);
    assert_eq!(rep.folds[2].test_classes, vec![5, 6, 8, 9]);
    // all-tied scores resolve to the lowest candidate index
    assert_eq!(rep.folds[0].czsl.as_ref().unwrap().acc_at1, 25.0);
}
