use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use zeroddi_core::data::{class_counts, gzsl_holdout, holdout_count, make_splits, resample_imbalance, Instance};

fn instances(counts: &[usize]) -> Vec<Instance> {
    let mut out = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            out.push(Instance::new(format!("DB{c:02}{i:03}"), format!("DB9{i:04}"), format!("ddie_{c:03}")));
        }
    }
    out
}

fn counts_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..120, 5..20)
}

proptest! {
    #[test]
    fn splits_rank_by_count(counts in counts_strategy(), n_unseen in 1usize..5, seed in any::<u64>()) {
        let cc: BTreeMap<String, usize> = counts.iter().enumerate().map(|(c, &n)| (format!("ddie_{c:03}"), n)).collect();
        let s = make_splits(&cc, n_unseen, seed, 0.1).unwrap();
        prop_assert_eq!(s.unseen.len(), n_unseen);
        prop_assert_eq!(s.seen.len() + s.unseen.len(), cc.len());
        // every seen class outranks every unseen class (count desc, id asc)
        for a in &s.seen {
            for b in &s.unseen {
                prop_assert!(cc[a] > cc[b] || (cc[a] == cc[b] && a < b));
            }
        }
        let mut dealt: Vec<&String> = s.folds.iter().flatten().collect();
        dealt.sort();
        let mut unseen: Vec<&String> = s.unseen.iter().collect();
        unseen.sort();
        prop_assert_eq!(dealt, unseen);
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_splits(&cc, n_unseen, seed, 0.1).unwrap(), s);
    }

    #[test]
    fn resample_caps_and_drops(counts in counts_strategy(), rho in 1.0f64..20.0, min_count in 1usize..15, seed in any::<u64>()) {
        let insts = instances(&counts);
        let Ok(kept) = resample_imbalance(&insts, rho, min_count, seed) else {
            prop_assert!(counts.iter().all(|&n| n < min_count));
            return Ok(());
        };
        let survivors: Vec<usize> = counts.iter().copied().filter(|&n| n >= min_count).collect();
        let min_obs = *survivors.iter().min().unwrap();
        let cap = (rho * min_obs as f64).floor() as usize;
        let after = class_counts(&kept);
        prop_assert_eq!(after.len(), survivors.len());
        for (c, &n) in counts.iter().enumerate() {
            let id = format!("ddie_{c:03}");
            if n < min_count {
                prop_assert!(!after.contains_key(&id));
            } else {
                prop_assert_eq!(after[&id], n.min(cap));
            }
        }
        // survivors keep their input order
        let pos: BTreeMap<&Instance, usize> = insts.iter().enumerate().map(|(i, x)| (x, i)).collect();
        prop_assert!(kept.windows(2).all(|w| pos[&w[0]] < pos[&w[1]]));
    }

    #[test]
    fn holdout_takes_ceiling_per_seen_class(counts in counts_strategy(), frac in 0.05f64..0.5, seed in any::<u64>()) {
        let insts = instances(&counts);
        let cc = class_counts(&insts);
        let split = make_splits(&cc, 2, seed, frac).unwrap();
        let (train, eval) = gzsl_holdout(&insts, &split, frac, seed, None).unwrap();
        let seen: BTreeSet<&String> = split.seen.iter().collect();
        let ec = class_counts(&eval);
        let tc = class_counts(&train);
        for c in &split.seen {
            let n = cc[c];
            let k = holdout_count(frac, n);
            prop_assert_eq!(ec.get(c).copied().unwrap_or(0), k);
            prop_assert_eq!(tc.get(c).copied().unwrap_or(0), n - k);
        }
        prop_assert!(train.iter().chain(&eval).all(|i| seen.contains(&i.ddie)));
        let t: BTreeSet<&Instance> = train.iter().collect();
        prop_assert!(eval.iter().all(|i| !t.contains(i)));
    }
}

#[test]
fn holdout_count_examples() {
    assert_eq!(holdout_count(0.1, 10), 1);
    assert_eq!(holdout_count(0.1, 11), 2);
    assert_eq!(holdout_count(0.1, 1), 1);
    assert_eq!(holdout_count(0.3, 10), 3);
}
