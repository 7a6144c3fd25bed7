//! Evaluation report, predictions and PCA dumps.

use serde_json::{json, Map, Value};
use zeroddi_core::eval::{fold_classes, rank_table, BinaryMetrics, EvalReport, FoldReport, Mode, SideMetrics, Summary};

use crate::experiment::{ClassIndex, Evaluation};
use crate::error::Result;

/// Percentages are reported to two decimals.
pub fn pct(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn opt_pct(x: Option<f64>) -> Value {
    x.map_or(Value::Null, |v| json!(pct(v)))
}

fn side_json(m: &SideMetrics, classes: &ClassIndex) -> Value {
    let per_class: Vec<Value> = m
        .per_class
        .iter()
        .map(|c| {
            let predicted: Map<String, Value> =
                c.predicted.iter().map(|(&k, &n)| (classes.ids[k].clone(), json!(n))).collect();
            json!({ "class": classes.ids[c.class], "total": c.total, "correct": c.correct, "predicted": predicted })
        })
        .collect();
    json!({
        "acc_at1": pct(m.acc_at1),
        "acc_at3": pct(m.acc_at3),
        "acc_at5": pct(m.acc_at5),
        "acc_ave": pct(m.acc_ave),
        "n_instances": m.n_instances,
        "per_class": per_class,
    })
}

fn summary_json(s: &Summary) -> Value {
    json!({ "acc_at1": pct(s.acc_at1), "acc_at3": pct(s.acc_at3), "acc_at5": pct(s.acc_at5), "acc_ave": pct(s.acc_ave) })
}

fn binary_json(b: &BinaryMetrics) -> Value {
    json!({
        "acc_bi_seen": pct(b.acc_bi_seen),
        "acc_bi_unseen": pct(b.acc_bi_unseen),
        "p_seen": opt_pct(b.precision_seen),
        "p_unseen": opt_pct(b.precision_unseen),
    })
}

fn fold_json(f: &FoldReport, classes: &ClassIndex) -> Value {
    let mut o = Map::new();
    o.insert("fold".into(), f.fold.map_or(json!("pooled"), |k| json!(k)));
    o.insert("test_classes".into(), json!(f.test_classes.iter().map(|&c| &classes.ids[c]).collect::<Vec<_>>()));
    o.insert("n_candidates".into(), json!(f.candidates.len()));
    o.insert("validation_acc_ave".into(), opt_pct(f.validation_acc_ave));
    if let Some(m) = &f.czsl {
        o.insert("unseen".into(), side_json(m, classes));
    }
    if let Some(g) = &f.gzsl {
        o.insert("seen".into(), side_json(&g.seen, classes));
        o.insert("unseen".into(), side_json(&g.unseen, classes));
        o.insert("h_at1".into(), json!(pct(g.h_at1)));
        o.insert("h_ave".into(), json!(pct(g.h_ave)));
        o.insert("binary".into(), binary_json(&g.binary));
    }
    Value::Object(o)
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Czsl => "czsl",
        Mode::Gzsl => "gzsl",
    }
}

pub struct ReportContext<'a> {
    pub selection: &'a str,
    pub conditioning: &'a str,
    pub config_hash: &'a str,
    pub checkpoint_hashes: &'a [String],
}

pub fn report_json(report: &EvalReport, classes: &ClassIndex, ctx: &ReportContext<'_>) -> Value {
    let mut summary = Map::new();
    summary.insert("unseen".into(), summary_json(&report.unseen));
    if let Some(s) = &report.seen {
        summary.insert("seen".into(), summary_json(s));
    }
    for (k, v) in [
        ("h_at1_of_means", report.h_at1_of_means),
        ("h_ave_of_means", report.h_ave_of_means),
        ("mean_h_at1", report.mean_h_at1),
        ("mean_h_ave", report.mean_h_ave),
    ] {
        if v.is_some() {
            summary.insert(k.into(), opt_pct(v));
        }
    }
    if let Some(b) = &report.binary {
        summary.insert("binary".into(), binary_json(b));
    }
    json!({
        "mode": mode_name(report.mode),
        "folds_evaluated": ctx.selection,
        "conditioning": ctx.conditioning,
        "config_hash": ctx.config_hash,
        "checkpoint_hashes": ctx.checkpoint_hashes,
        "num_classes": classes.ids.len(),
        "summary": Value::Object(summary),
        "folds": report.folds.iter().map(|f| fold_json(f, classes)).collect::<Vec<_>>(),
    })
}

/// Per-instance top-5 predictions of each evaluated fold:
/// `(file suffix, tsv text)` with rows `instance_id, true class, (class, score) x5`.
pub fn predictions(ev: &Evaluation) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, f) in ev.report.folds.iter().enumerate() {
        let scored = &ev.scored[if ev.scored.len() == 1 { 0 } else { i }];
        let (test, candidates) = fold_classes(&ev.split, ev.report.mode, f.fold)?;
        let mut label_classes = test.clone();
        if ev.report.mode == Mode::Gzsl {
            label_classes.extend(&ev.split.seen);
        }
        let mut rows = rank_table(&scored.table, &label_classes, &candidates)?;
        rows.sort_by_key(|(inst, _, _)| *inst);
        let mut text = String::new();
        for (inst, y, r) in rows {
            text.push_str(&format!("{inst}\t{}", ev.classes.ids[y]));
            for (c, s) in r.classes.iter().zip(&r.scores).take(5) {
                text.push_str(&format!("\t{}\t{s}", ev.classes.ids[*c]));
            }
            text.push('\n');
        }
        let suffix = f.fold.map_or_else(|| "pooled".to_string(), |k| format!("fold{k}"));
        out.push((suffix, text));
    }
    Ok(out)
}

/// `instance_id, class, pc1, pc2` rows for the pair representations.
pub fn pca_dump(ev: &Evaluation) -> String {
    let scored = &ev.scored[0];
    let coords = crate::experiment::pca_2d(&scored.h);
    let mut text = String::new();
    for (row, xy) in scored.table.rows.iter().zip(coords) {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", row.instance, ev.classes.ids[row.label], xy[0], xy[1]));
    }
    text
}
