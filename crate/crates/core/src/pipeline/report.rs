//! Comparison tables over completed runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AlignmentSummary, EvalSummary, KeypressReport, Pipeline, ProbeReport, RunId, RunKind};
use crate::error::Result;
use crate::metrics::{MetricsReport, COLUMNS};

/// One table line: a single run, or the median over seeds of a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `finetune` or a variant numeral `I`..`VI`.
    pub label: String,
    pub count: usize,
    /// `None` on median rows.
    pub seed: Option<u64>,
    /// Number of runs behind the row.
    pub runs: usize,
    /// Bleu-1, Bleu-4, METEOR, ROUGE, TER, Qwerty-D on the pseudo-real test set.
    pub metrics: [f64; 6],
    pub corrected: Option<[f64; 6]>,
    pub train_ter: Option<f64>,
    /// Test TER minus train TER.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub synthetic_test: Option<[f64; 6]>,
    pub pseudo_real_test: [f64; 6],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub header: Vec<String>,
    pub pretrain: Option<PretrainRow>,
    pub rows: Vec<ReportRow>,
    pub medians: Vec<ReportRow>,
    pub probes: BTreeMap<String, ProbeReport>,
    pub keypress: Option<KeypressReport>,
    pub alignment: Option<AlignmentSummary>,
    /// Expected runs without evaluation results.
    pub missing: Vec<String>,
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn row_of(s: &EvalSummary) -> ReportRow {
    ReportRow {
        label: s.run.label(),
        count: s.run.count,
        seed: Some(s.run.seed),
        runs: 1,
        metrics: s.test.raw.headline(),
        corrected: s.test.corrected.as_ref().map(MetricsReport::headline),
        train_ter: s.train.as_ref().map(|t| t.ter),
        gap: s.overfit_gap(),
    }
}

fn median_row(rows: &[&ReportRow]) -> ReportRow {
    let col = |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
        v.map(|v| median(&v))
    };
    let arr = |f: &dyn Fn(&ReportRow) -> Option<[f64; 6]>| -> Option<[f64; 6]> {
        let mut out = [0.0; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = col(&|r| f(r).map(|a| a[i]))?;
        }
        Some(out)
    };
    ReportRow {
        label: rows[0].label.clone(),
        count: rows[0].count,
        seed: None,
        runs: rows.len(),
        metrics: arr(&|r| Some(r.metrics)).expect("metrics always present"),
        corrected: arr(&|r| r.corrected),
        train_ter: col(&|r| r.train_ter),
        gap: col(&|r| r.gap),
    }
}

fn label_order(label: &str) -> usize {
    match label {
        "finetune" => 0,
        l => 1 + ["I", "II", "III", "IV", "V", "VI"].iter().position(|&r| r == l).unwrap_or(6),
    }
}

/// Builds the tables from `(expected run, result if completed)` pairs.
pub fn build_tables(entries: &[(RunId, Option<EvalSummary>)]) -> TableReport {
    let mut report = TableReport {
        header: COLUMNS.iter().map(|(n, d)| format!("{n} {d}")).collect(),
        ..Default::default()
    };
    let mut groups: BTreeMap<(usize, usize, String), Vec<ReportRow>> = BTreeMap::new();
    for (id, summary) in entries {
        let Some(s) = summary else {
            report.missing.push(id.name());
            continue;
        };
        if id.kind == RunKind::Pretrain {
            report.pretrain = Some(PretrainRow {
                synthetic_test: s.synthetic_test.as_ref().map(MetricsReport::headline),
                pseudo_real_test: s.test.raw.headline(),
            });
            continue;
        }
        let row = row_of(s);
        groups
            .entry((usize::MAX - id.count, label_order(&row.label), row.label.clone()))
            .or_default()
            .push(row);
    }
    for rows in groups.values_mut() {
        rows.sort_by_key(|r| r.seed);
        report.medians.push(median_row(&rows.iter().collect::<Vec<_>>()));
        report.rows.append(rows);
    }
    report
}

/// Collects every configured run of `pipeline` into a report.
pub fn make_report(pipeline: &Pipeline) -> Result<TableReport> {
    let entries: Vec<(RunId, Option<EvalSummary>)> =
        pipeline.runs().into_iter().map(|id| (id, pipeline.load_eval(&id))).collect();
    let mut report = build_tables(&entries);
    for (id, _) in &entries {
        if let Some(p) = pipeline.load_probe(id) {
            report.probes.insert(id.name(), p);
        }
    }
    report.keypress = super::read_json(&pipeline.layout.keypress_report()).ok();
    report.alignment = super::read_json(&pipeline.layout.align_report()).ok();
    Ok(report)
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" | ")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn variant_name(label: &str) -> String {
    match label.parse::<crate::train::AblationVariant>() {
        Ok(v) => format!("{} ({})", v.roman(), v.title()),
        Err(_) => label.to_string(),
    }
}

impl TableReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let head = self.header.join(" | ");
        let rule = |n: usize| vec!["---"; n].join("|");
        s.push_str("# Experiment report\n\n");
        s.push_str("BLEU is corpus-level; TER and Qwerty-D are per-sentence means; ROUGE is ROUGE-1 recall; ");
        s.push_str("METEOR uses exact matches only. Gap is test TER minus train TER.\n\n");
        if let Some(k) = &self.keypress {
            s.push_str("## Keypress classifier\n\n| Held-out set | Accuracy |\n|---|---|\n");
            let _ = writeln!(s, "| synthetic | {:.4} |", k.synthetic_test_accuracy);
            let _ = writeln!(s, "| pseudo-real | {:.4} |\n", k.pseudo_real_test_accuracy);
        }
        if let Some(a) = &self.alignment {
            s.push_str("## Feature alignment\n\n| | Before | After |\n|---|---|---|\n");
            let _ = writeln!(s, "| domain probe accuracy | {:.4} | {:.4} |", a.probe_before, a.probe_after);
            let _ = writeln!(
                s,
                "| pseudo-real keypress accuracy | {:.4} | {:.4} |\n",
                a.pseudo_real_accuracy_before, a.pseudo_real_accuracy_after
            );
        }
        if let Some(p) = &self.pretrain {
            let _ = writeln!(s, "## Synthetic-only model\n\n| Test set | {head} |\n|{}|", rule(7));
            if let Some(syn) = &p.synthetic_test {
                let _ = writeln!(s, "| synthetic | {} |", fmt_row(syn));
            }
            let _ = writeln!(s, "| pseudo-real | {} |\n", fmt_row(&p.pseudo_real_test));
        }
        let table = |s: &mut String, title: &str, rows: &[ReportRow], corrected: bool| {
            let _ = writeln!(s, "## {title}\n\n| Model | n | Seed | {head} | Train TER | Gap |\n|{}|", rule(11));
            for r in rows {
                let m = if corrected { r.corrected.unwrap_or([f64::NAN; 6]) } else { r.metrics };
                let seed = r.seed.map_or_else(|| format!("median of {}", r.runs), |v| v.to_string());
                let _ = writeln!(
                    s,
                    "| {} | {} | {seed} | {} | {} | {} |",
                    variant_name(&r.label),
                    r.count,
                    fmt_row(&m),
                    opt(r.train_ter),
                    opt(r.gap)
                );
            }
            s.push('\n');
        };
        if !self.rows.is_empty() {
            table(&mut s, "Pseudo-real test, per run", &self.rows, false);
            table(&mut s, "Pseudo-real test, medians over seeds", &self.medians, false);
            if self.medians.iter().all(|r| r.corrected.is_some()) {
                table(&mut s, "With dictionary correction, medians over seeds", &self.medians, true);
            }
        }
        if !self.probes.is_empty() {
            s.push_str("## Linear domain probes\n\n| Run | Style | Content | Aggregate |\n|---|---|---|---|\n");
            for (name, p) in &self.probes {
                let _ = writeln!(s, "| {name} | {:.4} | {:.4} | {:.4} |", p.style, p.content, p.aggregate);
            }
            s.push('\n');
        }
        if !self.missing.is_empty() {
            s.push_str("## Missing runs\n\n");
            for m in &self.missing {
                let _ = writeln!(s, "- {m}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }
}
