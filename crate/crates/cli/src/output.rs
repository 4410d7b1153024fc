//! Run artifacts. Column sets are fixed and floats use nine significant
//! digits, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use slomo_core::metrics::{ErrorCount, RunReport};
use slomo_core::runner::{RunOutcome, StepRecord};
use slomo_core::streams::{DomainError, ScheduleDescription};

use crate::config::FileConfig;

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FORGETTING_FILE: &str = "forgetting.csv";
pub const RANK_FILE: &str = "rank.csv";
pub const COMPARE_FILE: &str = "compare.csv";

pub const STEP_COLUMNS: [&str; 25] = [
    "step",
    "domain_id",
    "group",
    "severity",
    "cycle",
    "reset",
    "batch_size",
    "errors",
    "batch_error",
    "loss_sce",
    "loss_cl",
    "loss_mse",
    "loss_im",
    "n_selected",
    "n_contrastive",
    "n_mse",
    "queue_total",
    "queue_sizes",
    "inserted",
    "replaced",
    "rejected_criteria",
    "rejected_full",
    "evicted",
    "restored",
    "flipped_labels",
];

pub fn float(v: f64) -> String {
    format!("{v:.8e}")
}

fn step_row(r: &StepRecord) -> String {
    let d = &r.diagnostics;
    let sizes: Vec<String> = d.queue_sizes.iter().map(usize::to_string).collect();
    [
        r.step.to_string(),
        r.domain_id.to_string(),
        r.group.to_string(),
        r.severity.to_string(),
        r.cycle.to_string(),
        u8::from(r.reset).to_string(),
        d.batch_size.to_string(),
        r.errors.to_string(),
        float(d.batch_error.unwrap_or(f64::NAN)),
        float(d.losses.sce),
        float(d.losses.cl),
        float(d.losses.mse),
        float(d.losses.im),
        d.n_selected.to_string(),
        d.n_contrastive.to_string(),
        d.n_mse.to_string(),
        d.queue_total().to_string(),
        sizes.join(";"),
        d.inserts.inserted.to_string(),
        d.inserts.replaced.to_string(),
        d.inserts.rejected_criteria.to_string(),
        d.inserts.rejected_full.to_string(),
        d.evicted.to_string(),
        d.restored.to_string(),
        d.flipped_labels.to_string(),
    ]
    .join(",")
}

pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut s = STEP_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&step_row(r));
        s.push('\n');
    }
    s
}

pub fn forgetting_csv(report: &RunReport) -> String {
    let mut s = String::from("after_step,domain_id,student,t1,t2,ensemble\n");
    for p in &report.forgetting {
        let a = &p.accuracy;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.after_step,
            p.domain_id,
            float(a.student),
            float(a.t1),
            float(a.t2),
            float(a.ensemble)
        );
    }
    s
}

pub fn rank_csv(ranking: &[DomainError], families: &[&str]) -> String {
    let mut s = String::from("rank,domain_id,family,error,samples\n");
    for (i, d) in ranking.iter().enumerate() {
        let fam = families.get(d.domain_id).copied().unwrap_or("?");
        let _ = writeln!(s, "{},{},{},{},{}", i + 1, d.domain_id, fam, float(d.error), d.samples);
    }
    s
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub library_version: &'static str,
    pub config: &'a FileConfig,
    pub schedule: &'a ScheduleDescription,
    pub ranking: &'a Option<Vec<DomainError>>,
    pub steps: usize,
    pub report: &'a RunReport,
}

pub fn summary_json(cfg: &FileConfig, outcome: &RunOutcome) -> String {
    let s = Summary {
        library_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        schedule: &outcome.schedule,
        ranking: &outcome.ranking,
        steps: outcome.records.len(),
        report: &outcome.report,
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

/// Per-domain and overall error deltas `b − a`.
pub fn compare_csv(a: &RunReport, b: &RunReport) -> String {
    let mut s = String::from("scope,key,error_a,error_b,delta\n");
    let row = |s: &mut String, scope: &str, key: String, ea: f64, eb: f64| {
        let _ = writeln!(s, "{scope},{key},{},{},{}", float(ea), float(eb), float(eb - ea));
    };
    let zipped = |xs: &[ErrorCount], ys: &[ErrorCount]| -> Vec<(usize, f64, f64)> {
        xs.iter().zip(ys).map(|(x, y)| (x.key, x.error, y.error)).collect()
    };
    for (k, ea, eb) in zipped(&a.per_domain, &b.per_domain) {
        row(&mut s, "domain", k.to_string(), ea, eb);
    }
    row(&mut s, "overall", "all".into(), a.overall_error, b.overall_error);
    s
}

pub fn write(dir: &Path, name: &str, contents: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)
}
