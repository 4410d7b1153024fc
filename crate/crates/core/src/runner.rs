//! End-to-end runs: build the task and source model, stream a schedule
//! through one method variant, and collect per-step records and a report.

use serde::{Deserialize, Serialize};

use crate::engine::{adapt_step, AdaptationConfig, InsertCounts, StepDiagnostics, StepLosses};
use crate::error::{Error, Result};
use crate::metrics::{build_report, forgetting_probe, BatchOutcome, ForgettingPoint, RunReport};
use crate::numnet::{forward, NetworkParams, NetworkSpec, StatsMode};
use crate::par::{self, Exec};
use crate::rng;
use crate::streams::{
    default_domains, domain_eval_set, make_task, rank_by_source_error, train_source, CorruptionFamily, DomainError,
    LabeledSet, Schedule, ScheduleConfig, ScheduleDescription, Setting, SyntheticTask, TaskConfig, TrainConfig,
};
use crate::trio::{MaskMode, ModelTrio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// BN-only student updates.
    #[serde(rename = "slomo_fast")]
    SloMoFast,
    /// Full student updates.
    #[serde(rename = "slomo_fast_star")]
    SloMoFastStar,
    /// No adaptation; running-statistics predictions of the source model.
    FrozenSource,
}

impl Variant {
    pub fn student_mode(self) -> MaskMode {
        match self {
            Variant::SloMoFastStar => MaskMode::Full,
            _ => MaskMode::BnOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub task: TaskConfig,
    pub hidden: Vec<usize>,
    pub source_training: TrainConfig,
    pub adaptation: AdaptationConfig,
    pub schedule: ScheduleConfig,
    pub variants_per_group: usize,
    pub adaptation_seed: u64,
    pub window: usize,
    pub stability_weight: f64,
    pub probe_forgetting: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::SloMoFast,
            task: TaskConfig::default(),
            hidden: vec![64, 32],
            source_training: TrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            schedule: ScheduleConfig::default(),
            variants_per_group: 1,
            adaptation_seed: 0,
            window: crate::metrics::DEFAULT_WINDOW,
            stability_weight: crate::metrics::DEFAULT_STABILITY_WEIGHT,
            probe_forgetting: true,
        }
    }
}

impl RunConfig {
    /// Same run with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.task.seed = seed;
        c.source_training.seed = seed;
        c.schedule.seed = seed;
        c.adaptation_seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.adaptation.validate()?;
        if self.adaptation.batch_size != self.schedule.batch_size {
            return Err(Error::InvalidConfig(format!(
                "adaptation batch size {} differs from schedule batch size {}",
                self.adaptation.batch_size, self.schedule.batch_size
            )));
        }
        if self.adaptation.student_mode != self.variant.student_mode() {
            return Err(Error::InvalidConfig(format!(
                "student mode {:?} does not match variant {:?}",
                self.adaptation.student_mode, self.variant
            )));
        }
        if self.window == 0 || !(self.stability_weight >= 0.0) {
            return Err(Error::InvalidConfig("window must be >= 1 and stability_weight >= 0".into()));
        }
        if self.variants_per_group == 0 {
            return Err(Error::InvalidConfig("variants_per_group must be >= 1".into()));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::bn_mlp(self.task.dim, &self.hidden, self.task.num_classes)
    }
}

/// Task and trained source model, shareable across runs that only differ in
/// adaptation or schedule settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: SyntheticTask,
    pub spec: NetworkSpec,
    pub source: NetworkParams,
}

impl Prepared {
    pub fn new(cfg: &RunConfig) -> Result<Prepared> {
        let task = make_task(&cfg.task)?;
        let spec = cfg.network_spec()?;
        let source = train_source(&task, &spec, &cfg.source_training)?;
        Ok(Prepared { task, spec, source })
    }

    /// Whether `cfg` would build this exact task and source model.
    pub fn matches(&self, cfg: &RunConfig) -> bool {
        self.task.config == cfg.task && cfg.network_spec().map(|s| s == self.spec).unwrap_or(false)
    }
}

/// One row of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub domain_id: usize,
    pub group: usize,
    pub severity: u8,
    pub cycle: usize,
    pub reset: bool,
    pub errors: usize,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub report: RunReport,
    pub schedule: ScheduleDescription,
    /// Frozen-source ranking, present for the easy/hard orderings.
    pub ranking: Option<Vec<DomainError>>,
    pub final_trio: ModelTrio,
}

fn frozen_diagnostics(n: usize, num_classes: usize) -> StepDiagnostics {
    StepDiagnostics {
        batch_size: n,
        losses: StepLosses::default(),
        n_selected: 0,
        n_contrastive: 0,
        n_mse: 0,
        queue_sizes: vec![0; num_classes],
        inserts: InsertCounts::default(),
        evicted: 0,
        restored: 0,
        flipped_labels: 0,
        batch_error: None,
    }
}

/// Builds the task and source model, then runs.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_prepared(&Prepared::new(cfg)?, cfg)
}

/// Runs `cfg` against an already trained source.
pub fn run_prepared(prep: &Prepared, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if !prep.matches(cfg) {
        return Err(Error::InvalidConfig("prepared task or network differs from the run configuration".into()));
    }
    let task = &prep.task;
    let spec = &prep.spec;
    let domains = default_domains(&CorruptionFamily::ALL, cfg.variants_per_group, cfg.schedule.seed);

    let ranking = if cfg.schedule.setting.needs_ranking() {
        Some(rank_domains(prep, cfg, Exec::Sequential)?)
    } else {
        None
    };
    let order: Option<Vec<usize>> = ranking.as_ref().map(|r| r.iter().map(|d| d.domain_id).collect());
    let mut schedule = Schedule::new(task, domains.clone(), cfg.schedule.clone(), order.as_deref())?;
    let description = schedule.describe();
    let plans = schedule.events().to_vec();

    let mut trio = ModelTrio::new(spec.clone(), prep.source.clone(), rng::derive(cfg.adaptation_seed, &[rng::tag("projector")]))?;
    let mut store = cfg.adaptation.new_store(spec.num_classes, spec.feature_dim())?;
    let mut r = rng::stream(cfg.adaptation_seed, &[rng::tag("adapt")]);
    let initial_eval = match plans.first() {
        Some(p) if cfg.probe_forgetting => Some(domain_eval_set(task, &domains[p.domain_id], cfg.schedule.severity)?),
        _ => None,
    };

    let mut records = Vec::with_capacity(plans.len());
    let mut outcomes = Vec::with_capacity(plans.len());
    let mut forgetting = Vec::new();
    for (step, plan) in plans.iter().enumerate() {
        let ev = schedule.materialize(step, *plan)?;
        if ev.reset {
            trio.reset();
            store.clear();
        }
        let n = ev.labels.len();
        let (pred, mut diag) = match cfg.variant {
            Variant::FrozenSource => {
                let out = forward(spec, trio.source(), &ev.x, StatsMode::Running)?;
                (out.logits.argmax_rows(), frozen_diagnostics(n, spec.num_classes))
            }
            _ => match adapt_step(&mut trio, &mut store, &ev.x, &cfg.adaptation, &mut r) {
                Ok((p, d)) => (p.labels, d),
                Err(Error::NonFinite(what)) => {
                    return Err(Error::NumericBlowUp {
                        step,
                        last_good: step.checked_sub(1),
                        what: what.to_string(),
                    })
                }
                Err(e) => return Err(e),
            },
        };
        let errors = pred.iter().zip(&ev.labels).filter(|(p, y)| p != y).count();
        diag.batch_error = Some(errors as f64 / n as f64);
        outcomes.push(BatchOutcome { step, domain_id: ev.domain_id, cycle: ev.cycle, errors, samples: n });
        records.push(StepRecord {
            step,
            domain_id: ev.domain_id,
            group: ev.group,
            severity: ev.severity,
            cycle: ev.cycle,
            reset: ev.reset,
            errors,
            diagnostics: diag,
        });
        let segment_end = plans.get(step + 1).is_none_or(|next| next.domain_id != plan.domain_id);
        if let (Some(eval), true) = (&initial_eval, segment_end) {
            forgetting.push(ForgettingPoint {
                after_step: step,
                domain_id: ev.domain_id,
                accuracy: forgetting_probe(&trio, eval)?,
            });
        }
    }
    let report = build_report(&outcomes, cfg.window, cfg.stability_weight, forgetting)?;
    Ok(RunOutcome { records, report, schedule: description, ranking, final_trio: trio })
}

/// Frozen-source error of every domain on its stream data at the schedule
/// severity, easiest first.
pub fn rank_domains(prep: &Prepared, cfg: &RunConfig, exec: Exec) -> Result<Vec<DomainError>> {
    let domains = default_domains(&CorruptionFamily::ALL, cfg.variants_per_group, cfg.schedule.seed);
    let continual = ScheduleConfig { setting: Setting::Continual, ..cfg.schedule.clone() };
    let mut probe = Schedule::new(&prep.task, domains.clone(), continual, None)?;
    let data = (0..domains.len())
        .map(|d| Ok((d, probe.domain_data(d, cfg.schedule.severity)?)))
        .collect::<Result<Vec<(usize, LabeledSet)>>>()?;
    rank_by_source_error(&prep.spec, &prep.source, &data, exec)
}

/// Independent runs of `cfg` under each seed. Each seed trains its own
/// source model.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64], exec: Exec) -> Result<Vec<RunOutcome>> {
    par::map_slice(exec, seeds, |&s| run(&cfg.with_seed(s))).into_iter().collect()
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}
