//! Domain-arrival schedulers.
//!
//! A schedule is planned eagerly as a list of lightweight [`EventPlan`]s and
//! materialized lazily: each batch is drawn from its domain's fixed clean
//! pool and corrupted only when the iterator reaches it. A given
//! (domain, batch index, severity) triple always yields the same batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corruption::{corrupt, Corruption, CorruptionFamily, MAX_SEVERITY};
use super::task::{LabeledSet, SyntheticTask};
use crate::error::{Error, Result};
use crate::numnet::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Continual,
    Mixed,
    Gradual,
    Episodic,
    Cyclic,
    CrossGroup,
    #[serde(rename = "easy2hard")]
    Easy2Hard,
    #[serde(rename = "hard2easy")]
    Hard2Easy,
    MixedAfterContinual,
    ContinualAfterMixed,
}

impl Setting {
    pub const ALL: [Setting; 10] = [
        Setting::Continual,
        Setting::Mixed,
        Setting::Gradual,
        Setting::Episodic,
        Setting::Cyclic,
        Setting::CrossGroup,
        Setting::Easy2Hard,
        Setting::Hard2Easy,
        Setting::MixedAfterContinual,
        Setting::ContinualAfterMixed,
    ];

    pub fn needs_ranking(self) -> bool {
        matches!(self, Setting::Easy2Hard | Setting::Hard2Easy)
    }
}

/// How the cyclic scheduler visits groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CyclicMode {
    /// Every group exhausts all of its domains' batches, groups in order,
    /// the whole sequence repeated `cycles` times.
    Protocol,
    /// `batches_per_group` consecutive batches per group visit, cycling
    /// groups; within a group batches continue where the last visit ended.
    Dwell { batches_per_group: usize },
}

/// One target domain: a corruption family variant inside a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: usize,
    pub group: usize,
    pub family: CorruptionFamily,
    pub seed: u64,
}

impl Domain {
    pub fn corruption(&self, severity: u8) -> Corruption {
        Corruption::new(self.family, severity, self.seed)
    }
}

/// `groups × variants` domains, group `g` using family `families[g]`.
/// Domain ids run group-major.
pub fn default_domains(families: &[CorruptionFamily], variants_per_group: usize, seed: u64) -> Vec<Domain> {
    let mut out = Vec::new();
    for (g, &family) in families.iter().enumerate() {
        for v in 0..variants_per_group.max(1) {
            out.push(Domain {
                id: out.len(),
                group: g,
                family,
                seed: rng::derive(seed, &[rng::tag("domain"), g as u64, v as u64]),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub setting: Setting,
    pub batch_size: usize,
    pub batches_per_domain: usize,
    pub severity: u8,
    pub cycles: usize,
    pub cyclic_mode: CyclicMode,
    pub gradual_batches_per_level: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            setting: Setting::Continual,
            batch_size: 64,
            batches_per_domain: 10,
            severity: 5,
            cycles: 2,
            cyclic_mode: CyclicMode::Protocol,
            gradual_batches_per_level: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPlan {
    pub domain_id: usize,
    pub batch_index: usize,
    pub severity: u8,
    /// Cycle for cyclic settings, phase for composites, 0 otherwise.
    pub cycle: usize,
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEvent {
    pub step: usize,
    pub domain_id: usize,
    pub group: usize,
    pub severity: u8,
    pub cycle: usize,
    pub reset: bool,
    pub x: Matrix,
    /// For metrics only; never passed to the adaptation engine.
    pub labels: Vec<usize>,
}

/// Reproducible description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescription {
    pub config: ScheduleConfig,
    pub task_seed: u64,
    pub domains: Vec<Domain>,
    /// Domain ids in order of first appearance.
    pub domain_order: Vec<usize>,
    pub n_events: usize,
}

/// The `(t−1) mod (K·r) mod K + 1` group index (1-based). Since `K` divides
/// `K·r`, it reduces to `(t−1) mod K + 1`.
pub fn cyclic_index(t: usize, k: usize, r: usize) -> usize {
    assert!(t >= 1 && k >= 1 && r >= 1, "cyclic_index needs t, K, r >= 1");
    ((t - 1) % (k * r)) % k + 1
}

fn groups_of(domains: &[Domain]) -> Vec<Vec<usize>> {
    let n_groups = domains.iter().map(|d| d.group + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); n_groups];
    for (i, d) in domains.iter().enumerate() {
        groups[d.group].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn pass(order: &[usize], cfg: &ScheduleConfig, cycle: usize, reset_on_boundary: bool) -> Vec<EventPlan> {
    let mut out = Vec::new();
    for (k, &d) in order.iter().enumerate() {
        for b in 0..cfg.batches_per_domain {
            out.push(EventPlan {
                domain_id: d,
                batch_index: b,
                severity: cfg.severity,
                cycle,
                reset: reset_on_boundary && k > 0 && b == 0,
            });
        }
    }
    out
}

/// Plans the event sequence. `ranking` (domain indices from easiest to
/// hardest) is required by the easy-to-hard settings.
pub fn plan(domains: &[Domain], cfg: &ScheduleConfig, ranking: Option<&[usize]>) -> Result<Vec<EventPlan>> {
    if domains.is_empty() {
        return Err(Error::Schedule("no domains".into()));
    }
    if cfg.batch_size < 2 || cfg.batches_per_domain == 0 {
        return Err(Error::Schedule("batch_size must be >= 2 and batches_per_domain >= 1".into()));
    }
    if cfg.severity == 0 || cfg.severity > MAX_SEVERITY {
        return Err(Error::Schedule(format!("severity {} not in 1..=5", cfg.severity)));
    }
    for (i, d) in domains.iter().enumerate() {
        if d.id != i {
            return Err(Error::Schedule(format!("domain at position {i} has id {}", d.id)));
        }
    }
    let natural: Vec<usize> = (0..domains.len()).collect();
    let mut rng = rng::stream(cfg.seed, &[rng::tag("schedule")]);
    let shuffled = |mut events: Vec<EventPlan>, rng: &mut rng::Rng, cycle: usize| {
        events.shuffle(rng);
        events.iter_mut().for_each(|e| {
            e.cycle = cycle;
            e.reset = false;
        });
        events
    };
    let events = match cfg.setting {
        Setting::Continual => pass(&natural, cfg, 0, false),
        Setting::Episodic => pass(&natural, cfg, 0, true),
        Setting::Mixed => shuffled(pass(&natural, cfg, 0, false), &mut rng, 0),
        Setting::Gradual => {
            let peak = cfg.severity;
            let ramp: Vec<u8> = (1..=peak).chain((1..peak).rev()).collect();
            let mut out = Vec::new();
            for &d in &natural {
                let mut b = 0;
                for &s in &ramp {
                    for _ in 0..cfg.gradual_batches_per_level.max(1) {
                        out.push(EventPlan {
                            domain_id: d,
                            batch_index: b % cfg.batches_per_domain,
                            severity: s,
                            cycle: 0,
                            reset: false,
                        });
                        b += 1;
                    }
                }
            }
            out
        }
        Setting::Cyclic => {
            if cfg.cycles == 0 {
                return Err(Error::Schedule("cyclic schedule needs cycles >= 1".into()));
            }
            let groups = groups_of(domains);
            match cfg.cyclic_mode {
                CyclicMode::Protocol => {
                    let order: Vec<usize> = groups.iter().flatten().copied().collect();
                    (0..cfg.cycles).flat_map(|c| pass(&order, cfg, c, false)).collect()
                }
                CyclicMode::Dwell { batches_per_group } => {
                    if batches_per_group == 0 {
                        return Err(Error::Schedule("dwell needs batches_per_group >= 1".into()));
                    }
                    let k = groups.len();
                    let per_group: Vec<Vec<EventPlan>> =
                        groups.iter().map(|g| pass(g, cfg, 0, false)).collect();
                    let mut cursor = vec![0usize; k];
                    let total = cfg.cycles * k * batches_per_group;
                    (1..=total)
                        .map(|t| {
                            let g = ((t - 1) / batches_per_group) % k;
                            let list = &per_group[g];
                            let mut e = list[cursor[g] % list.len()];
                            cursor[g] += 1;
                            e.cycle = (t - 1) / (k * batches_per_group);
                            e
                        })
                        .collect()
                }
            }
        }
        Setting::CrossGroup => {
            let groups = groups_of(domains);
            let depth = groups.iter().map(Vec::len).max().unwrap_or(0);
            let order: Vec<usize> = (0..depth)
                .flat_map(|v| groups.iter().filter_map(move |g| g.get(v).copied()))
                .collect();
            pass(&order, cfg, 0, false)
        }
        Setting::Easy2Hard | Setting::Hard2Easy => {
            let ranking = ranking.ok_or_else(|| {
                Error::Schedule(format!("{:?} needs a source-error ranking", cfg.setting))
            })?;
            let mut sorted = ranking.to_vec();
            sorted.sort_unstable();
            if sorted != natural {
                return Err(Error::Schedule("ranking must be a permutation of the domains".into()));
            }
            let mut order = ranking.to_vec();
            if cfg.setting == Setting::Hard2Easy {
                order.reverse();
            }
            pass(&order, cfg, 0, false)
        }
        Setting::MixedAfterContinual => {
            let mut out = pass(&natural, cfg, 0, false);
            out.extend(shuffled(pass(&natural, cfg, 0, false), &mut rng, 1));
            out
        }
        Setting::ContinualAfterMixed => {
            let mut out = shuffled(pass(&natural, cfg, 0, false), &mut rng, 0);
            out.extend(pass(&natural, cfg, 1, false));
            out
        }
    };
    Ok(events)
}

/// Lazily materialized event stream over a task.
pub struct Schedule<'a> {
    task: &'a SyntheticTask,
    domains: Vec<Domain>,
    config: ScheduleConfig,
    events: Vec<EventPlan>,
    pools: Vec<Option<LabeledSet>>,
    pos: usize,
}

impl<'a> Schedule<'a> {
    pub fn new(task: &'a SyntheticTask, domains: Vec<Domain>, config: ScheduleConfig, ranking: Option<&[usize]>) -> Result<Self> {
        let events = plan(&domains, &config, ranking)?;
        Ok(Schedule { task, pools: vec![None; domains.len()], domains, config, events, pos: 0 })
    }

    pub fn events(&self) -> &[EventPlan] {
        &self.events
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn describe(&self) -> ScheduleDescription {
        let mut order = Vec::new();
        for e in &self.events {
            if !order.contains(&e.domain_id) {
                order.push(e.domain_id);
            }
        }
        ScheduleDescription {
            config: self.config.clone(),
            task_seed: self.task.config.seed,
            domains: self.domains.clone(),
            domain_order: order,
            n_events: self.events.len(),
        }
    }

    fn pool(&mut self, domain: usize) -> &LabeledSet {
        let n = self.config.batches_per_domain * self.config.batch_size;
        let task = self.task;
        self.pools[domain].get_or_insert_with(|| domain_stream_pool(task, domain, n))
    }

    /// Materializes one planned event.
    pub fn materialize(&mut self, step: usize, e: EventPlan) -> Result<StreamEvent> {
        let d = *self
            .domains
            .get(e.domain_id)
            .ok_or_else(|| Error::Schedule(format!("unknown domain {}", e.domain_id)))?;
        let bs = self.config.batch_size;
        let clean = self.pool(e.domain_id).slice(e.batch_index * bs, (e.batch_index + 1) * bs);
        let x = corrupt_batch(&clean.x, &d, e.severity, e.batch_index)?;
        Ok(StreamEvent {
            step,
            domain_id: e.domain_id,
            group: d.group,
            severity: e.severity,
            cycle: e.cycle,
            reset: e.reset,
            x,
            labels: clean.y,
        })
    }

    /// The full (corrupted) stream data of one domain at `severity`.
    pub fn domain_data(&mut self, domain: usize, severity: u8) -> Result<LabeledSet> {
        let d = *self
            .domains
            .get(domain)
            .ok_or_else(|| Error::Schedule(format!("unknown domain {domain}")))?;
        let bs = self.config.batch_size;
        let pool = self.pool(domain).clone();
        let mut xs = Vec::new();
        for b in 0..self.config.batches_per_domain {
            let clean = pool.slice(b * bs, (b + 1) * bs);
            xs.push(corrupt_batch(&clean.x, &d, severity, b)?);
        }
        let refs: Vec<&Matrix> = xs.iter().collect();
        Ok(LabeledSet { x: Matrix::vstack(&refs)?, y: pool.y })
    }
}

impl Iterator for Schedule<'_> {
    type Item = Result<StreamEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = *self.events.get(self.pos)?;
        let step = self.pos;
        self.pos += 1;
        Some(self.materialize(step, e))
    }
}

/// Clean samples backing a domain's stream batches.
pub fn domain_stream_pool(task: &SyntheticTask, domain: usize, n: usize) -> LabeledSet {
    task.sample(n, &[rng::tag("stream"), domain as u64])
}

fn corrupt_batch(x: &Matrix, d: &Domain, severity: u8, batch_index: usize) -> Result<Matrix> {
    let mut r = rng::stream(d.seed, &[rng::tag("batch-noise"), severity as u64, batch_index as u64]);
    corrupt(x, &d.corruption(severity), &mut r)
}

/// Held-out evaluation set of a domain: the task's clean evaluation inputs
/// under the domain's corruption.
pub fn domain_eval_set(task: &SyntheticTask, domain: &Domain, severity: u8) -> Result<LabeledSet> {
    let mut r = rng::stream(domain.seed, &[rng::tag("eval-noise"), severity as u64]);
    Ok(LabeledSet {
        x: corrupt(&task.clean_eval.x, &domain.corruption(severity), &mut r)?,
        y: task.clean_eval.y.clone(),
    })
}
