use std::path::{Path, PathBuf};

use anyhow::Context;
use slomo_core::gradsuite::{run_suite, CheckKind, Fault, SuiteConfig, SuiteReport};
use slomo_core::par::{self, Exec};
use slomo_core::runner::{rank_domains, run, Prepared, RunOutcome};
use slomo_core::streams::CorruptionFamily;

use crate::config::{resolve_out_dir, ConfigError, FileConfig};
use crate::output;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numeric blow-up at step {step} ({what}); last good step: {}", .last_good.map_or("none".to_string(), |s| s.to_string()))]
    BlowUp { step: usize, last_good: Option<usize>, what: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::BlowUp { .. } => 3,
            CliError::GradCheck(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<slomo_core::Error> for CliError {
    fn from(e: slomo_core::Error) -> Self {
        match e {
            slomo_core::Error::NumericBlowUp { step, last_good, what } => CliError::BlowUp { step, last_good, what },
            other => CliError::Other(other.into()),
        }
    }
}

/// Runs `f` over `items` on `jobs` threads.
fn fan_out<S: Sync, T: Send>(items: &[S], jobs: usize, f: impl Fn(&S) -> T + Sync + Send) -> anyhow::Result<Vec<T>> {
    if jobs <= 1 {
        return Ok(par::map_slice(Exec::Sequential, items, f));
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().context("building thread pool")?;
        Ok(pool.install(|| par::map_slice(Exec::Parallel, items, f)))
    }
    #[cfg(not(feature = "parallel"))]
    Ok(par::map_slice(Exec::Sequential, items, f))
}

fn with_seed(cfg: &FileConfig, seed: u64) -> FileConfig {
    FileConfig { task_seed: seed, source_seed: seed, schedule_seed: seed, adaptation_seed: seed, ..cfg.clone() }
}

fn write_run(dir: &Path, cfg: &FileConfig, outcome: &RunOutcome) -> anyhow::Result<()> {
    let ctx = || format!("writing artifacts to {}", dir.display());
    output::write(dir, output::STEPS_FILE, &output::steps_csv(&outcome.records)).with_context(ctx)?;
    output::write(dir, output::SUMMARY_FILE, &output::summary_json(cfg, outcome)).with_context(ctx)?;
    if cfg.probe_forgetting {
        output::write(dir, output::FORGETTING_FILE, &output::forgetting_csv(&outcome.report)).with_context(ctx)?;
    }
    Ok(())
}

/// `slomo run`. With seed overrides every seed gets its own `seed-<s>`
/// subdirectory.
pub fn run_command(config: &Path, out: Option<&Path>, seeds: Option<&[u64]>, jobs: usize) -> Result<PathBuf, CliError> {
    let file = FileConfig::load(config)?;
    let dir = resolve_out_dir(out, &file);
    let runs: Vec<(PathBuf, FileConfig)> = match seeds {
        None => vec![(dir.clone(), file)],
        Some(list) => list.iter().map(|&s| (dir.join(format!("seed-{s}")), with_seed(&file, s))).collect(),
    };
    let results = fan_out(&runs, jobs, |(d, c)| -> Result<(), CliError> {
        let outcome = run(&c.to_run())?;
        write_run(d, c, &outcome)?;
        println!(
            "{}: overall error {} over {} steps -> {}",
            c.variant_name(),
            output::float(outcome.report.overall_error),
            outcome.records.len(),
            d.display()
        );
        Ok(())
    })?;
    results.into_iter().collect::<Result<Vec<()>, CliError>>()?;
    Ok(dir)
}

/// `slomo compare`: runs both configs and reports `b − a` error deltas.
pub fn compare_command(a: &Path, b: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let fa = FileConfig::load(a)?;
    let fb = FileConfig::load(b)?;
    let ra = run(&fa.to_run())?;
    let rb = run(&fb.to_run())?;
    let (sa, sb) = (&ra.schedule, &rb.schedule);
    if sa.domains != sb.domains || sa.domain_order != sb.domain_order || sa.n_events != sb.n_events {
        return Err(CliError::Other(anyhow::anyhow!(
            "schedules differ: {} ({:?}, domains {:?}, {} events) vs {} ({:?}, domains {:?}, {} events)",
            a.display(),
            sa.config.setting,
            sa.domain_order,
            sa.n_events,
            b.display(),
            sb.config.setting,
            sb.domain_order,
            sb.n_events
        )));
    }
    let table = output::compare_csv(&ra.report, &rb.report);
    let dir = resolve_out_dir(out, &fa);
    output::write(&dir, output::COMPARE_FILE, &table).with_context(|| format!("writing {}", dir.display()))?;
    Ok(table)
}

/// `slomo rank`: frozen-source error per domain, easiest first.
pub fn rank_command(config: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let file = FileConfig::load(config)?;
    let cfg = file.to_run();
    let prep = Prepared::new(&cfg)?;
    let ranking = rank_domains(&prep, &cfg, Exec::Parallel)?;
    let families: Vec<&str> = (0..CorruptionFamily::ALL.len() * cfg.variants_per_group)
        .map(|d| CorruptionFamily::ALL[d / cfg.variants_per_group].name())
        .collect();
    let table = output::rank_csv(&ranking, &families);
    let dir = resolve_out_dir(out, &file);
    output::write(&dir, output::RANK_FILE, &table).with_context(|| format!("writing {}", dir.display()))?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub eps: f64,
    pub seeds: usize,
    pub jobs: usize,
    pub inject_fault: Option<String>,
}

/// `slomo gradcheck`. Prints one line per check; fails naming the worst
/// leaf of every failing check.
pub fn gradcheck_command(args: &GradcheckArgs) -> Result<SuiteReport, CliError> {
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(Fault {
            check: CheckKind::parse(name).ok_or_else(|| anyhow::anyhow!("unknown check `{name}`"))?,
            index: 0,
            delta: 1.0,
        }),
    };
    let cfg = SuiteConfig {
        eps: args.eps,
        seeds: args.seeds,
        exec: if args.jobs > 1 { Exec::Parallel } else { Exec::Sequential },
        fault,
        ..SuiteConfig::default()
    };
    println!("gradcheck eps={:e} tolerance={:e} seeds={}", cfg.eps, cfg.tolerance, cfg.seeds);
    let report = fan_out(&[()], args.jobs, |_| run_suite(&cfg))?.pop().expect("one job")?;
    for r in &report.results {
        println!(
            "{:<13} max_rel_error={:.3e} worst={} seed={} {}",
            r.check.name(),
            r.max_rel_error,
            r.worst_leaf,
            r.worst_seed,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        let names: Vec<String> = report.failures().map(|r| format!("{} at {}", r.check.name(), r.worst_leaf)).collect();
        return Err(CliError::GradCheck(names.join(", ")));
    }
    Ok(report)
}

impl FileConfig {
    fn variant_name(&self) -> String {
        serde_json::to_value(self.variant).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }
}
