//! Finite-difference suite over every objective and the network itself.
//!
//! Each check draws fresh random inputs per seed, compares the analytic
//! gradient against central differences and keeps the worst scalar.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{t2_loss_and_grads, T2Batch};
use crate::error::{Error, Result};
use crate::losses::{contrastive, im_loss, mse_proto, sce, ContrastiveBatch, LossWeights};
use crate::numnet::{
    backward, check_matrix, finite_diff_check, forward, softmax, FdReport, Matrix, NetworkParams, NetworkSpec,
    ParamGrads, StatsMode,
};
use crate::par::{self, Exec};
use crate::rng;
use crate::trio::ModelTrio;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Sce,
    Contrastive,
    Mse,
    Im,
    T2Objective,
    Network,
}

impl CheckKind {
    pub const ALL: [CheckKind; 6] = [
        CheckKind::Sce,
        CheckKind::Contrastive,
        CheckKind::Mse,
        CheckKind::Im,
        CheckKind::T2Objective,
        CheckKind::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Sce => "sce",
            CheckKind::Contrastive => "contrastive",
            CheckKind::Mse => "mse",
            CheckKind::Im => "im",
            CheckKind::T2Objective => "t2_objective",
            CheckKind::Network => "network",
        }
    }

    pub fn parse(s: &str) -> Option<CheckKind> {
        CheckKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Deliberate corruption of one analytic gradient scalar, for negative
/// controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub check: CheckKind,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub exec: Exec,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { eps: DEFAULT_EPS, tolerance: DEFAULT_TOLERANCE, seeds: DEFAULT_SEEDS, exec: Exec::Parallel, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// Path of the worst scalar, e.g. `t2.layers[0].gamma[3]`.
    pub worst_leaf: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

struct Probe {
    report: FdReport,
    leaf: String,
}

fn randn<R: Rng>(rows: usize, cols: usize, scale: f64, r: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, r))
}

fn matrix_leaf(arg: &str, m: &Matrix, idx: usize) -> String {
    format!("{arg}[{},{}]", idx / m.cols().max(1), idx % m.cols().max(1))
}

fn inject(kind: CheckKind, fault: Option<Fault>, grad: &mut [f64]) {
    if let Some(f) = fault.filter(|f| f.check == kind) {
        if let Some(g) = grad.get_mut(f.index) {
            *g += f.delta;
        }
    }
}

fn inject_params(kind: CheckKind, fault: Option<Fault>, grads: &mut ParamGrads) {
    let Some(f) = fault.filter(|f| f.check == kind) else { return };
    let mut off = 0;
    for (_, leaf) in grads.leaves_mut() {
        if f.index < off + leaf.len() {
            leaf[f.index - off] += f.delta;
            return;
        }
        off += leaf.len();
    }
}

fn check_one(kind: CheckKind, seed: u64, eps: f64, fault: Option<Fault>) -> Result<Probe> {
    let mut r = rng::stream(seed, &[rng::tag("gradsuite"), rng::tag(kind.name())]);
    let probe = |report: FdReport, leaf: String| Ok(Probe { report, leaf });
    match kind {
        CheckKind::Sce => {
            let p = softmax(&randn(6, 5, 1.5, &mut r))?;
            let q = randn(6, 5, 1.5, &mut r);
            let mut g = sce(&p, &q)?.grad;
            inject(kind, fault, g.as_mut_slice());
            let rep = check_matrix(&q, &g, |m| Ok(sce(&p, m)?.value), eps)?;
            let leaf = matrix_leaf("q_logits", &q, rep.worst_index);
            probe(rep, leaf)
        }
        CheckKind::Contrastive => {
            let (n, e) = (4, 6);
            let emb = randn(3 * n, e, 1.0, &mut r);
            let tau = r.random_range(0.1..0.5);
            let split = |m: &Matrix| -> Result<ContrastiveBatch> {
                let rows = |a: usize| (a * n..(a + 1) * n).collect::<Vec<_>>();
                ContrastiveBatch::new(&m.select_rows(&rows(0)), &m.select_rows(&rows(1)), &m.select_rows(&rows(2)), tau)
            };
            let mut g = contrastive(&split(&emb)?)?.grad;
            inject(kind, fault, g.as_mut_slice());
            let rep = check_matrix(&emb, &g, |m| Ok(contrastive(&split(m)?)?.value), eps)?;
            let leaf = matrix_leaf("embeddings", &emb, rep.worst_index);
            probe(rep, leaf)
        }
        CheckKind::Mse => {
            let f = randn(5, 6, 1.0, &mut r);
            let p = randn(5, 6, 1.0, &mut r);
            let mut g = mse_proto(&f, &p)?.grad;
            inject(kind, fault, g.as_mut_slice());
            let rep = check_matrix(&f, &g, |m| Ok(mse_proto(m, &p)?.value), eps)?;
            let leaf = matrix_leaf("features", &f, rep.worst_index);
            probe(rep, leaf)
        }
        CheckKind::Im => {
            let l = randn(8, 5, 1.5, &mut r);
            let mut g = im_loss(&l)?.grad;
            inject(kind, fault, g.as_mut_slice());
            let rep = check_matrix(&l, &g, |m| Ok(im_loss(m)?.value), eps)?;
            let leaf = matrix_leaf("logits", &l, rep.worst_index);
            probe(rep, leaf)
        }
        CheckKind::T2Objective => {
            let spec = NetworkSpec::bn_mlp(6, &[8], 4)?;
            let trio = ModelTrio::new(spec.clone(), NetworkParams::init(&spec, r.random()), r.random())?;
            let n = 7;
            let x = randn(n, 6, 1.0, &mut r);
            let xv = x.add(&randn(n, 6, 0.1, &mut r))?;
            let e = spec.feature_dim();
            let mut cl_rows: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
            if cl_rows.is_empty() {
                cl_rows.push(0);
            }
            let mse_rows: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
            let cl_p = randn(cl_rows.len(), e, 1.0, &mut r);
            let mse_p = randn(mse_rows.len(), e, 1.0, &mut r);
            let w = LossWeights { cl: r.random_range(0.5..1.5), mse: r.random_range(0.5..1.5), im: r.random_range(0.5..1.5) };
            let tau = r.random_range(0.2..0.5);
            let batch = T2Batch {
                x: &x,
                x_view: &xv,
                cl_rows: &cl_rows,
                cl_prototypes: &cl_p,
                mse_rows: &mse_rows,
                mse_prototypes: &mse_p,
            };
            let (ps, pp) = (&trio.projector_spec, &trio.projector);
            let mut l = t2_loss_and_grads(&spec, &trio.t2, ps, pp, &batch, w, tau)?;
            inject_params(kind, fault, &mut l.grads);
            let a = finite_diff_check(
                &trio.t2,
                &l.grads,
                |p| Ok(t2_loss_and_grads(&spec, p, ps, pp, &batch, w, tau)?.value),
                eps,
                Exec::Sequential,
            )?;
            let b = finite_diff_check(
                pp,
                &l.projector_grads,
                |p| Ok(t2_loss_and_grads(&spec, &trio.t2, ps, p, &batch, w, tau)?.value),
                eps,
                Exec::Sequential,
            )?;
            if a.max_rel_error >= b.max_rel_error {
                let leaf = format!("t2.{}", trio.t2.scalar_label(a.worst_index));
                probe(a, leaf)
            } else {
                let leaf = format!("projector.{}", pp.scalar_label(b.worst_index));
                probe(b, leaf)
            }
        }
        CheckKind::Network => {
            let spec = NetworkSpec::bn_mlp(5, &[7, 6], 4)?;
            let mut params = NetworkParams::init(&spec, r.random());
            for bn in params.layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
                bn.gamma.iter_mut().for_each(|g| *g += 0.3 * r.random::<f64>());
                bn.beta.iter_mut().for_each(|b| *b += 0.3 * (r.random::<f64>() - 0.5));
                bn.running_mean.iter_mut().for_each(|m| *m = 0.5 * (r.random::<f64>() - 0.5));
                bn.running_var.iter_mut().for_each(|v| *v = 0.5 + r.random::<f64>());
            }
            let mode = if seed.is_multiple_of(2) { StatsMode::Batch } else { StatsMode::Running };
            let x = randn(6, 5, 1.0, &mut r);
            let gl = randn(6, 4, 1.0, &mut r);
            let gf = randn(6, spec.feature_dim(), 1.0, &mut r);
            let loss = |p: &NetworkParams| -> Result<f64> {
                let out = forward(&spec, p, &x, mode)?;
                let dot = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| u * v).sum::<f64>();
                Ok(dot(&out.logits, &gl) + dot(&out.features, &gf))
            };
            let out = forward(&spec, &params, &x, mode)?;
            let mut g = backward(&spec, &params, &out.cache, &gl, Some(&gf))?;
            inject_params(kind, fault, &mut g);
            let rep = finite_diff_check(&params, &g, loss, eps, Exec::Sequential)?;
            let leaf = params.scalar_label(rep.worst_index);
            probe(rep, leaf)
        }
    }
}

/// Runs every check over `cfg.seeds` seeds.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    run_checks(cfg, &CheckKind::ALL)
}

pub fn run_checks(cfg: &SuiteConfig, kinds: &[CheckKind]) -> Result<SuiteReport> {
    if cfg.seeds == 0 {
        return Err(Error::InvalidConfig("gradient suite needs at least one seed".into()));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidConfig("gradient tolerance must be positive".into()));
    }
    let jobs: Vec<(CheckKind, u64)> =
        kinds.iter().flat_map(|&k| (0..cfg.seeds as u64).map(move |s| (k, s))).collect();
    let probes = par::map_slice(cfg.exec, &jobs, |&(k, s)| check_one(k, s, cfg.eps, cfg.fault));
    let mut results: Vec<CheckResult> = Vec::new();
    for (&(kind, seed), p) in jobs.iter().zip(probes) {
        let p = p?;
        let worse = match results.last() {
            Some(r) if r.check == kind => p.report.max_rel_error > r.max_rel_error,
            _ => {
                results.push(CheckResult {
                    check: kind,
                    seeds: cfg.seeds,
                    max_rel_error: f64::NEG_INFINITY,
                    worst_seed: 0,
                    worst_leaf: String::new(),
                    analytic: 0.0,
                    numeric: 0.0,
                    passed: true,
                });
                true
            }
        };
        let r = results.last_mut().expect("pushed above");
        if worse {
            r.max_rel_error = p.report.max_rel_error;
            r.worst_seed = seed;
            r.worst_leaf = p.leaf;
            r.analytic = p.report.analytic;
            r.numeric = p.report.numeric;
        }
        r.passed = r.max_rel_error < cfg.tolerance;
    }
    Ok(SuiteReport { eps: cfg.eps, tolerance: cfg.tolerance, results })
}
