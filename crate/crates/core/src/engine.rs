//! The per-batch adaptation step: predict with the pre-update models, then
//! update the prototype store, the slow teacher, the student and the fast
//! teacher, in that order.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{contrastive, im_loss, mse_proto, sce, t2_objective, ContrastiveBatch, LossResult, LossWeights};
use crate::numnet::{
    backward, backward_with_input, commit_running_stats, forward, softmax, Matrix, NetworkParams, NetworkSpec,
    ParamGrads, StatsMode,
};
use crate::protostore::{InsertOutcome, PrototypeStore};
use crate::reliability::{plpd, pseudo_labels, row_entropies, select_disagreement, Augmentation};
use crate::rng;
use crate::trio::{ema_update, MaskMode, ModelTrio, TrainableMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// EMA retention of the fast teacher.
    pub alpha: f64,
    /// Entropy threshold.
    pub sigma: f64,
    /// Minimum PLPD for queue admission.
    pub delta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_cl: f64,
    pub lambda_mse: f64,
    pub lambda_im: f64,
    /// Prior smoothing.
    pub gamma: f64,
    pub queue_capacity: usize,
    pub evict_interval: u64,
    pub restore_prob: f64,
    pub lr_student: f64,
    pub lr_t2: f64,
    pub student_mode: MaskMode,
    /// Fraction of pseudo-labels flipped to a random wrong class before
    /// they reach the store.
    pub pl_noise_ratio: f64,
    pub batch_size: usize,
    /// Std of the jitter producing the contrastive view.
    pub view_jitter: f64,
    pub plpd_segments: usize,
    pub plpd_occlusion: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig::for_classes(10)
    }
}

impl AdaptationConfig {
    /// Defaults with `gamma = 1 / num_classes`.
    pub fn for_classes(num_classes: usize) -> Self {
        AdaptationConfig {
            alpha: 0.99,
            sigma: 0.5,
            delta: 0.2,
            tau: 0.1,
            lambda_cl: 1.0,
            lambda_mse: 1.0,
            lambda_im: 1.0,
            gamma: 1.0 / num_classes.max(1) as f64,
            queue_capacity: 10,
            evict_interval: 50,
            restore_prob: 0.01,
            lr_student: 1e-2,
            lr_t2: 1e-2,
            student_mode: MaskMode::BnOnly,
            pl_noise_ratio: 0.0,
            batch_size: 64,
            view_jitter: 0.1,
            plpd_segments: 4,
            plpd_occlusion: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !unit(self.alpha) {
            return bad(format!("alpha {} not in [0, 1]", self.alpha));
        }
        for (name, v) in [("sigma", self.sigma), ("delta", self.delta), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_mse", self.lambda_mse),
            ("lambda_im", self.lambda_im),
            ("gamma", self.gamma),
            ("lr_student", self.lr_student),
            ("lr_t2", self.lr_t2),
            ("view_jitter", self.view_jitter),
        ] {
            if !nonneg(v) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("restore_prob", self.restore_prob),
            ("pl_noise_ratio", self.pl_noise_ratio),
            ("plpd_occlusion", self.plpd_occlusion),
        ] {
            if !unit(v) {
                return bad(format!("{name} {v} not in [0, 1]"));
            }
        }
        if self.queue_capacity == 0 || self.evict_interval == 0 || self.plpd_segments == 0 {
            return bad("queue_capacity, evict_interval and plpd_segments must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { cl: self.lambda_cl, mse: self.lambda_mse, im: self.lambda_im }
    }

    pub fn plpd_augmentations(&self) -> Vec<Augmentation> {
        vec![
            Augmentation::SegmentShuffle { segments: self.plpd_segments },
            Augmentation::CenterOcclusion { fraction: self.plpd_occlusion },
        ]
    }

    /// A store matching this configuration.
    pub fn new_store(&self, num_classes: usize, feature_dim: usize) -> Result<PrototypeStore> {
        PrototypeStore::new(num_classes, feature_dim, self.queue_capacity, self.evict_interval, self.sigma, self.delta)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub sce: f64,
    pub cl: f64,
    pub mse: f64,
    pub im: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertCounts {
    pub inserted: usize,
    pub replaced: usize,
    pub rejected_criteria: usize,
    pub rejected_full: usize,
}

impl InsertCounts {
    fn record(&mut self, o: InsertOutcome) {
        match o {
            InsertOutcome::Inserted => self.inserted += 1,
            InsertOutcome::ReplacedMaxEntropy => self.replaced += 1,
            InsertOutcome::RejectedCriteria => self.rejected_criteria += 1,
            InsertOutcome::RejectedFullHigherEntropy => self.rejected_full += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.inserted + self.replaced + self.rejected_criteria + self.rejected_full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub batch_size: usize,
    pub losses: StepLosses,
    /// Size of the teacher-disagreement set.
    pub n_selected: usize,
    /// Selected samples with a nearest prototype whose projections are
    /// nonzero (contrastive rows).
    pub n_contrastive: usize,
    /// Selected samples whose pseudo-label class has a prototype.
    pub n_mse: usize,
    pub queue_sizes: Vec<usize>,
    pub inserts: InsertCounts,
    pub evicted: usize,
    pub restored: usize,
    pub flipped_labels: usize,
    /// Error of the returned prediction, filled in by callers holding labels.
    pub batch_error: Option<f64>,
}

impl StepDiagnostics {
    pub fn queue_total(&self) -> usize {
        self.queue_sizes.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub probs: Matrix,
    pub labels: Vec<usize>,
    /// Smoothed batch prior used for the correction.
    pub prior: Vec<f64>,
}

/// Intermediates of one step, all from the pre-update models.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub probs_t1: Matrix,
    pub probs_t2: Matrix,
    pub probs_student: Matrix,
    pub pseudo_labels: Vec<usize>,
    /// Labels after the noise knob; these enter the store and the MSE term.
    pub store_labels: Vec<usize>,
    pub entropies: Vec<f64>,
    pub plpd: Vec<f64>,
    pub selected: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub prediction: EnsemblePrediction,
    pub diagnostics: StepDiagnostics,
    pub trace: StepTrace,
}

/// Sum of two probability matrices renormalized per row.
pub fn ensemble(probs_s: &Matrix, probs_t2: &Matrix) -> Result<Matrix> {
    let sum = probs_s.add(probs_t2)?;
    let mut out = sum;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let z: f64 = row.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::NonFinite("ensemble row sum"));
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Reweights rows by the smoothed batch prior `(p̂ + γ) / (1 + γ·C)` and
/// renormalizes. Returns the corrected probabilities and the prior.
pub fn prior_correct(probs: &Matrix, gamma: f64) -> Result<(Matrix, Vec<f64>)> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} must be >= 0")));
    }
    if probs.rows() == 0 {
        return Err(Error::BatchTooSmall { context: "prior_correct", needed: 1, got: 0 });
    }
    let c = probs.cols() as f64;
    let prior: Vec<f64> = if gamma.is_infinite() {
        vec![1.0 / c; probs.cols()]
    } else {
        probs.col_mean().iter().map(|p| (p + gamma) / (1.0 + gamma * c)).collect()
    };
    let mut out = probs.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        row.iter_mut().zip(&prior).for_each(|(v, p)| *v *= p);
        let z: f64 = row.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::NonFinite("prior-corrected row sum"));
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok((out, prior))
}

/// Inputs of the slow-teacher objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct T2Batch<'a> {
    pub x: &'a Matrix,
    /// Augmented view of `x`, row-aligned.
    pub x_view: &'a Matrix,
    /// Rows entering the contrastive term and their nearest prototypes.
    pub cl_rows: &'a [usize],
    pub cl_prototypes: &'a Matrix,
    /// Rows entering the MSE term and their pseudo-label prototypes.
    pub mse_rows: &'a [usize],
    pub mse_prototypes: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2Loss {
    pub value: f64,
    pub cl: f64,
    pub mse: f64,
    pub im: f64,
    /// Contrastive triplets that entered the loss.
    pub n_contrastive: usize,
    pub grads: ParamGrads,
    pub projector_grads: ParamGrads,
}

/// Weighted contrastive + MSE + IM objective of the slow teacher and its
/// gradients with respect to the teacher and the projector. Pure: both
/// forwards use batch statistics and nothing is committed. Prototypes are
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn t2_loss_and_grads(
    spec: &NetworkSpec,
    t2: &NetworkParams,
    projector_spec: &NetworkSpec,
    projector: &NetworkParams,
    batch: &T2Batch<'_>,
    weights: LossWeights,
    tau: f64,
) -> Result<T2Loss> {
    let out = forward(spec, t2, batch.x, StatsMode::Batch)?;
    let (n, e) = out.features.shape();
    let im = im_loss(&out.logits)?;
    let mut grad_features = Matrix::zeros(n, e);
    let mut projector_grads = ParamGrads::zeros_like(projector);

    let mse = if batch.mse_rows.is_empty() {
        LossResult::zero(0, 0)
    } else {
        let l = mse_proto(&out.features.select_rows(batch.mse_rows), batch.mse_prototypes)?;
        for (k, &i) in batch.mse_rows.iter().enumerate() {
            for (g, &v) in grad_features.row_mut(i).iter_mut().zip(l.grad.row(k)) {
                *g += weights.mse * v;
            }
        }
        l
    };

    let mut view_grads = None;
    let mut n_contrastive = 0;
    let cl = if batch.cl_rows.is_empty() {
        LossResult::zero(0, 0)
    } else {
        if batch.x_view.shape() != batch.x.shape() {
            return Err(Error::shape(
                "t2 view batch",
                format!("{:?}", batch.x.shape()),
                format!("{:?}", batch.x_view.shape()),
            ));
        }
        let view = forward(spec, t2, batch.x_view, StatsMode::Batch)?;
        let m = batch.cl_rows.len();
        let stacked = Matrix::vstack(&[
            &out.features.select_rows(batch.cl_rows),
            &view.features.select_rows(batch.cl_rows),
            batch.cl_prototypes,
        ])?;
        let proj = forward(projector_spec, projector, &stacked, StatsMode::Running)?;
        let z = &proj.logits;
        // a dead ReLU projector can map a row to exactly zero; such triplets
        // have no direction to contrast and sit out this step
        let used: Vec<usize> =
            (0..m).filter(|&k| (0..3).all(|a| z.row(a * m + k).iter().any(|&v| v != 0.0))).collect();
        if used.is_empty() {
            LossResult::zero(0, 0)
        } else {
            n_contrastive = used.len();
            let rows = |a: usize| used.iter().map(|&k| a * m + k).collect::<Vec<_>>();
            let cb =
                ContrastiveBatch::new(&z.select_rows(&rows(0)), &z.select_rows(&rows(1)), &z.select_rows(&rows(2)), tau)?;
            let l = contrastive(&cb)?;
            let u = used.len();
            let mut g_z = Matrix::zeros(3 * m, z.cols());
            for a in 0..3 {
                for (j, &k) in used.iter().enumerate() {
                    for (g, &v) in g_z.row_mut(a * m + k).iter_mut().zip(l.grad.row(a * u + j)) {
                        *g = weights.cl * v;
                    }
                }
            }
            let (pg, g_in) = backward_with_input(projector_spec, projector, &proj.cache, &g_z, None)?;
            projector_grads = pg;
            let mut g_view = Matrix::zeros(n, e);
            for (k, &i) in batch.cl_rows.iter().enumerate() {
                for (g, &v) in grad_features.row_mut(i).iter_mut().zip(g_in.row(k)) {
                    *g += v;
                }
                g_view.row_mut(i).copy_from_slice(g_in.row(m + k));
            }
            let zero_logits = Matrix::zeros(n, spec.num_classes);
            view_grads = Some(backward(spec, t2, &view.cache, &zero_logits, Some(&g_view))?);
            l
        }
    };

    let obj = t2_objective(&cl, &mse, &im, weights)?;
    let mut grads = backward(spec, t2, &out.cache, &obj.grad_im, Some(&grad_features))?;
    if let Some(v) = view_grads {
        grads.accumulate(&v)?;
    }
    Ok(T2Loss { value: obj.value, cl: cl.value, mse: mse.value, im: im.value, n_contrastive, grads, projector_grads })
}

/// Flips exactly `round(ratio · n)` labels, chosen uniformly, to a uniformly
/// drawn different class.
pub fn flip_labels<R: Rng + ?Sized>(labels: &[usize], num_classes: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let mut out = labels.to_vec();
    let k = ((ratio * labels.len() as f64).round() as usize).min(labels.len());
    if k == 0 || num_classes < 2 {
        return out;
    }
    for i in index::sample(rng, labels.len(), k) {
        let shift = rng.random_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    out
}

/// [`adapt_step_traced`] without the trace.
pub fn adapt_step<R: Rng + ?Sized>(
    trio: &mut ModelTrio,
    store: &mut PrototypeStore,
    x: &Matrix,
    cfg: &AdaptationConfig,
    rng: &mut R,
) -> Result<(EnsemblePrediction, StepDiagnostics)> {
    let out = adapt_step_traced(trio, store, x, cfg, rng)?;
    Ok((out.prediction, out.diagnostics))
}

/// One online step. The returned prediction comes from the models as they
/// were before this batch; all updates happen afterwards.
pub fn adapt_step_traced<R: Rng + ?Sized>(
    trio: &mut ModelTrio,
    store: &mut PrototypeStore,
    x: &Matrix,
    cfg: &AdaptationConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    cfg.validate()?;
    let spec = trio.spec.clone();
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall { context: "adapt_step", needed: 2, got: x.rows() });
    }
    if store.num_classes() != spec.num_classes || store.feature_dim() != spec.feature_dim() {
        return Err(Error::shape(
            "adapt_step store",
            format!("{}x{}", spec.num_classes, spec.feature_dim()),
            format!("{}x{}", store.num_classes(), store.feature_dim()),
        ));
    }
    let n = x.rows();
    let noise_seed: u64 = rng.random();

    let t1_out = forward(&spec, &trio.t1, x, StatsMode::Batch)?;
    let t2_out = forward(&spec, &trio.t2, x, StatsMode::Batch)?;
    let s_out = forward(&spec, &trio.student, x, StatsMode::Batch)?;
    let probs_t1 = softmax(&t1_out.logits)?;
    let probs_t2 = softmax(&t2_out.logits)?;
    let probs_s = softmax(&s_out.logits)?;

    let (probs, prior) = prior_correct(&ensemble(&probs_s, &probs_t2)?, cfg.gamma)?;
    let prediction = EnsemblePrediction { labels: probs.argmax_rows(), probs, prior };

    // (1) reliability of the fast teacher's pseudo-labels
    let (labels, _) = pseudo_labels(&probs_t1);
    let entropies = row_entropies(&probs_t1);
    let t1 = &trio.t1;
    let sensitivity = plpd(
        |xa: &Matrix| softmax(&forward(&spec, t1, xa, StatsMode::Batch)?.logits),
        x,
        &labels,
        &cfg.plpd_augmentations(),
        rng,
    )?;
    let store_labels = flip_labels(&labels, spec.num_classes, cfg.pl_noise_ratio, &mut rng::stream(noise_seed, &[]));
    let flipped = labels.iter().zip(&store_labels).filter(|(a, b)| a != b).count();

    // (2) store maintenance
    let mut inserts = InsertCounts::default();
    for i in 0..n {
        inserts.record(store.try_insert(store_labels[i], t1_out.features.row(i), entropies[i], sensitivity[i])?);
    }
    let evicted = store.tick().into_iter().filter(|&e| e).count();

    // (3) slow teacher
    let selected = select_disagreement(&probs_t1, &probs_t2, cfg.sigma)?;
    let x_view = Augmentation::AdditiveJitter { scale: cfg.view_jitter }.apply(x, rng)?;
    let e = spec.feature_dim();
    let (mut cl_rows, mut cl_protos, mut mse_rows, mut mse_protos) = (vec![], vec![], vec![], vec![]);
    for i in (0..n).filter(|&i| selected[i]) {
        if let Some((c, _)) = store.nearest_prototype(t2_out.features.row(i))? {
            cl_rows.push(i);
            cl_protos.extend(store.prototype(c).expect("nearest prototype exists"));
        }
        if let Some(p) = store.prototype(store_labels[i]) {
            mse_rows.push(i);
            mse_protos.extend(p);
        }
    }
    let t2_loss = t2_loss_and_grads(
        &spec,
        &trio.t2,
        &trio.projector_spec,
        &trio.projector,
        &T2Batch {
            x,
            x_view: &x_view,
            cl_rows: &cl_rows,
            cl_prototypes: &Matrix::from_vec(cl_rows.len(), e, cl_protos)?,
            mse_rows: &mse_rows,
            mse_prototypes: &Matrix::from_vec(mse_rows.len(), e, mse_protos)?,
        },
        cfg.loss_weights(),
        cfg.tau,
    )?;
    if cfg.lr_t2 > 0.0 {
        let mask = TrainableMask::new(&spec, MaskMode::BnOnly);
        trio.t2 = crate::numnet::sgd_step(&trio.t2, &t2_loss.grads, cfg.lr_t2, &mask)?;
        commit_running_stats(&mut trio.t2, &t2_out.cache)?;
        let pmask = TrainableMask::new(&trio.projector_spec, MaskMode::Full);
        trio.projector = crate::numnet::sgd_step(&trio.projector, &t2_loss.projector_grads, cfg.lr_t2, &pmask)?;
    }

    // (4) restoration
    let restored = trio.restore_t2(cfg.restore_prob, rng)?;

    // (5) student self-training against both teachers
    let st1 = sce(&probs_t1, &s_out.logits)?;
    let st2 = sce(&probs_t2, &s_out.logits)?;
    if cfg.lr_student > 0.0 {
        let grad = st1.grad.add(&st2.grad)?;
        let g = backward(&spec, &trio.student, &s_out.cache, &grad, None)?;
        let mask = TrainableMask::new(&spec, cfg.student_mode);
        trio.student = crate::numnet::sgd_step(&trio.student, &g, cfg.lr_student, &mask)?;
        commit_running_stats(&mut trio.student, &s_out.cache)?;
    }

    // (6) fast teacher follows the student
    ema_update(&mut trio.t1, &trio.student, cfg.alpha)?;

    for (name, p) in [("student", &trio.student), ("fast teacher", &trio.t1), ("slow teacher", &trio.t2)] {
        if !p.is_finite() {
            return Err(Error::NonFinite(match name {
                "student" => "student parameters",
                "fast teacher" => "fast-teacher parameters",
                _ => "slow-teacher parameters",
            }));
        }
    }
    if !trio.projector.is_finite() {
        return Err(Error::NonFinite("projector parameters"));
    }

    let diagnostics = StepDiagnostics {
        batch_size: n,
        losses: StepLosses { sce: st1.value + st2.value, cl: t2_loss.cl, mse: t2_loss.mse, im: t2_loss.im },
        n_selected: selected.iter().filter(|&&s| s).count(),
        n_contrastive: t2_loss.n_contrastive,
        n_mse: mse_rows.len(),
        queue_sizes: store.sizes(),
        inserts,
        evicted,
        restored,
        flipped_labels: flipped,
        batch_error: None,
    };
    Ok(StepOutput {
        prediction,
        diagnostics,
        trace: StepTrace {
            probs_t1,
            probs_t2,
            probs_student: probs_s,
            pseudo_labels: labels,
            store_labels,
            entropies,
            plpd: sensitivity,
            selected,
        },
    })
}
