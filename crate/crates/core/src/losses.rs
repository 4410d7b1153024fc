//! Adaptation objectives with exact gradients.
//!
//! Every `−log` term clamps its probability at [`LOG_FLOOR`]; gradients are
//! exact for the clamped objective.

use crate::error::{Error, Result};
use crate::numnet::{dot, norm, softmax, Matrix};

pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
}

impl LossResult {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LossResult { value: 0.0, grad: Matrix::zeros(rows, cols) }
    }
}

/// Back-propagates `dL/dp` through a row-wise softmax: `p ⊙ (g − ⟨p, g⟩)`.
fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad_probs.row(i);
        let inner = dot(p, g);
        for (o, (&pk, &gk)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pk * (gk - inner);
        }
    }
    out
}

/// Symmetric cross-entropy `mean_i [−Σ p log q − Σ q log p]` with
/// `q = softmax(q_logits)`. The gradient is with respect to `q_logits`;
/// `p` is treated as a constant target.
pub fn sce(p: &Matrix, q_logits: &Matrix) -> Result<LossResult> {
    if p.shape() != q_logits.shape() {
        return Err(Error::shape("sce", format!("{:?}", p.shape()), format!("{:?}", q_logits.shape())));
    }
    if p.rows() == 0 {
        return Err(Error::BatchTooSmall { context: "sce", needed: 1, got: 0 });
    }
    let q = softmax(q_logits)?;
    let b = p.rows() as f64;
    let mut value = 0.0;
    let mut gq = Matrix::zeros(q.rows(), q.cols());
    for i in 0..q.rows() {
        for c in 0..q.cols() {
            let (pc, qc) = (p[(i, c)], q[(i, c)]);
            let lp = clamped_ln(pc);
            value += -pc * clamped_ln(qc) - qc * lp;
            let dlogq = if qc > LOG_FLOOR { -pc / qc } else { 0.0 };
            gq[(i, c)] = (dlogq - lp) / b;
        }
    }
    Ok(LossResult { value: value / b, grad: softmax_backward(&q, &gq) })
}

/// Shannon entropy in nats, `0·log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// A `3N × e` embedding batch laid out as `[anchors | views | prototypes]`.
/// Rows `i`, `i + N`, `i + 2N` form one positive group.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Matrix,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(anchors: &Matrix, views: &Matrix, prototypes: &Matrix, temperature: f64) -> Result<Self> {
        if anchors.shape() != views.shape() || anchors.shape() != prototypes.shape() {
            return Err(Error::shape(
                "ContrastiveBatch",
                format!("{:?}", anchors.shape()),
                format!("{:?} / {:?}", views.shape(), prototypes.shape()),
            ));
        }
        Ok(ContrastiveBatch {
            embeddings: Matrix::vstack(&[anchors, views, prototypes])?,
            temperature,
        })
    }

    pub fn group_size(&self) -> usize {
        self.embeddings.rows() / 3
    }

    /// Members of row `i`'s positive group other than `i` itself.
    pub fn positives(&self, i: usize) -> [usize; 2] {
        let n = self.group_size();
        let k = i % n;
        let mut out = [0; 2];
        let mut w = 0;
        for v in [k, k + n, k + 2 * n] {
            if v != i {
                out[w] = v;
                w += 1;
            }
        }
        out
    }
}

/// Prototype-contrastive loss over cosine similarities,
/// `−Σ_i Σ_{v∈V(i)} log softmax_{a≠i}(sim(i, a)/τ)[v]`.
pub fn contrastive(batch: &ContrastiveBatch) -> Result<LossResult> {
    let z = &batch.embeddings;
    let rows = z.rows();
    if rows == 0 || !rows.is_multiple_of(3) {
        return Err(Error::BatchTooSmall { context: "contrastive (3N rows)", needed: 3, got: rows });
    }
    if !(batch.temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {} must be > 0", batch.temperature)));
    }
    let tau = batch.temperature;
    let norms: Vec<f64> = z.iter_rows().map(norm).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm("contrastive embedding"));
    }
    let u = Matrix::from_fn(rows, z.cols(), |i, j| z[(i, j)] / norms[i]);
    let sim = u.matmul_t(&u)?;

    // dL/dS, off-diagonal only
    let mut gs = Matrix::zeros(rows, rows);
    let mut value = 0.0;
    for i in 0..rows {
        let m = (0..rows).filter(|&a| a != i).map(|a| sim[(i, a)] / tau).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows).filter(|&a| a != i).map(|a| (sim[(i, a)] / tau - m).exp()).sum();
        let lse = m + denom.ln();
        let pos = batch.positives(i);
        for &v in &pos {
            value -= sim[(i, v)] / tau - lse;
        }
        for a in 0..rows {
            if a == i {
                continue;
            }
            let soft = (sim[(i, a)] / tau - lse).exp();
            let is_pos = if pos.contains(&a) { 1.0 } else { 0.0 };
            gs[(i, a)] = (pos.len() as f64 * soft - is_pos) / tau;
        }
    }
    // S = U Uᵀ  ⇒  dL/dU = (G + Gᵀ) U
    let gsym = gs.add(&gs.transpose())?;
    let gu = gsym.matmul(&u)?;
    // through the L2 normalization
    let mut grad = Matrix::zeros(rows, z.cols());
    for (i, &n) in norms.iter().enumerate() {
        let ui = u.row(i);
        let gi = gu.row(i);
        let proj = dot(ui, gi);
        for (o, (&g, &uk)) in grad.row_mut(i).iter_mut().zip(gi.iter().zip(ui)) {
            *o = (g - uk * proj) / n;
        }
    }
    Ok(LossResult { value, grad })
}

/// `(1/N) Σ ‖z_i − P_i‖²`, gradient with respect to the features.
pub fn mse_proto(features: &Matrix, prototypes: &Matrix) -> Result<LossResult> {
    if features.shape() != prototypes.shape() {
        return Err(Error::shape(
            "mse_proto",
            format!("{:?}", features.shape()),
            format!("{:?}", prototypes.shape()),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::BatchTooSmall { context: "mse_proto", needed: 1, got: 0 });
    }
    let n = features.rows() as f64;
    let diff = features.sub(prototypes)?;
    let value = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok(LossResult { value, grad: diff.scale(2.0 / n) })
}

/// Information maximization: mean per-row entropy minus the entropy of the
/// batch-marginal prediction. Gradient with respect to the logits.
pub fn im_loss(logits: &Matrix) -> Result<LossResult> {
    let b = logits.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall { context: "im_loss", needed: 2, got: b });
    }
    let p = softmax(logits)?;
    let marginal = p.col_mean();
    let bf = b as f64;
    let mut value = 0.0;
    for r in p.iter_rows() {
        value -= r.iter().map(|&x| x * clamped_ln(x)).sum::<f64>();
    }
    value /= bf;
    value += marginal.iter().map(|&q| q * clamped_ln(q)).sum::<f64>();

    let mut gp = Matrix::zeros(b, logits.cols());
    for i in 0..b {
        for c in 0..logits.cols() {
            let pc = p[(i, c)];
            let own = -clamped_ln(pc) - if pc > LOG_FLOOR { 1.0 } else { 0.0 };
            let q = marginal[c];
            let marg = clamped_ln(q) + if q > LOG_FLOOR { 1.0 } else { 0.0 };
            gp[(i, c)] = (own + marg) / bf;
        }
    }
    Ok(LossResult { value, grad: softmax_backward(&p, &gp) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cl: f64,
    pub mse: f64,
    pub im: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cl: 1.0, mse: 1.0, im: 1.0 }
    }
}

/// Weighted slow-teacher objective with each gradient scaled by its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct T2Objective {
    pub value: f64,
    pub grad_cl: Matrix,
    pub grad_mse: Matrix,
    pub grad_im: Matrix,
}

pub fn t2_objective(cl: &LossResult, mse: &LossResult, im: &LossResult, w: LossWeights) -> Result<T2Objective> {
    if w.cl < 0.0 || w.mse < 0.0 || w.im < 0.0 {
        return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
    }
    Ok(T2Objective {
        value: w.cl * cl.value + w.mse * mse.value + w.im * im.value,
        grad_cl: cl.grad.scale(w.cl),
        grad_mse: mse.grad.scale(w.mse),
        grad_im: im.grad.scale(w.im),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::check_matrix;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[rng::tag("losses")]);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn sce_of_equal_halves_is_two_ln2() {
        let p = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let l = sce(&p, &Matrix::zeros(1, 2)).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sce_matches_naive_double_sum_and_is_symmetric() {
        let pl = randn(3, 4, 1);
        let ql = randn(3, 4, 2);
        let p = softmax(&pl).unwrap();
        let q = softmax(&ql).unwrap();
        let mut naive = 0.0;
        for i in 0..3 {
            for c in 0..4 {
                naive -= p[(i, c)] * q[(i, c)].ln() + q[(i, c)] * p[(i, c)].ln();
            }
        }
        naive /= 3.0;
        let a = sce(&p, &ql).unwrap().value;
        let b = sce(&q, &pl).unwrap().value;
        assert!((a - naive).abs() < 1e-12);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sce_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = softmax(&randn(4, 4, 10 + seed)).unwrap();
            let ql = randn(4, 4, 20 + seed);
            let l = sce(&p, &ql).unwrap();
            let r = check_matrix(&ql, &l.grad, |m| Ok(sce(&p, m)?.value), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn sce_handles_one_hot_targets() {
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let l = sce(&p, &Matrix::from_rows(&[[0.2, -0.3, 0.1]]).unwrap()).unwrap();
        assert!(l.value.is_finite() && l.grad.is_finite());
        assert!(sce(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.8, 0.2]) - 0.500_402_423_538_188_4).abs() < 1e-12);
    }

    #[test]
    fn contrastive_identical_triplet() {
        let e = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = ContrastiveBatch::new(&e, &e, &e, 0.1).unwrap();
        let l = contrastive(&b).unwrap();
        assert!((l.value - 6.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_scale_invariant_and_differentiable() {
        let e = randn(9, 8, 3);
        let b = ContrastiveBatch { embeddings: e.clone(), temperature: 0.1 };
        let l = contrastive(&b).unwrap();
        let mut scaled = e.clone();
        scaled.row_mut(4).iter_mut().for_each(|v| *v *= 7.5);
        let l2 = contrastive(&ContrastiveBatch { embeddings: scaled, temperature: 0.1 }).unwrap();
        assert!((l.value - l2.value).abs() < 1e-10);
        let r = check_matrix(
            &e,
            &l.grad,
            |m| Ok(contrastive(&ContrastiveBatch { embeddings: m.clone(), temperature: 0.1 })?.value),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn contrastive_rejects_zero_norm() {
        let mut e = randn(3, 4, 4);
        e.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let b = ContrastiveBatch { embeddings: e, temperature: 0.1 };
        assert_eq!(contrastive(&b).unwrap_err(), Error::ZeroNorm("contrastive embedding"));
        let empty = ContrastiveBatch { embeddings: Matrix::zeros(0, 4), temperature: 0.1 };
        assert!(contrastive(&empty).is_err());
    }

    #[test]
    fn positives_are_the_other_group_members() {
        let b = ContrastiveBatch { embeddings: Matrix::zeros(6, 1), temperature: 1.0 };
        assert_eq!(b.positives(0), [2, 4]);
        assert_eq!(b.positives(3), [1, 5]);
        assert_eq!(b.positives(5), [1, 3]);
    }

    #[test]
    fn mse_examples() {
        let z = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let p = Matrix::zeros(1, 2);
        let l = mse_proto(&z, &p).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad.row(0), &[2.0, 0.0]);
        assert_eq!(mse_proto(&z, &z).unwrap().value, 0.0);
        assert!(mse_proto(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).is_err());

        let z = randn(5, 3, 5);
        let p = randn(5, 3, 6);
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                naive += (z[(i, j)] - p[(i, j)]).powi(2);
            }
        }
        assert!((mse_proto(&z, &p).unwrap().value - naive / 5.0).abs() < 1e-12);
    }

    #[test]
    fn im_loss_examples() {
        let uniform = Matrix::zeros(4, 3);
        assert!(im_loss(&uniform).unwrap().value.abs() < 1e-12);
        let same = Matrix::from_rows(&[[10.0, 0.0], [10.0, 0.0]]).unwrap();
        assert!(im_loss(&same).unwrap().value.abs() < 1e-12);
        let diverse = Matrix::from_rows(&[[10.0, 0.0], [0.0, 10.0]]).unwrap();
        assert!(im_loss(&diverse).unwrap().value < -0.6);
        assert!(im_loss(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn im_gradient_matches_finite_differences() {
        let l = randn(8, 4, 7);
        let r = check_matrix(&l, &im_loss(&l).unwrap().grad, |m| Ok(im_loss(m)?.value), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn t2_objective_weights() {
        let a = LossResult { value: 1.0, grad: Matrix::filled(1, 1, 1.0) };
        let m = LossResult { value: 1.5, grad: Matrix::filled(1, 1, 2.0) };
        let i = LossResult { value: 0.25, grad: Matrix::filled(1, 1, 3.0) };
        let all = t2_objective(&a, &m, &i, LossWeights::default()).unwrap();
        assert_eq!(all.value, 2.75);
        let zero = t2_objective(&a, &m, &i, LossWeights { cl: 0.0, mse: 0.0, im: 0.0 }).unwrap();
        assert_eq!(zero.value, 0.0);
        assert_eq!(zero.grad_mse[(0, 0)], 0.0);
        let mse_only = t2_objective(&a, &m, &i, LossWeights { cl: 0.0, mse: 2.0, im: 0.0 }).unwrap();
        assert_eq!(mse_only.value, 3.0);
        assert_eq!(mse_only.grad_mse[(0, 0)], 4.0);
        assert!(t2_objective(&a, &m, &i, LossWeights { cl: -1.0, mse: 0.0, im: 0.0 }).is_err());
    }
}
