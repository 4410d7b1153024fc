//! Per-sample reliability: pseudo-labels, entropy, augmentation sensitivity
//! (PLPD), the dual-criterion admission gate and the teacher-disagreement
//! selector.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::entropy;
use crate::numnet::{argmax, Matrix};

/// Input perturbation used to probe prediction stability on vector inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    /// Randomly permutes `segments` contiguous coordinate blocks per row.
    SegmentShuffle { segments: usize },
    /// Zeroes the central `fraction` of coordinates.
    CenterOcclusion { fraction: f64 },
    /// Adds `N(0, scale²)` noise per coordinate.
    AdditiveJitter { scale: f64 },
}

impl Augmentation {
    pub fn default_plpd_set() -> Vec<Augmentation> {
        vec![
            Augmentation::SegmentShuffle { segments: 4 },
            Augmentation::CenterOcclusion { fraction: 0.25 },
        ]
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<Matrix> {
        let (n, d) = x.shape();
        let mut out = x.clone();
        match *self {
            Augmentation::SegmentShuffle { segments } => {
                let k = segments.clamp(1, d.max(1));
                let bounds: Vec<(usize, usize)> =
                    (0..k).map(|s| (s * d / k, (s + 1) * d / k)).collect();
                let mut order: Vec<usize> = (0..k).collect();
                for i in 0..n {
                    order.shuffle(rng);
                    let src = x.row(i);
                    let dst = out.row_mut(i);
                    let mut w = 0;
                    for &b in &order {
                        let (lo, hi) = bounds[b];
                        dst[w..w + hi - lo].copy_from_slice(&src[lo..hi]);
                        w += hi - lo;
                    }
                }
            }
            Augmentation::CenterOcclusion { fraction } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::InvalidConfig(format!("occlusion fraction {fraction}")));
                }
                let (lo, hi) = center_window(d, fraction);
                for i in 0..n {
                    out.row_mut(i)[lo..hi].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Augmentation::AdditiveJitter { scale } => {
                if scale > 0.0 {
                    let normal = Normal::new(0.0, scale)
                        .map_err(|e| Error::InvalidConfig(format!("jitter scale: {e}")))?;
                    out.as_mut_slice().iter_mut().for_each(|v| *v += normal.sample(rng));
                }
            }
        }
        Ok(out)
    }
}

/// Half-open coordinate range covering the central `fraction` of `d`.
pub fn center_window(d: usize, fraction: f64) -> (usize, usize) {
    let len = ((fraction * d as f64).round() as usize).min(d);
    let lo = (d - len) / 2;
    (lo, lo + len)
}

/// Argmax labels (ties to the lowest class) with their probabilities.
pub fn pseudo_labels(probs: &Matrix) -> (Vec<usize>, Vec<f64>) {
    probs
        .iter_rows()
        .map(|r| {
            let c = argmax(r);
            (c, r[c])
        })
        .unzip()
}

pub fn row_entropies(probs: &Matrix) -> Vec<f64> {
    probs.iter_rows().map(entropy).collect()
}

/// Drop in pseudo-label probability under augmentation:
/// `p(ŷ|x) − mean_{x'} p(ŷ|x')`, one augmented draw per augmentation.
/// `model` maps a batch to class probabilities and must not have side effects.
pub fn plpd<F, R>(model: F, x: &Matrix, labels: &[usize], augs: &[Augmentation], rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&Matrix) -> Result<Matrix>,
    R: Rng + ?Sized,
{
    if augs.is_empty() {
        return Err(Error::InvalidConfig("plpd needs at least one augmentation".into()));
    }
    if labels.len() != x.rows() {
        return Err(Error::shape("plpd labels", x.rows(), labels.len()));
    }
    let base = model(x)?;
    let mut drop: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| base[(i, y)]).collect();
    let k = augs.len() as f64;
    for aug in augs {
        let xa = aug.apply(x, rng)?;
        if xa.shape() != x.shape() {
            return Err(Error::shape("plpd augmentation", format!("{:?}", x.shape()), format!("{:?}", xa.shape())));
        }
        let pa = model(&xa)?;
        for (i, &y) in labels.iter().enumerate() {
            drop[i] -= pa[(i, y)] / k;
        }
    }
    Ok(drop)
}

/// Admission rule: confident (`H ≤ σ`) and stable (`Δp ≥ δ`).
pub fn dual_criterion(entropy: f64, plpd: f64, sigma: f64, delta: f64) -> bool {
    entropy <= sigma && plpd >= delta
}

/// Samples where the fast teacher is confident and the slow teacher is not.
pub fn select_disagreement(probs_t1: &Matrix, probs_t2: &Matrix, sigma: f64) -> Result<Vec<bool>> {
    if probs_t1.shape() != probs_t2.shape() {
        return Err(Error::shape(
            "select_disagreement",
            format!("{:?}", probs_t1.shape()),
            format!("{:?}", probs_t2.shape()),
        ));
    }
    Ok(probs_t1
        .iter_rows()
        .zip(probs_t2.iter_rows())
        .map(|(a, b)| entropy(a) <= sigma && entropy(b) > sigma)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{forward, softmax, Activation, LayerParams, LayerSpec, NetworkParams, NetworkSpec, StatsMode};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pseudo_label_examples() {
        let p = Matrix::from_rows(&[[0.1, 0.7, 0.2], [0.4, 0.3, 0.3]]).unwrap();
        let (l, c) = pseudo_labels(&p);
        assert_eq!(l, vec![1, 0]);
        assert_eq!(c, vec![0.7, 0.4]);
        let (l, _) = pseudo_labels(&Matrix::from_rows(&[[0.5, 0.5]]).unwrap());
        assert_eq!(l, vec![0]);
    }

    #[test]
    fn pseudo_labels_match_naive_scan() {
        let mut r = rng::stream(3, &[]);
        let raw = Matrix::from_fn(3, 5, |_, _| r.random::<f64>());
        let p = softmax(&raw).unwrap();
        let (labels, _) = pseudo_labels(&p);
        for (i, &l) in labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..5 {
                if p[(i, c)] > p[(i, best)] {
                    best = c;
                }
            }
            assert_eq!(l, best);
        }
    }

    fn linear_2class() -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec {
            layers: vec![LayerSpec { in_dim: 2, out_dim: 2, has_bn: false, activation: Activation::Identity }],
            feature_layer: 0,
            num_classes: 2,
        };
        let params = NetworkParams {
            layers: vec![LayerParams {
                weight: Matrix::from_rows(&[[1.0, -1.0], [0.5, 0.0]]).unwrap(),
                bias: vec![0.0; 2],
                bn: None,
            }],
            bn_momentum: 0.1,
        };
        (spec, params)
    }

    #[test]
    fn plpd_identity_and_constant_models() {
        let (spec, params) = linear_2class();
        let model = |x: &Matrix| softmax(&forward(&spec, &params, x, StatsMode::Running)?.logits);
        let x = Matrix::from_rows(&[[0.3, 1.0], [-2.0, 0.4]]).unwrap();
        let mut r = rng::stream(0, &[]);
        let ident = [Augmentation::CenterOcclusion { fraction: 0.0 }];
        let d = plpd(model, &x, &[0, 1], &ident, &mut r).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);

        let mut zero = params.clone();
        zero.layers[0].weight = Matrix::zeros(2, 2);
        let constant = |x: &Matrix| softmax(&forward(&spec, &zero, x, StatsMode::Running)?.logits);
        let d = plpd(constant, &x, &[1, 0], &Augmentation::default_plpd_set(), &mut r).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn plpd_full_occlusion_drops_to_half() {
        let (spec, params) = linear_2class();
        let model = |x: &Matrix| softmax(&forward(&spec, &params, x, StatsMode::Running)?.logits);
        let x = Matrix::from_rows(&[[2.0, 1.0]]).unwrap();
        // logits (2.5, -2) → class 0; an all-zero input gives (0.5, 0.5)
        let p0 = 1.0 / (1.0 + (-4.5f64).exp());
        let mut r = rng::stream(0, &[]);
        let d = plpd(model, &x, &[0], &[Augmentation::CenterOcclusion { fraction: 1.0 }], &mut r).unwrap();
        assert!((d[0] - (p0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn plpd_requires_augmentations() {
        let (spec, params) = linear_2class();
        let model = |x: &Matrix| softmax(&forward(&spec, &params, x, StatsMode::Running)?.logits);
        let x = Matrix::zeros(1, 2);
        assert!(plpd(model, &x, &[0], &[], &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn dual_criterion_examples() {
        assert!(dual_criterion(0.4, 0.3, 0.5, 0.2));
        assert!(dual_criterion(0.5, 0.2, 0.5, 0.2));
        assert!(!dual_criterion(0.6, 0.3, 0.5, 0.2));
        assert!(!dual_criterion(0.4, 0.1, 0.5, 0.2));
    }

    #[test]
    fn disagreement_examples() {
        let t1 = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let t2 = Matrix::filled(1, 4, 0.25);
        assert_eq!(select_disagreement(&t1, &t2, 0.5).unwrap(), vec![true]);
        assert_eq!(select_disagreement(&t2, &t1, 0.5).unwrap(), vec![false]);
        for sigma in [0.0, 0.3, 1.0, 2.0] {
            assert_eq!(select_disagreement(&t2, &t2, sigma).unwrap(), vec![false]);
        }
        assert!(select_disagreement(&t1, &Matrix::zeros(2, 4), 0.5).is_err());
    }

    #[test]
    fn occlusion_window_counts() {
        assert_eq!(center_window(32, 0.5), (8, 24));
        assert_eq!(center_window(10, 0.25), (3, 6));
        assert_eq!(center_window(7, 0.0), (3, 3));
    }

    proptest! {
        #[test]
        fn dual_criterion_is_monotone(h in 0.0f64..3.0, dp in -1.0f64..1.0, dh in 0.0f64..1.0, ddp in 0.0f64..1.0) {
            if dual_criterion(h, dp, 0.5, 0.2) {
                prop_assert!(dual_criterion(h - dh, dp + ddp, 0.5, 0.2));
            }
        }

        #[test]
        fn augmentations_keep_shape_and_are_seeded(seed in 0u64..1000, n in 1usize..6, d in 1usize..20) {
            let mut r = rng::stream(seed, &[1]);
            let x = Matrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0));
            for aug in [
                Augmentation::SegmentShuffle { segments: 4 },
                Augmentation::CenterOcclusion { fraction: 0.25 },
                Augmentation::AdditiveJitter { scale: 0.05 },
            ] {
                let a = aug.apply(&x, &mut rng::stream(seed, &[2])).unwrap();
                let b = aug.apply(&x, &mut rng::stream(seed, &[2])).unwrap();
                prop_assert_eq!(a.shape(), x.shape());
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn segment_shuffle_permutes_each_row(seed in 0u64..500) {
            let x = Matrix::from_fn(3, 10, |i, j| (i * 10 + j) as f64);
            let a = Augmentation::SegmentShuffle { segments: 4 }.apply(&x, &mut rng::stream(seed, &[])).unwrap();
            for i in 0..3 {
                let mut got = a.row(i).to_vec();
                got.sort_by(f64::total_cmp);
                prop_assert_eq!(got, x.row(i).to_vec());
            }
        }
    }
}
