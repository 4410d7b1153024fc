//! The four parameter sets (student, fast teacher, slow teacher, frozen
//! source) and the contrastive projector, with EMA, stochastic restoration
//! and trainable masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::{LeafId, LeafKind, NetworkParams, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// BN scale and shift only.
    BnOnly,
    /// Every trainable leaf.
    Full,
}

/// Which trainable leaves an optimizer step may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    pub mode: MaskMode,
    selected: Vec<[bool; 4]>,
}

fn kind_slot(kind: LeafKind) -> usize {
    match kind {
        LeafKind::Weight => 0,
        LeafKind::Bias => 1,
        LeafKind::Gamma => 2,
        LeafKind::Beta => 3,
    }
}

impl TrainableMask {
    pub fn new(spec: &NetworkSpec, mode: MaskMode) -> Self {
        let selected = spec
            .layers
            .iter()
            .map(|l| match mode {
                MaskMode::Full => [true, true, l.has_bn, l.has_bn],
                MaskMode::BnOnly => [false, false, l.has_bn, l.has_bn],
            })
            .collect();
        TrainableMask { mode, selected }
    }

    pub fn selects(&self, leaf: LeafId) -> bool {
        self.selected.get(leaf.layer).is_some_and(|s| s[kind_slot(leaf.kind)])
    }

    /// Selected scalars over all trainable scalars of `params`.
    pub fn summary(&self, params: &NetworkParams) -> MaskSummary {
        let mut selected = 0;
        let mut total = 0;
        for (id, v) in params.leaves() {
            total += v.len();
            if self.selects(id) {
                selected += v.len();
            }
        }
        MaskSummary { selected, total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSummary {
    pub selected: usize,
    pub total: usize,
}

impl MaskSummary {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.selected as f64 / self.total as f64
        }
    }

    /// True when the mask selects nothing (e.g. BN-only on a net without BN).
    pub fn is_empty(&self) -> bool {
        self.selected == 0
    }
}

/// Mask for `mode` plus the fraction of trainable scalars it selects.
pub fn trainable_mask(spec: &NetworkSpec, mode: MaskMode) -> (TrainableMask, MaskSummary) {
    let mask = TrainableMask::new(spec, mode);
    let summary = mask.summary(&NetworkParams::init(spec, 0));
    (mask, summary)
}

fn zip_all<'a>(a: &'a NetworkParams, b: &'a NetworkParams) -> Result<Vec<(&'a [f64], &'a [f64])>> {
    let la: Vec<&[f64]> = a.leaves().into_iter().map(|(_, v)| v).chain(a.running_stats()).collect();
    let lb: Vec<&[f64]> = b.leaves().into_iter().map(|(_, v)| v).chain(b.running_stats()).collect();
    if la.len() != lb.len() || la.iter().zip(&lb).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape("parameter sets", "identical layouts", "different layouts"));
    }
    Ok(la.into_iter().zip(lb).collect())
}

/// `target ← α·target + (1 − α)·source` on every leaf including running
/// statistics.
pub fn ema_update(target: &mut NetworkParams, student: &NetworkParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA alpha {alpha} not in [0, 1]")));
    }
    zip_all(target, student)?;
    let src: Vec<Vec<f64>> = student
        .leaves()
        .into_iter()
        .map(|(_, v)| v.to_vec())
        .chain(student.running_stats().into_iter().map(<[f64]>::to_vec))
        .collect();
    let mut dst: Vec<&mut [f64]> = Vec::new();
    let mut stats: Vec<&mut [f64]> = Vec::new();
    for l in target.layers.iter_mut() {
        dst.push(l.weight.as_mut_slice());
        dst.push(l.bias.as_mut_slice());
        if let Some(bn) = &mut l.bn {
            dst.push(bn.gamma.as_mut_slice());
            dst.push(bn.beta.as_mut_slice());
            stats.push(bn.running_mean.as_mut_slice());
            stats.push(bn.running_var.as_mut_slice());
        }
    }
    for (d, s) in dst.into_iter().chain(stats).zip(&src) {
        for (t, &v) in d.iter_mut().zip(s) {
            *t = alpha * *t + (1.0 - alpha) * v;
        }
    }
    Ok(())
}

/// Independently per trainable scalar, with probability `restore_prob`,
/// resets the value to the source value. Running statistics are never
/// restored. Returns the number of restored scalars.
pub fn stochastic_restore<R: Rng + ?Sized>(
    target: &mut NetworkParams,
    source: &NetworkParams,
    restore_prob: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&restore_prob) {
        return Err(Error::InvalidConfig(format!("restore probability {restore_prob} not in [0, 1]")));
    }
    zip_all(target, source)?;
    if restore_prob == 0.0 {
        return Ok(0);
    }
    let src = source.leaves();
    let mut restored = 0;
    for ((_, t), (_, s)) in target.leaves_mut().into_iter().zip(src) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            if rng.random::<f64>() < restore_prob {
                *tv = sv;
                restored += 1;
            }
        }
    }
    Ok(restored)
}

/// Student, both teachers, the frozen source and the projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrio {
    pub spec: NetworkSpec,
    pub student: NetworkParams,
    pub t1: NetworkParams,
    pub t2: NetworkParams,
    source: NetworkParams,
    pub projector_spec: NetworkSpec,
    pub projector: NetworkParams,
    projector_init: NetworkParams,
}

impl ModelTrio {
    /// Every adapted model starts as a copy of `source`. The projector maps
    /// features `e → e → e/2` with a ReLU in between.
    pub fn new(spec: NetworkSpec, source: NetworkParams, projector_seed: u64) -> Result<Self> {
        spec.validate()?;
        source.check_matches(&spec)?;
        let e = spec.feature_dim();
        let projector_spec = NetworkSpec::plain_mlp(e, &[e], (e / 2).max(1))?;
        let projector = NetworkParams::init(&projector_spec, projector_seed);
        Ok(ModelTrio {
            student: source.clone(),
            t1: source.clone(),
            t2: source.clone(),
            source,
            spec,
            projector_init: projector.clone(),
            projector_spec,
            projector,
        })
    }

    pub fn source(&self) -> &NetworkParams {
        &self.source
    }

    /// [`stochastic_restore`] of the slow teacher towards the source.
    pub fn restore_t2<R: Rng + ?Sized>(&mut self, restore_prob: f64, rng: &mut R) -> Result<usize> {
        stochastic_restore(&mut self.t2, &self.source, restore_prob, rng)
    }

    /// Returns every adapted model and the projector to their initial state.
    pub fn reset(&mut self) {
        self.student = self.source.clone();
        self.t1 = self.source.clone();
        self.t2 = self.source.clone();
        self.projector = self.projector_init.clone();
    }
}

/// Serializable checkpoint of a trio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrioCheckpoint {
    pub spec: NetworkSpec,
    pub student: NetworkParams,
    pub t1: NetworkParams,
    pub t2: NetworkParams,
    pub source: NetworkParams,
    pub projector_spec: NetworkSpec,
    pub projector: NetworkParams,
    pub projector_init: NetworkParams,
}

impl From<&ModelTrio> for TrioCheckpoint {
    fn from(t: &ModelTrio) -> Self {
        TrioCheckpoint {
            spec: t.spec.clone(),
            student: t.student.clone(),
            t1: t.t1.clone(),
            t2: t.t2.clone(),
            source: t.source.clone(),
            projector_spec: t.projector_spec.clone(),
            projector: t.projector.clone(),
            projector_init: t.projector_init.clone(),
        }
    }
}

impl TryFrom<TrioCheckpoint> for ModelTrio {
    type Error = Error;

    fn try_from(c: TrioCheckpoint) -> Result<Self> {
        c.spec.validate()?;
        for p in [&c.student, &c.t1, &c.t2, &c.source] {
            p.check_matches(&c.spec)?;
        }
        c.projector.check_matches(&c.projector_spec)?;
        Ok(ModelTrio {
            spec: c.spec,
            student: c.student,
            t1: c.t1,
            t2: c.t2,
            source: c.source,
            projector_spec: c.projector_spec,
            projector: c.projector,
            projector_init: c.projector_init,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{LayerParams, Matrix};
    use crate::rng;

    fn scalar_net(w: f64) -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec::plain_mlp(1, &[], 1).unwrap();
        let p = NetworkParams {
            layers: vec![LayerParams { weight: Matrix::from_vec(1, 1, vec![w]).unwrap(), bias: vec![0.0], bn: None }],
            bn_momentum: 0.1,
        };
        (spec, p)
    }

    #[test]
    fn ema_examples() {
        let (_, student) = scalar_net(1.0);
        let (_, mut t) = scalar_net(0.0);
        ema_update(&mut t, &student, 0.99).unwrap();
        assert!((t.layers[0].weight[(0, 0)] - 0.01).abs() < 1e-15);

        let spec = NetworkSpec::bn_mlp(3, &[4], 2).unwrap();
        let a = NetworkParams::init(&spec, 1);
        let b = NetworkParams::init(&spec, 2);
        let mut t = a.clone();
        ema_update(&mut t, &b, 1.0).unwrap();
        assert_eq!(t, a);
        ema_update(&mut t, &b, 0.0).unwrap();
        assert_eq!(t, b);
        assert!(ema_update(&mut t, &b, 1.5).is_err());
    }

    #[test]
    fn ema_covers_running_stats_and_stays_convex() {
        let spec = NetworkSpec::bn_mlp(3, &[4], 2).unwrap();
        let mut s = NetworkParams::init(&spec, 1);
        s.layers[0].bn.as_mut().unwrap().running_mean = vec![1.0, 2.0, 3.0, 4.0];
        let t0 = NetworkParams::init(&spec, 5);
        let mut t = t0.clone();
        ema_update(&mut t, &s, 0.7).unwrap();
        let rm = &t.layers[0].bn.as_ref().unwrap().running_mean;
        assert!((rm[3] - 0.3 * 4.0).abs() < 1e-15);
        for ((a, b), c) in t0.trainable_vec().iter().zip(s.trainable_vec()).zip(t.trainable_vec()) {
            assert!(c >= a.min(b) - 1e-15 && c <= a.max(b) + 1e-15);
        }
    }

    #[test]
    fn restore_extremes_and_fraction() {
        let spec = NetworkSpec::plain_mlp(100, &[], 100).unwrap();
        let source = NetworkParams::init(&spec, 1);
        let adapted = NetworkParams::init(&spec, 2);
        let mut r = rng::stream(0, &[]);

        let mut t = adapted.clone();
        assert_eq!(stochastic_restore(&mut t, &source, 0.0, &mut r).unwrap(), 0);
        assert_eq!(t, adapted);
        let mut t = adapted.clone();
        stochastic_restore(&mut t, &source, 1.0, &mut r).unwrap();
        assert_eq!(t.trainable_vec(), source.trainable_vec());

        let mut t = adapted.clone();
        let n = stochastic_restore(&mut t, &source, 0.5, &mut rng::stream(42, &[])).unwrap();
        let weights = 10_000.0;
        let frac_w = t.layers[0]
            .weight
            .as_slice()
            .iter()
            .zip(source.layers[0].weight.as_slice())
            .filter(|(a, b)| a.to_bits() == b.to_bits())
            .count() as f64
            / weights;
        assert!((frac_w - 0.5).abs() < 0.02, "{frac_w}");
        assert!(n > 0);
        // non-restored scalars are untouched
        for (tv, (av, sv)) in t.trainable_vec().iter().zip(adapted.trainable_vec().iter().zip(source.trainable_vec())) {
            assert!(tv.to_bits() == av.to_bits() || tv.to_bits() == sv.to_bits());
        }
    }

    #[test]
    fn restore_is_reproducible_and_skips_running_stats() {
        let spec = NetworkSpec::bn_mlp(6, &[8], 3).unwrap();
        let source = NetworkParams::init(&spec, 1);
        let mut adapted = NetworkParams::init(&spec, 2);
        adapted.layers[0].bn.as_mut().unwrap().running_var = vec![2.0; 8];
        let mut a = adapted.clone();
        let mut b = adapted.clone();
        stochastic_restore(&mut a, &source, 0.3, &mut rng::stream(9, &[])).unwrap();
        stochastic_restore(&mut b, &source, 0.3, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
        let mut c = adapted.clone();
        stochastic_restore(&mut c, &source, 1.0, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(c.running_stats(), adapted.running_stats());
    }

    #[test]
    fn mask_fractions() {
        let spec = NetworkSpec::bn_mlp(8, &[16, 16], 4).unwrap();
        let (_, full) = trainable_mask(&spec, MaskMode::Full);
        assert_eq!(full.fraction(), 1.0);
        let (mask, bn) = trainable_mask(&spec, MaskMode::BnOnly);
        let total = 8 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4 + 64;
        assert_eq!(bn.selected, 64);
        assert_eq!(bn.total, total);
        assert_eq!(bn.fraction(), 64.0 / total as f64);
        assert!(mask.selects(LeafId { layer: 1, kind: LeafKind::Beta }));
        assert!(!mask.selects(LeafId { layer: 1, kind: LeafKind::Weight }));

        let plain = NetworkSpec::plain_mlp(8, &[16], 4).unwrap();
        let (_, none) = trainable_mask(&plain, MaskMode::BnOnly);
        assert_eq!(none.fraction(), 0.0);
        assert!(none.is_empty());
    }

    #[test]
    fn trio_starts_from_source_and_checkpoints_round_trip() {
        let spec = NetworkSpec::bn_mlp(6, &[8, 8], 3).unwrap();
        let source = NetworkParams::init(&spec, 3);
        let mut trio = ModelTrio::new(spec, source.clone(), 4).unwrap();
        assert_eq!(trio.student, source);
        assert_eq!(trio.t1, source);
        assert_eq!(trio.t2, source);
        assert_eq!(trio.projector_spec.num_classes, 4);
        trio.student.layers[0].bias[0] = 0.123_456_789_012_345_67;
        let json = serde_json::to_string(&TrioCheckpoint::from(&trio)).unwrap();
        let back: TrioCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ModelTrio::try_from(back).unwrap(), trio);
        trio.reset();
        assert_eq!(trio.student, source);
    }
}
