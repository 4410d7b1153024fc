use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng;
use crate::trio::TrainableMask;

/// Added to the variance before the square root in batch normalization.
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_bn: bool,
    pub activation: Activation,
}

/// Architecture of a feed-forward network. The feature vector is the
/// post-activation output of `feature_layer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub feature_layer: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// ReLU + BN hidden layers followed by a plain linear classifier. The
    /// feature layer is the last hidden layer.
    pub fn bn_mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                has_bn: true,
                activation: Activation::Relu,
            });
            prev = h;
        }
        layers.push(LayerSpec {
            in_dim: prev,
            out_dim: num_classes,
            has_bn: false,
            activation: Activation::Identity,
        });
        let spec = NetworkSpec {
            feature_layer: hidden.len().saturating_sub(1),
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain (no BN) MLP with ReLU hidden layers; used for the projector.
    pub fn plain_mlp(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        let mut spec = Self::bn_mlp(input_dim, hidden, output_dim)?;
        spec.layers.iter_mut().for_each(|l| l.has_bn = false);
        Ok(spec)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.feature_layer].out_dim
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| l.has_bn)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(last) = self.layers.last() else {
            return bad("network has no layers".into());
        };
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return bad(format!("layer {i} has a zero dimension"));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return bad(format!("layer {i} input does not match layer {} output", i - 1));
            }
        }
        if last.activation != Activation::Identity || last.has_bn {
            return bad("final layer must be linear without BN".into());
        }
        if last.out_dim != self.num_classes {
            return bad("final layer width differs from num_classes".into());
        }
        // single-layer nets expose their logits as features
        let max_feature = if self.layers.len() == 1 { 0 } else { self.layers.len() - 2 };
        if self.feature_layer > max_feature {
            return bad("feature layer must precede the classifier".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `in_dim × out_dim`; a batch maps as `x · W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// One trainable tensor of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafId {
    pub layer: usize,
    pub kind: LeafKind,
}

impl std::fmt::Display for LeafId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match self.kind {
            LeafKind::Weight => "weight",
            LeafKind::Bias => "bias",
            LeafKind::Gamma => "gamma",
            LeafKind::Beta => "beta",
        };
        write!(f, "layers[{}].{}", self.layer, k)
    }
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, unit BN scale, source-neutral
    /// running statistics.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("init")]);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
                let weight =
                    Matrix::from_fn(l.in_dim, l.out_dim, |_, _| r.random_range(-bound..=bound));
                LayerParams {
                    weight,
                    bias: vec![0.0; l.out_dim],
                    bn: l.has_bn.then(|| BatchNorm {
                        gamma: vec![1.0; l.out_dim],
                        beta: vec![0.0; l.out_dim],
                        running_mean: vec![0.0; l.out_dim],
                        running_var: vec![1.0; l.out_dim],
                    }),
                }
            })
            .collect();
        NetworkParams {
            layers,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::shape(
                "NetworkParams",
                format!("{} layers", spec.layers.len()),
                format!("{} layers", self.layers.len()),
            ));
        }
        for (l, (p, s)) in self.layers.iter().zip(&spec.layers).enumerate() {
            let ok = p.weight.shape() == (s.in_dim, s.out_dim)
                && p.bias.len() == s.out_dim
                && p.bn.is_some() == s.has_bn
                && p.bn.as_ref().is_none_or(|bn| {
                    bn.gamma.len() == s.out_dim
                        && bn.beta.len() == s.out_dim
                        && bn.running_mean.len() == s.out_dim
                        && bn.running_var.len() == s.out_dim
                });
            if !ok {
                return Err(Error::shape(
                    "NetworkParams",
                    format!("layer {l} as {s:?}"),
                    "different parameter shapes",
                ));
            }
        }
        Ok(())
    }

    /// Trainable leaves in canonical order: per layer weight, bias, gamma, beta.
    pub fn leaves(&self) -> Vec<(LeafId, &[f64])> {
        let mut out = Vec::new();
        for (layer, p) in self.layers.iter().enumerate() {
            out.push((LeafId { layer, kind: LeafKind::Weight }, p.weight.as_slice()));
            out.push((LeafId { layer, kind: LeafKind::Bias }, p.bias.as_slice()));
            if let Some(bn) = &p.bn {
                out.push((LeafId { layer, kind: LeafKind::Gamma }, bn.gamma.as_slice()));
                out.push((LeafId { layer, kind: LeafKind::Beta }, bn.beta.as_slice()));
            }
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(LeafId, &mut [f64])> {
        let mut out = Vec::new();
        for (layer, p) in self.layers.iter_mut().enumerate() {
            out.push((LeafId { layer, kind: LeafKind::Weight }, p.weight.as_mut_slice()));
            out.push((LeafId { layer, kind: LeafKind::Bias }, p.bias.as_mut_slice()));
            if let Some(bn) = &mut p.bn {
                out.push((LeafId { layer, kind: LeafKind::Gamma }, bn.gamma.as_mut_slice()));
                out.push((LeafId { layer, kind: LeafKind::Beta }, bn.beta.as_mut_slice()));
            }
        }
        out
    }

    /// Running statistics, layer by layer (mean then variance).
    pub fn running_stats(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .flat_map(|bn| [bn.running_mean.as_slice(), bn.running_var.as_slice()])
            .collect()
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.bn.as_mut())
            .flat_map(|bn| [bn.running_mean.as_mut_slice(), bn.running_var.as_mut_slice()])
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.leaves().iter().map(|(_, v)| v.len()).sum()
    }

    /// All trainable scalars flattened in canonical leaf order.
    pub fn trainable_vec(&self) -> Vec<f64> {
        self.leaves().into_iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn set_trainable_vec(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(Error::shape("set_trainable_vec", self.num_trainable(), values.len()));
        }
        let mut off = 0;
        for (_, leaf) in self.leaves_mut() {
            leaf.copy_from_slice(&values[off..off + leaf.len()]);
            off += leaf.len();
        }
        Ok(())
    }

    /// Human-readable path of the flat trainable index `idx`.
    pub fn scalar_label(&self, idx: usize) -> String {
        let mut off = 0;
        for (id, leaf) in self.leaves() {
            if idx < off + leaf.len() {
                return format!("{id}[{}]", idx - off);
            }
            off += leaf.len();
        }
        format!("<out of range {idx}>")
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
            && self.running_stats().iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Order-sensitive hash over the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let leaves = self.leaves();
        let stats = self.running_stats();
        for v in leaves.iter().map(|(_, v)| *v).chain(stats) {
            for x in v {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
                h = rng::mix(h);
            }
        }
        h ^ self.bn_momentum.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// Normalize by the current batch (transductive BN).
    Batch,
    /// Normalize by the stored running statistics.
    Running,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    /// Output of the affine / BN stage, before the activation.
    pre_act: Matrix,
    bn: Option<BnCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pub mode: StatsMode,
}

impl ForwardCache {
    /// Per BN layer, the batch mean and (biased) variance of its linear
    /// pre-activation.
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|b| (b.batch_mean.as_slice(), b.batch_var.as_slice()))
            .collect()
    }

    /// BN-normalized, pre-affine activations of layer `layer`, if it has BN.
    pub fn normalized(&self, layer: usize) -> Option<&Matrix> {
        self.layers.get(layer)?.bn.as_ref().map(|b| &b.normalized)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub logits: Matrix,
    pub cache: ForwardCache,
}

/// Gradients for every trainable leaf; `None` where the layer has no BN.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    gamma: l.bn.as_ref().map(|bn| vec![0.0; bn.gamma.len()]),
                    beta: l.bn.as_ref().map(|bn| vec![0.0; bn.beta.len()]),
                })
                .collect(),
        }
    }

    /// Leaves in the same canonical order as [`NetworkParams::leaves`].
    pub fn leaves(&self) -> Vec<(LeafId, &[f64])> {
        let mut out = Vec::new();
        for (layer, g) in self.layers.iter().enumerate() {
            out.push((LeafId { layer, kind: LeafKind::Weight }, g.weight.as_slice()));
            out.push((LeafId { layer, kind: LeafKind::Bias }, g.bias.as_slice()));
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push((LeafId { layer, kind: LeafKind::Gamma }, gm.as_slice()));
                out.push((LeafId { layer, kind: LeafKind::Beta }, bt.as_slice()));
            }
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(LeafId, &mut [f64])> {
        let mut out = Vec::new();
        for (layer, g) in self.layers.iter_mut().enumerate() {
            out.push((LeafId { layer, kind: LeafKind::Weight }, g.weight.as_mut_slice()));
            out.push((LeafId { layer, kind: LeafKind::Bias }, g.bias.as_mut_slice()));
            if let (Some(gm), Some(bt)) = (&mut g.gamma, &mut g.beta) {
                out.push((LeafId { layer, kind: LeafKind::Gamma }, gm.as_mut_slice()));
                out.push((LeafId { layer, kind: LeafKind::Beta }, bt.as_mut_slice()));
            }
        }
        out
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.leaves().into_iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        let mut theirs = other.leaves();
        let mut mine = self.leaves_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("ParamGrads::accumulate", mine.len(), theirs.len()));
        }
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter_mut()) {
            if a.len() != b.len() {
                return Err(Error::shape("ParamGrads::accumulate", a.len(), b.len()));
            }
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("softmax input")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Forward pass. Never mutates `params`; in [`StatsMode::Batch`] the batch
/// statistics are returned in the cache and can be folded into the running
/// statistics with [`commit_running_stats`].
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    mode: StatsMode,
) -> Result<ForwardOutput> {
    params.check_matches(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::shape("forward input", spec.input_dim(), x.cols()));
    }
    if x.rows() == 0 {
        return Err(Error::BatchTooSmall { context: "forward", needed: 1, got: 0 });
    }
    if mode == StatsMode::Batch && x.rows() < 2 {
        return Err(Error::BatchTooSmall {
            context: "batch-statistics forward",
            needed: 2,
            got: x.rows(),
        });
    }
    x.ensure_finite("forward input")?;

    let n = x.rows();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut h = x.clone();
    let mut features = None;
    for (li, (ls, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let mut lin = h.matmul(&lp.weight)?;
        let mut bn_cache = None;
        match (&lp.bn, mode) {
            (Some(bn), StatsMode::Batch) => {
                // the bias cancels under batch centering, so it is left out
                // of the normalized path and only enters the running mean
                let mean = lin.col_mean();
                let mut var = vec![0.0; ls.out_dim];
                for r in lin.iter_rows() {
                    for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let normalized =
                    Matrix::from_fn(n, ls.out_dim, |i, j| (lin[(i, j)] - mean[j]) * inv_std[j]);
                lin = Matrix::from_fn(n, ls.out_dim, |i, j| {
                    bn.gamma[j] * normalized[(i, j)] + bn.beta[j]
                });
                let batch_mean = mean.iter().zip(&lp.bias).map(|(m, b)| m + b).collect();
                bn_cache = Some(BnCache { normalized, inv_std, batch_mean, batch_var: var });
            }
            (Some(bn), StatsMode::Running) => {
                let inv_std: Vec<f64> =
                    bn.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let normalized = Matrix::from_fn(n, ls.out_dim, |i, j| {
                    (lin[(i, j)] + lp.bias[j] - bn.running_mean[j]) * inv_std[j]
                });
                lin = Matrix::from_fn(n, ls.out_dim, |i, j| {
                    bn.gamma[j] * normalized[(i, j)] + bn.beta[j]
                });
                bn_cache = Some(BnCache {
                    normalized,
                    inv_std,
                    batch_mean: Vec::new(),
                    batch_var: Vec::new(),
                });
            }
            (None, _) => {
                for i in 0..n {
                    for (v, b) in lin.row_mut(i).iter_mut().zip(&lp.bias) {
                        *v += b;
                    }
                }
            }
        }
        let post = match ls.activation {
            Activation::Relu => lin.map(|v| v.max(0.0)),
            Activation::Identity => lin.clone(),
        };
        caches.push(LayerCache { input: h, pre_act: lin, bn: bn_cache });
        if li == spec.feature_layer {
            features = Some(post.clone());
        }
        h = post;
    }
    Ok(ForwardOutput {
        features: features.expect("feature layer validated"),
        logits: h,
        cache: ForwardCache { layers: caches, mode },
    })
}

/// Folds batch statistics from a [`StatsMode::Batch`] forward into the
/// running statistics: `new = (1 − m)·old + m·batch`.
pub fn commit_running_stats(params: &mut NetworkParams, cache: &ForwardCache) -> Result<()> {
    if cache.mode != StatsMode::Batch {
        return Ok(());
    }
    let m = params.bn_momentum;
    if cache.layers.len() != params.layers.len() {
        return Err(Error::shape("commit_running_stats", params.layers.len(), cache.layers.len()));
    }
    for (lp, lc) in params.layers.iter_mut().zip(&cache.layers) {
        if let (Some(bn), Some(bc)) = (&mut lp.bn, &lc.bn) {
            for (r, b) in bn.running_mean.iter_mut().zip(&bc.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in bn.running_var.iter_mut().zip(&bc.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Batch-statistics forward that also updates the running statistics.
pub fn forward_train(
    spec: &NetworkSpec,
    params: &mut NetworkParams,
    x: &Matrix,
) -> Result<ForwardOutput> {
    let out = forward(spec, params, x, StatsMode::Batch)?;
    commit_running_stats(params, &out.cache)?;
    Ok(out)
}

/// Exact gradients of a scalar loss given its gradient with respect to the
/// logits and, optionally, an extra gradient injected at the feature layer.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_logits: &Matrix,
    grad_features: Option<&Matrix>,
) -> Result<ParamGrads> {
    backward_with_input(spec, params, cache, grad_logits, grad_features).map(|(g, _)| g)
}

/// [`backward`] that also returns the gradient with respect to the input.
pub fn backward_with_input(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_logits: &Matrix,
    grad_features: Option<&Matrix>,
) -> Result<(ParamGrads, Matrix)> {
    params.check_matches(spec)?;
    if cache.layers.len() != spec.layers.len() {
        return Err(Error::shape("backward cache", spec.layers.len(), cache.layers.len()));
    }
    let n = cache.layers[0].input.rows();
    if grad_logits.shape() != (n, spec.num_classes) {
        return Err(Error::shape(
            "backward grad_logits",
            format!("{:?}", (n, spec.num_classes)),
            format!("{:?}", grad_logits.shape()),
        ));
    }
    if let Some(gf) = grad_features {
        if gf.shape() != (n, spec.feature_dim()) {
            return Err(Error::shape(
                "backward grad_features",
                format!("{:?}", (n, spec.feature_dim())),
                format!("{:?}", gf.shape()),
            ));
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    let mut upstream = grad_logits.clone();
    for li in (0..spec.layers.len()).rev() {
        let ls = &spec.layers[li];
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        if li == spec.feature_layer {
            if let Some(gf) = grad_features {
                upstream.add_scaled(gf, 1.0)?;
            }
        }
        // through the activation
        let mut d = upstream;
        if ls.activation == Activation::Relu {
            for (g, &p) in d.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let g = &mut grads.layers[li];
        let dlin = match (&lp.bn, &lc.bn) {
            (Some(bn), Some(bc)) => {
                let width = ls.out_dim;
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                for i in 0..n {
                    for j in 0..width {
                        dgamma[j] += d[(i, j)] * bc.normalized[(i, j)];
                        dbeta[j] += d[(i, j)];
                    }
                }
                let dnorm = Matrix::from_fn(n, width, |i, j| d[(i, j)] * bn.gamma[j]);
                let dlin = match cache.mode {
                    StatsMode::Batch => {
                        let mut sum_d = vec![0.0; width];
                        let mut sum_dx = vec![0.0; width];
                        for i in 0..n {
                            for j in 0..width {
                                sum_d[j] += dnorm[(i, j)];
                                sum_dx[j] += dnorm[(i, j)] * bc.normalized[(i, j)];
                            }
                        }
                        let nf = n as f64;
                        Matrix::from_fn(n, width, |i, j| {
                            bc.inv_std[j] / nf
                                * (nf * dnorm[(i, j)] - sum_d[j] - bc.normalized[(i, j)] * sum_dx[j])
                        })
                    }
                    StatsMode::Running => {
                        Matrix::from_fn(n, width, |i, j| dnorm[(i, j)] * bc.inv_std[j])
                    }
                };
                g.gamma = Some(dgamma);
                g.beta = Some(dbeta);
                if cache.mode == StatsMode::Running {
                    g.bias = dlin.col_mean().iter().map(|m| m * n as f64).collect();
                }
                dlin
            }
            (None, None) => {
                g.bias = d.col_mean().iter().map(|m| m * n as f64).collect();
                d
            }
            _ => return Err(Error::shape("backward", "matching BN layout", "cache/params differ")),
        };
        g.weight = lc.input.t_matmul(&dlin)?;
        upstream = dlin.matmul_t(&lp.weight)?;
    }
    Ok((grads, upstream))
}

/// `params − lr · grads` on the leaves selected by `mask`. Running
/// statistics and unselected leaves are copied bit-for-bit.
pub fn sgd_step(
    params: &NetworkParams,
    grads: &ParamGrads,
    lr: f64,
    mask: &TrainableMask,
) -> Result<NetworkParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be finite and >= 0")));
    }
    let mut out = params.clone();
    let g = grads.leaves();
    let mut leaves = out.leaves_mut();
    if g.len() != leaves.len() {
        return Err(Error::shape("sgd_step grads", leaves.len(), g.len()));
    }
    if lr == 0.0 {
        return Ok(out);
    }
    for ((id, leaf), (gid, gv)) in leaves.iter_mut().zip(&g) {
        if id != gid || leaf.len() != gv.len() {
            return Err(Error::shape("sgd_step grads", id.to_string(), gid.to_string()));
        }
        if !mask.selects(*id) {
            continue;
        }
        for (p, gr) in leaf.iter_mut().zip(gv.iter()) {
            *p -= lr * gr;
        }
    }
    Ok(out)
}
