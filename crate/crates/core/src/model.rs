//! Embedding-side math: length normalization, subcenter AAM-softmax and plain
//! softmax cross-entropy with analytic gradients, attentive statistics
//! pooling (forward and backward), the ResNet-SE stride planner and a seeded
//! toy embedding extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::features::MelFeatures;

/// Variance floor applied before the square root in attentive pooling.
pub const POOL_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("invalid subcenter weights: {0}")]
    InvalidWeights(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("class index {y} out of range for {n} classes")]
    ClassOutOfRange { y: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("target cosine {0} outside [-1, 1]; embedding or weights are not unit-norm")]
    CosineOutOfRange(f64),
    #[error("unknown stride variant {0:?} (expected ResNet34-st1112, ResNet34-st1121 or ResNet101)")]
    UnknownVariant(String),
    #[error("need at least 16 frames for shape planning, got {0}")]
    TooFewFrames(usize),
    #[error("features have no frames")]
    NoFrames,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn length_normalize(v: &[f64]) -> Result<Vec<f64>, ModelError> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(ModelError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Class weight tensor with `k` unit-norm subcenters per class, stored as
/// `[class][subcenter][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcenterWeights {
    dim: usize,
    n_classes: usize,
    k: usize,
    data: Vec<f64>,
}

impl SubcenterWeights {
    pub fn new(dim: usize, n_classes: usize, k: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if n_classes < 2 || k < 1 || dim < 1 {
            return Err(ModelError::InvalidWeights(format!("need N >= 2, K >= 1, dim >= 1; got N={n_classes} K={k} dim={dim}")));
        }
        if data.len() != dim * n_classes * k {
            return Err(ModelError::DimMismatch { expected: dim * n_classes * k, found: data.len() });
        }
        for (i, w) in data.chunks_exact(dim).enumerate() {
            let n = l2_norm(w);
            if (n - 1.0).abs() > 1e-6 {
                return Err(ModelError::InvalidWeights(format!("subcenter {i} has norm {n}")));
            }
        }
        Ok(Self { dim, n_classes, k, data })
    }

    /// Normalizes every subcenter of an arbitrary tensor.
    pub fn from_unnormalized(dim: usize, n_classes: usize, k: usize, mut data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != dim * n_classes * k || dim == 0 {
            return Err(ModelError::DimMismatch { expected: dim * n_classes * k, found: data.len() });
        }
        for w in data.chunks_exact_mut(dim) {
            let u = length_normalize(w)?;
            w.copy_from_slice(&u);
        }
        Self::new(dim, n_classes, k, data)
    }

    pub fn random(dim: usize, n_classes: usize, k: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dim * n_classes * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::from_unnormalized(dim, n_classes, k, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn subcenters(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn subcenter(&self, class: usize, k: usize) -> &[f64] {
        let off = (class * self.k + k) * self.dim;
        &self.data[off..off + self.dim]
    }

    fn offset(&self, class: usize, k: usize) -> usize {
        (class * self.k + k) * self.dim
    }
}

/// Per-class cosine `max_k x·w_{j,k}` and the winning subcenter (ties go to the smallest k).
pub fn subcenter_cosines(x: &[f64], w: &SubcenterWeights) -> Result<(Vec<f64>, Vec<usize>), ModelError> {
    if x.len() != w.dim {
        return Err(ModelError::DimMismatch { expected: w.dim, found: x.len() });
    }
    let mut cos = Vec::with_capacity(w.n_classes);
    let mut arg = Vec::with_capacity(w.n_classes);
    for j in 0..w.n_classes {
        let (mut best, mut best_k) = (f64::NEG_INFINITY, 0);
        for k in 0..w.k {
            let c = dot(x, w.subcenter(j, k));
            if c > best {
                best = c;
                best_k = k;
            }
        }
        cos.push(best);
        arg.push(best_k);
    }
    Ok((cos, arg))
}

/// Loss and gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
}

/// `-log softmax(z)_y`, evaluated as `(max - z_y) + ln(1 + Σ_{j≠argmax} e^{z_j - max})`.
pub fn softmax_ce_loss(logits: &[f64], y: usize) -> Result<LogitLoss, ModelError> {
    let n = logits.len();
    if y >= n {
        return Err(ModelError::ClassOutOfRange { y, n });
    }
    let (imax, &zmax) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty logits");
    let exps: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
    let rest: f64 = exps.iter().enumerate().filter(|&(j, _)| j != imax).map(|(_, e)| e).sum();
    let loss = (zmax - logits[y]) + rest.ln_1p();
    let denom = 1.0 + rest;
    let mut grad: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    // p_y - 1 written as a sum of positive terms, exact even when p_y rounds to 1.
    grad[y] = -grad.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, p)| p).sum::<f64>();
    Ok(LogitLoss { loss, grad_logits: grad })
}

/// Scale and additive angular margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub scale: f64,
    pub margin: f64,
}

impl LossConfig {
    pub fn new(scale: f64, margin: f64) -> Result<Self, ModelError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(ModelError::InvalidConfig(format!("scale must be positive, got {scale}")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(ModelError::InvalidConfig(format!("margin must be in [0, pi/2), got {margin}")));
        }
        Ok(Self { scale, margin })
    }
}

/// AAM-softmax evaluation with gradients for the embedding and the weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad_x: Vec<f64>,
    /// Same layout as [`SubcenterWeights::data`]; only active subcenters are non-zero.
    pub grad_w: Vec<f64>,
    pub active_subcenter: Vec<usize>,
}

/// Subcenter additive angular margin softmax loss for one sample.
///
/// Class cosines are the subcenter maxima; the margin is added to the target
/// angle after pooling. Gradients flow through each class's winning subcenter
/// only. At `|cos θ_y| = 1` the derivative of `cos(θ + m)` is unbounded and the
/// subgradient `cos m` is used instead.
pub fn aam_softmax_loss(x: &[f64], y: usize, w: &SubcenterWeights, cfg: &LossConfig) -> Result<LossEval, ModelError> {
    if y >= w.n_classes {
        return Err(ModelError::ClassOutOfRange { y, n: w.n_classes });
    }
    let (cos, active) = subcenter_cosines(x, w)?;
    let cy = cos[y];
    if cy.abs() > 1.0 + 1e-6 {
        return Err(ModelError::CosineOutOfRange(cy));
    }
    let cy = cy.clamp(-1.0, 1.0);
    let sin_t = (1.0 - cy * cy).max(0.0).sqrt();
    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let phi = cy * cos_m - sin_t * sin_m;
    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| cfg.scale * if j == y { phi } else { c })
        .collect();
    let ce = softmax_ce_loss(&logits, y)?;
    let dphi_dc = if sin_t > 0.0 { cos_m + sin_m * cy / sin_t } else { cos_m };
    let mut grad_x = vec![0.0; w.dim];
    let mut grad_w = vec![0.0; w.data.len()];
    for j in 0..w.n_classes {
        let mut g = cfg.scale * ce.grad_logits[j];
        if j == y {
            g *= dphi_dc;
        }
        if g == 0.0 {
            continue;
        }
        let wk = w.subcenter(j, active[j]);
        grad_x.iter_mut().zip(wk).for_each(|(gx, wv)| *gx += g * wv);
        let off = w.offset(j, active[j]);
        grad_w[off..off + w.dim].iter_mut().zip(x).for_each(|(gw, xv)| *gw += g * xv);
    }
    Ok(LossEval { loss: ce.loss, grad_x, grad_w, active_subcenter: active })
}

/// `T × D` frame matrix, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub dim: usize,
}

impl Frames {
    pub fn new(data: Vec<f64>, n_frames: usize, dim: usize) -> Result<Self, ModelError> {
        if data.len() != n_frames * dim {
            return Err(ModelError::DimMismatch { expected: n_frames * dim, found: data.len() });
        }
        Ok(Self { data, n_frames, dim })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Attention parameters: `e_t = v · tanh(W h_t + b)` with `W` of shape `hidden × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub hidden: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl AttentionParams {
    pub fn new(dim: usize, hidden: usize, w: Vec<f64>, b: Vec<f64>, v: Vec<f64>) -> Result<Self, ModelError> {
        if w.len() != hidden * dim {
            return Err(ModelError::DimMismatch { expected: hidden * dim, found: w.len() });
        }
        if b.len() != hidden || v.len() != hidden {
            return Err(ModelError::DimMismatch { expected: hidden, found: b.len().min(v.len()) });
        }
        Ok(Self { dim, hidden, w, b, v })
    }

    pub fn random<R: rand::Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut *rng)).map(|z: f64| z * scale).collect()
        };
        let w = normal(hidden * dim, 1.0 / (dim as f64).sqrt());
        let b = normal(hidden, 0.1);
        let v = normal(hidden, 1.0 / (hidden as f64).sqrt());
        Self { dim, hidden, w, b, v }
    }
}

/// Forward pass result; keeps what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PoolForward {
    /// `[μ, σ]`, length `2 * dim`.
    pub output: Vec<f64>,
    pub alpha: Vec<f64>,
    hidden_act: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub frames: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

/// Attentive statistics pooling: attention-weighted mean and standard
/// deviation over frames, concatenated.
pub fn attentive_stats_pool(h: &Frames, p: &AttentionParams) -> Result<PoolForward, ModelError> {
    if h.dim != p.dim {
        return Err(ModelError::DimMismatch { expected: p.dim, found: h.dim });
    }
    if h.n_frames == 0 {
        return Err(ModelError::NoFrames);
    }
    let (t_len, d, a_len) = (h.n_frames, h.dim, p.hidden);
    let mut hidden_act = vec![0.0; t_len * a_len];
    let mut scores = vec![0.0; t_len];
    for t in 0..t_len {
        let ht = h.frame(t);
        let act = &mut hidden_act[t * a_len..(t + 1) * a_len];
        for (a, out) in act.iter_mut().enumerate() {
            *out = (dot(&p.w[a * d..(a + 1) * d], ht) + p.b[a]).tanh();
        }
        scores[t] = dot(&p.v, act);
    }
    let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alpha: Vec<f64> = scores.iter().map(|e| (e - smax).exp()).collect();
    let z: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= z);

    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for (t, &at) in alpha.iter().enumerate() {
        for (i, &x) in h.frame(t).iter().enumerate() {
            mean[i] += at * x;
            second[i] += at * x * x;
        }
    }
    let var: Vec<f64> = mean.iter().zip(&second).map(|(m, s)| s - m * m).collect();
    let std: Vec<f64> = var.iter().map(|v| v.max(POOL_EPS).sqrt()).collect();
    let output = mean.iter().chain(&std).copied().collect();
    Ok(PoolForward { output, alpha, hidden_act, mean, var, std })
}

impl PoolForward {
    /// Gradients of `grad_out · output` with respect to frames and parameters.
    /// Where the variance was clamped, no gradient flows through it.
    pub fn backward(&self, h: &Frames, p: &AttentionParams, grad_out: &[f64]) -> Result<PoolGrads, ModelError> {
        let (t_len, d, a_len) = (h.n_frames, h.dim, p.hidden);
        if grad_out.len() != 2 * d {
            return Err(ModelError::DimMismatch { expected: 2 * d, found: grad_out.len() });
        }
        let (g_mean, g_std) = grad_out.split_at(d);
        let g_var: Vec<f64> = (0..d)
            .map(|i| if self.var[i] > POOL_EPS { g_std[i] / (2.0 * self.std[i]) } else { 0.0 })
            .collect();
        let g_mu: Vec<f64> = (0..d).map(|i| g_mean[i] - 2.0 * self.mean[i] * g_var[i]).collect();

        let mut g_frames = vec![0.0; t_len * d];
        let mut g_alpha = vec![0.0; t_len];
        for t in 0..t_len {
            let ht = h.frame(t);
            let at = self.alpha[t];
            let gf = &mut g_frames[t * d..(t + 1) * d];
            for i in 0..d {
                g_alpha[t] += g_mu[i] * ht[i] + g_var[i] * ht[i] * ht[i];
                gf[i] = at * (g_mu[i] + 2.0 * g_var[i] * ht[i]);
            }
        }
        let weighted: f64 = self.alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
        let mut gw = vec![0.0; a_len * d];
        let mut gb = vec![0.0; a_len];
        let mut gv = vec![0.0; a_len];
        for t in 0..t_len {
            let g_score = self.alpha[t] * (g_alpha[t] - weighted);
            let act = &self.hidden_act[t * a_len..(t + 1) * a_len];
            let ht = h.frame(t);
            for a in 0..a_len {
                gv[a] += g_score * act[a];
                let g_pre = g_score * p.v[a] * (1.0 - act[a] * act[a]);
                gb[a] += g_pre;
                let row = &p.w[a * d..(a + 1) * d];
                for i in 0..d {
                    gw[a * d + i] += g_pre * ht[i];
                    g_frames[t * d + i] += g_pre * row[i];
                }
            }
        }
        Ok(PoolGrads { frames: g_frames, w: gw, b: gb, v: gv })
    }
}

/// ResNet-SE stride configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrideVariant {
    ResNet34St1112,
    ResNet34St1121,
    ResNet101,
}

impl StrideVariant {
    pub const ALL: [StrideVariant; 3] = [Self::ResNet34St1112, Self::ResNet34St1121, Self::ResNet101];

    pub fn name(self) -> &'static str {
        match self {
            Self::ResNet34St1112 => "ResNet34-st1112",
            Self::ResNet34St1121 => "ResNet34-st1121",
            Self::ResNet101 => "ResNet101",
        }
    }

    /// Per-stage (frequency stride, time stride).
    pub fn stage_strides(self) -> [(usize, usize); 4] {
        match self {
            Self::ResNet34St1112 => [(1, 1), (2, 1), (2, 1), (2, 2)],
            Self::ResNet34St1121 => [(1, 1), (2, 1), (2, 2), (2, 1)],
            Self::ResNet101 => [(1, 1), (2, 2), (2, 2), (2, 2)],
        }
    }
}

impl std::str::FromStr for StrideVariant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| ModelError::UnknownVariant(s.to_owned()))
    }
}

/// (frequency, time) output dims of the four residual stages, with ceiling division.
pub fn plan_shapes(variant: StrideVariant, input: (usize, usize)) -> Result<[(usize, usize); 4], ModelError> {
    let (mut f, mut t) = input;
    if t < 16 {
        return Err(ModelError::TooFewFrames(t));
    }
    let mut out = [(0, 0); 4];
    for (slot, (sf, st)) in out.iter_mut().zip(variant.stage_strides()) {
        f = f.div_ceil(sf);
        t = t.div_ceil(st);
        *slot = (f, t);
    }
    Ok(out)
}

const TOY_FRAME_DIM: usize = 64;
const TOY_ATTN_HIDDEN: usize = 32;

/// Deterministic stand-in for a trained extractor: seeded random frame
/// projection with tanh, attentive statistics pooling, a seeded output
/// projection and length normalization.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    in_dim: usize,
    out_dim: usize,
    frame_proj: Vec<f64>,
    attn: AttentionParams,
    out_proj: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z * scale).collect()
        };
        let frame_proj = normal(TOY_FRAME_DIM * in_dim, 1.0 / (in_dim as f64).sqrt());
        let out_proj = normal(out_dim * 2 * TOY_FRAME_DIM, 1.0 / ((2 * TOY_FRAME_DIM) as f64).sqrt());
        let attn = AttentionParams::random(TOY_FRAME_DIM, TOY_ATTN_HIDDEN, &mut rng);
        Self { in_dim, out_dim, frame_proj, attn, out_proj }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn embed(&self, f: &MelFeatures) -> Result<Vec<f32>, ModelError> {
        if f.n_bins() != self.in_dim {
            return Err(ModelError::DimMismatch { expected: self.in_dim, found: f.n_bins() });
        }
        let t_len = f.n_frames();
        if t_len == 0 {
            return Err(ModelError::NoFrames);
        }
        let mut hidden = vec![0.0; t_len * TOY_FRAME_DIM];
        for t in 0..t_len {
            let x = f.frame(t);
            for (o, out) in hidden[t * TOY_FRAME_DIM..(t + 1) * TOY_FRAME_DIM].iter_mut().enumerate() {
                *out = dot(&self.frame_proj[o * self.in_dim..(o + 1) * self.in_dim], &x).tanh();
            }
        }
        let frames = Frames::new(hidden, t_len, TOY_FRAME_DIM)?;
        let pooled = attentive_stats_pool(&frames, &self.attn)?.output;
        let k = pooled.len();
        let proj: Vec<f64> = (0..self.out_dim).map(|o| dot(&self.out_proj[o * k..(o + 1) * k], &pooled)).collect();
        Ok(length_normalize(&proj)?.into_iter().map(|v| v as f32).collect())
    }
}

/// One-shot [`ToyEmbedder`] with a 512-dimensional output.
pub fn toy_embed(f: &MelFeatures, seed: u64) -> Result<Vec<f32>, ModelError> {
    ToyEmbedder::new(f.n_bins(), 512, seed).embed(f)
}
