//! The small convolutional classifier with an optional CAW layer.
//!
//! `front` (f): conv3×3 → ReLU → maxpool2 → conv3×3 → ReLU → maxpool2.
//! CAW: flatten → whiten → `Qᵀ` → unflatten.
//! `back` (g): global average pool → linear head.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward_in_place, relu_in_place, Conv2d, Linear,
};
use crate::linalg::{matmul, matmul_tn, LinalgError, Matrix};
use crate::stiefel::{AlignError, OrthogonalBasis};
use crate::tensor::{FeatureTensor, ShapeError};
use crate::whitening::{apply_whitening, flatten, unflatten, Mode, WhiteningError, WhiteningState};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Whitening(#[from] WhiteningError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("forward cache is stale (cache version {cache}, network version {net})")]
    StaleCache { cache: u64, net: u64 },
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("{what}: expected {expected}, got {actual}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("image side {0} must be divisible by 4")]
    ImageSize(usize),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// `d`, the channel count entering the CAW layer.
    pub feature_channels: usize,
    pub num_outputs: usize,
    /// Concept axes `K` reserved in `Q`.
    pub num_concepts: usize,
    pub use_caw: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden_channels: 8,
            feature_channels: 16,
            num_outputs: 2,
            num_concepts: 4,
            use_caw: true,
            momentum: crate::whitening::DEFAULT_MOMENTUM,
            eps: crate::whitening::DEFAULT_EPS,
        }
    }
}

/// Whitening followed by rotation by `Qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CawLayer<T> {
    pub whitening: WhiteningState<T>,
    pub basis: OrthogonalBasis<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub caw: Option<CawLayer<T>>,
    pub head: Linear<T>,
    version: u64,
}

/// Parameter gradients, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub conv1_weight: Vec<T>,
    pub conv1_bias: Vec<T>,
    pub conv2_weight: Vec<T>,
    pub conv2_bias: Vec<T>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &TinyNet<T>) -> Self {
        Self {
            conv1_weight: vec![T::zero(); net.conv1.weight.len()],
            conv1_bias: vec![T::zero(); net.conv1.bias.len()],
            conv2_weight: vec![T::zero(); net.conv2.weight.len()],
            conv2_bias: vec![T::zero(); net.conv2.bias.len()],
            head_weight: vec![T::zero(); net.head.weight.len()],
            head_bias: vec![T::zero(); net.head.bias.len()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[T]); 6] {
        [
            (PARAM_NAMES[0], &self.conv1_weight),
            (PARAM_NAMES[1], &self.conv1_bias),
            (PARAM_NAMES[2], &self.conv2_weight),
            (PARAM_NAMES[3], &self.conv2_bias),
            (PARAM_NAMES[4], &self.head_weight),
            (PARAM_NAMES[5], &self.head_bias),
        ]
    }
}

/// Per-image intermediates of the front layers.
#[derive(Debug, Clone)]
struct FrontTrace<T> {
    conv1_act: Vec<T>,
    pool1: Vec<T>,
    pool1_idx: Vec<u32>,
    conv2_act: Vec<T>,
    pool2_idx: Vec<u32>,
}

/// Everything `backward` needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    input: FeatureTensor<T>,
    traces: Vec<FrontTrace<T>>,
    /// `Qᵀ W` as applied in the forward pass (absent without CAW).
    caw_map: Option<Matrix<T>>,
    /// Pooled post-CAW features, `b × d`.
    pub pooled: Matrix<T>,
    /// `Z′` (or `Z` without CAW).
    pub latent: FeatureTensor<T>,
}

/// Eval-mode intermediates.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// Pre-CAW features `Z`.
    pub features: FeatureTensor<T>,
    /// Post-CAW features `Z′`.
    pub latent: FeatureTensor<T>,
    pub pooled: Matrix<T>,
    pub logits: Matrix<T>,
}

fn he_normal<T: Scalar>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect()
}

impl<T: Scalar> TinyNet<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut conv1 = Conv2d::zeros(cfg.in_channels, cfg.hidden_channels);
        conv1.weight = he_normal(rng, conv1.weight.len(), cfg.in_channels * 9);
        let mut conv2 = Conv2d::zeros(cfg.hidden_channels, cfg.feature_channels);
        conv2.weight = he_normal(rng, conv2.weight.len(), cfg.hidden_channels * 9);
        let mut head = Linear::zeros(cfg.feature_channels, cfg.num_outputs);
        let head_std = 0.1 / (cfg.feature_channels as f64).sqrt();
        head.weight = (0..head.weight.len())
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * head_std))
            .collect();
        let caw = if cfg.use_caw {
            Some(CawLayer {
                whitening: WhiteningState::new(
                    cfg.feature_channels,
                    T::of(cfg.momentum),
                    T::of(cfg.eps),
                ),
                basis: OrthogonalBasis::identity(cfg.feature_channels, cfg.num_concepts)?,
            })
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            caw,
            head,
            version: 0,
        })
    }

    /// Assembles a network from explicit parts.
    pub fn from_parts(
        conv1: Conv2d<T>,
        conv2: Conv2d<T>,
        caw: Option<CawLayer<T>>,
        head: Linear<T>,
    ) -> Result<Self> {
        let d = conv2.out_channels;
        if conv1.out_channels != conv2.in_channels {
            return Err(NetError::Mismatch {
                what: "conv2 input channels",
                expected: conv1.out_channels,
                actual: conv2.in_channels,
            });
        }
        if head.in_features != d {
            return Err(NetError::Mismatch {
                what: "head input features",
                expected: d,
                actual: head.in_features,
            });
        }
        if let Some(caw) = &caw {
            if caw.whitening.dim() != d || caw.basis.dim() != d {
                return Err(NetError::Mismatch {
                    what: "CAW dimension",
                    expected: d,
                    actual: caw.whitening.dim(),
                });
            }
        }
        Ok(Self {
            conv1,
            conv2,
            caw,
            head,
            version: 0,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn num_outputs(&self) -> usize {
        self.head.out_features
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    /// Bumped by every parameter update; forward caches remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn parameters(&self) -> [(&'static str, &[T]); 6] {
        [
            (PARAM_NAMES[0], &self.conv1.weight),
            (PARAM_NAMES[1], &self.conv1.bias),
            (PARAM_NAMES[2], &self.conv2.weight),
            (PARAM_NAMES[3], &self.conv2.bias),
            (PARAM_NAMES[4], &self.head.weight),
            (PARAM_NAMES[5], &self.head.bias),
        ]
    }

    pub fn parameters_mut(&mut self) -> [(&'static str, &mut Vec<T>); 6] {
        self.version += 1;
        [
            (PARAM_NAMES[0], &mut self.conv1.weight),
            (PARAM_NAMES[1], &mut self.conv1.bias),
            (PARAM_NAMES[2], &mut self.conv2.weight),
            (PARAM_NAMES[3], &mut self.conv2.bias),
            (PARAM_NAMES[4], &mut self.head.weight),
            (PARAM_NAMES[5], &mut self.head.bias),
        ]
    }

    /// Replaces the CAW rotation (owned by the alignment branch).
    pub fn set_basis(&mut self, basis: OrthogonalBasis<T>) {
        if let Some(caw) = &mut self.caw {
            caw.basis = basis;
        }
        self.version += 1;
    }

    fn check_input(&self, images: &FeatureTensor<T>) -> Result<()> {
        if images.channels() != self.conv1.in_channels {
            return Err(NetError::Mismatch {
                what: "input channels",
                expected: self.conv1.in_channels,
                actual: images.channels(),
            });
        }
        if images.height() % 4 != 0 || images.width() % 4 != 0 {
            return Err(NetError::ImageSize(images.height()));
        }
        Ok(())
    }

    fn front_one(&self, image: &[T], h: usize, w: usize) -> (Vec<T>, FrontTrace<T>) {
        let mut conv1_act = vec![T::zero(); self.conv1.out_channels * h * w];
        self.conv1.forward(image, h, w, &mut conv1_act);
        relu_in_place(&mut conv1_act);
        let (pool1, pool1_idx) = maxpool2(&conv1_act, self.conv1.out_channels, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let mut conv2_act = vec![T::zero(); self.conv2.out_channels * h2 * w2];
        self.conv2.forward(&pool1, h2, w2, &mut conv2_act);
        relu_in_place(&mut conv2_act);
        let (out, pool2_idx) = maxpool2(&conv2_act, self.conv2.out_channels, h2, w2);
        (
            out,
            FrontTrace {
                conv1_act,
                pool1,
                pool1_idx,
                conv2_act,
                pool2_idx,
            },
        )
    }

    /// Front layers `f` only: features `Z` entering the CAW layer.
    pub fn front(&self, images: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        Ok(self.front_traced(images)?.0)
    }

    fn front_traced(
        &self,
        images: &FeatureTensor<T>,
    ) -> Result<(FeatureTensor<T>, Vec<FrontTrace<T>>)> {
        self.check_input(images)?;
        let [b, _, h, w] = images.shape();
        let (fh, fw) = (h / 4, w / 4);
        let d = self.conv2.out_channels;
        let mut z = FeatureTensor::zeros(b, d, fh, fw);
        let mut traces = Vec::with_capacity(b);
        for bi in 0..b {
            let (out, trace) = self.front_one(images.image(bi).data, h, w);
            z.image_mut(bi).copy_from_slice(&out);
            traces.push(trace);
        }
        Ok((z, traces))
    }

    /// `ψ(Z)` with running statistics, before the rotation (identity without CAW).
    pub fn whiten_eval(&self, z: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        match &self.caw {
            None => Ok(z.clone()),
            Some(caw) => {
                let zf = flatten(z);
                let psi = caw.whitening.whiten_eval(&zf)?;
                Ok(unflatten(&psi, z.batch(), z.height(), z.width())?)
            }
        }
    }

    fn caw_eval_map(&self) -> Result<Option<Matrix<T>>> {
        match &self.caw {
            None => Ok(None),
            Some(caw) => Ok(Some(matmul_tn(
                caw.basis.matrix(),
                caw.whitening.running_whitening(),
            )?)),
        }
    }

    fn pool(latent: &FeatureTensor<T>) -> Matrix<T> {
        let [b, d, h, w] = latent.shape();
        let inv = T::one() / T::of_usize(h * w);
        let mut pooled = Matrix::zeros(b, d);
        for bi in 0..b {
            let img = latent.image(bi);
            for c in 0..d {
                pooled[(bi, c)] = img.channel(c).iter().copied().sum::<T>() * inv;
            }
        }
        pooled
    }

    /// Head logits for pooled features (`b × d` → `b × C`).
    pub fn head_logits(&self, pooled: &Matrix<T>) -> Result<Matrix<T>> {
        if pooled.cols() != self.head.in_features {
            return Err(NetError::Mismatch {
                what: "pooled feature width",
                expected: self.head.in_features,
                actual: pooled.cols(),
            });
        }
        let mut logits = Matrix::zeros(pooled.rows(), self.head.out_features);
        for bi in 0..pooled.rows() {
            let row = self.head.forward(pooled.row(bi));
            logits.row_mut(bi).copy_from_slice(&row);
        }
        Ok(logits)
    }

    /// Eval-mode pass; uses running whitening statistics and mutates nothing.
    pub fn infer(&self, images: &FeatureTensor<T>) -> Result<Inference<T>> {
        let features = self.front(images)?;
        let latent = match self.caw_eval_map()? {
            None => features.clone(),
            Some(m) => {
                let caw = self.caw.as_ref().expect("map implies CAW");
                let zf = flatten(&features);
                let out = apply_whitening(&m, &caw.whitening.running_mean, &zf)?;
                unflatten(&out, features.batch(), features.height(), features.width())?
            }
        };
        let pooled = Self::pool(&latent);
        let logits = self.head_logits(&pooled)?;
        Ok(Inference {
            features,
            latent,
            pooled,
            logits,
        })
    }

    /// Forward pass retaining a cache for [`Self::backward`].
    ///
    /// In `Mode::Train` the CAW layer whitens with batch statistics and updates its
    /// running estimates; in `Mode::Eval` it uses the running estimates.
    pub fn forward(
        &mut self,
        images: &FeatureTensor<T>,
        mode: Mode,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let (features, traces) = self.front_traced(images)?;
        let (latent, caw_map) = match &mut self.caw {
            None => (features, None),
            Some(caw) => {
                let zf = flatten(&features);
                let (mean, w) = match mode {
                    Mode::Train => {
                        caw.whitening.whiten_train(&zf)?;
                        (
                            caw.whitening.mean.clone(),
                            caw.whitening.whitening_matrix.clone(),
                        )
                    }
                    Mode::Eval => (
                        caw.whitening.running_mean.clone(),
                        caw.whitening.running_whitening().clone(),
                    ),
                };
                let m = matmul_tn(caw.basis.matrix(), &w)?;
                let out = apply_whitening(&m, &mean, &zf)?;
                (
                    unflatten(&out, features.batch(), features.height(), features.width())?,
                    Some(m),
                )
            }
        };
        let pooled = Self::pool(&latent);
        let logits = self.head_logits(&pooled)?;
        Ok((
            logits,
            ForwardCache {
                version: self.version,
                input: images.clone(),
                traces,
                caw_map,
                pooled,
                latent,
            },
        ))
    }

    /// Parameter gradients for upstream gradient `dlogits`.
    ///
    /// The CAW layer is differentiated with its mean, whitening matrix and rotation
    /// held fixed: `dZ = (Qᵀ W)ᵀ dZ′`. `Q` receives no gradient here.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Matrix<T>) -> Result<Gradients<T>> {
        Ok(self.backward_impl(cache, dlogits, false)?.0)
    }

    /// As [`Self::backward`], additionally returning the gradient with respect to the input images.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Matrix<T>,
    ) -> Result<(Gradients<T>, FeatureTensor<T>)> {
        let (g, dx) = self.backward_impl(cache, dlogits, true)?;
        Ok((g, dx.expect("requested input gradient")))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Matrix<T>,
        want_input: bool,
    ) -> Result<(Gradients<T>, Option<FeatureTensor<T>>)> {
        if cache.version != self.version {
            return Err(NetError::StaleCache {
                cache: cache.version,
                net: self.version,
            });
        }
        let b = cache.pooled.rows();
        let d = self.feature_channels();
        let c = self.num_outputs();
        if dlogits.shape() != (b, c) {
            return Err(NetError::Mismatch {
                what: "dlogits rows",
                expected: b,
                actual: dlogits.rows(),
            });
        }
        let mut grads = Gradients::zeros_like(self);

        // Head.
        let mut dpooled = Matrix::zeros(b, d);
        for bi in 0..b {
            let g = dlogits.row(bi);
            let x = cache.pooled.row(bi);
            for o in 0..c {
                grads.head_bias[o] += g[o];
                let wrow = &mut grads.head_weight[o * d..(o + 1) * d];
                for (dw, &xv) in wrow.iter_mut().zip(x) {
                    *dw += g[o] * xv;
                }
            }
            let dp = dpooled.row_mut(bi);
            for o in 0..c {
                let wrow = &self.head.weight[o * d..(o + 1) * d];
                for (dv, &wv) in dp.iter_mut().zip(wrow) {
                    *dv += g[o] * wv;
                }
            }
        }

        // Global average pool spreads each pooled gradient uniformly; the fixed CAW
        // map is linear, so every pixel of an image shares dZ = Mᵀ dpooled / hw.
        let [_, _, fh, fw] = cache.latent.shape();
        let inv = T::one() / T::of_usize(fh * fw);
        let dz_per_image = match &cache.caw_map {
            None => dpooled.scale(inv),
            Some(m) => matmul(&dpooled, m)?.scale(inv),
        };

        let [_, _, h, w] = cache.input.shape();
        let (h2, w2) = (h / 2, w / 2);
        let mut dinput = want_input.then(|| FeatureTensor::zeros(b, self.in_channels(), h, w));
        for (bi, trace) in cache.traces.iter().enumerate() {
            let mut dconv2 = vec![T::zero(); trace.conv2_act.len()];
            let dz = dz_per_image.row(bi);
            let dout: Vec<T> = (0..d)
                .flat_map(|ch| std::iter::repeat(dz[ch]).take(fh * fw))
                .collect();
            maxpool2_backward(&dout, &trace.pool2_idx, &mut dconv2);
            relu_backward_in_place(&trace.conv2_act, &mut dconv2);
            let mut dpool1 = vec![T::zero(); trace.pool1.len()];
            self.conv2.backward(
                &trace.pool1,
                h2,
                w2,
                &dconv2,
                &mut grads.conv2_weight,
                &mut grads.conv2_bias,
                Some(&mut dpool1),
            );
            let mut dconv1 = vec![T::zero(); trace.conv1_act.len()];
            maxpool2_backward(&dpool1, &trace.pool1_idx, &mut dconv1);
            relu_backward_in_place(&trace.conv1_act, &mut dconv1);
            self.conv1.backward(
                cache.input.image(bi).data,
                h,
                w,
                &dconv1,
                &mut grads.conv1_weight,
                &mut grads.conv1_bias,
                dinput.as_mut().map(|t| t.image_mut(bi)),
            );
        }
        Ok((grads, dinput))
    }
}

/// In-place `θ ← θ − lr·∇θ`.
pub fn sgd_step<T: Scalar>(net: &mut TinyNet<T>, grads: &Gradients<T>, lr: T) {
    for ((_, p), (_, g)) in net.parameters_mut().into_iter().zip(grads.tensors()) {
        for (pv, &gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/b`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(NetError::Mismatch {
            what: "label count",
            expected: b,
            actual: labels.len(),
        });
    }
    let inv_b = T::one() / T::of_usize(b);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(b, c);
    for (bi, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(NetError::BadLabel {
                label: y,
                num_classes: c,
            });
        }
        let row = logits.row(bi);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(bi);
        for (k, gv) in g.iter_mut().enumerate() {
            let p = (row[k] - log_z).exp();
            let onehot = if k == y { T::one() } else { T::zero() };
            *gv = (p - onehot) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Mean binary cross-entropy over all `b × K` sigmoid outputs.
pub fn binary_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[Vec<bool>],
) -> Result<(T, Matrix<T>)> {
    let (b, k) = logits.shape();
    if targets.len() != b {
        return Err(NetError::Mismatch {
            what: "target count",
            expected: b,
            actual: targets.len(),
        });
    }
    let inv = T::one() / T::of_usize(b * k);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(b, k);
    for (bi, t) in targets.iter().enumerate() {
        if t.len() != k {
            return Err(NetError::Mismatch {
                what: "concept label width",
                expected: k,
                actual: t.len(),
            });
        }
        for j in 0..k {
            let x = logits[(bi, j)];
            let y = if t[j] { T::one() } else { T::zero() };
            // log(1 + e^{-|x|}) + max(x, 0) − x·y
            loss += (T::one() + (-x.abs()).exp()).ln() + x.max(T::zero()) - x * y;
            grad[(bi, j)] = (sigmoid(x) - y) * inv;
        }
    }
    Ok((loss * inv, grad))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for bi in 0..logits.rows() {
        let row = out.row_mut(bi);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
