//! Bilinear attention pooling and counterfactual supervision.
//!
//! Spatial tensors are channel-last and flattened: a feature map is
//! `(H·W) × C`, attention maps are `(H·W) × M`, pooled part features are
//! `M × C`. The slice-level kernels (`*_forward` / `*_backward`) are what the
//! attention head runs during training; the owned-type functions wrap them
//! with validation for direct use.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::{Linear, Param};
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::tensor::{log_sum_exp, softmax};

/// Default number of attention maps.
pub const DEFAULT_MAPS: usize = 32;

/// Gradient floor for the signed square root at zero.
const SSQRT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature map {h}x{w}x{c} has an empty axis")));
        }
        if values.len() != h * w * c {
            return Err(Error::Shape(format!(
                "feature map {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map has non-finite entries".into()));
        }
        Ok(Self { h, w, c, values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn new(h: usize, w: usize, m: usize, values: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || m == 0 || values.len() != h * w * m {
            return Err(Error::Shape(format!(
                "attention {h}x{w}x{m} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidArgument(
                "attention entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { h, w, m, values })
    }

    /// Total mass of map `k`.
    pub fn mass(&self, k: usize) -> T {
        self.values.iter().skip(k).step_by(self.m).copied().sum()
    }

    /// Map `k` as an `h×w` row-major plane.
    pub fn plane(&self, k: usize) -> Vec<T> {
        self.values.iter().skip(k).step_by(self.m).copied().collect()
    }

    pub fn scaled(&self, a: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * a).collect(),
            ..self.clone()
        }
    }
}

/// `M × C` pooled part features.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures<T> {
    pub m: usize,
    pub c: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> PartFeatures<T> {
    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.c..(k + 1) * self.c]
    }
}

/// Factual minus averaged counterfactual logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectLogits<T>(pub Vec<T>);

/// Learnable `C → M` 1×1 projection producing the attention maps.
#[derive(Debug, Clone)]
pub struct AttentionProjection<T> {
    pub channels: usize,
    pub maps: usize,
    pub weight: Param<T>,
}

impl<T: Scalar> AttentionProjection<T> {
    /// Non-negative uniform init with mean `1/C`: over non-negative
    /// features every map starts as a soft average of all positions.
    pub fn new<R: Rng>(name: &str, channels: usize, maps: usize, rng: &mut R) -> Self {
        let dist = Uniform::new(0.0, 2.0 / channels as f64);
        let value = (0..channels * maps).map(|_| T::of(dist.sample(rng))).collect();
        Self {
            channels,
            maps,
            weight: Param::new(format!("{name}.weight"), vec![channels, maps], value),
        }
    }

    pub fn from_weights(channels: usize, maps: usize, weight: Vec<T>) -> Result<Self> {
        if weight.len() != channels * maps || maps == 0 {
            return Err(Error::Config(format!(
                "projection {channels}x{maps} with {} weights",
                weight.len()
            )));
        }
        Ok(Self {
            channels,
            maps,
            weight: Param::new("attention.weight", vec![channels, maps], weight),
        })
    }
}

// ---------------------------------------------------------------------------
// slice kernels

/// `relu(F · W)`.
pub fn attention_forward<T: Scalar>(f: &[T], hw: usize, c: usize, w: &[T], m: usize) -> Vec<T> {
    let mut a = vec![T::zero(); hw * m];
    matmul(hw, c, m, f, w, &mut a, T::zero());
    a.iter_mut().for_each(|v| *v = v.max(T::zero()));
    a
}

/// Returns `(dW, dF)` given the clamped output `a` and its gradient.
pub fn attention_backward<T: Scalar>(
    f: &[T],
    hw: usize,
    c: usize,
    w: &[T],
    m: usize,
    a: &[T],
    da: &[T],
) -> (Vec<T>, Vec<T>) {
    let dz: Vec<T> = a
        .iter()
        .zip(da)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    let mut dw = vec![T::zero(); c * m];
    matmul_tn(c, hw, m, f, &dz, &mut dw, T::zero());
    let mut df = vec![T::zero(); hw * c];
    matmul_nt(hw, m, c, &dz, w, &mut df, T::zero());
    (dw, df)
}

/// `P = Aᵀ F / (H·W)`, before any normalization.
pub fn bap_pool_forward<T: Scalar>(f: &[T], a: &[T], hw: usize, c: usize, m: usize) -> Vec<T> {
    let mut p = vec![T::zero(); m * c];
    T::gemm(
        m,
        hw,
        c,
        T::one() / T::of(hw as f64),
        a,
        (1, m as isize),
        f,
        (c as isize, 1),
        T::zero(),
        &mut p,
        (c as isize, 1),
    );
    p
}

/// Returns `(dF, dA)`; `dA` is skipped when the attention is a constant.
pub fn bap_pool_backward<T: Scalar>(
    f: &[T],
    a: &[T],
    hw: usize,
    c: usize,
    m: usize,
    dp: &[T],
    need_da: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let scale = T::one() / T::of(hw as f64);
    let mut df = vec![T::zero(); hw * c];
    T::gemm(
        hw,
        m,
        c,
        scale,
        a,
        (m as isize, 1),
        dp,
        (c as isize, 1),
        T::zero(),
        &mut df,
        (c as isize, 1),
    );
    let da = need_da.then(|| {
        let mut da = vec![T::zero(); hw * m];
        T::gemm(
            hw,
            c,
            m,
            scale,
            f,
            (c as isize, 1),
            dp,
            (1, c as isize),
            T::zero(),
            &mut da,
            (m as isize, 1),
        );
        da
    });
    (df, da)
}

/// Signed square root followed by per-row L2 normalization.
///
/// Returns the normalized rows and each row's pre-division norm; all-zero
/// rows stay zero.
pub fn normalize_parts_forward<T: Scalar>(p: &[T], m: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut out: Vec<T> = p.iter().map(|&v| v.signum() * v.abs().sqrt()).collect();
    let mut norms = vec![T::zero(); m];
    for (row, norm) in out.chunks_exact_mut(c).zip(norms.iter_mut()) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        *norm = n;
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, norms)
}

pub fn normalize_parts_backward<T: Scalar>(
    p: &[T],
    out: &[T],
    norms: &[T],
    dout: &[T],
    c: usize,
) -> Vec<T> {
    let mut dp = vec![T::zero(); p.len()];
    let eps = T::of(SSQRT_EPS);
    let half = T::of(0.5);
    for (k, &n) in norms.iter().enumerate() {
        if n <= T::zero() {
            continue;
        }
        let r = k * c..(k + 1) * c;
        let (o, g) = (&out[r.clone()], &dout[r.clone()]);
        let proj: T = o.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), (&ov, &gv)) in dp[r].iter_mut().zip(&p[k * c..(k + 1) * c]).zip(o.iter().zip(g)) {
            let ds = (gv - ov * proj) / n;
            *d = ds * half / (pv.abs() + eps).sqrt();
        }
    }
    dp
}

// ---------------------------------------------------------------------------
// owned-type operations

pub fn compute_attention<T: Scalar>(
    fm: &FeatureMap<T>,
    projection: &AttentionProjection<T>,
) -> Result<AttentionMaps<T>> {
    if projection.channels != fm.c {
        return Err(Error::Config(format!(
            "attention projection expects {} channels, feature map has {}",
            projection.channels, fm.c
        )));
    }
    if projection.maps == 0 {
        return Err(Error::Config("attention projection needs at least one map".into()));
    }
    let values = attention_forward(
        &fm.values,
        fm.h * fm.w,
        fm.c,
        &projection.weight.value,
        projection.maps,
    );
    Ok(AttentionMaps {
        h: fm.h,
        w: fm.w,
        m: projection.maps,
        values,
    })
}

fn check_bap_shapes<T>(fm: &FeatureMap<T>, att: &AttentionMaps<T>) -> Result<()> {
    if (fm.h, fm.w) != (att.h, att.w) {
        return Err(Error::Shape(format!(
            "feature map is {}x{}, attention is {}x{}",
            fm.h, fm.w, att.h, att.w
        )));
    }
    Ok(())
}

/// Bilinear attention pooling without post-processing.
pub fn bap_pooled<T: Scalar>(fm: &FeatureMap<T>, att: &AttentionMaps<T>) -> Result<PartFeatures<T>> {
    check_bap_shapes(fm, att)?;
    Ok(PartFeatures {
        m: att.m,
        c: fm.c,
        values: bap_pool_forward(&fm.values, &att.values, fm.h * fm.w, fm.c, att.m),
    })
}

/// Bilinear attention pooling with signed square root and row normalization.
pub fn bap<T: Scalar>(fm: &FeatureMap<T>, att: &AttentionMaps<T>) -> Result<PartFeatures<T>> {
    let pooled = bap_pooled(fm, att)?;
    let (values, _) = normalize_parts_forward(&pooled.values, pooled.m, pooled.c);
    Ok(PartFeatures { values, ..pooled })
}

/// Linear classifier over the flattened `M·C` part features.
pub fn classify_parts<T: Scalar>(parts: &PartFeatures<T>, head: &Linear<T>) -> Result<Vec<T>> {
    if head.inputs != parts.m * parts.c {
        return Err(Error::Config(format!(
            "part classifier expects width {}, parts have {}x{}",
            head.inputs, parts.m, parts.c
        )));
    }
    Ok(head.forward(&parts.values, 1))
}

/// Uniform `[0, 1)` attention standing in for an uninformative intervention.
pub fn sample_counterfactual_attention<T: Scalar, R: Rng>(
    h: usize,
    w: usize,
    m: usize,
    rng: &mut R,
) -> Result<AttentionMaps<T>> {
    if h == 0 || w == 0 || m == 0 {
        return Err(Error::Shape(format!("counterfactual shape {h}x{w}x{m}")));
    }
    let values = (0..h * w * m).map(|_| T::of(rng.gen::<f64>())).collect();
    Ok(AttentionMaps { h, w, m, values })
}

pub fn counterfactual_effect<T: Scalar>(
    factual: &[T],
    counterfactuals: &[Vec<T>],
) -> Result<EffectLogits<T>> {
    if counterfactuals.is_empty() {
        return Err(Error::InvalidArgument("no counterfactual samples".into()));
    }
    if let Some(bad) = counterfactuals.iter().find(|c| c.len() != factual.len()) {
        return Err(Error::Shape(format!(
            "counterfactual logits have length {}, factual {}",
            bad.len(),
            factual.len()
        )));
    }
    let s = T::of(counterfactuals.len() as f64);
    let effect = (0..factual.len())
        .map(|k| {
            let mean = counterfactuals.iter().map(|c| c[k]).sum::<T>() / s;
            factual[k] - mean
        })
        .collect();
    Ok(EffectLogits(effect))
}

/// Softmax cross-entropy of one logit vector.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn cal_loss<T: Scalar>(
    factual: &[T],
    effect: &EffectLogits<T>,
    label: usize,
    lambda_cf: T,
) -> Result<T> {
    Ok(cross_entropy(factual, label)? + lambda_cf * cross_entropy(&effect.0, label)?)
}

/// Loss value together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CalLossGrad<T> {
    pub loss: T,
    /// Total gradient w.r.t. the factual logits (both loss terms).
    pub d_factual: Vec<T>,
    /// Gradient w.r.t. each counterfactual sample's logits.
    pub d_counterfactual: Vec<T>,
}

/// `cal_loss` and its gradients through the effect subtraction.
pub fn cal_loss_grad<T: Scalar>(
    factual: &[T],
    counterfactuals: &[Vec<T>],
    label: usize,
    lambda_cf: T,
) -> Result<CalLossGrad<T>> {
    let effect = counterfactual_effect(factual, counterfactuals)?;
    let loss = cal_loss(factual, &effect, label, lambda_cf)?;
    let mut g_fact = softmax(factual);
    g_fact[label] -= T::one();
    let mut g_eff = softmax(&effect.0);
    g_eff[label] -= T::one();
    let s = T::of(counterfactuals.len() as f64);
    let d_factual = g_fact
        .iter()
        .zip(&g_eff)
        .map(|(&a, &b)| a + lambda_cf * b)
        .collect();
    let d_counterfactual = g_eff.iter().map(|&b| -lambda_cf * b / s).collect();
    Ok(CalLossGrad {
        loss,
        d_factual,
        d_counterfactual,
    })
}

// ---------------------------------------------------------------------------
// attention head

/// Attention projection plus part classifier, the head shared by the
/// counterfactual-attention settings.
#[derive(Debug, Clone)]
pub struct AttentionHead<T> {
    pub projection: AttentionProjection<T>,
    pub classifier: Linear<T>,
    /// Fixed multiplier on the normalized parts before the classifier.
    pub feature_scale: T,
}

/// Intermediate values of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadPass<T> {
    pub attention: Vec<T>,
    pub pooled: Vec<T>,
    pub parts: Vec<T>,
    pub norms: Vec<T>,
    pub logits: Vec<T>,
}

/// Per-sample gradient contributions of the head.
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub projection: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub features: Vec<T>,
}

impl<T: Scalar> HeadGrads<T> {
    fn zeros(c: usize, m: usize, k: usize, hw: usize) -> Self {
        Self {
            projection: vec![T::zero(); c * m],
            weight: vec![T::zero(); m * c * k],
            bias: vec![T::zero(); k],
            features: vec![T::zero(); hw * c],
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.projection, &other.projection),
            (&mut self.weight, &other.weight),
            (&mut self.bias, &other.bias),
            (&mut self.features, &other.features),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }
}

impl<T: Scalar> AttentionHead<T> {
    pub fn new<R: Rng>(channels: usize, maps: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            projection: AttentionProjection::new("head.attention", channels, maps, rng),
            classifier: Linear::new("head.classifier", channels * maps, num_classes, rng),
            feature_scale: T::one(),
        }
    }

    pub fn with_feature_scale(mut self, scale: T) -> Self {
        self.feature_scale = scale;
        self
    }

    pub fn channels(&self) -> usize {
        self.projection.channels
    }

    pub fn maps(&self) -> usize {
        self.projection.maps
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs
    }

    pub fn attention(&self, f: &[T], hw: usize) -> Vec<T> {
        attention_forward(f, hw, self.channels(), &self.projection.weight.value, self.maps())
    }

    /// Pools `f` under the given attention and classifies the parts.
    pub fn pass_with(&self, f: &[T], hw: usize, attention: Vec<T>) -> HeadPass<T> {
        let (c, m) = (self.channels(), self.maps());
        let pooled = bap_pool_forward(f, &attention, hw, c, m);
        let (parts, norms) = normalize_parts_forward(&pooled, m, c);
        let scaled: Vec<T> = parts.iter().map(|&v| v * self.feature_scale).collect();
        let logits = self.classifier.forward(&scaled, 1);
        HeadPass {
            attention,
            pooled,
            parts,
            norms,
            logits,
        }
    }

    pub fn pass(&self, f: &[T], hw: usize) -> HeadPass<T> {
        let attention = self.attention(f, hw);
        self.pass_with(f, hw, attention)
    }

    /// Backward through one pass. Gradient flows into the projection only
    /// when `learned_attention` is set.
    pub fn backward_pass(
        &self,
        f: &[T],
        hw: usize,
        pass: &HeadPass<T>,
        d_logits: &[T],
        learned_attention: bool,
        grads: &mut HeadGrads<T>,
    ) {
        let (c, m, k) = (self.channels(), self.maps(), self.num_classes());
        let mc = m * c;
        let mut dw = vec![T::zero(); mc * k];
        matmul(mc, 1, k, &pass.parts, d_logits, &mut dw, T::zero());
        dw.iter_mut().for_each(|v| *v *= self.feature_scale);
        grads.weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
        grads.bias.iter_mut().zip(d_logits).for_each(|(a, b)| *a += *b);

        let mut d_parts = vec![T::zero(); mc];
        matmul_nt(1, k, mc, d_logits, &self.classifier.weight.value, &mut d_parts, T::zero());
        d_parts.iter_mut().for_each(|v| *v *= self.feature_scale);
        let d_pooled = normalize_parts_backward(&pass.pooled, &pass.parts, &pass.norms, &d_parts, c);
        let (df, da) = bap_pool_backward(f, &pass.attention, hw, c, m, &d_pooled, learned_attention);
        grads.features.iter_mut().zip(&df).for_each(|(a, b)| *a += *b);
        if let Some(da) = da {
            let (dproj, df2) = attention_backward(
                f,
                hw,
                c,
                &self.projection.weight.value,
                m,
                &pass.attention,
                &da,
            );
            grads.projection.iter_mut().zip(&dproj).for_each(|(a, b)| *a += *b);
            grads.features.iter_mut().zip(&df2).for_each(|(a, b)| *a += *b);
        }
    }

    /// Full counterfactual-attention loss for one sample.
    ///
    /// Runs the factual pass plus `counterfactual_samples` passes under
    /// uniform random attention drawn from `rng`, and returns the loss,
    /// the factual logits and the gradients scaled by `weight`.
    pub fn cal_sample<R: Rng>(
        &self,
        f: &[T],
        hw: usize,
        label: usize,
        lambda_cf: T,
        counterfactual_samples: usize,
        weight: T,
        rng: &mut R,
    ) -> Result<(T, HeadPass<T>, HeadGrads<T>)> {
        let (c, m) = (self.channels(), self.maps());
        let factual = self.pass(f, hw);
        let cf_passes: Vec<HeadPass<T>> = (0..counterfactual_samples)
            .map(|_| {
                let att = (0..hw * m).map(|_| T::of(rng.gen::<f64>())).collect();
                self.pass_with(f, hw, att)
            })
            .collect();
        let cf_logits: Vec<Vec<T>> = cf_passes.iter().map(|p| p.logits.clone()).collect();
        let lg = cal_loss_grad(&factual.logits, &cf_logits, label, lambda_cf)?;

        let mut grads = HeadGrads::zeros(c, m, self.num_classes(), hw);
        let d_fact: Vec<T> = lg.d_factual.iter().map(|&g| g * weight).collect();
        self.backward_pass(f, hw, &factual, &d_fact, true, &mut grads);
        let d_cf: Vec<T> = lg.d_counterfactual.iter().map(|&g| g * weight).collect();
        for p in &cf_passes {
            self.backward_pass(f, hw, p, &d_cf, false, &mut grads);
        }
        Ok((lg.loss, factual, grads))
    }

    pub fn empty_grads(&self, hw: usize) -> HeadGrads<T> {
        HeadGrads::zeros(self.channels(), self.maps(), self.num_classes(), hw)
    }
}
