//! The six training-and-evaluation settings over a backbone adapter.
//!
//! | setting     | head      | backbone | training views      | inference |
//! |-------------|-----------|----------|---------------------|-----------|
//! | `FZ`        | pooled    | frozen   | raw                 | one pass  |
//! | `FT`        | pooled    | trained  | raw                 | one pass  |
//! | `CAL`       | attention | trained  | raw + crop/mask     | two pass  |
//! | `CAL_NC`    | attention | trained  | raw + crop/mask     | one pass  |
//! | `CALMIX`    | attention | trained  | raw + crop/mask/mix | two pass  |
//! | `CALMIX_NC` | attention | trained  | raw + crop/mask/mix | one pass  |

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, AttentionMaps, HeadGrads, DEFAULT_MAPS};
use crate::augment::{
    attention_crop, attention_mask, bbox_from_attention, mix_pair, pair_same_class,
    select_attention_map, select_attention_map_argmax, Image, DEFAULT_CROP_PADDING,
    DEFAULT_CROP_THRESHOLD, DEFAULT_MASK_THRESHOLD,
};
use crate::backbones::{freeze, Backbone, BackboneInit, Registry, Tape};
use crate::datasets::{epoch_order, BaselineAugment, LabeledDataset, Preprocessing};
use crate::error::{Error, Result};
use crate::nn::{Buffer, Linear, Param};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_sum_exp, softmax, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrEvSetting {
    #[serde(rename = "FZ")]
    Fz,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "CAL")]
    Cal,
    #[serde(rename = "CAL_NC")]
    CalNc,
    #[serde(rename = "CALMIX")]
    CalMix,
    #[serde(rename = "CALMIX_NC")]
    CalMixNc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    OnePass,
    TwoPass,
}

impl TrEvSetting {
    pub const ALL: [TrEvSetting; 6] = [
        TrEvSetting::Fz,
        TrEvSetting::Ft,
        TrEvSetting::Cal,
        TrEvSetting::CalNc,
        TrEvSetting::CalMix,
        TrEvSetting::CalMixNc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrEvSetting::Fz => "FZ",
            TrEvSetting::Ft => "FT",
            TrEvSetting::Cal => "CAL",
            TrEvSetting::CalNc => "CAL_NC",
            TrEvSetting::CalMix => "CALMIX",
            TrEvSetting::CalMixNc => "CALMIX_NC",
        }
    }

    pub fn inference_path(self) -> InferencePath {
        match self {
            TrEvSetting::Cal | TrEvSetting::CalMix => InferencePath::TwoPass,
            _ => InferencePath::OnePass,
        }
    }

    pub fn passes_per_sample(self) -> u64 {
        match self.inference_path() {
            InferencePath::OnePass => 1,
            InferencePath::TwoPass => 2,
        }
    }

    pub fn uses_attention_head(self) -> bool {
        !matches!(self, TrEvSetting::Fz | TrEvSetting::Ft)
    }

    pub fn mixes(self) -> bool {
        matches!(self, TrEvSetting::CalMix | TrEvSetting::CalMixNc)
    }

    pub fn freezes_backbone(self) -> bool {
        self == TrEvSetting::Fz
    }

    /// Settings that train identically and differ only at inference.
    pub fn shares_training_with(self, other: TrEvSetting) -> bool {
        use TrEvSetting::*;
        matches!(
            (self, other),
            (Cal, CalNc) | (CalNc, Cal) | (CalMix, CalMixNc) | (CalMixNc, CalMix)
        ) || self == other
    }
}

impl fmt::Display for TrEvSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrEvSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        TrEvSetting::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown setting `{s}` (expected one of FZ, FT, CAL, CAL_NC, CALMIX, CALMIX_NC)"
                ))
            })
    }
}

pub const DEFAULT_FEATURE_SCALE: f64 = 1.0;

/// Knobs of the counterfactual-attention head and its augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalConfig {
    pub maps: usize,
    pub lambda_cf: f64,
    pub counterfactual_samples: usize,
    pub crop_threshold: f32,
    pub mask_threshold: f32,
    pub crop_padding: f32,
    /// Multiplier on the normalized part features feeding the classifier.
    pub feature_scale: f64,
}

impl Default for CalConfig {
    fn default() -> Self {
        Self {
            maps: DEFAULT_MAPS,
            lambda_cf: 1.0,
            counterfactual_samples: 1,
            crop_threshold: DEFAULT_CROP_THRESHOLD,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            crop_padding: DEFAULT_CROP_PADDING,
            feature_scale: DEFAULT_FEATURE_SCALE,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head<T> {
    /// Global average pooling followed by a linear classifier.
    Pooled(Linear<T>),
    Attention(AttentionHead<T>),
}

impl<T: Scalar> Head<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Head::Pooled(l) => vec![&l.weight, &l.bias],
            Head::Attention(a) => vec![
                &a.projection.weight,
                &a.classifier.weight,
                &a.classifier.bias,
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Head::Pooled(l) => vec![&mut l.weight, &mut l.bias],
            Head::Attention(a) => vec![
                &mut a.projection.weight,
                &mut a.classifier.weight,
                &mut a.classifier.bias,
            ],
        }
    }

    /// Flattened input width of the final classifier.
    pub fn classifier_width(&self) -> usize {
        match self {
            Head::Pooled(l) => l.inputs,
            Head::Attention(a) => a.classifier.inputs,
        }
    }
}

/// Backbone invocation counters.
#[derive(Debug, Default)]
pub struct PassCounter {
    invocations: AtomicU64,
    samples: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCount {
    /// Batched backbone calls.
    pub invocations: u64,
    /// Samples pushed through the backbone.
    pub samples: u64,
}

impl PassCounter {
    fn record(&self, samples: usize) {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        self.samples.fetch_add(samples as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> PassCount {
        PassCount {
            invocations: self.invocations.load(Ordering::Relaxed),
            samples: self.samples.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.invocations.store(0, Ordering::Relaxed);
        self.samples.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        let c = self.get();
        Self {
            invocations: AtomicU64::new(c.invocations),
            samples: AtomicU64::new(c.samples),
        }
    }
}

/// Backbone plus setting-appropriate head.
#[derive(Clone)]
pub struct ModelBundle<T: Scalar> {
    pub setting: TrEvSetting,
    pub backbone_name: String,
    pub backbone: Box<dyn Backbone<T>>,
    pub head: Head<T>,
    pub num_classes: usize,
    pub image_size: usize,
    pub cal: CalConfig,
    pub preprocessing: Preprocessing,
    counter: PassCounter,
}

impl<T: Scalar> fmt::Debug for ModelBundle<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelBundle")
            .field("setting", &self.setting)
            .field("backbone", &self.backbone_name)
            .field("num_classes", &self.num_classes)
            .field("image_size", &self.image_size)
            .finish_non_exhaustive()
    }
}

/// Builds a model for `setting`; the seed drives every initialization.
pub fn build_model<T: Scalar>(
    registry: &Registry<T>,
    setting: TrEvSetting,
    backbone_name: &str,
    num_classes: usize,
    image_size: usize,
    cal: CalConfig,
    seed: u64,
) -> Result<ModelBundle<T>> {
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be ≥ 2, got {num_classes}")));
    }
    if cal.maps == 0 || cal.counterfactual_samples == 0 {
        return Err(Error::Config(
            "attention maps and counterfactual samples must be ≥ 1".into(),
        ));
    }
    let mut backbone = registry.build(backbone_name, BackboneInit { seed })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
    let channels = backbone.channels();
    let head = if setting.uses_attention_head() {
        Head::Attention(
            AttentionHead::new(channels, cal.maps, num_classes, &mut rng)
                .with_feature_scale(T::of(cal.feature_scale)),
        )
    } else {
        Head::Pooled(Linear::new("head.classifier", channels, num_classes, &mut rng))
    };
    if setting.freezes_backbone() {
        freeze(backbone.as_mut());
    }
    Ok(ModelBundle {
        setting,
        backbone_name: backbone_name.to_string(),
        backbone,
        head,
        num_classes,
        image_size,
        cal,
        preprocessing: Preprocessing::default(),
        counter: PassCounter::default(),
    })
}

/// A named state tensor for checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        self.backbone.buffers()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.head.params().iter().map(|p| p.len()).sum()
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.backbone.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Parameters followed by buffers, in a stable order.
    pub fn state_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out: Vec<NamedTensor<T>> = self
            .params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
            .collect();
        out.extend(self.buffers().into_iter().map(|b| NamedTensor {
            name: b.name.clone(),
            shape: vec![b.value.len()],
            values: b.value.clone(),
        }));
        out
    }

    /// Overwrites state tensors by name; every tensor must be supplied with
    /// the right shape.
    pub fn load_state_tensors(&mut self, tensors: Vec<NamedTensor<T>>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, NamedTensor<T>> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let expected = self.state_tensors();
        for e in &expected {
            let t = by_name
                .get(&e.name)
                .ok_or_else(|| Error::Shape(format!("tensor `{}` missing from state", e.name)))?;
            if t.shape != e.shape || t.values.len() != e.values.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    e.name, t.shape, e.shape
                )));
            }
        }
        if by_name.len() != expected.len() {
            let extra: Vec<&String> = by_name
                .keys()
                .filter(|k| !expected.iter().any(|e| &e.name == *k))
                .collect();
            return Err(Error::Shape(format!("unexpected tensors in state: {extra:?}")));
        }
        for p in self.params_mut() {
            p.value = by_name.remove(&p.name).expect("checked above").values;
        }
        for b in self.backbone.buffers_mut() {
            b.value = by_name.remove(&b.name).expect("checked above").values;
        }
        Ok(())
    }

    pub fn passes(&self) -> PassCount {
        self.counter.get()
    }

    pub fn reset_passes(&self) {
        self.counter.reset()
    }

    fn backbone_infer(&self, x: &Batch<T>) -> Batch<T> {
        self.counter.record(x.n);
        self.backbone.forward(x)
    }

    fn backbone_train(&mut self, x: &Batch<T>) -> (Batch<T>, Tape) {
        self.counter.record(x.n);
        self.backbone.forward_train(x)
    }
}

/// Monotone count of backbone passes since the last reset.
pub fn count_backbone_passes<T: Scalar>(model: &ModelBundle<T>) -> PassCount {
    model.passes()
}

/// Normalized model input from `[0, 1]` images.
pub fn images_to_batch<T: Scalar>(images: &[&Image], prep: &Preprocessing) -> Result<Batch<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.h, first.w);
    if let Some(bad) = images.iter().find(|im| (im.h, im.w) != (h, w)) {
        return Err(Error::Shape(format!(
            "mixed image sizes in batch: {}x{} and {}x{}",
            h, w, bad.h, bad.w
        )));
    }
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for im in images {
        for px in im.data.chunks_exact(3) {
            for ch in 0..3 {
                data.push(T::of(((px[ch] - prep.mean[ch]) / prep.std[ch]) as f64));
            }
        }
    }
    Batch::from_vec(images.len(), h, w, 3, data)
}

fn global_average_pool<T: Scalar>(f: &Batch<T>) -> Vec<T> {
    let hw = T::of((f.h * f.w) as f64);
    let mut out = vec![T::zero(); f.n * f.c];
    for i in 0..f.n {
        let row = &mut out[i * f.c..(i + 1) * f.c];
        for px in f.sample(i).chunks_exact(f.c) {
            row.iter_mut().zip(px).for_each(|(o, v)| *o += *v);
        }
        row.iter_mut().for_each(|o| *o /= hw);
    }
    out
}

// ---------------------------------------------------------------------------
// optimizer

/// SGD with momentum; learning rate supplied per step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Global gradient norm seen by the last step, before clipping.
    pub last_grad_norm: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm: None,
            last_grad_norm: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Updates every trainable parameter and clears all gradients.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let norm = params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        self.last_grad_norm = norm;
        let factor = match self.clip_norm {
            Some(c) if norm > c => T::of(c / norm),
            _ => T::one(),
        };
        let (mom, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if p.trainable {
                for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    let g = *g * factor + wd * *w;
                    *vel = mom * *vel + g;
                    *w -= lr * *vel;
                }
            }
            p.zero_grad();
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// training step

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub loss: T,
    /// Row-major `B × K` logits per branch (raw view first).
    pub logits: Vec<Vec<T>>,
    /// Backbone sample-passes performed by this step.
    pub pass_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Crop,
    Mask,
    Mix,
}

fn validate_batch<T: Scalar>(model: &ModelBundle<T>, images: &[Image], labels: &[usize]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            num_classes: model.num_classes,
        });
    }
    if let Some(im) = images
        .iter()
        .find(|im| (im.h, im.w) != (model.image_size, model.image_size))
    {
        return Err(Error::Shape(format!(
            "image {}x{} does not match model size {}",
            im.h, im.w, model.image_size
        )));
    }
    Ok(())
}

/// Evaluates the attention head on every sample of one view.
fn cal_view<T: Scalar>(
    head: &AttentionHead<T>,
    features: &Batch<T>,
    labels: &[usize],
    cal: &CalConfig,
    weight: T,
    seeds: &[u64],
) -> Result<(T, Vec<T>, Vec<Vec<T>>, HeadGrads<T>, Batch<T>)> {
    let hw = features.h * features.w;
    let per_sample = par::map_range(features.n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        head.cal_sample(
            features.sample(i),
            hw,
            labels[i],
            T::of(cal.lambda_cf),
            cal.counterfactual_samples,
            weight,
            &mut rng,
        )
    });
    let mut total = head.empty_grads(hw);
    let mut d_features = Batch::zeros(features.n, features.h, features.w, features.c);
    let mut loss_sum = T::zero();
    let mut logits = Vec::with_capacity(features.n * head.num_classes());
    let mut attention = Vec::with_capacity(features.n);
    for (i, r) in per_sample.into_iter().enumerate() {
        let (loss, pass, mut g) = r?;
        loss_sum += loss;
        logits.extend_from_slice(&pass.logits);
        attention.push(pass.attention);
        d_features.sample_mut(i).copy_from_slice(&g.features);
        g.features.clear();
        total.projection.iter_mut().zip(&g.projection).for_each(|(a, b)| *a += *b);
        total.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += *b);
        total.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += *b);
    }
    Ok((loss_sum, logits, attention, total, d_features))
}

fn apply_head_grads<T: Scalar>(head: &mut AttentionHead<T>, g: &HeadGrads<T>) {
    head.projection.weight.accumulate(&g.projection);
    head.classifier.weight.accumulate(&g.weight);
    head.classifier.bias.accumulate(&g.bias);
}

/// Builds the augmented view for the counterfactual-attention settings.
fn augmented_view<T: Scalar>(
    setting: TrEvSetting,
    images: &[Image],
    labels: &[usize],
    attention: &[Vec<T>],
    feature_hw: (usize, usize),
    cal: &CalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Image>, Vec<AugmentKind>)> {
    let (fh, fw) = feature_hw;
    let size = (images[0].h, images[0].w);
    let selected: Vec<_> = attention
        .iter()
        .map(|a| {
            let maps = AttentionMaps {
                h: fh,
                w: fw,
                m: cal.maps,
                values: a.clone(),
            };
            select_attention_map(&maps, size, rng)
        })
        .collect();
    let kinds: Vec<AugmentKind> = (0..images.len())
        .map(|_| {
            if setting.mixes() {
                match rng.gen_range(0..3) {
                    0 => AugmentKind::Crop,
                    1 => AugmentKind::Mask,
                    _ => AugmentKind::Mix,
                }
            } else if rng.gen::<bool>() {
                AugmentKind::Crop
            } else {
                AugmentKind::Mask
            }
        })
        .collect();
    let partners = if setting.mixes() {
        pair_same_class(labels, rng)
    } else {
        vec![None; images.len()]
    };
    let crop = |i: usize| -> Result<Image> {
        let b = bbox_from_attention(&selected[i], cal.crop_threshold)
            .padded(cal.crop_padding, size.0, size.1);
        attention_crop(&images[i], &b, size)
    };
    let jobs: Vec<usize> = (0..images.len()).collect();
    let views: Vec<Result<(Image, AugmentKind)>> = par::map_slice(&jobs, |&i| match kinds[i] {
        AugmentKind::Crop => Ok((crop(i)?, AugmentKind::Crop)),
        AugmentKind::Mask => Ok((
            attention_mask(&images[i], &selected[i], cal.mask_threshold)?,
            AugmentKind::Mask,
        )),
        AugmentKind::Mix => match partners[i] {
            Some(j) => Ok((
                mix_pair(&images[i], &selected[i], &images[j], &selected[j], cal.crop_threshold)?.0,
                AugmentKind::Mix,
            )),
            None => Ok((crop(i)?, AugmentKind::Crop)),
        },
    });
    let mut out = Vec::with_capacity(images.len());
    let mut used = Vec::with_capacity(images.len());
    for v in views {
        let (img, k) = v?;
        out.push(img);
        used.push(k);
    }
    Ok((out, used))
}

/// One optimization step of `model.setting` on a batch of `[0, 1]` images.
pub fn train_step<T: Scalar>(
    model: &mut ModelBundle<T>,
    images: &[Image],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    optimizer: &mut Sgd<T>,
    lr: f64,
) -> Result<StepOutput<T>> {
    validate_batch(model, images, labels)?;
    model.zero_grad();
    let setting = model.setting;
    let b = images.len();
    let refs: Vec<&Image> = images.iter().collect();
    let x = images_to_batch::<T>(&refs, &model.preprocessing)?;

    let out = if !setting.uses_attention_head() {
        let frozen = setting.freezes_backbone();
        let (features, tape) = if frozen {
            (model.backbone_infer(&x), None)
        } else {
            let (f, t) = model.backbone_train(&x);
            (f, Some(t))
        };
        let pooled = global_average_pool(&features);
        let Head::Pooled(linear) = &mut model.head else {
            return Err(Error::Config(format!("{setting} needs a pooled head")));
        };
        let logits = linear.forward(&pooled, b);
        let k = model.num_classes;
        let mut loss = T::zero();
        let mut d_logits = vec![T::zero(); b * k];
        for i in 0..b {
            let row = &logits[i * k..(i + 1) * k];
            let p = softmax(row);
            loss += log_sum_exp(row) - row[labels[i]];
            for (j, pj) in p.iter().enumerate() {
                let y = if j == labels[i] { T::one() } else { T::zero() };
                d_logits[i * k + j] = (*pj - y) / T::of(b as f64);
            }
        }
        let d_pooled = linear.backward(&pooled, &d_logits, b);
        if let Some(tape) = tape {
            let hw = T::of((features.h * features.w) as f64);
            let mut d_features = Batch::zeros(features.n, features.h, features.w, features.c);
            for i in 0..b {
                let g = &d_pooled[i * features.c..(i + 1) * features.c];
                for px in d_features.sample_mut(i).chunks_exact_mut(features.c) {
                    px.iter_mut().zip(g).for_each(|(d, v)| *d = *v / hw);
                }
            }
            model.backbone.backward(tape, &d_features);
        }
        StepOutput {
            loss: loss / T::of(b as f64),
            logits: vec![logits],
            pass_count: b as u64,
        }
    } else {
        let cal = model.cal;
        let weight = T::one() / T::of(2.0 * b as f64);
        let (f1, tape1) = model.backbone_train(&x);
        let seeds1: Vec<u64> = (0..b).map(|_| rng.gen()).collect();
        let Head::Attention(head) = &model.head else {
            return Err(Error::Config(format!("{setting} needs an attention head")));
        };
        let (loss1, logits1, attention, g1, d_f1) = cal_view(head, &f1, labels, &cal, weight, &seeds1)?;
        let (aug, _) = augmented_view(setting, images, labels, &attention, (f1.h, f1.w), &cal, rng)?;
        let aug_refs: Vec<&Image> = aug.iter().collect();
        let x2 = images_to_batch::<T>(&aug_refs, &model.preprocessing)?;
        let (f2, tape2) = model.backbone_train(&x2);
        let seeds2: Vec<u64> = (0..b).map(|_| rng.gen()).collect();
        let Head::Attention(head) = &mut model.head else {
            unreachable!("head checked above");
        };
        let (loss2, logits2, _, g2, d_f2) = cal_view(head, &f2, labels, &cal, weight, &seeds2)?;
        apply_head_grads(head, &g1);
        apply_head_grads(head, &g2);
        model.backbone.backward(tape2, &d_f2);
        model.backbone.backward(tape1, &d_f1);
        StepOutput {
            loss: (loss1 + loss2) / T::of(2.0 * b as f64),
            logits: vec![logits1, logits2],
            pass_count: 2 * b as u64,
        }
    };
    if !out.loss.is_finite() {
        model.zero_grad();
        return Err(Error::Diverged(format!("non-finite loss {:?}", out.loss)));
    }
    optimizer.step(model.params_mut(), lr);
    Ok(out)
}

// ---------------------------------------------------------------------------
// inference

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput<T> {
    /// `B × K` logits of the global pass.
    pub global_logits: Vec<T>,
    /// `B × K` logits of the cropped pass, for two-pass settings.
    pub crop_logits: Option<Vec<T>>,
    /// `B × K` fused probabilities.
    pub probabilities: Vec<T>,
}

fn head_logits<T: Scalar>(head: &Head<T>, f: &Batch<T>) -> (Vec<T>, Vec<Vec<T>>) {
    match head {
        Head::Pooled(linear) => (linear.forward(&global_average_pool(f), f.n), Vec::new()),
        Head::Attention(att) => {
            let hw = f.h * f.w;
            let passes = par::map_range(f.n, |i| att.pass(f.sample(i), hw));
            let mut logits = Vec::with_capacity(f.n * att.num_classes());
            let mut attention = Vec::with_capacity(f.n);
            for p in passes {
                logits.extend_from_slice(&p.logits);
                attention.push(p.attention);
            }
            (logits, attention)
        }
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    logits.chunks_exact(k).flat_map(softmax).collect()
}

/// Runs the inference path of `setting` (which may differ from the
/// training setting as long as the head family matches).
pub fn infer_detailed<T: Scalar>(
    setting: TrEvSetting,
    model: &ModelBundle<T>,
    images: &[Image],
) -> Result<InferenceOutput<T>> {
    if setting.uses_attention_head() != matches!(model.head, Head::Attention(_)) {
        return Err(Error::Config(format!(
            "setting {setting} is incompatible with a model trained as {}",
            model.setting
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty inference batch".into()));
    }
    let k = model.num_classes;
    let refs: Vec<&Image> = images.iter().collect();
    let x = images_to_batch::<T>(&refs, &model.preprocessing)?;
    let features = model.backbone_infer(&x);
    let (global_logits, attention) = head_logits(&model.head, &features);
    let mut probabilities = softmax_rows(&global_logits, k);
    let mut crop_logits = None;
    if setting.inference_path() == InferencePath::TwoPass {
        let cal = &model.cal;
        let size = (images[0].h, images[0].w);
        let jobs: Vec<usize> = (0..images.len()).collect();
        let crops: Vec<Result<Image>> = par::map_slice(&jobs, |&i| {
            let maps = AttentionMaps {
                h: features.h,
                w: features.w,
                m: cal.maps,
                values: attention[i].clone(),
            };
            let sel = select_attention_map_argmax(&maps, size);
            let b = bbox_from_attention(&sel, cal.crop_threshold).padded(cal.crop_padding, size.0, size.1);
            attention_crop(&images[i], &b, size)
        });
        let crops: Vec<Image> = crops.into_iter().collect::<Result<_>>()?;
        let crop_refs: Vec<&Image> = crops.iter().collect();
        let x2 = images_to_batch::<T>(&crop_refs, &model.preprocessing)?;
        let f2 = model.backbone_infer(&x2);
        let (logits2, _) = head_logits(&model.head, &f2);
        let p2 = softmax_rows(&logits2, k);
        let half = T::of(0.5);
        probabilities
            .iter_mut()
            .zip(&p2)
            .for_each(|(a, b)| *a = (*a + *b) * half);
        crop_logits = Some(logits2);
    }
    Ok(InferenceOutput {
        global_logits,
        crop_logits,
        probabilities,
    })
}

/// Attention maps of the raw view, one per image.
pub fn attention_maps<T: Scalar>(model: &ModelBundle<T>, images: &[Image]) -> Result<Vec<AttentionMaps<T>>> {
    let Head::Attention(head) = &model.head else {
        return Err(Error::Config(format!(
            "{} has no attention head",
            model.setting
        )));
    };
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Image> = images.iter().collect();
    let x = images_to_batch::<T>(&refs, &model.preprocessing)?;
    let f = model.backbone_infer(&x);
    let hw = f.h * f.w;
    Ok((0..f.n)
        .map(|i| AttentionMaps {
            h: f.h,
            w: f.w,
            m: head.maps(),
            values: head.attention(f.sample(i), hw),
        })
        .collect())
}

/// Row-major `B × K` class probabilities.
pub fn infer<T: Scalar>(setting: TrEvSetting, model: &ModelBundle<T>, images: &[Image]) -> Result<Vec<T>> {
    Ok(infer_detailed(setting, model, images)?.probabilities)
}

pub fn predict<T: Scalar>(
    setting: TrEvSetting,
    model: &ModelBundle<T>,
    images: &[Image],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let probs = infer(setting, model, chunk)?;
        out.extend(probs.chunks_exact(model.num_classes).map(argmax));
    }
    Ok(out)
}

/// Top-1 accuracy of `model` on `data` under the inference path of `setting`.
pub fn evaluate<T: Scalar>(
    setting: TrEvSetting,
    model: &ModelBundle<T>,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<f64> {
    let images: Vec<Image> = data.items.iter().map(|(im, _)| im.clone()).collect();
    let preds = predict(setting, model, &images, batch_size)?;
    crate::bench::top1_accuracy(&preds, &data.labels())
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub baseline: BaselineAugment,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            grad_clip: None,
            baseline: BaselineAugment::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains for `opts.epochs` epochs with cosine decay; `on_epoch` sees each
/// epoch's mean loss.
pub fn fit<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &LabeledDataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let bs = opts.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs);
    let total = steps_per_epoch * opts.epochs;
    let mut opt = Sgd::new(opts.momentum, opts.weight_decay).with_clip_norm(opts.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x7EA1));
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let order = epoch_order(data.len(), opts.seed, epoch);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let aug_seeds: Vec<u64> = idx.iter().map(|_| rng.gen()).collect();
            let jobs: Vec<(usize, u64)> = idx.iter().copied().zip(aug_seeds).collect();
            let images = par::map_slice(&jobs, |&(i, s)| {
                opts.baseline.apply(&data.items[i].0, &mut ChaCha8Rng::seed_from_u64(s))
            });
            let labels: Vec<usize> = idx.iter().map(|&i| data.items[i].1).collect();
            let lr = cosine_lr(opts.learning_rate, step, total);
            let out = train_step(model, &images, &labels, &mut rng, &mut opt, lr)?;
            sum += out.loss.as_f64();
            batches += 1;
            step += 1;
        }
        let mean = sum / batches as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: step,
    })
}
