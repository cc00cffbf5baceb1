//! Backbone adapters: a uniform interface over feature extractors, a name
//! registry, and the reference [`TinyConvNet`].

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, BatchNorm,
    BatchNormTape, Buffer, Conv3x3, Param,
};
use crate::scalar::Scalar;
use crate::tensor::Batch;

/// Opaque activations saved by [`Backbone::forward_train`].
pub type Tape = Box<dyn Any + Send>;

/// A feature extractor mapping `(B, H, W, 3)` images to
/// `(B, ceil(H/r), ceil(W/r), C)` feature maps.
pub trait Backbone<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Feature channels `C`.
    fn channels(&self) -> usize;

    /// Spatial reduction factor `r`.
    fn reduction(&self) -> usize;

    fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.reduction()), w.div_ceil(self.reduction()))
    }

    /// Inference-mode forward pass; must be deterministic.
    fn forward(&self, images: &Batch<T>) -> Batch<T>;

    /// Training-mode forward pass (batch statistics, state updates).
    fn forward_train(&mut self, images: &Batch<T>) -> (Batch<T>, Tape);

    /// Accumulates parameter gradients for a previous `forward_train`.
    fn backward(&mut self, tape: Tape, d_features: &Batch<T>);

    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }

    fn box_clone(&self) -> Box<dyn Backbone<T>>;
}

impl<T: Scalar> Clone for Box<dyn Backbone<T>> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Marks every backbone parameter non-trainable. The forward pass is unchanged.
pub fn freeze<T: Scalar>(backbone: &mut dyn Backbone<T>) {
    for p in backbone.params_mut() {
        p.trainable = false;
    }
}

pub fn trainable_count<T: Scalar>(backbone: &dyn Backbone<T>) -> usize {
    backbone
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.len())
        .sum()
}

pub fn is_frozen<T: Scalar>(backbone: &dyn Backbone<T>) -> bool {
    backbone.params().iter().all(|p| !p.trainable)
}

// ---------------------------------------------------------------------------
// TinyConvNet

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv3x3<T>,
    bn: BatchNorm<T>,
}

struct BlockTape<T> {
    input: Batch<T>,
    bn: BatchNormTape<T>,
    activated: Batch<T>,
    pool_argmax: Vec<u32>,
}

/// Conv(3×3) → BatchNorm → ReLU → 2×2 max-pool, repeated per width.
#[derive(Debug, Clone)]
pub struct TinyConvNet<T> {
    name: String,
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> TinyConvNet<T> {
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn new(widths: &[usize], seed: u64) -> Self {
        assert!(!widths.is_empty(), "TinyConvNet needs at least one block");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let block = ConvBlock {
                    conv: Conv3x3::new(&format!("backbone.block{i}.conv"), cin, cout, &mut rng),
                    bn: BatchNorm::new(&format!("backbone.block{i}.bn"), cout),
                };
                cin = cout;
                block
            })
            .collect();
        Self {
            name: "tiny".into(),
            blocks,
        }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(&Self::DEFAULT_WIDTHS, seed)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl<T: Scalar> Backbone<T> for TinyConvNet<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.cout).unwrap_or(3)
    }

    fn reduction(&self) -> usize {
        1 << self.blocks.len()
    }

    fn forward(&self, images: &Batch<T>) -> Batch<T> {
        let mut x = images.clone();
        for b in &self.blocks {
            let mut y = b.bn.forward_eval(&b.conv.forward(&x));
            relu_inplace(&mut y);
            x = max_pool2(&y).0;
        }
        x
    }

    fn forward_train(&mut self, images: &Batch<T>) -> (Batch<T>, Tape) {
        let mut x = images.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let conv_out = b.conv.forward(&x);
            let (mut y, bn_tape) = b.bn.forward_train(&conv_out);
            relu_inplace(&mut y);
            let (pooled, arg) = max_pool2(&y);
            tapes.push(BlockTape {
                input: std::mem::replace(&mut x, pooled),
                bn: bn_tape,
                activated: y,
                pool_argmax: arg,
            });
        }
        (x, Box::new(tapes))
    }

    fn backward(&mut self, tape: Tape, d_features: &Batch<T>) {
        let tapes = *tape
            .downcast::<Vec<BlockTape<T>>>()
            .expect("tape produced by TinyConvNet::forward_train");
        let mut grad = d_features.clone();
        for (i, (b, t)) in self.blocks.iter_mut().zip(tapes).enumerate().rev() {
            let a = &t.activated;
            let mut d = max_pool2_backward((a.n, a.h, a.w, a.c), &t.pool_argmax, &grad);
            relu_backward_inplace(a, &mut d);
            let d = b.bn.backward(&t.bn, &d);
            match b.conv.backward(&t.input, &d, i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.conv.weight, &b.bn.gamma, &b.bn.beta])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.conv.weight, &mut b.bn.gamma, &mut b.bn.beta])
            .collect()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.bn.running_mean, &b.bn.running_var])
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }

    fn box_clone(&self) -> Box<dyn Backbone<T>> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// fixed-latency stub

/// Parameter-free backbone that sleeps a fixed time per batch and returns
/// constant features. Used to calibrate the throughput harness.
#[derive(Debug, Clone)]
pub struct FixedLatency {
    pub latency: Duration,
    pub channels: usize,
    pub reduction: usize,
}

impl FixedLatency {
    pub fn new(latency: Duration) -> Self {
        Self {
            latency,
            channels: 8,
            reduction: 16,
        }
    }
}

impl<T: Scalar> Backbone<T> for FixedLatency {
    fn name(&self) -> &str {
        "fixed-latency"
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn reduction(&self) -> usize {
        self.reduction
    }

    fn forward(&self, images: &Batch<T>) -> Batch<T> {
        std::thread::sleep(self.latency);
        let (h, w) = (images.h.div_ceil(self.reduction), images.w.div_ceil(self.reduction));
        let mut out = Batch::zeros(images.n, h, w, self.channels);
        out.data.iter_mut().for_each(|v| *v = T::one());
        out
    }

    fn forward_train(&mut self, images: &Batch<T>) -> (Batch<T>, Tape) {
        (Backbone::<T>::forward(self, images), Box::new(()))
    }

    fn backward(&mut self, _tape: Tape, _d_features: &Batch<T>) {}

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn box_clone(&self) -> Box<dyn Backbone<T>> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// registry

/// Arguments handed to a backbone constructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneInit {
    pub seed: u64,
}

pub type Constructor<T> = Arc<dyn Fn(BackboneInit) -> Box<dyn Backbone<T>> + Send + Sync>;

/// Name → constructor map. Listing is sorted by name.
pub struct Registry<T> {
    entries: BTreeMap<String, Constructor<T>>,
}

impl<T: Scalar> Default for Registry<T> {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl<T: Scalar> Registry<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// `tiny`, `tiny-1block` and the `fixed-latency` stub (10 ms per batch).
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("tiny", |init| Box::new(TinyConvNet::<T>::standard(init.seed)))
            .expect("fresh registry");
        r.register("tiny-1block", |init| {
            Box::new(TinyConvNet::<T>::new(&[16], init.seed).with_name("tiny-1block"))
        })
        .expect("fresh registry");
        r.register("fixed-latency", |_| {
            Box::new(FixedLatency::new(Duration::from_millis(10)))
        })
        .expect("fresh registry");
        r
    }

    pub fn register<F>(&mut self, name: &str, constructor: F) -> Result<()>
    where
        F: Fn(BackboneInit) -> Box<dyn Backbone<T>> + Send + Sync + 'static,
    {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateBackbone(name.to_string()));
        }
        self.entries.insert(name.to_string(), Arc::new(constructor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Constructor<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
    }

    pub fn build(&self, name: &str, init: BackboneInit) -> Result<Box<dyn Backbone<T>>> {
        Ok((self.get(name)?)(init))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// conformance

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> ConformanceCheck {
    ConformanceCheck {
        name,
        passed,
        detail,
    }
}

fn probe_batch<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Batch<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * h * w * 3).map(|_| T::of(rng.gen::<f64>())).collect();
    Batch::from_vec(n, h, w, 3, data).expect("consistent probe shape")
}

/// Adapter contract checks: shape rule, inference determinism, finiteness,
/// and freeze semantics.
pub fn conformance<T: Scalar>(backbone: &dyn Backbone<T>, image_size: usize) -> Vec<ConformanceCheck> {
    let mut out = Vec::new();
    let r = backbone.reduction();
    for (h, w) in [(image_size, image_size), (image_size + 3, image_size.saturating_sub(5).max(8))] {
        let x = probe_batch::<T>(2, h, w, 1);
        let y = backbone.forward(&x);
        let want = (2, h.div_ceil(r), w.div_ceil(r), backbone.channels());
        let got = (y.n, y.h, y.w, y.c);
        out.push(check(
            "shape",
            got == want,
            format!("input {h}x{w}: expected {want:?}, got {got:?}"),
        ));
    }
    let x = probe_batch::<T>(3, image_size, image_size, 2);
    let a = backbone.forward(&x);
    let b = backbone.forward(&x);
    out.push(check(
        "deterministic",
        a == b,
        "two inference passes on the same input".into(),
    ));
    out.push(check(
        "finite",
        a.data.iter().all(|v| v.is_finite()),
        "all feature entries finite".into(),
    ));
    let mut frozen = backbone.box_clone();
    freeze(frozen.as_mut());
    let count = trainable_count(frozen.as_ref());
    out.push(check(
        "freeze-count",
        count == 0,
        format!("{count} trainable values after freeze"),
    ));
    out.push(check(
        "freeze-forward",
        frozen.forward(&x) == a,
        "forward unchanged by freeze".into(),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_sorted_and_rejects_duplicates() {
        let mut r = Registry::<f32>::with_defaults();
        assert!(r.names().contains(&"tiny".to_string()));
        let names = r.names();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert!(matches!(
            r.register("tiny", |i| Box::new(TinyConvNet::<f32>::standard(i.seed))),
            Err(Error::DuplicateBackbone(_))
        ));
        assert!(matches!(
            r.build("nope", BackboneInit { seed: 0 }),
            Err(Error::UnknownBackbone(_))
        ));
    }

    #[test]
    fn tiny_produces_4x4x128_on_64px() {
        let r = Registry::<f32>::with_defaults();
        let b = r.build("tiny", BackboneInit { seed: 0 }).unwrap();
        let y = b.forward(&probe_batch(1, 64, 64, 0));
        assert_eq!((y.n, y.h, y.w, y.c), (1, 4, 4, 128));
        assert_eq!(b.reduction(), 16);
    }

    #[test]
    fn tiny_is_small() {
        assert!(TinyConvNet::<f32>::standard(0).parameter_count() < 1_000_000);
    }

    #[test]
    fn freeze_zeroes_trainable_count_and_keeps_forward() {
        let mut b: Box<dyn Backbone<f32>> = Box::new(TinyConvNet::standard(3));
        assert!(trainable_count(b.as_ref()) > 0);
        let x = probe_batch(2, 32, 32, 4);
        let before = b.forward(&x);
        freeze(b.as_mut());
        assert_eq!(trainable_count(b.as_ref()), 0);
        assert!(is_frozen(b.as_ref()));
        assert_eq!(b.forward(&x), before);
    }

    #[test]
    fn frozen_backward_leaves_parameters_untouched() {
        let mut b = TinyConvNet::<f32>::standard(5);
        freeze(&mut b);
        let x = probe_batch(2, 32, 32, 6);
        let (y, tape) = b.forward_train(&x);
        b.backward(tape, &y);
        assert!(b.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn conformance_passes_for_default_backbones() {
        let r = Registry::<f32>::with_defaults();
        for name in ["tiny", "tiny-1block"] {
            let b = r.build(name, BackboneInit { seed: 1 }).unwrap();
            for c in conformance(b.as_ref(), 32) {
                assert!(c.passed, "{name}: {} {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn odd_sizes_follow_ceil_rule() {
        let b = TinyConvNet::<f32>::standard(0);
        let y = Backbone::forward(&b, &probe_batch(1, 65, 47, 0));
        assert_eq!((y.h, y.w), (5, 3));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut net = TinyConvNet::<f64>::new(&[4, 6], 9);
        let x = probe_batch::<f64>(2, 8, 8, 10);
        let (y, tape) = net.forward_train(&x);
        let probe: Vec<f64> = (0..y.data.len()).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.4).collect();
        let probe_b = Batch::from_vec(y.n, y.h, y.w, y.c, probe.clone()).unwrap();
        let mut analytic = net.clone();
        analytic.backward(tape, &probe_b);
        let loss = |n: &TinyConvNet<f64>| -> f64 {
            let y = n.clone().forward_train(&x).0;
            y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let grads: Vec<Vec<f64>> = analytic.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by(7) {
                let mut n2 = net.clone();
                n2.params_mut()[pi].value[j] += h;
                let up = loss(&n2);
                n2.params_mut()[pi].value[j] -= 2.0 * h;
                let dn = loss(&n2);
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "param {pi}[{j}]: fd {fd} vs {}",
                    g[j]
                );
            }
        }
    }
}
