//! Attention-guided augmentations: crop, mask, and same-class region mixing.
//!
//! Images are `H×W×3` in `[0, 1]`. Resampling is bilinear on pixel centers
//! with edge clamping, so a same-size resample is the exact identity.

use rand::Rng;

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_CROP_THRESHOLD: f32 = 0.5;
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;
pub const DEFAULT_CROP_PADDING: f32 = 0.1;
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "image {h}x{w}x3 needs {} values, got {}",
                h * w * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image has non-finite values".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let data = (0..h * w).flat_map(|_| rgb).collect();
        Self { h, w, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.w + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.w + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One attention map at image resolution, rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedAttention {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl SelectedAttention {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w || h == 0 || w == 0 {
            return Err(Error::Shape(format!("attention plane {h}x{w} with {} values", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("selected attention must lie in [0, 1]".into()));
        }
        Ok(Self { h, w, values })
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.w + col]
    }
}

/// Half-open pixel rectangle: rows `row0..row1`, columns `col0..col1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl CropBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({row0},{col0})-({row1},{col1})"
            )));
        }
        Ok(Self {
            row0,
            col0,
            row1,
            col1,
        })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            row1: h,
            col1: w,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn contains_box(&self, other: &CropBox) -> bool {
        self.row0 <= other.row0
            && self.col0 <= other.col0
            && self.row1 >= other.row1
            && self.col1 >= other.col1
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.row1 <= h && self.col1 <= w
    }

    /// Grows each side by `fraction` of the box extent, clamped to the image.
    pub fn padded(&self, fraction: f32, h: usize, w: usize) -> Self {
        let dr = (self.height() as f32 * fraction).round() as usize;
        let dc = (self.width() as f32 * fraction).round() as usize;
        Self {
            row0: self.row0.saturating_sub(dr),
            col0: self.col0.saturating_sub(dc),
            row1: (self.row1 + dr).min(h),
            col1: (self.col1 + dc).min(w),
        }
    }
}

// ---------------------------------------------------------------------------
// attention selection

/// Index of the map with the largest total mass (lowest index on ties).
pub fn highest_mass_map<T: Scalar>(attention: &AttentionMaps<T>) -> usize {
    let masses: Vec<T> = (0..attention.m).map(|k| attention.mass(k)).collect();
    let mut best = 0;
    for (k, m) in masses.iter().enumerate() {
        if *m > masses[best] {
            best = k;
        }
    }
    best
}

/// Samples a map index with probability proportional to its mass.
pub fn sample_map_by_mass<T: Scalar, R: Rng>(attention: &AttentionMaps<T>, rng: &mut R) -> usize {
    let masses: Vec<f64> = (0..attention.m)
        .map(|k| attention.mass(k).as_f64().max(0.0))
        .collect();
    let total: f64 = masses.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return rng.gen_range(0..attention.m);
    }
    let mut u = rng.gen::<f64>() * total;
    for (k, m) in masses.iter().enumerate() {
        if u < *m {
            return k;
        }
        u -= m;
    }
    // Rounding can leave u just above the last cumulative bound.
    masses.iter().rposition(|&m| m > 0.0).unwrap_or(0)
}

/// Bilinear sample positions along one axis: `(i0, i1, t)` per output index.
fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `h×w×channels` plane.
fn resize_plane(src: &[f32], h: usize, w: usize, channels: usize, oh: usize, ow: usize) -> Vec<f32> {
    let rows = sample_axis(h, oh);
    let cols = sample_axis(w, ow);
    let mut out = vec![0.0; oh * ow * channels];
    for (oy, &(y0, y1, ty)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in cols.iter().enumerate() {
            for ch in 0..channels {
                let v = |y: usize, x: usize| src[(y * w + x) * channels + ch];
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                out[(oy * ow + ox) * channels + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Upsamples one plane to `(h, w)` and min-max rescales it.
///
/// Constant positive planes become all ones; all-zero planes stay zero.
pub fn upsample_plane(plane: &[f32], ph: usize, pw: usize, h: usize, w: usize) -> SelectedAttention {
    let mut values = resize_plane(plane, ph, pw, 1, h, w);
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    } else if hi > 0.0 {
        values.iter_mut().for_each(|v| *v = 1.0);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    SelectedAttention { h, w, values }
}

fn plane_f32<T: Scalar>(attention: &AttentionMaps<T>, k: usize) -> Vec<f32> {
    attention.plane(k).into_iter().map(|v| v.as_f32()).collect()
}

/// Training-time selection: one map drawn proportionally to its mass.
pub fn select_attention_map<T: Scalar, R: Rng>(
    attention: &AttentionMaps<T>,
    image_size: (usize, usize),
    rng: &mut R,
) -> SelectedAttention {
    let k = sample_map_by_mass(attention, rng);
    upsample_plane(&plane_f32(attention, k), attention.h, attention.w, image_size.0, image_size.1)
}

/// Inference-time selection: the highest-mass map, no randomness.
pub fn select_attention_map_argmax<T: Scalar>(
    attention: &AttentionMaps<T>,
    image_size: (usize, usize),
) -> SelectedAttention {
    let k = highest_mass_map(attention);
    upsample_plane(&plane_f32(attention, k), attention.h, attention.w, image_size.0, image_size.1)
}

// ---------------------------------------------------------------------------
// box, crop, mask

/// Tightest box around every pixel with value `≥ threshold`; the full image
/// when none qualifies.
pub fn bbox_from_attention(map: &SelectedAttention, threshold: f32) -> CropBox {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for row in 0..map.h {
        for col in 0..map.w {
            if map.at(row, col) >= threshold {
                r0 = r0.min(row);
                c0 = c0.min(col);
                r1 = r1.max(row + 1);
                c1 = c1.max(col + 1);
            }
        }
    }
    if r0 == usize::MAX {
        CropBox::full(map.h, map.w)
    } else {
        CropBox {
            row0: r0,
            col0: c0,
            row1: r1,
            col1: c1,
        }
    }
}

fn region(image: &Image, b: &CropBox) -> Vec<f32> {
    let mut out = Vec::with_capacity(b.height() * b.width() * 3);
    for row in b.row0..b.row1 {
        let start = (row * image.w + b.col0) * 3;
        out.extend_from_slice(&image.data[start..start + b.width() * 3]);
    }
    out
}

/// Pixels under `b`, resized to `(oh, ow)` and clamped to `[0, 1]`.
pub fn resize_region(image: &Image, b: &CropBox, oh: usize, ow: usize) -> Result<Vec<f32>> {
    if !b.fits(image.h, image.w) || b.row0 >= b.row1 || b.col0 >= b.col1 {
        return Err(Error::InvalidArgument(format!(
            "box {b:?} outside {}x{} image",
            image.h, image.w
        )));
    }
    let mut out = resize_plane(&region(image, b), b.height(), b.width(), 3, oh, ow);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn attention_crop(image: &Image, b: &CropBox, out_size: (usize, usize)) -> Result<Image> {
    let data = resize_region(image, b, out_size.0, out_size.1)?;
    Image::new(out_size.0, out_size.1, data)
}

fn check_map_size(image: &Image, map: &SelectedAttention) -> Result<()> {
    if (image.h, image.w) != (map.h, map.w) {
        return Err(Error::Shape(format!(
            "attention {}x{} does not match image {}x{}",
            map.h, map.w, image.h, image.w
        )));
    }
    Ok(())
}

/// Zeroes every pixel whose attention is `≥ threshold`.
pub fn attention_mask(image: &Image, map: &SelectedAttention, threshold: f32) -> Result<Image> {
    check_map_size(image, map)?;
    let mut out = image.clone();
    for (px, &a) in out.data.chunks_exact_mut(3).zip(&map.values) {
        if a >= threshold {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// same-class mixing

/// For each sample, a uniformly drawn partner of the same class (never itself).
pub fn pair_same_class<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<Option<usize>> {
    (0..labels.len())
        .map(|i| {
            let candidates: Vec<usize> = (0..labels.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.gen_range(0..candidates.len())])
            }
        })
        .collect()
}

/// Pastes `src`'s `src_box` region, resized, over `dst_box` of `dst`.
fn paste(dst: &Image, dst_box: &CropBox, src: &Image, src_box: &CropBox) -> Result<Image> {
    let patch = resize_region(src, src_box, dst_box.height(), dst_box.width())?;
    let mut out = dst.clone();
    let row_len = dst_box.width() * 3;
    for (r, row) in (dst_box.row0..dst_box.row1).enumerate() {
        let start = (row * out.w + dst_box.col0) * 3;
        out.data[start..start + row_len].copy_from_slice(&patch[r * row_len..(r + 1) * row_len]);
    }
    Ok(out)
}

/// Swaps the discriminative regions of two same-class images.
///
/// Each output keeps its own geometry: `a`'s box receives `b`'s box region
/// resized to fit, and vice versa.
pub fn mix_pair(
    image_a: &Image,
    map_a: &SelectedAttention,
    image_b: &Image,
    map_b: &SelectedAttention,
    threshold: f32,
) -> Result<(Image, Image)> {
    if (image_a.h, image_a.w) != (image_b.h, image_b.w) {
        return Err(Error::Shape(format!(
            "cannot mix {}x{} with {}x{}",
            image_a.h, image_a.w, image_b.h, image_b.w
        )));
    }
    check_map_size(image_a, map_a)?;
    check_map_size(image_b, map_b)?;
    let box_a = bbox_from_attention(map_a, threshold);
    let box_b = bbox_from_attention(map_b, threshold);
    Ok((
        paste(image_a, &box_a, image_b, &box_b)?,
        paste(image_b, &box_b, image_a, &box_a)?,
    ))
}
