//! Dataset ingestion, the stratified holdout protocol, and a synthetic
//! fine-grained generator whose class evidence is a small localized glyph.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{resize_region, CropBox, Image};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Rows of `path,label,split` plus a class-name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub rows: Vec<ManifestRow>,
    pub class_names: Vec<String>,
}

impl SplitManifest {
    pub fn new(rows: Vec<ManifestRow>, class_names: Vec<String>) -> Result<Self> {
        let m = Self { rows, class_names };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut seen_label = vec![false; k];
        let mut paths = std::collections::HashSet::new();
        for row in &self.rows {
            if row.label >= k {
                return Err(Error::Manifest(format!(
                    "row `{}` has label {} but only {k} classes are declared",
                    row.path, row.label
                )));
            }
            seen_label[row.label] = true;
            if !paths.insert(row.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path `{}`", row.path)));
            }
        }
        if let Some(missing) = seen_label.iter().position(|s| !s) {
            return Err(Error::Manifest(format!(
                "class indices are not dense: no row has label {missing}"
            )));
        }
        for split in [Split::Train, Split::Test] {
            if !self.rows.iter().any(|r| r.split == split) {
                return Err(Error::Manifest(format!("no {split} rows")));
            }
        }
        Ok(())
    }

    /// Reads a manifest CSV; class names come from a sibling `classes.txt`
    /// when present.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Manifest(format!(
                "expected header `path,label,split`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let rows: Vec<ManifestRow> = reader.deserialize().collect::<Result<_, _>>()?;
        let num_classes = rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
        let classes_path = path.with_file_name(CLASSES_FILE);
        let class_names = if classes_path.exists() {
            let names: Vec<String> = fs::read_to_string(&classes_path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if names.len() < num_classes {
                return Err(Error::Manifest(format!(
                    "{} names {} classes but labels reach {}",
                    classes_path.display(),
                    names.len(),
                    num_classes
                )));
            }
            names
        } else {
            (0..num_classes).map(|k| format!("class_{k}")).collect()
        };
        Self::new(rows, class_names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        fs::write(path.with_file_name(CLASSES_FILE), self.class_names.join("\n") + "\n")?;
        Ok(())
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in self.rows.iter().filter(|r| r.split == split) {
            counts[r.label] += 1;
        }
        counts
    }
}

/// Per-channel value normalization applied when images become model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<(Image, usize)>,
    pub num_classes: usize,
    pub image_size: usize,
    pub preprocessing: Preprocessing,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }

    fn with_items(&self, items: Vec<(Image, usize)>) -> Self {
        Self {
            items,
            num_classes: self.num_classes,
            image_size: self.image_size,
            preprocessing: self.preprocessing,
        }
    }
}

pub fn decode_image(path: &Path, image_size: usize) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let rgb = if rgb.width() as usize == image_size && rgb.height() as usize == image_size {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            image_size as u32,
            image_size as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(image_size, image_size, data)
}

/// Decodes every manifest row under `root`, in manifest order.
pub fn load_image_folder(
    root: &Path,
    manifest: &SplitManifest,
    image_size: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let decoded: Vec<Result<Image>> =
        par::map_slice(&manifest.rows, |row| decode_image(&root.join(&row.path), image_size));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (row, img) in manifest.rows.iter().zip(decoded) {
        let item = (img?, row.label);
        match row.split {
            Split::Train => train.push(item),
            Split::Test => test.push(item),
        }
    }
    let make = |items| LabeledDataset {
        items,
        num_classes: manifest.num_classes(),
        image_size,
        preprocessing: Preprocessing::default(),
    };
    Ok((make(train), make(test)))
}

/// Stratified split: `max(1, round(fraction · n_c))` samples of every class
/// go to the evaluation subset (at most `n_c − 1`).
pub fn make_holdout_split(
    train: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {fraction} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, (_, l)) in train.items.iter().enumerate() {
        by_class[*l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_eval = vec![false; train.len()];
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} training sample(s); the holdout split needs at least 2",
                idx.len()
            )));
        }
        let n_eval = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n_eval] {
            in_eval[i] = true;
        }
    }
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (item, eval) in train.items.iter().zip(in_eval) {
        if eval {
            held.push(item.clone());
        } else {
            kept.push(item.clone());
        }
    }
    Ok((train.with_items(kept), train.with_items(held)))
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------
// baseline augmentation

/// Random horizontal flip followed by a random resized crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineAugment {
    pub enabled: bool,
    pub flip_probability: f32,
    pub min_scale: f32,
    pub max_scale: f32,
}

impl Default for BaselineAugment {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_probability: 0.5,
            min_scale: 0.7,
            max_scale: 1.0,
        }
    }
}

impl BaselineAugment {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn apply<R: Rng>(&self, image: &Image, rng: &mut R) -> Image {
        if !self.enabled {
            return image.clone();
        }
        let mut img = image.clone();
        if rng.gen::<f32>() < self.flip_probability {
            for row in 0..img.h {
                for col in 0..img.w / 2 {
                    let (a, b) = (img.pixel(row, col), img.pixel(row, img.w - 1 - col));
                    img.set_pixel(row, col, b);
                    img.set_pixel(row, img.w - 1 - col, a);
                }
            }
        }
        let (h, w) = (img.h as f32, img.w as f32);
        let scale = rng.gen_range(self.min_scale..=self.max_scale);
        let log_ratio = rng.gen_range((0.75f32).ln()..=(4.0f32 / 3.0).ln());
        let ratio = log_ratio.exp();
        let area = scale * h * w;
        let ch = ((area / ratio).sqrt().round() as usize).clamp(1, img.h);
        let cw = ((area * ratio).sqrt().round() as usize).clamp(1, img.w);
        let r0 = rng.gen_range(0..=img.h - ch);
        let c0 = rng.gen_range(0..=img.w - cw);
        let b = CropBox {
            row0: r0,
            col0: c0,
            row1: r0 + ch,
            col1: c0 + cw,
        };
        let data = resize_region(&img, &b, img.h, img.w).expect("box inside image");
        Image {
            h: img.h,
            w: img.w,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic generator

/// Side of the 4×4-cell class glyph for a given image side (≈12% of it).
pub fn glyph_cell(image_size: usize) -> usize {
    ((0.12 * image_size as f64 / 4.0).round() as usize).max(1)
}

fn mirrored(g: &[bool; 16]) -> [bool; 16] {
    let mut m = [false; 16];
    for r in 0..4 {
        for c in 0..4 {
            m[r * 4 + c] = g[r * 4 + 3 - c];
        }
    }
    m
}

fn hamming(a: &[bool; 16], b: &[bool; 16]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Distinct 4×4 binary patterns, pairwise Hamming distance ≥ 4 even after
/// mirroring either glyph, so a horizontal flip never mimics another class.
pub fn class_glyphs(num_classes: usize, seed: u64) -> Vec<[bool; 16]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_61F5);
    let mut glyphs: Vec<[bool; 16]> = Vec::with_capacity(num_classes);
    while glyphs.len() < num_classes {
        let mut g = [false; 16];
        g.iter_mut().for_each(|b| *b = rng.gen());
        let ones = g.iter().filter(|&&b| b).count();
        if !(5..=11).contains(&ones) {
            continue;
        }
        let far = glyphs
            .iter()
            .all(|o| hamming(o, &g) >= 4 && hamming(&mirrored(o), &g) >= 4);
        if far {
            glyphs.push(g);
        }
    }
    glyphs
}

/// One generated image with its label and split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub pixels: Vec<u8>,
    pub label: usize,
    pub split: Split,
    pub glyph_origin: (usize, usize),
}

impl SyntheticSample {
    pub fn image(&self, size: usize) -> Image {
        let data = self.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        Image {
            h: size,
            w: size,
            data,
        }
    }
}

fn render_sample(
    glyph: &[bool; 16],
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, (usize, usize)) {
    let s = image_size as f32;
    // smooth colored texture: a few random plane waves per channel
    let waves: Vec<[f32; 4]> = (0..9)
        .map(|_| {
            let freq = rng.gen_range(1.0..4.0) * std::f32::consts::TAU / s;
            let angle = rng.gen_range(0.0..std::f32::consts::TAU);
            [freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.05..0.12)]
        })
        .collect();
    let base: [f32; 3] = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    let mut px = vec![0u8; image_size * image_size * 3];
    for y in 0..image_size {
        for x in 0..image_size {
            for ch in 0..3 {
                let mut v = base[ch] + rng.gen_range(-0.04..0.04);
                for wv in &waves[ch * 3..ch * 3 + 3] {
                    v += wv[3] * (wv[0] * x as f32 + wv[1] * y as f32 + wv[2]).sin();
                }
                px[(y * image_size + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let cell = glyph_cell(image_size);
    let side = 4 * cell;
    let oy = rng.gen_range(0..=image_size - side);
    let ox = rng.gen_range(0..=image_size - side);
    for gy in 0..4 {
        for gx in 0..4 {
            let v = if glyph[gy * 4 + gx] { 255 } else { 0 };
            for y in oy + gy * cell..oy + (gy + 1) * cell {
                for x in ox + gx * cell..ox + (gx + 1) * cell {
                    px[(y * image_size + x) * 3..(y * image_size + x) * 3 + 3].fill(v);
                }
            }
        }
    }
    (px, (oy, ox))
}

/// Generates the synthetic set in memory. The first 80% of each class
/// (rounded down, at least one sample left for test) is the train split.
pub fn synthesize_fgir(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("synthetic set needs at least 2 classes".into()));
    }
    if samples_per_class < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples per class".into()));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument("synthetic images need side ≥ 16".into()));
    }
    let glyphs = class_glyphs(num_classes, seed);
    let n_train = ((samples_per_class * 4) / 5).clamp(1, samples_per_class - 1);
    let jobs: Vec<(usize, usize)> = (0..num_classes)
        .flat_map(|c| (0..samples_per_class).map(move |i| (c, i)))
        .collect();
    Ok(par::map_slice(&jobs, |&(class, i)| {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x100_0000_01B3) ^ ((class as u64) << 32 | i as u64),
        );
        let (pixels, glyph_origin) = render_sample(&glyphs[class], image_size, &mut rng);
        SyntheticSample {
            pixels,
            label: class,
            split: if i < n_train { Split::Train } else { Split::Test },
            glyph_origin,
        }
    }))
}

/// In-memory `(train, test)` datasets of the synthetic set, without
/// touching disk.
pub fn synthetic_datasets(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let samples = synthesize_fgir(num_classes, samples_per_class, image_size, seed)?;
    let make = |split: Split| LabeledDataset {
        items: samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| (s.image(image_size), s.label))
            .collect(),
        num_classes,
        image_size,
        preprocessing: Preprocessing::default(),
    };
    Ok((make(Split::Train), make(Split::Test)))
}

/// Writes the synthetic set as PNGs plus `manifest.csv` and `classes.txt`.
pub fn generate_synthetic_fgir(
    out_dir: &Path,
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<SplitManifest> {
    let samples = synthesize_fgir(num_classes, samples_per_class, image_size, seed)?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut counters = vec![0usize; num_classes];
    let mut files: Vec<(PathBuf, &SyntheticSample)> = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("images/class_{:03}/{:05}.png", s.label, counters[s.label]);
        counters[s.label] += 1;
        rows.push(ManifestRow {
            path: rel.clone(),
            label: s.label,
            split: s.split,
        });
        files.push((out_dir.join(rel), s));
    }
    for c in 0..num_classes {
        fs::create_dir_all(out_dir.join(format!("images/class_{c:03}")))?;
    }
    let written: Vec<Result<()>> = par::map_slice(&files, |(path, s)| {
        image::save_buffer(
            path,
            &s.pixels,
            image_size as u32,
            image_size as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(Error::from)
    });
    written.into_iter().collect::<Result<()>>()?;
    let manifest = SplitManifest::new(
        rows,
        (0..num_classes).map(|c| format!("glyph_{c:03}")).collect(),
    )?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
