use std::fs;

use calmix_core::datasets::{
    class_glyphs, generate_synthetic_fgir, glyph_cell, load_image_folder, ManifestRow, Split, SplitManifest,
};
use calmix_core::augment::Image;

fn write_png(path: &std::path::Path, size: u32) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::save_buffer(path, &vec![128u8; (size * size * 3) as usize], size, size, image::ExtendedColorType::Rgb8)
        .unwrap();
}

fn manifest(rows: &[(&str, usize, Split)]) -> SplitManifest {
    SplitManifest::new(
        rows.iter()
            .map(|&(p, label, split)| ManifestRow { path: p.into(), label, split })
            .collect(),
        vec!["a".into(), "b".into()],
    )
    .unwrap()
}

#[test]
fn loads_splits_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    for p in ["x/1.png", "x/2.png", "y/3.png"] {
        write_png(&dir.path().join(p), 20);
    }
    let m = manifest(&[("x/1.png", 0, Split::Train), ("y/3.png", 1, Split::Test), ("x/2.png", 1, Split::Train)]);
    let (train, test) = load_image_folder(dir.path(), &m, 16).unwrap();
    assert_eq!((train.len(), test.len()), (2, 1));
    assert_eq!(train.labels(), vec![0, 1]);
    assert!(train.items.iter().all(|(im, _)| (im.h, im.w) == (16, 16)));
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("here.png"), 8);
    let m = manifest(&[("here.png", 0, Split::Train), ("gone/nope.png", 1, Split::Test)]);
    let err = load_image_folder(dir.path(), &m, 8).unwrap_err().to_string();
    assert!(err.contains("gone/nope.png"), "{err}");
}

#[test]
fn generated_counts_match_manifest_tally() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_fgir(dir.path(), 4, 25, 32, 3).unwrap();
    assert_eq!(m.rows.len(), 100);
    let reread = SplitManifest::load(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(reread, m);
    let (train, test) = load_image_folder(dir.path(), &m, 32).unwrap();
    for split in [Split::Train, Split::Test] {
        let mut tally = vec![0; 4];
        m.rows.iter().filter(|r| r.split == split).for_each(|r| tally[r.label] += 1);
        let loaded = if split == Split::Train { train.class_counts() } else { test.class_counts() };
        assert_eq!(loaded, tally);
        assert_eq!(m.class_counts(split), tally);
    }
}

/// Best sum of absolute differences of the class glyph over every placement.
fn glyph_distance(im: &Image, glyph: &[bool; 16], cell: usize) -> f32 {
    let side = 4 * cell;
    let mut best = f32::INFINITY;
    for oy in 0..=im.h - side {
        for ox in 0..=im.w - side {
            let mut sad = 0.0;
            for y in 0..side {
                for x in 0..side {
                    let want = if glyph[(y / cell) * 4 + x / cell] { 1.0 } else { 0.0 };
                    sad += im.pixel(oy + y, ox + x).iter().map(|v| (v - want).abs()).sum::<f32>();
                }
            }
            best = best.min(sad);
        }
    }
    best
}

#[test]
fn template_matching_solves_the_synthetic_task() {
    let dir = tempfile::tempdir().unwrap();
    let (classes, size, seed) = (8, 64, 42);
    let m = generate_synthetic_fgir(dir.path(), classes, 20, size, seed).unwrap();
    let (_, test) = load_image_folder(dir.path(), &m, size).unwrap();
    let glyphs = class_glyphs(classes, seed);
    let cell = glyph_cell(size);
    let correct = test
        .items
        .iter()
        .filter(|(im, label)| {
            let d: Vec<f32> = glyphs.iter().map(|g| glyph_distance(im, g, cell)).collect();
            let pred = (0..classes).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            pred == *label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "template oracle accuracy {acc}");
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_fgir(a.path(), 2, 5, 16, 9).unwrap();
    generate_synthetic_fgir(b.path(), 2, 5, 16, 9).unwrap();
    for row in &ma.rows {
        assert_eq!(fs::read(a.path().join(&row.path)).unwrap(), fs::read(b.path().join(&row.path)).unwrap());
    }
}
