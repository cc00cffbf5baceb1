use calmix_core::augment::Image;
use calmix_core::backbones::Registry;
use calmix_core::settings::{build_model, infer, train_step, CalConfig, Sgd};
use calmix_core::TrEvSetting;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class 0 is dark with a bright square, class 1 the reverse.
fn separable(n: usize, size: usize, seed: u64) -> (Vec<Image>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let (bg, fg) = if label == 0 { (0.1, 0.9) } else { (0.9, 0.1) };
        let mut im = Image::filled(size, size, [bg; 3]);
        let (r0, c0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
        for r in r0..r0 + size / 4 {
            for c in c0..c0 + size / 4 {
                im.set_pixel(r, c, [fg; 3]);
            }
        }
        images.push(im);
        labels.push(label);
    }
    (images, labels)
}

#[test]
fn loss_decreases_for_every_setting() {
    let registry = Registry::<f32>::with_defaults();
    let (images, labels) = separable(8, 32, 1);
    for setting in TrEvSetting::ALL {
        let mut model = build_model(&registry, setting, "tiny", 2, 32, CalConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut opt = Sgd::new(0.9, 0.0);
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut model, &images, &labels, &mut rng, &mut opt, 0.05).unwrap().loss as f64)
            .collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{setting}: first {head:.4}, last {tail:.4}");
    }
}

#[test]
fn inference_is_deterministic_with_unit_rows() {
    let registry = Registry::<f32>::with_defaults();
    let (images, _) = separable(6, 32, 2);
    for setting in TrEvSetting::ALL {
        let model = build_model(&registry, setting, "tiny", 3, 32, CalConfig::default(), 5).unwrap();
        let a = infer(setting, &model, &images).unwrap();
        let b = infer(setting, &model, &images).unwrap();
        assert_eq!(a, b, "{setting}");
        for row in a.chunks_exact(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6, "{setting}");
        }
    }
}

#[test]
fn frozen_backbone_never_moves() {
    let registry = Registry::<f32>::with_defaults();
    let (images, labels) = separable(4, 32, 3);
    let mut model = build_model(&registry, TrEvSetting::Fz, "tiny", 2, 32, CalConfig::default(), 6).unwrap();
    let before: Vec<Vec<u32>> = model.backbone.params().iter().map(|p| p.value.iter().map(|v| v.to_bits()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut opt = Sgd::new(0.9, 0.0);
    for _ in 0..5 {
        train_step(&mut model, &images, &labels, &mut rng, &mut opt, 0.1).unwrap();
    }
    let after: Vec<Vec<u32>> = model.backbone.params().iter().map(|p| p.value.iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before, after);
}
