use calmix_core::attention::{
    bap_pooled, compute_attention, counterfactual_effect, cross_entropy, AttentionHead, AttentionMaps,
    AttentionProjection, FeatureMap,
};
use calmix_core::augment::{attention_crop, attention_mask, bbox_from_attention, mix_pair, CropBox, Image, SelectedAttention};
use calmix_core::backbones::{BackboneInit, Registry};
use calmix_core::bench::{lr_search, minmax_normalize, multi_seed_aggregate, top1_accuracy, MetricRecord};
use calmix_core::datasets::{make_holdout_split, LabeledDataset, Preprocessing};
use calmix_core::tensor::Batch;
use calmix_core::TrEvSetting;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn map(h: usize, w: usize, seed: u64) -> SelectedAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..h * w).map(|_| rng.gen()).collect();
    let hi = v.iter().cloned().fold(0.0, f32::max);
    v.iter_mut().for_each(|x| *x /= hi);
    SelectedAttention::new(h, w, v).unwrap()
}

fn record(seed: u64, top1: f64) -> MetricRecord {
    MetricRecord {
        config_id: "c".into(),
        dataset: "d".into(),
        backbone: "tiny".into(),
        setting: TrEvSetting::Ft,
        lr: 0.01,
        seed,
        top1,
        train_time_min: 1.0,
        throughput_sps: Some(10.0),
        diverged: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_is_linear_in_attention(seed in any::<u64>(), a in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, m) = (3, 4, 5, 2);
        let f = FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let att = AttentionMaps::new(h, w, m, (0..h * w * m).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let base = bap_pooled(&f, &att).unwrap();
        let scaled = bap_pooled(&f, &att.scaled(a)).unwrap();
        for (x, y) in base.values.iter().zip(&scaled.values) {
            prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn attention_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, m) = (3, 3, 6, 4);
        let f = FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let proj = AttentionProjection::from_weights(c, m, (0..c * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        prop_assert!(compute_attention(&f, &proj).unwrap().values.iter().all(|&v: &f64| v >= 0.0));
    }

    #[test]
    fn identical_counterfactual_costs_ln_k(logits in prop::collection::vec(-20.0f64..20.0, 2..12), label in 0usize..2) {
        let effect = counterfactual_effect(&logits, &[logits.clone(), logits.clone()]).unwrap();
        let ce = cross_entropy(&effect.0, label).unwrap();
        prop_assert_eq!(ce, (logits.len() as f64).ln());
    }

    #[test]
    fn bbox_invariants(h in 8usize..40, w in 8usize..40, seed in any::<u64>(), t1 in 0.01f32..1.0, t2 in 0.01f32..1.0) {
        let m = map(h, w, seed);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let b = bbox_from_attention(&m, lo);
        let arg = (0..h * w).max_by(|&i, &j| m.values[i].total_cmp(&m.values[j])).unwrap();
        prop_assert!(b.contains(arg / w, arg % w));
        prop_assert!(b.contains_box(&bbox_from_attention(&m, hi)));
    }

    #[test]
    fn crop_mask_mix_invariants(h in 8usize..32, w in 8usize..32, seed in any::<u64>(), t in 0.05f32..1.0) {
        let (a, b) = (image(h, w, seed), image(h, w, seed ^ 1));
        let (ma, mb) = (map(h, w, seed ^ 2), map(h, w, seed ^ 3));
        prop_assert_eq!(&attention_crop(&a, &CropBox::full(h, w), (h, w)).unwrap(), &a);
        let once = attention_mask(&a, &ma, t).unwrap();
        prop_assert_eq!(&attention_mask(&once, &ma, t).unwrap(), &once);
        let (oa, ob) = mix_pair(&a, &ma, &b, &mb, t).unwrap();
        let (ba, bb) = (bbox_from_attention(&ma, t), bbox_from_attention(&mb, t));
        for r in 0..h {
            for c in 0..w {
                if !ba.contains(r, c) {
                    prop_assert_eq!(oa.pixel(r, c), a.pixel(r, c));
                }
                if !bb.contains(r, c) {
                    prop_assert_eq!(ob.pixel(r, c), b.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn minmax_properties(v in prop::collection::vec(-1e6f64..1e6, 1..30)) {
        let out = minmax_normalize(&v);
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        for i in 0..v.len() {
            prop_assert!((0.0..=1.0).contains(&out[i]));
            if v[i] == lo { prop_assert_eq!(out[i], 0.0); }
            if v[i] == hi && hi > lo { prop_assert!((out[i] - 1.0).abs() < 1e-12); }
            for j in 0..v.len() {
                if v[i] <= v[j] { prop_assert!(out[i] <= out[j]); }
            }
        }
    }

    #[test]
    fn lr_search_ignores_evaluation_order(accs in prop::collection::vec(0u8..5, 5), perm_seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..5).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let grid = [0.3, 0.1, 0.03, 0.01, 0.003];
        let score = |lr: f64| grid.iter().position(|&g| g == lr).map(|i| accs[i] as f64 / 4.0).unwrap();
        let a = lr_search(&grid, |lr| Ok(score(lr))).unwrap();
        let shuffled: Vec<f64> = perm.iter().map(|&i| grid[i]).collect();
        let b = lr_search(&shuffled, |lr| Ok(score(lr))).unwrap();
        prop_assert_eq!(a.best_lr, b.best_lr);
    }

    #[test]
    fn aggregate_mean_is_permutation_invariant(accs in prop::collection::vec(0.0f64..1.0, 2..8), rot in 0usize..8) {
        let recs: Vec<_> = accs.iter().enumerate().map(|(i, &a)| record(i as u64, a)).collect();
        let mut rotated = recs.clone();
        rotated.rotate_left(rot % recs.len());
        rotated.reverse();
        let (x, y) = (multi_seed_aggregate(&recs).unwrap(), multi_seed_aggregate(&rotated).unwrap());
        prop_assert_eq!(x.top1.mean, y.top1.mean);
        prop_assert_eq!(x.top1.std, y.top1.std);
    }

    #[test]
    fn top1_range_and_perfect_iff_equal(labels in prop::collection::vec(0usize..4, 1..40), flips in prop::collection::vec(any::<bool>(), 40)) {
        let preds: Vec<usize> = labels.iter().zip(&flips).map(|(&l, &f)| if f { (l + 1) % 4 } else { l }).collect();
        let acc = top1_accuracy(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!(acc == 1.0, preds == labels);
    }

    #[test]
    fn holdout_is_a_stratified_partition(per_class in prop::collection::vec(2usize..12, 2..5), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let mut items = Vec::new();
        for (class, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                items.push((Image::filled(8, 8, [k as f32 / 16.0, class as f32 / 8.0, 0.5]), class));
            }
        }
        let data = LabeledDataset { items, num_classes: per_class.len(), image_size: 8, preprocessing: Preprocessing::default() };
        let (kept, held) = make_holdout_split(&data, frac, seed).unwrap();
        prop_assert_eq!(kept.len() + held.len(), data.len());
        for (class, &n) in per_class.iter().enumerate() {
            let want = ((frac * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(held.items.iter().filter(|(_, l)| *l == class).count(), want);
        }
        let mut all: Vec<_> = kept.items.iter().chain(&held.items).map(|(im, l)| (im.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), *l)).collect();
        let mut orig: Vec<_> = data.items.iter().map(|(im, l)| (im.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), *l)).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn backbones_follow_the_shape_rule(h in 8usize..70, w in 8usize..70) {
        let registry = Registry::<f32>::with_defaults();
        for name in ["tiny", "tiny-1block"] {
            let b = registry.build(name, BackboneInit { seed: 0 }).unwrap();
            let out = b.forward(&Batch::zeros(2, h, w, 3));
            let r = b.reduction();
            prop_assert_eq!((out.n, out.h, out.w, out.c), (2, h.div_ceil(r), w.div_ceil(r), b.channels()));
        }
    }
}

/// Projection gradient against central differences on a 3×3×4 input.
#[test]
fn projection_gradient_on_toy_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (hw, c, m, k) = (9, 4, 3, 5);
    let head = AttentionHead::<f64>::new(c, m, k, &mut rng);
    let f: Vec<f64> = (0..hw * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let loss = |h: &AttentionHead<f64>| h.cal_sample(&f, hw, 2, 1.0, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().0;
    let (_, _, g) = head.cal_sample(&f, hw, 2, 1.0, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let step = 1e-4;
    for j in 0..c * m {
        let mut up = head.clone();
        up.projection.weight.value[j] += step;
        let mut dn = head.clone();
        dn.projection.weight.value[j] -= step;
        let fd = (loss(&up) - loss(&dn)) / (2.0 * step);
        let rel = (fd - g.projection[j]).abs() / fd.abs().max(g.projection[j].abs()).max(1e-8);
        assert!(rel <= 1e-3, "weight {j}: fd {fd} analytic {}", g.projection[j]);
    }
}
