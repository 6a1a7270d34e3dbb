use attentropy::entropy::{self, EntropyMap, LayerAggregation, ScoreMap};
use attentropy::eval::{self, EvalConfig, ScoreNormalization};
use attentropy::linalg::Matrix;
use attentropy::selection::{self, FitOptions, LayerStats, RegionMeans};
use attentropy::tensor::{BinaryMask, GrayImage, Tensor};
use attentropy::vit::{self, VitConfig};
use attentropy::{npy, pgm};
use proptest::prelude::*;

fn stochastic_row(t: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, t).prop_map(|mut v| {
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    })
}

fn grid(max_side: usize) -> impl Strategy<Value = EntropyMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..6.0, w * h).prop_map(move |v| EntropyMap::new(w, h, v).unwrap())
    })
}

/// Mask values drawn from {0, 1, 255} with at least one object and one
/// background pixel.
fn labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::sample::select(vec![0u8, 0, 0, 1, 1, 255]), n).prop_map(|mut v| {
        v[0] = 1;
        if v.len() > 1 {
            v[1] = 0;
        }
        v
    })
}

fn frame(w: usize, h: usize) -> impl Strategy<Value = (ScoreMap, BinaryMask)> {
    (prop::collection::vec(0.0f64..1.0, w * h), labels(w * h))
        .prop_map(move |(s, l)| (ScoreMap::new(w, h, s).unwrap(), BinaryMask::new(w, h, l).unwrap()))
}

proptest! {
    #[test]
    fn npy_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0).collect();
        let t = Tensor::new(dims.clone(), data).unwrap();
        let mut bytes = Vec::new();
        npy::write_tensor(&mut bytes, &t).unwrap();
        prop_assert_eq!(npy::read_tensor(&mut bytes.as_slice()).unwrap(), t);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = GrayImage::new(w, h, pixels).unwrap();
        let bytes = pgm::encode(w, h, img.pixels());
        prop_assert_eq!(pgm::decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn entropy_bounded_and_permutation_invariant(row in (2usize..64).prop_flat_map(stochastic_row), rot in 0usize..64) {
        let t = row.len();
        let h = entropy::shannon_entropy(&row);
        prop_assert!(h >= 0.0 && h <= (t as f64).ln() + 1e-12);
        let mut shuffled = row.clone();
        shuffled.rotate_left(rot % t);
        shuffled.reverse();
        prop_assert!((entropy::shannon_entropy(&shuffled) - h).abs() < 1e-12);
    }

    #[test]
    fn head_average_stays_stochastic(t in 2usize..10, heads in 1usize..5, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 + 1e-3 };
        let hs: Vec<Matrix> = (0..heads).map(|_| {
            let mut m = Matrix::from_fn(t, t, |_, _| next());
            for r in 0..t {
                let sum: f64 = m.row(r).iter().sum();
                m.row_mut(r).iter_mut().for_each(|v| *v /= sum);
            }
            m
        }).collect();
        let avg = entropy::average_heads(&hs).unwrap();
        for r in 0..t {
            prop_assert!((avg.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(avg.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn resampling_stays_in_hull(map in grid(8), ow in 1usize..30, oh in 1usize..30) {
        let (lo, hi) = map.min_max();
        let out = entropy::resample_bilinear(&map, ow, oh).unwrap();
        prop_assert!(out.values().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn uniform_aggregate_shifts_with_maps(maps in prop::collection::vec(grid(4), 1..4), c in -3.0f64..3.0, cw in 1usize..8, ch in 1usize..8) {
        let agg = LayerAggregation::all_layers(maps.len());
        let base = entropy::aggregate_layers(&maps, &agg, cw, ch).unwrap();
        let shifted: Vec<EntropyMap> = maps.iter().map(|m| m.map(|v| v + c).unwrap()).collect();
        let moved = entropy::aggregate_layers(&shifted, &agg, cw, ch).unwrap();
        for (a, b) in base.values().iter().zip(moved.values()) {
            prop_assert!((b - a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn binarize_is_monotone(map in grid(8), t1 in -6.0f64..0.0, dt in 0.0f64..3.0) {
        let scores = entropy::to_score(&map, map.width() * 2, map.height() * 2, false).unwrap();
        let loose = entropy::binarize(&scores, t1).unwrap();
        let tight = entropy::binarize(&scores, t1 + dt).unwrap();
        for i in 0..loose.values().len() {
            prop_assert!(!tight.is_object(i) || loose.is_object(i));
        }
    }

    #[test]
    fn window_offsets_cover_and_stay_inside(full in 1usize..200, window in 1usize..64, stride in 1usize..64) {
        prop_assume!(window <= full);
        let offs = entropy::window_offsets(full, window, stride).unwrap();
        prop_assert_eq!(offs[0], 0);
        prop_assert_eq!(*offs.last().unwrap(), full - window);
        prop_assert!(offs.windows(2).all(|p| p[0] < p[1] && p[1] - p[0] <= stride.min(window)));
        let covered = |i: usize| offs.iter().any(|&o| (o..o + window).contains(&i));
        prop_assert!((0..full).all(covered));
    }

    #[test]
    fn selection_is_scale_invariant(means in prop::collection::vec((0.01f64..5.0, 0.01f64..8.0), 1..8), k in 0.01f64..100.0) {
        let stats = LayerStats { layers: means.iter().map(|&(o, b)| RegionMeans { obj_mean: o, bg_mean: b }).collect() };
        let scaled = LayerStats { layers: means.iter().map(|&(o, b)| RegionMeans { obj_mean: o * k, bg_mean: b * k }).collect() };
        let a = selection::select_layers(&stats, 1.2).unwrap();
        let b = selection::select_layers(&scaled, 1.2).unwrap();
        // scaling can move a ratio by one ulp; only exact-boundary layers may differ
        for l in a.iter().chain(&b) {
            if a.contains(l) != b.contains(l) {
                let m = stats.layers[*l];
                prop_assert!((m.bg_mean / m.obj_mean - 1.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn region_stats_follow_layer_order(maps in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 16), 2..5)) {
        let maps: Vec<EntropyMap> = maps.into_iter().map(|v| EntropyMap::new(4, 4, v).unwrap()).collect();
        let mask = BinaryMask::from_fn(16, 16, |x, y| if x < 8 && y < 8 { attentropy::MaskLabel::Object } else { attentropy::MaskLabel::Background });
        let stats = selection::region_stats(&maps, &mask).unwrap();
        let mut reversed = maps.clone();
        reversed.reverse();
        let rev = selection::region_stats(&reversed, &mask).unwrap();
        let mut back = rev.layers.clone();
        back.reverse();
        prop_assert_eq!(stats.layers, back);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_metrics_are_rank_invariant((s, g) in frame(9, 7)) {
        let moved = s.map(|v| (4.0 * v).exp() - 2.0).unwrap();
        let a = eval::pr_curve(&s, &g).unwrap();
        let b = eval::pr_curve(&moved, &g).unwrap();
        prop_assert_eq!(eval::average_precision(&a).unwrap(), eval::average_precision(&b).unwrap());
        prop_assert_eq!(eval::fpr_at_tpr(&a, 0.95).unwrap(), eval::fpr_at_tpr(&b, 0.95).unwrap());
    }

    #[test]
    fn rank_normalised_report_is_rank_invariant((s, g) in frame(10, 8)) {
        let config = EvalConfig { normalization: ScoreNormalization::Rank, ..EvalConfig::default() };
        let moved = s.map(|v| v * v * v + v).unwrap();
        prop_assert_eq!(
            eval::evaluate(&[(s, g.clone())], &config).unwrap(),
            eval::evaluate(&[(moved, g)], &config).unwrap()
        );
    }

    #[test]
    fn ignore_pixels_never_count((s, g) in frame(10, 8), noise in prop::collection::vec(-5.0f64..5.0, 80)) {
        let scrambled = ScoreMap::new(10, 8, s.values().iter().zip(g.values()).zip(&noise)
            .map(|((&v, &l), &n)| if l == 255 { n } else { v }).collect()).unwrap();
        let config = EvalConfig::default();
        prop_assert_eq!(
            eval::evaluate(&[(s, g.clone())], &config).unwrap(),
            eval::evaluate(&[(scrambled, g)], &config).unwrap()
        );
    }

    #[test]
    fn segment_metrics_stay_in_unit_range((s, g) in frame(12, 9)) {
        let report = eval::evaluate(&[(s, g)], &EvalConfig::default()).unwrap();
        let unit = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
        prop_assert!(unit(report.siou_bar) && unit(report.ppv_bar) && unit(report.f1_bar));
        for t in &report.per_threshold {
            prop_assert!(unit(t.f1) && unit(t.siou_mean) && unit(t.ppv_mean));
        }
    }

    #[test]
    fn duplicated_frames_keep_the_metrics((s, g) in frame(8, 8)) {
        let config = EvalConfig::default();
        let one = eval::evaluate(&[(s.clone(), g.clone())], &config).unwrap();
        let two = eval::evaluate(&[(s.clone(), g.clone()), (s, g)], &config).unwrap();
        // means over twice as many terms may round differently in the last bits
        let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (a, b) => a == b,
        };
        prop_assert!(same(Some(one.ap), Some(two.ap)) && same(Some(one.fpr95), Some(two.fpr95)));
        prop_assert!(same(one.siou_bar, two.siou_bar) && same(one.ppv_bar, two.ppv_bar) && same(one.f1_bar, two.f1_bar));
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), shift in 1usize..9) {
        let config = VitConfig { patch_size: 2, grid_n: 3, channels: 6, heads: 2, layers: 1, use_class_token: false };
        let weights = vit::init_model(&config, seed).unwrap();
        let t = config.num_tokens();
        let z = Matrix::from_fn(t, config.channels, |r, c| ((seed as usize + r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
        let pz = Matrix::from_fn(t, config.channels, |r, c| z.get(perm[r], c));
        let (a, _) = vit::attention_forward(&z, &weights.layers[0], &config).unwrap();
        let (pa, _) = vit::attention_forward(&pz, &weights.layers[0], &config).unwrap();
        for (h, ph) in a.iter().zip(&pa) {
            for r in 0..t {
                for c in 0..t {
                    prop_assert!((ph.get(r, c) - h.get(perm[r], perm[c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn small_step_descent_never_increases_loss(data in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0, any::<bool>()), 4..40)) {
        let labels: Vec<bool> = data.iter().map(|d| d.2).collect();
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let samples = Matrix::from_vec(data.len(), 2, data.iter().flat_map(|d| [d.0, d.1]).collect());
        let options = FitOptions { epochs: 60, learning_rate: 0.01, l2: 1e-4 };
        let fit = selection::fit_layer_weights(&samples, &labels, &options).unwrap();
        prop_assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }
}
