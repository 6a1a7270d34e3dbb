//! Library results checked against small, independently written oracles.

use attentropy::entropy::{self, EntropyMap, LayerAggregation};
use attentropy::eval;
use attentropy::linalg::Matrix;
use attentropy::npy;
use attentropy::pipeline::{self, ExtractConfig};
use attentropy::selection;
use attentropy::synthetic::{PlantSpec, PlantedModel};
use attentropy::tensor::{BinaryMask, GrayImage, MaskLabel, Tensor};
use attentropy::vit::{self, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(r: &mut ChaCha8Rng, w: usize, h: usize) -> EntropyMap {
    EntropyMap::new(w, h, (0..w * h).map(|_| r.random_range(0.0..5.0)).collect()).unwrap()
}

/// Bilinear value at output pixel `(ox, oy)` computed from the four
/// neighbouring cell centres with explicit weights.
fn bilinear_oracle(map: &EntropyMap, out_w: usize, out_h: usize, ox: usize, oy: usize) -> f64 {
    let coord = |o: usize, out: usize, inn: usize| {
        let c = (o as f64 + 0.5) * inn as f64 / out as f64 - 0.5;
        c.max(0.0).min((inn - 1) as f64)
    };
    let (cx, cy) = (coord(ox, out_w, map.width()), coord(oy, out_h, map.height()));
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(map.width() - 1), (y0 + 1).min(map.height() - 1));
    let (tx, ty) = (cx - x0 as f64, cy - y0 as f64);
    (1.0 - tx) * (1.0 - ty) * map.get(x0, y0)
        + tx * (1.0 - ty) * map.get(x1, y0)
        + (1.0 - tx) * ty * map.get(x0, y1)
        + tx * ty * map.get(x1, y1)
}

#[test]
fn bilinear_matches_weight_oracle() {
    let mut r = rng(1);
    for _ in 0..40 {
        let (w, h) = (r.random_range(1..9), r.random_range(1..9));
        let map = random_map(&mut r, w, h);
        let (ow, oh) = (r.random_range(1..40), r.random_range(1..40));
        let out = entropy::resample_bilinear(&map, ow, oh).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let want = bilinear_oracle(&map, ow, oh, ox, oy);
                assert!((out.get(ox, oy) - want).abs() < 1e-12, "{w}x{h} -> {ow}x{oh} at ({ox},{oy})");
            }
        }
    }
}

#[test]
fn upsampling_by_integer_factor_hits_cell_centres_halfway() {
    // 2 cells -> 4 pixels: centres at 0.5 and 2.5, so pixels 1 and 2 sit a
    // quarter of the way in from each centre
    let map = EntropyMap::new(2, 1, vec![0.0, 4.0]).unwrap();
    let out = entropy::resample_bilinear(&map, 4, 1).unwrap();
    assert_eq!(out.values(), &[0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn weighted_aggregation_matches_formula() {
    let mut r = rng(2);
    let maps: Vec<EntropyMap> = (0..3).map(|_| random_map(&mut r, 4, 4)).collect();
    let agg = LayerAggregation::Weighted {
        weights: vec![0.5, -1.25, 2.0],
        bias: 0.3,
    };
    let out = entropy::aggregate_layers(&maps, &agg, 4, 4).unwrap();
    for i in 0..16 {
        let z = 0.3 + 0.5 * maps[0].values()[i] - 1.25 * maps[1].values()[i] + 2.0 * maps[2].values()[i];
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((out.values()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn merge_windows_matches_cell_average() {
    let mut r = rng(3);
    let (fw, fh, win) = (10, 7, 4);
    let xs = entropy::window_offsets(fw, win, 3).unwrap();
    let ys = entropy::window_offsets(fh, win, 3).unwrap();
    let mut placed = Vec::new();
    for &y in &ys {
        for &x in &xs {
            placed.push((random_map(&mut r, win, win), x, y));
        }
    }
    let merged = entropy::merge_windows(&placed, fw, fh).unwrap();
    for cy in 0..fh {
        for cx in 0..fw {
            let covering: Vec<f64> = placed
                .iter()
                .filter(|(_, x, y)| (*x..x + win).contains(&cx) && (*y..y + win).contains(&cy))
                .map(|(m, x, y)| m.get(cx - x, cy - y))
                .collect();
            let want = covering.iter().sum::<f64>() / covering.len() as f64;
            assert!((merged.get(cx, cy) - want).abs() < 1e-12);
        }
    }
}

/// Labels each 1-pixel with the smallest raster index reachable through
/// 8-neighbour steps, by repeated relaxation.
fn component_oracle(mask: &BinaryMask) -> Vec<Option<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut label: Vec<Option<usize>> = (0..w * h).map(|i| mask.is_object(i).then_some(i)).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some(mut best) = label[y * w + x] else { continue };
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        if let Some(l) = label[ny as usize * w + nx as usize] {
                            best = best.min(l);
                        }
                    }
                }
                if Some(best) != label[y * w + x] {
                    label[y * w + x] = Some(best);
                    changed = true;
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

#[test]
fn components_partition_matches_relaxation_oracle() {
    let mut r = rng(4);
    for _ in 0..30 {
        let (w, h) = (r.random_range(1..20), r.random_range(1..20));
        let density = r.random_range(0.1..0.6);
        let mask = BinaryMask::from_fn(w, h, |_, _| {
            if r.random_bool(density) {
                MaskLabel::Object
            } else if r.random_bool(0.1) {
                MaskLabel::Ignore
            } else {
                MaskLabel::Background
            }
        });
        let oracle = component_oracle(&mask);
        let set = eval::connected_components(&mask);
        let labels = set.labels();
        for i in 0..w * h {
            for j in 0..w * h {
                if let (Some(a), Some(b)) = (oracle[i], oracle[j]) {
                    assert_eq!(a == b, labels[i] == labels[j], "pixels {i},{j}");
                }
            }
            assert_eq!(oracle[i].is_none(), labels[i] == 0);
        }
        // raster-order ids: the first pixel of component k precedes that of k+1
        let firsts: Vec<usize> = set.components().iter().map(|c| *c.iter().min().unwrap()).collect();
        assert!(firsts.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn six_pixel_curve_matches_hand_enumeration() {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    let labels = [true, true, false, true, false, false];
    let curve = eval::pr_curve_from_pairs(scores.iter().copied().zip(labels).collect()).unwrap();
    // precision/recall at each cut, written out by hand
    let expected = [(1.0, 1.0 / 3.0), (1.0, 2.0 / 3.0), (2.0 / 3.0, 2.0 / 3.0), (3.0 / 4.0, 1.0), (3.0 / 5.0, 1.0), (3.0 / 6.0, 1.0)];
    assert_eq!(curve.points.len(), 6);
    for (p, (prec, rec)) in curve.points.iter().zip(expected) {
        assert!((p.precision - prec).abs() < 1e-15 && (p.recall - rec).abs() < 1e-15);
    }
    let ap = eval::average_precision(&curve).unwrap();
    assert!((ap - (1.0 / 3.0 + 1.0 / 3.0 + 0.75 / 3.0)).abs() < 1e-12);
    assert!((eval::fpr_at_tpr(&curve, 0.95).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn inverted_two_pixel_case() {
    let curve = eval::pr_curve_from_pairs(vec![(0.9, false), (0.1, true)]).unwrap();
    assert_eq!(eval::average_precision(&curve).unwrap(), 0.5);
}

#[test]
fn region_stats_match_direct_means() {
    let mut r = rng(5);
    let mask = BinaryMask::from_fn(32, 32, |x, y| {
        if (8..20).contains(&x) && (12..28).contains(&y) {
            MaskLabel::Object
        } else {
            MaskLabel::Background
        }
    });
    let map = random_map(&mut r, 8, 8);
    let stats = selection::region_stats(std::slice::from_ref(&map), &mask).unwrap();
    // each cell is 4x4 pixels and the object edges fall on cell borders
    let (mut obj, mut bg) = (Vec::new(), Vec::new());
    for cy in 0..8 {
        for cx in 0..8 {
            let inside = (2..5).contains(&cx) && (3..7).contains(&cy);
            if inside { &mut obj } else { &mut bg }.push(map.get(cx, cy));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((stats.layers[0].obj_mean - mean(&obj)).abs() < 1e-12);
    assert!((stats.layers[0].bg_mean - mean(&bg)).abs() < 1e-12);
}

#[test]
fn class_token_strip_renormalises_rows() {
    let a = Matrix::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.5, 0.1, 0.4], vec![1.0, 0.0, 0.0]]);
    let kept = entropy::strip_class_token(&a, true).unwrap();
    assert_eq!(kept.row(0), &[0.2, 0.8]);
    assert_eq!(kept.row(1), &[0.5, 0.5]);
    let raw = entropy::strip_class_token(&a, false).unwrap();
    assert_eq!(raw.row(0), &[0.1, 0.4]);
}

#[test]
fn npy_bytes_match_reference_layout() {
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.5]).unwrap();
    let mut bytes = Vec::new();
    npy::write_tensor(&mut bytes, &t).unwrap();
    let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }";
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
    assert_eq!((10 + header_len) % 64, 0);
    let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
    assert!(header.starts_with(dict) && header.ends_with('\n'));
    assert!(header[dict.len()..header_len - 1].bytes().all(|b| b == b' '));
    let payload: Vec<f32> = bytes[10 + header_len..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(payload, t.data());

    // a header written by hand with different spacing still parses
    let mut manual = b"\x93NUMPY\x01\x00".to_vec();
    let text = "{'descr':'<f4','fortran_order':False,'shape':(3,),}";
    let padded = format!("{text:<53}\n");
    manual.extend_from_slice(&(padded.len() as u16).to_le_bytes());
    manual.extend_from_slice(padded.as_bytes());
    for v in [1.5f32, -2.0, 0.25] {
        manual.extend_from_slice(&v.to_le_bytes());
    }
    let parsed = npy::read_tensor(&mut manual.as_slice()).unwrap();
    assert_eq!(parsed.shape(), &[3]);
    assert_eq!(parsed.data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let n = 50;
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    let samples = Matrix::from_fn(n, 3, |_, _| r.random_range(0.0..4.0));
    let (w, b, l2) = (vec![0.3, -0.7, 0.1], 0.2, 1e-3);
    let (g, gb) = selection::logistic_gradient(&w, b, &samples, &labels, l2);
    let h = 1e-6;
    for j in 0..3 {
        let (mut up, mut dn) = (w.clone(), w.clone());
        up[j] += h;
        dn[j] -= h;
        let fd = (selection::logistic_loss(&up, b, &samples, &labels, l2) - selection::logistic_loss(&dn, b, &samples, &labels, l2)) / (2.0 * h);
        assert!((g[j] - fd).abs() <= 1e-6 * g[j].abs().max(fd.abs()), "{} vs {fd}", g[j]);
    }
    let fd = (selection::logistic_loss(&w, b + h, &samples, &labels, l2) - selection::logistic_loss(&w, b - h, &samples, &labels, l2)) / (2.0 * h);
    assert!((gb - fd).abs() <= 1e-6 * gb.abs().max(fd.abs()));
}

#[test]
fn vit_extraction_shapes_and_sliding_windows() {
    let config = VitConfig {
        patch_size: 16,
        grid_n: 8,
        channels: 16,
        heads: 2,
        layers: 2,
        use_class_token: false,
    };
    let weights = vit::init_model(&config, 1).unwrap();
    let square = GrayImage::filled(128, 128, 90);
    let ex = pipeline::extract(&weights, &square, &ExtractConfig::default()).unwrap();
    assert_eq!(ex.windows, vec![(0, 0)]);
    assert!(ex.maps.iter().all(|m| (m.width(), m.height()) == (8, 8)));

    let mut r = rng(7);
    let wide = GrayImage::new(256, 128, (0..256 * 128).map(|_| r.random()).collect()).unwrap();
    let ex = pipeline::extract(&weights, &wide, &ExtractConfig::default()).unwrap();
    assert_eq!(ex.windows, vec![(0, 0), (64, 0), (128, 0)]);
    assert!(ex.maps.iter().all(|m| (m.width(), m.height()) == (16, 8)));
    // columns 4..8 are covered by the first two windows only
    let w0 = vit::vit_forward(&wide.crop(0, 0, 128, 128), &weights).unwrap();
    let w1 = vit::vit_forward(&wide.crop(64, 0, 128, 128), &weights).unwrap();
    let m0 = entropy::stack_entropy_maps(&w0, Default::default()).unwrap();
    let m1 = entropy::stack_entropy_maps(&w1, Default::default()).unwrap();
    let want = (m0[1].get(5, 3) + m1[1].get(1, 3)) / 2.0;
    assert!((ex.maps[1].get(5, 3) - want).abs() < 1e-12);
    assert_eq!(ex.maps[1].get(2, 3), m0[1].get(2, 3));
}

#[test]
fn planted_pipeline_recovers_object() {
    let spec = PlantSpec::default();
    let model = PlantedModel::new(spec.clone()).unwrap();
    let side = spec.image_side();
    let ex = pipeline::extract(&model, &GrayImage::filled(side, side, 0), &ExtractConfig::default()).unwrap();
    let report = selection::select_from_maps(&ex.maps, &spec.mask(), 1.2).unwrap();
    assert_eq!(report.selection, spec.contrast_layers);
    assert!(!report.fallback_used);
    let scores = ex.score_map(&report.aggregation(), None).unwrap();
    // midway between object (~0.48 nats) and background (~5.54 nats) entropy
    let mask = entropy::binarize(&scores, -3.0).unwrap();
    let truth = spec.mask();
    let inter = (0..side * side).filter(|&i| mask.is_object(i) && truth.is_object(i)).count();
    let union = (0..side * side).filter(|&i| mask.is_object(i) || truth.is_object(i)).count();
    assert!(inter as f64 / union as f64 >= 0.9, "IoU {}", inter as f64 / union as f64);
}
