use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simnet_core::encoders::{CloudBatch, PointEncoder, PointEncoderConfig};
use simnet_core::fusion::{
    concat_fuse, AttentionDirection, CrossAttention, FeatureRole, FeatureVector, Model, ModelVariant,
};
use simnet_core::harness::{classification_metrics, f1_score};
use simnet_core::imaging::{apply_mask, augment_image, decode_ccm, encode_ccm, MaskImage, RgbImage};
use simnet_core::numgrad::{step_lr, Mode, ParameterStore, Session, Tensor, PROB_CLAMP};
use simnet_core::pixel2point::{
    ablate_points, coverage_radius, fps, fps_reference, image_to_cloud, kept_count, normalize_cloud, start_index,
    zero_z, ConversionConfig, FpsStart, PointCloud,
};
use simnet_core::selfcheck::{random_batch, tiny_model_config};

fn random_image(w: usize, h: usize, fg: f64, rng: &mut impl Rng) -> RgbImage {
    let mut img = RgbImage::black(w, h);
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(fg) {
                img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
    }
    img
}

fn grid_points(n: usize, grid: u32, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.random_range(0..grid) as f64, rng.random_range(0..grid) as f64]).collect()
}

fn row_permuted(data: &[f32], dims: usize, perm: &[usize]) -> Vec<f32> {
    perm.iter().flat_map(|&i| data[i * dims..(i + 1) * dims].iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn set_max_pool_ignores_row_order(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3i32..3) as f64).collect();
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| data[i * cols..(i + 1) * cols].to_vec()).collect();
        let mut store = ParameterStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let a = s.input(&Tensor::new(vec![rows, cols], data).unwrap());
        let b = s.input(&Tensor::new(vec![rows, cols], permuted).unwrap());
        let ma = s.tape.segment_max(a, &[rows]).unwrap();
        let mb = s.tape.segment_max(b, &[rows]).unwrap();
        prop_assert_eq!(s.tape.value(ma), s.tape.value(mb));
    }

    #[test]
    fn step_lr_is_piecewise_constant_and_non_increasing(epoch in 0usize..400) {
        let lr = step_lr(epoch, 0.001);
        prop_assert_eq!(lr, 0.001 * 0.7f64.powi((epoch / 20) as i32));
        prop_assert!(step_lr(epoch + 1, 0.001) <= lr);
        if (epoch + 1) % 20 != 0 {
            prop_assert_eq!(step_lr(epoch + 1, 0.001), lr);
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), n in 1usize..8, classes in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.random_range(-30.0..30.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let l = s.tape.constant(vec![n, classes], logits).unwrap();
        let ce = s.tape.softmax_ce(l, &labels).unwrap();
        prop_assert!(s.tape.value(ce)[0] >= 0.0);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let bin: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let p = s.tape.constant(vec![n, 1], probs).unwrap();
        let bce = s.tape.bce(p, &bin).unwrap();
        prop_assert!(s.tape.value(bce)[0] >= 0.0);
        let exact: Vec<f64> = bin.iter().map(|&b| b as f64).collect();
        let p = s.tape.constant(vec![n, 1], exact).unwrap();
        let bce = s.tape.bce(p, &bin).unwrap();
        prop_assert!(s.tape.value(bce)[0] <= 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..6, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let x = s.tape.constant(vec![n, k], (0..n * k).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap();
        let p = s.tape.softmax(x).unwrap();
        for row in s.tape.value(p).chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fps_matches_the_greedy_oracle(seed in any::<u64>(), n in 1usize..300, m in 1usize..64, grid in 3u32..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = grid_points(n, grid, &mut rng);
        let start = FpsStart::Seeded(seed);
        let got = fps(&pts, m, start).unwrap();
        prop_assert_eq!(got.indices.len(), m);
        if n >= m {
            prop_assert_eq!(got.padded, 0);
            prop_assert_eq!(&got.indices, &fps_reference(&pts, m, start_index(&pts, start).unwrap()));
            let mut uniq = got.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), m);
        } else {
            prop_assert_eq!(got.padded, m - n);
        }
    }

    #[test]
    fn fps_coverage_shrinks_as_m_grows(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = grid_points(n, 50, &mut rng);
        let mut prev = f64::INFINITY;
        for m in 1..=n.min(20) {
            let sel = fps(&pts, m, FpsStart::NearestCentroid).unwrap();
            let r = coverage_radius(&pts, &sel.indices);
            prop_assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn lifted_points_map_back_to_source_pixels(seed in any::<u64>(), w in 2usize..24, h in 2usize..24, m in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = random_image(w, h, 0.5, &mut rng);
        img.set_pixel(0, 0, [9, 9, 9]);
        let cfg = ConversionConfig { points: m, dims: 3, normalize: false, start: FpsStart::NearestCentroid };
        let cloud = image_to_cloud(&img, &cfg, "p").unwrap();
        prop_assert_eq!(cloud.len(), m);
        for p in cloud.points() {
            let [r, g, b] = img.pixel(p[0] as usize, p[1] as usize);
            prop_assert!([r, g, b] != [0, 0, 0]);
            prop_assert_eq!(p[2], (r as f32 + g as f32 + b as f32) / 3.0);
        }
    }

    #[test]
    fn normalized_clouds_stay_in_bounds(seed in any::<u64>(), n in 1usize..100, six in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = if six { 6 } else { 3 };
        let coords: Vec<f32> = (0..n * dims)
            .map(|i| if i % dims < 2 { rng.random_range(0.0..500.0) } else { rng.random_range(0.0..=255.0) })
            .collect();
        let c = normalize_cloud(&PointCloud::new(dims, coords, false).unwrap()).unwrap();
        prop_assert!(c.is_normalized());
        for p in c.points() {
            prop_assert!((p[0] as f64).hypot(p[1] as f64) <= 1.0 + 1e-6);
            for v in &p[2..] {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn ablation_keeps_the_rounded_count(seed in any::<u64>(), n in 1usize..300, keep in 0.01f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<f32> = (0..n * 3).map(|i| i as f32).collect();
        let cloud = PointCloud::new(3, coords, false).unwrap();
        let k = kept_count(n, keep);
        let out = ablate_points(&cloud, keep, &mut rng);
        if k == 0 {
            prop_assert!(out.is_err());
        } else {
            let out = out.unwrap();
            prop_assert_eq!(out.len(), k);
            let rows: Vec<usize> = out.points().map(|p| p[0] as usize / 3).collect();
            prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert_eq!(ablate_points(&cloud, 1.0, &mut rng).unwrap(), cloud.clone());
        let z = zero_z(&cloud);
        prop_assert_eq!(zero_z(&z), z);
    }

    #[test]
    fn simpc_round_trip_is_bitwise(seed in any::<u64>(), n in 0usize..64, six in any::<bool>(), norm in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = if six { 6 } else { 3 };
        let coords: Vec<f32> = (0..n * dims).map(|_| f32::from_bits(rng.random::<u32>() & 0x3fff_ffff)).collect();
        let cloud = PointCloud::new(dims, coords, norm).unwrap();
        let bytes = cloud.to_bytes();
        let back = PointCloud::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, cloud);
    }

    #[test]
    fn ccm_round_trip_recovers_coordinates(seed in any::<u64>(), w in 2usize..40, h in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(w, h, 0.4, &mut rng);
        let ccm = encode_ccm(&img).unwrap();
        let decoded = decode_ccm(&ccm, w, h);
        let source: Vec<(usize, usize, [u8; 3])> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| (x, y, img.pixel(x, y)))
            .filter(|t| t.2 != [0, 0, 0])
            .collect();
        prop_assert_eq!(decoded.len(), source.len());
        for (d, (x, y, [r, g, b])) in decoded.iter().zip(&source) {
            prop_assert_eq!((d.x, d.y), (*x, *y));
            let mean = (*r as f64 + *g as f64 + *b as f64) / 3.0;
            let origin_marker = (*x, *y) == (0, 0) && mean < 0.5;
            prop_assert!((d.intensity - mean).abs() <= 0.5 || origin_marker);
        }
    }

    #[test]
    fn masking_is_idempotent_and_augmentation_keeps_pixels(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(w, h, 1.0, &mut rng);
        let mask = MaskImage::new(w, h, (0..w * h).map(|_| rng.random_bool(0.5)).collect()).unwrap();
        let once = apply_mask(&img, &mask).unwrap();
        prop_assert_eq!(apply_mask(&once, &mask).unwrap(), once.clone());
        let mut before: Vec<[u8; 3]> = img.pixels().collect();
        let mut after: Vec<[u8; 3]> = augment_image(&img, &mut rng).pixels().collect();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn concat_length_is_the_sum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = FeatureVector::new(FeatureRole::Image, (0..2048).map(|_| rng.random()).collect()).unwrap();
        let cloud = FeatureVector::new(FeatureRole::CloudProjected, (0..8).map(|_| rng.random()).collect()).unwrap();
        let fused = concat_fuse(&image, &cloud).unwrap();
        prop_assert_eq!(fused.values().len(), 2056);
        prop_assert_eq!(&fused.values()[..2048], image.values());
        prop_assert_eq!(&fused.values()[2048..], cloud.values());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn point_encoder_is_permutation_invariant(seed in any::<u64>(), n in 1usize..40, six in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = if six { 6 } else { 3 };
        let cfg = PointEncoderConfig {
            input_dims: dims,
            widths: vec![8, 16, 32],
            use_feature_transform: true,
            tnet_widths: vec![8, 16],
            tnet_fc: vec![8],
            ..PointEncoderConfig::default()
        };
        let enc = PointEncoder::new("point", &cfg).unwrap();
        let mut store = ParameterStore::<f32>::new();
        enc.init(&mut store, &mut rng).unwrap();
        for (name, t) in store.iter_mut() {
            if name.ends_with(".out.weight") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let data: Vec<f32> = (0..n * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = row_permuted(&data, dims, &perm);
        let mut global = |d: Vec<f32>| {
            let mut s = Session::new(&mut store, Mode::Eval, 0);
            let x = s.input(&Tensor::new(vec![n, dims], d).unwrap());
            let f = enc.forward(&mut s, x, &[n]).unwrap();
            s.tape.value(f.global).to_vec()
        };
        let a = global(data);
        let b = global(permuted);
        prop_assert_eq!(a.len(), 32);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_input_transform_matches_transform_off(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let on_cfg = PointEncoderConfig { widths: vec![8, 16], tnet_widths: vec![4, 8], tnet_fc: vec![6], ..PointEncoderConfig::default() };
        let off_cfg = PointEncoderConfig { use_input_transform: false, ..on_cfg.clone() };
        let on = PointEncoder::new("point", &on_cfg).unwrap();
        let off = PointEncoder::new("point", &off_cfg).unwrap();
        let mut on_store = ParameterStore::<f64>::new();
        on.init(&mut on_store, &mut rng).unwrap();
        let mut off_store = ParameterStore::<f64>::new();
        off.init(&mut off_store, &mut rng).unwrap();
        for (name, t) in off_store.iter_mut() {
            *t = on_store.get(name).unwrap().clone();
        }
        let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |enc: &PointEncoder, store: &mut ParameterStore<f64>| {
            let mut s = Session::new(store, Mode::Eval, 0);
            let x = s.input(&Tensor::new(vec![n, 3], data.clone()).unwrap());
            let f = enc.forward(&mut s, x, &[n]).unwrap();
            s.tape.value(f.global).to_vec()
        };
        prop_assert_eq!(run(&on, &mut on_store), run(&off, &mut off_store));
    }

    #[test]
    fn every_variant_is_invariant_to_cloud_order(seed in any::<u64>(), idx in 0usize..7) {
        let variant = ModelVariant::ALL[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_model_config(variant, 3, 2);
        let model = Model::new(&cfg).unwrap();
        let mut store: ParameterStore<f32> = model.init_store(seed).unwrap();
        let batch64 = random_batch(&cfg, 3, 6, &mut rng).unwrap();
        let cast = |b: &simnet_core::fusion::Batch<f64>| simnet_core::fusion::Batch::<f32> {
            images: b.images.as_ref().map(|t| t.cast()),
            ccm: b.ccm.as_ref().map(|t| t.cast()),
            clouds: b.clouds.as_ref().map(|c| CloudBatch { points: c.points.cast(), segments: c.segments.clone() }),
        };
        let batch = cast(&batch64);
        let mut shuffled = batch64.clone();
        if let Some(c) = shuffled.clouds.as_mut() {
            let mut perm: Vec<usize> = Vec::new();
            for seg in 0..3 {
                let mut p: Vec<usize> = (seg * 6..seg * 6 + 6).collect();
                p.shuffle(&mut rng);
                perm.extend(p);
            }
            let d: Vec<f64> = perm.iter().flat_map(|&i| c.points.data()[i * 3..i * 3 + 3].to_vec()).collect();
            c.points = Tensor::new(vec![18, 3], d).unwrap();
        }
        let shuffled = cast(&shuffled);
        let mut probs = |b: &simnet_core::fusion::Batch<f32>| {
            let mut s = Session::new(&mut store, Mode::Eval, 0);
            let o = model.forward(&mut s, b).unwrap();
            s.tape.value(o.probs).to_vec()
        };
        let a = probs(&batch);
        let b = probs(&shuffled);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{variant}: {a:?} vs {b:?}");
    }

    #[test]
    fn tiny_models_honor_their_fused_width(seed in any::<u64>(), idx in 0usize..7, classes in 2usize..4, batch in 2usize..4) {
        let variant = ModelVariant::ALL[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_model_config(variant, 3, classes);
        let model = Model::new(&cfg).unwrap();
        let mut store: ParameterStore<f64> = model.init_store(seed).unwrap();
        let b = random_batch(&cfg, batch, rng.random_range(1..9), &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Train, seed);
        let o = model.forward(&mut s, &b).unwrap();
        prop_assert_eq!(s.tape.shape(o.fused), &[batch, cfg.fused_dim()]);
        prop_assert_eq!(s.tape.shape(o.probs), &[batch, cfg.outputs()]);
    }
}

#[test]
fn single_token_attention_is_value_then_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..100 {
        let dir = [AttentionDirection::CloudQueriesImage, AttentionDirection::ImageQueriesCloud, AttentionDirection::Bidirectional][draw % 3];
        let attn = CrossAttention::new("attn", 6, 5, 4, dir).unwrap();
        let mut store = ParameterStore::<f64>::new();
        attn.init(&mut store, &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        let image = Tensor::new(vec![2, 6], (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let cloud = Tensor::new(vec![2, 5], (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let (iv, cv) = (s.input(&image), s.input(&cloud));
        let trace = attn.forward(&mut s, iv, cv).unwrap();
        for w in &trace.weights {
            assert!(s.tape.value(*w).iter().all(|&x| x == 1.0));
        }
        let mut expected = Vec::new();
        for (d, block) in &attn.blocks {
            let kv = if *d == AttentionDirection::CloudQueriesImage { trace.image_token } else { trace.cloud_token };
            let v = block.value.forward(&mut s, &[kv]).unwrap();
            let o = block.output.forward(&mut s, &[v]).unwrap();
            expected.push(s.tape.value(o).to_vec());
        }
        let got = s.tape.value(trace.output).to_vec();
        let width = 4 * attn.blocks.len();
        for row in 0..2 {
            let want: Vec<f64> = expected.iter().flat_map(|e| e[row * 4..row * 4 + 4].to_vec()).collect();
            for (g, w) in got[row * width..(row + 1) * width].iter().zip(&want) {
                assert!((g - w).abs() <= 1e-7, "draw {draw}: {g} vs {w}");
            }
        }
    }
}

fn brute_force_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let predicted_positive = tp + fp;
    if predicted_positive == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted_positive as f64;
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[test]
fn f1_matches_a_confusion_matrix_oracle_exhaustively() {
    for tp in 0..=20 {
        for fp in 0..=20 {
            for fn_ in 0..=20 {
                let want = brute_force_f1(tp, fp, fn_);
                assert!((f1_score(tp, fp, fn_) - want).abs() < 1e-12, "{tp} {fp} {fn_}");
                for tn in [0, 7, 20] {
                    let mut preds = Vec::new();
                    let mut labels = Vec::new();
                    for (n, p, l) in [(tp, 1, 1), (fp, 1, 0), (fn_, 0, 1), (tn, 0, 0)] {
                        preds.extend(std::iter::repeat_n(p, n));
                        labels.extend(std::iter::repeat_n(l, n));
                    }
                    if labels.is_empty() {
                        continue;
                    }
                    let (acc, f1) = classification_metrics(&preds, &labels, 2).unwrap();
                    assert!((f1 - want).abs() < 1e-12);
                    assert!((acc - (tp + tn) as f64 / labels.len() as f64).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn ccm_is_exact_up_to_full_side_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (w, h) in [(256, 256), (256, 3), (2, 256), (200, 131)] {
        let img = random_image(w, h, 0.3, &mut rng);
        let decoded = decode_ccm(&encode_ccm(&img).unwrap(), w, h);
        let mut it = decoded.iter();
        for y in 0..h {
            for x in 0..w {
                if img.pixel(x, y) != [0, 0, 0] {
                    let d = it.next().unwrap();
                    assert_eq!((d.x, d.y), (x, y));
                }
            }
        }
        assert!(it.next().is_none());
    }
}

#[test]
fn ccm_origin_marker_keeps_dark_origin_visible() {
    let mut img = RgbImage::black(4, 4);
    img.set_pixel(0, 0, [1, 0, 0]);
    let decoded = decode_ccm(&encode_ccm(&img).unwrap(), 4, 4);
    assert_eq!(decoded.len(), 1);
    assert_eq!((decoded[0].x, decoded[0].y, decoded[0].intensity), (0, 0, 1.0));
}

#[test]
fn bce_clamp_bound() {
    assert!(PROB_CLAMP > 0.0 && PROB_CLAMP <= 1e-7);
}
