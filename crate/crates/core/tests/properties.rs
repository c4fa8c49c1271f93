use groupnet_core::binarizers::{act_sign_poly_bwd, fold_scales, sign, weight_binarize_fwd, BnParams};
use groupnet_core::bitcore::{
    and_popcount_dot, binary_conv2d, pack_filters, speedup_ratio, xnor_popcount_dot, BitTensor, ConvGeometry,
    LayerDims, Lane, PadValue,
};
use groupnet_core::checkpoint::{Checkpoint, Entry, VERSION};
use groupnet_core::groupnet::{
    complexity_report, fixed_point_binary_ops, hard_gate_forward, BackboneSpec, HardGate, HeadSpec, Model, ModelSpec,
    StageSpec,
};
use groupnet_core::nn::layers::Mode;
use groupnet_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signs_of(x: &[f64]) -> Vec<i64> {
    x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
}

fn dense_conv(x: &[i64], xs: [usize; 4], w: &[i64], ws: [usize; 4], g: &ConvGeometry, pad_value: i64) -> Vec<i64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let (oh, ow) = g.output_hw((h, wd), (kh, kw)).unwrap();
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                                let ix = (xx * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                                let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize;
                                let v = if inside { x[((b * c + ic) * h + iy as usize) * wd + ix as usize] } else { pad_value };
                                acc += v * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

prop_compose! {
    fn conv_case()(
        n in 1usize..3, c in 1usize..140, o in 1usize..5,
        kh in 1usize..4, kw in 1usize..4,
        stride in (1usize..3, 1usize..3), pad in (0usize..3, 0usize..3), dil in (1usize..3, 1usize..3),
        extra in (0usize..5, 0usize..5), pad_value in 0usize..3, seed in any::<u64>(),
    ) -> (usize, usize, usize, (usize, usize), ConvGeometry, (usize, usize), u64) {
        let h = dil.0 * (kh - 1) + 1 + extra.0;
        let w = dil.1 * (kw - 1) + 1 + extra.1;
        let pv = [PadValue::MinusOne, PadValue::PlusOne, PadValue::ZeroSkip][pad_value];
        let g = ConvGeometry { stride, padding: pad, dilation: dil, pad_value: pv };
        (n, c, o, (kh, kw), g, (h, w), seed)
    }
}

fn lane_words(rng: &mut ChaCha8Rng, len: usize) -> Vec<u64> {
    (0..len.div_ceil(64)).map(|_| rng.random()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn packed_conv_equals_dense_conv((n, c, o, k, g, (h, w), seed) in conv_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = [n, c, h, w];
        let ws = [o, c, k.0, k.1];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..ws.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = binary_conv2d(&BitTensor::pack_signs(&x, &xs, 1).unwrap(), &pack_filters(&wt, ws).unwrap(), &g).unwrap();
        let pv = match g.pad_value { PadValue::MinusOne => -1, PadValue::PlusOne => 1, PadValue::ZeroSkip => 0 };
        let want = dense_conv(&signs_of(&x), xs, &signs_of(&wt), ws, &g, pv);
        prop_assert_eq!(got.data.iter().map(|&v| i64::from(v)).collect::<Vec<_>>(), want);

        // {0,1} activations pad with zero whatever the geometry says
        let z: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(v >= 0.0))).collect();
        let got = binary_conv2d(&BitTensor::pack_zero_one(&z, &xs, 1).unwrap(), &pack_filters(&wt, ws).unwrap(), &g).unwrap();
        let zi: Vec<i64> = z.iter().map(|&v| v as i64).collect();
        let want = dense_conv(&zi, xs, &signs_of(&wt), ws, &g, 0);
        prop_assert_eq!(got.data.iter().map(|&v| i64::from(v)).collect::<Vec<_>>(), want);
    }

    #[test]
    fn garbage_past_valid_bits_never_changes_a_dot(len in 1usize..300, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = lane_words(&mut rng, len);
        let b = lane_words(&mut rng, len);
        let tail = |v: &[u64], rng: &mut ChaCha8Rng| {
            let mut v = v.to_vec();
            if len % 64 != 0 {
                let last = v.len() - 1;
                v[last] |= rng.random::<u64>() << (len % 64);
            }
            v
        };
        let (a2, b2) = (tail(&a, &mut rng), tail(&b, &mut rng));
        let clean = (
            xnor_popcount_dot(Lane::new(&a, len), Lane::new(&b, len)).unwrap(),
            and_popcount_dot(Lane::new(&a, len), Lane::new(&b, len)).unwrap(),
        );
        let dirty = (
            xnor_popcount_dot(Lane::new(&a2, len), Lane::new(&b2, len)).unwrap(),
            and_popcount_dot(Lane::new(&a2, len), Lane::new(&b2, len)).unwrap(),
        );
        prop_assert_eq!(clean, dirty);
        // and the ±1 result matches the decoded inner product
        let bit = |v: &[u64], i: usize| v[i / 64] >> (i % 64) & 1 == 1;
        let want: i32 = (0..len).map(|i| if bit(&a, i) == bit(&b, i) { 1 } else { -1 }).sum();
        prop_assert_eq!(clean.0, want);
    }

    #[test]
    fn sigma_falls_with_bases_and_rises_with_work(c in 1usize..512, k in 1usize..6, s in 1usize..64, out in 1usize..64) {
        let layer = LayerDims { c_in: c, kernel: (3, 3), input: (s, s), output: (out, out) };
        let a = speedup_ratio(&layer, k).unwrap();
        prop_assert!(speedup_ratio(&layer, k + 1).unwrap() < a);
        let bigger = LayerDims { c_in: c + 1, ..layer };
        prop_assert!(speedup_ratio(&bigger, k).unwrap() > a);
        let wider = LayerDims { kernel: (3, 4), ..layer };
        prop_assert!(speedup_ratio(&wider, k).unwrap() > a);
    }

    #[test]
    fn poly_backward_is_the_derivative_of_the_polynomial(x in -2.0f64..2.0) {
        let poly = |x: f64| if x < -1.0 { -1.0 } else if x < 0.0 { 2.0 * x + x * x } else if x < 1.0 { 2.0 * x - x * x } else { 1.0 };
        let h = 1e-4;
        prop_assume!([-1.0, 0.0, 1.0].iter().all(|b: &f64| (x - b).abs() > 2.0 * h));
        let fd = (poly(x + h) - poly(x - h)) / (2.0 * h);
        prop_assert!((act_sign_poly_bwd(1.0, x) - fd).abs() <= 1e-6, "x={} fd={} got={}", x, fd, act_sign_poly_bwd(1.0, x));
    }

    #[test]
    fn binarize_then_unpack_is_sign(w in prop::collection::vec(-2.0f64..2.0, 1..200), filters in 1usize..4) {
        let per = w.len().div_ceil(filters);
        let mut w = w;
        w.resize(per * filters, 0.0);
        let (bits, scale) = weight_binarize_fwd(&w, &[filters, per]).unwrap();
        prop_assert_eq!(bits.unpack(), w.iter().map(|&v| sign(v)).collect::<Vec<_>>());
        prop_assert_eq!(scale.alpha.len(), filters);
    }

    #[test]
    fn folded_alpha_matches_explicit_scaling(seed in any::<u64>(), channels in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, hw) = (3, 4);
        let ws = [channels, cin, 3, 3];
        let w: Vec<f64> = (0..ws.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..cin * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (bits, alpha) = weight_binarize_fwd(&w, &ws).unwrap();
        let u = binary_conv2d(&BitTensor::pack_signs(&x, &[1, cin, hw, hw], 1).unwrap(), &bits, &ConvGeometry::new(1, 1, 1)).unwrap();
        let bn = BnParams {
            gamma: (0..channels).map(|_| rng.random_range(0.5..2.0)).collect(),
            beta: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mean: (0..channels).map(|_| rng.random_range(-3.0..3.0)).collect(),
            var: (0..channels).map(|_| rng.random_range(0.5..4.0)).collect(),
            eps: 1e-5,
        };
        let folded = fold_scales(&alpha, Some(&bn)).unwrap();
        for (i, &v) in u.data.iter().enumerate() {
            let ch = i / (hw * hw);
            let explicit = bn.apply(ch, alpha.alpha[ch] * f64::from(v));
            let f = folded.apply(ch, f64::from(v));
            prop_assert!((explicit - f).abs() <= 1e-6 * explicit.abs().max(1.0));
        }
    }

    #[test]
    fn hard_gate_keeps_exactly_n(seed in any::<u64>(), k in 1usize..9, n_frac in 0.0f64..1.0, batch in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + ((k - 1) as f64 * n_frac) as usize;
        let gate = HardGate::new("g", 4, k, n, &mut rng).unwrap();
        let x = Tensor::new(&[batch, 4, 3, 3], (0..batch * 36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = hard_gate_forward(&x, &gate).unwrap();
        for (row, sel) in out.mask.chunks(k).zip(&out.selected) {
            prop_assert_eq!(row.iter().filter(|&&v| v == 1).count(), n);
            prop_assert_eq!(sel.len(), n);
        }
    }

    #[test]
    fn checkpoint_roundtrips_any_entries(
        floats in prop::collection::vec(any::<f32>(), 0..50),
        signs in prop::collection::vec(-1.0f64..1.0, 1..200),
        ints in prop::collection::vec(any::<i8>(), 0..50),
    ) {
        let mut c = Checkpoint::default();
        let fv: Vec<f64> = floats.iter().map(|&v| f64::from(v)).collect();
        c.push(Entry::f32("a.weight", &[fv.len()], &fv));
        c.push(Entry::bits("b.bits", &[signs.len()], &signs));
        c.push(Entry::i8("c.q", &[ints.len()], ints.clone()));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.entries.len(), 3);
        let got: Vec<u32> = back.entries[0].to_f64().iter().map(|&v| (v as f32).to_bits()).collect();
        prop_assert_eq!(got, floats.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.entries[1].to_f64(), signs.iter().map(|&v| sign(v)).collect::<Vec<_>>());
        prop_assert_eq!(&back.entries[2], &c.entries[2]);
    }
}

#[test]
fn newer_checkpoint_version_fails_loudly() {
    let mut bytes = Checkpoint::default().to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::UnsupportedVersion { .. })));
}

fn small_backbone(blocks: usize, width: usize) -> BackboneSpec {
    BackboneSpec {
        in_channels: 3,
        input_hw: (8, 8),
        stem_channels: width,
        stem_stride: 1,
        stages: vec![
            StageSpec { channels: width, blocks, stride: 1 },
            StageSpec { channels: 2 * width, blocks, stride: 2 },
        ],
        units_per_block: 2,
        head: HeadSpec::Classify { classes: 4 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn group_ops_match_fixed_point_at_k_equal_p_squared(blocks in 1usize..3, width in 2usize..9, p in 1u32..3) {
        let k = (p * p) as usize;
        let model = Model::new(ModelSpec::new(small_backbone(blocks, width), k)).unwrap();
        let r = complexity_report(&model).unwrap();
        prop_assert_eq!(r.binary_ops, fixed_point_binary_ops(&model, p).unwrap());
    }

    #[test]
    fn eval_forward_is_independent_of_the_batch(seed in any::<u64>(), batch in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[batch, 3, 8, 8], (0..batch * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for binary in [false, true] {
            let mut spec = ModelSpec::new(small_backbone(1, 4), 2);
            spec.binary = binary;
            spec.seed = seed;
            let mut m = Model::new(spec).unwrap();
            // move running statistics away from their initial values
            let _ = m.forward(&x, Mode::Train).unwrap();
            let stats: Vec<Vec<f64>> = m.batch_norms().iter().map(|b| b.running_mean.clone()).collect();
            let all = m.forward(&x, Mode::Eval).unwrap().0;
            let per = all.numel() / batch;
            for i in 0..batch {
                let one = m.forward(&x.gather_rows(&[i]), Mode::Eval).unwrap().0;
                let diff = one.data.iter().zip(&all.data[i * per..][..per]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(diff <= 1e-9, "binary={} sample {} diff {}", binary, i, diff);
            }
            let after: Vec<Vec<f64>> = m.batch_norms().iter().map(|b| b.running_mean.clone()).collect();
            prop_assert_eq!(stats, after);
        }
    }
}
