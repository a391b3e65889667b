use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transfusion::data::{self, batch_order, Dataset, SplitRatios, SyntheticSpec};
use transfusion::eval::compute_metrics;
use transfusion::layers::{
    attention, linear, positional_encoding, AttentionHeadConfig, AttentionKernel, MultiHeadAttention, ParamSet,
};
use transfusion::model::{ModelConfig, Streams, TransFusionModel};
use transfusion::preprocess::{
    hampel_filter, patchify, resample_window, unpatchify, HampelConfig, RawCsiWindow, ResampleMethod, SigmaMode,
};
use transfusion::tensor::{Tape, Tensor};
use transfusion::train::{adam_step, AdamState, TrainConfig};

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..7, 1usize..7)
}

fn matrix() -> impl Strategy<Value = Tensor> {
    dims().prop_flat_map(|(r, c)| vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap()))
}

fn tiny_dataset() -> &'static Dataset {
    use std::sync::OnceLock;
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| data::generate(&SyntheticSpec::tiny()).unwrap())
}

fn tiny_model(streams: Streams) -> &'static TransFusionModel {
    use std::sync::OnceLock;
    static BOTH: OnceLock<TransFusionModel> = OnceLock::new();
    static WIFI: OnceLock<TransFusionModel> = OnceLock::new();
    static VISION: OnceLock<TransFusionModel> = OnceLock::new();
    let cell = match streams {
        Streams::Both => &BOTH,
        Streams::WifiOnly => &WIFI,
        Streams::VisionOnly => &VISION,
    };
    cell.get_or_init(|| {
        TransFusionModel::build(&ModelConfig {
            streams,
            ..ModelConfig::tiny()
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(x in matrix(), shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let shifted = Tensor::new(&[r, c], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = t.constant(x).unwrap();
        let b = t.constant(shifted).unwrap();
        let sa = t.softmax_rows(a).unwrap();
        let sb = t.softmax_rows(b).unwrap();
        for (ra, rb) in t.value(sa).chunks(c).zip(t.value(sb).chunks(c)) {
            prop_assert!((ra.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (p, q) in ra.iter().zip(rb) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_ops_invert_exactly(x in matrix(), cut in 0.0f64..1.0) {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut t = Tape::new();
        let v = t.constant(x.clone()).unwrap();
        let tt = t.transpose(v).unwrap();
        let back = t.transpose(tt).unwrap();
        prop_assert_eq!(t.value(back), x.data());
        let flat = t.reshape(v, &[r * c]).unwrap();
        let back = t.reshape(flat, &[r, c]).unwrap();
        prop_assert_eq!(t.value(back), x.data());
        let k = ((r as f64) * cut) as usize;
        if k > 0 && k < r {
            let top = t.slice(v, 0, 0, k).unwrap();
            let bottom = t.slice(v, 0, k, r).unwrap();
            let joined = t.concat(&[top, bottom], 0).unwrap();
            prop_assert_eq!(t.value(joined), x.data());
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(x in tensor(&[3, 4]), w in tensor(&[4, 2])) {
        let grads = |which: u8| {
            let mut t = Tape::new();
            let xv = t.param(&x.clone().with_grad(true)).unwrap();
            let wv = t.constant(w.clone()).unwrap();
            let y = t.matmul(xv, wv).unwrap();
            let l1 = { let e = t.exp(y).unwrap(); t.sum(e).unwrap() };
            let l2 = { let s = t.mul(xv, xv).unwrap(); t.mean(s).unwrap() };
            let loss = match which { 0 => l1, 1 => l2, _ => t.add(l1, l2).unwrap() };
            t.backward(loss).unwrap().get_or_zeros(xv, 12)
        };
        let (g1, g2, g12) = (grads(0), grads(1), grads(2));
        for i in 0..12 {
            prop_assert!((g1[i] + g2[i] - g12[i]).abs() <= 1e-12 * (1.0 + g12[i].abs()));
        }
    }

    #[test]
    fn linear_and_conv_are_linear_maps(
        x in tensor(&[5, 3]), y in tensor(&[5, 3]),
        w in tensor(&[3, 2]), k in tensor(&[3, 3, 2]),
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let combo = Tensor::new(&[5, 3], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for conv in [false, true] {
            let mut t = Tape::new();
            let op = |t: &mut Tape, input: &Tensor| {
                let v = t.constant(input.clone()).unwrap();
                let out = if conv {
                    let kv = t.constant(k.clone()).unwrap();
                    t.conv1d(v, kv, None).unwrap()
                } else {
                    let wv = t.constant(w.clone()).unwrap();
                    linear(t, v, wv, None).unwrap()
                };
                t.value(out).to_vec()
            };
            let (fx, fy, fc) = (op(&mut t, &x), op(&mut t, &y), op(&mut t, &combo));
            for i in 0..fc.len() {
                prop_assert!((a * fx[i] + b * fy[i] - fc[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn softmax_attention_stays_in_value_hull(q in tensor(&[4, 3]), k in tensor(&[5, 3]), v in tensor(&[5, 2])) {
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q).unwrap(), t.constant(k).unwrap(), t.constant(v.clone()).unwrap());
        let out = attention(&mut t, qv, kv, vv, AttentionKernel::Softmax, true).unwrap();
        for row in t.value(out).chunks(2) {
            for (c, &o) in row.iter().enumerate() {
                let col = (0..5).map(|j| v.at(&[j, c]));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn softmax_mha_invariant_to_joint_kv_permutation(
        xq in tensor(&[3, 4]), xkv in tensor(&[5, 6]), seed in any::<u64>(), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionHeadConfig::new(4, 2, AttentionKernel::Softmax, true).unwrap();
        let mha = MultiHeadAttention::new(&mut params, &mut rng, "m", cfg, 4, 6).unwrap();
        let permuted = Tensor::new(&[5, 6], perm.iter().flat_map(|&i| xkv.data()[i * 6..(i + 1) * 6].to_vec()).collect()).unwrap();
        let run = |src: &Tensor| {
            let mut t = Tape::new();
            let bound = params.bind(&mut t).unwrap();
            let (a, b) = (t.constant(xq.clone()).unwrap(), t.constant(src.clone()).unwrap());
            let out = mha.forward(&mut t, &bound, a, b).unwrap();
            t.value(out).to_vec()
        };
        let (o1, o2) = (run(&xkv), run(&permuted));
        for (p, q) in o1.iter().zip(&o2) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn positional_encoding_is_pure(len in 1usize..40, half in 1usize..16) {
        let a = positional_encoding(len, 2 * half).unwrap();
        let b = positional_encoding(len, 2 * half).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn hampel_only_writes_window_medians(
        x in vec(-10.0f64..10.0, 1..80), k in 1usize..6, spikes in vec((any::<prop::sample::Index>(), -500.0f64..500.0), 0..4),
    ) {
        let mut x = x;
        for (i, v) in spikes {
            let i = i.index(x.len());
            x[i] = v;
        }
        let cfg = HampelConfig { half_width: k, n_sigmas: 3.0, mode: SigmaMode::Mad };
        let out = hampel_filter(&x, &cfg).unwrap();
        let changed = x.iter().zip(&out.filtered).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= out.outlier_count());
        for (i, &flag) in out.mask.iter().enumerate() {
            if flag {
                let mut w: Vec<f64> = x[i.saturating_sub(k)..(i + k + 1).min(x.len())].to_vec();
                w.sort_by(f64::total_cmp);
                let n = w.len();
                let med = if n % 2 == 1 { w[n / 2] } else { (w[n / 2 - 1] + w[n / 2]) / 2.0 };
                prop_assert_eq!(out.filtered[i], med);
            } else {
                prop_assert_eq!(out.filtered[i].to_bits(), x[i].to_bits());
            }
        }
        // A second pass that flags nothing leaves the output untouched.
        let again = hampel_filter(&out.filtered, &cfg).unwrap();
        if again.outlier_count() == 0 {
            prop_assert_eq!(&again.filtered, &out.filtered);
        }
    }

    #[test]
    fn hampel_is_idempotent_on_spiked_smooth_signals(
        n in 20usize..120, freq in 0.01f64..0.1, spikes in vec(any::<prop::sample::Index>(), 0..3),
    ) {
        let mut x: Vec<f64> = (0..n).map(|i| (i as f64 * freq).sin()).collect();
        for s in spikes {
            x[s.index(n)] += 100.0;
        }
        let cfg = HampelConfig::default();
        let once = hampel_filter(&x, &cfg).unwrap();
        let twice = hampel_filter(&once.filtered, &cfg).unwrap();
        prop_assume!(twice.outlier_count() == 0);
        prop_assert_eq!(twice.filtered, once.filtered);
    }

    #[test]
    fn patchify_roundtrip(grid in (1usize..4, 1usize..4, 1usize..4, 1usize..3), seed in any::<u64>()) {
        use rand::Rng;
        let (gh, gw, p, c) = grid;
        let (h, w) = (gh * p, gw * p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[gh * gw, p * p * c]);
        prop_assert_eq!(unpatchify(&patches, h, w, c, p).unwrap(), img);
    }

    #[test]
    fn mean_pool_keeps_the_global_mean(l in 1usize..10, factor in 1usize..8, d in 1usize..4, seed in any::<u64>()) {
        use rand::Rng;
        let n = l * factor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let packets = Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let raw = RawCsiWindow::new(packets.clone(), 500.0, n as f64 / 500.0).unwrap();
        let pooled = resample_window(&raw, l, ResampleMethod::MeanPool).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        prop_assert!((mean(&pooled) - mean(&packets)).abs() <= 1e-9);
    }

    #[test]
    fn metrics_permutation_invariant_and_translation_coupled(
        pairs in vec((-20.0f64..60.0, 0u32..45), 2..50), shift in -10.0f64..10.0,
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
        let base = compute_metrics(&preds, &labels).unwrap();
        let mut idx: Vec<usize> = (0..preds.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let p2: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(compute_metrics(&p2, &l2).unwrap(), base.clone());

        let ps: Vec<f64> = preds.iter().map(|p| p + shift).collect();
        let ls: Vec<f64> = labels.iter().map(|y| y + shift).collect();
        let moved = compute_metrics(&ps, &ls).unwrap();
        prop_assert!((moved.mae - base.mae).abs() <= 1e-9 * (1.0 + base.mae));
        prop_assert!((moved.mse - base.mse).abs() <= 1e-9 * (1.0 + base.mse));
        if let (Some(a), Some(b)) = (moved.r2, base.r2) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_a_no_op(seed in any::<u64>(), t0 in 0u64..1000) {
        use rand::Rng;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.add("a", Tensor::new(&[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        params.add("b", Tensor::new(&[4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let before = params.tensors().to_vec();
        let mut state = AdamState::new(&params);
        state.t = t0;
        // Zero moments, as after any run of zero gradients.
        let zero: Vec<Vec<f64>> = vec![vec![0.0; 6], vec![0.0; 4]];
        adam_step(&mut params, &zero, &mut state, &TrainConfig::default()).unwrap();
        prop_assert_eq!(params.tensors(), &before[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_deterministic_and_disjoint(seed in any::<u64>()) {
        let ds = tiny_dataset();
        let a = data::split(ds, SplitRatios::default(), seed).unwrap();
        let b = data::split(ds, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        prop_assert!(!a.train.is_empty() && !a.val.is_empty() && !a.test.is_empty());
    }

    #[test]
    fn batch_order_is_a_partition(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 1u64..50) {
        let order = batch_order(n, bs, Some(seed), epoch).unwrap();
        prop_assert!(order.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(order, batch_order(n, bs, Some(seed), epoch).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_deterministic_and_ablations_isolated(seed in any::<u64>()) {
        use rand::Rng;
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let (w1, w2) = (draw(&[cfg.l_w, cfg.d_w]), draw(&[cfg.l_w, cfg.d_w]));
        let (v1, v2) = (draw(&[cfg.l_v, cfg.d_v]), draw(&[cfg.l_v, cfg.d_v]));
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();

        let both = tiny_model(Streams::Both);
        let a = both.predict(std::slice::from_ref(&w1), std::slice::from_ref(&v1)).unwrap();
        let b = both.predict(std::slice::from_ref(&w1), std::slice::from_ref(&v1)).unwrap();
        prop_assert_eq!(bits(a), bits(b));

        let wifi = tiny_model(Streams::WifiOnly);
        let a = wifi.predict(std::slice::from_ref(&w1), std::slice::from_ref(&v1)).unwrap();
        let b = wifi.predict(std::slice::from_ref(&w1), std::slice::from_ref(&v2)).unwrap();
        prop_assert_eq!(bits(a), bits(b));

        let vision = tiny_model(Streams::VisionOnly);
        let a = vision.predict(&[w1], std::slice::from_ref(&v1)).unwrap();
        let b = vision.predict(&[w2], &[v1]).unwrap();
        prop_assert_eq!(bits(a), bits(b));
    }
}
