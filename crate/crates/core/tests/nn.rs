use tiletensor::dense::{dense_matmul, relative_error, DenseTensor};
use tiletensor::nn::{
    cryptonets_infer, forward_plain, im2col, InferenceOptions, Layer, NetworkSpec,
};
use tiletensor::Session;

fn cryptonets() -> NetworkSpec {
    NetworkSpec::cryptonets().with_random_weights(7)
}

// naive convolution written directly from the definition
fn naive_conv(
    img: &[f64],
    h: usize,
    w: usize,
    filt: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let y = (r * stride + i) as isize - pad as isize;
                    let x = (c * stride + j) as isize - pad as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        acc += img[y as usize * w + x as usize] * filt[i * k + j];
                    }
                }
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

#[test]
fn im2col_product_matches_naive_convolution() {
    let img = DenseTensor::from_fn(&[9, 7], |i| ((i[0] * 7 + i[1]) % 5) as f64 - 2.0).unwrap();
    let filt = DenseTensor::from_fn(&[9, 1], |i| i[0] as f64 * 0.5 - 1.0).unwrap();
    let cols = im2col(&img, 3, 3, 2, 1).unwrap();
    let got = dense_matmul(&cols, &filt).unwrap();
    let want = naive_conv(img.values(), 9, 7, filt.values(), 3, 2, 1);
    assert_eq!(got.values(), want.as_slice());
}

#[test]
fn plain_forward_matches_naive_network() {
    let net = cryptonets();
    let batch = net.random_batch(2, 3).unwrap();
    let got = forward_plain(&net, &batch).unwrap();
    let Layer::Conv {
        weights: Some(cw),
        bias: Some(cb),
        ..
    } = &net.layers[1]
    else {
        panic!()
    };
    let Layer::FullyConnected {
        weights: Some(w1),
        bias: Some(b1),
        ..
    } = &net.layers[3]
    else {
        panic!()
    };
    let Layer::FullyConnected {
        weights: Some(w2),
        bias: Some(b2),
        ..
    } = &net.layers[5]
    else {
        panic!()
    };
    for s in 0..2 {
        let img = &batch.values()[s * 784..(s + 1) * 784];
        let mut a: Vec<f64> = Vec::new();
        for f in 0..5 {
            let c = naive_conv(img, 28, 28, &cw.values()[f * 25..(f + 1) * 25], 5, 2, 1);
            a.extend(c.iter().map(|v| (v + cb.values()[f]).powi(2)));
        }
        let h: Vec<f64> = (0..100)
            .map(|o| {
                ((0..845).map(|i| w1.get(&[o, i]) * a[i]).sum::<f64>() + b1.values()[o]).powi(2)
            })
            .collect();
        for o in 0..10 {
            let y = (0..100).map(|i| w2.get(&[o, i]) * h[i]).sum::<f64>() + b2.values()[o];
            assert!((got.get(&[s, o]) - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }
}

#[test]
fn cryptonets_cost_counts() {
    let net = cryptonets();
    let batch = net.random_batch(1, 1).unwrap();
    let ses = Session::with_slots(8192, 8).unwrap();
    let run = cryptonets_infer(
        &net,
        &batch,
        [32, 256, 1],
        &ses,
        InferenceOptions::default(),
    )
    .unwrap();
    assert!(relative_error(&run.logits, &forward_plain(&net, &batch).unwrap()) <= 1e-9);
    assert_eq!(
        (
            run.cost.multiplications,
            run.cost.rotations,
            run.cost.additions
        ),
        (32, 89, 113),
        "{:?}",
        run.layer_shapes
    );
}

#[test]
fn tile_choice_does_not_change_logits() {
    let net = NetworkSpec::parse("input h=8 w=8\nconv filters=3 kh=3 kw=3 stride=2 pad=1\nact square\nfc in=48 out=6\nact square\nfc in=6 out=2\n", None)
        .unwrap()
        .with_random_weights(5);
    let batch = net.random_batch(4, 9).unwrap();
    let want = forward_plain(&net, &batch).unwrap();
    for tile in [[8, 16, 4], [4, 32, 4], [16, 8, 4], [2, 16, 16]] {
        let ses = Session::with_slots(512, 8).unwrap();
        let got = cryptonets_infer(&net, &batch, tile, &ses, InferenceOptions::default()).unwrap();
        assert!(relative_error(&got.logits, &want) <= 1e-9, "{tile:?}");
    }
}

#[test]
fn im2col_exhaustive_small_cases() {
    for h in 1..=6 {
        for w in 1..=6 {
            let img = DenseTensor::from_fn(&[h, w], |i| (i[0] * 7 + i[1] * 3) as f64 % 5.0 - 2.0)
                .unwrap();
            for k in 1..=3 {
                for stride in 1..=2 {
                    for pad in 0..=1 {
                        if k > h + 2 * pad || k > w + 2 * pad {
                            assert!(im2col(&img, k, k, stride, pad).is_err());
                            continue;
                        }
                        let filt =
                            DenseTensor::from_fn(&[k * k, 1], |i| i[0] as f64 - 1.5).unwrap();
                        let got =
                            dense_matmul(&im2col(&img, k, k, stride, pad).unwrap(), &filt).unwrap();
                        let want = naive_conv(img.values(), h, w, filt.values(), k, stride, pad);
                        assert_eq!(
                            got.values(),
                            want.as_slice(),
                            "{h}x{w} k={k} s={stride} p={pad}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn multiplications_per_sample_fall_with_t3() {
    let net = NetworkSpec::parse("input h=6 w=6\nconv filters=2 kh=3 kw=3 stride=1 pad=1\nact square\nfc in=72 out=5\nact square\nfc in=5 out=3\n", None)
        .unwrap()
        .with_random_weights(2);
    let s = 1024;
    let mut last = f64::INFINITY;
    for t3 in [1, 2, 4, 8, 16, 32, 64, 1024] {
        let tile = if t3 == s {
            [1, 1, s]
        } else {
            [8, s / (8 * t3), t3]
        };
        let batch = net.random_batch(t3, 4).unwrap();
        let ses = Session::with_slots(s, 8).unwrap();
        let run = cryptonets_infer(&net, &batch, tile, &ses, InferenceOptions::default()).unwrap();
        let per_sample = run.cost.multiplications as f64 / t3 as f64;
        assert!(per_sample <= last, "t3={t3}: {per_sample} > {last}");
        last = per_sample;
        assert!(relative_error(&run.logits, &forward_plain(&net, &batch).unwrap()) <= 1e-9);
    }
}

#[test]
fn cnn_static_plan_fixture_validates() {
    use tiletensor::nn::{parse_plan, validate_plan};
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/cnn_static_plan.txt"
    ))
    .unwrap();
    let steps = parse_plan(&text).unwrap();
    let cfg = tiletensor::BackendConfig::new(8192, 3).unwrap();
    let report = validate_plan(&steps, &cfg);
    assert!(report.ok(), "{report}");
    assert_eq!(report.bootstraps, 1);
    // without the bootstrap the final square runs out of depth
    let trimmed: Vec<_> = steps
        .iter()
        .filter(|s| s.op != tiletensor::nn::PlanOp::Bootstrap)
        .cloned()
        .map(|s| s.chains(None, None))
        .collect();
    assert!(validate_plan(&trimmed, &cfg).has_depth_violation());
}

mod props {
    use proptest::prelude::*;
    use tiletensor::nn::{bootstrap_lower_bound, FilterGroup};

    fn group() -> impl Strategy<Value = FilterGroup> {
        (1u64..64, 1u64..8, 1u64..64, 1u64..32).prop_map(|(count, filter_h, filter_w, out_rows)| {
            FilterGroup {
                count,
                filter_h,
                filter_w,
                out_rows,
            }
        })
    }

    proptest! {
        #[test]
        fn bound_non_increasing_in_depth(groups in prop::collection::vec(group(), 1..4), d in 1u32..12) {
            let a = bootstrap_lower_bound(&groups, d).unwrap();
            let b = bootstrap_lower_bound(&groups, d + 1).unwrap();
            prop_assert!(b <= a);
            let total = bootstrap_lower_bound(&groups, 1).unwrap();
            if total.is_multiple_of(u64::from(d)) {
                prop_assert_eq!(a * u64::from(d), total);
            }
        }
    }
}
