use hiresnet::kernels::{
    avgpool2d_backward, avgpool2d_forward, conv2d_forward, softmax, BatchNormState, BnMode,
    ConvParams,
};
use hiresnet::{Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-range..range, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn pool_case() -> impl Strategy<Value = (Tensor<f64>, usize, usize)> {
    (
        1usize..3,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..8,
        1usize..8,
    )
        .prop_flat_map(|(n, c, k, s, ey, ex)| {
            let shape = vec![n, c, k + ey, k + ex];
            (tensor_strategy(shape, 5.0), Just(k), Just(s))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn avgpool_backward_conserves_mass((x, k, s) in pool_case(), seed in 0u64..1000) {
        let (y, geom) = avgpool2d_forward(&x, k, s).unwrap();
        let dy = Tensor::from_fn(y.shape(), |i| ((i as u64 * 2654435761 + seed) % 17) as f64 - 8.0);
        let dx = avgpool2d_backward(&geom, &dy);
        let (a, b): (f64, f64) = (dx.data().iter().sum(), dy.data().iter().sum());
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, k in 1usize..20, data in prop::collection::vec(-60.0f32..60.0, 120)) {
        let logits = Tensor::new(vec![rows, k], data[..rows * k].to_vec()).unwrap();
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(k) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn grouped_conv_splits_into_groups(
        groups in 1usize..4,
        cin_g in 1usize..3,
        cout_g in 1usize..3,
        stride in 1usize..3,
        seed in 0u64..10_000,
    ) {
        let (cin, cout) = (groups * cin_g, groups * cout_g);
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let x = Tensor::<f32>::from_fn(&[2, cin, 6, 5], |_| next());
        let w = Tensor::<f32>::from_fn(&[cout, cin_g, 3, 3], |_| next());
        let (whole, _) = conv2d_forward(&x, &w, None, ConvParams::new(stride, 1, groups)).unwrap();
        let [_, _, ho, wo] = [whole.shape()[0], whole.shape()[1], whole.shape()[2], whole.shape()[3]];
        for g in 0..groups {
            let xg = Tensor::from_fn(&[2, cin_g, 6, 5], |i| {
                let (n, rest) = (i / (cin_g * 30), i % (cin_g * 30));
                x.data()[n * cin * 30 + g * cin_g * 30 + rest]
            });
            let wg = w.slice_outer(g * cout_g, (g + 1) * cout_g).unwrap();
            let (part, _) = conv2d_forward(&xg, &wg, None, ConvParams::new(stride, 1, 1)).unwrap();
            for n in 0..2 {
                let hw = ho * wo;
                let got = &whole.data()[(n * cout + g * cout_g) * hw..(n * cout + (g + 1) * cout_g) * hw];
                prop_assert_eq!(got, &part.data()[n * cout_g * hw..(n + 1) * cout_g * hw]);
            }
        }
    }

    #[test]
    fn add_gradient_fans_in(x in tensor_strategy(vec![2, 3], 3.0)) {
        let mut t = Tape::<f64>::new();
        let a = t.param(x.clone());
        let s = t.add(a, a).unwrap();
        let r = t.relu(s).unwrap();
        let loss = t.sum(r).unwrap();
        let g = t.backward(loss).unwrap();
        for (&gi, &xi) in g.get(a).unwrap().data().iter().zip(x.data()) {
            prop_assert_eq!(gi, if xi > 0.0 { 2.0 } else { 0.0 });
        }
    }
}

/// One conv → bn → relu → pool → linear → loss step, returning the loss,
/// every parameter gradient and the updated running statistics.
fn step(x: &Tensor, w: &Tensor, fc: &Tensor) -> (f32, Vec<Tensor>, BatchNormState) {
    let mut state = BatchNormState::new(4);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.param(w.clone());
    let gamma = t.param(Tensor::full(&[4], 1.0));
    let beta = t.param(Tensor::zeros(&[4]));
    let fcw = t.param(fc.clone());
    let fcb = t.param(Tensor::zeros(&[3]));
    let y = t.conv2d(xv, wv, None, ConvParams::new(1, 1, 1)).unwrap();
    let y = t
        .batchnorm2d(y, gamma, beta, BnMode::Train(&mut state))
        .unwrap();
    let y = t.relu(y).unwrap();
    let y = t.global_avg_pool(y).unwrap();
    let logits = t.linear(y, fcw, fcb).unwrap();
    let loss = t.softmax_cross_entropy(logits, &[0, 2, 1, 1, 0]).unwrap();
    let grads = t.backward(loss).unwrap();
    let gs = [wv, gamma, beta, fcw, fcb]
        .iter()
        .map(|&v| grads.get(v).unwrap().clone())
        .collect();
    (t.value(loss).unwrap().data()[0], gs, state)
}

#[test]
fn identical_inputs_give_bitwise_identical_gradients() {
    let x = Tensor::from_fn(&[5, 2, 6, 6], |i| ((i * 37) % 23) as f32 / 23.0 - 0.5);
    let w = Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 11) % 13) as f32 / 13.0 - 0.5);
    let fc = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.1 - 0.3);
    let (l1, g1, s1) = step(&x, &w, &fc);
    let (l2, g2, s2) = step(&x, &w, &fc);
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(s1, s2);
}
