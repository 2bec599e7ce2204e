mod common;

use diffserve_core::tensor::{self, Rng, Tensor};
use proptest::prelude::*;

const CASES: u64 = 120;
const TOL: f32 = 1e-5;

fn dims(rng: &mut Rng, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    for _ in 0..CASES {
        let (m, k, n) = (dims(&mut rng, 1, 9), dims(&mut rng, 1, 17), dims(&mut rng, 1, 9));
        let a = rng.uniform_tensor(&[m, k], -1.0, 1.0);
        let b = rng.uniform_tensor(&[k, n], -1.0, 1.0);
        let got = tensor::matmul(&a, &b).unwrap();
        let want = common::matmul(a.data(), b.data(), m, k, n);
        assert!(common::max_abs(got.data(), &want) <= TOL, "{m}x{k}x{n}");
    }
}

#[test]
fn matmul_fixed_examples() {
    let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(tensor::matmul(&a, &b).unwrap().bit_eq(&b));
    let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(tensor::matmul(&a, &b).unwrap().data(), &[11.0]);

    let mut rng = Rng::new(5);
    let a = rng.uniform_tensor(&[5, 7], -1.0, 1.0);
    let b = rng.uniform_tensor(&[7, 3], -1.0, 1.0);
    let got = tensor::matmul(&a, &b).unwrap();
    assert!(common::max_abs(got.data(), &common::matmul(a.data(), b.data(), 5, 7, 3)) <= TOL);
    let err = tensor::matmul(&a, &a).unwrap_err().to_string();
    assert!(err.contains("[5, 7]"), "{err}");
}

#[test]
fn linear_matches_matmul_with_transposed_weight() {
    let mut rng = Rng::new(12);
    for _ in 0..CASES {
        let (n, i, o) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 20), dims(&mut rng, 1, 8));
        let x = rng.uniform_tensor(&[n, i], -1.0, 1.0);
        let w = rng.uniform_tensor(&[o, i], -1.0, 1.0);
        let bias = rng.uniform_tensor(&[o], -1.0, 1.0);
        let got = tensor::linear(&x, &w, Some(&bias)).unwrap();
        let wt = tensor::transpose2d(&w).unwrap();
        let mut want = common::matmul(x.data(), wt.data(), n, i, o);
        for (j, v) in want.iter_mut().enumerate() {
            *v += bias.data()[j % o];
        }
        assert!(common::max_abs(got.data(), &want) <= TOL);
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = Rng::new(13);
    for case in 0..CASES {
        let ci = dims(&mut rng, 1, 4);
        let co = dims(&mut rng, 1, 5);
        let k = [1, 3, 5][rng.below(3) as usize];
        let stride = dims(&mut rng, 1, 2);
        let pad = if case % 2 == 0 { (k - 1) / 2 } else { rng.below(2) as usize };
        let h = dims(&mut rng, k as u64, 9);
        let w = dims(&mut rng, k as u64, 9);
        let x = rng.uniform_tensor(&[ci, h, w], -1.0, 1.0);
        let wt = rng.uniform_tensor(&[co, ci, k, k], -0.5, 0.5);
        let bias = rng.uniform_tensor(&[co], -1.0, 1.0);
        let got = tensor::conv2d(&x, &wt, Some(&bias), stride, pad).unwrap();
        let want = common::conv2d(&x, &wt, Some(bias.data()), stride, pad);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        assert_eq!(got.shape(), &[co, oh, ow]);
        assert!(common::max_abs(got.data(), &want) <= TOL, "case {case}");
    }
}

#[test]
fn conv2d_fixed_examples() {
    let mut rng = Rng::new(14);
    let x = rng.uniform_tensor(&[2, 8, 8], -1.0, 1.0);
    let w = rng.uniform_tensor(&[4, 2, 3, 3], -1.0, 1.0);
    let got = tensor::conv2d(&x, &w, None, 1, 1).unwrap();
    assert!(common::max_abs(got.data(), &common::conv2d(&x, &w, None, 1, 1)) <= TOL);

    let one = Tensor::full(&[1, 1, 1, 1], 1.0);
    let x1 = rng.uniform_tensor(&[1, 5, 5], -1.0, 1.0);
    assert!(tensor::conv2d(&x1, &one, None, 1, 0).unwrap().bit_eq(&x1));

    let zero = Tensor::zeros(&[2, 1, 3, 3]);
    let b = Tensor::new(&[2], vec![0.25, -3.0]).unwrap();
    let out = tensor::conv2d(&x1, &zero, Some(&b), 1, 1).unwrap();
    assert!(out.channel(0).iter().all(|&v| v == 0.25));
    assert!(out.channel(1).iter().all(|&v| v == -3.0));

    assert!(tensor::conv2d(&x, &one, None, 1, 0).is_err());
}

#[test]
fn attention_matches_per_row_softmax() {
    let mut rng = Rng::new(15);
    for _ in 0..CASES {
        let (n, m, d) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 8), dims(&mut rng, 1, 16));
        let q = rng.uniform_tensor(&[n, d], -2.0, 2.0);
        let k = rng.uniform_tensor(&[m, d], -2.0, 2.0);
        let v = rng.uniform_tensor(&[m, d], -2.0, 2.0);
        let got = tensor::attention(&q, &k, &v).unwrap();
        let want = common::attention(q.data(), k.data(), v.data(), n, m, d);
        assert!(common::max_abs(got.data(), &want) <= TOL);
    }
}

#[test]
fn attention_fixed_examples() {
    let mut rng = Rng::new(16);
    let q = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let k = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
    let v = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
    let got = tensor::attention(&q, &k, &v).unwrap();
    assert!(common::max_abs(got.data(), &common::attention(q.data(), k.data(), v.data(), 3, 5, 4)) <= TOL);

    // One key: every row is v.
    let k1 = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
    let v1 = rng.uniform_tensor(&[1, 4], -1.0, 1.0);
    let out = tensor::attention(&q, &k1, &v1).unwrap();
    for i in 0..3 {
        assert_eq!(out.row(i), v1.row(0));
    }

    // Zero queries: column mean of v.
    let out = tensor::attention(&Tensor::zeros(&[2, 4]), &k, &v).unwrap();
    for p in 0..4 {
        let mean = (0..5).map(|j| v.row(j)[p]).sum::<f32>() / 5.0;
        assert!((out.row(0)[p] - mean).abs() <= 1e-6);
    }
}

#[test]
fn group_norm_matches_oracle() {
    let mut rng = Rng::new(17);
    for _ in 0..CASES {
        let groups = dims(&mut rng, 1, 4);
        let c = groups * dims(&mut rng, 1, 3);
        let (h, w) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 6));
        let x = rng.uniform_tensor(&[c, h, w], -3.0, 3.0);
        let g = rng.uniform_tensor(&[c], 0.5, 1.5);
        let b = rng.uniform_tensor(&[c], -0.5, 0.5);
        let got = tensor::group_norm(&x, groups, &g, &b, 1e-5).unwrap();
        let want = common::group_norm(x.data(), c, groups, g.data(), b.data(), 1e-5);
        assert!(common::max_abs(got.data(), &want) <= TOL);
    }
}

#[test]
fn layer_norm_matches_oracle() {
    let mut rng = Rng::new(18);
    for _ in 0..CASES {
        let (n, d) = (dims(&mut rng, 1, 8), dims(&mut rng, 2, 24));
        let x = rng.uniform_tensor(&[n, d], -3.0, 3.0);
        let g = rng.uniform_tensor(&[d], 0.5, 1.5);
        let b = rng.uniform_tensor(&[d], -0.5, 0.5);
        let got = tensor::layer_norm(&x, &g, &b, 1e-5).unwrap();
        let want = common::layer_norm(x.data(), d, g.data(), b.data(), 1e-5);
        assert!(common::max_abs(got.data(), &want) <= TOL);
    }
}

#[test]
fn norm_and_activation_examples() {
    let x = Tensor::full(&[4, 3, 3], 2.5);
    let g = Tensor::full(&[4], 1.7);
    let b = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let out = tensor::group_norm(&x, 2, &g, &b, 1e-5).unwrap();
    for c in 0..4 {
        assert!(out.channel(c).iter().all(|&v| v == b.data()[c]));
    }
    assert!(tensor::group_norm(&x, 3, &g, &b, 1e-5).is_err());
    assert_eq!(tensor::silu_scalar(0.0), 0.0);
    assert_eq!(tensor::gelu_scalar(0.0), 0.0);
    let r = tensor::resize_nearest(&Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 2).unwrap();
    assert_eq!(
        r.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn activations_match_closed_forms() {
    let mut rng = Rng::new(19);
    for _ in 0..CASES {
        let v = (rng.uniform() * 12.0 - 6.0) as f32;
        let silu = v as f64 / (1.0 + (-v as f64).exp());
        assert!((tensor::silu_scalar(v) as f64 - silu).abs() <= 1e-5);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let x = v as f64;
        let gelu = 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh());
        assert!((tensor::gelu_scalar(v) as f64 - gelu).abs() <= 1e-5);
    }
}

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f32..4.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn attention_rows_stay_in_hull_of_values(
        (q, k, v) in (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(n, m, d)| {
            (tensor_strategy(n, d), tensor_strategy(m, d), tensor_strategy(m, d))
        })
    ) {
        let out = tensor::attention(&q, &k, &v).unwrap();
        let (n, d) = out.dims2().unwrap();
        let m = v.shape()[0];
        for i in 0..n {
            for p in 0..d {
                let col = (0..m).map(|j| v.row(j)[p]);
                let lo = col.clone().fold(f32::INFINITY, f32::min);
                let hi = col.fold(f32::NEG_INFINITY, f32::max);
                let o = out.row(i)[p];
                prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rng.uniform_tensor(&[2, 6, 6], -1.0, 1.0);
        let w = rng.uniform_tensor(&[3, 2, 3, 3], -1.0, 1.0);
        let a = tensor::conv2d(&x, &w, None, 1, 1).unwrap();
        let b = tensor::conv2d(&x, &w, None, 1, 1).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn layer_norm_output_is_standardized(row in prop::collection::vec(-10.0f32..10.0, 4..32)) {
        let d = row.len();
        let spread = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            - row.iter().cloned().fold(f32::INFINITY, f32::min);
        prop_assume!(spread > 0.1);
        let x = Tensor::new(&[1, d], row).unwrap();
        let y = tensor::layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), 1e-5).unwrap();
        prop_assert!(y.mean().abs() < 1e-4);
    }
}

#[test]
fn tiled_conv_is_bit_identical() {
    let mut rng = Rng::new(20);
    for case in 0..CASES {
        let (ci, co) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 4));
        let k = [1, 3, 5][rng.below(3) as usize];
        let stride = dims(&mut rng, 1, 2);
        let pad = (k - 1) / 2;
        let (h, w) = (dims(&mut rng, k as u64, 10), dims(&mut rng, k as u64, 10));
        let x = rng.uniform_tensor(&[ci, h, w], -1.0, 1.0);
        let wt = rng.uniform_tensor(&[co, ci, k, k], -0.5, 0.5);
        let bias = rng.uniform_tensor(&[co], -1.0, 1.0);
        let full = tensor::conv2d(&x, &wt, Some(&bias), stride, pad).unwrap();
        let cap = dims(&mut rng, 1, 600);
        let mut scratch = tensor::Scratch::new();
        let tiled = tensor::conv2d_tiled(&x, &wt, Some(&bias), stride, pad, &mut scratch, cap).unwrap();
        assert!(tiled.bit_eq(&full), "case {case}");
    }
}
