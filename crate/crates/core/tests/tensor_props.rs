#![allow(clippy::needless_range_loop)]

mod common;

use polar_core::tensor::{
    l2_norm_per_head, layer_norm, matmul, naive_softmax_attention_single_head, topk_indices, HeadTensor, KvCache,
    Matrix, NeuronMatrix,
};
use polar_core::PolarError;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn matmul_matches_f64_oracle((a, b) in (1usize..12, 1usize..24, 1usize..12)
        .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n))))
    {
        let got = matmul(&a, &b).unwrap();
        let want = common::matmul_f64(&a, &b);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                prop_assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn neuron_matrix_round_trips(m in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c))) {
        let nm = NeuronMatrix::from_dense(&m);
        prop_assert_eq!(nm.to_dense(), m.clone());
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                prop_assert_eq!(nm.neuron(j)[i], m.get(i, j));
            }
        }
    }

    #[test]
    fn transpose_is_involution(m in (1usize..10, 1usize..10).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn topk_matches_sort_oracle(scores in prop::collection::vec(-5i32..5, 1..40), frac in 0.0f64..1.0) {
        // Small integer range forces many ties.
        let s: Vec<f32> = scores.iter().map(|&v| v as f32).collect();
        let k = ((frac * s.len() as f64) as usize).max(1);
        prop_assert_eq!(topk_indices(&s, k).unwrap(), common::topk_by_sort(&s, k));
    }

    #[test]
    fn naive_attention_matches_f64_definition(n in 1usize..40, d in 1usize..16, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let cache = common::random_cache(&mut r, 1, &[n], n, d);
        let q: Vec<f32> = common::random_heads(&mut r, 1, 1, d).head(0, 0).to_vec();
        let scale = 1.0 / (d as f32).sqrt();
        let got = naive_softmax_attention_single_head(&q, cache.keys(0, 0), cache.values(0, 0), d, scale).unwrap();
        let want = common::attention_f64(&q, cache.keys(0, 0), cache.values(0, 0), d, scale as f64);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_standardizes(x in (1usize..6, 2usize..32).prop_flat_map(|(r, c)| matrix(r, c))) {
        let d = x.cols();
        let y = layer_norm(&x, &vec![1.0; d], &vec![0.0; d], 1e-5);
        for (row, src) in y.row_iter().zip(x.row_iter()) {
            let mean: f64 = src.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
            let var: f64 = src.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            for (yv, xv) in row.iter().zip(src) {
                let want = (*xv as f64 - mean) / (var + 1e-5).sqrt();
                prop_assert!((*yv as f64 - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn head_norms_match_definition(b in 1usize..4, h in 1usize..6, d in 1usize..8, seed in any::<u64>()) {
        let t = common::random_heads(&mut common::rng(seed), b, h, d);
        let n = l2_norm_per_head(&t);
        for bi in 0..b {
            for hi in 0..h {
                let want = t.head(bi, hi).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((n.get(bi, hi) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kv_cache_lengths_track_appends(lens in prop::collection::vec(0usize..6, 1..5)) {
        let mut c = KvCache::new(lens.len(), 2, 5, 3);
        for (b, &n) in lens.iter().enumerate() {
            for t in 0..n.min(5) {
                let k = vec![t as f32; 6];
                c.append(b, &k, &k).unwrap();
            }
        }
        for (b, &n) in lens.iter().enumerate() {
            prop_assert_eq!(c.len(b), n.min(5));
            prop_assert_eq!(c.keys(b, 1).len(), n.min(5) * 3);
        }
        let full = lens.iter().position(|&n| n >= 5);
        if let Some(b) = full {
            let is_capacity = matches!(c.append(b, &[0.0; 6], &[0.0; 6]), Err(PolarError::Capacity(_)));
            prop_assert!(is_capacity);
        }
    }
}

#[test]
fn head_tensor_matrix_views_agree() {
    let m = Matrix::from_fn(2, 6, |i, j| (i * 6 + j) as f32);
    let t = HeadTensor::from_matrix(m.clone(), 3).unwrap();
    assert_eq!(t.head(1, 2), &[10.0, 11.0]);
    assert_eq!(t.into_matrix(), m);
}

#[test]
fn attention_on_empty_cache_is_error() {
    let r = naive_softmax_attention_single_head(&[1.0, 0.0], &[], &[], 2, 1.0);
    assert!(matches!(r, Err(PolarError::EmptyCache(_))));
}
