mod common;

use common::*;
use gsedit::attention::{attention, attn_align, batch_align_layer, AlignmentConfig};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..16, 1usize..16, 1usize..9, 1usize..4, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_matches_dense_reference((li, lj, d, heads, c, seed) in dims()) {
        let mut r = rng(seed);
        let w = NaiveWeights::random(&mut r, d, heads * c, heads);
        let zi = quantize(&random_mat(&mut r, li, d));
        let zj = quantize(&random_mat(&mut r, lj, d));
        let got = from_candle(&attention(&to_candle(&zi), &to_candle(&zj), &w.to_weights()).unwrap());
        prop_assert!(max_abs_diff(&got, &naive_attention(&zi, &zj, &w)) < 1e-5);
    }

    #[test]
    fn alignment_matches_dense_reference((li, lr, d, heads, c, seed) in dims(), n in 1usize..5, lambda in 0.0f64..1.0) {
        let mut r = rng(seed);
        let w = NaiveWeights::random(&mut r, d, heads * c, heads);
        let ze = quantize(&random_mat(&mut r, li, d));
        let refs: Vec<Mat> = (0..n).map(|_| quantize(&random_mat(&mut r, lr, d))).collect();
        let crefs: Vec<_> = refs.iter().map(to_candle).collect();
        let cfg = AlignmentConfig::new(lambda, (0..n).collect()).unwrap();
        let got = attn_align(&to_candle(&ze), &crefs.iter().collect::<Vec<_>>(), &w.to_weights(), &cfg).unwrap();
        let want = naive_align(&ze, &refs.iter().collect::<Vec<_>>(), &w, lambda);
        prop_assert!(max_abs_diff(&from_candle(&got), &want) < 1e-5);
    }

    #[test]
    fn attention_rows_are_convex_weights((li, lj, d, heads, c, seed) in dims()) {
        let mut r = rng(seed);
        let d = d + 1;
        let mut w = NaiveWeights::random(&mut r, d, heads * c, heads);
        let u = quantize(&random_mat(&mut r, 1, heads * c)).remove(0);
        for (k, row) in w.wv.iter_mut().enumerate() {
            *row = if k == d - 1 { u.clone() } else { vec![0.0; heads * c] };
        }
        let zi = quantize(&random_mat(&mut r, li, d));
        let mut zj = quantize(&random_mat(&mut r, lj, d));
        zj.iter_mut().for_each(|row| row[d - 1] = 1.0);
        let got = from_candle(&attention(&to_candle(&zi), &to_candle(&zj), &w.to_weights()).unwrap());
        for row in &got {
            for (a, b) in row.iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lambda_one_is_exactly_self_attention((li, lr, d, heads, c, seed) in dims()) {
        let mut r = rng(seed);
        let w = NaiveWeights::random(&mut r, d, heads * c, heads).to_weights();
        let ze = to_candle(&random_mat(&mut r, li, d));
        let rf = to_candle(&random_mat(&mut r, lr, d));
        let cfg = AlignmentConfig::new(1.0, vec![0]).unwrap();
        let a = attn_align(&ze, &[&rf], &w, &cfg).unwrap().to_vec2::<f32>().unwrap();
        let b = attention(&ze, &ze, &w).unwrap().to_vec2::<f32>().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reference_order_never_changes_outputs(seed in any::<u64>(), views in 3usize..7, lambda in 0.0f64..1.0) {
        let mut r = rng(seed);
        let w = NaiveWeights::random(&mut r, 6, 8, 2).to_weights();
        let tokens: Vec<_> = (0..views).map(|_| to_candle(&random_mat(&mut r, 5, 6))).collect();
        let ids: Vec<usize> = (0..views).map(|v| 10 + 3 * v).collect();
        let refs = vec![ids[views - 1], ids[0], ids[1]];
        let run = |refs: Vec<usize>, order: &[usize]| {
            let cfg = AlignmentConfig::new(lambda, refs).unwrap();
            let ids: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
            let toks: Vec<_> = order.iter().map(|&i| tokens[i].clone()).collect();
            let out = batch_align_layer(&ids, &toks, &cfg, &w).unwrap();
            let mut by_id: Vec<(usize, Vec<Vec<f32>>)> =
                ids.into_iter().zip(out.iter().map(|t| t.to_vec2::<f32>().unwrap())).collect();
            by_id.sort_by_key(|p| p.0);
            by_id
        };
        let natural: Vec<usize> = (0..views).collect();
        let reversed: Vec<usize> = (0..views).rev().collect();
        let base = run(refs.clone(), &natural);
        let mut shuffled = refs.clone();
        shuffled.reverse();
        prop_assert_eq!(&base, &run(shuffled, &natural));
        prop_assert_eq!(&base, &run(refs, &reversed));
    }

    #[test]
    fn duplicate_views_coincide(seed in any::<u64>(), views in 2usize..6, refs in 1usize..6, lambda in 0.0f64..1.0) {
        let mut r = rng(seed);
        let w = NaiveWeights::random(&mut r, 6, 8, 2).to_weights();
        let tok = to_candle(&random_mat(&mut r, 7, 6));
        let ids: Vec<usize> = (0..views).collect();
        let toks = vec![tok; views];
        let all = AlignmentConfig::new(0.0, ids.clone()).unwrap();
        let some = AlignmentConfig::new(lambda, (0..refs.min(views)).collect()).unwrap();
        for cfg in [all, some] {
            let out: Vec<Mat> = batch_align_layer(&ids, &toks, &cfg, &w).unwrap().iter().map(from_candle).collect();
            for o in &out[1..] {
                prop_assert!(max_abs_diff(o, &out[0]) < 1e-6);
            }
        }
    }
}
