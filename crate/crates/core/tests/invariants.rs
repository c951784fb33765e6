use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use biguide::evalmetrics::average_precision;
use biguide::nncore::{biased_attention, Mat};
use biguide::pipeline::bench::BenchCase;
use biguide::pipeline::BenchSize;
use biguide::synthworld::BBox;
use biguide::visiontower::{qformer_bias, vit_bias, TokenLayout};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (x, y) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(x.to_bits(), y.to_bits());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_is_bounded_and_monotone_in_hits(hits in prop::collection::vec(any::<bool>(), 1..20), extra in 0usize..5) {
        let n_gt = hits.iter().filter(|&&h| h).count() + extra;
        let ap = average_precision(&hits, n_gt);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        // turning the first miss into a hit cannot lower AP
        if let Some(i) = hits.iter().position(|&h| !h) {
            let mut better = hits.clone();
            better[i] = true;
            prop_assert!(average_precision(&better, n_gt + 1) + 1e-12 >= ap * n_gt as f64 / (n_gt + 1) as f64);
        }
    }

    #[test]
    fn bias_matrices_keep_duplicates_apart(n_q in 0usize..6, n_f in 0usize..4, side in 1usize..4, seed in any::<u64>()) {
        let n_p = side * side;
        let l = TokenLayout::new(n_q, n_f, n_p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_ho = Mat::randn(n_q, n_p, 1.0, &mut rng);
        let a_f = Mat::randn(n_f, n_p, 1.0, &mut rng);
        let vit = vit_bias(&l, Some(&a_ho), Some(&a_f)).unwrap();
        let base: Vec<usize> = l.cls().chain(l.patches()).collect();
        for &r in &base {
            for c in l.c_ho().chain(l.c_f()) {
                prop_assert_eq!(vit[(r, c)], f64::NEG_INFINITY);
            }
        }
        for r in l.c_ho().chain(l.c_f()) {
            let open = (0..l.total()).filter(|&c| vit[(r, c)] != f64::NEG_INFINITY).count();
            prop_assert_eq!(open, 1 + n_p);
        }
        let qf = qformer_bias(&l, n_q, n_f, Some(&a_ho), Some(&a_f)).unwrap();
        for r in 0..n_q + n_f {
            let open = (0..l.total()).filter(|&c| qf[(r, c)] != f64::NEG_INFINITY).count();
            prop_assert_eq!(open, 2 + n_p);
        }
    }

    #[test]
    fn attention_rows_are_distributions(rows in 1usize..5, keys in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Mat::randn(rows, 8, 1.0, &mut rng);
        let k = Mat::randn(keys, 8, 1.0, &mut rng);
        let v = Mat::randn(keys, 8, 1.0, &mut rng);
        let mut b = Mat::randn(rows, keys, 1.0, &mut rng);
        // mask all but the first key in row 0
        for c in 1..keys {
            b[(0, c)] = f64::NEG_INFINITY;
        }
        let w = biased_attention(&q, &k, &v, &b).unwrap().weights;
        for r in 0..rows {
            assert_relative_eq!(w.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        prop_assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_duplicate_sets_reduce_to_the_vanilla_tower() {
    let case = BenchCase::new(BenchSize { n_q: 0, n_f: 0, n_p: 16 }, 5).unwrap();
    let fast = case.fast().unwrap();
    let reference = case.reference().unwrap();
    assert!(fast.e_q_ho.is_none() && fast.e_q_f.is_none());
    assert_relative_eq!(fast.vit_tokens.max_abs_diff(&reference.vit_tokens), 0.0, epsilon = 1e-12);
}
