use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nearby3d::attention::{
    attend_dense_masked, attend_gathered, attend_sparse, axial_mask, block_mask, full_mask, nearby_mask,
    neighborhood, project_coord, Extent, ProjWeights, Window,
};
use nearby3d::codec::{quantize, Codebook, FeatureGrid, TokenGrid};
use nearby3d::io::{read_tensor, read_tokens, write_tensor, write_tokens};
use nearby3d::tensor::{layer_norm, softmax_last};
use nearby3d::{Dims3, Matrix, Tensor4};

fn dims(max: usize) -> impl Strategy<Value = Dims3> {
    (1..=max, 1..=max, 1..=max).prop_map(|(h, w, s)| Dims3::new(h, w, s))
}

fn window() -> impl Strategy<Value = Window> {
    prop_oneof![
        Just(Window::Size(1)),
        Just(Window::Size(3)),
        Just(Window::Size(5)),
        Just(Window::All)
    ]
}

fn extent() -> impl Strategy<Value = Extent> {
    (window(), window(), window()).prop_map(|(h, w, s)| Extent::new(h, w, s))
}

fn random(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_index_is_a_bijection(d in dims(6)) {
        let mut seen = vec![false; d.len()];
        for k in 0..d.s {
            for i in 0..d.h {
                for j in 0..d.w {
                    let t = d.flat(i, j, k);
                    prop_assert!(t < d.len() && !seen[t]);
                    seen[t] = true;
                    prop_assert_eq!(d.unflat(t), (i, j, k));
                }
            }
        }
    }

    #[test]
    fn projection_stays_in_bounds(t in dims(6), c in dims(6)) {
        for p in 0..t.len() {
            let (a, b, s) = project_coord(t, c, t.unflat(p)).unwrap();
            prop_assert!(c.contains(a, b, s));
        }
    }

    #[test]
    fn neighbourhood_is_clipped_window(c in dims(6), e in extent(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = (rng.gen_range(0..c.h), rng.gen_range(0..c.w), rng.gen_range(0..c.s));
        let keys = neighborhood(c, center, e);
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(keys.len() <= e.volume(c));
        prop_assert!(keys.contains(&c.flat(center.0, center.1, center.2)));
    }

    #[test]
    fn masks_are_monotone(d in dims(4), e in extent()) {
        let full = full_mask(d, d, false).unwrap();
        let nc = nearby_mask(d, d, e, false).unwrap();
        let causal = nearby_mask(d, d, e, true).unwrap();
        prop_assert!(nc.is_subset_of(&full));
        prop_assert!(causal.is_subset_of(&nc));
        prop_assert!(full_mask(d, d, true).unwrap().is_subset_of(&full));
        prop_assert!(axial_mask(d, true).unwrap().is_subset_of(&axial_mask(d, false).unwrap()));
        prop_assert!(nc.count() <= e.volume(d) * d.len());
    }

    #[test]
    fn causal_masks_never_look_ahead(d in dims(4), e in extent()) {
        for m in [nearby_mask(d, d, e, true).unwrap(), axial_mask(d, true).unwrap(), full_mask(d, d, true).unwrap()] {
            for t in 0..d.len() {
                prop_assert!(m.get(t, t));
                prop_assert!(m.row(t)[t + 1..].iter().all(|b| !b));
            }
        }
    }

    #[test]
    fn axial_count_formula(d in dims(5)) {
        prop_assert_eq!(axial_mask(d, false).unwrap().count(), d.len() * (d.h + d.w + d.s - 2));
    }

    #[test]
    fn block_count_formula(bh in 1..=3usize, bw in 1..=3usize, bs in 1..=2usize, nh in 1..=2usize, nw in 1..=2usize, ns in 1..=2usize) {
        let block = Dims3::new(bh, bw, bs);
        let d = Dims3::new(bh * nh, bw * nw, bs * ns);
        let per = block.len();
        prop_assert_eq!(block_mask(d, block, false).unwrap().count(), d.len() / per * per * per);
    }

    #[test]
    fn sparse_equals_dense(t in dims(3), c in dims(3), e in extent(), cross in any::<bool>(), causal in any::<bool>(), seed in any::<u64>()) {
        let c = if cross { c } else { t };
        let causal = causal && c == t;
        let w = ProjWeights::new(random(seed, 4, 4), random(seed ^ 1, 4, 4), random(seed ^ 2, 4, 4), 2).unwrap();
        let x = Tensor4::from_matrix(t, random(seed ^ 3, t.len(), 4)).unwrap();
        let cv = if cross { Tensor4::from_matrix(c, random(seed ^ 4, c.len(), 4)).unwrap() } else { x.clone() };
        let mask = nearby_mask(t, c, e, causal).unwrap();
        let sparse = attend_sparse(&x, &cv, &w, e, causal).unwrap();
        let dense = attend_dense_masked(&x, &cv, &w, &mask).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-9);
        let gathered = attend_gathered(&x, &cv, &w, &mask, true).unwrap();
        prop_assert!(gathered.max_abs_diff(&sparse) < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let p = softmax_last(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = xs.iter().map(|x| x + 7.0).collect();
        let q = softmax_last(&shifted).unwrap();
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_standardises(xs in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let n = xs.len();
        prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
        let y = layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-12).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quantize_picks_a_nearest_code(seed in any::<u64>(), n in 2..8usize, rows in 1..10usize) {
        let codebook = Codebook::new(random(seed, n, 3)).unwrap();
        let features = random(seed ^ 9, rows, 3);
        let grid = quantize(&FeatureGrid::new(Dims3::new(1, 1, rows), features.clone()).unwrap(), &codebook).unwrap();
        let dist = |r: &[f64], c: &[f64]| r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        for t in 0..rows {
            let chosen = dist(features.row(t), codebook.row(grid.ids()[t] as usize));
            for k in 0..n {
                prop_assert!(chosen <= dist(features.row(t), codebook.row(k)));
            }
        }
    }

    #[test]
    fn tensor_and_token_files_round_trip(d in dims(4), width in 1..4usize, seed in any::<u64>(), vocab in 1..50usize) {
        let t = Tensor4::from_matrix(d, random(seed, d.len(), width)).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..d.len()).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let g = TokenGrid::new(d, vocab, ids).unwrap();
        let mut buf = Vec::new();
        write_tokens(&mut buf, &g).unwrap();
        prop_assert_eq!(read_tokens(&mut buf.as_slice()).unwrap(), g);
    }
}
