use cfw::groupcov::{
    biased_covariance, blend_covariance, compute_group_stats, unbiased_covariance, Centering,
    EmptyCellPolicy, GroupedDataset,
};
use cfw::matops::{sym_eig, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Sample {
    z: Matrix,
    y: Vec<usize>,
    b: Vec<usize>,
    nc: usize,
    nb: usize,
}

/// Random grouped data with every cell occupied; cells have distinct means.
fn sample(seed: u64, nc: usize, nb: usize, dim: usize, n: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = nc * nb;
    let offsets: Vec<Vec<f64>> = (0..cells)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let mut y = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let g = if i < cells { i } else { rng.random_range(0..cells) };
        y.push(g / nb);
        b.push(g % nb);
        cols.push((0..dim).map(|k| offsets[g][k] + rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    }
    let z = Matrix::from_fn(dim, n, |k, j| cols[j][k]);
    Sample { z, y, b, nc, nb }
}

fn dataset(s: &Sample) -> GroupedDataset {
    GroupedDataset::new(s.z.clone(), s.y.clone(), s.b.clone(), s.nc, s.nb).unwrap()
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

/// `(μ_b, μ_u)` straight from the samples.
fn oracle_means(s: &Sample) -> (Vec<f64>, Vec<f64>) {
    let (dim, n) = s.z.shape();
    let cells = s.nc * s.nb;
    let mut sums = vec![vec![0.0; dim]; cells];
    let mut counts = vec![0usize; cells];
    for j in 0..n {
        let g = s.y[j] * s.nb + s.b[j];
        counts[g] += 1;
        for (k, sum) in sums[g].iter_mut().enumerate() {
            *sum += s.z[(k, j)];
        }
    }
    let mu_b = (0..dim).map(|k| s.z.row(k).iter().sum::<f64>() / n as f64).collect();
    let mu_u = (0..dim)
        .map(|k| (0..cells).map(|g| sums[g][k] / counts[g] as f64).sum::<f64>() / cells as f64)
        .collect();
    (mu_b, mu_u)
}

fn shape() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 2usize..4, 2usize..4, 1usize..6, 20usize..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_group_blend_is_linear((seed, nc, nb, dim, n) in shape(), lambda in 0.0f64..=1.0) {
        let s = sample(seed, nc, nb, dim, n);
        let stats = compute_group_stats(&dataset(&s), Centering::PerGroup).unwrap();
        let p = EmptyCellPolicy::Error;
        let s0 = blend_covariance(&stats, 0.0, p).unwrap().sigma.into_matrix();
        let s1 = blend_covariance(&stats, 1.0, p).unwrap().sigma.into_matrix();
        let sl = blend_covariance(&stats, lambda, p).unwrap().sigma.into_matrix();
        let lin = s1.scaled(lambda).add(&s0.scaled(1.0 - lambda)).unwrap();
        prop_assert!(max_diff(&sl, &lin) <= 1e-12 * (1.0 + lin.max_abs()));
    }

    #[test]
    fn global_blend_is_the_mixture_covariance((seed, nc, nb, dim, n) in shape(), lambda in 0.0f64..=1.0) {
        let s = sample(seed, nc, nb, dim, n);
        let stats = compute_group_stats(&dataset(&s), Centering::Global).unwrap();
        let p = EmptyCellPolicy::Error;
        let s0 = blend_covariance(&stats, 0.0, p).unwrap().sigma.into_matrix();
        let s1 = blend_covariance(&stats, 1.0, p).unwrap().sigma.into_matrix();
        let sl = blend_covariance(&stats, lambda, p).unwrap().sigma.into_matrix();
        let (mu_b, mu_u) = oracle_means(&s);
        let d: Vec<f64> = mu_u.iter().zip(&mu_b).map(|(u, b)| u - b).collect();
        let rank_one = Matrix::from_fn(dim, dim, |i, j| lambda * (1.0 - lambda) * d[i] * d[j]);
        let expect = s1.scaled(lambda).add(&s0.scaled(1.0 - lambda)).unwrap().add(&rank_one).unwrap();
        prop_assert!(max_diff(&sl, &expect) <= 1e-11 * (1.0 + expect.max_abs()));
    }

    #[test]
    fn global_biased_covariance_is_the_population_covariance((seed, nc, nb, dim, n) in shape()) {
        let s = sample(seed, nc, nb, dim, n);
        let stats = compute_group_stats(&dataset(&s), Centering::Global).unwrap();
        let (mu_b, _) = oracle_means(&s);
        let pop = Matrix::from_fn(dim, dim, |i, k| {
            (0..n).map(|j| (s.z[(i, j)] - mu_b[i]) * (s.z[(k, j)] - mu_b[k])).sum::<f64>() / n as f64
        });
        let sb = biased_covariance(&stats).into_matrix();
        prop_assert!(max_diff(&sb, &pop) <= 1e-11 * (1.0 + pop.max_abs()));
    }

    #[test]
    fn blend_is_psd((seed, nc, nb, dim, n) in shape(), lambda in 0.0f64..=1.0, global in any::<bool>()) {
        let s = sample(seed, nc, nb, dim, n);
        let centering = if global { Centering::Global } else { Centering::PerGroup };
        let stats = compute_group_stats(&dataset(&s), centering).unwrap();
        let sigma = blend_covariance(&stats, lambda, EmptyCellPolicy::Error).unwrap().sigma;
        let min = sym_eig(&sigma).unwrap().values.into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-10, "smallest eigenvalue {min}");
    }

    #[test]
    fn balanced_counts_make_unbiased_equal_biased(seed in any::<u64>(), nc in 2usize..4, nb in 2usize..4, dim in 1usize..6, per_cell in 1usize..20, global in any::<bool>()) {
        let cells = nc * nb;
        let mut s = sample(seed, nc, nb, dim, cells * per_cell);
        for i in 0..cells * per_cell {
            s.y[i] = (i % cells) / nb;
            s.b[i] = i % nb;
        }
        let centering = if global { Centering::Global } else { Centering::PerGroup };
        let stats = compute_group_stats(&dataset(&s), centering).unwrap();
        let sb = biased_covariance(&stats).into_matrix();
        let su = unbiased_covariance(&stats, EmptyCellPolicy::Error).unwrap().into_matrix();
        prop_assert!(su.sub(&sb).unwrap().frobenius_norm() <= 1e-10);
    }

    #[test]
    fn sample_order_does_not_matter((seed, nc, nb, dim, n) in shape(), shuffle_seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let s = sample(seed, nc, nb, dim, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let t = Sample {
            z: s.z.select_columns(&order),
            y: order.iter().map(|&i| s.y[i]).collect(),
            b: order.iter().map(|&i| s.b[i]).collect(),
            nc,
            nb,
        };
        for centering in [Centering::Global, Centering::PerGroup] {
            let a = compute_group_stats(&dataset(&s), centering).unwrap();
            let c = compute_group_stats(&dataset(&t), centering).unwrap();
            prop_assert_eq!(&a.counts, &c.counts);
            let ba = blend_covariance(&a, lambda, EmptyCellPolicy::Error).unwrap();
            let bc = blend_covariance(&c, lambda, EmptyCellPolicy::Error).unwrap();
            prop_assert!(max_diff(ba.sigma.as_matrix(), bc.sigma.as_matrix()) <= 1e-12 * (1.0 + ba.sigma.as_matrix().max_abs()));
            for (x, y) in ba.mean.iter().zip(&bc.mean) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
