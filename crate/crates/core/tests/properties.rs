use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use natgrad::experiment::ExperimentConfig;
use natgrad::linalg::{pinv, pinv_with_info, rank};
use natgrad::logistic::{fisher_beta, ClassificationDataset};
use natgrad::model::{init, ModelKind, ModelParams, ModelSpec};
use natgrad::natgrad::{natgrad_direct_logistic, natgrad_matfac, SolverOptions};
use natgrad::ntk::{natural_ntk_slice, ntk_slice};
use natgrad::reference::ols;
use natgrad::stable::{sigmoid, softplus};
use natgrad::FisherWeighting;

fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn dataset(n: usize, d: usize, rng: &mut ChaCha8Rng) -> ClassificationDataset {
    let y = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    ClassificationDataset::new(gaussian(n, d, rng), y).unwrap()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + b.amax())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinv_satisfies_penrose(seed in any::<u64>(), r in 1usize..7, c in 1usize..7, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = k.min(r).min(c);
        let a = gaussian(r, k, &mut rng) * gaussian(k, c, &mut rng);
        let p = pinv(&a, 1e-12);
        prop_assert!(close(&(&a * &p * &a), &a, 1e-10));
        prop_assert!(close(&(&p * &a * &p), &p, 1e-8));
        let ap = &a * &p;
        let pa = &p * &a;
        prop_assert!(close(&ap, &ap.transpose(), 1e-10));
        prop_assert!(close(&pa, &pa.transpose(), 1e-10));
        prop_assert_eq!(pinv_with_info(&a, 1e-12).rank, rank(&a, 1e-12));
    }

    #[test]
    fn direct_solution_is_min_norm(seed in any::<u64>(), n in 1usize..9, d in 1usize..7, scale in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = dataset(n, d, &mut rng);
        let beta = gaussian(d, 1, &mut rng).column(0) * scale;
        let dir = natgrad_direct_logistic(&ds, &beta, FisherWeighting::Sample, &SolverOptions::default()).unwrap();
        prop_assert!(dir.residual <= 1e-8);
        // minimum norm: no component in the null space of X
        let v: DVector<f64> = dir.blocks[0].column(0).into();
        let x = ds.x();
        let proj = pinv(x, 1e-12) * x * &v;
        prop_assert!((&proj - &v).norm() <= 1e-8 * (1.0 + v.norm()));
    }

    #[test]
    fn scale_extraction_is_exact(seed in any::<u64>(), n in 2usize..8, d in 1usize..5, scale in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = dataset(n, d, &mut rng);
        let beta = gaussian(d, 1, &mut rng).column(0) * scale;
        let u_max = (ds.signed_design() * &beta).max();
        prop_assume!(u_max <= 30.0);
        let on = SolverOptions::default();
        let off = SolverOptions { scale_extraction: false, ..on };
        let a = natgrad_direct_logistic(&ds, &beta, FisherWeighting::Sample, &on).unwrap();
        let b = natgrad_direct_logistic(&ds, &beta, FisherWeighting::Sample, &off).unwrap();
        prop_assert!(close(&a.blocks[0], &b.blocks[0], 1e-10));
    }

    #[test]
    fn fisher_matches_naive_formula(seed in any::<u64>(), n in 1usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = dataset(n, d, &mut rng);
        let beta: DVector<f64> = gaussian(d, 1, &mut rng).column(0).into_owned();
        let f = fisher_beta(&ds, &beta, FisherWeighting::Sample).unwrap().true_matrix();
        let x = ds.x();
        let s = x * &beta;
        let w = s.map(|z| sigmoid(z) * sigmoid(-z) / n as f64);
        let naive = x.transpose() * DMatrix::from_diagonal(&w) * x;
        prop_assert!(close(&f, &naive, 1e-12));
        // flipping labels leaves the Fisher unchanged
        let flipped = ClassificationDataset::new(x.clone(), -ds.y()).unwrap();
        let g = fisher_beta(&flipped, &beta, FisherWeighting::Sample).unwrap().true_matrix();
        prop_assert!(close(&f, &g, 1e-12));
    }

    #[test]
    fn ols_fit_is_transform_invariant(seed in any::<u64>(), n in 1usize..9, d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = dataset(n, d, &mut rng);
        let a = gaussian(d, d, &mut rng) + DMatrix::identity(d, d) * 2.0;
        prop_assume!(a.clone().lu().determinant().abs() > 0.1);
        let moved = ds.transformed(&a).unwrap();
        let f1 = ds.x() * ols(&ds).beta;
        let f2 = moved.x() * ols(&moved).beta;
        prop_assert!((f1 - f2).amax() <= 1e-8);
    }

    #[test]
    fn matfac_direction_reconstructs_gradient(seed in any::<u64>(), d in 1usize..6, depth in 1usize..5) {
        let p = init(&ModelSpec::new(ModelKind::Matfac, depth, d, 1.0, seed).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let g = gaussian(d, d, &mut rng);
        let dir = natgrad_matfac(&p, &g, &SolverOptions::default()).unwrap();
        prop_assume!(!dir.rank_deficient && dir.condition < 1e6);
        prop_assert!(close(&p.jacobian().apply(&dir.blocks), &g, 1e-8));
    }

    #[test]
    fn ntk_matches_finite_difference_jacobian(seed in any::<u64>(), depth in 1usize..4) {
        let d = 4;
        let p = init(&ModelSpec::new(ModelKind::Matfac, depth, d, 0.7, seed).unwrap()).unwrap();
        let jac = finite_difference_jacobian(&p);
        let kernel = &jac * jac.transpose();
        // PSD up to roundoff
        let eig = nalgebra::SymmetricEigen::new(kernel.clone());
        prop_assert!(eig.eigenvalues.min() >= -1e-6 * eig.eigenvalues.amax().max(1.0));
        for probe in [(0, 0), (1, 3), (2, 1)] {
            let s = ntk_slice(&p, probe).unwrap();
            let col = probe.1 * d + probe.0;
            for j in 0..d {
                for i in 0..d {
                    let fd = kernel[(j * d + i, col)];
                    prop_assert!((s.response[(i, j)] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn natural_kernel_is_one_hot(seed in any::<u64>(), d in 2usize..5, depth in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::new(ModelKind::Matfac, depth, d, 1.0, 0).unwrap();
        let layers = (0..depth)
            .map(|_| DMatrix::identity(d, d) + gaussian(d, d, &mut rng) * 0.2)
            .collect();
        let p = ModelParams::new(spec, layers).unwrap();
        let probe = (rng.random_range(0..d), rng.random_range(0..d));
        let s = natural_ntk_slice(&p, probe).unwrap();
        prop_assert!((s.response[probe] - 1.0).abs() <= 1e-8);
        prop_assert!(s.off_probe_max() <= 1e-8);
    }

    #[test]
    fn stable_functions_agree(z in -700.0f64..700.0) {
        assert_relative_eq!(sigmoid(z) + sigmoid(-z), 1.0, epsilon = 1e-15);
        assert_relative_eq!(softplus(z) - softplus(-z), z, epsilon = 1e-12, max_relative = 1e-14);
    }

    #[test]
    fn config_survives_override_roundtrip(step in 1e-4f64..1.0, steps in 1usize..10_000) {
        let text = include_str!("../../../configs/toy2d.toml");
        let mut c = ExperimentConfig::from_toml_str(text).unwrap();
        c.apply_override(&format!("run.step_size={step:e}")).unwrap();
        c.apply_override(&format!("grid.0.max_steps={steps}")).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back.grid[0].max_steps, Some(steps));
    }
}

/// Central-difference Jacobian of `vec(β)` with respect to all factor entries.
fn finite_difference_jacobian(p: &ModelParams) -> DMatrix<f64> {
    let d = p.spec().dim;
    let h = 1e-6;
    let n_params: usize = p.layers().iter().map(|w| w.len()).sum();
    let mut jac = DMatrix::zeros(d * d, n_params);
    let mut col = 0;
    for l in 0..p.depth() {
        for k in 0..p.layers()[l].len() {
            let bump = |sign: f64| {
                let mut layers = p.layers().to_vec();
                layers[l][k] += sign * h;
                ModelParams::new(p.spec().clone(), layers).unwrap().collapse()
            };
            let diff = (bump(1.0).matrix() - bump(-1.0).matrix()) / (2.0 * h);
            jac.column_mut(col).copy_from_slice(diff.as_slice());
            col += 1;
        }
    }
    jac
}
