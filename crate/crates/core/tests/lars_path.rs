use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsedyn_core::lars::{kkt_check, lasso_dense, lasso_path, solve_dense_oracle, DenseDesign, Event, SolverConfig};
use sparsedyn_core::{Tape, Tensor};

fn instance(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Tensor, Vec<f64>) {
    let x = Tensor::new(vec![n, p], (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (x, y)
}

fn lambda_max(x: &Tensor, y: &[f64]) -> f64 {
    lasso_dense(x, y, f64::MAX, &SolverConfig::default())
        .unwrap()
        .lambda_max
}

fn events(x: &Tensor, y: &[f64], lam: f64) -> Vec<Event> {
    lasso_dense(x, y, lam, &SolverConfig::default())
        .unwrap()
        .knots
        .iter()
        .map(|k| k.event)
        .collect()
}

#[test]
fn matches_coordinate_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let n = rng.random_range(5..=50);
        let p = rng.random_range(1..=30);
        let (x, y) = instance(&mut rng, n, p);
        let lmax = lambda_max(&x, &y);
        for frac in [0.3, 0.1, 0.03] {
            let sol = lasso_dense(&x, &y, frac * lmax, &SolverConfig::default()).unwrap();
            assert!(sol.converged);
            let oracle = solve_dense_oracle(&x, &y, frac * lmax, 1e-12).unwrap();
            for (a, b) in sol.dense().iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
}

#[test]
fn knots_are_monotone_and_start_at_lambda_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (x, y) = instance(&mut rng, 30, 12);
    let sol = lasso_dense(&x, &y, 0.0, &SolverConfig::default()).unwrap();
    assert_eq!(sol.knots[0].lambda, sol.lambda_max);
    for w in sol.knots.windows(2) {
        assert!(w[1].lambda <= w[0].lambda);
    }
}

#[test]
fn gradient_wrt_response_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 5 {
        let (x, y) = instance(&mut rng, 25, 8);
        let lam = 0.1 * lambda_max(&x, &y);
        let weights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |yy: &[f64]| -> f64 {
            let s = lasso_dense(&x, yy, lam, &SolverConfig::default()).unwrap();
            s.dense().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let base = events(&x, &y, lam);
        let tape = Tape::new();
        let design = DenseDesign::new(tape.leaf(x.clone())).unwrap();
        let yv = tape.leaf(Tensor::from_vec(y.clone()));
        let sol = lasso_path(&design, yv, lam, &SolverConfig::default()).unwrap();
        let loss = sol.beta.mul_const(&Tensor::from_vec(weights.clone())).sum();
        let g = tape.backward(loss).unwrap().wrt(yv);
        let mut stable = true;
        for i in 0..y.len() {
            let (mut a, mut b) = (y.clone(), y.clone());
            a[i] += h;
            b[i] -= h;
            if events(&x, &a, lam) != base || events(&x, &b, lam) != base {
                stable = false;
                break;
            }
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "coord {i}: fd {fd} tape {}", g.data()[i]);
        }
        if stable {
            checked += 1;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn interpolation_between_knots_is_stationary(seed in 0u64..10_000, mu in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(2..15);
        let n = rng.random_range(p + 1..30);
        let (x, y) = instance(&mut rng, n, p);
        let sol = lasso_dense(&x, &y, 0.0, &SolverConfig::default()).unwrap();
        let tape = Tape::new();
        let design = DenseDesign::new(tape.leaf(x.clone())).unwrap();
        let dense = |c: &[(usize, f64)]| {
            let mut v = vec![0.0; p];
            c.iter().for_each(|&(j, b)| v[j] = b);
            v
        };
        for w in sol.knots.windows(2) {
            let (a, b) = (dense(&w[0].coefficients), dense(&w[1].coefficients));
            let lam = mu * w[0].lambda + (1.0 - mu) * w[1].lambda;
            let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| mu * u + (1.0 - mu) * v).collect();
            prop_assert!(kkt_check(&design, &y, &mid, lam, 1e-6));
        }
    }

    #[test]
    fn solution_satisfies_kkt(seed in 0u64..10_000, frac in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = instance(&mut rng, 20, 10);
        let lam = frac * lambda_max(&x, &y);
        let sol = lasso_dense(&x, &y, lam, &SolverConfig::default()).unwrap();
        let tape = Tape::new();
        let design = DenseDesign::new(tape.leaf(x.clone())).unwrap();
        prop_assert!(kkt_check(&design, &y, &sol.dense(), lam, 1e-6));
    }
}
