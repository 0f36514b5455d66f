use rand::Rng;
use roulette_core::param::RngStream;
use roulette_core::tasks::{make_gaussian_blobs, rosenbrock, rosenbrock_grad, MlpModel};

const H: f64 = 1e-4;

/// Relative error between two gradient vectors, scaled by the larger norm.
fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(analytic).max(scale(numeric)).max(1e-12)
}

#[test]
fn rosenbrock_gradient_matches_central_differences() {
    let mut rng = RngStream::new(3, "fd.rosenbrock");
    for point in 0..20 {
        let dim = 2 + point % 5;
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let numeric: Vec<f64> = (0..dim)
            .map(|i| {
                let mut up = x.clone();
                let mut down = x.clone();
                up[i] += H;
                down[i] -= H;
                (rosenbrock(&up) - rosenbrock(&down)) / (2.0 * H)
            })
            .collect();
        let err = grad_rel_err(&rosenbrock_grad(&x), &numeric);
        assert!(err < 1e-4, "point {point} {x:?}: rel err {err:e}");
    }
}

#[test]
fn mlp_backprop_matches_central_differences() {
    let data = make_gaussian_blobs(5, 24, 4, 3, 2.0).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.gather(&all);
    for point in 0..20u32 {
        let mut rng = RngStream::new(u64::from(point), "fd.mlp");
        let mut model = MlpModel::init(4, 6, 3, &mut rng);
        // random biases too, so every group is exercised away from zero
        for v in model.params.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        let (_, _, grad) = model.forward_backward(&batch).unwrap();
        let n = model.params.len();
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let base = model.params.as_slice()[i];
                let mut m = model.clone();
                m.params.as_mut_slice()[i] = base + H;
                let up = m.evaluate(&batch).unwrap().loss;
                m.params.as_mut_slice()[i] = base - H;
                let down = m.evaluate(&batch).unwrap().loss;
                (up - down) / (2.0 * H)
            })
            .collect();
        let err = grad_rel_err(grad.as_slice(), &numeric);
        assert!(err < 1e-4, "point {point}: rel err {err:e}");
    }
}

#[test]
fn loss_and_accuracy_ranges() {
    let data = make_gaussian_blobs(9, 60, 5, 4, 3.0).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.gather(&all);
    for seed in 0..10 {
        let model = MlpModel::init(5, 7, 4, &mut RngStream::new(seed, "init"));
        let e = model.evaluate(&batch).unwrap();
        assert!(e.loss >= 0.0);
        assert!((0.0..=1.0).contains(&e.accuracy));
    }
}
