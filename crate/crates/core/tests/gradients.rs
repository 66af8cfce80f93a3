//! Reverse-mode gradients against central differences on random networks.

use decil_core::loss::mse_loss;
use decil_core::net::{init_net, Activation, NetParams};
use decil_core::seed::rng_for;
use rand::RngExt;

fn loss(net: &NetParams, x: &[f64], target: &[f64]) -> f64 {
    mse_loss(&net.forward(x).unwrap(), target).unwrap().0
}

/// `(analytic, numeric)` parameter gradients of the squared error.
fn gradients(net: &NetParams, x: &[f64], target: &[f64], step: f64) -> (Vec<f64>, Vec<f64>) {
    let (_, out_grad) = mse_loss(&net.forward(x).unwrap(), target).unwrap();
    let (grads, _) = net.backward(x, &out_grad).unwrap();
    let analytic: Vec<f64> = grads.params().copied().collect();

    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let orig = *probe.params().nth(i).unwrap();
        *probe.params_mut().nth(i).unwrap() = orig + step;
        let plus = loss(&probe, x, target);
        *probe.params_mut().nth(i).unwrap() = orig - step;
        let minus = loss(&probe, x, target);
        *probe.params_mut().nth(i).unwrap() = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    (analytic, numeric)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_case(seed: u64) -> (NetParams, Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, "gradient-case");
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=8));
    }
    dims.push(rng.random_range(1..=4));
    let net = init_net(&dims, Activation::Tanh, seed).unwrap();
    let x = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t = (0..*dims.last().unwrap())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    (net, x, t)
}

#[test]
fn parameter_gradients_match_central_differences() {
    for seed in 0..20 {
        let (net, x, t) = random_case(seed);
        let (analytic, numeric) = gradients(&net, &x, &t, 1e-5);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "net {seed} {:?}: relative error {err}", net.layer_dims());
    }
}

#[test]
fn relu_gradients_match_away_from_kinks() {
    let net = init_net(&[3, 10, 2], Activation::Relu, 11).unwrap();
    let x = [0.4, -0.9, 1.3];
    let (analytic, numeric) = gradients(&net, &x, &[0.1, -0.2], 1e-6);
    assert!(relative_error(&analytic, &numeric) < 1e-4);
}

#[test]
fn input_gradients_match_central_differences() {
    for seed in 0..10 {
        let (net, x, t) = random_case(100 + seed);
        let (_, out_grad) = mse_loss(&net.forward(&x).unwrap(), &t).unwrap();
        let (_, analytic) = net.backward(&x, &out_grad).unwrap();
        let numeric: Vec<f64> = (0..x.len())
            .map(|j| {
                let mut p = x.clone();
                p[j] += 1e-5;
                let plus = loss(&net, &p, &t);
                p[j] -= 2e-5;
                let minus = loss(&net, &p, &t);
                (plus - minus) / 2e-5
            })
            .collect();
        assert!(relative_error(&analytic, &numeric) < 1e-4, "case {seed}");
    }
}

#[test]
fn batched_backward_sums_per_sample_gradients() {
    let net = init_net(&[2, 6, 3], Activation::Tanh, 3).unwrap();
    let inputs = [0.1, 0.2, -0.5, 0.7, 1.5, -1.0];
    let out_grads = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5, -2.0, 1.0, 0.0];
    let cache = net.forward_batch(&inputs, 3).unwrap();
    let mut batch = NetParams::zeros_like(&net);
    net.backward_batch(&cache, &out_grads, &mut batch).unwrap();

    let mut summed = vec![0.0; net.param_count()];
    for i in 0..3 {
        let (g, _) = net
            .backward(&inputs[2 * i..2 * i + 2], &out_grads[3 * i..3 * i + 3])
            .unwrap();
        for (s, v) in summed.iter_mut().zip(g.params()) {
            *s += v;
        }
    }
    for (a, b) in batch.params().zip(&summed) {
        assert!((a - b).abs() < 1e-12);
    }
}
