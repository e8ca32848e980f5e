//! The MLP against independent re-implementations and finite differences.

use heatsmooth::autodiff::Tape;
use heatsmooth::model::{Activation, Layer, MlpModel};
use heatsmooth::{rng, Tensor};
use rand::Rng;

/// Straightforward forward pass: `h ← act(h W + b)` with plain loops.
fn reference_logits(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = model.layers().len() - 1;
    for (k, layer) in model.layers().iter().enumerate() {
        let (n_in, n_out) = (layer.weights.rows(), layer.weights.cols());
        let mut next = layer.bias.data().to_vec();
        for (j, out) in next.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate().take(n_in) {
                *out += hi * layer.weights.data()[i * n_out + j];
            }
        }
        if k < last {
            for v in &mut next {
                *v = match model.activation() {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = next;
    }
    h
}

#[test]
fn forward_matches_plain_loops() {
    let mut r = rng::stream(1, &[]);
    for (seed, act) in [(3, Activation::Relu), (4, Activation::Tanh)] {
        let m = MlpModel::new_random(&[5, 17, 9, 3], act, seed).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
            let got = m.logits(&x).unwrap();
            let want = reference_logits(&m, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
        // the batched path agrees row by row
        let xs: Vec<f64> = (0..15).map(|_| r.random_range(-2.0..2.0)).collect();
        let batch = m.forward_batch(&Tensor::matrix(3, 5, xs.clone()).unwrap()).unwrap();
        for i in 0..3 {
            let want = reference_logits(&m, &xs[5 * i..5 * i + 5]);
            for (g, w) in batch.row(i).iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }
}

/// Mean cross-entropy of `model` on `(xs, ys)`, computed without the tape.
fn reference_loss(model: &MlpModel, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = reference_logits(model, x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / xs.len() as f64
}

fn with_param(model: &MlpModel, layer: usize, bias: bool, idx: usize, delta: f64) -> MlpModel {
    let mut layers: Vec<Layer> = model.layers().to_vec();
    let t = if bias { &layers[layer].bias } else { &layers[layer].weights };
    let mut data = t.data().to_vec();
    data[idx] += delta;
    let shape = t.shape().to_vec();
    let updated = Tensor::new(shape, data).unwrap();
    if bias {
        layers[layer].bias = updated;
    } else {
        layers[layer].weights = updated;
    }
    MlpModel::from_layers(layers, model.activation()).unwrap()
}

#[test]
fn parameter_gradients_match_central_differences() {
    let model = MlpModel::new_random(&[3, 6, 4, 3], Activation::Tanh, 9).unwrap();
    let mut r = rng::stream(2, &[]);
    let xs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = [0, 2, 1, 2];

    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let xv = tape.constant(Tensor::matrix(4, 3, flat).unwrap());
    let logits = model.forward_on(&mut tape, &params, xv).unwrap();
    let logp = tape.log_softmax_rows(logits).unwrap();
    let picked = tape.pick(logp, &ys).unwrap();
    let total = tape.sum(picked).unwrap();
    let loss = tape.scale(total, -0.25).unwrap();
    assert!((tape.value(loss).data()[0] - reference_loss(&model, &xs, &ys)).abs() <= 1e-12);
    let grads = tape.backward(loss).unwrap();

    // one SGD step with unit rate exposes the gradient as a parameter change
    let mut stepped = model.clone();
    stepped.sgd_step(&grads, &params, 1.0);

    let h = 1e-5;
    for (k, (before, after)) in model.layers().iter().zip(stepped.layers()).enumerate() {
        for (bias, b, a) in [
            (false, &before.weights, &after.weights),
            (true, &before.bias, &after.bias),
        ] {
            for idx in 0..b.len() {
                let analytic = b.data()[idx] - a.data()[idx];
                let fd = (reference_loss(&with_param(&model, k, bias, idx, h), &xs, &ys)
                    - reference_loss(&with_param(&model, k, bias, idx, -h), &xs, &ys))
                    / (2.0 * h);
                let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
                assert!(rel <= 1e-5, "layer {k} bias {bias} [{idx}]: {analytic} vs {fd}");
            }
        }
    }
}

#[test]
fn projected_input_gradient_matches_central_differences() {
    let model = MlpModel::new_random(&[4, 12, 12, 3], Activation::Tanh, 21).unwrap();
    let mut r = rng::stream(5, &[]);
    let h = 1e-5;
    for _ in 0..10 {
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
        let w: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let proj = |x: &[f64]| -> f64 {
            reference_logits(&model, x).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let g = model
            .input_grad_projected(
                &Tensor::vector(x.clone()).unwrap(),
                &Tensor::vector(w.clone()).unwrap(),
            )
            .unwrap();
        for j in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let fd = (proj(&xp) - proj(&xm)) / (2.0 * h);
            let rel = (g.data()[j] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel <= 1e-5, "component {j}: {} vs {fd}", g.data()[j]);
        }
    }
}

#[test]
fn jacobian_rows_are_projected_gradients() {
    let model = MlpModel::new_random(&[3, 8, 4], Activation::Relu, 2).unwrap();
    let x = [0.3, -0.2, 0.8];
    let jac = model.jacobian(&x).unwrap();
    for c in 0..4 {
        let mut e = vec![0.0; 4];
        e[c] = 1.0;
        let g = model
            .input_grad_projected(&Tensor::vector(x.to_vec()).unwrap(), &Tensor::vector(e).unwrap())
            .unwrap();
        assert_eq!(jac.row(c), g.data());
    }
}

#[test]
fn saved_model_reloads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.json");
    let m = MlpModel::new_random(&[2, 5, 2], Activation::Relu, 8).unwrap();
    m.save(&path).unwrap();
    let back = MlpModel::load(&path).unwrap();
    for (a, b) in m.layers().iter().zip(back.layers()) {
        assert!(a.weights.data().iter().zip(b.weights.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.bias.data().iter().zip(b.bias.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
