use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_seq(rng: &mut impl Rng, t: usize, d: usize) -> Mat {
    Mat::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_loss(p: &ParamTensor, xs: &Mat, s0: &[f64], w: &Mat) -> f64 {
    let out = cell_forward(p, xs, Some(s0)).unwrap();
    out.hs.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Central-difference check of every parameter, input and initial-state entry.
fn check_gradients(kind: CellKind, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CellSpec::new(kind, rng.random_range(1..=6), rng.random_range(1..=6)).unwrap();
    let t = rng.random_range(1..=5);
    let mut p = ParamTensor::init(spec, &mut rng);
    // random biases so every gate is exercised away from its init value
    for (_, m) in p.tensors.iter_mut() {
        m.data.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
    }
    let mut xs = random_seq(&mut rng, t, spec.input_dim);
    let mut s0: Vec<f64> = (0..spec.state_dim()).map(|_| rng.random_range(-0.8..0.8)).collect();
    let w = random_seq(&mut rng, t, spec.units);
    let out = cell_forward(&p, &xs, Some(&s0)).unwrap();
    let g = cell_backward(&p, &out.saved, &w).unwrap();
    let eps = 1e-6;

    let analytic = g.params.flat();
    for (idx, a) in analytic.iter().enumerate() {
        let orig = *p.flat_mut(idx);
        *p.flat_mut(idx) = orig + eps;
        let lp = weighted_loss(&p, &xs, &s0, &w);
        *p.flat_mut(idx) = orig - eps;
        let lm = weighted_loss(&p, &xs, &s0, &w);
        *p.flat_mut(idx) = orig;
        let n = (lp - lm) / (2.0 * eps);
        assert!(rel_err(*a, n) < 1e-5, "{kind} param {idx}: {a} vs {n}");
    }
    for idx in 0..xs.data.len() {
        let orig = xs.data[idx];
        xs.data[idx] = orig + eps;
        let lp = weighted_loss(&p, &xs, &s0, &w);
        xs.data[idx] = orig - eps;
        let lm = weighted_loss(&p, &xs, &s0, &w);
        xs.data[idx] = orig;
        let n = (lp - lm) / (2.0 * eps);
        assert!(rel_err(g.dxs.data[idx], n) < 1e-5, "{kind} input {idx}");
    }
    for idx in 0..s0.len() {
        let orig = s0[idx];
        s0[idx] = orig + eps;
        let lp = weighted_loss(&p, &xs, &s0, &w);
        s0[idx] = orig - eps;
        let lm = weighted_loss(&p, &xs, &s0, &w);
        s0[idx] = orig;
        let n = (lp - lm) / (2.0 * eps);
        assert!(rel_err(g.dstate0[idx], n) < 1e-5, "{kind} state {idx}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    for kind in CellKind::ALL {
        for seed in 0..5 {
            check_gradients(kind, seed);
        }
    }
}

#[test]
fn zero_weights_and_inputs_give_zero_hidden() {
    for kind in CellKind::ALL {
        let spec = CellSpec::new(kind, 3, 4).unwrap();
        let p = ParamTensor::zeros(spec);
        let out = cell_forward(&p, &Mat::zeros(6, 3), None).unwrap();
        assert!(out.hs.data.iter().all(|v| *v == 0.0), "{kind}");
    }
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in CellKind::ALL {
        let spec = CellSpec::new(kind, 3, 2).unwrap();
        let p = ParamTensor::init(spec, &mut rng);
        let xs = random_seq(&mut rng, 4, 3);
        let out = cell_forward(&p, &xs, None).unwrap();
        let g = cell_backward(&p, &out.saved, &Mat::zeros(4, 2)).unwrap();
        assert!(g.params.flat().iter().all(|v| *v == 0.0));
        assert!(g.dxs.data.iter().all(|v| *v == 0.0));
        assert!(g.dstate0.iter().all(|v| *v == 0.0));
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scalar_params(kind: CellKind, values: &[(&str, Vec<f64>)]) -> ParamTensor {
    let mut p = ParamTensor::zeros(CellSpec::new(kind, 1, 1).unwrap());
    for (name, v) in values {
        p.get_mut(name).data.copy_from_slice(v);
    }
    p
}

fn one_step(p: &ParamTensor, x: f64, s0: &[f64]) -> f64 {
    let out = cell_forward(p, &Mat::from_vec(1, 1, vec![x]).unwrap(), Some(s0)).unwrap();
    out.hs.data[0]
}

#[test]
fn scalar_single_step_matches_hand_evaluation() {
    let (x, h0, c0) = (0.7, -0.4, 0.3);

    // LSTM gates ordered [i, f, g, o]
    let p = scalar_params(
        CellKind::Lstm,
        &[
            ("W", vec![0.5, -0.3, 0.8, 0.1]),
            ("U", vec![0.2, 0.4, -0.6, 0.9]),
            ("b", vec![0.1, 1.0, -0.2, 0.05]),
        ],
    );
    let i = sig(0.5 * x + 0.2 * h0 + 0.1);
    let f = sig(-0.3 * x + 0.4 * h0 + 1.0);
    let g = (0.8 * x - 0.6 * h0 - 0.2).tanh();
    let o = sig(0.1 * x + 0.9 * h0 + 0.05);
    let want = o * (f * c0 + i * g).tanh();
    assert!((one_step(&p, x, &[h0, c0]) - want).abs() < 1e-15);

    // GRU [z, r, n], candidate sees r ⊙ h
    let p = scalar_params(
        CellKind::Gru,
        &[("W", vec![0.5, -0.3, 0.8]), ("U", vec![0.2, 0.4, -0.6]), ("b", vec![0.1, -0.1, 0.2])],
    );
    let z = sig(0.5 * x + 0.2 * h0 + 0.1);
    let r = sig(-0.3 * x + 0.4 * h0 - 0.1);
    let n = (0.8 * x - 0.6 * (r * h0) + 0.2).tanh();
    let want = (1.0 - z) * h0 + z * n;
    assert!((one_step(&p, x, &[h0]) - want).abs() < 1e-15);

    // MGU [f, n]
    let p = scalar_params(CellKind::Mgu, &[("W", vec![0.5, -0.3]), ("U", vec![0.2, 0.4]), ("b", vec![1.0, 0.3])]);
    let f = sig(0.5 * x + 0.2 * h0 + 1.0);
    let n = (-0.3 * x + 0.4 * (f * h0) + 0.3).tanh();
    let want = (1.0 - f) * h0 + f * n;
    assert!((one_step(&p, x, &[h0]) - want).abs() < 1e-15);

    // RAN carries c; h = tanh(c)
    let p = scalar_params(
        CellKind::Ran,
        &[("Wc", vec![1.5]), ("W", vec![0.5, -0.3]), ("U", vec![0.2, 0.4]), ("b", vec![0.1, 0.2])],
    );
    let hp = c0.tanh();
    let i = sig(0.5 * x + 0.2 * hp + 0.1);
    let f = sig(-0.3 * x + 0.4 * hp + 0.2);
    let want = (i * 1.5 * x + f * c0).tanh();
    assert!((one_step(&p, x, &[c0]) - want).abs() < 1e-15);

    // SRU with identity highway (input_dim == units); W rows [x̃, f, r]
    let p = scalar_params(
        CellKind::Sru,
        &[("W", vec![0.9, 0.5, -0.3]), ("v", vec![0.2, -0.4]), ("b", vec![0.1, 0.3])],
    );
    let f = sig(0.5 * x + 0.2 * c0 + 0.1);
    let r = sig(-0.3 * x - 0.4 * c0 + 0.3);
    let c = f * c0 + (1.0 - f) * 0.9 * x;
    let want = r * c + (1.0 - r) * x;
    assert!((one_step(&p, x, &[c0]) - want).abs() < 1e-15);

    // QRNN: first step sees a zero previous input
    let p = scalar_params(
        CellKind::Qrnn,
        &[("W0", vec![0.5, -0.3, 0.8]), ("W1", vec![9.0, 9.0, 9.0]), ("b", vec![0.1, 0.2, -0.1])],
    );
    let z = (0.5 * x + 0.1).tanh();
    let f = sig(-0.3 * x + 0.2);
    let o = sig(0.8 * x - 0.1);
    let want = o * (f * c0 + (1.0 - f) * z);
    assert!((one_step(&p, x, &[c0]) - want).abs() < 1e-15);

    // TRNN: z linear, gates from x only
    let p = scalar_params(CellKind::Trnn, &[("W", vec![0.5, -0.3]), ("b", vec![0.1, 0.2])]);
    let z = 0.5 * x + 0.1;
    let f = sig(-0.3 * x + 0.2);
    let want = f * h0 + (1.0 - f) * z;
    assert!((one_step(&p, x, &[h0]) - want).abs() < 1e-15);

    // CFN [f, i]
    let p = scalar_params(
        CellKind::Cfn,
        &[("W", vec![0.5, -0.3]), ("U", vec![0.2, 0.4]), ("b", vec![0.1, 0.2]), ("Wx", vec![1.2])],
    );
    let f = sig(0.5 * x + 0.2 * h0 + 0.1);
    let i = sig(-0.3 * x + 0.4 * h0 + 0.2);
    let want = f * h0.tanh() + i * (1.2 * x).tanh();
    assert!((one_step(&p, x, &[h0]) - want).abs() < 1e-15);
}

#[test]
fn qrnn_second_step_uses_previous_input() {
    let p = scalar_params(
        CellKind::Qrnn,
        &[("W0", vec![0.5, -0.3, 0.8]), ("W1", vec![0.2, 0.4, -0.6]), ("b", vec![0.0; 3])],
    );
    let xs = Mat::from_vec(2, 1, vec![0.7, -0.2]).unwrap();
    let out = cell_forward(&p, &xs, None).unwrap();
    let c1 = {
        let z = (0.5 * 0.7f64).tanh();
        let f = sig(-0.3 * 0.7);
        (1.0 - f) * z
    };
    let z = (0.5 * -0.2 + 0.2 * 0.7f64).tanh();
    let f = sig(-0.3 * -0.2 + 0.4 * 0.7);
    let o = sig(0.8 * -0.2 - 0.6 * 0.7);
    let want = o * (f * c1 + (1.0 - f) * z);
    assert!((out.hs.data[1] - want).abs() < 1e-15);
}

#[test]
fn saturated_lstm_holds_state() {
    let spec = CellSpec::new(CellKind::Lstm, 2, 3).unwrap();
    let mut p = ParamTensor::zeros(spec);
    let b = &mut p.get_mut("b").data;
    b[..3].fill(-1e3); // input gate closed
    b[3..6].fill(1e3); // forget gate open
    b[9..12].fill(1e3); // output gate open
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs = random_seq(&mut rng, 7, 2);
    let s0 = [0.0, 0.0, 0.0, 0.3, -0.5, 0.9];
    let out = cell_forward(&p, &xs, Some(&s0)).unwrap();
    for t in 0..7 {
        for k in 0..3 {
            assert_eq!(out.hs.at(t, k), out.hs.at(0, k));
        }
    }
    assert!((out.hs.at(6, 0) - 0.3f64.tanh()).abs() < 1e-15);
}

#[test]
fn fully_gated_trnn_blocks_early_inputs() {
    let spec = CellSpec::new(CellKind::Trnn, 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamTensor::init(spec, &mut rng);
    // forget gate ≡ 1: f-block weights zero, bias large
    let w = p.get_mut("W");
    w.data[3 * 2..].fill(0.0);
    p.get_mut("b").data[3..].fill(800.0);
    let xs = random_seq(&mut rng, 5, 2);
    let out = cell_forward(&p, &xs, None).unwrap();
    let mut dhs = Mat::zeros(5, 3);
    dhs.row_mut(4).fill(1.0);
    let g = cell_backward(&p, &out.saved, &dhs).unwrap();
    assert!(g.dxs.row(0).iter().all(|v| *v == 0.0));
}

#[test]
fn stale_activations_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = CellSpec::new(CellKind::Gru, 2, 2).unwrap();
    let mut p = ParamTensor::init(spec, &mut rng);
    let xs = random_seq(&mut rng, 3, 2);
    let out = cell_forward(&p, &xs, None).unwrap();
    p.get_mut("W").data[0] += 0.1;
    assert!(matches!(
        cell_backward(&p, &out.saved, &Mat::zeros(3, 2)),
        Err(Error::StaleActivations)
    ));
    let other = ParamTensor::init(CellSpec::new(CellKind::Mgu, 2, 2).unwrap(), &mut rng);
    assert!(cell_backward(&other, &out.saved, &Mat::zeros(3, 2)).is_err());
}

#[test]
fn shape_errors() {
    let spec = CellSpec::new(CellKind::Lstm, 3, 2).unwrap();
    let p = ParamTensor::zeros(spec);
    assert!(cell_forward(&p, &Mat::zeros(4, 2), None).is_err());
    assert!(cell_forward(&p, &Mat::zeros(0, 3), None).is_err());
    assert!(cell_forward(&p, &Mat::zeros(2, 3), Some(&[0.0; 2])).is_err());
    assert!(CellSpec::new(CellKind::Lstm, 3, 0).is_err());
    assert!(CellSpec::new(CellKind::Lstm, 0, 3).is_err());
}

#[test]
fn divergence_is_reported() {
    let spec = CellSpec::new(CellKind::Trnn, 1, 1).unwrap();
    let mut p = ParamTensor::zeros(spec);
    p.get_mut("W").data[0] = f64::MAX;
    let xs = Mat::from_vec(1, 1, vec![10.0]).unwrap();
    assert!(matches!(cell_forward(&p, &xs, None), Err(Error::Diverged(_))));
}

#[test]
fn param_count_matches_enumeration() {
    for kind in CellKind::ALL {
        for (i, h) in [(14, 10), (3, 3), (1, 7), (6, 2)] {
            let spec = CellSpec::new(kind, i, h).unwrap();
            assert_eq!(param_count(&spec, false).unwrap(), ParamTensor::zeros(spec).count(), "{kind}");
            let stack = CellStack::zeros(kind, i, h, true).unwrap();
            assert_eq!(param_count(&spec, true).unwrap(), stack.num_params(), "{kind} stacked");
        }
    }
    let lstm = CellSpec::new(CellKind::Lstm, 14, 10).unwrap();
    assert_eq!(param_count(&lstm, false).unwrap(), 1000);
    assert!(param_count(&CellSpec { kind: CellKind::Lstm, input_dim: 14, units: 0 }, false).is_err());
}

#[test]
fn param_count_ordering() {
    for (i, h) in [(14, 3), (14, 5), (14, 10), (14, 20), (14, 50), (4, 4)] {
        for stacked in [false, true] {
            let c = |k| param_count(&CellSpec::new(k, i, h).unwrap(), stacked).unwrap();
            assert!(c(CellKind::Lstm) > c(CellKind::Gru));
            assert!(c(CellKind::Gru) > c(CellKind::Mgu));
            let trnn = c(CellKind::Trnn);
            for k in CellKind::ALL {
                if k != CellKind::Trnn {
                    assert!(trnn < c(k), "{k} {i} {h} {stacked}");
                }
            }
        }
    }
}

#[test]
fn cfn_hidden_state_stays_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let spec = CellSpec::new(CellKind::Cfn, 3, 4).unwrap();
        let mut p = ParamTensor::init(spec, &mut rng);
        for (_, m) in p.tensors.iter_mut() {
            m.data.iter_mut().for_each(|x| *x *= 20.0);
        }
        let xs = Mat::from_vec(40, 3, (0..120).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let h0: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
        let out = cell_forward(&p, &xs, Some(&h0)).unwrap();
        // |h_t| ≤ |tanh h_{t-1}| + 1 < 2 for every t ≥ 1
        assert!(out.hs.data.iter().all(|v| v.abs() < 2.0));
        let mut prev = h0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for t in 0..40 {
            let cur = out.hs.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(cur <= prev.max(1.0).tanh() + 1.0 + 1e-12);
            prev = cur;
        }
    }
}

#[test]
fn forward_is_deterministic_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stack = CellStack::init(CellKind::Lstm, 5, 6, true, &mut rng).unwrap();
    let xs: Vec<Mat> = (0..16).map(|_| random_seq(&mut rng, 9, 5)).collect();
    let run = |threads| {
        crate::par::with_threads(threads, || {
            crate::par::map_slice(&xs, |x| stack.forward(x).unwrap().hs.data)
        })
    };
    let (a, b) = (run(1), run(4));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
