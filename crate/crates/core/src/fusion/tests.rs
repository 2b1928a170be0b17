use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cells::CellSpec;
use crate::geometry::{median_position_error, relative_pose};
use crate::sim::{simulate_streams, ScenarioSpec};

fn toy_streams(n: usize, seed: u64) -> (Vec<Pose>, Vec<RelativePose>, Vec<Pose>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<Pose> = (0..n)
        .map(|i| {
            let t = i as f64 * 0.1;
            Pose::new(
                Vec3::new(t.cos(), t.sin(), 0.1 * t),
                Quat::exp(Vec3::new(0.0, 0.0, t + rng.random_range(-0.05..0.05))),
            )
            .unwrap()
        })
        .collect();
    let abs = gt
        .iter()
        .map(|g| Pose::new(g.p + Vec3::from_fn(|_, _| rng.random_range(-0.2..0.2)), g.q).unwrap())
        .collect();
    let rel = gt.windows(2).map(|w| relative_pose(&w[0], &w[1])).collect();
    (abs, rel, gt)
}

fn cfg(cell: CellKind, n_t: usize, r_u: usize, stacked: bool, norm: NormMode) -> FusionConfig {
    FusionConfig {
        cell,
        n_t,
        r_u,
        stacked,
        normalization: norm,
        ..FusionConfig::default()
    }
}

#[test]
fn window_counts_and_starts() {
    let (abs, rel, gt) = toy_streams(30, 1);
    let w = build_windows(&abs[..25], &rel[..24], 25, None).unwrap();
    assert_eq!(w.len(), 1);
    let w = build_windows(&abs, &rel, 10, Some(&gt)).unwrap();
    assert_eq!(w.len(), 21);
    for (s, win) in w.iter().enumerate() {
        assert_eq!(win.target, Some(gt[s + 9]));
        assert_eq!(win.features.row(0)[..7], abs[s].to_array());
    }
}

#[test]
fn window_rows_are_abs_then_arriving_rel() {
    let (abs, rel, _) = toy_streams(8, 2);
    let w = build_windows(&abs, &rel, 4, None).unwrap();
    for (s, win) in w.iter().enumerate() {
        assert_eq!(win.features.cols, FEATURES);
        assert!(win.target.is_none());
        for t in 0..4 {
            let i = s + t;
            let r = if i == 0 { RelativePose::IDENTITY } else { rel[i - 1] };
            let expect: Vec<f64> = abs[i].to_array().into_iter().chain(r.to_array()).collect();
            assert_eq!(win.features.row(t), &expect[..]);
        }
    }
    assert_eq!(w[0].features.row(0)[7..], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn window_argument_errors() {
    let (abs, rel, gt) = toy_streams(5, 3);
    assert!(build_windows(&abs, &rel, 6, None).is_err());
    assert!(build_windows(&abs, &rel, 0, None).is_err());
    assert!(build_windows(&abs, &rel[..3], 2, None).is_err());
    assert!(build_windows(&abs, &rel, 2, Some(&gt[..4])).is_err());
    assert!(build_windows(&[], &[], 1, None).is_err());
}

#[test]
fn loss_closed_forms() {
    let gt = Pose::new(Vec3::new(1.0, -1.0, 0.5), Quat::IDENTITY).unwrap();
    assert_eq!(fusion_loss(&gt, &gt, 50.0).unwrap(), 0.0);
    let off = Pose {
        p: gt.p + Vec3::new(1.0, 2.0, 2.0),
        q: gt.q,
    };
    assert!((fusion_loss(&off, &gt, 50.0).unwrap() - 9.0).abs() < 1e-12);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let turned = Pose {
        p: gt.p + Vec3::new(0.0, 3.0, 4.0),
        q: Quat::new(h, h, 0.0, 0.0),
    };
    let expect = 25.0 + 50.0 * (2.0 - 2f64.sqrt());
    assert!((fusion_loss(&turned, &gt, 50.0).unwrap() - expect).abs() < 1e-12);
    // unnormalized ground truth is divided by its norm
    let gt2 = Pose {
        p: gt.p,
        q: Quat::new(3.0, 0.0, 0.0, 0.0),
    };
    assert!(fusion_loss(&gt, &gt2, 50.0).unwrap() < 1e-24);
    let bad = Pose {
        p: gt.p,
        q: Quat::new(0.0, 0.0, 0.0, 0.0),
    };
    assert!(matches!(fusion_loss(&gt, &bad, 50.0), Err(Error::DegenerateQuaternion)));
}

#[test]
fn zero_weights_output_head_biases() {
    let mut net = FusionNetwork::new(cfg(CellKind::Gru, 5, 4, true, NormMode::None), 1).unwrap();
    net.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
    net.fc_p.b.data.copy_from_slice(&[1.0, 2.0, 3.0]);
    net.fc_q.b.data.copy_from_slice(&[0.0, 0.0, -2.0, 0.0]);
    let (abs, rel, _) = toy_streams(12, 4);
    for w in build_windows(&abs, &rel, 5, None).unwrap() {
        let o = fusion_forward(&net, &w).unwrap();
        assert_eq!(o.pose.p, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(o.pose.q, Quat::new(0.0, 0.0, 1.0, 0.0));
    }
}

#[test]
fn tiny_trnn_matches_hand_unroll() {
    let mut net = FusionNetwork::new(cfg(CellKind::Trnn, 2, 2, false, NormMode::None), 9).unwrap();
    let (abs, rel, _) = toy_streams(4, 5);
    let w = &build_windows(&abs, &rel, 2, None).unwrap()[1];
    net.fc_q.b.data.copy_from_slice(&[0.3, -0.1, 0.2, 0.4]);
    let o = fusion_forward(&net, w).unwrap();

    let cell = &net.stack.cells[0];
    let (wm, b) = (cell.get("W"), cell.get("b"));
    let mut h = [0.0f64; 2];
    for t in 0..2 {
        let x = w.features.row(t);
        let mut next = [0.0; 2];
        for k in 0..2 {
            let mut z = b.data[k];
            let mut g = b.data[2 + k];
            for j in 0..FEATURES {
                z += wm.at(k, j) * x[j];
                g += wm.at(2 + k, j) * x[j];
            }
            let f = 1.0 / (1.0 + (-g).exp());
            next[k] = f * h[k] + (1.0 - f) * z;
        }
        h = next;
    }
    let head = |l: &Linear, r: usize| l.b.data[r] + l.w.at(r, 0) * h[0] + l.w.at(r, 1) * h[1];
    let p = Vec3::new(head(&net.fc_p, 0), head(&net.fc_p, 1), head(&net.fc_p, 2));
    let q = Quat::new(head(&net.fc_q, 0), head(&net.fc_q, 1), head(&net.fc_q, 2), head(&net.fc_q, 3));
    assert!((o.pose.p - p).norm() < 1e-14);
    assert!(o.pose.q.angle_to(q) < 1e-7);
    let qn = q.scale(1.0 / q.norm()).canonical();
    assert!((o.pose.q.dot(qn) - 1.0).abs() < 1e-14);
}

#[test]
fn stacked_first_cell_has_fourteen_units() {
    for kind in CellKind::ALL {
        let net = FusionNetwork::new(cfg(kind, 3, 5, true, NormMode::Anchor), 0).unwrap();
        assert_eq!(net.stack.cells.len(), 2);
        assert_eq!(net.stack.cells[0].spec, CellSpec::new(kind, 14, 14).unwrap());
        assert_eq!(net.stack.cells[1].spec, CellSpec::new(kind, 14, 5).unwrap());
        assert_eq!((net.fc_p.w.rows, net.fc_p.w.cols), (3, 5));
        assert_eq!((net.fc_q.w.rows, net.fc_q.w.cols), (4, 5));
        let single = FusionNetwork::new(cfg(kind, 3, 5, false, NormMode::Anchor), 0).unwrap();
        assert_eq!(single.stack.cells.len(), 1);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[test]
fn gradients_match_finite_differences() {
    let (abs, rel, gt) = toy_streams(12, 6);
    let windows = build_windows(&abs, &rel, 3, Some(&gt)).unwrap();
    for kind in CellKind::ALL {
        for stacked in [false, true] {
            for norm in [NormMode::Anchor, NormMode::None] {
                let mut net = FusionNetwork::new(cfg(kind, 3, 3, stacked, norm), 11).unwrap();
                net.fit_normalization(&windows).unwrap();
                let w = &windows[4];
                let (_, g) = fusion_sample_grad(&net, w).unwrap();
                let analytic = g.flat();
                let eps = 1e-6;
                for idx in 0..net.num_params() {
                    let mut plus = net.clone();
                    *plus.flat_mut(idx) += eps;
                    let mut minus = net.clone();
                    *minus.flat_mut(idx) -= eps;
                    let lp = fusion_sample_grad(&plus, w).unwrap().0;
                    let lm = fusion_sample_grad(&minus, w).unwrap().0;
                    let fd = (lp - lm) / (2.0 * eps);
                    let e = rel_err(analytic[idx], fd);
                    assert!(e < 1e-4, "{kind} stacked={stacked} {norm:?} param {idx}: {} vs {fd}", analytic[idx]);
                }
            }
        }
    }
}

#[test]
fn forward_and_training_are_deterministic() {
    let (abs, rel, gt) = toy_streams(40, 7);
    let windows = build_windows(&abs, &rel, 5, Some(&gt)).unwrap();
    let train = |threads| {
        crate::par::with_threads(threads, || {
            let mut net = FusionNetwork::new(
                FusionConfig {
                    batch_size: 8,
                    ..cfg(CellKind::Lstm, 5, 4, true, NormMode::Anchor)
                },
                3,
            )
            .unwrap();
            let tc = TrainConfig {
                learning_rate: 1e-3,
                iterations: 20,
                seed: 5,
                ..TrainConfig::default()
            };
            let losses = train_fusion(&mut net, &windows, &tc).unwrap();
            (net, losses)
        })
    };
    let (a, la) = train(1);
    let (b, lb) = train(4);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let oa = fusion_forward(&a, &windows[3]).unwrap();
    let ob = fusion_forward(&a, &windows[3]).unwrap();
    assert_eq!(oa, ob);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (abs, rel, gt) = toy_streams(20, 8);
    let windows = build_windows(&abs, &rel, 4, Some(&gt)).unwrap();
    let mut net = FusionNetwork::new(cfg(CellKind::Sru, 4, 3, false, NormMode::Anchor), 2).unwrap();
    let before = net.flat();
    let tc = TrainConfig {
        learning_rate: 0.0,
        iterations: 10,
        ..TrainConfig::default()
    };
    train_fusion(&mut net, &windows, &tc).unwrap();
    assert_eq!(net.flat(), before);
    assert!(net.norm.fitted);
}

#[test]
fn overfits_a_repeated_window() {
    let (abs, rel, gt) = toy_streams(20, 9);
    let w = build_windows(&abs, &rel, 6, Some(&gt)).unwrap()[7].clone();
    let windows = vec![w; 4];
    let mut net = FusionNetwork::new(
        FusionConfig {
            batch_size: 1,
            ..cfg(CellKind::Trnn, 6, 10, true, NormMode::Anchor)
        },
        4,
    )
    .unwrap();
    net.fit_normalization(&windows).unwrap();
    let initial = fusion_sample_grad(&net, &windows[0]).unwrap().0;
    let tc = TrainConfig {
        learning_rate: 1e-3,
        iterations: 10_000,
        seed: 1,
        ..TrainConfig::default()
    };
    let losses = train_fusion(&mut net, &windows, &tc).unwrap();
    let last = *losses.last().unwrap();
    assert!(last < 1e-4 * initial, "{initial} -> {last}");
}

#[test]
fn training_rejects_bad_datasets() {
    let (abs, rel, gt) = toy_streams(20, 10);
    let mut net = FusionNetwork::new(cfg(CellKind::Gru, 4, 3, false, NormMode::Anchor), 0).unwrap();
    let tc = TrainConfig::default();
    assert!(matches!(train_fusion(&mut net, &[], &tc), Err(Error::EmptyInput)));
    let unlabeled = build_windows(&abs, &rel, 4, None).unwrap();
    assert!(train_fusion(&mut net, &unlabeled, &tc).is_err());
    let wrong = build_windows(&abs, &rel, 5, Some(&gt)).unwrap();
    assert!(matches!(train_fusion(&mut net, &wrong, &tc), Err(Error::ShapeMismatch(_))));
    assert!(fusion_forward(&net, &wrong[0]).is_err());
    assert!(FusionNetwork::new(FusionConfig { beta3: 0.0, ..FusionConfig::default() }, 0).is_err());
    assert!(FusionNetwork::new(FusionConfig { n_t: 0, ..FusionConfig::default() }, 0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (abs, rel, gt) = toy_streams(20, 11);
    let windows = build_windows(&abs, &rel, 5, Some(&gt)).unwrap();
    let mut net = FusionNetwork::new(cfg(CellKind::Qrnn, 5, 6, true, NormMode::Anchor), 6).unwrap();
    net.fit_normalization(&windows).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fusion.ckpt");
    net.save(&path).unwrap();
    let back = FusionNetwork::load(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(fusion_forward(&back, &windows[2]).unwrap(), fusion_forward(&net, &windows[2]).unwrap());
}

#[test]
fn fused_stream_keeps_length_and_passes_warmup_through() {
    let (abs, rel, _) = toy_streams(15, 12);
    let net = FusionNetwork::new(cfg(CellKind::Mgu, 4, 3, false, NormMode::Anchor), 1).unwrap();
    let fused = fuse_stream(&net, &abs, &rel).unwrap();
    assert_eq!(fused.len(), abs.len());
    assert_eq!(&fused[..3], &abs[..3]);
}

fn small_scenario(duration: f64) -> ScenarioSpec {
    ScenarioSpec {
        duration,
        ..ScenarioSpec::default()
    }
}

#[test]
fn fusion_improves_on_noisy_absolute_poses() {
    let spec = small_scenario(60.0);
    let train: Vec<_> = (0..3).map(|s| simulate_streams(&spec, 100 + s).unwrap()).collect();
    let test = simulate_streams(&spec, 999).unwrap();
    let c = FusionConfig {
        n_t: 10,
        ..FusionConfig::default()
    };
    let mut windows = Vec::new();
    for s in &train {
        windows.extend(build_windows(&s.abs, &s.rel, c.n_t, Some(&s.gt)).unwrap());
    }
    let mut net = FusionNetwork::new(c, 0).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        iterations: 1_000,
        seed: 0,
        ..TrainConfig::default()
    };
    train_fusion(&mut net, &windows, &tc).unwrap();
    let fused = fuse_stream(&net, &test.abs, &test.rel).unwrap();
    let before = median_position_error(&test.abs, &test.gt).unwrap();
    let after = median_position_error(&fused, &test.gt).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn sweep_ranks_untrained_control_last() {
    let spec = small_scenario(20.0);
    let train = vec![simulate_streams(&spec, 1).unwrap()];
    let test = vec![simulate_streams(&spec, 2).unwrap()];
    let base = FusionConfig {
        batch_size: 20,
        ..FusionConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let one = fusion_grid(&base, &[CellKind::Trnn], &[true], &[6], &[5], 300);
    let rows = sweep_fusion(&one, &train, &test, &tc);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].rank, 1);

    let mut entries = one.clone();
    entries.push(SweepEntry {
        iterations: 0,
        ..one[0].clone()
    });
    let rows = sweep_fusion(&entries, &train, &test, &tc);
    assert_eq!(rows[0].rank, 1, "{rows:?}");
    assert_eq!(rows[1].rank, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("cell,stacked,n_t,r_u,median_pos_m,median_ori_deg,rank"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn failed_runs_rank_last() {
    let ok = |pos| SweepRow {
        cell: "TRNN".into(),
        stacked: true,
        n_t: 3,
        r_u: 3,
        median_pos_m: pos,
        median_ori_deg: 1.0,
        rank: 0,
        iterations: 1,
        error: None,
    };
    let mut rows = vec![ok(f64::NAN), ok(0.3), ok(0.1), ok(0.3)];
    rank_rows(&mut rows);
    let ranks: Vec<usize> = rows.iter().map(|r| r.rank).collect();
    assert_eq!(ranks, vec![4, 2, 1, 3]);
}

#[test]
fn default_grid_covers_the_selected_configuration() {
    let g = fusion_grid(&FusionConfig::default(), &[CellKind::Trnn, CellKind::Lstm], &[false, true], &DEFAULT_N_T, &DEFAULT_R_U, 1);
    assert_eq!(g.len(), 2 * 2 * 5 * 3);
    assert!(g.iter().any(|e| e.config.cell == CellKind::Trnn && e.config.stacked && e.config.n_t == 15 && e.config.r_u == 10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn window_count_is_length_minus_n_t_plus_one(n in 1usize..40, n_t in 1usize..40) {
        let (abs, rel, _) = toy_streams(n, 13);
        let r = build_windows(&abs, &rel, n_t, None);
        if n_t <= n {
            prop_assert_eq!(r.unwrap().len(), n - n_t + 1);
        } else {
            prop_assert!(r.is_err());
        }
    }

    #[test]
    fn fused_quaternion_is_unit(seed in 0u64..1000, k in 0usize..8) {
        let (abs, rel, gt) = toy_streams(10, seed);
        let windows = build_windows(&abs, &rel, 4, Some(&gt)).unwrap();
        let mut net = FusionNetwork::new(cfg(CellKind::ALL[k], 4, 3, seed % 2 == 0, NormMode::Anchor), seed).unwrap();
        net.fit_normalization(&windows).unwrap();
        for w in &windows {
            let q = fusion_forward(&net, w).unwrap().pose.q;
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
            prop_assert!(q.w >= 0.0);
        }
    }
}
