use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{compose, median_position_error};
use crate::geometry::stream::{PoseStream, RelativeStream};
use crate::sim::{degrade_absolute, generate_trajectory, MotionProfile, SceneSpec};

fn sim_stream(n: usize, seed: u64) -> Vec<Pose> {
    let rate = 23.0;
    generate_trajectory(&MotionProfile::handheld(), &SceneSpec::default(), n as f64 / rate, rate, seed).unwrap()
}

fn edges(poses: &[Pose]) -> Vec<RelativePose> {
    RelativeStream::from_poses(&PoseStream::uniform(poses.to_vec(), 23.0)).rel
}

#[test]
fn chunk_plan_matches_enumeration() {
    let plan = plan_chunks(250, 100, 20).unwrap();
    assert_eq!(plan.starts(), vec![0, 80, 160, 240]);
    assert_eq!(plan.ranges.last().unwrap().clone(), 240..250);
    assert_eq!(plan_chunks(50, 100, 20).unwrap().ranges, vec![0..50]);
    assert!(plan_chunks(10, 100, 100).is_err());
    assert!(plan_chunks(0, 100, 20).is_err());

    for n in 1..300 {
        for (size, overlap) in [(100, 20), (10, 0), (7, 3), (5, 4)] {
            let plan = plan_chunks(n, size, overlap).unwrap();
            let mut want = Vec::new();
            let mut s = 0;
            while s < n {
                want.push(s..(s + size).min(n));
                s += size - overlap;
            }
            assert_eq!(plan.ranges, want);
            let mut covered = vec![false; n];
            plan.ranges.iter().flat_map(|r| r.clone()).for_each(|j| covered[j] = true);
            assert!(covered.iter().all(|c| *c));
        }
    }
}

#[test]
fn blend_weights_ramp_and_sum_to_one() {
    let plan = plan_chunks(250, 100, 20).unwrap();
    let ws = plan.blend_weights(250);
    for w in &ws {
        assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // overlap of chunks 0 and 1 is [80, 100), L = 20
    for j in 80..100 {
        let alpha = (j - 80 + 1) as f64 / 21.0;
        assert_eq!(ws[j].len(), 2);
        assert!((ws[j][1].1 - alpha).abs() < 1e-12);
        assert!((ws[j][0].1 - (1.0 - alpha)).abs() < 1e-12);
    }
    assert_eq!(ws[50], vec![(0, 1.0)]);
    for (size, overlap) in [(7, 3), (5, 4), (10, 9)] {
        let plan = plan_chunks(61, size, overlap).unwrap();
        for w in plan.blend_weights(61) {
            assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|x| x.1 > 0.0));
        }
    }
}

#[test]
fn consistent_chunk_is_a_fixed_point() {
    let gt = sim_stream(60, 1);
    let res = optimize_chunk(&gt, &edges(&gt), &PgoWeights::default()).unwrap();
    for (a, b) in res.poses.iter().zip(&gt) {
        assert!((a.p - b.p).norm() < 1e-9);
        assert!(a.q.angle_to(b.q) < 1e-9);
    }
}

#[test]
fn outlier_node_is_pulled_back() {
    let gt = sim_stream(50, 2);
    let mut abs = gt.clone();
    abs[25].p += Vec3::new(0.6, -0.8, 0.0);
    let res = optimize_chunk(&abs, &edges(&gt), &PgoWeights::default()).unwrap();
    let before = (abs[25].p - gt[25].p).norm();
    let after = (res.poses[25].p - gt[25].p).norm();
    assert!(after <= 0.2 * before, "{after}");
    assert!(res.costs.windows(2).all(|c| c[1] <= c[0]));
    assert!(res.converged);
}

#[test]
fn zero_relative_weight_returns_absolute() {
    let gt = sim_stream(30, 3);
    let d = degrade_absolute(&gt, 0.2, 2.0, 0.0, 0.0, 4).unwrap();
    let w = PgoWeights {
        w_rel_p: 0.0,
        w_rel_q: 0.0,
        ..PgoWeights::default()
    };
    let res = optimize_chunk(&d.poses, &edges(&gt), &w).unwrap();
    for (a, b) in res.poses.iter().zip(&d.poses) {
        assert!((a.p - b.p).norm() < 1e-9 && a.q.angle_to(b.q) < 1e-9);
    }
}

#[test]
fn accepted_costs_never_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let gt = sim_stream(40, seed);
        let d = degrade_absolute(&gt, 0.3, 5.0, 0.1, 1.0, seed).unwrap();
        // noisy edges too, so the optimum has non-zero cost
        let rel: Vec<RelativePose> = edges(&gt)
            .into_iter()
            .map(|mut r| {
                r.dp += Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01));
                r
            })
            .collect();
        let res = optimize_chunk(&d.poses, &rel, &PgoWeights::default()).unwrap();
        assert!(res.costs.windows(2).all(|c| c[1] <= c[0]));
        assert!(res.costs.last().unwrap() < &res.costs[0]);
        assert!(res.poses.iter().all(|p| (p.q.norm() - 1.0).abs() < 1e-9));
    }
}

#[test]
fn refining_consistent_stream_is_idempotent() {
    let gt = sim_stream(250, 6);
    let plan = plan_chunks(gt.len(), 100, 20).unwrap();
    let out = refine_stream(&gt, &edges(&gt), &PgoWeights::default(), &plan).unwrap();
    for (a, b) in out.iter().zip(&gt) {
        assert!((a.p - b.p).norm() < 1e-6 && a.q.angle_to(b.q) < 1e-6);
    }
    let again = refine_stream(&out, &edges(&out), &PgoWeights::default(), &plan).unwrap();
    for (a, b) in again.iter().zip(&out) {
        assert!((a.p - b.p).norm() < 1e-6);
    }
}

#[test]
fn refinement_reduces_noisy_stream_error() {
    let gt = sim_stream(300, 7);
    let d = degrade_absolute(&gt, 0.2, 0.0, 0.0, 0.0, 8).unwrap();
    let plan = plan_chunks(gt.len(), 100, 20).unwrap();
    let out = refine_stream(&d.poses, &edges(&gt), &PgoWeights::default(), &plan).unwrap();
    let before = median_position_error(&d.poses, &gt).unwrap();
    let after = median_position_error(&out, &gt).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert!(out.iter().all(|p| (p.q.norm() - 1.0).abs() < 1e-9));
}

#[test]
fn stream_edge_cases() {
    let one = vec![Pose::IDENTITY];
    let plan = plan_chunks(1, 100, 20).unwrap();
    assert_eq!(refine_stream(&one, &[], &PgoWeights::default(), &plan).unwrap(), one);
    let gt = sim_stream(10, 9);
    let plan = plan_chunks(10, 100, 20).unwrap();
    assert!(refine_stream(&gt, &edges(&gt)[1..], &PgoWeights::default(), &plan).is_err());
    let bad = PgoWeights {
        w_abs_p: 0.0,
        ..PgoWeights::default()
    };
    assert!(refine_stream(&gt, &edges(&gt), &bad, &plan).is_err());
    assert!(PoseGraph::new(gt.clone(), edges(&gt), PgoWeights::default()).is_ok());
    assert!(PoseGraph::new(gt.clone(), vec![], PgoWeights::default()).is_err());
}

#[test]
fn refinement_is_deterministic_across_thread_counts() {
    let gt = sim_stream(260, 10);
    let d = degrade_absolute(&gt, 0.2, 1.0, 0.05, 1.0, 11).unwrap();
    let plan = plan_chunks(gt.len(), 100, 20).unwrap();
    let run = |t| crate::par::with_threads(t, || refine_stream(&d.poses, &edges(&gt), &PgoWeights::default(), &plan).unwrap());
    assert_eq!(run(1), run(4));
}

#[test]
fn edges_recompose_ground_truth() {
    let gt = sim_stream(40, 12);
    let rel = edges(&gt);
    let mut x = gt[0];
    for (r, g) in rel.iter().zip(&gt[1..]) {
        x = compose(&x, r);
        assert!((x.p - g.p).norm() < 1e-9);
    }
}
