use proptest::prelude::*;

use qatlab::jacobian::Estimator;
use qatlab::objectives::{linear_regression, logistic_regression, make_pl_instance, mlp_regression, Objective};
use qatlab::quant::{BitsMode, QuantSpec, Quantizer};
use qatlab::trainer::{self, JacMode, Refresh, TrainConfig};
use qatlab::vrgrad::SurrogateProblem;
use qatlab::{ProbeConfig, ProbeScale, SurrogateJacobian, VrMode, VrState};

fn objective(kind: u8, seed: u64) -> Objective {
    match kind % 4 {
        0 => linear_regression(12, 5, 0.3, seed).unwrap().0,
        1 => logistic_regression(12, 5, seed).unwrap().0,
        2 => mlp_regression(12, 3, 4, seed).unwrap().0,
        _ => make_pl_instance(5, 0.1, 1.0, seed).unwrap(),
    }
}

fn point(dim: usize, seed: u64, scale: f64) -> Vec<f64> {
    (0..dim).map(|j| scale * ((seed.wrapping_mul(31).wrapping_add(j as u64 * 17) % 97) as f64 / 48.5 - 1.0)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_gradient_matches_central_differences(kind in 0u8..4, seed in 0u64..1000, i in 0usize..5) {
        let obj = objective(kind, seed);
        let q = point(obj.dim(), seed, 0.8);
        let i = i % obj.n_samples();
        let (_, v) = obj.per_sample_grad(&q, i).unwrap();
        let eps = 1e-6;
        let fd: Vec<f64> = (0..q.len())
            .map(|j| {
                let (mut up, mut dn) = (q.clone(), q.clone());
                up[j] += eps;
                dn[j] -= eps;
                (obj.per_sample_loss(&up, i).unwrap() - obj.per_sample_loss(&dn, i).unwrap()) / (2.0 * eps)
            })
            .collect();
        let err: Vec<f64> = v.iter().zip(&fd).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&err) <= 1e-5 * norm(&fd).max(1e-3), "{v:?} vs {fd:?}");
    }

    #[test]
    fn losses_are_nonnegative(kind in 0u8..3, seed in 0u64..1000, scale in 0.0f64..5.0) {
        let obj = objective(kind, seed);
        let q = point(obj.dim(), seed, scale);
        for i in 0..obj.n_samples() {
            prop_assert!(obj.per_sample_loss(&q, i).unwrap() >= 0.0);
        }
    }

    #[test]
    fn batch_grad_is_size_weighted_average(kind in 0u8..3, seed in 0u64..1000, split in 1usize..11) {
        let obj = objective(kind, seed);
        let n = obj.n_samples();
        let split = split.min(n - 1);
        let q = point(obj.dim(), seed, 0.5);
        let all: Vec<usize> = (0..n).collect();
        let (_, g) = obj.batch_grad(&q, &all).unwrap();
        let (_, a) = obj.batch_grad(&q, &all[..split]).unwrap();
        let (_, b) = obj.batch_grad(&q, &all[split..]).unwrap();
        for j in 0..g.len() {
            let mix = (split as f64 * a[j] + (n - split) as f64 * b[j]) / n as f64;
            prop_assert!((g[j] - mix).abs() <= 1e-12 * (1.0 + g[j].abs()));
        }
    }

    #[test]
    fn gains_stay_in_clip_range(
        seed in 0u64..500,
        lo in 0.0f64..0.5,
        width in 0.0f64..1.0,
        est in 0usize..3,
        scale in 0.1f64..4.0,
    ) {
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::W2, 1.0, 4).unwrap(), 12).unwrap();
        let w = point(12, seed, scale);
        let mut jac = SurrogateJacobian::from_gains(vec![1.0; 3], 0.7, lo, lo + width).unwrap();
        let cfg = ProbeConfig { sigma: ProbeScale::StepFraction(0.5), num_probes: 4, seed_tag: seed };
        let est = [Estimator::Probe, Estimator::ProbeLeastSquares, Estimator::Dither][est];
        for key in 0..5 {
            jac.update(&q, &w, &cfg, key, est).unwrap();
            for &b in &jac.gains {
                prop_assert!(b >= lo - 1e-12 && b <= lo + width + 1e-12, "gain {b}");
            }
        }
    }

    #[test]
    fn apply_is_bounded_by_clip_hi(gains in proptest::collection::vec(0.0f64..1.0, 3), v in proptest::collection::vec(-10.0f64..10.0, 12)) {
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::W2, 1.0, 4).unwrap(), 12).unwrap();
        let jac = SurrogateJacobian::from_gains(gains, 0.5, 0.0, 1.0).unwrap();
        let out = jac.apply(&v, &q.layout).unwrap();
        prop_assert!(norm(&out) <= jac.clip_hi * norm(&v) + 1e-12);
    }

    #[test]
    fn saga_mean_tracks_table(seed in 0u64..500, steps in 1usize..20) {
        let (obj, _) = linear_regression(10, 6, 0.2, seed).unwrap();
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 0.25, 3).unwrap(), 6).unwrap();
        let problem = SurrogateProblem::new(&obj, &q).unwrap();
        let gains = SurrogateJacobian::from_gains(vec![0.8, 0.6], 0.5, 0.0, 1.0).unwrap();
        let mut w = point(6, seed, 0.7);
        let mut state = VrState::init(VrMode::Saga, &problem, &w, &gains, &problem.all_indices()).unwrap();
        for t in 0..steps {
            let batch = vec![(seed as usize + 3 * t) % 10, (seed as usize + 3 * t + 1) % 10];
            let g = state.grad_est(&problem, &w, &gains, &batch).unwrap();
            state.ctrl_update(&problem, &w, &gains, &batch, &g).unwrap();
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= 0.1 * b);
            let table = state.saga.as_ref().unwrap();
            let fresh = table.recomputed_mean();
            for (a, b) in table.mean.iter().zip(&fresh) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn svrg_at_anchor_returns_reference(seed in 0u64..500, i in 0usize..10, j in 0usize..10) {
        let (obj, _) = linear_regression(10, 6, 0.2, seed).unwrap();
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 0.25, 3).unwrap(), 6).unwrap();
        let problem = SurrogateProblem::new(&obj, &q).unwrap();
        let gains = SurrogateJacobian::from_gains(vec![0.9, 0.4], 0.5, 0.0, 1.0).unwrap();
        let w = point(6, seed, 0.7);
        let state = VrState::init(VrMode::Svrg, &problem, &w, &gains, &problem.all_indices()).unwrap();
        let g = state.grad_est(&problem, &w, &gains, &[i, j]).unwrap();
        prop_assert_eq!(g, state.anchor_grad.clone());
    }

    #[test]
    fn quantizer_and_dither_are_deterministic(seed in 0u64..1000, scale in 0.1f64..3.0) {
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::W1_58, 0.5, 4).unwrap(), 16).unwrap();
        let w = point(16, seed, scale);
        prop_assert_eq!(q.quantize(&w).unwrap(), q.quantize(&w).unwrap());
        let m1 = q.mean_field(&w, 50, seed).unwrap();
        let m2 = q.mean_field(&w, 50, seed).unwrap();
        prop_assert_eq!(m1, m2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn interval_refreshes_land_on_multiples(k in 1usize..12, steps in 1usize..60, seed in 0u64..100) {
        let (obj, _) = linear_regression(16, 4, 0.1, seed).unwrap();
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 0.25, 2).unwrap(), 4).unwrap();
        let cfg = TrainConfig {
            steps,
            stepsize: 0.05,
            batch_size: 4,
            refresh: Refresh::Interval(k),
            jac_mode: JacMode::Probe,
            seed,
            ..Default::default()
        };
        let out = trainer::train_vr(&obj, &[0.1, -0.2, 0.3, 0.0], &q, &cfg).unwrap();
        prop_assert_eq!(out.refresh_count(), steps / k);
        for r in &out.trace {
            prop_assert_eq!(r.refresh_flag, r.step % k == 0);
        }
    }
}
