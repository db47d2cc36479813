//! Flow losses, step rules, training loops and unrolled inference.

mod field;
mod infer;
mod loss;
mod step;
mod train;

pub use field::{Context, FnField, PairBatch, VelocityField};
pub use infer::{lft_infer, lft_trajectory, time_grid, unroll_graph, FlowBlock, UnrolledFlow};
pub use loss::{
    fm_loss, fw_loss, fw_loss_times, hybrid_loss, interpolate_linear, sorted_times, uniform_times, walk,
};
pub use step::{euler_step, midpoint_step, step, StepRule};
pub use train::{
    fit, sample_loss, train, validation_nmse, FlowConfig, InMemoryPairs, LogRow, Method, PairSource, TrainLog,
};

pub(crate) use train::validate_optimizer;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nets::{MlpConfig, Parameters, VelocityMlp};
    use crate::rng::Seeds;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight_field(batch: &PairBatch) -> impl VelocityField + '_ {
        FnField(move |_x: &Tensor, _t: &[f64]| batch.x1.sub(&batch.x0))
    }

    fn random_batch(seed: u64, rows: usize, dim: usize) -> PairBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PairBatch::new(
            Tensor::randn(&[rows, dim], 1.0, &mut rng).unwrap(),
            Tensor::randn(&[rows, dim], 1.0, &mut rng).unwrap(),
        )
        .unwrap()
    }

    fn small_mlp(seed: u64) -> VelocityMlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MlpConfig {
            hidden: vec![8, 8],
            zero_init_output: false,
        };
        VelocityMlp::new(2, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_hand_value() {
        let b = random_batch(1, 4, 3);
        let (x, _) = interpolate_linear(&b.x0, &b.x1, &[0.0; 4]).unwrap();
        assert_eq!(x.data(), b.x0.data());
        let (x, _) = interpolate_linear(&b.x0, &b.x1, &[1.0; 4]).unwrap();
        assert_eq!(x.data(), b.x1.data());

        let x0 = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        let x1 = Tensor::new(vec![2.0, 4.0], &[1, 2]).unwrap();
        let (x, v) = interpolate_linear(&x0, &x1, &[0.5]).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
        assert_eq!(v.data(), &[2.0, 4.0]);
    }

    #[test]
    fn interpolation_recovers_source() {
        let b = random_batch(2, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = uniform_times(&mut rng, 16);
        let (x, v) = interpolate_linear(&b.x0, &b.x1, &t).unwrap();
        for i in 0..16 {
            for j in 0..3 {
                let back = x.data()[i * 3 + j] - t[i] * v.data()[i * 3 + j];
                assert!((back - b.x0.data()[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_rejects_bad_input() {
        let b = random_batch(2, 2, 3);
        assert!(matches!(
            interpolate_linear(&b.x0, &b.x1, &[0.5, 1.5]),
            Err(Error::Contract(_))
        ));
        let other = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(interpolate_linear(&b.x0, &other, &[0.5, 0.5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn fm_loss_plug_in_values() {
        let b = random_batch(4, 8, 2);
        let t = [0.3; 8];
        assert_eq!(fm_loss(&straight_field(&b), &b, &t).unwrap().item().unwrap(), 0.0);
        let zero = FnField(|x: &Tensor, _: &[f64]| Tensor::zeros(x.shape()));
        let want = b.x1.sub(&b.x0).unwrap().mean_row_sq_norm().unwrap().item().unwrap();
        assert_eq!(fm_loss(&zero, &b, &t).unwrap().item().unwrap(), want);
    }

    #[test]
    fn euler_and_midpoint_basics() {
        let x = Tensor::new(vec![1.0, -2.0], &[1, 2]).unwrap();
        let c = FnField(|x: &Tensor, _: &[f64]| Tensor::full(x.shape(), 0.5));
        for rule in [StepRule::Euler, StepRule::Midpoint] {
            assert_eq!(step(&c, rule, &x, 0.4, 0.4, None).unwrap().data(), x.data());
            assert_eq!(step(&c, rule, &x, 0.0, 1.0, None).unwrap().data(), &[1.5, -1.5]);
            assert!(matches!(step(&c, rule, &x, 0.6, 0.5, None), Err(Error::Contract(_))));
        }
        let b = random_batch(5, 4, 2);
        let f = straight_field(&b);
        assert_eq!(euler_step(&f, &b.x0, 0.0, 1.0, None).unwrap().data(), b.x0.add(&b.x1.sub(&b.x0).unwrap()).unwrap().data());
    }

    #[test]
    fn midpoint_is_exact_for_fields_linear_in_time() {
        // u = a + b t integrates to x + a d + b (t'^2 - t^2) / 2
        let (a, bc) = (0.7, -1.3);
        let f = FnField(move |x: &Tensor, t: &[f64]| {
            let data = t.iter().flat_map(|t| [a + bc * t, a + bc * t]).collect();
            Tensor::new(data, x.shape())
        });
        let x = Tensor::new(vec![0.2, -0.4], &[1, 2]).unwrap();
        let (t0, t1) = (0.15, 0.85);
        let out = midpoint_step(&f, &x, t0, t1, None).unwrap();
        let shift = a * (t1 - t0) + bc * (t1 * t1 - t0 * t0) / 2.0;
        assert!((out.data()[0] - (0.2 + shift)).abs() < 1e-12);
        assert!((out.data()[1] - (-0.4 + shift)).abs() < 1e-12);
    }

    #[test]
    fn walking_with_the_straight_field_is_exact() {
        let b = random_batch(6, 8, 3);
        let f = straight_field(&b);
        for rule in [StepRule::Euler, StepRule::Midpoint] {
            for (t1, t2) in [(0.2, 0.7), (0.0, 0.0), (0.5, 0.5), (1.0, 1.0)] {
                let l = fw_loss(&f, &b, t1, t2, rule).unwrap().item().unwrap();
                assert!(l < 1e-28, "{l}");
            }
        }
    }

    #[test]
    fn degenerate_walk_equals_single_euler_step() {
        let net = small_mlp(7);
        let b = random_batch(8, 5, 2);
        let walked = walk(&net, &b, &[0.0, 0.0], StepRule::Euler).unwrap();
        let one = euler_step(&net, &b.x0, 0.0, 1.0, None).unwrap();
        assert_eq!(walked.data(), one.data());
    }

    #[test]
    fn unsorted_walk_times_are_rejected() {
        let net = small_mlp(7);
        let b = random_batch(8, 5, 2);
        assert!(matches!(fw_loss(&net, &b, 0.6, 0.2, StepRule::Midpoint), Err(Error::Contract(_))));
        assert!(matches!(fw_loss(&net, &b, 0.2, 1.2, StepRule::Midpoint), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let net = small_mlp(9);
        let b = random_batch(10, 6, 2);
        let w = net.parameters()[0].clone();
        let with = |w: &Tensor| {
            let mut n = net.clone();
            *n.parameters_mut()[0] = w.clone();
            n
        };
        let t = [0.1, 0.3, 0.5, 0.7, 0.9, 0.2];
        let fm = grad_check(|w| fm_loss(&with(w), &b, &t), &w, 1e-5).unwrap();
        assert!(fm < 1e-5, "fm {fm}");
        for rule in [StepRule::Euler, StepRule::Midpoint] {
            let fw = grad_check(|w| fw_loss(&with(w), &b, 0.25, 0.6, rule), &w, 1e-5).unwrap();
            assert!(fw < 1e-5, "fw {fw}");
        }
        let hy = grad_check(|w| hybrid_loss(&with(w), &b, 0.5, &[0.3, 0.4], &t, StepRule::Midpoint), &w, 1e-5).unwrap();
        assert!(hy < 1e-5, "hybrid {hy}");
    }

    #[test]
    fn hybrid_weighting() {
        let net = small_mlp(11);
        let b = random_batch(12, 6, 2);
        let t = [0.5; 6];
        let fw = fw_loss(&net, &b, 0.3, 0.6, StepRule::Midpoint).unwrap().item().unwrap();
        let h0 = hybrid_loss(&net, &b, 0.0, &[0.3, 0.6], &t, StepRule::Midpoint).unwrap().item().unwrap();
        assert_eq!(h0, fw);
        let fm = fm_loss(&net, &b, &t).unwrap().item().unwrap();
        let big = hybrid_loss(&net, &b, 1e6, &[0.3, 0.6], &t, StepRule::Midpoint).unwrap().item().unwrap();
        assert!((big / (1e6 * fm) - 1.0).abs() < 1e-4);
        assert!(matches!(
            hybrid_loss(&net, &b, -1.0, &[], &t, StepRule::Euler),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inference_basics() {
        let b = random_batch(13, 4, 2);
        let f = straight_field(&b);
        for k in [1, 2, 3, 7] {
            let out = lft_infer(&f, &b.x0, k, StepRule::Euler, None).unwrap();
            for (o, w) in out.data().iter().zip(b.x1.data()) {
                assert!((o - w).abs() < 1e-12);
            }
        }
        let net = small_mlp(14);
        let one = lft_infer(&net, &b.x0, 1, StepRule::Euler, None).unwrap();
        assert_eq!(one.data(), euler_step(&net, &b.x0, 0.0, 1.0, None).unwrap().data());
        assert!(matches!(lft_infer(&net, &b.x0, 0, StepRule::Euler, None), Err(Error::Contract(_))));
        assert_eq!(*time_grid(10).unwrap().last().unwrap(), 1.0);
    }

    #[test]
    fn unrolled_graph_structure_and_equivalence() {
        let net = small_mlp(15);
        let b = random_batch(16, 4, 2);
        for rule in [StepRule::Euler, StepRule::Midpoint] {
            for k in [1, 2, 3, 8] {
                let g = unroll_graph(&net, k, rule).unwrap();
                assert_eq!(g.block_count(), k);
                assert_eq!(g.estimator_calls(), k * rule.calls_per_step());
                let a = g.forward(&b.x0, None).unwrap();
                let want = lft_infer(&net, &b.x0, k, rule, None).unwrap();
                assert_eq!(a.data(), want.data());
            }
        }
    }

    #[test]
    fn time_samples_are_uniform_on_average() {
        let mut rng = Seeds::new(0).rng("test.times");
        let t = uniform_times(&mut rng, 100_000);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let s = sorted_times(&mut rng, 2);
        assert!(s[0] <= s[1]);
    }

    #[test]
    fn zero_steps_leave_parameters_untouched() {
        let mut net = small_mlp(17);
        let before = net.state_dict();
        let b = random_batch(18, 8, 2);
        let mut src = InMemoryPairs::new(b.x0.clone(), b.x1.clone()).unwrap();
        let cfg = FlowConfig {
            steps: 0,
            ..Default::default()
        };
        let log = train(&mut net, &mut src, &cfg, None).unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(net.state_dict(), before);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_tenth_step() {
        let run = || {
            let mut net = small_mlp(19);
            let b = random_batch(20, 32, 2);
            let mut src = InMemoryPairs::new(b.x0.clone(), b.x1.clone()).unwrap();
            let cfg = FlowConfig {
                steps: 25,
                batch_size: 8,
                ..Default::default()
            };
            let log = train(&mut net, &mut src, &cfg, Some(&b)).unwrap();
            (net.state_dict(), log)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
        let steps: Vec<usize> = la.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
        let mut csv = Vec::new();
        la.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,loss,val_nmse\n10,"));
    }

    #[test]
    fn divergence_is_reported_with_step_and_rate() {
        let mut net = small_mlp(21);
        let x0 = Tensor::full(&[4, 2], 1e200).unwrap();
        let x1 = Tensor::full(&[4, 2], -1e200).unwrap();
        let mut src = InMemoryPairs::new(x0, x1).unwrap();
        let cfg = FlowConfig {
            method: Method::Sfm,
            steps: 3,
            ..Default::default()
        };
        match train(&mut net, &mut src, &cfg, None) {
            Err(Error::Diverged { step, lr, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(lr, 1e-3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            FlowConfig {
                k_train: 0,
                ..Default::default()
            },
            FlowConfig {
                alpha: -0.1,
                ..Default::default()
            },
            FlowConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
