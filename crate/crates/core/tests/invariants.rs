use approx::assert_relative_eq;
use ghostlab::losses::{lp_loss, Balance, Balancer};
use ghostlab::ot::{wasserstein_exact, DiscretePdf};
use ghostlab::synth::{apply_ghost, GhostParams};
use ghostlab::Image;
use proptest::prelude::*;

fn pdf_strategy(dim: usize) -> impl Strategy<Value = DiscretePdf> {
    prop::collection::vec((prop::collection::vec(-3.0f64..3.0, dim), 0.05f64..1.0), 1..5).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        DiscretePdf::new(
            atoms.iter().map(|a| a.0.clone()).collect(),
            atoms.iter().map(|a| a.1 / total).collect(),
        )
        .unwrap()
    })
}

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Image::new(vec![1, h, w], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wasserstein_is_a_metric(a in pdf_strategy(2), b in pdf_strategy(2), c in pdf_strategy(2), p in 1.0f64..3.0) {
        let d = |x: &DiscretePdf, y: &DiscretePdf| wasserstein_exact(x, y, p, 1.0).unwrap().0;
        let (ab, ba) = (d(&a, &b), d(&b, &a));
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(d(&a, &a) <= 1e-9);
        prop_assert!(ab <= d(&a, &c) + d(&c, &b) + 1e-9);
    }

    #[test]
    fn coupling_has_the_given_marginals(a in pdf_strategy(1), b in pdf_strategy(1), r in 1.0f64..3.0) {
        let (_, plan) = wasserstein_exact(&a, &b, 2.0, r).unwrap();
        for (row, w) in plan.pi.iter().zip(&a.weights) {
            prop_assert!(row.iter().all(|&v| v >= -1e-12));
            prop_assert!((row.iter().sum::<f64>() - w).abs() < 1e-9);
        }
        for (k, w) in b.weights.iter().enumerate() {
            prop_assert!((plan.pi.iter().map(|row| row[k]).sum::<f64>() - w).abs() < 1e-9);
        }
    }

    #[test]
    fn lp_loss_is_a_power_sum(a in image_strategy(4, 5), b in image_strategy(4, 5), p in 1.0f64..3.0) {
        let v = lp_loss(&a, &b, p, None).unwrap();
        let direct: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs().powf(p)).sum();
        prop_assert!(v >= 0.0);
        assert_relative_eq!(v, direct, max_relative = 1e-12);
        assert_relative_eq!(v, lp_loss(&b, &a, p, None).unwrap(), max_relative = 1e-12);
        prop_assert_eq!(lp_loss(&a, &a, p, None).unwrap(), 0.0);
    }

    #[test]
    fn ghost_estimate_explains_the_input(y in image_strategy(16, 3), delay in 1usize..4, rho in -1.0f64..1.0) {
        prop_assume!(rho.abs() > 0.05);
        prop_assume!(y.data()[..(16 - delay) * 3].iter().any(|v| v.abs() > 0.1));
        let x = apply_ghost(&y, delay, rho).unwrap();
        let g: GhostParams = GhostParams::estimate(&x, &y).expect("a delay explains the pair");
        let rebuilt = apply_ghost(&y, g.delay, g.coefficient).unwrap();
        for (u, v) in rebuilt.data().iter().zip(x.data()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_balance_matches_average_ratio(
        terms in prop::collection::vec((0.01f64..100.0, 0.01f64..100.0), 1..20),
        decay in 0.0f64..0.99,
    ) {
        let mut b = Balancer::new(Balance::Equal, decay);
        for (lp, adv) in &terms {
            b.update(*lp, -*adv);
        }
        let (lp, adv) = (b.ema_lp.unwrap(), b.ema_adv.unwrap());
        prop_assert!(lp > 0.0 && adv > 0.0);
        assert_relative_eq!(b.lambda() * adv, lp, max_relative = 1e-6);
        let fixed = {
            let mut f = Balancer::new(Balance::Fixed(0.3), decay);
            for (lp, adv) in &terms {
                f.update(*lp, *adv);
            }
            f.lambda()
        };
        prop_assert_eq!(fixed, 0.3);
    }
}
