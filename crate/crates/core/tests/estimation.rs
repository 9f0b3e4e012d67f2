use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use spillsel::estimate::{estimate_effect, fit_sc, fit_sc_with_lambda};
use spillsel::regression::SparsePriorConfig;
use spillsel::rng::rng_from_seed;
use spillsel::simulate::{simulate, SimConfig};
use spillsel::Panel;

/// 200 random-walk donors over 100 pre and 10 post points; the target
/// loads on the first 10 with weights between 0.5 and 1.5.
fn sparse_panel(seed: u64) -> (Panel, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let (n, t, pre) = (200, 110, 100);
    let donors: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v = 0.0;
            (0..t)
                .map(|_| {
                    v += rng.sample::<f64, _>(StandardNormal);
                    v
                })
                .collect()
        })
        .collect();
    let w: Vec<f64> = (0..10).map(|_| rng.random_range(0.5..1.5)).collect();
    let y: Vec<f64> = (0..t)
        .map(|k| {
            let e: f64 = rng.sample(StandardNormal);
            w.iter().enumerate().map(|(j, b)| b * donors[j][k]).sum::<f64>() + 0.01 * e
        })
        .collect();
    let ids = (0..n).map(|i| format!("d{i}")).collect();
    (Panel::new((0..t as i64).collect(), "y", y, ids, donors, pre).unwrap(), w)
}

#[test]
fn sparse_fit_finds_the_loading_donors() {
    let (panel, _) = sparse_panel(5);
    let sc = fit_sc(&panel, panel.donor_ids(), Some(&SparsePriorConfig::default())).unwrap();
    let b = &sc.fit.coefficients;
    let max = sc.max_abs_weight();
    let hits = b[..10].iter().filter(|v| v.abs() > 0.1 * max).count();
    let stray = b[10..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(hits >= 9, "{hits} of 10 loading donors recovered");
    assert!(stray < 0.05 * max, "largest stray weight {stray} against {max}");
}

fn sim_panel(seed: u64) -> Panel {
    simulate(&SimConfig {
        n_donors: 12,
        n_latents: 3,
        t_pre: 30,
        t_post: 6,
        seed,
        ..Default::default()
    })
    .unwrap()
    .panel
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn post_shift_moves_tau_hat_by_the_shift(seed in 0u64..5_000, c in -10.0f64..10.0) {
        let panel = sim_panel(seed);
        let ids = panel.donor_ids()[..5].to_vec();
        let sc = fit_sc(&panel, &ids, None).unwrap();
        let base = estimate_effect(&panel, &sc).unwrap().tau_hat;
        let t = panel.intervention_index();
        let mut y = panel.target().to_vec();
        for v in &mut y[t..] {
            *v += c;
        }
        let shifted = panel.with_target(y).unwrap();
        let sc2 = fit_sc(&shifted, &ids, None).unwrap();
        let moved = estimate_effect(&shifted, &sc2).unwrap().tau_hat;
        prop_assert!((moved - base - c).abs() < 1e-9);
    }

    #[test]
    fn donor_order_does_not_matter(seed in 0u64..5_000, rot in 1usize..6) {
        let panel = sim_panel(seed);
        let ids = panel.donor_ids()[..6].to_vec();
        let mut rotated = ids.clone();
        rotated.rotate_left(rot);
        let a = fit_sc_with_lambda(&panel, &ids, None, 1e-6).unwrap();
        let b = fit_sc_with_lambda(&panel, &rotated, None, 1e-6).unwrap();
        for (j, id) in ids.iter().enumerate() {
            let k = rotated.iter().position(|r| r == id).unwrap();
            prop_assert!((a.fit.coefficients[j] - b.fit.coefficients[k]).abs() < 1e-8);
        }
        let ta = estimate_effect(&panel, &a).unwrap().tau_hat;
        let tb = estimate_effect(&panel, &b).unwrap().tau_hat;
        prop_assert!((ta - tb).abs() < 1e-8);
    }
}
