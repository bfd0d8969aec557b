//! Graphical-representation coupling of the three models.

use proptest::prelude::*;
use rand::Rng;
use savanna::engine::{
    run_coupled, run_coupled_observed, run_model, CoupledState, EventRecord, EventSchedule,
    ModelKind,
};
use savanna::lattice::{Boundary, Configuration, Geometry};
use savanna::rng::sim_rng;
use savanna::stats::mean_and_se;
use savanna::{Growth, RateParams};

fn ring(range: usize, side: usize) -> Geometry {
    Geometry::new(1, range, 1.0, 0.2, side, Boundary::Torus).unwrap()
}

fn random_config(g: &Geometry, seed: u64) -> Configuration {
    let mut rng = sim_rng(seed, &[7]);
    let s = (0..g.num_sites())
        .map(|_| rng.random_range(0..3u8))
        .collect();
    Configuration::from_states(g, s).unwrap()
}

#[test]
fn order_holds_at_every_event_across_regimes() {
    let g = ring(5, 200);
    let regimes = [
        RateParams::new(2.0, 0.5, 0.5, Growth::step(1.0, 0.3, 0.2)).unwrap(),
        RateParams::new(1.2, 1.5, 1.0, Growth::step(1.0, 0.5, 0.1)).unwrap(),
        RateParams::new(4.0, 0.9, 0.3, Growth::step(2.0, 0.1, 0.5)).unwrap(),
    ];
    for (i, p) in regimes.iter().enumerate() {
        for r in 0..4u64 {
            let sched = EventSchedule::build(&g, p, 20.0, 100 * i as u64 + r).unwrap();
            let init = CoupledState::replicated(&random_config(&g, r));
            let mut bad = 0;
            let mut obs = |e: &EventRecord| {
                bad += (!(e.post[0] >= e.post[1] && e.post[1] >= e.post[2])) as usize
            };
            let run = run_coupled_observed(&sched, init, None, &mut obs).unwrap();
            assert_eq!(bad, 0);
            assert!(run.state.is_ordered());
        }
    }
}

/// The eta marginal of the coupling has the law of the directly simulated
/// Krone process: compare mean final type counts.
#[test]
fn coupled_marginal_matches_direct_simulation() {
    let g = ring(5, 80);
    let p = RateParams::new(2.0, 0.5, 0.5, Growth::step(1.0, 0.4, 0.3)).unwrap();
    let init = Configuration::uniform(&g, 2).unwrap();
    let n = 300;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in 0..n {
        let sched = EventSchedule::build(&g, &p, 3.0, 1000 + r).unwrap();
        let run = run_coupled(&sched, CoupledState::replicated(&init), None).unwrap();
        a.push(run.state.eta.type_counts()[2] as f64);
        let (_, end) = run_model(ModelKind::Krone, &p, init.clone(), 3.0, None, 5000 + r).unwrap();
        b.push(end.type_counts()[2] as f64);
    }
    let (ma, sa) = mean_and_se(&a);
    let (mb, sb) = mean_and_se(&b);
    assert!(
        (ma - mb).abs() <= 4.0 * (sa * sa + sb * sb).sqrt(),
        "{ma} vs {mb}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ordered_start_stays_ordered(seed in any::<u64>(), beta in 0.5f64..4.0, mu in 0.1f64..1.5) {
        let g = ring(5, 40);
        let p = RateParams::new(beta, mu, 0.5f64.min(mu), Growth::step(1.0, 0.3, 0.2)).unwrap();
        let mut rng = sim_rng(seed, &[1]);
        let chi: Vec<u8> = (0..g.num_sites()).map(|_| rng.random_range(0..3)).collect();
        let eta: Vec<u8> = chi.iter().map(|&c| rng.random_range(0..=c)).collect();
        let xi: Vec<u8> = eta.iter().map(|&c| rng.random_range(0..=c)).collect();
        let init = CoupledState::new(
            Configuration::from_states(&g, chi).unwrap(),
            Configuration::from_states(&g, eta).unwrap(),
            Configuration::from_states(&g, xi).unwrap(),
        ).unwrap();
        let sched = EventSchedule::build(&g, &p, 5.0, seed).unwrap();
        let run = run_coupled(&sched, init, None);
        prop_assert!(run.is_ok());
        prop_assert!(run.unwrap().state.is_ordered());
    }
}
