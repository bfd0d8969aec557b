//! The box chain generator against lumped site-level rates of the
//! truncated process, computed by brute force from neighbourhood sets.

use proptest::prelude::*;
use savanna::boxprocess::{box_chain_rates, lump, BoxMove, BoxTransition};
use savanna::lattice::{Boundary, Configuration, Geometry};
use savanna::RateParams;
use std::collections::BTreeMap;

/// Aggregated rate of every `(box, move)` from per-site transitions.
fn lumped_site_rates(xi: &Configuration, p: &RateParams) -> BTreeMap<BoxTransition, f64> {
    let g = xi.geometry();
    let vol = g.window_volume() as f64;
    let mut out: BTreeMap<BoxTransition, f64> = BTreeMap::new();
    let mut add = |b: usize, mv: BoxMove, r: f64| {
        if r > 0.0 {
            *out.entry(BoxTransition { box_index: b, mv }).or_default() += r;
        }
    };
    for x in 0..g.num_sites() {
        let b = g.box_of(x);
        match xi.state(x) {
            0 => {
                let n2 = g
                    .truncated_neighborhood(x)
                    .into_iter()
                    .filter(|&y| xi.state(y) == 2)
                    .count();
                add(b, BoxMove::Birth, p.beta * n2 as f64 / vol);
            }
            1 => {
                add(b, BoxMove::SaplingDeath, p.mu);
                add(b, BoxMove::Growth, p.krone_omega());
            }
            _ => add(b, BoxMove::TreeDeath, p.nu),
        }
    }
    out
}

fn discrepancies(xi: &Configuration, p: &RateParams) -> usize {
    let brute = lumped_site_rates(xi, p);
    let chain: BTreeMap<BoxTransition, f64> = box_chain_rates(&lump(xi), xi.geometry(), p)
        .into_iter()
        .collect();
    let keys: std::collections::BTreeSet<_> = brute.keys().chain(chain.keys()).collect();
    keys.into_iter()
        .filter(|k| {
            let a = brute.get(k).copied().unwrap_or(0.0);
            let b = chain.get(k).copied().unwrap_or(0.0);
            (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0)
        })
        .count()
}

fn decode(mut code: usize, n: usize) -> Vec<u8> {
    (0..n)
        .map(|_| {
            let s = (code % 3) as u8;
            code /= 3;
            s
        })
        .collect()
}

#[test]
fn exhaustive_four_site_ring() {
    let g = Geometry::relaxed(1, 3, 1.0, 0.34, 4).unwrap();
    assert_eq!(g.half_box(), 1);
    let p = RateParams::krone(3.5, 0.7, 0.4, 1.3).unwrap();
    let mut bad = 0;
    for code in 0..81 {
        let xi = Configuration::from_states(&g, decode(code, 4)).unwrap();
        bad += discrepancies(&xi, &p);
    }
    assert_eq!(bad, 0);
}

#[test]
fn configurations_with_equal_box_counts_share_rates() {
    let g = Geometry::relaxed(1, 3, 1.0, 0.34, 4).unwrap();
    let p = RateParams::krone(2.0, 0.5, 0.5, 1.0).unwrap();
    let mut by_lump: BTreeMap<Vec<(u32, u32)>, BTreeMap<BoxTransition, f64>> = BTreeMap::new();
    for code in 0..81 {
        let xi = Configuration::from_states(&g, decode(code, 4)).unwrap();
        let rates = lumped_site_rates(&xi, &p);
        let key = lump(&xi).counts;
        if let Some(prev) = by_lump.get(&key) {
            assert_eq!(
                prev.keys().collect::<Vec<_>>(),
                rates.keys().collect::<Vec<_>>()
            );
            for (k, v) in prev {
                assert!((v - rates[k]).abs() < 1e-12);
            }
        } else {
            by_lump.insert(key, rates);
        }
    }
    // 2 boxes of 2 sites: 6 count pairs each
    assert_eq!(by_lump.len(), 36);
}

proptest! {
    #[test]
    fn random_configurations_on_a_ring(states in prop::collection::vec(0u8..3, 48), beta in 0.5f64..5.0) {
        let g = Geometry::new(1, 8, 1.0, 0.2, 48, Boundary::Torus).unwrap();
        let p = RateParams::krone(beta, 0.5, 0.5, 1.0).unwrap();
        let xi = Configuration::from_states(&g, states).unwrap();
        prop_assert_eq!(discrepancies(&xi, &p), 0);
    }

    #[test]
    fn random_configurations_on_a_square(states in prop::collection::vec(0u8..3, 20 * 20)) {
        let g = Geometry::new(2, 5, 1.0, 0.2, 20, Boundary::Torus).unwrap();
        let p = RateParams::krone(2.0, 0.4, 0.6, 1.0).unwrap();
        let xi = Configuration::from_states(&g, states).unwrap();
        prop_assert_eq!(discrepancies(&xi, &p), 0);
    }
}
