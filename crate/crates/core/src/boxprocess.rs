//! Coarse-grained chain on small-box counts.
//!
//! For the truncated process every site of a small box sees the same
//! neighbourhood, so the per-box counts `(n1, n2)` form a Markov chain:
//!
//! | move | rate |
//! |---|---|
//! | `(n1-1, n2)` | `mu n1` |
//! | `(n1, n2-1)` | `nu n2` |
//! | `(n1-1, n2+1)` | `omega n1` |
//! | `(n1+1, n2)` | `n0 * beta * sum_{y in N(b)} n2(y) / (2L+1)^d` |
//!
//! with `n0 = |B^_0| - n1 - n2` and `omega` the constant (Krone) growth rate.

use crate::lattice::{Configuration, Geometry};
use crate::params::RateParams;
use crate::rng::{exp_sample, sim_rng};
use crate::sumtree::SumTree;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoxMove {
    SaplingDeath,
    TreeDeath,
    Growth,
    Birth,
}

impl BoxMove {
    pub const ALL: [BoxMove; 4] = [
        BoxMove::SaplingDeath,
        BoxMove::TreeDeath,
        BoxMove::Growth,
        BoxMove::Birth,
    ];

    /// Change in `(n1, n2)`.
    pub fn delta(self) -> (i32, i32) {
        match self {
            BoxMove::SaplingDeath => (-1, 0),
            BoxMove::TreeDeath => (0, -1),
            BoxMove::Growth => (-1, 1),
            BoxMove::Birth => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoxTransition {
    pub box_index: usize,
    pub mv: BoxMove,
}

/// Per-box `(n1, n2)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxChainState {
    pub counts: Vec<(u32, u32)>,
    pub capacity: u32,
}

impl BoxChainState {
    pub fn empty(g: &Geometry) -> Self {
        BoxChainState {
            counts: vec![(0, 0); g.num_boxes()],
            capacity: g.box_capacity() as u32,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.counts.iter().all(|&(a, b)| a + b <= self.capacity)
    }

    pub fn totals(&self) -> (u64, u64) {
        self.counts
            .iter()
            .fold((0, 0), |(a, b), &(x, y)| (a + x as u64, b + y as u64))
    }

    pub fn apply(&mut self, t: BoxTransition) {
        let (d1, d2) = t.mv.delta();
        let c = &mut self.counts[t.box_index];
        c.0 = c.0.checked_add_signed(d1).expect("n1 underflow");
        c.1 = c.1.checked_add_signed(d2).expect("n2 underflow");
        debug_assert!(c.0 + c.1 <= self.capacity);
    }

    /// State under the box reflection `b -> -b`.
    pub fn reflected(&self, g: &Geometry) -> Self {
        let mut out = self.clone();
        for b in 0..self.counts.len() {
            out.counts[g.reflect_box(b)] = self.counts[b];
        }
        out
    }
}

/// Per-box counts of a configuration.
pub fn lump(xi: &Configuration) -> BoxChainState {
    BoxChainState {
        counts: xi.all_box_counts(),
        capacity: xi.geometry().box_capacity() as u32,
    }
}

fn birth_rate(n0: u32, nbhd_n2: u64, g: &Geometry, p: &RateParams) -> f64 {
    n0 as f64 * p.beta * nbhd_n2 as f64 / g.window_volume() as f64
}

fn box_rates(z: &BoxChainState, b: usize, nbhd_n2: u64, g: &Geometry, p: &RateParams) -> [f64; 4] {
    let (n1, n2) = z.counts[b];
    let n0 = z.capacity - n1 - n2;
    [
        p.mu * n1 as f64,
        p.nu * n2 as f64,
        p.krone_omega() * n1 as f64,
        birth_rate(n0, nbhd_n2, g, p),
    ]
}

fn neighborhood_n2(z: &BoxChainState, g: &Geometry, b: usize) -> u64 {
    let mut s = 0u64;
    g.for_each_neighbor_box(b, |c| s += z.counts[c].1 as u64);
    s
}

/// Every transition with positive rate.
pub fn box_chain_rates(
    z: &BoxChainState,
    g: &Geometry,
    p: &RateParams,
) -> Vec<(BoxTransition, f64)> {
    let mut out = Vec::new();
    for b in 0..z.counts.len() {
        let r = box_rates(z, b, neighborhood_n2(z, g, b), g, p);
        for (mv, rate) in BoxMove::ALL.into_iter().zip(r) {
            if rate > 0.0 {
                out.push((BoxTransition { box_index: b, mv }, rate));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoxTrajectory {
    pub times: Vec<f64>,
    /// `(sum n1, sum n2)` at each sampling time.
    pub totals: Vec<(u64, u64)>,
    pub jumps: u64,
}

/// Exact simulation of the box chain up to `horizon`. Returns the sampled
/// totals and the final state.
pub fn simulate_box_chain(
    z0: &BoxChainState,
    g: &Geometry,
    p: &RateParams,
    horizon: f64,
    sample_dt: f64,
    seed: u64,
) -> (BoxTrajectory, BoxChainState) {
    let mut z = z0.clone();
    let nb = z.counts.len();
    let mut nbhd: Vec<u64> = (0..nb).map(|b| neighborhood_n2(&z, g, b)).collect();
    let weights: Vec<f64> = (0..nb)
        .map(|b| box_rates(&z, b, nbhd[b], g, p).iter().sum())
        .collect();
    let mut tree = SumTree::from_weights(&weights);
    let mut rng = sim_rng(seed, &[0xB0C5]);
    let mut traj = BoxTrajectory::default();
    let n_samples = if sample_dt > 0.0 {
        (horizon / sample_dt + 1e-9).floor() as usize + 1
    } else {
        0
    };
    let mut next = 0usize;
    let mut t = 0.0;
    loop {
        let total = tree.total();
        let t_next = t + exp_sample(&mut rng, total);
        while next < n_samples && (next as f64 * sample_dt) < t_next {
            traj.times.push(next as f64 * sample_dt);
            traj.totals.push(z.totals());
            next += 1;
        }
        if t_next > horizon {
            break;
        }
        t = t_next;
        let b = tree.find(rng.random::<f64>() * total);
        let r = box_rates(&z, b, nbhd[b], g, p);
        let mut u = rng.random::<f64>() * r.iter().sum::<f64>();
        // the last positive rate absorbs any rounding overshoot
        let last = (0..4).rev().find(|&k| r[k] > 0.0).unwrap();
        let mut k = 0;
        while k < last && (r[k] <= 0.0 || u >= r[k]) {
            u -= r[k];
            k += 1;
        }
        let mv = BoxMove::ALL[k];
        z.apply(BoxTransition { box_index: b, mv });
        traj.jumps += 1;
        let d2 = mv.delta().1;
        if d2 != 0 {
            for c in g.neighbor_boxes(b) {
                nbhd[c] = nbhd[c].checked_add_signed(d2 as i64).unwrap();
                tree.set(c, box_rates(&z, c, nbhd[c], g, p).iter().sum());
            }
        }
        tree.set(b, box_rates(&z, b, nbhd[b], g, p).iter().sum());
    }
    (traj, z)
}
