//! Executable forms of the survival and extinction estimates.
//!
//! * [`recovery_constants`] picks `theta`, `a0`, `rho`, `eps0`, `t0`.
//! * [`q_functional`] and [`infinitesimal_mean_q`] evaluate
//!   `Q(xi) = lambda^d sum_x e^{-lambda |x|} w[xi(x)]` and its drift.
//! * [`extinction_functionals`] evaluates `S(eta)`, `Q'(eta)` and their drifts.
//! * [`estimate_recovery_time`], [`simulate_brw_max`],
//!   [`moving_particle_trial`] and [`dynkin_residuals`] are Monte Carlo
//!   estimators used against the corresponding bounds.
//!
//! `|x|` is always the sup norm of the torus-centred coordinates.

use crate::engine::{apply_mark, EngineError, EventSchedule, GillespieSim, MarkKind, ModelKind};
use crate::lattice::{Configuration, Geometry, LatticeError, MAX_DIM};
use crate::meanfield::survival_condition;
use crate::params::{ParamError, RateParams};
use crate::rng::{derive_seed, exp_sample, sim_rng};
use crate::stats::{
    binomial_pmf, chi_square_gof, histogram, mean_and_se, wilson_interval, GofResult,
};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("no feasible recovery constants: {0}")]
    NoFeasibleConstants(String),
    #[error("extinction precondition fails: mu nu = {lhs} < omega (beta - nu) = {rhs}")]
    NotExtinctionRegime { lhs: f64, rhs: f64 },
    #[error("lambda' = {lambda} too large: beta e^(lambda' L) = {lhs} > theta' nu = {rhs}")]
    LambdaTooLarge { lambda: f64, lhs: f64, rhs: f64 },
    #[error("population exceeded cap {cap} at t = {time}")]
    PopulationExplosion { cap: usize, time: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `int_{R^d} e^{-|z|_inf} dz = 2^d d!`.
pub fn sup_norm_integral(d: usize) -> f64 {
    (1..=d).fold(1.0, |acc, k| acc * 2.0 * k as f64)
}

fn weight(cfg: &Configuration, x: usize, lambda: f64) -> f64 {
    (-lambda * cfg.geometry().sup_norm(x) as f64).exp()
}

// ---------------------------------------------------------------- constants

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConstants {
    pub d: usize,
    pub omega: f64,
    pub theta: f64,
    pub a0: f64,
    pub rho: f64,
    pub eps0: f64,
    pub t0: f64,
    pub alpha: f64,
    /// Number of times `a0` was halved from its initial value.
    pub halvings: u32,
}

impl RecoveryConstants {
    /// `lambda = a0 / (2L)`.
    pub fn lambda(&self, range: usize) -> f64 {
        self.a0 / (2.0 * range as f64)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Every defining inequality, evaluated for `p`.
    pub fn invariants_hold(&self, p: &RateParams) -> bool {
        let w = self.omega;
        let upper = if p.nu > 0.0 {
            p.beta / p.nu
        } else {
            f64::INFINITY
        };
        (p.mu + w) / w < self.theta
            && self.theta < upper
            && self.theta * w - (w + p.mu) >= self.rho
            && p.beta * (1.0 - 4.0 * self.a0) - self.theta * p.nu >= self.theta * self.rho
            && (1.0 - 4.0 * self.eps0).powi(self.d as i32) > 1.0 - 2.0 * self.a0
            && self.alpha > self.d as f64 / 2.0
            && self.alpha < self.d as f64
    }
}

/// Constants of the recovery estimate for the truncated Krone process.
/// `theta` is the midpoint of `((mu + omega)/omega, beta/nu)` (twice the
/// lower end when `nu = 0`); `a0` is halved from `a0_init` until
/// `rho = min(theta omega - (omega + mu), (beta (1 - 4 a0) - theta nu)/theta)`
/// is positive.
pub fn recovery_constants(
    p: &RateParams,
    d: usize,
    a0_init: f64,
) -> Result<RecoveryConstants, DiagError> {
    let w = p.krone_omega();
    if d == 0 || d > MAX_DIM {
        return Err(DiagError::Invalid(format!("dimension {d}")));
    }
    if !(a0_init > 0.0 && a0_init < 1.0) {
        return Err(DiagError::Invalid(format!(
            "a0_init = {a0_init} not in (0, 1)"
        )));
    }
    if w <= 0.0 || !survival_condition(p, w) {
        return Err(DiagError::NoFeasibleConstants(format!(
            "mu nu = {} >= omega (beta - nu) = {}",
            p.mu * p.nu,
            w * (p.beta - p.nu)
        )));
    }
    let lo = (p.mu + w) / w;
    let theta = if p.nu > 0.0 {
        0.5 * (lo + p.beta / p.nu)
    } else {
        2.0 * lo
    };
    let mut a0 = a0_init;
    for halvings in 0..=40u32 {
        let rho = (theta * w - (w + p.mu)).min((p.beta * (1.0 - 4.0 * a0) - theta * p.nu) / theta);
        if rho > 0.0 {
            let eps0 = (1.0 - (1.0 - a0).powf(1.0 / d as f64)) / 4.0;
            let rc = RecoveryConstants {
                d,
                omega: w,
                theta,
                a0,
                rho: rho.min(1.0),
                eps0,
                t0: 2.0 * d as f64 / rho.min(1.0),
                alpha: 0.75 * d as f64,
                halvings,
            };
            return Ok(rc);
        }
        a0 /= 2.0;
    }
    Err(DiagError::NoFeasibleConstants(format!(
        "rho stayed nonpositive after 40 halvings of a0 = {a0_init}"
    )))
}

// ------------------------------------------------------------ Q functionals

/// Weights `w(0) = 0`, `w(1) = 1`, `w(2) = two`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub two: f64,
}

impl WeightSpec {
    pub fn survival(rc: &RecoveryConstants) -> Self {
        WeightSpec { two: rc.theta }
    }
    pub fn extinction(theta_prime: f64) -> Self {
        WeightSpec { two: theta_prime }
    }
    #[inline]
    pub fn of(&self, state: u8) -> f64 {
        match state {
            0 => 0.0,
            1 => 1.0,
            _ => self.two,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prefactor {
    LambdaPowD,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QValue {
    pub value: f64,
    /// `max(w) e^{lambda/2} 2^d d!`, scaled to the prefactor.
    pub bound: f64,
    pub within_bound: bool,
}

pub fn q_functional(
    xi: &Configuration,
    lambda: f64,
    weights: WeightSpec,
    prefactor: Prefactor,
) -> QValue {
    let d = xi.geometry().dim() as i32;
    let mut s = 0.0;
    for (x, &v) in xi.states().iter().enumerate() {
        if v != 0 {
            s += weight(xi, x, lambda) * weights.of(v);
        }
    }
    let scale = match prefactor {
        Prefactor::LambdaPowD => lambda.powi(d),
        Prefactor::One => 1.0,
    };
    let value = scale * s;
    let u = (lambda / 2.0).exp() * sup_norm_integral(d as usize);
    let bound = weights.two.max(1.0) * u * scale / lambda.powi(d);
    QValue {
        value,
        bound,
        within_bound: value <= bound,
    }
}

fn drift_sum(
    xi: &Configuration,
    rc: &RecoveryConstants,
    p: &RateParams,
    n2: impl Fn(usize) -> u32,
) -> f64 {
    let g = xi.geometry();
    let lambda = rc.lambda(g.range());
    let vol = g.window_volume() as f64;
    let c1 = (rc.theta - 1.0) * rc.omega - p.mu;
    let c2 = rc.theta * p.nu;
    let mut s = 0.0;
    for (x, &v) in xi.states().iter().enumerate() {
        let e = weight(xi, x, lambda);
        match v {
            0 => {
                let k = n2(x);
                if k > 0 {
                    s += p.beta * k as f64 / vol * e;
                }
            }
            1 => s += c1 * e,
            _ => s -= c2 * e,
        }
    }
    lambda.powi(g.dim() as i32) * s
}

/// Drift `mu(xi)` of `Q` under the truncated process, from the maintained
/// truncated-neighbourhood counts.
pub fn infinitesimal_mean_q(xi: &Configuration, rc: &RecoveryConstants, p: &RateParams) -> f64 {
    drift_sum(xi, rc, p, |x| xi.truncated_n2(x))
}

/// [`infinitesimal_mean_q`] with every neighbourhood count taken by direct
/// enumeration of the truncated neighbourhood.
pub fn infinitesimal_mean_q_slow(
    xi: &Configuration,
    rc: &RecoveryConstants,
    p: &RateParams,
) -> f64 {
    let g = xi.geometry();
    drift_sum(xi, rc, p, |x| {
        g.truncated_neighborhood(x)
            .into_iter()
            .filter(|&y| xi.state(y) == 2)
            .count() as u32
    })
}

/// Largest fraction of nonzero sites over all windows `x + [-r, r]^d`.
pub fn max_window_density(cfg: &Configuration, r: usize) -> f64 {
    let g = cfg.geometry();
    let vol = (2 * r + 1).pow(g.dim() as u32) as f64;
    (0..g.num_sites())
        .map(|x| vol - cfg.slow_count(x, 0, r) as f64)
        .fold(0.0, f64::max)
        / vol
}

/// Largest `(n1 + n2) / |B^_0|` over small boxes.
pub fn max_box_density(cfg: &Configuration) -> f64 {
    let cap = cfg.geometry().box_capacity() as f64;
    cfg.all_box_counts()
        .iter()
        .map(|&(a, b)| (a + b) as f64)
        .fold(0.0, f64::max)
        / cap
}

/// Random configuration in which every window `x + [-L, L]^d` holds at most
/// `floor(a0 (2L+1)^d)` nonzero sites. A random fraction of the sites is
/// proposed in random order, each kept (as a 1 or a 2 with equal
/// probability) while every window containing it stays within the limit.
pub fn random_low_density<R: Rng>(g: &Geometry, a0: f64, rng: &mut R) -> Configuration {
    let limit = (a0 * g.window_volume() as f64).floor() as u32;
    let n = g.num_sites();
    let mut load = vec![0u32; n];
    let mut states = vec![0u8; n];
    let proposals = (rng.random::<f64>() * n as f64).round() as usize;
    for y in sample(rng, n, proposals) {
        let mut ok = true;
        g.for_each_in_window(y, g.range(), |x| ok &= load[x] < limit);
        if ok {
            g.for_each_in_window(y, g.range(), |x| load[x] += 1);
            states[y] = rng.random_range(1..=2);
        }
    }
    Configuration::from_states(g, states).expect("states are 0, 1, 2")
}

/// `(mu(xi), rho Q(xi))`.
pub fn recovery_drift_check(
    xi: &Configuration,
    rc: &RecoveryConstants,
    p: &RateParams,
) -> (f64, f64) {
    let lambda = rc.lambda(xi.geometry().range());
    let q = q_functional(xi, lambda, WeightSpec::survival(rc), Prefactor::LambdaPowD).value;
    (infinitesimal_mean_q(xi, rc, p), rc.rho * q)
}

// ------------------------------------------------------ extinction functionals

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionReport {
    pub theta_prime: f64,
    pub s_value: f64,
    /// Exact drift of `S` under the Krone process.
    pub mu_s: f64,
    pub q_prime: f64,
    /// Exact drift of `Q'`.
    pub mu_q_prime: f64,
    /// `sum_1 c_one e + sum_2 c_two e`, an upper bound for `mu_q_prime`.
    pub mu_q_prime_bound: f64,
    /// `(theta' - 1) omega - mu`.
    pub coeff_one: f64,
    /// `beta e^{lambda' L} - theta' nu`.
    pub coeff_two: f64,
}

/// Midpoint of `[beta/nu, (mu + omega)/omega]`; requires
/// `mu nu >= omega (beta - nu)`.
pub fn theta_prime(p: &RateParams) -> Result<f64, DiagError> {
    let w = p.krone_omega();
    let (lhs, rhs) = (p.mu * p.nu, w * (p.beta - p.nu));
    if lhs < rhs || p.nu <= 0.0 || w <= 0.0 {
        return Err(DiagError::NotExtinctionRegime { lhs, rhs });
    }
    Ok(0.5 * (p.beta / p.nu + (p.mu + w) / w))
}

/// `(S(eta), mu_S(eta))` with `S = sum 1_{eta=1} + theta' 1_{eta=2}` and
/// `mu_S = sum_1 [omega(theta'-1) - mu] + sum_0 beta N_2(B_x(L))/(2L+1)^d - sum_2 theta' nu`.
/// Counts are accumulated as integers before scaling.
pub fn s_functional(eta: &Configuration, p: &RateParams, theta_p: f64) -> (f64, f64) {
    let g = eta.geometry();
    let [_, n1, n2] = eta.type_counts();
    let births: u64 = (0..g.num_sites())
        .filter(|&x| eta.state(x) == 0)
        .map(|x| eta.window2_count(x) as u64)
        .sum();
    let s = n1 as f64 + theta_p * n2 as f64;
    let c1 = p.krone_omega() * (theta_p - 1.0) - p.mu;
    let mu_s = n1 as f64 * c1 + p.beta * births as f64 / g.window_volume() as f64
        - n2 as f64 * theta_p * p.nu;
    (s, mu_s)
}

pub fn extinction_functionals(
    eta: &Configuration,
    p: &RateParams,
    lambda_prime: f64,
) -> Result<ExtinctionReport, DiagError> {
    if !(lambda_prime > 0.0 && lambda_prime.is_finite()) {
        return Err(DiagError::Invalid(format!("lambda' = {lambda_prime}")));
    }
    let tp = theta_prime(p)?;
    let g = eta.geometry();
    let coeff_one = (tp - 1.0) * p.krone_omega() - p.mu;
    let lhs = p.beta * (lambda_prime * g.range() as f64).exp();
    let coeff_two = lhs - tp * p.nu;
    if coeff_two > 0.0 {
        return Err(DiagError::LambdaTooLarge {
            lambda: lambda_prime,
            lhs,
            rhs: tp * p.nu,
        });
    }
    let (s_value, mu_s) = s_functional(eta, p, tp);
    let vol = g.window_volume() as f64;
    let (mut q, mut mu_q, mut bound) = (0.0, 0.0, 0.0);
    for (x, &v) in eta.states().iter().enumerate() {
        let e = weight(eta, x, lambda_prime);
        match v {
            0 => {
                let k = eta.window2_count(x);
                if k > 0 {
                    mu_q += p.beta * k as f64 / vol * e;
                }
            }
            1 => {
                q += e;
                mu_q += coeff_one * e;
                bound += coeff_one * e;
            }
            _ => {
                q += tp * e;
                mu_q -= tp * p.nu * e;
                bound += coeff_two * e;
            }
        }
    }
    Ok(ExtinctionReport {
        theta_prime: tp,
        s_value,
        mu_s,
        q_prime: q,
        mu_q_prime: mu_q,
        mu_q_prime_bound: bound,
        coeff_one,
        coeff_two,
    })
}

// ------------------------------------------------------------ recovery time

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEstimate {
    /// First hitting times; `f64::INFINITY` when not reached by the horizon
    /// (or after extinction).
    pub tau_samples: Vec<f64>,
    /// `t0 log L`.
    pub horizon: f64,
    pub initial_sites: usize,
    pub threshold: f64,
    pub exceed_fraction: f64,
    /// Standard error of `exceed_fraction`.
    pub sigma: f64,
    /// Wilson interval at 3 standard errors.
    pub interval: (f64, f64),
    /// `L^{d/2 - alpha}`.
    pub bound: f64,
}

fn wet(counts: (u32, u32), threshold: f64) -> bool {
    (counts.0 + counts.1) as f64 >= threshold
}

/// Initial state with `k` sites of type `state` placed uniformly in `B^_0`.
pub fn seed_origin_box<R: Rng>(
    g: &Geometry,
    k: usize,
    state: u8,
    rng: &mut R,
) -> Result<Configuration, DiagError> {
    let sites = g.box_sites(0);
    if k > sites.len() {
        return Err(DiagError::Invalid(format!(
            "{k} initial sites do not fit in a box of {}",
            sites.len()
        )));
    }
    let chosen: Vec<usize> = sample(rng, sites.len(), k)
        .into_iter()
        .map(|i| sites[i])
        .collect();
    Ok(Configuration::with_sites(g, &chosen, state)?)
}

/// First time some small box has `n1 + n2 >= a0 |B^_0|`, for the truncated
/// process started from `ceil(L^alpha)` sites of type `init_state` in
/// `B^_0`, run up to `t0 log L`.
pub fn estimate_recovery_time_with(
    g: &Geometry,
    p: &RateParams,
    rc: &RecoveryConstants,
    alpha: f64,
    replicas: usize,
    seed: u64,
    init_state: u8,
) -> Result<RecoveryEstimate, DiagError> {
    if replicas == 0 || !(1..=2).contains(&init_state) {
        return Err(DiagError::Invalid(
            "need replicas >= 1 and an initial state of 1 or 2".into(),
        ));
    }
    let l = g.range() as f64;
    let k = l.powf(alpha).ceil() as usize;
    let horizon = rc.t0 * l.ln();
    let threshold = rc.a0 * g.box_capacity() as f64;
    let taus: Result<Vec<f64>, DiagError> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = sim_rng(seed, &[r as u64, 0]);
            let init = seed_origin_box(g, k, init_state, &mut rng)?;
            if init.all_box_counts().into_iter().any(|c| wet(c, threshold)) {
                return Ok(0.0);
            }
            let mut sim = GillespieSim::new(
                ModelKind::Truncated,
                p,
                init,
                derive_seed(seed, &[r as u64, 1]),
            );
            while let Some(tr) = sim.step() {
                if tr.time > horizon {
                    break;
                }
                let g = sim.config().geometry();
                if wet(sim.config().box_counts(g.box_of(tr.site)), threshold) {
                    return Ok(tr.time);
                }
            }
            Ok(f64::INFINITY)
        })
        .collect();
    let tau_samples = taus?;
    let exceed = tau_samples.iter().filter(|&&t| t > horizon).count() as u64;
    let n = replicas as f64;
    let frac = exceed as f64 / n;
    Ok(RecoveryEstimate {
        horizon,
        initial_sites: k,
        threshold,
        exceed_fraction: frac,
        sigma: (frac * (1.0 - frac) / n).sqrt(),
        interval: wilson_interval(exceed, replicas as u64, 3.0),
        bound: l.powf(g.dim() as f64 / 2.0 - alpha),
        tau_samples,
    })
}

pub fn estimate_recovery_time(
    g: &Geometry,
    p: &RateParams,
    rc: &RecoveryConstants,
    alpha: f64,
    replicas: usize,
    seed: u64,
) -> Result<RecoveryEstimate, DiagError> {
    estimate_recovery_time_with(g, p, rc, alpha, replicas, seed, 2)
}

// -------------------------------------------------- wet-box detection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxUpdate {
    pub time: f64,
    pub box_index: usize,
    pub counts: (u32, u32),
}

/// Box counts at time 0 and every later change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxCountTrajectory {
    pub capacity: u32,
    pub initial: Vec<(u32, u32)>,
    pub updates: Vec<BoxUpdate>,
    pub horizon: f64,
}

/// Simulates `kind` from `init` and records every box-count change.
pub fn record_box_trajectory(
    kind: ModelKind,
    p: &RateParams,
    init: Configuration,
    horizon: f64,
    seed: u64,
) -> BoxCountTrajectory {
    let capacity = init.geometry().box_capacity() as u32;
    let initial = init.all_box_counts();
    let mut sim = GillespieSim::new(kind, p, init, seed);
    let mut updates = Vec::new();
    while let Some(tr) = sim.step() {
        if tr.time > horizon {
            break;
        }
        let b = sim.config().geometry().box_of(tr.site);
        updates.push(BoxUpdate {
            time: tr.time,
            box_index: b,
            counts: sim.config().box_counts(b),
        });
    }
    BoxCountTrajectory {
        capacity,
        initial,
        updates,
        horizon,
    }
}

/// Boxes whose signed box coordinates lie within `radius` of those of `centre`.
pub fn box_region(g: &Geometry, centre: usize, radius: i64) -> Vec<usize> {
    let c = g.box_signed_coords(centre);
    let nb = g.boxes_per_axis() as i64;
    (0..g.num_boxes())
        .filter(|&b| {
            let s = g.box_signed_coords(b);
            (0..g.dim()).all(|k| {
                let diff = (s[k] - c[k]).rem_euclid(nb);
                diff.min(nb - diff) <= radius
            })
        })
        .collect()
}

/// First `(box, time)` with `box` in `region`, `time` in `window` and
/// `n1 + n2 >= a0 |B^_0|`.
pub fn detect_wet_box(
    traj: &BoxCountTrajectory,
    a0: f64,
    region: &[usize],
    window: (f64, f64),
) -> Option<(usize, f64)> {
    if window.0 > window.1 {
        return None;
    }
    let threshold = a0 * traj.capacity as f64;
    let mut counts = traj.initial.clone();
    let mut updates = traj.updates.iter().peekable();
    while let Some(u) = updates.next_if(|u| u.time <= window.0) {
        counts[u.box_index] = u.counts;
    }
    if let Some(&b) = region.iter().find(|&&b| wet(counts[b], threshold)) {
        return Some((b, window.0.max(0.0)));
    }
    for u in updates.take_while(|u| u.time <= window.1) {
        if region.contains(&u.box_index) && wet(u.counts, threshold) {
            return Some((u.box_index, u.time));
        }
    }
    None
}

// ------------------------------------------------------- branching walk

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrwReport {
    pub replicas: usize,
    pub threshold: f64,
    /// Fraction of replicas with `M_k(t) >= 1 + (2 beta + m) L t`, for every `k`.
    pub empirical_tail: Vec<f64>,
    /// `2 e^{-mt} |B^_0|`.
    pub bound: f64,
    pub cosh_minus_one: f64,
    pub cosh_check: bool,
    /// Per coordinate, mean over replicas of the mean displacement of the
    /// particles from their founders, and its standard error.
    pub displacement_mean: Vec<f64>,
    pub displacement_se: Vec<f64>,
    pub mean_population: f64,
    /// Mean of `M_k(t)^2` over replicas, per coordinate.
    pub max_second_moment: Vec<f64>,
}

/// No-death branching random walk started from `B^_0` full: each particle
/// gives birth at rate `beta` to a particle displaced uniformly in
/// `[-L, L]^d`. Occupied sites are not merged.
pub fn simulate_brw_max(
    g: &Geometry,
    p: &RateParams,
    t: f64,
    replicas: usize,
    seed: u64,
    m: f64,
    cap: usize,
) -> Result<BrwReport, DiagError> {
    if replicas == 0 || !(t >= 0.0 && t.is_finite()) || !(m > 0.0) {
        return Err(DiagError::Invalid(
            "need replicas >= 1, t >= 0 and m > 0".into(),
        ));
    }
    let d = g.dim();
    let l = g.range() as i64;
    let founders: Vec<[i64; MAX_DIM]> = g
        .box_sites(0)
        .into_iter()
        .map(|x| g.signed_coords(x))
        .collect();
    let results: Result<Vec<(Vec<i64>, Vec<f64>, usize)>, DiagError> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = sim_rng(seed, &[0xB4, r as u64]);
            // (position, displacement from founder)
            let mut parts: Vec<([i64; MAX_DIM], [i64; MAX_DIM])> =
                founders.iter().map(|&f| (f, [0; MAX_DIM])).collect();
            let mut time = 0.0;
            if p.beta > 0.0 {
                loop {
                    time += exp_sample(&mut rng, p.beta * parts.len() as f64);
                    if time > t {
                        break;
                    }
                    if parts.len() >= cap {
                        return Err(DiagError::PopulationExplosion { cap, time });
                    }
                    let (mut pos, mut disp) = parts[rng.random_range(0..parts.len())];
                    for k in 0..d {
                        let off = rng.random_range(-l..=l);
                        pos[k] += off;
                        disp[k] += off;
                    }
                    parts.push((pos, disp));
                }
            }
            let maxima: Vec<i64> = (0..d)
                .map(|k| parts.iter().map(|q| q.0[k].abs()).max().unwrap_or(0))
                .collect();
            let n = parts.len() as f64;
            let disp: Vec<f64> = (0..d)
                .map(|k| parts.iter().map(|q| q.1[k] as f64).sum::<f64>() / n)
                .collect();
            Ok((maxima, disp, parts.len()))
        })
        .collect();
    let results = results?;
    let threshold = 1.0 + (2.0 * p.beta + m) * l as f64 * t;
    let nrep = replicas as f64;
    let empirical_tail = (0..d)
        .map(|k| {
            results
                .iter()
                .filter(|r| r.0[k] as f64 >= threshold)
                .count() as f64
                / nrep
        })
        .collect();
    let max_second_moment = (0..d)
        .map(|k| results.iter().map(|r| (r.0[k] as f64).powi(2)).sum::<f64>() / nrep)
        .collect();
    let (mut displacement_mean, mut displacement_se) = (Vec::new(), Vec::new());
    for k in 0..d {
        let xs: Vec<f64> = results.iter().map(|r| r.1[k]).collect();
        let (mu, se) = mean_and_se(&xs);
        displacement_mean.push(mu);
        displacement_se.push(se);
    }
    let cosh_minus_one = 1f64.cosh() - 1.0;
    Ok(BrwReport {
        replicas,
        threshold,
        empirical_tail,
        bound: 2.0 * (-m * t).exp() * g.box_capacity() as f64,
        cosh_minus_one,
        cosh_check: (cosh_minus_one - 0.543).abs() < 5e-4,
        displacement_mean,
        displacement_se,
        mean_population: results.iter().map(|r| r.2 as f64).sum::<f64>() / nrep,
        max_second_moment,
    })
}

// ------------------------------------------------------- moving particles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovingParticleTrial {
    /// Nonzero sites of `B^_0` at time 0.
    pub h00: usize,
    /// Sites of `H00` with no death mark in `[0, 1]` and a growth mark in `[0, 1/2]`.
    pub g0: usize,
    /// Sites of `B^_v` with no death mark in `[0, 1]`.
    pub gv: usize,
    /// Sites of the previous set hit in `(1/2, 1)` by an arrow from `G0`.
    pub s: usize,
    /// Nonzero sites of `B^_v` at time 1.
    pub hv1: usize,
    pub success: bool,
}

/// Box `B^_v` for a direction `v` in `{0, +-e_1, .., +-e_d}` in box units.
pub fn direction_box(g: &Geometry, v: &[i64]) -> Result<usize, DiagError> {
    let ok = v.len() == g.dim() && v.iter().map(|c| c.abs()).sum::<i64>() <= 1;
    if !ok {
        return Err(DiagError::Invalid(format!(
            "direction {v:?} is not 0 or a unit vector in dimension {}",
            g.dim()
        )));
    }
    Ok(g.box_at(v))
}

/// Runs the Krone process from `init` on the graphical representation for
/// one time unit and extracts the sets above.
pub fn moving_particle_trial(
    g: &Geometry,
    p: &RateParams,
    v: &[i64],
    init: &Configuration,
    seed: u64,
    delta: f64,
) -> Result<MovingParticleTrial, DiagError> {
    let bv = direction_box(g, v)?;
    if init.geometry() != g {
        return Err(EngineError::GeometryMismatch.into());
    }
    let sched = EventSchedule::build(g, p, 1.0, seed)?;
    let n = g.num_sites();
    let in_b0: Vec<bool> = (0..n).map(|x| g.box_of(x) == 0).collect();
    let mut died = vec![false; n];
    let mut grew_early = vec![false; n];
    let mut arrows: Vec<(usize, usize)> = Vec::new();
    let mut eta = init.clone();
    for mark in sched.marks() {
        match mark.kind {
            MarkKind::Death12 | MarkKind::Death1 => died[mark.site] = true,
            MarkKind::Growth if mark.time <= 0.5 => grew_early[mark.site] = true,
            MarkKind::Arrow {
                target: Some(y), ..
            } if mark.time > 0.5 && in_b0[mark.site] && g.box_of(y) == bv => {
                arrows.push((mark.site, y))
            }
            _ => {}
        }
        apply_mark(ModelKind::Krone, &sched, &mut eta, &mark);
    }
    let bv_sites = g.box_sites(bv);
    let b0_sites = g.box_sites(0);
    let is_g0 = |x: usize| init.state(x) != 0 && !died[x] && grew_early[x];
    let h00 = b0_sites.iter().filter(|&&x| init.state(x) != 0).count();
    let g0 = b0_sites.iter().filter(|&&x| is_g0(x)).count();
    let gv = bv_sites.iter().filter(|&&y| !died[y]).count();
    let mut hit = vec![false; n];
    for &(x, y) in &arrows {
        if is_g0(x) && !died[y] {
            hit[y] = true;
        }
    }
    let s = bv_sites.iter().filter(|&&y| hit[y]).count();
    let hv1 = bv_sites.iter().filter(|&&y| eta.state(y) != 0).count();
    Ok(MovingParticleTrial {
        h00,
        g0,
        gv,
        s,
        hv1,
        success: hv1 as f64 >= delta * h00 as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SStratum {
    pub g0: usize,
    pub success_prob: f64,
    pub gof: GofResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingParticleGof {
    pub replicas: usize,
    pub h00: usize,
    pub box_size: usize,
    /// `e^{-mu} (1 - e^{-omega/2})`.
    pub g0_prob: f64,
    pub g0_gof: GofResult,
    pub strata: Vec<SStratum>,
    /// Level per test after the Bonferroni split.
    pub per_test_level: f64,
    pub pass: bool,
    pub success_fraction: f64,
    /// Largest `delta` with `|H_{1,v}| >= delta |H_{0,0}|` in 99% of trials.
    pub delta_99: f64,
}

/// Repeats [`moving_particle_trial`] and tests `|G0|` against
/// `Binomial(|H00|, e^{-mu}(1 - e^{-omega/2}))` and, within each observed
/// value of `|G0|` with enough samples, `|S|` against
/// `Binomial(|B^_v|, e^{-mu}[1 - e^{-beta |G0| / (2 (2L+1)^d)}])`.
/// Requires `v != 0` and `B^_v` within range of every site of `B^_0`.
#[allow(clippy::too_many_arguments)]
pub fn moving_particle_gof(
    g: &Geometry,
    p: &RateParams,
    v: &[i64],
    init: &Configuration,
    replicas: usize,
    seed: u64,
    delta: f64,
    level: f64,
) -> Result<MovingParticleGof, DiagError> {
    let bv = direction_box(g, v)?;
    if bv == 0 {
        return Err(DiagError::Invalid("the |S| law needs v != 0".into()));
    }
    let reach_ok = g.box_sites(0).iter().all(|&x| {
        g.box_sites(bv)
            .iter()
            .all(|&y| g.distance(x, y) <= g.range())
    });
    if !reach_ok {
        return Err(DiagError::Invalid(
            "B^_v is not within range L of B^_0".into(),
        ));
    }
    let trials: Result<Vec<MovingParticleTrial>, DiagError> = (0..replicas)
        .into_par_iter()
        .map(|r| moving_particle_trial(g, p, v, init, derive_seed(seed, &[r as u64]), delta))
        .collect();
    let trials = trials?;
    let h00 = trials.first().map_or(0, |t| t.h00);
    let box_size = g.box_capacity();
    let g0_prob = (-p.mu).exp() * (1.0 - (-p.krone_omega() / 2.0).exp());
    let g0s: Vec<u64> = trials.iter().map(|t| t.g0 as u64).collect();
    let g0_gof = chi_square_gof(
        &histogram(&g0s, h00 as u64),
        &binomial_pmf(h00 as u64, g0_prob),
        5.0,
    );
    let mut by_g0: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for t in &trials {
        by_g0.entry(t.g0).or_default().push(t.s as u64);
    }
    let vol = g.window_volume() as f64;
    let mut strata = Vec::new();
    for (&k, ss) in &by_g0 {
        let q = (-p.mu).exp() * (1.0 - (-p.beta * k as f64 / (2.0 * vol)).exp());
        let probs = binomial_pmf(box_size as u64, q);
        // a stratum needs room for at least two pooled cells
        let expected_cells = ss.len() as f64 * (1.0 - probs.iter().cloned().fold(0.0, f64::max));
        if ss.len() < 50 || expected_cells < 5.0 {
            continue;
        }
        strata.push(SStratum {
            g0: k,
            success_prob: q,
            gof: chi_square_gof(&histogram(ss, box_size as u64), &probs, 5.0),
        });
    }
    let tests = 1 + strata.len();
    let per_test_level = level / tests as f64;
    let pass =
        g0_gof.p_value >= per_test_level && strata.iter().all(|s| s.gof.p_value >= per_test_level);
    let mut ratios: Vec<f64> = trials
        .iter()
        .map(|t| {
            if t.h00 == 0 {
                0.0
            } else {
                t.hv1 as f64 / t.h00 as f64
            }
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let delta_99 = ratios[(0.01 * ratios.len() as f64).floor() as usize];
    Ok(MovingParticleGof {
        replicas,
        h00,
        box_size,
        g0_prob,
        g0_gof,
        strata,
        per_test_level,
        pass,
        success_fraction: trials.iter().filter(|t| t.success).count() as f64 / replicas as f64,
        delta_99,
    })
}

// --------------------------------------------------------- Dynkin residual

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynkinReport {
    pub replicas: usize,
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub second_moment: f64,
    pub second_moment_se: f64,
    /// Mean of the predictable quadratic variation `int sum rate (dQ)^2 ds`.
    pub mean_quadratic_variation: f64,
    /// `E M_t^2 L^d / t`.
    pub fitted_c: f64,
    /// `e^{lambda/2} 2^d d!`.
    pub u: f64,
}

/// `(mu(xi), d<M>/dt)` for the truncated process, from the transition
/// rates directly.
fn drift_and_qv(xi: &Configuration, p: &RateParams, lambda: f64, w: WeightSpec) -> (f64, f64) {
    let g = xi.geometry();
    let scale = lambda.powi(g.dim() as i32);
    let vol = g.window_volume() as f64;
    let omega = p.krone_omega();
    let (mut mu, mut qv) = (0.0, 0.0);
    let mut add = |rate: f64, dq: f64| {
        mu += rate * dq;
        qv += rate * dq * dq;
    };
    for (x, &v) in xi.states().iter().enumerate() {
        let e = scale * weight(xi, x, lambda);
        match v {
            0 => add(p.beta * xi.truncated_n2(x) as f64 / vol, e * w.of(1)),
            1 => {
                add(p.mu, -e * w.of(1));
                add(omega, e * (w.of(2) - w.of(1)));
            }
            _ => add(p.nu, -e * w.of(2)),
        }
    }
    (mu, qv)
}

/// Samples `M_t = Q(xi_t) - Q(xi_0) - int_0^t mu(xi_s) ds` along truncated
/// trajectories from `init`.
pub fn dynkin_residuals(
    p: &RateParams,
    rc: &RecoveryConstants,
    init: &Configuration,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<DynkinReport, DiagError> {
    if replicas < 2 || !(t > 0.0 && t.is_finite()) {
        return Err(DiagError::Invalid("need replicas >= 2 and t > 0".into()));
    }
    let g = init.geometry();
    let lambda = rc.lambda(g.range());
    let w = WeightSpec::survival(rc);
    let samples: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let q0 = q_functional(init, lambda, w, Prefactor::LambdaPowD).value;
            let mut sim = GillespieSim::new(
                ModelKind::Truncated,
                p,
                init.clone(),
                derive_seed(seed, &[0xD7, r as u64]),
            );
            let (mut integral, mut qv_integral, mut last) = (0.0, 0.0, 0.0);
            let (mut mu, mut qv) = drift_and_qv(sim.config(), p, lambda, w);
            loop {
                let before = sim.clone();
                match sim.step() {
                    Some(tr) if tr.time <= t => {
                        integral += mu * (tr.time - last);
                        qv_integral += qv * (tr.time - last);
                        last = tr.time;
                        (mu, qv) = drift_and_qv(sim.config(), p, lambda, w);
                    }
                    _ => {
                        sim = before;
                        break;
                    }
                }
            }
            integral += mu * (t - last);
            qv_integral += qv * (t - last);
            let qt = q_functional(sim.config(), lambda, w, Prefactor::LambdaPowD).value;
            (qt - q0 - integral, qv_integral)
        })
        .collect();
    let ms: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let m2: Vec<f64> = ms.iter().map(|m| m * m).collect();
    let (mean, se) = mean_and_se(&ms);
    let (second_moment, second_moment_se) = mean_and_se(&m2);
    let mean_quadratic_variation = samples.iter().map(|s| s.1).sum::<f64>() / replicas as f64;
    let d = g.dim();
    Ok(DynkinReport {
        replicas,
        t,
        mean,
        se,
        second_moment,
        second_moment_se,
        mean_quadratic_variation,
        fitted_c: second_moment * (g.range() as f64).powi(d as i32) / t,
        u: (lambda / 2.0).exp() * sup_norm_integral(d),
    })
}

// -------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Constants, per-check verdicts and sample statistics of a diagnostics run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub constants: BTreeMap<String, f64>,
    pub checks: Vec<CheckRecord>,
    pub statistics: BTreeMap<String, f64>,
}

impl DiagnosticsReport {
    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.to_string(), value);
    }
    pub fn statistic(&mut self, name: &str, value: f64) {
        self.statistics.insert(name.to_string(), value);
    }
    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        });
    }
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
    pub fn record_constants(&mut self, rc: &RecoveryConstants) {
        for (k, v) in [
            ("theta", rc.theta),
            ("a0", rc.a0),
            ("rho", rc.rho),
            ("eps0", rc.eps0),
            ("t0", rc.t0),
            ("alpha", rc.alpha),
            ("omega", rc.omega),
        ] {
            self.constant(k, v);
        }
    }
}
