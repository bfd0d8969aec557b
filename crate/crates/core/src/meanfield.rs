//! Well-mixed (mean-field) dynamics of grass, saplings and trees.
//!
//! With `G = 1 - S - T` the system reduces to
//!
//! ```text
//! dS/dt = beta G T - (omega(G) + mu) S
//! dT/dt = omega(G) S - nu T
//! ```
//!
//! Near the all-grass state the linearisation has matrix
//! `[[-(omega + mu), beta], [omega, -nu]]`; its trace is always negative, so
//! the sign of the determinant decides whether the origin attracts.

use crate::params::{Growth, RateParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `G + S + T = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error("no interior fixed point exists for these parameters")]
    NoInteriorRoot,
    #[error("state left the simplex at t={time}: (G,S,T)=({g},{s},{t}); reduce dt")]
    StepTooLarge { time: f64, g: f64, s: f64, t: f64 },
    #[error("invalid state (G,S,T)=({g},{s},{t})")]
    InvalidState { g: f64, s: f64, t: f64 },
    #[error("dt must be positive and t_end nonnegative")]
    InvalidStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstState {
    pub g: f64,
    pub s: f64,
    pub t: f64,
}

impl GstState {
    pub fn new(g: f64, s: f64, t: f64) -> Result<Self, MeanFieldError> {
        let ok = g >= 0.0 && s >= 0.0 && t >= 0.0 && (g + s + t - 1.0).abs() <= SIMPLEX_TOL;
        if ok {
            Ok(GstState { g, s, t })
        } else {
            Err(MeanFieldError::InvalidState { g, s, t })
        }
    }

    /// State with grass derived from saplings and trees.
    pub fn from_st(s: f64, t: f64) -> Self {
        GstState {
            g: 1.0 - s - t,
            s,
            t,
        }
    }

    pub fn all_grass() -> Self {
        GstState {
            g: 1.0,
            s: 0.0,
            t: 0.0,
        }
    }

    pub fn distance(&self, other: &GstState) -> f64 {
        (self.g - other.g)
            .abs()
            .max((self.s - other.s).abs())
            .max((self.t - other.t).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityKind {
    Unstable,
    Attracting,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub kind: StabilityKind,
    pub determinant: f64,
    pub trace: f64,
}

/// True iff `mu nu < omega (beta - nu)`, i.e. the origin is not attracting.
pub fn survival_condition(p: &RateParams, omega: f64) -> bool {
    p.mu * p.nu < omega * (p.beta - p.nu)
}

pub fn jacobian_at_origin(p: &RateParams, omega: f64) -> [[f64; 2]; 2] {
    [[-(omega + p.mu), p.beta], [omega, -p.nu]]
}

pub fn classify_origin(p: &RateParams, omega: f64) -> StabilityVerdict {
    let a = jacobian_at_origin(p, omega);
    let determinant = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let trace = a[0][0] + a[1][1];
    let kind = if determinant < 0.0 {
        StabilityKind::Unstable
    } else if determinant > 0.0 {
        StabilityKind::Attracting
    } else {
        StabilityKind::Degenerate
    };
    StabilityVerdict {
        kind,
        determinant,
        trace,
    }
}

/// Real parts of the eigenvalues of a 2x2 matrix.
pub fn eigenvalue_real_parts(a: &[[f64; 2]; 2]) -> (f64, f64) {
    let tr = a[0][0] + a[1][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (tr / 2.0 + r, tr / 2.0 - r)
    } else {
        (tr / 2.0, tr / 2.0)
    }
}

/// Classification from the eigenvalues directly: attracting iff both real
/// parts are negative.
pub fn classify_by_eigenvalues(a: &[[f64; 2]; 2]) -> StabilityKind {
    let (r1, r2) = eigenvalue_real_parts(a);
    let top = r1.max(r2);
    if top < 0.0 {
        StabilityKind::Attracting
    } else if top > 0.0 {
        StabilityKind::Unstable
    } else {
        StabilityKind::Degenerate
    }
}

/// Right-hand side `(dG, dS, dT)` at a state.
pub fn rhs(p: &RateParams, x: &GstState) -> (f64, f64, f64) {
    let w = p.growth.rate(x.g);
    let dg = p.mu * x.s + p.nu * x.t - p.beta * x.g * x.t;
    let ds = p.beta * x.g * x.t - (w + p.mu) * x.s;
    let dt = w * x.s - p.nu * x.t;
    (dg, ds, dt)
}

fn rhs_st(p: &RateParams, s: f64, t: f64) -> (f64, f64) {
    let (_, ds, dt) = rhs(p, &GstState::from_st(s, t));
    (ds, dt)
}

/// Which growth rate an equilibrium was solved with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Constant,
    /// `omega0`, grass below `1 - delta0`.
    HighGrowth,
    /// `omega1`, grass at or above `1 - delta0`.
    LowGrowth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub state: GstState,
    pub regime: Regime,
}

/// Interior root for constant growth `omega`, if it lies in the open simplex.
fn constant_root(p: &RateParams, omega: f64) -> Option<GstState> {
    if omega <= 0.0 || p.beta <= 0.0 {
        return None;
    }
    let g = (omega + p.mu) * p.nu / (p.beta * omega);
    if !(g > 0.0 && g < 1.0) {
        return None;
    }
    let t = omega * (1.0 - g) / (omega + p.nu);
    let s = p.nu * t / omega;
    Some(GstState { g, s, t })
}

pub fn interior_fixed_points(p: &RateParams) -> Result<Vec<FixedPoint>, MeanFieldError> {
    let mut roots = Vec::new();
    match p.growth {
        Growth::Constant { omega } => {
            if let Some(state) = constant_root(p, omega) {
                roots.push(FixedPoint {
                    state,
                    regime: Regime::Constant,
                });
            }
        }
        Growth::Step {
            omega0,
            omega1,
            delta0,
        } => {
            if let Some(state) = constant_root(p, omega0) {
                if state.g < 1.0 - delta0 {
                    roots.push(FixedPoint {
                        state,
                        regime: Regime::HighGrowth,
                    });
                }
            }
            if let Some(state) = constant_root(p, omega1) {
                if state.g >= 1.0 - delta0 {
                    roots.push(FixedPoint {
                        state,
                        regime: Regime::LowGrowth,
                    });
                }
            }
        }
    }
    if roots.is_empty() {
        Err(MeanFieldError::NoInteriorRoot)
    } else {
        Ok(roots)
    }
}

/// Largest absolute right-hand side component.
pub fn residual(p: &RateParams, x: &GstState) -> f64 {
    let (a, b, c) = rhs(p, x);
    a.abs().max(b.abs()).max(c.abs())
}

/// One explicit Euler step of the reduced system.
pub fn euler_step(p: &RateParams, x: &GstState, dt: f64) -> GstState {
    let (ds, dtt) = rhs_st(p, x.s, x.t);
    GstState::from_st(x.s + dt * ds, x.t + dt * dtt)
}

fn rk4_step(p: &RateParams, s: f64, t: f64, h: f64) -> (f64, f64) {
    let (k1s, k1t) = rhs_st(p, s, t);
    let (k2s, k2t) = rhs_st(p, s + 0.5 * h * k1s, t + 0.5 * h * k1t);
    let (k3s, k3t) = rhs_st(p, s + 0.5 * h * k2s, t + 0.5 * h * k2t);
    let (k4s, k4t) = rhs_st(p, s + h * k3s, t + h * k3t);
    (
        s + h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s),
        t + h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<GstState>,
}

impl MeanFieldTrajectory {
    pub fn last(&self) -> GstState {
        *self.states.last().expect("trajectory always holds t=0")
    }
}

const BOX_TOL: f64 = 1e-9;

/// Fixed-step RK4 integration from `x0` to `t_end`. The final step is
/// shortened so that `t_end` is sampled exactly.
pub fn integrate_meanfield(
    p: &RateParams,
    x0: GstState,
    t_end: f64,
    dt: f64,
) -> Result<MeanFieldTrajectory, MeanFieldError> {
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(MeanFieldError::InvalidStep);
    }
    let x0 = GstState::new(x0.g, x0.s, x0.t)?;
    let steps = (t_end / dt).ceil() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0);
    let (mut s, mut t) = (x0.s, x0.t);
    for k in 1..=steps {
        let t_now = ((k - 1) as f64 * dt).min(t_end);
        let t_next = (k as f64 * dt).min(t_end);
        let h = t_next - t_now;
        (s, t) = rk4_step(p, s, t, h);
        let x = GstState::from_st(s, t);
        let inside = |v: f64| (-BOX_TOL..=1.0 + BOX_TOL).contains(&v);
        if !(inside(x.g) && inside(x.s) && inside(x.t)) {
            return Err(MeanFieldError::StepTooLarge {
                time: t_next,
                g: x.g,
                s: x.s,
                t: x.t,
            });
        }
        times.push(t_next);
        states.push(x);
    }
    Ok(MeanFieldTrajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn krone(beta: f64, mu: f64, nu: f64, omega: f64) -> RateParams {
        RateParams::krone(beta, mu, nu, omega).unwrap()
    }

    #[test]
    fn survival_condition_examples() {
        assert!(survival_condition(&krone(2.0, 0.5, 0.5, 1.0), 1.0));
        assert!(!survival_condition(&krone(1.2, 1.5, 1.0, 1.0), 1.0));
        // 0.5 = 0.5: strict inequality fails on the boundary
        assert!(!survival_condition(&krone(1.5, 0.5, 1.0, 1.0), 1.0));
    }

    #[test]
    fn jacobian_examples() {
        let a = jacobian_at_origin(&krone(2.0, 0.5, 0.5, 1.0), 1.0);
        assert_eq!(a, [[-1.5, 2.0], [1.0, -0.5]]);
        assert_eq!(a[0][0] * a[1][1] - a[0][1] * a[1][0], -1.25);
        let z = jacobian_at_origin(&krone(0.0, 0.0, 0.0, 0.0), 0.0);
        assert!(z.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_examples() {
        let v = classify_origin(&krone(2.0, 0.5, 0.5, 1.0), 1.0);
        assert_eq!(v.kind, StabilityKind::Unstable);
        assert_eq!(v.determinant, -1.25);
        let v = classify_origin(&krone(1.2, 1.5, 1.0, 1.0), 1.0);
        assert_eq!(v.kind, StabilityKind::Attracting);
        assert!((v.determinant - 1.3).abs() < 1e-15);
        let v = classify_origin(&krone(1.5, 0.5, 1.0, 1.0), 1.0);
        assert_eq!(v.kind, StabilityKind::Degenerate);
        assert_eq!(v.determinant, 0.0);
        assert!(v.trace < 0.0);
    }

    #[test]
    fn interior_root_survival_point() {
        let p = krone(2.0, 0.5, 0.5, 1.0);
        let roots = interior_fixed_points(&p).unwrap();
        assert_eq!(roots.len(), 1);
        let x = roots[0].state;
        // G* = 1.5 * 0.5 / 2, T* = (1 - G*)/1.5, S* = 0.5 T*
        assert!((x.g - 0.375).abs() < 1e-15);
        assert!((x.t - 0.625 / 1.5).abs() < 1e-15);
        assert!((x.s - 0.625 / 3.0).abs() < 1e-15);
        assert!(residual(&p, &x) < 1e-12);
    }

    #[test]
    fn interior_root_absent() {
        assert_eq!(
            interior_fixed_points(&krone(1.2, 1.5, 1.0, 1.0)),
            Err(MeanFieldError::NoInteriorRoot)
        );
        // beta = nu forces G* >= 1
        for &(mu, omega) in &[(0.5, 1.0), (2.0, 0.3), (1.0, 7.0)] {
            assert!(interior_fixed_points(&krone(1.0, mu, 1.0, omega)).is_err());
        }
    }

    #[test]
    fn step_roots_respect_regimes() {
        // low-growth root at G = 1.1*0.5/(2*0.1) > 1 is rejected; high-growth
        // root G = 1.5*0.5/2 = 0.375 lies below 1 - 0.3.
        let p = RateParams::new(2.0, 0.5, 0.5, Growth::step(1.0, 0.1, 0.3)).unwrap();
        let roots = interior_fixed_points(&p).unwrap();
        assert_eq!(roots.len(), 1);
        assert_eq!(roots[0].regime, Regime::HighGrowth);
        assert!(residual(&p, &roots[0].state) < 1e-10);
        // threshold 1 - 0.7 = 0.3 lies below 0.375, so neither regime holds
        let p = RateParams::new(2.0, 0.5, 0.5, Growth::step(1.0, 0.1, 0.7)).unwrap();
        assert!(interior_fixed_points(&p).is_err());
        // both regimes consistent
        let p = RateParams::new(4.0, 0.5, 0.5, Growth::step(1.0, 0.1, 0.5)).unwrap();
        let roots = interior_fixed_points(&p).unwrap();
        assert_eq!(roots.len(), 2);
        for r in roots {
            assert!(residual(&p, &r.state) < 1e-10);
        }
    }

    #[test]
    fn all_grass_is_absorbing() {
        let p = krone(2.0, 0.5, 0.5, 1.0);
        let tr = integrate_meanfield(&p, GstState::all_grass(), 5.0, 0.01).unwrap();
        assert!(tr.states.iter().all(|x| *x == GstState::all_grass()));
        assert_eq!(tr.times[0], 0.0);
        assert_eq!(*tr.times.last().unwrap(), 5.0);
    }

    #[test]
    fn converges_to_interior_root() {
        let p = krone(2.0, 0.5, 0.5, 1.0);
        let root = interior_fixed_points(&p).unwrap()[0].state;
        let x0 = GstState::new(0.4, 0.3, 0.3).unwrap();
        let tr = integrate_meanfield(&p, x0, 200.0, 0.01).unwrap();
        assert!(tr.last().distance(&root) < 1e-6);
    }

    #[test]
    fn decays_when_origin_attracts() {
        let p = krone(1.2, 1.5, 1.0, 1.0);
        let x0 = GstState::new(0.98, 0.01, 0.01).unwrap();
        let end = integrate_meanfield(&p, x0, 200.0, 0.01).unwrap().last();
        assert!(end.s < 1e-8 && end.t < 1e-8);
    }

    #[test]
    fn integrate_rejects_bad_input() {
        let p = krone(2.0, 0.5, 0.5, 1.0);
        let x0 = GstState::all_grass();
        assert_eq!(
            integrate_meanfield(&p, x0, 1.0, 0.0),
            Err(MeanFieldError::InvalidStep)
        );
        let bad = GstState {
            g: 0.5,
            s: 0.5,
            t: 0.5,
        };
        assert!(integrate_meanfield(&p, bad, 1.0, 0.1).is_err());
        // a huge step overshoots the simplex
        let x0 = GstState::new(0.4, 0.3, 0.3).unwrap();
        assert!(matches!(
            integrate_meanfield(&krone(50.0, 40.0, 0.5, 30.0), x0, 10.0, 1.0),
            Err(MeanFieldError::StepTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn determinant_sign_matches_eigenvalues(
            beta in 0.01f64..10.0, mu in 0.01f64..5.0, nu in 0.01f64..5.0, omega in 0.01f64..5.0
        ) {
            let p = krone(beta, mu, nu, omega);
            let v = classify_origin(&p, omega);
            prop_assume!(v.kind != StabilityKind::Degenerate);
            prop_assert!(v.trace < 0.0);
            prop_assert_eq!(v.kind, classify_by_eigenvalues(&jacobian_at_origin(&p, omega)));
        }

        #[test]
        fn survival_implies_interior_root(
            beta in 0.01f64..10.0, mu in 0.01f64..5.0, nu in 0.01f64..5.0, omega in 0.01f64..5.0
        ) {
            let p = krone(beta, mu, nu, omega);
            let roots = interior_fixed_points(&p);
            prop_assert_eq!(survival_condition(&p, omega), roots.is_ok());
            if let Ok(roots) = roots {
                prop_assert!(residual(&p, &roots[0].state) < 1e-10);
            }
        }

        #[test]
        fn trajectories_stay_on_simplex(
            beta in 0.1f64..5.0, nu in 0.1f64..2.0, extra in 0.0f64..2.0, omega in 0.1f64..3.0,
            s in 0.0f64..0.5, t in 0.0f64..0.5,
        ) {
            let p = krone(beta, nu + extra, nu, omega);
            let dt = 0.01 / (beta + nu + extra + nu + omega);
            let tr = integrate_meanfield(&p, GstState::from_st(s, t), 2.0, dt).unwrap();
            for x in &tr.states {
                prop_assert!((x.g + x.s + x.t - 1.0).abs() < 1e-12);
                prop_assert!(x.s >= -1e-9 && x.s <= 1.0 + 1e-9);
                prop_assert!(x.t >= -1e-9 && x.t <= 1.0 + 1e-9);
            }
        }
    }
}
