//! Long-range integro-differential limit on a grid in rescaled space.
//!
//! ```text
//! dS/dt = beta D1T(x) G - mu S - omega(DkG(x)) S
//! dT/dt = omega(DkG(x)) S - nu T,         G = 1 - S - T
//! ```
//!
//! `D1T` is the mean of `T` over `x + [-1, 1]^d` and `DkG` the mean of `G`
//! over `x + [-kappa, kappa]^d`. On the grid a window of half-width `r` is
//! the `(2m+1)^d` nodes with `m = round(r / h)`; means are read from
//! summed-area tables in `O(2^d)` per node.
//!
//! The module also carries the constants attached to the trapezoidal test
//! functions, the test functions themselves, and a verifier for the
//! positivity of their initial derivatives.

use crate::params::{Growth, RateParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SIMPLEX_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdeError {
    #[error("dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("grid spacing must be positive and finite, got {0}")]
    Spacing(f64),
    #[error("field has {got} values, grid has {expected} nodes")]
    Length { got: usize, expected: usize },
    #[error("node {node} is off the simplex: S={s}, T={t}")]
    InvariantBreach { node: usize, s: f64, t: f64 },
    #[error("time step {dt} exceeds the stability bound {max}")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("periodic window of {window} nodes exceeds the {nodes}-node axis")]
    WindowTooWide { window: usize, nodes: usize },
    #[error("hypothesis fails: {0}")]
    HypothesisFails(String),
    #[error("grid spacing {h} is too coarse for ramps of width {eps} (need h <= eps/4)")]
    GridTooCoarse { h: f64, eps: f64 },
    #[error("grid half-width {have} does not cover radius {need}")]
    GridTooSmall { have: f64, need: f64 },
    #[error("snapshot is malformed: {0}")]
    Snapshot(String),
}

/// Values assumed beyond the edge of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IdeBoundary {
    /// All grass: `S = T = 0`, `G = 1`.
    #[default]
    Grass,
    Periodic,
}

/// Square grid `{-N, ..., N}^d * h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub h: f64,
    pub half_nodes: usize,
    pub boundary: IdeBoundary,
}

impl GridSpec {
    pub fn new(
        d: usize,
        h: f64,
        half_nodes: usize,
        boundary: IdeBoundary,
    ) -> Result<Self, IdeError> {
        if !(1..=3).contains(&d) {
            return Err(IdeError::Dimension(d));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(IdeError::Spacing(h));
        }
        Ok(GridSpec {
            d,
            h,
            half_nodes,
            boundary,
        })
    }

    /// Smallest grid of spacing `h` whose half-width reaches `radius`.
    pub fn covering(
        d: usize,
        h: f64,
        radius: f64,
        boundary: IdeBoundary,
    ) -> Result<Self, IdeError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(IdeError::Spacing(h));
        }
        Self::new(d, h, (radius / h - 1e-9).ceil().max(0.0) as usize, boundary)
    }

    pub fn per_axis(&self) -> usize {
        2 * self.half_nodes + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.per_axis().pow(self.d as u32)
    }

    pub fn half_width(&self) -> f64 {
        self.half_nodes as f64 * self.h
    }

    /// Nodes per side of a window of half-width `r`.
    pub fn window_radius(&self, r: f64) -> usize {
        (r / self.h).round() as usize
    }

    pub fn index(&self, node: usize) -> [usize; 3] {
        let n = self.per_axis();
        let mut idx = [0; 3];
        let mut rem = node;
        for k in 0..self.d {
            idx[k] = rem % n;
            rem /= n;
        }
        idx
    }

    pub fn node(&self, idx: &[usize]) -> usize {
        let n = self.per_axis();
        (0..self.d).rev().fold(0, |acc, k| acc * n + idx[k])
    }

    pub fn coords(&self, node: usize) -> [f64; 3] {
        let idx = self.index(node);
        let mut x = [0.0; 3];
        for k in 0..self.d {
            x[k] = (idx[k] as f64 - self.half_nodes as f64) * self.h;
        }
        x
    }

    /// Sup norm of the node position.
    pub fn sup_norm(&self, node: usize) -> f64 {
        let idx = self.index(node);
        (0..self.d)
            .map(|k| idx[k].abs_diff(self.half_nodes))
            .max()
            .unwrap_or(0) as f64
            * self.h
    }

    /// Node mirrored through the origin.
    pub fn mirror(&self, node: usize) -> usize {
        let mut idx = self.index(node);
        let n = self.per_axis();
        for v in idx.iter_mut().take(self.d) {
            *v = n - 1 - *v;
        }
        self.node(&idx)
    }

    /// Node nearest the origin.
    pub fn origin(&self) -> usize {
        self.node(&[self.half_nodes; 3])
    }
}

/// Summed-area table of one grid function.
#[derive(Debug, Clone)]
pub struct BoxAverager {
    spec: GridSpec,
    // double-double prefix sums: window sums are differences of prefix
    // values much larger than themselves
    prefix: Vec<f64>,
    prefix_lo: Vec<f64>,
    outside: f64,
}

/// Error-free `a + b = s + e`.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn dd_add((ah, al): (f64, f64), (bh, bl): (f64, f64)) -> (f64, f64) {
    let (s, e) = two_sum(ah, bh);
    let e = e + al + bl;
    let h = s + e;
    (h, e - (h - s))
}

impl BoxAverager {
    pub fn new(spec: &GridSpec, values: &[f64], outside: f64) -> Self {
        let n = spec.per_axis();
        let m = n + 1;
        let d = spec.d;
        let mut prefix = vec![0.0; m.pow(d as u32)];
        for node in 0..spec.num_nodes() {
            let idx = spec.index(node);
            let mut p = 0;
            for k in (0..d).rev() {
                p = p * m + idx[k] + 1;
            }
            prefix[p] = values[node];
        }
        let mut prefix_lo = vec![0.0; prefix.len()];
        let mut stride = 1;
        for _ in 0..d {
            for p in 0..prefix.len() {
                if (p / stride) % m != 0 {
                    (prefix[p], prefix_lo[p]) = dd_add(
                        (prefix[p], prefix_lo[p]),
                        (prefix[p - stride], prefix_lo[p - stride]),
                    );
                }
            }
            stride *= m;
        }
        BoxAverager {
            spec: *spec,
            prefix,
            prefix_lo,
            outside,
        }
    }

    /// Sum over the index box `[lo_k, hi_k)`.
    fn box_sum(&self, lo: &[usize; 3], hi: &[usize; 3]) -> f64 {
        let d = self.spec.d;
        let m = self.spec.per_axis() + 1;
        let mut total = (0.0, 0.0);
        for corner in 0..(1usize << d) {
            let mut p = 0;
            let mut sign = 1.0;
            for k in (0..d).rev() {
                let c = if corner >> k & 1 == 1 {
                    sign = -sign;
                    lo[k]
                } else {
                    hi[k]
                };
                p = p * m + c;
            }
            total = dd_add(total, (sign * self.prefix[p], sign * self.prefix_lo[p]));
        }
        total.0 + total.1
    }

    /// Mean over the `(2m+1)^d` nodes centred on `node`.
    pub fn mean(&self, node: usize, m: usize) -> Result<f64, IdeError> {
        let spec = &self.spec;
        let d = spec.d;
        let n = spec.per_axis();
        let idx = spec.index(node);
        let vol = ((2 * m + 1) as f64).powi(d as i32);
        match spec.boundary {
            IdeBoundary::Grass => {
                let (mut lo, mut hi) = ([0usize; 3], [1usize; 3]);
                let mut inside = 1usize;
                for k in 0..d {
                    lo[k] = idx[k].saturating_sub(m);
                    hi[k] = (idx[k] + m + 1).min(n);
                    inside *= hi[k] - lo[k];
                }
                let outside_nodes = vol - inside as f64;
                Ok((self.box_sum(&lo, &hi) + outside_nodes * self.outside) / vol)
            }
            IdeBoundary::Periodic => {
                if 2 * m + 1 > n {
                    return Err(IdeError::WindowTooWide {
                        window: 2 * m + 1,
                        nodes: n,
                    });
                }
                // each axis splits into at most two segments
                let mut segs = [[(0usize, 1usize); 2]; 3];
                let mut nseg = [1usize; 3];
                for k in 0..d {
                    let start = (idx[k] + n - m) % n;
                    let end = start + 2 * m + 1;
                    if end <= n {
                        segs[k][0] = (start, end);
                    } else {
                        segs[k] = [(start, n), (0, end - n)];
                        nseg[k] = 2;
                    }
                }
                let mut total = 0.0;
                for a in 0..nseg[0] {
                    for b in 0..nseg[1] {
                        for c in 0..nseg[2] {
                            let pick = [segs[0][a], segs[1][b], segs[2][c]];
                            let lo = [pick[0].0, pick[1].0, pick[2].0];
                            let hi = [pick[0].1, pick[1].1, pick[2].1];
                            total += self.box_sum(&lo, &hi);
                        }
                    }
                }
                Ok(total / vol)
            }
        }
    }

    /// Mean by direct summation, for cross-checking.
    pub fn mean_direct(&self, values: &[f64], node: usize, m: usize) -> f64 {
        let spec = &self.spec;
        let d = spec.d;
        let n = spec.per_axis() as i64;
        let idx = spec.index(node);
        let w = 2 * m as i64 + 1;
        let mut total = 0.0;
        let count = w.pow(d as u32);
        for off in 0..count {
            let mut rem = off;
            let mut j = [0usize; 3];
            let mut outside = false;
            for k in 0..d {
                let o = rem % w - m as i64;
                rem /= w;
                let mut v = idx[k] as i64 + o;
                if spec.boundary == IdeBoundary::Periodic {
                    v = v.rem_euclid(n);
                } else if v < 0 || v >= n {
                    outside = true;
                }
                j[k] = v.max(0) as usize;
            }
            total += if outside {
                self.outside
            } else {
                values[spec.node(&j)]
            };
        }
        total / count as f64
    }
}

/// Sapling and tree densities on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub spec: GridSpec,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

/// Which density a kernel averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    S,
    T,
    G,
}

impl Field {
    pub fn new(spec: GridSpec, s: Vec<f64>, t: Vec<f64>) -> Result<Self, IdeError> {
        let n = spec.num_nodes();
        for v in [&s, &t] {
            if v.len() != n {
                return Err(IdeError::Length {
                    got: v.len(),
                    expected: n,
                });
            }
        }
        let f = Field { spec, s, t };
        f.check_simplex()?;
        Ok(f)
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.num_nodes();
        Field {
            spec,
            s: vec![0.0; n],
            t: vec![0.0; n],
        }
    }

    pub fn uniform(spec: GridSpec, s: f64, t: f64) -> Result<Self, IdeError> {
        let n = spec.num_nodes();
        Self::new(spec, vec![s; n], vec![t; n])
    }

    pub fn grass(&self, node: usize) -> f64 {
        1.0 - self.s[node] - self.t[node]
    }

    pub fn check_simplex(&self) -> Result<(), IdeError> {
        for node in 0..self.s.len() {
            let (s, t) = (self.s[node], self.t[node]);
            let ok = s.is_finite()
                && t.is_finite()
                && s >= -SIMPLEX_SLACK
                && t >= -SIMPLEX_SLACK
                && s + t <= 1.0 + SIMPLEX_SLACK;
            if !ok {
                return Err(IdeError::InvariantBreach { node, s, t });
            }
        }
        Ok(())
    }

    pub fn averager(&self, c: Component) -> BoxAverager {
        match c {
            Component::S => BoxAverager::new(&self.spec, &self.s, 0.0),
            Component::T => BoxAverager::new(&self.spec, &self.t, 0.0),
            Component::G => {
                let g: Vec<f64> = (0..self.s.len()).map(|i| self.grass(i)).collect();
                BoxAverager::new(&self.spec, &g, 1.0)
            }
        }
    }

    /// Mean of one component over `x + [-r, r]^d` at `node`. Builds a
    /// summed-area table each call; use [`Field::averager`] for many queries.
    pub fn box_average(&self, c: Component, node: usize, r: f64) -> Result<f64, IdeError> {
        self.averager(c).mean(node, self.spec.window_radius(r))
    }

    /// Nodewise order on `(S + T, T)`.
    pub fn dominates(&self, other: &Field) -> bool {
        (0..self.s.len())
            .all(|i| self.s[i] + self.t[i] >= other.s[i] + other.t[i] && self.t[i] >= other.t[i])
    }

    /// Largest nodewise deviation from mirror symmetry.
    pub fn asymmetry(&self) -> f64 {
        (0..self.s.len())
            .map(|i| {
                let j = self.spec.mirror(i);
                (self.s[i] - self.s[j])
                    .abs()
                    .max((self.t[i] - self.t[j]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Binary snapshot: one text header line, then `S` and `T` as
    /// little-endian `f64`.
    pub fn to_snapshot(&self) -> Vec<u8> {
        let b = match self.spec.boundary {
            IdeBoundary::Grass => "grass",
            IdeBoundary::Periodic => "periodic",
        };
        let header = format!(
            "SGIDE 1 d={} h={:e} half_nodes={} extent={:e} boundary={}\n",
            self.spec.d,
            self.spec.h,
            self.spec.half_nodes,
            self.spec.half_width(),
            b
        );
        let mut out = header.into_bytes();
        for v in self.s.iter().chain(&self.t) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, IdeError> {
        let bad = |m: &str| IdeError::Snapshot(m.to_string());
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not utf-8"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("SGIDE") || parts.next() != Some("1") {
            return Err(bad("bad magic or version"));
        }
        let (mut d, mut h, mut half, mut boundary) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("bad header field"))?;
            match k {
                "d" => d = v.parse::<usize>().ok(),
                "h" => h = v.parse::<f64>().ok(),
                "half_nodes" => half = v.parse::<usize>().ok(),
                "boundary" => {
                    boundary = match v {
                        "grass" => Some(IdeBoundary::Grass),
                        "periodic" => Some(IdeBoundary::Periodic),
                        _ => None,
                    }
                }
                _ => {}
            }
        }
        let (Some(d), Some(h), Some(half), Some(boundary)) = (d, h, half, boundary) else {
            return Err(bad("incomplete header"));
        };
        let spec = GridSpec::new(d, h, half, boundary)?;
        let n = spec.num_nodes();
        let body = &bytes[nl + 1..];
        if body.len() != 16 * n {
            return Err(bad("body length does not match the grid"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Field::new(spec, vals[..n].to_vec(), vals[n..].to_vec())
    }

    /// CSV of `x, S, T, G` along the first axis through the origin.
    pub fn csv_slice(&self) -> String {
        let mut out = String::from("x,S,T,G\n");
        let n = self.spec.per_axis();
        let mut idx = [self.spec.half_nodes; 3];
        for i in 0..n {
            idx[0] = i;
            let node = self.spec.node(&idx);
            let x = (i as f64 - self.spec.half_nodes as f64) * self.spec.h;
            out.push_str(&format!(
                "{},{},{},{}\n",
                x,
                self.s[node],
                self.t[node],
                self.grass(node)
            ));
        }
        out
    }
}

/// Largest admissible Euler step, `0.1 / (beta + mu + nu + omega_max)`.
pub fn max_stable_dt(p: &RateParams) -> f64 {
    0.1 / p.rate_sum()
}

/// Right-hand side `(dS/dt, dT/dt)` at every node.
pub fn ide_rhs(f: &Field, p: &RateParams, kappa: f64) -> Result<(Vec<f64>, Vec<f64>), IdeError> {
    let spec = f.spec;
    let avg_t = f.averager(Component::T);
    let avg_g = f.averager(Component::G);
    let m1 = spec.window_radius(1.0);
    let mk = spec.window_radius(kappa);
    // width checks once, so the parallel map cannot fail
    avg_t.mean(0, m1)?;
    avg_g.mean(0, mk)?;
    let (ds, dt): (Vec<f64>, Vec<f64>) = (0..spec.num_nodes())
        .into_par_iter()
        .map(|i| {
            let dt1 = avg_t.mean(i, m1).unwrap();
            let dgk = avg_g.mean(i, mk).unwrap();
            let omega = p.growth.rate(dgk);
            let (s, t) = (f.s[i], f.t[i]);
            let g = 1.0 - s - t;
            (
                p.beta * dt1 * g - p.mu * s - omega * s,
                omega * s - p.nu * t,
            )
        })
        .unzip();
    Ok((ds, dt))
}

/// One explicit Euler step.
pub fn step_ide(f: &Field, p: &RateParams, kappa: f64, dt: f64) -> Result<Field, IdeError> {
    let max = max_stable_dt(p);
    if !(dt > 0.0 && dt <= max * (1.0 + 1e-12)) {
        return Err(IdeError::StepTooLarge { dt, max });
    }
    let (ds, dtt) = ide_rhs(f, p, kappa)?;
    let s = f.s.iter().zip(&ds).map(|(a, b)| a + dt * b).collect();
    let t = f.t.iter().zip(&dtt).map(|(a, b)| a + dt * b).collect();
    let next = Field { spec: f.spec, s, t };
    next.check_simplex()?;
    Ok(next)
}

/// Integrates to `t_end` with steps of at most `dt`, keeping every
/// `sample_every`-th field (plus the initial and final ones).
pub fn integrate_ide(
    f0: &Field,
    p: &RateParams,
    kappa: f64,
    dt: f64,
    t_end: f64,
    sample_every: usize,
) -> Result<Vec<(f64, Field)>, IdeError> {
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if steps > 0 { t_end / steps as f64 } else { dt };
    let mut out = vec![(0.0, f0.clone())];
    let mut f = f0.clone();
    for k in 1..=steps {
        f = step_ide(&f, p, kappa, h)?;
        if k % sample_every.max(1) == 0 || k == steps {
            out.push((k as f64 * h, f.clone()));
        }
    }
    Ok(out)
}

/// Constants of the trapezoidal test functions and the block argument built
/// on them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdeConstants {
    pub d: usize,
    pub kappa: f64,
    pub sigma0: f64,
    pub gamma0: f64,
    pub t0: f64,
    pub s0: f64,
    /// Outer radius `max(4, 4 kappa)`.
    pub m: f64,
    pub eps_t1: f64,
    pub eps_t2: f64,
    /// Ramp width, `min(eps_t1, eps_t2)`.
    pub eps_ramp: f64,
    pub eps1: f64,
    pub ledger: ExtendedLedger,
}

/// Constants for the stochastic block iteration, reported only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedLedger {
    pub pim1: f64,
    pub pim2: f64,
    pub pim3: f64,
    pub eps_pim: f64,
    pub pur1: f64,
    pub delta_pur: f64,
    pub c_lip: f64,
    pub eps_box: f64,
    pub t_block: f64,
    pub c_block: f64,
    pub m_block: f64,
}

fn step_parts(p: &RateParams) -> Result<(f64, f64), IdeError> {
    match p.growth {
        Growth::Step { omega0, delta0, .. } => Ok((omega0, delta0)),
        Growth::Constant { .. } => Err(IdeError::HypothesisFails(
            "growth must be a step function".into(),
        )),
    }
}

pub fn ide_constants(p: &RateParams, kappa: f64, d: usize) -> Result<IdeConstants, IdeError> {
    if !(1..=3).contains(&d) {
        return Err(IdeError::Dimension(d));
    }
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(IdeError::HypothesisFails(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let (w0, delta0) = step_parts(p)?;
    let (beta, mu, nu) = (p.beta, p.mu, p.nu);
    let df = d as f64;
    let two_d = 2f64.powi(d as i32);
    if !(beta * w0 > two_d * nu * (mu + w0)) {
        return Err(IdeError::HypothesisFails(format!(
            "need beta*omega0 > 2^d nu (mu + omega0): {} <= {}",
            beta * w0,
            two_d * nu * (mu + w0)
        )));
    }
    let sigma_sup = 1.0 - two_d * nu * (mu + w0) / (beta * w0);
    let sigma0 = 0.5 * sigma_sup;
    let upper = beta * (1.0 - sigma0) / (two_d * (mu + w0));
    let gamma0 = 0.5 * (nu / w0 + upper);
    let t0 = sigma0 / (1.0 + gamma0);
    let s0 = gamma0 * t0;
    if !(delta0 < s0 / two_d) {
        return Err(IdeError::HypothesisFails(format!(
            "need delta0 < 2^-d S0: {delta0} >= {}",
            s0 / two_d
        )));
    }
    let m = 4f64.max(4.0 * kappa);
    let eps_t1 = kappa * (1.0 - two_d * delta0 / s0) / (4.0 * df);
    let eps_t2 = (1.0 - two_d * (mu + w0) * gamma0 / (beta * (1.0 - sigma0))) / (6.0 * df);
    let eps_ramp = eps_t1.min(eps_t2);
    let eps1 = 0.25
        * (w0 * t0 * (gamma0 - nu / w0))
            .min(t0 * (mu + w0) * ((1.0 - 3.0 * df * eps_t2) * upper - gamma0));

    let pim1 = (s0 / two_d - delta0) / (8.0 * df);
    let pim2 = (s0 * (1.0 - df * eps_ramp) - two_d * delta0) / (20.0 * df * s0 + 4.0 * two_d * df);
    let pim3 = two_d / 2.0 * eps1 / (5.0 * df * t0 * (1.0 - s0 - t0) * beta);
    let eps_pim = pim1.min(pim2).min(pim3);
    let pur1 =
        (s0 / two_d * (1.0 - df * eps_ramp - 10.0 * df * eps_pim) - delta0 - 4.0 * df * eps_pim)
            / 4.0;
    let rates = beta + w0 + mu;
    let delta_pur = pur1
        .min(eps1 / (2.0 * (w0 + nu)))
        .min(eps1 / (2.0 * (2.0 + 3.0 * beta + w0 + mu)));
    let c_lip = s0.max(t0) / eps_ramp;
    let eps_box = (delta_pur * eps1 / (16.0 * rates * c_lip)).min(eps_pim / 2.0);
    let t_block = delta_pur / (2.0 * rates);
    let c_block = delta_pur * eps1 / (8.0 * rates);
    let m_block = (df + 1.0) / t_block;
    let ledger = ExtendedLedger {
        pim1,
        pim2,
        pim3,
        eps_pim,
        pur1,
        delta_pur,
        c_lip,
        eps_box,
        t_block,
        c_block,
        m_block,
    };
    let c = IdeConstants {
        d,
        kappa,
        sigma0,
        gamma0,
        t0,
        s0,
        m,
        eps_t1,
        eps_t2,
        eps_ramp,
        eps1,
        ledger,
    };
    if !(eps_ramp > 0.0 && eps1 > 0.0) {
        return Err(IdeError::HypothesisFails(format!(
            "nonpositive constants: eps_ramp={eps_ramp}, eps1={eps1}"
        )));
    }
    Ok(c)
}

/// Trapezoid with plateau `height` on `B(0, r_in)` falling linearly in
/// the sup norm to 0 at `r_out`.
fn trapezoid(r: f64, r_in: f64, r_out: f64, height: f64) -> f64 {
    if r <= r_in {
        height
    } else if r >= r_out {
        0.0
    } else {
        height * (r_out - r) / (r_out - r_in)
    }
}

/// Initial data: `S` ramps from `S0` on `B(0, M-eps)` to 0 at `M`; `T`
/// ramps from `T0` on `B(0, M-3eps)` to 0 at `M-2eps`.
pub fn build_test_functions(c: &IdeConstants, spec: &GridSpec) -> Result<Field, IdeError> {
    if spec.d != c.d {
        return Err(IdeError::Dimension(spec.d));
    }
    let eps = c.eps_ramp;
    if spec.h > eps / 4.0 {
        return Err(IdeError::GridTooCoarse { h: spec.h, eps });
    }
    let need = c.m + c.kappa.max(1.0) + 1.0;
    if spec.half_width() + 1e-12 < need {
        return Err(IdeError::GridTooSmall {
            have: spec.half_width(),
            need,
        });
    }
    let n = spec.num_nodes();
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for i in 0..n {
        let r = spec.sup_norm(i);
        s[i] = trapezoid(r, c.m - eps, c.m, c.s0);
        t[i] = trapezoid(r, c.m - 3.0 * eps, c.m - 2.0 * eps, c.t0);
    }
    Field::new(*spec, s, t)
}

/// Largest finite-difference slope of one component between neighbouring
/// nodes along any axis.
pub fn max_slope(f: &Field, c: Component) -> f64 {
    let spec = f.spec;
    let n = spec.per_axis();
    let vals = |i: usize| match c {
        Component::S => f.s[i],
        Component::T => f.t[i],
        Component::G => f.grass(i),
    };
    let mut best = 0.0f64;
    for i in 0..spec.num_nodes() {
        let idx = spec.index(i);
        for k in 0..spec.d {
            if idx[k] + 1 < n {
                let mut j = idx;
                j[k] += 1;
                let slope = (vals(spec.node(&j)) - vals(i)).abs() / spec.h;
                best = best.max(slope);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheckReport {
    pub min_deriv_s: f64,
    pub min_deriv_t: f64,
    /// `4 eps1`.
    pub threshold: f64,
    pub tol: f64,
    /// `omega(DkG) = omega0` at every node of `B(0, M)`.
    pub high_growth_everywhere: bool,
    pub pass: bool,
}

/// Evaluates the right-hand side at `t = 0` on `B(0, M)` (for `S`) and
/// `B(0, M - 2 eps)` (for `T`).
pub fn verify_growth_condition(
    f: &Field,
    c: &IdeConstants,
    p: &RateParams,
    kappa: f64,
) -> Result<GrowthCheckReport, IdeError> {
    let (w0, _) = step_parts(p)?;
    let (ds, dt) = ide_rhs(f, p, kappa)?;
    let avg_g = f.averager(Component::G);
    let mk = f.spec.window_radius(kappa);
    let slack = 1e-9 * f.spec.h;
    let (mut min_s, mut min_t) = (f64::INFINITY, f64::INFINITY);
    let mut high = true;
    for i in 0..f.spec.num_nodes() {
        let r = f.spec.sup_norm(i);
        if r <= c.m + slack {
            min_s = min_s.min(ds[i]);
            high &= p.growth.rate(avg_g.mean(i, mk)?) == w0;
        }
        if r <= c.m - 2.0 * c.eps_ramp + slack {
            min_t = min_t.min(dt[i]);
        }
    }
    let tol = 10.0 * f.spec.h * (p.beta + p.mu + p.nu + w0);
    let threshold = 4.0 * c.eps1;
    let pass = high && min_s >= threshold - tol && min_t >= threshold - tol;
    Ok(GrowthCheckReport {
        min_deriv_s: min_s,
        min_deriv_t: min_t,
        threshold,
        tol,
        high_growth_everywhere: high,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontReport {
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    /// Least-squares slope of radius against time.
    pub slope: Option<f64>,
}

/// Sup-norm radius of `{T > level}` per sample (0 when empty).
pub fn front_metrics(samples: &[(f64, Field)], level: f64) -> FrontReport {
    let times: Vec<f64> = samples.iter().map(|(t, _)| *t).collect();
    let radii: Vec<f64> = samples
        .iter()
        .map(|(_, f)| {
            (0..f.spec.num_nodes())
                .filter(|&i| f.t[i] > level)
                .map(|i| f.spec.sup_norm(i))
                .fold(0.0, f64::max)
        })
        .collect();
    FrontReport {
        slope: ls_slope(&times, &radii),
        times,
        radii,
    }
}

fn ls_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{euler_step, GstState};
    use crate::rng::sim_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn example() -> RateParams {
        RateParams::new(10.0, 0.5, 0.5, Growth::step(1.0, 0.2, 0.05)).unwrap()
    }

    fn random_field<R: Rng>(spec: GridSpec, rng: &mut R) -> Field {
        let n = spec.num_nodes();
        let mut s = vec![0.0; n];
        let mut t = vec![0.0; n];
        for i in 0..n {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            s[i] = a * (1.0 - b);
            t[i] = (1.0 - a) * rng.random::<f64>() * (1.0 - s[i]).min(1.0);
            if s[i] + t[i] > 1.0 {
                t[i] = 1.0 - s[i];
            }
        }
        Field::new(spec, s, t).unwrap()
    }

    #[test]
    fn constant_grid_averages_to_constant() {
        for boundary in [IdeBoundary::Grass, IdeBoundary::Periodic] {
            let spec = GridSpec::new(2, 0.1, 15, boundary).unwrap();
            let f = Field::uniform(spec, 0.3, 0.2).unwrap();
            let a = f.averager(Component::T);
            let node = spec.origin();
            assert!((a.mean(node, 10).unwrap() - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn half_space_indicator_at_boundary() {
        let spec = GridSpec::new(1, 0.01, 300, IdeBoundary::Grass).unwrap();
        let s = vec![0.0; spec.num_nodes()];
        let t: Vec<f64> = (0..spec.num_nodes())
            .map(|i| if spec.coords(i)[0] < 0.0 { 1.0 } else { 0.0 })
            .collect();
        let f = Field::new(spec, s, t).unwrap();
        let v = f.box_average(Component::T, spec.origin(), 1.0).unwrap();
        assert!((v - 0.5).abs() <= spec.h);
    }

    #[test]
    fn prefix_sums_match_direct_sums() {
        let mut rng = sim_rng(8, &[]);
        for (d, half, m, boundary) in [
            (1, 40, 7, IdeBoundary::Grass),
            (2, 12, 4, IdeBoundary::Grass),
            (2, 12, 5, IdeBoundary::Periodic),
            (3, 5, 2, IdeBoundary::Periodic),
            (3, 5, 3, IdeBoundary::Grass),
        ] {
            let spec = GridSpec::new(d, 0.1, half, boundary).unwrap();
            let f = random_field(spec, &mut rng);
            for c in [Component::S, Component::T, Component::G] {
                let vals: Vec<f64> = (0..spec.num_nodes())
                    .map(|i| match c {
                        Component::S => f.s[i],
                        Component::T => f.t[i],
                        Component::G => f.grass(i),
                    })
                    .collect();
                let a = f.averager(c);
                for node in (0..spec.num_nodes()).step_by(3) {
                    let fast = a.mean(node, m).unwrap();
                    let slow = a.mean_direct(&vals, node, m);
                    assert!(
                        (fast - slow).abs() <= 1e-12 * slow.abs().max(1e-300) + 1e-15,
                        "{fast} vs {slow}"
                    );
                    let (lo, hi) = vals
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                            (a.min(v), b.max(v))
                        });
                    let (lo, hi) = if boundary == IdeBoundary::Grass {
                        let out = if c == Component::G { 1.0 } else { 0.0 };
                        (lo.min(out), hi.max(out))
                    } else {
                        (lo, hi)
                    };
                    assert!(fast >= lo - 1e-12 && fast <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn all_grass_is_fixed() {
        let spec = GridSpec::new(1, 0.05, 100, IdeBoundary::Grass).unwrap();
        let f = Field::zeros(spec);
        let p = example();
        let g = step_ide(&f, &p, 1.0, max_stable_dt(&p)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn uniform_field_step_is_meanfield_step() {
        let p = RateParams::krone(3.0, 0.7, 0.4, 1.3).unwrap();
        let dt = max_stable_dt(&p);
        for &(s, t) in &[(0.2, 0.3), (0.05, 0.9), (0.6, 0.0)] {
            let spec = GridSpec::new(1, 0.1, 40, IdeBoundary::Periodic).unwrap();
            let f = Field::uniform(spec, s, t).unwrap();
            let next = step_ide(&f, &p, 1.5, dt).unwrap();
            let mf = euler_step(&p, &GstState::from_st(s, t), dt);
            for i in 0..spec.num_nodes() {
                assert!((next.s[i] - mf.s).abs() < 1e-14);
                assert!((next.t[i] - mf.t).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn step_size_is_enforced() {
        let spec = GridSpec::new(1, 0.1, 20, IdeBoundary::Grass).unwrap();
        let p = example();
        let err = step_ide(&Field::zeros(spec), &p, 1.0, 2.0 * max_stable_dt(&p)).unwrap_err();
        assert!(matches!(err, IdeError::StepTooLarge { .. }));
    }

    #[test]
    fn front_constants_example() {
        let c = ide_constants(&example(), 1.0, 1).unwrap();
        assert!((c.sigma0 - 0.425).abs() < 1e-12);
        // gamma0 = (0.5 + 10*0.575/3)/2
        assert!((c.gamma0 - (0.5 + 5.75 / 3.0) / 2.0).abs() < 1e-12);
        assert!((c.gamma0 - 1.2083).abs() < 1e-4);
        assert!((c.t0 - 0.19246).abs() < 1e-5);
        assert!((c.s0 - 0.232547).abs() < 1e-6);
        assert!((c.s0 + c.t0 - c.sigma0).abs() < 1e-15);
        assert!((c.s0 / c.t0 - c.gamma0).abs() < 1e-12);
        assert_eq!(c.m, 4.0);
        assert!(c.eps_ramp > 0.0 && c.eps1 > 0.0);
        let l = c.ledger;
        for v in [
            l.pim1,
            l.pim2,
            l.pim3,
            l.eps_pim,
            l.pur1,
            l.delta_pur,
            l.c_lip,
            l.eps_box,
            l.t_block,
            l.c_block,
            l.m_block,
        ] {
            assert!(v.is_finite() && v > 0.0);
        }
    }

    #[test]
    fn front_constants_reject_failed_hypotheses() {
        // beta omega0 = 2 nu (mu + omega0) exactly
        let p = RateParams::new(3.0, 0.5, 1.0, Growth::step(1.0, 0.2, 0.05)).unwrap();
        assert!(matches!(
            ide_constants(&p, 1.0, 1),
            Err(IdeError::HypothesisFails(_))
        ));
        let p = RateParams::new(10.0, 0.5, 0.5, Growth::step(1.0, 0.2, 0.2)).unwrap();
        assert!(matches!(
            ide_constants(&p, 1.0, 1),
            Err(IdeError::HypothesisFails(_))
        ));
        let p = RateParams::krone(10.0, 0.5, 0.5, 1.0).unwrap();
        assert!(ide_constants(&p, 1.0, 1).is_err());
    }

    fn test_grid(c: &IdeConstants) -> GridSpec {
        GridSpec::covering(
            c.d,
            c.eps_ramp / 4.0,
            c.m + c.kappa.max(1.0) + 1.0,
            IdeBoundary::Grass,
        )
        .unwrap()
    }

    #[test]
    fn test_function_profile() {
        let c = ide_constants(&example(), 1.0, 1).unwrap();
        let spec = test_grid(&c);
        let f = build_test_functions(&c, &spec).unwrap();
        let o = spec.origin();
        assert_eq!(f.s[o], c.s0);
        assert_eq!(f.t[o], c.t0);
        assert_eq!(trapezoid(c.m, c.m - c.eps_ramp, c.m, c.s0), 0.0);
        assert!(
            (trapezoid(c.m - c.eps_ramp / 2.0, c.m - c.eps_ramp, c.m, c.s0) - c.s0 / 2.0).abs()
                < 1e-15
        );
        assert!(max_slope(&f, Component::S) <= c.s0 / c.eps_ramp * (1.0 + 1e-9));
        assert!(max_slope(&f, Component::T) <= c.t0 / c.eps_ramp * (1.0 + 1e-9));
        let coarse = GridSpec::covering(1, c.eps_ramp, 7.0, IdeBoundary::Grass).unwrap();
        assert!(matches!(
            build_test_functions(&c, &coarse),
            Err(IdeError::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn growth_check_passes_on_example_and_fails_when_nu_grows() {
        let p = example();
        let c = ide_constants(&p, 1.0, 1).unwrap();
        let f = build_test_functions(&c, &test_grid(&c)).unwrap();
        let rep = verify_growth_condition(&f, &c, &p, 1.0).unwrap();
        assert!(rep.pass, "{rep:?}");
        // tol = 10 h (rates) only discriminates on a fine grid
        let spec = GridSpec::covering(1, 1e-4, c.m + 2.0, IdeBoundary::Grass).unwrap();
        let f = build_test_functions(&c, &spec).unwrap();
        let rep = verify_growth_condition(&f, &c, &p, 1.0).unwrap();
        assert!(rep.pass && rep.tol < rep.threshold, "{rep:?}");
        assert!(rep.high_growth_everywhere);
        // past nu = omega0 S0 / T0 the top of T shrinks
        let nu = 1.05 * c.s0 / c.t0;
        let rep = verify_growth_condition(&f, &c, &p.with_nu(nu), 1.0).unwrap();
        assert!(!rep.pass && rep.min_deriv_t < 0.0, "{rep:?}");
        let rep = verify_growth_condition(&Field::zeros(f.spec), &c, &p, 1.0).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.min_deriv_s, 0.0);
        assert_eq!(rep.min_deriv_t, 0.0);
    }

    #[test]
    fn comparison_principle_on_random_pairs() {
        let p = RateParams::new(6.0, 0.8, 0.4, Growth::step(2.0, 0.5, 0.3)).unwrap();
        let dt = max_stable_dt(&p);
        let mut rng = sim_rng(21, &[]);
        for _ in 0..5 {
            let spec = GridSpec::new(1, 0.1, 40, IdeBoundary::Grass).unwrap();
            let hi = random_field(spec, &mut rng);
            // lower field: shrink U = S + T and T, keeping T <= U
            let mut lo = hi.clone();
            for i in 0..spec.num_nodes() {
                let u = (hi.s[i] + hi.t[i]) * rng.random::<f64>();
                let t = hi.t[i].min(u) * rng.random::<f64>();
                lo.s[i] = u - t;
                lo.t[i] = t;
            }
            assert!(hi.dominates(&lo));
            let (mut a, mut b) = (hi, lo);
            for _ in 0..100 {
                a = step_ide(&a, &p, 1.0, dt).unwrap();
                b = step_ide(&b, &p, 1.0, dt).unwrap();
                assert!(dominates_with_slack(&a, &b, 1e-12));
            }
        }
    }

    fn dominates_with_slack(a: &Field, b: &Field, eps: f64) -> bool {
        (0..a.s.len()).all(|i| a.s[i] + a.t[i] >= b.s[i] + b.t[i] - eps && a.t[i] >= b.t[i] - eps)
    }

    #[test]
    fn symmetric_data_stays_symmetric() {
        let p = RateParams::new(10.0, 0.5, 0.5, Growth::step(1.0, 0.2, 0.02)).unwrap();
        let c = ide_constants(&p, 1.0, 2).unwrap();
        let spec = GridSpec::covering(2, 0.1, 6.0, IdeBoundary::Grass).unwrap();
        let n = spec.num_nodes();
        let s: Vec<f64> = (0..n)
            .map(|i| trapezoid(spec.sup_norm(i), 2.0, 3.0, c.s0))
            .collect();
        let t: Vec<f64> = (0..n)
            .map(|i| trapezoid(spec.sup_norm(i), 1.0, 2.0, c.t0))
            .collect();
        let f = Field::new(spec, s, t).unwrap();
        let run = integrate_ide(&f, &p, 1.0, max_stable_dt(&p), 1.0, 1000).unwrap();
        assert!(run.last().unwrap().1.asymmetry() < 1e-12);
    }

    #[test]
    fn front_of_all_grass_is_zero() {
        let spec = GridSpec::new(1, 0.1, 30, IdeBoundary::Grass).unwrap();
        let p = example();
        let run = integrate_ide(&Field::zeros(spec), &p, 1.0, max_stable_dt(&p), 1.0, 10).unwrap();
        let fr = front_metrics(&run, 0.05);
        assert!(fr.radii.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn snapshot_and_csv() {
        let mut rng = sim_rng(3, &[]);
        let spec = GridSpec::new(2, 0.25, 4, IdeBoundary::Periodic).unwrap();
        let f = random_field(spec, &mut rng);
        let back = Field::from_snapshot(&f.to_snapshot()).unwrap();
        assert_eq!(back, f);
        let csv = f.csv_slice();
        assert_eq!(csv.lines().count(), 1 + spec.per_axis());
        assert!(Field::from_snapshot(b"SGIDE 2 d=1\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn kernels_are_averaging(seed in any::<u64>(), m in 0usize..6) {
            let mut rng = sim_rng(seed, &[]);
            let spec = GridSpec::new(1, 0.1, 20, IdeBoundary::Periodic).unwrap();
            let f = random_field(spec, &mut rng);
            let a = f.averager(Component::S);
            let (lo, hi) = f.s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            for i in 0..spec.num_nodes() {
                let v = a.mean(i, m).unwrap();
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
