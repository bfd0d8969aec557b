//! Finite lattices in `{0,1,2}^sites` with incrementally maintained counts.
//!
//! Coordinates are stored as `0..side` per axis and interpreted as signed
//! offsets from the origin in `(-side/2, side/2]`. Small boxes are
//! `2 l b + (-l, l]^d` with `l = floor(epsilon0 * L)`; the truncated
//! neighbourhood of a site is the union of the small boxes whose every point
//! lies within sup-distance `L` of every point of the site's own box.
//!
//! A [`Configuration`] keeps, per site, the number of 2's in `x + [-L, L]^d`
//! and the number of nonzero sites in `x + [-K, K]^d` (`K = floor(kappa L)`),
//! and per small box the counts `(n1, n2)` together with the number of 2's
//! in the box's truncated neighbourhood. A flip updates all of them by
//! differences.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be 1, 2 or 3, got {0}")]
    Dimension(usize),
    #[error("interaction range L must be at least 1")]
    Range,
    #[error("kappa must be finite and positive, got {0}")]
    Kappa(f64),
    #[error("epsilon0 must lie in (0, 1/4), got {0}")]
    Epsilon(f64),
    #[error("small-box half-width floor(epsilon0*L) is zero (epsilon0={epsilon0}, L={range})")]
    EmptyBox { epsilon0: f64, range: usize },
    #[error("side {side} is not divisible by the small-box width {width}")]
    SideNotTiled { side: usize, width: usize },
    #[error("side {side} is below the minimum {min} for range {range}")]
    SideTooSmall {
        side: usize,
        min: usize,
        range: usize,
    },
    #[error("grass-frozen boundary needs an odd number of boxes per axis, got {0}")]
    BoxParity(usize),
    #[error("state vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("site state {0} is not in {{0,1,2}}")]
    BadState(u8),
    #[error("snapshot is malformed: {0}")]
    Snapshot(&'static str),
}

/// What lies beyond the edge of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Periodic wrap-around.
    #[default]
    Torus,
    /// Sites outside the domain are permanently grass.
    GrassFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborhoodMode {
    /// `B_x(L) = x + [-L, L]^d`.
    FullBox,
    /// Box-determined truncated neighbourhood.
    Truncated,
}

/// Up to two contiguous index ranges along one axis.
#[derive(Debug, Clone, Copy)]
struct Span {
    segs: [(usize, usize); 2],
    len: usize,
}

impl Span {
    fn single(start: usize, end: usize) -> Self {
        Span {
            segs: [(start, end), (0, 0)],
            len: 1,
        }
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.segs[..self.len].iter().flat_map(|&(a, b)| a..b)
    }

    /// Coordinates within distance `r` of stored coordinate `c` on an axis of
    /// `n` cells, signed domain `(-n/2, n/2]`.
    fn around(c: usize, r: usize, n: usize, wrap: bool) -> Self {
        if wrap {
            if 2 * r + 1 >= n {
                return Span::single(0, n);
            }
            let start = (c + n - r % n) % n;
            let end = start + 2 * r + 1;
            if end <= n {
                Span::single(start, end)
            } else {
                Span {
                    segs: [(start, n), (0, end - n)],
                    len: 2,
                }
            }
        } else {
            let s = signed(c, n);
            let n_i = n as i64;
            let lo = (s - r as i64).max(min_signed(n));
            let hi = (s + r as i64).min(n_i / 2);
            if lo >= 0 {
                Span::single(lo as usize, hi as usize + 1)
            } else if hi < 0 {
                Span::single((lo + n_i) as usize, (hi + n_i) as usize + 1)
            } else {
                Span {
                    segs: [((lo + n_i) as usize, n), (0, hi as usize + 1)],
                    len: 2,
                }
            }
        }
    }
}

/// Signed coordinate in `(-n/2, n/2]`.
#[inline]
pub fn signed(c: usize, n: usize) -> i64 {
    if c <= n / 2 {
        c as i64
    } else {
        c as i64 - n as i64
    }
}

#[inline]
fn min_signed(n: usize) -> i64 {
    // smallest integer strictly above -n/2
    -(((n as i64) - 1) / 2)
}

/// Lattice geometry: dimension, interaction ranges, small boxes, domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    d: usize,
    range: usize,
    kappa: f64,
    epsilon0: f64,
    side: usize,
    boundary: Boundary,
    relaxed: bool,
    half_box: usize,
    kappa_range: usize,
    boxes_per_axis: usize,
    box_reach: usize,
}

impl Geometry {
    pub fn new(
        d: usize,
        range: usize,
        kappa: f64,
        epsilon0: f64,
        side: usize,
        boundary: Boundary,
    ) -> Result<Self, LatticeError> {
        Self::build(d, range, kappa, epsilon0, side, boundary, false)
    }

    /// Geometry for exhaustive enumeration on tiny tori: skips the
    /// `side >= 4L` and `epsilon0 < 1/4` requirements. Windows that wrap onto
    /// themselves are treated as sets (each site counted once).
    pub fn relaxed(
        d: usize,
        range: usize,
        kappa: f64,
        epsilon0: f64,
        side: usize,
    ) -> Result<Self, LatticeError> {
        Self::build(d, range, kappa, epsilon0, side, Boundary::Torus, true)
    }

    fn build(
        d: usize,
        range: usize,
        kappa: f64,
        epsilon0: f64,
        side: usize,
        boundary: Boundary,
        relaxed: bool,
    ) -> Result<Self, LatticeError> {
        if !(1..=MAX_DIM).contains(&d) {
            return Err(LatticeError::Dimension(d));
        }
        if range == 0 {
            return Err(LatticeError::Range);
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(LatticeError::Kappa(kappa));
        }
        let eps_ok = epsilon0.is_finite() && epsilon0 > 0.0 && (relaxed || epsilon0 < 0.25);
        if !eps_ok {
            return Err(LatticeError::Epsilon(epsilon0));
        }
        let half_box = (epsilon0 * range as f64).floor() as usize;
        if half_box == 0 {
            return Err(LatticeError::EmptyBox { epsilon0, range });
        }
        let width = 2 * half_box;
        if side == 0 || side % width != 0 {
            return Err(LatticeError::SideNotTiled { side, width });
        }
        // floor(kappa L); never below 1 so the grass window always contains x
        let kappa_range = ((kappa * range as f64).floor() as usize).max(1);
        if !relaxed {
            let min = (4 * range).max(2 * kappa_range + 1);
            if side < min {
                return Err(LatticeError::SideTooSmall { side, min, range });
            }
        }
        let boxes_per_axis = side / width;
        if boundary == Boundary::GrassFrozen && boxes_per_axis % 2 == 0 {
            return Err(LatticeError::BoxParity(boxes_per_axis));
        }
        // sup over a box pair at box offset k is 2l|k| + 2l - 1 <= L
        let box_reach = (range + 1).saturating_sub(width) / width;
        Ok(Geometry {
            d,
            range,
            kappa,
            epsilon0,
            side,
            boundary,
            relaxed,
            half_box,
            kappa_range,
            boxes_per_axis,
            box_reach,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    /// Interaction range `L`.
    pub fn range(&self) -> usize {
        self.range
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }
    pub fn side(&self) -> usize {
        self.side
    }
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }
    /// `l = floor(epsilon0 L)`.
    pub fn half_box(&self) -> usize {
        self.half_box
    }
    /// `K = floor(kappa L)` (at least 1).
    pub fn kappa_range(&self) -> usize {
        self.kappa_range
    }
    pub fn boxes_per_axis(&self) -> usize {
        self.boxes_per_axis
    }
    /// Largest per-axis box offset inside the truncated neighbourhood.
    pub fn box_reach(&self) -> usize {
        self.box_reach
    }
    pub fn num_sites(&self) -> usize {
        self.side.pow(self.d as u32)
    }
    pub fn num_boxes(&self) -> usize {
        self.boxes_per_axis.pow(self.d as u32)
    }
    /// `|B_0| = (2L+1)^d`.
    pub fn window_volume(&self) -> usize {
        (2 * self.range + 1).pow(self.d as u32)
    }
    pub fn kappa_window_volume(&self) -> usize {
        (2 * self.kappa_range + 1).pow(self.d as u32)
    }
    /// `|B^_0| = (2l)^d`.
    pub fn box_capacity(&self) -> usize {
        (2 * self.half_box).pow(self.d as u32)
    }

    fn wraps(&self) -> bool {
        self.boundary == Boundary::Torus
    }

    pub fn coords(&self, x: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        let mut rem = x;
        for k in 0..self.d {
            c[k] = rem % self.side;
            rem /= self.side;
        }
        c
    }

    pub fn site(&self, c: &[usize]) -> usize {
        let mut x = 0;
        for k in (0..self.d).rev() {
            x = x * self.side + c[k];
        }
        x
    }

    pub fn signed_coords(&self, x: usize) -> [i64; MAX_DIM] {
        let c = self.coords(x);
        let mut s = [0; MAX_DIM];
        for k in 0..self.d {
            s[k] = signed(c[k], self.side);
        }
        s
    }

    /// Site at signed coordinates; wraps on the torus, `None` outside the
    /// domain otherwise.
    pub fn site_at(&self, s: &[i64]) -> Option<usize> {
        let n = self.side as i64;
        let mut c = [0usize; MAX_DIM];
        for k in 0..self.d {
            let v = s[k];
            if self.wraps() {
                c[k] = v.rem_euclid(n) as usize;
            } else {
                if v < min_signed(self.side) || v > n / 2 {
                    return None;
                }
                c[k] = v.rem_euclid(n) as usize;
            }
        }
        Some(self.site(&c[..self.d]))
    }

    /// Sup norm of the signed coordinates.
    pub fn sup_norm(&self, x: usize) -> i64 {
        let s = self.signed_coords(x);
        s[..self.d].iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Sup distance between two sites (wrap-aware on the torus).
    pub fn distance(&self, x: usize, y: usize) -> usize {
        let (a, b) = (self.coords(x), self.coords(y));
        (0..self.d)
            .map(|k| {
                let diff = a[k].abs_diff(b[k]);
                if self.wraps() {
                    diff.min(self.side - diff)
                } else {
                    signed(a[k], self.side).abs_diff(signed(b[k], self.side)) as usize
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Signed box coordinate along one axis for a signed site coordinate.
    #[inline]
    fn box_axis(&self, s: i64) -> i64 {
        let l = self.half_box as i64;
        (s + l - 1).div_euclid(2 * l)
    }

    pub fn box_of(&self, x: usize) -> usize {
        let s = self.signed_coords(x);
        let nb = self.boxes_per_axis as i64;
        let mut b = 0usize;
        for k in (0..self.d).rev() {
            b = b * self.boxes_per_axis + self.box_axis(s[k]).rem_euclid(nb) as usize;
        }
        b
    }

    pub fn box_coords(&self, b: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        let mut rem = b;
        for k in 0..self.d {
            c[k] = rem % self.boxes_per_axis;
            rem /= self.boxes_per_axis;
        }
        c
    }

    pub fn box_signed_coords(&self, b: usize) -> [i64; MAX_DIM] {
        let c = self.box_coords(b);
        let mut s = [0; MAX_DIM];
        for k in 0..self.d {
            s[k] = signed(c[k], self.boxes_per_axis);
        }
        s
    }

    pub fn box_at(&self, s: &[i64]) -> usize {
        let nb = self.boxes_per_axis as i64;
        let mut b = 0usize;
        for k in (0..self.d).rev() {
            b = b * self.boxes_per_axis + s[k].rem_euclid(nb) as usize;
        }
        b
    }

    /// Box whose signed coordinates are the negation of those of `b`; the
    /// site map `c -> 1 - c` sends box `b` onto it.
    pub fn reflect_box(&self, b: usize) -> usize {
        let s = self.box_signed_coords(b);
        let mut r = [0i64; MAX_DIM];
        for k in 0..self.d {
            r[k] = -s[k];
        }
        self.box_at(&r[..self.d])
    }

    /// Site map `c -> 1 - c` on every axis.
    pub fn reflect_site(&self, x: usize) -> Option<usize> {
        let s = self.signed_coords(x);
        let mut r = [0i64; MAX_DIM];
        for k in 0..self.d {
            r[k] = 1 - s[k];
        }
        self.site_at(&r[..self.d])
    }

    fn for_each_product(&self, spans: &[Span; MAX_DIM], stride: usize, mut f: impl FnMut(usize)) {
        let one = Span::single(0, 1);
        let s1 = if self.d >= 2 { &spans[1] } else { &one };
        let s2 = if self.d >= 3 { &spans[2] } else { &one };
        let st1 = stride;
        let st2 = stride * stride;
        for c2 in s2.iter() {
            for c1 in s1.iter() {
                let base = c2 * st2 + c1 * st1;
                for c0 in spans[0].iter() {
                    f(base + c0);
                }
            }
        }
    }

    /// Calls `f` for every in-domain site of `x + [-r, r]^d`, each once.
    pub fn for_each_in_window(&self, x: usize, r: usize, f: impl FnMut(usize)) {
        let c = self.coords(x);
        let mut spans = [Span::single(0, 1); MAX_DIM];
        for k in 0..self.d {
            spans[k] = Span::around(c[k], r, self.side, self.wraps());
        }
        self.for_each_product(&spans, self.side, f);
    }

    /// Calls `f` for every box in the truncated neighbourhood of box `b`.
    pub fn for_each_neighbor_box(&self, b: usize, f: impl FnMut(usize)) {
        let c = self.box_coords(b);
        let mut spans = [Span::single(0, 1); MAX_DIM];
        for k in 0..self.d {
            spans[k] = Span::around(c[k], self.box_reach, self.boxes_per_axis, self.wraps());
        }
        self.for_each_product(&spans, self.boxes_per_axis, f);
    }

    pub fn neighbor_boxes(&self, b: usize) -> Vec<usize> {
        let mut v = Vec::new();
        self.for_each_neighbor_box(b, |y| v.push(y));
        v
    }

    /// Calls `f` for every site of box `b`.
    pub fn for_each_site_in_box(&self, b: usize, f: impl FnMut(usize)) {
        let bs = self.box_signed_coords(b);
        let l = self.half_box as i64;
        let mut spans = [Span::single(0, 1); MAX_DIM];
        for k in 0..self.d {
            // box covers signed coordinates 2 l b - l + 1 ..= 2 l b + l
            let lo = (2 * l * bs[k] - l + 1).rem_euclid(self.side as i64) as usize;
            let end = lo + 2 * self.half_box;
            spans[k] = if end <= self.side {
                Span::single(lo, end)
            } else {
                Span {
                    segs: [(lo, self.side), (0, end - self.side)],
                    len: 2,
                }
            };
        }
        self.for_each_product(&spans, self.side, f);
    }

    pub fn box_sites(&self, b: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.box_capacity());
        self.for_each_site_in_box(b, |x| v.push(x));
        v
    }

    /// Per-axis box offset between two boxes (wrap-aware on the torus).
    fn box_distance(&self, a: usize, b: usize) -> usize {
        let (ca, cb) = (self.box_coords(a), self.box_coords(b));
        let nb = self.boxes_per_axis;
        (0..self.d)
            .map(|k| {
                let diff = ca[k].abs_diff(cb[k]);
                if self.wraps() {
                    diff.min(nb - diff)
                } else {
                    signed(ca[k], nb).abs_diff(signed(cb[k], nb)) as usize
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// `y` lies in the truncated neighbourhood of `x`.
    pub fn in_truncated_neighborhood(&self, x: usize, y: usize) -> bool {
        self.box_distance(self.box_of(x), self.box_of(y)) <= self.box_reach
    }

    pub fn neighborhood(&self, x: usize, mode: NeighborhoodMode) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        match mode {
            NeighborhoodMode::FullBox => self.for_each_in_window(x, self.range, |y| {
                out.insert(y);
            }),
            NeighborhoodMode::Truncated => {
                for b in self.neighbor_boxes(self.box_of(x)) {
                    self.for_each_site_in_box(b, |y| {
                        out.insert(y);
                    });
                }
            }
        }
        out
    }

    pub fn truncated_neighborhood(&self, x: usize) -> BTreeSet<usize> {
        self.neighborhood(x, NeighborhoodMode::Truncated)
    }

    /// Radius `floor((1 - 4 epsilon0) L)` of the inner ball guaranteed to lie
    /// inside every truncated neighbourhood.
    pub fn inner_radius(&self) -> usize {
        ((1.0 - 4.0 * self.epsilon0) * self.range as f64)
            .floor()
            .max(0.0) as usize
    }

    /// Checks `B_x((1-4 eps0) L) ⊆ N(x) ⊆ B_x(L)` for one site.
    pub fn check_sandwich(&self, x: usize) -> bool {
        let n = self.truncated_neighborhood(x);
        let mut inner_ok = true;
        self.for_each_in_window(x, self.inner_radius(), |y| inner_ok &= n.contains(&y));
        let outer = self.neighborhood(x, NeighborhoodMode::FullBox);
        inner_ok && n.is_subset(&outer)
    }
}

/// Lattice state with maintained window and small-box counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    geom: Geometry,
    state: Vec<u8>,
    window2: Vec<u32>,
    nonzero_kappa: Vec<u32>,
    box_n: Vec<[u32; 2]>,
    box_nbhd_n2: Vec<u32>,
    type_counts: [usize; 3],
}

impl Configuration {
    /// All-grass configuration.
    pub fn empty(geom: &Geometry) -> Self {
        Configuration {
            geom: geom.clone(),
            state: vec![0; geom.num_sites()],
            window2: vec![0; geom.num_sites()],
            nonzero_kappa: vec![0; geom.num_sites()],
            box_n: vec![[0, 0]; geom.num_boxes()],
            box_nbhd_n2: vec![0; geom.num_boxes()],
            type_counts: [geom.num_sites(), 0, 0],
        }
    }

    pub fn uniform(geom: &Geometry, value: u8) -> Result<Self, LatticeError> {
        Self::from_states(geom, vec![value; geom.num_sites()])
    }

    pub fn from_states(geom: &Geometry, state: Vec<u8>) -> Result<Self, LatticeError> {
        if state.len() != geom.num_sites() {
            return Err(LatticeError::Length {
                got: state.len(),
                expected: geom.num_sites(),
            });
        }
        if let Some(&bad) = state.iter().find(|&&v| v > 2) {
            return Err(LatticeError::BadState(bad));
        }
        let mut c = Configuration::empty(geom);
        c.state = state;
        c.recount();
        Ok(c)
    }

    /// Sets every site in `sites` to `value` (sites not listed stay grass).
    pub fn with_sites(geom: &Geometry, sites: &[usize], value: u8) -> Result<Self, LatticeError> {
        let mut v = vec![0u8; geom.num_sites()];
        for &x in sites {
            v[x] = value;
        }
        Self::from_states(geom, v)
    }

    fn recount(&mut self) {
        let fresh = self.brute_force_counts();
        self.window2 = fresh.window2;
        self.nonzero_kappa = fresh.nonzero_kappa;
        self.box_n = fresh.box_n;
        self.box_nbhd_n2 = fresh.box_nbhd_n2;
        self.type_counts = fresh.type_counts;
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn state(&self, x: usize) -> u8 {
        self.state[x]
    }

    pub fn states(&self) -> &[u8] {
        &self.state
    }

    pub fn type_counts(&self) -> [usize; 3] {
        self.type_counts
    }

    pub fn nonzero_count(&self) -> usize {
        self.type_counts[1] + self.type_counts[2]
    }

    pub fn is_all_grass(&self) -> bool {
        self.nonzero_count() == 0
    }

    /// Number of 2's in `x + [-L, L]^d`.
    #[inline]
    pub fn window2_count(&self, x: usize) -> u32 {
        self.window2[x]
    }

    /// Number of grass sites in `x + [-K, K]^d`, counting sites beyond a
    /// frozen boundary as grass.
    #[inline]
    pub fn grass_count_kappa(&self, x: usize) -> u32 {
        self.geom.kappa_window_volume() as u32 - self.nonzero_kappa[x]
    }

    /// `f_0(x, kappa L)`.
    #[inline]
    pub fn grass_fraction_kappa(&self, x: usize) -> f64 {
        self.grass_count_kappa(x) as f64 / self.geom.kappa_window_volume() as f64
    }

    /// `f_2(x, L)`.
    #[inline]
    pub fn tree_fraction(&self, x: usize) -> f64 {
        self.window2[x] as f64 / self.geom.window_volume() as f64
    }

    /// Number of 2's in the truncated neighbourhood of `x`.
    #[inline]
    pub fn truncated_n2(&self, x: usize) -> u32 {
        self.box_nbhd_n2[self.geom.box_of(x)]
    }

    /// Number of 2's in the truncated neighbourhood of box `b`.
    #[inline]
    pub fn box_neighborhood_n2(&self, b: usize) -> u32 {
        self.box_nbhd_n2[b]
    }

    /// `(n1, n2)` of small box `b`.
    #[inline]
    pub fn box_counts(&self, b: usize) -> (u32, u32) {
        let [n1, n2] = self.box_n[b];
        (n1, n2)
    }

    pub fn all_box_counts(&self) -> Vec<(u32, u32)> {
        self.box_n.iter().map(|&[a, b]| (a, b)).collect()
    }

    /// Count of `kind` in `x + [-r, r]^d` by direct scan. Out-of-domain
    /// sites, and on a self-wrapping window the missing repeats, count as
    /// grass.
    pub fn slow_count(&self, x: usize, kind: u8, r: usize) -> usize {
        let mut inside = 0usize;
        let mut hits = 0usize;
        self.geom.for_each_in_window(x, r, |y| {
            inside += 1;
            if self.state[y] == kind {
                hits += 1;
            }
        });
        if kind == 0 {
            hits += (2 * r + 1).pow(self.geom.d as u32) - inside;
        }
        hits
    }

    /// Fraction of `kind` in `x + [-r, r]^d`. The two maintained windows
    /// (`kind = 2, r = L` and `kind = 0, r = K`) are answered from stored
    /// counts, anything else by recounting.
    pub fn local_fraction(&self, x: usize, kind: u8, r: usize) -> f64 {
        let vol = (2 * r + 1).pow(self.geom.d as u32) as f64;
        if kind == 2 && r == self.geom.range {
            return self.window2[x] as f64 / vol;
        }
        if kind == 0 && r == self.geom.kappa_range {
            return self.grass_count_kappa(x) as f64 / vol;
        }
        self.slow_count(x, kind, r) as f64 / vol
    }

    /// Sets site `x` to `new_state`, updating every maintained count.
    /// Returns the previous state. Setting a site to its current value is a
    /// no-op.
    pub fn apply_flip(&mut self, x: usize, new_state: u8) -> u8 {
        assert!(new_state <= 2, "site states are 0, 1, 2");
        let old = self.state[x];
        if old == new_state {
            return old;
        }
        self.state[x] = new_state;
        self.type_counts[old as usize] -= 1;
        self.type_counts[new_state as usize] += 1;

        let b = self.geom.box_of(x);
        if old > 0 {
            self.box_n[b][old as usize - 1] -= 1;
        }
        if new_state > 0 {
            self.box_n[b][new_state as usize - 1] += 1;
        }

        let d2 = (new_state == 2) as i32 - (old == 2) as i32;
        if d2 != 0 {
            let window2 = &mut self.window2;
            self.geom.for_each_in_window(x, self.geom.range, |y| {
                window2[y] = window2[y].wrapping_add_signed(d2);
            });
            let nbhd = &mut self.box_nbhd_n2;
            self.geom.for_each_neighbor_box(b, |c| {
                nbhd[c] = nbhd[c].wrapping_add_signed(d2);
            });
        }
        let dnz = (new_state != 0) as i32 - (old != 0) as i32;
        if dnz != 0 {
            let nz = &mut self.nonzero_kappa;
            self.geom.for_each_in_window(x, self.geom.kappa_range, |y| {
                nz[y] = nz[y].wrapping_add_signed(dnz);
            });
        }
        old
    }

    fn brute_force_counts(&self) -> CountSnapshot {
        let g = &self.geom;
        let n = g.num_sites();
        let mut window2 = vec![0u32; n];
        let mut nonzero_kappa = vec![0u32; n];
        for x in 0..n {
            let (mut w2, mut nz) = (0u32, 0u32);
            g.for_each_in_window(x, g.range, |y| w2 += (self.state[y] == 2) as u32);
            g.for_each_in_window(x, g.kappa_range, |y| nz += (self.state[y] != 0) as u32);
            window2[x] = w2;
            nonzero_kappa[x] = nz;
        }
        let mut box_n = vec![[0u32; 2]; g.num_boxes()];
        for b in 0..g.num_boxes() {
            g.for_each_site_in_box(b, |y| match self.state[y] {
                1 => box_n[b][0] += 1,
                2 => box_n[b][1] += 1,
                _ => {}
            });
        }
        let box_nbhd_n2 = (0..g.num_boxes())
            .map(|b| {
                let mut s = 0;
                g.for_each_neighbor_box(b, |c| s += box_n[c][1]);
                s
            })
            .collect();
        let mut type_counts = [0usize; 3];
        for &v in &self.state {
            type_counts[v as usize] += 1;
        }
        CountSnapshot {
            window2,
            nonzero_kappa,
            box_n,
            box_nbhd_n2,
            type_counts,
        }
    }

    /// Number of maintained counts that disagree with a full recount.
    pub fn count_discrepancies(&self) -> usize {
        let f = self.brute_force_counts();
        let diff = |a: &[u32], b: &[u32]| a.iter().zip(b).filter(|(x, y)| x != y).count();
        diff(&self.window2, &f.window2)
            + diff(&self.nonzero_kappa, &f.nonzero_kappa)
            + self
                .box_n
                .iter()
                .zip(&f.box_n)
                .filter(|(a, b)| a != b)
                .count()
            + diff(&self.box_nbhd_n2, &f.box_nbhd_n2)
            + (self.type_counts != f.type_counts) as usize
    }

    /// Pointwise `self >= other`.
    pub fn dominates(&self, other: &Configuration) -> bool {
        self.state.iter().zip(&other.state).all(|(a, b)| a >= b)
    }

    /// Serialises to the binary snapshot format (see [`Configuration::from_snapshot`]).
    pub fn to_snapshot(&self) -> Vec<u8> {
        let g = &self.geom;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(g.d as u8);
        out.push(match g.boundary {
            Boundary::Torus => 0,
            Boundary::GrassFrozen => 1,
        });
        out.push(g.relaxed as u8);
        out.extend_from_slice(&(g.side as u32).to_le_bytes());
        out.extend_from_slice(&(g.range as u32).to_le_bytes());
        out.extend_from_slice(&g.kappa.to_bits().to_le_bytes());
        out.extend_from_slice(&g.epsilon0.to_bits().to_le_bytes());
        let runs = run_length_encode(&self.state);
        out.extend_from_slice(&(runs.len() as u64).to_le_bytes());
        for (v, len) in runs {
            out.push(v);
            out.extend_from_slice(&len.to_le_bytes());
        }
        out
    }

    /// Parses a snapshot. Layout (little endian):
    ///
    /// ```text
    /// "SGTC" | version u8 | d u8 | boundary u8 | relaxed u8
    /// side u32 | L u32 | kappa f64 bits | epsilon0 f64 bits
    /// runs u64 | runs x (state u8, length u32)
    /// ```
    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, LatticeError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(LatticeError::Snapshot("bad magic"));
        }
        if r.u8()? != SNAPSHOT_VERSION {
            return Err(LatticeError::Snapshot("unsupported version"));
        }
        let d = r.u8()? as usize;
        let boundary = match r.u8()? {
            0 => Boundary::Torus,
            1 => Boundary::GrassFrozen,
            _ => return Err(LatticeError::Snapshot("bad boundary")),
        };
        let relaxed = r.u8()? != 0;
        let side = r.u32()? as usize;
        let range = r.u32()? as usize;
        let kappa = f64::from_bits(r.u64()?);
        let epsilon0 = f64::from_bits(r.u64()?);
        let geom = Geometry::build(d, range, kappa, epsilon0, side, boundary, relaxed)?;
        let nruns = r.u64()? as usize;
        let mut state = Vec::with_capacity(geom.num_sites());
        for _ in 0..nruns {
            let v = r.u8()?;
            let len = r.u32()? as usize;
            if state.len() + len > geom.num_sites() {
                return Err(LatticeError::Snapshot("runs exceed lattice size"));
            }
            state.extend(std::iter::repeat_n(v, len));
        }
        if r.pos != bytes.len() {
            return Err(LatticeError::Snapshot("trailing bytes"));
        }
        Configuration::from_states(&geom, state)
    }
}

struct CountSnapshot {
    window2: Vec<u32>,
    nonzero_kappa: Vec<u32>,
    box_n: Vec<[u32; 2]>,
    box_nbhd_n2: Vec<u32>,
    type_counts: [usize; 3],
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"SGTC";
const SNAPSHOT_VERSION: u8 = 1;

fn run_length_encode(v: &[u8]) -> Vec<(u8, u32)> {
    let mut runs: Vec<(u8, u32)> = Vec::new();
    for &s in v {
        match runs.last_mut() {
            Some((val, len)) if *val == s && *len < u32::MAX => *len += 1,
            _ => runs.push((s, 1)),
        }
    }
    runs
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LatticeError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(LatticeError::Snapshot("truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, LatticeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, LatticeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, LatticeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sim_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn geom1(range: usize, eps: f64, side: usize) -> Geometry {
        Geometry::new(1, range, 1.0, eps, side, Boundary::Torus).unwrap()
    }

    fn random_config<R: Rng>(g: &Geometry, rng: &mut R) -> Configuration {
        let v = (0..g.num_sites())
            .map(|_| rng.random_range(0..3u8))
            .collect();
        Configuration::from_states(g, v).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(matches!(
            Geometry::new(1, 20, 1.0, 0.0125, 80, Boundary::Torus),
            Err(LatticeError::EmptyBox { .. })
        ));
        assert!(matches!(
            Geometry::new(1, 10, 1.0, 0.1, 30, Boundary::Torus),
            Err(LatticeError::SideTooSmall { .. })
        ));
        assert!(matches!(
            Geometry::new(1, 10, 1.0, 0.2, 42, Boundary::Torus),
            Err(LatticeError::SideNotTiled { .. })
        ));
        assert!(matches!(
            Geometry::new(1, 10, 1.0, 0.1, 40, Boundary::GrassFrozen),
            Err(LatticeError::BoxParity(20))
        ));
        assert!(Geometry::new(1, 10, 1.0, 0.1, 42, Boundary::GrassFrozen).is_ok());
        assert!(matches!(
            Geometry::new(4, 10, 1.0, 0.1, 40, Boundary::Torus),
            Err(LatticeError::Dimension(4))
        ));
        assert!(matches!(
            Geometry::new(1, 10, 1.0, 0.3, 40, Boundary::Torus),
            Err(LatticeError::Epsilon(_))
        ));
    }

    #[test]
    fn small_boxes_tile_the_lattice() {
        for (d, side, boundary) in [
            (1, 48, Boundary::Torus),
            (2, 24, Boundary::Torus),
            (2, 38, Boundary::GrassFrozen),
        ] {
            let g = Geometry::new(d, 6, 1.0, 0.2, side, boundary).unwrap();
            let mut seen = vec![0usize; g.num_sites()];
            for b in 0..g.num_boxes() {
                let sites = g.box_sites(b);
                assert_eq!(sites.len(), g.box_capacity());
                for x in sites {
                    assert_eq!(g.box_of(x), b);
                    seen[x] += 1;
                }
            }
            assert!(seen.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn small_box_definition() {
        // l = 1: box b holds signed coordinates {2b, 2b+1}
        let g = geom1(10, 0.1, 40);
        let origin_box = g.box_of(g.site_at(&[0]).unwrap());
        assert_eq!(g.box_of(g.site_at(&[1]).unwrap()), origin_box);
        assert_ne!(g.box_of(g.site_at(&[-1]).unwrap()), origin_box);
        assert_eq!(g.box_signed_coords(origin_box)[0], 0);
    }

    #[test]
    fn local_fraction_examples() {
        let grass =
            Configuration::empty(&Geometry::new(1, 5, 1.0, 0.2, 40, Boundary::Torus).unwrap());
        for x in 0..40 {
            assert_eq!(grass.local_fraction(x, 0, 5), 1.0);
            assert_eq!(grass.local_fraction(x, 2, 5), 0.0);
        }
        // L = 2 needs epsilon0 = 1/2 for a nonempty box
        let g = Geometry::relaxed(1, 2, 1.0, 0.5, 20).unwrap();
        let c = Configuration::with_sites(&g, &[0], 2).unwrap();
        assert_eq!(c.local_fraction(0, 2, 2), 0.2);
        assert_eq!(c.local_fraction(19, 2, 2), 0.2);
        assert_eq!(c.local_fraction(3, 2, 2), 0.0);
    }

    #[test]
    fn fast_path_matches_recount_on_random_lattice() {
        let g = Geometry::new(2, 10, 1.5, 0.1, 100, Boundary::Torus).unwrap();
        let mut rng = sim_rng(3, &[]);
        let c = random_config(&g, &mut rng);
        for x in 0..g.num_sites() {
            assert_eq!(c.window2_count(x) as usize, c.slow_count(x, 2, g.range()));
            assert_eq!(
                c.grass_count_kappa(x) as usize,
                c.slow_count(x, 0, g.kappa_range())
            );
        }
    }

    #[test]
    fn flip_updates_windows_by_definition() {
        let g = Geometry::new(1, 5, 2.0, 0.2, 40, Boundary::Torus).unwrap();
        let mut c = Configuration::empty(&g);
        let x = 7;
        c.apply_flip(x, 2);
        for y in 0..40 {
            let dist = g.distance(x, y);
            assert_eq!(c.window2_count(y), (dist <= 5) as u32);
            assert_eq!(c.grass_count_kappa(y), 21 - (dist <= 10) as u32);
        }
        let before = Configuration::empty(&g);
        c.apply_flip(x, 0);
        assert_eq!(c, before);
    }

    #[test]
    fn many_random_flips_keep_counts_exact() {
        for boundary in [Boundary::Torus, Boundary::GrassFrozen] {
            let g = Geometry::new(2, 6, 1.5, 0.17, 30, boundary).unwrap();
            let mut rng = sim_rng(11, &[boundary as u64]);
            let mut c = random_config(&g, &mut rng);
            for _ in 0..20_000 {
                let x = rng.random_range(0..g.num_sites());
                let s = (c.state(x) + rng.random_range(1..3u8)) % 3;
                c.apply_flip(x, s);
            }
            assert_eq!(c.count_discrepancies(), 0);
        }
    }

    #[test]
    fn box_counts_examples() {
        let g = Geometry::new(2, 10, 1.0, 0.2, 40, Boundary::Torus).unwrap();
        let mut c = Configuration::empty(&g);
        assert!(c.all_box_counts().iter().all(|&p| p == (0, 0)));
        let b = 5;
        for x in g.box_sites(b) {
            c.apply_flip(x, 2);
        }
        assert_eq!(c.box_counts(b), (0, 16));
        let mut rng = sim_rng(5, &[]);
        let c = random_config(&g, &mut rng);
        for b in 0..g.num_boxes() {
            let (mut n1, mut n2) = (0, 0);
            for x in g.box_sites(b) {
                match c.state(x) {
                    1 => n1 += 1,
                    2 => n2 += 1,
                    _ => {}
                }
            }
            assert_eq!(c.box_counts(b), (n1, n2));
            assert!(n1 + n2 <= g.box_capacity() as u32);
        }
        let total: u32 = c.all_box_counts().iter().map(|&(a, b)| a + b).sum();
        assert_eq!(total as usize, c.nonzero_count());
    }

    #[test]
    fn truncated_neighborhood_example() {
        // L = 10, l = 1: boxes within offset 4, i.e. signed sites -8..=9
        let g = geom1(10, 0.1, 40);
        let o = g.site_at(&[0]).unwrap();
        let n = g.truncated_neighborhood(o);
        let expected: BTreeSet<usize> = (-8..=9).map(|s| g.site_at(&[s]).unwrap()).collect();
        assert_eq!(n, expected);
        assert_eq!(g.inner_radius(), 6);
        assert!(g.check_sandwich(o));
        let one = g.site_at(&[1]).unwrap();
        assert_eq!(g.truncated_neighborhood(one), n);
    }

    #[test]
    fn truncated_neighborhood_reflection() {
        let g = Geometry::new(2, 12, 1.0, 0.2, 48, Boundary::Torus).unwrap();
        for x in 0..g.num_sites() {
            let rx = g.reflect_site(x).unwrap();
            let reflected: BTreeSet<usize> = g
                .truncated_neighborhood(x)
                .into_iter()
                .map(|y| g.reflect_site(y).unwrap())
                .collect();
            assert_eq!(reflected, g.truncated_neighborhood(rx));
        }
    }

    #[test]
    fn sandwich_and_symmetry_exhaustive() {
        for (d, range, eps, side, boundary) in [
            (1, 10, 0.1, 40, Boundary::Torus),
            (1, 20, 0.2, 96, Boundary::Torus),
            (1, 9, 0.12, 42, Boundary::GrassFrozen),
            (2, 10, 0.2, 40, Boundary::Torus),
            (2, 8, 0.15, 34, Boundary::GrassFrozen),
        ] {
            let g = Geometry::new(d, range, 1.0, eps, side, boundary).unwrap();
            for x in 0..g.num_sites() {
                assert!(g.check_sandwich(x), "sandwich fails at {x} for {g:?}");
            }
            let n = g.num_sites();
            let step = if d == 1 { 1 } else { 7 };
            for x in (0..n).step_by(step) {
                for y in 0..n {
                    assert_eq!(
                        g.in_truncated_neighborhood(x, y),
                        g.in_truncated_neighborhood(y, x)
                    );
                }
                let listed = g.truncated_neighborhood(x);
                for y in 0..n {
                    assert_eq!(listed.contains(&y), g.in_truncated_neighborhood(x, y));
                }
            }
        }
    }

    #[test]
    fn grass_frozen_windows_count_outside_as_grass() {
        let g = Geometry::new(1, 5, 1.0, 0.2, 22, Boundary::GrassFrozen).unwrap();
        let c = Configuration::uniform(&g, 2).unwrap();
        // signed domain (-11, 11]; site 11 sees 5 sites to the right outside
        let edge = g.site_at(&[11]).unwrap();
        assert_eq!(c.window2_count(edge), 6);
        assert_eq!(c.grass_count_kappa(edge), 5);
        assert!(g.site_at(&[12]).is_none());
        assert!(g.site_at(&[-11]).is_none());
        assert_eq!(c.count_discrepancies(), 0);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        assert!(Configuration::from_snapshot(b"nope").is_err());
        let g = geom1(10, 0.1, 40);
        let mut bytes = Configuration::empty(&g).to_snapshot();
        bytes.push(0);
        assert_eq!(
            Configuration::from_snapshot(&bytes),
            Err(LatticeError::Snapshot("trailing bytes"))
        );
    }

    proptest! {
        #[test]
        fn snapshot_round_trip_is_bit_exact(
            seed in any::<u64>(), d in 1usize..=2, grass in any::<bool>(), kappa in 0.5f64..2.0,
        ) {
            let boundary = if grass { Boundary::GrassFrozen } else { Boundary::Torus };
            let side = if grass { 30 } else { 24 };
            let g = Geometry::new(d, 6, kappa, 0.2 + 1e-3 * kappa, side, boundary).unwrap();
            let mut rng = sim_rng(seed, &[]);
            let v: Vec<u8> = (0..g.num_sites()).map(|_| if rng.random_bool(0.7) { 0 } else { rng.random_range(1..3) }).collect();
            let c = Configuration::from_states(&g, v).unwrap();
            let bytes = c.to_snapshot();
            let back = Configuration::from_snapshot(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_snapshot(), bytes);
        }
    }
}
