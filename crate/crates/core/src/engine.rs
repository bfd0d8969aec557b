//! Event engines.
//!
//! [`EventSchedule`] is the graphical representation: independent Poisson
//! mark streams attached to every site, generated lazily and replayable from
//! a seed. Per site `x`:
//!
//! | stream | rate | effect |
//! |---|---|---|
//! | `V` | `nu` | kills states 1 and 2 |
//! | `U` | `mu - nu` | kills state 1 |
//! | `W` | `omega_min` | grows 1 -> 2 in every process |
//! | `What` | `omega_max - omega_min` | grows 1 -> 2 in the Staver–Levin process when the attached uniform `w` satisfies `w <= (omega(f0) - omega_min)/(omega_max - omega_min)` |
//! | arrow | `beta` | target `y` uniform in `x + [-L, L]^d`; a 2 at `x` turns a 0 at `y` into a 1 (in the truncated process only when `y` is in the truncated neighbourhood of `x`) |
//!
//! The five streams of a site are generated as one superposed stream of rate
//! `mu + omega_max + beta` with a categorical mark, which has the same law.
//!
//! [`run_coupled`] drives the Staver–Levin `chi`, Krone `eta` and truncated
//! `xi` processes off one schedule and asserts `chi >= eta >= xi` at every
//! touched site. [`GillespieSim`] simulates a single model directly with a
//! sum tree of per-site rates.

use crate::lattice::{Configuration, Geometry};
use crate::params::{ParamError, RateParams};
use crate::rng::{exp_sample, sim_rng, site_rng, SimRng, SiteRng};
use crate::sumtree::SumTree;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid rates: {0}")]
    RateInvalid(#[from] ParamError),
    #[error("horizon must be finite and positive, got {0}")]
    Horizon(f64),
    #[error("configurations live on different geometries")]
    GeometryMismatch,
    #[error("initial data not ordered chi >= eta >= xi at site {site}")]
    NotOrdered { site: usize },
    #[error("coupling violated at t={time} site {site}: chi={chi} eta={eta} xi={xi}")]
    CouplingViolation {
        time: f64,
        site: usize,
        chi: u8,
        eta: u8,
        xi: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    StaverLevin,
    Krone,
    Truncated,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::StaverLevin,
        ModelKind::Krone,
        ModelKind::Truncated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::StaverLevin => "staver_levin",
            ModelKind::Krone => "krone",
            ModelKind::Truncated => "truncated",
        }
    }
}

/// Stream identifiers; the discriminant is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    V = 0,
    U = 1,
    W = 2,
    What = 3,
    Arrow = 4,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::V => "V",
            Stream::U => "U",
            Stream::W => "W",
            Stream::What => "What",
            Stream::Arrow => "arrow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkKind {
    /// `V`: kills 1 and 2.
    Death12,
    /// `U`: kills 1.
    Death1,
    /// `W`: unconditional growth.
    Growth,
    /// `What`: conditional growth with variate `w` in `(0, 1]`.
    CondGrowth { w: f64 },
    /// Arrow to `target`; `None` when it points beyond a frozen boundary.
    Arrow { target: Option<usize>, solid: bool },
}

/// One Poisson mark at space-time point `(time, site)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mark {
    pub time: f64,
    pub site: usize,
    pub kind: MarkKind,
}

impl Mark {
    pub fn stream(&self) -> Stream {
        match self.kind {
            MarkKind::Death12 => Stream::V,
            MarkKind::Death1 => Stream::U,
            MarkKind::Growth => Stream::W,
            MarkKind::CondGrowth { .. } => Stream::What,
            MarkKind::Arrow { .. } => Stream::Arrow,
        }
    }

    /// Site whose state the mark may change.
    pub fn touched(&self) -> Option<usize> {
        match self.kind {
            MarkKind::Arrow { target, .. } => target,
            _ => Some(self.site),
        }
    }
}

/// Per-stream rates derived from [`RateParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamRates {
    pub v: f64,
    pub u: f64,
    pub w: f64,
    pub what: f64,
    pub arrow: f64,
}

impl StreamRates {
    pub fn from_params(p: &RateParams) -> Result<Self, ParamError> {
        p.check_death_order()?;
        let (lo, hi) = (p.growth.min_rate(), p.growth.max_rate());
        Ok(StreamRates {
            v: p.nu,
            u: p.mu - p.nu,
            w: lo,
            what: hi - lo,
            arrow: p.beta,
        })
    }

    pub fn total(&self) -> f64 {
        self.v + self.u + self.w + self.what + self.arrow
    }
}

/// Lazily generated graphical representation on a finite lattice.
#[derive(Debug, Clone)]
pub struct EventSchedule {
    geom: Geometry,
    params: RateParams,
    rates: StreamRates,
    horizon: f64,
    seed: u64,
}

impl EventSchedule {
    pub fn build(
        geom: &Geometry,
        params: &RateParams,
        horizon: f64,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(EngineError::Horizon(horizon));
        }
        let rates = StreamRates::from_params(params)?;
        Ok(EventSchedule {
            geom: geom.clone(),
            params: *params,
            rates,
            horizon,
            seed,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn params(&self) -> &RateParams {
        &self.params
    }
    pub fn rates(&self) -> &StreamRates {
        &self.rates
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Marks in time order up to the horizon. Each call replays the same
    /// sequence.
    pub fn marks(&self) -> MarkIter<'_> {
        MarkIter::new(self)
    }

    /// Probability that a `What` mark with variate `w` fires at grass
    /// fraction `grass`.
    #[inline]
    pub fn accepts(&self, w: f64, grass: f64) -> bool {
        if self.rates.what <= 0.0 {
            return false;
        }
        let a = (self.params.growth.rate(grass) - self.rates.w) / self.rates.what;
        w <= a
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    time: f64,
    stream: Stream,
    site: u32,
    extra: u64,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    // reversed so BinaryHeap pops the earliest (time, stream, site)
    fn cmp(&self, o: &Self) -> Ordering {
        o.time
            .total_cmp(&self.time)
            .then(o.stream.cmp(&self.stream))
            .then(o.site.cmp(&self.site))
    }
}

const NO_TARGET: u64 = u64::MAX;

pub struct MarkIter<'a> {
    sched: &'a EventSchedule,
    rngs: Vec<SiteRng>,
    heap: BinaryHeap<Pending>,
}

impl<'a> MarkIter<'a> {
    fn new(sched: &'a EventSchedule) -> Self {
        let n = sched.geom.num_sites();
        let mut it = MarkIter {
            sched,
            rngs: Vec::with_capacity(n),
            heap: BinaryHeap::with_capacity(n),
        };
        let total = sched.rates.total();
        for x in 0..n {
            it.rngs.push(site_rng(sched.seed, x));
            if total > 0.0 {
                if let Some(p) = it.draw(x, 0.0) {
                    it.heap.push(p);
                }
            }
        }
        it
    }

    fn draw(&mut self, x: usize, now: f64) -> Option<Pending> {
        let s = self.sched;
        let r = &s.rates;
        let rng = &mut self.rngs[x];
        let time = now + exp_sample(rng, r.total());
        if time > s.horizon {
            return None;
        }
        let u = rng.random::<f64>() * r.total();
        let (stream, extra) = if u < r.v {
            (Stream::V, 0)
        } else if u < r.v + r.u {
            (Stream::U, 0)
        } else if u < r.v + r.u + r.w {
            (Stream::W, 0)
        } else if u < r.v + r.u + r.w + r.what {
            let w = 1.0 - rng.random::<f64>();
            (Stream::What, w.to_bits())
        } else {
            let g = &s.geom;
            let l = g.range() as i64;
            let base = g.signed_coords(x);
            let mut t = [0i64; crate::lattice::MAX_DIM];
            for k in 0..g.dim() {
                t[k] = base[k] + rng.random_range(-l..=l);
            }
            let target = g.site_at(&t[..g.dim()]).map_or(NO_TARGET, |y| y as u64);
            (Stream::Arrow, target)
        };
        Some(Pending {
            time,
            stream,
            site: x as u32,
            extra,
        })
    }

    fn decode(&self, p: &Pending) -> Mark {
        let site = p.site as usize;
        let kind = match p.stream {
            Stream::V => MarkKind::Death12,
            Stream::U => MarkKind::Death1,
            Stream::W => MarkKind::Growth,
            Stream::What => MarkKind::CondGrowth {
                w: f64::from_bits(p.extra),
            },
            Stream::Arrow => {
                if p.extra == NO_TARGET {
                    MarkKind::Arrow {
                        target: None,
                        solid: false,
                    }
                } else {
                    let y = p.extra as usize;
                    MarkKind::Arrow {
                        target: Some(y),
                        solid: self.sched.geom.in_truncated_neighborhood(site, y),
                    }
                }
            }
        };
        Mark {
            time: p.time,
            site,
            kind,
        }
    }
}

impl Iterator for MarkIter<'_> {
    type Item = Mark;

    fn next(&mut self) -> Option<Mark> {
        let p = self.heap.pop()?;
        let mark = self.decode(&p);
        if let Some(next) = self.draw(p.site as usize, p.time) {
            self.heap.push(next);
        }
        Some(mark)
    }
}

/// Effect of `mark` on a configuration of model `kind`. Returns
/// `(site, old, new)` when a state changed.
pub fn apply_mark(
    kind: ModelKind,
    sched: &EventSchedule,
    cfg: &mut Configuration,
    mark: &Mark,
) -> Option<(usize, u8, u8)> {
    let x = mark.site;
    let flip = |cfg: &mut Configuration, y: usize, to: u8| {
        let old = cfg.apply_flip(y, to);
        Some((y, old, to))
    };
    match mark.kind {
        MarkKind::Death12 if cfg.state(x) != 0 => flip(cfg, x, 0),
        MarkKind::Death1 | MarkKind::Death12 | MarkKind::Growth if cfg.state(x) == 1 => {
            let to = if mark.kind == MarkKind::Growth { 2 } else { 0 };
            flip(cfg, x, to)
        }
        MarkKind::CondGrowth { w }
            if kind == ModelKind::StaverLevin
                && cfg.state(x) == 1
                && sched.accepts(w, cfg.grass_fraction_kappa(x)) =>
        {
            flip(cfg, x, 2)
        }
        MarkKind::Arrow {
            target: Some(y),
            solid,
        } if (solid || kind != ModelKind::Truncated) && cfg.state(x) == 2 && cfg.state(y) == 0 => {
            flip(cfg, y, 1)
        }
        _ => None,
    }
}

/// Three coupled configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub chi: Configuration,
    pub eta: Configuration,
    pub xi: Configuration,
    pub time: f64,
}

impl CoupledState {
    pub fn new(
        chi: Configuration,
        eta: Configuration,
        xi: Configuration,
    ) -> Result<Self, EngineError> {
        if chi.geometry() != eta.geometry() || eta.geometry() != xi.geometry() {
            return Err(EngineError::GeometryMismatch);
        }
        let n = chi.geometry().num_sites();
        if let Some(site) =
            (0..n).find(|&x| !(chi.state(x) >= eta.state(x) && eta.state(x) >= xi.state(x)))
        {
            return Err(EngineError::NotOrdered { site });
        }
        Ok(CoupledState {
            chi,
            eta,
            xi,
            time: 0.0,
        })
    }

    /// All three processes started from the same configuration.
    pub fn replicated(c: &Configuration) -> Self {
        CoupledState {
            chi: c.clone(),
            eta: c.clone(),
            xi: c.clone(),
            time: 0.0,
        }
    }

    pub fn states_at(&self, x: usize) -> [u8; 3] {
        [self.chi.state(x), self.eta.state(x), self.xi.state(x)]
    }

    pub fn is_ordered(&self) -> bool {
        (0..self.chi.geometry().num_sites()).all(|x| {
            let [a, b, c] = self.states_at(x);
            a >= b && b >= c
        })
    }
}

/// One mark that changed at least one of the coupled processes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    /// Site carrying the mark (arrow source for births).
    pub site: usize,
    /// Site whose state changed.
    pub touched: usize,
    pub stream: Stream,
    pub solid: Option<bool>,
    pub pre: [u8; 3],
    pub post: [u8; 3],
}

pub trait EventObserver {
    fn on_event(&mut self, rec: &EventRecord);
}

impl<F: FnMut(&EventRecord)> EventObserver for F {
    fn on_event(&mut self, rec: &EventRecord) {
        self(rec)
    }
}

/// Type counts of the three processes at one sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledSample {
    pub time: f64,
    pub chi: [usize; 3],
    pub eta: [usize; 3],
    pub xi: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub state: CoupledState,
    pub samples: Vec<CoupledSample>,
    pub marks: u64,
    pub changes: u64,
}

fn sample_of(s: &CoupledState, time: f64) -> CoupledSample {
    CoupledSample {
        time,
        chi: s.chi.type_counts(),
        eta: s.eta.type_counts(),
        xi: s.xi.type_counts(),
    }
}

/// Sampling instants `0, dt, 2dt, ...` up to `horizon`.
fn sample_times(horizon: f64, dt: Option<f64>) -> Vec<f64> {
    match dt {
        Some(dt) if dt > 0.0 => {
            let n = (horizon / dt + 1e-9).floor() as usize;
            (0..=n).map(|k| k as f64 * dt).collect()
        }
        _ => Vec::new(),
    }
}

pub fn run_coupled(
    sched: &EventSchedule,
    init: CoupledState,
    sample_dt: Option<f64>,
) -> Result<CoupledRun, EngineError> {
    run_coupled_observed(sched, init, sample_dt, &mut |_: &EventRecord| {})
}

/// Processes every mark of `sched` in time order. Returns
/// [`EngineError::CouplingViolation`] the moment domination fails.
pub fn run_coupled_observed(
    sched: &EventSchedule,
    mut state: CoupledState,
    sample_dt: Option<f64>,
    observer: &mut dyn EventObserver,
) -> Result<CoupledRun, EngineError> {
    if state.chi.geometry() != sched.geometry() {
        return Err(EngineError::GeometryMismatch);
    }
    if !state.is_ordered() {
        let n = sched.geometry().num_sites();
        let site = (0..n)
            .find(|&x| {
                let [a, b, c] = state.states_at(x);
                !(a >= b && b >= c)
            })
            .unwrap_or(0);
        return Err(EngineError::NotOrdered { site });
    }
    let times = sample_times(sched.horizon(), sample_dt);
    let mut next_sample = 0;
    let mut samples = Vec::with_capacity(times.len());
    let (mut marks, mut changes) = (0u64, 0u64);
    for mark in sched.marks() {
        while next_sample < times.len() && times[next_sample] < mark.time {
            samples.push(sample_of(&state, times[next_sample]));
            next_sample += 1;
        }
        marks += 1;
        let Some(y) = mark.touched() else { continue };
        let pre = state.states_at(y);
        let a = apply_mark(ModelKind::StaverLevin, sched, &mut state.chi, &mark);
        let b = apply_mark(ModelKind::Krone, sched, &mut state.eta, &mark);
        let c = apply_mark(ModelKind::Truncated, sched, &mut state.xi, &mark);
        if a.is_none() && b.is_none() && c.is_none() {
            continue;
        }
        changes += 1;
        let post = state.states_at(y);
        if !(post[0] >= post[1] && post[1] >= post[2]) {
            return Err(EngineError::CouplingViolation {
                time: mark.time,
                site: y,
                chi: post[0],
                eta: post[1],
                xi: post[2],
            });
        }
        let solid = match mark.kind {
            MarkKind::Arrow { solid, .. } => Some(solid),
            _ => None,
        };
        observer.on_event(&EventRecord {
            time: mark.time,
            site: mark.site,
            touched: y,
            stream: mark.stream(),
            solid,
            pre,
            post,
        });
    }
    while next_sample < times.len() {
        samples.push(sample_of(&state, times[next_sample]));
        next_sample += 1;
    }
    state.time = sched.horizon();
    Ok(CoupledRun {
        state,
        samples,
        marks,
        changes,
    })
}

/// One jump of a single-model simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub time: f64,
    pub site: usize,
    pub from: u8,
    pub to: u8,
}

/// Type counts sampled on a regular time grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub counts: Vec<[usize; 3]>,
    pub jumps: u64,
    /// Time of absorption in the all-grass state, if reached.
    pub extinction_time: Option<f64>,
}

/// Rejection-free continuous-time simulator for one model.
#[derive(Debug, Clone)]
pub struct GillespieSim {
    kind: ModelKind,
    params: RateParams,
    cfg: Configuration,
    tree: SumTree,
    rng: SimRng,
    time: f64,
}

impl GillespieSim {
    pub fn new(kind: ModelKind, params: &RateParams, init: Configuration, seed: u64) -> Self {
        let mut sim = GillespieSim {
            kind,
            params: *params,
            tree: SumTree::new(0),
            cfg: init,
            rng: sim_rng(seed, &[0x6111]),
            time: 0.0,
        };
        let w: Vec<f64> = (0..sim.cfg.geometry().num_sites())
            .map(|x| sim.site_rate(x))
            .collect();
        sim.tree = SumTree::from_weights(&w);
        sim
    }

    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn config(&self) -> &Configuration {
        &self.cfg
    }
    pub fn into_config(self) -> Configuration {
        self.cfg
    }
    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    fn birth_rate(&self, x: usize) -> f64 {
        let n2 = match self.kind {
            ModelKind::Truncated => self.cfg.truncated_n2(x),
            _ => self.cfg.window2_count(x),
        };
        self.params.beta * n2 as f64 / self.cfg.geometry().window_volume() as f64
    }

    fn growth_rate(&self, x: usize) -> f64 {
        match self.kind {
            ModelKind::StaverLevin => self.params.growth.rate(self.cfg.grass_fraction_kappa(x)),
            _ => self.params.krone_omega(),
        }
    }

    /// Outgoing rates of site `x` as `(new_state, rate)`.
    pub fn site_transitions(&self, x: usize) -> Vec<(u8, f64)> {
        match self.cfg.state(x) {
            0 => vec![(1, self.birth_rate(x))],
            1 => vec![(0, self.params.mu), (2, self.growth_rate(x))],
            _ => vec![(0, self.params.nu)],
        }
    }

    fn site_rate(&self, x: usize) -> f64 {
        match self.cfg.state(x) {
            0 => self.birth_rate(x),
            1 => self.params.mu + self.growth_rate(x),
            _ => self.params.nu,
        }
    }

    fn refresh(&mut self, x: usize) {
        let r = self.site_rate(x);
        self.tree.set(x, r);
    }

    /// Advances to the next jump. `None` once the total rate is zero.
    pub fn step(&mut self) -> Option<Transition> {
        let total = self.tree.total();
        if total <= 0.0 {
            return None;
        }
        let dt = exp_sample(&mut self.rng, total);
        let u = self.rng.random::<f64>() * total;
        let x = self.tree.find(u);
        let from = self.cfg.state(x);
        let to = match from {
            0 => 1,
            1 => {
                let v = self.rng.random::<f64>() * (self.params.mu + self.growth_rate(x));
                if v < self.params.mu {
                    0
                } else {
                    2
                }
            }
            _ => 0,
        };
        self.time += dt;
        self.flip(x, to);
        Some(Transition {
            time: self.time,
            site: x,
            from,
            to,
        })
    }

    fn flip(&mut self, x: usize, to: u8) {
        let from = self.cfg.apply_flip(x, to);
        let g = self.cfg.geometry().clone();
        self.refresh(x);
        if (from == 2) != (to == 2) {
            match self.kind {
                ModelKind::Truncated => {
                    for b in g.neighbor_boxes(g.box_of(x)) {
                        g.for_each_site_in_box(b, |y| {
                            if self.cfg.state(y) == 0 {
                                self.refresh(y)
                            }
                        });
                    }
                }
                _ => g.for_each_in_window(x, g.range(), |y| {
                    if self.cfg.state(y) == 0 {
                        self.refresh(y)
                    }
                }),
            }
        }
        let growth_varies =
            self.kind == ModelKind::StaverLevin && !self.params.growth.is_constant();
        if growth_varies && (from == 0) != (to == 0) {
            g.for_each_in_window(x, g.kappa_range(), |y| {
                if self.cfg.state(y) == 1 {
                    self.refresh(y)
                }
            });
        }
    }

    /// Runs until `horizon` (or absorption), sampling type counts every
    /// `sample_dt`.
    pub fn run(&mut self, horizon: f64, sample_dt: Option<f64>) -> Trajectory {
        let times = sample_times(horizon, sample_dt);
        let mut traj = Trajectory::default();
        let mut next = 0;
        let record = |traj: &mut Trajectory, t: f64, c: [usize; 3]| {
            traj.times.push(t);
            traj.counts.push(c);
        };
        while next < times.len() && times[next] <= self.time {
            record(&mut traj, times[next], self.cfg.type_counts());
            next += 1;
        }
        loop {
            let before = self.cfg.type_counts();
            let total = self.tree.total();
            if total <= 0.0 {
                if self.cfg.is_all_grass() && traj.extinction_time.is_none() {
                    traj.extinction_time = Some(self.time);
                }
                break;
            }
            // peek: sample the jump, roll back if it lands beyond the horizon
            let saved = (self.rng.clone(), self.time);
            let t = self.time + exp_sample(&mut self.rng, total);
            if t > horizon {
                self.rng = saved.0;
                break;
            }
            self.rng = saved.0;
            while next < times.len() && times[next] < t {
                record(&mut traj, times[next], before);
                next += 1;
            }
            self.step();
            traj.jumps += 1;
            if self.cfg.is_all_grass() {
                traj.extinction_time = Some(self.time);
                break;
            }
        }
        while next < times.len() {
            record(&mut traj, times[next], self.cfg.type_counts());
            next += 1;
        }
        if traj.extinction_time.is_none() && self.time < horizon {
            self.time = horizon;
        }
        traj
    }
}

/// Direct simulation of one model from `init` up to `horizon`.
pub fn run_model(
    kind: ModelKind,
    params: &RateParams,
    init: Configuration,
    horizon: f64,
    sample_dt: Option<f64>,
    seed: u64,
) -> Result<(Trajectory, Configuration), EngineError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(EngineError::Horizon(horizon));
    }
    let mut sim = GillespieSim::new(kind, params, init, seed);
    let traj = sim.run(horizon, sample_dt);
    Ok((traj, sim.into_config()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;
    use crate::params::Growth;
    use crate::rng::sim_rng;

    fn line(range: usize, eps: f64, side: usize) -> Geometry {
        Geometry::new(1, range, 1.0, eps, side, Boundary::Torus).unwrap()
    }

    fn random_ordered<R: Rng>(g: &Geometry, rng: &mut R) -> CoupledState {
        let n = g.num_sites();
        let chi: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let eta: Vec<u8> = chi.iter().map(|&c| rng.random_range(0..=c)).collect();
        let xi: Vec<u8> = eta.iter().map(|&c| rng.random_range(0..=c)).collect();
        CoupledState::new(
            Configuration::from_states(g, chi).unwrap(),
            Configuration::from_states(g, eta).unwrap(),
            Configuration::from_states(g, xi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_rejects_bad_input() {
        let g = line(5, 0.2, 40);
        let p = RateParams::krone(1.0, 0.5, 1.0, 1.0).unwrap();
        assert!(matches!(
            EventSchedule::build(&g, &p, 1.0, 0),
            Err(EngineError::RateInvalid(_))
        ));
        let p = RateParams::krone(1.0, 1.0, 0.5, 1.0).unwrap();
        assert!(matches!(
            EventSchedule::build(&g, &p, 0.0, 0),
            Err(EngineError::Horizon(_))
        ));
    }

    #[test]
    fn zero_nu_has_no_v_marks() {
        let g = line(5, 0.2, 40);
        let p = RateParams::krone(1.0, 1.0, 0.0, 1.0).unwrap();
        let s = EventSchedule::build(&g, &p, 20.0, 3).unwrap();
        assert!(s.marks().all(|m| m.stream() != Stream::V));
    }

    #[test]
    fn replay_is_identical_and_time_ordered() {
        let g = line(5, 0.2, 40);
        let p = RateParams::new(2.0, 1.0, 0.5, Growth::step(2.0, 0.5, 0.3)).unwrap();
        let s = EventSchedule::build(&g, &p, 5.0, 42).unwrap();
        let a: Vec<Mark> = s.marks().collect();
        let b: Vec<Mark> = s.marks().collect();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].time <= w[1].time));
        let other: Vec<Mark> = EventSchedule::build(&g, &p, 5.0, 43)
            .unwrap()
            .marks()
            .collect();
        assert_ne!(a, other);
    }

    #[test]
    fn v_mark_count_is_poisson() {
        let g = line(5, 0.2, 100);
        let p = RateParams::krone(1.0, 1.0, 1.0, 1.0).unwrap();
        let s = EventSchedule::build(&g, &p, 10.0, 7).unwrap();
        let v = s.marks().filter(|m| m.stream() == Stream::V).count() as f64;
        assert!((v - 1000.0).abs() < 4.0 * 1000f64.sqrt(), "V count {v}");
    }

    #[test]
    fn arrow_labels_match_truncated_neighborhood() {
        let g = line(10, 0.1, 60);
        let p = RateParams::krone(3.0, 1.0, 1.0, 1.0).unwrap();
        let s = EventSchedule::build(&g, &p, 3.0, 9).unwrap();
        let mut seen = 0;
        for m in s.marks() {
            if let MarkKind::Arrow {
                target: Some(y),
                solid,
            } = m.kind
            {
                assert!(g.distance(m.site, y) <= 10);
                assert_eq!(solid, g.truncated_neighborhood(m.site).contains(&y));
                seen += 1;
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn all_grass_is_absorbing() {
        let g = line(5, 0.2, 40);
        let p = RateParams::new(3.0, 1.0, 0.5, Growth::step(2.0, 0.5, 0.3)).unwrap();
        let s = EventSchedule::build(&g, &p, 10.0, 1).unwrap();
        let run = run_coupled(
            &s,
            CoupledState::replicated(&Configuration::empty(&g)),
            Some(1.0),
        )
        .unwrap();
        assert!(
            run.state.chi.is_all_grass()
                && run.state.eta.is_all_grass()
                && run.state.xi.is_all_grass()
        );
        assert_eq!(run.changes, 0);
        assert_eq!(run.samples.len(), 11);
    }

    #[test]
    fn constant_growth_keeps_chi_equal_to_eta() {
        let g = line(5, 0.2, 40);
        let p = RateParams::krone(2.5, 1.0, 0.5, 1.5).unwrap();
        let s = EventSchedule::build(&g, &p, 10.0, 5).unwrap();
        let mut rng = sim_rng(5, &[]);
        let init = random_ordered(&g, &mut rng);
        let init = CoupledState::new(init.chi.clone(), init.chi.clone(), init.xi).unwrap();
        let run = run_coupled(&s, init, None).unwrap();
        assert_eq!(run.state.chi.states(), run.state.eta.states());
    }

    #[test]
    fn domination_holds_across_seeds() {
        let g = line(5, 0.2, 40);
        let params = [
            RateParams::new(3.0, 1.0, 0.5, Growth::step(2.0, 0.5, 0.3)).unwrap(),
            RateParams::new(5.0, 0.6, 0.6, Growth::step(4.0, 0.2, 0.6)).unwrap(),
            RateParams::krone(2.0, 1.0, 0.2, 0.8).unwrap(),
        ];
        let mut checked = 0;
        for seed in 0..100u64 {
            let p = params[seed as usize % 3];
            let s = EventSchedule::build(&g, &p, 4.0, seed).unwrap();
            let mut rng = sim_rng(seed, &[1]);
            let init = random_ordered(&g, &mut rng);
            let mut obs = |r: &EventRecord| {
                assert!(r.post[0] >= r.post[1] && r.post[1] >= r.post[2]);
                checked += 1;
            };
            let run = run_coupled_observed(&s, init, None, &mut obs).unwrap();
            assert!(run.state.is_ordered());
        }
        assert!(checked > 1000);
    }

    #[test]
    fn same_model_is_attractive() {
        let g = line(5, 0.2, 40);
        let p = RateParams::new(3.0, 1.0, 0.5, Growth::step(2.0, 0.5, 0.3)).unwrap();
        for seed in 0..50u64 {
            let s = EventSchedule::build(&g, &p, 3.0, seed).unwrap();
            let mut rng = sim_rng(seed, &[2]);
            let CoupledState {
                chi: mut hi,
                eta: mut lo,
                ..
            } = random_ordered(&g, &mut rng);
            let kind = ModelKind::ALL[seed as usize % 3];
            for m in s.marks() {
                apply_mark(kind, &s, &mut hi, &m);
                apply_mark(kind, &s, &mut lo, &m);
                if let Some(y) = m.touched() {
                    assert!(hi.state(y) >= lo.state(y));
                }
            }
            assert!(hi.dominates(&lo));
        }
    }

    #[test]
    fn pure_death_extinction_time() {
        let g = line(5, 0.2, 40);
        let p = RateParams::krone(0.0, 1.0, 2.0, 1.0).unwrap();
        let init = Configuration::with_sites(&g, &[0], 2).unwrap();
        let n = 20_000;
        let mut sum = 0.0;
        for seed in 0..n {
            let (traj, end) =
                run_model(ModelKind::Krone, &p, init.clone(), 100.0, None, seed).unwrap();
            assert!(end.is_all_grass());
            sum += traj.extinction_time.unwrap();
        }
        let mean = sum / n as f64;
        assert!(
            (mean - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt(),
            "mean {mean}"
        );
    }

    #[test]
    fn single_tree_first_event_probability() {
        // L = 1: the 2 dies at nu and seeds each of its two neighbours at beta/3
        let g = Geometry::relaxed(1, 1, 1.0, 1.0, 6).unwrap();
        let (beta, nu) = (1.5, 1.0);
        let p = RateParams::krone(beta, 1.0, nu, 1.0).unwrap();
        let init = Configuration::with_sites(&g, &[0], 2).unwrap();
        let exact = nu / (nu + 2.0 * beta / 3.0);
        let n = 40_000u64;
        let deaths = (0..n)
            .filter(|&seed| {
                let mut sim = GillespieSim::new(ModelKind::Krone, &p, init.clone(), seed);
                sim.step().unwrap().to == 0
            })
            .count() as f64;
        let sd = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((deaths / n as f64 - exact).abs() < 4.0 * sd);
    }

    #[test]
    fn gillespie_keeps_rates_consistent() {
        for kind in ModelKind::ALL {
            for boundary in [Boundary::Torus, Boundary::GrassFrozen] {
                let g = Geometry::new(2, 5, 1.5, 0.2, 22, boundary).unwrap();
                let p = RateParams::new(4.0, 0.7, 0.4, Growth::step(2.0, 0.3, 0.4)).unwrap();
                let mut rng = sim_rng(1, &[]);
                let v = (0..g.num_sites()).map(|_| rng.random_range(0..3)).collect();
                let mut sim =
                    GillespieSim::new(kind, &p, Configuration::from_states(&g, v).unwrap(), 2);
                for _ in 0..3000 {
                    if sim.step().is_none() {
                        break;
                    }
                }
                for x in 0..g.num_sites() {
                    let fresh: f64 = sim.site_transitions(x).iter().map(|t| t.1).sum();
                    assert!((sim.tree.get(x) - fresh).abs() < 1e-12, "{kind:?} site {x}");
                }
                assert_eq!(sim.config().count_discrepancies(), 0);
            }
        }
    }
}
