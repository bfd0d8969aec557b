//! Experiment specification files.
//!
//! A spec is a TOML document; unknown keys anywhere are rejected. See the
//! README for the full schema. Rate parameters may be scalars, lists or
//! `{ from, to, steps }` ranges; every combination forms one grid point, the
//! first listed axis varying slowest.

use crate::CliError;
use rand::Rng;
use savanna::diagnostics::DiagError;
use savanna::engine::ModelKind;
use savanna::ide::IdeBoundary;
use savanna::lattice::{Boundary, Configuration, Geometry};
use savanna::{Growth, RateParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PhaseSweep,
    SurvivalFiniteSeed,
    StationaryDensity,
    Recovery,
    BrwBounds,
    MovingParticles,
    IdeFront,
    #[serde(rename = "lemma81_verify")]
    GrowthVerify,
    DiagnosticsSuite,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::PhaseSweep => "phase_sweep",
            ExperimentKind::SurvivalFiniteSeed => "survival_finite_seed",
            ExperimentKind::StationaryDensity => "stationary_density",
            ExperimentKind::Recovery => "recovery",
            ExperimentKind::BrwBounds => "brw_bounds",
            ExperimentKind::MovingParticles => "moving_particles",
            ExperimentKind::IdeFront => "ide_front",
            ExperimentKind::GrowthVerify => "lemma81_verify",
            ExperimentKind::DiagnosticsSuite => "diagnostics_suite",
        }
    }

    fn needs_geometry(self) -> bool {
        !matches!(
            self,
            ExperimentKind::IdeFront | ExperimentKind::GrowthVerify
        )
    }
}

/// One axis of the parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Scalar(f64),
    List(Vec<f64>),
    Range { from: f64, to: f64, steps: usize },
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Axis::Scalar(v) => vec![*v],
            Axis::List(v) => v.clone(),
            Axis::Range { from, to, steps } => match steps {
                0 => vec![],
                1 => vec![*from],
                n => (0..*n)
                    .map(|k| from + (to - from) * k as f64 / (n - 1) as f64)
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub beta: Axis,
    pub mu: Axis,
    pub nu: Axis,
    /// Constant growth rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<Axis>,
    /// Step growth: `omega0` below grass level `1 - delta0`, `omega1` above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega0: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega1: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<Axis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub values: BTreeMap<String, f64>,
    pub params: RateParams,
}

impl ParamGrid {
    fn axes(&self) -> Result<Vec<(&'static str, Vec<f64>)>, CliError> {
        let mut axes = vec![
            ("beta", self.beta.values()),
            ("mu", self.mu.values()),
            ("nu", self.nu.values()),
        ];
        match (&self.omega, &self.omega0, &self.omega1, &self.delta0) {
            (Some(w), None, None, None) => axes.push(("omega", w.values())),
            (None, Some(a), Some(b), Some(c)) => {
                axes.push(("omega0", a.values()));
                axes.push(("omega1", b.values()));
                axes.push(("delta0", c.values()));
            }
            _ => {
                return Err(CliError::config(
                    "params",
                    "give either omega, or all of omega0, omega1 and delta0",
                ))
            }
        }
        for (name, v) in &axes {
            if v.is_empty() {
                return Err(CliError::config(
                    format!("params.{name}"),
                    "axis has no values",
                ));
            }
        }
        Ok(axes)
    }

    /// Names of axes with more than one value, in grid order.
    pub fn varying_axes(&self) -> Result<Vec<(&'static str, Vec<f64>)>, CliError> {
        Ok(self
            .axes()?
            .into_iter()
            .filter(|(_, v)| v.len() > 1)
            .collect())
    }

    pub fn points(&self) -> Result<Vec<GridPoint>, CliError> {
        let axes = self.axes()?;
        let total: usize = axes.iter().map(|a| a.1.len()).product();
        let mut out = Vec::with_capacity(total);
        for index in 0..total {
            let mut rem = index;
            let mut values = BTreeMap::new();
            for (name, vals) in axes.iter().rev() {
                values.insert(name.to_string(), vals[rem % vals.len()]);
                rem /= vals.len();
            }
            let growth = match values.get("omega") {
                Some(&w) => Growth::constant(w),
                None => Growth::step(values["omega0"], values["omega1"], values["delta0"]),
            };
            let params = RateParams::new(values["beta"], values["mu"], values["nu"], growth)
                .map_err(|e| CliError::config(format!("params[{index}]"), e.to_string()))?;
            out.push(GridPoint {
                index,
                values,
                params,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryName {
    Torus,
    GrassFrozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub d: usize,
    pub range: usize,
    #[serde(default = "one")]
    pub kappa: f64,
    pub epsilon0: f64,
    pub side: usize,
    #[serde(default = "torus")]
    pub boundary: BoundaryName,
    /// Skip the `side >= 4L` and `epsilon0 < 1/4` checks (torus only).
    #[serde(default)]
    pub relaxed: bool,
}

fn one() -> f64 {
    1.0
}
fn torus() -> BoundaryName {
    BoundaryName::Torus
}

impl GeometrySpec {
    pub fn build(&self) -> Result<Geometry, CliError> {
        let r = if self.relaxed {
            if self.boundary != BoundaryName::Torus {
                return Err(CliError::config(
                    "geometry.relaxed",
                    "relaxed geometries are tori",
                ));
            }
            Geometry::relaxed(self.d, self.range, self.kappa, self.epsilon0, self.side)
        } else {
            let b = match self.boundary {
                BoundaryName::Torus => Boundary::Torus,
                BoundaryName::GrassFrozen => Boundary::GrassFrozen,
            };
            Geometry::new(self.d, self.range, self.kappa, self.epsilon0, self.side, b)
        };
        r.map_err(|e| CliError::config("geometry", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    StaverLevin,
    #[default]
    Krone,
    Truncated,
}

impl From<ModelName> for ModelKind {
    fn from(m: ModelName) -> Self {
        match m {
            ModelName::StaverLevin => ModelKind::StaverLevin,
            ModelName::Krone => ModelKind::Krone,
            ModelName::Truncated => ModelKind::Truncated,
        }
    }
}

/// Initial configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Every site a tree.
    #[default]
    AllTrees,
    Uniform {
        state: u8,
    },
    /// `count` adjacent sites along the first axis starting at the origin.
    Block {
        state: u8,
        count: usize,
    },
    /// `count` uniformly chosen sites of the origin box (all of it by default).
    OriginBox {
        state: u8,
        #[serde(default)]
        count: Option<usize>,
    },
    /// Independent sites: 1 with probability `p1`, 2 with probability `p2`.
    Random {
        p1: f64,
        p2: f64,
    },
}

impl InitialSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let state_ok = |s: u8| {
            if s <= 2 {
                Ok(())
            } else {
                Err(CliError::config(
                    "initial.state",
                    format!("{s} is not 0, 1 or 2"),
                ))
            }
        };
        match *self {
            InitialSpec::AllTrees => Ok(()),
            InitialSpec::Uniform { state }
            | InitialSpec::Block { state, .. }
            | InitialSpec::OriginBox { state, .. } => state_ok(state),
            InitialSpec::Random { p1, p2 } => {
                if p1 >= 0.0 && p2 >= 0.0 && p1 + p2 <= 1.0 {
                    Ok(())
                } else {
                    Err(CliError::config(
                        "initial",
                        "need p1, p2 >= 0 and p1 + p2 <= 1",
                    ))
                }
            }
        }
    }

    pub fn build<R: Rng>(&self, g: &Geometry, rng: &mut R) -> Result<Configuration, CliError> {
        let sim = |e: savanna::lattice::LatticeError| CliError::config("initial", e.to_string());
        match *self {
            InitialSpec::AllTrees => Configuration::uniform(g, 2).map_err(sim),
            InitialSpec::Uniform { state } => Configuration::uniform(g, state).map_err(sim),
            InitialSpec::Block { state, count } => {
                let mut sites = Vec::with_capacity(count);
                for k in 0..count as i64 {
                    let mut c = [0i64; 3];
                    c[0] = k;
                    let x = g.site_at(&c[..g.dim()]).ok_or_else(|| {
                        CliError::config("initial.count", "block leaves the lattice")
                    })?;
                    sites.push(x);
                }
                sites.sort_unstable();
                sites.dedup();
                if sites.len() != count {
                    return Err(CliError::config("initial.count", "block wraps onto itself"));
                }
                Configuration::with_sites(g, &sites, state).map_err(sim)
            }
            InitialSpec::OriginBox { state, count } => {
                let k = count.unwrap_or(g.box_capacity());
                savanna::diagnostics::seed_origin_box(g, k, state, rng).map_err(|e| match e {
                    DiagError::Invalid(m) => CliError::config("initial.count", m),
                    other => CliError::Simulation(other.to_string()),
                })
            }
            InitialSpec::Random { p1, p2 } => {
                let states = (0..g.num_sites())
                    .map(|_| {
                        let u: f64 = rng.random();
                        if u < p1 {
                            1
                        } else if u < p1 + p2 {
                            2
                        } else {
                            0
                        }
                    })
                    .collect();
                Configuration::from_states(g, states).map_err(sim)
            }
        }
    }
}

/// Pilot runs that fix the horizon when none is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSpec {
    #[serde(default = "pilot_replicas")]
    pub replicas: usize,
    #[serde(default = "pilot_max")]
    pub max_horizon: f64,
    /// Horizon = `factor` times the largest pilot extinction time.
    #[serde(default = "pilot_factor")]
    pub factor: f64,
}

fn pilot_replicas() -> usize {
    50
}
fn pilot_max() -> f64 {
    1000.0
}
fn pilot_factor() -> f64 {
    2.0
}

impl Default for PilotSpec {
    fn default() -> Self {
        PilotSpec {
            replicas: pilot_replicas(),
            max_horizon: pilot_max(),
            factor: pilot_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default = "a0_init")]
    pub a0_init: f64,
    /// Defaults to `0.75 d`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Branching walk: time and deviation parameter `m`.
    #[serde(default = "brw_t")]
    pub brw_t: f64,
    #[serde(default = "brw_m")]
    pub brw_m: f64,
    #[serde(default = "brw_cap")]
    pub brw_cap: usize,
    /// Moving particles: target box direction, success fraction, test level.
    #[serde(default = "direction")]
    pub direction: Vec<i64>,
    #[serde(default = "delta")]
    pub delta: f64,
    #[serde(default = "level")]
    pub level: f64,
    /// Diagnostics suite: random configurations per drift sweep and the
    /// Dynkin horizon.
    #[serde(default = "drift_samples")]
    pub drift_samples: usize,
    #[serde(default = "dynkin_t")]
    pub dynkin_t: f64,
}

fn a0_init() -> f64 {
    0.05
}
fn brw_t() -> f64 {
    2.0
}
fn brw_m() -> f64 {
    4.0
}
fn brw_cap() -> usize {
    1_000_000
}
fn direction() -> Vec<i64> {
    vec![1]
}
fn delta() -> f64 {
    0.1
}
fn level() -> f64 {
    0.01
}
fn drift_samples() -> usize {
    200
}
fn dynkin_t() -> f64 {
    2.0
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            a0_init: a0_init(),
            alpha: None,
            brw_t: brw_t(),
            brw_m: brw_m(),
            brw_cap: brw_cap(),
            direction: direction(),
            delta: delta(),
            level: level(),
            drift_samples: drift_samples(),
            dynkin_t: dynkin_t(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IdeInitial {
    /// The trapezoidal test functions of the comparison argument.
    TestFunctions,
    /// `S = s`, `T = t` on the sup-norm ball of `radius`, grass outside.
    Ball { radius: f64, s: f64, t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdeSpec {
    #[serde(default = "one_usize")]
    pub d: usize,
    #[serde(default = "one")]
    pub kappa: f64,
    /// Grid spacing; for test functions it defaults to `eps / h_divisor`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "h_divisor")]
    pub h_divisor: f64,
    /// Half-width of the grid; defaults to the smallest that covers the
    /// test functions (or `2 radius + 2 kappa` for a ball).
    #[serde(default)]
    pub half_width: Option<f64>,
    #[serde(default)]
    pub boundary: IdeBoundary,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "t_end")]
    pub t_end: f64,
    #[serde(default = "sample_every")]
    pub sample_every: usize,
    #[serde(default = "front_level")]
    pub front_level: f64,
    #[serde(default = "ide_initial")]
    pub initial: IdeInitial,
}

fn one_usize() -> usize {
    1
}
fn h_divisor() -> f64 {
    8.0
}
fn t_end() -> f64 {
    10.0
}
fn sample_every() -> usize {
    100
}
fn front_level() -> f64 {
    0.05
}
fn ide_initial() -> IdeInitial {
    IdeInitial::TestFunctions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Experiment id written into every record; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    pub kind: ExperimentKind,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub sample_dt: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelName,
    /// Nonzero density a replica needs at the horizon to count as persisting.
    #[serde(default = "density_threshold")]
    pub density_threshold: f64,
    pub params: ParamGrid,
    #[serde(default)]
    pub geometry: Option<GeometrySpec>,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub pilot: PilotSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub ide: Option<IdeSpec>,
}

fn density_threshold() -> f64 {
    0.05
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| locate(text, s.start))
                .unwrap_or_else(|| "<root>".into());
            CliError::config(path, e.message().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn id(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.replicas == 0 {
            return Err(CliError::config("replicas", "must be at least 1"));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::config("horizon", "must be positive and finite"));
            }
        }
        if let Some(dt) = self.sample_dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(CliError::config("sample_dt", "must be positive and finite"));
            }
        }
        if !(self.pilot.replicas >= 1 && self.pilot.max_horizon > 0.0 && self.pilot.factor >= 1.0) {
            return Err(CliError::config(
                "pilot",
                "need replicas >= 1, max_horizon > 0 and factor >= 1",
            ));
        }
        self.params.points()?;
        if self.kind.needs_geometry() {
            self.geometry
                .as_ref()
                .ok_or_else(|| CliError::config("geometry", "required for this kind"))?
                .build()?;
        }
        self.initial.validate()?;
        if self.kind == ExperimentKind::StationaryDensity && self.horizon.is_none() {
            return Err(CliError::config(
                "horizon",
                "required for stationary_density",
            ));
        }
        if self.kind == ExperimentKind::PhaseSweep {
            let n = self.params.varying_axes()?.len();
            if n > 2 {
                return Err(CliError::config(
                    "params",
                    format!("a phase sweep varies at most two axes, got {n}"),
                ));
            }
        }
        if matches!(
            self.kind,
            ExperimentKind::IdeFront | ExperimentKind::GrowthVerify
        ) {
            let ide = self
                .ide
                .as_ref()
                .ok_or_else(|| CliError::config("ide", "required for this kind"))?;
            if !(ide.h_divisor >= 4.0) {
                return Err(CliError::config("ide.h_divisor", "must be at least 4"));
            }
            if self.kind == ExperimentKind::GrowthVerify && ide.initial != IdeInitial::TestFunctions
            {
                return Err(CliError::config(
                    "ide.initial",
                    "lemma81_verify uses the test functions",
                ));
            }
        }
        Ok(())
    }
}

/// Dotted path of the table and key enclosing byte `offset`.
fn locate(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    for line in text[..offset.min(text.len())].lines() {
        let l = line.trim();
        if l.starts_with('[') {
            table = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = l.split_once('=') {
            key = k.trim().to_string();
        }
    }
    if let Some(rest) = text.get(offset..) {
        let l = rest.lines().next().unwrap_or("").trim();
        if let Some((k, _)) = l.split_once('=') {
            if !l.starts_with('[') {
                key = k.trim().to_string();
            }
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "<root>".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
