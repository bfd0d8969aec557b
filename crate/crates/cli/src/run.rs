//! Experiment execution.
//!
//! Every (grid point, replica) task draws its randomness from
//! `derive_seed(master, [grid_index, replica])`, so results do not depend
//! on scheduling or thread count. Task results are sorted before writing.

use crate::config::{ExperimentKind, ExperimentSpec, GridPoint, IdeInitial, IdeSpec};
use crate::plot::{emit_plot_data, PhaseCell, PhaseDiagram};
use crate::records::{
    sort_records, write_jsonl, FailureEntry, HorizonEntry, Manifest, ResultRecord,
};
use crate::CliError;
use rayon::prelude::*;
use savanna::diagnostics::{
    dynkin_residuals, estimate_recovery_time_with, extinction_functionals, moving_particle_gof,
    random_low_density, recovery_constants, recovery_drift_check, simulate_brw_max, theta_prime,
    DiagError, DiagnosticsReport,
};
use savanna::engine::{run_model, ModelKind};
use savanna::ide::{
    build_test_functions, front_metrics, ide_constants, integrate_ide, max_stable_dt,
    verify_growth_condition, Field, GridSpec, IdeError,
};
use savanna::lattice::{Configuration, Geometry};
use savanna::meanfield::{classify_origin, survival_condition};
use savanna::rng::{derive_seed, sim_rng};
use savanna::RateParams;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

const PILOT_TAG: u64 = 0x9170;
const INIT_TAG: u64 = 0x1417;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    /// Overrides the spec's output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<ResultRecord>,
    pub manifest: Manifest,
    pub phase: Option<PhaseDiagram>,
    pub out_dir: Option<PathBuf>,
}

type TaskResult = Result<Vec<ResultRecord>, FailureEntry>;

fn fail(gi: usize, replica: Option<u64>, e: impl ToString) -> FailureEntry {
    FailureEntry {
        grid_index: gi,
        replica,
        message: e.to_string(),
    }
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    id: String,
    geom: Option<Geometry>,
}

impl Ctx<'_> {
    fn record(&self, gp: &GridPoint, replica: Option<u64>, seed: u64) -> ResultRecord {
        let mut r = ResultRecord::new(&self.id, self.spec.kind.as_str(), gp.index, replica, seed);
        r.params = gp.values.clone();
        r
    }

    fn geom(&self) -> &Geometry {
        self.geom.as_ref().expect("validated: geometry present")
    }

    fn initial(&self, seed: u64) -> Result<Configuration, CliError> {
        let mut rng = sim_rng(seed, &[INIT_TAG]);
        self.spec.initial.build(self.geom(), &mut rng)
    }
}

/// Runs `spec` and writes `records.jsonl`, `records.csv`, `manifest.json`
/// (plus plot files for phase sweeps) to the output directory, if any.
/// Failed tasks are listed in the manifest and reported as
/// [`CliError::PartialFailure`] after every completed record is written.
pub fn run_experiment(
    spec: &ExperimentSpec,
    config_text: &str,
    opts: &RunOptions,
) -> Result<RunOutcome, CliError> {
    spec.validate()?;
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Simulation(e.to_string()))?;
            pool.install(|| run_inner(spec, config_text, opts))
        }
        None => run_inner(spec, config_text, opts),
    }
}

fn run_inner(
    spec: &ExperimentSpec,
    config_text: &str,
    opts: &RunOptions,
) -> Result<RunOutcome, CliError> {
    let points = spec.params.points()?;
    let geom = spec.geometry.as_ref().map(|g| g.build()).transpose()?;
    let ctx = Ctx {
        spec,
        id: spec.id(),
        geom,
    };
    let mut horizons = Vec::new();
    let results: Vec<TaskResult> = match spec.kind {
        ExperimentKind::PhaseSweep
        | ExperimentKind::SurvivalFiniteSeed
        | ExperimentKind::StationaryDensity => {
            let mut hs = Vec::with_capacity(points.len());
            for gp in &points {
                let h = horizon_for(&ctx, gp)?;
                hs.push(h.horizon);
                horizons.push(h);
            }
            let tasks: Vec<(usize, u64)> = (0..points.len())
                .flat_map(|gi| (0..spec.replicas as u64).map(move |r| (gi, r)))
                .collect();
            let mut out: Vec<TaskResult> = tasks
                .par_iter()
                .map(|&(gi, r)| simulate_task(&ctx, &points[gi], hs[gi], r))
                .collect();
            out.extend(
                points
                    .iter()
                    .map(|gp| Ok(vec![cell_summary_placeholder(&ctx, gp, hs[gp.index])])),
            );
            out
        }
        _ => points.iter().map(|gp| grid_task(&ctx, gp)).collect(),
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => records.extend(v),
            Err(f) => failures.push(f),
        }
    }
    if matches!(
        spec.kind,
        ExperimentKind::PhaseSweep
            | ExperimentKind::SurvivalFiniteSeed
            | ExperimentKind::StationaryDensity
    ) {
        fill_summaries(&mut records, spec);
    }
    sort_records(&mut records);
    failures.sort_by(|a, b| (a.grid_index, a.replica).cmp(&(b.grid_index, b.replica)));
    let phase = if spec.kind == ExperimentKind::PhaseSweep {
        Some(sweep_phase_diagram(spec, &records)?)
    } else {
        None
    };
    let manifest = Manifest {
        experiment: ctx.id.clone(),
        kind: spec.kind.as_str().to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: spec.seed,
        replicas: spec.replicas,
        grid_points: points.len(),
        records: records.len(),
        horizons,
        failures: failures.clone(),
    };
    let out_dir = opts.out.clone().or_else(|| spec.out.clone());
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("records.jsonl"), &records)?;
        emit_plot_data(&records, phase.as_ref(), dir)?;
        let m = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(dir.join("manifest.json"), m + "\n")?;
    }
    let outcome = RunOutcome {
        records,
        manifest,
        phase,
        out_dir,
    };
    if failures.is_empty() {
        Ok(outcome)
    } else {
        Err(CliError::PartialFailure {
            failures,
            outcome: Box::new(outcome),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ------------------------------------------------------------ simulations

fn horizon_for(ctx: &Ctx, gp: &GridPoint) -> Result<HorizonEntry, CliError> {
    if let Some(h) = ctx.spec.horizon {
        return Ok(HorizonEntry {
            grid_index: gp.index,
            horizon: h,
            source: "config".into(),
            pilot_max_extinction: None,
            pilot_survivors: None,
        });
    }
    let pilot = &ctx.spec.pilot;
    let kind: ModelKind = ctx.spec.model.into();
    let runs: Result<Vec<Option<f64>>, CliError> = (0..pilot.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(ctx.spec.seed, &[PILOT_TAG, gp.index as u64, r]);
            let init = ctx.initial(seed)?;
            let (traj, _) = run_model(kind, &gp.params, init, pilot.max_horizon, None, seed)
                .map_err(|e| CliError::Simulation(e.to_string()))?;
            Ok(traj.extinction_time)
        })
        .collect();
    let runs = runs?;
    let survivors = runs.iter().filter(|t| t.is_none()).count();
    let max_ext = runs
        .iter()
        .flatten()
        .cloned()
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
    let horizon = if survivors == 0 {
        (pilot.factor * max_ext.unwrap_or(0.0))
            .clamp(f64::MIN_POSITIVE, pilot.max_horizon)
            .max(1e-9)
    } else {
        pilot.max_horizon
    };
    Ok(HorizonEntry {
        grid_index: gp.index,
        horizon,
        source: "pilot".into(),
        pilot_max_extinction: max_ext,
        pilot_survivors: Some(survivors),
    })
}

fn simulate_task(ctx: &Ctx, gp: &GridPoint, horizon: f64, replica: u64) -> TaskResult {
    let start = Instant::now();
    let seed = derive_seed(ctx.spec.seed, &[gp.index as u64, replica]);
    let init = ctx
        .initial(seed)
        .map_err(|e| fail(gp.index, Some(replica), e))?;
    let n = init.geometry().num_sites() as f64;
    let sample_dt = ctx
        .spec
        .sample_dt
        .or(if ctx.spec.kind == ExperimentKind::StationaryDensity {
            Some(horizon / 100.0)
        } else {
            None
        });
    let (traj, end) = run_model(
        ctx.spec.model.into(),
        &gp.params,
        init,
        horizon,
        sample_dt,
        seed,
    )
    .map_err(|e| fail(gp.index, Some(replica), e))?;
    let mut r = ctx.record(gp, Some(replica), seed);
    let [c0, c1, c2] = end.type_counts();
    let nonzero = (c1 + c2) as f64 / n;
    r.out("horizon", horizon)
        .out("density0", c0 as f64 / n)
        .out("density1", c1 as f64 / n)
        .out("density2", c2 as f64 / n)
        .out("nonzero_density", nonzero)
        .out("jumps", traj.jumps as f64)
        .flag("extinct", traj.extinction_time.is_some())
        .flag("persist", nonzero >= ctx.spec.density_threshold);
    if let Some(t) = traj.extinction_time {
        r.out("extinction_time", t);
    }
    if ctx.spec.kind == ExperimentKind::StationaryDensity {
        let late: Vec<f64> = traj
            .times
            .iter()
            .zip(&traj.counts)
            .filter(|(t, _)| **t >= horizon / 2.0)
            .map(|(_, c)| (c[1] + c[2]) as f64 / n)
            .collect();
        if !late.is_empty() {
            r.out(
                "late_mean_nonzero_density",
                late.iter().sum::<f64>() / late.len() as f64,
            );
        }
    }
    r.wall_time = start.elapsed().as_secs_f64();
    Ok(vec![r])
}

fn cell_summary_placeholder(ctx: &Ctx, gp: &GridPoint, horizon: f64) -> ResultRecord {
    let mut r = ctx.record(gp, None, derive_seed(ctx.spec.seed, &[gp.index as u64]));
    let w = gp.params.krone_omega();
    r.out("horizon", horizon)
        .flag("survival_condition", survival_condition(&gp.params, w))
        .out(
            "meanfield_determinant",
            classify_origin(&gp.params, w).determinant,
        );
    r
}

fn fill_summaries(records: &mut [ResultRecord], spec: &ExperimentSpec) {
    let n_grid = records.iter().map(|r| r.grid_index + 1).max().unwrap_or(0);
    let mut tallies = vec![(0usize, 0usize, 0usize); n_grid];
    for r in records.iter().filter(|r| r.replica.is_some()) {
        let t = &mut tallies[r.grid_index];
        t.0 += 1;
        t.1 += r.flags.get("extinct").copied().unwrap_or(false) as usize;
        t.2 += r.flags.get("persist").copied().unwrap_or(false) as usize;
    }
    for r in records.iter_mut().filter(|r| r.replica.is_none()) {
        let (n, ext, per) = tallies[r.grid_index];
        let nf = (n.max(1)) as f64;
        r.out("completed", n as f64)
            .out("extinct_fraction", ext as f64 / nf)
            .out("survival_fraction", 1.0 - ext as f64 / nf)
            .out("persist_fraction", per as f64 / nf);
        if n < spec.replicas {
            r.flag("partial", true);
        }
    }
}

/// Cells of a phase sweep: mean-field verdict and Monte Carlo survival
/// fraction per grid point.
pub fn sweep_phase_diagram(
    spec: &ExperimentSpec,
    records: &[ResultRecord],
) -> Result<PhaseDiagram, CliError> {
    let varying = spec.params.varying_axes()?;
    let (row_name, row_values) = varying
        .first()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .unwrap_or(("none".into(), vec![0.0]));
    let (col_name, col_values) = varying
        .get(1)
        .map(|(n, v)| (n.to_string(), v.clone()))
        .unwrap_or(("none".into(), vec![0.0]));
    let points = spec.params.points()?;
    let mut cells = Vec::with_capacity(points.len());
    for gp in &points {
        let summary = records
            .iter()
            .find(|r| r.grid_index == gp.index && r.replica.is_none())
            .ok_or_else(|| {
                CliError::Simulation(format!("missing summary for grid point {}", gp.index))
            })?;
        let w = gp.params.krone_omega();
        cells.push(PhaseCell {
            row: gp.index / col_values.len(),
            col: gp.index % col_values.len(),
            grid_index: gp.index,
            meanfield_verdict: format!("{:?}", classify_origin(&gp.params, w).kind).to_lowercase(),
            survival_condition: survival_condition(&gp.params, w),
            survival_fraction: summary
                .outputs
                .get("survival_fraction")
                .copied()
                .unwrap_or(f64::NAN),
            replicas: summary.outputs.get("completed").copied().unwrap_or(0.0) as usize,
            horizon: summary.outputs.get("horizon").copied().unwrap_or(f64::NAN),
        });
    }
    Ok(PhaseDiagram {
        row_name,
        row_values,
        col_name,
        col_values,
        cells,
    })
}

// --------------------------------------------------------- per-grid tasks

fn grid_task(ctx: &Ctx, gp: &GridPoint) -> TaskResult {
    let start = Instant::now();
    let seed = derive_seed(ctx.spec.seed, &[gp.index as u64]);
    let f = |e: &dyn std::fmt::Display| fail(gp.index, None, e);
    let mut recs = match ctx.spec.kind {
        ExperimentKind::Recovery => recovery_task(ctx, gp, seed).map_err(|e| f(&e))?,
        ExperimentKind::BrwBounds => vec![brw_task(ctx, gp, seed).map_err(|e| f(&e))?],
        ExperimentKind::MovingParticles => vec![moving_task(ctx, gp, seed).map_err(|e| f(&e))?],
        ExperimentKind::IdeFront => vec![ide_front_task(ctx, gp, seed).map_err(|e| f(&e))?],
        ExperimentKind::GrowthVerify => vec![growth_task(ctx, gp, seed).map_err(|e| f(&e))?],
        ExperimentKind::DiagnosticsSuite => vec![suite_task(ctx, gp, seed).map_err(|e| f(&e))?],
        _ => unreachable!("simulation kinds are farmed per replica"),
    };
    if let Some(last) = recs.last_mut() {
        last.wall_time = start.elapsed().as_secs_f64();
    }
    Ok(recs)
}

fn recovery_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<Vec<ResultRecord>, CliError> {
    let g = ctx.geom();
    let dspec = &ctx.spec.diagnostics;
    let rc = recovery_constants(&gp.params, g.dim(), dspec.a0_init).map_err(sim)?;
    let alpha = dspec.alpha.unwrap_or(rc.alpha);
    let state = match ctx.spec.initial {
        crate::config::InitialSpec::OriginBox { state, .. }
        | crate::config::InitialSpec::Uniform { state } => state,
        _ => 2,
    };
    let est =
        estimate_recovery_time_with(g, &gp.params, &rc, alpha, ctx.spec.replicas, seed, state)
            .map_err(sim)?;
    let mut out = Vec::with_capacity(est.tau_samples.len() + 1);
    for (i, &tau) in est.tau_samples.iter().enumerate() {
        let mut r = ctx.record(gp, Some(i as u64), seed);
        r.out("tau", tau)
            .flag("reached", tau.is_finite())
            .flag("exceeded", tau > est.horizon);
        out.push(r);
    }
    let mut s = ctx.record(gp, None, seed);
    s.out("theta", rc.theta)
        .out("a0", rc.a0)
        .out("rho", rc.rho)
        .out("eps0", rc.eps0)
        .out("t0", rc.t0)
        .out("alpha", alpha)
        .out("horizon", est.horizon)
        .out("threshold", est.threshold)
        .out("initial_sites", est.initial_sites as f64)
        .out("exceed_fraction", est.exceed_fraction)
        .out("sigma", est.sigma)
        .out("interval_lo", est.interval.0)
        .out("interval_hi", est.interval.1)
        .out("bound", est.bound)
        .flag("pass", est.exceed_fraction <= est.bound + 3.0 * est.sigma);
    out.push(s);
    Ok(out)
}

fn sim(e: impl ToString) -> CliError {
    CliError::Simulation(e.to_string())
}

fn brw_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<ResultRecord, CliError> {
    let d = &ctx.spec.diagnostics;
    let rep = simulate_brw_max(
        ctx.geom(),
        &gp.params,
        d.brw_t,
        ctx.spec.replicas,
        seed,
        d.brw_m,
        d.brw_cap,
    )
    .map_err(sim)?;
    let mut r = ctx.record(gp, None, seed);
    r.out("threshold", rep.threshold)
        .out("bound", rep.bound)
        .out("cosh_minus_one", rep.cosh_minus_one)
        .out("mean_population", rep.mean_population)
        .flag("cosh_check", rep.cosh_check);
    let mut tail_ok = true;
    let mut mean_ok = true;
    for k in 0..rep.empirical_tail.len() {
        r.out(&format!("tail_{k}"), rep.empirical_tail[k])
            .out(&format!("displacement_mean_{k}"), rep.displacement_mean[k])
            .out(&format!("displacement_se_{k}"), rep.displacement_se[k])
            .out(&format!("max_second_moment_{k}"), rep.max_second_moment[k]);
        tail_ok &= rep.empirical_tail[k] <= rep.bound;
        mean_ok &= rep.displacement_mean[k].abs() <= 4.0 * rep.displacement_se[k];
    }
    r.flag("tail_within_bound", tail_ok)
        .flag("displacement_centred", mean_ok);
    Ok(r)
}

fn moving_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<ResultRecord, CliError> {
    let d = &ctx.spec.diagnostics;
    let init = ctx.initial(seed)?;
    let rep = moving_particle_gof(
        ctx.geom(),
        &gp.params,
        &d.direction,
        &init,
        ctx.spec.replicas,
        seed,
        d.delta,
        d.level,
    )
    .map_err(sim)?;
    let mut r = ctx.record(gp, None, seed);
    r.out("h00", rep.h00 as f64)
        .out("box_size", rep.box_size as f64)
        .out("g0_prob", rep.g0_prob)
        .out("g0_p_value", rep.g0_gof.p_value)
        .out("strata", rep.strata.len() as f64)
        .out(
            "min_stratum_p_value",
            rep.strata.iter().map(|s| s.gof.p_value).fold(1.0, f64::min),
        )
        .out("per_test_level", rep.per_test_level)
        .out("success_fraction", rep.success_fraction)
        .out("delta_99", rep.delta_99)
        .flag("pass", rep.pass);
    Ok(r)
}

/// Grid and initial field for an IDE run.
pub fn ide_setup(ide: &IdeSpec, p: &RateParams) -> Result<Field, IdeError> {
    match ide.initial {
        IdeInitial::TestFunctions => {
            let c = ide_constants(p, ide.kappa, ide.d)?;
            let h = ide.h.unwrap_or(c.eps_ramp / ide.h_divisor);
            let radius = ide.half_width.unwrap_or(c.m + c.kappa.max(1.0) + 1.0);
            let spec = GridSpec::covering(ide.d, h, radius, ide.boundary)?;
            build_test_functions(&c, &spec)
        }
        IdeInitial::Ball { radius, s, t } => {
            let h = ide.h.unwrap_or(0.05);
            let spec = GridSpec::covering(
                ide.d,
                h,
                ide.half_width.unwrap_or(2.0 * radius + 2.0 * ide.kappa),
                ide.boundary,
            )?;
            let n = spec.num_nodes();
            let inside: Vec<bool> = (0..n).map(|i| spec.sup_norm(i) <= radius).collect();
            let sv = inside.iter().map(|&b| if b { s } else { 0.0 }).collect();
            let tv = inside.iter().map(|&b| if b { t } else { 0.0 }).collect();
            Field::new(spec, sv, tv)
        }
    }
}

fn ide_front_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<ResultRecord, CliError> {
    let ide = ctx.spec.ide.as_ref().expect("validated: ide present");
    let f0 = ide_setup(ide, &gp.params).map_err(sim)?;
    let dt = ide.dt.unwrap_or(max_stable_dt(&gp.params));
    let samples =
        integrate_ide(&f0, &gp.params, ide.kappa, dt, ide.t_end, ide.sample_every).map_err(sim)?;
    let front = front_metrics(&samples, ide.front_level);
    let mut r = ctx.record(gp, None, seed);
    r.out("h", f0.spec.h)
        .out("dt", dt)
        .out("t_end", ide.t_end)
        .out("initial_radius", front.radii[0])
        .out("final_radius", *front.radii.last().unwrap());
    if let Some(sl) = front.slope {
        r.out("front_speed", sl);
    }
    if let Some(dir) = ctx.spec.out.as_ref() {
        fs::create_dir_all(dir)?;
        let last = &samples.last().unwrap().1;
        fs::write(
            dir.join(format!("field_{}.bin", gp.index)),
            last.to_snapshot(),
        )?;
        if ide.d == 1 {
            fs::write(
                dir.join(format!("field_{}.csv", gp.index)),
                last.csv_slice(),
            )?;
        }
        let mut w = csv::Writer::from_path(dir.join(format!("front_{}.csv", gp.index)))
            .map_err(|e| CliError::Io(e.to_string()))?;
        w.write_record(["t", "radius"])
            .map_err(|e| CliError::Io(e.to_string()))?;
        for (t, rad) in front.times.iter().zip(&front.radii) {
            w.write_record([t.to_string(), rad.to_string()])
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(r)
}

fn growth_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<ResultRecord, CliError> {
    let ide = ctx.spec.ide.as_ref().expect("validated: ide present");
    let mut r = ctx.record(gp, None, seed);
    let c = match ide_constants(&gp.params, ide.kappa, ide.d) {
        Ok(c) => c,
        Err(IdeError::HypothesisFails(m)) => {
            r.flag("hypotheses_hold", false).flag("pass", false);
            r.kind = format!("{}: {m}", r.kind);
            r.kind = ctx.spec.kind.as_str().to_string();
            return Ok(r);
        }
        Err(e) => return Err(sim(e)),
    };
    let f = ide_setup(ide, &gp.params).map_err(sim)?;
    let rep = verify_growth_condition(&f, &c, &gp.params, ide.kappa).map_err(sim)?;
    r.out("s0", c.s0)
        .out("t0", c.t0)
        .out("eps_ramp", c.eps_ramp)
        .out("eps1", c.eps1)
        .out("h", f.spec.h)
        .out("min_deriv_s", rep.min_deriv_s)
        .out("min_deriv_t", rep.min_deriv_t)
        .out("threshold", rep.threshold)
        .out("tol", rep.tol)
        .flag("hypotheses_hold", true)
        .flag("high_growth_everywhere", rep.high_growth_everywhere)
        .flag("pass", rep.pass);
    Ok(r)
}

fn suite_task(ctx: &Ctx, gp: &GridPoint, seed: u64) -> Result<ResultRecord, CliError> {
    let g = ctx.geom();
    let p = &gp.params;
    let d = &ctx.spec.diagnostics;
    let mut rep = DiagnosticsReport::default();
    let mut rng = sim_rng(seed, &[0x5717]);
    if survival_condition(p, p.krone_omega()) {
        let rc = recovery_constants(p, g.dim(), d.a0_init).map_err(sim)?;
        rep.record_constants(&rc);
        let mut violations = 0;
        for _ in 0..d.drift_samples {
            let xi = random_low_density(g, rc.a0, &mut rng);
            let (mu, rq) = recovery_drift_check(&xi, &rc, p);
            violations += (mu < rq) as usize;
        }
        let cond = (1.0 - 4.0 * g.epsilon0()).powi(g.dim() as i32) > 1.0 - 2.0 * rc.a0;
        rep.check(
            "recovery_drift",
            violations == 0 || !cond,
            format!(
                "{violations} of {} configurations below rho Q; geometry condition {cond}",
                d.drift_samples
            ),
        );
        rep.statistic("recovery_drift_violations", violations as f64);
        let init = ctx.initial(seed)?;
        let dy = dynkin_residuals(p, &rc, &init, d.dynkin_t, ctx.spec.replicas.max(2), seed)
            .map_err(sim)?;
        rep.statistic("dynkin_mean", dy.mean);
        rep.statistic("dynkin_se", dy.se);
        rep.statistic("dynkin_second_moment", dy.second_moment);
        rep.statistic("dynkin_quadratic_variation", dy.mean_quadratic_variation);
        rep.statistic("dynkin_fitted_c", dy.fitted_c);
        rep.check(
            "dynkin_centred",
            dy.mean.abs() <= 4.0 * dy.se,
            format!("mean {} se {}", dy.mean, dy.se),
        );
    } else if let Ok(tp) = theta_prime(p) {
        rep.constant("theta_prime", tp);
        let lambda = if tp * p.nu > p.beta {
            0.5 * (tp * p.nu / p.beta).ln() / g.range() as f64
        } else {
            f64::NAN
        };
        let mut violations = 0;
        for _ in 0..d.drift_samples {
            let states = (0..g.num_sites())
                .map(|_| rand::Rng::random_range(&mut rng, 0..3u8))
                .collect();
            let eta = Configuration::from_states(g, states).map_err(sim)?;
            let (_, mu_s) = savanna::diagnostics::s_functional(&eta, p, tp);
            violations += (mu_s > 0.0) as usize;
            if lambda.is_finite() {
                let ex = extinction_functionals(&eta, p, lambda).map_err(sim)?;
                violations += (ex.coeff_one > 0.0 || ex.coeff_two > 0.0) as usize;
            }
        }
        rep.check(
            "extinction_drift",
            violations == 0,
            format!("{violations} violations"),
        );
    }
    match simulate_brw_max(g, p, d.brw_t, ctx.spec.replicas, seed, d.brw_m, d.brw_cap) {
        Ok(brw) => {
            rep.check(
                "cosh",
                brw.cosh_check,
                format!("cosh(1) - 1 = {}", brw.cosh_minus_one),
            );
            rep.check(
                "brw_tail",
                brw.empirical_tail.iter().all(|&t| t <= brw.bound),
                format!("{:?} vs {}", brw.empirical_tail, brw.bound),
            );
        }
        // Supercritical branching outgrew the cap; shorten `brw_t` to test it.
        Err(DiagError::PopulationExplosion { time, .. }) => rep.statistic("brw_cap_time", time),
        Err(e) => return Err(sim(e)),
    }
    if let Some(dir) = ctx.spec.out.as_ref() {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(
            dir.join(format!("diagnostics_{}.json", gp.index)),
            text + "\n",
        )?;
    }
    let mut r = ctx.record(gp, None, seed);
    for (k, v) in rep.constants.iter().chain(rep.statistics.iter()) {
        r.out(k, *v);
    }
    for c in &rep.checks {
        r.flag(&c.name, c.pass);
    }
    r.flag("pass", rep.all_pass());
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str) -> ExperimentSpec {
        ExperimentSpec::from_toml(text).unwrap()
    }

    const SWEEP: &str = r#"
kind = "phase_sweep"
replicas = 3
seed = 11
horizon = 5.0
[params]
beta = [0.5, 2.0]
mu = [0.5, 1.0]
nu = 0.5
omega = 1.0
[geometry]
d = 1
range = 3
epsilon0 = 0.34
side = 24
relaxed = true
"#;

    #[test]
    fn sweep_is_deterministic_across_thread_counts() {
        let s = spec(SWEEP);
        let a = run_experiment(
            &s,
            SWEEP,
            &RunOptions {
                threads: Some(1),
                out: None,
            },
        )
        .unwrap();
        let b = run_experiment(
            &s,
            SWEEP,
            &RunOptions {
                threads: Some(3),
                out: None,
            },
        )
        .unwrap();
        let strip = |o: &RunOutcome| {
            o.records
                .iter()
                .map(|r| r.without_wall_time())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.records.len(), 4 * 3 + 4);
        let pd = a.phase.unwrap();
        assert_eq!((pd.row_values.len(), pd.col_values.len()), (2, 2));
        assert_eq!(pd.cell(1, 0).grid_index, 2);
    }

    #[test]
    fn pilot_fixes_horizon_for_extinction() {
        let text = r#"
kind = "survival_finite_seed"
replicas = 20
seed = 3
[params]
beta = 1.2
mu = 1.5
nu = 1.0
omega = 1.0
[geometry]
d = 1
range = 2
epsilon0 = 0.5
side = 64
relaxed = true
[initial]
type = "block"
state = 2
count = 5
"#;
        let out = run_experiment(&spec(text), text, &RunOptions::default()).unwrap();
        let h = &out.manifest.horizons[0];
        assert_eq!(h.source, "pilot");
        assert_eq!(h.pilot_survivors, Some(0));
        assert!(h.horizon > 0.0 && h.horizon < 1000.0);
        assert_eq!(out.manifest.config_sha256, sha256_hex(text.as_bytes()));
    }

    #[test]
    fn writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(SWEEP);
        run_experiment(
            &s,
            SWEEP,
            &RunOptions {
                threads: None,
                out: Some(dir.path().to_path_buf()),
            },
        )
        .unwrap();
        for f in [
            "records.jsonl",
            "records.csv",
            "manifest.json",
            "phase_matrix.dat",
            "phase.svg",
            "phase_cells.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = crate::records::read_csv(&dir.path().join("records.csv")).unwrap();
        let jl = crate::records::read_jsonl(&dir.path().join("records.jsonl")).unwrap();
        assert_eq!(back, jl);
    }
}
