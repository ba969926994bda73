//! Command surface of `rdm-lab`: configuration, the stage pipeline and report
//! writing, shared by the binary and the acceptance suite.

pub mod cache;
pub mod config;
pub mod pipeline;
pub mod report;

use std::path::Path;

use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::pipeline::{
    analyze_point, point_rows, spectrum_report, Engine, Mode, PipelineError, PointReport,
    ROW_HEADER,
};
use crate::report::{fl, Float, ManifestEntry, OutputDir, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_ASSERTION: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Delta,
    Epsilon,
    EnvSize,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Delta => "delta",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::EnvSize => "env_size",
        }
    }
}

/// Result of a command: files written plus a summary of findings.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<ManifestEntry>,
    pub failures: Vec<String>,
    pub bound_violations: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Maps an error to the exit-code contract.
pub fn error_exit_code(e: &PipelineError) -> i32 {
    use rdm_lab_core::Error as E;
    match e {
        PipelineError::Config(_) => EXIT_CONFIG,
        PipelineError::Core(E::EigenFailure | E::NotHermitian { .. }) => EXIT_RUNTIME,
        PipelineError::Core(_) => EXIT_CONFIG,
        PipelineError::Io(_) => EXIT_RUNTIME,
    }
}

/// Applies `RDM_LAB_THREADS` to the linear-algebra backend.
pub fn configure_threads(value: Option<&str>) -> Result<(), ConfigError> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| ConfigError {
        field: "RDM_LAB_THREADS".into(),
        message: format!("`{v}` is not a thread count"),
    })?;
    faer::set_global_parallelism(if n <= 1 {
        faer::Par::Seq
    } else {
        faer::Par::rayon(n)
    });
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    label: &'a str,
    command: &'a str,
    points: &'a [PointReport],
    bound_violations: usize,
    failures: &'a [String],
}

fn collect(points: &[PointReport]) -> (Vec<String>, usize) {
    let failures = points
        .iter()
        .flat_map(|p| {
            p.failures.iter().map(move |f| {
                format!(
                    "lambda={} {} delta={}: {f}",
                    p.lambda.0, p.placement.kind, p.delta.0
                )
            })
        })
        .collect();
    (
        failures,
        points.iter().map(PointReport::bound_violations).sum(),
    )
}

fn renorm_table(points: &[PointReport]) -> Table {
    let mut t = Table::new(&[
        "lambda",
        "placement",
        "delta",
        "c_sw",
        "c_sq",
        "d_gibbs",
        "d_renorm_gibbs",
        "satisfied",
    ]);
    use crate::report::Cell;
    for p in points {
        let r = p.renorm.as_ref();
        t.push(vec![
            Cell::F(p.lambda.0),
            Cell::S(format!("{}={}", p.placement.kind, p.placement.value.0)),
            Cell::F(p.delta.0),
            Cell::OptF(r.map(|r| r.c_sw.0)),
            Cell::OptF(r.map(|r| r.c_sq.0)),
            Cell::OptF(r.map(|r| r.d_gibbs.0)),
            Cell::OptF(r.map(|r| r.d_renorm_gibbs.0)),
            Cell::S(r.map(|r| r.satisfied.to_string()).unwrap_or_default()),
        ]);
    }
    t
}

/// `rdm-lab run`: every stage at every configured point.
pub fn run(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let a = &cfg.analysis;
    let engine = Engine::new(&cfg.model, cfg.output.cache_dir.as_deref())?;
    let mut out = OutputDir::create(&cfg.output.directory, &cfg.model.label)?;
    let mut spectra = Vec::new();
    let mut dos = Table::new(&[]);
    let mut points = Vec::new();
    let mut index = 0;
    for &lambda in &a.lambdas {
        let c = engine.coupled(lambda)?;
        let (spec_report, dos_table) = spectrum_report(&c, a.dos_bins)?;
        spectra.push(spec_report);
        if dos.header.is_empty() {
            dos.header = dos_table.header.clone();
        }
        dos.rows.extend(dos_table.rows);
        for placement in &a.placements {
            for &delta in &a.deltas {
                points.push(analyze_point(
                    &c,
                    a,
                    placement,
                    delta,
                    &a.epsilons,
                    index,
                    Mode::Full,
                )?);
                index += 1;
            }
        }
    }
    let (failures, bound_violations) = collect(&points);
    if cfg.output.json {
        out.write_json("spectrum.json", &spectra)?;
        let report = RunReport {
            label: &cfg.model.label,
            command: "run",
            points: &points,
            bound_violations,
            failures: &failures,
        };
        out.write_json("report.json", &report)?;
    }
    if cfg.output.csv {
        let mut rows = Table::new(ROW_HEADER);
        for (k, p) in points.iter().enumerate() {
            for r in point_rows("point", k as f64, p) {
                rows.push(r);
            }
        }
        out.write_csv("points.csv", &rows)?;
        out.write_csv("renorm.csv", &renorm_table(&points))?;
        out.write_csv("dos.csv", &dos)?;
    }
    let files = out.finish("run")?;
    Ok(Outcome {
        files,
        failures,
        bound_violations,
    })
}

/// `rdm-lab sweep`: one row per value of `axis`, all other parameters at their
/// first configured value.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<Outcome, PipelineError> {
    let a = &cfg.analysis;
    let (placement, delta, lambda, epsilon) =
        (&a.placements[0], a.deltas[0], a.lambdas[0], a.epsilons[0]);
    let mut table = Table::new(ROW_HEADER);
    table.header.push("n_sites".into());
    let mut points = Vec::new();
    let push = |table: &mut Table, value: f64, p: &PointReport, n_sites: Option<usize>| {
        for mut r in point_rows(axis.as_str(), value, p) {
            r.push(n_sites.map_or(
                crate::report::Cell::S(String::new()),
                crate::report::Cell::U,
            ));
            table.push(r);
        }
    };
    let n_sites = cfg.model.environment.n_sites();
    match axis {
        SweepAxis::Lambda => {
            let engine = Engine::new(&cfg.model, cfg.output.cache_dir.as_deref())?;
            for (k, &l) in a.lambdas.iter().enumerate() {
                let c = engine.coupled(l)?;
                let p = analyze_point(&c, a, placement, delta, &[epsilon], k, Mode::Full)?;
                push(&mut table, l, &p, n_sites);
                points.push(p);
            }
        }
        SweepAxis::Delta | SweepAxis::Epsilon => {
            let engine = Engine::new(&cfg.model, cfg.output.cache_dir.as_deref())?;
            let c = engine.coupled(lambda)?;
            if axis == SweepAxis::Delta {
                for (k, &d) in a.deltas.iter().enumerate() {
                    let p = analyze_point(&c, a, placement, d, &[epsilon], k, Mode::Full)?;
                    push(&mut table, d, &p, n_sites);
                    points.push(p);
                }
            } else {
                let p = analyze_point(&c, a, placement, delta, &a.epsilons, 0, Mode::Full)?;
                for (row, &e) in point_rows(axis.as_str(), 0.0, &p)
                    .into_iter()
                    .zip(&a.epsilons)
                {
                    let mut row = row;
                    row[1] = crate::report::Cell::F(e);
                    row.push(n_sites.map_or(
                        crate::report::Cell::S(String::new()),
                        crate::report::Cell::U,
                    ));
                    table.push(row);
                }
                points.push(p);
            }
        }
        SweepAxis::EnvSize => {
            if a.env_sizes.is_empty() {
                return Err(ConfigError {
                    field: "analysis.env_sizes".into(),
                    message: "needed for the env_size sweep".into(),
                }
                .into());
            }
            for (k, &n) in a.env_sizes.iter().enumerate() {
                let spec = cfg.model_with_sites(n).ok_or_else(|| ConfigError {
                    field: "analysis.env_sizes".into(),
                    message: format!("cannot resize the environment to {n} sites"),
                })?;
                let engine = Engine::new(&spec, cfg.output.cache_dir.as_deref())?;
                let c = engine.coupled(lambda)?;
                let p = analyze_point(&c, a, placement, delta, &[epsilon], k, Mode::Full)?;
                push(&mut table, n as f64, &p, Some(n));
                points.push(p);
            }
        }
    }
    let mut out = OutputDir::create(&cfg.output.directory, &cfg.model.label)?;
    let (failures, bound_violations) = collect(&points);
    out.write_csv(&format!("sweep_{}.csv", axis.as_str()), &table)?;
    if cfg.output.json {
        let report = RunReport {
            label: &cfg.model.label,
            command: "sweep",
            points: &points,
            bound_violations,
            failures: &failures,
        };
        out.write_json(&format!("sweep_{}.json", axis.as_str()), &report)?;
    }
    let files = out.finish(&format!("sweep {}", axis.as_str()))?;
    Ok(Outcome {
        files,
        failures,
        bound_violations,
    })
}

#[derive(Serialize)]
struct VerifyPoint {
    lambda: Float,
    placement: String,
    delta: Float,
    d_gamma: usize,
    oracle_residual: Float,
    hermitian_deviation: Float,
    trace_error: Float,
    min_eigenvalue: Float,
    identity_residual: Float,
    per_state_residual: Float,
    q_hermiticity_residual: Float,
    resummation_residual: Float,
    failures: Vec<String>,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    label: &'a str,
    identity_tolerance: Float,
    oracle_tolerance: Float,
    passed: bool,
    points: Vec<VerifyPoint>,
}

/// `rdm-lab verify`: exact identities only, at every configured point.
pub fn verify(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let a = &cfg.analysis;
    let engine = Engine::new(&cfg.model, cfg.output.cache_dir.as_deref())?;
    let mut records = Vec::new();
    let mut points = Vec::new();
    let mut index = 0;
    for &lambda in &a.lambdas {
        let c = engine.coupled(lambda)?;
        for placement in &a.placements {
            for &delta in &a.deltas {
                let p = analyze_point(&c, a, placement, delta, &a.epsilons, index, Mode::Verify)?;
                index += 1;
                records.push(VerifyPoint {
                    lambda: p.lambda,
                    placement: pipeline::placement_label(placement),
                    delta: p.delta,
                    d_gamma: p.d_gamma,
                    oracle_residual: p.rdm_check.oracle_residual,
                    hermitian_deviation: p.rdm_check.hermitian_deviation,
                    trace_error: p.rdm_check.trace_error,
                    min_eigenvalue: p.rdm_check.min_eigenvalue,
                    identity_residual: p.offdiag.identity.shell_residual,
                    per_state_residual: p.offdiag.identity.per_state_residual,
                    q_hermiticity_residual: p.offdiag.identity.q_hermiticity_residual,
                    resummation_residual: fl(p
                        .epsilons
                        .iter()
                        .map(|e| e.resummation_residual.0)
                        .fold(0.0, f64::max)),
                    failures: p.failures.clone(),
                });
                points.push(p);
            }
        }
    }
    let (failures, _) = collect(&points);
    let report = VerifyReport {
        label: &cfg.model.label,
        identity_tolerance: fl(pipeline::IDENTITY_TOLERANCE),
        oracle_tolerance: fl(pipeline::ORACLE_TOLERANCE),
        passed: failures.is_empty(),
        points: records,
    };
    let mut out = OutputDir::create(&cfg.output.directory, &cfg.model.label)?;
    out.write_json("verify.json", &report)?;
    let files = out.finish("verify")?;
    Ok(Outcome {
        files,
        failures,
        bound_violations: 0,
    })
}

/// Loads a config file, mapping read and parse problems to config errors.
pub fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    Ok(config::load(path)?)
}
