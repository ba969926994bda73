//! Stage pipeline: spectrum, widths, microcanonical ensemble, off-diagonal
//! identity, renormalization and typicality for one analysis point at a time.

// NaN residuals must count as failures, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::Path;

use rdm_lab_core::ensemble::{
    diagonal_bound_report, fit_q, make_shell, make_uncoupled_shell, max_offdiagonal,
    rdm_microcanonical, rdm_of_vector, rdm_single_state, rdm_uncoupled, region_decomposition,
    shell_intensities, start_at_fraction, trace_distance, BoundReport, EnergyShell, QFit, Rdm,
    RegionDecomposition, UncoupledShell,
};
use rdm_lab_core::model::{ModelSpec, ProductModel};
use rdm_lab_core::offdiag::{
    d_reg, eth_stats, interaction_norm, q_values, qubit_eth_prediction,
    qubit_eth_prediction_per_state, verify_identity, verify_identity_per_state,
};
use rdm_lab_core::renorm::{
    build_candidate, candidate_eth_mean, eth_means, evaluate_condition, plain_gibbs,
    renormalized_gibbs, shell_beta, CandidateTag, Thresholds,
};
use rdm_lab_core::spectral::{dos_compare, SpectralData};
use rdm_lab_core::typical::{k_statistics, typicality_stats};
use rdm_lab_core::widths::width_report;
use rdm_lab_core::{c64, Error as CoreError, Mat};
use serde::Serialize;

use crate::cache::EigenCache;
use crate::config::{Analysis, ConfigError, Placement, RenormChoice};
use crate::report::{fl, Cell, Float, Table};

/// Tolerance on the commutator identity, the resummation and RDM validity.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
/// Tolerance between the shell RDM and the brute-force partial trace.
pub const ORACLE_TOLERANCE: f64 = 1e-12;
const NORM_ITERATIONS: usize = 500;
const NORM_TOLERANCE: f64 = 1e-10;

#[derive(Debug)]
pub enum PipelineError {
    Config(ConfigError),
    Core(CoreError),
    Io(std::io::Error),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(e) => write!(f, "config error: {e}"),
            PipelineError::Core(e) => write!(f, "analysis error: {e}"),
            PipelineError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e)
    }
}

impl From<CoreError> for PipelineError {
    fn from(e: CoreError) -> Self {
        PipelineError::Core(e)
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Marginal spectra of a model, shared by every coupling strength.
pub struct Engine {
    spec: ModelSpec,
    base: ProductModel,
    cache: Option<EigenCache>,
}

/// Everything tied to one coupling strength.
pub struct Coupled {
    pub lambda: f64,
    pub spec: ModelSpec,
    pub model: ProductModel,
    pub sd: SpectralData,
    pub interaction_norm: f64,
}

impl Engine {
    pub fn new(spec: &ModelSpec, cache_dir: Option<&Path>) -> Result<Self> {
        let base = ProductModel::new(spec)?;
        let cache = cache_dir.map(EigenCache::open).transpose()?;
        Ok(Engine {
            spec: spec.clone(),
            base,
            cache,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn coupled(&self, lambda: f64) -> Result<Coupled> {
        let model = self.base.with_coupling(lambda);
        let cached = self.cache.as_ref().and_then(|c| c.load(&model));
        let sd = match cached {
            Some(sd) => sd,
            None => {
                let sd = SpectralData::coupled(&model)?;
                if let Some(c) = &self.cache {
                    c.store(&model, &sd)?;
                }
                sd
            }
        };
        let interaction_norm = interaction_norm(&model, NORM_ITERATIONS, NORM_TOLERANCE);
        Ok(Coupled {
            lambda,
            spec: self.spec.with_coupling(lambda),
            model,
            sd,
            interaction_norm,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every stage.
    Full,
    /// Exact identities only: RDM validity, partial-trace oracle, commutator
    /// identity and resummation.
    Verify,
}

#[derive(Debug, Serialize)]
pub struct PlacementRecord {
    pub kind: &'static str,
    pub value: Float,
}

impl PlacementRecord {
    fn of(p: &Placement) -> Self {
        match *p {
            Placement::CenterFraction(f) => PlacementRecord {
                kind: "center_fraction",
                value: fl(f),
            },
            Placement::EnergyStart(e) => PlacementRecord {
                kind: "energy_start",
                value: fl(e),
            },
        }
    }
}

pub fn placement_label(p: &Placement) -> String {
    match *p {
        Placement::CenterFraction(f) => format!("center_fraction={f}"),
        Placement::EnergyStart(e) => format!("energy_start={e}"),
    }
}

#[derive(Debug, Serialize)]
pub struct SpectrumReport {
    pub lambda: Float,
    pub dim: usize,
    pub d_s: usize,
    pub d_e: usize,
    pub energy_min: Float,
    pub energy_max: Float,
    pub normalization_error: Float,
    pub parseval_error: Float,
    pub dos_l1_distance: Float,
    pub dos_warning: bool,
    pub interaction_norm: Float,
}

pub fn spectrum_report(c: &Coupled, bins: usize) -> Result<(SpectrumReport, Table)> {
    let sd = &c.sd;
    let dos = dos_compare(&sd.energies, &sd.basis.energies, bins.max(4))?;
    let mut table = Table::new(&[
        "lambda",
        "coupled_center",
        "coupled_count",
        "coupled_density",
        "uncoupled_center",
        "uncoupled_count",
        "uncoupled_density",
    ]);
    let (cc, uc) = (dos.coupled.bin_centers(), dos.uncoupled.bin_centers());
    for k in 0..cc.len() {
        table.push(vec![
            Cell::F(c.lambda),
            Cell::F(cc[k]),
            Cell::U(dos.coupled.counts[k]),
            Cell::F(dos.coupled.density[k]),
            Cell::F(uc[k]),
            Cell::U(dos.uncoupled.counts[k]),
            Cell::F(dos.uncoupled.density[k]),
        ]);
    }
    let report = SpectrumReport {
        lambda: fl(c.lambda),
        dim: sd.dim(),
        d_s: sd.d_s(),
        d_e: sd.d_e(),
        energy_min: fl(sd.energies[0]),
        energy_max: fl(sd.energies[sd.dim() - 1]),
        normalization_error: fl(sd.normalization_error()),
        parseval_error: fl(sd.parseval_error()),
        dos_l1_distance: fl(dos.l1_distance),
        dos_warning: dos.warning,
        interaction_norm: fl(c.interaction_norm),
    };
    Ok((report, table))
}

#[derive(Debug, Serialize)]
pub struct RdmCheckRecord {
    pub hermitian_deviation: Float,
    pub trace_error: Float,
    pub min_eigenvalue: Float,
    /// `max |rho - brute-force partial trace|`.
    pub oracle_residual: Float,
}

#[derive(Debug, Serialize)]
pub struct AlphaRecord {
    pub alpha: usize,
    pub rho_aa: Float,
    pub rho0_aa: Float,
    pub diff: Float,
    pub d_env: usize,
    pub linear: bool,
    pub linearity_r2: Float,
    pub bound_kind: Option<&'static str>,
    pub bound: Option<Float>,
    pub ratio: Option<Float>,
    pub resummed: Float,
    pub region_counts: [usize; 4],
    pub region_f: [Float; 4],
    /// Edge-region parameters `a_1, a_3` of a wide shell.
    pub edge_a: Option<[Float; 2]>,
}

#[derive(Debug, Serialize)]
pub struct QFitRecord {
    pub q1: Float,
    pub q0: Float,
    pub points: usize,
    pub q1_identified: bool,
}

impl QFitRecord {
    fn of(q: Option<QFit>) -> Option<Self> {
        q.map(|q| QFitRecord {
            q1: fl(q.q1),
            q0: fl(q.q0),
            points: q.points,
            q1_identified: q.q1_identified,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct EpsilonRecord {
    pub epsilon: Float,
    pub w_e: Float,
    pub w_l: Float,
    pub w_m: Float,
    pub containment_violations: usize,
    pub regime: &'static str,
    pub uniform_env_shells: bool,
    pub violations: usize,
    pub resummation_residual: Float,
    pub per_alpha: Vec<AlphaRecord>,
    pub q_fit: Option<QFitRecord>,
}

#[derive(Debug, Serialize)]
pub struct PairRecord {
    pub alpha: usize,
    pub beta: usize,
    pub re: Float,
    pub im: Float,
    pub abs: Float,
    /// Standard error of the shell mean of `rho^(n)_{alpha beta}`.
    pub across_shell_se: Float,
}

#[derive(Debug, Serialize)]
pub struct IdentityRecord {
    pub shell_residual: Float,
    pub per_state_residual: Float,
    pub q_hermiticity_residual: Float,
    pub pairs: usize,
    pub skipped_pairs: usize,
}

#[derive(Debug, Serialize)]
pub struct EthTermRecord {
    pub term: usize,
    pub shell_mean: Float,
    pub window: [Float; 2],
    pub samples: Option<usize>,
    pub h0: Option<Float>,
    pub h_slope: Option<Float>,
    pub h_r2: Option<Float>,
    pub relative_variation: Option<Float>,
    pub flat: Option<bool>,
    pub offdiag_rms: Option<Float>,
    pub note: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct PredictionRecord {
    pub measured: [Float; 2],
    pub predicted: [Float; 2],
    pub relative_residual: Float,
    pub per_state_median_residual: Float,
    pub diagonal_free: bool,
    pub flat: bool,
}

#[derive(Debug, Serialize)]
pub struct OffdiagRecord {
    pub identity: IdentityRecord,
    pub max_offdiagonal: Float,
    pub pairs: Vec<PairRecord>,
    pub d_reg: Float,
    pub eth: Vec<EthTermRecord>,
    pub prediction: Option<PredictionRecord>,
}

#[derive(Debug, Serialize)]
pub struct RenormRecord {
    pub candidate: &'static str,
    pub o_s: Vec<Vec<[Float; 2]>>,
    pub beta: Float,
    pub beta_r2: Float,
    pub beta_levels: usize,
    pub beta_warning: bool,
    pub c_sw: Float,
    pub c_sq: Float,
    pub in_sw: bool,
    pub in_sq: bool,
    pub satisfied: bool,
    pub d_gibbs: Float,
    pub d_renorm_gibbs: Float,
}

#[derive(Debug, Serialize)]
pub struct TypicalRecord {
    pub samples: usize,
    pub seed: u64,
    pub mean_distance: Float,
    pub std_error: Float,
    pub bound: Float,
    pub bound_holds: bool,
    pub k1_residual_rms: Vec<Float>,
    pub k1_residual_scale: Vec<Float>,
    pub k2_rms: Vec<Float>,
    pub k2_region_rms: Vec<[Float; 4]>,
    pub max_split_residual: Float,
}

#[derive(Debug, Serialize)]
pub struct PointReport {
    pub lambda: Float,
    pub placement: PlacementRecord,
    pub e_s: Float,
    pub delta: Float,
    pub d_gamma: usize,
    pub d_gamma0: usize,
    pub thin: bool,
    pub rho: Vec<Vec<[Float; 2]>>,
    pub rho0_diagonal: Vec<Float>,
    pub rdm_check: RdmCheckRecord,
    pub epsilons: Vec<EpsilonRecord>,
    pub q_fit_pooled: Option<QFitRecord>,
    pub offdiag: OffdiagRecord,
    pub renorm: Option<RenormRecord>,
    pub renorm_note: Option<String>,
    pub typical: Option<TypicalRecord>,
    pub typical_note: Option<String>,
    /// Violated exact identities; any entry makes the run exit with status 2.
    pub failures: Vec<String>,
}

impl PointReport {
    pub fn bound_violations(&self) -> usize {
        self.epsilons.iter().map(|e| e.violations).sum()
    }
}

fn matrix_record(m: &Mat<c64>) -> Vec<Vec<[Float; 2]>> {
    (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| [fl(m[(r, c)].re), fl(m[(r, c)].im)])
                .collect()
        })
        .collect()
}

/// Independent partial trace `d_Gamma^{-1} sum_n Tr_E |n><n|` from raw columns.
fn oracle_rdm(sd: &SpectralData, shell: &EnergyShell) -> Mat<c64> {
    let (d_s, d_e) = (sd.d_s(), sd.d_e());
    let mut acc = Mat::<c64>::zeros(d_s, d_s);
    for &n in &shell.members {
        acc += rdm_of_vector(&sd.vectors.column(n), d_s, d_e);
    }
    let g = shell.members.len() as f64;
    Mat::from_fn(d_s, d_s, |a, b| acc[(a, b)] / g)
}

fn e_start(energies: &[f64], placement: &Placement, delta: f64) -> f64 {
    match *placement {
        Placement::CenterFraction(f) => start_at_fraction(energies, f, delta),
        Placement::EnergyStart(e) => e,
    }
}

/// Mixes the master seed with the point index so every point draws its own states.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn env_window(ushell: &UncoupledShell) -> (f64, f64) {
    let lo = ushell
        .env_shells
        .iter()
        .map(|s| s.lo)
        .fold(f64::INFINITY, f64::min);
    let hi = ushell
        .env_shells
        .iter()
        .map(|s| s.hi)
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn pair_records(sd: &SpectralData, shell: &EnergyShell, rho: &Rdm) -> Result<Vec<PairRecord>> {
    let d_s = sd.d_s();
    let singles = shell
        .members
        .iter()
        .map(|&n| rdm_single_state(sd, n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let g = singles.len() as f64;
    let mut out = Vec::new();
    for alpha in 0..d_s {
        for beta in alpha + 1..d_s {
            let mean: c64 = singles.iter().map(|r| r.get(alpha, beta)).sum::<c64>() / g;
            let var = if singles.len() > 1 {
                singles
                    .iter()
                    .map(|r| (r.get(alpha, beta) - mean).norm_sqr())
                    .sum::<f64>()
                    / (g - 1.0)
            } else {
                0.0
            };
            let x = rho.get(alpha, beta);
            out.push(PairRecord {
                alpha,
                beta,
                re: fl(x.re),
                im: fl(x.im),
                abs: fl(x.norm()),
                across_shell_se: fl((var / g).sqrt()),
            });
        }
    }
    Ok(out)
}

struct ShellSetup {
    shell: EnergyShell,
    ushell: UncoupledShell,
    rho: Rdm,
}

fn setup(
    c: &Coupled,
    placement: &Placement,
    delta: f64,
    middle_fraction: f64,
) -> Result<ShellSetup> {
    let e_s = e_start(&c.sd.energies, placement, delta);
    let shell = make_shell(&c.sd.energies, e_s, delta, middle_fraction)?;
    let ushell = make_uncoupled_shell(&c.sd.basis, e_s, delta, middle_fraction)?;
    let rho = rdm_microcanonical(&c.sd, &shell)?;
    Ok(ShellSetup { shell, ushell, rho })
}

fn epsilon_stage(
    c: &Coupled,
    s: &ShellSetup,
    rho0: &Rdm,
    epsilon: f64,
) -> Result<(EpsilonRecord, BoundReport, Vec<RegionDecomposition>)> {
    let sd = &c.sd;
    let intensities = shell_intensities(sd, &s.shell);
    let w = width_report(sd, s.shell.e_s, s.shell.end(), epsilon)?;
    let decs = (0..sd.d_s())
        .map(|a| {
            region_decomposition(
                a,
                &s.shell,
                &sd.basis,
                &intensities,
                &s.ushell.env_shells[a],
                w.w_m,
            )
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let bounds = diagonal_bound_report(&s.rho, rho0, w.w_m, epsilon, &s.shell, &s.ushell, &decs)?;
    let resummation_residual = decs
        .iter()
        .map(|d| (d.reconstructed - s.rho.get(d.alpha, d.alpha).re).abs())
        .fold(0.0, f64::max);
    let per_alpha = bounds
        .per_alpha
        .iter()
        .zip(&decs)
        .map(|(a, d)| AlphaRecord {
            alpha: a.alpha,
            rho_aa: fl(a.rho_aa),
            rho0_aa: fl(a.rho0_aa),
            diff: fl(a.diff),
            d_env: a.d_env,
            linear: a.linear,
            linearity_r2: fl(a.linearity_r2),
            bound_kind: a.applicable.map(|k| k.as_str()),
            bound: a.applicable.and_then(|k| a.bounds.value(k)).map(fl),
            ratio: a.ratio.map(fl),
            resummed: fl(d.reconstructed),
            region_counts: d.counts,
            region_f: d.f.map(fl),
            edge_a: d.edge_parameters(s.shell.delta, w.w_m).map(|a| a.map(fl)),
        })
        .collect();
    let record = EpsilonRecord {
        epsilon: fl(epsilon),
        w_e: fl(w.w_e),
        w_l: fl(w.w_l),
        w_m: fl(w.w_m),
        containment_violations: w.containment_violations,
        regime: bounds.regime.as_str(),
        uniform_env_shells: bounds.uniform_env_shells,
        violations: bounds.violations(),
        resummation_residual: fl(resummation_residual),
        per_alpha,
        q_fit: QFitRecord::of(bounds.q_fit),
    };
    Ok((record, bounds, decs))
}

fn eth_stage(
    c: &Coupled,
    s: &ShellSetup,
    analysis: &Analysis,
    rho: &Rdm,
) -> Result<(Vec<EthTermRecord>, Option<PredictionRecord>, Vec<f64>)> {
    let model = &c.model;
    let means = eth_means(model, &s.ushell)?;
    let (lo, hi) = env_window(&s.ushell);
    let mut records = Vec::with_capacity(model.terms.len());
    let mut all_flat = true;
    for (k, t) in model.terms.iter().enumerate() {
        let mut r = EthTermRecord {
            term: k,
            shell_mean: fl(means[k]),
            window: [fl(lo), fl(hi)],
            samples: None,
            h0: None,
            h_slope: None,
            h_r2: None,
            relative_variation: None,
            flat: None,
            offdiag_rms: None,
            note: None,
        };
        match eth_stats(&model.env_energies, &t.env, lo, hi, analysis.eth_bins) {
            Ok(st) => {
                all_flat &= st.is_flat();
                r.samples = Some(st.samples);
                r.h0 = Some(fl(st.h0));
                r.h_slope = Some(fl(st.h_slope));
                r.h_r2 = Some(fl(st.h_r2));
                r.relative_variation = Some(fl(st.relative_variation));
                r.flat = Some(st.is_flat());
                r.offdiag_rms = Some(fl(st.offdiag_rms));
            }
            Err(e) => {
                all_flat = false;
                r.note = Some(e.to_string());
            }
        }
        records.push(r);
    }
    let prediction = if model.d_s() == 2 {
        let p = qubit_eth_prediction(rho, model, &means, all_flat)?;
        let mut per = qubit_eth_prediction_per_state(&c.sd, &s.shell, model, &means)?;
        per.sort_by(f64::total_cmp);
        let pair = &p.pairs[0];
        Some(PredictionRecord {
            measured: [fl(pair.measured.re), fl(pair.measured.im)],
            predicted: [fl(pair.predicted.re), fl(pair.predicted.im)],
            relative_residual: fl(pair.relative_residual),
            per_state_median_residual: fl(median_sorted(&per)),
            diagonal_free: p.diagonal_free,
            flat: p.flat,
        })
    } else {
        None
    };
    Ok((records, prediction, means))
}

pub fn median_sorted(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => xs[n / 2],
        n => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

fn renorm_stage(
    c: &Coupled,
    s: &ShellSetup,
    analysis: &Analysis,
    h_bar: &[f64],
) -> Result<RenormRecord> {
    let (o_s, tag) = match &analysis.renorm {
        RenormChoice::Zero => (
            Mat::<c64>::zeros(c.model.d_s(), c.model.d_s()),
            CandidateTag::Zero,
        ),
        RenormChoice::EthMean => (candidate_eth_mean(&c.spec, h_bar)?, CandidateTag::EthMean),
        RenormChoice::Custom(m) => (m.clone(), CandidateTag::Custom),
    };
    let cand = build_candidate(
        &c.spec,
        &c.model,
        &c.sd,
        &s.shell,
        o_s,
        tag,
        analysis.epsilons[0],
        (s.shell.e_s, s.shell.end()),
    )?;
    let beta = shell_beta(&c.model, &s.ushell)?;
    let thresholds = Thresholds {
        tau_sw: analysis.tau_sw,
        tau_sq: analysis.tau_sq,
    };
    let verdict = evaluate_condition(&c.model, &cand, thresholds, &s.rho, beta.beta)?;
    let d_gibbs = trace_distance(&s.rho, &plain_gibbs(&c.model, beta.beta)?)?;
    let d_renorm_gibbs = trace_distance(&s.rho, &renormalized_gibbs(&c.model, &cand, beta.beta)?)?;
    Ok(RenormRecord {
        candidate: tag.as_str(),
        o_s: matrix_record(&cand.o_s),
        beta: fl(beta.beta),
        beta_r2: fl(beta.r_squared),
        beta_levels: beta.levels_in_window,
        beta_warning: beta.warning,
        c_sw: fl(verdict.c_sw),
        c_sq: fl(verdict.c_sq),
        in_sw: verdict.in_sw,
        in_sq: verdict.in_sq,
        satisfied: verdict.satisfied,
        d_gibbs: fl(d_gibbs),
        d_renorm_gibbs: fl(d_renorm_gibbs),
    })
}

fn typical_stage(
    c: &Coupled,
    s: &ShellSetup,
    decs: &[RegionDecomposition],
    samples: usize,
    seed: u64,
) -> Result<TypicalRecord> {
    let stats = typicality_stats(&c.sd, &s.shell, samples, seed)?;
    let k = k_statistics(&c.sd, &s.shell, decs, samples, seed)?;
    Ok(TypicalRecord {
        samples,
        seed,
        mean_distance: fl(stats.mean_distance),
        std_error: fl(stats.std_error),
        bound: fl(stats.bound),
        bound_holds: stats.bound_holds(),
        k1_residual_rms: k.k1_residual_rms.iter().copied().map(fl).collect(),
        k1_residual_scale: k.k1_residual_scale.iter().copied().map(fl).collect(),
        k2_rms: k.k2_rms.iter().copied().map(fl).collect(),
        k2_region_rms: k.k2_region_rms.iter().map(|r| r.map(fl)).collect(),
        max_split_residual: fl(k.max_split_residual),
    })
}

/// Runs the configured stages for one shell.
pub fn analyze_point(
    c: &Coupled,
    analysis: &Analysis,
    placement: &Placement,
    delta: f64,
    epsilons: &[f64],
    point_index: usize,
    mode: Mode,
) -> Result<PointReport> {
    let sd = &c.sd;
    let s = setup(c, placement, delta, analysis.middle_fraction)?;
    let rho0 = rdm_uncoupled(&s.ushell)?;
    let mut failures = Vec::new();

    let check = s.rho.check()?;
    let oracle_residual = s.rho.max_abs_diff(&Rdm::new(oracle_rdm(sd, &s.shell), ""));
    if !check.is_valid(IDENTITY_TOLERANCE) {
        failures.push(format!("shell RDM is not a density matrix: {check:?}"));
    }
    if !(oracle_residual <= ORACLE_TOLERANCE) {
        failures.push(format!(
            "shell RDM differs from the brute-force partial trace by {oracle_residual:e}"
        ));
    }

    let q = q_values(&c.model, sd, &s.shell)?;
    let identity = verify_identity(&s.rho, &q)?;
    let per_state = verify_identity_per_state(sd, &q)?;
    if !(identity.max_residual <= IDENTITY_TOLERANCE) {
        failures.push(format!(
            "shell off-diagonal identity residual {:e}",
            identity.max_residual
        ));
    }
    if !(per_state <= IDENTITY_TOLERANCE) {
        failures.push(format!(
            "per-state off-diagonal identity residual {per_state:e}"
        ));
    }

    let mut eps_records = Vec::with_capacity(epsilons.len());
    let mut q_points = Vec::new();
    let mut first_decs = None;
    for &eps in epsilons {
        let (rec, bounds, decs) = epsilon_stage(c, &s, &rho0, eps)?;
        if !(rec.resummation_residual.0 <= IDENTITY_TOLERANCE) {
            failures.push(format!(
                "region resummation residual {:e} at epsilon {eps}",
                rec.resummation_residual.0
            ));
        }
        q_points.extend(bounds.q_points());
        first_decs.get_or_insert(decs);
        eps_records.push(rec);
    }

    let identity_record = IdentityRecord {
        shell_residual: fl(identity.max_residual),
        per_state_residual: fl(per_state),
        q_hermiticity_residual: fl(q.hermiticity_residual()),
        pairs: q.pairs.len(),
        skipped_pairs: q.skipped.len(),
    };
    let mut offdiag = OffdiagRecord {
        identity: identity_record,
        max_offdiagonal: fl(max_offdiagonal(&s.rho)),
        pairs: Vec::new(),
        d_reg: fl(d_reg(c.interaction_norm, delta)),
        eth: Vec::new(),
        prediction: None,
    };

    let (mut renorm, mut renorm_note, mut typical, mut typical_note) = (None, None, None, None);
    if mode == Mode::Full {
        offdiag.pairs = pair_records(sd, &s.shell, &s.rho)?;
        let (eth, prediction, h_bar) = eth_stage(c, &s, analysis, &s.rho)?;
        offdiag.eth = eth;
        offdiag.prediction = prediction;
        match renorm_stage(c, &s, analysis, &h_bar) {
            Ok(r) => renorm = Some(r),
            Err(e) => renorm_note = Some(e.to_string()),
        }
        if analysis.samples > 0 {
            let seed = point_seed(analysis.seed.unwrap_or(0), point_index);
            let decs = first_decs.as_deref().unwrap_or(&[]);
            match typical_stage(c, &s, decs, analysis.samples, seed) {
                Ok(t) => {
                    if t.mean_distance.0 - 2.0 * t.std_error.0 > t.bound.0 {
                        failures.push(format!(
                            "typicality mean distance {:e} exceeds the bound {:e} by more than two standard errors",
                            t.mean_distance.0, t.bound.0
                        ));
                    }
                    let scale = 1e-9 * s.shell.d_gamma().max(1) as f64;
                    if !(t.max_split_residual.0 <= scale) {
                        failures.push(format!(
                            "overlap split residual {:e}",
                            t.max_split_residual.0
                        ));
                    }
                    typical = Some(t);
                }
                Err(e) => typical_note = Some(e.to_string()),
            }
        } else {
            typical_note = Some("samples = 0".into());
        }
    }

    Ok(PointReport {
        lambda: fl(c.lambda),
        placement: PlacementRecord::of(placement),
        e_s: fl(s.shell.e_s),
        delta: fl(delta),
        d_gamma: s.shell.d_gamma(),
        d_gamma0: s.ushell.d_gamma0(),
        thin: s.shell.thin,
        rho: matrix_record(&s.rho.matrix),
        rho0_diagonal: rho0.diagonal().into_iter().map(fl).collect(),
        rdm_check: RdmCheckRecord {
            hermitian_deviation: fl(check.hermitian_deviation),
            trace_error: fl(check.trace_error),
            min_eigenvalue: fl(check.min_eigenvalue),
            oracle_residual: fl(oracle_residual),
        },
        epsilons: eps_records,
        q_fit_pooled: QFitRecord::of(fit_q(&q_points)),
        offdiag,
        renorm,
        renorm_note,
        typical,
        typical_note,
        failures,
    })
}

pub const ROW_HEADER: &[&str] = &[
    "axis",
    "value",
    "lambda",
    "placement",
    "e_s",
    "delta",
    "d_gamma",
    "d_gamma0",
    "epsilon",
    "w_e",
    "w_l",
    "w_m",
    "regime",
    "max_abs_diff",
    "max_ratio",
    "violations",
    "resummation_residual",
    "identity_residual",
    "per_state_residual",
    "offdiag_abs",
    "offdiag_se",
    "d_reg",
    "eth_relative_residual",
    "c_sw",
    "c_sq",
    "d_gibbs",
    "d_renorm_gibbs",
    "typical_mean_distance",
    "typical_std_error",
    "typical_bound",
];

/// Flat rows, one per epsilon, sharing the columns of [`ROW_HEADER`].
pub fn point_rows(axis: &str, value: f64, p: &PointReport) -> Vec<Vec<Cell>> {
    let top_pair = p
        .offdiag
        .pairs
        .iter()
        .max_by(|a, b| a.abs.0.total_cmp(&b.abs.0));
    p.epsilons
        .iter()
        .map(|e| {
            let max_abs_diff = e
                .per_alpha
                .iter()
                .map(|a| a.diff.0.abs())
                .fold(0.0, f64::max);
            let max_ratio = e
                .per_alpha
                .iter()
                .filter_map(|a| a.ratio.map(|r| r.0))
                .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
            vec![
                Cell::S(axis.into()),
                Cell::F(value),
                Cell::F(p.lambda.0),
                Cell::S(format!("{}={}", p.placement.kind, p.placement.value.0)),
                Cell::F(p.e_s.0),
                Cell::F(p.delta.0),
                Cell::U(p.d_gamma),
                Cell::U(p.d_gamma0),
                Cell::F(e.epsilon.0),
                Cell::F(e.w_e.0),
                Cell::F(e.w_l.0),
                Cell::F(e.w_m.0),
                Cell::S(e.regime.into()),
                Cell::F(max_abs_diff),
                Cell::OptF(max_ratio),
                Cell::U(e.violations),
                Cell::F(e.resummation_residual.0),
                Cell::F(p.offdiag.identity.shell_residual.0),
                Cell::F(p.offdiag.identity.per_state_residual.0),
                Cell::F(p.offdiag.max_offdiagonal.0),
                Cell::OptF(top_pair.map(|t| t.across_shell_se.0)),
                Cell::F(p.offdiag.d_reg.0),
                Cell::OptF(p.offdiag.prediction.as_ref().map(|x| x.relative_residual.0)),
                Cell::OptF(p.renorm.as_ref().map(|r| r.c_sw.0)),
                Cell::OptF(p.renorm.as_ref().map(|r| r.c_sq.0)),
                Cell::OptF(p.renorm.as_ref().map(|r| r.d_gibbs.0)),
                Cell::OptF(p.renorm.as_ref().map(|r| r.d_renorm_gibbs.0)),
                Cell::OptF(p.typical.as_ref().map(|t| t.mean_distance.0)),
                Cell::OptF(p.typical.as_ref().map(|t| t.std_error.0)),
                Cell::OptF(p.typical.as_ref().map(|t| t.bound.0)),
            ]
        })
        .collect()
}
