//! Renormalization operators `O^S`, renormalized Gibbs states and the metrics of
//! the sufficient condition for `rho^S ~ rho~^S_G`.

use faer::{c64, Mat};

use crate::ensemble::{
    gibbs_state, make_shell, make_uncoupled_shell, rdm_microcanonical, trace_distance, EnergyShell,
    Rdm, UncoupledShell,
};
use crate::linalg;
use crate::model::{
    reformulate, EnvMatrix, EnvOperatorSpec, ModelSpec, ProductModel, Reformulation,
};
use crate::offdiag::{q_values, QData};
use crate::spectral::{fit_env_beta, BetaFit, ProductBasis, SpectralData, MIN_FIT_LEVELS};
use crate::widths::width_report;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateTag {
    Zero,
    EthMean,
    Custom,
}

impl CandidateTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateTag::Zero => "zero",
            CandidateTag::EthMean => "eth_mean",
            CandidateTag::Custom => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub tau_sw: f64,
    pub tau_sq: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau_sw: DEFAULT_THRESHOLD,
            tau_sq: DEFAULT_THRESHOLD,
        }
    }
}

/// A renormalization operator together with everything measured in the
/// renormalized basis `|alpha~ i>`.
#[derive(Clone, Debug)]
pub struct RenormCandidate {
    pub tag: CandidateTag,
    /// `O^S` in the input basis of the system.
    pub o_s: Mat<c64>,
    pub reformulation: Reformulation,
    pub model: ProductModel,
    /// `<alpha|alpha~>` between the original and renormalized system eigenbases.
    pub overlap: Mat<c64>,
    pub spectral: SpectralData,
    pub w_m: f64,
    pub q: QData,
    /// `w~_M / (d_S Delta)`.
    pub c_sw: f64,
    /// `max |Q~_{b a} / Delta~_{b a}|`.
    pub c_sq: f64,
}

/// Mean of `<i|H^IE|i>` over the union of the environment shells.
pub fn env_shell_mean(env: &EnvMatrix, ushell: &UncoupledShell) -> Result<f64> {
    let mut idx: Vec<usize> = ushell
        .env_shells
        .iter()
        .flat_map(|s| s.members.iter().copied())
        .collect();
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Err(Error::EmptyShell {
            start: ushell.shell.e_s,
            end: ushell.shell.end(),
        });
    }
    Ok(idx.iter().map(|&i| env.get(i, i).re).sum::<f64>() / idx.len() as f64)
}

/// `h_bar` for every interaction term of `model`.
pub fn eth_means(model: &ProductModel, ushell: &UncoupledShell) -> Result<Vec<f64>> {
    model
        .terms
        .iter()
        .map(|t| env_shell_mean(&t.env, ushell))
        .collect()
}

/// `O^S = lambda sum_nu h_bar_nu H^{IS,nu}` in the input basis of `spec`.
pub fn candidate_eth_mean(spec: &ModelSpec, h_bar: &[f64]) -> Result<Mat<c64>> {
    if h_bar.len() != spec.interaction_terms.len() {
        return Err(Error::MissingEthStats(h_bar.len()));
    }
    let d = spec.d_s();
    let mut o = Mat::<c64>::zeros(d, d);
    for (t, &h) in spec.interaction_terms.iter().zip(h_bar) {
        o += Mat::from_fn(d, d, |r, c| t.system_op[(r, c)] * (spec.coupling * h));
    }
    Ok(o)
}

/// Builds the renormalized model and measures its widths over `[lo, hi]` and its
/// `Q~` on `shell`, reusing the eigenvectors of `H` in `sd`.
#[allow(clippy::too_many_arguments)]
pub fn build_candidate(
    spec: &ModelSpec,
    model: &ProductModel,
    sd: &SpectralData,
    shell: &EnergyShell,
    o_s: Mat<c64>,
    tag: CandidateTag,
    epsilon: f64,
    window: (f64, f64),
) -> Result<RenormCandidate> {
    let reformulation = reformulate(spec, &o_s)?;
    let renorm = model.reformulated(&reformulation, spec.degeneracy_tolerance)?;
    let overlap = model.system_overlap(&renorm);
    let spectral = sd.in_system_basis(&overlap, &renorm.system_energies)?;
    let widths = width_report(&spectral, window.0, window.1, epsilon)?;
    let q = q_values(&renorm, &spectral, shell)?;
    let c_sw = widths.w_m / (model.d_s() as f64 * shell.delta);
    let c_sq = q
        .pairs
        .iter()
        .map(|p| (p.q / p.delta_s).norm())
        .fold(0.0, f64::max);
    Ok(RenormCandidate {
        tag,
        o_s,
        reformulation,
        model: renorm,
        overlap,
        spectral,
        w_m: widths.w_m,
        q,
        c_sw,
        c_sq,
    })
}

/// `exp(-beta H~^S) / Tr(...)` in the eigenbasis of the original `H^S`.
pub fn renormalized_gibbs(
    original: &ProductModel,
    candidate: &RenormCandidate,
    beta: f64,
) -> Result<Rdm> {
    let h = original.system_to_eigenbasis(candidate.reformulation.renormalized_system.as_ref());
    let mut rho = gibbs_state(&h, beta)?;
    rho.basis_label = "H^S eigenbasis".into();
    Ok(rho)
}

/// `exp(-beta H^S) / Tr(...)` in the eigenbasis of `H^S`.
pub fn plain_gibbs(original: &ProductModel, beta: f64) -> Result<Rdm> {
    let mut rho = gibbs_state(&linalg::diagonal(&original.system_energies), beta)?;
    rho.basis_label = "H^S eigenbasis".into();
    Ok(rho)
}

/// Inverse temperature from the environment density of states over the energies
/// covered by the environment shells, widened symmetrically until the window
/// holds [`MIN_FIT_LEVELS`] levels.
pub fn shell_beta(model: &ProductModel, ushell: &UncoupledShell) -> Result<BetaFit> {
    let mut lo = ushell
        .env_shells
        .iter()
        .map(|s| s.lo)
        .fold(f64::INFINITY, f64::min);
    let mut hi = ushell
        .env_shells
        .iter()
        .map(|s| s.hi)
        .fold(f64::NEG_INFINITY, f64::max);
    let e = &model.env_energies;
    let span = e[e.len() - 1] - e[0];
    let count = |lo: f64, hi: f64| e.iter().filter(|&&x| x >= lo && x <= hi).count();
    while count(lo, hi) < MIN_FIT_LEVELS && hi - lo < span {
        let grow = 0.125 * (hi - lo).max(1e-3 * span);
        lo -= grow;
        hi += grow;
    }
    fit_env_beta(e, lo, hi)
}

#[derive(Clone, Debug)]
pub struct ConditionVerdict {
    pub c_sw: f64,
    pub c_sq: f64,
    pub in_sw: bool,
    pub in_sq: bool,
    /// Both sets contain the candidate.
    pub satisfied: bool,
    pub renormalized_gibbs: Option<Rdm>,
    pub distance: Option<f64>,
}

/// Membership uses strict `<` against each threshold.
pub fn evaluate_condition(
    original: &ProductModel,
    candidate: &RenormCandidate,
    thresholds: Thresholds,
    rho: &Rdm,
    beta: f64,
) -> Result<ConditionVerdict> {
    let in_sw = candidate.c_sw < thresholds.tau_sw;
    let in_sq = candidate.c_sq < thresholds.tau_sq;
    let satisfied = in_sw && in_sq;
    let (renormalized_gibbs, distance) = if satisfied {
        let g = renormalized_gibbs(original, candidate, beta)?;
        let d = trace_distance(rho, &g)?;
        (Some(g), Some(d))
    } else {
        (None, None)
    };
    Ok(ConditionVerdict {
        c_sw: candidate.c_sw,
        c_sq: candidate.c_sq,
        in_sw,
        in_sq,
        satisfied,
        renormalized_gibbs,
        distance,
    })
}

#[derive(Clone, Debug)]
pub struct RotationCheck {
    /// RDM from the coupled eigenvectors on the coupled shell.
    pub machinery: Rdm,
    /// Closed form in `|alpha~>` rotated back to `|alpha>`.
    pub closed_form: Rdm,
    pub max_difference: f64,
    pub d_gamma: usize,
    pub d_gamma0: usize,
    /// Renormalized shell, in the basis `|alpha~ i>`.
    pub renormalized_shell: UncoupledShell,
}

/// Compares the full RDM with the closed form available when every environment
/// factor of `H^I` is the identity.
pub fn basis_rotation_check(
    spec: &ModelSpec,
    model: &ProductModel,
    sd: &SpectralData,
    e_s: f64,
    delta: f64,
    middle_fraction: f64,
) -> Result<RotationCheck> {
    if spec
        .interaction_terms
        .iter()
        .any(|t| !matches!(t.env_op, EnvOperatorSpec::Identity))
    {
        return Err(Error::NotSolvableForm);
    }
    let o_s = candidate_eth_mean(spec, &vec![1.0; spec.interaction_terms.len()])?;
    let reformulation = reformulate(spec, &o_s)?;
    let renorm = model.reformulated(&reformulation, spec.degeneracy_tolerance)?;
    let basis = ProductBasis::new(&renorm.system_energies, &renorm.env_energies);
    let ushell = make_uncoupled_shell(&basis, e_s, delta, middle_fraction)?;
    let d0 = ushell.d_gamma0();
    let diag: Vec<f64> = ushell
        .env_shells
        .iter()
        .map(|s| s.d_env() as f64 / d0 as f64)
        .collect();
    let closed_tilde = Rdm::new(linalg::diagonal(&diag), "H~^S eigenbasis");
    let overlap = model.system_overlap(&renorm);
    let closed_form = closed_tilde.rotated(&overlap.adjoint().to_owned(), "H^S eigenbasis");

    let shell = make_shell(&sd.energies, e_s, delta, middle_fraction)?;
    let machinery = rdm_microcanonical(sd, &shell)?;
    let max_difference = machinery.max_abs_diff(&closed_form);
    Ok(RotationCheck {
        machinery,
        closed_form,
        max_difference,
        d_gamma: shell.d_gamma(),
        d_gamma0: d0,
        renormalized_shell: ushell,
    })
}
