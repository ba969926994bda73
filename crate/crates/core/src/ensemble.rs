//! Microcanonical shells, reduced density matrices, Gibbs states and the
//! diagonal-difference bounds.

use faer::{c64, Mat};

use crate::linalg::{self, eigh_complex};
use crate::spectral::{kde, kde_bandwidth, linear_fit, Eigenvectors, ProductBasis, SpectralData};
use crate::{Error, Result};

/// Default fraction of the spectral span, centered on its midpoint, that a
/// shell center must lie in.
pub const DEFAULT_MIDDLE_FRACTION: f64 = 0.6;
/// Shells with fewer members are flagged as statistically thin.
pub const THIN_SHELL: usize = 50;

/// `[E_s, E_s + Delta]` with its members; both ends are closed.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyShell {
    pub e_s: f64,
    pub delta: f64,
    /// Ascending indices into the energy list the shell was built from.
    pub members: Vec<usize>,
    pub thin: bool,
}

impl EnergyShell {
    pub fn d_gamma(&self) -> usize {
        self.members.len()
    }

    pub fn end(&self) -> f64 {
        self.e_s + self.delta
    }

    pub fn center(&self) -> f64 {
        self.e_s + 0.5 * self.delta
    }
}

fn check_placement(energies: &[f64], e_s: f64, delta: f64, middle_fraction: f64) -> Result<()> {
    if !(delta > 0.0) || !e_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "shell needs finite E_s and Delta > 0, got {e_s}, {delta}"
        )));
    }
    let (lo, hi) = (energies[0], energies[energies.len() - 1]);
    let span = hi - lo;
    let fraction = if span > 0.0 {
        (e_s + 0.5 * delta - lo) / span
    } else {
        0.5
    };
    if (fraction - 0.5).abs() > 0.5 * middle_fraction + 1e-12 {
        return Err(Error::ShellNearEdge {
            fraction,
            allowed: middle_fraction,
        });
    }
    Ok(())
}

/// Shell over an ascending energy list.
pub fn make_shell(
    energies: &[f64],
    e_s: f64,
    delta: f64,
    middle_fraction: f64,
) -> Result<EnergyShell> {
    if energies.is_empty() {
        return Err(Error::EmptyShell {
            start: e_s,
            end: e_s + delta,
        });
    }
    check_placement(energies, e_s, delta, middle_fraction)?;
    let start = energies.partition_point(|&e| e < e_s);
    let end = energies.partition_point(|&e| e <= e_s + delta);
    if end <= start {
        return Err(Error::EmptyShell {
            start: e_s,
            end: e_s + delta,
        });
    }
    let members: Vec<usize> = (start..end).collect();
    let thin = members.len() < THIN_SHELL;
    Ok(EnergyShell {
        e_s,
        delta,
        members,
        thin,
    })
}

/// `E_s` that puts the shell center at `fraction` of the spectral span.
pub fn start_at_fraction(energies: &[f64], fraction: f64, delta: f64) -> f64 {
    let (lo, hi) = (energies[0], energies[energies.len() - 1]);
    lo + fraction * (hi - lo) - 0.5 * delta
}

/// Environment levels compatible with system level `alpha` inside the shell.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvShell {
    pub alpha: usize,
    pub lo: f64,
    pub hi: f64,
    pub members: Vec<usize>,
}

impl EnvShell {
    pub fn d_env(&self) -> usize {
        self.members.len()
    }
}

/// Uncoupled shell on `H^0`, members given as uncoupled ranks r.
#[derive(Clone, Debug, PartialEq)]
pub struct UncoupledShell {
    pub shell: EnergyShell,
    pub env_shells: Vec<EnvShell>,
}

impl UncoupledShell {
    pub fn d_gamma0(&self) -> usize {
        self.shell.d_gamma()
    }
}

/// Uncoupled shell and its partition into environment shells.
///
/// A level `i` belongs to the shell of `alpha` when `e_alpha + e_i` lies in the
/// shell, which is the same test used for the uncoupled members, so the env
/// shells partition them exactly.
pub fn make_uncoupled_shell(
    basis: &ProductBasis,
    e_s: f64,
    delta: f64,
    middle_fraction: f64,
) -> Result<UncoupledShell> {
    let shell = make_shell(&basis.energies, e_s, delta, middle_fraction)?;
    let env_shells = (0..basis.d_s)
        .map(|alpha| {
            let ea = basis.system_energies[alpha];
            let members = (0..basis.d_e)
                .filter(|&i| {
                    let e = ea + basis.env_energies[i];
                    e >= e_s && e <= e_s + delta
                })
                .collect();
            EnvShell {
                alpha,
                lo: e_s - ea,
                hi: e_s - ea + delta,
                members,
            }
        })
        .collect();
    Ok(UncoupledShell { shell, env_shells })
}

/// A `d_S x d_S` density matrix together with a note on its basis.
#[derive(Clone, Debug)]
pub struct Rdm {
    pub matrix: Mat<c64>,
    pub basis_label: String,
}

/// Deviations of an [`Rdm`] from a valid density matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdmCheck {
    pub hermitian_deviation: f64,
    pub trace_error: f64,
    pub min_eigenvalue: f64,
}

impl RdmCheck {
    pub fn is_valid(&self, tolerance: f64) -> bool {
        self.hermitian_deviation <= tolerance
            && self.trace_error <= tolerance
            && self.min_eigenvalue >= -tolerance
    }
}

impl Rdm {
    pub fn new(matrix: Mat<c64>, basis_label: impl Into<String>) -> Self {
        Rdm {
            matrix,
            basis_label: basis_label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> c64 {
        self.matrix[(a, b)]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.matrix[(a, a)].re).collect()
    }

    pub fn check(&self) -> Result<RdmCheck> {
        let hermitian_deviation = linalg::hermitian_deviation(self.matrix.as_ref());
        let trace_error = (linalg::trace(self.matrix.as_ref()) - c64::new(1.0, 0.0)).norm();
        // Symmetrize before the eigensolve so rounding cannot trip Hermiticity.
        let sym = Mat::from_fn(self.dim(), self.dim(), |a, b| {
            (self.matrix[(a, b)] + self.matrix[(b, a)].conj()) * 0.5
        });
        let min_eigenvalue = linalg::eigvalsh(sym.as_ref())?
            .first()
            .copied()
            .unwrap_or(0.0);
        Ok(RdmCheck {
            hermitian_deviation,
            trace_error,
            min_eigenvalue,
        })
    }

    /// `W^dagger rho W` for a unitary change of system basis.
    pub fn rotated(&self, w: &Mat<c64>, basis_label: impl Into<String>) -> Rdm {
        Rdm::new(
            linalg::conjugate_by(self.matrix.as_ref(), w.as_ref()),
            basis_label,
        )
    }

    pub fn max_abs_diff(&self, other: &Rdm) -> f64 {
        linalg::max_abs_diff(self.matrix.as_ref(), other.matrix.as_ref())
    }
}

/// Accumulates `sum_i phi[alpha, i] conj(phi[beta, i])` into `acc`.
fn accumulate_column(vectors: &Eigenvectors, n: usize, d_s: usize, d_e: usize, acc: &mut Mat<c64>) {
    match vectors {
        Eigenvectors::Real(v) => {
            let col = v.col_as_slice(n);
            for a in 0..d_s {
                let xa = &col[a * d_e..(a + 1) * d_e];
                for b in 0..=a {
                    let xb = &col[b * d_e..(b + 1) * d_e];
                    let s: f64 = xa.iter().zip(xb).map(|(p, q)| p * q).sum();
                    acc[(a, b)] += c64::new(s, 0.0);
                }
            }
        }
        Eigenvectors::Complex(v) => {
            let col = v.col_as_slice(n);
            for a in 0..d_s {
                let xa = &col[a * d_e..(a + 1) * d_e];
                for b in 0..=a {
                    let xb = &col[b * d_e..(b + 1) * d_e];
                    let s: c64 = xa.iter().zip(xb).map(|(p, q)| p * q.conj()).sum();
                    acc[(a, b)] += s;
                }
            }
        }
    }
}

fn fill_upper(m: &mut Mat<c64>) {
    for a in 0..m.nrows() {
        for b in a + 1..m.ncols() {
            m[(a, b)] = m[(b, a)].conj();
        }
    }
}

/// `rho^S = d_Gamma^{-1} sum_{n in Gamma} Tr_E |n><n|`.
pub fn rdm_microcanonical(sd: &SpectralData, shell: &EnergyShell) -> Result<Rdm> {
    if shell.members.is_empty() {
        return Err(Error::EmptyShell {
            start: shell.e_s,
            end: shell.end(),
        });
    }
    let (d_s, d_e) = (sd.d_s(), sd.d_e());
    let mut acc = Mat::<c64>::zeros(d_s, d_s);
    for &n in &shell.members {
        if n >= sd.dim() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: sd.dim(),
            });
        }
        accumulate_column(&sd.vectors, n, d_s, d_e, &mut acc);
    }
    fill_upper(&mut acc);
    let scale = 1.0 / shell.members.len() as f64;
    Ok(Rdm::new(
        Mat::from_fn(d_s, d_s, |a, b| acc[(a, b)] * scale),
        "H^S eigenbasis",
    ))
}

/// `rho^{S(n)} = Tr_E |n><n|`.
pub fn rdm_single_state(sd: &SpectralData, n: usize) -> Result<Rdm> {
    if n >= sd.dim() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: sd.dim(),
        });
    }
    let mut acc = Mat::<c64>::zeros(sd.d_s(), sd.d_s());
    accumulate_column(&sd.vectors, n, sd.d_s(), sd.d_e(), &mut acc);
    fill_upper(&mut acc);
    Ok(Rdm::new(acc, "H^S eigenbasis"))
}

/// Partial trace of `|psi><psi|` for a product-basis vector (not normalized here).
pub fn rdm_of_vector(psi: &[c64], d_s: usize, d_e: usize) -> Mat<c64> {
    Mat::from_fn(d_s, d_s, |a, b| {
        (0..d_e)
            .map(|i| psi[a * d_e + i] * psi[b * d_e + i].conj())
            .sum::<c64>()
    })
}

/// `rho^{S0}_{alpha alpha} = d^E_{Gamma alpha} / d_{Gamma^0}`; off-diagonals vanish.
pub fn rdm_uncoupled(ushell: &UncoupledShell) -> Result<Rdm> {
    let d0 = ushell.d_gamma0();
    if d0 == 0 {
        return Err(Error::EmptyShell {
            start: ushell.shell.e_s,
            end: ushell.shell.end(),
        });
    }
    let diag: Vec<f64> = ushell
        .env_shells
        .iter()
        .map(|s| s.d_env() as f64 / d0 as f64)
        .collect();
    Ok(Rdm::new(linalg::diagonal(&diag), "H^S eigenbasis"))
}

/// `exp(-beta H) / Tr exp(-beta H)` expressed in the basis `h` is given in.
pub fn gibbs_state(h: &Mat<c64>, beta: f64) -> Result<Rdm> {
    if !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta must be finite, got {beta}"
        )));
    }
    let (e, u) = eigh_complex(h.as_ref())?;
    let shift = if beta >= 0.0 { e[0] } else { e[e.len() - 1] };
    let w: Vec<f64> = e.iter().map(|&x| (-beta * (x - shift)).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / z).collect();
    let rho = &u * linalg::diagonal(&p) * u.adjoint();
    Ok(Rdm::new(rho, "input basis"))
}

/// `(1/2) sum |eigenvalues of (a - b)|`.
pub fn trace_distance(a: &Rdm, b: &Rdm) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let d = a.dim();
    let diff = Mat::from_fn(d, d, |r, c| {
        let x = a.matrix[(r, c)] - b.matrix[(r, c)];
        let y = a.matrix[(c, r)] - b.matrix[(c, r)];
        (x + y.conj()) * 0.5
    });
    Ok(0.5
        * linalg::eigvalsh(diff.as_ref())?
            .iter()
            .map(|v| v.abs())
            .sum::<f64>())
}

/// `I_{alpha i} = sum_{n in Gamma} |C^n_{alpha i}|^2`, indexed by product row.
pub fn shell_intensities(sd: &SpectralData, shell: &EnergyShell) -> Vec<f64> {
    let d = sd.dim();
    let mut out = vec![0.0; d];
    for &n in &shell.members {
        match &sd.vectors {
            Eigenvectors::Real(v) => {
                for (o, x) in out.iter_mut().zip(v.col_as_slice(n)) {
                    *o += x * x;
                }
            }
            Eigenvectors::Complex(v) => {
                for (o, x) in out.iter_mut().zip(v.col_as_slice(n)) {
                    *o += x.norm_sqr();
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShellRegime {
    /// `Delta > 2 w_M`.
    Wide,
    /// `Delta <= 2 w_M`; the central region is empty.
    Narrow,
}

impl ShellRegime {
    pub fn of(delta: f64, w_m: f64) -> Self {
        if delta > 2.0 * w_m {
            ShellRegime::Wide
        } else {
            ShellRegime::Narrow
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShellRegime::Wide => "wide",
            ShellRegime::Narrow => "narrow",
        }
    }
}

pub const LINEARITY_R2: f64 = 0.98;
const LINEARITY_GRID: usize = 41;

#[derive(Clone, Debug, PartialEq)]
pub struct RegionDecomposition {
    pub alpha: usize,
    pub regime: ShellRegime,
    pub boundaries: [f64; 4],
    pub counts: [usize; 4],
    pub f: [f64; 4],
    /// `d_Gamma^{-1} sum_kappa F_{alpha kappa}`.
    pub reconstructed: f64,
    /// R^2 of a linear fit to the environment density over `Gamma^E_alpha +- 2 w_M`.
    pub linearity_r2: f64,
    /// Kernel density of environment levels at each region's midpoint
    /// (for region 0, at the midpoint of the shell).
    pub local_density: [f64; 4],
    pub d_env: usize,
}

impl RegionDecomposition {
    pub fn is_linear(&self) -> bool {
        self.linearity_r2 >= LINEARITY_R2
    }

    /// `a_kappa = F_{alpha kappa} Delta / (2 w_M d^E_alpha)` for the two edge
    /// regions `kappa = 1, 3` of a wide shell; `None` otherwise.
    pub fn edge_parameters(&self, delta: f64, w_m: f64) -> Option<[f64; 2]> {
        if self.regime != ShellRegime::Wide || !(w_m > 0.0) || self.d_env == 0 {
            return None;
        }
        let scale = delta / (2.0 * w_m * self.d_env as f64);
        Some([self.f[1] * scale, self.f[3] * scale])
    }

    /// Region index `kappa` of an environment energy.
    pub fn region_of(&self, e: f64) -> usize {
        region_index(&self.boundaries, e)
    }
}

fn region_index(boundaries: &[f64; 4], e: f64) -> usize {
    let [e1, e2, e3, e4] = *boundaries;
    if e < e1 || e > e4 {
        0
    } else if e < e2 {
        1
    } else if e < e3 {
        2
    } else {
        3
    }
}

/// Splits the environment spectrum into the four regions around `Gamma^E_alpha`
/// and sums the shell intensities over each.
pub fn region_decomposition(
    alpha: usize,
    shell: &EnergyShell,
    basis: &ProductBasis,
    intensities: &[f64],
    env_shell: &EnvShell,
    w_m: f64,
) -> Result<RegionDecomposition> {
    if !(w_m >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "w_M must be >= 0, got {w_m}"
        )));
    }
    if alpha >= basis.d_s || intensities.len() != basis.dim() {
        return Err(Error::IndexOutOfRange {
            index: alpha,
            len: basis.d_s,
        });
    }
    let delta = shell.delta;
    let base = shell.e_s - basis.system_energies[alpha];
    let regime = ShellRegime::of(delta, w_m);
    let boundaries = match regime {
        ShellRegime::Wide => {
            let e1 = base - w_m;
            [e1, e1 + 2.0 * w_m, e1 + delta, e1 + 2.0 * w_m + delta]
        }
        ShellRegime::Narrow => [
            base - w_m,
            base + 0.5 * delta,
            base + 0.5 * delta,
            base + delta + w_m,
        ],
    };
    let [e1, e2, e3, e4] = boundaries;
    let mut counts = [0usize; 4];
    let mut f = [0.0f64; 4];
    let d_e = basis.d_e;
    for (i, &e) in basis.env_energies.iter().enumerate() {
        let k = region_index(&boundaries, e);
        counts[k] += 1;
        f[k] += intensities[alpha * d_e + i];
    }
    let reconstructed = f.iter().sum::<f64>() / shell.d_gamma() as f64;

    let levels = &basis.env_energies;
    let bw = kde_bandwidth(levels);
    let (lo, hi) = (base - 2.0 * w_m, base + delta + 2.0 * w_m);
    let xs: Vec<f64> = (0..LINEARITY_GRID)
        .map(|k| lo + (hi - lo) * k as f64 / (LINEARITY_GRID - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| kde(levels, bw, x)).collect();
    let (_, _, linearity_r2) = linear_fit(&xs, &ys);
    let local_density = [
        kde(levels, bw, base + 0.5 * delta),
        kde(levels, bw, 0.5 * (e1 + e2)),
        kde(levels, bw, 0.5 * (e2 + e3)),
        kde(levels, bw, 0.5 * (e3 + e4)),
    ];
    Ok(RegionDecomposition {
        alpha,
        regime,
        boundaries,
        counts,
        f,
        reconstructed,
        linearity_r2,
        local_density,
        d_env: env_shell.d_env(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundKind {
    /// `2 w_M / Delta + eps`.
    DrhoAa1,
    /// `2 w_M / (d_S Delta) + eps`.
    DrhoAa,
    /// `(rho_1 + rho_3) w_M / d_Gamma + eps`.
    RhodNonlinear,
    /// `(2 w_M / Delta)(d^E_alpha / d_Gamma) + eps`.
    DrhoAa2Ww,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::DrhoAa1 => "drho_aa_1",
            BoundKind::DrhoAa => "drho_aa",
            BoundKind::RhodNonlinear => "rhod_nonlinear",
            BoundKind::DrhoAa2Ww => "drho_aa_2_ww",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub drho_aa_1: f64,
    /// Present only when `d_Gamma ~ d_S d^E_alpha` holds for every alpha.
    pub drho_aa: Option<f64>,
    pub rhod_nonlinear: f64,
    pub drho_aa_2_ww: f64,
}

impl Bounds {
    pub fn value(&self, kind: BoundKind) -> Option<f64> {
        match kind {
            BoundKind::DrhoAa1 => Some(self.drho_aa_1),
            BoundKind::DrhoAa => self.drho_aa,
            BoundKind::RhodNonlinear => Some(self.rhod_nonlinear),
            BoundKind::DrhoAa2Ww => Some(self.drho_aa_2_ww),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaBound {
    pub alpha: usize,
    pub rho_aa: f64,
    pub rho0_aa: f64,
    pub diff: f64,
    pub d_env: usize,
    pub linear: bool,
    pub linearity_r2: f64,
    pub bounds: Bounds,
    /// Tightest bound whose preconditions hold; `None` when the density is
    /// nonlinear in the narrow regime, where no closed form is claimed.
    pub applicable: Option<BoundKind>,
    pub ratio: Option<f64>,
}

impl AlphaBound {
    pub fn satisfied(&self) -> Option<bool> {
        self.ratio.map(|r| r <= 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QFit {
    pub q1: f64,
    pub q0: f64,
    pub points: usize,
    /// False when every regressor `x` vanished and `q1` was pinned to zero.
    pub q1_identified: bool,
}

/// One observation for the `q1`, `q0` regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QPoint {
    pub diff: f64,
    /// `(w_M / Delta)(d^E_alpha / d_Gamma)`.
    pub x: f64,
    pub epsilon: f64,
}

/// Least squares of `diff = q1 x + q0 eps` without intercept.
pub fn fit_q(points: &[QPoint]) -> Option<QFit> {
    if points.is_empty() {
        return None;
    }
    let (mut sxx, mut sxe, mut see, mut sxd, mut sed) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        sxx += p.x * p.x;
        sxe += p.x * p.epsilon;
        see += p.epsilon * p.epsilon;
        sxd += p.x * p.diff;
        sed += p.epsilon * p.diff;
    }
    if see <= 0.0 {
        return None;
    }
    let det = sxx * see - sxe * sxe;
    if sxx <= 1e-300 || det.abs() <= 1e-300 {
        return Some(QFit {
            q1: 0.0,
            q0: sed / see,
            points: points.len(),
            q1_identified: false,
        });
    }
    let q1 = (sxd * see - sed * sxe) / det;
    let q0 = (sxx * sed - sxe * sxd) / det;
    Some(QFit {
        q1,
        q0,
        points: points.len(),
        q1_identified: true,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub epsilon: f64,
    pub w_m: f64,
    pub delta: f64,
    pub d_gamma: usize,
    pub d_gamma0: usize,
    pub regime: ShellRegime,
    /// `max_alpha |d_Gamma - d_S d^E_alpha| / d_Gamma < 0.1`.
    pub uniform_env_shells: bool,
    pub per_alpha: Vec<AlphaBound>,
    pub q_fit: Option<QFit>,
}

impl BoundReport {
    pub fn q_points(&self) -> Vec<QPoint> {
        self.per_alpha
            .iter()
            .map(|a| QPoint {
                diff: a.diff,
                x: self.w_m / self.delta * a.d_env as f64 / self.d_gamma as f64,
                epsilon: self.epsilon,
            })
            .collect()
    }

    pub fn violations(&self) -> usize {
        self.per_alpha
            .iter()
            .filter(|a| a.satisfied() == Some(false))
            .count()
    }
}

pub const UNIFORM_ENV_GATE: f64 = 0.1;

/// Evaluates every diagonal bound for one shell and one epsilon.
pub fn diagonal_bound_report(
    rho: &Rdm,
    rho0: &Rdm,
    w_m: f64,
    epsilon: f64,
    shell: &EnergyShell,
    ushell: &UncoupledShell,
    decompositions: &[RegionDecomposition],
) -> Result<BoundReport> {
    let d_s = rho.dim();
    if rho0.dim() != d_s || decompositions.len() != d_s || ushell.env_shells.len() != d_s {
        return Err(Error::DimensionMismatch {
            expected: d_s,
            found: decompositions.len(),
        });
    }
    let d_gamma = shell.d_gamma();
    let delta = shell.delta;
    let dg = d_gamma as f64;
    let regime = ShellRegime::of(delta, w_m);
    let uniform_env_shells = ushell
        .env_shells
        .iter()
        .map(|s| (dg - d_s as f64 * s.d_env() as f64).abs() / dg)
        .fold(0.0, f64::max)
        < UNIFORM_ENV_GATE;
    let mut per_alpha = Vec::with_capacity(d_s);
    for (alpha, dec) in decompositions.iter().enumerate() {
        let rho_aa = rho.get(alpha, alpha).re;
        let rho0_aa = rho0.get(alpha, alpha).re;
        let diff = rho_aa - rho0_aa;
        let d_env = ushell.env_shells[alpha].d_env();
        let bounds = Bounds {
            drho_aa_1: 2.0 * w_m / delta + epsilon,
            drho_aa: uniform_env_shells.then(|| 2.0 * w_m / (d_s as f64 * delta) + epsilon),
            rhod_nonlinear: (dec.local_density[1] + dec.local_density[3]) * w_m / dg + epsilon,
            drho_aa_2_ww: 2.0 * w_m / delta * d_env as f64 / dg + epsilon,
        };
        let linear = dec.is_linear();
        let mut candidates: Vec<BoundKind> = Vec::new();
        match (linear, regime) {
            (true, _) => {
                candidates.push(BoundKind::DrhoAa1);
                if bounds.drho_aa.is_some() {
                    candidates.push(BoundKind::DrhoAa);
                }
                if regime == ShellRegime::Narrow {
                    candidates.push(BoundKind::DrhoAa2Ww);
                }
            }
            (false, ShellRegime::Wide) => candidates.push(BoundKind::RhodNonlinear),
            (false, ShellRegime::Narrow) => {}
        }
        let applicable = candidates.into_iter().min_by(|a, b| {
            bounds
                .value(*a)
                .unwrap()
                .total_cmp(&bounds.value(*b).unwrap())
        });
        let ratio = applicable.map(|k| diff.abs() / bounds.value(k).unwrap());
        per_alpha.push(AlphaBound {
            alpha,
            rho_aa,
            rho0_aa,
            diff,
            d_env,
            linear,
            linearity_r2: dec.linearity_r2,
            bounds,
            applicable,
            ratio,
        });
    }
    let mut report = BoundReport {
        epsilon,
        w_m,
        delta,
        d_gamma,
        d_gamma0: ushell.d_gamma0(),
        regime,
        uniform_env_shells,
        per_alpha,
        q_fit: None,
    };
    report.q_fit = fit_q(&report.q_points());
    Ok(report)
}

/// Largest |rho_ab| with a != b.
pub fn max_offdiagonal(rho: &Rdm) -> f64 {
    let d = rho.dim();
    let mut best = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                best = best.max(rho.get(a, b).norm());
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diagonal, pauli, PauliAxis};
    use crate::model::{
        EnvOperatorSpec, EnvironmentSpec, InteractionTerm, ModelSpec, ProductModel,
    };

    fn chain(n: usize, lam: f64) -> (ProductModel, SpectralData) {
        let m = ProductModel::new(&ModelSpec::qubit_defect_chain(n, 1.0, PauliAxis::X, 0, lam))
            .unwrap();
        let sd = SpectralData::coupled(&m).unwrap();
        (m, sd)
    }

    #[test]
    fn shell_examples() {
        let e: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let full = make_shell(&e, 0.0, 9.9, DEFAULT_MIDDLE_FRACTION).unwrap();
        assert_eq!(full.d_gamma(), 100);
        let single = make_shell(&e, 5.0, 0.05, DEFAULT_MIDDLE_FRACTION).unwrap();
        assert_eq!(single.members, vec![50]);
        assert!(single.thin);
        assert!(matches!(
            make_shell(&e, 9.0, 0.5, DEFAULT_MIDDLE_FRACTION),
            Err(Error::ShellNearEdge { .. })
        ));
        assert!(matches!(
            make_shell(&e, 5.01, 0.05, DEFAULT_MIDDLE_FRACTION),
            Err(Error::EmptyShell { .. })
        ));
    }

    #[test]
    fn env_shells_partition_uncoupled_shell() {
        let (m, _) = chain(6, 0.0);
        let basis = ProductBasis::new(&m.system_energies, &m.env_energies);
        let us = make_uncoupled_shell(&basis, -0.5, 1.3, DEFAULT_MIDDLE_FRACTION).unwrap();
        let total: usize = us.env_shells.iter().map(EnvShell::d_env).sum();
        assert_eq!(total, us.d_gamma0());
        let rho0 = rdm_uncoupled(&us).unwrap();
        assert!(rho0.check().unwrap().is_valid(1e-12));
        assert_eq!(max_offdiagonal(&rho0), 0.0);
    }

    #[test]
    fn uncoupled_machinery_matches_closed_form() {
        let (m, _) = chain(6, 0.0);
        let sd0 = SpectralData::uncoupled(&m);
        let us = make_uncoupled_shell(&sd0.basis, -0.5, 1.3, DEFAULT_MIDDLE_FRACTION).unwrap();
        let shell = make_shell(&sd0.energies, -0.5, 1.3, DEFAULT_MIDDLE_FRACTION).unwrap();
        let a = rdm_microcanonical(&sd0, &shell).unwrap();
        let b = rdm_uncoupled(&us).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn single_state_toy() {
        // H^S = diag(0,1), H^E = diag(0,1), sx (x) sx: the pair |01>, |10> mixes
        // equally, so the reduced state of either member is I/2.
        let spec = ModelSpec::new(
            diagonal(&[0.0, 1.0]),
            EnvironmentSpec::Explicit(diagonal(&[0.0, 1.0])),
            vec![InteractionTerm {
                system_op: pauli(PauliAxis::X),
                env_op: EnvOperatorSpec::Explicit(pauli(PauliAxis::X)),
            }],
            1.0,
        );
        let sd = SpectralData::coupled(&ProductModel::new(&spec).unwrap()).unwrap();
        let n = (0..4).find(|&n| sd.vectors.weight(0, n) < 1e-12).unwrap();
        let rho = rdm_single_state(&sd, n).unwrap();
        assert!(rho.max_abs_diff(&Rdm::new(diagonal(&[0.5, 0.5]), "")) < 1e-12);
    }

    #[test]
    fn gibbs_examples() {
        let h = diagonal(&[0.0, 1.0]);
        let g = gibbs_state(&h, 0.0).unwrap();
        assert!(g.max_abs_diff(&Rdm::new(diagonal(&[0.5, 0.5]), "")) < 1e-15);
        let g = gibbs_state(&h, 1e3).unwrap();
        assert!(g.max_abs_diff(&Rdm::new(diagonal(&[1.0, 0.0]), "")) < 1e-10);
        let g = gibbs_state(&h, 2f64.ln()).unwrap();
        assert!(g.max_abs_diff(&Rdm::new(diagonal(&[2.0 / 3.0, 1.0 / 3.0]), "")) < 1e-14);
        assert!(gibbs_state(&h, f64::NAN).is_err());
    }

    #[test]
    fn trace_distance_examples() {
        let a = Rdm::new(diagonal(&[1.0, 0.0]), "");
        let b = Rdm::new(diagonal(&[0.0, 1.0]), "");
        assert_eq!(trace_distance(&a, &a).unwrap(), 0.0);
        assert!((trace_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = Rdm::new(diagonal(&[0.5, 0.5]), "");
        let d = Rdm::new(diagonal(&[0.75, 0.25]), "");
        assert!((trace_distance(&c, &d).unwrap() - 0.25).abs() < 1e-15);
        assert!(trace_distance(&a, &Rdm::new(diagonal(&[1.0, 0.0, 0.0]), "")).is_err());
    }

    #[test]
    fn resummation_both_regimes() {
        let (_, sd) = chain(7, 0.3);
        let shell = make_shell(&sd.energies, -0.6, 1.2, DEFAULT_MIDDLE_FRACTION).unwrap();
        let rho = rdm_microcanonical(&sd, &shell).unwrap();
        let us = make_uncoupled_shell(&sd.basis, -0.6, 1.2, DEFAULT_MIDDLE_FRACTION).unwrap();
        let ints = shell_intensities(&sd, &shell);
        for w_m in [0.0, 0.2, 0.9] {
            for alpha in 0..2 {
                let dec = region_decomposition(
                    alpha,
                    &shell,
                    &sd.basis,
                    &ints,
                    &us.env_shells[alpha],
                    w_m,
                )
                .unwrap();
                assert!((dec.reconstructed - rho.get(alpha, alpha).re).abs() < 1e-10);
                assert_eq!(dec.counts.iter().sum::<usize>(), sd.d_e());
                if dec.regime == ShellRegime::Narrow {
                    assert_eq!(dec.counts[2], 0);
                    assert!(dec.edge_parameters(1.2, w_m).is_none());
                } else if w_m > 0.0 {
                    let [a1, a3] = dec.edge_parameters(1.2, w_m).unwrap();
                    let n = dec.d_env as f64;
                    assert!((2.0 * a1 * w_m * n / 1.2 - dec.f[1]).abs() < 1e-12);
                    assert!((2.0 * a3 * w_m * n / 1.2 - dec.f[3]).abs() < 1e-12);
                    assert!(a1 >= 0.0 && a3 >= 0.0);
                }
                if w_m == 0.0 {
                    assert_eq!((dec.counts[1], dec.counts[3]), (0, dec.counts[3]));
                    assert_eq!(dec.f[1], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_coupling_bounds_hold_trivially() {
        let (_, sd) = chain(6, 0.0);
        let shell = make_shell(&sd.energies, -0.5, 1.3, DEFAULT_MIDDLE_FRACTION).unwrap();
        let us = make_uncoupled_shell(&sd.basis, -0.5, 1.3, DEFAULT_MIDDLE_FRACTION).unwrap();
        let rho = rdm_microcanonical(&sd, &shell).unwrap();
        let rho0 = rdm_uncoupled(&us).unwrap();
        let ints = shell_intensities(&sd, &shell);
        let decs: Vec<_> = (0..2)
            .map(|a| {
                region_decomposition(a, &shell, &sd.basis, &ints, &us.env_shells[a], 0.0).unwrap()
            })
            .collect();
        let rep = diagonal_bound_report(&rho, &rho0, 0.0, 0.05, &shell, &us, &decs).unwrap();
        for a in &rep.per_alpha {
            assert!(a.diff.abs() < 1e-12);
            assert!(a.bounds.drho_aa_1 >= 0.0 && a.bounds.rhod_nonlinear >= 0.0);
        }
        assert_eq!(rep.violations(), 0);
    }

    #[test]
    fn q_fit_recovers_planted_values() {
        let pts: Vec<QPoint> = [(0.1, 0.01), (0.3, 0.05), (0.2, 0.1), (0.05, 0.02)]
            .iter()
            .map(|&(x, e)| QPoint {
                diff: 0.7 * x - 0.4 * e,
                x,
                epsilon: e,
            })
            .collect();
        let fit = fit_q(&pts).unwrap();
        assert!((fit.q1 - 0.7).abs() < 1e-12 && (fit.q0 + 0.4).abs() < 1e-12);
        let flat = [QPoint {
            diff: 0.01,
            x: 0.0,
            epsilon: 0.05,
        }];
        let fit = fit_q(&flat).unwrap();
        assert!(!fit.q1_identified && (fit.q0 - 0.2).abs() < 1e-12);
    }
}
