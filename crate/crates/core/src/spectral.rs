//! Exact diagonalization, eigenfunction coefficients and densities of states.

use faer::{c64, Mat};

use crate::linalg::{self, eigh_complex, eigh_real, DenseHermitian, ZERO};
use crate::model::ProductModel;
use crate::{Error, Result};

/// Eigenvector storage; real whenever the Hamiltonian is real symmetric.
#[derive(Clone, Debug)]
pub enum Eigenvectors {
    Real(Mat<f64>),
    Complex(Mat<c64>),
}

impl Eigenvectors {
    pub fn dim(&self) -> usize {
        match self {
            Eigenvectors::Real(v) => v.nrows(),
            Eigenvectors::Complex(v) => v.nrows(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, n: usize) -> c64 {
        match self {
            Eigenvectors::Real(v) => c64::new(v[(row, n)], 0.0),
            Eigenvectors::Complex(v) => v[(row, n)],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, n: usize) -> f64 {
        match self {
            Eigenvectors::Real(v) => v[(row, n)] * v[(row, n)],
            Eigenvectors::Complex(v) => v[(row, n)].norm_sqr(),
        }
    }

    pub fn column(&self, n: usize) -> Vec<c64> {
        (0..self.dim()).map(|r| self.get(r, n)).collect()
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Eigenvectors::Real(_))
    }

    pub fn to_complex(&self) -> Mat<c64> {
        match self {
            Eigenvectors::Real(v) => linalg::complexify(v.as_ref()),
            Eigenvectors::Complex(v) => v.clone(),
        }
    }
}

/// Uncoupled product basis: `E_r` ascending, with `r <-> (alpha, i)` maps.
///
/// Ties in `E_r` are broken by ascending row index, i.e. by `alpha` then `i`.
#[derive(Clone, Debug)]
pub struct ProductBasis {
    pub d_s: usize,
    pub d_e: usize,
    pub system_energies: Vec<f64>,
    pub env_energies: Vec<f64>,
    /// `E_r` in ascending order.
    pub energies: Vec<f64>,
    /// `order[r]` is the row `alpha * d_E + i` of the r-th uncoupled state.
    pub order: Vec<usize>,
    /// `rank[row]` is the position r of a row in the ascending order.
    pub rank: Vec<usize>,
}

impl ProductBasis {
    pub fn new(system_energies: &[f64], env_energies: &[f64]) -> Self {
        let (d_s, d_e) = (system_energies.len(), env_energies.len());
        let diag: Vec<f64> = (0..d_s * d_e)
            .map(|row| system_energies[row / d_e] + env_energies[row % d_e])
            .collect();
        let mut order: Vec<usize> = (0..diag.len()).collect();
        order.sort_by(|&a, &b| diag[a].total_cmp(&diag[b]));
        let mut rank = vec![0; order.len()];
        for (r, &row) in order.iter().enumerate() {
            rank[row] = r;
        }
        ProductBasis {
            d_s,
            d_e,
            system_energies: system_energies.to_vec(),
            env_energies: env_energies.to_vec(),
            energies: order.iter().map(|&row| diag[row]).collect(),
            order,
            rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    pub fn row_energy(&self, row: usize) -> f64 {
        self.system_energies[row / self.d_e] + self.env_energies[row % self.d_e]
    }

    pub fn split(&self, row: usize) -> (usize, usize) {
        (row / self.d_e, row % self.d_e)
    }
}

/// Full eigendecomposition of a total Hamiltonian in a product basis.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub energies: Vec<f64>,
    /// Column n is `|n>` in the `|alpha i>` basis.
    pub vectors: Eigenvectors,
    pub basis: ProductBasis,
}

/// Eigenvalues ascending and eigenvectors of any dense Hermitian matrix.
pub fn diagonalize(h: &DenseHermitian) -> Result<(Vec<f64>, Eigenvectors)> {
    let scale = h.max_abs().max(1.0);
    let dev = h.hermitian_deviation();
    if dev > 1e-12 * scale {
        return Err(Error::NotHermitian { deviation: dev });
    }
    match h {
        DenseHermitian::Real(m) => {
            let (e, v) = eigh_real(m.as_ref())?;
            Ok((e, Eigenvectors::Real(v)))
        }
        DenseHermitian::Complex(m) => {
            let (e, v) = eigh_complex(m.as_ref())?;
            Ok((e, Eigenvectors::Complex(v)))
        }
    }
}

impl SpectralData {
    /// Diagonalizes the coupled Hamiltonian of a model.
    pub fn coupled(model: &ProductModel) -> Result<Self> {
        let h = model.assemble_total();
        let (energies, vectors) = diagonalize(&h)?;
        drop(h);
        Ok(SpectralData {
            energies,
            vectors,
            basis: ProductBasis::new(&model.system_energies, &model.env_energies),
        })
    }

    /// Eigendata of `H^0`, obtained without a solver: `|n> = |E_n>`.
    pub fn uncoupled(model: &ProductModel) -> Self {
        let basis = ProductBasis::new(&model.system_energies, &model.env_energies);
        let d = basis.dim();
        let mut v = Mat::<f64>::zeros(d, d);
        for (r, &row) in basis.order.iter().enumerate() {
            v[(row, r)] = 1.0;
        }
        SpectralData {
            energies: basis.energies.clone(),
            vectors: Eigenvectors::Real(v),
            basis,
        }
    }

    /// Wraps precomputed eigendata, for instance from a cache.
    pub fn from_parts(
        energies: Vec<f64>,
        vectors: Eigenvectors,
        basis: ProductBasis,
    ) -> Result<Self> {
        let d = basis.dim();
        if energies.len() != d || vectors.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: energies.len(),
            });
        }
        Ok(SpectralData {
            energies,
            vectors,
            basis,
        })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn d_s(&self) -> usize {
        self.basis.d_s
    }

    pub fn d_e(&self) -> usize {
        self.basis.d_e
    }

    fn check(&self, n: usize) -> Result<()> {
        if n >= self.dim() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.dim(),
            });
        }
        Ok(())
    }

    /// `C^n` as a `d_S x d_E` matrix.
    pub fn coefficients(&self, n: usize) -> Result<Mat<c64>> {
        self.check(n)?;
        let d_e = self.d_e();
        Ok(Mat::from_fn(self.d_s(), d_e, |a, i| {
            self.vectors.get(a * d_e + i, n)
        }))
    }

    /// `|<E_r|n>|^2` for all r, in ascending-r order.
    pub fn ef_weights(&self, n: usize) -> Vec<f64> {
        self.basis
            .order
            .iter()
            .map(|&row| self.vectors.weight(row, n))
            .collect()
    }

    /// `|<E_r|n>|^2` for all n, i.e. the LDOS of `|E_r>`.
    pub fn ldos_weights(&self, r: usize) -> Vec<f64> {
        let row = self.basis.order[r];
        (0..self.dim())
            .map(|n| self.vectors.weight(row, n))
            .collect()
    }

    /// max_n |1 - <n|n>|.
    pub fn normalization_error(&self) -> f64 {
        (0..self.dim())
            .map(|n| {
                let s: f64 = (0..self.dim()).map(|r| self.vectors.weight(r, n)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// max over rows of |1 - sum_n |C^n_{alpha i}|^2|.
    pub fn parseval_error(&self) -> f64 {
        (0..self.dim())
            .map(|row| {
                let s: f64 = (0..self.dim()).map(|n| self.vectors.weight(row, n)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// max_n ||H|n> - E_n|n>||_2 for the Hamiltonian these eigenpairs came from.
    pub fn max_residual(&self, h: &DenseHermitian) -> f64 {
        let v = self.vectors.to_complex();
        let hv = h.to_complex() * &v;
        (0..self.dim())
            .map(|n| {
                (0..self.dim())
                    .map(|r| (hv[(r, n)] - v[(r, n)] * self.energies[n]).norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Re-expresses every eigenvector in a rotated system basis.
    ///
    /// `overlap[(alpha, a)] = <alpha|a~>` and `system_energies` are the energies of
    /// the new basis states; the environment part is untouched.
    pub fn in_system_basis(&self, overlap: &Mat<c64>, system_energies: &[f64]) -> Result<Self> {
        let (d_s, d_e, d) = (self.d_s(), self.d_e(), self.dim());
        if overlap.nrows() != d_s || overlap.ncols() != d_s || system_energies.len() != d_s {
            return Err(Error::DimensionMismatch {
                expected: d_s,
                found: overlap.nrows(),
            });
        }
        let basis = ProductBasis::new(system_energies, &self.basis.env_energies);
        let vectors = if self.vectors.is_real() && linalg::is_real(overlap.as_ref()) {
            let o = linalg::real_part(overlap.as_ref());
            let Eigenvectors::Real(v) = &self.vectors else {
                unreachable!()
            };
            let mut out = Mat::<f64>::zeros(d, d);
            for n in 0..d {
                for a in 0..d_s {
                    for alpha in 0..d_s {
                        let w = o[(alpha, a)];
                        if w == 0.0 {
                            continue;
                        }
                        for i in 0..d_e {
                            out[(a * d_e + i, n)] += w * v[(alpha * d_e + i, n)];
                        }
                    }
                }
            }
            Eigenvectors::Real(out)
        } else {
            let mut out = Mat::<c64>::zeros(d, d);
            for n in 0..d {
                for a in 0..d_s {
                    for alpha in 0..d_s {
                        let w = overlap[(alpha, a)].conj();
                        if w == ZERO {
                            continue;
                        }
                        for i in 0..d_e {
                            out[(a * d_e + i, n)] += w * self.vectors.get(alpha * d_e + i, n);
                        }
                    }
                }
            }
            Eigenvectors::Complex(out)
        };
        Ok(SpectralData {
            energies: self.energies.clone(),
            vectors,
            basis,
        })
    }

    /// Indices n with `E_n` in the closed interval `[lo, hi]`.
    pub fn indices_in(&self, lo: f64, hi: f64) -> Vec<usize> {
        let start = self.energies.partition_point(|&e| e < lo);
        let end = self.energies.partition_point(|&e| e <= hi);
        (start..end.max(start)).collect()
    }
}

/// Histogram plus kernel-smoothed density of a list of levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DosEstimate {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Kernel density at bin centers, in levels per unit energy.
    pub density: Vec<f64>,
}

impl DosEstimate {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }
}

fn histogram(levels: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<f64>, Vec<usize>) {
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0usize; bins];
    for &e in levels {
        let k = if width > 0.0 {
            ((e - lo) / width).floor() as isize
        } else {
            0
        };
        counts[k.clamp(0, bins as isize - 1) as usize] += 1;
    }
    (edges, counts)
}

/// Gaussian kernel bandwidth: three mean level spacings.
pub fn kde_bandwidth(sorted_levels: &[f64]) -> f64 {
    let n = sorted_levels.len();
    if n < 2 {
        return 1.0;
    }
    let span = sorted_levels[n - 1] - sorted_levels[0];
    let h = 3.0 * span / (n - 1) as f64;
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Gaussian kernel density of `levels` at `at`, normalized to the level count.
pub fn kde(sorted_levels: &[f64], bandwidth: f64, at: f64) -> f64 {
    let cut = 8.0 * bandwidth;
    let lo = sorted_levels.partition_point(|&e| e < at - cut);
    let hi = sorted_levels.partition_point(|&e| e <= at + cut);
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    sorted_levels[lo..hi]
        .iter()
        .map(|&e| {
            let x = (at - e) / bandwidth;
            (-0.5 * x * x).exp()
        })
        .sum::<f64>()
        * norm
}

fn kde_untruncated(levels: &[f64], bandwidth: f64, at: f64) -> f64 {
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    levels
        .iter()
        .map(|&e| (-0.5 * ((at - e) / bandwidth).powi(2)).exp())
        .sum::<f64>()
        * norm
}

/// Histogram over the spectrum's own range plus KDE at bin centers.
pub fn dos_estimate(levels: &[f64], bins: usize) -> Result<DosEstimate> {
    if bins < 4 {
        return Err(Error::TooFewBins {
            found: bins,
            required: 4,
        });
    }
    if levels.is_empty() {
        return Err(Error::TooFewLevels {
            found: 0,
            required: 1,
        });
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let (bin_edges, counts) = histogram(&sorted, lo, hi, bins);
    let bw = kde_bandwidth(&sorted);
    let density = bin_edges
        .windows(2)
        .map(|w| kde(&sorted, bw, 0.5 * (w[0] + w[1])))
        .collect();
    Ok(DosEstimate {
        bin_edges,
        counts,
        density,
    })
}

pub const DOS_WARNING_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DosComparison {
    pub coupled: DosEstimate,
    pub uncoupled: DosEstimate,
    /// L1 distance of the two count histograms normalized to unit mass.
    pub l1_distance: f64,
    pub warning: bool,
}

/// Compares two spectra. Each is binned over its own `[min, max]`, which makes the
/// distance insensitive to a constant shift.
pub fn dos_compare(coupled: &[f64], uncoupled: &[f64], bins: usize) -> Result<DosComparison> {
    if coupled.len() != uncoupled.len() {
        return Err(Error::DimensionMismatch {
            expected: uncoupled.len(),
            found: coupled.len(),
        });
    }
    let a = dos_estimate(coupled, bins)?;
    let b = dos_estimate(uncoupled, bins)?;
    let (na, nb) = (coupled.len() as f64, uncoupled.len() as f64);
    let l1_distance: f64 = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
        .sum();
    Ok(DosComparison {
        coupled: a,
        uncoupled: b,
        l1_distance,
        warning: l1_distance > DOS_WARNING_THRESHOLD,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaFit {
    pub beta: f64,
    pub r_squared: f64,
    pub levels_in_window: usize,
    /// Set when the log-density is poorly described by a line (R^2 < 0.9).
    pub warning: bool,
}

pub const BETA_FIT_GRID: usize = 41;
pub const MIN_FIT_LEVELS: usize = 50;

/// Ordinary least squares `y = a + b x`; returns `(a, b, R^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    // A perfectly flat response is described exactly by the line.
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    (intercept, slope, r2)
}

/// Slope of the log kernel density of `levels` over `[lo, hi]`.
///
/// With `rho(e) ~ exp(beta e)` the reported `beta` is the slope itself, so that
/// the environment density is `exp(beta e)` and the Gibbs weight `exp(-beta e^S)`.
pub fn fit_env_beta(levels: &[f64], lo: f64, hi: f64) -> Result<BetaFit> {
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let inside = sorted.partition_point(|&e| e <= hi) - sorted.partition_point(|&e| e < lo);
    if inside < MIN_FIT_LEVELS || !(hi > lo) {
        return Err(Error::TooFewLevels {
            found: inside,
            required: MIN_FIT_LEVELS,
        });
    }
    let bw = kde_bandwidth(&sorted);
    let mut xs = Vec::with_capacity(BETA_FIT_GRID);
    let mut ys = Vec::with_capacity(BETA_FIT_GRID);
    for k in 0..BETA_FIT_GRID {
        let e = lo + (hi - lo) * k as f64 / (BETA_FIT_GRID - 1) as f64;
        let mut rho = kde(&sorted, bw, e);
        if rho <= 0.0 {
            rho = kde_untruncated(&sorted, bw, e);
        }
        if rho <= 0.0 {
            return Err(Error::ZeroDensity);
        }
        xs.push(e);
        ys.push(rho.ln());
    }
    let (_, slope, r2) = linear_fit(&xs, &ys);
    Ok(BetaFit {
        beta: slope,
        r_squared: r2,
        levels_in_window: inside,
        warning: r2 < 0.9,
    })
}
