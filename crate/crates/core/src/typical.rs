//! Typical states in a shell subspace and the split of their overlaps into
//! same-state and cross-state parts.

use faer::{c64, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::ensemble::{
    rdm_microcanonical, rdm_of_vector, rdm_single_state, trace_distance, EnergyShell, Rdm,
    RegionDecomposition,
};
use crate::spectral::SpectralData;
use crate::{Error, Result};

pub const MIN_SAMPLES: usize = 30;

/// `d_Gamma` complex Gaussian coefficients, each part with variance 1/2, drawn
/// from stream `index` of a generator seeded with `seed`.
pub fn gaussian_coefficients(count: usize, seed: u64, index: u64) -> Vec<c64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    (0..count)
        .map(|_| c64::new(rng.sample(normal), rng.sample(normal)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TypicalSample {
    pub seed: u64,
    pub index: u64,
    pub coefficients: Vec<c64>,
    /// `N_Gamma^2 = sum |D_n|^2`.
    pub norm_sq: f64,
    /// Unnormalized `sum_n D_n |n>` in the product basis.
    pub phi: Vec<c64>,
    pub rho: Rdm,
}

impl TypicalSample {
    /// `|Psi> = phi / N_Gamma`.
    pub fn state(&self) -> Vec<c64> {
        let s = 1.0 / self.norm_sq.sqrt();
        self.phi.iter().map(|z| z * s).collect()
    }
}

fn shell_vectors(sd: &SpectralData, shell: &EnergyShell) -> Result<Mat<c64>> {
    if shell.members.is_empty() {
        return Err(Error::EmptyShell {
            start: shell.e_s,
            end: shell.end(),
        });
    }
    if let Some(&n) = shell.members.iter().find(|&&n| n >= sd.dim()) {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: sd.dim(),
        });
    }
    Ok(Mat::from_fn(sd.dim(), shell.members.len(), |r, k| {
        sd.vectors.get(r, shell.members[k])
    }))
}

fn finish(
    sd: &SpectralData,
    phi: Vec<c64>,
    coefficients: Vec<c64>,
    seed: u64,
    index: u64,
) -> Result<TypicalSample> {
    let norm_sq: f64 = coefficients.iter().map(|z| z.norm_sqr()).sum();
    if !(norm_sq > 0.0) {
        return Err(Error::InvalidParameter(
            "typical-state coefficients vanish".into(),
        ));
    }
    let m = rdm_of_vector(&phi, sd.d_s(), sd.d_e());
    let rho = Rdm::new(
        Mat::from_fn(m.nrows(), m.ncols(), |a, b| m[(a, b)] / norm_sq),
        "H^S eigenbasis",
    );
    Ok(TypicalSample {
        seed,
        index,
        coefficients,
        norm_sq,
        phi,
        rho,
    })
}

/// Typical state built from caller-supplied coefficients, one per shell member.
pub fn typical_from_coefficients(
    sd: &SpectralData,
    shell: &EnergyShell,
    coefficients: Vec<c64>,
) -> Result<TypicalSample> {
    if coefficients.len() != shell.members.len() {
        return Err(Error::DimensionMismatch {
            expected: shell.members.len(),
            found: coefficients.len(),
        });
    }
    let v = shell_vectors(sd, shell)?;
    let phi = (0..sd.dim())
        .map(|r| {
            (0..coefficients.len())
                .map(|k| v[(r, k)] * coefficients[k])
                .sum()
        })
        .collect();
    finish(sd, phi, coefficients, 0, 0)
}

pub fn sample_typical(
    sd: &SpectralData,
    shell: &EnergyShell,
    seed: u64,
    index: u64,
) -> Result<TypicalSample> {
    let d = gaussian_coefficients(shell.members.len(), seed, index);
    let mut s = typical_from_coefficients(sd, shell, d)?;
    s.seed = seed;
    s.index = index;
    Ok(s)
}

/// Samples `0..count` of a seed, sharing one product with the shell eigenvectors.
pub fn sample_batch(
    sd: &SpectralData,
    shell: &EnergyShell,
    seed: u64,
    count: usize,
) -> Result<Vec<TypicalSample>> {
    let v = shell_vectors(sd, shell)?;
    let g = shell.members.len();
    let coeffs: Vec<Vec<c64>> = (0..count as u64)
        .map(|k| gaussian_coefficients(g, seed, k))
        .collect();
    let dmat = Mat::from_fn(g, count, |n, k| coeffs[k][n]);
    let phis = &v * &dmat;
    coeffs
        .into_iter()
        .enumerate()
        .map(|(k, c)| finish(sd, phis.col(k).iter().copied().collect(), c, seed, k as u64))
        .collect()
}

/// Overlap split of one sample. Matrices are indexed `[(beta, alpha)]`.
#[derive(Clone, Debug)]
pub struct KReport {
    /// `<Phi^E_beta|Phi^E_alpha>`.
    pub overlap: Mat<c64>,
    /// Same-state part, `sum_n |D_n|^2 rho^n_{alpha beta}`.
    pub k1: Mat<c64>,
    /// Cross-state part.
    pub k2: Mat<c64>,
    /// `K^(2)_{alpha alpha, kappa}` for each `alpha`, split by environment region.
    pub k2_regions: Vec<[f64; 4]>,
    /// `B_{alpha n}`, rows `alpha`, columns in shell-member order.
    pub b: Mat<f64>,
    pub b_bar: Vec<f64>,
}

/// Splits the overlaps of `sample`; `regions[alpha]` supplies the environment
/// regions used for the diagonal split.
pub fn k_decompose(
    sample: &TypicalSample,
    sd: &SpectralData,
    shell: &EnergyShell,
    regions: &[RegionDecomposition],
) -> Result<KReport> {
    let (d_s, d_e) = (sd.d_s(), sd.d_e());
    if regions.len() != d_s {
        return Err(Error::DimensionMismatch {
            expected: d_s,
            found: regions.len(),
        });
    }
    if sample.coefficients.len() != shell.members.len() {
        return Err(Error::DimensionMismatch {
            expected: shell.members.len(),
            found: sample.coefficients.len(),
        });
    }
    let g = shell.members.len();
    let phi = &sample.phi;
    let overlap = Mat::from_fn(d_s, d_s, |b, a| {
        (0..d_e)
            .map(|i| phi[b * d_e + i].conj() * phi[a * d_e + i])
            .sum::<c64>()
    });

    let mut k1 = Mat::<c64>::zeros(d_s, d_s);
    let mut b_mat = Mat::<f64>::zeros(d_s, g);
    // I_{alpha i} = sum_n |D_n|^2 |C^n_{alpha i}|^2
    let mut weighted = vec![0.0f64; d_s * d_e];
    for (k, &n) in shell.members.iter().enumerate() {
        let w = sample.coefficients[k].norm_sqr();
        let rho_n = rdm_single_state(sd, n)?;
        for b in 0..d_s {
            for a in 0..d_s {
                k1[(b, a)] += rho_n.get(a, b) * w;
            }
            b_mat[(b, k)] = rho_n.get(b, b).re;
        }
        for (r, x) in weighted.iter_mut().enumerate() {
            *x += w * sd.vectors.weight(r, n);
        }
    }
    let k2 = &overlap - &k1;
    let k2_regions = (0..d_s)
        .map(|a| {
            let mut out = [0.0f64; 4];
            for i in 0..d_e {
                let j = phi[a * d_e + i].norm_sqr() - weighted[a * d_e + i];
                out[regions[a].region_of(sd.basis.env_energies[i])] += j;
            }
            out
        })
        .collect();
    let b_bar = (0..d_s)
        .map(|a| (0..g).map(|k| b_mat[(a, k)]).sum::<f64>() / g as f64)
        .collect();
    Ok(KReport {
        overlap,
        k1,
        k2,
        k2_regions,
        b: b_mat,
        b_bar,
    })
}

/// Root mean square over samples of a per-sample quantity.
pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct TypicalityStats {
    pub d_gamma: usize,
    pub samples: usize,
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub std_error: f64,
    /// `(1/2) sqrt(d_S^2 / d_Gamma)`.
    pub bound: f64,
    pub mean_rho_ty: Mat<c64>,
    /// Standard error of the real and imaginary parts of each `rho_ty` element.
    pub rho_ty_std_error: Mat<c64>,
    /// Spread of `rho^(n)_{beta alpha}` over the shell, `sqrt(mean |x - mean|^2)`.
    pub sigma: Mat<f64>,
}

impl TypicalityStats {
    pub fn bound_holds(&self) -> bool {
        self.mean_distance <= self.bound
    }

    pub fn bound_holds_with_margin(&self) -> bool {
        self.mean_distance + 2.0 * self.std_error <= self.bound
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn typicality_stats(
    sd: &SpectralData,
    shell: &EnergyShell,
    samples: usize,
    seed: u64,
) -> Result<TypicalityStats> {
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    let rho = rdm_microcanonical(sd, shell)?;
    let d_s = sd.d_s();
    let batch = sample_batch(sd, shell, seed, samples)?;
    let distances = batch
        .iter()
        .map(|s| trace_distance(&rho, &s.rho))
        .collect::<Result<Vec<_>>>()?;
    let (mean_distance, std_error) = mean_and_se(&distances);

    let elem = |a: usize, b: usize, re: bool| -> Vec<f64> {
        batch
            .iter()
            .map(|s| {
                if re {
                    s.rho.get(a, b).re
                } else {
                    s.rho.get(a, b).im
                }
            })
            .collect()
    };
    let mut mean_rho_ty = Mat::<c64>::zeros(d_s, d_s);
    let mut rho_ty_std_error = Mat::<c64>::zeros(d_s, d_s);
    for a in 0..d_s {
        for b in 0..d_s {
            let (mr, sr) = mean_and_se(&elem(a, b, true));
            let (mi, si) = mean_and_se(&elem(a, b, false));
            mean_rho_ty[(a, b)] = c64::new(mr, mi);
            rho_ty_std_error[(a, b)] = c64::new(sr, si);
        }
    }

    let singles = shell
        .members
        .iter()
        .map(|&n| rdm_single_state(sd, n))
        .collect::<Result<Vec<_>>>()?;
    let g = singles.len() as f64;
    let sigma = Mat::from_fn(d_s, d_s, |b, a| {
        let mean: c64 = singles.iter().map(|r| r.get(b, a)).sum::<c64>() / g;
        (singles
            .iter()
            .map(|r| (r.get(b, a) - mean).norm_sqr())
            .sum::<f64>()
            / g)
            .sqrt()
    });
    let d_gamma = shell.members.len();
    Ok(TypicalityStats {
        d_gamma,
        samples,
        distances,
        mean_distance,
        std_error,
        bound: 0.5 * ((d_s * d_s) as f64 / d_gamma as f64).sqrt(),
        mean_rho_ty,
        rho_ty_std_error,
        sigma,
    })
}

/// Per-`alpha` RMS over samples of `K^(1)_{aa} - d_Gamma rho_aa`, of `K^(2)_{aa}`
/// and of each region part of `K^(2)_{aa}`.
#[derive(Clone, Debug)]
pub struct KStatistics {
    pub samples: usize,
    pub k1_residual_rms: Vec<f64>,
    /// `rho_aa sqrt(d_Gamma)`, the scale of the same-state fluctuation.
    pub k1_residual_scale: Vec<f64>,
    pub k2_rms: Vec<f64>,
    pub k2_region_rms: Vec<[f64; 4]>,
    pub region_counts: Vec<[usize; 4]>,
    pub max_split_residual: f64,
}

pub fn k_statistics(
    sd: &SpectralData,
    shell: &EnergyShell,
    regions: &[RegionDecomposition],
    samples: usize,
    seed: u64,
) -> Result<KStatistics> {
    let rho = rdm_microcanonical(sd, shell)?;
    let d_s = sd.d_s();
    let g = shell.members.len() as f64;
    let batch = sample_batch(sd, shell, seed, samples)?;
    let reports = batch
        .iter()
        .map(|s| k_decompose(s, sd, shell, regions))
        .collect::<Result<Vec<_>>>()?;
    let mut max_split_residual = 0.0f64;
    for (s, r) in batch.iter().zip(&reports) {
        for b in 0..d_s {
            for a in 0..d_s {
                let direct = s.rho.get(a, b) * s.norm_sq;
                max_split_residual =
                    max_split_residual.max((r.k1[(b, a)] + r.k2[(b, a)] - direct).norm());
            }
        }
    }
    let k1_residual_rms = (0..d_s)
        .map(|a| {
            rms(reports
                .iter()
                .map(|r| r.k1[(a, a)].re - g * rho.get(a, a).re))
        })
        .collect();
    let k1_residual_scale = (0..d_s).map(|a| rho.get(a, a).re * g.sqrt()).collect();
    let k2_rms = (0..d_s)
        .map(|a| rms(reports.iter().map(|r| r.k2[(a, a)].re)))
        .collect();
    let k2_region_rms = (0..d_s)
        .map(|a| {
            let mut out = [0.0; 4];
            for (k, o) in out.iter_mut().enumerate() {
                *o = rms(reports.iter().map(|r| r.k2_regions[a][k]));
            }
            out
        })
        .collect();
    let region_counts = regions.iter().map(|r| r.counts).collect();
    Ok(KStatistics {
        samples,
        k1_residual_rms,
        k1_residual_scale,
        k2_rms,
        k2_region_rms,
        region_counts,
        max_split_residual,
    })
}
