//! Main-body regions of eigenfunctions and LDOS, their widths, and
//! Breit-Wigner profile fits.

use std::f64::consts::PI;

use crate::model::ProductModel;
use crate::spectral::SpectralData;
use crate::{Error, Result};

/// Slack used when comparing captured weight against `1 - epsilon`.
pub const CAPTURE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Ef,
    Ldos,
}

impl RegionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Ef => "EF",
            RegionKind::Ldos => "LDOS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainBodyRegion {
    pub kind: RegionKind,
    pub owner: usize,
    pub lo: usize,
    pub hi: usize,
    pub captured_weight: f64,
    pub epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    Ok(())
}

/// Greedy endpoint trimming: from the full index range, drop whichever endpoint
/// carries less weight (the lower index on ties) while the rest still holds
/// at least `1 - epsilon`.
pub fn main_body(weights: &[f64], epsilon: f64) -> Result<(usize, usize, f64)> {
    check_epsilon(epsilon)?;
    if weights.is_empty() {
        return Err(Error::TooFewLevels {
            found: 0,
            required: 1,
        });
    }
    let target = 1.0 - epsilon - CAPTURE_TOLERANCE;
    let (mut lo, mut hi) = (0, weights.len() - 1);
    let mut captured: f64 = weights.iter().sum();
    while lo < hi {
        let (idx, w) = if weights[lo] <= weights[hi] {
            (lo, weights[lo])
        } else {
            (hi, weights[hi])
        };
        if captured - w < target {
            break;
        }
        captured -= w;
        if idx == lo {
            lo += 1;
        } else {
            hi -= 1;
        }
    }
    let captured = weights[lo..=hi].iter().sum();
    Ok((lo, hi, captured))
}

pub fn main_body_region(
    kind: RegionKind,
    owner: usize,
    weights: &[f64],
    epsilon: f64,
) -> Result<MainBodyRegion> {
    let (lo, hi, captured_weight) = main_body(weights, epsilon)?;
    Ok(MainBodyRegion {
        kind,
        owner,
        lo,
        hi,
        captured_weight,
        epsilon,
    })
}

/// One row of the per-state width table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateWidth {
    pub region: MainBodyRegion,
    pub owner_energy: f64,
    pub lo_energy: f64,
    pub hi_energy: f64,
}

impl StateWidth {
    pub fn width(&self) -> f64 {
        self.hi_energy - self.lo_energy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WidthReport {
    pub epsilon: f64,
    pub w_e: f64,
    pub w_l: f64,
    pub w_m: f64,
    pub ef: Vec<StateWidth>,
    pub ldos: Vec<StateWidth>,
    /// Owners whose main body is not contained in `[E - w_M, E + w_M]`, up to
    /// rounding of the eigenvalues.
    pub containment_violations: usize,
}

/// EF widths for coupled states with `E_n` in `[lo, hi]` and LDOS widths for
/// uncoupled states with `E_r` in `[lo, hi]`.
pub fn width_report(sd: &SpectralData, lo: f64, hi: f64, epsilon: f64) -> Result<WidthReport> {
    check_epsilon(epsilon)?;
    let owners_n = sd.indices_in(lo, hi);
    let e_r = &sd.basis.energies;
    let r_start = e_r.partition_point(|&e| e < lo);
    let r_end = e_r.partition_point(|&e| e <= hi);
    if owners_n.is_empty() && r_start >= r_end {
        return Err(Error::EmptyWindow { lo, hi });
    }
    let mut ef = Vec::with_capacity(owners_n.len());
    for &n in &owners_n {
        let region = main_body_region(RegionKind::Ef, n, &sd.ef_weights(n), epsilon)?;
        ef.push(StateWidth {
            region,
            owner_energy: sd.energies[n],
            lo_energy: e_r[region.lo],
            hi_energy: e_r[region.hi],
        });
    }
    let mut ldos = Vec::with_capacity(r_end.saturating_sub(r_start));
    for r in r_start..r_end {
        let region = main_body_region(RegionKind::Ldos, r, &sd.ldos_weights(r), epsilon)?;
        ldos.push(StateWidth {
            region,
            owner_energy: e_r[r],
            lo_energy: sd.energies[region.lo],
            hi_energy: sd.energies[region.hi],
        });
    }
    let w_e = ef.iter().map(StateWidth::width).fold(0.0, f64::max);
    let w_l = ldos.iter().map(StateWidth::width).fold(0.0, f64::max);
    let w_m = w_e.max(w_l);
    let containment_violations = ef
        .iter()
        .chain(&ldos)
        .filter(|s| {
            let slack = 1e-10 * s.owner_energy.abs().max(1.0);
            s.owner_energy - w_m > s.lo_energy + slack || s.hi_energy > s.owner_energy + w_m + slack
        })
        .count();
    Ok(WidthReport {
        epsilon,
        w_e,
        w_l,
        w_m,
        ef,
        ldos,
        containment_violations,
    })
}

/// `A/(2 pi) * omega / ((x - c)^2 + omega^2/4)`: unit-area Lorentzian scaled by
/// `A`, with full width at half maximum `omega`.
pub fn lorentzian(x: f64, amplitude: f64, center: f64, omega: f64) -> f64 {
    let dx = x - center;
    amplitude / (2.0 * PI) * omega / (dx * dx + 0.25 * omega * omega)
}

/// Averaged eigenfunction profile on a uniform grid of `E_r - E_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub centers: Vec<f64>,
    /// Weight per unit energy.
    pub values: Vec<f64>,
    pub bin_width: f64,
}

/// Mean of `|<E_r|n>|^2` over `owners`, binned by `E_r - E_n` on a grid of
/// odd size centered at zero and covering `[-half_range, half_range]`.
pub fn mean_profile(
    sd: &SpectralData,
    owners: &[usize],
    bin_width: f64,
    half_range: f64,
) -> Result<Profile> {
    if owners.is_empty() {
        return Err(Error::TooFewLevels {
            found: 0,
            required: 1,
        });
    }
    if !(bin_width > 0.0 && half_range >= bin_width) {
        return Err(Error::InvalidParameter(format!(
            "profile needs 0 < bin_width <= half_range, got {bin_width} and {half_range}"
        )));
    }
    let m = (half_range / bin_width).floor() as usize;
    let nb = 2 * m + 1;
    let mut values = vec![0.0; nb];
    let e_r = &sd.basis.energies;
    for &n in owners {
        let en = sd.energies[n];
        let r0 = e_r.partition_point(|&e| e < en - (m as f64 + 0.5) * bin_width);
        let r1 = e_r.partition_point(|&e| e < en + (m as f64 + 0.5) * bin_width);
        for r in r0..r1 {
            let k = ((e_r[r] - en) / bin_width + m as f64 + 0.5).floor();
            if k >= 0.0 && (k as usize) < nb {
                values[k as usize] += sd.vectors.weight(sd.basis.order[r], n);
            }
        }
    }
    let scale = 1.0 / (owners.len() as f64 * bin_width);
    values.iter_mut().for_each(|v| *v *= scale);
    let centers = (0..nb).map(|k| (k as f64 - m as f64) * bin_width).collect();
    Ok(Profile {
        centers,
        values,
        bin_width,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreitWignerFit {
    pub omega: f64,
    pub center: f64,
    pub amplitude: f64,
    /// RMS residual relative to the profile maximum.
    pub residual: f64,
    pub epsilon: f64,
    /// `2 omega / (pi epsilon)`.
    pub predicted_width: f64,
    /// Set when least squares failed and `omega` is the half-maximum width.
    pub fallback: bool,
    pub iterations: usize,
}

pub const MIN_PROFILE_BINS: usize = 11;

fn half_max_width(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (kmax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let half = 0.5 * ymax;
    let step = if x.len() > 1 { x[1] - x[0] } else { 1.0 };
    let mut left = x[0];
    for k in (0..kmax).rev() {
        if y[k] < half {
            let t = (half - y[k]) / (y[k + 1] - y[k]);
            left = x[k] + t * step;
            break;
        }
    }
    let mut right = x[x.len() - 1];
    for k in kmax + 1..y.len() {
        if y[k] < half {
            let t = (y[k - 1] - half) / (y[k - 1] - y[k]);
            right = x[k - 1] + t * step;
            break;
        }
    }
    ((right - left).max(step), x[kmax])
}

fn sum_sq(x: &[f64], y: &[f64], p: [f64; 3]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - lorentzian(xi, p[0], p[1], p[2])).powi(2))
        .sum()
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *o = det(m) / d;
    }
    Some(out)
}

/// Levenberg-Marquardt fit of [`lorentzian`] to a profile, with the
/// half-maximum width as fallback.
pub fn breit_wigner_fit(profile: &Profile, epsilon: f64) -> Result<BreitWignerFit> {
    check_epsilon(epsilon)?;
    let (x, y) = (&profile.centers, &profile.values);
    if x.len() < MIN_PROFILE_BINS {
        return Err(Error::TooFewBins {
            found: x.len(),
            required: MIN_PROFILE_BINS,
        });
    }
    let ymax = y.iter().cloned().fold(0.0, f64::max);
    if !(ymax > 0.0) {
        return Err(Error::ZeroDensity);
    }
    let (w0, c0) = half_max_width(x, y);
    let area: f64 = y.iter().sum::<f64>() * profile.bin_width;
    let mut p = [area.max(1e-300), c0, w0];
    let mut cost = sum_sq(x, y, p);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&xi, &yi) in x.iter().zip(y.iter()) {
            let (a, c, w) = (p[0], p[1], p[2]);
            let dx = xi - c;
            let den = dx * dx + 0.25 * w * w;
            let f = a / (2.0 * PI) * w / den;
            let g = [
                w / (2.0 * PI * den),
                a / (2.0 * PI) * w * 2.0 * dx / (den * den),
                a / (2.0 * PI) * (1.0 / den - w * 0.5 * w / (den * den)),
            ];
            let r = yi - f;
            for i in 0..3 {
                jtr[i] += g[i] * r;
                for j in 0..3 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += mu * jtj[i][i].max(1e-300);
            }
            let Some(step) = solve3(a, jtr) else {
                mu *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            if trial[2] > 0.0 && trial[0] > 0.0 {
                let c = sum_sq(x, y, trial);
                if c <= cost {
                    let rel = step
                        .iter()
                        .zip(&p)
                        .map(|(s, v)| (s / v.abs().max(1e-12)).abs())
                        .fold(0.0, f64::max);
                    let small_gain = cost - c <= 1e-15 * cost.max(1e-300);
                    p = trial;
                    cost = c;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    if rel < 1e-12 || small_gain {
                        converged = true;
                    }
                    break;
                }
            }
            mu *= 10.0;
        }
        if converged || !accepted {
            converged = converged || cost == 0.0 || !accepted && cost.is_finite();
            break;
        }
    }
    let fit_ok = converged && p.iter().all(|v| v.is_finite()) && p[2] > 0.0;
    let (omega, center, amplitude, fallback) = if fit_ok {
        (p[2], p[1], p[0], false)
    } else {
        (w0, c0, area, true)
    };
    let rms = (sum_sq(x, y, [amplitude, center, omega]) / x.len() as f64).sqrt();
    Ok(BreitWignerFit {
        omega,
        center,
        amplitude,
        residual: rms / ymax,
        epsilon,
        predicted_width: 2.0 * omega / (PI * epsilon),
        fallback,
        iterations,
    })
}

/// `2 pi <|H^I_{rr'}|^2> rho_dos`, averaging over `rows` and over partners `r'`
/// within `half_window` of each, with the density counted in the same window.
pub fn golden_rule_width(model: &ProductModel, rows: &[usize], half_window: f64) -> Result<f64> {
    if rows.is_empty() || !(half_window > 0.0) {
        return Err(Error::InvalidParameter(
            "golden-rule estimate needs rows and a positive window".into(),
        ));
    }
    let diag = model.uncoupled_diagonal();
    let mut order: Vec<usize> = (0..diag.len()).collect();
    order.sort_by(|&a, &b| diag[a].total_cmp(&diag[b]));
    let sorted: Vec<f64> = order.iter().map(|&r| diag[r]).collect();
    let mut total = 0.0;
    for &row in rows {
        let e = diag[row];
        let lo = sorted.partition_point(|&v| v < e - half_window);
        let hi = sorted.partition_point(|&v| v <= e + half_window);
        let sq: f64 = order[lo..hi]
            .iter()
            .filter(|&&other| other != row)
            .map(|&other| model.interaction_element(row, other).norm_sqr())
            .sum();
        // mean |H|^2 times the density in the window
        total += sq / (2.0 * half_window);
    }
    Ok(2.0 * PI * total / rows.len() as f64)
}
