//! Off-diagonal RDM elements through the commutator quantity
//! `Q^n_{beta alpha} = <n|[ |beta><alpha| (x) I, H^I ]|n>`, ETH statistics of
//! environment operators, and the qubit prediction built on them.

use faer::{c64, Mat};

use crate::ensemble::{rdm_single_state, EnergyShell, Rdm};
use crate::linalg::ZERO;
use crate::model::{EnvMatrix, ProductModel};
use crate::spectral::{linear_fit, SpectralData};
use crate::{Error, Result};

/// Relative tolerance below which a level pair counts as degenerate.
pub const PAIR_DEGENERACY: f64 = 1e-9;
/// States processed per batched product.
const BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PairQ {
    pub alpha: usize,
    pub beta: usize,
    /// `e_beta - e_alpha`.
    pub delta_s: f64,
    /// Shell average of `Q^n_{beta alpha}`.
    pub q: c64,
    /// Part of `q` coming from diagonal elements of the environment operators.
    pub q_diagonal_part: c64,
    /// `Q^n_{beta alpha}` for each shell member, in member order.
    pub per_state: Vec<c64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QData {
    pub members: Vec<usize>,
    pub pairs: Vec<PairQ>,
    /// Pairs `(alpha, beta)` skipped because their levels are degenerate.
    pub skipped: Vec<(usize, usize)>,
}

impl QData {
    pub fn pair(&self, alpha: usize, beta: usize) -> Option<&PairQ> {
        self.pairs
            .iter()
            .find(|p| p.alpha == alpha && p.beta == beta)
    }

    /// max over pairs of `|Q_{ba}/D_{ba} - conj(Q_{ab}/D_{ab})|`.
    pub fn hermiticity_residual(&self) -> f64 {
        self.pairs
            .iter()
            .filter_map(|p| {
                self.pair(p.beta, p.alpha)
                    .map(|t| (p.q / p.delta_s - (t.q / t.delta_s).conj()).norm())
            })
            .fold(0.0, f64::max)
    }
}

fn env_complex(env: &EnvMatrix, d_e: usize) -> Option<Mat<c64>> {
    match env {
        EnvMatrix::Identity => None,
        other => Some(other.to_complex(d_e)),
    }
}

/// `Q^n_{beta alpha}` for every ordered nondegenerate pair and every shell member,
/// evaluated from matrix elements of `H^I`:
/// `Q = sum_i [conj(phi_{beta i}) (H^I phi)_{alpha i} - conj((H^I phi)_{beta i}) phi_{alpha i}]`.
pub fn q_values(model: &ProductModel, sd: &SpectralData, shell: &EnergyShell) -> Result<QData> {
    let (d_s, d_e) = (model.d_s(), model.d_e());
    if sd.d_s() != d_s || sd.d_e() != d_e {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: sd.dim(),
        });
    }
    if shell.members.is_empty() {
        return Err(Error::EmptyShell {
            start: shell.e_s,
            end: shell.end(),
        });
    }
    let e = &model.system_energies;
    let norm = e.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for alpha in 0..d_s {
        for beta in 0..d_s {
            if alpha == beta {
                continue;
            }
            let delta_s = e[beta] - e[alpha];
            if delta_s.abs() < PAIR_DEGENERACY * norm {
                skipped.push((alpha, beta));
            } else {
                pairs.push(PairQ {
                    alpha,
                    beta,
                    delta_s,
                    q: ZERO,
                    q_diagonal_part: ZERO,
                    per_state: Vec::with_capacity(shell.members.len()),
                });
            }
        }
    }
    let env_ops: Vec<Option<Mat<c64>>> = model
        .terms
        .iter()
        .map(|t| env_complex(&t.env, d_e))
        .collect();
    let env_diag: Vec<Vec<f64>> = model.terms.iter().map(|t| t.env.diagonal(d_e)).collect();
    let lam = model.coupling;

    for chunk in shell.members.chunks(BLOCK) {
        let m = chunk.len();
        // Row k * d_S + alpha holds phi^{n_k}_alpha.
        let p = Mat::from_fn(m * d_s, d_e, |row, i| {
            sd.vectors.get((row % d_s) * d_e + i, chunk[row / d_s])
        });
        let mut w = Mat::<c64>::zeros(m * d_s, d_e);
        let mut w_diag = Mat::<c64>::zeros(m * d_s, d_e);
        for (t, term) in model.terms.iter().enumerate() {
            let pe = env_ops[t].as_ref().map(|op| &p * op.transpose());
            for k in 0..m {
                for a in 0..d_s {
                    for b in 0..d_s {
                        let s = term.system[(a, b)] * lam;
                        if s == ZERO {
                            continue;
                        }
                        for i in 0..d_e {
                            let src = match &pe {
                                Some(pe) => pe[(k * d_s + b, i)],
                                None => p[(k * d_s + b, i)],
                            };
                            w[(k * d_s + a, i)] += s * src;
                            w_diag[(k * d_s + a, i)] += s * p[(k * d_s + b, i)] * env_diag[t][i];
                        }
                    }
                }
            }
        }
        for k in 0..m {
            for pq in pairs.iter_mut() {
                let (ra, rb) = (k * d_s + pq.alpha, k * d_s + pq.beta);
                let mut q = ZERO;
                let mut qd = ZERO;
                for i in 0..d_e {
                    q += p[(rb, i)].conj() * w[(ra, i)] - w[(rb, i)].conj() * p[(ra, i)];
                    qd += p[(rb, i)].conj() * w_diag[(ra, i)] - w_diag[(rb, i)].conj() * p[(ra, i)];
                }
                pq.per_state.push(q);
                pq.q_diagonal_part += qd;
            }
        }
    }
    let scale = 1.0 / shell.members.len() as f64;
    for pq in pairs.iter_mut() {
        pq.q = pq.per_state.iter().copied().sum::<c64>() * scale;
        pq.q_diagonal_part *= scale;
    }
    Ok(QData {
        members: shell.members.clone(),
        pairs,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResidual {
    pub alpha: usize,
    pub beta: usize,
    /// `rho_{alpha beta} - Q_{beta alpha} / Delta_{beta alpha}`.
    pub residual: c64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub pairs: Vec<PairResidual>,
    pub max_residual: f64,
}

/// Shell-averaged identity `rho_{alpha beta} = Q_{beta alpha} / Delta_{beta alpha}`.
pub fn verify_identity(rho: &Rdm, q: &QData) -> Result<IdentityReport> {
    let mut pairs = Vec::with_capacity(q.pairs.len());
    for p in &q.pairs {
        if p.alpha >= rho.dim() || p.beta >= rho.dim() {
            return Err(Error::IndexOutOfRange {
                index: p.alpha.max(p.beta),
                len: rho.dim(),
            });
        }
        pairs.push(PairResidual {
            alpha: p.alpha,
            beta: p.beta,
            residual: rho.get(p.alpha, p.beta) - p.q / p.delta_s,
        });
    }
    let max_residual = pairs.iter().map(|r| r.residual.norm()).fold(0.0, f64::max);
    Ok(IdentityReport {
        pairs,
        max_residual,
    })
}

/// Largest per-state residual `|rho^{S(n)}_{alpha beta} - Q^n_{beta alpha} / Delta_{beta alpha}|`.
pub fn verify_identity_per_state(sd: &SpectralData, q: &QData) -> Result<f64> {
    let mut worst = 0.0f64;
    for (k, &n) in q.members.iter().enumerate() {
        let rho = rdm_single_state(sd, n)?;
        for p in &q.pairs {
            worst = worst.max((rho.get(p.alpha, p.beta) - p.per_state[k] / p.delta_s).norm());
        }
    }
    Ok(worst)
}

/// ETH diagnostics of an environment operator over an energy window.
#[derive(Clone, Debug, PartialEq)]
pub struct EthStats {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    /// Mean diagonal element over the window.
    pub h0: f64,
    pub h_intercept: f64,
    pub h_slope: f64,
    pub h_r2: f64,
    /// `|slope| (hi - lo) / |h0|`: variation of the fitted `h(e)` across the window.
    pub relative_variation: f64,
    pub offdiag_rms: f64,
    /// `(mean energy, rms, pair count)` per bin of `(e_i + e_j)/2`.
    pub offdiag_profile: Vec<(f64, f64, usize)>,
}

pub const MIN_ETH_SAMPLES: usize = 50;
pub const FLATNESS_GATE: f64 = 0.1;

impl EthStats {
    pub fn h_at(&self, e: f64) -> f64 {
        self.h_intercept + self.h_slope * e
    }

    pub fn is_flat(&self) -> bool {
        self.relative_variation < FLATNESS_GATE
    }
}

/// Diagonal fit and off-diagonal statistics of `op` (in the eigenbasis of `H^E`)
/// over levels with `e_i` in `[lo, hi]`.
pub fn eth_stats(
    env_energies: &[f64],
    op: &EnvMatrix,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Result<EthStats> {
    let idx: Vec<usize> = (0..env_energies.len())
        .filter(|&i| env_energies[i] >= lo && env_energies[i] <= hi)
        .collect();
    if idx.len() < MIN_ETH_SAMPLES {
        return Err(Error::TooFewLevels {
            found: idx.len(),
            required: MIN_ETH_SAMPLES,
        });
    }
    if bins == 0 {
        return Err(Error::TooFewBins {
            found: 0,
            required: 1,
        });
    }
    let xs: Vec<f64> = idx.iter().map(|&i| env_energies[i]).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| op.get(i, i).re).collect();
    let h0 = ys.iter().sum::<f64>() / ys.len() as f64;
    let (h_intercept, h_slope, h_r2) = linear_fit(&xs, &ys);
    let relative_variation = if h0.abs() > 0.0 {
        h_slope.abs() * (hi - lo) / h0.abs()
    } else {
        f64::INFINITY
    };
    let relative_variation = if h_slope == 0.0 {
        0.0
    } else {
        relative_variation
    };

    let width = (hi - lo) / bins as f64;
    let mut sums = vec![0.0f64; bins];
    let mut counts = vec![0usize; bins];
    let (mut total, mut npairs) = (0.0f64, 0usize);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let v = op.get(i, j).norm_sqr();
            let mid = 0.5 * (env_energies[i] + env_energies[j]);
            let k = (((mid - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            sums[k] += v;
            counts[k] += 1;
            total += v;
            npairs += 1;
        }
    }
    let offdiag_rms = if npairs > 0 {
        (total / npairs as f64).sqrt()
    } else {
        0.0
    };
    let offdiag_profile = (0..bins)
        .map(|k| {
            let rms = if counts[k] > 0 {
                (sums[k] / counts[k] as f64).sqrt()
            } else {
                0.0
            };
            (lo + (k as f64 + 0.5) * width, rms, counts[k])
        })
        .collect();
    Ok(EthStats {
        lo,
        hi,
        samples: idx.len(),
        h0,
        h_intercept,
        h_slope,
        h_r2,
        relative_variation,
        offdiag_rms,
        offdiag_profile,
    })
}

/// Slope and R^2 of `ln(rms)` against the number of sites.
pub fn entropy_scaling(points: &[(usize, f64)]) -> Option<(f64, f64)> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|&(n, r)| (n as f64, r.ln()))
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
    let (_, slope, r2) = linear_fit(&xs, &ys);
    Some((slope, r2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub alpha: usize,
    pub beta: usize,
    pub measured: c64,
    pub predicted: c64,
    pub relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EthPrediction {
    pub pairs: Vec<PairPrediction>,
    /// Every interaction term has vanishing diagonal system elements.
    pub diagonal_free: bool,
    /// Caller-supplied flatness of `h(e)` over the shell.
    pub flat: bool,
}

/// `rho_{alpha beta} ~ lambda sum_nu H^{IS,nu}_{alpha beta} h0_nu (rho_{beta beta} - rho_{alpha alpha}) / Delta_{beta alpha}`.
fn predict(model: &ProductModel, rho: &Rdm, h0: &[f64], alpha: usize, beta: usize) -> c64 {
    let e = &model.system_energies;
    let coeff: c64 = model
        .terms
        .iter()
        .zip(h0)
        .map(|(t, &h)| t.system[(alpha, beta)] * h)
        .sum::<c64>()
        * model.coupling;
    coeff * ((rho.get(beta, beta).re - rho.get(alpha, alpha).re) / (e[beta] - e[alpha]))
}

fn check_qubit(model: &ProductModel, h0: &[f64]) -> Result<bool> {
    if model.d_s() != 2 {
        return Err(Error::InvalidParameter(format!(
            "qubit prediction needs d_S = 2, got {}",
            model.d_s()
        )));
    }
    if h0.len() != model.terms.len() {
        return Err(Error::MissingEthStats(h0.len()));
    }
    Ok(model.terms.iter().all(|t| {
        let scale = t.system[(0, 1)].norm().max(1.0);
        t.system[(0, 0)].norm() < 1e-12 * scale && t.system[(1, 1)].norm() < 1e-12 * scale
    }))
}

fn relative(measured: c64, predicted: c64, floor: f64) -> f64 {
    (measured - predicted).norm() / measured.norm().max(floor)
}

/// Qubit prediction for a shell RDM, one `h0` per interaction term.
pub fn qubit_eth_prediction(
    rho: &Rdm,
    model: &ProductModel,
    h0: &[f64],
    flat: bool,
) -> Result<EthPrediction> {
    let diagonal_free = check_qubit(model, h0)?;
    let floor = 1e-8
        * rho
            .diagonal()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(
                (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| rho.get(a, b).norm())
                    .fold(0.0, f64::max),
            );
    let pairs = [(0usize, 1usize), (1, 0)]
        .iter()
        .map(|&(alpha, beta)| {
            let measured = rho.get(alpha, beta);
            let predicted = predict(model, rho, h0, alpha, beta);
            PairPrediction {
                alpha,
                beta,
                measured,
                predicted,
                relative_residual: relative(measured, predicted, floor),
            }
        })
        .collect();
    Ok(EthPrediction {
        pairs,
        diagonal_free,
        flat,
    })
}

/// Relative residual of the single-state version for every shell member.
pub fn qubit_eth_prediction_per_state(
    sd: &SpectralData,
    shell: &EnergyShell,
    model: &ProductModel,
    h0: &[f64],
) -> Result<Vec<f64>> {
    check_qubit(model, h0)?;
    shell
        .members
        .iter()
        .map(|&n| {
            let rho = rdm_single_state(sd, n)?;
            let floor = 1e-8
                * (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| rho.get(a, b).norm())
                    .fold(0.0, f64::max);
            Ok(relative(
                rho.get(0, 1),
                predict(model, &rho, h0, 0, 1),
                floor,
            ))
        })
        .collect()
}

/// `lambda H^I` applied to a product-basis vector.
pub fn apply_interaction(model: &ProductModel, x: &[c64]) -> Vec<c64> {
    let (d_s, d_e) = (model.d_s(), model.d_e());
    let mut out = vec![ZERO; d_s * d_e];
    for t in &model.terms {
        for b in 0..d_s {
            let xb = &x[b * d_e..(b + 1) * d_e];
            // y = E x_b
            let y: Vec<c64> = match &t.env {
                EnvMatrix::Identity => xb.to_vec(),
                EnvMatrix::Real(e) => (0..d_e)
                    .map(|i| (0..d_e).map(|j| xb[j] * e[(i, j)]).sum())
                    .collect(),
                EnvMatrix::Complex(e) => (0..d_e)
                    .map(|i| (0..d_e).map(|j| e[(i, j)] * xb[j]).sum())
                    .collect(),
            };
            for a in 0..d_s {
                let s = t.system[(a, b)] * model.coupling;
                if s == ZERO {
                    continue;
                }
                for i in 0..d_e {
                    out[a * d_e + i] += s * y[i];
                }
            }
        }
    }
    out
}

/// Largest singular value of `lambda H^I` by power iteration on its square.
pub fn interaction_norm(model: &ProductModel, max_iter: usize, tolerance: f64) -> f64 {
    let d = model.dim();
    let mut x: Vec<c64> = (0..d)
        .map(|k| c64::new(1.0 + 0.37 * ((k * 7919) % 101) as f64 / 101.0, 0.0))
        .collect();
    let normalize = |v: &mut Vec<c64>| {
        let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|z| *z /= n);
        }
        n
    };
    normalize(&mut x);
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let y = apply_interaction(model, &x);
        let mut z = apply_interaction(model, &y);
        let n = normalize(&mut z);
        let next = n.sqrt();
        x = z;
        if n == 0.0 {
            return 0.0;
        }
        if (next - estimate).abs() <= tolerance * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// `4 sqrt(||lambda H^I||_inf / Delta)`, a comparison number only.
pub fn d_reg(interaction_norm: f64, delta: f64) -> f64 {
    4.0 * (interaction_norm / delta).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{make_shell, rdm_microcanonical, DEFAULT_MIDDLE_FRACTION};
    use crate::linalg::{self, diagonal, kron, pauli, PauliAxis};
    use crate::model::{
        assemble_local, EnvOperatorSpec, EnvironmentSpec, InteractionTerm, IsingChain, ModelSpec,
    };

    fn setup(
        spec: &ModelSpec,
        e_s_frac: f64,
        delta: f64,
    ) -> (ProductModel, SpectralData, EnergyShell) {
        let m = ProductModel::new(spec).unwrap();
        let sd = SpectralData::coupled(&m).unwrap();
        let e_s = crate::ensemble::start_at_fraction(&sd.energies, e_s_frac, delta);
        let shell = make_shell(&sd.energies, e_s, delta, DEFAULT_MIDDLE_FRACTION).unwrap();
        (m, sd, shell)
    }

    #[test]
    fn zero_interaction_gives_zero_q() {
        let spec = ModelSpec::qubit_defect_chain(5, 1.0, PauliAxis::X, 0, 0.0);
        let (m, sd, shell) = setup(&spec, 0.5, 1.0);
        let q = q_values(&m, &sd, &shell).unwrap();
        assert!(q
            .pairs
            .iter()
            .all(|p| p.per_state.iter().all(|z| z.norm() == 0.0)));
        let rho = rdm_microcanonical(&sd, &shell).unwrap();
        assert!(verify_identity(&rho, &q).unwrap().max_residual < 1e-14);
    }

    #[test]
    fn identity_holds_for_chain() {
        for axis in [PauliAxis::X, PauliAxis::Y] {
            let spec = ModelSpec::qubit_defect_chain(6, 1.0, axis, 0, 0.5);
            let (m, sd, shell) = setup(&spec, 0.5, 1.5);
            let q = q_values(&m, &sd, &shell).unwrap();
            let rho = rdm_microcanonical(&sd, &shell).unwrap();
            assert!(verify_identity(&rho, &q).unwrap().max_residual < 1e-10);
            assert!(verify_identity_per_state(&sd, &q).unwrap() < 1e-10);
            assert!(q.hermiticity_residual() < 1e-10);
        }
    }

    /// Random Hermitian matrix with entries from a fixed LCG.
    fn hermitian(d: usize, seed: u64) -> Mat<c64> {
        let mut s = seed;
        let mut next = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = Mat::<c64>::zeros(d, d);
        for j in 0..d {
            for i in 0..=j {
                let z = if i == j {
                    c64::new(next(), 0.0)
                } else {
                    c64::new(next(), next())
                };
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        m
    }

    #[test]
    fn three_level_system_matches_dense_commutator() {
        let spec = ModelSpec::new(
            diagonal(&[0.0, 0.7, 1.6]),
            EnvironmentSpec::Chain(IsingChain::defect(3)),
            vec![
                InteractionTerm {
                    system_op: hermitian(3, 1),
                    env_op: EnvOperatorSpec::Pauli {
                        site: 1,
                        axis: PauliAxis::X,
                    },
                },
                InteractionTerm {
                    system_op: hermitian(3, 2),
                    env_op: EnvOperatorSpec::Explicit(hermitian(8, 3)),
                },
            ],
            0.4,
        );
        let m = ProductModel::new(&spec).unwrap();
        let sd = SpectralData::coupled(&m).unwrap();
        let shell = make_shell(
            &sd.energies,
            sd.energies[0],
            sd.energies[23] - sd.energies[0],
            1.0,
        )
        .unwrap();
        let q = q_values(&m, &sd, &shell).unwrap();

        // Dense route: H^I in the site basis, rotated into the product eigenbasis.
        let mut no_coupling = spec.clone();
        no_coupling.coupling = 0.0;
        let h_i = assemble_local(&spec).unwrap() - assemble_local(&no_coupling).unwrap();
        let u = kron(
            m.system_vectors.as_ref(),
            m.env_vectors.to_complex().as_ref(),
        );
        let h_i = linalg::conjugate_by(h_i.as_ref(), u.as_ref());
        let v = sd.vectors.to_complex();
        for p in &q.pairs {
            let mut a = Mat::<c64>::zeros(24, 24);
            for i in 0..8 {
                a[(p.beta * 8 + i, p.alpha * 8 + i)] = c64::new(1.0, 0.0);
            }
            let comm = &a * &h_i - &h_i * &a;
            for (k, &n) in shell.members.iter().enumerate() {
                let col = v.col(n);
                let expect: c64 = (0..24)
                    .flat_map(|r| (0..24).map(move |c| (r, c)))
                    .map(|(r, c)| col[r].conj() * comm[(r, c)] * col[c])
                    .sum();
                assert!((expect - p.per_state[k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn eth_trivial_operators() {
        let e: Vec<f64> = (0..200).map(|k| -1.0 + k as f64 * 0.01).collect();
        let id = eth_stats(&e, &EnvMatrix::Identity, -0.5, 0.5, 5).unwrap();
        assert_eq!(id.h0, 1.0);
        assert!(id.h_slope.abs() < 1e-12 && (id.h_at(0.3) - 1.0).abs() < 1e-12);
        assert_eq!(id.offdiag_rms, 0.0);
        let h = EnvMatrix::Real(linalg::real_part(diagonal(&e).as_ref()));
        let st = eth_stats(&e, &h, -0.5, 0.5, 5).unwrap();
        assert!((st.h_slope - 1.0).abs() < 1e-12 && st.h_intercept.abs() < 1e-12);
        assert_eq!(st.offdiag_rms, 0.0);
        assert!(matches!(
            eth_stats(&e, &h, 0.0, 0.1, 5),
            Err(Error::TooFewLevels { .. })
        ));
    }

    #[test]
    fn prediction_vanishes_without_offdiagonal_coupling() {
        let mut spec = ModelSpec::qubit_defect_chain(5, 1.0, PauliAxis::Z, 0, 0.3);
        spec.interaction_terms[0].system_op = pauli(PauliAxis::Z);
        let (m, sd, shell) = setup(&spec, 0.4, 1.0);
        let rho = rdm_microcanonical(&sd, &shell).unwrap();
        let pred = qubit_eth_prediction(&rho, &m, &[0.5], true).unwrap();
        assert!(!pred.diagonal_free);
        for p in &pred.pairs {
            assert_eq!(p.predicted, ZERO);
            assert!(p.measured.norm() < 1e-12);
        }
    }

    #[test]
    fn prediction_vanishes_for_equal_populations() {
        let spec = ModelSpec::qubit_defect_chain(4, 1.0, PauliAxis::Z, 0, 0.3);
        let m = ProductModel::new(&spec).unwrap();
        let rho = Rdm::new(diagonal(&[0.5, 0.5]), "");
        let pred = qubit_eth_prediction(&rho, &m, &[0.7], true).unwrap();
        assert!(pred.pairs.iter().all(|p| p.predicted == ZERO));
    }

    #[test]
    fn interaction_norm_of_product_terms() {
        let mut spec = ModelSpec::qubit_defect_chain(4, 1.0, PauliAxis::X, 0, 0.5);
        spec.interaction_terms[0].env_op = EnvOperatorSpec::Identity;
        let m = ProductModel::new(&spec).unwrap();
        assert!((interaction_norm(&m, 500, 1e-13) - 0.5).abs() < 1e-9);
        let spec = ModelSpec::qubit_defect_chain(4, 1.0, PauliAxis::Z, 2, 0.25);
        let m = ProductModel::new(&spec).unwrap();
        assert!((interaction_norm(&m, 500, 1e-13) - 0.25).abs() < 1e-9);
        assert!((d_reg(0.5, 1.0) / d_reg(0.5, 2.0) - 2f64.sqrt()).abs() < 1e-15);
    }
}
