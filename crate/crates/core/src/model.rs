//! Model specifications and Hamiltonian assembly.
//!
//! A [`ModelSpec`] describes `H = H^S (x) I + lambda sum_nu H^{IS,nu} (x) H^{IE,nu} + I (x) H^E`.
//! [`ProductModel`] diagonalizes the two marginal Hamiltonians once and keeps every
//! interaction factor in the marginal eigenbases, so the total Hamiltonian can be
//! assembled directly in the `|alpha i>` product basis.

use faer::{c64, Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::linalg::PauliAxis;
use crate::linalg::{
    self, complexify, eigh_complex, eigh_real, hermitian_deviation, is_real, min_gap, real_part,
    DenseHermitian, ZERO,
};
use crate::{Error, Result};

pub const HERMITIAN_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_DEGENERACY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_DIMENSION_CAP: usize = 16384;

/// Environment factor of one interaction term.
#[derive(Clone, Debug)]
pub enum EnvOperatorSpec {
    /// Single-site Pauli operator on the spin chain.
    Pauli { site: usize, axis: PauliAxis },
    /// Identity on the environment, used by the solvable `H^{IS} (x) I^E` case
    /// and by the reformulated `-O^S (x) I^E` term.
    Identity,
    /// Explicit `d_E x d_E` Hermitian matrix in the environment's site basis.
    Explicit(Mat<c64>),
}

#[derive(Clone, Debug)]
pub struct InteractionTerm {
    pub system_op: Mat<c64>,
    pub env_op: EnvOperatorSpec,
}

/// Uniform random offsets added to the longitudinal fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disorder {
    pub seed: u64,
    pub amplitude: f64,
}

/// Open Ising chain `sum_k J_k sz^k sz^{k+1} + sum_k (g_k sx^k + h_k sz^k)`.
///
/// Site 0 is the most significant bit of the basis index and `sz |0> = +|0>`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingChain {
    pub couplings: Vec<f64>,
    pub transverse: Vec<f64>,
    pub longitudinal: Vec<f64>,
    pub disorder: Option<Disorder>,
}

impl IsingChain {
    pub const J: f64 = 1.0;
    pub const G: f64 = 0.9045;
    pub const H: f64 = 0.8090;
    pub const DEFECT: f64 = 0.11;

    /// The default nonintegrable chain: uniform fields with a defect on site 0.
    pub fn defect(n_sites: usize) -> Self {
        let mut longitudinal = vec![Self::H; n_sites];
        if let Some(first) = longitudinal.first_mut() {
            *first += Self::DEFECT;
        }
        IsingChain {
            couplings: vec![Self::J; n_sites.saturating_sub(1)],
            transverse: vec![Self::G; n_sites],
            longitudinal,
            disorder: None,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.transverse.len()
    }

    pub fn dim(&self) -> usize {
        1usize << self.n_sites()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        if n == 0 || n > 24 {
            return Err(Error::InvalidParameter(format!(
                "chain length {n} must lie in 1..=24"
            )));
        }
        if self.longitudinal.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.longitudinal.len(),
            });
        }
        if self.couplings.len() != n - 1 {
            return Err(Error::DimensionMismatch {
                expected: n - 1,
                found: self.couplings.len(),
            });
        }
        Ok(())
    }

    /// Longitudinal fields after disorder is applied.
    pub fn effective_longitudinal(&self) -> Vec<f64> {
        let mut h = self.longitudinal.clone();
        if let Some(d) = self.disorder {
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
            for hk in &mut h {
                *hk += d.amplitude * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        h
    }

    /// Dense real Hamiltonian in the site basis.
    pub fn hamiltonian(&self) -> Mat<f64> {
        let n = self.n_sites();
        let d = self.dim();
        let h = self.effective_longitudinal();
        let z = |b: usize, k: usize| {
            if (b >> (n - 1 - k)) & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        };
        let mut m = Mat::<f64>::zeros(d, d);
        for b in 0..d {
            let mut diag = 0.0;
            for k in 0..n {
                diag += h[k] * z(b, k);
                if k + 1 < n {
                    diag += self.couplings[k] * z(b, k) * z(b, k + 1);
                }
            }
            m[(b, b)] = diag;
            for k in 0..n {
                m[(b ^ (1 << (n - 1 - k)), b)] += self.transverse[k];
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub enum EnvironmentSpec {
    Chain(IsingChain),
    /// Explicit Hermitian Hamiltonian; Pauli operators are unavailable.
    Explicit(Mat<c64>),
}

impl EnvironmentSpec {
    pub fn dim(&self) -> usize {
        match self {
            EnvironmentSpec::Chain(c) => c.dim(),
            EnvironmentSpec::Explicit(m) => m.nrows(),
        }
    }

    pub fn n_sites(&self) -> Option<usize> {
        match self {
            EnvironmentSpec::Chain(c) => Some(c.n_sites()),
            EnvironmentSpec::Explicit(_) => None,
        }
    }

    /// Dense Hamiltonian in the site (or given) basis.
    pub fn hamiltonian(&self) -> DenseHermitian {
        match self {
            EnvironmentSpec::Chain(c) => DenseHermitian::Real(c.hamiltonian()),
            EnvironmentSpec::Explicit(m) => DenseHermitian::from_complex(m.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub system_hamiltonian: Mat<c64>,
    pub environment: EnvironmentSpec,
    pub interaction_terms: Vec<InteractionTerm>,
    pub coupling: f64,
    pub label: String,
    /// Minimum relative level gap of `H^S`, in units of its spectral norm.
    pub degeneracy_tolerance: f64,
    pub dimension_cap: usize,
}

impl ModelSpec {
    pub fn new(
        system_hamiltonian: Mat<c64>,
        environment: EnvironmentSpec,
        interaction_terms: Vec<InteractionTerm>,
        coupling: f64,
    ) -> Self {
        ModelSpec {
            system_hamiltonian,
            environment,
            interaction_terms,
            coupling,
            label: String::new(),
            degeneracy_tolerance: DEFAULT_DEGENERACY_TOLERANCE,
            dimension_cap: DEFAULT_DIMENSION_CAP,
        }
    }

    /// Qubit with `H^S = diag(0, gap)` coupled through `sx (x) P^{site}` to the
    /// defect chain.
    pub fn qubit_defect_chain(
        n_sites: usize,
        gap: f64,
        axis: PauliAxis,
        site: usize,
        coupling: f64,
    ) -> Self {
        ModelSpec::new(
            linalg::diagonal(&[0.0, gap]),
            EnvironmentSpec::Chain(IsingChain::defect(n_sites)),
            vec![InteractionTerm {
                system_op: linalg::pauli(PauliAxis::X),
                env_op: EnvOperatorSpec::Pauli { site, axis },
            }],
            coupling,
        )
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_coupling(&self, coupling: f64) -> Self {
        let mut s = self.clone();
        s.coupling = coupling;
        s
    }

    pub fn d_s(&self) -> usize {
        self.system_hamiltonian.nrows()
    }

    pub fn d_e(&self) -> usize {
        self.environment.dim()
    }

    pub fn dim(&self) -> usize {
        self.d_s() * self.d_e()
    }

    /// Checks every structural invariant except degeneracy, which needs the spectrum.
    pub fn validate_structure(&self) -> Result<()> {
        let d_s = self.d_s();
        if d_s < 2 {
            return Err(Error::TooFewLevels {
                found: d_s,
                required: 2,
            });
        }
        if self.system_hamiltonian.ncols() != d_s {
            return Err(Error::DimensionMismatch {
                expected: d_s,
                found: self.system_hamiltonian.ncols(),
            });
        }
        let dev = hermitian_deviation(self.system_hamiltonian.as_ref());
        if dev > HERMITIAN_TOLERANCE {
            return Err(Error::NotHermitian { deviation: dev });
        }
        if !(self.coupling.is_finite() && self.coupling >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coupling must be finite and >= 0, got {}",
                self.coupling
            )));
        }
        match &self.environment {
            EnvironmentSpec::Chain(c) => c.validate()?,
            EnvironmentSpec::Explicit(m) => {
                if m.ncols() != m.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: m.nrows(),
                        found: m.ncols(),
                    });
                }
                let dev = hermitian_deviation(m.as_ref());
                if dev > HERMITIAN_TOLERANCE {
                    return Err(Error::NotHermitian { deviation: dev });
                }
            }
        }
        let dim = self.d_s().saturating_mul(self.d_e());
        if dim > self.dimension_cap {
            return Err(Error::DimensionCap {
                dim,
                cap: self.dimension_cap,
            });
        }
        let d_e = self.d_e();
        for term in &self.interaction_terms {
            if term.system_op.nrows() != d_s || term.system_op.ncols() != d_s {
                return Err(Error::DimensionMismatch {
                    expected: d_s,
                    found: term.system_op.nrows(),
                });
            }
            let dev = hermitian_deviation(term.system_op.as_ref());
            if dev > HERMITIAN_TOLERANCE {
                return Err(Error::NotHermitian { deviation: dev });
            }
            match &term.env_op {
                EnvOperatorSpec::Pauli { site, .. } => match self.environment.n_sites() {
                    Some(n) if *site < n => {}
                    Some(n) => {
                        return Err(Error::InvalidSite {
                            site: *site,
                            n_sites: n,
                        })
                    }
                    None => {
                        return Err(Error::InvalidSite {
                            site: *site,
                            n_sites: 0,
                        })
                    }
                },
                EnvOperatorSpec::Identity => {}
                EnvOperatorSpec::Explicit(m) => {
                    if m.nrows() != d_e || m.ncols() != d_e {
                        return Err(Error::DimensionMismatch {
                            expected: d_e,
                            found: m.nrows(),
                        });
                    }
                    let dev = hermitian_deviation(m.as_ref());
                    if dev > HERMITIAN_TOLERANCE {
                        return Err(Error::NotHermitian { deviation: dev });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dense single-site Pauli operator on an `n_sites` chain.
pub fn site_operator(n_sites: usize, site: usize, axis: PauliAxis) -> Mat<c64> {
    let d = 1usize << n_sites;
    let shift = n_sites - 1 - site;
    let p = linalg::pauli(axis);
    Mat::from_fn(d, d, |r, c| {
        if (r ^ c) & !(1 << shift) != 0 {
            ZERO
        } else {
            p[((r >> shift) & 1, (c >> shift) & 1)]
        }
    })
}

/// `P V` for a single-site Pauli `P`, with `V` given column-wise.
fn apply_site_real(n_sites: usize, site: usize, axis: PauliAxis, v: MatRef<'_, f64>) -> Mat<f64> {
    let bit = 1usize << (n_sites - 1 - site);
    match axis {
        PauliAxis::X => Mat::from_fn(v.nrows(), v.ncols(), |r, c| v[(r ^ bit, c)]),
        PauliAxis::Z => Mat::from_fn(v.nrows(), v.ncols(), |r, c| {
            if r & bit == 0 {
                v[(r, c)]
            } else {
                -v[(r, c)]
            }
        }),
        PauliAxis::Y => unreachable!("sy is not real"),
    }
}

fn apply_site_complex(
    n_sites: usize,
    site: usize,
    axis: PauliAxis,
    v: MatRef<'_, c64>,
) -> Mat<c64> {
    let bit = 1usize << (n_sites - 1 - site);
    let i = c64::new(0.0, 1.0);
    Mat::from_fn(v.nrows(), v.ncols(), |r, c| match axis {
        PauliAxis::X => v[(r ^ bit, c)],
        PauliAxis::Z => {
            if r & bit == 0 {
                v[(r, c)]
            } else {
                -v[(r, c)]
            }
        }
        // sy|0> = i|1>, sy|1> = -i|0>
        PauliAxis::Y => {
            if r & bit == 0 {
                -i * v[(r ^ bit, c)]
            } else {
                i * v[(r ^ bit, c)]
            }
        }
    })
}

/// An environment operator expressed in the eigenbasis of `H^E`.
#[derive(Clone, Debug)]
pub enum EnvMatrix {
    Identity,
    Real(Mat<f64>),
    Complex(Mat<c64>),
}

impl EnvMatrix {
    pub fn get(&self, i: usize, j: usize) -> c64 {
        match self {
            EnvMatrix::Identity => {
                if i == j {
                    linalg::ONE
                } else {
                    ZERO
                }
            }
            EnvMatrix::Real(m) => c64::new(m[(i, j)], 0.0),
            EnvMatrix::Complex(m) => m[(i, j)],
        }
    }

    pub fn is_real(&self) -> bool {
        !matches!(self, EnvMatrix::Complex(_))
    }

    pub fn to_complex(&self, d_e: usize) -> Mat<c64> {
        match self {
            EnvMatrix::Identity => linalg::identity(d_e),
            EnvMatrix::Real(m) => complexify(m.as_ref()),
            EnvMatrix::Complex(m) => m.clone(),
        }
    }

    /// Diagonal elements, which are real for a Hermitian operator.
    pub fn diagonal(&self, d_e: usize) -> Vec<f64> {
        (0..d_e).map(|i| self.get(i, i).re).collect()
    }
}

/// One interaction term with both factors in the marginal eigenbases.
#[derive(Clone, Debug)]
pub struct ProductTerm {
    pub system: Mat<c64>,
    pub env: EnvMatrix,
}

/// Eigen-representation of a model: marginal spectra plus transformed operators.
#[derive(Clone, Debug)]
pub struct ProductModel {
    pub label: String,
    pub coupling: f64,
    pub system_hamiltonian: Mat<c64>,
    pub system_energies: Vec<f64>,
    /// Columns are the eigenvectors `|alpha>` of `H^S` in the input basis.
    pub system_vectors: Mat<c64>,
    pub env_energies: Vec<f64>,
    /// Columns are the eigenvectors `|i>` of `H^E` in the site basis.
    pub env_vectors: DenseHermitian,
    pub terms: Vec<ProductTerm>,
}

fn check_nondegenerate(energies: &[f64], tolerance: f64) -> Result<()> {
    let norm = energies.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let gap = min_gap(energies);
    let tol = tolerance * norm;
    if !(gap > tol) {
        return Err(Error::Degenerate {
            gap,
            tolerance: tol,
        });
    }
    Ok(())
}

fn system_eigen(h: &Mat<c64>, tolerance: f64) -> Result<(Vec<f64>, Mat<c64>)> {
    let (e, u) = eigh_complex(h.as_ref())?;
    check_nondegenerate(&e, tolerance)?;
    Ok((e, u))
}

impl ProductModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate_structure()?;
        let (system_energies, system_vectors) =
            system_eigen(&spec.system_hamiltonian, spec.degeneracy_tolerance)?;
        let (env_energies, env_vectors) = match spec.environment.hamiltonian() {
            DenseHermitian::Real(h) => {
                let (e, v) = eigh_real(h.as_ref())?;
                (e, DenseHermitian::Real(v))
            }
            DenseHermitian::Complex(h) => {
                let (e, v) = eigh_complex(h.as_ref())?;
                (e, DenseHermitian::Complex(v))
            }
        };
        let mut model = ProductModel {
            label: spec.label.clone(),
            coupling: spec.coupling,
            system_hamiltonian: spec.system_hamiltonian.clone(),
            system_energies,
            system_vectors,
            env_energies,
            env_vectors,
            terms: Vec::with_capacity(spec.interaction_terms.len()),
        };
        let n_sites = spec.environment.n_sites();
        for term in &spec.interaction_terms {
            let env = model.env_to_eigenbasis(&term.env_op, n_sites);
            let system = model.system_to_eigenbasis(term.system_op.as_ref());
            model.terms.push(ProductTerm { system, env });
        }
        Ok(model)
    }

    /// Same model with another coupling, reusing both spectra.
    pub fn with_coupling(&self, coupling: f64) -> Self {
        ProductModel {
            coupling,
            ..self.clone()
        }
    }

    pub fn d_s(&self) -> usize {
        self.system_energies.len()
    }

    pub fn d_e(&self) -> usize {
        self.env_energies.len()
    }

    pub fn dim(&self) -> usize {
        self.d_s() * self.d_e()
    }

    /// Row of `|alpha i>` in product-basis vectors.
    pub fn row(&self, alpha: usize, i: usize) -> usize {
        alpha * self.d_e() + i
    }

    /// Inverse of [`ProductModel::row`].
    pub fn split(&self, row: usize) -> (usize, usize) {
        (row / self.d_e(), row % self.d_e())
    }

    /// `U_S^dagger A U_S` with exact zero imaginary parts preserved for real input.
    pub fn system_to_eigenbasis(&self, a: MatRef<'_, c64>) -> Mat<c64> {
        let out = linalg::conjugate_by(a, self.system_vectors.as_ref());
        if is_real(self.system_vectors.as_ref()) && is_real(a) {
            complexify(real_part(out.as_ref()).as_ref())
        } else {
            out
        }
    }

    fn env_to_eigenbasis(&self, op: &EnvOperatorSpec, n_sites: Option<usize>) -> EnvMatrix {
        match (op, &self.env_vectors) {
            (EnvOperatorSpec::Identity, _) => EnvMatrix::Identity,
            (EnvOperatorSpec::Pauli { site, axis }, DenseHermitian::Real(v))
                if *axis != PauliAxis::Y =>
            {
                let n = n_sites.expect("validated chain");
                let pv = apply_site_real(n, *site, *axis, v.as_ref());
                EnvMatrix::Real(v.transpose() * pv)
            }
            (EnvOperatorSpec::Pauli { site, axis }, vecs) => {
                let n = n_sites.expect("validated chain");
                let v = vecs.to_complex();
                let pv = apply_site_complex(n, *site, *axis, v.as_ref());
                let out = v.adjoint() * pv;
                if is_real(out.as_ref()) {
                    EnvMatrix::Real(real_part(out.as_ref()))
                } else {
                    EnvMatrix::Complex(out)
                }
            }
            (EnvOperatorSpec::Explicit(m), DenseHermitian::Real(v)) if is_real(m.as_ref()) => {
                let mr = real_part(m.as_ref());
                EnvMatrix::Real(v.transpose() * mr * v)
            }
            (EnvOperatorSpec::Explicit(m), vecs) => {
                let v = vecs.to_complex();
                EnvMatrix::Complex(linalg::conjugate_by(m.as_ref(), v.as_ref()))
            }
        }
    }

    /// True when the assembled product-basis Hamiltonian has no imaginary part.
    pub fn is_real(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.env.is_real() && is_real(t.system.as_ref()))
    }

    /// Uncoupled energies `e_alpha + e_i` in row order.
    pub fn uncoupled_diagonal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for &ea in &self.system_energies {
            for &ei in &self.env_energies {
                out.push(ea + ei);
            }
        }
        out
    }

    /// `<alpha i| lambda H^I |beta j>`.
    pub fn interaction_block(&self, alpha: usize, beta: usize, i: usize, j: usize) -> c64 {
        let mut acc = ZERO;
        for t in &self.terms {
            let s = t.system[(alpha, beta)];
            if s != ZERO {
                acc += s * t.env.get(i, j);
            }
        }
        acc * self.coupling
    }

    /// `lambda H^I` between two product-basis rows.
    pub fn interaction_element(&self, row: usize, col: usize) -> c64 {
        let d_e = self.d_e();
        self.interaction_block(row / d_e, col / d_e, row % d_e, col % d_e)
    }

    /// `H` in the product eigenbasis.
    pub fn assemble_total(&self) -> DenseHermitian {
        self.assemble(true)
    }

    /// `H^0` in the product eigenbasis; diagonal by construction.
    pub fn assemble_uncoupled(&self) -> DenseHermitian {
        self.assemble(false)
    }

    /// `lambda H^I` alone in the product eigenbasis.
    pub fn assemble_interaction(&self) -> DenseHermitian {
        let (d, d_e) = (self.dim(), self.d_e());
        let f = |r: usize, c: usize| self.interaction_block(r / d_e, c / d_e, r % d_e, c % d_e);
        if self.is_real() {
            DenseHermitian::Real(Mat::from_fn(d, d, |r, c| f(r, c).re))
        } else {
            DenseHermitian::Complex(Mat::from_fn(d, d, f))
        }
    }

    fn assemble(&self, coupled: bool) -> DenseHermitian {
        let (d, d_e) = (self.dim(), self.d_e());
        let diag = self.uncoupled_diagonal();
        let with_coupling = coupled && !self.terms.is_empty();
        if !with_coupling || self.is_real() {
            let mut m = Mat::<f64>::zeros(d, d);
            if with_coupling {
                self.fill_real_interaction(&mut m);
            }
            for (r, &e) in diag.iter().enumerate() {
                m[(r, r)] += e;
            }
            return DenseHermitian::Real(m);
        }
        let mut m = Mat::<c64>::zeros(d, d);
        for beta in 0..self.d_s() {
            for alpha in 0..self.d_s() {
                for t in &self.terms {
                    let s = t.system[(alpha, beta)] * self.coupling;
                    if s == ZERO {
                        continue;
                    }
                    for j in 0..d_e {
                        for i in 0..d_e {
                            m[(alpha * d_e + i, beta * d_e + j)] += s * t.env.get(i, j);
                        }
                    }
                }
            }
        }
        for (r, &e) in diag.iter().enumerate() {
            m[(r, r)] += c64::new(e, 0.0);
        }
        DenseHermitian::Complex(m)
    }

    fn fill_real_interaction(&self, m: &mut Mat<f64>) {
        let d_e = self.d_e();
        for beta in 0..self.d_s() {
            for alpha in 0..self.d_s() {
                for t in &self.terms {
                    let s = t.system[(alpha, beta)].re * self.coupling;
                    if s == 0.0 {
                        continue;
                    }
                    match &t.env {
                        EnvMatrix::Identity => {
                            for i in 0..d_e {
                                m[(alpha * d_e + i, beta * d_e + i)] += s;
                            }
                        }
                        EnvMatrix::Real(e) => {
                            for j in 0..d_e {
                                for i in 0..d_e {
                                    m[(alpha * d_e + i, beta * d_e + j)] += s * e[(i, j)];
                                }
                            }
                        }
                        EnvMatrix::Complex(_) => unreachable!("real assembly with complex term"),
                    }
                }
            }
        }
    }

    /// Rebuilds the model around a reformulation, reusing the environment spectrum.
    pub fn reformulated(
        &self,
        reformulation: &Reformulation,
        degeneracy_tolerance: f64,
    ) -> Result<Self> {
        let (system_energies, system_vectors) =
            system_eigen(&reformulation.renormalized_system, degeneracy_tolerance)?;
        let mut model = ProductModel {
            label: self.label.clone(),
            coupling: 1.0,
            system_hamiltonian: reformulation.renormalized_system.clone(),
            system_energies,
            system_vectors,
            env_energies: self.env_energies.clone(),
            env_vectors: self.env_vectors.clone(),
            terms: Vec::with_capacity(self.terms.len() + 1),
        };
        for t in &self.terms {
            // Back to the input basis, then into the renormalized eigenbasis.
            let raw = &self.system_vectors * &t.system * self.system_vectors.adjoint();
            let scaled = Mat::from_fn(raw.nrows(), raw.ncols(), |r, c| raw[(r, c)] * self.coupling);
            let system = model.system_to_eigenbasis(scaled.as_ref());
            model.terms.push(ProductTerm {
                system,
                env: t.env.clone(),
            });
        }
        let neg_o = Mat::from_fn(
            reformulation.o_s.nrows(),
            reformulation.o_s.ncols(),
            |r, c| -reformulation.o_s[(r, c)],
        );
        let system = model.system_to_eigenbasis(neg_o.as_ref());
        model.terms.push(ProductTerm {
            system,
            env: EnvMatrix::Identity,
        });
        Ok(model)
    }

    /// `<alpha|alpha~>`: columns are the renormalized eigenvectors in this model's
    /// system eigenbasis.
    pub fn system_overlap(&self, other: &ProductModel) -> Mat<c64> {
        self.system_vectors.adjoint() * &other.system_vectors
    }
}

/// `H^S (x) I + lambda sum H^{IS} (x) H^{IE} + I (x) H^E` in the site basis, built
/// from Kronecker products. Used as an independent oracle for the eigenbasis route.
pub fn assemble_local(spec: &ModelSpec) -> Result<Mat<c64>> {
    spec.validate_structure()?;
    let d_s = spec.d_s();
    let d_e = spec.d_e();
    let h_e = spec.environment.hamiltonian().to_complex();
    let mut h = linalg::kron(
        spec.system_hamiltonian.as_ref(),
        linalg::identity(d_e).as_ref(),
    );
    h += linalg::kron(linalg::identity(d_s).as_ref(), h_e.as_ref());
    for term in &spec.interaction_terms {
        let env = match &term.env_op {
            EnvOperatorSpec::Identity => linalg::identity(d_e),
            EnvOperatorSpec::Explicit(m) => m.clone(),
            EnvOperatorSpec::Pauli { site, axis } => site_operator(
                spec.environment.n_sites().expect("validated chain"),
                *site,
                *axis,
            ),
        };
        let k = linalg::kron(term.system_op.as_ref(), env.as_ref());
        h += Mat::from_fn(k.nrows(), k.ncols(), |r, c| k[(r, c)] * spec.coupling);
    }
    Ok(h)
}

/// Convenience wrapper: validated model, then `H` in the product eigenbasis.
pub fn assemble_total(spec: &ModelSpec) -> Result<DenseHermitian> {
    Ok(ProductModel::new(spec)?.assemble_total())
}

pub fn assemble_uncoupled(spec: &ModelSpec) -> Result<DenseHermitian> {
    Ok(ProductModel::new(spec)?.assemble_uncoupled())
}

/// `H = H~^S + H~^I + H^E` with `H~^S = H^S + O^S` and `H~^I = H^I - O^S (x) I^E`.
#[derive(Clone, Debug)]
pub struct Reformulation {
    pub o_s: Mat<c64>,
    pub renormalized_system: Mat<c64>,
    /// Terms with the original coupling folded into their system factors.
    pub renormalized_interaction_terms: Vec<InteractionTerm>,
}

impl Reformulation {
    /// The reformulated model as a spec with unit coupling.
    pub fn to_spec(&self, original: &ModelSpec) -> ModelSpec {
        ModelSpec {
            system_hamiltonian: self.renormalized_system.clone(),
            environment: original.environment.clone(),
            interaction_terms: self.renormalized_interaction_terms.clone(),
            coupling: 1.0,
            label: original.label.clone(),
            degeneracy_tolerance: original.degeneracy_tolerance,
            dimension_cap: original.dimension_cap,
        }
    }
}

pub fn reformulate(spec: &ModelSpec, o_s: &Mat<c64>) -> Result<Reformulation> {
    let d_s = spec.d_s();
    if o_s.nrows() != d_s || o_s.ncols() != d_s {
        return Err(Error::DimensionMismatch {
            expected: d_s,
            found: o_s.nrows(),
        });
    }
    let dev = hermitian_deviation(o_s.as_ref());
    if dev > HERMITIAN_TOLERANCE {
        return Err(Error::NotHermitian { deviation: dev });
    }
    let renormalized_system = &spec.system_hamiltonian + o_s;
    let e = linalg::eigvalsh(renormalized_system.as_ref())?;
    check_nondegenerate(&e, spec.degeneracy_tolerance)?;
    let lam = spec.coupling;
    let mut terms: Vec<InteractionTerm> = spec
        .interaction_terms
        .iter()
        .map(|t| InteractionTerm {
            system_op: Mat::from_fn(d_s, d_s, |r, c| t.system_op[(r, c)] * lam),
            env_op: t.env_op.clone(),
        })
        .collect();
    terms.push(InteractionTerm {
        system_op: Mat::from_fn(d_s, d_s, |r, c| -o_s[(r, c)]),
        env_op: EnvOperatorSpec::Identity,
    });
    Ok(Reformulation {
        o_s: o_s.clone(),
        renormalized_system,
        renormalized_interaction_terms: terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_real_rows, max_abs_diff, pauli};

    fn toy(coupling: f64) -> ModelSpec {
        ModelSpec::new(
            linalg::diagonal(&[0.0, 1.0]),
            EnvironmentSpec::Explicit(linalg::diagonal(&[0.0, 2.0])),
            vec![InteractionTerm {
                system_op: pauli(PauliAxis::X),
                env_op: EnvOperatorSpec::Explicit(pauli(PauliAxis::X)),
            }],
            coupling,
        )
    }

    #[test]
    fn four_by_four_example() {
        let h = assemble_total(&toy(1.0)).unwrap().to_complex();
        let expected = from_real_rows(&[
            &[0.0, 0.0, 0.0, 1.0],
            &[0.0, 2.0, 1.0, 0.0],
            &[0.0, 1.0, 1.0, 0.0],
            &[1.0, 0.0, 0.0, 3.0],
        ]);
        assert_eq!(max_abs_diff(h.as_ref(), expected.as_ref()), 0.0);
        let h0 = assemble_uncoupled(&toy(1.0)).unwrap().to_complex();
        assert_eq!(
            max_abs_diff(
                h0.as_ref(),
                linalg::diagonal(&[0.0, 2.0, 1.0, 3.0]).as_ref()
            ),
            0.0
        );
    }

    #[test]
    fn zero_coupling_matches_uncoupled() {
        let spec = ModelSpec::qubit_defect_chain(4, 1.0, PauliAxis::X, 0, 0.0);
        let m = ProductModel::new(&spec).unwrap();
        let a = m.assemble_total().to_complex();
        let b = m.assemble_uncoupled().to_complex();
        assert_eq!(max_abs_diff(a.as_ref(), b.as_ref()), 0.0);
    }

    #[test]
    fn eigenbasis_assembly_matches_kron_oracle() {
        for axis in [PauliAxis::X, PauliAxis::Y, PauliAxis::Z] {
            let spec = ModelSpec::qubit_defect_chain(4, 0.7, axis, 2, 0.3);
            let m = ProductModel::new(&spec).unwrap();
            let h = m.assemble_total().to_complex();
            let local = assemble_local(&spec).unwrap();
            let u = linalg::kron(
                m.system_vectors.as_ref(),
                m.env_vectors.to_complex().as_ref(),
            );
            let rotated = linalg::conjugate_by(local.as_ref(), u.as_ref());
            assert!(max_abs_diff(h.as_ref(), rotated.as_ref()) < 1e-12);
            assert!(hermitian_deviation(h.as_ref()) < 1e-12);
        }
    }

    #[test]
    fn chain_hamiltonian_two_sites() {
        let chain = IsingChain {
            couplings: vec![1.0],
            transverse: vec![0.5, 0.25],
            longitudinal: vec![0.1, 0.2],
            disorder: None,
        };
        let h = chain.hamiltonian();
        // |00>: J + h0 + h1
        assert!((h[(0, 0)] - 1.3).abs() < 1e-15);
        // |01>: -J + h0 - h1
        assert!((h[(1, 1)] - (-1.1)).abs() < 1e-15);
        // site 0 flips the most significant bit
        assert_eq!(h[(2, 0)], 0.5);
        assert_eq!(h[(1, 0)], 0.25);
    }

    #[test]
    fn errors_on_bad_specs() {
        let mut spec = ModelSpec::qubit_defect_chain(3, 1.0, PauliAxis::X, 3, 0.1);
        assert_eq!(
            ProductModel::new(&spec).unwrap_err(),
            Error::InvalidSite {
                site: 3,
                n_sites: 3
            }
        );
        spec.interaction_terms[0].env_op = EnvOperatorSpec::Pauli {
            site: 0,
            axis: PauliAxis::X,
        };
        spec.dimension_cap = 8;
        assert!(matches!(
            ProductModel::new(&spec),
            Err(Error::DimensionCap { .. })
        ));
        let spec = ModelSpec::qubit_defect_chain(3, 0.0, PauliAxis::X, 0, 0.1);
        assert!(matches!(
            ProductModel::new(&spec),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn reformulation_preserves_total() {
        let spec = ModelSpec::qubit_defect_chain(3, 1.0, PauliAxis::Z, 0, 0.4);
        let o = from_real_rows(&[&[0.2, 0.1], &[0.1, -0.3]]);
        let r = reformulate(&spec, &o).unwrap();
        let a = assemble_local(&spec).unwrap();
        let b = assemble_local(&r.to_spec(&spec)).unwrap();
        assert!(max_abs_diff(a.as_ref(), b.as_ref()) < 1e-12);

        let r0 = reformulate(&spec, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(
            max_abs_diff(
                r0.renormalized_system.as_ref(),
                spec.system_hamiltonian.as_ref()
            ),
            0.0
        );
    }

    #[test]
    fn qubit_renormalized_layout() {
        let (gap, h0, lam) = (1.0, 0.37, 0.3);
        let spec = ModelSpec::qubit_defect_chain(3, gap, PauliAxis::Z, 0, lam);
        let o = Mat::from_fn(2, 2, |r, c| pauli(PauliAxis::X)[(r, c)] * (h0 * lam));
        let r = reformulate(&spec, &o).unwrap();
        let expected = from_real_rows(&[&[0.0, lam * h0], &[lam * h0, gap]]);
        assert_eq!(
            max_abs_diff(r.renormalized_system.as_ref(), expected.as_ref()),
            0.0
        );
    }

    #[test]
    fn reformulated_model_reassembles_same_operator() {
        let spec = ModelSpec::qubit_defect_chain(4, 1.0, PauliAxis::X, 0, 0.5);
        let m = ProductModel::new(&spec).unwrap();
        let o = Mat::from_fn(2, 2, |r, c| pauli(PauliAxis::X)[(r, c)] * 0.2);
        let rf = reformulate(&spec, &o).unwrap();
        let mt = m.reformulated(&rf, spec.degeneracy_tolerance).unwrap();
        let h = m.assemble_total().to_complex();
        let ht = mt.assemble_total().to_complex();
        let w = linalg::kron(
            m.system_overlap(&mt).as_ref(),
            linalg::identity(m.d_e()).as_ref(),
        );
        let back = &w * ht * w.adjoint();
        assert!(max_abs_diff(h.as_ref(), back.as_ref()) < 1e-12);
    }
}
