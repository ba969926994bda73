//! Dense linear-algebra helpers shared by the analysis modules.
//!
//! Eigendecompositions go through faer. Real symmetric input takes a real
//! path, which halves memory and runs several times faster than the complex
//! solver on the same dimension.

use faer::{c64, Mat, MatRef, Side};

use crate::{Error, Result};

pub const ZERO: c64 = c64 { re: 0.0, im: 0.0 };
pub const ONE: c64 = c64 { re: 1.0, im: 0.0 };

/// A dense Hermitian matrix stored as real symmetric whenever possible.
#[derive(Clone, Debug)]
pub enum DenseHermitian {
    Real(Mat<f64>),
    Complex(Mat<c64>),
}

impl DenseHermitian {
    /// Wraps a complex matrix, demoting it to real storage when every
    /// imaginary part is exactly zero.
    pub fn from_complex(m: Mat<c64>) -> Self {
        if is_real(m.as_ref()) {
            DenseHermitian::Real(real_part(m.as_ref()))
        } else {
            DenseHermitian::Complex(m)
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DenseHermitian::Real(m) => m.nrows(),
            DenseHermitian::Complex(m) => m.nrows(),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, DenseHermitian::Real(_))
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        match self {
            DenseHermitian::Real(m) => c64::new(m[(i, j)], 0.0),
            DenseHermitian::Complex(m) => m[(i, j)],
        }
    }

    pub fn to_complex(&self) -> Mat<c64> {
        match self {
            DenseHermitian::Real(m) => complexify(m.as_ref()),
            DenseHermitian::Complex(m) => m.clone(),
        }
    }

    /// max |H - H^dagger| over all elements.
    pub fn hermitian_deviation(&self) -> f64 {
        match self {
            DenseHermitian::Real(m) => {
                let n = m.nrows();
                let mut dev = 0.0f64;
                for j in 0..n {
                    for i in 0..j {
                        dev = dev.max((m[(i, j)] - m[(j, i)]).abs());
                    }
                }
                dev
            }
            DenseHermitian::Complex(m) => hermitian_deviation(m.as_ref()),
        }
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> f64 {
        let n = self.dim();
        let mut best = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                best = best.max(self.get(i, j).norm());
            }
        }
        best
    }
}

pub fn is_real(m: MatRef<'_, c64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].im == 0.0))
}

pub fn real_part(m: MatRef<'_, c64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].re)
}

pub fn complexify(m: MatRef<'_, f64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| c64::new(m[(i, j)], 0.0))
}

pub fn hermitian_deviation(m: MatRef<'_, c64>) -> f64 {
    let n = m.nrows();
    if m.ncols() != n {
        return f64::INFINITY;
    }
    let mut dev = 0.0f64;
    for j in 0..n {
        for i in 0..=j {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub fn max_abs_diff(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            best = best.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    best
}

pub fn max_abs(m: MatRef<'_, c64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            best = best.max(m[(i, j)].norm());
        }
    }
    best
}

pub fn trace(m: MatRef<'_, c64>) -> c64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

pub fn identity(n: usize) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| if i == j { ONE } else { ZERO })
}

pub fn diagonal(values: &[f64]) -> Mat<c64> {
    let n = values.len();
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            c64::new(values[i], 0.0)
        } else {
            ZERO
        }
    })
}

/// Kronecker product with the left factor as the slow index.
pub fn kron(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> Mat<c64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    Mat::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// `U^dagger M U`.
pub fn conjugate_by(m: MatRef<'_, c64>, u: MatRef<'_, c64>) -> Mat<c64> {
    u.adjoint() * m * u
}

/// Smallest gap between consecutive entries of an ascending list.
pub fn min_gap(sorted: &[f64]) -> f64 {
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

fn order_ascending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Full eigendecomposition of a real symmetric matrix.
///
/// Eigenvalues ascend. Each eigenvector is normalized so that its
/// largest-magnitude component (first one on ties) is positive.
pub fn eigh_real(m: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m.ncols(),
        });
    }
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::EigenFailure)?;
    let raw: Vec<f64> = (0..n).map(|k| evd.S()[k]).collect();
    let order = order_ascending(&raw);
    let u = evd.U();
    let values = order.iter().map(|&k| raw[k]).collect();
    let mut vectors = Mat::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.col(src);
        let mut lead = 0;
        for r in 1..n {
            if col[r].abs() > col[lead].abs() {
                lead = r;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[(r, dst)] = sign * col[r];
        }
    }
    Ok((values, vectors))
}

/// Full eigendecomposition of a complex Hermitian matrix; same conventions as
/// [`eigh_real`], with the leading component made real positive.
pub fn eigh_complex(m: MatRef<'_, c64>) -> Result<(Vec<f64>, Mat<c64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m.ncols(),
        });
    }
    if is_real(m) {
        let (values, vectors) = eigh_real(real_part(m).as_ref())?;
        return Ok((values, complexify(vectors.as_ref())));
    }
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::EigenFailure)?;
    let raw: Vec<f64> = (0..n).map(|k| evd.S()[k].re).collect();
    let order = order_ascending(&raw);
    let u = evd.U();
    let values = order.iter().map(|&k| raw[k]).collect();
    let mut vectors = Mat::<c64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.col(src);
        let mut lead = 0;
        for r in 1..n {
            if col[r].norm() > col[lead].norm() {
                lead = r;
            }
        }
        let phase = if col[lead].norm() > 0.0 {
            col[lead].conj() / col[lead].norm()
        } else {
            ONE
        };
        for r in 0..n {
            vectors[(r, dst)] = col[r] * phase;
        }
    }
    Ok((values, vectors))
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(m: MatRef<'_, c64>) -> Result<Vec<f64>> {
    let mut values: Vec<f64> = if is_real(m) {
        real_part(m)
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|_| Error::EigenFailure)?
    } else {
        m.self_adjoint_eigenvalues(Side::Lower)
            .map_err(|_| Error::EigenFailure)?
    };
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Largest |eigenvalue| of a Hermitian matrix, i.e. its largest singular value.
pub fn spectral_norm_hermitian(m: MatRef<'_, c64>) -> Result<f64> {
    let values = eigvalsh(m)?;
    Ok(values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PauliAxis {
    X,
    Y,
    Z,
}

pub fn pauli(axis: PauliAxis) -> Mat<c64> {
    let z = ZERO;
    let one = ONE;
    let i = c64::new(0.0, 1.0);
    let entries = match axis {
        PauliAxis::X => [[z, one], [one, z]],
        PauliAxis::Y => [[z, -i], [i, z]],
        PauliAxis::Z => [[one, z], [z, -one]],
    };
    Mat::from_fn(2, 2, |r, c| entries[r][c])
}

/// Builds a complex matrix from nested row slices of real entries.
pub fn from_real_rows(rows: &[&[f64]]) -> Mat<c64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    Mat::from_fn(n, m, |i, j| c64::new(rows[i][j], 0.0))
}
