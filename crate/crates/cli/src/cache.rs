//! On-disk cache of coupled eigendecompositions.
//!
//! Each entry is `<key>.bin` (little-endian f64: energies, then eigenvectors
//! column-major, complex entries as interleaved re/im) plus a `<key>.json`
//! sidecar. The key is a SHA-256 of the Hamiltonian's product-basis content.

use std::io;
use std::path::{Path, PathBuf};

use rdm_lab_core::model::{EnvMatrix, ProductModel};
use rdm_lab_core::spectral::{Eigenvectors, ProductBasis, SpectralData};
use rdm_lab_core::{c64, Mat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::sha256_hex;

const FORMAT: &str = "rdm-lab-eigen-v1";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Sidecar {
    format: String,
    key: String,
    dim: usize,
    d_s: usize,
    d_e: usize,
    real: bool,
    bin_sha256: String,
}

pub struct EigenCache {
    dir: PathBuf,
}

/// Content hash of `H = diag(e_S) (x) I + I (x) diag(e_E) + lambda sum S (x) E`.
pub fn model_key(model: &ProductModel) -> String {
    let mut h = Sha256::new();
    h.update(FORMAT.as_bytes());
    let mut put = |x: f64| h.update(x.to_le_bytes());
    put(model.d_s() as f64);
    put(model.d_e() as f64);
    put(model.coupling);
    model.system_energies.iter().for_each(|&e| put(e));
    model.env_energies.iter().for_each(|&e| put(e));
    let d_e = model.d_e();
    for t in &model.terms {
        let s = &t.system;
        for c in 0..s.ncols() {
            for r in 0..s.nrows() {
                put(s[(r, c)].re);
                put(s[(r, c)].im);
            }
        }
        match &t.env {
            EnvMatrix::Identity => put(-1.0),
            EnvMatrix::Real(m) => {
                put(-2.0);
                (0..d_e).for_each(|c| m.col_as_slice(c).iter().for_each(|&x| put(x)));
            }
            EnvMatrix::Complex(m) => {
                put(-3.0);
                (0..d_e).for_each(|c| {
                    m.col_as_slice(c).iter().for_each(|x| {
                        put(x.re);
                        put(x.im)
                    })
                });
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn push(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn encode(sd: &SpectralData) -> Vec<u8> {
    let d = sd.dim();
    let per = if sd.vectors.is_real() { 1 } else { 2 };
    let mut buf = Vec::with_capacity(8 * d * (1 + per * d));
    sd.energies.iter().for_each(|&e| push(&mut buf, e));
    match &sd.vectors {
        Eigenvectors::Real(v) => {
            (0..d).for_each(|c| v.col_as_slice(c).iter().for_each(|&x| push(&mut buf, x)))
        }
        Eigenvectors::Complex(v) => (0..d).for_each(|c| {
            v.col_as_slice(c).iter().for_each(|x| {
                push(&mut buf, x.re);
                push(&mut buf, x.im)
            })
        }),
    }
    buf
}

fn decode(bytes: &[u8], side: &Sidecar, basis: ProductBasis) -> Option<SpectralData> {
    let d = side.dim;
    let per = if side.real { 1 } else { 2 };
    if bytes.len() != 8 * d * (1 + per * d) {
        return None;
    }
    let mut it = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let energies: Vec<f64> = it.by_ref().take(d).collect();
    let vectors = if side.real {
        let mut v = Mat::<f64>::zeros(d, d);
        for c in 0..d {
            for (dst, x) in v.col_as_slice_mut(c).iter_mut().zip(it.by_ref()) {
                *dst = x;
            }
        }
        Eigenvectors::Real(v)
    } else {
        let mut v = Mat::<c64>::zeros(d, d);
        for c in 0..d {
            for dst in v.col_as_slice_mut(c).iter_mut() {
                *dst = c64::new(it.next()?, it.next()?);
            }
        }
        Eigenvectors::Complex(v)
    };
    SpectralData::from_parts(energies, vectors, basis).ok()
}

impl EigenCache {
    pub fn open(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(EigenCache {
            dir: dir.to_path_buf(),
        })
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{key}.bin")),
            self.dir.join(format!("{key}.json")),
        )
    }

    /// Cached eigendata for `model`, or `None` on a miss or a corrupt entry.
    pub fn load(&self, model: &ProductModel) -> Option<SpectralData> {
        let key = model_key(model);
        let (bin, json) = self.paths(&key);
        let side: Sidecar = serde_json::from_slice(&std::fs::read(json).ok()?).ok()?;
        if side.format != FORMAT
            || side.key != key
            || side.d_s != model.d_s()
            || side.d_e != model.d_e()
        {
            return None;
        }
        let bytes = std::fs::read(bin).ok()?;
        if sha256_hex(&bytes) != side.bin_sha256 {
            return None;
        }
        decode(
            &bytes,
            &side,
            ProductBasis::new(&model.system_energies, &model.env_energies),
        )
    }

    pub fn store(&self, model: &ProductModel, sd: &SpectralData) -> io::Result<()> {
        let key = model_key(model);
        let (bin, json) = self.paths(&key);
        let bytes = encode(sd);
        let side = Sidecar {
            format: FORMAT.into(),
            key,
            dim: sd.dim(),
            d_s: sd.d_s(),
            d_e: sd.d_e(),
            real: sd.vectors.is_real(),
            bin_sha256: sha256_hex(&bytes),
        };
        std::fs::write(&bin, &bytes)?;
        std::fs::write(
            &json,
            serde_json::to_vec_pretty(&side).map_err(io::Error::other)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rdm_lab_core::linalg::PauliAxis;
    use rdm_lab_core::model::ModelSpec;

    fn model(lambda: f64, axis: PauliAxis) -> ProductModel {
        ProductModel::new(&ModelSpec::qubit_defect_chain(3, 1.0, axis, 1, lambda)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EigenCache::open(dir.path()).unwrap();
        for axis in [PauliAxis::X, PauliAxis::Y] {
            let m = model(0.3, axis);
            assert!(cache.load(&m).is_none());
            let sd = SpectralData::coupled(&m).unwrap();
            cache.store(&m, &sd).unwrap();
            let back = cache.load(&m).unwrap();
            assert_eq!(back.energies, sd.energies);
            assert_eq!(back.vectors.is_real(), sd.vectors.is_real());
            for n in 0..sd.dim() {
                assert_eq!(back.vectors.column(n), sd.vectors.column(n));
            }
        }
    }

    #[test]
    fn key_tracks_hamiltonian_content() {
        assert_eq!(
            model_key(&model(0.3, PauliAxis::X)),
            model_key(&model(0.3, PauliAxis::X))
        );
        assert_ne!(
            model_key(&model(0.3, PauliAxis::X)),
            model_key(&model(0.31, PauliAxis::X))
        );
        assert_ne!(
            model_key(&model(0.3, PauliAxis::X)),
            model_key(&model(0.3, PauliAxis::Z))
        );
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EigenCache::open(dir.path()).unwrap();
        let m = model(0.2, PauliAxis::X);
        cache
            .store(&m, &SpectralData::coupled(&m).unwrap())
            .unwrap();
        let bin = dir.path().join(format!("{}.bin", model_key(&m)));
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(cache.load(&m).is_none());
    }
}
