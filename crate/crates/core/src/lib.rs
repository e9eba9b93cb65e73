//! Sensor scheduling for a linear-Gaussian plant observed over a lossy,
//! Markov-modulated network.
//!
//! The crate is organised bottom-up:
//!
//! - [`psd`]: symmetric PSD matrices and the Loewner order.
//! - [`model`]: plant and network data with assumption checks.
//! - [`riccati`]: control-side Riccati recursions and the scheduling cost weight.
//! - [`kernel`]: covariance maps and the controlled transition kernel.
//! - [`mdp`]: finite state grids, dynamic programming and policy extraction.
//! - [`sim`]: closed-loop Monte Carlo simulation.
//! - [`stability`]: loss-rate region analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernel;
pub mod mdp;
pub mod model;
pub mod psd;
pub mod riccati;
pub mod sim;
pub mod stability;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use psd::CovMatrix;

use nalgebra::DMatrix;

/// Builds a matrix from row-major nested vectors. An empty outer vector gives a 0x0 matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {nc}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serde adapter storing a matrix as row-major nested arrays.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for floats that may be infinite or NaN, which JSON numbers cannot hold.
/// Non-finite values are written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod serde_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            x if x.is_finite() => s.serialize_f64(x),
            x if x.is_nan() => s.serialize_str("nan"),
            x if x > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}
