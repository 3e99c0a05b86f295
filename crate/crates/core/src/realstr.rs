//! Reals serialized as decimal strings that round-trip IEEE-754 doubles.
//!
//! `{:?}` on `f64` prints the shortest representation that parses back to
//! the same bits, which is what every JSON document in this crate stores.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn format(x: f64) -> String {
    format!("{x:?}")
}

pub fn parse(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse::<f64>()
}

/// `#[serde(with = "realstr::real")]` for a single `f64`.
pub mod real {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(|e| D::Error::custom(format!("bad real {s:?}: {e}")))
    }
}

/// `#[serde(with = "realstr::real_vec")]` for a `Vec<f64>`.
pub mod real_vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&format(x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|s| parse(s).map_err(|e| D::Error::custom(format!("bad real {s:?}: {e}"))))
            .collect()
    }
}

/// `#[serde(with = "realstr::real_opt")]` for an `Option<f64>`.
pub mod real_opt {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => s.serialize_some(&format(*v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = Option::<String>::deserialize(d)?;
        v.map(|s| parse(&s).map_err(|e| D::Error::custom(format!("bad real {s:?}: {e}"))))
            .transpose()
    }
}
