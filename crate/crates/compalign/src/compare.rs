//! Side-by-side summary of two reports over the same evaluation split.

use std::fmt;

use compalign_core::metrics::MisalignmentReport;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// `a / b`; written as the string `"inf"` when `b` is zero and `a` is not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
}

impl Ratio {
    pub fn of(a: usize, b: usize) -> Self {
        match (a, b) {
            (0, 0) => Ratio::Finite(1.0),
            (_, 0) => Ratio::Infinite,
            _ => Ratio::Finite(a as f64 / b as f64),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Ratio::Finite(v) => v,
            Ratio::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(v) => write!(f, "{v:.4}"),
            Ratio::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(v) => s.serialize_f64(*v),
            Ratio::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Ratio::Infinite),
            Raw::Text(t) => t
                .parse()
                .map(Ratio::Finite)
                .map_err(|_| serde::de::Error::custom(format!("bad ratio {t:?}"))),
        }
    }
}

/// Ratios are `a / b`, deltas are `a - b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cie_a: usize,
    pub cie_b: usize,
    pub cie_ratio: Ratio,
    pub cie_u_a: usize,
    pub cie_u_b: usize,
    pub cie_u_ratio: Ratio,
    pub cip_ratio: Option<Ratio>,
    pub cip_u_ratio: Option<Ratio>,
    pub accuracy_delta: f64,
    pub gap_delta: f64,
    pub iou_delta: f64,
    pub dice_delta: Option<f64>,
}

pub fn compare_reports(a: &MisalignmentReport, b: &MisalignmentReport) -> Result<Comparison> {
    if a.eval_fingerprint != b.eval_fingerprint || a.n_records != b.n_records || a.classes != b.classes {
        return Err(Error::Mismatch("reports were computed on different evaluation splits".into()));
    }
    let (cip_ratio, cip_u_ratio) = match (&a.cip, &b.cip) {
        (Some(x), Some(y)) => (Some(Ratio::of(x.count, y.count)), Some(Ratio::of(x.u_count, y.u_count))),
        _ => (None, None),
    };
    Ok(Comparison {
        cie_a: a.cie_count,
        cie_b: b.cie_count,
        cie_ratio: Ratio::of(a.cie_count, b.cie_count),
        cie_u_a: a.cie_u_count,
        cie_u_b: b.cie_u_count,
        cie_u_ratio: Ratio::of(a.cie_u_count, b.cie_u_count),
        cip_ratio,
        cip_u_ratio,
        accuracy_delta: a.accuracy_compressed - b.accuracy_compressed,
        gap_delta: a.fairness.gap_compressed - b.fairness.gap_compressed,
        iou_delta: a.mean_iou - b.mean_iou,
        dice_delta: a.dice_compressed.zip(b.dice_compressed).map(|(x, y)| x - y),
    })
}
