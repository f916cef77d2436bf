//! PSNR and onset deciles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `10·log10(peak² / MSE)`; `+∞` when the frames are identical and NaN
/// when either contains non-finite values.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "psnr of {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deciles {
    #[serde(with = "extended_f64")]
    pub d1: f64,
    #[serde(with = "extended_f64")]
    pub d9: f64,
    /// Fewer than ten onsets: `d1`, `d9` are the min and max instead.
    pub fallback: bool,
}

/// First and ninth deciles by linear interpolation between order
/// statistics at rank `p·(n−1)`. No onsets gives `∞` for both.
pub fn onset_deciles(onsets: &[usize]) -> Deciles {
    if onsets.is_empty() {
        return Deciles {
            d1: f64::INFINITY,
            d9: f64::INFINITY,
            fallback: false,
        };
    }
    let mut s: Vec<f64> = onsets.iter().map(|&v| v as f64).collect();
    s.sort_by(f64::total_cmp);
    if s.len() < 10 {
        return Deciles {
            d1: s[0],
            d9: s[s.len() - 1],
            fallback: true,
        };
    }
    let q = |p: f64| {
        let r = p * (s.len() - 1) as f64;
        let lo = r.floor() as usize;
        let hi = (lo + 1).min(s.len() - 1);
        s[lo] + (r - lo as f64) * (s[hi] - s[lo])
    };
    Deciles {
        d1: q(0.1),
        d9: q(0.9),
        fallback: false,
    }
}

/// JSON has no infinities; these are written as `"inf"`, `"-inf"`, `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
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
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}
