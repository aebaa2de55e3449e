//! Non-negative exact rationals with a forgiving text form.
//!
//! Accepted spellings are integers (`15`), terminating decimals (`0.25`)
//! and fractions (`3/2`). Whole values print as integers and everything
//! else prints as a reduced fraction, so `parse(display(x)) == x`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(pub Ratio<u64>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational `{0}`")]
pub struct ParseRationalError(pub String);

impl Rational {
    pub fn new(numer: u64, denom: u64) -> Option<Self> {
        if denom == 0 {
            return None;
        }
        Some(Rational(Ratio::new(numer, denom)))
    }

    pub fn integer(value: u64) -> Self {
        Rational(Ratio::from_integer(value))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl From<u64> for Rational {
    fn from(value: u64) -> Self {
        Rational::integer(value)
    }
}

impl FromStr for Rational {
    type Err = ParseRationalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseRationalError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|_| err())?;
            let d: u64 = d.trim().parse().map_err(|_| err())?;
            return Rational::new(n, d).ok_or_else(err);
        }
        if let Some((int, frac)) = t.split_once('.') {
            if frac.is_empty() && int.is_empty() {
                return Err(err());
            }
            if !frac.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 18 {
                return Err(err());
            }
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| err())?
            };
            let scale = 10u64.pow(frac.len() as u32);
            let frac_val: u64 = if frac.is_empty() {
                0
            } else {
                frac.parse().map_err(|_| err())?
            };
            let numer = int
                .checked_mul(scale)
                .and_then(|v| v.checked_add(frac_val))
                .ok_or_else(err)?;
            return Rational::new(numer, scale).ok_or_else(err);
        }
        let v: u64 = t.parse().map_err(|_| err())?;
        Ok(Rational::integer(v))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.denom() == 1 {
            serializer.serialize_u64(self.numer())
        } else {
            serializer.collect_str(self)
        }
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RationalVisitor;

        impl Visitor<'_> for RationalVisitor {
            type Value = Rational;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer, decimal, or `p/q` string")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
                Ok(Rational::integer(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
                u64::try_from(v)
                    .map(Rational::integer)
                    .map_err(|_| E::custom(format!("negative value {v}")))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
                if !v.is_finite() || v < 0.0 {
                    return Err(E::custom(format!("invalid value {v}")));
                }
                // Shortest round-trip formatting recovers the decimal the
                // document author wrote.
                format!("{v}").parse().map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(RationalVisitor)
    }
}
