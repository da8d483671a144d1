//! Unit-suffix parsing for configuration values.
//!
//! Config fields accept either a bare number (interpreted in the field's SI
//! unit) or a string such as `"66 G/cm"`, `"3 MHz"`, `"20 uK"`. Values are
//! normalized to SI on load; manifests echo the normalized numbers, so a
//! manifest round-trips bit-exactly.

use crate::constants::K_B;
use crate::error::{Error, Result};
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use std::marker::PhantomData;

pub trait Dim {
    const NAME: &'static str;
    /// (suffix, factor to SI). Longer suffixes must come first.
    const UNITS: &'static [(&'static str, f64)];
}

macro_rules! dimension {
    ($name:ident, $label:literal, $units:expr) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub struct $name;
        impl Dim for $name {
            const NAME: &'static str = $label;
            const UNITS: &'static [(&'static str, f64)] = $units;
        }
    };
}

dimension!(Time, "time", &[
    ("min", 60.0),
    ("ms", 1e-3),
    ("us", 1e-6),
    ("\u{b5}s", 1e-6),
    ("ns", 1e-9),
    ("s", 1.0),
]);
dimension!(Length, "length", &[
    ("cm", 1e-2),
    ("mm", 1e-3),
    ("um", 1e-6),
    ("\u{b5}m", 1e-6),
    ("nm", 1e-9),
    ("m", 1.0),
]);
dimension!(Frequency, "frequency", &[
    ("kHz", 1e3),
    ("MHz", 1e6),
    ("GHz", 1e9),
    ("Hz", 1.0),
]);
dimension!(Power, "power", &[
    ("mW", 1e-3),
    ("uW", 1e-6),
    ("\u{b5}W", 1e-6),
    ("nW", 1e-9),
    ("pW", 1e-12),
    ("W", 1.0),
]);
dimension!(Field, "magnetic field", &[
    ("mT", 1e-3),
    ("uT", 1e-6),
    ("mG", 1e-7),
    ("T", 1.0),
    ("G", 1e-4),
]);
dimension!(Gradient, "field gradient", &[
    ("T/m", 1.0),
    ("G/cm", 1e-2),
    ("G/m", 1e-4),
]);
dimension!(Temperature, "temperature", &[
    ("mK", 1e-3),
    ("uK", 1e-6),
    ("\u{b5}K", 1e-6),
    ("nK", 1e-9),
    ("K", 1.0),
]);
dimension!(Current, "current", &[("mA", 1e-3), ("A", 1.0)]);
dimension!(Rate, "rate", &[
    ("kHz", 1e3),
    ("MHz", 1e6),
    ("1/s", 1.0),
    ("/s", 1.0),
    ("Hz", 1.0),
]);
// Heating rates may be given as energy per time or as temperature per time
// (converted through k_B).
dimension!(EnergyRate, "energy rate", &[
    ("J/s", 1.0),
    ("mK/s", K_B * 1e-3),
    ("uK/s", K_B * 1e-6),
    ("\u{b5}K/s", K_B * 1e-6),
    ("nK/s", K_B * 1e-9),
    ("K/s", K_B),
    ("W", 1.0),
]);
dimension!(Intensity, "intensity", &[
    ("W/m^2", 1.0),
    ("W/m2", 1.0),
    ("mW/cm^2", 10.0),
    ("mW/cm2", 10.0),
]);

pub fn parse_quantity<D: Dim>(text: &str) -> Result<f64> {
    let text = text.trim();
    if let Ok(v) = text.parse::<f64>() {
        return Ok(v);
    }
    for (suffix, factor) in D::UNITS {
        if let Some(num) = text.strip_suffix(suffix) {
            let num = num.trim();
            let v = num.parse::<f64>().map_err(|_| {
                Error::Config(format!("cannot parse {} value {text:?}", D::NAME))
            })?;
            return Ok(v * factor);
        }
    }
    Err(Error::Config(format!(
        "cannot parse {} value {text:?}; expected a number or one of the suffixes {:?}",
        D::NAME,
        D::UNITS.iter().map(|(s, _)| *s).collect::<Vec<_>>()
    )))
}

/// A config scalar carrying its dimension. Serializes as a plain SI number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qty<D: Dim>(pub f64, PhantomData<D>);

impl<D: Dim> Qty<D> {
    pub fn new(v: f64) -> Self {
        Qty(v, PhantomData)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<D: Dim> From<f64> for Qty<D> {
    fn from(v: f64) -> Self {
        Qty::new(v)
    }
}

impl<D: Dim> Default for Qty<D> {
    fn default() -> Self {
        Qty::new(0.0)
    }
}

impl<D: Dim> Serialize for Qty<D> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de, D: Dim> Deserialize<'de> for Qty<D> {
    fn deserialize<De: Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        struct Visitor<D>(PhantomData<D>);
        impl<D: Dim> de::Visitor<'_> for Visitor<D> {
            type Value = Qty<D>;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a number or a \"value unit\" string ({})", D::NAME)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Qty<D>, E> {
                Ok(Qty::new(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Qty<D>, E> {
                Ok(Qty::new(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Qty<D>, E> {
                Ok(Qty::new(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Qty<D>, E> {
                parse_quantity::<D>(v)
                    .map(Qty::new)
                    .map_err(|e| E::custom(e.to_string()))
            }
        }
        d.deserialize_any(Visitor(PhantomData))
    }
}
