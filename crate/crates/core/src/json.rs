//! JSON output with every float written to 17 significant digits, enough to
//! round-trip any `f64` exactly.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter, Serializer};

use crate::error::{Error, Result};

/// Pretty-printing formatter that writes `f64` as `d.dddddddddddddddde±x`.
pub struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Default for ExactFloats<'_> {
    fn default() -> Self {
        ExactFloats(PrettyFormatter::new())
    }
}

macro_rules! forward {
    ($($name:ident),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
                self.0.$name(w)
            }
        )*
    };
}

macro_rules! forward_first {
    ($($name:ident),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
                self.0.$name(w, first)
            }
        )*
    };
}

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    forward!(begin_array, end_array, end_array_value, begin_object, end_object, begin_object_value, end_object_value);
    forward_first!(begin_array_value, begin_object_key);
}

pub fn to_writer<W: Write, T: Serialize + ?Sized>(out: W, value: &T) -> Result<()> {
    let mut ser = Serializer::with_formatter(out, ExactFloats::default());
    value.serialize(&mut ser)?;
    Ok(())
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    to_writer(&mut buf, value)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn to_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn from_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_digits() {
        let s = to_string(&0.1f64).unwrap();
        assert_eq!(s.trim(), "1.0000000000000001e-1");
        let s = to_string(&vec![1.0f64, -2.5]).unwrap();
        assert!(s.contains("1.0000000000000000e0") && s.contains("-2.5000000000000000e0"));
    }

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(to_string(&f64::NAN).unwrap().trim(), "null");
    }

    #[test]
    fn integers_untouched() {
        assert_eq!(to_string(&42u64).unwrap().trim(), "42");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        to_file(&p, &vec![1.5f64, 1e-300]).unwrap();
        let back: Vec<f64> = from_file(&p).unwrap();
        assert_eq!(back, vec![1.5, 1e-300]);
        assert!(matches!(from_file::<Vec<f64>>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trips_bitwise(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = to_string(&x).unwrap();
            let y: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
