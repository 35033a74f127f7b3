//! JSON output with every float printed to 17 significant digits.

use qdispatch::experiment::sig17;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// A float that serializes as a 17-significant-digit JSON number, or `null`
/// when not finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return serializer.serialize_none();
        }
        let raw = RawValue::from_string(sig17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

pub fn nums(xs: &[f64]) -> Vec<Num> {
    xs.iter().copied().map(Num).collect()
}

/// Serialize to a single line of JSON.
pub fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report types always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(to_line(&Num(0.25)), "2.5000000000000000e-1");
        assert_eq!(
            to_line(&nums(&[1.0, f64::NAN])),
            "[1.0000000000000000e0,null]"
        );
        let back: f64 = serde_json::from_str(&to_line(&Num(0.1 + 0.2))).unwrap();
        assert_eq!(back, 0.1 + 0.2);
    }
}
