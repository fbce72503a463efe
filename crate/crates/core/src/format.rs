//! Text encoding of floats in CSV outputs.

/// 17 significant digits in scientific notation; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim().parse().map_err(|e| format!("bad float {s:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            let back = parse_f64(&fmt_f64(v)).unwrap();
            if v.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }
}
