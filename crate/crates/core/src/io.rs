//! Shared text formatting for the CSV outputs.

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for x in [0.9999, 1.0 / 3.0, -2.5e-300, 1e22, 0.0] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(format_f64(0.9999), "9.9990000000000001e-1");
    }
}
