//! Number formatting shared by the CSV writers.

/// Formats `x` rounded to 9 significant digits, using the shortest decimal
/// that reproduces the rounded value.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("float formatting round-trips");
    // normalize -0 so identical runs never differ in sign of zero
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::sig9;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(sig9(1.0 / 7.0), "0.142857143");
        assert_eq!(sig9(123456789.987), "123456790");
        assert_eq!(sig9(-0.0), "0");
        assert_eq!(sig9(2.5e-12), "0.0000000000025");
    }
}
