//! Text formatting shared by the CSV writers.

/// Fixed-point rendering with six significant digits, `.` as decimal
/// separator and no grouping.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new leading digit, e.g. 9.999996 -> 10.00000
    let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
    if digits.trim_start_matches('0').len() > 6 && decimals > 0 {
        let decimals = decimals - 1;
        return format!("{x:.decimals$}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.785486594), "0.785487");
        assert_eq!(sig6(81.28), "81.2800");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-0.0012345678), "-0.00123457");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(1234567.0), "1234567");
    }
}
