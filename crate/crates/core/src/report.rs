//! Deterministic text serialization shared by every report.

/// Seventeen significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
