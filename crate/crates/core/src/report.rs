//! Number formatting shared by the text renderers.

/// Three decimals, as used for estimates and weights.
pub fn fmt3(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.3}")
    } else {
        "-".to_string()
    }
}

pub fn fmt3_opt(x: Option<f64>) -> String {
    x.map(fmt3).unwrap_or_else(|| "-".to_string())
}

/// Three significant figures, as used for p-values.
pub fn fmt_sig3(x: f64) -> String {
    if !x.is_finite() {
        return "-".to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    // Round first so that e.g. 0.9999998 becomes 1.00, not 1.000.
    let rounded: f64 = format!("{x:.2e}").parse().unwrap_or(x);
    let exp = rounded.abs().log10().floor() as i32;
    let decimals = (2 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

pub fn fmt_sig3_opt(x: Option<f64>) -> String {
    x.map(fmt_sig3).unwrap_or_else(|| "-".to_string())
}
