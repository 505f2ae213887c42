/// Formats `x` with six significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    // The exponent after rounding to six digits decides the notation.
    let sci = format!("{:.5e}", x);
    let (mant, e) = sci.split_once('e').unwrap();
    let e: i32 = e.parse().unwrap();
    if !(-4..6).contains(&e) {
        return format!("{}e{}{:02}", trim_zeros(mant), if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (5 - e) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
