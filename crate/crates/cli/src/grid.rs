use crate::InputError;

fn tidy(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// `a:b:step` (inclusive of `b` up to rounding) or `x,y,z`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, InputError> {
    let bad = |why: &str| InputError(format!("grid `{text}`: {why}"));
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(&format!("`{}` is not a number", s.trim())))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let values = match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step <= 0.0 {
                return Err(bad("step must be positive"));
            }
            if b < a {
                return Err(bad("end is below start"));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize + 1;
            if count > 100_000 {
                return Err(bad("more than 100000 points"));
            }
            // Round to 12 significant digits so 0.1 steps print as 0.3, not 0.30000000000000004.
            (0..count).map(|k| tidy(a + k as f64 * step)).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected `start:end:step` or a comma list")),
    };
    if values.is_empty() {
        return Err(bad("no values"));
    }
    Ok(values)
}
