//! Small summary statistics over replicate runs.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn std_err(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    std_dev(xs) / (xs.len() as f64).sqrt()
}

/// Standard error of `mean(a) − mean(b)` for independent samples.
pub fn pooled_std_err(a: &[f64], b: &[f64]) -> f64 {
    (std_err(a).powi(2) + std_err(b).powi(2)).sqrt()
}

/// `(mean(a) − mean(b)) / pooled_std_err(a, b)`; infinite when both samples
/// are constant and the means differ.
pub fn z_score(a: &[f64], b: &[f64]) -> f64 {
    let d = mean(a) - mean(b);
    let se = pooled_std_err(a, b);
    if se == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            d.signum() * f64::INFINITY
        }
    } else {
        d / se
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert_eq!(mean(&xs), 5.0);
        assert!((std_dev(&xs) - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(std_dev(&[3.0]), 0.0);
        assert!((pooled_std_err(&[1.0, 3.0], &[1.0, 3.0]) - 2.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(z_score(&[1.0, 1.0], &[0.0, 0.0]), f64::INFINITY);
        assert_eq!(z_score(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }
}
