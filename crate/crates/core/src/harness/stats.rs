//! Aggregation helpers: quartiles and straight-line fits.

/// Median of a nonempty slice (ignores ordering of the input).
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile, q in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// (first quartile, median, third quartile).
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    (
        quantile(values, 0.25),
        quantile(values, 0.5),
        quantile(values, 0.75),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least squares via Gaussian elimination on the 2x2 normal equations.
pub fn least_squares_elimination(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let k = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    // [ sxx sx | sxy ]
    // [ sx  k  | sy  ]
    let f = sx / sxx;
    let rhs = sy - f * sxy;
    let diag = k - f * sx;
    let intercept = rhs / diag;
    let slope = (sxy - sx * intercept) / sxx;
    LineFit { slope, intercept }
}

/// Least squares via the closed-form normal-equation solution.
pub fn least_squares_closed_form(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let k = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    let intercept = (sy - slope * sx) / k;
    LineFit { slope, intercept }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_quartiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(median(&v), 3.0);
        let (q1, q2, q3) = quartiles(&v);
        assert_eq!((q1, q2, q3), (2.0, 3.0, 4.0));
        assert_eq!(median(&[7.0, 1.0]), 4.0);
    }

    #[test]
    fn exact_line_is_recovered() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| -0.7 * x + 2.0).collect();
        let fit = least_squares_elimination(&xs, &ys);
        assert!((fit.slope + 0.7).abs() < 1e-12);
        assert!((fit.intercept - 2.0).abs() < 1e-12);
    }

    #[test]
    fn both_solvers_agree() {
        let xs = [6.93, 7.62, 8.31, 9.01, 9.70];
        let ys = [2.9, 1.8, 1.3, 0.6, 0.1];
        let a = least_squares_elimination(&xs, &ys);
        let b = least_squares_closed_form(&xs, &ys);
        assert!((a.slope - b.slope).abs() < 1e-12);
        assert!((a.intercept - b.intercept).abs() < 1e-12);
    }
}
