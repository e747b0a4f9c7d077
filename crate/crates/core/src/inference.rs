//! p-values and significance codes.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

/// Reference distribution for Wald-type tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Normal,
    /// Student t with the given degrees of freedom.
    StudentT(f64),
}

pub fn two_sided_p(z: f64, reference: Reference) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let tail = match reference {
        Reference::Normal => Normal::standard().cdf(-z.abs()),
        Reference::StudentT(dof) => StudentsT::new(0.0, 1.0, dof)
            .map(|t| t.cdf(-z.abs()))
            .unwrap_or(f64::NAN),
    };
    (2.0 * tail).clamp(0.0, 1.0)
}

pub fn normal_upper_p(z: f64) -> f64 {
    Normal::standard().sf(z)
}

pub fn chi2_upper_p(stat: f64, dof: f64) -> f64 {
    ChiSquared::new(dof).map(|c| c.sf(stat)).unwrap_or(f64::NAN)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Significance code: `***` 0.001, `**` 0.01, `*` 0.05, `.` 0.1.
pub fn significance_code(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "."
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_thresholds() {
        assert_eq!(significance_code(0.0005), "***");
        assert_eq!(significance_code(0.005), "**");
        assert_eq!(significance_code(0.03), "*");
        assert_eq!(significance_code(0.07), ".");
        assert_eq!(significance_code(0.5), "");
    }

    #[test]
    fn normal_two_sided() {
        assert!((two_sided_p(1.959963984540054, Reference::Normal) - 0.05).abs() < 1e-9);
        assert!(two_sided_p(1.96, Reference::StudentT(5.0)) > 0.05);
    }
}
