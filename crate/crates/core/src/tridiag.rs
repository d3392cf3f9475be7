//! Thomas algorithm for tridiagonal systems.

/// Tridiagonal matrix stored by diagonals; `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Row at which elimination met a vanishing pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroPivot {
    pub row: usize,
    pub pivot: f64,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `A·x` for a vector of the same length (no boundary terms).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    /// Solves `A·x = rhs` without pivoting.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, ZeroPivot> {
        let n = self.len();
        assert_eq!(rhs.len(), n);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let scale = self.diag.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut denom = self.diag[0];
        for i in 0..n {
            if i > 0 {
                denom = self.diag[i] - self.lower[i] * c[i - 1];
            }
            if !denom.is_finite() || denom.abs() <= 1e-14 * scale {
                return Err(ZeroPivot { row: i, pivot: denom });
            }
            c[i] = if i + 1 < n { self.upper[i] / denom } else { 0.0 };
            let prev = if i > 0 { self.lower[i] * d[i - 1] } else { 0.0 };
            d[i] = (rhs[i] - prev) / denom;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}
