//! Multivariate empirical CDFs.
//!
//! Evaluation counts sample points dominated componentwise by the query,
//! including ties, and divides the integer count by the sample size once.
//! There is no smoothing or interpolation anywhere; downstream code relies on
//! the evaluations being exact count ratios.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EcdfError {
    #[error("cannot build an empirical CDF from an empty sample")]
    EmptySample,
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
}

/// Empirical CDF over a fixed sample of `d`-vectors.
///
/// Immutable after construction; evaluation from multiple threads is safe.
#[derive(Debug, Clone)]
pub struct Ecdf {
    d: usize,
    n: usize,
    /// Row-major sample, `n * d` values.
    points: Vec<f64>,
    /// Sorted copy of the sample for the scalar fast path.
    sorted: Option<Vec<f64>>,
}

impl Ecdf {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, EcdfError> {
        if rows.is_empty() {
            return Err(EcdfError::EmptySample);
        }
        let d = rows[0].as_ref().len();
        let mut points = Vec::with_capacity(rows.len() * d);
        for (index, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != d {
                return Err(EcdfError::DimensionMismatch {
                    index,
                    got: row.len(),
                    expected: d,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EcdfError::NonFinite { index });
            }
            points.extend_from_slice(row);
        }
        Ok(Self::from_flat(points, d))
    }

    /// Build from an already validated row-major buffer.
    fn from_flat(points: Vec<f64>, d: usize) -> Self {
        assert!(d > 0 && points.len() % d == 0);
        let n = points.len() / d;
        let sorted = (d == 1).then(|| {
            let mut s = points.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s
        });
        Ecdf {
            d,
            n,
            points,
            sorted,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.d)
    }

    /// Number of sample points componentwise `<= x`.
    pub fn count_le(&self, x: &[f64]) -> usize {
        assert_eq!(x.len(), self.d, "query dimension mismatch");
        if let Some(sorted) = &self.sorted {
            let q = x[0];
            sorted.partition_point(|&v| v <= q)
        } else {
            self.count_le_scan(x)
        }
    }

    /// Linear-scan count; the indexed path must agree with this bit for bit.
    pub(crate) fn count_le_scan(&self, x: &[f64]) -> usize {
        self.rows()
            .filter(|row| row.iter().zip(x).all(|(v, q)| v <= q))
            .count()
    }

    /// `count_le(x) / n` as a single exact division.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.count_le(x) as f64 / self.n as f64
    }

    /// Distinct observed values on one axis, strictly increasing.
    pub fn coordinate_support(&self, axis: usize) -> Vec<f64> {
        assert!(axis < self.d, "axis {axis} out of range for d={}", self.d);
        let mut vals: Vec<f64> = self.rows().map(|r| r[axis]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals
    }

    /// Componentwise maximum of the sample.
    pub fn top_corner(&self) -> Vec<f64> {
        let mut top = self.row(0).to_vec();
        for row in self.rows().skip(1) {
            for (t, v) in top.iter_mut().zip(row) {
                if *v > *t {
                    *t = *v;
                }
            }
        }
        top
    }
}
