//! Column-tagged sample matrix holding the X, Y and Z blocks.

use nalgebra::DMatrix;

use crate::error::{GcmError, Result};

/// An i.i.d. sample of `(X, Y, Z)` triples, stored as three column blocks
/// sharing the row count `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    x_block: DMatrix<f64>,
    y_block: DMatrix<f64>,
    z_block: DMatrix<f64>,
}

impl DataSet {
    /// Builds a dataset from the three blocks, validating the shared row
    /// count (`n >= 2`) and finiteness of every entry.
    pub fn new(x_block: DMatrix<f64>, y_block: DMatrix<f64>, z_block: DMatrix<f64>) -> Result<Self> {
        let n = x_block.nrows();
        if n < 2 {
            return Err(GcmError::InvalidInput(format!(
                "need at least 2 rows, got {n}"
            )));
        }
        if y_block.nrows() != n || z_block.nrows() != n {
            return Err(GcmError::InvalidInput(format!(
                "row counts differ: x {} y {} z {}",
                n,
                y_block.nrows(),
                z_block.nrows()
            )));
        }
        if x_block.ncols() == 0 || y_block.ncols() == 0 || z_block.ncols() == 0 {
            return Err(GcmError::InvalidInput("empty block".into()));
        }
        for (block, name) in [(&x_block, "x"), (&y_block, "y"), (&z_block, "z")] {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(GcmError::NonFinite {
                    context: format!("{name} block"),
                });
            }
        }
        Ok(Self {
            x_block,
            y_block,
            z_block,
        })
    }

    /// Convenience constructor for scalar X, Y, Z.
    pub fn from_univariate(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if y.len() != n || z.len() != n {
            return Err(GcmError::LengthMismatch {
                left: n,
                right: y.len().max(z.len()),
            });
        }
        Self::new(
            DMatrix::from_vec(n, 1, x),
            DMatrix::from_vec(n, 1, y),
            DMatrix::from_vec(n, 1, z),
        )
    }

    pub fn n(&self) -> usize {
        self.x_block.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.x_block.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.y_block.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.z_block.ncols()
    }

    pub fn x_block(&self) -> &DMatrix<f64> {
        &self.x_block
    }

    pub fn y_block(&self) -> &DMatrix<f64> {
        &self.y_block
    }

    pub fn z_block(&self) -> &DMatrix<f64> {
        &self.z_block
    }

    /// The `j`th X column as a plain vector.
    pub fn x_col(&self, j: usize) -> Vec<f64> {
        self.x_block.column(j).iter().copied().collect()
    }

    /// The `k`th Y column as a plain vector.
    pub fn y_col(&self, k: usize) -> Vec<f64> {
        self.y_block.column(k).iter().copied().collect()
    }

    /// Restriction of the dataset to a subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |m: &DMatrix<f64>| -> DMatrix<f64> {
            DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
        };
        Self::new(pick(&self.x_block), pick(&self.y_block), pick(&self.z_block))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_sample() {
        let err = DataSet::from_univariate(vec![1.0], vec![1.0], vec![1.0]).unwrap_err();
        assert!(matches!(err, GcmError::InvalidInput(_)));
    }

    #[test]
    fn rejects_non_finite() {
        let err =
            DataSet::from_univariate(vec![1.0, f64::NAN], vec![1.0, 2.0], vec![1.0, 2.0])
                .unwrap_err();
        assert!(matches!(err, GcmError::NonFinite { .. }));
    }

    #[test]
    fn rejects_row_mismatch() {
        let x = DMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let y = DMatrix::from_vec(2, 1, vec![1.0, 2.0]);
        let z = DMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        assert!(DataSet::new(x, y, z).is_err());
    }

    #[test]
    fn select_rows_keeps_order() {
        let d = DataSet::from_univariate(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0, 7.0, 8.0],
            vec![9.0, 10.0, 11.0, 12.0],
        )
        .unwrap();
        let half = d.select_rows(&[3, 0]).unwrap();
        assert_eq!(half.x_col(0), vec![4.0, 1.0]);
        assert_eq!(half.y_col(0), vec![8.0, 5.0]);
    }
}
