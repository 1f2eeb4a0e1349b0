//! Datasets and standardization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AgpError, Result};

/// How predictor columns are rescaled before kernel evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XScaling {
    /// Map each column's training range onto `[0, 1]`.
    #[default]
    UnitRange,
    /// Subtract the mean and divide by the sample standard deviation.
    ZScore,
    /// Use the predictors as given.
    None,
}

impl XScaling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unit-range" | "unit" => Ok(XScaling::UnitRange),
            "z-score" | "zscore" => Ok(XScaling::ZScore),
            "none" | "raw" => Ok(XScaling::None),
            other => Err(AgpError::InvalidParameter(format!(
                "unknown predictor scaling '{other}' (expected unit-range, z-score or none)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            XScaling::UnitRange => "unit-range",
            XScaling::ZScore => "z-score",
            XScaling::None => "none",
        }
    }
}

/// Centering and scaling statistics learned from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_center: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_center: f64,
    pub y_scale: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Standardization {
    /// Learns the response mean and sample standard deviation and the
    /// predictor statistics for `scaling`. Constant columns are shifted only;
    /// a constant response is an error.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, scaling: XScaling) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n {
            return Err(AgpError::DimensionMismatch(format!(
                "X has {} rows but y has length {n}",
                x.nrows()
            )));
        }
        if n < 2 {
            return Err(AgpError::Data(format!("need at least 2 observations, got {n}")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(AgpError::Data("data contain non-finite values".into()));
        }
        let (y_center, y_scale) = mean_sd(y.iter().copied());
        if !(y_scale > 0.0) {
            return Err(AgpError::Data("response is constant".into()));
        }
        let p = x.ncols();
        let (x_center, x_scale) = match scaling {
            XScaling::ZScore => (0..p)
                .map(|j| {
                    let (m, s) = mean_sd(x.column(j).iter().copied());
                    (m, if s > 0.0 { s } else { 1.0 })
                })
                .unzip(),
            XScaling::UnitRange => (0..p)
                .map(|j| {
                    let col = x.column(j);
                    let lo = col.min();
                    let range = col.max() - lo;
                    (lo, if range > 0.0 { range } else { 1.0 })
                })
                .unzip(),
            XScaling::None => (vec![0.0; p], vec![1.0; p]),
        };
        Ok(Self {
            x_center,
            x_scale,
            y_center,
            y_scale,
        })
    }

    pub fn p(&self) -> usize {
        self.x_center.len()
    }

    pub fn standardize_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.p() {
            return Err(AgpError::DimensionMismatch(format!(
                "expected {} predictor columns, found {}",
                self.p(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_center[j]) / self.x_scale[j]
        }))
    }

    pub fn standardize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_center) / self.y_scale)
    }

    pub fn destandardize_y(&self, v: f64) -> f64 {
        v * self.y_scale + self.y_center
    }
}

/// Training data in raw and standardized form.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub x_raw: DMatrix<f64>,
    pub y_raw: DVector<f64>,
    pub x_std: DMatrix<f64>,
    pub y_std: DVector<f64>,
    pub stats: Standardization,
}

impl Dataset {
    pub fn new(x_raw: DMatrix<f64>, y_raw: DVector<f64>, scaling: XScaling) -> Result<Self> {
        let names = (1..=x_raw.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(names, x_raw, y_raw, scaling)
    }

    pub fn with_names(
        names: Vec<String>,
        x_raw: DMatrix<f64>,
        y_raw: DVector<f64>,
        scaling: XScaling,
    ) -> Result<Self> {
        if names.len() != x_raw.ncols() {
            return Err(AgpError::DimensionMismatch(format!(
                "{} names for {} columns",
                names.len(),
                x_raw.ncols()
            )));
        }
        let stats = Standardization::fit(&x_raw, &y_raw, scaling)?;
        Self::with_stats(names, x_raw, y_raw, stats)
    }

    /// Standardizes with externally supplied statistics (e.g. test data).
    pub fn with_stats(
        names: Vec<String>,
        x_raw: DMatrix<f64>,
        y_raw: DVector<f64>,
        stats: Standardization,
    ) -> Result<Self> {
        if x_raw.nrows() != y_raw.len() {
            return Err(AgpError::DimensionMismatch(format!(
                "X has {} rows but y has length {}",
                x_raw.nrows(),
                y_raw.len()
            )));
        }
        let x_std = stats.standardize_x(&x_raw)?;
        let y_std = stats.standardize_y(&y_raw);
        Ok(Self {
            names,
            x_raw,
            y_raw,
            x_std,
            y_std,
            stats,
        })
    }

    pub fn n(&self) -> usize {
        self.y_raw.len()
    }

    pub fn p(&self) -> usize {
        self.x_raw.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_response_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(40, 3, |_, j| if j == 2 { 5.0 } else { rng.random::<f64>() });
        let y = DVector::from_fn(40, |_, _| 3.0 + 2.0 * rng.random::<f64>());
        let d = Dataset::new(x, y, XScaling::ZScore).unwrap();
        let (m, s) = mean_sd(d.y_std.iter().copied());
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        let (mx, sx) = mean_sd(d.x_std.column(1).iter().copied());
        assert_abs_diff_eq!(mx, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sx, 1.0, epsilon = 1e-12);
        assert!(d.x_std.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(25, 2, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(25, |_, _| 100.0 * rng.random::<f64>() - 20.0);
        let d = Dataset::new(x, y.clone(), XScaling::UnitRange).unwrap();
        for i in 0..25 {
            assert!((d.stats.destandardize_y(d.y_std[i]) - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_data() {
        let x = DMatrix::from_element(4, 2, 1.0);
        assert!(Dataset::new(x.clone(), DVector::from_element(4, 2.0), XScaling::default()).is_err());
        assert!(Dataset::new(DMatrix::zeros(1, 2), DVector::zeros(1), XScaling::default()).is_err());
        let mut y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        y[1] = f64::NAN;
        assert!(Dataset::new(x, y, XScaling::default()).is_err());
    }

    #[test]
    fn test_data_uses_training_statistics() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let train = Dataset::new(x, y, XScaling::ZScore).unwrap();
        let test = Dataset::with_stats(
            train.names.clone(),
            DMatrix::from_row_slice(1, 1, &[3.0]),
            DVector::from_vec(vec![4.0]),
            train.stats.clone(),
        )
        .unwrap();
        assert_abs_diff_eq!(test.x_std[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(test.y_std[0], 2.0, epsilon = 1e-12);
        let unscaled = Dataset::new(DMatrix::from_row_slice(2, 1, &[0.5, 0.7]), DVector::from_vec(vec![0.0, 1.0]), XScaling::None).unwrap();
        assert_eq!(unscaled.x_std, unscaled.x_raw);
    }

    #[test]
    fn unit_range_maps_training_columns_onto_unit_interval() {
        let x = DMatrix::from_row_slice(3, 2, &[2.0, 7.0, 4.0, 7.0, 3.0, 7.0]);
        let d = Dataset::new(x, DVector::from_vec(vec![1.0, 0.0, 2.0]), XScaling::UnitRange).unwrap();
        assert_eq!(d.x_std.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.5]);
        assert!(d.x_std.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(XScaling::parse("z-score").unwrap(), XScaling::ZScore);
        assert!(XScaling::parse("log").is_err());
    }
}
