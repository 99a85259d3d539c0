use nalgebra::{DMatrix, DVector};

use crate::statespace::ObservationSequence;
use crate::{Error, Result};

/// Observation times and a `p x T` matrix of values with a missingness mask.
///
/// Missing cells hold `NaN` in `values` and `false` in `observed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from per-cell optional values (`values[j][i]` is series `j` at step `i`).
    pub fn from_options(times: Vec<f64>, cells: &[Vec<Option<f64>>]) -> Result<Self> {
        let p = cells.len();
        let t = times.len();
        if cells.iter().any(|row| row.len() != t) {
            return Err(Error::Dimension(
                "every series must have one cell per time".into(),
            ));
        }
        let values = DMatrix::from_fn(p, t, |j, i| cells[j][i].unwrap_or(f64::NAN));
        let observed = DMatrix::from_fn(p, t, |j, i| cells[j][i].is_some());
        Self::new(times, values, observed)
    }

    pub fn fully_observed(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        let observed = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(times, values, observed)
    }

    pub fn new(times: Vec<f64>, mut values: DMatrix<f64>, observed: DMatrix<bool>) -> Result<Self> {
        if values.ncols() != times.len() || observed.shape() != values.shape() {
            return Err(Error::Dimension(format!(
                "{} times, values {:?}, mask {:?}",
                times.len(),
                values.shape(),
                observed.shape()
            )));
        }
        for i in 1..times.len() {
            if !(times[i] > times[i - 1]) {
                return Err(Error::Data(format!(
                    "times are not strictly increasing at step {i}"
                )));
            }
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("non-finite time".into()));
        }
        for i in 0..values.ncols() {
            for j in 0..values.nrows() {
                if observed[(j, i)] {
                    if !values[(j, i)].is_finite() {
                        return Err(Error::Data(format!("series {j} at step {i} is not finite")));
                    }
                } else {
                    values[(j, i)] = f64::NAN;
                }
            }
        }
        let names = (1..=values.nrows()).map(|j| format!("y{j}")).collect();
        Ok(Self {
            times,
            values,
            observed,
            names,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::Dimension(format!(
                "{} names for {} series",
                names.len(),
                self.p()
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn is_observed(&self, series: usize, step: usize) -> bool {
        self.observed[(series, step)]
    }

    pub fn observed_indices(&self, step: usize) -> Vec<usize> {
        (0..self.p())
            .filter(|&j| self.observed[(j, step)])
            .collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Column `step` with missing cells set to zero.
    pub fn column_filled(&self, step: usize) -> DVector<f64> {
        DVector::from_fn(self.p(), |j, _| {
            if self.observed[(j, step)] {
                self.values[(j, step)]
            } else {
                0.0
            }
        })
    }

    pub fn to_observations(&self) -> ObservationSequence {
        let values = (0..self.len()).map(|i| self.column_filled(i)).collect();
        let mask = (0..self.len())
            .map(|i| (0..self.p()).map(|j| self.observed[(j, i)]).collect())
            .collect();
        ObservationSequence { values, mask }
    }

    /// Steps `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for {} steps",
                self.len()
            )));
        }
        let n = end - start;
        Ok(Dataset {
            times: self.times[start..end].to_vec(),
            values: self.values.columns(start, n).into_owned(),
            observed: self.observed.columns(start, n).into_owned(),
            names: self.names.clone(),
        })
    }

    /// Concatenates `other` after `self`; times must keep increasing.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.p() != self.p() {
            return Err(Error::Dimension(format!(
                "cannot join {} and {} series",
                self.p(),
                other.p()
            )));
        }
        let times: Vec<f64> = self.times.iter().chain(&other.times).copied().collect();
        let n = times.len();
        let values = DMatrix::from_fn(self.p(), n, |j, i| {
            if i < self.len() {
                self.values[(j, i)]
            } else {
                other.values[(j, i - self.len())]
            }
        });
        let observed = DMatrix::from_fn(self.p(), n, |j, i| {
            if i < self.len() {
                self.observed[(j, i)]
            } else {
                other.observed[(j, i - self.len())]
            }
        });
        let mut out = Dataset::new(times, values, observed)?;
        out.names = self.names.clone();
        Ok(out)
    }

    /// A fully masked dataset at the given times.
    pub fn missing(p: usize, times: Vec<f64>) -> Result<Dataset> {
        let n = times.len();
        Dataset::new(
            times,
            DMatrix::from_element(p, n, f64::NAN),
            DMatrix::from_element(p, n, false),
        )
    }
}
