//! Training data containers for function regression and operator learning.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tape::Matrix;

/// Scalar-input, scalar-output regression pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Operator-learning records: input fields sampled at a fixed sensor grid,
/// shared query points, and target values per (field, query).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorData {
    /// One row per input function, sampled at the sensor grid.
    pub fields: Matrix,
    /// One row per query point (e.g. (x, t)).
    pub queries: Matrix,
    /// values[f][q]: target at query q for field f.
    pub values: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Function(FunctionData),
    Operator(OperatorData),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Records,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn function(x: Vec<f64>, y: Vec<f64>, meta: DatasetMeta) -> Result<Self, Error> {
        if x.len() != y.len() {
            return Err(Error::Config(format!(
                "function data length mismatch: {} inputs vs {} outputs",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Config("dataset must be nonempty".into()));
        }
        Ok(Dataset { records: Records::Function(FunctionData { x, y }), meta })
    }

    pub fn operator(fields: Matrix, queries: Matrix, values: Matrix, meta: DatasetMeta) -> Result<Self, Error> {
        if fields.rows == 0 || queries.rows == 0 {
            return Err(Error::Config("dataset must be nonempty".into()));
        }
        if values.rows != fields.rows || values.cols != queries.rows {
            return Err(Error::Config(format!(
                "operator targets {}x{} inconsistent with {} fields x {} queries",
                values.rows, values.cols, fields.rows, queries.rows
            )));
        }
        Ok(Dataset { records: Records::Operator(OperatorData { fields, queries, values }), meta })
    }

    /// Number of scalar observations (the N_d of the Gaussian likelihood).
    pub fn n_obs(&self) -> usize {
        match &self.records {
            Records::Function(d) => d.y.len(),
            Records::Operator(d) => d.values.len(),
        }
    }

    /// Number of records (points for functions, fields for operators).
    pub fn n_records(&self) -> usize {
        match &self.records {
            Records::Function(d) => d.x.len(),
            Records::Operator(d) => d.fields.rows,
        }
    }

    pub fn as_function(&self) -> Option<&FunctionData> {
        match &self.records {
            Records::Function(d) => Some(d),
            Records::Operator(_) => None,
        }
    }

    pub fn as_operator(&self) -> Option<&OperatorData> {
        match &self.records {
            Records::Operator(d) => Some(d),
            Records::Function(_) => None,
        }
    }
}
