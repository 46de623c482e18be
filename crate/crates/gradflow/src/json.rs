//! The chain JSON schema and trajectory CSV export.
//!
//! A chain file is `{"states": ["s0", ...], "Q": [[...], ...]}` with an
//! optional `"labels"` map. CSV trajectories carry the header
//! `t,s0,...,sd` and 17 significant digits per value.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowsim::Trajectory;
use crate::markov_core::{Generator, MarkovError};
use crate::zoo::ChainSpec;

#[derive(Debug, Error)]
pub enum ChainJsonError {
    #[error("invalid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("Q must be a non-empty square matrix, got {rows} rows")]
    NotSquare { rows: usize },
    #[error("states list has {states} names but Q has {rows} rows")]
    StateCountMismatch { states: usize, rows: usize },
    #[error("invalid generator: {0}")]
    Generator(#[from] MarkovError),
}

/// Serialized form of a chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<String>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<String, String>>,
}

impl ChainJson {
    pub fn from_str(text: &str) -> Result<Self, ChainJsonError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_generator(&self) -> Result<Generator, ChainJsonError> {
        let rows = self.q.len();
        if rows < 2 || self.q.iter().any(|r| r.len() != rows) {
            return Err(ChainJsonError::NotSquare { rows });
        }
        if let Some(states) = &self.states {
            if states.len() != rows {
                return Err(ChainJsonError::StateCountMismatch {
                    states: states.len(),
                    rows,
                });
            }
        }
        let flat: Vec<f64> = self.q.iter().flatten().copied().collect();
        Ok(Generator::new(DMatrix::from_row_slice(rows, rows, &flat))?)
    }

    /// Names of the states, defaulting to `s0..sd`.
    pub fn state_names(&self) -> Vec<String> {
        match &self.states {
            Some(s) => s.clone(),
            None => (0..self.q.len()).map(|i| format!("s{i}")).collect(),
        }
    }

    pub fn from_generator(q: &Generator) -> Self {
        let n = q.n_states();
        Self {
            states: Some((0..n).map(|i| format!("s{i}")).collect()),
            q: (0..n)
                .map(|i| (0..n).map(|j| q.rates()[(i, j)]).collect())
                .collect(),
            labels: None,
        }
    }

    pub fn from_chain_spec(spec: &ChainSpec) -> Self {
        let mut json = Self::from_generator(&spec.generator);
        let mut labels = BTreeMap::new();
        labels.insert("family".to_string(), spec.name.clone());
        json.labels = Some(labels);
        json
    }
}

/// 17 significant digits, the round-trip-exact decimal length for f64, with
/// an explicit sign on the exponent so every serialization path emits the
/// same bytes.
pub fn format_f64(x: f64) -> String {
    let s = format!("{x:.16e}");
    let (mantissa, exp) = s.split_once('e').expect("LowerExp always emits 'e'");
    let exp: i32 = exp.parse().expect("LowerExp exponent is an integer");
    format!("{mantissa}e{exp:+}")
}

/// CSV with header `t,s0,...,sd`, one row per sample.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let d1 = traj.states()[0].len();
    let mut out = String::from("t");
    for i in 0..d1 {
        out.push_str(&format!(",s{i}"));
    }
    out.push('\n');
    for (t, state) in traj.times().iter().zip(traj.states()) {
        out.push_str(&format_f64(*t));
        for x in state.mass().iter() {
            out.push(',');
            out.push_str(&format_f64(*x));
        }
        out.push('\n');
    }
    out
}
