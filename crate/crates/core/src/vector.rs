//! Small dense-vector helpers shared by the numerical modules.

use serde::{Deserialize, Serialize};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `alpha * x + beta * y`
pub fn lincomb(alpha: f64, x: &[f64], beta: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + beta * b).collect()
}

pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn l2_norm(a: &[f64]) -> f64 {
    squared_norm(a).sqrt()
}

pub fn mean_squared_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// How a residual vector is turned into a scalar loss.
///
/// `MeanSquares` is `||x||^2 / d`, smooth at zero. `L2` is the plain Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    #[serde(alias = "msq", alias = "sum_of_squares")]
    MeanSquares,
    L2,
}

impl NormMode {
    pub fn apply(self, x: &[f64]) -> f64 {
        match self {
            NormMode::MeanSquares => {
                if x.is_empty() {
                    0.0
                } else {
                    squared_norm(x) / x.len() as f64
                }
            }
            NormMode::L2 => l2_norm(x),
        }
    }

    /// Gradient of `apply(x)` with respect to `x`. The L2 norm uses the zero
    /// subgradient at the origin.
    pub fn gradient(self, x: &[f64]) -> Vec<f64> {
        match self {
            NormMode::MeanSquares => scale(x, 2.0 / x.len().max(1) as f64),
            NormMode::L2 => {
                let n = l2_norm(x);
                if n == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    scale(x, 1.0 / n)
                }
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "msq" | "mean_squares" | "sum_of_squares" => Some(NormMode::MeanSquares),
            "l2" => Some(NormMode::L2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::MeanSquares => "msq",
            NormMode::L2 => "l2",
        }
    }
}
