//! Quadratic-time maximum mean discrepancy with a mixture of Gaussian RBF
//! kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Biased,
    Unbiased,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biased" => Ok(Estimator::Biased),
            "unbiased" => Ok(Estimator::Unbiased),
            other => Err(Error::invalid(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    /// Each kernel bandwidth is `base × multiplier`.
    pub bandwidth_multipliers: Vec<f64>,
    /// Derive the base bandwidth from the pooled sample; otherwise use
    /// `fixed_bandwidth`.
    pub use_median_heuristic: bool,
    pub fixed_bandwidth: Option<f64>,
    pub estimator: Estimator,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            use_median_heuristic: true,
            fixed_bandwidth: None,
            estimator: Estimator::Biased,
        }
    }
}

impl MmdConfig {
    /// Single kernel of bandwidth `sigma`, biased estimator.
    pub fn single(sigma: f64) -> Self {
        Self {
            bandwidth_multipliers: vec![1.0],
            use_median_heuristic: false,
            fixed_bandwidth: Some(sigma),
            estimator: Estimator::Biased,
        }
    }

    /// Same multipliers and estimator, but with the base bandwidth pinned.
    pub fn frozen(&self, base: f64) -> Self {
        Self {
            use_median_heuristic: false,
            fixed_bandwidth: Some(base),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_multipliers.is_empty() {
            return Err(Error::invalid("at least one bandwidth multiplier required"));
        }
        if self.bandwidth_multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("bandwidth multipliers must be positive"));
        }
        match (self.use_median_heuristic, self.fixed_bandwidth) {
            (false, None) => Err(Error::invalid(
                "fixed_bandwidth required when the median heuristic is off",
            )),
            (_, Some(b)) if !(b > 0.0) => Err(Error::invalid("fixed_bandwidth must be positive")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmdResult {
    pub mmd_squared: f64,
    pub bandwidths_used: Vec<f64>,
    pub grad_source: Option<Matrix>,
    pub grad_target: Option<Matrix>,
}

/// `K_ij = exp(−‖x_i − y_j‖² / (2σ²))`.
pub fn rbf_kernel_matrix(x: &Matrix, y: &Matrix, sigma: f64) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "rbf_kernel_matrix",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidth must be positive, got {sigma}"
        )));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        (-gamma * squared_distance(x.row(i), y.row(j))).exp()
    }))
}

/// Median pairwise Euclidean distance over the pooled rows of `x` and `y`.
/// Falls back to 1.0 when the median distance is zero.
pub fn median_heuristic(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|j| y.row(j)))
        .collect();
    let n = pooled.len();
    if n < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(squared_distance(pooled[i], pooled[j]).sqrt());
        }
    }
    let mid = dists.len() / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Squared MMD between the row samples `x` and `y`, averaged over the kernel
/// mixture. Bandwidths are treated as constants when differentiating, even
/// when they come from the median heuristic.
pub fn mmd2(x: &Matrix, y: &Matrix, cfg: &MmdConfig, with_grad: bool) -> Result<MmdResult> {
    cfg.validate()?;
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd2",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let (n, m) = (x.rows(), y.rows());
    let min_samples = match cfg.estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if n < min_samples || m < min_samples {
        return Err(Error::invalid(format!(
            "{:?} estimator needs at least {min_samples} samples per side, got {n} and {m}",
            cfg.estimator
        )));
    }

    let base = if cfg.use_median_heuristic {
        median_heuristic(x, y)
    } else {
        cfg.fixed_bandwidth.expect("validated")
    };
    let bandwidths: Vec<f64> = cfg.bandwidth_multipliers.iter().map(|k| base * k).collect();
    let n_kernels = bandwidths.len() as f64;

    // Pair weights: within-sample sums exclude the diagonal for the unbiased
    // estimator; diagonal entries carry no gradient either way.
    let (w_xx, w_yy) = match cfg.estimator {
        Estimator::Biased => (1.0 / (n * n) as f64, 1.0 / (m * m) as f64),
        Estimator::Unbiased => (1.0 / (n * (n - 1)) as f64, 1.0 / (m * (m - 1)) as f64),
    };
    let w_xy = 2.0 / (n * m) as f64;
    let diagonal = cfg.estimator == Estimator::Biased;

    let d = x.cols();
    let weight = 1.0 / n_kernels;
    let gammas: Vec<f64> = bandwidths.iter().map(|s| 0.5 / (s * s)).collect();
    let mut gx = Matrix::zeros(n, d);
    let mut gy = Matrix::zeros(m, d);

    // Sum of the kernel mixture at squared distance `d2`, and the coefficient
    // c with ∂k/∂a = c·(a − b).
    let mixture = |d2: f64| -> (f64, f64) {
        gammas.iter().fold((0.0, 0.0), |(k_acc, c_acc), &g| {
            let k = (-g * d2).exp();
            (k_acc + k, c_acc - 2.0 * g * k)
        })
    };

    // Σ_{i≠j} within one sample, visiting each unordered pair once.
    let within = |s: &Matrix, g: &mut Matrix, w: f64| -> f64 {
        let mut acc = if diagonal {
            s.rows() as f64 * n_kernels
        } else {
            0.0
        };
        for i in 0..s.rows() {
            for j in i + 1..s.rows() {
                let (k, c) = mixture(squared_distance(s.row(i), s.row(j)));
                acc += 2.0 * k;
                if with_grad {
                    let c = 2.0 * c * w * weight;
                    for t in 0..d {
                        let diff = s[(i, t)] - s[(j, t)];
                        g[(i, t)] += c * diff;
                        g[(j, t)] -= c * diff;
                    }
                }
            }
        }
        acc * w
    };
    let k_xx = within(x, &mut gx, w_xx);
    let k_yy = within(y, &mut gy, w_yy);

    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            let (k, c) = mixture(squared_distance(x.row(i), y.row(j)));
            cross += k;
            if with_grad {
                let c = -w_xy * c * weight;
                for t in 0..d {
                    let diff = x[(i, t)] - y[(j, t)];
                    gx[(i, t)] += c * diff;
                    gy[(j, t)] -= c * diff;
                }
            }
        }
    }
    let value = weight * (k_xx + k_yy - w_xy * cross);

    Ok(MmdResult {
        mmd_squared: value,
        bandwidths_used: bandwidths,
        grad_source: with_grad.then_some(gx),
        grad_target: with_grad.then_some(gy),
    })
}
