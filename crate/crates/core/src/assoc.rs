//! Association loss between a labeled source batch and an unlabeled target
//! batch.
//!
//! Embeddings are compared by dot product, `M = A Bᵀ`. Row softmaxes of `M`
//! and `Mᵀ` give the transition probabilities of a walker stepping from
//! source to target (`P^ab`) and back (`P^ba`). Two losses are built on them:
//!
//! * the walker loss, the cross-entropy between the round-trip probabilities
//!   `P^aba = P^ab P^ba` and a target `T` that is uniform over same-class
//!   source samples;
//! * the visit loss, the cross-entropy between the uniform distribution over
//!   target samples and the mean probability `P^visit` of landing on each
//!   target sample.
//!
//! [`assoc_forward_backward`] returns both values and the exact gradients
//! with respect to both embedding batches.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, LOG_CLAMP};

/// A batch of embedding vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::invalid(format!(
                "embedding batch must be non-empty, got {:?}",
                matrix.shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::invalid("embedding batch contains non-finite values"));
        }
        Ok(Self(matrix))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} at position {i} is outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// A matrix whose rows are probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(Matrix);

impl StochasticMatrix {
    /// Wraps `m` after checking every row is nonnegative and sums to 1
    /// within `1e-9`.
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, s) in m.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 || m.row(i).iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "row {i} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl Deref for StochasticMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssocConfig {
    /// Weight of the walker loss.
    pub walker_weight: f64,
    /// Weight of the visit loss.
    pub visit_weight: f64,
    /// Floor applied to probabilities inside logarithms.
    pub clamp: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            walker_weight: 1.0,
            visit_weight: 0.5,
            clamp: LOG_CLAMP,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.walker_weight >= 0.0 && self.visit_weight >= 0.0) {
            return Err(Error::invalid("association weights must be nonnegative"));
        }
        if !(self.clamp > 0.0 && self.clamp <= 1e-6) {
            return Err(Error::invalid(format!(
                "clamp {} outside (0, 1e-6]",
                self.clamp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssocResult {
    /// `walker_weight · walker + visit_weight · visit`
    pub total: f64,
    pub walker: f64,
    pub visit: f64,
    /// ∂total/∂A
    pub grad_source: Matrix,
    /// ∂total/∂B
    pub grad_target: Matrix,
}

/// `M_ij = ⟨A_i, B_j⟩`.
pub fn similarity_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op: "similarity_matrix",
            left: a.matrix().shape(),
            right: b.matrix().shape(),
        });
    }
    linalg::matmul_transpose_b(a.matrix(), b.matrix())
}

/// Source→target (`P^ab`, softmax over rows of `M`) and target→source
/// (`P^ba`, softmax over rows of `Mᵀ`) transition probabilities.
pub fn transitions(m: &Matrix) -> (StochasticMatrix, StochasticMatrix) {
    let p_ab = linalg::row_softmax(m);
    let p_ba = linalg::row_softmax(&m.transpose());
    (StochasticMatrix(p_ab), StochasticMatrix(p_ba))
}

/// Round-trip probabilities `P^aba = P^ab P^ba`.
pub fn roundtrip(p_ab: &StochasticMatrix, p_ba: &StochasticMatrix) -> Result<StochasticMatrix> {
    linalg::matmul(p_ab, p_ba).map(StochasticMatrix)
}

/// Uniform over source samples sharing the class of the row's sample.
pub fn walker_target(labels: &LabelVector) -> StochasticMatrix {
    let counts = labels.class_counts();
    let l = labels.labels();
    StochasticMatrix(Matrix::from_fn(l.len(), l.len(), |i, j| {
        if l[i] == l[j] {
            1.0 / counts[l[i]] as f64
        } else {
            0.0
        }
    }))
}

/// Probability of visiting each target sample when starting from a source
/// sample chosen uniformly at random.
pub fn visit_distribution(p_ab: &StochasticMatrix) -> Vec<f64> {
    let n_s = p_ab.rows() as f64;
    let mut visit = vec![0.0; p_ab.cols()];
    for i in 0..p_ab.rows() {
        for (v, &p) in visit.iter_mut().zip(p_ab.row(i)) {
            *v += p;
        }
    }
    visit.iter_mut().for_each(|v| *v /= n_s);
    visit
}

/// Walker and visit losses with their gradients with respect to both
/// embedding batches.
pub fn assoc_forward_backward(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    labels: &LabelVector,
    cfg: &AssocConfig,
) -> Result<AssocResult> {
    cfg.validate()?;
    if labels.len() != a.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} source embeddings",
            labels.len(),
            a.len()
        )));
    }
    if b.is_empty() {
        return Err(Error::invalid("target batch is empty"));
    }
    let n_s = a.len();
    let n_t = b.len();
    let clamp = cfg.clamp;

    let m = similarity_matrix(a, b)?;
    let (p_ab, p_ba) = transitions(&m);
    let p_aba = roundtrip(&p_ab, &p_ba)?;
    let target = walker_target(labels);
    let walker = linalg::cross_entropy_rows(&target, &p_aba, clamp)?;

    let visit_probs = visit_distribution(&p_ab);
    let uniform = 1.0 / n_t as f64;
    let visit: f64 = visit_probs
        .iter()
        .map(|&p| -uniform * p.max(clamp).ln())
        .sum();

    let total = cfg.walker_weight * walker + cfg.visit_weight * visit;

    // ∂/∂P^aba of the weighted walker term; clamped entries are flat.
    let mut g_aba = Matrix::zeros(n_s, n_s);
    if cfg.walker_weight != 0.0 {
        let scale = -cfg.walker_weight / n_s as f64;
        for i in 0..n_s {
            for j in 0..n_s {
                let t = target[(i, j)];
                let p = p_aba[(i, j)];
                if t != 0.0 && p > clamp {
                    g_aba[(i, j)] = scale * t / p;
                }
            }
        }
    }

    // P^aba = P^ab P^ba
    let mut g_ab = linalg::matmul_transpose_b(&g_aba, &p_ba)?;
    let g_ba = linalg::matmul_transpose_a(&p_ab, &g_aba)?;

    if cfg.visit_weight != 0.0 {
        let scale = -cfg.visit_weight * uniform / n_s as f64;
        let g_visit: Vec<f64> = visit_probs
            .iter()
            .map(|&p| if p > clamp { scale / p } else { 0.0 })
            .collect();
        for i in 0..n_s {
            for (g, &gv) in g_ab.row_mut(i).iter_mut().zip(&g_visit) {
                *g += gv;
            }
        }
    }

    let mut g_m = linalg::row_softmax_backward(&p_ab, &g_ab);
    let g_mt = linalg::row_softmax_backward(&p_ba, &g_ba);
    for i in 0..n_s {
        for j in 0..n_t {
            g_m[(i, j)] += g_mt[(j, i)];
        }
    }

    // M = A Bᵀ
    let grad_source = linalg::matmul(&g_m, b.matrix())?;
    let grad_target = linalg::matmul_transpose_a(&g_m, a.matrix())?;

    Ok(AssocResult {
        total,
        walker,
        visit,
        grad_source,
        grad_target,
    })
}
