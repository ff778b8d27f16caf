//! Central finite-difference verification of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::assoc::{assoc_forward_backward, AssocConfig, EmbeddingBatch, LabelVector};
use crate::error::Result;
use crate::harness::{composite_step, Regime, TrainConfig};
use crate::linalg::Matrix;
use crate::mmd::{self, MmdConfig};
use crate::network::{self, Activation, MlpParams, MlpSpec};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which differences are compared absolutely. Central
/// differences at `STEP` carry roughly 1e-10 of truncation and rounding
/// error, so this keeps near-zero partials from inflating the ratio.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Walker,
    Visit,
    Mmd,
    Classification,
    CompositeAssoc,
    CompositeMmd,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Walker,
        Component::Visit,
        Component::Mmd,
        Component::Classification,
        Component::CompositeAssoc,
        Component::CompositeMmd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Walker => "walker",
            Component::Visit => "visit",
            Component::Mmd => "mmd",
            Component::Classification => "classification",
            Component::CompositeAssoc => "composite_assoc",
            Component::CompositeMmd => "composite_mmd",
        }
    }
}

/// Deliberate corruption of an analytic gradient, used to prove the checker
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    WalkerSignFlip,
}

/// Where the worst mismatch occurred.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub instance: usize,
    /// `source`, `target` or `params`.
    pub tensor: &'static str,
    /// Flat (row-major) coordinate within the tensor.
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub instances: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst: Option<Worst>,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

struct Tracker {
    report: ComponentReport,
}

impl Tracker {
    fn new(component: Component) -> Self {
        Self {
            report: ComponentReport {
                component,
                instances: 0,
                coordinates: 0,
                max_relative_error: 0.0,
                worst: None,
            },
        }
    }

    fn record(&mut self, instance: usize, tensor: &'static str, analytic: &[f64], numeric: &[f64]) {
        for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = relative_error(a, n);
            self.report.coordinates += 1;
            if e > self.report.max_relative_error || e.is_nan() {
                self.report.max_relative_error = if e.is_nan() { f64::INFINITY } else { e };
                self.report.worst = Some(Worst {
                    instance,
                    tensor,
                    coordinate: k,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + STEP;
            let up = f(&probe);
            probe[k] = orig - STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// A random association instance: `(A, B, labels)` with `n_s, n_t ≤ 8` and
/// `d ≤ 5`.
pub fn random_assoc_instance(rng: &mut ChaCha8Rng) -> (Matrix, Matrix, LabelVector) {
    let n_s = rng.random_range(2..=8);
    let n_t = rng.random_range(1..=8);
    let d = rng.random_range(1..=5);
    let classes = rng.random_range(1..=3);
    let labels = (0..n_s).map(|_| rng.random_range(0..classes)).collect();
    (
        gaussian_matrix(n_s, d, rng),
        gaussian_matrix(n_t, d, rng),
        LabelVector::new(labels, classes).expect("labels in range"),
    )
}

fn check_assoc(
    component: Component,
    seed: u64,
    instances: usize,
    fault: Fault,
) -> Result<ComponentReport> {
    let cfg = match component {
        Component::Walker => AssocConfig {
            walker_weight: 1.0,
            visit_weight: 0.0,
            ..Default::default()
        },
        _ => AssocConfig {
            walker_weight: 0.0,
            visit_weight: 1.0,
            ..Default::default()
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new(component);
    for inst in 0..instances {
        let (a, b, labels) = random_assoc_instance(&mut rng);
        let loss = |a: &Matrix, b: &Matrix| -> f64 {
            assoc_forward_backward(
                &EmbeddingBatch::new(a.clone()).expect("finite"),
                &EmbeddingBatch::new(b.clone()).expect("finite"),
                &labels,
                &cfg,
            )
            .expect("valid instance")
            .total
        };
        let r = assoc_forward_backward(
            &EmbeddingBatch::new(a.clone())?,
            &EmbeddingBatch::new(b.clone())?,
            &labels,
            &cfg,
        )?;
        let flip = if component == Component::Walker && fault == Fault::WalkerSignFlip {
            -1.0
        } else {
            1.0
        };
        let num_a = numeric_gradient(a.data(), |v| {
            loss(
                &Matrix::from_vec(a.rows(), a.cols(), v.to_vec()).unwrap(),
                &b,
            )
        });
        let num_b = numeric_gradient(b.data(), |v| {
            loss(
                &a,
                &Matrix::from_vec(b.rows(), b.cols(), v.to_vec()).unwrap(),
            )
        });
        t.record(inst, "source", r.grad_source.scale(flip).data(), &num_a);
        t.record(inst, "target", r.grad_target.scale(flip).data(), &num_b);
        t.report.instances += 1;
    }
    Ok(t.report)
}

fn check_mmd(seed: u64, instances: usize) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new(Component::Mmd);
    for inst in 0..instances {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(2..=8);
        let d = rng.random_range(1..=5);
        let x = gaussian_matrix(n, d, &mut rng);
        let y = gaussian_matrix(m, d, &mut rng);
        // The median heuristic is held fixed while differentiating.
        let mut cfg = MmdConfig::default().frozen(mmd::median_heuristic(&x, &y));
        if inst % 2 == 1 {
            cfg.estimator = mmd::Estimator::Unbiased;
        }
        let r = mmd::mmd2(&x, &y, &cfg, true)?;
        let value =
            |x: &Matrix, y: &Matrix| mmd::mmd2(x, y, &cfg, false).expect("valid").mmd_squared;
        let num_x = numeric_gradient(x.data(), |v| {
            value(&Matrix::from_vec(n, d, v.to_vec()).unwrap(), &y)
        });
        let num_y = numeric_gradient(y.data(), |v| {
            value(&x, &Matrix::from_vec(m, d, v.to_vec()).unwrap())
        });
        t.record(
            inst,
            "source",
            r.grad_source.expect("requested").data(),
            &num_x,
        );
        t.record(
            inst,
            "target",
            r.grad_target.expect("requested").data(),
            &num_y,
        );
        t.report.instances += 1;
    }
    Ok(t.report)
}

fn random_network(rng: &mut ChaCha8Rng) -> Result<MlpParams> {
    let spec = MlpSpec {
        input_dim: rng.random_range(1..=4),
        hidden_dims: (0..rng.random_range(0..=2))
            .map(|_| rng.random_range(2..=5))
            .collect(),
        embedding_dim: rng.random_range(1..=5),
        num_classes: rng.random_range(2..=3),
        // Smooth activation keeps finite differences away from kinks.
        activation: Activation::Tanh,
        seed: rng.random(),
    };
    let mut params = network::init_params(&spec)?;
    // Nonzero biases so every code path carries signal.
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .map(|v| v + 0.1 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    params.set_flat(&flat)?;
    Ok(params)
}

fn check_network(component: Component, seed: u64, instances: usize) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new(component);
    for inst in 0..instances {
        let params = random_network(&mut rng)?;
        let spec = params.spec.clone();
        let n_l = rng.random_range(2..=8);
        let x = gaussian_matrix(n_l, spec.input_dim, &mut rng);
        let labels = LabelVector::new(
            (0..n_l)
                .map(|_| rng.random_range(0..spec.num_classes))
                .collect(),
            spec.num_classes,
        )?;
        let n_u = rng.random_range(2..=8);
        let xu = gaussian_matrix(n_u, spec.input_dim, &mut rng);
        let alpha = rng.random_range(0.5..2.0);

        let (regime, unlabeled) = match component {
            Component::CompositeAssoc => (Regime::DaAssoc, Some(&xu)),
            Component::CompositeMmd => (Regime::DaMmd, Some(&xu)),
            _ => (Regime::SourceOnly, None),
        };
        let mut cfg = TrainConfig {
            regime,
            mmd_weight: rng.random_range(0.5..2.0),
            ..Default::default()
        };
        cfg.assoc.visit_weight = rng.random_range(0.1..1.0);
        if regime == Regime::DaMmd {
            // Bandwidth frozen at the initial embeddings so the objective is
            // a fixed function of the parameters.
            let e_l = network::forward(&params, &x)?.embeddings.into_matrix();
            let e_u = network::forward(&params, &xu)?.embeddings.into_matrix();
            cfg.mmd = cfg.mmd.frozen(mmd::median_heuristic(&e_l, &e_u));
        }

        let analytic = composite_step(&params, &x, &labels, unlabeled, regime, alpha, &cfg)?
            .grads
            .to_flat();
        let mut probe = params.clone();
        let numeric = numeric_gradient(&params.to_flat(), |v| {
            probe.set_flat(v).expect("same size");
            composite_step(&probe, &x, &labels, unlabeled, regime, alpha, &cfg)
                .expect("valid instance")
                .total
        });
        t.record(inst, "params", &analytic, &numeric);
        t.report.instances += 1;
    }
    Ok(t.report)
}

/// Runs the finite-difference suite for one component.
pub fn check_component(
    component: Component,
    seed: u64,
    instances: usize,
    fault: Fault,
) -> Result<ComponentReport> {
    // Decorrelate the per-component instance streams.
    let seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ component as u64;
    match component {
        Component::Walker | Component::Visit => check_assoc(component, seed, instances, fault),
        Component::Mmd => check_mmd(seed, instances),
        Component::Classification | Component::CompositeAssoc | Component::CompositeMmd => {
            check_network(component, seed, instances)
        }
    }
}

pub fn check_all(seed: u64, instances: usize, fault: Fault) -> Result<Vec<ComponentReport>> {
    Component::ALL
        .iter()
        .map(|&c| check_component(c, seed, instances, fault))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_cubic() {
        let g = numeric_gradient(&[2.0, -1.0], |v| v[0].powi(3) + 4.0 * v[1]);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn sign_flip_is_caught() {
        let r = check_component(Component::Walker, 1, 3, Fault::WalkerSignFlip).unwrap();
        assert!(!r.passed());
        let r = check_component(Component::Visit, 1, 3, Fault::WalkerSignFlip).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
