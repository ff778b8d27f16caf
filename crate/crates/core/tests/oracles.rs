//! Library results checked against straightforward independent
//! re-implementations and hand-built fixtures.

use std::collections::BTreeMap;

use assocda::data::{self, DomainPairSpec, Generator};
use assocda::harness::{self, Regime, TrainConfig};
use assocda::linalg::{self, Matrix};
use assocda::mmd::{self, Estimator, MmdConfig};
use assocda::network::{self, Activation, AdamState, MlpParams, MlpSpec};
use assocda::{Error, IdxError, LabelVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn gaussian_cloud(n: usize, d: usize, offset: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, j| {
        let z: f64 = StandardNormal.sample(rng);
        z + if j == 0 { offset } else { 0.0 }
    })
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; b.cols()]; a.rows()];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for k in 0..a.cols() {
                *cell += a[(i, k)] * b[(k, j)];
            }
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (n, k, m) = (
            r.random_range(1..7),
            r.random_range(1..7),
            r.random_range(1..7),
        );
        let a = random_matrix(n, k, &mut r);
        let b = random_matrix(k, m, &mut r);
        let want = naive_matmul(&a, &b);
        let got = linalg::matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                assert!((got[(i, j)] - want[i][j]).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        assert!(
            linalg::matmul_transpose_b(&a, &bt)
                .unwrap()
                .max_abs_diff(&got)
                < 1e-12
        );
    }

    // Stochastic 3×4 by 4×3 pair.
    let a = linalg::row_softmax(&random_matrix(3, 4, &mut r));
    let b = linalg::row_softmax(&random_matrix(4, 3, &mut r));
    let got = linalg::matmul(&a, &b).unwrap();
    let want = naive_matmul(&a, &b);
    for i in 0..3 {
        let s: f64 = want[i].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((got[(i, j)] - want[i][j]).abs() < 1e-12);
        }
    }
}

fn rbf(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Double-loop MMD² over an equally weighted kernel mixture.
fn naive_mmd2(x: &Matrix, y: &Matrix, sigmas: &[f64], unbiased: bool) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        sigmas.iter().map(|&s| rbf(a, b, s)).sum::<f64>() / sigmas.len() as f64
    };
    let (n, m) = (x.rows(), y.rows());
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if !(unbiased && i == j) {
                kxx += k(x.row(i), x.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if !(unbiased && i == j) {
                kyy += k(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            kxy += k(x.row(i), y.row(j));
        }
    }
    let (n, m) = (n as f64, m as f64);
    if unbiased {
        kxx / (n * (n - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (n * m)
    } else {
        kxx / (n * n) + kyy / (m * m) - 2.0 * kxy / (n * m)
    }
}

fn sorted_median(x: &Matrix, y: &Matrix) -> f64 {
    let pooled = Matrix::vstack(x, y).unwrap();
    let mut d = Vec::new();
    for i in 0..pooled.rows() {
        for j in i + 1..pooled.rows() {
            d.push(linalg::squared_distance(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

#[test]
fn kernel_matrix_matches_double_loop() {
    let mut r = rng(3);
    let x = random_matrix(3, 2, &mut r);
    let y = random_matrix(4, 2, &mut r);
    let k = mmd::rbf_kernel_matrix(&x, &y, 0.7).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert!((k[(i, j)] - rbf(x.row(i), y.row(j), 0.7)).abs() < 1e-12);
        }
    }
}

#[test]
fn median_heuristic_matches_sorting() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let x = random_matrix(4 + seed as usize % 3, 3, &mut r);
        let y = random_matrix(6, 3, &mut r);
        assert_eq!(mmd::median_heuristic(&x, &y), sorted_median(&x, &y));
    }
    let same = Matrix::filled(3, 2, 1.5);
    assert_eq!(mmd::median_heuristic(&same, &same), 1.0);
}

#[test]
fn mmd_matches_double_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let d = r.random_range(1..5);
        let x = random_matrix(r.random_range(2..9), d, &mut r);
        let y = random_matrix(r.random_range(2..9), d, &mut r);
        for estimator in [Estimator::Biased, Estimator::Unbiased] {
            let cfg = MmdConfig {
                estimator,
                ..MmdConfig::default()
            };
            let got = mmd::mmd2(&x, &y, &cfg, false).unwrap();
            let base = sorted_median(&x, &y);
            let sigmas: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0]
                .iter()
                .map(|m| m * base)
                .collect();
            assert_eq!(got.bandwidths_used.len(), 5);
            for (a, b) in got.bandwidths_used.iter().zip(&sigmas) {
                assert!((a - b).abs() < 1e-12);
            }
            let want = naive_mmd2(&x, &y, &sigmas, estimator == Estimator::Unbiased);
            assert!(
                (got.mmd_squared - want).abs() < 1e-10,
                "seed {seed}: {} vs {want}",
                got.mmd_squared
            );
        }
    }
}

#[test]
fn mmd_grows_with_cloud_separation() {
    let mut r = rng(5);
    let x = gaussian_cloud(150, 2, 0.0, &mut r);
    let base = gaussian_cloud(150, 2, 0.0, &mut r);
    let cfg = MmdConfig {
        bandwidth_multipliers: vec![1.0],
        ..MmdConfig::default()
    };
    let values: Vec<f64> = [0.0, 1.25, 2.5, 3.75, 5.0]
        .iter()
        .map(|&shift| {
            let y = Matrix::from_fn(150, 2, |i, j| {
                base[(i, j)] + if j == 0 { shift } else { 0.0 }
            });
            mmd::mmd2(&x, &y, &cfg, false).unwrap().mmd_squared
        })
        .collect();
    assert!(values.windows(2).all(|w| w[0] < w[1]), "{values:?}");
}

/// Straight-line forward recurrence.
fn naive_forward(params: &MlpParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let act = |v: f64| match params.spec.activation {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    };
    let mut h = x.to_vec();
    let last = params.layers.len() - 1;
    for layer in &params.layers[..last] {
        h = (0..layer.weights.cols())
            .map(|j| {
                act(layer.bias[j]
                    + (0..h.len())
                        .map(|k| h[k] * layer.weights[(k, j)])
                        .sum::<f64>())
            })
            .collect();
    }
    let out = &params.layers[last];
    let logits = (0..out.weights.cols())
        .map(|j| {
            out.bias[j]
                + (0..h.len())
                    .map(|k| h[k] * out.weights[(k, j)])
                    .sum::<f64>()
        })
        .collect();
    (h, logits)
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut r = rng(8);
    for (seed, activation) in [(1, Activation::Relu), (2, Activation::Tanh)] {
        let spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![6, 5],
            embedding_dim: 4,
            num_classes: 3,
            activation,
            seed,
        };
        let mut params = network::init_params(&spec).unwrap();
        // Nonzero biases so they are exercised too.
        for layer in &mut params.layers {
            for b in &mut layer.bias {
                *b = r.random_range(-0.5..0.5);
            }
        }
        let x = random_matrix(7, 3, &mut r);
        let trace = network::forward(&params, &x).unwrap();
        for i in 0..7 {
            let (emb, logits) = naive_forward(&params, x.row(i));
            for (a, b) in trace.embeddings.matrix().row(i).iter().zip(&emb) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in trace.logits.row(i).iter().zip(&logits) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn init_weight_scale() {
    let fan_in = 40;
    for seed in 0..5 {
        let spec = MlpSpec {
            input_dim: fan_in,
            hidden_dims: vec![],
            embedding_dim: 25,
            num_classes: 2,
            activation: Activation::Relu,
            seed,
        };
        let params = network::init_params(&spec).unwrap();
        let w = params.layers[0].weights.data();
        assert_eq!(w.len(), 1000);
        let mean = w.iter().sum::<f64>() / 1000.0;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let want = 1.0 / (fan_in as f64).sqrt();
        assert!(
            (std / want - 1.0).abs() < 0.2,
            "seed {seed}: std {std} vs {want}"
        );
        assert!(params.layers[0].bias.iter().all(|&b| b == 0.0));
    }
}

#[test]
fn adam_converges_on_a_quadratic() {
    // f(w) = ½ Σ q_i (w_i − c_i)²
    let mut r = rng(21);
    let q: Vec<f64> = (0..6).map(|_| r.random_range(0.5..3.0)).collect();
    let c: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut state = AdamState::new(6);
    let grad = |w: &[f64]| -> Vec<f64> { (0..6).map(|i| q[i] * (w[i] - c[i])).collect() };
    for _ in 0..200 {
        let g = grad(&w);
        state.step_slice(&mut w, &g, 0.05).unwrap();
    }
    let norm = grad(&w).iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "gradient norm {norm}");
}

#[test]
fn separable_gaussians_are_learned_exactly() {
    let mut r = rng(4);
    let n = 200;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(n, 2, |i, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        0.5 * z + if labels[i] == 0 { -2.0 } else { 2.0 }
    });
    let labels = LabelVector::new(labels, 2).unwrap();
    let spec = MlpSpec {
        input_dim: 2,
        hidden_dims: vec![],
        embedding_dim: 8,
        num_classes: 2,
        activation: Activation::Relu,
        seed: 4,
    };
    let mut params = network::init_params(&spec).unwrap();
    let mut adam = AdamState::new(params.num_params());
    let mut reached = None;
    for step in 0..2000 {
        let trace = network::forward(&params, &x).unwrap();
        let (_, grads) = network::classification_loss_and_grads(&trace, &params, &labels).unwrap();
        network::optimizer_step(&mut params, &grads, &mut adam, 1e-2).unwrap();
        if network::error_pct(&params, &x, &labels).unwrap() == 0.0 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "train error never reached zero");
}

/// Two 2×3 images and their labels, written out byte by byte.
fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let images = vec![
        0x00, 0x00, 0x08, 0x03, // magic
        0x00, 0x00, 0x00, 0x02, // count
        0x00, 0x00, 0x00, 0x02, // rows
        0x00, 0x00, 0x00, 0x03, // cols
        0, 51, 102, 153, 204, 255, // image 0
        255, 0, 255, 0, 17, 34, // image 1
    ];
    let labels = vec![
        0x00, 0x00, 0x08, 0x01, // magic
        0x00, 0x00, 0x00, 0x02, // count
        7, 3,
    ];
    (images, labels)
}

#[test]
fn idx_fixture_parses_exactly() {
    let (images, labels) = idx_fixture();
    let (x, y) = data::parse_idx(&images, &labels).unwrap();
    assert_eq!(x.shape(), (2, 6));
    assert_eq!(x.row(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(x.row(1), &[1.0, 0.0, 1.0, 0.0, 17.0 / 255.0, 34.0 / 255.0]);
    assert_eq!(y, vec![7, 3]);

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let ds = data::load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.inputs(), &x);
    assert_eq!(ds.training_labels().unwrap().labels(), &[7, 3]);
}

#[test]
fn idx_errors_are_distinct() {
    let (images, labels) = idx_fixture();
    let mut bad_magic = images.clone();
    bad_magic[3] = 0x01;
    assert!(matches!(
        data::parse_idx(&bad_magic, &labels),
        Err(IdxError::BadMagic { .. })
    ));
    assert!(matches!(
        data::parse_idx(&images[..images.len() - 1], &labels),
        Err(IdxError::Truncated { .. })
    ));
    let mut three_labels = labels.clone();
    three_labels[7] = 3;
    three_labels.push(1);
    assert!(matches!(
        data::parse_idx(&images, &three_labels),
        Err(IdxError::CountMismatch {
            images: 2,
            labels: 3
        })
    ));
    let err = data::load_idx(
        std::path::Path::new("/nonexistent/img"),
        std::path::Path::new("/nonexistent/lbl"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn grid_blob_means_sit_on_the_grid() {
    let spec = DomainPairSpec {
        generator: Generator::GaussianGrid,
        num_classes: 4,
        rotation: 0.0,
        noise_std: 0.1,
        train_samples: 2000,
        seed: 9,
        ..DomainPairSpec::default()
    };
    let pair = data::gen_pair(&spec).unwrap();
    let centers = data::grid_centers(4, spec.grid_spacing);
    let labels = pair.source.training_labels().unwrap();
    for (class, members) in data::class_indices(labels).iter().enumerate() {
        let n = members.len() as f64;
        for (j, &center) in centers[class].iter().enumerate() {
            let mean = members
                .iter()
                .map(|&i| pair.source.inputs()[(i, j)])
                .sum::<f64>()
                / n;
            let bound = 5.0 * spec.noise_std / n.sqrt();
            assert!(
                (mean - center).abs() < bound,
                "class {class} axis {j}: {mean}"
            );
        }
    }
}

#[test]
fn generators_are_pure_and_hide_target_labels() {
    let spec = DomainPairSpec::default();
    let a = data::gen_pair(&spec).unwrap();
    assert_eq!(a, data::gen_pair(&spec).unwrap());
    assert_ne!(
        a.source,
        data::gen_pair(&DomainPairSpec {
            seed: 1,
            ..spec.clone()
        })
        .unwrap()
        .source
    );
    for ds in [&a.target, &a.target_test] {
        assert!(ds.training_labels().is_none());
        assert!(ds.eval_labels().is_some());
    }
    assert!(a.source.training_labels().is_some());

    // A null shift reproduces the source draw.
    let null = data::gen_pair(&DomainPairSpec {
        rotation: 0.0,
        ..spec
    })
    .unwrap();
    assert_eq!(null.source.inputs(), null.target.inputs());
}

fn small_run(regime: Regime, steps: usize, seed: u64) -> (data::DomainPair, MlpSpec, TrainConfig) {
    let pair = data::gen_pair(&DomainPairSpec {
        train_samples: 300,
        test_samples: 300,
        seed,
        ..DomainPairSpec::default()
    })
    .unwrap();
    let mlp = MlpSpec {
        hidden_dims: vec![16],
        embedding_dim: 8,
        seed,
        ..MlpSpec::default()
    };
    let cfg = TrainConfig {
        total_steps: steps,
        base_lr: 1e-3,
        assoc_delay_steps: steps / 4,
        unlabeled_batch_size: 40,
        eval_every: steps / 2,
        regime,
        seed,
        mmd_weight: 0.7,
        ..TrainConfig::default()
    };
    (pair, mlp, cfg)
}

#[test]
fn logged_losses_obey_the_composite_objective() {
    for regime in Regime::ALL {
        let (pair, mlp, cfg) = small_run(regime, 120, 3);
        let report = harness::train(&pair, &mlp, &cfg).unwrap().report;
        assert_eq!(report.loss_trace.len(), 120);
        for rec in &report.loss_trace {
            assert_eq!(rec.lr, harness::lr_schedule(rec.step, &cfg));
            assert_eq!(rec.alpha, harness::alpha_schedule(rec.step, &cfg));
            let extra = match regime {
                Regime::DaAssoc => {
                    cfg.assoc.walker_weight * rec.loss_walker
                        + cfg.assoc.visit_weight * rec.loss_visit
                }
                Regime::DaMmd => cfg.mmd_weight * rec.loss_mmd,
                _ => 0.0,
            };
            let want = rec.loss_class + rec.alpha * extra;
            assert!(
                (rec.loss_total - want).abs() < 1e-10,
                "{regime} step {}",
                rec.step
            );
            if rec.alpha > 0.0 && regime == Regime::DaAssoc {
                assert!(rec.loss_walker > 0.0 && rec.loss_visit > 0.0);
            }
        }
        assert_eq!(report.labeled_draws, 120);
        let expected_unlabeled = if regime.adapts() { 120 } else { 0 };
        assert_eq!(report.unlabeled_draws, expected_unlabeled, "{regime}");
        assert_eq!(report.eval_trace.len(), 2);
    }
}

#[test]
fn training_is_deterministic_and_alpha_zero_collapses_to_source_only() {
    let (pair, mlp, cfg) = small_run(Regime::DaAssoc, 150, 4);
    let a = harness::train(&pair, &mlp, &cfg).unwrap();
    let b = harness::train(&pair, &mlp, &cfg).unwrap();
    assert_eq!(
        harness::trace_csv(&a.report.loss_trace),
        harness::trace_csv(&b.report.loss_trace)
    );
    assert_eq!(a.params, b.params);

    let muted = harness::train(
        &pair,
        &mlp,
        &TrainConfig {
            alpha_after_delay: 0.0,
            ..cfg.clone()
        },
    )
    .unwrap();
    let so = harness::train(
        &pair,
        &mlp,
        &TrainConfig {
            regime: Regime::SourceOnly,
            ..cfg
        },
    )
    .unwrap();
    for (x, y) in muted.report.loss_trace.iter().zip(&so.report.loss_trace) {
        assert!((x.loss_total - y.loss_total).abs() < 1e-12);
        assert!((x.loss_class - y.loss_class).abs() < 1e-12);
    }
    assert_eq!(muted.params, so.params);
}

#[test]
fn source_only_degrades_on_the_shifted_target() {
    let pair = data::gen_pair(&DomainPairSpec::default()).unwrap();
    let mlp = MlpSpec::default();
    let cfg = TrainConfig {
        total_steps: 2000,
        base_lr: 1e-3,
        regime: Regime::SourceOnly,
        ..TrainConfig::default()
    };
    let report = harness::train(&pair, &mlp, &cfg).unwrap().report;
    assert!(report.final_source_error_pct < 3.0, "{report:?}");
    assert!(report.final_target_error_pct > 10.0, "{report:?}");
}

#[test]
fn embedding_mmd_report_is_consistent() {
    let (pair, mlp, base) = small_run(Regime::SourceOnly, 60, 5);
    let outcome =
        harness::run_experiment(&pair, &mlp, &base, &Regime::ALL, &MmdConfig::default()).unwrap();
    let again =
        harness::embedding_mmd_report(&outcome.models, &pair, &MmdConfig::default()).unwrap();
    assert_eq!(outcome.report.embedding_mmd, again);
    for row in &again {
        assert!(row.mmd_squared >= 0.0);
        assert_eq!(
            Some(row.mmd_squared),
            outcome.run(row.regime).unwrap().final_embedding_mmd
        );
    }

    let mut without_so: BTreeMap<Regime, MlpParams> = outcome.models.clone();
    without_so.remove(&Regime::SourceOnly);
    assert!(harness::embedding_mmd_report(&without_so, &pair, &MmdConfig::default()).is_err());
}
