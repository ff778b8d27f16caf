//! Training regimes, schedules, evaluation and reporting.
//!
//! Four regimes share one network architecture and one batch stream layout:
//!
//! * `source_only`: classification loss on labeled source batches;
//! * `target_only`: classification loss on labeled target batches, the
//!   evaluation-only ceiling that anchors coverage;
//! * `da_assoc`: source classification plus `α(step)` times the association
//!   loss between source and unlabeled target embeddings;
//! * `da_mmd`: the same with `mmd_weight · MMD²` in place of the
//!   association loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::{assoc_forward_backward, AssocConfig, LabelVector};
use crate::data::{self, BatchStream, DomainDataset, DomainPair};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mmd::{self, MmdConfig};
use crate::network::{self, AdamState, MlpParams, MlpSpec};

/// Stream ids for the labeled and unlabeled batch samplers.
pub const LABELED_STREAM: u64 = 10;
pub const UNLABELED_STREAM: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SourceOnly,
    TargetOnly,
    DaAssoc,
    DaMmd,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::SourceOnly,
        Regime::TargetOnly,
        Regime::DaAssoc,
        Regime::DaMmd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SourceOnly => "source_only",
            Regime::TargetOnly => "target_only",
            Regime::DaAssoc => "da_assoc",
            Regime::DaMmd => "da_mmd",
        }
    }

    /// Whether the regime draws unlabeled target batches.
    pub fn adapts(self) -> bool {
        matches!(self, Regime::DaAssoc | Regime::DaMmd)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub base_lr: f64,
    /// Applied to the learning rate for the last third of training.
    pub lr_decay_factor: f64,
    /// Labeled samples per class in each batch.
    pub per_class: usize,
    pub unlabeled_batch_size: usize,
    pub assoc: AssocConfig,
    /// Association weight once the delay has elapsed.
    pub alpha_after_delay: f64,
    pub assoc_delay_steps: usize,
    pub regime: Regime,
    pub mmd_weight: f64,
    /// Kernel configuration for the `da_mmd` training loss.
    pub mmd: MmdConfig,
    /// Test-set errors are recorded every this many steps and at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            base_lr: 1e-4,
            lr_decay_factor: 0.33,
            per_class: 10,
            unlabeled_batch_size: 100,
            assoc: AssocConfig::default(),
            alpha_after_delay: 1.0,
            assoc_delay_steps: 500,
            regime: Regime::DaAssoc,
            mmd_weight: 1.0,
            mmd: MmdConfig::default(),
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be >= 1"));
        }
        if self.assoc_delay_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "assoc delay {} exceeds total_steps {}",
                self.assoc_delay_steps, self.total_steps
            )));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::invalid(
                "learning rate and decay factor must be positive",
            ));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("per_class must be >= 1"));
        }
        if self.regime.adapts() && self.unlabeled_batch_size == 0 {
            return Err(Error::invalid("unlabeled_batch_size must be >= 1"));
        }
        if !(self.alpha_after_delay >= 0.0) || !(self.mmd_weight >= 0.0) {
            return Err(Error::invalid("alpha and mmd_weight must be nonnegative"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        self.assoc.validate()?;
        self.mmd.validate()
    }
}

/// Base rate for the first ⌈2/3⌉ of training, decayed afterwards.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let boundary = (2 * cfg.total_steps).div_ceil(3);
    if step < boundary {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.lr_decay_factor
    }
}

/// Step function: zero during the delay, `alpha_after_delay` from then on.
pub fn alpha_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.assoc_delay_steps {
        0.0
    } else {
        cfg.alpha_after_delay
    }
}

/// `(DA − SO) / (TO − SO)`, or `None` when SO and TO coincide.
pub fn coverage(so_err: f64, to_err: f64, da_err: f64) -> Option<f64> {
    let gap = to_err - so_err;
    if gap.abs() < 1e-9 {
        None
    } else {
        Some((da_err - so_err) / gap)
    }
}

/// Loss terms and parameter gradients for one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub total: f64,
    pub classification: f64,
    pub walker: f64,
    pub visit: f64,
    pub mmd: f64,
    pub grads: MlpParams,
}

/// Composite objective `classification + α·(adaptation loss)` and its
/// gradient. The adaptation term is skipped entirely while `alpha` is zero
/// or no unlabeled batch is given; its logged values are then zero.
pub fn composite_step(
    params: &MlpParams,
    labeled: &Matrix,
    labels: &LabelVector,
    unlabeled: Option<&Matrix>,
    regime: Regime,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let trace = network::forward(params, labeled)?;
    let (classification, mut grads) =
        network::classification_loss_and_grads(&trace, params, labels)?;
    let mut out = StepOutcome {
        total: classification,
        classification,
        walker: 0.0,
        visit: 0.0,
        mmd: 0.0,
        grads: params.zeros_like(),
    };
    if let (Some(unlabeled), true) = (unlabeled, alpha != 0.0 && regime.adapts()) {
        let trace_u = network::forward(params, unlabeled)?;
        let (coef, g_src, g_tgt) = match regime {
            Regime::DaAssoc => {
                let r = assoc_forward_backward(
                    &trace.embeddings,
                    &trace_u.embeddings,
                    labels,
                    &cfg.assoc,
                )?;
                out.walker = r.walker;
                out.visit = r.visit;
                out.total += alpha * r.total;
                (alpha, r.grad_source, r.grad_target)
            }
            Regime::DaMmd => {
                let r = mmd::mmd2(
                    trace.embeddings.matrix(),
                    trace_u.embeddings.matrix(),
                    &cfg.mmd,
                    true,
                )?;
                let coef = alpha * cfg.mmd_weight;
                out.mmd = r.mmd_squared;
                out.total += coef * r.mmd_squared;
                (
                    coef,
                    r.grad_source.expect("requested"),
                    r.grad_target.expect("requested"),
                )
            }
            Regime::SourceOnly | Regime::TargetOnly => unreachable!("non-adapting regime"),
        };
        grads.add_scaled(&network::backprop_external(&trace, params, &g_src)?, coef);
        grads.add_scaled(&network::backprop_external(&trace_u, params, &g_tgt)?, coef);
    }
    out.grads = grads;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_class: f64,
    pub loss_walker: f64,
    pub loss_visit: f64,
    pub loss_mmd: f64,
    pub lr: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub source_error_pct: f64,
    pub target_error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub regime: Regime,
    pub seed: u64,
    pub final_target_error_pct: f64,
    pub final_source_error_pct: f64,
    /// Filled in by [`embedding_mmd_report`]; absent for a lone run.
    pub final_embedding_mmd: Option<f64>,
    pub labeled_draws: u64,
    pub unlabeled_draws: u64,
    pub eval_trace: Vec<EvalRecord>,
    #[serde(skip)]
    pub loss_trace: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub params: MlpParams,
}

fn eval_error(params: &MlpParams, ds: &DomainDataset) -> Result<f64> {
    let labels = ds
        .eval_labels()
        .ok_or_else(|| Error::invalid("evaluation set has no labels"))?;
    network::error_pct(params, ds.inputs(), labels)
}

/// Runs one regime to completion. Deterministic given the inputs.
pub fn train(pair: &DomainPair, mlp: &MlpSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if mlp.input_dim != pair.source.dim() || pair.source.dim() != pair.target.dim() {
        return Err(Error::invalid(format!(
            "network expects {} inputs; source has {}, target {}",
            mlp.input_dim,
            pair.source.dim(),
            pair.target.dim()
        )));
    }
    if mlp.num_classes < pair.source.num_classes() {
        return Err(Error::invalid("network has fewer outputs than classes"));
    }
    let exposed;
    let labeled_ds = match cfg.regime {
        Regime::TargetOnly => {
            if pair.target.eval_labels().is_none() {
                return Err(Error::invalid("target_only needs target labels"));
            }
            exposed = pair.target.with_labels_exposed();
            &exposed
        }
        _ => &pair.source,
    };
    if labeled_ds.training_labels().is_none() {
        return Err(Error::Unlabeled);
    }
    if cfg.regime.adapts() && pair.target.len() < cfg.unlabeled_batch_size {
        return Err(Error::invalid(format!(
            "{} needs {} unlabeled target samples, have {}",
            cfg.regime,
            cfg.unlabeled_batch_size,
            pair.target.len()
        )));
    }

    let mut params = network::init_params(mlp)?;
    let mut adam = AdamState::new(params.num_params());
    let mut labeled_stream = BatchStream::new(cfg.seed, LABELED_STREAM);
    let mut unlabeled_stream = BatchStream::new(cfg.seed, UNLABELED_STREAM);
    let mut loss_trace = Vec::with_capacity(cfg.total_steps);
    let mut eval_trace = Vec::new();

    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg);
        let alpha = alpha_schedule(step, cfg);
        let (x, y) =
            data::stratified_labeled_batch(labeled_ds, cfg.per_class, &mut labeled_stream)?;
        let unlabeled = if cfg.regime.adapts() {
            Some(data::unlabeled_batch(
                &pair.target,
                cfg.unlabeled_batch_size,
                &mut unlabeled_stream,
            )?)
        } else {
            None
        };
        let out = composite_step(&params, &x, &y, unlabeled.as_ref(), cfg.regime, alpha, cfg)?;
        if !out.total.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {step}")));
        }
        network::optimizer_step(&mut params, &out.grads, &mut adam, lr)?;
        loss_trace.push(StepRecord {
            step,
            loss_total: out.total,
            loss_class: out.classification,
            loss_walker: out.walker,
            loss_visit: out.visit,
            loss_mmd: out.mmd,
            lr,
            alpha,
        });
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            eval_trace.push(EvalRecord {
                step: done,
                source_error_pct: eval_error(&params, &pair.source_test)?,
                target_error_pct: eval_error(&params, &pair.target_test)?,
            });
        }
    }

    let last = *eval_trace.last().expect("final evaluation recorded");
    Ok(TrainOutcome {
        report: RunReport {
            regime: cfg.regime,
            seed: cfg.seed,
            final_target_error_pct: last.target_error_pct,
            final_source_error_pct: last.source_error_pct,
            final_embedding_mmd: None,
            labeled_draws: labeled_stream.draws(),
            unlabeled_draws: unlabeled_stream.draws(),
            eval_trace,
            loss_trace,
        },
        params,
    })
}

pub const TRACE_HEADER: &str =
    "step,loss_total,loss_class,loss_walker,loss_visit,loss_mmd,lr,alpha";

pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.step,
            r.loss_total,
            r.loss_class,
            r.loss_walker,
            r.loss_visit,
            r.loss_mmd,
            r.lr,
            r.alpha
        );
    }
    out
}

/// Embeddings of every sample in `ds`, one row each.
pub fn embed(params: &MlpParams, ds: &DomainDataset) -> Result<Matrix> {
    Ok(network::forward(params, ds.inputs())?
        .embeddings
        .into_matrix())
}

/// CSV with header `sample_id,domain,label,e0,…,e{d-1}`. Sample ids restart
/// at zero for each dataset; missing labels are left empty.
pub fn embeddings_csv(params: &MlpParams, datasets: &[&DomainDataset]) -> Result<String> {
    let d = params.spec.embedding_dim;
    let mut out = String::from("sample_id,domain,label");
    for j in 0..d {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for ds in datasets {
        let emb = embed(params, ds)?;
        for i in 0..ds.len() {
            let label = ds
                .eval_labels()
                .map(|l| l.labels()[i].to_string())
                .unwrap_or_default();
            let _ = write!(out, "{i},{},{label}", ds.domain().as_str());
            for v in emb.row(i) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMmdRow {
    pub regime: Regime,
    pub mmd_squared: f64,
    pub target_error_pct: f64,
}

/// Biased MMD² between source-test and target-test embeddings for every
/// regime, all under one kernel whose base bandwidth is the median
/// heuristic of the source-only model's embeddings.
pub fn embedding_mmd_report(
    models: &BTreeMap<Regime, MlpParams>,
    pair: &DomainPair,
    mmd_cfg: &MmdConfig,
) -> Result<Vec<EmbeddingMmdRow>> {
    let so = models.get(&Regime::SourceOnly).ok_or_else(|| {
        Error::invalid("embedding MMD needs a source_only model to fix the kernel")
    })?;
    let base = mmd::median_heuristic(
        &embed(so, &pair.source_test)?,
        &embed(so, &pair.target_test)?,
    );
    let kernel = MmdConfig {
        estimator: mmd::Estimator::Biased,
        ..mmd_cfg.frozen(base)
    };
    models
        .iter()
        .map(|(&regime, params)| {
            let r = mmd::mmd2(
                &embed(params, &pair.source_test)?,
                &embed(params, &pair.target_test)?,
                &kernel,
                false,
            )?;
            Ok(EmbeddingMmdRow {
                regime,
                mmd_squared: r.mmd_squared,
                target_error_pct: eval_error(params, &pair.target_test)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub runs: Vec<RunReport>,
    /// Fraction of the source-only → target-only gap closed by `da_assoc`.
    pub coverage_da_assoc: Option<f64>,
    pub coverage_da_mmd: Option<f64>,
    pub embedding_mmd: Vec<EmbeddingMmdRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub models: BTreeMap<Regime, MlpParams>,
}

impl ExperimentOutcome {
    pub fn run(&self, regime: Regime) -> Option<&RunReport> {
        self.report.runs.iter().find(|r| r.regime == regime)
    }
}

/// Trains every requested regime (concurrently) from `base`, then derives
/// coverage and the shared-kernel embedding MMD table.
pub fn run_experiment(
    pair: &DomainPair,
    mlp: &MlpSpec,
    base: &TrainConfig,
    regimes: &[Regime],
    eval_mmd: &MmdConfig,
) -> Result<ExperimentOutcome> {
    let outcomes: Vec<TrainOutcome> = regimes
        .par_iter()
        .map(|&regime| {
            train(
                pair,
                mlp,
                &TrainConfig {
                    regime,
                    ..base.clone()
                },
            )
        })
        .collect::<Result<_>>()?;

    let models: BTreeMap<Regime, MlpParams> = outcomes
        .iter()
        .map(|o| (o.report.regime, o.params.clone()))
        .collect();
    let mut runs: Vec<RunReport> = outcomes.into_iter().map(|o| o.report).collect();

    let embedding_mmd = if models.contains_key(&Regime::SourceOnly) {
        embedding_mmd_report(&models, pair, eval_mmd)?
    } else {
        Vec::new()
    };
    for row in &embedding_mmd {
        if let Some(run) = runs.iter_mut().find(|r| r.regime == row.regime) {
            run.final_embedding_mmd = Some(row.mmd_squared);
        }
    }

    let err = |r: Regime| {
        runs.iter()
            .find(|x| x.regime == r)
            .map(|x| x.final_target_error_pct)
    };
    let cov = |da: Regime| match (err(Regime::SourceOnly), err(Regime::TargetOnly), err(da)) {
        (Some(so), Some(to), Some(da)) => coverage(so, to, da),
        _ => None,
    };
    let report = ExperimentReport {
        seed: base.seed,
        coverage_da_assoc: cov(Regime::DaAssoc),
        coverage_da_mmd: cov(Regime::DaMmd),
        runs: std::mem::take(&mut runs),
        embedding_mmd,
    };
    Ok(ExperimentOutcome { report, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize, delay: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            assoc_delay_steps: delay,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let c = cfg(9000, 500);
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(5999, &c), 1e-4);
        assert!((lr_schedule(6000, &c) - 3.3e-5).abs() < 1e-18);

        let c = TrainConfig {
            base_lr: 0.5,
            ..cfg(3, 0)
        };
        let lrs: Vec<f64> = (0..3).map(|s| lr_schedule(s, &c)).collect();
        assert_eq!(lrs, vec![0.5, 0.5, 0.5 * 0.33]);
    }

    #[test]
    fn alpha_schedule_examples() {
        let c = TrainConfig {
            alpha_after_delay: 0.7,
            ..cfg(1000, 500)
        };
        assert_eq!(alpha_schedule(499, &c), 0.0);
        assert_eq!(alpha_schedule(500, &c), 0.7);
        let c = cfg(1000, 0);
        assert!((0..1000).all(|s| alpha_schedule(s, &c) == 1.0));
    }

    #[test]
    fn coverage_examples() {
        let c = coverage(30.71, 0.50, 2.40).unwrap();
        assert!((c - 0.9371).abs() < 5e-5, "{c}");
        let c = coverage(35.96, 6.37, 10.53).unwrap();
        assert!((c - 0.8594).abs() < 5e-5, "{c}");
        assert_eq!(coverage(20.0, 4.0, 4.0), Some(1.0));
        assert_eq!(coverage(20.0, 4.0, 20.0), Some(0.0));
        assert_eq!(coverage(5.0, 5.0, 4.0), None);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 0).validate().is_err());
        assert!(cfg(10, 11).validate().is_err());
        assert!(cfg(10, 10).validate().is_ok());
        let bad = TrainConfig {
            per_class: 0,
            ..cfg(10, 0)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!("both".parse::<Regime>().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let rec = StepRecord {
            step: 3,
            loss_total: 1.5,
            loss_class: 1.0,
            loss_walker: 0.25,
            loss_visit: 0.75,
            loss_mmd: 0.0,
            lr: 1e-4,
            alpha: 1.0,
        };
        let csv = trace_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert_eq!(lines.next(), Some("3,1.5,1.0,0.25,0.75,0.0,0.0001,1.0"));
    }
}
