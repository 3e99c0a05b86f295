//! Experiment orchestration: fit the whitening transform, train the heads,
//! evaluate fairness metrics over a grid of arms and seeds, and write
//! reports.
//!
//! An *arm* is one point of the `(λ, method, T, LW)` grid. Every arm runs
//! once per seed. Closed-form solvers ignore `T`, so the grid keeps a
//! single `T = 0` arm for them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairmetrics::{
    fairness_report, off_diagonal_cells, EoEmptyCellPolicy, FairnessReport, MetricsError,
    PredictionRecords, RowKey, CSV_COLUMNS,
};
use crate::groupcov::{compute_group_stats, Centering, CovError, EmptyCellPolicy, GroupedDataset};
use crate::linmodel::{
    loss_weights, per_sample_weights, train_observed, LinearClassifier, TrainConfig, TrainError,
};
use crate::matops::{InvSqrtMethod, MatError, Matrix};
use crate::realstr;
use crate::synthdata::{self, DataError, FeatureSet, LabelSpace, SynthSpec, GENERATOR_ID};
use crate::whiten::{certificate, fit_from_stats, WhitenConfig, WhitenError, WhiteningCertificate};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("arm {arm}: {source}")]
    Arm {
        arm: String,
        #[source]
        source: Box<PipelineError>,
        partial: Box<RunReport>,
    },
    #[error(transparent)]
    Whiten(#[from] WhitenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn is_numerical_mat(e: &MatError) -> bool {
    matches!(
        e,
        MatError::NotPositiveDefinite { .. }
            | MatError::NonConvergence { .. }
            | MatError::Diverged { .. }
            | MatError::NonFinite { .. }
    )
}

impl PipelineError {
    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }

    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Arm { source, .. } => source.is_numerical(),
            PipelineError::Whiten(WhitenError::Mat(e)) => is_numerical_mat(e),
            PipelineError::Whiten(WhitenError::Cov(CovError::Mat(e))) => is_numerical_mat(e),
            PipelineError::Train(TrainError::NonFiniteLoss { .. }) => true,
            PipelineError::Train(TrainError::Mat(e)) => is_numerical_mat(e),
            _ => false,
        }
    }

    /// Partial report carried by an arm failure.
    pub fn partial_report(&self) -> Option<&RunReport> {
        match self {
            PipelineError::Arm { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A config value given either as a scalar or as a list of grid points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated per seed; the run seed is mixed into `spec.seed`.
    Synthetic { spec: SynthSpec },
    /// Fixed train/test files following the dataset CSV contract.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
        #[serde(default)]
        n_bias: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub data: DataSource,
    pub lambda: OneOrMany<f64>,
    pub method: OneOrMany<InvSqrtMethod>,
    /// Newton–Schulz steps (`T`).
    pub iterations: OneOrMany<usize>,
    pub eps: f64,
    pub centering: Centering,
    pub empty_cells: EmptyCellPolicy,
    pub train: TrainConfig,
    /// Loss weighting of the target head; a list makes it a grid axis.
    pub lw_enabled: OneOrMany<bool>,
    /// Also weight the bias head's loss.
    pub lw_bias: bool,
    pub seeds: Vec<u64>,
    /// Bias-conflicting `(y, b)` cells; defaults to `y ≠ b`.
    pub conflicting_set: Option<Vec<(usize, usize)>>,
    /// Also train an unwhitened, unweighted classifier on the raw target block.
    pub baseline: bool,
    /// Loss traces are sampled every this many steps.
    pub trace_every: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            data: DataSource::Synthetic {
                spec: SynthSpec::default(),
            },
            lambda: OneOrMany::One(crate::whiten::DEFAULT_LAMBDA),
            method: OneOrMany::One(InvSqrtMethod::NewtonSchulz),
            iterations: OneOrMany::One(crate::whiten::DEFAULT_ITERATIONS),
            eps: crate::whiten::DEFAULT_EPS,
            centering: Centering::default(),
            empty_cells: EmptyCellPolicy::default(),
            train: TrainConfig::default(),
            lw_enabled: OneOrMany::One(true),
            lw_bias: false,
            seeds: vec![0],
            conflicting_set: None,
            baseline: true,
            trace_every: 10,
            output_dir: None,
        }
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    #[serde(with = "realstr::real")]
    pub lambda: f64,
    pub method: InvSqrtMethod,
    /// Configured `T`; 0 for closed-form solvers.
    pub iterations: usize,
    pub lw: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        format!(
            "lambda={} method={} T={} lw={}",
            realstr::format(self.lambda),
            self.method,
            self.iterations,
            self.lw
        )
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let lambdas = self.lambda.values();
        let methods = self.method.values();
        let iters = self.iterations.values();
        let lws = self.lw_enabled.values();
        if lambdas.is_empty() || methods.is_empty() || iters.is_empty() || lws.is_empty() {
            return bad("grids must be nonempty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambda {l} outside [0, 1]"));
        }
        if methods.contains(&InvSqrtMethod::NewtonSchulz) && iters.contains(&0) {
            return bad("Newton-Schulz iterations must be positive".into());
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be nonnegative, got {}", self.eps));
        }
        if self.trace_every == 0 {
            return bad("trace_every must be positive".into());
        }
        if let Some(cs) = &self.conflicting_set {
            if cs.is_empty() {
                return bad("conflicting_set must be nonempty".into());
            }
        }
        self.train.validate()?;
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Grid arms in a stable order (λ, then method, then T, then LW).
    pub fn arms(&self) -> Vec<Arm> {
        let mut out: Vec<Arm> = Vec::new();
        for &lambda in &self.lambda.values() {
            for &method in &self.method.values() {
                let ts = if method.is_iterative() {
                    self.iterations.values()
                } else {
                    vec![0]
                };
                for &iterations in &ts {
                    for &lw in &self.lw_enabled.values() {
                        let arm = Arm {
                            lambda,
                            method,
                            iterations,
                            lw,
                        };
                        if !out.contains(&arm) {
                            out.push(arm);
                        }
                    }
                }
            }
        }
        out
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the synthetic data for run seed `seed`.
pub fn data_seed(base: u64, seed: u64) -> u64 {
    mix(base ^ mix(seed))
}

/// Seed of the classifier batch order for arm `arm_index` (the baseline
/// uses `u64::MAX`).
pub fn train_seed(seed: u64, arm_index: u64) -> u64 {
    mix(mix(seed) ^ arm_index)
}

/// Mean unweighted cross-entropy on the aligned and conflicting samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    #[serde(with = "realstr::real_opt")]
    pub aligned: Option<f64>,
    #[serde(with = "realstr::real_opt")]
    pub conflicting: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadResult {
    pub train: FairnessReport,
    pub test: FairnessReport,
    #[serde(with = "realstr::real")]
    pub final_loss: f64,
    pub loss_trace: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm_index: usize,
    pub arm: Arm,
    pub seed: u64,
    pub iterations_used: usize,
    #[serde(with = "realstr::real")]
    pub fit_residual: f64,
    pub certificate: WhiteningCertificate,
    pub target_head: HeadResult,
    /// Accuracy of the bias head at predicting `b` from `z_wb`.
    #[serde(with = "realstr::real")]
    pub bias_head_train_accuracy: f64,
    #[serde(with = "realstr::real")]
    pub bias_head_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub seed: u64,
    pub head: HeadResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    pub arms: Vec<ArmResult>,
    pub baselines: Vec<BaselineResult>,
    /// Set when a failure stopped the run early.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wall-clock timings, kept out of the report so it stays reproducible.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub arms: Vec<(String, u64, f64)>,
}

struct SeedData {
    train: FeatureSet,
    test: FeatureSet,
}

fn load_seed_data(cfg: &RunConfig, seed: u64) -> Result<SeedData, PipelineError> {
    match &cfg.data {
        DataSource::Synthetic { spec } => {
            let spec = SynthSpec {
                seed: data_seed(spec.seed, seed),
                ..spec.clone()
            };
            let ds = synthdata::generate(&spec)?;
            Ok(SeedData {
                train: ds.train,
                test: ds.test,
            })
        }
        DataSource::Csv {
            train,
            test,
            n_classes,
            n_bias,
        } => {
            let train = synthdata::load_csv(train, LabelSpace { n_classes: *n_classes, n_bias: *n_bias })?;
            // the test split must share the training label space
            let labels = LabelSpace {
                n_classes: Some(train.n_classes),
                n_bias: Some(train.n_bias),
            };
            let test = synthdata::load_csv(test, labels)?;
            if test.target.rows() != train.target.rows() || test.bias.rows() != train.bias.rows() {
                return Err(PipelineError::Config(
                    "train and test files have different feature widths".into(),
                ));
            }
            Ok(SeedData { train, test })
        }
    }
}

fn conflicting_set(cfg: &RunConfig, set: &FeatureSet) -> Result<Vec<(usize, usize)>, PipelineError> {
    match &cfg.conflicting_set {
        Some(cs) => Ok(cs.clone()),
        None if set.n_classes == set.n_bias => Ok(off_diagonal_cells(set.n_classes, set.n_bias)),
        None => Err(PipelineError::Config(
            "conflicting_set is required when n_classes differs from n_bias".into(),
        )),
    }
}

/// Membership of each sample in the conflicting set.
fn conflicting_mask(set: &FeatureSet, cs: &[(usize, usize)]) -> Vec<bool> {
    set.y
        .iter()
        .zip(&set.b)
        .map(|(&y, &b)| cs.contains(&(y, b)))
        .collect()
}

fn partition_losses(clf: &LinearClassifier, x: &Matrix, y: &[usize], mask: &[bool]) -> (Option<f64>, Option<f64>) {
    let part = |want: bool| -> Option<f64> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| mask[i] == want).collect();
        if idx.is_empty() {
            return None;
        }
        let xs = x.select_columns(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        clf.loss(&xs, &ys, None, 0.0).ok()
    };
    (part(false), part(true))
}

struct EvalContext<'a> {
    train: &'a FeatureSet,
    test: &'a FeatureSet,
    conflicting: &'a [(usize, usize)],
    train_mask: Vec<bool>,
}

fn report_for(
    clf: &LinearClassifier,
    x: &Matrix,
    set: &FeatureSet,
    cs: &[(usize, usize)],
) -> Result<FairnessReport, PipelineError> {
    let pred = clf.predict_labels(x)?;
    let records = PredictionRecords::new(pred, set.y.clone(), set.b.clone(), set.n_classes, set.n_bias)?;
    Ok(fairness_report(&records, cs, EoEmptyCellPolicy::Error)?)
}

fn train_target_head(
    ctx: &EvalContext,
    x_train: &Matrix,
    x_test: &Matrix,
    weights: Option<&[f64]>,
    tcfg: &TrainConfig,
    trace_every: usize,
) -> Result<HeadResult, PipelineError> {
    let mut trace = Vec::new();
    let trained = train_observed(
        x_train,
        &ctx.train.y,
        ctx.train.n_classes,
        weights,
        tcfg,
        |step, clf| {
            if step % trace_every == 0 || step == tcfg.steps {
                let (aligned, conflicting) =
                    partition_losses(clf, x_train, &ctx.train.y, &ctx.train_mask);
                trace.push(TracePoint {
                    step,
                    aligned,
                    conflicting,
                });
            }
        },
    )?;
    let clf = &trained.classifier;
    Ok(HeadResult {
        train: report_for(clf, x_train, ctx.train, ctx.conflicting)?,
        test: report_for(clf, x_test, ctx.test, ctx.conflicting)?,
        final_loss: trained.final_loss,
        loss_trace: trace,
    })
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn run_arm(
    cfg: &RunConfig,
    arm_index: usize,
    arm: &Arm,
    seed: u64,
    data: &SeedData,
    ctx: &EvalContext,
    stats: &crate::groupcov::GroupStats,
    lw_weights: Option<&[f64]>,
) -> Result<ArmResult, PipelineError> {
    let train = &data.train;
    let wcfg = WhitenConfig {
        lambda: arm.lambda,
        method: arm.method,
        iterations: arm.iterations,
        eps: cfg.eps,
        centering: cfg.centering,
        empty_cells: cfg.empty_cells,
    };
    let fit = fit_from_stats(stats, train.target.rows(), &wcfg)?;
    let t = &fit.transform;
    let cert = certificate(t, &train.target, &train.bias, &fit.sample_weights(&train.y, &train.b))?;
    let (wt_train, wb_train) = t.apply(&train.target, &train.bias)?;
    let (wt_test, wb_test) = t.apply(&data.test.target, &data.test.bias)?;

    let tcfg = TrainConfig {
        seed: train_seed(seed, arm_index as u64),
        ..cfg.train
    };
    let target_weights = if arm.lw { lw_weights } else { None };
    let head = train_target_head(ctx, &wt_train, &wt_test, target_weights, &tcfg, cfg.trace_every)?;

    let bias_weights = if arm.lw && cfg.lw_bias { lw_weights } else { None };
    let bias_head = crate::linmodel::train(&wb_train, &train.b, train.n_bias, bias_weights, &tcfg)?;
    let bias_train = accuracy(&bias_head.classifier.predict_labels(&wb_train)?, &train.b);
    let bias_test = accuracy(&bias_head.classifier.predict_labels(&wb_test)?, &data.test.b);

    Ok(ArmResult {
        arm_index,
        arm: *arm,
        seed,
        iterations_used: t.iterations,
        fit_residual: t.fit_residual,
        certificate: cert,
        target_head: head,
        bias_head_train_accuracy: bias_train,
        bias_head_test_accuracy: bias_test,
    })
}

/// Runs every arm for every seed (plus the baseline when enabled).
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    run_experiment_timed(cfg).map(|(r, _)| r)
}

/// [`run_experiment`] together with wall-clock timings.
pub fn run_experiment_timed(cfg: &RunConfig) -> Result<(RunReport, Timings), PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let arms = cfg.arms();
    let mut report = RunReport {
        run_id: cfg.run_id.clone(),
        config: cfg.clone(),
        generator: matches!(cfg.data, DataSource::Synthetic { .. }).then(|| GENERATOR_ID.to_string()),
        arms: Vec::new(),
        baselines: Vec::new(),
        error: None,
    };
    let mut timings = Timings::default();

    let fail = |report: &mut RunReport, label: String, e: PipelineError| -> PipelineError {
        report.error = Some(format!("{label}: {e}"));
        PipelineError::Arm {
            arm: label,
            source: Box::new(e),
            partial: Box::new(report.clone()),
        }
    };

    for &seed in &cfg.seeds {
        let data = match load_seed_data(cfg, seed) {
            Ok(d) => d,
            Err(e) => return Err(fail(&mut report, format!("data seed={seed}"), e)),
        };
        let prepared = (|| -> Result<_, PipelineError> {
            let cs = conflicting_set(cfg, &data.train)?;
            let grouped = grouped_dataset(&data.train)?;
            let stats = compute_group_stats(&grouped, cfg.centering)?;
            let needs_lw = cfg.lw_enabled.values().contains(&true);
            let lw = if needs_lw {
                let cell = loss_weights(&data.train.cell_counts(), data.train.n_classes, data.train.n_bias)?;
                Some(per_sample_weights(&cell, data.train.n_bias, &data.train.y, &data.train.b))
            } else {
                None
            };
            Ok((cs, stats, lw))
        })();
        let (cs, stats, lw) = match prepared {
            Ok(p) => p,
            Err(e) => return Err(fail(&mut report, format!("seed={seed}"), e)),
        };
        let ctx = EvalContext {
            train: &data.train,
            test: &data.test,
            conflicting: &cs,
            train_mask: conflicting_mask(&data.train, &cs),
        };

        if cfg.baseline {
            let t0 = Instant::now();
            let tcfg = TrainConfig {
                seed: train_seed(seed, u64::MAX),
                ..cfg.train
            };
            match train_target_head(&ctx, &data.train.target, &data.test.target, None, &tcfg, cfg.trace_every) {
                Ok(head) => report.baselines.push(BaselineResult { seed, head }),
                Err(e) => return Err(fail(&mut report, format!("baseline seed={seed}"), e)),
            }
            timings.arms.push(("baseline".into(), seed, t0.elapsed().as_secs_f64()));
        }

        for (i, arm) in arms.iter().enumerate() {
            let t0 = Instant::now();
            match run_arm(cfg, i, arm, seed, &data, &ctx, &stats, lw.as_deref()) {
                Ok(r) => report.arms.push(r),
                Err(e) => {
                    return Err(fail(&mut report, format!("{} seed={seed}", arm.label()), e))
                }
            }
            timings.arms.push((arm.label(), seed, t0.elapsed().as_secs_f64()));
        }
    }
    timings.total_seconds = start.elapsed().as_secs_f64();
    Ok((report, timings))
}

/// Metric columns summarized by the aggregate rows.
const AGG_METRICS: [&str; 5] = [
    "delta_dp",
    "delta_eo",
    "acc_unbiased",
    "acc_conflicting",
    "acc_worst_group",
];

/// Header of [`sweep_to_csv`].
pub fn sweep_csv_header() -> Vec<String> {
    let mut h: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.push("split".into());
    h.push("acc_aligned".into());
    h.push("fit_residual".into());
    h.extend(AGG_METRICS.iter().map(|m| format!("{m}_std")));
    h
}

fn metric_values(r: &FairnessReport) -> [f64; 5] {
    [
        r.delta_dp,
        r.delta_eo,
        r.acc_unbiased,
        r.acc_conflicting,
        r.acc_worst_group,
    ]
}

/// Sample mean and (n − 1)-normalized standard deviation; 0 for one value.
/// The variance uses pairwise differences, so equal values give exactly 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut pairs = 0.0;
    for (i, a) in v.iter().enumerate() {
        for b in &v[i + 1..] {
            pairs += (a - b) * (a - b);
        }
    }
    (mean, (pairs / (n * (n - 1.0))).sqrt())
}

struct RowGroup<'a> {
    key: RowKey,
    split: &'static str,
    rows: Vec<(u64, &'a FairnessReport, Option<f64>)>,
}

/// One row per (arm, seed, split), then one aggregate row per (arm, split)
/// with `seed = "mean"`, the mean metrics and their standard deviations.
/// The baseline appears as method `vanilla` with empty λ and T.
pub fn sweep_to_csv(report: &RunReport) -> String {
    let base_key = |lambda: String, method: String, t: String| RowKey {
        run_id: report.run_id.clone(),
        lambda,
        method,
        iterations: t,
        seed: String::new(),
    };
    fn find_or_insert(groups: &mut Vec<RowGroup>, key: RowKey, split: &'static str) -> usize {
        if let Some(i) = groups.iter().position(|g| g.key == key && g.split == split) {
            return i;
        }
        groups.push(RowGroup {
            key,
            split,
            rows: Vec::new(),
        });
        groups.len() - 1
    }

    let mut ordered: Vec<RowGroup> = Vec::new();
    for b in &report.baselines {
        for (split, r) in [("train", &b.head.train), ("test", &b.head.test)] {
            let key = base_key(String::new(), "vanilla".into(), String::new());
            let i = find_or_insert(&mut ordered, key, split);
            ordered[i].rows.push((b.seed, r, None));
        }
    }
    for a in &report.arms {
        let method = if a.arm.lw {
            format!("{}+lw", a.arm.method)
        } else {
            a.arm.method.to_string()
        };
        for (split, r) in [("train", &a.target_head.train), ("test", &a.target_head.test)] {
            let key = base_key(realstr::format(a.arm.lambda), method.clone(), a.arm.iterations.to_string());
            let i = find_or_insert(&mut ordered, key, split);
            ordered[i].rows.push((a.seed, r, Some(a.fit_residual)));
        }
    }

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(sweep_csv_header()).expect("in-memory write");
    let blanks = vec![String::new(); AGG_METRICS.len()];
    for g in &ordered {
        for &(seed, r, resid) in &g.rows {
            let key = RowKey {
                seed: seed.to_string(),
                ..g.key.clone()
            };
            let mut row = r.csv_row(&key);
            row.push(g.split.into());
            row.push(r.acc_aligned.map(realstr::format).unwrap_or_default());
            row.push(resid.map(realstr::format).unwrap_or_default());
            row.extend(blanks.iter().cloned());
            w.write_record(&row).expect("in-memory write");
        }
    }
    for g in &ordered {
        let cols: Vec<Vec<f64>> = (0..AGG_METRICS.len())
            .map(|k| g.rows.iter().map(|(_, r, _)| metric_values(r)[k]).collect())
            .collect();
        let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
        let mut row = vec![
            g.key.run_id.clone(),
            g.key.lambda.clone(),
            g.key.method.clone(),
            g.key.iterations.clone(),
            "mean".into(),
        ];
        row.extend(stats.iter().map(|s| realstr::format(s.0)));
        row.push(g.split.into());
        let aligned: Vec<f64> = g.rows.iter().filter_map(|(_, r, _)| r.acc_aligned).collect();
        row.push(if aligned.len() == g.rows.len() {
            realstr::format(mean_std(&aligned).0)
        } else {
            String::new()
        });
        let resid: Vec<f64> = g.rows.iter().filter_map(|(_, _, x)| *x).collect();
        row.push(if resid.is_empty() {
            String::new()
        } else {
            realstr::format(mean_std(&resid).0)
        });
        row.extend(stats.iter().map(|s| realstr::format(s.1)));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Paths written by [`execute_run`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub timings_json: PathBuf,
}

fn write_report_files(report: &RunReport, timings: Option<&Timings>, dir: &Path) -> Result<RunOutputs, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let out = RunOutputs {
        report_json: dir.join("report.json"),
        report_csv: dir.join("report.csv"),
        timings_json: dir.join("timings.json"),
    };
    let mut json = serde_json::to_string_pretty(report).expect("plain data serializes");
    json.push('\n');
    fs::write(&out.report_json, json).map_err(io_err(&out.report_json))?;
    fs::write(&out.report_csv, sweep_to_csv(report)).map_err(io_err(&out.report_csv))?;
    if let Some(t) = timings {
        let mut tj = serde_json::to_string_pretty(t).expect("plain data serializes");
        tj.push('\n');
        fs::write(&out.timings_json, tj).map_err(io_err(&out.timings_json))?;
    }
    Ok(out)
}

/// Runs the experiment and writes `report.json`, `report.csv` and
/// `timings.json` into `output_dir` (or `cfg.output_dir`). A failing arm
/// still leaves the partial report on disk.
pub fn execute_run(cfg: &RunConfig, output_dir: Option<&Path>) -> Result<(RunReport, RunOutputs), PipelineError> {
    let dir = output_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| PipelineError::Config("no output directory given".into()))?;
    match run_experiment_timed(cfg) {
        Ok((report, timings)) => {
            let out = write_report_files(&report, Some(&timings), &dir)?;
            Ok((report, out))
        }
        Err(e) => {
            if let Some(partial) = e.partial_report() {
                write_report_files(partial, None, &dir)?;
            }
            Err(e)
        }
    }
}

/// Stacks `[target; bias]` with the labels for group statistics.
pub fn grouped_dataset(set: &FeatureSet) -> Result<GroupedDataset, PipelineError> {
    let z = Matrix::vstack(&set.target, &set.bias).map_err(WhitenError::from)?;
    Ok(GroupedDataset::new(
        z,
        set.y.clone(),
        set.b.clone(),
        set.n_classes,
        set.n_bias,
    )?)
}

/// Reads a dataset CSV into stacked features with labels. Block widths come
/// from the header; label cardinalities are inferred when `None`.
pub fn load_dataset(path: &Path, labels: LabelSpace) -> Result<GroupedDataset, PipelineError> {
    grouped_dataset(&synthdata::load_csv(path, labels)?)
}

/// Reads a predictions CSV with columns `y_hat,y,b` (any order, extra
/// columns ignored).
pub fn load_predictions_csv(
    path: &Path,
    n_classes: Option<usize>,
    n_bias: Option<usize>,
) -> Result<PredictionRecords, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e, path))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(e, path))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Data(DataError::SchemaError(format!("missing column {name}"))))
    };
    let (cy_hat, cy, cb) = (col("y_hat")?, col("y")?, col("b")?);
    let (mut yh, mut ys, mut bs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(e, path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |k: usize| -> Result<usize, PipelineError> {
            rec[k].trim().parse::<usize>().map_err(|e| {
                PipelineError::Data(DataError::ParseError {
                    line,
                    message: format!("column {}: {:?} ({e})", header[k], &rec[k]),
                })
            })
        };
        yh.push(get(cy_hat)?);
        ys.push(get(cy)?);
        bs.push(get(cb)?);
    }
    let max = |v: &[usize]| v.iter().max().map_or(0, |m| m + 1);
    let n_classes = n_classes.unwrap_or_else(|| max(&yh).max(max(&ys)));
    let n_bias = n_bias.unwrap_or_else(|| max(&bs));
    Ok(PredictionRecords::new(yh, ys, bs, n_classes, n_bias)?)
}

fn csv_err(e: csv::Error, path: &Path) -> PipelineError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => PipelineError::Io {
            path: path.display().to_string(),
            source,
        },
        other => PipelineError::Data(DataError::ParseError {
            line,
            message: format!("{other:?}"),
        }),
    }
}
