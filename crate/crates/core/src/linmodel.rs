//! Multinomial linear classifiers trained with weighted softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::matops::{MatError, Matrix};
use crate::realstr;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Smallest denominator used by [`gradient_check`]'s relative error, so
/// near-zero gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("group cell (y={y}, b={b}) has no samples")]
    EmptyGroupCell { y: usize, b: usize },
    #[error("invalid training input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("invalid classifier document: {0}")]
    Format(String),
}

/// Logits `W·x + b` for `n_classes` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `n_classes × input_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(usize),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(0) => Err(D::Error::custom("batch size must be positive")),
            Repr::Num(n) => Ok(BatchSize::Size(n)),
            Repr::Str(s) if s.eq_ignore_ascii_case("full") => Ok(BatchSize::Full),
            Repr::Str(s) => Err(D::Error::custom(format!(
                "batch size must be a positive integer or \"full\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    #[default]
    Adam,
}

/// Multiplies the learning rate by `factor` from step `at_step` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub at_step: usize,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: BatchSize,
    /// Drives minibatch order only; parameters start at zero.
    pub seed: u64,
    pub l2: f64,
    pub optimizer: Optimizer,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 300,
            batch_size: BatchSize::Full,
            seed: 0,
            l2: 0.0,
            optimizer: Optimizer::Adam,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(TrainError::InvalidInput("steps must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::InvalidInput(format!(
                "l2 must be nonnegative, got {}",
                self.l2
            )));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(TrainError::InvalidInput("batch size must be positive".into()));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor.is_finite()) {
                return Err(TrainError::InvalidInput(format!(
                    "decay factor must be positive, got {}",
                    d.factor
                )));
            }
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            Some(d) if step >= d.at_step => self.learning_rate * d.factor,
            _ => self.learning_rate,
        }
    }
}

/// Per-cell loss weights `P_u(y,b) / P_b(y,b)`, rescaled so the weighted
/// sample count equals the sample count. Indexed `y * n_bias + b`.
pub fn loss_weights(counts: &[usize], n_classes: usize, n_bias: usize) -> Result<Vec<f64>, TrainError> {
    if counts.len() != n_classes * n_bias {
        return Err(TrainError::InvalidInput(format!(
            "{} counts for a {n_classes}x{n_bias} grid",
            counts.len()
        )));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(TrainError::InvalidInput("no samples".into()));
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::EmptyGroupCell {
            y: g / n_bias,
            b: g % n_bias,
        });
    }
    let pu = 1.0 / counts.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| pu / (c as f64 / n as f64))
        .collect();
    let weighted: f64 = raw.iter().zip(counts).map(|(w, &c)| w * c as f64).sum();
    let scale = n as f64 / weighted;
    Ok(raw.into_iter().map(|w| w * scale).collect())
}

/// Expands per-cell weights to one weight per sample.
pub fn per_sample_weights(cell_weights: &[f64], n_bias: usize, y: &[usize], b: &[usize]) -> Vec<f64> {
    y.iter()
        .zip(b)
        .map(|(&yi, &bi)| cell_weights[yi * n_bias + bi])
        .collect()
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
    lse
}

/// Training data in sample-major layout.
struct Samples<'a> {
    /// `n × dim`, row `i` is sample `i`.
    x: Matrix,
    labels: &'a [usize],
    weights: Option<&'a [f64]>,
}

impl<'a> Samples<'a> {
    fn new(
        x: &Matrix,
        labels: &'a [usize],
        weights: Option<&'a [f64]>,
        n_classes: usize,
    ) -> Result<Self, TrainError> {
        let n = x.cols();
        if n == 0 {
            return Err(TrainError::InvalidInput("no samples".into()));
        }
        if labels.len() != n {
            return Err(TrainError::InvalidInput(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(TrainError::InvalidInput(format!(
                "label {l} outside 0..{n_classes}"
            )));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(TrainError::InvalidInput(format!(
                    "{} weights for {n} samples",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(TrainError::InvalidInput(
                    "sample weights must be finite and nonnegative".into(),
                ));
            }
        }
        if !x.is_finite() {
            return Err(TrainError::InvalidInput("features contain non-finite values".into()));
        }
        Ok(Self {
            x: x.transpose(),
            labels,
            weights,
        })
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }
}

/// Gradient of the weighted mean loss over the given samples.
struct Gradient {
    loss: f64,
    w: Matrix,
    b: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(n_classes: usize, input_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(n_classes, input_dim),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.bias[k]
                + self
                    .weights
                    .row(k)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }

    fn check_dim(&self, x: &Matrix) -> Result<(), TrainError> {
        if x.rows() != self.input_dim() {
            return Err(MatError::DimensionMismatch {
                expected: format!("{} feature rows", self.input_dim()),
                got: format!("{} rows", x.rows()),
            }
            .into());
        }
        Ok(())
    }

    /// Predicted labels and class probabilities (`n_classes × K`) for the
    /// columns of `x`. Ties go to the smaller class index.
    pub fn predict(&self, x: &Matrix) -> Result<(Vec<usize>, Matrix), TrainError> {
        self.check_dim(x)?;
        let k = self.n_classes();
        let xt = x.transpose();
        let mut logits = vec![0.0; k];
        let mut logp = vec![0.0; k];
        let mut labels = Vec::with_capacity(x.cols());
        let mut probs = Matrix::zeros(k, x.cols());
        for i in 0..x.cols() {
            self.logits_into(xt.row(i), &mut logits);
            let mut best = 0;
            for c in 1..k {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            labels.push(best);
            log_softmax_into(&logits, &mut logp);
            for c in 0..k {
                probs[(c, i)] = logp[c].exp();
            }
        }
        Ok((labels, probs))
    }

    /// Predicted labels only.
    pub fn predict_labels(&self, x: &Matrix) -> Result<Vec<usize>, TrainError> {
        Ok(self.predict(x)?.0)
    }

    /// Weighted mean cross-entropy plus `l2·‖W‖²_F`. Unweighted when
    /// `weights` is `None`; zero when all weights are zero.
    pub fn loss(
        &self,
        x: &Matrix,
        labels: &[usize],
        weights: Option<&[f64]>,
        l2: f64,
    ) -> Result<f64, TrainError> {
        self.check_dim(x)?;
        let s = Samples::new(x, labels, weights, self.n_classes())?;
        let idx: Vec<usize> = (0..labels.len()).collect();
        Ok(self.gradient(&s, &idx, l2).loss)
    }

    /// Analytic gradient `(dL/dW, dL/db)` of [`LinearClassifier::loss`].
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        labels: &[usize],
        weights: Option<&[f64]>,
        l2: f64,
    ) -> Result<(f64, Matrix, Vec<f64>), TrainError> {
        self.check_dim(x)?;
        let s = Samples::new(x, labels, weights, self.n_classes())?;
        let idx: Vec<usize> = (0..labels.len()).collect();
        let g = self.gradient(&s, &idx, l2);
        Ok((g.loss, g.w, g.b))
    }

    fn gradient(&self, s: &Samples, idx: &[usize], l2: f64) -> Gradient {
        let k = self.n_classes();
        let m = self.input_dim();
        let mut gw = Matrix::zeros(k, m);
        let mut gb = vec![0.0; k];
        let mut logits = vec![0.0; k];
        let mut logp = vec![0.0; k];
        let mut loss = 0.0;
        let mut total = 0.0;
        for &i in idx {
            let w = s.weight(i);
            if w == 0.0 {
                continue;
            }
            total += w;
            let xi = s.x.row(i);
            self.logits_into(xi, &mut logits);
            log_softmax_into(&logits, &mut logp);
            let y = s.labels[i];
            loss -= w * logp[y];
            for c in 0..k {
                let g = w * (logp[c].exp() - if c == y { 1.0 } else { 0.0 });
                gb[c] += g;
                for (dst, &xv) in gw.row_mut(c).iter_mut().zip(xi) {
                    *dst += g * xv;
                }
            }
        }
        let inv = if total > 0.0 { 1.0 / total } else { 0.0 };
        loss *= inv;
        for v in gb.iter_mut() {
            *v *= inv;
        }
        let mut gw = gw.scaled(inv);
        if l2 > 0.0 {
            let mut reg = 0.0;
            for c in 0..k {
                let wrow = self.weights.row(c);
                reg += wrow.iter().map(|v| v * v).sum::<f64>();
                for (dst, &wv) in gw.row_mut(c).iter_mut().zip(wrow) {
                    *dst += 2.0 * l2 * wv;
                }
            }
            loss += l2 * reg;
        }
        Gradient { loss, w: gw, b: gb }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ClassifierDoc::from(self)).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let d: ClassifierDoc =
            serde_json::from_str(s).map_err(|e| TrainError::Format(e.to_string()))?;
        if d.bias.len() != d.n_classes {
            return Err(TrainError::Format(format!(
                "{} bias entries for {} classes",
                d.bias.len(),
                d.n_classes
            )));
        }
        let weights = Matrix::from_vec(d.n_classes, d.input_dim, d.weights)
            .map_err(|e| TrainError::Format(e.to_string()))?;
        if !weights.is_finite() || d.bias.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Format("non-finite parameters".into()));
        }
        Ok(Self {
            weights,
            bias: d.bias,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierDoc {
    n_classes: usize,
    input_dim: usize,
    #[serde(with = "realstr::real_vec")]
    weights: Vec<f64>,
    #[serde(with = "realstr::real_vec")]
    bias: Vec<f64>,
}

impl From<&LinearClassifier> for ClassifierDoc {
    fn from(c: &LinearClassifier) -> Self {
        Self {
            n_classes: c.n_classes(),
            input_dim: c.input_dim(),
            weights: c.weights.as_slice().to_vec(),
            bias: c.bias.clone(),
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub classifier: LinearClassifier,
    /// Full-data objective at the returned parameters.
    pub final_loss: f64,
}

struct AdamState {
    m_w: Matrix,
    v_w: Matrix,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Trains a zero-initialized classifier (see [`train_observed`]).
pub fn train(
    x: &Matrix,
    labels: &[usize],
    n_classes: usize,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<Trained, TrainError> {
    train_observed(x, labels, n_classes, weights, cfg, |_, _| {})
}

/// Trains a classifier on the columns of `x` and calls
/// `observe(step, classifier)` before the first update (step 0) and after
/// every update (steps `1..=cfg.steps`).
pub fn train_observed(
    x: &Matrix,
    labels: &[usize],
    n_classes: usize,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &LinearClassifier),
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if n_classes == 0 {
        return Err(TrainError::InvalidInput("n_classes must be positive".into()));
    }
    let s = Samples::new(x, labels, weights, n_classes)?;
    let n = labels.len();
    let m = x.rows();
    let mut clf = LinearClassifier::zeros(n_classes, m);
    let mut adam = AdamState {
        m_w: Matrix::zeros(n_classes, m),
        v_w: Matrix::zeros(n_classes, m),
        m_b: vec![0.0; n_classes],
        v_b: vec![0.0; n_classes],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = match cfg.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) => b.min(n),
    };
    let full_batch = batch == n;
    let mut cursor = n;

    observe(0, &clf);
    for step in 1..=cfg.steps {
        let idx: &[usize] = if full_batch {
            &order
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            &order[cursor - batch..cursor]
        };
        let g = clf.gradient(&s, idx, cfg.l2);
        if !g.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let lr = cfg.learning_rate_at(step - 1);
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                clf.weights = clf.weights.sub(&g.w.scaled(lr))?;
                for (p, d) in clf.bias.iter_mut().zip(&g.b) {
                    *p -= lr * d;
                }
            }
            Optimizer::Adam => {
                let t = step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, d: f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                };
                for c in 0..n_classes {
                    for j in 0..m {
                        update(
                            &mut clf.weights[(c, j)],
                            &mut adam.m_w[(c, j)],
                            &mut adam.v_w[(c, j)],
                            g.w[(c, j)],
                        );
                    }
                    update(&mut clf.bias[c], &mut adam.m_b[c], &mut adam.v_b[c], g.b[c]);
                }
            }
        }
        if !clf.weights.is_finite() || clf.bias.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step });
        }
        observe(step, &clf);
    }
    let all: Vec<usize> = (0..n).collect();
    let final_loss = clf.gradient(&s, &all, cfg.l2).loss;
    if !final_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: cfg.steps });
    }
    Ok(Trained {
        classifier: clf,
        final_loss,
    })
}

/// Largest relative error between the analytic gradient and central
/// differences of step `h`, over every weight and bias entry. The
/// denominator is `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    x: &Matrix,
    labels: &[usize],
    weights: Option<&[f64]>,
    clf: &LinearClassifier,
    l2: f64,
    h: f64,
) -> Result<f64, TrainError> {
    let (_, gw, gb) = clf.loss_and_grad(x, labels, weights, l2)?;
    let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
    let mut worst = 0.0f64;
    let mut probe = clf.clone();
    for c in 0..clf.n_classes() {
        for j in 0..clf.input_dim() {
            let orig = clf.weights[(c, j)];
            probe.weights[(c, j)] = orig + h;
            let up = probe.loss(x, labels, weights, l2)?;
            probe.weights[(c, j)] = orig - h;
            let down = probe.loss(x, labels, weights, l2)?;
            probe.weights[(c, j)] = orig;
            worst = worst.max(rel(gw[(c, j)], (up - down) / (2.0 * h)));
        }
        let orig = clf.bias[c];
        probe.bias[c] = orig + h;
        let up = probe.loss(x, labels, weights, l2)?;
        probe.bias[c] = orig - h;
        let down = probe.loss(x, labels, weights, l2)?;
        probe.bias[c] = orig;
        worst = worst.max(rel(gb[c], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
