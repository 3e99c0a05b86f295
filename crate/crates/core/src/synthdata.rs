//! Deterministic synthetic feature datasets with a controllable bias.
//!
//! Each sample has a target label `y`, a bias label `b` and two feature
//! blocks standing in for frozen encoder outputs:
//!
//! * target block `t = signal·e_y + leak·e_b + noise`
//! * bias block   `z = bias_scale·e_b + noise`
//!
//! where `e_k` is the `k`-th standard basis vector. With `b` mostly equal to
//! `y` on the training split, `leak·e_b` is a shortcut a linear classifier
//! on `t` can exploit. The test split is stratified with the same number of
//! samples in every `(y, b)` cell.
//!
//! Every sample draws from its own ChaCha20 stream keyed by the seed, so
//! the output does not depend on generation order.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matops::Matrix;
use crate::realstr;

/// Identifier of the sampling scheme, stored next to generated data.
pub const GENERATOR_ID: &str = "chacha20-per-sample-stream/v1";

/// Stream offset separating test samples from training samples.
const TEST_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_bias: usize,
    pub target_dim: usize,
    pub bias_dim: usize,
    /// Training samples.
    pub n_samples: usize,
    /// Test samples per `(y, b)` cell.
    pub test_per_cell: usize,
    /// Fraction of training samples with `b ≠ y`.
    pub conflict_ratio: f64,
    pub signal_strength: f64,
    pub bias_leak: f64,
    pub bias_scale: f64,
    pub noise_std: f64,
    /// Coefficient of a zero-mean `σ_b·(g² − 1)` term added to the last
    /// target coordinate, where `σ_b = ±1` alternates with `b` and `g` is
    /// standard normal. It leaks `b` without any linear correlation.
    pub quadratic_leak: f64,
    pub seed: u64,
    /// Optional training joint `P(y, b)`, row-major `n_classes × n_bias`;
    /// replaces `conflict_ratio` and allows `n_classes ≠ n_bias`.
    pub joint: Option<Vec<f64>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            n_bias: 2,
            target_dim: 8,
            bias_dim: 8,
            n_samples: 20_000,
            test_per_cell: 1_000,
            conflict_ratio: 0.05,
            signal_strength: 1.0,
            bias_leak: 2.0,
            bias_scale: 1.0,
            noise_std: 1.0,
            quadratic_leak: 0.0,
            seed: 0,
            joint: None,
        }
    }
}

impl SynthSpec {
    /// High signal-to-noise preset in which the bias block carries the bias
    /// direction almost noiselessly, so whitening separates the shortcut
    /// from the class signal.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            bias_scale: 30.0,
            noise_std: 0.05,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::SpecInvalid(m));
        if self.n_classes < 2 || self.n_bias < 1 {
            return bad("need at least two classes and one bias group".into());
        }
        if self.target_dim == 0 || self.bias_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.target_dim < self.n_classes.max(self.n_bias) {
            return bad(format!(
                "target_dim {} cannot hold {} class and {} bias directions",
                self.target_dim, self.n_classes, self.n_bias
            ));
        }
        if self.bias_dim < self.n_bias {
            return bad(format!(
                "bias_dim {} cannot hold {} bias directions",
                self.bias_dim, self.n_bias
            ));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("bias_scale", self.bias_scale),
            ("noise_std", self.noise_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("bias_leak", self.bias_leak), ("quadratic_leak", self.quadratic_leak)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        match &self.joint {
            Some(p) => {
                if p.len() != self.n_classes * self.n_bias {
                    return bad(format!(
                        "joint table has {} entries for a {}x{} grid",
                        p.len(),
                        self.n_classes,
                        self.n_bias
                    ));
                }
                if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad("joint table entries must be nonnegative".into());
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("joint table sums to {total}, not 1"));
                }
            }
            None => {
                if self.n_classes != self.n_bias {
                    return bad(format!(
                        "aligned/conflicting construction needs n_classes = n_bias, got {} and {}",
                        self.n_classes, self.n_bias
                    ));
                }
                if !(self.conflict_ratio > 0.0 && self.conflict_ratio < 1.0) {
                    return bad(format!(
                        "conflict_ratio must lie in (0, 1), got {}",
                        self.conflict_ratio
                    ));
                }
            }
        }
        Ok(())
    }

    /// Training joint `P(y, b)`, row-major.
    pub fn training_joint(&self) -> Vec<f64> {
        if let Some(p) = &self.joint {
            return p.clone();
        }
        let k = self.n_classes;
        let on = (1.0 - self.conflict_ratio) / k as f64;
        let off = self.conflict_ratio / (k * (k - 1)) as f64;
        (0..k * k)
            .map(|g| if g / k == g % k { on } else { off })
            .collect()
    }
}

/// Labels and both feature blocks of one split (features as rows,
/// samples as columns).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<u64>,
    pub y: Vec<usize>,
    pub b: Vec<usize>,
    pub target: Matrix,
    pub bias: Matrix,
    pub n_classes: usize,
    pub n_bias: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Sample counts per `(y, b)` cell, indexed `y * n_bias + b`.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes * self.n_bias];
        for (&y, &b) in self.y.iter().zip(&self.b) {
            c[y * self.n_bias + b] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: FeatureSet,
    pub test: FeatureSet,
}

fn sample_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_cell(rng: &mut ChaCha20Rng, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Features of one sample given its labels, appended to the column buffers.
fn draw_features(spec: &SynthSpec, rng: &mut ChaCha20Rng, y: usize, b: usize, t: &mut [f64], z: &mut [f64]) {
    for (k, v) in t.iter_mut().enumerate() {
        let g: f64 = rng.sample(StandardNormal);
        *v = spec.noise_std * g;
        if k == y {
            *v += spec.signal_strength;
        }
        if k == b {
            *v += spec.bias_leak;
        }
    }
    for (k, v) in z.iter_mut().enumerate() {
        let g: f64 = rng.sample(StandardNormal);
        *v = spec.noise_std * g;
        if k == b {
            *v += spec.bias_scale;
        }
    }
    if spec.quadratic_leak > 0.0 {
        let g: f64 = rng.sample(StandardNormal);
        let sign = if b.is_multiple_of(2) { 1.0 } else { -1.0 };
        let last = t.len() - 1;
        t[last] += spec.quadratic_leak * sign * (g * g - 1.0);
    }
}

fn assemble(
    spec: &SynthSpec,
    ids: Vec<u64>,
    labels: Vec<(usize, usize)>,
    t: Vec<f64>,
    z: Vec<f64>,
) -> FeatureSet {
    let n = labels.len();
    // buffers are sample-major; features are stored feature-major
    let t = Matrix::from_vec(n, spec.target_dim, t).expect("buffer sized").transpose();
    let z = Matrix::from_vec(n, spec.bias_dim, z).expect("buffer sized").transpose();
    FeatureSet {
        ids,
        y: labels.iter().map(|l| l.0).collect(),
        b: labels.iter().map(|l| l.1).collect(),
        target: t,
        bias: z,
        n_classes: spec.n_classes,
        n_bias: spec.n_bias,
    }
}

/// Generates the training split and the stratified test split.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, DataError> {
    spec.validate()?;
    let (m, mb) = (spec.target_dim, spec.bias_dim);
    let joint = spec.training_joint();
    let cumulative: Vec<f64> = joint
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let n = spec.n_samples;
    let mut t = vec![0.0; n * m];
    let mut z = vec![0.0; n * mb];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_stream(spec.seed, i as u64);
        let g = draw_cell(&mut rng, &cumulative);
        let (y, b) = (g / spec.n_bias, g % spec.n_bias);
        draw_features(spec, &mut rng, y, b, &mut t[i * m..(i + 1) * m], &mut z[i * mb..(i + 1) * mb]);
        labels.push((y, b));
    }
    let train = assemble(spec, (0..n as u64).collect(), labels, t, z);

    let cells = spec.n_classes * spec.n_bias;
    let nt = cells * spec.test_per_cell;
    let mut t = vec![0.0; nt * m];
    let mut z = vec![0.0; nt * mb];
    let mut labels = Vec::with_capacity(nt);
    for i in 0..nt {
        // round-robin over cells keeps every prefix close to balanced
        let g = i % cells;
        let (y, b) = (g / spec.n_bias, g % spec.n_bias);
        let mut rng = sample_stream(spec.seed, TEST_STREAM_BASE + i as u64);
        draw_features(spec, &mut rng, y, b, &mut t[i * m..(i + 1) * m], &mut z[i * mb..(i + 1) * mb]);
        labels.push((y, b));
    }
    let test = assemble(spec, (0..nt as u64).collect(), labels, t, z);

    Ok(SynthDataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Column names `id,y,b,t_0..t_{M−1},z_0..z_{M'−1}`.
pub fn csv_header(target_dim: usize, bias_dim: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "y".to_string(), "b".to_string()];
    h.extend((0..target_dim).map(|k| format!("t_{k}")));
    h.extend((0..bias_dim).map(|k| format!("z_{k}")));
    h
}

/// Writes a split as CSV (LF line endings, shortest round-trip reals).
pub fn write_csv(set: &FeatureSet, path: &Path) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_io(e, path))?;
    w.write_record(csv_header(set.target.rows(), set.bias.rows()))
        .map_err(|e| csv_io(e, path))?;
    let mut row = Vec::new();
    for i in 0..set.len() {
        row.clear();
        row.push(set.ids[i].to_string());
        row.push(set.y[i].to_string());
        row.push(set.b[i].to_string());
        row.extend((0..set.target.rows()).map(|k| realstr::format(set.target[(k, i)])));
        row.extend((0..set.bias.rows()).map(|k| realstr::format(set.bias[(k, i)])));
        w.write_record(&row).map_err(|e| csv_io(e, path))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_io(e: csv::Error, path: &Path) -> DataError {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        other => DataError::ParseError {
            line: line.unwrap_or(0),
            message: format!("{other:?}"),
        },
    }
}

/// Label cardinalities for [`load_csv`]; inferred from the data when `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelSpace {
    pub n_classes: Option<usize>,
    pub n_bias: Option<usize>,
}

/// Reads a split written by [`write_csv`] (or any file following the same
/// header contract). Block widths come from the header.
pub fn load_csv(path: &Path, labels: LabelSpace) -> Result<FeatureSet, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_io(e, path))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let m = header.iter().filter(|h| h.starts_with("t_")).count();
    let mb = header.iter().filter(|h| h.starts_with("z_")).count();
    let expected = csv_header(m, mb);
    for col in &expected {
        if !header.contains(col) {
            return Err(DataError::SchemaError(format!("missing column {col}")));
        }
    }
    if let Some(extra) = header.iter().find(|h| !expected.contains(h)) {
        return Err(DataError::SchemaError(format!("unexpected column {extra}")));
    }
    if header != expected {
        return Err(DataError::SchemaError(format!(
            "columns must appear in the order {}",
            expected.join(",")
        )));
    }
    if m == 0 || mb == 0 {
        return Err(DataError::SchemaError("need at least one t_ and one z_ column".into()));
    }

    let mut ids = Vec::new();
    let mut ys = Vec::new();
    let mut bs = Vec::new();
    let mut t = Vec::new();
    let mut z = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(e, path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |col: &str, v: &str, why: String| DataError::ParseError {
            line,
            message: format!("column {col}: {v:?} {why}"),
        };
        let int = |k: usize| -> Result<u64, DataError> {
            let v = rec[k].trim();
            v.parse::<u64>()
                .map_err(|e| perr(&expected[k], v, format!("is not a nonnegative integer ({e})")))
        };
        ids.push(int(0)?);
        ys.push(int(1)? as usize);
        bs.push(int(2)? as usize);
        for k in 3..expected.len() {
            let v = rec[k].trim();
            let x = realstr::parse(v).map_err(|e| perr(&expected[k], v, format!("is not a real ({e})")))?;
            if !x.is_finite() {
                return Err(perr(&expected[k], v, "is not finite".into()));
            }
            if k < 3 + m {
                t.push(x);
            } else {
                z.push(x);
            }
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(DataError::SchemaError("no data rows".into()));
    }
    let n_classes = labels
        .n_classes
        .unwrap_or_else(|| ys.iter().max().unwrap() + 1);
    let n_bias = labels.n_bias.unwrap_or_else(|| bs.iter().max().unwrap() + 1);
    if let Some(i) = ys.iter().position(|&v| v >= n_classes) {
        return Err(DataError::ParseError {
            line: i as u64 + 2,
            message: format!("target label {} outside 0..{n_classes}", ys[i]),
        });
    }
    if let Some(i) = bs.iter().position(|&v| v >= n_bias) {
        return Err(DataError::ParseError {
            line: i as u64 + 2,
            message: format!("bias label {} outside 0..{n_bias}", bs[i]),
        });
    }
    Ok(FeatureSet {
        ids,
        y: ys,
        b: bs,
        target: Matrix::from_vec(n, m, t).expect("row widths checked").transpose(),
        bias: Matrix::from_vec(n, mb, z).expect("row widths checked").transpose(),
        n_classes,
        n_bias,
    })
}

/// Metadata written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub generator: String,
    pub split: String,
    pub spec: SynthSpec,
}

/// Writes `<stem>_train.csv`, `<stem>_test.csv` and `<stem>.json` into `dir`
/// and returns the two CSV paths.
pub fn write_dataset(
    ds: &SynthDataset,
    dir: &Path,
    stem: &str,
) -> Result<(std::path::PathBuf, std::path::PathBuf), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let train = dir.join(format!("{stem}_train.csv"));
    let test = dir.join(format!("{stem}_test.csv"));
    write_csv(&ds.train, &train)?;
    write_csv(&ds.test, &test)?;
    let meta = serde_json::json!({
        "generator": GENERATOR_ID,
        "spec": ds.spec,
        "splits": {
            "train": train.file_name().unwrap().to_string_lossy(),
            "test": test.file_name().unwrap().to_string_lossy(),
        },
    });
    let side = dir.join(format!("{stem}.json"));
    let mut f = File::create(&side).map_err(io_err(&side))?;
    let body = serde_json::to_string_pretty(&meta).expect("plain data serializes");
    f.write_all(body.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(io_err(&side))?;
    Ok((train, test))
}
