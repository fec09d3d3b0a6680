//! Datasets, normalization, segmentation into overlapping windows, synthetic
//! data and forecasting targets.
//!
//! Time and segment indices are 0-based throughout the API: segment `i`
//! covers data points `starts[i]..starts[i] + window`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng;
use crate::rnn::{forward, CellSpec, HiddenState, Params};

/// Affine map `z = (x - center) / half_range` onto `[-1, 1]`.
/// A zero range maps every value to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub name: String,
    pub center: f64,
    pub half_range: f64,
}

impl ColumnTransform {
    pub fn identity(name: impl Into<String>) -> Self {
        ColumnTransform {
            name: name.into(),
            center: 0.0,
            half_range: 1.0,
        }
    }

    /// Min-max fit. Empty input gives the identity.
    pub fn fit(name: impl Into<String>, values: &[f64]) -> Self {
        let name = name.into();
        if values.is_empty() {
            return ColumnTransform::identity(name);
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ColumnTransform {
            name,
            center: 0.5 * (lo + hi),
            half_range: 0.5 * (hi - lo),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.half_range == 0.0 {
            0.0
        } else {
            (x - self.center) / self.half_range
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        self.center + self.half_range * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
    pub input_transforms: Vec<ColumnTransform>,
    pub target_transforms: Vec<ColumnTransform>,
}

impl TimeSeriesDataset {
    /// Wraps raw (already scaled) sequences with identity transforms.
    pub fn new(name: impl Into<String>, inputs: Vec<Vector>, targets: Vec<Vector>) -> Result<Self> {
        let d_x = inputs.first().map_or(0, |v| v.len());
        let d_y = targets.first().map_or(0, |v| v.len());
        let ds = TimeSeriesDataset {
            name: name.into(),
            input_transforms: (0..d_x).map(|k| ColumnTransform::identity(format!("x{k}"))).collect(),
            target_transforms: (0..d_y).map(|k| ColumnTransform::identity(format!("y{k}"))).collect(),
            inputs,
            targets,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("dataset must contain at least one time step".into()));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::dim("dataset length", self.inputs.len(), self.targets.len()));
        }
        let (d_x, d_y) = (self.d_x(), self.d_y());
        if d_x == 0 || d_y == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        for (t, (x, y)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if x.len() != d_x {
                return Err(Error::dim("dataset input", d_x, format!("{} at step {t}", x.len())));
            }
            if y.len() != d_y {
                return Err(Error::dim("dataset target", d_y, format!("{} at step {t}", y.len())));
            }
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite { context: "dataset", t: t + 1 });
            }
        }
        if self.input_transforms.len() != d_x || self.target_transforms.len() != d_y {
            return Err(Error::Config("one transform per column is required".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.inputs.first().map_or(0, |v| v.len())
    }

    pub fn d_y(&self) -> usize {
        self.targets.first().map_or(0, |v| v.len())
    }

    /// Fits min-max transforms on this data and applies them. Transforms
    /// already present are composed, so the recorded map always refers to
    /// the original units.
    pub fn normalized(self) -> Self {
        let fit = |cols: &[Vector], existing: &[ColumnTransform]| -> Vec<ColumnTransform> {
            existing
                .iter()
                .enumerate()
                .map(|(k, tr)| {
                    let raw: Vec<f64> = cols.iter().map(|v| tr.invert(v[k])).collect();
                    ColumnTransform::fit(tr.name.clone(), &raw)
                })
                .collect()
        };
        let input_transforms = fit(&self.inputs, &self.input_transforms);
        let target_transforms = fit(&self.targets, &self.target_transforms);
        self.with_transforms(input_transforms, target_transforms)
    }

    /// Re-expresses the data under the given transforms (e.g. those fitted
    /// on a training split).
    pub fn with_transforms(
        self,
        input_transforms: Vec<ColumnTransform>,
        target_transforms: Vec<ColumnTransform>,
    ) -> Self {
        let remap = |cols: Vec<Vector>, old: &[ColumnTransform], new: &[ColumnTransform]| {
            cols.into_iter()
                .map(|v| {
                    Vector::new(
                        v.iter()
                            .enumerate()
                            .map(|(k, z)| new[k].apply(old[k].invert(*z)))
                            .collect(),
                    )
                })
                .collect()
        };
        TimeSeriesDataset {
            name: self.name,
            inputs: remap(self.inputs, &self.input_transforms, &input_transforms),
            targets: remap(self.targets, &self.target_transforms, &target_transforms),
            input_transforms,
            target_transforms,
        }
    }

    pub fn raw_inputs(&self) -> Vec<Vector> {
        denormalize(&self.inputs, &self.input_transforms)
    }

    pub fn raw_targets(&self) -> Vec<Vector> {
        denormalize(&self.targets, &self.target_transforms)
    }

    /// Maps model outputs back to target units.
    pub fn denormalize_outputs(&self, outputs: &[Vector]) -> Vec<Vector> {
        denormalize(outputs, &self.target_transforms)
    }

    /// Largest absolute entry over inputs and targets.
    pub fn max_abs(&self) -> f64 {
        self.inputs
            .iter()
            .chain(&self.targets)
            .map(|v| v.norm_inf())
            .fold(0.0, f64::max)
    }

    /// Sub-range of time steps as a new dataset with the same transforms.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::OutOfRange {
                what: "time",
                index: range.end,
                valid: format!("non-empty range within 0..{}", self.len()),
            });
        }
        Ok(TimeSeriesDataset {
            name: self.name.clone(),
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
            input_transforms: self.input_transforms.clone(),
            target_transforms: self.target_transforms.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: TimeSeriesDataset = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the data in original units, one row per time step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let header: Vec<&str> = self
            .input_transforms
            .iter()
            .chain(&self.target_transforms)
            .map(|t| t.name.as_str())
            .collect();
        w.write_record(&header)?;
        for (x, y) in self.raw_inputs().iter().zip(self.raw_targets()) {
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            w.write_record(&row)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(e.into_error()))?
            .flush()?;
        Ok(())
    }
}

fn denormalize(cols: &[Vector], transforms: &[ColumnTransform]) -> Vec<Vector> {
    cols.iter()
        .map(|v| Vector::new(v.iter().zip(transforms).map(|(z, t)| t.invert(*z)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub t_len: usize,
    pub window: usize,
    /// 0-based start of each segment, strictly ascending.
    pub starts: Vec<usize>,
    /// `overlaps[i - 1]` is the overlap between segments `i - 1` and `i`.
    pub overlaps: Vec<usize>,
    /// Smallest overlap; `window - 1` when there is a single segment.
    pub min_overlap: usize,
}

impl SegmentationPlan {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Data index range covered by segment `i`.
    pub fn range(&self, i: usize) -> Range<usize> {
        self.starts[i]..self.starts[i] + self.window
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.count() {
            return Err(Error::OutOfRange {
                what: "segment",
                index: i,
                valid: format!("0..{}", self.count()),
            });
        }
        Ok(())
    }
}

/// Starts at `0, stride, 2·stride, ...`, with the last start moved to
/// `t_len - window` so the segments cover the whole sequence.
pub fn make_plan(t_len: usize, window: usize, stride: usize) -> Result<SegmentationPlan> {
    if window == 0 || window > t_len {
        return Err(Error::Config(format!(
            "window must satisfy 1 <= N <= T (N = {window}, T = {t_len})"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::Config(format!(
            "stride must satisfy 1 <= stride <= N (stride = {stride}, N = {window})"
        )));
    }
    let last = t_len - window;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    let overlaps: Vec<usize> = starts.windows(2).map(|w| window - (w[1] - w[0])).collect();
    let min_overlap = overlaps.iter().copied().min().unwrap_or(window - 1);
    Ok(SegmentationPlan {
        t_len,
        window,
        starts,
        overlaps,
        min_overlap,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub index: usize,
    pub inputs: &'a [Vector],
    pub targets: &'a [Vector],
}

impl Segment<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn extract<'a>(dataset: &'a TimeSeriesDataset, plan: &SegmentationPlan, i: usize) -> Result<Segment<'a>> {
    plan.check_index(i)?;
    if plan.t_len != dataset.len() {
        return Err(Error::dim("segmentation plan length", dataset.len(), plan.t_len));
    }
    let r = plan.range(i);
    Ok(Segment {
        index: i,
        inputs: &dataset.inputs[r.clone()],
        targets: &dataset.targets[r],
    })
}

/// Second-order SISO system `x1' = p1 x1 + u`, `x2' = p2 x2 + u`,
/// `y = c1 x1 + c2 x2`, driven by white Gaussian input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSystem {
    pub poles: [f64; 2],
    pub gains: [f64; 2],
    pub input_std: f64,
    pub noise_std: f64,
}

impl SyntheticSystem {
    pub fn new(noise_std: f64) -> Self {
        SyntheticSystem {
            poles: [0.9, 0.6],
            gains: [1.0, -0.5],
            input_std: 1.0,
            noise_std,
        }
    }

    /// Stationary variance of the noiseless output.
    pub fn signal_variance(&self) -> f64 {
        let [p1, p2] = self.poles;
        let [c1, c2] = self.gains;
        let s2 = self.input_std * self.input_std;
        s2 * (c1 * c1 / (1.0 - p1 * p1)
            + 2.0 * c1 * c2 / (1.0 - p1 * p2)
            + c2 * c2 / (1.0 - p2 * p2))
    }

    pub fn output_variance(&self) -> f64 {
        self.signal_variance() + self.noise_std * self.noise_std
    }

    /// The system written as a linear RNN (`d_h = 2`, scalar input/output).
    pub fn as_linear_rnn(&self) -> Params {
        let mut p = Params::zeros(CellSpec::linear(1, 2, 1)).expect("valid spec");
        p.set_block("W_hh", &[self.poles[0], 0.0, 0.0, self.poles[1]])
            .expect("block exists");
        p.set_block("W_xh", &[self.input_std, self.input_std]).expect("block exists");
        p.set_block("W_hy", &self.gains).expect("block exists");
        p
    }

    /// Raw `(inputs, noisy outputs)` of length `t_len`, simulated from rest.
    pub fn simulate(&self, seed: u64, t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let mut input_rng = rng::stream(seed, rng::PURPOSE_SYNTH_INPUT);
        let mut noise_rng = rng::stream(seed, rng::PURPOSE_SYNTH_NOISE);
        let [p1, p2] = self.poles;
        let [c1, c2] = self.gains;
        let (mut x1, mut x2) = (0.0, 0.0);
        let mut us = Vec::with_capacity(t_len);
        let mut ys = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let u = self.input_std * rng::standard_normal(&mut input_rng);
            x1 = p1 * x1 + u;
            x2 = p2 * x2 + u;
            us.push(u);
            ys.push(c1 * x1 + c2 * x2 + self.noise_std * rng::standard_normal(&mut noise_rng));
        }
        (us, ys)
    }
}

fn scalar_columns(name: &str, us: &[f64], ys: &[f64]) -> TimeSeriesDataset {
    TimeSeriesDataset {
        name: name.into(),
        inputs: us.iter().map(|u| Vector::new(vec![*u])).collect(),
        targets: ys.iter().map(|y| Vector::new(vec![*y])).collect(),
        input_transforms: vec![ColumnTransform::identity("u")],
        target_transforms: vec![ColumnTransform::identity("y")],
    }
}

/// Normalized training series from [`SyntheticSystem::new`], plus the system.
pub fn gen_synthetic(seed: u64, t_len: usize, noise_std: f64) -> Result<(TimeSeriesDataset, SyntheticSystem)> {
    let splits = gen_synthetic_splits(seed, t_len, 0, 0, noise_std)?;
    Ok((splits.train, splits.system))
}

#[derive(Clone, Debug)]
pub struct SyntheticSplits {
    pub train: TimeSeriesDataset,
    pub validation: Option<TimeSeriesDataset>,
    pub test: Option<TimeSeriesDataset>,
    pub system: SyntheticSystem,
}

/// One continuous simulation cut into train / validation / test; all splits
/// are normalized with the transforms fitted on the training part.
pub fn gen_synthetic_splits(
    seed: u64,
    t_train: usize,
    t_val: usize,
    t_test: usize,
    noise_std: f64,
) -> Result<SyntheticSplits> {
    if t_train == 0 {
        return Err(Error::Config("synthetic training length must be positive".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0 (got {noise_std})")));
    }
    let system = SyntheticSystem::new(noise_std);
    let (us, ys) = system.simulate(seed, t_train + t_val + t_test);
    let train = scalar_columns("synthetic-train", &us[..t_train], &ys[..t_train]).normalized();
    let split = |name: &str, r: Range<usize>| {
        (!r.is_empty()).then(|| {
            scalar_columns(name, &us[r.clone()], &ys[r]).with_transforms(
                train.input_transforms.clone(),
                train.target_transforms.clone(),
            )
        })
    };
    let validation = split("synthetic-validation", t_train..t_train + t_val);
    let test = split("synthetic-test", t_train + t_val..t_train + t_val + t_test);
    Ok(SyntheticSplits {
        train,
        validation,
        test,
        system,
    })
}

/// Data generated by `params` itself from a zero state under uniform inputs
/// on `[-1, 1]`. Outputs are scaled to max-abs 1; the returned parameters
/// carry the same scaling in the read-out, so they fit the data exactly.
pub fn realizable_dataset(params: &Params, seed: u64, t_len: usize) -> Result<(TimeSeriesDataset, Params)> {
    let spec = params.spec();
    let mut r = rng::stream(seed, rng::PURPOSE_SYNTH_INPUT);
    let inputs: Vec<Vector> = (0..t_len)
        .map(|_| Vector::new((0..spec.d_x).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()))
        .collect();
    let traj = forward(params, &HiddenState::zeros(spec.state_dim()), &inputs)?;
    let peak = traj.outputs.iter().map(|y| y.norm_inf()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let mut scaled = params.clone();
    for name in ["W_hy", "b_y"] {
        if let Ok(block) = params.block(name) {
            let v: Vec<f64> = block.iter().map(|w| w * scale).collect();
            scaled.set_block(name, &v)?;
        }
    }
    let targets = forward(&scaled, &HiddenState::zeros(spec.state_dim()), &inputs)?.outputs;
    let ds = TimeSeriesDataset::new("realizable", inputs, targets)?;
    Ok((ds, scaled))
}

/// Inputs `x_t = series[t]`, targets `(series[t+1], ..., series[t+F])`,
/// for `t < len - F`.
pub fn build_forecast_targets(series: &[f64], horizon: usize) -> Result<TimeSeriesDataset> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if series.len() <= horizon {
        return Err(Error::Config(format!(
            "series of length {} is too short for horizon {horizon}",
            series.len()
        )));
    }
    let t_len = series.len() - horizon;
    let inputs = series[..t_len].iter().map(|v| Vector::new(vec![*v])).collect();
    let targets = (0..t_len)
        .map(|t| Vector::new(series[t + 1..=t + horizon].to_vec()))
        .collect();
    let mut ds = TimeSeriesDataset::new("forecast", inputs, targets)?;
    ds.target_transforms = (1..=horizon)
        .map(|k| ColumnTransform::identity(format!("y+{k}")))
        .collect();
    Ok(ds)
}

/// Raw numeric columns of a headed CSV file, in the order requested.
pub fn read_columns(path: &Path, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| data_err(format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(data_err("empty file".into()));
    }
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| data_err(format!("missing column {c:?}")))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (k, &j) in idx.iter().enumerate() {
            let cell = record.get(j).unwrap_or("");
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            match value {
                Some(v) => out[k].push(v),
                None => {
                    return Err(Error::NonNumeric {
                        path: path.to_path_buf(),
                        row: row + 1,
                        column: columns[k].to_string(),
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    if out.first().is_none_or(|c| c.is_empty()) {
        return Err(data_err("no data rows".into()));
    }
    Ok(out)
}

/// Loads the named columns and min-max normalizes each to `[-1, 1]`.
pub fn load_csv(path: &Path, input_cols: &[&str], target_cols: &[&str]) -> Result<TimeSeriesDataset> {
    if input_cols.is_empty() || target_cols.is_empty() {
        return Err(Error::Config("at least one input and one target column are required".into()));
    }
    let cols: Vec<&str> = input_cols.iter().chain(target_cols).copied().collect();
    let raw = read_columns(path, &cols)?;
    let t_len = raw[0].len();
    let rows = |range: Range<usize>| -> Vec<Vector> {
        (0..t_len)
            .map(|t| Vector::new(raw[range.clone()].iter().map(|c| c[t]).collect()))
            .collect()
    };
    let n_in = input_cols.len();
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let ds = TimeSeriesDataset {
        name,
        inputs: rows(0..n_in),
        targets: rows(n_in..cols.len()),
        input_transforms: input_cols.iter().map(|c| ColumnTransform::identity(*c)).collect(),
        target_transforms: target_cols.iter().map(|c| ColumnTransform::identity(*c)).collect(),
    };
    ds.validate()?;
    Ok(ds.normalized())
}
