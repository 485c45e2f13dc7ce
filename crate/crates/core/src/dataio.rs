//! CSV ingestion, chronological splits, sliding windows, per-window
//! normalization and seeded synthetic series.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hstm::DeformationField;

/// Added to the window variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel z-score statistics of one input window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WindowNorm {
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 || x.rows() == 0 {
            return Err(Error::dim("window statistics", x.shape(), &[2]));
        }
        let (t, c) = (x.rows(), x.cols());
        let mut mean = vec![0.0; c];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / t as f64 + NORM_EPS).sqrt()).collect();
        Ok(Self { mean, std })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.mean.len() {
            return Err(Error::dim("normalization", x.shape(), &[x.len(), self.mean.len()]));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N x C]`.
    pub values: Tensor,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(values: Tensor, columns: Vec<String>) -> Result<Self> {
        if values.ndim() != 2 || values.cols() != columns.len() {
            return Err(Error::dim("dataset", values.shape(), &[values.len(), columns.len()]));
        }
        Ok(Self {
            values,
            columns,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Rows `range` as a `[len x C]` tensor.
    pub fn slice(&self, range: Range<usize>) -> Tensor {
        let c = self.channels();
        Tensor::new(
            vec![range.len(), c],
            self.values.data()[range.start * c..range.end * c].to_vec(),
        )
        .expect("slice within bounds")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::with_capacity(self.columns.len() + 1);
        if self.timestamps.is_some() {
            header.push("timestamp".to_string());
        }
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                rec.push(ts[r].clone());
            }
            rec.extend(self.values.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Reject,
    Interpolate,
}

impl FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(Self::Reject),
            "interpolate" => Ok(Self::Interpolate),
            _ => Err(Error::Config(format!("unknown missing-value policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvOptions {
    /// Timestamp column name; auto-detected by name when absent.
    pub timestamp_column: Option<String>,
    pub on_missing: MissingPolicy,
}

const TIMESTAMP_NAMES: [&str; 5] = ["date", "datetime", "time", "timestamp", "t"];

/// Orderable key of an ISO-8601 or integer timestamp.
fn timestamp_key(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp())
}

pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, options)
}

/// Parses a headed CSV. Data rows are numbered from 1 in error messages.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::Data("missing header row".into()));
    }
    let ts_col = match &options.timestamp_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("timestamp column {name:?} not found")))?,
        ),
        None => headers
            .iter()
            .position(|h| TIMESTAMP_NAMES.contains(&h.to_ascii_lowercase().as_str())),
    };
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != ts_col)
        .map(|(_, h)| h.clone())
        .collect();
    if columns.is_empty() {
        return Err(Error::Data("no numeric columns".into()));
    }

    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut stamps = ts_col.map(|_| Vec::new());
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {row}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        for (i, field) in record.iter().enumerate() {
            if Some(i) == ts_col {
                stamps
                    .as_mut()
                    .expect("timestamp column present")
                    .push(field.to_string());
                continue;
            }
            if field.is_empty() {
                if options.on_missing == MissingPolicy::Reject {
                    return Err(Error::Data(format!(
                        "row {row}, column {:?}: missing value",
                        headers[i]
                    )));
                }
                cells.push(None);
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("row {row}, column {:?}: cannot parse {field:?}", headers[i])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {row}, column {:?}: non-finite value",
                    headers[i]
                )));
            }
            cells.push(Some(v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    if let Some(ts) = &stamps {
        let mut prev: Option<i64> = None;
        for (r, s) in ts.iter().enumerate() {
            let key =
                timestamp_key(s).ok_or_else(|| Error::Data(format!("row {}: cannot parse timestamp {s:?}", r + 1)))?;
            if prev.is_some_and(|p| key <= p) {
                return Err(Error::Data(format!(
                    "row {}: timestamps are not strictly increasing",
                    r + 1
                )));
            }
            prev = Some(key);
        }
    }
    let c = columns.len();
    let values = fill_missing(&cells, rows, c, &columns)?;
    Ok(Dataset {
        values: Tensor::new(vec![rows, c], values)?,
        columns,
        timestamps: stamps,
    })
}

/// Linear interpolation between the nearest present neighbours of each gap.
fn fill_missing(cells: &[Option<f64>], rows: usize, cols: usize, names: &[String]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let col: Vec<Option<f64>> = (0..rows).map(|r| cells[r * cols + c]).collect();
        for r in 0..rows {
            out[r * cols + c] = match col[r] {
                Some(v) => v,
                None => {
                    let before = (0..r).rev().find_map(|i| col[i].map(|v| (i, v)));
                    let after = (r + 1..rows).find_map(|i| col[i].map(|v| (i, v)));
                    match (before, after) {
                        (Some((i0, v0)), Some((i1, v1))) => {
                            let w = (r - i0) as f64 / (i1 - i0) as f64;
                            v0 + w * (v1 - v0)
                        }
                        _ => {
                            return Err(Error::Data(format!(
                                "row {}, column {:?}: missing value at the edge cannot be interpolated",
                                r + 1,
                                names[c]
                            )))
                        }
                    }
                }
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn test_frac(&self) -> f64 {
        1.0 - self.train_frac - self.val_frac
    }
}

/// Contiguous chronological index ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Sizes `floor(train_frac N)`, `floor(val_frac N)` and the remainder.
    pub fn new(n: usize, spec: &SplitSpec) -> Result<Self> {
        let test_frac = spec.test_frac();
        if spec.train_frac <= 0.0 || spec.val_frac <= 0.0 || test_frac <= 0.0 {
            return Err(Error::Config(format!("split fractions must be positive, got {spec:?}")));
        }
        let train = (spec.train_frac * n as f64).floor() as usize;
        let val = (spec.val_frac * n as f64).floor() as usize;
        Ok(Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..n,
        })
    }

    /// Range windows of a split are drawn from. Validation and test windows
    /// may reach `T_s - 1` samples back into the previous split unless
    /// `strict`.
    pub fn window_source(&self, which: Split, input_len: usize, strict: bool) -> Range<usize> {
        let r = match which {
            Split::Train => return self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        };
        if strict {
            r
        } else {
            r.start.saturating_sub(input_len - 1)..r.end
        }
    }

    /// Checks that every split supports at least one window.
    pub fn check_windows(&self, input_len: usize, horizon: usize, strict: bool) -> Result<()> {
        for which in Split::ALL {
            let r = self.window_source(which, input_len, strict);
            if r.len() < input_len + horizon {
                return Err(Error::Data(format!(
                    "{which} split spans {} samples, fewer than T_s + T_p = {}",
                    r.len(),
                    input_len + horizon
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One (input, target) pair addressed by its first row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSeriesWindow {
    pub start: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl TimeSeriesWindow {
    pub fn input_range(&self) -> Range<usize> {
        self.start..self.start + self.input_len
    }

    pub fn target_range(&self) -> Range<usize> {
        self.start + self.input_len..self.start + self.input_len + self.horizon
    }

    pub fn input(&self, data: &Dataset) -> Tensor {
        data.slice(self.input_range())
    }

    pub fn target(&self, data: &Dataset) -> Tensor {
        data.slice(self.target_range())
    }
}

/// `floor((len - T_s - T_p) / stride) + 1`, or 0 when the range is too short.
pub fn window_count(len: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || len < input_len + horizon {
        0
    } else {
        (len - input_len - horizon) / stride + 1
    }
}

pub fn windows(range: Range<usize>, input_len: usize, horizon: usize, stride: usize) -> Vec<TimeSeriesWindow> {
    let n = window_count(range.len(), input_len, horizon, stride);
    (0..n)
        .map(|i| TimeSeriesWindow {
            start: range.start + i * stride,
            input_len,
            horizon,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "sine")]
    Sine,
    #[serde(rename = "sine+trend")]
    SineTrend,
    #[serde(rename = "sine+trend+noise")]
    SineTrendNoise,
    #[serde(rename = "am-modulated")]
    AmModulated,
    #[serde(rename = "warped")]
    Warped,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Sine => "sine",
            SynthKind::SineTrend => "sine+trend",
            SynthKind::SineTrendNoise => "sine+trend+noise",
            SynthKind::AmModulated => "am-modulated",
            SynthKind::Warped => "warped",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SynthKind::Sine,
            SynthKind::SineTrend,
            SynthKind::SineTrendNoise,
            SynthKind::AmModulated,
            SynthKind::Warped,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown synthetic kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub channels: usize,
    pub amplitude: f64,
    /// Period of channel 0; channel `c` uses `round(period (1 + c / 2))`.
    pub period: f64,
    /// Per-sample trend slope.
    pub slope: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Envelope period of the amplitude modulation.
    pub envelope_period: f64,
    pub modulation_depth: f64,
    /// Maximum slope of the time warp.
    pub warp: f64,
    pub warp_cycles: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            channels: 1,
            amplitude: 1.0,
            period: 24.0,
            slope: 5e-4,
            noise: 0.25,
            envelope_period: 192.0,
            modulation_depth: 0.5,
            warp: 0.05,
            warp_cycles: 4.0,
        }
    }
}

/// Seeded synthetic series. Channel `c` carries a sinusoid whose phase is a
/// whole number of samples, so peaks fall on the sampling grid.
pub fn synth(kind: SynthKind, params: &SynthParams, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || params.channels == 0 || params.period <= 0.0 {
        return Err(Error::Config("synth needs n, channels and period > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut columns = Vec::with_capacity(params.channels);
    for c in 0..params.channels {
        let period = (params.period * (1.0 + 0.5 * c as f64)).round().max(1.0);
        let shift = c as f64;
        let mut x: Vec<f64> = (0..n)
            .map(|t| params.amplitude * (tau * (t as f64 + shift) / period).sin())
            .collect();
        match kind {
            SynthKind::AmModulated => {
                for (t, v) in x.iter_mut().enumerate() {
                    *v *= 1.0 + params.modulation_depth * (tau * t as f64 / params.envelope_period).sin();
                }
            }
            SynthKind::Warped => {
                let field = DeformationField::sinusoidal(n, params.warp, params.warp_cycles);
                x = field.apply(&Tensor::vector(x))?.into_data();
            }
            _ => {}
        }
        if matches!(kind, SynthKind::SineTrend | SynthKind::SineTrendNoise) {
            for (t, v) in x.iter_mut().enumerate() {
                *v += params.slope * t as f64;
            }
        }
        if kind == SynthKind::SineTrendNoise {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += params.noise * z;
            }
        }
        columns.push(x);
    }
    let names = (0..params.channels).map(|c| format!("ch{c}")).collect();
    Dataset::new(Tensor::from_columns(&columns)?, names)
}

/// Writes rows `(window_id, t, channel, y_true, y_pred)`; `t` is the
/// absolute row index of the target sample.
pub fn write_predictions<W: Write>(
    writer: W,
    windows: &[TimeSeriesWindow],
    truth: &[Tensor],
    predictions: &[Tensor],
    columns: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["window_id", "t", "channel", "y_true", "y_pred"])?;
    for (id, ((win, y), p)) in windows.iter().zip(truth).zip(predictions).enumerate() {
        for (k, t) in win.target_range().enumerate() {
            for (c, name) in columns.iter().enumerate() {
                w.write_record(&[
                    id.to_string(),
                    t.to_string(),
                    name.clone(),
                    format!("{:?}", y.at(k, c)),
                    format!("{:?}", p.at(k, c)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
