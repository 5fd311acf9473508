//! CSV ingestion, chronological splits, standardisation, sliding windows and
//! synthetic drift streams.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot parse {value:?} at row {row}, column {column}")]
    Parse { row: usize, column: String, value: String },
    #[error("{0} contains no data rows")]
    Empty(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn bad(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// A multivariate series: `len` rows of `feature_names.len()` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    pub timestamps: Option<Vec<String>>,
    pub feature_names: Vec<String>,
    pub target_index: usize,
}

impl Dataset {
    /// Row-major values; the last feature is the default target.
    pub fn new(values: Vec<f64>, feature_names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self, DataError> {
        let d = feature_names.len();
        if d == 0 || values.len() % d != 0 {
            return Err(bad(format!("{} values do not fill rows of {d} features", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("dataset values must be finite"));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.len() / d {
                return Err(bad("timestamp count differs from row count"));
            }
        }
        Ok(Dataset {
            values,
            timestamps,
            target_index: d - 1,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dims()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.feature_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.dims() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, col)).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let d = self.dims();
        Dataset {
            values: self.values[start * d..end * d].to_vec(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            feature_names: self.feature_names.clone(),
            target_index: self.target_index,
        }
    }

    pub fn set_target(&mut self, name: &str) -> Result<(), DataError> {
        self.target_index = self
            .feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| bad(format!("no column named {name:?}")))?;
        Ok(())
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dims()], self.values.clone()).expect("finite by construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NaN" | "nan" | "NA" | "null")
}

/// Reads a comma-separated file with a header row. A first column named
/// `date` or holding non-numeric text is kept as timestamps. Rows with a
/// missing or NaN cell are dropped and counted.
pub fn load_csv(path: &Path) -> Result<(Dataset, LoadReport), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    let empty = || DataError::Empty(path.display().to_string());
    let first = records.first().ok_or_else(empty)?;
    let has_date = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"))
        || first.get(0).is_some_and(|c| !is_missing(c) && c.trim().parse::<f64>().is_err());
    let offset = has_date as usize;
    if header.len() <= offset {
        return Err(bad("no numeric columns"));
    }
    let names: Vec<String> = header[offset..].to_vec();
    let mut values = Vec::with_capacity(records.len() * names.len());
    let mut stamps = Vec::new();
    let mut dropped = 0;
    'rows: for (i, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(bad(format!("row {} has {} cells, expected {}", i + 2, rec.len(), header.len())));
        }
        let mut row = Vec::with_capacity(names.len());
        for (j, cell) in rec.iter().enumerate().skip(offset) {
            if is_missing(cell) {
                dropped += 1;
                continue 'rows;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row: i + 2,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                dropped += 1;
                continue 'rows;
            }
            row.push(v);
        }
        values.extend(row);
        if has_date {
            stamps.push(rec[0].to_string());
        }
    }
    if values.is_empty() {
        return Err(empty());
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing values", path.display());
    }
    let ds = Dataset::new(values, names, has_date.then_some(stamps))?;
    let rows = ds.len();
    Ok((ds, LoadReport { rows, dropped }))
}

/// Writes `ds` with a header row (and a `date` column when present).
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = Vec::new();
    if ds.timestamps.is_some() {
        header.push("date");
    }
    header.extend(ds.feature_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = &ds.timestamps {
            rec.push(ts[r].clone());
        }
        rec.extend((0..ds.dims()).map(|c| ds.value(r, c).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// First row of val and of test.
    pub boundaries: [usize; 2],
}

/// Contiguous train/val/test slices. Train and val lengths are floored;
/// test takes the remainder. Every part must hold at least `min_len` rows.
pub fn chrono_split(ds: &Dataset, ratios: [f64; 3], min_len: usize) -> Result<Splits, DataError> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(bad(format!("split ratios {ratios:?} must all be positive")));
    }
    let total: f64 = ratios.iter().sum();
    let n = ds.len();
    let train = (n as f64 * ratios[0] / total + 1e-9).floor() as usize;
    let val = (n as f64 * ratios[1] / total + 1e-9).floor() as usize;
    let test = n - train - val;
    let need = min_len.max(1);
    for (name, len) in [("train", train), ("val", val), ("test", test)] {
        if len < need {
            return Err(bad(format!("{name} split has {len} rows, needs at least {need}")));
        }
    }
    Ok(Splits {
        train: ds.slice(0, train),
        val: ds.slice(train, train + val),
        test: ds.slice(train + val, n),
        boundaries: [train, train + val],
    })
}

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Statistics of `train`; a feature with (near) zero spread gets std 1.
    pub fn fit(train: &Dataset) -> Result<Scaler, DataError> {
        if train.is_empty() {
            return Err(bad("cannot standardise with an empty train split"));
        }
        let (n, d) = (train.len() as f64, train.dims());
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let col = train.column(c);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = if var.sqrt() <= 1e-12 * m.abs().max(1.0) {
                log::warn!("feature {:?} is constant on the train split; leaving it unscaled", train.feature_names[c]);
                1.0
            } else {
                var.sqrt()
            };
        }
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset, DataError> {
        if ds.dims() != self.mean.len() {
            return Err(bad(format!("scaler for {} features applied to {}", self.mean.len(), ds.dims())));
        }
        let d = ds.dims();
        let values = ds.values.iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect();
        Ok(Dataset { values, ..ds.clone() })
    }

    /// Maps a standardised value of feature `col` back to data units.
    pub fn inverse(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }
}

/// Standardises all three splits with train statistics.
pub fn standardize(splits: &Splits) -> Result<(Splits, Scaler), DataError> {
    let s = Scaler::fit(&splits.train)?;
    Ok((
        Splits {
            train: s.transform(&splits.train)?,
            val: s.transform(&splits.val)?,
            test: s.transform(&splits.test)?,
            boundaries: splits.boundaries,
        },
        s,
    ))
}

/// Which columns feed the model and which are forecast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// All columns in, all columns out.
    M,
    /// Target column in, target column out.
    #[default]
    S,
    /// All columns in, target column out.
    MS,
}

impl FeatureMode {
    /// `(input columns, output columns)` for a dataset of `dims` features.
    pub fn columns(self, dims: usize, target: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            FeatureMode::M => ((0..dims).collect(), (0..dims).collect()),
            FeatureMode::S => (vec![target], vec![target]),
            FeatureMode::MS => ((0..dims).collect(), vec![target]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub input_len: usize,
    pub pred_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.input_len == 0 || self.pred_len == 0 || self.stride == 0 {
            return Err(bad("window lengths and stride must be positive"));
        }
        if self.input_len % 2 != 0 {
            return Err(bad(format!("input_len {} must be even", self.input_len)));
        }
        Ok(())
    }
}

/// `floor((T − I − O) / stride) + 1`.
pub fn window_count(total: usize, spec: &WindowSpec) -> Result<usize, DataError> {
    spec.validate()?;
    let span = spec.input_len + spec.pred_len;
    if total < span {
        return Err(bad(format!("{total} rows cannot hold one window of {span}")));
    }
    Ok((total - span) / spec.stride + 1)
}

/// Sliding `(x, y)` pairs over one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    source: Dataset,
    spec: WindowSpec,
    in_cols: Vec<usize>,
    out_cols: Vec<usize>,
    count: usize,
}

impl Windows {
    pub fn new(ds: &Dataset, spec: WindowSpec, mode: FeatureMode) -> Result<Self, DataError> {
        let count = window_count(ds.len(), &spec)?;
        let (in_cols, out_cols) = mode.columns(ds.dims(), ds.target_index);
        Ok(Windows {
            source: ds.clone(),
            spec,
            in_cols,
            out_cols,
            count,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.in_cols.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_cols.len()
    }

    pub fn in_columns(&self) -> &[usize] {
        &self.in_cols
    }

    pub fn out_columns(&self) -> &[usize] {
        &self.out_cols
    }

    /// First input row of window `i`.
    pub fn start(&self, i: usize) -> usize {
        i * self.spec.stride
    }

    fn gather(&self, idx: &[usize], offset: usize, len: usize, cols: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * len * cols.len());
        for &i in idx {
            let s = self.start(i) + offset;
            for r in s..s + len {
                data.extend(cols.iter().map(|&c| self.source.value(r, c)));
            }
        }
        Tensor::new(vec![idx.len(), len, cols.len()], data).expect("finite by construction")
    }

    /// Inputs `[N, I, D_in]` and targets `[N, O, D_out]` for windows `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (i, o) = (self.spec.input_len, self.spec.pred_len);
        (self.gather(idx, 0, i, &self.in_cols), self.gather(idx, i, o, &self.out_cols))
    }

    /// Persistence forecast: the last observed value of each output column
    /// repeated over the horizon.
    pub fn persistence(&self, idx: &[usize]) -> Tensor {
        let last = self.gather(idx, self.spec.input_len - 1, 1, &self.out_cols);
        let (o, d) = (self.spec.pred_len, self.out_cols.len());
        let mut data = Vec::with_capacity(idx.len() * o * d);
        for n in 0..idx.len() {
            for _ in 0..o {
                data.extend_from_slice(&last.data()[n * d..(n + 1) * d]);
            }
        }
        Tensor::new(vec![idx.len(), o, d], data).expect("finite by construction")
    }

    /// Consecutive index batches of at most `size`.
    pub fn sequential_batches(&self, size: usize) -> Vec<Vec<usize>> {
        let all: Vec<usize> = (0..self.count).collect();
        all.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// `(mse, mae)` over all elements.
pub fn mse_mae(pred: &Tensor, target: &Tensor) -> Result<(f64, f64), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape {
            op: "mse_mae",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.numel() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(target.data()) {
        se += (p - t).powi(2);
        ae += (p - t).abs();
    }
    Ok((se / n, ae / n))
}

/// One regime of a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSegment {
    pub length: usize,
    /// Cycles per step.
    pub frequency: f64,
    pub amplitude: f64,
    /// Level change per step.
    pub trend_slope: f64,
    pub noise_std: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    #[default]
    Abrupt,
    Gradual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftScript {
    pub segments: Vec<DriftSegment>,
    #[serde(default)]
    pub drift_kind: DriftKind,
    #[serde(default)]
    pub blend_len: usize,
}

impl DriftScript {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.segments.is_empty() {
            return Err(bad("drift script needs at least one segment"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.length == 0 {
                return Err(bad(format!("segment {i} has zero length")));
            }
            let finite = [s.frequency, s.amplitude, s.trend_slope, s.noise_std].iter().all(|v| v.is_finite());
            if !finite || s.noise_std < 0.0 {
                return Err(bad(format!("segment {i} has invalid parameters")));
            }
        }
        if self.drift_kind == DriftKind::Gradual {
            if self.blend_len == 0 {
                return Err(bad("gradual drift needs a positive blend_len"));
            }
            for w in self.segments.windows(2) {
                if self.blend_len >= w[0].length || self.blend_len >= w[1].length {
                    return Err(bad("blend_len must be shorter than both adjacent segments"));
                }
            }
        }
        Ok(())
    }
}

/// Piecewise sinusoid + trend + Gaussian noise. Phase and level accumulate
/// continuously across segments. The last segment is extended, or the
/// script truncated, to `total_len`. Returns the stream and the indices at
/// which a new segment begins.
pub fn synth_drift(script: &DriftScript, total_len: usize, seed: u64) -> Result<(Dataset, Vec<usize>), DataError> {
    script.validate()?;
    if total_len == 0 {
        return Err(bad("total_len must be positive"));
    }
    let mut seg_of = Vec::with_capacity(total_len);
    let mut starts = Vec::new();
    let mut pos = 0;
    for (i, s) in script.segments.iter().enumerate() {
        if pos >= total_len {
            break;
        }
        starts.push(pos);
        let end = if i + 1 == script.segments.len() { total_len } else { (pos + s.length).min(total_len) };
        seg_of.extend(std::iter::repeat(i).take(end - pos));
        pos = end;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut phase, mut level) = (0.0f64, 0.0f64);
    let mut values = Vec::with_capacity(total_len);
    for (t, &seg) in seg_of.iter().enumerate() {
        let cur = &script.segments[seg];
        let mut p = [cur.frequency, cur.amplitude, cur.trend_slope, cur.noise_std];
        if script.drift_kind == DriftKind::Gradual && seg > 0 {
            let since = t - starts[seg];
            if since < script.blend_len {
                let prev = &script.segments[seg - 1];
                let a = since as f64 / script.blend_len as f64;
                let q = [prev.frequency, prev.amplitude, prev.trend_slope, prev.noise_std];
                for k in 0..4 {
                    p[k] = q[k] + a * (p[k] - q[k]);
                }
            }
        }
        let noise = unit.sample(&mut rng) * p[3];
        values.push(level + p[1] * phase.sin() + noise);
        phase = (phase + 2.0 * std::f64::consts::PI * p[0]) % (2.0 * std::f64::consts::PI);
        level += p[2];
    }
    let ds = Dataset::new(values, vec!["value".to_string()], None)?;
    Ok((ds, starts.into_iter().skip(1).collect()))
}

/// One drift index per line.
pub fn write_drift_points(points: &[usize], path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = File::create(path).map_err(io)?;
    for p in points {
        writeln!(f, "{p}").map_err(io)?;
    }
    Ok(())
}
