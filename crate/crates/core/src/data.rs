//! Loading, splitting, windowing and instance normalization of
//! multivariate series.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// A `[channels × length]` series of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    values: Tensor,
    channel_names: Vec<String>,
    pub frequency_hint: Option<String>,
}

impl MultivariateSeries {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] == 0 || values.shape()[1] == 0 {
            return Err(Error::shape(format!(
                "series needs shape [C ≥ 1 × length ≥ 1], got {:?}",
                values.shape()
            )));
        }
        if channel_names.len() != values.shape()[0] {
            return Err(Error::shape(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.shape()[0]
            )));
        }
        if !values.all_finite() {
            return Err(Error::invalid("series contains non-finite values"));
        }
        Ok(MultivariateSeries {
            values,
            channel_names,
            frequency_hint: None,
        })
    }

    /// Builds a series from per-channel rows, naming channels `c0, c1, ...`.
    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let names = (0..channels.len()).map(|c| format!("c{c}")).collect();
        MultivariateSeries::new(Tensor::from_rows(channels)?, names)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Time range `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{end} of a length-{} series",
                self.len()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..self.channels())
            .map(|c| self.channel(c)[start..end].to_vec())
            .collect();
        let mut out = MultivariateSeries::new(Tensor::from_rows(&rows)?, self.channel_names.clone())?;
        out.frequency_hint = self.frequency_hint.clone();
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// Value columns to keep, by header name. `None` keeps every column
    /// except a detected timestamp column and the label column.
    pub columns: Option<Vec<String>>,
    pub has_header: bool,
    /// Integer class-label column (classification corpora).
    pub label_column: Option<String>,
}

impl CsvOptions {
    pub fn with_header() -> Self {
        CsvOptions {
            has_header: true,
            ..Default::default()
        }
    }
}

/// Loads a CSV into a series; see [`load_labeled_csv`] for label columns.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<MultivariateSeries> {
    load_labeled_csv(path, options).map(|(s, _)| s)
}

/// Loads a CSV, returning per-row labels when `options.label_column` is set.
pub fn load_labeled_csv(
    path: impl AsRef<Path>,
    options: &CsvOptions,
) -> Result<(MultivariateSeries, Option<Vec<usize>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers: Option<Vec<String>> = if options.has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let width = records[0].len();
    let names: Vec<String> = headers.unwrap_or_else(|| (0..width).map(|c| format!("c{c}")).collect());

    let find = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in {}", path.display())))
    };
    let label_idx = options.label_column.as_deref().map(find).transpose()?;
    let value_idx: Vec<usize> = match &options.columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => {
            // A first column whose first cell is not a number is a timestamp.
            let skip_first = records[0]
                .get(0)
                .is_some_and(|cell| cell.parse::<f64>().is_err());
            (0..width)
                .filter(|&i| !(i == 0 && skip_first) && Some(i) != label_idx)
                .collect()
        }
    };
    if value_idx.is_empty() {
        return Err(Error::Config(format!("{}: no value columns", path.display())));
    }

    let mut channels = vec![Vec::with_capacity(records.len()); value_idx.len()];
    let mut labels = label_idx.map(|_| Vec::with_capacity(records.len()));
    for (r, record) in records.iter().enumerate() {
        let row = r + 1;
        let cell_err = |col: usize, reason: String| Error::BadCell {
            path: path.to_path_buf(),
            row,
            column: names.get(col).cloned().unwrap_or_else(|| col.to_string()),
            reason,
        };
        for (c, &col) in value_idx.iter().enumerate() {
            let cell = record
                .get(col)
                .ok_or_else(|| cell_err(col, "missing cell".into()))?;
            let v: f64 = cell
                .parse()
                .map_err(|_| cell_err(col, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(cell_err(col, format!("non-finite value `{cell}`")));
            }
            channels[c].push(v);
        }
        if let (Some(col), Some(labels)) = (label_idx, labels.as_mut()) {
            let cell = record.get(col).unwrap_or("");
            let l: usize = cell
                .parse()
                .map_err(|_| cell_err(col, format!("`{cell}` is not a class id")))?;
            labels.push(l);
        }
    }
    let names = value_idx.iter().map(|&i| names[i].clone()).collect();
    let series = MultivariateSeries::new(Tensor::from_rows(&channels)?, names)?;
    Ok((series, labels))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitBounds {
    /// Fractions of the series length; must sum to 1.
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit exclusive end indices of the three splits.
    Indices {
        train_end: usize,
        val_end: usize,
        test_end: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub bounds: SplitBounds,
    /// Number of points of preceding history prepended to the validation
    /// and test splits, so their first windows may use lookback context
    /// from the previous split. Zero keeps the splits disjoint.
    pub context: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            bounds: SplitBounds::Fractions {
                train: 0.7,
                val: 0.1,
                test: 0.2,
            },
            context: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(train: f64, val: f64, test: f64) -> Self {
        SplitSpec {
            bounds: SplitBounds::Fractions { train, val, test },
            context: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MultivariateSeries,
    pub val: MultivariateSeries,
    pub test: MultivariateSeries,
    /// Start index of each split in the source series.
    pub starts: [usize; 3],
}

/// Chronological train/validation/test split. Every split (context
/// included) must hold at least `min_len` points.
pub fn split_series(series: &MultivariateSeries, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    let total = series.len();
    let (train_end, val_end, test_end) = match spec.bounds {
        SplitBounds::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
                || (train + val + test - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid(format!(
                    "split fractions {train}/{val}/{test} must be in [0, 1] and sum to 1"
                )));
            }
            let a = (train * total as f64 + 1e-9).floor() as usize;
            let b = a + (val * total as f64 + 1e-9).floor() as usize;
            (a, b.min(total), total)
        }
        SplitBounds::Indices {
            train_end,
            val_end,
            test_end,
        } => {
            if !(train_end <= val_end && val_end <= test_end && test_end <= total) {
                return Err(Error::invalid(format!(
                    "split indices {train_end}/{val_end}/{test_end} not ordered within {total}"
                )));
            }
            (train_end, val_end, test_end)
        }
    };
    let val_start = train_end.saturating_sub(spec.context);
    let test_start = val_end.saturating_sub(spec.context);
    let ranges = [(0, train_end), (val_start, val_end), (test_start, test_end)];
    for (name, (s, e)) in ["train", "validation", "test"].iter().zip(ranges) {
        if e <= s || e - s < min_len.max(1) {
            return Err(Error::invalid(format!(
                "{name} split has {} points, needs at least {}",
                e.saturating_sub(s),
                min_len.max(1)
            )));
        }
    }
    Ok(Splits {
        train: series.slice(ranges[0].0, ranges[0].1)?,
        val: series.slice(ranges[1].0, ranges[1].1)?,
        test: series.slice(ranges[2].0, ranges[2].1)?,
        starts: [ranges[0].0, ranges[1].0, ranges[2].0],
    })
}

/// A lookback window with an optional horizon that directly follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[C × L]`
    pub lookback: Tensor,
    /// `[C × H]`
    pub horizon: Option<Tensor>,
    pub label: Option<usize>,
    /// Start index of the lookback in its source series.
    pub start: usize,
}

impl Window {
    pub fn channels(&self) -> usize {
        self.lookback.shape()[0]
    }

    pub fn lookback_len(&self) -> usize {
        self.lookback.shape()[1]
    }
}

/// Sliding windows of lookback `lookback` and horizon `horizon` (0 for none),
/// starting every `stride` steps.
pub fn make_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if lookback == 0 || stride == 0 {
        return Err(Error::invalid("lookback and stride must be at least 1"));
    }
    let total = series.len();
    if lookback + horizon > total {
        return Err(Error::invalid(format!(
            "lookback {lookback} + horizon {horizon} exceeds series length {total}"
        )));
    }
    let count = (total - lookback - horizon) / stride + 1;
    let c = series.channels();
    let cut = |start: usize, len: usize| -> Tensor {
        let mut t = Tensor::zeros(&[c, len]);
        for ch in 0..c {
            t.row_mut(ch)
                .copy_from_slice(&series.channel(ch)[start..start + len]);
        }
        t
    };
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            Window {
                lookback: cut(start, lookback),
                horizon: (horizon > 0).then(|| cut(start + lookback, horizon)),
                label: None,
                start,
            }
        })
        .collect())
}

/// Non-overlapping labelled windows; each takes the label of its first row.
pub fn make_labeled_windows(
    series: &MultivariateSeries,
    labels: &[usize],
    lookback: usize,
) -> Result<Vec<Window>> {
    if labels.len() != series.len() {
        return Err(Error::shape(format!(
            "{} labels for a length-{} series",
            labels.len(),
            series.len()
        )));
    }
    let mut windows = make_windows(series, lookback, 0, lookback)?;
    for w in &mut windows {
        w.label = Some(labels[w.start]);
    }
    Ok(windows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel standardization of a `[C × L]` lookback using population
/// moments; standard deviations are floored at [`STD_FLOOR`].
pub fn instance_normalize(lookback: &Tensor) -> (Tensor, NormStats) {
    let c = lookback.outer_len();
    let l = lookback.last_dim();
    let mut out = lookback.clone();
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let row = lookback.row(ch);
        let m = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / l as f64;
        let s = var.sqrt().max(STD_FLOOR);
        for x in out.row_mut(ch) {
            *x = (*x - m) / s;
        }
        mean.push(m);
        std.push(s);
    }
    (out, NormStats { mean, std })
}

/// Inverse of [`instance_normalize`] for values of any length per channel.
pub fn denormalize(values: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let c = values.outer_len();
    if c != stats.mean.len() || c != stats.std.len() {
        return Err(Error::shape(format!(
            "{c} channels but statistics for {}",
            stats.mean.len()
        )));
    }
    let mut out = values.clone();
    for ch in 0..c {
        for x in out.row_mut(ch) {
            *x = *x * stats.std[ch] + stats.mean[ch];
        }
    }
    Ok(out)
}

/// One channel of one window, treated as an independent univariate sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub lookback: Vec<f64>,
    pub horizon: Option<Vec<f64>>,
    pub window: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channelized {
    pub instances: Vec<Instance>,
    pub channels: usize,
    /// `(start, label)` of each source window.
    pub window_meta: Vec<(usize, Option<usize>)>,
}

/// Splits every window into per-channel instances, window-major.
pub fn channelize(windows: &[Window]) -> Channelized {
    let channels = windows.first().map_or(0, Window::channels);
    let mut instances = Vec::with_capacity(windows.len() * channels);
    for (w, win) in windows.iter().enumerate() {
        for c in 0..win.channels() {
            instances.push(Instance {
                lookback: win.lookback.row(c).to_vec(),
                horizon: win.horizon.as_ref().map(|h| h.row(c).to_vec()),
                window: w,
                channel: c,
            });
        }
    }
    Channelized {
        instances,
        channels,
        window_meta: windows.iter().map(|w| (w.start, w.label)).collect(),
    }
}

/// Reassembles windows from [`channelize`] output.
pub fn dechannelize(batch: &Channelized) -> Result<Vec<Window>> {
    let mut rows: Vec<Vec<Option<&Instance>>> = vec![vec![None; batch.channels]; batch.window_meta.len()];
    for inst in &batch.instances {
        let slot = rows
            .get_mut(inst.window)
            .and_then(|r| r.get_mut(inst.channel))
            .ok_or_else(|| Error::shape("instance index outside the window map"))?;
        *slot = Some(inst);
    }
    rows.into_iter()
        .zip(&batch.window_meta)
        .map(|(row, &(start, label))| {
            let insts: Vec<&Instance> = row
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| Error::shape("missing channel instance"))?;
            let lookback = Tensor::from_rows(&insts.iter().map(|i| i.lookback.clone()).collect::<Vec<_>>())?;
            let horizon = match insts[0].horizon {
                Some(_) => Some(Tensor::from_rows(
                    &insts
                        .iter()
                        .map(|i| i.horizon.clone().unwrap_or_default())
                        .collect::<Vec<_>>(),
                )?),
                None => None,
            };
            Ok(Window {
                lookback,
                horizon,
                label,
                start,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ramp(channels: usize, len: usize) -> MultivariateSeries {
        let rows: Vec<Vec<f64>> = (0..channels)
            .map(|c| (0..len).map(|t| (c * 1000 + t) as f64).collect())
            .collect();
        MultivariateSeries::from_channels(&rows).unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_csv("a,b\n1.0,2.0\n3.0,4.0\n5.5,-1\n");
        let s = load_csv(f.path(), &CsvOptions::with_header()).unwrap();
        assert_eq!((s.channels(), s.len()), (2, 3));
        assert_eq!(s.channel(1), &[2.0, 4.0, -1.0]);
        assert_eq!(s.channel_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn timestamp_column_dropped() {
        let f = write_csv("date,x\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n");
        let s = load_csv(f.path(), &CsvOptions::with_header()).unwrap();
        assert_eq!(s.channels(), 1);
        assert_eq!(s.channel(0), &[1.0, 2.0]);
    }

    #[test]
    fn nan_cell_names_location() {
        let f = write_csv("a,b\n1,2\n3,NaN\n");
        let err = load_csv(f.path(), &CsvOptions::with_header()).unwrap_err();
        match err {
            Error::BadCell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_and_empty_rejected() {
        let f = write_csv("a,b\n1,2\n3,x\n");
        assert!(matches!(
            load_csv(f.path(), &CsvOptions::with_header()),
            Err(Error::BadCell { .. })
        ));
        let f = write_csv("a,b\n");
        assert!(matches!(
            load_csv(f.path(), &CsvOptions::with_header()),
            Err(Error::EmptyFile(_))
        ));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", &CsvOptions::with_header()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn column_selection_and_labels() {
        let f = write_csv("t,a,b,label\nx,1,2,0\ny,3,4,1\n");
        let opts = CsvOptions {
            columns: Some(vec!["b".into()]),
            has_header: true,
            label_column: Some("label".into()),
        };
        let (s, labels) = load_labeled_csv(f.path(), &opts).unwrap();
        assert_eq!(s.channel(0), &[2.0, 4.0]);
        assert_eq!(labels.unwrap(), vec![0, 1]);
    }

    #[test]
    fn fraction_split_lengths() {
        let s = ramp(1, 100);
        let sp = split_series(&s, &SplitSpec::fractions(0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (60, 20, 20));
        let mut joined = sp.train.channel(0).to_vec();
        joined.extend_from_slice(sp.val.channel(0));
        joined.extend_from_slice(sp.test.channel(0));
        assert_eq!(joined, s.channel(0));
    }

    #[test]
    fn bad_fractions_rejected() {
        let s = ramp(1, 100);
        assert!(split_series(&s, &SplitSpec::fractions(0.5, 0.5, 0.5), 1).is_err());
        assert!(split_series(&s, &SplitSpec::fractions(0.6, 0.2, 0.2), 30).is_err());
    }

    #[test]
    fn absolute_boundaries_with_context() {
        // ETTh1-style layout: 12/4/4 months of hourly data with shared
        // lookback context at split boundaries.
        let s = ramp(1, 17420);
        let spec = SplitSpec {
            bounds: SplitBounds::Indices {
                train_end: 8640,
                val_end: 11520,
                test_end: 14400,
            },
            context: 336,
        };
        let sp = split_series(&s, &spec, 432).unwrap();
        let count = |x: &MultivariateSeries| make_windows(x, 336, 96, 1).unwrap().len();
        assert_eq!(count(&sp.train), 8209);
        assert_eq!(count(&sp.val), 2785);
        assert_eq!(count(&sp.test), 2785);
    }

    #[test]
    fn window_counts() {
        let s = ramp(1, 10);
        assert_eq!(make_windows(&s, 4, 2, 1).unwrap().len(), 5);
        let w = make_windows(&s, 4, 0, 4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].lookback.row(0), &[4.0, 5.0, 6.0, 7.0]);
        assert!(make_windows(&s, 8, 3, 1).is_err());
    }

    #[test]
    fn normalize_known_values() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]).unwrap();
        let (n, stats) = instance_normalize(&x);
        let e = 1.5f64.sqrt();
        for (a, b) in n.row(0).iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(n.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(stats.std[1], STD_FLOOR);
    }

    #[test]
    fn denormalize_cases() {
        let stats = NormStats {
            mean: vec![2.0],
            std: vec![0.8165],
        };
        let z = denormalize(&Tensor::zeros(&[1, 4]), &stats).unwrap();
        assert!(z.data().iter().all(|&v| v == 2.0));
        let id = NormStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let x = Tensor::from_vec(&[1, 3], vec![0.3, -1.0, 7.0]).unwrap();
        assert_eq!(denormalize(&x, &id).unwrap(), x);
        assert!(denormalize(&Tensor::zeros(&[2, 3]), &id).is_err());
    }

    #[test]
    fn channelize_indexing() {
        let s = ramp(7, 40);
        let w = make_windows(&s, 8, 2, 8).unwrap();
        let w = &w[..4];
        let ch = channelize(w);
        assert_eq!(ch.instances.len(), 28);
        let inst = ch
            .instances
            .iter()
            .find(|i| i.window == 2 && i.channel == 3)
            .unwrap();
        assert_eq!(inst.lookback, w[2].lookback.row(3));
        assert_eq!(dechannelize(&ch).unwrap(), w.to_vec());
    }
}
