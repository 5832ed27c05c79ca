//! Forecast and classification metrics, plus the CSV metric log.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifyMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// MSE and MAE over every element of two equally shaped tensors.
pub fn evaluate_forecast(predictions: &Tensor, targets: &Tensor) -> Result<ForecastMetrics> {
    if predictions.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let n = predictions.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in predictions.data().iter().zip(targets.data()) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
    }
    Ok(ForecastMetrics { mse: se / n, mae: ae / n })
}

/// Metrics for each index of the last axis (the forecast step).
pub fn per_horizon(predictions: &Tensor, targets: &Tensor) -> Result<Vec<ForecastMetrics>> {
    evaluate_forecast(predictions, targets)?;
    let h = predictions.last_dim();
    let rows = predictions.outer_len() as f64;
    let mut out = vec![ForecastMetrics { mse: 0.0, mae: 0.0 }; h];
    for r in 0..predictions.outer_len() {
        for (k, (p, t)) in predictions.row(r).iter().zip(targets.row(r)).enumerate() {
            let e = p - t;
            out[k].mse += e * e / rows;
            out[k].mae += e.abs() / rows;
        }
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and macro-F1 of `logits: [n × K]` against `labels`.
/// Classes with no true and no predicted members score F1 = 0.
pub fn evaluate_classify(logits: &Tensor, labels: &[usize]) -> Result<ClassifyMetrics> {
    if labels.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let preds: Vec<usize> = (0..labels.len()).map(|i| argmax(logits.row(i))).collect();
    Ok(classify_from_predictions(&preds, labels, k))
}

pub(crate) fn classify_from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> ClassifyMetrics {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            correct += 1;
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    ClassifyMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: f1_sum / classes as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, split: &str, metric: impl Into<String>, value: f64) -> Self {
        MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_metric_log(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "metric", "value"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.split.clone(), r.metric.clone(), r.value.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |column: &str| Error::BadCell {
            path: path.to_path_buf(),
            row: i + 2,
            column: column.to_string(),
            reason: "unparseable".into(),
        };
        rows.push(MetricRow {
            epoch: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("epoch"))?,
            split: rec.get(1).ok_or_else(|| bad("split"))?.to_string(),
            metric: rec.get(2).ok_or_else(|| bad("metric"))?.to_string(),
            value: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad("value"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    // Independent loop oracle over plain slices.
    fn oracle(p: &[f64], y: &[f64]) -> (f64, f64) {
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..p.len() {
            se += (p[i] - y[i]) * (p[i] - y[i]);
            ae += (p[i] - y[i]).abs();
        }
        (se / p.len() as f64, ae / p.len() as f64)
    }

    #[test]
    fn forecast_examples() {
        let y = t(&[2], vec![0.0, 0.0]);
        let m = evaluate_forecast(&t(&[2], vec![1.0, 2.0]), &y).unwrap();
        assert_eq!((m.mse, m.mae), (2.5, 1.5));
        assert_eq!(oracle(&[1.0, 2.0], &[0.0, 0.0]), (2.5, 1.5));
        let m = evaluate_forecast(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!(evaluate_forecast(&y, &t(&[1, 2], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn classify_examples() {
        let onehot = |preds: &[usize], k: usize| {
            let mut l = Tensor::zeros(&[preds.len(), k]);
            for (i, &p) in preds.iter().enumerate() {
                l.row_mut(i)[p] = 1.0;
            }
            l
        };
        let m = evaluate_classify(&onehot(&[0, 1, 0, 1], 2), &[0, 1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));

        let m = evaluate_classify(&onehot(&[0, 1, 1, 1], 2), &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        // class 0: tp 1, fp 0, fn 1 → 2/3; class 1: tp 2, fp 1, fn 0 → 0.8
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);

        let m = evaluate_classify(&onehot(&[0, 0, 0], 2), &[0, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 0.5);

        assert!(evaluate_classify(&Tensor::zeros(&[0, 2]), &[]).is_err());
        assert!(evaluate_classify(&onehot(&[0], 2), &[2]).is_err());
    }

    #[test]
    fn per_horizon_average_matches() {
        let p = t(&[2, 1, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 5.0]);
        let y = t(&[2, 1, 3], vec![0.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let rows = per_horizon(&p, &y).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].mse, 1.0);
        let all = evaluate_forecast(&p, &y).unwrap();
        let mean: f64 = rows.iter().map(|r| r.mse).sum::<f64>() / 3.0;
        assert!((mean - all.mse).abs() < 1e-12);
    }

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricRow::new(1, "val", "mse", 0.125), MetricRow::new(2, "test", "mae@3", 1e-9)];
        write_metric_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,split,metric,value\n"));
        assert_eq!(read_metric_log(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn forecast_matches_oracle(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (p, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = evaluate_forecast(&t(&[p.len()], p.clone()), &t(&[y.len()], y.clone())).unwrap();
            let (mse, mae) = oracle(&p, &y);
            prop_assert!((m.mse - mse).abs() <= 1e-12 * (1.0 + mse));
            prop_assert!((m.mae - mae).abs() <= 1e-12 * (1.0 + mae));
            let min_e = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(m.mse + 1e-12 >= m.mae * min_e);
        }

        #[test]
        fn argmax_invariant_to_positive_scale(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..20),
            scale in 0.01f64..100.0,
        ) {
            let n = rows.len();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let flat: Vec<f64> = rows.concat();
            let a = evaluate_classify(&t(&[n, 3], flat.clone()), &labels).unwrap();
            let b = evaluate_classify(&t(&[n, 3], flat.iter().map(|x| x * scale).collect()), &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
