//! Synthetic corpora: sinusoid mixtures, autoregressive processes and
//! labelled shape classes.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Samples discarded before an AR series is recorded.
const AR_BURN_IN: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct Sinusoid {
    /// Cycles per time step.
    pub frequency: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthKind {
    /// Channel `c` is `Σ a·sin(2π·f·t + φ + c·channel_phase)` plus noise.
    SinusoidMix {
        components: Vec<Sinusoid>,
        channel_phase: f64,
    },
    /// `x_t = Σ_i φ_i·x_{t−i} + noise_std·ε_t`, independently per channel.
    ArProcess { coefficients: Vec<f64> },
    /// Back-to-back windows of `window` steps, each a randomly scaled and
    /// shifted copy of one of `classes` templates. `length` counts windows.
    ClassShapes { classes: usize, window: usize },
}

impl SynthKind {
    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::SinusoidMix { .. } => "sinusoid_mix",
            SynthKind::ArProcess { .. } => "ar_process",
            SynthKind::ClassShapes { .. } => "class_shapes",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Time steps (windows for `ClassShapes`).
    pub length: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn sinusoid_mix(length: usize, channels: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::SinusoidMix {
                components: vec![
                    Sinusoid {
                        frequency: 1.0 / 24.0,
                        amplitude: 1.0,
                        phase: 0.0,
                    },
                    Sinusoid {
                        frequency: 1.0 / 7.0,
                        amplitude: 0.5,
                        phase: 1.0,
                    },
                    Sinusoid {
                        frequency: 1.0 / 50.0,
                        amplitude: 0.3,
                        phase: 2.0,
                    },
                ],
                channel_phase: 0.7,
            },
            length,
            channels,
            noise_std,
            seed,
        }
    }

    pub fn ar_process(coefficients: Vec<f64>, length: usize, channels: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::ArProcess { coefficients },
            length,
            channels,
            noise_std,
            seed,
        }
    }

    pub fn class_shapes(classes: usize, windows: usize, window: usize, channels: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::ClassShapes { classes, window },
            length: windows,
            channels,
            noise_std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 {
            return Err(Error::invalid("length and channels must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std {} must be non-negative", self.noise_std)));
        }
        match &self.kind {
            SynthKind::SinusoidMix { components, .. } if components.is_empty() => {
                Err(Error::invalid("sinusoid mix needs at least one component"))
            }
            SynthKind::ArProcess { coefficients } => {
                if coefficients.is_empty() {
                    return Err(Error::invalid("AR process needs at least one coefficient"));
                }
                if !is_stationary(coefficients) {
                    return Err(Error::invalid(format!("AR coefficients {coefficients:?} are not stationary")));
                }
                Ok(())
            }
            SynthKind::ClassShapes { classes, window } => {
                if !(2..=TEMPLATE_LIMIT).contains(classes) {
                    return Err(Error::invalid(format!("classes must be in 2..={TEMPLATE_LIMIT}")));
                }
                if *window < 4 {
                    return Err(Error::invalid("class windows need at least 4 steps"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Reflection coefficients of an AR polynomial by the step-down recursion;
/// the process is stationary iff every one has magnitude below 1.
pub fn reflection_coefficients(coefficients: &[f64]) -> Vec<f64> {
    let mut a = coefficients.to_vec();
    let mut ks = Vec::with_capacity(a.len());
    while let Some(&k) = a.last() {
        ks.push(k);
        let m = a.len();
        if k.abs() >= 1.0 {
            break;
        }
        let denom = 1.0 - k * k;
        a = (0..m - 1).map(|i| (a[i] + k * a[m - 2 - i]) / denom).collect();
    }
    ks.reverse();
    ks
}

pub fn is_stationary(coefficients: &[f64]) -> bool {
    let ks = reflection_coefficients(coefficients);
    ks.len() == coefficients.len() && ks.iter().all(|k| k.abs() < 1.0)
}

const TEMPLATE_LIMIT: usize = 8;

/// Template `k` at phase `u ∈ [0, 1)`.
fn template(k: usize, u: f64) -> f64 {
    match k {
        0 => (2.0 * PI * u).sin(),
        1 => {
            if u < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        2 => 2.0 * u - 1.0,
        3 => 1.0 - 4.0 * (u - 0.5).abs(),
        _ => (2.0 * PI * (k - 2) as f64 * u).sin(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub series: MultivariateSeries,
    /// Per-step class labels (class corpora only).
    pub labels: Option<Vec<usize>>,
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synth);
    let c = spec.channels;
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if spec.noise_std == 0.0 {
            0.0
        } else {
            spec.noise_std * rng.sample::<f64, _>(StandardNormal)
        }
    };
    let (rows, labels): (Vec<Vec<f64>>, Option<Vec<usize>>) = match &spec.kind {
        SynthKind::SinusoidMix {
            components,
            channel_phase,
        } => {
            let mut rows = vec![Vec::with_capacity(spec.length); c];
            for t in 0..spec.length {
                for (ch, row) in rows.iter_mut().enumerate() {
                    let clean: f64 = components
                        .iter()
                        .map(|s| {
                            s.amplitude * (2.0 * PI * s.frequency * t as f64 + s.phase + ch as f64 * channel_phase).sin()
                        })
                        .sum();
                    row.push(clean + noise(&mut rng));
                }
            }
            (rows, None)
        }
        SynthKind::ArProcess { coefficients } => {
            let p = coefficients.len();
            let rows = (0..c)
                .map(|_| {
                    let mut x = vec![0.0; p];
                    for _ in 0..AR_BURN_IN + spec.length {
                        let next: f64 = coefficients
                            .iter()
                            .enumerate()
                            .map(|(i, phi)| phi * x[x.len() - 1 - i])
                            .sum::<f64>()
                            + noise(&mut rng);
                        x.push(next);
                    }
                    x.split_off(p + AR_BURN_IN)
                })
                .collect();
            (rows, None)
        }
        SynthKind::ClassShapes { classes, window } => {
            let mut order: Vec<usize> = (0..spec.length).map(|i| i % classes).collect();
            order.shuffle(&mut rng);
            let mut rows = vec![Vec::with_capacity(spec.length * window); c];
            let mut labels = Vec::with_capacity(spec.length * window);
            for &k in &order {
                let scale = rng.random_range(0.8..1.2);
                let shift = rng.random_range(0.0..1.0);
                for t in 0..*window {
                    let u = (t as f64 / *window as f64 + shift).fract();
                    for row in rows.iter_mut() {
                        row.push(scale * template(k, u) + noise(&mut rng));
                    }
                    labels.push(k);
                }
            }
            (rows, Some(labels))
        }
    };
    let names = (0..c).map(|i| format!("ch{i}")).collect();
    let series = MultivariateSeries::new(Tensor::from_rows(&rows)?, names)?;
    Ok(Generated { series, labels })
}

/// Writes the corpus as CSV with a `date` index column, one column per
/// channel and, for class corpora, a trailing `label` column.
pub fn write_synth_csv(path: impl AsRef<Path>, generated: &Generated) -> Result<()> {
    let path = path.as_ref();
    let s = &generated.series;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(s.channel_names().iter().cloned());
    if generated.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for t in 0..s.len() {
        let mut rec = vec![format!("t{t}")];
        rec.extend((0..s.channels()).map(|c| s.channel(c)[t].to_string()));
        if let Some(l) = &generated.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sample autocorrelation of `x` at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (0..n - lag).map(|t| (x[t] - mean) * (x[t + lag] - mean)).sum();
    cov / var
}
