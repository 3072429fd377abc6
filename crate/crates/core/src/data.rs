//! Dataset handling: the motorcycle loader and its offline surrogate,
//! synthetic spatio-temporal generators with analytically known quantiles,
//! sliding-window construction, standardization and chronological splits.

use crate::error::{Error, Result};
use crate::models::normal_quantile;
use crate::rng::{seeded, RunRng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// One supervised example: an input tensor and a target tensor.
///
/// Univariate problems use input `[1, F]` and target `[1]`; grid problems
/// use an input window `[L, M, N]` and target `[M, N]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct SeriesMeta {
    pub name: String,
    pub units: String,
}

/// A 1-D regression dataset: paired observations `(x_i, y_i)`.
#[derive(Debug, Clone)]
pub struct UnivariateSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub meta: SeriesMeta,
}

/// A gridded time series: `T` frames of `M x N` observations.
#[derive(Debug, Clone)]
pub struct GridSeries {
    /// Stored as one `T x M x N` tensor.
    pub frames: Tensor,
    pub meta: SeriesMeta,
}

impl GridSeries {
    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn grid_extent(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn frame(&self, t: usize) -> Tensor {
        let (m, n) = self.grid_extent();
        let stride = m * n;
        Tensor::from_vec(
            vec![m, n],
            self.frames.data()[t * stride..(t + 1) * stride].to_vec(),
        )
        .unwrap()
    }
}

/// Result of loading the motorcycle file: the series plus non-fatal
/// warnings (for example an unexpected record count).
#[derive(Debug)]
pub struct MotorcycleLoad {
    pub series: UnivariateSeries,
    pub warnings: Vec<String>,
}

/// Expected record count of the motorcycle impact dataset.
pub const MOTORCYCLE_RECORDS: usize = 133;

/// Load a two-column CSV of (time in ms, head acceleration in g).
///
/// A non-numeric first line is treated as a header and skipped. Malformed
/// rows are errors carrying the 1-based line number; a record count other
/// than 133 is reported as a warning, not an error.
pub fn load_motorcycle(path: &std::path::Path) -> Result<MotorcycleLoad> {
    let text = std::fs::read_to_string(path)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut warnings = Vec::new();
    let mut saw_data = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Option<(f64, f64)> = match fields.as_slice() {
            [a, b] => match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(t), Ok(accel)) => Some((t, accel)),
                _ => None,
            },
            _ => None,
        };
        match parsed {
            Some((t, accel)) => {
                x.push(t);
                y.push(accel);
                saw_data = true;
            }
            None if !saw_data && line_no == 1 => {
                // header row
            }
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected two numeric columns, got {:?}", trimmed),
                });
            }
        }
    }
    if x.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no data rows found".to_string(),
        });
    }
    if x.len() != MOTORCYCLE_RECORDS {
        warnings.push(format!(
            "expected {} records, found {}",
            MOTORCYCLE_RECORDS,
            x.len()
        ));
    }
    Ok(MotorcycleLoad {
        series: UnivariateSeries {
            x,
            y,
            meta: SeriesMeta {
                name: "motorcycle".to_string(),
                units: "ms / g".to_string(),
            },
        },
        warnings,
    })
}

/// Parameters of the motorcycle surrogate: a damped crash-pulse signal
/// with a quiet lead-in and strongly heteroscedastic noise.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotorcycleSurrogateParams {
    pub records: usize,
    pub time_span: f64,
    pub impact_time: f64,
    pub pulse_amp: f64,
    pub pulse_period: f64,
    pub pulse_decay: f64,
    pub quiet_noise: f64,
    pub active_noise: f64,
}

impl Default for MotorcycleSurrogateParams {
    fn default() -> Self {
        MotorcycleSurrogateParams {
            records: MOTORCYCLE_RECORDS,
            time_span: 57.6,
            impact_time: 12.0,
            pulse_amp: 130.0,
            pulse_period: 24.0,
            pulse_decay: 0.055,
            quiet_noise: 2.5,
            active_noise: 33.0,
        }
    }
}

impl MotorcycleSurrogateParams {
    /// Noise-free signal at time `t` (ms).
    pub fn signal(&self, t: f64) -> f64 {
        let u = t - self.impact_time;
        if u <= 0.0 {
            return 0.0;
        }
        -self.pulse_amp
            * (-self.pulse_decay * u).exp()
            * (2.0 * std::f64::consts::PI * u / self.pulse_period).sin()
    }

    /// Noise scale at time `t`: quiet before impact, wide afterwards with
    /// a slow decay.
    pub fn noise_scale(&self, t: f64) -> f64 {
        let u = t - self.impact_time;
        if u <= 0.0 {
            return self.quiet_noise;
        }
        let ramp = 1.0 - (-u / 2.0).exp();
        let decay = (-0.015 * u).exp();
        self.quiet_noise + (self.active_noise - self.quiet_noise) * ramp * decay
    }
}

/// Generate a surrogate of the motorcycle dataset with a statistically
/// similar shape, for tests and runs that cannot read the original file.
pub fn motorcycle_surrogate(seed: u64, params: &MotorcycleSurrogateParams) -> UnivariateSeries {
    let mut rng = seeded(seed);
    let n = params.records;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        let jitter: f64 = rng.random_range(-0.5..0.5) * params.time_span / n as f64;
        let t = (frac * params.time_span + jitter).max(0.0);
        let eps: f64 = rng.sample(StandardNormal);
        x.push(t);
        y.push(params.signal(t) + params.noise_scale(t) * eps);
    }
    UnivariateSeries {
        x,
        y,
        meta: SeriesMeta {
            name: "motorcycle-surrogate".to_string(),
            units: "ms / g".to_string(),
        },
    }
}

/// Parameters of the synthetic gridded series: a seasonal-plus-spatial
/// signal with a phase gradient across the grid, and a positive noise
/// scale that follows the same cycle (quiet day, noisy night).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthGridParams {
    pub period: f64,
    pub signal_amp: f64,
    pub spatial_amp: f64,
    pub base_scale: f64,
    pub scale_amp: f64,
}

impl Default for SynthGridParams {
    fn default() -> Self {
        SynthGridParams {
            period: 48.0,
            signal_amp: 2.0,
            spatial_amp: 0.5,
            base_scale: 0.4,
            scale_amp: 0.7,
        }
    }
}

/// True conditional quantiles of a synthetic grid series.
///
/// The generator draws `y = s + g * eps` with standard Gaussian `eps`, so
/// the conditional tau-quantile is `s + g * z_tau`, monotone in tau.
#[derive(Debug, Clone)]
pub struct OracleQuantiles {
    params: SynthGridParams,
    rows: usize,
    cols: usize,
}

impl OracleQuantiles {
    fn phase(&self, m: usize, n: usize) -> f64 {
        std::f64::consts::PI * (m as f64 / self.rows as f64 + n as f64 / self.cols as f64) / 2.0
    }

    /// Deterministic signal component `s(m, n, t)`.
    pub fn signal(&self, m: usize, n: usize, t: usize) -> f64 {
        let p = &self.params;
        let angle = 2.0 * std::f64::consts::PI * t as f64 / p.period + self.phase(m, n);
        let spatial = p.spatial_amp
            * (std::f64::consts::PI * (m as f64 + 0.5) / self.rows as f64).sin()
            * (std::f64::consts::PI * (n as f64 + 0.5) / self.cols as f64).sin();
        p.signal_amp * angle.sin() + spatial
    }

    /// Positive noise scale `g(m, n, t)`; large in the low-signal half of
    /// the cycle.
    pub fn scale(&self, m: usize, n: usize, t: usize) -> f64 {
        let p = &self.params;
        let angle = 2.0 * std::f64::consts::PI * t as f64 / p.period + self.phase(m, n);
        p.base_scale + p.scale_amp * (0.5 - 0.5 * angle.sin())
    }

    /// True conditional tau-quantile at `(m, n, t)`.
    pub fn quantile(&self, m: usize, n: usize, t: usize, tau: f64) -> Result<f64> {
        Ok(self.signal(m, n, t) + self.scale(m, n, t) * normal_quantile(tau)?)
    }
}

/// Generate a reproducible synthetic grid series together with its oracle.
pub fn synth_grid_series(
    seed: u64,
    rows: usize,
    cols: usize,
    steps: usize,
    params: &SynthGridParams,
) -> Result<(GridSeries, OracleQuantiles)> {
    if rows == 0 || cols == 0 || steps == 0 {
        return Err(Error::invalid(
            "synth_grid_series",
            format!("extents must be positive, got {}x{}x{}", rows, cols, steps),
        ));
    }
    let oracle = OracleQuantiles {
        params: params.clone(),
        rows,
        cols,
    };
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(steps * rows * cols);
    for t in 0..steps {
        for m in 0..rows {
            for n in 0..cols {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(oracle.signal(m, n, t) + oracle.scale(m, n, t) * eps);
            }
        }
    }
    let frames = Tensor::from_vec(vec![steps, rows, cols], data)?;
    Ok((
        GridSeries {
            frames,
            meta: SeriesMeta {
                name: "synthetic-grid".to_string(),
                units: "synthetic".to_string(),
            },
        },
        oracle,
    ))
}

/// Build one sample per admissible target step: the target at step `t`
/// is predicted from steps `t-k-L+1 ..= t-k`.
pub fn window(series: &GridSeries, l: usize, k: usize) -> Result<Vec<Sample>> {
    if l == 0 || k == 0 {
        return Err(Error::invalid(
            "window",
            "window length and horizon must be positive",
        ));
    }
    let t_total = series.steps();
    if t_total < l + k {
        return Err(Error::invalid(
            "window",
            format!("series of {} steps too short for L={} k={}", t_total, l, k),
        ));
    }
    let (m, n) = series.grid_extent();
    let stride = m * n;
    let mut samples = Vec::with_capacity(t_total - l - k + 1);
    for target_t in (l + k - 1)..t_total {
        let start = target_t + 1 - k - l;
        let input = Tensor::from_vec(
            vec![l, m, n],
            series.frames.data()[start * stride..(start + l) * stride].to_vec(),
        )?;
        let target = series.frame(target_t);
        samples.push(Sample { input, target });
    }
    Ok(samples)
}

/// Split sizes from fractions: cumulative boundaries rounded half-up,
/// remainder to the last split. A nonzero fraction must produce a
/// nonempty split.
pub fn split_sizes(total: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (f1, f2, f3) = fractions;
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split",
            format!(
                "fractions must be nonnegative and sum to 1, got {:?}",
                fractions
            ),
        ));
    }
    let b1 = (total as f64 * f1).round() as usize;
    let b2 = (total as f64 * (f1 + f2)).round() as usize;
    let sizes = (b1, b2 - b1, total - b2);
    for (fraction, size) in [(f1, sizes.0), (f2, sizes.1), (f3, sizes.2)] {
        if fraction > 0.0 && size == 0 {
            return Err(Error::invalid(
                "split",
                format!(
                    "fraction {} produced an empty split of {} records",
                    fraction, total
                ),
            ));
        }
    }
    Ok(sizes)
}

/// A windowed dataset with named splits. Chronological splits cut the raw
/// series first and window each segment separately, so no input window
/// straddles a split boundary.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub window: usize,
    pub horizon: usize,
}

impl WindowedDataset {
    pub fn val_opt(&self) -> Option<&[Sample]> {
        if self.val.is_empty() {
            None
        } else {
            Some(&self.val)
        }
    }
}

/// Chronological split of a grid series followed by per-segment windowing.
pub fn window_grid_splits(
    series: &GridSeries,
    l: usize,
    k: usize,
    fractions: (f64, f64, f64),
) -> Result<WindowedDataset> {
    let t_total = series.steps();
    let (n_train, n_val, _) = split_sizes(t_total, fractions)?;
    let (m, n) = series.grid_extent();
    let stride = m * n;
    let mut segment = |from: usize, to: usize| -> Result<Vec<Sample>> {
        if to == from {
            return Ok(Vec::new());
        }
        let sub = GridSeries {
            frames: Tensor::from_vec(
                vec![to - from, m, n],
                series.frames.data()[from * stride..to * stride].to_vec(),
            )?,
            meta: series.meta.clone(),
        };
        window(&sub, l, k)
    };
    Ok(WindowedDataset {
        train: segment(0, n_train)?,
        val: segment(n_train, n_train + n_val)?,
        test: segment(n_train + n_val, t_total)?,
        window: l,
        horizon: k,
    })
}

/// Random index split for non-temporal datasets (one split per run seed).
pub fn split_indices_random(
    total: usize,
    fractions: (f64, f64, f64),
    rng: &mut RunRng,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (a, b, _) = split_sizes(total, fractions)?;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    let train = idx[..a].to_vec();
    let val = idx[a..a + b].to_vec();
    let test = idx[a + b..].to_vec();
    Ok((train, val, test))
}

/// Affine standardization fitted on training data only.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Fit to values; errors when the variance vanishes, naming `label`.
    pub fn fit(label: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid(
                "standardize",
                format!("no values to fit for {}", label),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::invalid(
                "standardize",
                format!("zero variance in {}", label),
            ));
        }
        Ok(Standardizer { mean, std })
    }

    pub fn identity() -> Self {
        Standardizer {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.apply(v))
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.invert(v))
    }
}

/// Univariate (x, y) pairs as model samples: input `[1, 1]`, target `[1]`.
pub fn univariate_samples(x: &[f64], y: &[f64]) -> Vec<Sample> {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| Sample {
            input: Tensor::from_vec(vec![1, 1], vec![xi]).unwrap(),
            target: Tensor::from_vec(vec![1], vec![yi]).unwrap(),
        })
        .collect()
}
