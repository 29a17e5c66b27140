//! Monte-Carlo simulation of the three-point CW protocol.
//!
//! One cycle dwells on `f1`, `f2` and the off-resonant `f_ref` in turn. A
//! window of cycles is turned into a temperature by normalizing to the
//! reference channel and linearizing about the calibration point:
//!
//! ```text
//! T = T0 + [(n1 - n2) / n_ref - (s1(T0) - s2(T0))] / slope
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{ensure, Error, Result};
use crate::sensitivity::{eta_cw_numeric, SlopeOptions};

/// Minimum detuning of the reference frequency from every line, in line widths.
pub const MIN_REF_DETUNING_WIDTHS: f64 = 50.0;
/// Detuning used when the reference frequency is chosen automatically.
pub const AUTO_REF_DETUNING_WIDTHS: f64 = 60.0;
/// Largest expected count per channel and cycle before giving up.
pub const MAX_EXPECTED_COUNTS: f64 = 1e15;
/// Windows below this count make a shot-noise row unreliable.
pub const MIN_WINDOWS: usize = 10;

/// Linearization of the normalized difference signal about `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub t0: f64,
    /// `S(f1) / S(f_ref)` and `S(f2) / S(f_ref)` at `t0`.
    pub s1: f64,
    pub s2: f64,
    /// `d(s1 - s2)/dT` at `t0` (1/K).
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreePointConfig {
    pub f1: f64,
    pub f2: f64,
    pub f_ref: f64,
    /// Time spent on each frequency per cycle (s).
    pub dwell: f64,
    pub calibration: Calibration,
}

impl ThreePointConfig {
    /// Calibrates the given probe frequencies against the forward model.
    pub fn calibrate(ens: &Ensemble, t0: f64, f1: f64, f2: f64, f_ref: f64, dwell: f64, dt_step: f64) -> Result<Self> {
        ensure(dt_step > 0.0, || format!("dt_step must be positive, got {dt_step}"))?;
        let freqs = [f1, f2, f_ref];
        let normalized = |t: f64| -> Result<(f64, f64)> {
            let s = ens.signal_at(t, &freqs)?;
            Ok((s[0] / s[2], s[1] / s[2]))
        };
        let (s1, s2) = normalized(t0)?;
        let hi = normalized(t0 + dt_step)?;
        let lo = normalized(t0 - dt_step)?;
        let slope = ((hi.0 - hi.1) - (lo.0 - lo.1)) / (2.0 * dt_step);
        let cfg = Self {
            f1,
            f2,
            f_ref,
            dwell,
            calibration: Calibration { t0, s1, s2, slope },
        };
        cfg.validate()?;
        cfg.check_detuning(ens)?;
        Ok(cfg)
    }

    /// Probes at the steepest positive and negative `dS/dT` on a grid, with
    /// the reference 60 line widths below the lowest line.
    pub fn auto(ens: &Ensemble, t0: f64, dwell: f64, opts: &SlopeOptions) -> Result<Self> {
        let width = ens.assembly.line_width;
        let grid = ens.frequency_grid(t0, opts.margin_widths, opts.step_widths * width)?;
        let slope = ens.signal_slope(t0, &grid, opts.dt_step)?;
        let argmax = (0..grid.len())
            .max_by(|&a, &b| slope[a].total_cmp(&slope[b]))
            .expect("non-empty");
        let argmin = (0..grid.len())
            .min_by(|&a, &b| slope[a].total_cmp(&slope[b]))
            .expect("non-empty");
        if slope[argmax] <= 0.0 || slope[argmin] >= 0.0 {
            return Err(Error::Unmeasurable(format!("no slope of both signs at {t0} K")));
        }
        let lowest = ens.line_centers(t0)?.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let f_ref = lowest - AUTO_REF_DETUNING_WIDTHS * width;
        Self::calibrate(ens, t0, grid[argmax], grid[argmin], f_ref, dwell, opts.dt_step)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.dwell > 0.0, || {
            format!("dwell must be positive, got {}", self.dwell)
        })?;
        let c = &self.calibration;
        ensure(
            [self.f1, self.f2, self.f_ref, c.t0, c.s1, c.s2, c.slope]
                .iter()
                .all(|v| v.is_finite()),
            || "protocol parameters must be finite".into(),
        )?;
        if c.slope == 0.0 {
            return Err(Error::Unmeasurable("calibration slope is zero".into()));
        }
        Ok(())
    }

    /// Checks that `f_ref` sits more than 50 line widths from every line at `t0`.
    pub fn check_detuning(&self, ens: &Ensemble) -> Result<()> {
        let min_gap = MIN_REF_DETUNING_WIDTHS * ens.assembly.line_width;
        let centers = ens.line_centers(self.calibration.t0)?;
        let closest = centers
            .iter()
            .flat_map(|c| [c.0, c.1])
            .map(|c| (c - self.f_ref).abs())
            .fold(f64::INFINITY, f64::min);
        ensure(closest > min_gap, || {
            format!("f_ref is only {closest:.4e} Hz from a resonance (needs > {min_gap:.4e})")
        })
    }

    /// Length of one full f1/f2/f_ref cycle (s).
    pub fn cycle_time(&self) -> f64 {
        3.0 * self.dwell
    }

    /// Temperature from (possibly fractional) counts on the three channels.
    pub fn estimate(&self, counts: [f64; 3]) -> Result<f64> {
        let [n1, n2, nr] = counts;
        if !(nr > 0.0) {
            return Err(Error::Estimation("no reference counts in window".into()));
        }
        let c = &self.calibration;
        let delta = (n1 - n2) / nr;
        Ok(c.t0 + (delta - (c.s1 - c.s2)) / c.slope)
    }

    /// Expected counts per cycle `L dwell S(f_i; T)` on the three channels.
    pub fn expected_counts(&self, ens: &Ensemble, temp: f64) -> Result<[f64; 3]> {
        let s = ens.signal_at(temp, &[self.f1, self.f2, self.f_ref])?;
        let per_channel = ens.assembly.photon_rate * self.dwell;
        let lambda = [per_channel * s[0], per_channel * s[1], per_channel * s[2]];
        if lambda.iter().any(|l| !(*l <= MAX_EXPECTED_COUNTS)) {
            return Err(Error::Overflow(format!(
                "expected counts {:.3e} per dwell exceed {MAX_EXPECTED_COUNTS:e}",
                per_channel
            )));
        }
        Ok(lambda)
    }
}

/// True temperature as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureTrace {
    Constant {
        temp: f64,
    },
    /// `high` for the first half of every period, then `low`.
    SquareWave {
        low: f64,
        high: f64,
        period: f64,
    },
    /// Piecewise constant: `temps[k]` on `[k hold, (k+1) hold)`, last value after.
    Steps {
        hold: f64,
        temps: Vec<f64>,
    },
}

impl TemperatureTrace {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Self::Constant { temp } => *temp,
            Self::SquareWave { low, high, period } => {
                if t.rem_euclid(*period) < 0.5 * period {
                    *high
                } else {
                    *low
                }
            }
            Self::Steps { hold, temps } => {
                let k = (t / hold).floor().max(0.0) as usize;
                temps[k.min(temps.len() - 1)]
            }
        }
    }

    /// `base` plus Gaussian offsets of standard deviation `sd`, each held for
    /// `hold` seconds. Models a slowly wandering bath.
    pub fn with_floor(base: f64, sd: f64, hold: f64, n_holds: usize, seed: u64) -> Result<Self> {
        ensure(sd >= 0.0 && hold > 0.0 && n_holds >= 1, || {
            "floor needs sd >= 0, hold > 0, n_holds >= 1".into()
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(Self::Steps {
            hold,
            temps: (0..n_holds).map(|_| base + normal.sample(&mut rng)).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { temp } => *temp > 0.0,
            Self::SquareWave { low, high, period } => *low > 0.0 && *high > 0.0 && *period > 0.0,
            Self::Steps { hold, temps } => *hold > 0.0 && !temps.is_empty() && temps.iter().all(|t| *t > 0.0),
        };
        ensure(ok, || format!("invalid temperature trace {self:?}"))
    }
}

/// Photon counts, one row per protocol cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub dwell: f64,
    /// Start time of every cycle (s).
    pub times: Vec<f64>,
    /// Counts at `f1`, `f2`, `f_ref`.
    pub counts: Vec<[u64; 3]>,
    /// True temperature during every cycle (K).
    pub true_temp: Vec<f64>,
}

impl CountRecord {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Summed counts over cycles `range`.
    pub fn window_counts(&self, range: std::ops::Range<usize>) -> [f64; 3] {
        self.counts[range].iter().fold([0.0; 3], |acc, c| {
            [acc[0] + c[0] as f64, acc[1] + c[1] as f64, acc[2] + c[2] as f64]
        })
    }
}

fn cycle_rng(seed: u64, cycle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cycle as u64);
    rng
}

fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> Result<u64> {
    if lambda == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(lambda).map_err(|e| Error::Overflow(format!("Poisson({lambda}): {e}")))?;
    Ok(dist.sample(rng) as u64)
}

/// Simulates `duration` seconds of whole cycles at constant laser intensity.
pub fn simulate_counts(
    ens: &Ensemble,
    cfg: &ThreePointConfig,
    trace: &TemperatureTrace,
    duration: f64,
    seed: u64,
) -> Result<CountRecord> {
    simulate_counts_with_intensity(ens, cfg, trace, duration, seed, |_| 1.0)
}

/// As [`simulate_counts`], with every channel scaled by `intensity(t)` to
/// model common laser drift. Every cycle draws from its own RNG stream.
pub fn simulate_counts_with_intensity(
    ens: &Ensemble,
    cfg: &ThreePointConfig,
    trace: &TemperatureTrace,
    duration: f64,
    seed: u64,
    intensity: impl Fn(f64) -> f64 + Sync,
) -> Result<CountRecord> {
    cfg.validate()?;
    trace.validate()?;
    let cycle = cfg.cycle_time();
    let n = (duration / cycle + 1e-9).floor() as usize;
    ensure(n >= 1, || {
        format!("duration {duration} s is shorter than one cycle ({cycle} s)")
    })?;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * cycle).collect();
    let true_temp: Vec<f64> = times.iter().map(|t| trace.at(t + 0.5 * cycle)).collect();

    // Forward model once per distinct temperature.
    let mut distinct: BTreeMap<u64, [f64; 3]> = true_temp.iter().map(|t| (t.to_bits(), [0.0; 3])).collect();
    let keys: Vec<u64> = distinct.keys().copied().collect();
    let lambdas = keys
        .par_iter()
        .map(|k| cfg.expected_counts(ens, f64::from_bits(*k)))
        .collect::<Result<Vec<_>>>()?;
    for (k, l) in keys.into_iter().zip(lambdas) {
        distinct.insert(k, l);
    }

    let counts = (0..n)
        .into_par_iter()
        .map(|i| {
            let scale = intensity(times[i] + 0.5 * cycle);
            ensure(scale >= 0.0 && scale.is_finite(), || {
                format!("laser intensity {scale} at cycle {i}")
            })?;
            let lambda = distinct[&true_temp[i].to_bits()];
            let mut rng = cycle_rng(seed, i);
            Ok([
                poisson(scale * lambda[0], &mut rng)?,
                poisson(scale * lambda[1], &mut rng)?,
                poisson(scale * lambda[2], &mut rng)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CountRecord {
        dwell: cfg.dwell,
        times,
        counts,
        true_temp,
    })
}

/// Temperature estimate from the summed counts of cycles `range`.
pub fn estimate_temperature(rec: &CountRecord, range: std::ops::Range<usize>, cfg: &ThreePointConfig) -> Result<f64> {
    ensure(!range.is_empty() && range.end <= rec.len(), || {
        format!("window {range:?} outside record of {} cycles", rec.len())
    })?;
    cfg.estimate(rec.window_counts(range))
}

/// Estimates over consecutive non-overlapping windows of `window` cycles.
pub fn window_estimates(rec: &CountRecord, window: usize, cfg: &ThreePointConfig) -> Vec<Result<f64>> {
    if window == 0 {
        return Vec::new();
    }
    (0..rec.len() / window)
        .into_par_iter()
        .map(|w| estimate_temperature(rec, w * window..(w + 1) * window, cfg))
        .collect()
}

/// Shot-noise-limited sensitivity of the protocol from the delta method.
pub fn eta_three_point_analytic(ens: &Ensemble, cfg: &ThreePointConfig) -> Result<f64> {
    let [l1, l2, lr] = cfg.expected_counts(ens, cfg.calibration.t0)?;
    // Variance of (n1 - n2)/n_ref for one cycle of Poisson counts.
    let var = (l1 + l2) / (lr * lr) + (l1 - l2).powi(2) / (lr * lr * lr);
    Ok((var * cfg.cycle_time()).sqrt() / cfg.calibration.slope.abs())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotNoiseRow {
    /// Window length (s).
    pub window: f64,
    pub n_windows: usize,
    /// Standard deviation of the window estimates (K).
    pub delta_t: f64,
    /// `delta_t sqrt(window)` (K/sqrt(Hz)).
    pub eta: f64,
    /// Fewer than [`MIN_WINDOWS`] windows.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotNoiseCurve {
    pub rows: Vec<ShotNoiseRow>,
    /// Least-squares slope of `ln delta_t` against `ln window`.
    pub slope: f64,
    /// Geometric mean of `delta_t sqrt(window)` (K/sqrt(Hz)).
    pub eta_fit: f64,
}

/// `delta_t` versus window length from one simulated record.
pub fn shot_noise_curve(
    ens: &Ensemble,
    cfg: &ThreePointConfig,
    trace: &TemperatureTrace,
    total_time: f64,
    window_grid: &[f64],
    seed: u64,
) -> Result<ShotNoiseCurve> {
    ensure(!window_grid.is_empty(), || "window grid is empty".into())?;
    let rec = simulate_counts(ens, cfg, trace, total_time, seed)?;
    shot_noise_from_record(&rec, cfg, window_grid)
}

/// As [`shot_noise_curve`] on an existing record.
pub fn shot_noise_from_record(
    rec: &CountRecord,
    cfg: &ThreePointConfig,
    window_grid: &[f64],
) -> Result<ShotNoiseCurve> {
    let cycle = cfg.cycle_time();
    let mut rows = Vec::with_capacity(window_grid.len());
    for &w in window_grid {
        ensure(w > 0.0, || format!("window lengths must be positive, got {w}"))?;
        let cycles = ((w / cycle).round() as usize).max(1);
        let estimates = window_estimates(rec, cycles, cfg)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let window = cycles as f64 * cycle;
        let n = estimates.len();
        let delta_t = if n >= 2 { mean_sd(&estimates).1 } else { f64::NAN };
        if n < MIN_WINDOWS {
            log::warn!("window {window} s has only {n} samples");
        }
        rows.push(ShotNoiseRow {
            window,
            n_windows: n,
            delta_t,
            eta: delta_t * window.sqrt(),
            flagged: n < MIN_WINDOWS,
        });
    }
    let fit: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| !r.flagged && r.delta_t > 0.0)
        .map(|r| (r.window.ln(), r.delta_t.ln()))
        .collect();
    ensure(!fit.is_empty(), || "no window length has enough samples".into())?;
    let n = fit.len() as f64;
    let (mx, my) = (
        fit.iter().map(|p| p.0).sum::<f64>() / n,
        fit.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxx: f64 = fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    let eta_fit = (fit.iter().map(|p| p.1 + 0.5 * p.0).sum::<f64>() / n).exp();
    Ok(ShotNoiseCurve { rows, slope, eta_fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    /// Monte-Carlo three-point sensitivity (K/sqrt(Hz)).
    pub eta_three_point: f64,
    /// Ideal single-point bound at the same rate and temperature.
    pub eta_cw: f64,
    pub ratio: f64,
}

/// Monte-Carlo three-point sensitivity relative to the single-point bound.
///
/// Simulates `n_windows` windows of `window_cycles` cycles at the calibration
/// temperature.
pub fn three_point_penalty(
    ens: &Ensemble,
    cfg: &ThreePointConfig,
    n_windows: usize,
    window_cycles: usize,
    seed: u64,
    opts: &SlopeOptions,
) -> Result<Penalty> {
    ensure(n_windows >= 2 && window_cycles >= 1, || {
        "need at least two windows of one cycle".into()
    })?;
    let t0 = cfg.calibration.t0;
    let duration = (n_windows * window_cycles) as f64 * cfg.cycle_time();
    let rec = simulate_counts(ens, cfg, &TemperatureTrace::Constant { temp: t0 }, duration, seed)?;
    let estimates = window_estimates(&rec, window_cycles, cfg)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let eta_three_point = mean_sd(&estimates).1 * (window_cycles as f64 * cfg.cycle_time()).sqrt();

    let width = ens.assembly.line_width;
    let grid = ens.frequency_grid(t0, opts.margin_widths, opts.step_widths * width)?;
    let eta_cw = eta_cw_numeric(&ens.signal_slope(t0, &grid, opts.dt_step)?, ens.assembly.photon_rate)?;
    Ok(Penalty {
        eta_three_point,
        eta_cw,
        ratio: eta_three_point / eta_cw,
    })
}

/// One bin of a tracking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBin {
    pub t: f64,
    pub counts: [u64; 3],
    pub t_hat: f64,
    /// Mean true temperature over the bin.
    pub t_true: f64,
    /// `Some(true)` for the high half-period, `None` if the bin straddles a switch.
    pub high: Option<bool>,
    pub period: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub bins: Vec<TrackBin>,
    pub low: LevelStats,
    pub high: LevelStats,
    /// `(high - low) / pooled sd`.
    pub separation_sigma: f64,
    /// Welch statistic for the difference of the level means.
    pub welch_t: f64,
    /// Largest deviation of a per-period level mean from its overall level
    /// mean, in standard errors of a per-period mean.
    pub max_period_deviation: f64,
}

fn level_stats(xs: &[f64]) -> Result<LevelStats> {
    ensure(xs.len() >= 2, || "each level needs at least two bins".into())?;
    let (mean, sd) = mean_sd(xs);
    Ok(LevelStats { mean, sd, n: xs.len() })
}

/// Tracks a square wave between `low` and `high`, one estimate per `bin`.
#[allow(clippy::too_many_arguments)]
pub fn track_square_wave(
    ens: &Ensemble,
    cfg: &ThreePointConfig,
    low: f64,
    high: f64,
    period: f64,
    bin: f64,
    duration: f64,
    seed: u64,
) -> Result<TrackResult> {
    let cycle = cfg.cycle_time();
    ensure(bin >= cycle * (1.0 - 1e-9), || {
        format!("bin {bin} s is shorter than one cycle ({cycle} s)")
    })?;
    ensure(period >= 2.0 * bin, || {
        format!("period {period} s must span at least two bins")
    })?;
    let trace = TemperatureTrace::SquareWave { low, high, period };
    let rec = simulate_counts(ens, cfg, &trace, duration, seed)?;
    let per_bin = ((bin / cycle).round() as usize).max(1);
    let n_bins = rec.len() / per_bin;
    ensure(n_bins >= 4, || "duration holds fewer than four bins".into())?;

    let half = 0.5 * period;
    let bins = (0..n_bins)
        .map(|b| {
            let range = b * per_bin..(b + 1) * per_bin;
            let start = rec.times[range.start];
            // Label by cycle midpoints; a bin counts toward a level only if
            // every cycle lies in the same half-period.
            let halves: Vec<f64> = range
                .clone()
                .map(|i| ((rec.times[i] + 0.5 * cycle) / half).floor())
                .collect();
            let same_half = halves.iter().all(|h| *h == halves[0]);
            let p_start = (rec.times[range.start] + 0.5 * cycle).rem_euclid(period);
            let t_true = rec.true_temp[range.clone()].iter().sum::<f64>() / per_bin as f64;
            Ok(TrackBin {
                t: start,
                counts: rec.counts[range.clone()]
                    .iter()
                    .fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]),
                t_hat: estimate_temperature(&rec, range, cfg)?,
                t_true,
                high: same_half.then_some(p_start < half),
                period: (start / period).floor() as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let level = |h: bool| -> Vec<f64> { bins.iter().filter(|b| b.high == Some(h)).map(|b| b.t_hat).collect() };
    let (lo_vals, hi_vals) = (level(false), level(true));
    let low_stats = level_stats(&lo_vals)?;
    let high_stats = level_stats(&hi_vals)?;
    let pooled = ((low_stats.sd.powi(2) + high_stats.sd.powi(2)) / 2.0).sqrt();
    let separation_sigma = (high_stats.mean - low_stats.mean) / pooled;
    let welch_t = (high_stats.mean - low_stats.mean)
        / (high_stats.sd.powi(2) / high_stats.n as f64 + low_stats.sd.powi(2) / low_stats.n as f64).sqrt();

    // Only complete periods enter the repeatability check.
    let periods = (rec.len() as f64 * cycle / period + 1e-9).floor() as usize;
    let mut max_period_deviation = 0.0f64;
    for (h, stats) in [(false, low_stats), (true, high_stats)] {
        for p in 0..periods {
            let vals: Vec<f64> = bins
                .iter()
                .filter(|b| b.high == Some(h) && b.period == p)
                .map(|b| b.t_hat)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let se = stats.sd / (vals.len() as f64).sqrt();
            max_period_deviation = max_period_deviation.max((mean - stats.mean).abs() / se);
        }
    }

    Ok(TrackResult {
        bins,
        low: low_stats,
        high: high_stats,
        separation_sigma,
        welch_t,
        max_period_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{CrystalOrientation, NvSite, SensorAssembly};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    /// Zero-field single NV: one Lorentzian of depth `contrast` at D(T).
    fn lorentzian_nv(contrast: f64) -> Ensemble {
        let mut asm = SensorAssembly::design_point(None, 0);
        asm.n_nv = 1;
        asm.contrast = contrast;
        asm.strain_mean = 0.0;
        asm.strain_sd = 0.0;
        asm.crystal_orientation = CrystalOrientation::Identity;
        let site = NvSite {
            position: asm.fnd_center,
            axis: Vector3::new(1.0, 1.0, 1.0).normalize(),
            strain_e: 0.0,
        };
        Ensemble::from_sites(asm, vec![site]).unwrap()
    }

    fn config(ens: &Ensemble) -> ThreePointConfig {
        ThreePointConfig::auto(
            ens,
            300.0,
            1e-3,
            &SlopeOptions {
                step_widths: 1.0 / 400.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn auto_probes_sit_at_the_half_height_points() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let d = ens.assembly.spin.d_of_t(300.0).unwrap();
        let hwhm = 0.5 * ens.assembly.line_width;
        let offset = hwhm / 3f64.sqrt();
        // D falls with T, so the signal rises above the dip centre.
        assert_relative_eq!(cfg.f1, d + offset, epsilon = ens.assembly.line_width / 200.0);
        assert_relative_eq!(cfg.f2, d - offset, epsilon = ens.assembly.line_width / 200.0);
        assert!(cfg.calibration.slope > 0.0);
        cfg.check_detuning(&ens).unwrap();
        let close = ThreePointConfig {
            f_ref: d + 10.0 * ens.assembly.line_width,
            ..cfg
        };
        assert!(close.check_detuning(&ens).is_err());
    }

    #[test]
    fn zero_contrast_gives_equal_rates() {
        let mut ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        ens.assembly.contrast = 1e-300;
        let l = cfg.expected_counts(&ens, 300.0).unwrap();
        let expect = ens.assembly.photon_rate * cfg.dwell;
        for v in l {
            assert_relative_eq!(v, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn counts_are_poisson_around_the_expectation() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let rec = simulate_counts(&ens, &cfg, &TemperatureTrace::Constant { temp: 300.0 }, 30.0, 5).unwrap();
        let lambda = cfg.expected_counts(&ens, 300.0).unwrap();
        let n = rec.len() as f64;
        assert_eq!(rec.len(), 10_000);
        for ch in 0..3 {
            let mean = rec.counts.iter().map(|c| c[ch] as f64).sum::<f64>() / n;
            assert!(
                (mean - lambda[ch]).abs() < 3.0 * (lambda[ch] / n).sqrt(),
                "channel {ch}: {mean} vs {}",
                lambda[ch]
            );
        }
        assert!(rec
            .times
            .windows(2)
            .all(|w| (w[1] - w[0] - cfg.cycle_time()).abs() < 1e-12));
    }

    #[test]
    fn records_are_seed_deterministic() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let trace = TemperatureTrace::SquareWave {
            low: 299.0,
            high: 301.0,
            period: 0.6,
        };
        let a = simulate_counts(&ens, &cfg, &trace, 3.0, 9).unwrap();
        let b = simulate_counts(&ens, &cfg, &trace, 3.0, 9).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(a, pool.install(|| simulate_counts(&ens, &cfg, &trace, 3.0, 9).unwrap()));
        assert_ne!(a, simulate_counts(&ens, &cfg, &trace, 3.0, 10).unwrap());
    }

    #[test]
    fn absurd_rates_overflow() {
        let mut ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        ens.assembly.photon_rate = 1e30;
        let err = simulate_counts(&ens, &cfg, &TemperatureTrace::Constant { temp: 300.0 }, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::Overflow(_)));
    }

    #[test]
    fn noiseless_estimates() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let at_t0 = cfg.estimate(cfg.expected_counts(&ens, 300.0).unwrap()).unwrap();
        assert!((at_t0 - 300.0).abs() < 1e-9);
        let warm = cfg.estimate(cfg.expected_counts(&ens, 300.05).unwrap()).unwrap();
        assert!((warm - 300.05).abs() < 5e-3, "{warm}");
        assert!(matches!(cfg.estimate([10.0, 10.0, 0.0]), Err(Error::Estimation(_))));
    }

    #[test]
    fn common_drift_cancels() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let base = cfg.expected_counts(&ens, 300.2).unwrap();
        let t = cfg.estimate(base).unwrap();
        for k in [0.3, 0.9, 1.7, 12.0] {
            let drifted = cfg.estimate(base.map(|l| l * k)).unwrap();
            assert!((drifted - t).abs() < 1e-12);
        }
        // With noise, the estimator still tracks through a slow intensity ramp.
        let trace = TemperatureTrace::Constant { temp: 300.0 };
        let rec = simulate_counts_with_intensity(&ens, &cfg, &trace, 30.0, 3, |t| 1.0 - 0.01 * t).unwrap();
        let est = window_estimates(&rec, 1000, &cfg);
        let (m, _) = mean_sd(&est.into_iter().map(|e| e.unwrap()).collect::<Vec<_>>());
        assert!((m - 300.0).abs() < 0.05);
    }

    #[test]
    fn estimator_is_unbiased_at_calibration() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let rec = simulate_counts(&ens, &cfg, &TemperatureTrace::Constant { temp: 300.0 }, 30.0, 21).unwrap();
        let est: Vec<f64> = window_estimates(&rec, 10, &cfg)
            .into_iter()
            .map(|e| e.unwrap())
            .collect();
        assert_eq!(est.len(), 1000);
        let (mean, sd) = mean_sd(&est);
        assert!(
            (mean - 300.0).abs() < 3.0 * sd / (est.len() as f64).sqrt(),
            "{mean} +- {sd}"
        );
    }

    #[test]
    fn disjoint_halves_agree_with_pooled_spread() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let rec = simulate_counts(&ens, &cfg, &TemperatureTrace::Constant { temp: 300.0 }, 60.0, 4).unwrap();
        let est: Vec<f64> = window_estimates(&rec, 20, &cfg)
            .into_iter()
            .map(|e| e.unwrap())
            .collect();
        let n = est.len();
        let pooled = mean_sd(&est).1;
        for half in [&est[..n / 2], &est[n / 2..]] {
            let sd = mean_sd(half).1;
            // Standard error of a sample sd is about sd / sqrt(2 (n - 1)).
            let se = pooled / (2.0 * (half.len() as f64 - 1.0)).sqrt();
            assert!((sd - pooled).abs() < 4.0 * se, "{sd} vs {pooled}");
        }
    }

    #[test]
    fn penalty_grows_off_the_steepest_points() {
        let ens = lorentzian_nv(0.03);
        let cfg = config(&ens);
        let best = eta_three_point_analytic(&ens, &cfg).unwrap();
        let mut last = best;
        for shift in [0.05, 0.1, 0.2, 0.3] {
            let w = ens.assembly.line_width;
            let moved = ThreePointConfig::calibrate(
                &ens,
                300.0,
                cfg.f1 + shift * w,
                cfg.f2 - shift * w,
                cfg.f_ref,
                cfg.dwell,
                1e-2,
            )
            .unwrap();
            let eta = eta_three_point_analytic(&ens, &moved).unwrap();
            assert!(eta > last, "shift {shift}: {eta} <= {last}");
            last = eta;
        }
    }

    #[test]
    fn analytic_penalty_is_stable_as_contrast_vanishes() {
        let opts = SlopeOptions {
            step_widths: 1.0 / 400.0,
            ..Default::default()
        };
        let ratio = |c: f64| {
            let ens = lorentzian_nv(c);
            let cfg = config(&ens);
            let t0 = cfg.calibration.t0;
            let grid = ens
                .frequency_grid(t0, 10.0, opts.step_widths * ens.assembly.line_width)
                .unwrap();
            let cw = eta_cw_numeric(
                &ens.signal_slope(t0, &grid, opts.dt_step).unwrap(),
                ens.assembly.photon_rate,
            )
            .unwrap();
            eta_three_point_analytic(&ens, &cfg).unwrap() / cw
        };
        let (a, b, c) = (ratio(0.03), ratio(0.003), ratio(0.0003));
        assert!((b / a - 1.0).abs() < 0.02 && (c / b - 1.0).abs() < 0.002);
        assert!((c - 1.5f64.sqrt()).abs() < 0.01, "{c}");
    }

    #[test]
    fn monte_carlo_matches_delta_method() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let penalty = three_point_penalty(&ens, &cfg, 4000, 5, 13, &SlopeOptions::default()).unwrap();
        let analytic = eta_three_point_analytic(&ens, &cfg).unwrap();
        assert!((penalty.eta_three_point / analytic - 1.0).abs() < 0.05);
    }

    #[test]
    fn shot_noise_rows_and_flags() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let trace = TemperatureTrace::Constant { temp: 300.0 };
        let curve = shot_noise_curve(&ens, &cfg, &trace, 30.0, &[0.003, 0.03, 0.3, 6.0], 2).unwrap();
        assert_eq!(curve.rows.len(), 4);
        assert!(!curve.rows[2].flagged && curve.rows[3].flagged);
        assert_eq!(curve.rows[3].n_windows, 5);
        assert!((curve.slope + 0.5).abs() < 0.05, "{}", curve.slope);
        assert!(shot_noise_curve(&ens, &cfg, &trace, 1.0, &[], 2).is_err());
    }

    #[test]
    fn floor_trace_is_reproducible() {
        let a = TemperatureTrace::with_floor(300.0, 0.01, 10.0, 50, 3).unwrap();
        assert_eq!(a, TemperatureTrace::with_floor(300.0, 0.01, 10.0, 50, 3).unwrap());
        assert_eq!(a.at(0.0), a.at(9.99));
        assert_ne!(a.at(0.0), a.at(10.0));
        assert_eq!(a.at(1e6), a.at(495.0));
    }

    #[test]
    fn flat_square_wave_levels_are_indistinguishable() {
        let ens = lorentzian_nv(0.2);
        let cfg = config(&ens);
        let res = track_square_wave(&ens, &cfg, 300.0, 300.0, 1.2, 0.06, 24.0, 8).unwrap();
        // Two-sided p > 0.01 in the large-sample limit.
        assert!(res.welch_t.abs() < 2.576, "{}", res.welch_t);
        let res = track_square_wave(&ens, &cfg, 297.5, 302.5, 1.2, 0.06, 24.0, 8).unwrap();
        assert!(res.separation_sigma > 3.0);
        assert!(res.high.mean > res.low.mean);
        assert_eq!(res.bins.iter().filter(|b| b.high.is_none()).count(), 0);
    }
}
