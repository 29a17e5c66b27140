//! Sensitivity estimators: the CW slope bound, its Lorentzian closed form,
//! composition/temperature design sweeps and the Ramsey projection.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, SensorAssembly, DEFAULT_MAGNET_RADIUS_M, DEFAULT_SLOPE_DT_K};
use crate::error::{ensure, Error, Result};
use crate::materials::Material;

/// Readout window per Ramsey shot (s).
pub const DEFAULT_RAMSEY_READOUT_S: f64 = 0.3e-6;
/// Ramsey fringe contrast of a single NV.
pub const DEFAULT_RAMSEY_CONTRAST: f64 = 0.3;

/// Ideal single-point CW sensitivity `1 / (sqrt(L) max|dS/dT|)` (K/sqrt(Hz)).
pub fn eta_cw_numeric(slope: &[f64], photon_rate: f64) -> Result<f64> {
    ensure(photon_rate > 0.0, || {
        format!("photon_rate must be positive, got {photon_rate}")
    })?;
    ensure(!slope.is_empty(), || "slope grid is empty".into())?;
    if slope.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("slope grid contains non-finite values".into()));
    }
    let max = slope.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max == 0.0 {
        return Err(Error::Unmeasurable("dS/dT vanishes on the whole grid".into()));
    }
    Ok(1.0 / (photon_rate.sqrt() * max))
}

/// Closed form for a Lorentzian line of FWHM `delta_omega` and depth `contrast`
/// shifting at `domega_dt` (Hz/K).
pub fn eta_cw_lorentzian(delta_omega: f64, contrast: f64, photon_rate: f64, domega_dt: f64) -> Result<f64> {
    ensure(delta_omega > 0.0 && contrast > 0.0 && photon_rate > 0.0, || {
        format!("delta_omega, contrast and photon_rate must be positive, got {delta_omega}, {contrast}, {photon_rate}")
    })?;
    if domega_dt == 0.0 {
        return Err(Error::Unmeasurable("line does not move with temperature".into()));
    }
    let prefactor = 4.0 / (3.0 * 3f64.sqrt());
    Ok(prefactor * delta_omega / (contrast * photon_rate.sqrt() * domega_dt.abs()))
}

/// Inputs of the Ramsey estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyParams {
    pub photon_rate: f64,
    pub contrast: f64,
    pub t2_star: f64,
    /// Photon collection window per shot (s).
    pub readout_time: f64,
    /// Line shift per kelvin (Hz/K).
    pub domega_dt: f64,
}

impl RamseyParams {
    pub fn new(photon_rate: f64, contrast: f64, t2_star: f64, domega_dt: f64) -> Self {
        Self {
            photon_rate,
            contrast,
            t2_star,
            readout_time: DEFAULT_RAMSEY_READOUT_S,
            domega_dt,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure(self.photon_rate > 0.0 && self.readout_time > 0.0, || {
            "photon_rate and readout_time must be positive".into()
        })?;
        ensure(self.contrast > 0.0 && self.contrast <= 1.0, || {
            format!("contrast must lie in (0, 1], got {}", self.contrast)
        })?;
        ensure(self.t2_star > 0.0, || {
            format!("t2_star must be positive, got {}", self.t2_star)
        })?;
        if self.domega_dt == 0.0 {
            return Err(Error::Unmeasurable("line does not move with temperature".into()));
        }
        Ok(())
    }
}

/// Shot-noise-limited Ramsey sensitivity at free-precession time `tau`.
///
/// `exp((tau/T2*)^2) / (2 pi C sqrt(L t_readout) sqrt(tau) |dnu/dT|)`: each
/// shot collects `L t_readout` photons and one shot fits in every `tau`.
pub fn eta_ramsey(p: &RamseyParams, tau: f64) -> Result<f64> {
    p.validate()?;
    ensure(tau > 0.0, || format!("tau must be positive, got {tau}"))?;
    let envelope = (tau / p.t2_star).powi(2).exp();
    let photons = (p.photon_rate * p.readout_time).sqrt();
    Ok(envelope / (2.0 * PI * p.contrast * photons * tau.sqrt() * p.domega_dt.abs()))
}

/// Minimizes [`eta_ramsey`] over `tau` in `(0, 2 T2*]` by golden-section
/// search to `1e-3` relative. Returns `(tau_opt, eta)`.
pub fn optimal_ramsey(p: &RamseyParams) -> Result<(f64, f64)> {
    p.validate()?;
    let f = |tau: f64| eta_ramsey(p, tau);
    let tau = golden_section(
        |t| f(t).unwrap_or(f64::INFINITY),
        1e-6 * p.t2_star,
        2.0 * p.t2_star,
        1e-3,
    );
    Ok((tau, f(tau)?))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, rel_tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > rel_tol * 0.5 * (a + b).abs() {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Operating-temperature rule for the design sweep: a grid from
/// `Tc - span_k` up to `Tc - step_k` in steps of `step_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TempPolicy {
    pub span_k: f64,
    pub step_k: f64,
}

impl Default for TempPolicy {
    fn default() -> Self {
        Self {
            span_k: 20.0,
            step_k: 0.25,
        }
    }
}

impl TempPolicy {
    /// Ascending temperatures strictly below `tc`.
    pub fn temps(&self, tc: f64) -> Result<Vec<f64>> {
        ensure(self.step_k > 0.0 && self.span_k >= self.step_k, || {
            format!(
                "temp policy needs 0 < step_k <= span_k, got {} / {}",
                self.step_k, self.span_k
            )
        })?;
        let n = (self.span_k / self.step_k + 1e-9).floor() as usize;
        Ok((1..=n)
            .rev()
            .map(|k| tc - self.step_k * k as f64)
            .filter(|t| *t > 0.0)
            .collect())
    }
}

/// Frequency grid and finite-difference settings for slope searches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeOptions {
    /// Grid spacing as a fraction of the line width.
    pub step_widths: f64,
    /// Grid margin beyond the outermost line centres, in line widths.
    pub margin_widths: f64,
    pub dt_step: f64,
}

impl Default for SlopeOptions {
    fn default() -> Self {
        Self {
            step_widths: 1.0 / 16.0,
            margin_widths: 10.0,
            dt_step: DEFAULT_SLOPE_DT_K,
        }
    }
}

/// Best CW working point of one ensemble at one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub temp: f64,
    pub eta: f64,
    /// `max |dS/dT|` (1/K).
    pub max_slope: f64,
    /// Frequency of the steepest point (Hz).
    pub probe_freq: f64,
}

/// Ideal CW sensitivity of `ens` at `temp` from the steepest grid point.
pub fn operating_point(ens: &Ensemble, temp: f64, opts: &SlopeOptions) -> Result<OperatingPoint> {
    let step = opts.step_widths * ens.assembly.line_width;
    let grid = ens.frequency_grid(temp, opts.margin_widths, step)?;
    let slope = ens.signal_slope(temp, &grid, opts.dt_step)?;
    let eta = eta_cw_numeric(&slope, ens.assembly.photon_rate)?;
    let (i, s) = slope
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("non-empty grid");
    Ok(OperatingPoint {
        temp,
        eta,
        max_slope: s.abs(),
        probe_freq: grid[i],
    })
}

/// The best operating point over a temperature grid.
pub fn optimize_temperature(ens: &Ensemble, temps: &[f64], opts: &SlopeOptions) -> Result<OperatingPoint> {
    ensure(!temps.is_empty(), || "temperature grid is empty".into())?;
    let points: Vec<Result<OperatingPoint>> = temps.par_iter().map(|&t| operating_point(ens, t, opts)).collect();
    best_point(points)
}

fn best_point(points: Vec<Result<OperatingPoint>>) -> Result<OperatingPoint> {
    let mut best: Option<OperatingPoint> = None;
    let mut last_err = None;
    for p in points {
        match p {
            Ok(p) if best.is_none_or(|b| p.eta < b.eta) => best = Some(p),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one temperature"))
}

/// Ensemble-averaged `|d omega / dT|` over both transitions (Hz/K).
pub fn mean_line_shift_rate(ens: &Ensemble, temp: f64, dt_step: f64) -> Result<f64> {
    ensure(dt_step > 0.0, || format!("dt_step must be positive, got {dt_step}"))?;
    let hi = ens.line_centers(temp + dt_step)?;
    let lo = ens.line_centers(temp - dt_step)?;
    let sum: f64 = hi
        .iter()
        .zip(&lo)
        .map(|(h, l)| (h.0 - l.0).abs() + (h.1 - l.1).abs())
        .sum();
    Ok(sum / (4.0 * dt_step * hi.len() as f64))
}

/// One composition of a design sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub tc: f64,
    pub t_opt: Option<f64>,
    pub eta_opt: Option<f64>,
    pub domega_dt: Option<f64>,
    /// `"ok"` or the error text for this composition.
    pub status: String,
}

impl SweepRow {
    fn failed(x: f64, tc: f64, err: &Error) -> Self {
        Self {
            x,
            tc,
            t_opt: None,
            eta_opt: None,
            domega_dt: None,
            status: err.to_string(),
        }
    }
}

/// Optimal CW sensitivity versus composition.
///
/// Each `x` gets a particle of `material` with the template's magnet geometry
/// (or a 200 nm particle at the origin magnetized along `z` if the template
/// has none). The NV sample is shared across compositions. Failures are
/// recorded per row.
pub fn design_sweep(
    template: &SensorAssembly,
    material: &Material,
    x_grid: &[f64],
    policy: &TempPolicy,
    opts: &SlopeOptions,
) -> Result<Vec<SweepRow>> {
    ensure(material.is_composition_tuned(), || {
        format!("{} has no composition axis", material.name)
    })?;
    let (radius, center, axis) = match &template.magnet {
        Some(m) => (m.radius, m.center, m.easy_axis),
        None => (
            DEFAULT_MAGNET_RADIUS_M,
            nalgebra::Vector3::zeros(),
            nalgebra::Vector3::z(),
        ),
    };
    let sites = crate::ensemble::sample_ensemble(&SensorAssembly {
        magnet: None,
        ..template.clone()
    })?;

    struct Cell {
        row: usize,
        ens: Option<Ensemble>,
        temps: Vec<f64>,
    }
    let mut rows = Vec::with_capacity(x_grid.len());
    let mut cells = Vec::new();
    for (i, &x) in x_grid.iter().enumerate() {
        let tc = material.curie_temperature(Some(x)).unwrap_or(f64::NAN);
        let built = material.magnet(Some(x), radius, center, axis).and_then(|mag| {
            ensure(mag.tc > 0.0, || format!("composition {x} is not ferromagnetic"))?;
            let temps = policy.temps(mag.tc)?;
            let asm = SensorAssembly {
                magnet: Some(mag),
                ..template.clone()
            };
            Ok((Ensemble::from_sites(asm, sites.clone())?, temps))
        });
        match built {
            Ok((ens, temps)) => {
                rows.push(SweepRow::failed(x, tc, &Error::Estimation("not evaluated".into())));
                cells.push(Cell {
                    row: i,
                    ens: Some(ens),
                    temps,
                });
            }
            Err(e) => {
                log::warn!("design sweep: x = {x}: {e}");
                rows.push(SweepRow::failed(x, tc, &e));
            }
        }
    }

    // Flatten to (composition, temperature) cells; collect keeps input order.
    let jobs: Vec<(usize, f64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, cell)| cell.temps.iter().map(move |&t| (c, t)))
        .collect();
    let results: Vec<(usize, Result<OperatingPoint>)> = jobs
        .par_iter()
        .map(|&(c, t)| (c, operating_point(cells[c].ens.as_ref().expect("built"), t, opts)))
        .collect();
    let mut per_cell: Vec<Vec<Result<OperatingPoint>>> = (0..cells.len()).map(|_| Vec::new()).collect();
    for (c, r) in results {
        per_cell[c].push(r);
    }

    for (cell, points) in cells.iter_mut().zip(per_cell) {
        let row = &mut rows[cell.row];
        let ens = cell.ens.take().expect("built");
        let outcome = best_point(points).and_then(|p| Ok((p, mean_line_shift_rate(&ens, p.temp, opts.dt_step)?)));
        match outcome {
            Ok((p, rate)) => {
                row.t_opt = Some(p.temp);
                row.eta_opt = Some(p.eta);
                row.domega_dt = Some(rate);
                row.status = "ok".into();
            }
            Err(e) => {
                log::warn!("design sweep: x = {}: {e}", row.x);
                row.status = e.to_string();
            }
        }
    }
    Ok(rows)
}

/// Inputs echoed by a [`SensitivityReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub photon_rate: f64,
    pub contrast: f64,
    pub line_width: f64,
    pub domega_dt: f64,
    pub max_slope: f64,
    pub tau: Option<f64>,
    pub t2_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub temp: f64,
    pub eta_cw_numeric: f64,
    pub eta_cw_lorentzian: f64,
    pub eta_three_point: f64,
    pub eta_ramsey: Option<f64>,
    pub inputs: ReportInputs,
}

impl SensitivityReport {
    pub fn validate(&self) -> Result<()> {
        let etas = [self.eta_cw_numeric, self.eta_cw_lorentzian, self.eta_three_point];
        ensure(
            etas.iter().chain(&self.eta_ramsey).all(|e| *e > 0.0 && e.is_finite()),
            || "all sensitivities must be positive and finite".into(),
        )?;
        ensure(self.eta_three_point >= self.eta_cw_numeric, || {
            format!(
                "three-point sensitivity {} beats the single-point bound {}",
                self.eta_three_point, self.eta_cw_numeric
            )
        })
    }
}
