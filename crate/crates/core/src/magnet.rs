//! Mean-field magnetization of the nanoparticle and its dipole field.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Vacuum permeability (T m / A), CODATA 2018.
pub const MU0: f64 = 1.256_637_062_12e-6;

/// Ni fraction below which Cu(1-x)Ni(x) is paramagnetic at all temperatures.
pub const CUNI_X_ONSET: f64 = 0.45;
/// Curie temperature of pure Ni used as the upper composition anchor (K).
pub const CUNI_TC_PURE_NI_K: f64 = 637.0;

/// Lower end of the bisection bracket for the reduced magnetization.
const M_FLOOR: f64 = 1e-12;

/// Bisection schedule for the self-consistent mean-field equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldSolver {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MeanFieldSolver {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }
}

/// A uniformly magnetized spherical particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Magnet {
    /// Ni fraction, when the particle is a Cu(1-x)Ni(x) alloy.
    pub composition_x: Option<f64>,
    /// Curie temperature (K).
    pub tc: f64,
    /// Saturation magnetization at zero temperature (A/m).
    pub m_sat: f64,
    pub spin_j: f64,
    /// Radius (m).
    pub radius: f64,
    /// Centre position (m).
    pub center: Vector3<f64>,
    /// Unit vector of the remanent magnetization.
    pub easy_axis: Vector3<f64>,
}

impl Magnet {
    pub fn new(
        tc: f64,
        m_sat: f64,
        spin_j: f64,
        radius: f64,
        center: Vector3<f64>,
        easy_axis: Vector3<f64>,
    ) -> Result<Self> {
        let mag = Self {
            composition_x: None,
            tc,
            m_sat,
            spin_j,
            radius,
            center,
            easy_axis,
        };
        mag.validate()?;
        Ok(mag)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.tc > 0.0 && self.tc.is_finite(), || {
            format!("magnet tc must be positive, got {}", self.tc)
        })?;
        ensure(self.m_sat > 0.0 && self.m_sat.is_finite(), || {
            format!("magnet m_sat must be positive, got {}", self.m_sat)
        })?;
        ensure(self.radius > 0.0 && self.radius.is_finite(), || {
            format!("magnet radius must be positive, got {}", self.radius)
        })?;
        ensure(self.spin_j > 0.0 && self.spin_j.is_finite(), || {
            format!("magnet spin_j must be positive, got {}", self.spin_j)
        })?;
        ensure((self.easy_axis.norm() - 1.0).abs() <= 1e-12, || {
            format!("easy_axis must be a unit vector, |a| = {}", self.easy_axis.norm())
        })?;
        if let Some(x) = self.composition_x {
            let tc = curie_temperature(x)?;
            ensure((tc - self.tc).abs() <= 1e-9 * tc.max(1.0), || {
                format!(
                    "tc = {} K is inconsistent with composition x = {x} (Tc(x) = {tc} K)",
                    self.tc
                )
            })?;
        }
        Ok(())
    }

    /// Reduced magnetization `M(T) / M_sat` from the mean-field solver.
    pub fn reduced_magnetization(&self, temp: f64) -> Result<f64> {
        solve_magnetization(self, temp)
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radius.powi(3)
    }

    /// Dipole moment (A m^2) along the easy axis.
    pub fn moment(&self, temp: f64) -> Result<Vector3<f64>> {
        magnetic_moment(self, temp)
    }

    /// Field (T) at `observer`, rejecting points inside the particle.
    pub fn field_at(&self, temp: f64, observer: &Vector3<f64>) -> Result<Vector3<f64>> {
        let m = self.moment(temp)?;
        dipole_field(&m, &self.center, observer, self.radius)
    }
}

/// Curie temperature of Cu(1-x)Ni(x), linear between `Tc(0.45) = 0 K` and
/// `Tc(1.0) = 637 K`.
pub fn curie_temperature(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("Ni fraction must lie in [0, 1], got {x}")));
    }
    if x <= CUNI_X_ONSET {
        if x < CUNI_X_ONSET {
            log::warn!("Ni fraction {x} is below the ferromagnetic onset; Tc = 0 K");
        }
        return Ok(0.0);
    }
    Ok(CUNI_TC_PURE_NI_K * (x - CUNI_X_ONSET) / (1.0 - CUNI_X_ONSET))
}

/// Brillouin function `B_J(x)`.
pub fn brillouin(spin_j: f64, x: f64) -> f64 {
    if spin_j == 0.5 {
        return x.tanh();
    }
    let a = (2.0 * spin_j + 1.0) / (2.0 * spin_j);
    let b = 1.0 / (2.0 * spin_j);
    if x.abs() < 1e-4 {
        // coth(y) = 1/y + y/3 - y^3/45 + ...
        return (a * a - b * b) * x / 3.0 - (a.powi(4) - b.powi(4)) * x.powi(3) / 45.0;
    }
    a / (a * x).tanh() - b / (b * x).tanh()
}

/// Stable root of `m = B_J(3J/(J+1) * m * Tc/T)`; zero at and above `Tc`.
pub fn solve_magnetization(mag: &Magnet, temp: f64) -> Result<f64> {
    solve_mean_field(mag.spin_j, mag.tc, temp, MeanFieldSolver::default())
}

pub fn solve_mean_field(spin_j: f64, tc: f64, temp: f64, solver: MeanFieldSolver) -> Result<f64> {
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {temp} K")));
    }
    if temp >= tc {
        return Ok(0.0);
    }
    let coupling = 3.0 * spin_j / (spin_j + 1.0) * tc / temp;
    let residual = |m: f64| brillouin(spin_j, coupling * m) - m;

    let (mut lo, mut hi) = (M_FLOOR, 1.0);
    if residual(lo) <= 0.0 {
        // Closer to Tc than the bracket floor resolves.
        return Ok(0.0);
    }
    if residual(hi) >= 0.0 {
        return Ok(1.0);
    }
    for _ in 0..solver.max_iterations {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= solver.tolerance {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::NonConvergence {
        iterations: solver.max_iterations,
        lo,
        hi,
    })
}

/// Temperature derivative of the reduced magnetization (1/K).
///
/// Central difference away from `Tc`; when the stencil straddles `Tc` the
/// backward difference is used so the derivative stays on the ordered side.
pub fn dm_dtemp(mag: &Magnet, temp: f64, dt_step: f64) -> Result<f64> {
    if !(dt_step > 0.0) {
        return Err(Error::Domain(format!("dt_step must be positive, got {dt_step}")));
    }
    let m = |t: f64| solve_magnetization(mag, t);
    if temp - dt_step >= mag.tc {
        return Ok(0.0);
    }
    if temp + dt_step >= mag.tc {
        return Ok((m(temp)? - m(temp - dt_step)?) / dt_step);
    }
    Ok((m(temp + dt_step)? - m(temp - dt_step)?) / (2.0 * dt_step))
}

/// `m_sat * m(T) * (4/3) pi r^3` along the easy axis.
pub fn magnetic_moment(mag: &Magnet, temp: f64) -> Result<Vector3<f64>> {
    let m = solve_magnetization(mag, temp)?;
    Ok(mag.easy_axis * (mag.m_sat * m * mag.volume()))
}

/// Point-dipole field `mu0/4pi [3 (m.r) r - m r^2] / r^5` (T).
pub fn dipole_field(
    moment: &Vector3<f64>,
    source: &Vector3<f64>,
    observer: &Vector3<f64>,
    min_distance: f64,
) -> Result<Vector3<f64>> {
    let r = observer - source;
    let dist = r.norm();
    if !(dist > 0.0) || dist < min_distance {
        return Err(Error::Geometry(format!(
            "observer is {dist:.3e} m from the dipole, inside the exclusion radius {min_distance:.3e} m"
        )));
    }
    let r2 = dist * dist;
    Ok((r * (3.0 * moment.dot(&r)) - moment * r2) * (MU0 / (4.0 * PI) / (r2 * r2 * dist)))
}

/// Magnetization and its temperature derivative sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationCurve {
    pub temps: Vec<f64>,
    pub reduced_m: Vec<f64>,
    pub dm_dt: Vec<f64>,
}

impl MagnetizationCurve {
    pub fn compute(mag: &Magnet, temps: &[f64], dt_step: f64) -> Result<Self> {
        let rows = temps
            .par_iter()
            .map(|&t| Ok((solve_magnetization(mag, t)?, dm_dtemp(mag, t, dt_step)?)))
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let (reduced_m, dm_dt) = rows.into_iter().unzip();
        Ok(Self {
            temps: temps.to_vec(),
            reduced_m,
            dm_dt,
        })
    }
}
