//! Reference configurations: the millimetre Gd demonstration, the CuNi
//! nano-sensor and the single-NV nano-pillar.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{unit, NvSite, SensorAssembly, DEFAULT_MAGNET_RADIUS_M};
use crate::error::{ensure, Result};
use crate::magnet::Magnet;
use crate::materials::MaterialTable;
use crate::sensitivity::{optimal_ramsey, RamseyParams, DEFAULT_RAMSEY_CONTRAST};
use crate::spin::{domega_dtemp, SpinSystem};

/// Net magnetization of the bulk Gd grain as a fraction of saturation. The
/// millimetre grain is multi-domain, so only part of the moment is aligned.
pub const GD_NET_FRACTION: f64 = 0.1;
/// Temperature resolution of a susceptibility measurement (K): derivatives
/// are central differences over `T +- resolution`.
pub const DEFAULT_RESOLUTION_K: f64 = 0.5;
/// Ni fraction and measured Curie point of the nano-sensor particle.
pub const NANO_SENSOR_X: f64 = 0.74;
pub const NANO_SENSOR_TC_K: f64 = 340.0;
/// Operating point of the tracking experiment, 63 degC.
pub const NANO_SENSOR_T0_K: f64 = 336.15;
/// Particle radius and surface gap of the tracking nano-sensor (m).
pub const NANO_SENSOR_MAGNET_RADIUS_M: f64 = 50e-9;
pub const NANO_SENSOR_GAP_M: f64 = 90e-9;

/// A single NV in a fixed field geometry next to one particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleNvProbe {
    pub magnet: Magnet,
    pub nv_position: Vector3<f64>,
    pub nv_axis: Vector3<f64>,
    pub bias_field: Vector3<f64>,
    pub spin: SpinSystem,
    pub resolution_k: f64,
}

/// One row of a susceptibility scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Susceptibility {
    pub temp: f64,
    pub omega_minus: f64,
    pub omega_plus: f64,
    pub domega_minus_dt: f64,
    pub domega_plus_dt: f64,
}

impl Susceptibility {
    pub fn peak(&self) -> f64 {
        self.domega_minus_dt.abs().max(self.domega_plus_dt.abs())
    }
}

impl SingleNvProbe {
    fn site(&self) -> NvSite {
        NvSite {
            position: self.nv_position,
            axis: self.nv_axis,
            strain_e: self.spin.strain_e,
        }
    }

    /// NV-frame field at `temp` (T).
    pub fn field(&self, temp: f64) -> Result<Vector3<f64>> {
        let lab = self.magnet.field_at(temp, &self.nv_position)? + self.bias_field;
        Ok(self.site().to_nv_frame(&lab))
    }

    pub fn susceptibility(&self, temp: f64) -> Result<Susceptibility> {
        let levels = self.spin.with_field(self.field(temp)?).transition_frequencies(temp)?;
        let (dm, dp) = domega_dtemp(&self.spin, |t| self.field(t), temp, self.resolution_k)?;
        Ok(Susceptibility {
            temp,
            omega_minus: levels.omega_minus,
            omega_plus: levels.omega_plus,
            domega_minus_dt: dm,
            domega_plus_dt: dp,
        })
    }

    pub fn scan(&self, temps: &[f64]) -> Result<Vec<Susceptibility>> {
        temps.par_iter().map(|&t| self.susceptibility(t)).collect()
    }

    /// Largest `|d omega / dT|` on a 10 mK grid from `Tc - 5 K` to `Tc + 1 K`.
    pub fn peak_susceptibility(&self) -> Result<Susceptibility> {
        let tc = self.magnet.tc;
        let temps: Vec<f64> = (0..=600).map(|i| tc - 5.0 + 0.01 * i as f64).collect();
        let rows = self.scan(&temps)?;
        Ok(rows
            .into_iter()
            .max_by(|a, b| a.peak().total_cmp(&b.peak()))
            .expect("non-empty scan"))
    }

    /// Peak susceptibility relative to the bare `|dD/dT|`.
    pub fn enhancement(&self) -> Result<f64> {
        ensure(self.spin.dd_dt != 0.0, || "bare dD/dT is zero".into())?;
        Ok(self.peak_susceptibility()?.peak() / self.spin.dd_dt.abs())
    }
}

/// A 2 mm Gd grain with a single NV 2 mm from its surface on the easy axis,
/// in a 10 mT field along the NV axis.
pub fn gd_proof_of_principle() -> Result<SingleNvProbe> {
    let gd = MaterialTable::builtin().get("gd")?.clone();
    let axis = Vector3::z();
    let mut magnet = gd.magnet(None, 1e-3, Vector3::zeros(), axis)?;
    magnet.m_sat *= GD_NET_FRACTION;
    Ok(SingleNvProbe {
        magnet,
        nv_position: Vector3::new(0.0, 0.0, 3e-3),
        nv_axis: axis,
        bias_field: axis * 10e-3,
        spin: SpinSystem::default(),
        resolution_k: DEFAULT_RESOLUTION_K,
    })
}

/// CuNi particle of composition `x` at the origin, magnetized along `z`.
pub fn cuni_magnet(x: f64) -> Result<Magnet> {
    MaterialTable::builtin()
        .get("cuni")?
        .magnet(Some(x), DEFAULT_MAGNET_RADIUS_M, Vector3::zeros(), Vector3::z())
}

/// The reference nanodiamond next to a CuNi particle of composition `x`.
pub fn cuni_design_point(x: f64, seed: u64) -> Result<SensorAssembly> {
    Ok(SensorAssembly::design_point(Some(cuni_magnet(x)?), seed))
}

/// The tracking nano-sensor: a 100 nm x = 0.74 particle with the measured
/// 340 K Curie point (the linear composition law places it a few kelvin
/// lower), 90 nm from the standard nanodiamond.
pub fn nano_sensor(seed: u64) -> Result<SensorAssembly> {
    let mut magnet = cuni_magnet(NANO_SENSOR_X)?;
    magnet.tc = NANO_SENSOR_TC_K;
    magnet.composition_x = None;
    magnet.radius = NANO_SENSOR_MAGNET_RADIUS_M;
    let mut asm = SensorAssembly::design_point(Some(magnet), seed);
    asm.fnd_center = Vector3::new(
        0.0,
        0.0,
        NANO_SENSOR_MAGNET_RADIUS_M + NANO_SENSOR_GAP_M + asm.fnd_radius,
    );
    Ok(asm)
}

/// A 200 nm particle on a diamond pillar, single NV 25 nm below the surface
/// on the pillar axis.
pub fn nano_pillar() -> Result<SingleNvProbe> {
    let mut magnet = cuni_magnet(NANO_SENSOR_X)?;
    magnet.tc = NANO_SENSOR_TC_K;
    magnet.composition_x = None;
    let axis = unit(Vector3::z())?;
    Ok(SingleNvProbe {
        nv_position: Vector3::new(0.0, 0.0, -(magnet.radius + 25e-9)),
        magnet,
        nv_axis: axis,
        bias_field: Vector3::zeros(),
        spin: SpinSystem::default(),
        resolution_k: DEFAULT_RESOLUTION_K,
    })
}

/// Single-NV Ramsey parameters for the pillar at its peak susceptibility.
pub fn pillar_ramsey(t2_star: f64) -> Result<(RamseyParams, f64, f64)> {
    let peak = nano_pillar()?.peak_susceptibility()?;
    let params = RamseyParams::new(1.7e6, DEFAULT_RAMSEY_CONTRAST, t2_star, peak.peak());
    let (tau, eta) = optimal_ramsey(&params)?;
    Ok((params, tau, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_enhancement_is_in_the_hundreds() {
        let probe = gd_proof_of_principle().unwrap();
        let peak = probe.peak_susceptibility().unwrap();
        // Sits one resolution step below Tc, where m(T + h) vanishes.
        assert!(
            (peak.temp - (probe.magnet.tc - probe.resolution_k)).abs() < 0.05,
            "{}",
            peak.temp
        );
        let ratio = probe.enhancement().unwrap();
        assert!((100.0..=400.0).contains(&ratio), "{ratio}");
        // Far above Tc only D(T) moves.
        let hot = probe.susceptibility(probe.magnet.tc + 20.0).unwrap();
        assert!((hot.domega_minus_dt + 74e3).abs() < 1.0 && (hot.domega_plus_dt + 74e3).abs() < 1.0);
    }

    #[test]
    fn nano_sensor_is_below_its_curie_point_at_63_c() {
        let asm = nano_sensor(1).unwrap();
        asm.validate().unwrap();
        assert!(asm.magnet.as_ref().unwrap().tc > NANO_SENSOR_T0_K);
        assert!((asm.gap().unwrap() - NANO_SENSOR_GAP_M).abs() < 1e-15);
    }

    #[test]
    fn pillar_reaches_microkelvin() {
        let (params, tau, eta) = pillar_ramsey(10e-6).unwrap();
        assert!((tau / 5e-6 - 1.0).abs() < 2e-3);
        assert!(params.domega_dt > 1e8);
        assert!(eta > 0.2e-6 && eta < 5e-6, "{eta}");
    }
}
