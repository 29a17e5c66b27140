//! NV ensemble sampling and CW ODMR spectrum synthesis.
//!
//! Every NV contributes two unit-peak Lorentzians, one per transition, each
//! weighted by `contrast / (2 n_nv)`. The signal therefore never drops below
//! `1 - contrast`, and reaches it only when all lines coincide.

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::magnet::Magnet;
use crate::spin::SpinSystem;

/// Default ensemble parameters for a fluorescent nanodiamond.
pub const DEFAULT_N_NV: usize = 500;
pub const DEFAULT_FND_RADIUS_M: f64 = 50e-9;
pub const DEFAULT_GAP_M: f64 = 50e-9;
pub const DEFAULT_MAGNET_RADIUS_M: f64 = 100e-9;
pub const DEFAULT_STRAIN_MEAN_HZ: f64 = 4e6;
pub const DEFAULT_STRAIN_SD_HZ: f64 = 2e6;
pub const DEFAULT_LINE_WIDTH_HZ: f64 = 8e6;
pub const DEFAULT_CONTRAST: f64 = 0.2;
pub const DEFAULT_PHOTON_RATE: f64 = 12e6;
/// Default step for spectrum temperature derivatives (K).
pub const DEFAULT_SLOPE_DT_K: f64 = 10e-3;

/// The four NV symmetry axes in the diamond crystal frame (unnormalized).
const NV_AXES: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

/// RNG stream reserved for the crystal orientation; sites use `1 + index`.
const ORIENTATION_STREAM: u64 = 0;

/// Rotation taking the nanodiamond crystal frame to the lab frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CrystalOrientation {
    Identity,
    /// Intrinsic roll/pitch/yaw angles (rad), as in `Rotation3::from_euler_angles`.
    Euler {
        roll: f64,
        pitch: f64,
        yaw: f64,
    },
    /// Uniformly random rotation drawn from the assembly seed.
    Random,
}

impl CrystalOrientation {
    pub fn rotation(&self, seed: u64) -> Rotation3<f64> {
        match *self {
            CrystalOrientation::Identity => Rotation3::identity(),
            CrystalOrientation::Euler { roll, pitch, yaw } => Rotation3::from_euler_angles(roll, pitch, yaw),
            CrystalOrientation::Random => {
                let mut rng = site_rng(seed, ORIENTATION_STREAM);
                // Normalized 4-d Gaussian gives a uniform unit quaternion.
                let n = Normal::new(0.0, 1.0).expect("unit normal");
                let q = nalgebra::Quaternion::new(
                    n.sample(&mut rng),
                    n.sample(&mut rng),
                    n.sample(&mut rng),
                    n.sample(&mut rng),
                );
                UnitQuaternion::from_quaternion(q).to_rotation_matrix()
            }
        }
    }
}

/// A nanodiamond next to an optional magnetic particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorAssembly {
    /// `None` models a bare nanodiamond.
    pub magnet: Option<Magnet>,
    pub fnd_center: Vector3<f64>,
    pub fnd_radius: f64,
    pub n_nv: usize,
    pub crystal_orientation: CrystalOrientation,
    /// Mean and spread of the transverse strain E (Hz).
    pub strain_mean: f64,
    pub strain_sd: f64,
    /// Intrinsic FWHM of every line (Hz).
    pub line_width: f64,
    pub contrast: f64,
    /// Total detected photon rate (counts/s).
    pub photon_rate: f64,
    pub rng_seed: u64,
    /// Uniform applied field in the lab frame (T).
    pub bias_field: Vector3<f64>,
    /// Spin constants; per-site field and strain replace the template's.
    pub spin: SpinSystem,
}

impl SensorAssembly {
    /// The reference design: a 200 nm particle at the origin, a 100 nm
    /// nanodiamond 50 nm away along `+z`, 500 NV centres.
    pub fn design_point(magnet: Option<Magnet>, rng_seed: u64) -> Self {
        let center_distance = DEFAULT_MAGNET_RADIUS_M + DEFAULT_GAP_M + DEFAULT_FND_RADIUS_M;
        Self {
            magnet,
            fnd_center: Vector3::new(0.0, 0.0, center_distance),
            fnd_radius: DEFAULT_FND_RADIUS_M,
            n_nv: DEFAULT_N_NV,
            crystal_orientation: CrystalOrientation::Random,
            strain_mean: DEFAULT_STRAIN_MEAN_HZ,
            strain_sd: DEFAULT_STRAIN_SD_HZ,
            line_width: DEFAULT_LINE_WIDTH_HZ,
            contrast: DEFAULT_CONTRAST,
            photon_rate: DEFAULT_PHOTON_RATE,
            rng_seed,
            bias_field: Vector3::zeros(),
            spin: SpinSystem::default(),
        }
    }

    /// Surface-to-surface distance between the two particles (m).
    pub fn gap(&self) -> Option<f64> {
        self.magnet
            .as_ref()
            .map(|m| (self.fnd_center - m.center).norm() - self.fnd_radius - m.radius)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_nv >= 1, || "n_nv must be at least 1".into())?;
        ensure(self.contrast > 0.0 && self.contrast < 1.0, || {
            format!("contrast must lie in (0, 1), got {}", self.contrast)
        })?;
        ensure(self.line_width > 0.0, || {
            format!("line_width must be positive, got {}", self.line_width)
        })?;
        ensure(self.photon_rate > 0.0, || {
            format!("photon_rate must be positive, got {}", self.photon_rate)
        })?;
        ensure(self.fnd_radius > 0.0, || {
            format!("fnd_radius must be positive, got {}", self.fnd_radius)
        })?;
        ensure(self.strain_mean >= 0.0 && self.strain_sd >= 0.0, || {
            "strain_mean and strain_sd must be non-negative".into()
        })?;
        self.spin.validate()?;
        if let Some(m) = &self.magnet {
            m.validate()?;
            let gap = self.gap().unwrap_or_default();
            if gap < 0.0 {
                return Err(Error::Geometry(format!(
                    "nanodiamond and magnet overlap (surface gap {gap:.3e} m)"
                )));
            }
        }
        Ok(())
    }
}

/// One NV centre in the lab frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvSite {
    pub position: Vector3<f64>,
    /// Unit NV symmetry axis.
    pub axis: Vector3<f64>,
    /// Transverse strain E (Hz).
    pub strain_e: f64,
}

impl NvSite {
    /// Expresses a lab-frame vector in this NV's frame (z along the axis).
    pub fn to_nv_frame(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (ex, ey) = perpendicular_basis(&self.axis);
        Vector3::new(v.dot(&ex), v.dot(&ey), v.dot(&self.axis))
    }
}

fn perpendicular_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let ex = (helper - n * helper.dot(n)).normalize();
    (ex, n.cross(&ex))
}

fn site_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lab-frame NV axes of a crystal with the given orientation.
pub fn nv_axes(rotation: &Rotation3<f64>) -> [Vector3<f64>; 4] {
    NV_AXES.map(|a| rotation * Vector3::new(a[0], a[1], a[2]).normalize())
}

/// Draws the NV sites. Each site uses its own RNG stream derived from the
/// seed, so the result does not depend on evaluation order.
pub fn sample_ensemble(asm: &SensorAssembly) -> Result<Vec<NvSite>> {
    asm.validate()?;
    let axes = nv_axes(&asm.crystal_orientation.rotation(asm.rng_seed));
    let strain = if asm.strain_sd > 0.0 {
        Some(Normal::new(asm.strain_mean, asm.strain_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };
    Ok((0..asm.n_nv)
        .into_par_iter()
        .map(|i| {
            let mut rng = site_rng(asm.rng_seed, 1 + i as u64);
            let u: [f64; 3] = UnitBall.sample(&mut rng);
            let position = asm.fnd_center + Vector3::from(u) * asm.fnd_radius;
            let axis = axes[rng.random_range(0..4)];
            let strain_e = match &strain {
                // Truncated at zero by rejection; acceptance is >= 1/2 for a
                // non-negative mean.
                Some(dist) => loop {
                    let e = dist.sample(&mut rng);
                    if e >= 0.0 {
                        break e;
                    }
                },
                None => asm.strain_mean,
            };
            NvSite {
                position,
                axis,
                strain_e,
            }
        })
        .collect())
}

/// Unit-peak Lorentzian with full width at half maximum `fwhm`.
#[inline]
pub fn lorentzian(freq: f64, center: f64, fwhm: f64) -> f64 {
    let u = 2.0 * (freq - center) / fwhm;
    1.0 / (1.0 + u * u)
}

/// Per-spectrum metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub temp: f64,
    /// `(omega_minus, omega_plus)` of every site (Hz).
    pub centers: Vec<(f64, f64)>,
    pub line_width: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdmrSpectrum {
    pub freqs: Vec<f64>,
    pub signal: Vec<f64>,
    pub meta: SpectrumMeta,
}

impl OdmrSpectrum {
    /// `1 - min S` on the grid.
    pub fn effective_contrast(&self) -> f64 {
        1.0 - self.signal.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Full width at half depth of the deepest dip, measured on the grid.
    pub fn effective_width(&self) -> f64 {
        let Some((imin, smin)) = self
            .signal
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            return 0.0;
        };
        let half = 1.0 - 0.5 * (1.0 - smin);
        let mut lo = imin;
        while lo > 0 && self.signal[lo - 1] <= half {
            lo -= 1;
        }
        let mut hi = imin;
        while hi + 1 < self.signal.len() && self.signal[hi + 1] <= half {
            hi += 1;
        }
        self.freqs[hi] - self.freqs[lo]
    }

    /// Standard deviation of the lower and upper transition centres (Hz).
    pub fn center_spread(&self) -> (f64, f64) {
        let sd = |vals: Vec<f64>| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        (
            sd(self.meta.centers.iter().map(|c| c.0).collect()),
            sd(self.meta.centers.iter().map(|c| c.1).collect()),
        )
    }
}

/// An assembly with its NV sites drawn once, so that spectra at different
/// temperatures share the same ensemble.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub assembly: SensorAssembly,
    pub sites: Vec<NvSite>,
}

impl Ensemble {
    pub fn new(assembly: SensorAssembly) -> Result<Self> {
        let sites = sample_ensemble(&assembly)?;
        Ok(Self { assembly, sites })
    }

    pub fn from_sites(assembly: SensorAssembly, sites: Vec<NvSite>) -> Result<Self> {
        assembly.validate()?;
        ensure(!sites.is_empty(), || "ensemble needs at least one site".into())?;
        Ok(Self { assembly, sites })
    }

    /// Lab-frame field at every site (T).
    pub fn fields(&self, temp: f64) -> Result<Vec<Vector3<f64>>> {
        let bias = self.assembly.bias_field;
        match &self.assembly.magnet {
            None => Ok(vec![bias; self.sites.len()]),
            Some(mag) => {
                let moment = mag.moment(temp)?;
                self.sites
                    .iter()
                    .map(|s| Ok(crate::magnet::dipole_field(&moment, &mag.center, &s.position, mag.radius)? + bias))
                    .collect()
            }
        }
    }

    /// `(omega_minus, omega_plus)` for every site (Hz).
    pub fn line_centers(&self, temp: f64) -> Result<Vec<(f64, f64)>> {
        let fields = self.fields(temp)?;
        self.sites
            .par_iter()
            .zip(fields.par_iter())
            .map(|(site, b)| {
                let lv = self
                    .assembly
                    .spin
                    .with_strain(site.strain_e)
                    .with_field(site.to_nv_frame(b))
                    .transition_frequencies(temp)?;
                Ok((lv.omega_minus, lv.omega_plus))
            })
            .collect()
    }

    /// Normalized signal at arbitrary (unsorted) frequencies.
    pub fn signal_at(&self, temp: f64, freqs: &[f64]) -> Result<Vec<f64>> {
        let centers = self.line_centers(temp)?;
        Ok(self.signal_from_centers(&centers, freqs))
    }

    fn signal_from_centers(&self, centers: &[(f64, f64)], freqs: &[f64]) -> Vec<f64> {
        let w = self.assembly.line_width;
        let weight = self.assembly.contrast / (2.0 * centers.len() as f64);
        freqs
            .par_iter()
            .map(|&f| {
                let dip: f64 = centers
                    .iter()
                    .map(|&(lo, hi)| lorentzian(f, lo, w) + lorentzian(f, hi, w))
                    .sum();
                1.0 - weight * dip
            })
            .collect()
    }

    /// Spectrum on an ascending frequency grid.
    pub fn spectrum(&self, temp: f64, freqs: &[f64]) -> Result<OdmrSpectrum> {
        check_grid(freqs)?;
        let centers = self.line_centers(temp)?;
        let signal = self.signal_from_centers(&centers, freqs);
        Ok(OdmrSpectrum {
            freqs: freqs.to_vec(),
            signal,
            meta: SpectrumMeta {
                temp,
                centers,
                line_width: self.assembly.line_width,
                contrast: self.assembly.contrast,
            },
        })
    }

    /// Central difference `dS/dT` on the grid, with the same sites at both
    /// temperatures.
    pub fn signal_slope(&self, temp: f64, freqs: &[f64], dt_step: f64) -> Result<Vec<f64>> {
        if !(dt_step > 0.0) {
            return Err(Error::Domain(format!("dt_step must be positive, got {dt_step}")));
        }
        let hi = self.signal_at(temp + dt_step, freqs)?;
        let lo = self.signal_at(temp - dt_step, freqs)?;
        Ok(hi.iter().zip(&lo).map(|(h, l)| (h - l) / (2.0 * dt_step)).collect())
    }

    /// Uniform grid covering every line centre at `temp` with `margin_widths`
    /// line widths on either side.
    pub fn frequency_grid(&self, temp: f64, margin_widths: f64, step: f64) -> Result<Vec<f64>> {
        let centers = self.line_centers(temp)?;
        let (lo, hi) = centers.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.0), hi.max(c.1))
        });
        let margin = margin_widths * self.assembly.line_width;
        Ok(uniform_grid(lo - margin, hi + margin, step))
    }
}

/// Ascending grid from `start` to at least `stop` with spacing `step`.
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).ceil().max(0.0) as usize + 1;
    (0..n).map(|i| start + step * i as f64).collect()
}

pub(crate) fn check_grid(freqs: &[f64]) -> Result<()> {
    ensure(!freqs.is_empty(), || "frequency grid is empty".into())?;
    ensure(freqs.windows(2).all(|w| w[1] > w[0]), || {
        "frequency grid must be strictly ascending".into()
    })
}

/// Samples the assembly and returns the spectrum at `temp`.
pub fn synthesize_spectrum(asm: &SensorAssembly, temp: f64, freqs: &[f64]) -> Result<OdmrSpectrum> {
    Ensemble::new(asm.clone())?.spectrum(temp, freqs)
}

/// `dS/dT` (1/K) on the grid using common random numbers at `temp ± dt_step`.
pub fn signal_temperature_slope(asm: &SensorAssembly, temp: f64, freqs: &[f64], dt_step: f64) -> Result<Vec<f64>> {
    check_grid(freqs)?;
    Ensemble::new(asm.clone())?.signal_slope(temp, freqs, dt_step)
}

/// Orientation helper used by scenario builders: a unit axis from a vector.
pub fn unit(v: Vector3<f64>) -> Result<Vector3<f64>> {
    Unit::try_new(v, 1e-300)
        .map(|u| u.into_inner())
        .ok_or_else(|| Error::InvalidParameter("zero-length direction".into()))
}
