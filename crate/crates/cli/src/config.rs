//! Scenario files: typed TOML with unit-suffixed keys. Unknown keys are
//! errors. See `docs/scenario-format.md` for the grammar.

use std::path::Path;

use hybridtherm_core::ensemble::{
    CrystalOrientation, SensorAssembly, DEFAULT_CONTRAST, DEFAULT_FND_RADIUS_M, DEFAULT_GAP_M, DEFAULT_LINE_WIDTH_HZ,
    DEFAULT_MAGNET_RADIUS_M, DEFAULT_N_NV, DEFAULT_PHOTON_RATE, DEFAULT_SLOPE_DT_K, DEFAULT_STRAIN_MEAN_HZ,
    DEFAULT_STRAIN_SD_HZ,
};
use hybridtherm_core::magnet::Magnet;
use hybridtherm_core::materials::MaterialTable;
use hybridtherm_core::sensitivity::{DEFAULT_RAMSEY_CONTRAST, DEFAULT_RAMSEY_READOUT_S};
use hybridtherm_core::spin::{SpinSystem, D0_HZ, DD_DT_HZ_PER_K, GAMMA_HZ_PER_T, T_REF_K};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Magnetize,
    Spectrum,
    Susceptibility,
    Sensitivity,
    DesignSweep,
    ShotNoise,
    Track,
}

impl Kind {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Kind::Magnetize | Kind::Susceptibility)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Magnetize => "magnetize",
            Kind::Spectrum => "spectrum",
            Kind::Susceptibility => "susceptibility",
            Kind::Sensitivity => "sensitivity",
            Kind::DesignSweep => "design-sweep",
            Kind::ShotNoise => "shot-noise",
            Kind::Track => "track",
        }
    }
}

/// Either an explicit list or `{ start, stop, step }` (stop inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Range { start: f64, stop: f64, step: f64 },
    List(Vec<f64>),
}

impl Grid {
    pub fn values(&self, field: &str) -> Result<Vec<f64>, CliError> {
        let vals = match *self {
            Grid::List(ref v) => v.clone(),
            Grid::Range { start, stop, step } => {
                if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
                    return Err(schema(format!("{field}: need finite start <= stop and step > 0")));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                // Round away accumulated float noise (0.6000000000000001).
                (0..=n)
                    .map(|i| {
                        let v = start + step * i as f64;
                        format!("{v:.12e}").parse::<f64>().expect("formatted float parses")
                    })
                    .collect()
            }
        };
        if vals.is_empty() {
            return Err(schema(format!("{field}: grid is empty")));
        }
        if !vals.windows(2).all(|w| w[1] > w[0]) {
            return Err(schema(format!("{field}: values must be strictly ascending")));
        }
        Ok(vals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Orientation {
    Named(NamedOrientation),
    Euler {
        roll_rad: f64,
        pitch_rad: f64,
        yaw_rad: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedOrientation {
    Random,
    Identity,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::Named(NamedOrientation::Random)
    }
}

impl Orientation {
    fn to_core(&self) -> CrystalOrientation {
        match *self {
            Orientation::Named(NamedOrientation::Random) => CrystalOrientation::Random,
            Orientation::Named(NamedOrientation::Identity) => CrystalOrientation::Identity,
            Orientation::Euler {
                roll_rad,
                pitch_rad,
                yaw_rad,
            } => CrystalOrientation::Euler {
                roll: roll_rad,
                pitch: pitch_rad,
                yaw: yaw_rad,
            },
        }
    }
}

fn default_material() -> String {
    "cuni".into()
}
fn default_magnet_radius() -> f64 {
    DEFAULT_MAGNET_RADIUS_M
}
fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetCfg {
    #[serde(default = "default_material")]
    pub material: String,
    pub composition_x: Option<f64>,
    /// Overrides the table or composition law.
    pub tc_k: Option<f64>,
    pub m_sat_apm: Option<f64>,
    pub spin_j: Option<f64>,
    #[serde(default = "default_magnet_radius")]
    pub radius_m: f64,
    #[serde(default)]
    pub center_m: [f64; 3],
    #[serde(default = "z_axis")]
    pub easy_axis: [f64; 3],
}

impl Default for MagnetCfg {
    fn default() -> Self {
        Self {
            material: default_material(),
            composition_x: None,
            tc_k: None,
            m_sat_apm: None,
            spin_j: None,
            radius_m: DEFAULT_MAGNET_RADIUS_M,
            center_m: [0.0; 3],
            easy_axis: z_axis(),
        }
    }
}

impl MagnetCfg {
    /// Builds the particle; `x` replaces `composition_x` in sweeps.
    pub fn build(&self, x: Option<f64>) -> Result<Magnet, CliError> {
        let table = MaterialTable::builtin();
        let material = table
            .get(&self.material)
            .map_err(|e| schema(format!("magnet.material: {e}")))?;
        let x = x.or(self.composition_x);
        if material.is_composition_tuned() && x.is_none() {
            return Err(schema(format!(
                "magnet.composition_x is required for {}",
                self.material
            )));
        }
        if !material.is_composition_tuned() && x.is_some() {
            return Err(schema(format!(
                "magnet.composition_x does not apply to {}",
                self.material
            )));
        }
        let axis = Vector3::from(self.easy_axis);
        if !(axis.norm() > 0.0) {
            return Err(schema("magnet.easy_axis must be non-zero".into()));
        }
        let mut mag = material.magnet(x, self.radius_m, Vector3::from(self.center_m), axis.normalize())?;
        if let Some(tc) = self.tc_k {
            mag.tc = tc;
            mag.composition_x = None;
        }
        if let Some(m) = self.m_sat_apm {
            mag.m_sat = m;
        }
        if let Some(j) = self.spin_j {
            mag.spin_j = j;
        }
        mag.validate()?;
        Ok(mag)
    }
}

fn d_fnd_radius() -> f64 {
    DEFAULT_FND_RADIUS_M
}
fn d_n_nv() -> usize {
    DEFAULT_N_NV
}
fn d_strain_mean() -> f64 {
    DEFAULT_STRAIN_MEAN_HZ
}
fn d_strain_sd() -> f64 {
    DEFAULT_STRAIN_SD_HZ
}
fn d_line_width() -> f64 {
    DEFAULT_LINE_WIDTH_HZ
}
fn d_contrast() -> f64 {
    DEFAULT_CONTRAST
}
fn d_photon_rate() -> f64 {
    DEFAULT_PHOTON_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyCfg {
    #[serde(default = "d_fnd_radius")]
    pub fnd_radius_m: f64,
    /// Surface gap, with the nanodiamond placed along the easy axis. Ignored
    /// when `fnd_center_m` is given.
    pub gap_m: Option<f64>,
    pub fnd_center_m: Option<[f64; 3]>,
    #[serde(default = "d_n_nv")]
    pub n_nv: usize,
    #[serde(default = "d_strain_mean")]
    pub strain_mean_hz: f64,
    #[serde(default = "d_strain_sd")]
    pub strain_sd_hz: f64,
    #[serde(default = "d_line_width")]
    pub line_width_hz: f64,
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    #[serde(default = "d_photon_rate")]
    pub photon_rate_cps: f64,
    #[serde(default)]
    pub bias_field_t: [f64; 3],
    #[serde(default)]
    pub orientation: Orientation,
}

impl Default for AssemblyCfg {
    fn default() -> Self {
        toml::from_str("").expect("all assembly fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinCfg {
    pub d0_hz: f64,
    pub dd_dt_hz_per_k: f64,
    pub t_ref_k: f64,
    pub gamma_hz_per_t: f64,
    /// Strain of a single probe NV; ensembles draw their own.
    pub strain_e_hz: f64,
}

impl Default for SpinCfg {
    fn default() -> Self {
        Self {
            d0_hz: D0_HZ,
            dd_dt_hz_per_k: DD_DT_HZ_PER_K,
            t_ref_k: T_REF_K,
            gamma_hz_per_t: GAMMA_HZ_PER_T,
            strain_e_hz: 0.0,
        }
    }
}

impl SpinCfg {
    pub fn build(&self) -> Result<SpinSystem, CliError> {
        let sys = SpinSystem {
            d0: self.d0_hz,
            t_ref: self.t_ref_k,
            dd_dt: self.dd_dt_hz_per_k,
            strain_e: self.strain_e_hz,
            gamma: self.gamma_hz_per_t,
            field: Vector3::zeros(),
        };
        sys.validate()?;
        Ok(sys)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub temp_k: Option<Grid>,
    pub freq_hz: Option<Grid>,
    pub composition: Option<Grid>,
}

fn d_dt_step() -> f64 {
    DEFAULT_SLOPE_DT_K
}
fn d_margin() -> f64 {
    10.0
}
fn d_step_widths() -> f64 {
    1.0 / 16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumCfg {
    pub temp_k: f64,
    #[serde(default = "d_dt_step")]
    pub dt_step_k: f64,
    /// Used only when `grid.freq_hz` is absent.
    #[serde(default = "d_margin")]
    pub margin_widths: f64,
    #[serde(default = "d_step_widths")]
    pub step_widths: f64,
}

fn d_resolution() -> f64 {
    hybridtherm_core::scenarios::DEFAULT_RESOLUTION_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCfg {
    pub position_m: [f64; 3],
    #[serde(default = "z_axis")]
    pub axis: [f64; 3],
    #[serde(default)]
    pub bias_field_t: [f64; 3],
    #[serde(default = "d_resolution")]
    pub resolution_k: f64,
}

fn d_ramsey_contrast() -> f64 {
    DEFAULT_RAMSEY_CONTRAST
}
fn d_ramsey_readout() -> f64 {
    DEFAULT_RAMSEY_READOUT_S
}
fn d_dwell() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityCfg {
    pub temp_k: f64,
    #[serde(default = "d_dwell")]
    pub dwell_s: f64,
    pub t2_star_s: Option<f64>,
    /// Defaults to the assembly photon rate.
    pub ramsey_photon_rate_cps: Option<f64>,
    #[serde(default = "d_ramsey_contrast")]
    pub ramsey_contrast: f64,
    #[serde(default = "d_ramsey_readout")]
    pub ramsey_readout_s: f64,
}

fn d_span() -> f64 {
    20.0
}
fn d_temp_step() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    #[serde(default = "d_span")]
    pub span_k: f64,
    #[serde(default = "d_temp_step")]
    pub step_k: f64,
    #[serde(default = "d_step_widths")]
    pub step_widths: f64,
    #[serde(default = "d_margin")]
    pub margin_widths: f64,
    #[serde(default = "d_dt_step")]
    pub dt_step_k: f64,
}

impl Default for SweepCfg {
    fn default() -> Self {
        toml::from_str("").expect("all sweep fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolCfg {
    pub t0_k: f64,
    #[serde(default = "d_dwell")]
    pub dwell_s: f64,
    /// Probe frequencies; all three or none (chosen automatically).
    pub f1_hz: Option<f64>,
    pub f2_hz: Option<f64>,
    pub f_ref_hz: Option<f64>,
    #[serde(default = "d_dt_step")]
    pub calibration_dt_k: f64,
    #[serde(default = "d_step_widths")]
    pub step_widths: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotNoiseCfg {
    pub total_time_s: f64,
    pub windows_s: Grid,
    #[serde(default)]
    pub floor_sd_k: f64,
    pub floor_hold_s: Option<f64>,
}

fn d_bin() -> f64 {
    0.06
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackCfg {
    pub low_k: f64,
    pub high_k: f64,
    pub period_s: f64,
    #[serde(default = "d_bin")]
    pub bin_s: f64,
    pub duration_s: f64,
}

fn d_output() -> String {
    "result".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: Kind,
    pub seed: Option<u64>,
    /// Base name of the output files.
    #[serde(default = "d_output")]
    pub output: String,
    pub magnet: Option<MagnetCfg>,
    #[serde(default)]
    pub assembly: AssemblyCfg,
    #[serde(default)]
    pub spin: SpinCfg,
    #[serde(default)]
    pub grid: GridCfg,
    pub spectrum: Option<SpectrumCfg>,
    pub probe: Option<ProbeCfg>,
    pub sensitivity: Option<SensitivityCfg>,
    pub sweep: Option<SweepCfg>,
    pub protocol: Option<ProtocolCfg>,
    pub shot_noise: Option<ShotNoiseCfg>,
    pub track: Option<TrackCfg>,
}

pub fn schema(msg: String) -> CliError {
    CliError::Schema(msg)
}

fn require<'a, T>(opt: &'a Option<T>, field: &str, kind: Kind) -> Result<&'a T, CliError> {
    opt.as_ref()
        .ok_or_else(|| schema(format!("{field}: required for kind = \"{}\"", kind.name())))
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| schema(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| schema(format!("{}: {}", e.path(), e.inner().message())))
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, CliError> {
        serde_path_to_error::deserialize(value).map_err(|e| schema(format!("scenario.{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Schema-level checks and defaults for the sections `kind` needs.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let kind = self.kind;
        if kind.is_stochastic() && self.seed.is_none() {
            return Err(schema(format!(
                "seed: required for stochastic kind = \"{}\"",
                kind.name()
            )));
        }
        if self.output.is_empty() || self.output.contains(['/', '\\']) {
            return Err(schema("output: must be a plain file stem".into()));
        }
        for (name, grid) in [
            ("grid.temp_k", &self.grid.temp_k),
            ("grid.freq_hz", &self.grid.freq_hz),
            ("grid.composition", &self.grid.composition),
        ] {
            if let Some(g) = grid {
                g.values(name)?;
            }
        }
        match kind {
            Kind::Magnetize => {
                require(&self.magnet, "magnet", kind)?;
                require(&self.grid.temp_k, "grid.temp_k", kind)?;
            }
            Kind::Spectrum => {
                require(&self.spectrum, "spectrum", kind)?;
            }
            Kind::Susceptibility => {
                require(&self.magnet, "magnet", kind)?;
                require(&self.probe, "probe", kind)?;
                require(&self.grid.temp_k, "grid.temp_k", kind)?;
            }
            Kind::Sensitivity => {
                require(&self.sensitivity, "sensitivity", kind)?;
            }
            Kind::DesignSweep => {
                require(&self.grid.composition, "grid.composition", kind)?;
                self.magnet.get_or_insert_with(MagnetCfg::default);
                self.sweep.get_or_insert_with(SweepCfg::default);
            }
            Kind::ShotNoise => {
                let p = require(&self.protocol, "protocol", kind)?;
                let s = require(&self.shot_noise, "shot_noise", kind)?;
                check_probes(p)?;
                s.windows_s.values("shot_noise.windows_s")?;
                if s.floor_sd_k > 0.0 && s.floor_hold_s.is_none() {
                    return Err(schema("shot_noise.floor_hold_s: required when floor_sd_k > 0".into()));
                }
            }
            Kind::Track => {
                check_probes(require(&self.protocol, "protocol", kind)?)?;
                require(&self.track, "track", kind)?;
            }
        }
        Ok(self)
    }

    pub fn magnet(&self, x: Option<f64>) -> Result<Option<Magnet>, CliError> {
        self.magnet.as_ref().map(|m| m.build(x)).transpose()
    }

    /// The sensor assembly, with `magnet` replacing the configured particle.
    pub fn assembly(&self, magnet: Option<Magnet>) -> Result<SensorAssembly, CliError> {
        let a = &self.assembly;
        let seed = self.seed.unwrap_or_default();
        let mut asm = SensorAssembly::design_point(None, seed);
        let (origin, axis, radius) = match &magnet {
            Some(m) => (m.center, m.easy_axis, m.radius),
            None => (Vector3::zeros(), Vector3::z(), DEFAULT_MAGNET_RADIUS_M),
        };
        asm.fnd_center = match a.fnd_center_m {
            Some(c) => Vector3::from(c),
            None => origin + axis * (radius + a.gap_m.unwrap_or(DEFAULT_GAP_M) + a.fnd_radius_m),
        };
        asm.magnet = magnet;
        asm.fnd_radius = a.fnd_radius_m;
        asm.n_nv = a.n_nv;
        asm.strain_mean = a.strain_mean_hz;
        asm.strain_sd = a.strain_sd_hz;
        asm.line_width = a.line_width_hz;
        asm.contrast = a.contrast;
        asm.photon_rate = a.photon_rate_cps;
        asm.bias_field = Vector3::from(a.bias_field_t);
        asm.crystal_orientation = a.orientation.to_core();
        asm.spin = self.spin.build()?;
        asm.validate()?;
        Ok(asm)
    }
}

fn check_probes(p: &ProtocolCfg) -> Result<(), CliError> {
    let given = [p.f1_hz, p.f2_hz, p.f_ref_hz].iter().filter(|f| f.is_some()).count();
    if given != 0 && given != 3 {
        return Err(schema("protocol: give all of f1_hz, f2_hz, f_ref_hz or none".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let err = Scenario::from_toml("kind = \"magnetize\"\n[magnet]\ntc_kelvin = 3.0\n").unwrap_err();
        let CliError::Schema(msg) = err else { panic!("{err:?}") };
        assert!(msg.contains("magnet") && msg.contains("tc_kelvin"), "{msg}");
    }

    #[test]
    fn descending_grid_names_its_field() {
        let s = Scenario::from_toml("kind = \"magnetize\"\n[magnet]\ntc_k = 340.0\n[grid]\ntemp_k = [360.0, 300.0]\n")
            .unwrap();
        let CliError::Schema(msg) = s.resolve().unwrap_err() else {
            panic!()
        };
        assert!(msg.contains("grid.temp_k"), "{msg}");
    }

    #[test]
    fn range_grid_includes_stop() {
        let g = Grid::Range {
            start: 0.5,
            stop: 1.0,
            step: 0.05,
        };
        let v = g.values("x").unwrap();
        assert_eq!(v.len(), 11);
        assert!((v[10] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_kinds_need_a_seed() {
        let s = Scenario::from_toml("kind = \"spectrum\"\n[spectrum]\ntemp_k = 300.0\n").unwrap();
        assert!(matches!(s.resolve(), Err(CliError::Schema(m)) if m.starts_with("seed")));
    }

    #[test]
    fn resolved_scenarios_round_trip_through_json() {
        let s = Scenario::from_toml(
            "kind = \"design-sweep\"\nseed = 3\n[grid]\ncomposition = { start = 0.5, stop = 1.0, step = 0.05 }\n",
        )
        .unwrap()
        .resolve()
        .unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(Scenario::from_json_value(json).unwrap(), s);
        assert!(s.sweep.is_some() && s.magnet.is_some());
    }

    #[test]
    fn assembly_places_the_nanodiamond_on_the_easy_axis() {
        let s = Scenario::from_toml(
            "kind = \"spectrum\"\nseed = 1\n[magnet]\ncomposition_x = 0.7\n[spectrum]\ntemp_k = 300.0\n",
        )
        .unwrap();
        let asm = s.assembly(s.magnet(None).unwrap()).unwrap();
        assert!((asm.gap().unwrap() - DEFAULT_GAP_M).abs() < 1e-15);
        assert_eq!(asm.n_nv, 500);
    }
}
