//! Scenario dispatch. Every kind produces one CSV table plus summary values
//! that go into both the CSV header and the manifest.

use hybridtherm_core::ensemble::{Ensemble, SensorAssembly};
use hybridtherm_core::magnet::MagnetizationCurve;
use hybridtherm_core::materials::MaterialTable;
use hybridtherm_core::protocol::{
    eta_three_point_analytic, shot_noise_curve, track_square_wave, TemperatureTrace, ThreePointConfig,
};
use hybridtherm_core::scenarios::SingleNvProbe;
use hybridtherm_core::sensitivity::{
    design_sweep, eta_cw_lorentzian, mean_line_shift_rate, operating_point, optimal_ramsey, RamseyParams, ReportInputs,
    SensitivityReport, SlopeOptions, TempPolicy,
};
use nalgebra::Vector3;
use serde_json::{json, Value};

use crate::config::{schema, Kind, ProtocolCfg, Scenario};
use crate::CliError;

pub struct Product {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<(&'static str, Value)>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn execute(sc: &Scenario, assumptions_hash: &str) -> Result<Product, CliError> {
    match sc.kind {
        Kind::Magnetize => magnetize(sc),
        Kind::Spectrum => spectrum(sc),
        Kind::Susceptibility => susceptibility(sc),
        Kind::Sensitivity => sensitivity(sc),
        Kind::DesignSweep => sweep(sc, assumptions_hash),
        Kind::ShotNoise => shot_noise(sc),
        Kind::Track => track(sc),
    }
}

/// Physics preconditions only; nothing is simulated or written.
pub fn check(sc: &Scenario) -> Result<Vec<(&'static str, Value)>, CliError> {
    let mut notes = Vec::new();
    match sc.kind {
        Kind::Magnetize | Kind::Susceptibility => {
            let mag = sc.magnet(None)?.expect("resolved");
            notes.push(("tc_k", json!(mag.tc)));
            if sc.kind == Kind::Susceptibility {
                probe(sc)?;
            }
        }
        Kind::DesignSweep => {
            sweep_template(sc)?;
        }
        Kind::Spectrum | Kind::Sensitivity => {
            let asm = sc.assembly(sc.magnet(None)?)?;
            notes.push(("gap_m", json!(asm.gap())));
        }
        Kind::ShotNoise | Kind::Track => {
            let ens = Ensemble::new(sc.assembly(sc.magnet(None)?)?)?;
            let cfg = protocol(&ens, sc.protocol.as_ref().expect("resolved"))?;
            notes.push(("gap_m", json!(ens.assembly.gap())));
            notes.extend(protocol_summary(&cfg));
        }
    }
    Ok(notes)
}

fn magnetize(sc: &Scenario) -> Result<Product, CliError> {
    let mag = sc.magnet(None)?.expect("resolved");
    let temps = sc.grid.temp_k.as_ref().expect("resolved").values("grid.temp_k")?;
    let curve = MagnetizationCurve::compute(&mag, &temps, hybridtherm_core::ensemble::DEFAULT_SLOPE_DT_K)?;
    let rows = (0..temps.len())
        .map(|i| vec![num(curve.temps[i]), num(curve.reduced_m[i]), num(curve.dm_dt[i])])
        .collect();
    Ok(Product {
        columns: vec!["temp_k", "m_reduced", "dm_dt_per_k"],
        rows,
        summary: vec![
            ("tc_k", json!(mag.tc)),
            ("m_sat_apm", json!(mag.m_sat)),
            ("spin_j", json!(mag.spin_j)),
        ],
    })
}

fn spectrum(sc: &Scenario) -> Result<Product, CliError> {
    let cfg = sc.spectrum.as_ref().expect("resolved");
    let ens = Ensemble::new(sc.assembly(sc.magnet(None)?)?)?;
    let freqs = match &sc.grid.freq_hz {
        Some(g) => g.values("grid.freq_hz")?,
        None => ens.frequency_grid(cfg.temp_k, cfg.margin_widths, cfg.step_widths * ens.assembly.line_width)?,
    };
    let spec = ens.spectrum(cfg.temp_k, &freqs)?;
    let slope = ens.signal_slope(cfg.temp_k, &freqs, cfg.dt_step_k)?;
    let rows = (0..freqs.len())
        .map(|i| vec![num(freqs[i]), num(spec.signal[i]), num(slope[i])])
        .collect();
    Ok(Product {
        columns: vec!["freq_hz", "signal", "dsignal_dT"],
        rows,
        summary: vec![
            ("temp_k", json!(cfg.temp_k)),
            ("effective_contrast", json!(spec.effective_contrast())),
            ("effective_width_hz", json!(spec.effective_width())),
        ],
    })
}

fn probe(sc: &Scenario) -> Result<SingleNvProbe, CliError> {
    let p = sc.probe.as_ref().expect("resolved");
    let axis = Vector3::from(p.axis);
    if !(axis.norm() > 0.0) {
        return Err(schema("probe.axis must be non-zero".into()));
    }
    let magnet = sc.magnet(None)?.expect("resolved");
    let position = Vector3::from(p.position_m);
    if (position - magnet.center).norm() <= magnet.radius {
        return Err(hybridtherm_core::Error::Geometry("probe NV lies inside the particle".into()).into());
    }
    Ok(SingleNvProbe {
        magnet,
        nv_position: position,
        nv_axis: axis.normalize(),
        bias_field: Vector3::from(p.bias_field_t),
        spin: sc.spin.build()?,
        resolution_k: p.resolution_k,
    })
}

fn susceptibility(sc: &Scenario) -> Result<Product, CliError> {
    let probe = probe(sc)?;
    let temps = sc.grid.temp_k.as_ref().expect("resolved").values("grid.temp_k")?;
    let rows = probe
        .scan(&temps)?
        .iter()
        .map(|r| {
            vec![
                num(r.temp),
                num(r.omega_minus),
                num(r.omega_plus),
                num(r.domega_minus_dt),
                num(r.domega_plus_dt),
            ]
        })
        .collect();
    let peak = probe.peak_susceptibility()?;
    Ok(Product {
        columns: vec![
            "temp_k",
            "omega_minus_hz",
            "omega_plus_hz",
            "domega_minus_dt_hz_per_k",
            "domega_plus_dt_hz_per_k",
        ],
        rows,
        summary: vec![
            ("peak_temp_k", json!(peak.temp)),
            ("peak_domega_dt_hz_per_k", json!(peak.peak())),
            ("enhancement", json!(probe.enhancement()?)),
        ],
    })
}

fn sensitivity(sc: &Scenario) -> Result<Product, CliError> {
    let cfg = sc.sensitivity.as_ref().expect("resolved");
    let ens = Ensemble::new(sc.assembly(sc.magnet(None)?)?)?;
    let temp = cfg.temp_k;
    let opts = SlopeOptions::default();
    let op = operating_point(&ens, temp, &opts)?;
    let grid = ens.frequency_grid(temp, opts.margin_widths, opts.step_widths * ens.assembly.line_width)?;
    let spec = ens.spectrum(temp, &grid)?;
    let rate = mean_line_shift_rate(&ens, temp, opts.dt_step)?;
    let lorentzian = eta_cw_lorentzian(
        spec.effective_width(),
        spec.effective_contrast(),
        ens.assembly.photon_rate,
        rate,
    )?;
    let three = ThreePointConfig::auto(&ens, temp, cfg.dwell_s, &opts)?;
    let eta_three_point = eta_three_point_analytic(&ens, &three)?;
    let ramsey = match cfg.t2_star_s {
        Some(t2) => {
            let rate_l = cfg.ramsey_photon_rate_cps.unwrap_or(ens.assembly.photon_rate);
            let mut p = RamseyParams::new(rate_l, cfg.ramsey_contrast, t2, rate);
            p.readout_time = cfg.ramsey_readout_s;
            Some(optimal_ramsey(&p)?)
        }
        None => None,
    };
    let report = SensitivityReport {
        temp,
        eta_cw_numeric: op.eta,
        eta_cw_lorentzian: lorentzian,
        eta_three_point,
        eta_ramsey: ramsey.map(|r| r.1),
        inputs: ReportInputs {
            photon_rate: ens.assembly.photon_rate,
            contrast: spec.effective_contrast(),
            line_width: spec.effective_width(),
            domega_dt: rate,
            max_slope: op.max_slope,
            tau: ramsey.map(|r| r.0),
            t2_star: cfg.t2_star_s,
        },
    };
    report.validate()?;
    Ok(Product {
        columns: vec![
            "temp_k",
            "eta_cw_numeric_k_per_sqrthz",
            "eta_cw_lorentzian_k_per_sqrthz",
            "eta_three_point_k_per_sqrthz",
            "eta_ramsey_k_per_sqrthz",
            "ramsey_tau_s",
            "max_slope_per_k",
            "domega_dt_hz_per_k",
            "effective_width_hz",
            "effective_contrast",
        ],
        rows: vec![vec![
            num(temp),
            num(report.eta_cw_numeric),
            num(report.eta_cw_lorentzian),
            num(report.eta_three_point),
            opt(report.eta_ramsey),
            opt(report.inputs.tau),
            num(op.max_slope),
            num(rate),
            num(report.inputs.line_width),
            num(report.inputs.contrast),
        ]],
        summary: vec![("probe_freq_hz", json!(op.probe_freq))],
    })
}

fn sweep_template(sc: &Scenario) -> Result<SensorAssembly, CliError> {
    let m = sc.magnet.as_ref().expect("resolved");
    for (field, set) in [
        ("magnet.composition_x", m.composition_x.is_some()),
        ("magnet.tc_k", m.tc_k.is_some()),
        ("magnet.m_sat_apm", m.m_sat_apm.is_some()),
        ("magnet.spin_j", m.spin_j.is_some()),
    ] {
        if set {
            return Err(schema(format!("{field}: not allowed for kind = \"design-sweep\"")));
        }
    }
    let table = MaterialTable::builtin();
    let material = table
        .get(&m.material)
        .map_err(|e| schema(format!("magnet.material: {e}")))?;
    if !material.is_composition_tuned() {
        return Err(schema(format!(
            "magnet.material: {} has no composition axis",
            m.material
        )));
    }
    // Any ferromagnetic composition fixes the geometry; the sweep swaps it.
    sc.assembly(Some(m.build(Some(1.0))?))
}

fn sweep(sc: &Scenario, assumptions_hash: &str) -> Result<Product, CliError> {
    let cfg = sc.sweep.as_ref().expect("resolved");
    let template = sweep_template(sc)?;
    let table = MaterialTable::builtin();
    let material = table.get(&sc.magnet.as_ref().expect("resolved").material)?;
    let xs = sc
        .grid
        .composition
        .as_ref()
        .expect("resolved")
        .values("grid.composition")?;
    let policy = TempPolicy {
        span_k: cfg.span_k,
        step_k: cfg.step_k,
    };
    let opts = SlopeOptions {
        step_widths: cfg.step_widths,
        margin_widths: cfg.margin_widths,
        dt_step: cfg.dt_step_k,
    };
    let rows = design_sweep(&template, material, &xs, &policy, &opts)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    Ok(Product {
        columns: vec![
            "x",
            "tc_k",
            "t_opt_k",
            "eta_opt_k_per_sqrthz",
            "domega_dt_hz_per_k",
            "assumptions_hash",
            "status",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    num(r.x),
                    num(r.tc),
                    opt(r.t_opt),
                    opt(r.eta_opt),
                    opt(r.domega_dt),
                    assumptions_hash.to_string(),
                    r.status.clone(),
                ]
            })
            .collect(),
        summary: vec![("failed_rows", json!(failed))],
    })
}

fn protocol(ens: &Ensemble, p: &ProtocolCfg) -> Result<ThreePointConfig, CliError> {
    let cfg = match (p.f1_hz, p.f2_hz, p.f_ref_hz) {
        (Some(f1), Some(f2), Some(fr)) => {
            ThreePointConfig::calibrate(ens, p.t0_k, f1, f2, fr, p.dwell_s, p.calibration_dt_k)?
        }
        _ => {
            let opts = SlopeOptions {
                step_widths: p.step_widths,
                dt_step: p.calibration_dt_k,
                ..SlopeOptions::default()
            };
            ThreePointConfig::auto(ens, p.t0_k, p.dwell_s, &opts)?
        }
    };
    Ok(cfg)
}

fn protocol_summary(cfg: &ThreePointConfig) -> Vec<(&'static str, Value)> {
    let c = &cfg.calibration;
    vec![
        ("f1_hz", json!(cfg.f1)),
        ("f2_hz", json!(cfg.f2)),
        ("f_ref_hz", json!(cfg.f_ref)),
        ("calibration_s1", json!(c.s1)),
        ("calibration_s2", json!(c.s2)),
        ("calibration_slope_per_k", json!(c.slope)),
    ]
}

fn shot_noise(sc: &Scenario) -> Result<Product, CliError> {
    let s = sc.shot_noise.as_ref().expect("resolved");
    let seed = sc.seed.expect("resolved");
    let ens = Ensemble::new(sc.assembly(sc.magnet(None)?)?)?;
    let cfg = protocol(&ens, sc.protocol.as_ref().expect("resolved"))?;
    let t0 = cfg.calibration.t0;
    let trace = if s.floor_sd_k > 0.0 {
        let hold = s.floor_hold_s.expect("resolved");
        let n_holds = ((s.total_time_s / hold).ceil() as usize).max(1);
        TemperatureTrace::with_floor(t0, s.floor_sd_k, hold, n_holds, seed)?
    } else {
        TemperatureTrace::Constant { temp: t0 }
    };
    let windows = s.windows_s.values("shot_noise.windows_s")?;
    let curve = shot_noise_curve(&ens, &cfg, &trace, s.total_time_s, &windows, seed)?;
    let mut summary = protocol_summary(&cfg);
    summary.extend([
        ("loglog_slope", json!(curve.slope)),
        ("eta_fit_k_per_sqrthz", json!(curve.eta_fit)),
        (
            "eta_analytic_k_per_sqrthz",
            json!(eta_three_point_analytic(&ens, &cfg)?),
        ),
    ]);
    Ok(Product {
        columns: vec!["window_s", "n_windows", "delta_t_k", "eta_k_per_sqrthz", "flagged"],
        rows: curve
            .rows
            .iter()
            .map(|r| {
                vec![
                    num(r.window),
                    r.n_windows.to_string(),
                    num(r.delta_t),
                    num(r.eta),
                    r.flagged.to_string(),
                ]
            })
            .collect(),
        summary,
    })
}

fn track(sc: &Scenario) -> Result<Product, CliError> {
    let t = sc.track.as_ref().expect("resolved");
    let ens = Ensemble::new(sc.assembly(sc.magnet(None)?)?)?;
    let cfg = protocol(&ens, sc.protocol.as_ref().expect("resolved"))?;
    let res = track_square_wave(
        &ens,
        &cfg,
        t.low_k,
        t.high_k,
        t.period_s,
        t.bin_s,
        t.duration_s,
        sc.seed.expect("resolved"),
    )?;
    let mut summary = protocol_summary(&cfg);
    summary.extend([
        ("low_mean_k", json!(res.low.mean)),
        ("low_sd_k", json!(res.low.sd)),
        ("high_mean_k", json!(res.high.mean)),
        ("high_sd_k", json!(res.high.sd)),
        ("separation_sigma", json!(res.separation_sigma)),
        ("welch_t", json!(res.welch_t)),
        ("max_period_deviation", json!(res.max_period_deviation)),
    ]);
    Ok(Product {
        columns: vec!["t_s", "counts_f1", "counts_f2", "counts_fref", "t_hat_k", "t_true_k"],
        rows: res
            .bins
            .iter()
            .map(|b| {
                vec![
                    num(b.t),
                    b.counts[0].to_string(),
                    b.counts[1].to_string(),
                    b.counts[2].to_string(),
                    num(b.t_hat),
                    num(b.t_true),
                ]
            })
            .collect(),
        summary,
    })
}
