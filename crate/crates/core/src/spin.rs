//! NV ground-state spin-1 Hamiltonian.
//!
//! Matrices are written in the `m_s = {+1, 0, -1}` basis, in that order, so
//! that index 1 is always the `|0>` state. All energies are in Hz.

use nalgebra::{Complex, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Zero-field splitting at the reference temperature (Hz).
pub const D0_HZ: f64 = 2.87e9;
/// Linear temperature coefficient of the zero-field splitting (Hz/K).
pub const DD_DT_HZ_PER_K: f64 = -74.0e3;
/// Reference temperature for `D0_HZ` (K).
pub const T_REF_K: f64 = 300.0;
/// Electron gyromagnetic ratio, 28 MHz/mT (Hz/T).
pub const GAMMA_HZ_PER_T: f64 = 28.0e9;

/// Default central-difference step for temperature derivatives (K).
pub const DEFAULT_DT_STEP_K: f64 = 1.0e-3;

/// Overlaps closer than this cannot single out the `|0>`-like state.
const LABEL_TOLERANCE: f64 = 1.0e-9;

type C64 = Complex<f64>;

/// Parameters of one NV centre. `field` is expressed in the NV frame, with
/// `z` along the NV symmetry axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub d0: f64,
    pub t_ref: f64,
    pub dd_dt: f64,
    pub strain_e: f64,
    pub gamma: f64,
    pub field: Vector3<f64>,
}

impl Default for SpinSystem {
    fn default() -> Self {
        Self {
            d0: D0_HZ,
            t_ref: T_REF_K,
            dd_dt: DD_DT_HZ_PER_K,
            strain_e: 0.0,
            gamma: GAMMA_HZ_PER_T,
            field: Vector3::zeros(),
        }
    }
}

/// Energy levels and the two `|0> <-> |±1>`-like transition frequencies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSet {
    /// Sorted ascending (Hz).
    pub eigenvalues: [f64; 3],
    /// Lower transition frequency out of the `|0>`-like level (Hz).
    pub omega_minus: f64,
    /// Upper transition frequency out of the `|0>`-like level (Hz).
    pub omega_plus: f64,
    /// `|<0|psi>|^2` of the eigenvector labeled as the `|0>`-like state.
    pub zero_overlap: f64,
}

impl SpinSystem {
    pub fn with_field(mut self, field: Vector3<f64>) -> Self {
        self.field = field;
        self
    }

    pub fn with_strain(mut self, strain_e: f64) -> Self {
        self.strain_e = strain_e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.d0 > 0.0, || format!("d0 must be positive, got {}", self.d0))?;
        ensure(self.gamma > 0.0, || {
            format!("gamma must be positive, got {}", self.gamma)
        })?;
        ensure(self.strain_e >= 0.0, || {
            format!("strain_e must be non-negative, got {}", self.strain_e)
        })?;
        ensure(self.t_ref > 0.0, || {
            format!("t_ref must be positive, got {}", self.t_ref)
        })?;
        ensure(
            self.field.iter().all(|b| b.is_finite()) && self.dd_dt.is_finite(),
            || "field and dd_dt must be finite".to_string(),
        )
    }

    /// Zero-field splitting `D(T) = d0 + dd_dt (T - t_ref)`.
    pub fn d_of_t(&self, temp: f64) -> Result<f64> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {temp} K")));
        }
        Ok(self.d0 + self.dd_dt * (temp - self.t_ref))
    }

    /// `H = D(T) Sz^2 + E (Sx^2 - Sy^2) - gamma S.B`.
    pub fn hamiltonian(&self, temp: f64) -> Result<Matrix3<C64>> {
        self.validate()?;
        let d = self.d_of_t(temp)?;
        let e = self.strain_e;
        let g = self.gamma;
        let (bx, by, bz) = (self.field.x, self.field.y, self.field.z);

        // S+ coupling element gamma (Bx - i By) / sqrt(2) sits above the diagonal.
        let c = C64::new(bx, -by) * (-g / std::f64::consts::SQRT_2);
        let z = C64::new(0.0, 0.0);
        let re = |v: f64| C64::new(v, 0.0);

        Ok(Matrix3::new(
            re(d - g * bz),
            c,
            re(e),
            c.conj(),
            z,
            c,
            re(e),
            c.conj(),
            re(d + g * bz),
        ))
    }

    /// Eigenvalues and labeled transitions. The `|0>`-like state is picked by
    /// maximal overlap with `|m_s = 0>`, not by energy order.
    pub fn transition_frequencies(&self, temp: f64) -> Result<LevelSet> {
        let h = self.hamiltonian(temp)?;
        let d = self.d_of_t(temp)?;
        if self.gamma * self.field.norm() + self.strain_e >= d {
            log::warn!(
                "spin system outside the no-crossing regime: |gamma B| + E = {:.4e} Hz >= D = {:.4e} Hz",
                self.gamma * self.field.norm() + self.strain_e,
                d
            );
        }
        let eig = SymmetricEigen::new(h);
        let overlaps: [f64; 3] = std::array::from_fn(|k| eig.eigenvectors.column(k)[1].norm_sqr());

        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| overlaps[b].total_cmp(&overlaps[a]));
        let (best, runner_up) = (overlaps[order[0]], overlaps[order[1]]);
        if best - runner_up < LABEL_TOLERANCE {
            return Err(Error::LabelingAmbiguity(best, runner_up));
        }

        let e0 = eig.eigenvalues[order[0]];
        let ea = eig.eigenvalues[order[1]] - e0;
        let eb = eig.eigenvalues[order[2]] - e0;

        let mut eigenvalues = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
        eigenvalues.sort_by(f64::total_cmp);

        Ok(LevelSet {
            eigenvalues,
            omega_minus: ea.min(eb),
            omega_plus: ea.max(eb),
            zero_overlap: best,
        })
    }
}

/// Central finite difference of both transitions with respect to temperature.
///
/// `field_at` gives the NV-frame field at a temperature; `D(T)` and the field
/// both move with `temp`. Returns `(d omega_minus / dT, d omega_plus / dT)`.
pub fn domega_dtemp<F>(sys: &SpinSystem, field_at: F, temp: f64, dt_step: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<Vector3<f64>>,
{
    if !(dt_step > 0.0) {
        return Err(Error::Domain(format!("dt_step must be positive, got {dt_step}")));
    }
    let at = |t: f64| -> Result<LevelSet> { sys.with_field(field_at(t)?).transition_frequencies(t) };
    let hi = at(temp + dt_step)?;
    let lo = at(temp - dt_step)?;
    let span = 2.0 * dt_step;
    Ok((
        (hi.omega_minus - lo.omega_minus) / span,
        (hi.omega_plus - lo.omega_plus) / span,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Cyclic Jacobi on the real 6x6 embedding [[Re, -Im], [Im, Re]] of a
    /// Hermitian matrix. Each eigenvalue of H appears twice.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_eigenvalues(h: &Matrix3<C64>) -> [f64; 3] {
        let mut a = [[0.0f64; 6]; 6];
        for i in 0..3 {
            for j in 0..3 {
                let z = h[(i, j)];
                a[i][j] = z.re;
                a[i + 3][j + 3] = z.re;
                a[i][j + 3] = -z.im;
                a[i + 3][j] = z.im;
            }
        }
        for _sweep in 0..100 {
            let off: f64 = (0..6)
                .flat_map(|i| (0..6).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 * (a[0][0].abs() + 1.0).powi(2) {
                break;
            }
            for p in 0..6 {
                for q in (p + 1)..6 {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..6 {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..6 {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut diag: Vec<f64> = (0..6).map(|i| a[i][i]).collect();
        diag.sort_by(f64::total_cmp);
        [diag[0], diag[2], diag[4]]
    }

    #[test]
    fn d_of_t_is_linear() {
        let sys = SpinSystem::default();
        assert_eq!(sys.d_of_t(T_REF_K).unwrap(), 2.87e9);
        assert_relative_eq!(
            sys.d_of_t(T_REF_K + 10.0).unwrap(),
            2.87e9 - 0.74e6,
            max_relative = 1e-14
        );
        assert_relative_eq!(sys.d_of_t(T_REF_K - 1.0).unwrap(), 2.87e9 + 74e3, max_relative = 1e-14);
        assert!(matches!(sys.d_of_t(0.0), Err(Error::Domain(_))));
        assert!(matches!(sys.d_of_t(-3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_field_hamiltonian_is_diagonal() {
        let h = SpinSystem::default().hamiltonian(T_REF_K).unwrap();
        let d = C64::new(D0_HZ, 0.0);
        let z = C64::new(0.0, 0.0);
        assert_eq!(h, Matrix3::new(d, z, z, z, z, z, z, z, d));
    }

    #[test]
    fn axial_field_only_touches_the_diagonal() {
        let bz = 1e-3;
        let h = SpinSystem::default()
            .with_field(Vector3::new(0.0, 0.0, bz))
            .hamiltonian(T_REF_K)
            .unwrap();
        assert_eq!(h[(0, 0)].re, D0_HZ - GAMMA_HZ_PER_T * bz);
        assert_eq!(h[(2, 2)].re, D0_HZ + GAMMA_HZ_PER_T * bz);
        assert_eq!(h[(1, 1)].re, 0.0);
        for (i, j) in [(0, 1), (1, 2), (0, 2), (1, 0), (2, 1), (2, 0)] {
            assert_eq!(h[(i, j)].norm(), 0.0);
        }
    }

    #[test]
    fn generic_hamiltonian_is_hermitian() {
        let h = SpinSystem::default()
            .with_strain(5e6)
            .with_field(Vector3::new(1.3e-3, -0.7e-3, 2.1e-3))
            .hamiltonian(310.0)
            .unwrap();
        assert_eq!((h - h.adjoint()).norm(), 0.0);
    }

    #[test]
    fn axial_field_splits_by_gamma() {
        let lv = SpinSystem::default()
            .with_field(Vector3::new(0.0, 0.0, 1e-3))
            .transition_frequencies(T_REF_K)
            .unwrap();
        assert_relative_eq!(lv.omega_minus, D0_HZ - 28e6, max_relative = 1e-13);
        assert_relative_eq!(lv.omega_plus, D0_HZ + 28e6, max_relative = 1e-13);
    }

    #[test]
    fn strain_splits_at_zero_field() {
        let e = 4e6;
        let lv = SpinSystem::default()
            .with_strain(e)
            .transition_frequencies(T_REF_K)
            .unwrap();
        assert_relative_eq!(lv.omega_minus, D0_HZ - e, max_relative = 1e-13);
        assert_relative_eq!(lv.omega_plus, D0_HZ + e, max_relative = 1e-13);
    }

    #[test]
    fn transverse_field_matches_jacobi_oracle() {
        let sys = SpinSystem::default().with_field(Vector3::new(0.5e-3, 0.0, 0.0));
        let oracle = jacobi_eigenvalues(&sys.hamiltonian(T_REF_K).unwrap());
        let lv = sys.transition_frequencies(T_REF_K).unwrap();
        for (a, b) in lv.eigenvalues.iter().zip(oracle.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-9, epsilon = 1e-3);
        }
        // The lowest level is the |0>-like one for a weak transverse field.
        assert_relative_eq!(lv.omega_minus, oracle[1] - oracle[0], max_relative = 1e-9);
        assert_relative_eq!(lv.omega_plus, oracle[2] - oracle[0], max_relative = 1e-9);
    }

    #[test]
    fn labeling_follows_overlap_through_the_level_crossing() {
        // Past ~102 mT the |-1> (here |+1>, given the sign of the Zeeman
        // term) level drops below |0>; the overlap label keeps tracking |0>.
        let bz = 0.12;
        let lv = SpinSystem::default()
            .with_field(Vector3::new(0.0, 0.0, bz))
            .transition_frequencies(T_REF_K)
            .unwrap();
        assert_relative_eq!(lv.omega_minus, D0_HZ - GAMMA_HZ_PER_T * bz, max_relative = 1e-12);
        assert!(lv.omega_minus < 0.0);
        assert_relative_eq!(lv.zero_overlap, 1.0);
    }

    #[test]
    fn ambiguous_labeling_is_reported() {
        // With D = 0, no strain and a purely transverse field, two eigenvectors
        // share the same |0> weight.
        let sys = SpinSystem {
            d0: 1e-300,
            field: Vector3::new(1e-3, 0.0, 0.0),
            ..SpinSystem::default()
        };
        let err = sys.transition_frequencies(T_REF_K).unwrap_err();
        assert!(matches!(err, Error::LabelingAmbiguity(..)), "{err:?}");
    }

    #[test]
    fn bare_nv_susceptibility_is_dd_dt() {
        let sys = SpinSystem::default().with_strain(3e6);
        let (dm, dp) = domega_dtemp(
            &sys,
            |_| Ok(Vector3::new(0.2e-3, 0.0, 0.4e-3)),
            305.0,
            DEFAULT_DT_STEP_K,
        )
        .unwrap();
        assert_relative_eq!(dm, DD_DT_HZ_PER_K, max_relative = 1e-4);
        assert_relative_eq!(dp, DD_DT_HZ_PER_K, max_relative = 1e-4);
    }

    #[test]
    fn axial_field_ramp_adds_gamma_db_dt() {
        let sys = SpinSystem::default();
        let slope = 0.5e-3; // T/K
        let field = |t: f64| Ok(Vector3::new(0.0, 0.0, 2e-3 + slope * (t - 300.0)));
        let (dm, dp) = domega_dtemp(&sys, field, 300.0, DEFAULT_DT_STEP_K).unwrap();
        assert_relative_eq!(dm, DD_DT_HZ_PER_K - 14e6, max_relative = 1e-6);
        assert_relative_eq!(dp, DD_DT_HZ_PER_K + 14e6, max_relative = 1e-6);
    }

    #[test]
    fn domega_rejects_bad_step() {
        let sys = SpinSystem::default();
        assert!(domega_dtemp(&sys, |_| Ok(Vector3::zeros()), 300.0, 0.0).is_err());
    }

    #[test]
    fn invalid_systems_are_rejected() {
        assert!(SpinSystem {
            gamma: 0.0,
            ..Default::default()
        }
        .hamiltonian(300.0)
        .is_err());
        assert!(SpinSystem {
            strain_e: -1.0,
            ..Default::default()
        }
        .hamiltonian(300.0)
        .is_err());
        assert!(SpinSystem {
            d0: -1.0,
            ..Default::default()
        }
        .hamiltonian(300.0)
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn trace_identity(bx in -5e-3..5e-3f64, by in -5e-3..5e-3f64, bz in -5e-3..5e-3f64,
                          e in 0.0..20e6f64, temp in 200.0..400.0f64) {
            let sys = SpinSystem::default().with_strain(e).with_field(Vector3::new(bx, by, bz));
            let lv = sys.transition_frequencies(temp).unwrap();
            let d = sys.d_of_t(temp).unwrap();
            let sum: f64 = lv.eigenvalues.iter().sum();
            prop_assert!(((sum - 2.0 * d) / (2.0 * d)).abs() < 1e-9);
            prop_assert!(lv.omega_plus >= lv.omega_minus && lv.omega_minus >= 0.0);
        }

        #[test]
        fn axial_closed_form(bz in -20e-3..20e-3f64, e in 0.0..20e6f64, temp in 200.0..400.0f64) {
            let sys = SpinSystem::default().with_strain(e).with_field(Vector3::new(0.0, 0.0, bz));
            let lv = sys.transition_frequencies(temp).unwrap();
            let d = sys.d_of_t(temp).unwrap();
            let split = (e * e + (GAMMA_HZ_PER_T * bz).powi(2)).sqrt();
            prop_assert!(((lv.omega_minus - (d - split)) / (d - split)).abs() < 1e-10);
            prop_assert!(((lv.omega_plus - (d + split)) / (d + split)).abs() < 1e-10);
        }

        #[test]
        fn unstrained_axial_splitting_is_two_gamma_b(bz in -20e-3..20e-3f64) {
            let lv = SpinSystem::default()
                .with_field(Vector3::new(0.0, 0.0, bz))
                .transition_frequencies(T_REF_K)
                .unwrap();
            let want = 2.0 * GAMMA_HZ_PER_T * bz.abs();
            prop_assert!((lv.omega_plus - lv.omega_minus - want).abs() <= 1e-6 + 1e-12 * want);
        }

        #[test]
        fn fd_matches_chain_rule(b0 in 0.1e-3..5e-3f64, sign in prop::bool::ANY, slope in -1e-3..1e-3f64) {
            let b0 = if sign { b0 } else { -b0 };
            let sys = SpinSystem::default();
            let field = |t: f64| Ok(Vector3::new(0.0, 0.0, b0 + slope * (t - 300.0)));
            let (dm, dp) = domega_dtemp(&sys, field, 300.0, DEFAULT_DT_STEP_K).unwrap();
            let dsplit = GAMMA_HZ_PER_T * slope * b0.signum();
            let want_m = DD_DT_HZ_PER_K - dsplit;
            let want_p = DD_DT_HZ_PER_K + dsplit;
            prop_assert!((dm - want_m).abs() <= 1e-6 * want_m.abs());
            prop_assert!((dp - want_p).abs() <= 1e-6 * want_p.abs());
        }
    }
}
