//! Cavity mode geometry, intracavity power buildup, and optical dipole
//! potentials for the trap and probe modes.
//!
//! The mode function is a TEM00 standing wave with constant waist along the
//! cavity: psi^2(r) = cos^2(k z) exp(-2 rho^2 / w0^2). The constant-waist
//! approximation holds because the Rayleigh range is several times the cavity
//! length; `CavityParams::new` enforces this for each beam wavelength via
//! `validate_waist`.

use crate::constants::{C, K_B};
use crate::error::{Error, Result};
use crate::vec3::{self, V3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Cavity parameters. `kappa` is the angular HWHM linewidth; `g0` the
/// atom-mode coupling (both rad/s).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CavityParams {
    pub kappa: f64,
    pub finesse_over_pi: f64,
    pub length: f64,
    pub fsr: f64,
    pub waist: f64,
    pub g0: f64,
    pub axis: V3,
    pub mode_center: V3,
}

impl CavityParams {
    pub fn new(
        kappa: f64,
        finesse_over_pi: f64,
        length: f64,
        fsr: f64,
        waist: f64,
        g0: f64,
        axis: V3,
        mode_center: V3,
    ) -> Result<Self> {
        for (name, v) in [
            ("kappa", kappa),
            ("finesse_over_pi", finesse_over_pi),
            ("length", length),
            ("fsr", fsr),
            ("waist", waist),
            ("g0", g0),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("cavity {name} must be positive, got {v}")));
            }
        }
        let fsr_geom = C / (2.0 * length);
        if (fsr - fsr_geom).abs() > 0.01 * fsr_geom {
            return Err(Error::Config(format!(
                "cavity fsr {fsr} Hz inconsistent with c/2d = {fsr_geom} Hz (>1%)"
            )));
        }
        // kappa (HWHM, Hz) should match fsr / (pi * F/pi); the table values
        // are independently measured, so allow 15%.
        let kappa_hz = kappa / (2.0 * PI);
        let kappa_from_finesse = fsr / (PI * finesse_over_pi);
        if (kappa_hz - kappa_from_finesse).abs() > 0.15 * kappa_from_finesse {
            return Err(Error::Config(format!(
                "cavity linewidth {kappa_hz} Hz inconsistent with fsr/finesse {kappa_from_finesse} Hz (>15%)"
            )));
        }
        let axis = vec3::normalized(axis)
            .ok_or_else(|| Error::Config("cavity axis must be a nonzero vector".into()))?;
        Ok(CavityParams {
            kappa,
            finesse_over_pi,
            length,
            fsr,
            waist,
            g0,
            axis,
            mode_center,
        })
    }

    /// Rayleigh range pi w0^2 / lambda at the given wavelength.
    pub fn rayleigh_range(&self, wavelength: f64) -> f64 {
        PI * self.waist * self.waist / wavelength
    }

    /// Constant-waist validity: the Rayleigh range must exceed 4x the cavity
    /// length at this wavelength.
    pub fn validate_waist(&self, wavelength: f64) -> Result<()> {
        let zr = self.rayleigh_range(wavelength);
        if zr <= 4.0 * self.length {
            return Err(Error::Config(format!(
                "Rayleigh range {zr} m at {wavelength} m is not > 4x cavity length {} m; \
                 constant-waist mode model invalid",
                self.length
            )));
        }
        Ok(())
    }
}

/// A laser drive of one cavity mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapBeam {
    pub wavelength: f64,
    pub input_power: f64,
    pub incoupling_efficiency: f64,
    pub transition_wavelength: f64,
    /// Natural linewidth of the coupled transition, FWHM (rad/s).
    pub transition_linewidth: f64,
}

impl TrapBeam {
    pub fn new(
        wavelength: f64,
        input_power: f64,
        incoupling_efficiency: f64,
        transition_wavelength: f64,
        transition_linewidth: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&incoupling_efficiency) {
            return Err(Error::Config(format!(
                "incoupling efficiency must be in [0, 1], got {incoupling_efficiency}"
            )));
        }
        if wavelength == transition_wavelength {
            return Err(Error::Config(
                "beam wavelength coincides with the transition; dipole formula diverges".into(),
            ));
        }
        if wavelength <= 0.0 || transition_wavelength <= 0.0 || transition_linewidth <= 0.0 {
            return Err(Error::Config("beam wavelengths and linewidth must be positive".into()));
        }
        if input_power < 0.0 {
            return Err(Error::Config(format!("input power must be >= 0, got {input_power}")));
        }
        Ok(TrapBeam {
            wavelength,
            input_power,
            incoupling_efficiency,
            transition_wavelength,
            transition_linewidth,
        })
    }
}

/// Normalized standing-wave mode intensity psi^2(r) in [0, 1].
pub fn mode_intensity(r: V3, cav: &CavityParams, wavelength: f64) -> f64 {
    let d = vec3::sub(r, cav.mode_center);
    let z = vec3::dot(d, cav.axis);
    let rho2 = vec3::norm2(d) - z * z;
    let k = 2.0 * PI / wavelength;
    let c = (k * z).cos();
    c * c * (-2.0 * rho2.max(0.0) / (cav.waist * cav.waist)).exp()
}

/// Resonant intracavity power buildup: P_circ = eta (F/pi) P_in.
pub fn circulating_power(beam: &TrapBeam, cav: &CavityParams) -> f64 {
    beam.incoupling_efficiency * cav.finesse_over_pi * beam.input_power
}

/// Antinode intensity of the standing wave carrying circulating power P:
/// 8 P / (pi w0^2) (Gaussian peak 2P/(pi w0^2) times 4 for field doubling).
pub fn antinode_intensity(p_circ: f64, cav: &CavityParams) -> f64 {
    8.0 * p_circ / (PI * cav.waist * cav.waist)
}

/// Standing-wave trap depth. `depth` is always the positive well/barrier
/// height; `repulsive` marks a blue-detuned beam.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrapDepth {
    pub depth: f64,
    pub repulsive: bool,
}

impl TrapDepth {
    pub fn zero() -> Self {
        TrapDepth { depth: 0.0, repulsive: false }
    }

    /// Signed antinode potential: negative (attractive) for red detuning.
    pub fn signed(&self) -> f64 {
        if self.repulsive {
            self.depth
        } else {
            -self.depth
        }
    }

    pub fn depth_in_kelvin(&self) -> f64 {
        self.depth / K_B
    }
}

/// Far-detuned two-level antinode trap depth:
/// U0 = (3 pi c^2 / (2 w_t^3)) (Gamma / Delta) I_antinode,
/// with Delta = w_laser - w_t (< 0 red). Linear in input power.
pub fn trap_depth(beam: &TrapBeam, cav: &CavityParams) -> TrapDepth {
    let w_t = 2.0 * PI * C / beam.transition_wavelength;
    let delta = 2.0 * PI * C / beam.wavelength - w_t;
    let intensity = antinode_intensity(circulating_power(beam, cav), cav);
    let u0 = 3.0 * PI * C * C / (2.0 * w_t.powi(3)) * (beam.transition_linewidth / delta)
        * intensity;
    TrapDepth { depth: u0.abs(), repulsive: u0 > 0.0 }
}

/// Dipole potential U(r) = -U0 psi^2(r) for red detuning (+U0 psi^2 for
/// blue), in joules.
pub fn dipole_potential(r: V3, depth: &TrapDepth, cav: &CavityParams, wavelength: f64) -> f64 {
    depth.signed() * mode_intensity(r, cav, wavelength)
}

/// Analytic gradient of the dipole potential.
pub fn dipole_gradient(r: V3, depth: &TrapDepth, cav: &CavityParams, wavelength: f64) -> V3 {
    let d = vec3::sub(r, cav.mode_center);
    let z = vec3::dot(d, cav.axis);
    let rho_vec = vec3::sub(d, vec3::scale(cav.axis, z));
    let w2 = cav.waist * cav.waist;
    let k = 2.0 * PI / wavelength;
    let env = (-2.0 * vec3::norm2(rho_vec) / w2).exp();
    let (s2, c) = ((2.0 * k * z).sin(), (k * z).cos());
    let cos2 = c * c;
    let u0 = depth.signed();
    // dU/dz = -u0 env k sin(2kz); dU/drho_vec = u0 cos^2 env (4/w2) rho_vec
    let mut g = vec3::scale(cav.axis, -u0 * env * k * s2);
    vec3::axpy(&mut g, 4.0 * u0 * cos2 * env / w2, rho_vec);
    g
}
