//! Dispersive-shift transmittance readout and stochastic hyperfine pumping.
//!
//! The cavity resonance is pulled by the coupled F=2 atoms:
//!     Delta_C'(N_eff) = Delta_C - N_eff g0^2 / Delta_A
//! and the normalized transmittance is the Lorentzian ratio
//!     T(N_eff) = (kappa^2 + Delta_C^2) / (kappa^2 + Delta_C'^2).
//! With the experiment's signs (Delta_A < 0, Delta_C > 0) the shift pushes
//! the mode further from the drive and T decreases monotonically, so T can
//! be inverted for the effective atom number.

use crate::dynamics::{Atom, Ensemble, FState};
use crate::error::{Error, Result};
use crate::optics::{mode_intensity, CavityParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Measured transmittance slightly above 1 (detector noise) clamps to 1;
/// beyond this it is treated as invalid input.
pub const TRANSMITTANCE_NOISE_CLAMP: f64 = 1.02;

/// Probe and cavity detunings (rad/s). `gamma` is the atomic HWHM.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Detunings {
    pub delta_a: f64,
    pub delta_c: f64,
    pub gamma: f64,
}

impl Detunings {
    pub fn new(delta_a: f64, delta_c: f64, gamma: f64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        // dispersive validity
        if delta_a.abs() <= 10.0 * gamma {
            return Err(Error::Config(format!(
                "|delta_A| = {} rad/s must exceed 10 gamma = {} rad/s for the dispersive model",
                delta_a.abs(),
                10.0 * gamma
            )));
        }
        Ok(Detunings { delta_a, delta_c, gamma })
    }
}

/// Shifted cavity detuning Delta_C' = Delta_C - N_eff g0^2 / Delta_A.
pub fn dispersive_shift(n_eff: f64, det: &Detunings, g0: f64) -> f64 {
    det.delta_c - n_eff * g0 * g0 / det.delta_a
}

/// Normalized cavity transmittance in (0, 1] for n_eff >= 0.
pub fn transmittance(n_eff: f64, det: &Detunings, g0: f64, kappa: f64) -> f64 {
    let shifted = dispersive_shift(n_eff, det, g0);
    (kappa * kappa + det.delta_c * det.delta_c) / (kappa * kappa + shifted * shifted)
}

/// Invert the transmittance to an effective atom number.
///
/// The positive root is selected for Delta_C': the paper's sign convention
/// (Delta_A < 0, Delta_C > 0) makes the shift grow the detuning, so the
/// negative root would correspond to the opposite atomic detuning.
pub fn invert_transmittance(t: f64, det: &Detunings, g0: f64, kappa: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("transmittance must be positive, got {t}")));
    }
    if t > TRANSMITTANCE_NOISE_CLAMP {
        return Err(Error::Domain(format!(
            "transmittance {t} exceeds the noise clamp {TRANSMITTANCE_NOISE_CLAMP}"
        )));
    }
    let t = t.min(1.0);
    let num = kappa * kappa + det.delta_c * det.delta_c;
    let arg = num / t - kappa * kappa;
    if arg < 0.0 {
        return Err(Error::Domain(format!(
            "(kappa^2 + delta_C^2)/T < kappa^2 for T = {t}; outside the model's range"
        )));
    }
    let shifted = arg.sqrt();
    Ok((shifted - det.delta_c) * det.delta_a.abs() / (g0 * g0))
}

/// Mode-intensity-weighted count of coupled atoms: sum of psi^2(r_i) over
/// alive F=2 atoms. F=1 atoms sit dark and contribute nothing.
pub fn effective_atom_number(ens: &Ensemble, cav: &CavityParams, probe_wavelength: f64) -> f64 {
    ens.atoms
        .iter()
        .filter(|a| a.alive && a.f_state == FState::F2)
        .map(|a| mode_intensity(a.pos, cav, probe_wavelength))
        .sum()
}

/// Hyperfine pump/repump parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PumpModel {
    /// Branching fraction of probe scattering events that land in F=1.
    pub depump_branching: f64,
    /// Repump rate out of F=1 when the repumper is on (1/s).
    pub repump_rate: f64,
    /// Residual depumping fraction when the matched axial field confines the
    /// atoms to the closed cycle (1 = no suppression, 0 = fully closed).
    pub closed_cycle_suppression: f64,
    /// Saturation intensity of the probed transition (W/m^2).
    pub saturation_intensity: f64,
    /// Linear rise time of the probe power after the shutter opens (s).
    pub shutter_rise: f64,
}

impl PumpModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depump_branching", self.depump_branching),
            ("closed_cycle_suppression", self.closed_cycle_suppression),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.repump_rate < 0.0 || self.saturation_intensity <= 0.0 || self.shutter_rise < 0.0 {
            return Err(Error::Config("pump model rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two-level photon scattering rate at local intensity `intensity`:
/// R = (Gamma/2) s / (1 + s + (Delta_A / gamma)^2), s = I / I_sat.
pub fn scattering_rate_at_intensity(
    intensity: f64,
    linewidth_fwhm: f64,
    det: &Detunings,
    i_sat: f64,
) -> f64 {
    let s = intensity / i_sat;
    let d = det.delta_a / det.gamma;
    0.5 * linewidth_fwhm * s / (1.0 + s + d * d)
}

/// Scattering rate at position `r` for a probe with antinode intensity
/// `i_antinode`, using the probe-mode standing wave.
pub fn scattering_rate(
    r: [f64; 3],
    i_antinode: f64,
    probe_wavelength: f64,
    linewidth_fwhm: f64,
    cav: &CavityParams,
    det: &Detunings,
    i_sat: f64,
) -> f64 {
    let local = i_antinode * mode_intensity(r, cav, probe_wavelength);
    scattering_rate_at_intensity(local, linewidth_fwhm, det, i_sat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxialFieldState {
    Matched,
    Opposite,
    Off,
}

/// Inputs of one stochastic hyperfine step for a single atom.
#[derive(Debug, Clone, Copy)]
pub struct PumpStepInputs {
    pub probe_on: bool,
    pub repumper_on: bool,
    pub axial_state: AxialFieldState,
    /// Probe scattering rate at the atom (1/s); caller evaluates psi^2.
    pub probe_scattering_rate: f64,
}

/// Advance one atom's hyperfine state over `dt` and return the number of
/// scattering events (each one a recoil kick for the dynamics).
///
/// F=2 atoms scatter probe light at the given rate and depump with
/// probability eps * beta_d * R_sc * dt; the closed-cycle suppression eps
/// applies only when the matched axial field is active. F=1 atoms repump
/// with probability R_rep * dt while the repumper is on, scattering at
/// R_rep meanwhile.
pub fn hyperfine_step(
    atom: &mut Atom,
    dt: f64,
    inputs: &PumpStepInputs,
    pm: &PumpModel,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    if !atom.alive {
        return Ok(0);
    }
    let eps = match inputs.axial_state {
        AxialFieldState::Matched => pm.closed_cycle_suppression,
        AxialFieldState::Opposite | AxialFieldState::Off => 1.0,
    };
    let mut events = 0u32;
    match atom.f_state {
        FState::F2 => {
            if inputs.probe_on && inputs.probe_scattering_rate > 0.0 {
                events += sample_poisson(inputs.probe_scattering_rate * dt, rng);
                let p = eps * pm.depump_branching * inputs.probe_scattering_rate * dt;
                if p >= 1.0 {
                    return Err(Error::TimestepTooLarge { p });
                }
                debug_assert!(p < 0.1, "depump probability {p} too coarse");
                if p > 0.0 && rng.random::<f64>() < p {
                    atom.f_state = FState::F1;
                }
            }
        }
        FState::F1 => {
            if inputs.repumper_on && pm.repump_rate > 0.0 {
                events += sample_poisson(pm.repump_rate * dt, rng);
                let p = pm.repump_rate * dt;
                if p >= 1.0 {
                    return Err(Error::TimestepTooLarge { p });
                }
                debug_assert!(p < 0.1, "repump probability {p} too coarse");
                if rng.random::<f64>() < p {
                    atom.f_state = FState::F2;
                }
            }
        }
    }
    Ok(events)
}

fn sample_poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(lambda).expect("positive lambda").sample(rng);
    draw as u32
}
