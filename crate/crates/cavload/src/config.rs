//! Run configuration: schema with defaults, unit normalization, override
//! handling, and the output manifest.
//!
//! A config file is TOML with every numeric field accepting either a bare SI
//! number or a "value unit" string. Frequencies are ordinary frequencies
//! (Hz); the 2 pi for angular quantities is applied when domain objects are
//! built. The manifest echoes the fully resolved config (defaults included)
//! as JSON next to the data files; re-running from a manifest reproduces the
//! outputs byte for byte.

use crate::constants::{G_EARTH, MU_B, RB87_D2_WAVELENGTH, RB87_MASS};
use crate::error::{Error, Result};
use crate::magnetics::{
    Backend, CoilPair, FieldSystem, Polarity, PoweredPair, RampSegment, RampShape,
};
use crate::optics::{CavityParams, TrapBeam};
use crate::readout::{AxialFieldState, Detunings, PumpModel};
use crate::units::*;
use crate::vec3::V3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    /// Atomic mass (kg).
    pub mass: f64,
    /// Gravitational acceleration (m/s^2); 0 disables gravity.
    pub gravity: f64,
    /// Effective magnetic moment of the trapped state (J/T).
    pub mu_eff: f64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig { mass: RB87_MASS, gravity: G_EARTH, mu_eff: MU_B }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentSegmentConfig {
    pub t_start: Qty<Time>,
    pub t_end: Qty<Time>,
    pub v_start: Qty<Current>,
    pub v_end: Qty<Current>,
    pub shape: RampShape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSegmentConfig {
    pub t_start: Qty<Time>,
    pub t_end: Qty<Time>,
    pub v_start: Qty<Field>,
    pub v_end: Qty<Field>,
    pub shape: RampShape,
}

impl CurrentSegmentConfig {
    fn to_segment(&self) -> Result<RampSegment> {
        RampSegment::new(
            self.t_start.value(),
            self.t_end.value(),
            self.v_start.value(),
            self.v_end.value(),
            self.shape,
        )
    }
}

impl FieldSegmentConfig {
    fn to_segment(&self) -> Result<RampSegment> {
        RampSegment::new(
            self.t_start.value(),
            self.t_end.value(),
            self.v_start.value(),
            self.v_end.value(),
            self.shape,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    #[serde(default)]
    pub name: String,
    pub radius: Qty<Length>,
    pub half_separation: Qty<Length>,
    #[serde(default = "default_vertical_axis")]
    pub axis: V3,
    #[serde(default = "default_origin")]
    pub center: [Qty<Length>; 3],
    #[serde(default = "default_turns")]
    pub turns: f64,
    pub polarity: Polarity,
    pub gradient_calibration: Qty<Gradient>,
    /// Drive schedule; must end exactly at t = 0 (transport end). The
    /// rampdown to zero is appended by the sequence.
    pub schedule: Vec<CurrentSegmentConfig>,
}

fn default_vertical_axis() -> V3 {
    [0.0, 0.0, 1.0]
}

fn default_origin() -> [Qty<Length>; 3] {
    [Qty::new(0.0), Qty::new(0.0), Qty::new(0.0)]
}

fn default_turns() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagneticsConfig {
    pub backend: Backend,
    pub pairs: Vec<PairConfig>,
    pub bias_x: Vec<FieldSegmentConfig>,
    pub bias_y: Vec<FieldSegmentConfig>,
    pub bias_z: Vec<FieldSegmentConfig>,
}

impl Default for MagneticsConfig {
    /// The paper-like dual quadrupole assembly: a transport pair centered
    /// 11 mm above the cavity axis and a coaxial compensation pair on the
    /// axis. Crossfading the currents carries the field zero down to the
    /// cavity while the two (position-independent) ideal gradients keep
    /// their sum fixed.
    fn default() -> Self {
        let transport_hold = CurrentSegmentConfig {
            t_start: Qty::new(-0.2),
            t_end: Qty::new(-0.1),
            v_start: Qty::new(3.3),
            v_end: Qty::new(3.3),
            shape: RampShape::Constant,
        };
        let transport_fade = CurrentSegmentConfig {
            t_start: Qty::new(-0.1),
            t_end: Qty::new(0.0),
            v_start: Qty::new(3.3),
            v_end: Qty::new(0.0),
            shape: RampShape::Tanh,
        };
        let comp_hold = CurrentSegmentConfig {
            t_start: Qty::new(-0.2),
            t_end: Qty::new(-0.1),
            v_start: Qty::new(0.0),
            v_end: Qty::new(0.0),
            shape: RampShape::Constant,
        };
        let comp_fade = CurrentSegmentConfig {
            t_start: Qty::new(-0.1),
            t_end: Qty::new(0.0),
            v_start: Qty::new(0.0),
            v_end: Qty::new(3.3),
            shape: RampShape::Tanh,
        };
        MagneticsConfig {
            backend: Backend::IdealQuadrupole,
            pairs: vec![
                PairConfig {
                    name: "transport".into(),
                    radius: Qty::new(0.020),
                    half_separation: Qty::new(0.017),
                    axis: [0.0, 0.0, 1.0],
                    center: [Qty::new(0.0), Qty::new(0.0), Qty::new(0.011)],
                    turns: 100.0,
                    polarity: Polarity::AntiHelmholtz,
                    gradient_calibration: Qty::new(0.2),
                    schedule: vec![transport_hold, transport_fade],
                },
                PairConfig {
                    name: "compensation".into(),
                    radius: Qty::new(0.022),
                    half_separation: Qty::new(0.019),
                    axis: [0.0, 0.0, 1.0],
                    center: [Qty::new(0.0), Qty::new(0.0), Qty::new(0.0)],
                    turns: 100.0,
                    polarity: Polarity::AntiHelmholtz,
                    gradient_calibration: Qty::new(0.2),
                    schedule: vec![comp_hold, comp_fade],
                },
            ],
            bias_x: vec![],
            bias_y: vec![],
            bias_z: vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavityConfig {
    /// HWHM linewidth (ordinary frequency).
    pub kappa: Qty<Frequency>,
    pub finesse_over_pi: f64,
    pub length: Qty<Length>,
    pub fsr: Qty<Frequency>,
    pub waist: Qty<Length>,
    /// Atom-mode coupling (ordinary frequency).
    pub g0: Qty<Frequency>,
    pub axis: V3,
    pub mode_center: [Qty<Length>; 3],
}

impl Default for CavityConfig {
    fn default() -> Self {
        CavityConfig {
            kappa: Qty::new(3e6),
            finesse_over_pi: 1060.0,
            length: Qty::new(0.015),
            fsr: Qty::new(10e9),
            waist: Qty::new(127e-6),
            g0: Qty::new(0.33e6),
            axis: [1.0, 0.0, 0.0],
            mode_center: default_origin(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub wavelength: Qty<Length>,
    pub input_power: Qty<Power>,
    pub incoupling_efficiency: f64,
    pub transition_wavelength: Qty<Length>,
    /// Natural linewidth, FWHM (ordinary frequency).
    pub transition_linewidth: Qty<Frequency>,
}

impl BeamConfig {
    fn trap_default() -> Self {
        BeamConfig {
            wavelength: Qty::new(805e-9),
            input_power: Qty::new(1.2e-3),
            incoupling_efficiency: 1.0,
            transition_wavelength: Qty::new(RB87_D2_WAVELENGTH),
            transition_linewidth: Qty::new(6.0666e6),
        }
    }

    fn probe_default() -> Self {
        BeamConfig {
            wavelength: Qty::new(RB87_D2_WAVELENGTH),
            input_power: Qty::new(12e-12),
            incoupling_efficiency: 1.0,
            transition_wavelength: Qty::new(RB87_D2_WAVELENGTH),
            transition_linewidth: Qty::new(6.0666e6),
        }
    }
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self::trap_default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    pub cavity: CavityConfig,
    pub trap_beam: BeamConfig,
    pub probe_beam: BeamConfig,
    /// Include the probe's own (red-detuned) lattice potential.
    pub probe_dipole_enabled: bool,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        OpticsConfig {
            cavity: CavityConfig::default(),
            trap_beam: BeamConfig::trap_default(),
            probe_beam: BeamConfig::probe_default(),
            probe_dipole_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpConfig {
    pub depump_branching: f64,
    pub repump_rate: Qty<Rate>,
    pub closed_cycle_suppression: f64,
    pub saturation_intensity: Qty<Intensity>,
    pub shutter_rise: Qty<Time>,
}

impl Default for PumpConfig {
    fn default() -> Self {
        PumpConfig {
            depump_branching: 0.5,
            repump_rate: Qty::new(5e4),
            closed_cycle_suppression: 0.1,
            saturation_intensity: Qty::new(16.7),
            shutter_rise: Qty::new(1e-3),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    /// Probe-atom detuning (ordinary frequency; negative = red).
    pub delta_a: Qty<Frequency>,
    /// Probe-cavity detuning (ordinary frequency).
    pub delta_c: Qty<Frequency>,
    /// Atomic HWHM (ordinary frequency).
    pub gamma: Qty<Frequency>,
    pub pump: PumpConfig,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            delta_a: Qty::new(-90e6),
            delta_c: Qty::new(2e6),
            gamma: Qty::new(3e6),
            pump: PumpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub n_atoms: usize,
    pub temperature: Qty<Temperature>,
    #[serde(default)]
    pub diffusion_rate: Qty<EnergyRate>,
    #[serde(default = "default_true")]
    pub recoil_enabled: bool,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    /// Coarsest integrator substep.
    #[serde(default = "default_dt_max")]
    pub dt_max: Qty<Time>,
    /// Bound on omega * dt for the adaptive per-atom substeps.
    #[serde(default = "default_substep_theta")]
    pub substep_theta: f64,
    /// Bound on (rate * dt) for stochastic sub-sampling.
    #[serde(default = "default_stochastic_theta")]
    pub stochastic_theta: f64,
    #[serde(default = "default_region_radius")]
    pub capture_region_radius: Qty<Length>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            n_atoms: 2000,
            temperature: Qty::new(20e-6),
            diffusion_rate: Qty::new(0.0),
            recoil_enabled: true,
            master_seed: default_seed(),
            dt_max: default_dt_max(),
            substep_theta: default_substep_theta(),
            stochastic_theta: default_stochastic_theta(),
            capture_region_radius: default_region_radius(),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}
fn default_dt_max() -> Qty<Time> {
    Qty::new(1e-6)
}
fn default_substep_theta() -> f64 {
    0.1
}
fn default_stochastic_theta() -> f64 {
    0.05
}
fn default_region_radius() -> Qty<Length> {
    Qty::new(5e-3)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Magnetic rampdown duration from t = 0; at least 7 ms (faster ramps
    /// shake the cavity piezo).
    #[serde(default = "default_rampdown")]
    pub rampdown_duration: Qty<Time>,
    #[serde(default = "default_probe_on")]
    pub probe_on_at: Qty<Time>,
    /// Absent = repumper never fires.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repumper_on_at: Option<Qty<Time>>,
    #[serde(default = "default_axial_off")]
    pub axial_field: AxialFieldState,
    /// Magnitude of the coaxial bias ramped up during the rampdown when
    /// `axial_field` is not "off".
    #[serde(default = "default_axial_bias")]
    pub axial_bias_field: Qty<Field>,
    pub trap_input_power: Qty<Power>,
    #[serde(default)]
    pub detector_noise_sigma: f64,
    #[serde(default = "default_sample_period")]
    pub sample_period: Qty<Time>,
    pub duration: Qty<Time>,
    /// Final vertical trap position relative to the cavity mode center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertical_offset: Option<Qty<Length>>,
}

fn default_rampdown() -> Qty<Time> {
    Qty::new(7e-3)
}
fn default_probe_on() -> Qty<Time> {
    Qty::new(8e-3)
}
fn default_axial_off() -> AxialFieldState {
    AxialFieldState::Off
}
fn default_axial_bias() -> Qty<Field> {
    Qty::new(0.5e-4)
}
fn default_sample_period() -> Qty<Time> {
    Qty::new(1e-4)
}

impl ScheduleConfig {
    pub fn rampdown_end(&self) -> f64 {
        self.rampdown_duration.value()
    }

    pub fn vertical_offset_m(&self) -> f64 {
        self.vertical_offset.map_or(0.0, |q| q.value())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rampdown_duration.value() < 7e-3 * (1.0 - 1e-9) {
            return Err(Error::Config(format!(
                "rampdown_duration {} s is below the 7 ms piezo-safe minimum",
                self.rampdown_duration.value()
            )));
        }
        if self.probe_on_at.value() < self.rampdown_end() {
            return Err(Error::Config(format!(
                "probe_on_at {} s must not precede the rampdown end {} s",
                self.probe_on_at.value(),
                self.rampdown_end()
            )));
        }
        if self.sample_period.value() <= 0.0 || self.duration.value() <= 0.0 {
            return Err(Error::Config("sample_period and duration must be positive".into()));
        }
        if self.detector_noise_sigma < 0.0 {
            return Err(Error::Config("detector_noise_sigma must be >= 0".into()));
        }
        if self.trap_input_power.value() < 0.0 {
            return Err(Error::Config("trap_input_power must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Stroboscopic,
    Position,
    Power,
    Axial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub kind: ScanKind,
    #[serde(default)]
    pub delays: Vec<Qty<Time>>,
    #[serde(default = "default_runs_per_delay")]
    pub runs_per_delay: usize,
    #[serde(default)]
    pub offsets: Vec<Qty<Length>>,
    #[serde(default)]
    pub powers: Vec<Qty<Power>>,
    /// Dips earlier than this never enter the decay fit.
    #[serde(default = "default_fit_cutoff")]
    pub fit_cutoff: Qty<Time>,
    /// Moving-average window of the dip locator.
    #[serde(default = "default_dip_window")]
    pub dip_window: Qty<Time>,
    /// Dip search range after the repumper switch-on.
    #[serde(default = "default_dip_search")]
    pub dip_search: Qty<Time>,
    /// The two repumper delays probed by the position scan.
    #[serde(default = "default_position_probe_times")]
    pub position_probe_times: [Qty<Time>; 2],
}

fn default_runs_per_delay() -> usize {
    10
}
fn default_fit_cutoff() -> Qty<Time> {
    Qty::new(40e-3)
}
fn default_dip_window() -> Qty<Time> {
    Qty::new(2e-3)
}
fn default_dip_search() -> Qty<Time> {
    Qty::new(30e-3)
}
fn default_position_probe_times() -> [Qty<Time>; 2] {
    [Qty::new(40e-3), Qty::new(60e-3)]
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub write_traces: bool,
    /// Ensemble snapshot times (columnar text files for TOF analysis).
    pub snapshots_at: Vec<Qty<Time>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub magnetics: MagneticsConfig,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default)]
    pub readout: ReadoutConfig,
    pub dynamics: DynamicsConfig,
    pub sequence: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        self.cavity()?;
        self.detunings()?;
        self.pump_model()?.validate()?;
        self.trap_beam(self.sequence.trap_input_power.value())?;
        let probe = self.probe_beam()?;
        let cav = self.cavity()?;
        cav.validate_waist(probe.wavelength)?;
        cav.validate_waist(self.optics.trap_beam.wavelength.value())?;
        if !(0.0..=1.0).contains(&self.optics.trap_beam.incoupling_efficiency)
            || !(0.0..=1.0).contains(&self.optics.probe_beam.incoupling_efficiency)
        {
            return Err(Error::Config("incoupling efficiencies must lie in [0, 1]".into()));
        }
        if self.dynamics.substep_theta <= 0.0 || self.dynamics.substep_theta > 0.5 {
            return Err(Error::Config("substep_theta must lie in (0, 0.5]".into()));
        }
        if self.dynamics.stochastic_theta <= 0.0 || self.dynamics.stochastic_theta > 0.09 {
            return Err(Error::Config("stochastic_theta must lie in (0, 0.09]".into()));
        }
        Ok(())
    }

    pub fn cavity(&self) -> Result<CavityParams> {
        let c = &self.optics.cavity;
        CavityParams::new(
            TWO_PI * c.kappa.value(),
            c.finesse_over_pi,
            c.length.value(),
            c.fsr.value(),
            c.waist.value(),
            TWO_PI * c.g0.value(),
            c.axis,
            [c.mode_center[0].value(), c.mode_center[1].value(), c.mode_center[2].value()],
        )
    }

    pub fn trap_beam(&self, input_power: f64) -> Result<TrapBeam> {
        let b = &self.optics.trap_beam;
        TrapBeam::new(
            b.wavelength.value(),
            input_power,
            b.incoupling_efficiency,
            b.transition_wavelength.value(),
            TWO_PI * b.transition_linewidth.value(),
        )
    }

    pub fn probe_beam(&self) -> Result<TrapBeam> {
        let b = &self.optics.probe_beam;
        TrapBeam::new(
            b.wavelength.value(),
            b.input_power.value(),
            b.incoupling_efficiency,
            b.transition_wavelength.value(),
            TWO_PI * b.transition_linewidth.value(),
        )
    }

    pub fn detunings(&self) -> Result<Detunings> {
        Detunings::new(
            TWO_PI * self.readout.delta_a.value(),
            TWO_PI * self.readout.delta_c.value(),
            TWO_PI * self.readout.gamma.value(),
        )
    }

    pub fn pump_model(&self) -> Result<PumpModel> {
        let p = &self.readout.pump;
        let pm = PumpModel {
            depump_branching: p.depump_branching,
            repump_rate: p.repump_rate.value(),
            closed_cycle_suppression: p.closed_cycle_suppression,
            saturation_intensity: p.saturation_intensity.value(),
            shutter_rise: p.shutter_rise.value(),
        };
        pm.validate()?;
        Ok(pm)
    }

    /// Build the field system for one run: shift the pair centers by the
    /// schedule's vertical offset, append each pair's rampdown-to-zero and a
    /// zero hold to the end of the run, extend bias schedules likewise, and
    /// ramp up the coaxial bias during the rampdown when requested.
    pub fn field_system(&self, schedule: &ScheduleConfig) -> Result<FieldSystem> {
        let offset = schedule.vertical_offset_m();
        let rampdown_end = schedule.rampdown_end();
        let duration = schedule.duration.value();
        let mut pairs = Vec::with_capacity(self.magnetics.pairs.len());
        for pc in &self.magnetics.pairs {
            let mut segs: Vec<RampSegment> =
                pc.schedule.iter().map(|s| s.to_segment()).collect::<Result<_>>()?;
            let end = segs.last().map(|s| s.t_end).unwrap_or(f64::NAN);
            if (end - 0.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "pair {:?}: drive schedule must end at t = 0 (transport end), ends at {end}",
                    pc.name
                )));
            }
            let i0 = segs.last().map(|s| s.v_end).unwrap_or(0.0);
            segs.push(RampSegment::new(0.0, rampdown_end, i0, 0.0, RampShape::Tanh)?);
            if duration > rampdown_end {
                segs.push(RampSegment::constant(rampdown_end, duration, 0.0)?);
            }
            let mut center = [pc.center[0].value(), pc.center[1].value(), pc.center[2].value()];
            center[2] += offset;
            let pair = CoilPair::new(
                pc.radius.value(),
                pc.half_separation.value(),
                pc.axis,
                center,
                pc.turns,
                pc.polarity,
            )?;
            pairs.push(PoweredPair {
                pair,
                schedule: segs,
                gradient_calibration: pc.gradient_calibration.value(),
            });
        }

        let t_min = pairs
            .iter()
            .filter_map(|p| p.schedule.first().map(|s| s.t_start))
            .fold(0.0f64, f64::min);
        let mut bias = [
            convert_bias(&self.magnetics.bias_x, t_min, duration)?,
            convert_bias(&self.magnetics.bias_y, t_min, duration)?,
            convert_bias(&self.magnetics.bias_z, t_min, duration)?,
        ];

        if schedule.axial_field != AxialFieldState::Off {
            let sign = match schedule.axial_field {
                AxialFieldState::Matched => 1.0,
                AxialFieldState::Opposite => -1.0,
                AxialFieldState::Off => unreachable!(),
            };
            let b_ax = sign * schedule.axial_bias_field.value();
            // along the dominant lab component of the cavity axis
            let cav_axis = self.optics.cavity.axis;
            let lab = (0..3)
                .max_by(|&i, &j| cav_axis[i].abs().total_cmp(&cav_axis[j].abs()))
                .unwrap();
            if bias[lab].is_empty() {
                let mut segs = Vec::new();
                if t_min < 0.0 {
                    segs.push(RampSegment::constant(t_min, 0.0, 0.0)?);
                }
                segs.push(RampSegment::new(0.0, rampdown_end, 0.0, b_ax, RampShape::Tanh)?);
                if duration > rampdown_end {
                    segs.push(RampSegment::constant(rampdown_end, duration, b_ax)?);
                }
                bias[lab] = segs;
            } else {
                return Err(Error::Config(
                    "axial_field bias conflicts with an explicit bias schedule on the same axis"
                        .into(),
                ));
            }
        }

        FieldSystem::new(pairs, bias, self.magnetics.backend)
    }

    /// Serialize to the manifest JSON (stable field order, full precision).
    pub fn to_manifest(&self, seed: u64) -> Manifest {
        Manifest { config: self.clone(), seed }
    }
}

fn convert_bias(
    segs: &[FieldSegmentConfig],
    t_min: f64,
    duration: f64,
) -> Result<Vec<RampSegment>> {
    if segs.is_empty() {
        return Ok(vec![]);
    }
    let mut out: Vec<RampSegment> = segs.iter().map(|s| s.to_segment()).collect::<Result<_>>()?;
    // hold the first/last values so the schedule covers the whole run
    let first = out.first().unwrap();
    if first.t_start > t_min {
        out.insert(0, RampSegment::constant(t_min, first.t_start, first.v_start)?);
    }
    let last = out.last().unwrap();
    if last.t_end < duration {
        out.push(RampSegment::constant(last.t_end, duration, last.v_end)?);
    }
    Ok(out)
}

/// The run manifest: the fully resolved config plus the seed actually used.
/// Feeding a manifest back as `--config` reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
}

/// Load a config from TOML (or a manifest JSON), applying `--override`
/// key=value pairs. Returns the config and, for manifests, the stored seed.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, Option<u64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let json_like = path.extension().is_some_and(|e| e == "json")
        || text.trim_start().starts_with('{');
    let (mut table, seed) = if json_like {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid manifest JSON: {e}")))?;
        let (config_value, seed) = match value.get("config") {
            Some(c) => (c.clone(), value.get("seed").and_then(|s| s.as_u64())),
            None => (value, None),
        };
        let toml_text = toml::to_string(&config_value)
            .map_err(|e| Error::Config(format!("manifest conversion failed: {e}")))?;
        let table: toml::Table = toml_text
            .parse()
            .map_err(|e| Error::Config(format!("manifest conversion failed: {e}")))?;
        (table, seed)
    } else {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        (table, None)
    };
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let config: RunConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("{e}")))?;
    config.validate()?;
    Ok((config, seed))
}

pub fn parse_override(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override {spec:?} is not of the form key.path=value"))),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override path {key:?}: {part:?} is not a table"))
            })?;
    }
    let leaf = parts.last().unwrap().to_string();
    // parse the value as a TOML literal; fall back to a string
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    current.insert(leaf, parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dynamics]
n_atoms = 100
temperature = "20 uK"

[sequence]
trap_input_power = "1.2 mW"
duration = "60 ms"
"#;

    fn from_str(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().unwrap();
        let config: RunConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    #[test]
    fn minimal_config_loads_with_defaults() {
        let cfg = from_str(MINIMAL).unwrap();
        assert_eq!(cfg.dynamics.n_atoms, 100);
        assert_eq!(cfg.dynamics.temperature.value(), 20e-6);
        assert_eq!(cfg.sequence.rampdown_duration.value(), 7e-3);
        assert_eq!(cfg.magnetics.pairs.len(), 2);
        // defaults produce valid domain objects
        cfg.cavity().unwrap();
        cfg.detunings().unwrap();
        cfg.field_system(&cfg.sequence).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[typo_section]\nx = 1\n");
        assert!(from_str(&bad).is_err());
        let bad2 = MINIMAL.replace("n_atoms = 100", "n_atoms = 100\nn_atmos = 5");
        assert!(from_str(&bad2).is_err());
    }

    #[test]
    fn missing_required_field_names_it() {
        let text = "[dynamics]\ntemperature = \"1 uK\"\n[sequence]\ntrap_input_power = 0.001\nduration = 0.05\n";
        let err = from_str(text).unwrap_err().to_string();
        assert!(err.contains("n_atoms"), "error should name the missing field: {err}");
    }

    #[test]
    fn sub_7ms_rampdown_is_rejected() {
        let bad = MINIMAL.replace(
            "duration = \"60 ms\"",
            "duration = \"60 ms\"\nrampdown_duration = \"5 ms\"",
        );
        let err = from_str(&bad).unwrap_err().to_string();
        assert!(err.contains("7 ms"), "{err}");
    }

    #[test]
    fn field_system_appends_rampdown_and_holds_zero() {
        let cfg = from_str(MINIMAL).unwrap();
        let sys = cfg.field_system(&cfg.sequence).unwrap();
        // currents exist over the whole run and end at zero
        let b_pre = sys.total_field(-0.05, [0.0, 0.0, 0.005]).unwrap();
        assert!(crate::vec3::norm(b_pre) > 0.0);
        let b_end = sys.total_field(0.06, [0.0, 0.0, 0.005]).unwrap();
        assert_eq!(b_end, [0.0; 3]);
        // out of domain is an error
        assert!(sys.total_field(0.2, [0.0; 3]).is_err());
    }

    #[test]
    fn vertical_offset_moves_the_zero() {
        let cfg = from_str(MINIMAL).unwrap();
        let mut sched = cfg.sequence.clone();
        sched.vertical_offset = Some(Qty::new(0.4e-3));
        let sys = cfg.field_system(&sched).unwrap();
        let zero = sys.zero_locus(0.0, [0.0, 0.0, 0.3e-3]).unwrap();
        approx::assert_relative_eq!(zero[2], 0.4e-3, max_relative = 1e-6);
    }

    #[test]
    fn axial_field_adds_a_coaxial_bias_ramp() {
        let cfg = from_str(MINIMAL).unwrap();
        let mut sched = cfg.sequence.clone();
        sched.axial_field = AxialFieldState::Matched;
        let sys = cfg.field_system(&sched).unwrap();
        let far = [0.0, 0.0, 0.0];
        let b_before = sys.bias_at(-0.05).unwrap();
        assert_eq!(b_before, [0.0; 3]);
        let b_after = sys.bias_at(0.02).unwrap();
        approx::assert_relative_eq!(b_after[0], 0.5e-4, max_relative = 1e-12);
        let _ = far;
        // opposite flips the sign
        sched.axial_field = AxialFieldState::Opposite;
        let sys = cfg.field_system(&sched).unwrap();
        approx::assert_relative_eq!(sys.bias_at(0.02).unwrap()[0], -0.5e-4, max_relative = 1e-12);
    }

    #[test]
    fn overrides_set_nested_fields() {
        let mut table: toml::Table = MINIMAL.parse().unwrap();
        apply_override(&mut table, "dynamics.n_atoms", "5000").unwrap();
        apply_override(&mut table, "sequence.trap_input_power", "\"0.6 mW\"").unwrap();
        apply_override(&mut table, "readout.pump.depump_branching", "0.4").unwrap();
        let cfg: RunConfig = table.try_into().unwrap();
        assert_eq!(cfg.dynamics.n_atoms, 5000);
        assert_eq!(cfg.sequence.trap_input_power.value(), 0.6e-3);
        assert_eq!(cfg.readout.pump.depump_branching, 0.4);
    }

    #[test]
    fn manifest_roundtrip_preserves_values_exactly() {
        let cfg = from_str(MINIMAL).unwrap();
        let manifest = cfg.to_manifest(42);
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config.dynamics.temperature.value(), cfg.dynamics.temperature.value());
        assert_eq!(
            back.config.magnetics.pairs[0].gradient_calibration.value(),
            cfg.magnetics.pairs[0].gradient_calibration.value()
        );
        let json2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, json2);
    }
}
