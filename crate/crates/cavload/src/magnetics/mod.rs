//! Time-dependent magnetic fields from coil assemblies and ramp schedules.
//!
//! Two field backends share one interface: an ideal linearized quadrupole
//! (gradient taken straight from the per-pair calibration) and an exact
//! single-loop Biot-Savart evaluation through complete elliptic integrals.
//! A Biot-Savart anti-Helmholtz pair is gradient-calibrated at its center so
//! both backends produce the configured central gradient for the same drive
//! current.

pub mod elliptic;

use crate::constants::MU_0;
use crate::error::{Error, Result};
use crate::vec3::{self, V3};
use elliptic::ellip_ke;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Dimensionless steepness of the tanh ramp. Gives < 1% endpoint slope
/// relative to the peak slope while keeping the ramp visibly smooth.
pub const TANH_STEEPNESS: f64 = 2.5;

/// Newton iteration stops when |B| falls below this (tesla).
pub const ZERO_LOCUS_TOL: f64 = 1e-10;

/// Step for central-difference derivatives of the Biot-Savart field (m).
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    Constant,
    Linear,
    Tanh,
}

/// One piece of a piecewise drive schedule. Values are amperes for coil
/// currents and tesla for bias fields.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RampSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub v_start: f64,
    pub v_end: f64,
    pub shape: RampShape,
}

impl RampSegment {
    pub fn new(t_start: f64, t_end: f64, v_start: f64, v_end: f64, shape: RampShape) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::Config(format!(
                "ramp segment needs t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        Ok(RampSegment { t_start, t_end, v_start, v_end, shape })
    }

    pub fn constant(t_start: f64, t_end: f64, v: f64) -> Result<Self> {
        Self::new(t_start, t_end, v, v, RampShape::Constant)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t_start <= t && t <= self.t_end
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        eval_ramp(self, t)
    }
}

/// Evaluate a ramp segment at time `t`.
///
/// The tanh profile is renormalized so the endpoint values are met exactly:
/// with u in [-1, 1] spanning the segment, the weight is
/// (tanh(s u) + tanh s) / (2 tanh s).
pub fn eval_ramp(seg: &RampSegment, t: f64) -> Result<f64> {
    if !seg.contains(t) {
        return Err(Error::OutOfRange { t, start: seg.t_start, end: seg.t_end });
    }
    let f = match seg.shape {
        RampShape::Constant => {
            return Ok(if t == seg.t_end { seg.v_end } else { seg.v_start });
        }
        RampShape::Linear => (t - seg.t_start) / (seg.t_end - seg.t_start),
        RampShape::Tanh => {
            let u = 2.0 * (t - seg.t_start) / (seg.t_end - seg.t_start) - 1.0;
            let ts = TANH_STEEPNESS.tanh();
            ((TANH_STEEPNESS * u).tanh() + ts) / (2.0 * ts)
        }
    };
    // Convex form keeps the endpoints bit-exact.
    Ok(seg.v_start * (1.0 - f) + seg.v_end * f)
}

fn schedule_value(schedule: &[RampSegment], t: f64) -> Result<f64> {
    for seg in schedule {
        if seg.contains(t) {
            return seg.value(t);
        }
    }
    let start = schedule.first().map_or(f64::NAN, |s| s.t_start);
    let end = schedule.last().map_or(f64::NAN, |s| s.t_end);
    Err(Error::OutOfRange { t, start, end })
}

fn validate_contiguous(schedule: &[RampSegment], what: &str) -> Result<()> {
    for w in schedule.windows(2) {
        let gap = (w[1].t_start - w[0].t_end).abs();
        if gap > 1e-12 * w[0].t_end.abs().max(1.0) {
            return Err(Error::Config(format!(
                "{what}: schedule not contiguous at t = {} s (next segment starts at {})",
                w[0].t_end, w[1].t_start
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Helmholtz,
    AntiHelmholtz,
}

/// Geometry of a coaxial coil pair: two loops of `turns` windings each at
/// `center +/- half_separation * axis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoilPair {
    pub radius: f64,
    pub half_separation: f64,
    pub axis: V3,
    pub center: V3,
    pub turns: f64,
    pub polarity: Polarity,
}

impl CoilPair {
    pub fn new(
        radius: f64,
        half_separation: f64,
        axis: V3,
        center: V3,
        turns: f64,
        polarity: Polarity,
    ) -> Result<Self> {
        if radius <= 0.0 || half_separation <= 0.0 || turns <= 0.0 {
            return Err(Error::Config(
                "coil pair needs positive radius, half_separation and turns".into(),
            ));
        }
        let axis = vec3::normalized(axis)
            .ok_or_else(|| Error::Config("coil axis must be a nonzero vector".into()))?;
        Ok(CoilPair { radius, half_separation, axis, center, turns, polarity })
    }

    /// Central axial gradient per ampere for opposed currents (T/m/A):
    /// 3 mu0 N a^2 h / (a^2 + h^2)^(5/2).
    pub fn gradient_per_amp(&self) -> f64 {
        let a2 = self.radius * self.radius;
        let h = self.half_separation;
        3.0 * MU_0 * self.turns * a2 * h / (a2 + h * h).powf(2.5)
    }

    /// Central field per ampere for co-running currents (T/A):
    /// mu0 N a^2 / (a^2 + h^2)^(3/2).
    pub fn field_per_amp(&self) -> f64 {
        let a2 = self.radius * self.radius;
        let h2 = self.half_separation * self.half_separation;
        MU_0 * self.turns * a2 / (a2 + h2).powf(1.5)
    }
}

/// Ideal linear quadrupole about `center`: in coil-axis coordinates
/// B = gradient * (-x/2, -y/2, z), i.e. the axial gradient is `gradient` and
/// the transverse gradients are -gradient/2 (forced by div B = 0).
pub fn quadrupole_field(r: V3, gradient: f64, center: V3, axis: V3) -> V3 {
    let d = vec3::sub(r, center);
    let z = vec3::dot(d, axis);
    // 1.5 * z * n - 0.5 * d  ==  z*n - (d - z*n)/2
    let mut b = vec3::scale(axis, 1.5 * gradient * z);
    vec3::axpy(&mut b, -0.5 * gradient, d);
    b
}

/// Exact field of a single circular current loop (Biot-Savart, complete
/// elliptic integrals). `current` is the total ampere-turns of the loop.
///
/// In loop-local cylindrical coordinates (rho, z) with loop radius a and
/// m = 4 a rho / ((a + rho)^2 + z^2):
///
/// Bz   = C [ K(m) + (a^2 - rho^2 - z^2) / ((a - rho)^2 + z^2) E(m) ]
/// Brho = C (z/rho) [ -K(m) + (a^2 + rho^2 + z^2) / ((a - rho)^2 + z^2) E(m) ]
///
/// with C = mu0 I / (2 pi sqrt((a + rho)^2 + z^2)).
pub fn loop_field(r: V3, radius: f64, center: V3, axis: V3, current: f64) -> Result<V3> {
    let a = radius;
    let d = vec3::sub(r, center);
    let z = vec3::dot(d, axis);
    let rho_vec = vec3::sub(d, vec3::scale(axis, z));
    let rho = vec3::norm(rho_vec);

    let wire_dist = ((rho - a) * (rho - a) + z * z).sqrt();
    if wire_dist < 1e-9 {
        return Err(Error::Singularity { dist: wire_dist });
    }

    if rho < 1e-12 * a {
        let denom = (a * a + z * z).powf(1.5);
        let bz = MU_0 * current * a * a / (2.0 * denom);
        return Ok(vec3::scale(axis, bz));
    }

    let sum2 = (a + rho) * (a + rho) + z * z;
    let diff2 = (a - rho) * (a - rho) + z * z;
    let m = 4.0 * a * rho / sum2;
    let (k, e) = ellip_ke(m);
    let prefactor = MU_0 * current / (2.0 * PI * sum2.sqrt());

    let bz = prefactor * (k + (a * a - rho * rho - z * z) / diff2 * e);
    let brho = prefactor * (z / rho) * (-k + (a * a + rho * rho + z * z) / diff2 * e);

    let mut b = vec3::scale(axis, bz);
    vec3::axpy(&mut b, brho / rho, rho_vec);
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    IdealQuadrupole,
    BiotSavart,
}

/// A coil pair with its drive schedule and gradient calibration (T/m per A).
///
/// Both backends produce the calibrated central gradient for the same drive
/// current; for Biot-Savart the wire current is rescaled by the ratio of the
/// calibration to the geometric gradient-per-amp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoweredPair {
    pub pair: CoilPair,
    pub schedule: Vec<RampSegment>,
    pub gradient_calibration: f64,
}

impl PoweredPair {
    pub fn current(&self, t: f64) -> Result<f64> {
        schedule_value(&self.schedule, t)
    }
}

/// The complete electromagnet assembly: coil pairs plus three orthogonal
/// homogeneous bias-field schedules (tesla, lab axes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSystem {
    pub pairs: Vec<PoweredPair>,
    pub bias: [Vec<RampSegment>; 3],
    pub backend: Backend,
}

impl FieldSystem {
    pub fn new(pairs: Vec<PoweredPair>, bias: [Vec<RampSegment>; 3], backend: Backend) -> Result<Self> {
        for (i, pp) in pairs.iter().enumerate() {
            if pp.gradient_calibration <= 0.0 {
                return Err(Error::Config(format!(
                    "pair {i}: gradient_calibration must be positive"
                )));
            }
            if pp.schedule.is_empty() {
                return Err(Error::Config(format!("pair {i}: empty drive schedule")));
            }
            validate_contiguous(&pp.schedule, &format!("pair {i}"))?;
        }
        for (axis, sched) in bias.iter().enumerate() {
            validate_contiguous(sched, &format!("bias axis {axis}"))?;
        }
        Ok(FieldSystem { pairs, bias, backend })
    }

    pub fn bias_at(&self, t: f64) -> Result<V3> {
        let mut b = [0.0; 3];
        for (i, sched) in self.bias.iter().enumerate() {
            if !sched.is_empty() {
                b[i] = schedule_value(sched, t)?;
            }
        }
        Ok(b)
    }

    fn pair_field(&self, pp: &PoweredPair, current: f64, r: V3) -> Result<V3> {
        let pair = &pp.pair;
        match (self.backend, pair.polarity) {
            (Backend::IdealQuadrupole, Polarity::AntiHelmholtz) => Ok(quadrupole_field(
                r,
                pp.gradient_calibration * current,
                pair.center,
                pair.axis,
            )),
            (Backend::IdealQuadrupole, Polarity::Helmholtz) => {
                Ok(vec3::scale(pair.axis, pair.field_per_amp() * current))
            }
            (Backend::BiotSavart, polarity) => {
                let offset = vec3::scale(pair.axis, pair.half_separation);
                let upper = vec3::add(pair.center, offset);
                let lower = vec3::sub(pair.center, offset);
                let (amp_turns, lower_sign) = match polarity {
                    Polarity::AntiHelmholtz => {
                        let scale = pp.gradient_calibration / pair.gradient_per_amp();
                        (current * scale * pair.turns, -1.0)
                    }
                    Polarity::Helmholtz => (current * pair.turns, 1.0),
                };
                let bu = loop_field(r, pair.radius, upper, pair.axis, amp_turns)?;
                let bl = loop_field(r, pair.radius, lower, pair.axis, lower_sign * amp_turns)?;
                Ok(vec3::add(bu, bl))
            }
        }
    }

    /// Vector sum of all pair fields plus the homogeneous bias.
    pub fn total_field(&self, t: f64, r: V3) -> Result<V3> {
        let mut b = self.bias_at(t)?;
        for pp in &self.pairs {
            let current = pp.current(t)?;
            if current != 0.0 {
                b = vec3::add(b, self.pair_field(pp, current, r)?);
            }
        }
        Ok(b)
    }

    /// Spatial Jacobian dB_i/dr_j. Analytic for the ideal backend, central
    /// differences (step `FD_STEP`) for Biot-Savart.
    pub fn field_jacobian(&self, t: f64, r: V3) -> Result<[[f64; 3]; 3]> {
        match self.backend {
            Backend::IdealQuadrupole => {
                let mut m = [[0.0; 3]; 3];
                for pp in &self.pairs {
                    if pp.pair.polarity != Polarity::AntiHelmholtz {
                        continue;
                    }
                    let g = pp.gradient_calibration * pp.current(t)?;
                    let n = pp.pair.axis;
                    for i in 0..3 {
                        for j in 0..3 {
                            m[i][j] += g * (1.5 * n[i] * n[j] - if i == j { 0.5 } else { 0.0 });
                        }
                    }
                }
                Ok(m)
            }
            Backend::BiotSavart => {
                let mut m = [[0.0; 3]; 3];
                for j in 0..3 {
                    let mut rp = r;
                    let mut rm = r;
                    rp[j] += FD_STEP;
                    rm[j] -= FD_STEP;
                    let bp = self.total_field(t, rp)?;
                    let bm = self.total_field(t, rm)?;
                    for i in 0..3 {
                        m[i][j] = (bp[i] - bm[i]) / (2.0 * FD_STEP);
                    }
                }
                Ok(m)
            }
        }
    }

    /// Locate the field zero near `guess` by damped Newton iteration on
    /// B(r) = 0. Succeeds when |B| < `ZERO_LOCUS_TOL`.
    pub fn zero_locus(&self, t: f64, guess: V3) -> Result<V3> {
        let mut r = guess;
        let mut b = self.total_field(t, r)?;
        for _ in 0..100 {
            if vec3::norm(b) < ZERO_LOCUS_TOL {
                return Ok(r);
            }
            let jac = self.field_jacobian(t, r)?;
            let step = vec3::solve3(jac, vec3::scale(b, -1.0))
                .ok_or(Error::DegenerateConfiguration)?;
            let mut lambda = 1.0;
            loop {
                let candidate = vec3::add(r, vec3::scale(step, lambda));
                let bc = self.total_field(t, candidate)?;
                if vec3::norm(bc) < vec3::norm(b) {
                    r = candidate;
                    b = bc;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1e-12 {
                    return Err(Error::NoZeroFound(guess[0], guess[1], guess[2], 100));
                }
            }
        }
        if vec3::norm(b) < ZERO_LOCUS_TOL {
            Ok(r)
        } else {
            Err(Error::NoZeroFound(guess[0], guess[1], guess[2], 100))
        }
    }

    /// Zeeman energy mu_eff |B| of an adiabatically following atom (J).
    pub fn zeeman_potential(&self, t: f64, r: V3, mu_eff: f64) -> Result<f64> {
        Ok(mu_eff * vec3::norm(self.total_field(t, r)?))
    }

    /// Gradient of the Zeeman energy: mu_eff J^T B / |B|. Zero at the field
    /// zero itself (the potential has a cusp there).
    pub fn zeeman_gradient(&self, t: f64, r: V3, mu_eff: f64) -> Result<V3> {
        let b = self.total_field(t, r)?;
        let bn = vec3::norm(b);
        if bn < 1e-15 {
            return Ok([0.0; 3]);
        }
        let jac = self.field_jacobian(t, r)?;
        let mut g = [0.0; 3];
        for j in 0..3 {
            for i in 0..3 {
                g[j] += jac[i][j] * b[i];
            }
            g[j] *= mu_eff / bn;
        }
        Ok(g)
    }
}

/// Adiabatic-following trap potential including gravity (J):
/// U = mu_eff |B(r, t)| + mass g (z - height_datum), with z the vertical
/// (lab index 2) coordinate.
pub fn magnetic_potential(
    sys: &FieldSystem,
    t: f64,
    r: V3,
    mu_eff: f64,
    mass: f64,
    gravity: f64,
    height_datum: f64,
) -> Result<f64> {
    Ok(sys.zeeman_potential(t, r, mu_eff)? + mass * gravity * (r[2] - height_datum))
}
