//! Complete experimental runs and parameter scans.
//!
//! A run starts at t = 0 with the cloud thermally sampled in the transported
//! magnetic trap, ramps the trap down, switches the probe (and optionally the
//! repumper) on, and records the transmittance trace. Atoms are independent,
//! so the integrator advances each atom with its own substep, refined where
//! the standing-wave lattice is stiff; all stochastic draws come from
//! per-atom streams, which keeps traces bit-identical across worker counts.

use crate::analysis::{fit_exponential, FitResult};
use crate::config::{RunConfig, ScanConfig, ScheduleConfig};
use crate::constants::K_B;
use crate::dynamics::{
    apply_recoils, sample_thermal_cloud, verlet_substep, Atom, CaptureModel, Ensemble, FState,
};
use crate::error::{Error, Result};
use crate::magnetics::{magnetic_potential, FieldSystem, RampSegment, TANH_STEEPNESS};
use crate::optics::{
    antinode_intensity, circulating_power, dipole_potential, mode_intensity, trap_depth,
    CavityParams, TrapDepth,
};
use crate::readout::{
    effective_atom_number, invert_transmittance, scattering_rate_at_intensity, transmittance,
    AxialFieldState, Detunings, PumpModel, PumpStepInputs,
};
use crate::rng::{derive_run_seed, trace_stream};
use crate::vec3::{self, V3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

/// Time series of one run (or the average of several runs on the same time
/// grid). Count columns are f64 so averages stay representable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub times: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub n_eff_true: Vec<f64>,
    pub n_f1: Vec<f64>,
    pub n_f2: Vec<f64>,
    pub n_captured: Vec<f64>,
    pub n_escaped: Vec<f64>,
    /// Full config echo + seed (JSON).
    pub manifest: String,
}

impl Trace {
    fn with_capacity(n: usize, manifest: String) -> Self {
        Trace {
            times: Vec::with_capacity(n),
            transmittance: Vec::with_capacity(n),
            n_eff_true: Vec::with_capacity(n),
            n_f1: Vec::with_capacity(n),
            n_f2: Vec::with_capacity(n),
            n_captured: Vec::with_capacity(n),
            n_escaped: Vec::with_capacity(n),
            manifest,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample index of the first time >= t.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x >= t - 1e-12)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t_s,transmittance,n_eff_true,n_F1,n_F2,n_captured,n_escaped")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.times[i],
                self.transmittance[i],
                self.n_eff_true[i],
                self.n_f1[i],
                self.n_f2[i],
                self.n_captured[i],
                self.n_escaped[i]
            )?;
        }
        Ok(())
    }

    /// Pointwise mean of several traces on an identical time grid.
    pub fn average(traces: &[Trace]) -> Result<Trace> {
        let first = traces
            .first()
            .ok_or_else(|| Error::Domain("cannot average zero traces".into()))?;
        let n = first.len();
        for t in traces {
            if t.len() != n || t.times != first.times {
                return Err(Error::Domain("trace time grids differ; cannot average".into()));
            }
        }
        let k = traces.len() as f64;
        let mean = |get: &dyn Fn(&Trace) -> &Vec<f64>| -> Vec<f64> {
            (0..n)
                .map(|i| traces.iter().map(|t| get(t)[i]).sum::<f64>() / k)
                .collect()
        };
        Ok(Trace {
            times: first.times.clone(),
            transmittance: mean(&|t| &t.transmittance),
            n_eff_true: mean(&|t| &t.n_eff_true),
            n_f1: mean(&|t| &t.n_f1),
            n_f2: mean(&|t| &t.n_f2),
            n_captured: mean(&|t| &t.n_captured),
            n_escaped: mean(&|t| &t.n_escaped),
            manifest: first.manifest.clone(),
        })
    }
}

/// Normalized tanh rampdown factor from 1 at t=0 to 0 at t=t_end.
#[inline]
fn rampdown_factor(t: f64, t_end: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t >= t_end {
        return 0.0;
    }
    let u = 2.0 * t / t_end - 1.0;
    let ts = TANH_STEEPNESS.tanh();
    let f = ((TANH_STEEPNESS * u).tanh() + ts) / (2.0 * ts);
    1.0 - f
}

fn schedule_value_clamped(segs: &[RampSegment], t: f64) -> f64 {
    if segs.is_empty() {
        return 0.0;
    }
    let t = t
        .max(segs.first().unwrap().t_start)
        .min(segs.last().unwrap().t_end);
    for seg in segs {
        if seg.contains(t) {
            return seg.value(t).unwrap_or(seg.v_end);
        }
    }
    segs.last().unwrap().v_end
}

struct IdealPairCtx {
    center: V3,
    axis: V3,
    /// Gradient at t = 0 (T/m); decays with the rampdown factor.
    gradient0: f64,
}

/// Everything the per-atom force evaluation needs, pre-reduced to plain
/// numbers. Only the ideal-quadrupole backend gets this fast path; other
/// backends fall back to the generic FieldSystem evaluation.
struct PotentialStack<'a> {
    mode_center: V3,
    axis: V3,
    /// 2/w0^2 and 4/w0^2
    env_coeff: f64,
    grad_coeff: f64,
    u0_trap: f64,
    k_trap: f64,
    u0_probe: f64,
    k_probe: f64,
    probe_dipole: bool,
    probe_on_at: f64,
    shutter_rise: f64,
    gravity_force: f64,
    mu_eff: f64,
    rampdown_end: f64,
    ideal_pairs: Vec<IdealPairCtx>,
    bias: [&'a [RampSegment]; 3],
    generic_fields: Option<&'a FieldSystem>,
}

impl PotentialStack<'_> {
    /// Probe power fraction through the shutter rise.
    #[inline]
    fn shutter(&self, t: f64) -> f64 {
        if t <= self.probe_on_at {
            0.0
        } else if self.shutter_rise <= 0.0 {
            1.0
        } else {
            ((t - self.probe_on_at) / self.shutter_rise).min(1.0)
        }
    }

    /// Mean shutter fraction over a window (exact for the linear rise).
    fn shutter_mean(&self, t0: f64, t1: f64) -> f64 {
        let f0 = self.shutter(t0);
        let f1 = self.shutter(t1);
        if self.shutter_rise <= 0.0 {
            // step: fraction of the window past the switch-on
            if t1 <= self.probe_on_at {
                0.0
            } else if t0 >= self.probe_on_at {
                1.0
            } else {
                (t1 - self.probe_on_at) / (t1 - t0)
            }
        } else {
            0.5 * (f0 + f1)
        }
    }

    #[inline]
    fn magnetic_on(&self, t: f64) -> bool {
        t < self.rampdown_end && (!self.ideal_pairs.is_empty() || self.generic_fields.is_some())
    }

    /// Force plus the probe-mode psi^2 at the same point.
    #[inline]
    fn force_psi2(&self, r: V3, t: f64) -> (V3, f64) {
        let d = vec3::sub(r, self.mode_center);
        let z = vec3::dot(d, self.axis);
        let rho_vec = vec3::sub(d, vec3::scale(self.axis, z));
        let env = (-vec3::norm2(rho_vec) * self.env_coeff).exp();

        let mut f = [0.0, 0.0, self.gravity_force];
        let mut f_axial = 0.0;
        let mut f_trans = 0.0;

        // trap lattice
        if self.u0_trap != 0.0 {
            let (s2, c2) = (2.0 * self.k_trap * z).sin_cos();
            let cos2 = 0.5 * (1.0 + c2);
            f_axial += self.u0_trap * env * self.k_trap * s2;
            f_trans += self.u0_trap * cos2 * env * self.grad_coeff;
        }

        // probe lattice (psi^2 also feeds the scattering rates)
        let (s2p, c2p) = (2.0 * self.k_probe * z).sin_cos();
        let cos2p = 0.5 * (1.0 + c2p);
        let psi2 = cos2p * env;
        let frac = self.shutter(t);
        if self.probe_dipole && frac > 0.0 && self.u0_probe != 0.0 {
            let u = self.u0_probe * frac;
            f_axial += u * env * self.k_probe * s2p;
            f_trans += u * cos2p * env * self.grad_coeff;
        }

        vec3::axpy(&mut f, f_axial, self.axis);
        vec3::axpy(&mut f, f_trans, rho_vec);

        if self.magnetic_on(t) {
            let fm = self.magnetic_force(r, t);
            f = vec3::add(f, fm);
        }
        (f, psi2)
    }

    fn bias_at(&self, t: f64) -> V3 {
        [
            schedule_value_clamped(self.bias[0], t),
            schedule_value_clamped(self.bias[1], t),
            schedule_value_clamped(self.bias[2], t),
        ]
    }

    fn magnetic_force(&self, r: V3, t: f64) -> V3 {
        if let Some(sys) = self.generic_fields {
            return sys
                .zeeman_gradient(t, r, self.mu_eff)
                .map(|g| vec3::scale(g, -1.0))
                .unwrap_or([0.0; 3]);
        }
        let decay = rampdown_factor(t, self.rampdown_end);
        let mut b = self.bias_at(t);
        for p in &self.ideal_pairs {
            let g = p.gradient0 * decay;
            if g == 0.0 {
                continue;
            }
            let d = vec3::sub(r, p.center);
            let zn = vec3::dot(d, p.axis);
            // A d = 1.5 n (n.d) - 0.5 d
            vec3::axpy(&mut b, 1.5 * g * zn, p.axis);
            vec3::axpy(&mut b, -0.5 * g, d);
        }
        let bn = vec3::norm(b);
        if bn < 1e-15 {
            return [0.0; 3];
        }
        // grad|B| = M^T B / |B| with M = sum g_i A_i (A symmetric)
        let mut mb = [0.0; 3];
        for p in &self.ideal_pairs {
            let g = p.gradient0 * decay;
            if g == 0.0 {
                continue;
            }
            let zn = vec3::dot(b, p.axis);
            vec3::axpy(&mut mb, 1.5 * g * zn, p.axis);
            vec3::axpy(&mut mb, -0.5 * g, b);
        }
        vec3::scale(mb, -self.mu_eff / bn)
    }
}

struct RunContext<'a> {
    stack: PotentialStack<'a>,
    cav: &'a CavityParams,
    det: Detunings,
    pump: PumpModel,
    kappa: f64,
    g0: f64,
    probe_wavelength: f64,
    probe_i_antinode: f64,
    repumper_on_at: Option<f64>,
    axial_state: AxialFieldState,
    diffusion_rate: f64,
    recoil_enabled: bool,
    dt_max: f64,
    substep_theta: f64,
    stochastic_theta: f64,
    region_radius: f64,
    mass: f64,
    gravity: f64,
    /// Stiffness scale: axial lattice frequency at full depth on axis.
    omega_axial_max: f64,
    trap_depth_signed: f64,
    probe_depth_signed: f64,
}

impl RunContext<'_> {
    /// Advance one atom through [t0, t1] with its own substep, then apply
    /// the stochastic channels (hyperfine pumping, recoils, diffusion).
    fn advance_atom(
        &self,
        atom: &mut Atom,
        rng: &mut rand_chacha::ChaCha8Rng,
        t0: f64,
        t1: f64,
    ) -> Result<()> {
        if !atom.alive {
            return Ok(());
        }
        let window = t1 - t0;

        // Local stiffness bound: the lattice frequency at the smallest
        // transverse distance the atom can reach within this window.
        let d = vec3::sub(atom.pos, self.stack.mode_center);
        let z = vec3::dot(d, self.stack.axis);
        let rho = (vec3::norm2(d) - z * z).max(0.0).sqrt();
        let reach = vec3::norm(atom.vel) * window + 0.5 * self.gravity * window * window;
        let rho_eff = (rho - reach).max(0.0);
        let env_max = (-rho_eff * rho_eff * self.stack.env_coeff).exp();
        let omega_loc = self.omega_axial_max * env_max.sqrt();
        let mut dt_target = self.dt_max;
        if omega_loc > 0.0 {
            dt_target = dt_target.min(self.substep_theta / omega_loc);
        }
        let n_sub = (window / dt_target).ceil().max(1.0) as usize;
        let dt = window / n_sub as f64;

        let mut psi2_acc = 0.0;
        for i in 0..n_sub {
            let t_mid = t0 + (i as f64 + 0.5) * dt;
            let field = |r: V3, t: f64| self.stack.force_psi2(r, t).0;
            verlet_substep(atom, &field, t_mid, dt, self.mass)?;
            psi2_acc += mode_intensity(atom.pos, self.cav, self.probe_wavelength);
        }
        let psi2_mean = psi2_acc / n_sub as f64;

        // Stochastic channels on window-averaged rates.
        let frac_mean = self.stack.shutter_mean(t0, t1);
        let probe_on = frac_mean > 0.0;
        let r_sc = if probe_on {
            scattering_rate_at_intensity(
                self.probe_i_antinode * frac_mean * psi2_mean,
                self.pump_linewidth(),
                &self.det,
                self.pump.saturation_intensity,
            )
        } else {
            0.0
        };
        let repumper_on = self.repumper_on_at.is_some_and(|t_on| t1 > t_on);
        let mut rate_bound = r_sc;
        if repumper_on {
            rate_bound = rate_bound.max(self.pump.repump_rate);
        }
        if rate_bound > 0.0 {
            let n_stoch = ((rate_bound * window) / self.stochastic_theta).ceil().max(1.0) as usize;
            let dt_s = window / n_stoch as f64;
            let inputs = PumpStepInputs {
                probe_on,
                repumper_on,
                axial_state: self.axial_state,
                probe_scattering_rate: r_sc,
            };
            let mut events = 0u32;
            for _ in 0..n_stoch {
                events +=
                    crate::readout::hyperfine_step(atom, dt_s, &inputs, &self.pump, rng)?;
            }
            if self.recoil_enabled && events > 0 {
                apply_recoils(atom, events, self.probe_wavelength, self.mass, rng);
            }
        }

        if self.diffusion_rate > 0.0 {
            let sigma = (2.0 * self.diffusion_rate * window / (3.0 * self.mass)).sqrt();
            for k in 0..3 {
                let g: f64 = StandardNormal.sample(rng);
                atom.vel[k] += sigma * g;
            }
        }

        // bookkeeping region
        if vec3::norm2(vec3::sub(atom.pos, self.stack.mode_center))
            > self.region_radius * self.region_radius
        {
            atom.alive = false;
        }
        Ok(())
    }

    fn pump_linewidth(&self) -> f64 {
        // atomic linewidth FWHM = 2 gamma (gamma is the HWHM)
        2.0 * self.det.gamma
    }
}

fn build_context<'a>(
    cfg: &'a RunConfig,
    schedule: &'a ScheduleConfig,
    cav: &'a CavityParams,
    fields: &'a FieldSystem,
) -> Result<RunContext<'a>> {
    let det = cfg.detunings()?;
    let pump = cfg.pump_model()?;
    let trap_beam = cfg.trap_beam(schedule.trap_input_power.value())?;
    let probe_beam = cfg.probe_beam()?;
    let trap = trap_depth(&trap_beam, cav);
    let probe = trap_depth(&probe_beam, cav);
    let probe_i_antinode = antinode_intensity(circulating_power(&probe_beam, cav), cav);
    let mass = cfg.constants.mass;
    let gravity = cfg.constants.gravity;

    let use_fast_magnetics = fields.backend == crate::magnetics::Backend::IdealQuadrupole;
    let ideal_pairs = if use_fast_magnetics {
        fields
            .pairs
            .iter()
            .map(|pp| {
                let i0 = pp.current(0.0).unwrap_or(0.0);
                IdealPairCtx {
                    center: pp.pair.center,
                    axis: pp.pair.axis,
                    gradient0: pp.gradient_calibration * i0,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let k_trap = 2.0 * PI / trap_beam.wavelength;
    let k_probe = 2.0 * PI / probe_beam.wavelength;
    let depth_total = trap.depth + if cfg.optics.probe_dipole_enabled { probe.depth } else { 0.0 };
    let k_max = k_trap.max(k_probe);
    let omega_axial_max = if depth_total > 0.0 {
        k_max * (2.0 * depth_total / mass).sqrt()
    } else {
        0.0
    };

    let stack = PotentialStack {
        mode_center: cav.mode_center,
        axis: cav.axis,
        env_coeff: 2.0 / (cav.waist * cav.waist),
        grad_coeff: 4.0 / (cav.waist * cav.waist),
        u0_trap: trap.signed(),
        k_trap,
        u0_probe: probe.signed(),
        k_probe,
        probe_dipole: cfg.optics.probe_dipole_enabled,
        probe_on_at: schedule.probe_on_at.value(),
        shutter_rise: pump.shutter_rise,
        gravity_force: -mass * gravity,
        mu_eff: cfg.constants.mu_eff,
        rampdown_end: schedule.rampdown_end(),
        ideal_pairs,
        bias: [&fields.bias[0], &fields.bias[1], &fields.bias[2]],
        generic_fields: if use_fast_magnetics { None } else { Some(fields) },
    };

    Ok(RunContext {
        stack,
        cav,
        det,
        pump,
        kappa: cav.kappa,
        g0: cav.g0,
        probe_wavelength: probe_beam.wavelength,
        probe_i_antinode,
        repumper_on_at: schedule.repumper_on_at.map(|q| q.value()),
        axial_state: schedule.axial_field,
        diffusion_rate: cfg.dynamics.diffusion_rate.value(),
        recoil_enabled: cfg.dynamics.recoil_enabled,
        dt_max: cfg.dynamics.dt_max.value(),
        substep_theta: cfg.dynamics.substep_theta,
        stochastic_theta: cfg.dynamics.stochastic_theta,
        region_radius: cfg.dynamics.capture_region_radius.value(),
        mass,
        gravity,
        omega_axial_max,
        trap_depth_signed: trap.signed(),
        probe_depth_signed: probe.signed(),
    })
}

/// Execute one run and record its trace; `observer` sees the ensemble at
/// every sample instant (used for snapshot export).
pub fn run_sequence_with<F>(
    cfg: &RunConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    mut observer: F,
) -> Result<Trace>
where
    F: FnMut(f64, &Ensemble),
{
    schedule.validate()?;
    let cav = cfg.cavity()?;
    let fields = cfg.field_system(schedule)?;
    let ctx = build_context(cfg, schedule, &cav, &fields)?;

    // Sample the cloud in the transported trap at t = 0 (magnetic +
    // gravity); without coils, fall back to the optical potential so
    // capture-only studies still work.
    let mass = ctx.mass;
    let gravity = ctx.gravity;
    let mu_eff = cfg.constants.mu_eff;
    let offset = schedule.vertical_offset_m();
    let mut center_guess = cav.mode_center;
    center_guess[2] += offset;
    let has_pairs = !fields.pairs.is_empty();
    let trap_depth_for_sampling = TrapDepth {
        depth: ctx.trap_depth_signed.abs(),
        repulsive: ctx.trap_depth_signed > 0.0,
    };
    let sample_potential = |r: V3| -> f64 {
        if has_pairs {
            magnetic_potential(&fields, 0.0, r, mu_eff, mass, gravity, 0.0).unwrap_or(f64::MAX)
        } else {
            dipole_potential(r, &trap_depth_for_sampling, &cav, ctx.probe_wavelength)
                + mass * gravity * r[2]
        }
    };
    let center = if has_pairs {
        fields.zero_locus(0.0, center_guess).unwrap_or(center_guess)
    } else {
        center_guess
    };
    let mut ens = sample_thermal_cloud(
        cfg.dynamics.n_atoms,
        cfg.dynamics.temperature.value(),
        sample_potential,
        center,
        mass,
        seed,
    )
    .map_err(|e| e.at_time(0.0))?;

    let manifest = serde_json::to_string(&cfg.to_manifest(seed))
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    let duration = schedule.duration.value();
    let period = schedule.sample_period.value();
    let steps = (duration / period).round().max(1.0) as usize;
    let mut trace = Trace::with_capacity(steps + 1, manifest);
    let mut noise_rng = trace_stream(seed);
    let noise_sigma = schedule.detector_noise_sigma;

    let lattices = [
        (
            TrapDepth { depth: ctx.trap_depth_signed.abs(), repulsive: ctx.trap_depth_signed > 0.0 },
            cfg.optics.trap_beam.wavelength.value(),
        ),
        (
            TrapDepth {
                depth: ctx.probe_depth_signed.abs(),
                repulsive: ctx.probe_depth_signed > 0.0,
            },
            ctx.probe_wavelength,
        ),
    ];

    let mut record = |trace: &mut Trace, ens: &Ensemble, t: f64, noise_rng: &mut rand_chacha::ChaCha8Rng| {
        let mut n_f1 = 0usize;
        let mut n_f2 = 0usize;
        let mut escaped = 0usize;
        for a in &ens.atoms {
            if !a.alive {
                escaped += 1;
            } else {
                match a.f_state {
                    FState::F1 => n_f1 += 1,
                    FState::F2 => n_f2 += 1,
                }
            }
        }
        // capture predicate is meaningful once the magnetic trap is off
        let captured = if t >= ctx.stack.rampdown_end - 1e-12 {
            let frac = ctx.stack.shutter(t);
            let active: Vec<(TrapDepth, f64)> = lattices
                .iter()
                .enumerate()
                .filter_map(|(i, (d, lam))| {
                    let scale = if i == 1 {
                        if cfg.optics.probe_dipole_enabled { frac } else { 0.0 }
                    } else {
                        1.0
                    };
                    if d.depth * scale > 0.0 {
                        Some((TrapDepth { depth: d.depth * scale, repulsive: d.repulsive }, *lam))
                    } else {
                        None
                    }
                })
                .collect();
            let model = CaptureModel {
                cav: &cav,
                lattices: &active,
                gravity,
                mass,
                region_radius: ctx.region_radius,
            };
            ens.atoms.iter().filter(|a| model.is_captured(a)).count()
        } else {
            0
        };

        let probe_active = ctx.stack.shutter(t) > 0.0;
        let (n_eff, t_true) = if probe_active {
            let n_eff = effective_atom_number(ens, &cav, ctx.probe_wavelength);
            (n_eff, transmittance(n_eff, &ctx.det, ctx.g0, ctx.kappa))
        } else {
            (0.0, 1.0)
        };
        let measured = if noise_sigma > 0.0 {
            let g: f64 = StandardNormal.sample(noise_rng);
            (t_true + noise_sigma * g).clamp(0.0, 1.0 + 3.0 * noise_sigma)
        } else {
            t_true
        };

        trace.times.push(t);
        trace.transmittance.push(measured);
        trace.n_eff_true.push(n_eff);
        trace.n_f1.push(n_f1 as f64);
        trace.n_f2.push(n_f2 as f64);
        trace.n_captured.push(captured as f64);
        trace.n_escaped.push(escaped as f64);
    };

    record(&mut trace, &ens, 0.0, &mut noise_rng);
    observer(0.0, &ens);

    for step_idx in 1..=steps {
        let t0 = (step_idx - 1) as f64 * period;
        let t1 = step_idx as f64 * period;
        ens.try_for_each_atom(|atom, rng| ctx.advance_atom(atom, rng, t0, t1))
            .map_err(|e| e.at_time(t1))?;
        ens.t = t1;
        record(&mut trace, &ens, t1, &mut noise_rng);
        observer(t1, &ens);
    }

    Ok(trace)
}

pub fn run_sequence(cfg: &RunConfig, schedule: &ScheduleConfig, seed: u64) -> Result<Trace> {
    run_sequence_with(cfg, schedule, seed, |_, _| {})
}

/// A located repumper dip: its delay, the inferred effective atom number,
/// the Poisson-like fit weight, and the readout-noise propagation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DipResult {
    pub delay: f64,
    pub n_eff: f64,
    pub sigma_stat: f64,
    pub sigma_readout: f64,
    pub transmittance_min: f64,
    pub resolved: bool,
}

/// Locate the post-repumper dip on an averaged trace: minimum of a centered
/// moving average within [repumper_on, repumper_on + dip_search].
pub fn locate_dip(
    trace: &Trace,
    delay: f64,
    scan: &ScanConfig,
    det: &Detunings,
    g0: f64,
    kappa: f64,
    noise_sigma: f64,
    runs_averaged: usize,
) -> Result<DipResult> {
    let period = if trace.len() >= 2 { trace.times[1] - trace.times[0] } else { 0.0 };
    let not_found = DipResult {
        delay,
        n_eff: 0.0,
        sigma_stat: 1.0,
        sigma_readout: 0.0,
        transmittance_min: 1.0,
        resolved: false,
    };
    if period <= 0.0 || delay >= *trace.times.last().unwrap_or(&0.0) {
        return Ok(not_found);
    }
    let half = ((scan.dip_window.value() / period / 2.0).round() as usize).max(1);
    let lo = trace.index_at(delay).unwrap_or(trace.len());
    let hi = trace
        .index_at(delay + scan.dip_search.value())
        .unwrap_or(trace.len() - 1);
    if lo >= trace.len() || lo > hi {
        return Ok(not_found);
    }
    let smoothed = |i: usize| -> f64 {
        let a = i.saturating_sub(half);
        let b = (i + half).min(trace.len() - 1);
        trace.transmittance[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
    };
    let mut best = f64::MAX;
    for i in lo..=hi {
        let v = smoothed(i);
        if v < best {
            best = v;
        }
    }
    let window_samples = 2 * half + 1;
    let sigma_t_mean = if noise_sigma > 0.0 {
        noise_sigma / ((runs_averaged * window_samples) as f64).sqrt()
    } else {
        0.0
    };
    // a dip must stand out of the noise floor to count as resolved
    let floor = (3.0 * sigma_t_mean).max(1e-4);
    let resolved = best < 1.0 - floor;
    let t_min = best.clamp(1e-9, 1.0 + 2.0 * noise_sigma).min(crate::readout::TRANSMITTANCE_NOISE_CLAMP);
    let n_eff = if resolved {
        invert_transmittance(t_min, det, g0, kappa)?
    } else {
        0.0
    };
    // first-order propagation of the inversion at the dip
    let sigma_readout = if sigma_t_mean > 0.0 && resolved {
        let a = kappa * kappa + det.delta_c * det.delta_c;
        let shifted = (a / t_min - kappa * kappa).max(1e-30).sqrt();
        let dn_dt = det.delta_a.abs() / (g0 * g0) * a / (2.0 * t_min * t_min * shifted);
        dn_dt * sigma_t_mean
    } else {
        0.0
    };
    Ok(DipResult {
        delay,
        n_eff,
        sigma_stat: n_eff.sqrt().max(1.0),
        sigma_readout,
        transmittance_min: best,
        resolved,
    })
}

#[derive(Debug, Serialize)]
pub struct StroboscopicResult {
    pub averaged: Vec<Trace>,
    pub dips: Vec<DipResult>,
}

/// Run `runs_per_delay` sequences per repumper delay (distinct derived
/// seeds), average them, and locate each dip.
pub fn stroboscopic_scan(
    cfg: &RunConfig,
    delays: &[f64],
    runs_per_delay: usize,
    scan: &ScanConfig,
    seed: u64,
) -> Result<StroboscopicResult> {
    let det = cfg.detunings()?;
    let cav = cfg.cavity()?;
    let mut averaged = Vec::with_capacity(delays.len());
    let mut dips = Vec::with_capacity(delays.len());
    for (di, &delay) in delays.iter().enumerate() {
        let mut schedule = cfg.sequence.clone();
        schedule.repumper_on_at = Some(delay.into());
        let needed = delay + scan.dip_search.value() + 5e-3;
        if needed > schedule.duration.value() {
            schedule.duration = needed.into();
        }
        let runs: Vec<Trace> = (0..runs_per_delay.max(1))
            .map(|r| {
                let run_seed = derive_run_seed(seed, (di * runs_per_delay.max(1) + r) as u64);
                run_sequence(cfg, &schedule, run_seed)
            })
            .collect::<Result<_>>()?;
        let mean = Trace::average(&runs)?;
        let dip = locate_dip(
            &mean,
            delay,
            scan,
            &det,
            cav.g0,
            cav.kappa,
            schedule.detector_noise_sigma,
            runs_per_delay.max(1),
        )?;
        averaged.push(mean);
        dips.push(dip);
    }
    Ok(StroboscopicResult { averaged, dips })
}

/// Dip-derived decay points eligible for the trapping-time fit.
pub fn decay_points(dips: &[DipResult], fit_cutoff: f64) -> Vec<(f64, f64, f64)> {
    dips.iter()
        .filter(|d| d.resolved && d.delay > fit_cutoff && d.n_eff > 0.0)
        .map(|d| (d.delay, d.n_eff, d.sigma_stat))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct PowerPoint {
    pub power: f64,
    pub tau: Option<f64>,
    pub sigma_tau: Option<f64>,
    pub points_used: usize,
    pub dips: Vec<DipResult>,
    pub fit_error: Option<String>,
}

/// Trapping time versus trap input power: a stroboscopic scan and an
/// exponential decay fit per power. Fit failures flag the row and the scan
/// continues.
pub fn power_scan(
    cfg: &RunConfig,
    powers: &[f64],
    delays: &[f64],
    runs_per_delay: usize,
    scan: &ScanConfig,
    seed: u64,
) -> Result<Vec<PowerPoint>> {
    if powers.len() >= 4 {
        let max = powers.iter().cloned().fold(f64::MIN, f64::max);
        let min = powers.iter().cloned().fold(f64::MAX, f64::min);
        if max < 4.0 * min {
            return Err(Error::Config(format!(
                "power scan should span at least a 4x range, got [{min}, {max}]"
            )));
        }
    } else {
        return Err(Error::Config(format!(
            "power scan needs at least 4 powers, got {}",
            powers.len()
        )));
    }
    let mut out = Vec::with_capacity(powers.len());
    for (pi, &power) in powers.iter().enumerate() {
        let mut cfg_p = cfg.clone();
        cfg_p.sequence.trap_input_power = power.into();
        let scan_seed = derive_run_seed(seed, 0x5000 + pi as u64);
        let res = stroboscopic_scan(&cfg_p, delays, runs_per_delay, scan, scan_seed)?;
        let pts = decay_points(&res.dips, scan.fit_cutoff.value());
        let (tau, sigma_tau, err) = match fit_exponential(&pts) {
            Ok(fit) if fit.converged => {
                (fit.param("tau"), fit.uncertainty("tau"), None)
            }
            Ok(_) => (None, None, Some("fit did not converge".to_string())),
            Err(e) => (None, None, Some(e.to_string())),
        };
        out.push(PowerPoint {
            power,
            tau,
            sigma_tau,
            points_used: pts.len(),
            dips: res.dips,
            fit_error: err,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct PositionPoint {
    pub offset: f64,
    /// Dip-inferred n_eff at the two configured probe delays.
    pub n_eff: [f64; 2],
}

/// Capture versus final vertical transport position.
pub fn position_scan(
    cfg: &RunConfig,
    offsets: &[f64],
    scan: &ScanConfig,
    seed: u64,
) -> Result<Vec<PositionPoint>> {
    let delays = [
        scan.position_probe_times[0].value(),
        scan.position_probe_times[1].value(),
    ];
    let mut out = Vec::with_capacity(offsets.len());
    for (oi, &offset) in offsets.iter().enumerate() {
        let mut cfg_o = cfg.clone();
        cfg_o.sequence.vertical_offset = Some(offset.into());
        let scan_seed = derive_run_seed(seed, 0x9000 + oi as u64);
        let res = stroboscopic_scan(&cfg_o, &delays, scan.runs_per_delay, scan, scan_seed)?;
        out.push(PositionPoint {
            offset,
            n_eff: [res.dips[0].n_eff, res.dips[1].n_eff],
        });
    }
    Ok(out)
}

/// Depumping suppression by the coaxial field: one no-repumper sequence per
/// axial setting, same seeds across settings.
pub fn axial_field_scan(
    cfg: &RunConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<(AxialFieldState, Trace)>> {
    let settings = [AxialFieldState::Matched, AxialFieldState::Opposite, AxialFieldState::Off];
    let mut out = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut schedule = cfg.sequence.clone();
        schedule.axial_field = setting;
        schedule.repumper_on_at = None;
        let traces: Vec<Trace> = (0..runs.max(1))
            .map(|r| run_sequence(cfg, &schedule, derive_run_seed(seed, r as u64)))
            .collect::<Result<_>>()?;
        out.push((setting, Trace::average(&traces)?));
    }
    Ok(out)
}

/// Fit an exponential to the captured-atom count between `t_from` and the
/// repumper switch-on (or trace end): the direct trapping-time measurement.
pub fn fit_captured_decay(trace: &Trace, t_from: f64, t_to: f64) -> Result<FitResult> {
    let pts: Vec<(f64, f64, f64)> = trace
        .times
        .iter()
        .zip(trace.n_captured.iter())
        .filter(|(&t, &n)| t >= t_from && t <= t_to && n > 0.0)
        .map(|(&t, &n)| (t, n, n.sqrt().max(1.0)))
        .collect();
    fit_exponential(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    pub(crate) fn test_config(n_atoms: usize, text_extra: &str) -> RunConfig {
        let text = format!(
            r#"
[dynamics]
n_atoms = {n_atoms}
temperature = "12 uK"
master_seed = 7

[sequence]
trap_input_power = "1.2 mW"
duration = "30 ms"
{text_extra}
"#
        );
        let table: toml::Table = text.parse().unwrap();
        let cfg: RunConfig = table.try_into().unwrap();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn empty_cloud_gives_unit_transmittance() {
        let cfg = test_config(0, "");
        let trace = run_sequence(&cfg, &cfg.sequence, 3).unwrap();
        assert!(trace.transmittance.iter().all(|&t| t == 1.0));
        assert!(trace.n_eff_true.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn trace_grid_and_probe_off_columns() {
        let cfg = test_config(50, "");
        let trace = run_sequence(&cfg, &cfg.sequence, 3).unwrap();
        assert_eq!(trace.len(), 301);
        assert_eq!(trace.times[0], 0.0);
        // before the probe opens the transmittance is exactly 1
        for (i, &t) in trace.times.iter().enumerate() {
            if t <= cfg.sequence.probe_on_at.value() {
                assert_eq!(trace.transmittance[i], 1.0);
                assert_eq!(trace.n_eff_true[i], 0.0);
            }
        }
    }

    #[test]
    fn trace_is_bit_deterministic() {
        let cfg = test_config(120, "");
        let a = run_sequence(&cfg, &cfg.sequence, 11).unwrap();
        let b = run_sequence(&cfg, &cfg.sequence, 11).unwrap();
        assert_eq!(a.transmittance, b.transmittance);
        assert_eq!(a.n_eff_true, b.n_eff_true);
        assert_eq!(a.n_captured, b.n_captured);
        let c = run_sequence(&cfg, &cfg.sequence, 12).unwrap();
        assert_ne!(a.transmittance, c.transmittance);
    }

    #[test]
    fn inversion_consistency_on_noiseless_trace() {
        let cfg = test_config(200, "");
        let cav = cfg.cavity().unwrap();
        let det = cfg.detunings().unwrap();
        let trace = run_sequence(&cfg, &cfg.sequence, 5).unwrap();
        for i in 0..trace.len() {
            let n = invert_transmittance(trace.transmittance[i], &det, cav.g0, cav.kappa).unwrap();
            assert!(
                (n - trace.n_eff_true[i]).abs() <= 1e-9 * trace.n_eff_true[i].max(1.0),
                "inversion inconsistency at sample {i}"
            );
        }
    }

    #[test]
    fn csv_has_the_contracted_header() {
        let cfg = test_config(0, "");
        let trace = run_sequence(&cfg, &cfg.sequence, 3).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_s,transmittance,n_eff_true,n_F1,n_F2,n_captured,n_escaped\n"));
    }
}
