//! Weighted least-squares fits for the derived quantities: exponential
//! trapping time, linear trapping-time-vs-power with its temperature
//! intercept, and time-of-flight thermometry.

use crate::constants::K_B;
use crate::error::{Error, Result};
use crate::optics::{trap_depth, CavityParams, TrapBeam};
use crate::vec3::V3;
use serde::{Deserialize, Serialize};

/// Result of a fit: named parameters, covariance (same order), residual
/// norm, and convergence metadata. Uncertainties are the square roots of the
/// covariance diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<(String, f64)>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn uncertainty(&self, name: &str) -> Option<f64> {
        let idx = self.params.iter().position(|(n, _)| n == name)?;
        self.covariance
            .get(idx)
            .and_then(|row| row.get(idx))
            .map(|v| v.max(0.0).sqrt())
    }
}

const LM_MAX_ITER: usize = 200;
const LM_STEP_TOL: f64 = 1e-8;
const LM_LAMBDA_INIT: f64 = 1e-3;

/// Weighted fit of n(t) = A exp(-t / tau) by Levenberg-Marquardt, seeded
/// from the log-linear regression. Points are (t, n, sigma_n).
pub fn fit_exponential(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "exponential fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    for (i, &(_, n, sigma)) in points.iter().enumerate() {
        if !(n > 0.0) {
            return Err(Error::FitInitialization { index: i, value: n });
        }
        if !(sigma > 0.0) {
            return Err(Error::DegenerateData(format!("sigma[{i}] must be positive, got {sigma}")));
        }
    }

    // log-linear initialization: ln n = ln A - t / tau, weights (n / sigma)^2
    let logpts: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|&(t, n, s)| (t, n.ln(), s / n)) // sigma_ln = sigma / n
        .collect();
    let init = weighted_linear(&logpts)?;
    let (slope, intercept) = init;
    if slope == 0.0 {
        return Err(Error::DegenerateData("initial slope is zero; no decay in data".into()));
    }
    let mut a = intercept.exp();
    let mut tau = -1.0 / slope;

    let residuals = |a: f64, tau: f64| -> Vec<f64> {
        points
            .iter()
            .map(|&(t, n, s)| (a * (-t / tau).exp() - n) / s)
            .collect()
    };
    let chi2 = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();

    let mut lambda = LM_LAMBDA_INIT;
    let mut r = residuals(a, tau);
    let mut best = chi2(&r);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..LM_MAX_ITER {
        iterations += 1;
        // Jacobian of the residuals wrt (A, tau)
        let mut jtj = [[0.0f64; 2]; 2];
        let mut jtr = [0.0f64; 2];
        for (&(t, _, s), &ri) in points.iter().zip(r.iter()) {
            let e = (-t / tau).exp();
            let ja = e / s;
            let jt = a * e * t / (tau * tau * s);
            jtj[0][0] += ja * ja;
            jtj[0][1] += ja * jt;
            jtj[1][1] += jt * jt;
            jtr[0] += ja * ri;
            jtr[1] += jt * ri;
        }
        jtj[1][0] = jtj[0][1];
        if !jtj.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::DegenerateData("non-finite normal equations".into()));
        }

        let mut accepted = false;
        for _ in 0..40 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                return Err(Error::DegenerateData("singular normal equations".into()));
            }
            let da = (-jtr[0] * m[1][1] + jtr[1] * m[0][1]) / det;
            let dtau = (-jtr[1] * m[0][0] + jtr[0] * m[1][0]) / det;
            let (a_new, tau_new) = (a + da, tau + dtau);
            let r_new = residuals(a_new, tau_new);
            let c_new = chi2(&r_new);
            if c_new.is_finite() && c_new <= best {
                let rel_step =
                    (da / a_new).abs().max((dtau / tau_new).abs());
                a = a_new;
                tau = tau_new;
                r = r_new;
                best = c_new;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if rel_step < LM_STEP_TOL {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if converged || !accepted {
            converged = converged || accepted;
            break;
        }
    }

    // covariance = (J^T W J)^-1 at the optimum (absolute sigmas)
    let mut jtj = [[0.0f64; 2]; 2];
    for &(t, _, s) in points {
        let e = (-t / tau).exp();
        let ja = e / s;
        let jt = a * e * t / (tau * tau * s);
        jtj[0][0] += ja * ja;
        jtj[0][1] += ja * jt;
        jtj[1][1] += jt * jt;
    }
    jtj[1][0] = jtj[0][1];
    let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
    if det.abs() < 1e-300 || !det.is_finite() {
        return Err(Error::DegenerateData("singular covariance".into()));
    }
    let cov = vec![
        vec![jtj[1][1] / det, -jtj[0][1] / det],
        vec![-jtj[1][0] / det, jtj[0][0] / det],
    ];

    Ok(FitResult {
        params: vec![("amplitude".into(), a), ("tau".into(), tau)],
        covariance: cov,
        residual_norm: best.sqrt(),
        converged,
        iterations,
        flags: vec![],
    })
}

/// Closed-form weighted linear regression returning (slope, intercept).
fn weighted_linear(points: &[(f64, f64, f64)]) -> Result<(f64, f64)> {
    let mut s = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y, sigma) in points {
        if !(sigma > 0.0) {
            return Err(Error::DegenerateData(format!("sigma must be positive, got {sigma}")));
        }
        let w = 1.0 / (sigma * sigma);
        s += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let delta = s * sxx - sx * sx;
    if delta.abs() < 1e-300 * s * sxx.max(1.0) || !delta.is_finite() {
        return Err(Error::DegenerateData("all abscissae identical".into()));
    }
    let slope = (s * sxy - sx * sy) / delta;
    let intercept = (sxx * sy - sx * sxy) / delta;
    Ok((slope, intercept))
}

/// Weighted straight-line fit y = slope x + intercept with the x-axis
/// crossing and its first-order propagated uncertainty.
pub fn fit_linear_weighted(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "linear fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    let distinct = points
        .iter()
        .any(|&(x, _, _)| (x - points[0].0).abs() > 0.0);
    if !distinct {
        return Err(Error::DegenerateData("all abscissae identical".into()));
    }
    let (slope, intercept) = weighted_linear(points)?;

    let mut s = 0.0;
    let mut sx = 0.0;
    let mut sxx = 0.0;
    let mut chi2 = 0.0;
    for &(x, y, sigma) in points {
        let w = 1.0 / (sigma * sigma);
        s += w;
        sx += w * x;
        sxx += w * x * x;
        let r = (slope * x + intercept - y) / sigma;
        chi2 += r * r;
    }
    let delta = s * sxx - sx * sx;
    let var_slope = s / delta;
    let var_intercept = sxx / delta;
    let cov_si = -sx / delta;

    let x_int = -intercept / slope;
    // gradient of x_int wrt (slope, intercept): (intercept/slope^2, -1/slope)
    let gs = intercept / (slope * slope);
    let gi = -1.0 / slope;
    let var_xint = gs * gs * var_slope + gi * gi * var_intercept + 2.0 * gs * gi * cov_si;

    let mut flags = vec![];
    if slope.abs() <= var_slope.sqrt() {
        flags.push("x_intercept_unreliable".to_string());
    }

    Ok(FitResult {
        params: vec![
            ("slope".into(), slope),
            ("intercept".into(), intercept),
            ("x_intercept".into(), x_int),
        ],
        covariance: vec![
            vec![var_slope, cov_si, 0.0],
            vec![cov_si, var_intercept, 0.0],
            vec![0.0, 0.0, var_xint.max(0.0)],
        ],
        residual_norm: chi2.sqrt(),
        converged: true,
        iterations: 0,
        flags,
    })
}

/// Map the power-axis intercept of the tau(P) line to a temperature:
/// at the crossing the trap depth equals k_B T. Returns (T, sigma_T) in
/// kelvin; a negative intercept maps to 0 with a below-resolution flag.
pub fn temperature_from_power_intercept(
    fit: &FitResult,
    beam_template: &TrapBeam,
    cav: &CavityParams,
) -> Result<(f64, f64, Vec<String>)> {
    if !fit.converged {
        return Err(Error::DegenerateData("intercept fit did not converge".into()));
    }
    let slope = fit
        .param("slope")
        .ok_or_else(|| Error::DegenerateData("fit lacks a slope parameter".into()))?;
    if slope <= 0.0 {
        return Err(Error::DegenerateData(format!(
            "tau(P) slope must be positive, got {slope}"
        )));
    }
    let x_int = fit
        .param("x_intercept")
        .ok_or_else(|| Error::DegenerateData("fit lacks an x_intercept".into()))?;
    let sigma_xint = fit.uncertainty("x_intercept").unwrap_or(0.0);

    // trap depth is linear in input power
    let mut per_watt_beam = beam_template.clone();
    per_watt_beam.input_power = 1.0;
    let depth_per_watt = trap_depth(&per_watt_beam, cav).depth;
    let sigma_t = depth_per_watt * sigma_xint / K_B;
    if x_int < 0.0 {
        return Ok((0.0, sigma_t, vec!["below_resolution".into()]));
    }
    Ok((depth_per_watt * x_int / K_B, sigma_t, vec![]))
}

/// Per-axis time-of-flight temperature from position snapshots of a freely
/// expanding cloud: fits sigma^2(t) = sigma_0^2 + (k_B T / m) t^2 per axis.
pub fn tof_temperature(snapshots: &[(f64, Vec<V3>)], mass: f64) -> Result<[f64; 3]> {
    if snapshots.len() < 3 {
        return Err(Error::DegenerateData(format!(
            "time-of-flight fit needs at least 3 snapshots, got {}",
            snapshots.len()
        )));
    }
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let pts: Vec<(f64, f64, f64)> = snapshots
            .iter()
            .map(|(t, positions)| {
                let n = positions.len() as f64;
                let mean: f64 = positions.iter().map(|p| p[axis]).sum::<f64>() / n;
                let var: f64 =
                    positions.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n;
                (t * t, var, 1.0)
            })
            .collect();
        let (slope, _) = weighted_linear(&pts)?;
        if slope <= 0.0 {
            return Err(Error::Nonphysical(format!(
                "axis {axis}: cloud variance does not grow with time (slope {slope})"
            )));
        }
        out[axis] = mass * slope / K_B;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{RB87_D2_GAMMA_FWHM, RB87_MASS};
    use crate::optics::tests::table_cavity;
    use crate::rng::atom_stream;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exponential_fit_recovers_exact_data() {
        let a = 5000.0;
        let tau = 0.160;
        let pts: Vec<(f64, f64, f64)> = (0..8)
            .map(|i| {
                let t = 0.04 + 0.03 * i as f64;
                let n = a * (-t / tau).exp();
                (t, n, n.max(1.0).sqrt())
            })
            .collect();
        let fit = fit_exponential(&pts).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.param("amplitude").unwrap(), a, max_relative = 1e-6);
        assert_relative_eq!(fit.param("tau").unwrap(), tau, max_relative = 1e-6);
    }

    #[test]
    fn exponential_fit_two_points_is_interpolation() {
        let pts = vec![(0.0, 100.0, 1.0), (1.0, 50.0, 1.0)];
        let fit = fit_exponential(&pts).unwrap();
        assert_relative_eq!(fit.param("amplitude").unwrap(), 100.0, max_relative = 1e-9);
        assert_relative_eq!(fit.param("tau").unwrap(), 1.0 / 2.0f64.ln(), max_relative = 1e-9);
        assert!(fit.residual_norm < 1e-9);
    }

    #[test]
    fn exponential_fit_rejects_nonpositive_ordinates() {
        let pts = vec![(0.0, 10.0, 1.0), (1.0, 0.0, 1.0), (2.0, 5.0, 1.0)];
        match fit_exponential(&pts) {
            Err(Error::FitInitialization { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected initialization error, got {other:?}"),
        }
    }

    #[test]
    fn exponential_fit_is_scale_equivariant_and_shift_covariant() {
        let base: Vec<(f64, f64, f64)> = (0..6)
            .map(|i| {
                let t = 0.05 + 0.04 * i as f64;
                let n = 3000.0 * (-t / 0.12f64).exp() * (1.0 + 0.02 * ((i * 37 % 5) as f64 - 2.0));
                (t, n, 0.05 * n)
            })
            .collect();
        let fit = fit_exponential(&base).unwrap();
        let tau = fit.param("tau").unwrap();
        let amp = fit.param("amplitude").unwrap();

        let scaled: Vec<_> = base.iter().map(|&(t, n, s)| (t, 7.0 * n, 7.0 * s)).collect();
        let fit_scaled = fit_exponential(&scaled).unwrap();
        assert_relative_eq!(fit_scaled.param("tau").unwrap(), tau, max_relative = 1e-7);
        assert_relative_eq!(fit_scaled.param("amplitude").unwrap(), 7.0 * amp, max_relative = 1e-7);

        let dt = 0.03;
        let shifted: Vec<_> = base.iter().map(|&(t, n, s)| (t + dt, n, s)).collect();
        let fit_shifted = fit_exponential(&shifted).unwrap();
        assert_relative_eq!(fit_shifted.param("tau").unwrap(), tau, max_relative = 1e-6);
        assert_relative_eq!(
            fit_shifted.param("amplitude").unwrap(),
            amp * (dt / tau).exp(),
            max_relative = 1e-6
        );
    }

    #[test]
    fn exponential_fit_coverage_with_multiplicative_noise() {
        // 6 points on [40, 250] ms with 5% multiplicative noise: the reported
        // 2 sigma interval should cover the generating tau in >= 95% of 500
        // repetitions (fixed stream; verified against the generating truth).
        let a = 5000.0;
        let tau = 0.160;
        let times: Vec<f64> = (0..6).map(|i| 0.040 + 0.042 * i as f64).collect();
        let mut rng = atom_stream(4242, 0);
        let mut covered = 0;
        let reps = 500;
        for _ in 0..reps {
            let pts: Vec<(f64, f64, f64)> = times
                .iter()
                .map(|&t| {
                    let clean = a * (-t / tau).exp();
                    let g: f64 = StandardNormal.sample(&mut rng);
                    let n = clean * (1.0 + 0.05 * g);
                    (t, n, 0.05 * n)
                })
                .collect();
            if pts.iter().any(|&(_, n, _)| n <= 0.0) {
                continue;
            }
            let fit = fit_exponential(&pts).unwrap();
            let t_hat = fit.param("tau").unwrap();
            let s_t = fit.uncertainty("tau").unwrap();
            if (t_hat - tau).abs() <= 2.0 * s_t {
                covered += 1;
            }
        }
        assert!(
            covered as f64 >= 0.95 * reps as f64,
            "2 sigma coverage too low: {covered}/{reps}"
        );
    }

    #[test]
    fn linear_fit_exact_line() {
        let pts: Vec<(f64, f64, f64)> = (0..5).map(|i| {
            let x = i as f64;
            (x, 2.0 * x + 1.0, 0.5)
        }).collect();
        let fit = fit_linear_weighted(&pts).unwrap();
        assert_relative_eq!(fit.param("slope").unwrap(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.param("intercept").unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(fit.param("x_intercept").unwrap(), -0.5, max_relative = 1e-12);
        assert!(fit.flags.is_empty());
    }

    #[test]
    fn linear_fit_matches_unweighted_closed_form_for_equal_sigmas() {
        let pts = vec![
            (0.0, 1.1, 2.0),
            (1.0, 2.9, 2.0),
            (2.0, 5.2, 2.0),
            (3.0, 6.8, 2.0),
        ];
        let fit = fit_linear_weighted(&pts).unwrap();
        // plain least squares on the same data
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        assert_relative_eq!(fit.param("slope").unwrap(), slope, max_relative = 1e-12);
        assert_relative_eq!(fit.param("intercept").unwrap(), intercept, max_relative = 1e-12);
    }

    #[test]
    fn linear_fit_unbiased_under_symmetric_noise() {
        let slope_true = 1.5;
        let intercept_true = -0.3;
        let sigma = 0.2;
        let mut rng = atom_stream(7, 1);
        let reps = 400;
        let mut slopes = Vec::with_capacity(reps);
        for _ in 0..reps {
            let pts: Vec<(f64, f64, f64)> = (0..20)
                .map(|i| {
                    let x = i as f64 * 0.1;
                    let g: f64 = StandardNormal.sample(&mut rng);
                    (x, slope_true * x + intercept_true + sigma * g, sigma)
                })
                .collect();
            slopes.push(fit_linear_weighted(&pts).unwrap().param("slope").unwrap());
        }
        let mean: f64 = slopes.iter().sum::<f64>() / reps as f64;
        let spread: f64 =
            (slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / reps as f64).sqrt();
        assert!(
            (mean - slope_true).abs() < 3.0 * spread / (reps as f64).sqrt(),
            "slope biased: {mean} vs {slope_true}"
        );
    }

    #[test]
    fn degenerate_linear_data_is_an_error() {
        let pts = vec![(1.0, 2.0, 0.1), (1.0, 3.0, 0.1), (1.0, 4.0, 0.1)];
        assert!(matches!(fit_linear_weighted(&pts), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn zero_slope_flags_the_intercept() {
        let pts = vec![
            (0.0, 1.0, 1.0),
            (1.0, 1.02, 1.0),
            (2.0, 0.98, 1.0),
            (3.0, 1.01, 1.0),
        ];
        let fit = fit_linear_weighted(&pts).unwrap();
        assert!(fit.flags.iter().any(|f| f == "x_intercept_unreliable"));
    }

    fn trap_beam_template() -> TrapBeam {
        TrapBeam::new(805e-9, 1.0, 1.0, 780.241e-9, RB87_D2_GAMMA_FWHM).unwrap()
    }

    #[test]
    fn intercept_temperature_from_synthetic_tau_model() {
        // generate tau(P) = (depth(P) - kT) / D from the model itself
        let cav = table_cavity();
        let beam = trap_beam_template();
        let t_true = 3e-6;
        let mut per_watt = beam.clone();
        per_watt.input_power = 1.0;
        let depth_per_watt = trap_depth(&per_watt, &cav).depth;
        let d_heat = K_B * 700e-6 / 0.160; // J/s scale
        let powers = [0.3e-3, 0.5e-3, 0.75e-3, 1.0e-3, 1.2e-3];
        let mut rng = atom_stream(13, 2);
        let pts: Vec<(f64, f64, f64)> = powers
            .iter()
            .map(|&p| {
                let tau = (depth_per_watt * p - K_B * t_true) / d_heat;
                let g: f64 = StandardNormal.sample(&mut rng);
                let noisy = tau * (1.0 + 0.05 * g);
                (p, noisy, 0.05 * tau)
            })
            .collect();
        let fit = fit_linear_weighted(&pts).unwrap();
        let (t_rec, _sigma, flags) =
            temperature_from_power_intercept(&fit, &beam, &cav).unwrap();
        assert!(flags.is_empty());
        assert!(
            (t_rec - t_true).abs() < 0.3 * t_true,
            "temperature off: {t_rec} vs {t_true}"
        );

        // x_intercept = 0 maps to exactly T = 0
        let mut zero_fit = fit.clone();
        for p in &mut zero_fit.params {
            if p.0 == "x_intercept" {
                p.1 = 0.0;
            }
        }
        let (t0, _, _) = temperature_from_power_intercept(&zero_fit, &beam, &cav).unwrap();
        assert_eq!(t0, 0.0);

        // doubling eta doubles the inferred temperature at fixed intercept
        let mut beam2 = beam.clone();
        beam2.incoupling_efficiency = 0.5;
        let (t_half, _, _) = temperature_from_power_intercept(&fit, &beam2, &cav).unwrap();
        assert_relative_eq!(t_half, 0.5 * t_rec, max_relative = 1e-12);
    }

    #[test]
    fn negative_intercept_is_flagged_below_resolution() {
        let pts = vec![(1.0, 1.0, 0.1), (2.0, 2.1, 0.1), (3.0, 2.9, 0.1)];
        let fit = fit_linear_weighted(&pts).unwrap();
        assert!(fit.param("x_intercept").unwrap() < 0.0);
        let cav = table_cavity();
        let (t, _, flags) =
            temperature_from_power_intercept(&fit, &trap_beam_template(), &cav).unwrap();
        assert_eq!(t, 0.0);
        assert!(flags.iter().any(|f| f == "below_resolution"));
    }

    #[test]
    fn tof_recovers_injected_temperature() {
        // ballistic expansion of a Gaussian cloud, anisotropic temperatures
        let t_axis = [20e-6, 20e-6, 8e-6];
        let sigma0 = 50e-6;
        let n = 100_000;
        let mut rng = atom_stream(2029, 3);
        let mut pos0 = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = [0.0; 3];
            let mut v = [0.0; 3];
            for axis in 0..3 {
                let gp: f64 = StandardNormal.sample(&mut rng);
                let gv: f64 = StandardNormal.sample(&mut rng);
                p[axis] = sigma0 * gp;
                v[axis] = (K_B * t_axis[axis] / RB87_MASS).sqrt() * gv;
            }
            pos0.push(p);
            vel.push(v);
        }
        let snapshots: Vec<(f64, Vec<V3>)> = [0.0, 2e-3, 4e-3, 6e-3, 8e-3]
            .iter()
            .map(|&t| {
                let frame: Vec<V3> = pos0
                    .iter()
                    .zip(vel.iter())
                    .map(|(p, v)| [p[0] + v[0] * t, p[1] + v[1] * t, p[2] + v[2] * t])
                    .collect();
                (t, frame)
            })
            .collect();
        let recovered = tof_temperature(&snapshots, RB87_MASS).unwrap();
        for axis in 0..3 {
            assert!(
                (recovered[axis] - t_axis[axis]).abs() < 0.05 * t_axis[axis],
                "axis {axis}: {} vs {}",
                recovered[axis],
                t_axis[axis]
            );
        }
    }

    #[test]
    fn tof_zero_velocity_is_zero_temperature_error_path() {
        // a non-expanding cloud has slope 0: flagged nonphysical
        let frame: Vec<V3> = (0..100)
            .map(|i| [i as f64 * 1e-6, 0.0, 0.0])
            .collect();
        let snaps: Vec<(f64, Vec<V3>)> =
            vec![(0.0, frame.clone()), (1e-3, frame.clone()), (2e-3, frame)];
        assert!(matches!(
            tof_temperature(&snaps, RB87_MASS),
            Err(Error::Nonphysical(_))
        ));
    }

    #[test]
    fn uncertainties_shrink_with_replication() {
        let mk = |reps: usize| {
            let mut pts = Vec::new();
            for _ in 0..reps {
                for i in 0..6 {
                    let t = 0.04 + 0.04 * i as f64;
                    let n = 4000.0 * (-t / 0.15f64).exp();
                    pts.push((t, n * (1.0 + 0.01 * ((i % 3) as f64 - 1.0)), 0.05 * n));
                }
            }
            fit_exponential(&pts).unwrap().uncertainty("tau").unwrap()
        };
        let s1 = mk(1);
        let s4 = mk(4);
        assert_relative_eq!(s4, s1 / 2.0, max_relative = 0.02);
    }

    #[test]
    fn covariance_is_symmetric_positive_on_convergence() {
        let pts: Vec<(f64, f64, f64)> = (0..7)
            .map(|i| {
                let t = 0.05 * (i + 1) as f64;
                let n = 1000.0 * (-t / 0.2f64).exp();
                (t, n * (1.0 + 0.03 * ((i % 2) as f64 - 0.5)), 0.03 * n)
            })
            .collect();
        let fit = fit_exponential(&pts).unwrap();
        assert!(fit.converged);
        let c = &fit.covariance;
        assert_abs_diff_eq!(c[0][1], c[1][0], epsilon = 1e-12 * c[0][0].abs());
        assert!(c[0][0] > 0.0 && c[1][1] > 0.0);
        assert!(c[0][0] * c[1][1] - c[0][1] * c[1][0] >= 0.0);
    }
}
