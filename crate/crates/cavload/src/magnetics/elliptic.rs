//! Complete elliptic integrals K(m) and E(m) by arithmetic-geometric mean.
//!
//! Parameter convention matches scipy: m = k^2 with 0 <= m < 1 for K and
//! 0 <= m <= 1 for E. The AGM iteration converges quadratically; we stop at
//! 1e-14 relative, which reaches f64 roundoff after a handful of iterations.

use std::f64::consts::FRAC_PI_2;

const AGM_TOL: f64 = 1e-14;
const MAX_ITER: usize = 64;

/// K(m) and E(m) in one AGM pass.
///
/// E is accumulated from the c_n = (a_n - b_n)/2 sequence:
/// E = K * (1 - sum_{n>=0} 2^(n-1) c_n^2) with c_0^2 = m.
pub fn ellip_ke(m: f64) -> (f64, f64) {
    assert!(
        (0.0..1.0).contains(&m),
        "elliptic integrals require 0 <= m < 1, got {m}"
    );
    if m == 0.0 {
        return (FRAC_PI_2, FRAC_PI_2);
    }
    let mut a = 1.0f64;
    let mut b = (1.0 - m).sqrt();
    let mut sum = 0.5 * m;
    let mut pow2 = 1.0; // 2^(n-1) for n = 1
    for _ in 0..MAX_ITER {
        let c = 0.5 * (a - b);
        let an = 0.5 * (a + b);
        let bn = (a * b).sqrt();
        sum += pow2 * c * c;
        pow2 *= 2.0;
        a = an;
        b = bn;
        if c.abs() <= AGM_TOL * a {
            break;
        }
    }
    let k = FRAC_PI_2 / a;
    (k, k * (1.0 - sum))
}

pub fn ellipk(m: f64) -> f64 {
    ellip_ke(m).0
}

pub fn ellipe(m: f64) -> f64 {
    if m >= 1.0 {
        return 1.0;
    }
    ellip_ke(m).1
}
