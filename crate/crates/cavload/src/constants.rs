//! Physical constants (CODATA 2018) and rubidium-87 species data.

/// Speed of light in vacuum (m/s).
pub const C: f64 = 299_792_458.0;

/// Vacuum permeability (T m / A).
pub const MU_0: f64 = 1.256_637_062_12e-6;

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;

/// Bohr magneton (J/T).
pub const MU_B: f64 = 9.274_010_078_3e-24;

/// Standard gravitational acceleration (m/s^2).
pub const G_EARTH: f64 = 9.806_65;

/// Mass of a rubidium-87 atom (kg).
pub const RB87_MASS: f64 = 1.443_16e-25;

/// Rb D2 transition wavelength (m).
pub const RB87_D2_WAVELENGTH: f64 = 780.241e-9;

/// Rb D2 natural linewidth, FWHM (rad/s).
pub const RB87_D2_GAMMA_FWHM: f64 = 2.0 * std::f64::consts::PI * 6.0666e6;

/// Effective magnetic moment of the |F=2, m_F=2> ground state (J/T).
///
/// g_F * m_F * mu_B = (1/2) * 2 * mu_B for this stretched state.
pub const RB87_F2_MF2_MOMENT: f64 = MU_B;
