//! Hamiltonian and Lindbladian parameters for the three-mode system.
//!
//! Holds the bare Jaynes-Cummings model, the dressed dispersive parameters,
//! and the dissipative rates; evaluates the second-order perturbative
//! formulas for the dressed quantities; and reconstructs the bare model
//! from measured dressed quantities by a numerical diagonalization fit.
//!
//! Everything here is in angular frequency (rad/s). The `/2π` values quoted
//! in comments refer to ordinary frequencies.

use thiserror::Error;

use crate::fit::{levenberg_marquardt, FitResult, LmOptions};
use crate::hilbert::eigh;
use crate::{C64, TWO_PI};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("singular parameter regime: |{which}| = {value:.3e} rad/s is too close to zero")]
    SingularRegime { which: &'static str, value: f64 },
    #[error("level matching failed: dressed state for {label:?} has bare overlap {overlap:.3} < 0.5")]
    LevelMatching { label: (usize, usize, usize), overlap: f64 },
    #[error("diagonalization dims too small: need at least (4, 4, 3), got ({0}, {1}, {2})")]
    DimsTooSmall(usize, usize, usize),
    #[error("fit did not converge: residual {0:.3e}")]
    FitNonConvergence(f64),
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

/// Bare Jaynes-Cummings parameters (angular frequencies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JcParams {
    pub omega_s0: f64,
    pub omega_q0: f64,
    pub omega_r0: f64,
    /// Bare transmon self-Kerr (anharmonicity), negative.
    pub k_q0: f64,
    pub g_sq: f64,
    pub g_qr: f64,
}

impl JcParams {
    pub fn delta_sq(&self) -> f64 {
        self.omega_q0 - self.omega_s0
    }

    pub fn delta_qr(&self) -> f64 {
        self.omega_q0 - self.omega_r0
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        if self.k_q0 >= 0.0 {
            return Err(SystemError::Invalid(format!(
                "K_q0 = {} must be negative",
                self.k_q0
            )));
        }
        if self.delta_sq() == 0.0 || self.delta_qr() == 0.0 {
            return Err(SystemError::Invalid("zero detuning".into()));
        }
        Ok(())
    }
}

/// Dressed dispersive-Hamiltonian parameters (angular frequencies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersiveParams {
    pub omega_s: f64,
    pub omega_q: f64,
    pub omega_r: f64,
    pub k_s: f64,
    pub k_q: f64,
    pub k_r: f64,
    pub chi_sq: f64,
    pub chi_qr: f64,
    pub chi_sr: f64,
    pub chi_s2q: f64,
    /// Storage–auxiliary second-order cross-Kerr (the a†a b†²b² coefficient).
    /// The perturbative route has no closed form for it, so the analytical
    /// constructor leaves it `None` ("numerical-only").
    pub chi_sq2: Option<f64>,
    pub chi_q2r: f64,
    pub chi_qr2: f64,
}

impl DispersiveParams {
    pub fn chi_sq2_value(&self) -> f64 {
        self.chi_sq2
            .expect("chi_sq2 is numerical-only; use the numerical route or set it explicitly")
    }
}

/// Lindbladian parameters for the three modes plus readout errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LindbladParams {
    pub kappa_1s: f64,
    pub kappa_1q: f64,
    pub kappa_1r: f64,
    pub kappa_phi_s: f64,
    pub kappa_phi_q: f64,
    pub kappa_phi_r: f64,
    pub n_eq_s: f64,
    pub n_eq_q: f64,
    pub n_eq_r: f64,
    pub eps_g: f64,
    pub eps_e: f64,
}

impl LindbladParams {
    pub fn validate(&self) -> Result<(), SystemError> {
        let rates = [
            self.kappa_1s,
            self.kappa_1q,
            self.kappa_1r,
            self.kappa_phi_s,
            self.kappa_phi_q,
            self.kappa_phi_r,
        ];
        if rates.iter().any(|&r| r < 0.0) {
            return Err(SystemError::Invalid("negative rate".into()));
        }
        for (name, n) in [
            ("n_eq_s", self.n_eq_s),
            ("n_eq_q", self.n_eq_q),
            ("n_eq_r", self.n_eq_r),
        ] {
            if !(0.0..0.5).contains(&n) {
                return Err(SystemError::Invalid(format!("{name} = {n} outside [0, 0.5)")));
            }
        }
        if self.eps_g < 0.0 || self.eps_e < 0.0 || self.eps_g + self.eps_e >= 1.0 {
            return Err(SystemError::Invalid(
                "readout errors must satisfy ε_g+ε_e < 1".into(),
            ));
        }
        Ok(())
    }

    /// All dissipation channels switched off. Resonator decay stays: it is
    /// the reset mechanism, not a noise channel.
    pub fn noiseless(&self) -> Self {
        Self {
            kappa_1s: 0.0,
            kappa_1q: 0.0,
            kappa_1r: self.kappa_1r,
            kappa_phi_s: 0.0,
            kappa_phi_q: 0.0,
            kappa_phi_r: 0.0,
            n_eq_s: 0.0,
            n_eq_q: 0.0,
            n_eq_r: 0.0,
            eps_g: self.eps_g,
            eps_e: self.eps_e,
        }
    }
}

fn check_denominator(which: &'static str, value: f64, scale: f64) -> Result<(), SystemError> {
    if value.abs() < 1e-6 * scale.abs().max(1.0) {
        return Err(SystemError::SingularRegime { which, value });
    }
    Ok(())
}

/// Second-order-perturbative dressed parameters from the bare model.
///
/// The χ_sq2 and χ_q2r coefficients have no closed form here; χ_sq2 is left
/// `None` and χ_q2r zero (both come from the numerical route).
pub fn dressed_params_analytical(jc: &JcParams) -> Result<DispersiveParams, SystemError> {
    jc.validate()?;
    let k0 = jc.k_q0;
    let d_sq = jc.delta_sq();
    let d_qr = jc.delta_qr();
    let scale = k0.abs().max(d_sq.abs()).max(d_qr.abs());

    check_denominator("Δ_sq", d_sq, scale)?;
    check_denominator("Δ_qr", d_qr, scale)?;
    check_denominator("Δ_sq + K_q0", d_sq + k0, scale)?;
    check_denominator("Δ_qr + K_q0", d_qr + k0, scale)?;
    check_denominator("2Δ_sq + K_q0", 2.0 * d_sq + k0, scale)?;
    check_denominator("2Δ_qr + K_q0", 2.0 * d_qr + k0, scale)?;
    check_denominator("2Δ_sq + 3K_q0", 2.0 * d_sq + 3.0 * k0, scale)?;
    check_denominator("2Δ_qr + 3K_q0", 2.0 * d_qr + 3.0 * k0, scale)?;

    let g_sq2 = jc.g_sq * jc.g_sq;
    let g_qr2 = jc.g_qr * jc.g_qr;

    let self_kerr = |g2: f64, d: f64| 2.0 * g2 * g2 * k0 / (d.powi(3) * (2.0 * d + k0));
    let cross_kerr = |g2: f64, d: f64| g2 * k0 / (d * (d + k0));
    let second_order = |g2: f64, d: f64| {
        -g2 * g2
            * k0.powi(2)
            * (3.0 * k0.powi(3) + 11.0 * k0.powi(2) * d + 15.0 * k0 * d.powi(2) + 9.0 * d.powi(3))
            / (d.powi(3) * (2.0 * d + k0) * (2.0 * d + 3.0 * k0) * (d + k0).powi(3))
    };

    let chi_sr =
        g_sq2 * g_qr2 * k0 * (d_sq + d_qr) / (d_sq.powi(2) * d_qr.powi(2) * (d_sq + d_qr + k0));

    Ok(DispersiveParams {
        omega_s: jc.omega_s0 - g_sq2 / d_sq,
        omega_q: jc.omega_q0 + g_sq2 / d_sq + g_qr2 / d_qr,
        omega_r: jc.omega_r0 - g_qr2 / d_qr,
        k_s: self_kerr(g_sq2, d_sq),
        k_q: k0 - 2.0 * g_sq2 * k0 / (d_sq * (d_sq + k0)) - 2.0 * g_qr2 * k0 / (d_qr * (d_qr + k0)),
        k_r: self_kerr(g_qr2, d_qr),
        chi_sq: cross_kerr(g_sq2, d_sq),
        chi_qr: cross_kerr(g_qr2, d_qr),
        chi_sr,
        chi_s2q: second_order(g_sq2, d_sq),
        chi_sq2: None,
        chi_q2r: 0.0,
        chi_qr2: second_order(g_qr2, d_qr),
    })
}

/// Basis caps used by the numerical diagonalization.
#[derive(Debug, Clone, Copy)]
pub struct DiagDims {
    pub storage: usize,
    pub auxiliary: usize,
    pub resonator: usize,
}

impl Default for DiagDims {
    fn default() -> Self {
        Self {
            storage: 6,
            auxiliary: 6,
            resonator: 4,
        }
    }
}

/// Dressed energies of the bare JC Hamiltonian labelled by bare product
/// state. The JC model conserves total excitation number, so each
/// N-excitation block is diagonalized separately; within a block, levels
/// are assigned by maximum overlap with the bare basis, which is robust
/// against near-degeneracies (energy ordering is not).
fn jc_levels(
    jc: &JcParams,
    dims: DiagDims,
    max_n: usize,
) -> Result<std::collections::HashMap<(usize, usize, usize), f64>, SystemError> {
    let mut energies = std::collections::HashMap::new();
    for total in 0..=max_n {
        let mut basis: Vec<(usize, usize, usize)> = Vec::new();
        for ns in 0..dims.storage.min(total + 1) {
            for nq in 0..dims.auxiliary.min(total + 1 - ns) {
                let nr = total - ns - nq;
                if nr < dims.resonator {
                    basis.push((ns, nq, nr));
                }
            }
        }
        let n = basis.len();
        if n == 0 {
            continue;
        }
        let idx = |s: &(usize, usize, usize)| basis.iter().position(|b| b == s);
        let mut h = ndarray::Array2::<C64>::zeros((n, n));
        for (i, &(ns, nq, nr)) in basis.iter().enumerate() {
            let diag = jc.omega_s0 * ns as f64
                + jc.omega_q0 * nq as f64
                + jc.omega_r0 * nr as f64
                + 0.5 * jc.k_q0 * (nq * nq.saturating_sub(1)) as f64;
            h[[i, i]] = C64::new(diag, 0.0);
            // g_sq (a†b + ab†): a†b maps (ns, nq) → (ns+1, nq-1).
            if nq >= 1 && ns + 1 < dims.storage {
                if let Some(j) = idx(&(ns + 1, nq - 1, nr)) {
                    let el = jc.g_sq * ((ns + 1) as f64 * nq as f64).sqrt();
                    h[[j, i]] += C64::new(el, 0.0);
                    h[[i, j]] += C64::new(el, 0.0);
                }
            }
            // g_qr (c†b + cb†): c†b maps (nq, nr) → (nq-1, nr+1).
            if nq >= 1 && nr + 1 < dims.resonator {
                if let Some(j) = idx(&(ns, nq - 1, nr + 1)) {
                    let el = jc.g_qr * (nq as f64 * (nr + 1) as f64).sqrt();
                    h[[j, i]] += C64::new(el, 0.0);
                    h[[i, j]] += C64::new(el, 0.0);
                }
            }
        }
        let (evals, evecs) = eigh(&h);
        let mut taken = vec![false; n];
        for col in 0..n {
            let mut best = 0usize;
            let mut best_w = -1.0;
            for row in 0..n {
                let w = evecs[[row, col]].norm_sqr();
                if w > best_w {
                    best_w = w;
                    best = row;
                }
            }
            let label = basis[best];
            if best_w < 0.5 || taken[best] {
                return Err(SystemError::LevelMatching {
                    label,
                    overlap: best_w,
                });
            }
            taken[best] = true;
            energies.insert(label, evals[col]);
        }
    }
    Ok(energies)
}

/// Dressed parameters extracted from diagonalization of the bare JC
/// Hamiltonian, reading level shifts from overlap-matched eigenvalues
/// (e.g. 2χ_sq = E(1s,1q) - E(1s) - E(1q) + E(0)).
pub fn dressed_params_numerical(
    jc: &JcParams,
    dims: DiagDims,
) -> Result<DispersiveParams, SystemError> {
    jc.validate()?;
    if dims.storage < 4 || dims.auxiliary < 4 || dims.resonator < 3 {
        return Err(SystemError::DimsTooSmall(
            dims.storage,
            dims.auxiliary,
            dims.resonator,
        ));
    }
    let levels = jc_levels(jc, dims, 3)?;
    let e = |ns: usize, nq: usize, nr: usize| -> f64 {
        *levels
            .get(&(ns, nq, nr))
            .unwrap_or_else(|| panic!("missing dressed level ({ns},{nq},{nr})"))
    };
    let e0 = e(0, 0, 0);
    let omega_s = e(1, 0, 0) - e0;
    let omega_q = e(0, 1, 0) - e0;
    let omega_r = e(0, 0, 1) - e0;
    let k_s = e(2, 0, 0) - 2.0 * e(1, 0, 0) + e0;
    let k_q = e(0, 2, 0) - 2.0 * e(0, 1, 0) + e0;
    let k_r = e(0, 0, 2) - 2.0 * e(0, 0, 1) + e0;
    let chi_sq = 0.5 * (e(1, 1, 0) - e(1, 0, 0) - e(0, 1, 0) + e0);
    let chi_qr = 0.5 * (e(0, 1, 1) - e(0, 1, 0) - e(0, 0, 1) + e0);
    let chi_sr = 0.5 * (e(1, 0, 1) - e(1, 0, 0) - e(0, 0, 1) + e0);
    // Second differences of the pairwise shifts isolate the second-order terms.
    let chi_s2q =
        0.25 * ((e(2, 1, 0) - e(2, 0, 0)) - 2.0 * (e(1, 1, 0) - e(1, 0, 0)) + (e(0, 1, 0) - e0));
    let chi_sq2 =
        0.25 * ((e(1, 2, 0) - e(0, 2, 0)) - 2.0 * (e(1, 1, 0) - e(0, 1, 0)) + (e(1, 0, 0) - e0));
    let chi_q2r =
        0.25 * ((e(0, 2, 1) - e(0, 2, 0)) - 2.0 * (e(0, 1, 1) - e(0, 1, 0)) + (e(0, 0, 1) - e0));
    let chi_qr2 =
        0.25 * ((e(0, 1, 2) - e(0, 0, 2)) - 2.0 * (e(0, 1, 1) - e(0, 0, 1)) + (e(0, 1, 0) - e0));

    Ok(DispersiveParams {
        omega_s,
        omega_q,
        omega_r,
        k_s,
        k_q,
        k_r,
        chi_sq,
        chi_qr,
        chi_sr,
        chi_s2q,
        chi_sq2: Some(chi_sq2),
        chi_q2r,
        chi_qr2,
    })
}

/// Measured dressed quantities used as fit inputs.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredDispersive {
    pub k_q: f64,
    pub chi_sq: f64,
    pub chi_qr: f64,
}

/// Assumed dressed mode frequencies. The device's absolute frequencies are
/// not published; the shipped defaults are placeholders (see [`paper`]).
#[derive(Debug, Clone, Copy)]
pub struct AssumedFrequencies {
    pub omega_s: f64,
    pub omega_q: f64,
    pub omega_r: f64,
}

/// Reconstruct the bare JC model from measured dressed quantities by a
/// damped least-squares fit over (ω_s0, ω_q0, ω_r0, K_q0, g_sq, g_qr), with
/// the numerical diagonalization as the forward model.
pub fn fit_jc_from_measured(
    measured: &MeasuredDispersive,
    assumed: &AssumedFrequencies,
) -> Result<(JcParams, FitResult), SystemError> {
    let dims = DiagDims::default();
    // Relative residuals so the 10^10-scale frequencies and the 10^4-scale
    // cross-Kerrs carry comparable weight.
    let residual = |p: &[f64]| -> Vec<f64> {
        let jc = JcParams {
            omega_s0: p[0],
            omega_q0: p[1],
            omega_r0: p[2],
            k_q0: p[3],
            g_sq: p[4],
            g_qr: p[5],
        };
        match dressed_params_numerical(&jc, dims) {
            Ok(d) => vec![
                (d.omega_s - assumed.omega_s) / assumed.omega_s.abs(),
                (d.omega_q - assumed.omega_q) / assumed.omega_q.abs(),
                (d.omega_r - assumed.omega_r) / assumed.omega_r.abs(),
                // The divisor floor (2π·100 rad/s) keeps targets below the
                // eigensolver noise from demanding unattainable precision.
                (d.k_q - measured.k_q) / measured.k_q.abs().max(TWO_PI * 100.0),
                (d.chi_sq - measured.chi_sq) / measured.chi_sq.abs().max(TWO_PI * 100.0),
                (d.chi_qr - measured.chi_qr) / measured.chi_qr.abs().max(TWO_PI * 100.0),
            ],
            Err(_) => vec![1e6; 6],
        }
    };

    // Analytic inversion of the perturbative formulas gives the initial guess.
    let k0_guess = measured.k_q + 2.0 * measured.chi_sq + 2.0 * measured.chi_qr;
    let d_sq = assumed.omega_q - assumed.omega_s;
    let d_qr = assumed.omega_q - assumed.omega_r;
    let g_sq_guess = (measured.chi_sq * d_sq * (d_sq + k0_guess) / k0_guess)
        .abs()
        .sqrt();
    let g_qr_guess = (measured.chi_qr * d_qr * (d_qr + k0_guess) / k0_guess)
        .abs()
        .sqrt();
    let x0 = vec![
        assumed.omega_s + g_sq_guess.powi(2) / d_sq,
        assumed.omega_q - g_sq_guess.powi(2) / d_sq - g_qr_guess.powi(2) / d_qr,
        assumed.omega_r + g_qr_guess.powi(2) / d_qr,
        k0_guess,
        g_sq_guess,
        g_qr_guess,
    ];

    let opts = LmOptions {
        max_iterations: 100,
        cost_tol: 1e-24,
        ..LmOptions::default()
    };
    let (mut best_x, mut best_ci, mut best_r, mut best_it, mut best_conv) =
        levenberg_marquardt(residual, &x0, &opts);

    // Random restarts guard against secondary minima of the 6-parameter
    // landscape; skipped when the first solve already hits the floor.
    if best_r > 1e-9 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6a63);
        for _ in 0..8 {
            let jitter: Vec<f64> = x0
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let rel = if i >= 4 { 0.3 } else { 0.002 };
                    v * (1.0 + rel * (2.0 * rng.gen::<f64>() - 1.0))
                })
                .collect();
            let (x, ci, r, it, conv) = levenberg_marquardt(residual, &jitter, &opts);
            if r < best_r {
                best_x = x;
                best_ci = ci;
                best_r = r;
                best_it = it;
                best_conv = conv;
            }
        }
    }

    if best_r > 1e-6 {
        return Err(SystemError::FitNonConvergence(best_r));
    }

    let jc = JcParams {
        omega_s0: best_x[0],
        omega_q0: best_x[1],
        omega_r0: best_x[2],
        k_q0: best_x[3],
        g_sq: best_x[4],
        g_qr: best_x[5],
    };
    let result = FitResult {
        model: "jc-from-measured".into(),
        names: vec![
            "omega_s0".into(),
            "omega_q0".into(),
            "omega_r0".into(),
            "k_q0".into(),
            "g_sq".into(),
            "g_qr".into(),
        ],
        values: best_x,
        ci95: best_ci,
        residual_norm: best_r,
        iterations: best_it,
        converged: best_conv,
    };
    Ok((jc, result))
}

/// Drive-induced ac Stark shift of the auxiliary:
/// δω_Stark = -2K_q0 (K_q0 + 2ω_q0 + 2Δ_qr) / [Δ_qr (K_q0+Δ_qr)(K_q0-Δ_qr)] |ε|².
pub fn ac_stark_shift(jc: &JcParams, eps_f0g1: C64) -> Result<f64, SystemError> {
    let k0 = jc.k_q0;
    let d_qr = jc.delta_qr();
    let scale = k0.abs().max(d_qr.abs());
    check_denominator("Δ_qr", d_qr, scale)?;
    check_denominator("K_q0 + Δ_qr", k0 + d_qr, scale)?;
    check_denominator("K_q0 - Δ_qr", k0 - d_qr, scale)?;
    Ok(
        -2.0 * k0 * (k0 + 2.0 * jc.omega_q0 + 2.0 * d_qr) / (d_qr * (k0 + d_qr) * (k0 - d_qr))
            * eps_f0g1.norm_sqr(),
    )
}

/// Effective |f0_r⟩ ↔ |g1_r⟩ coupling, linear in the drive amplitude:
/// g̃ = -√2 K_q0 g_qr ε / [Δ_qr (K_q0 - Δ_qr)].
pub fn f0g1_coupling(jc: &JcParams, eps_f0g1: C64) -> Result<C64, SystemError> {
    let k0 = jc.k_q0;
    let d_qr = jc.delta_qr();
    let scale = k0.abs().max(d_qr.abs());
    check_denominator("Δ_qr", d_qr, scale)?;
    check_denominator("K_q0 - Δ_qr", k0 - d_qr, scale)?;
    Ok(eps_f0g1 * (-(2.0_f64).sqrt() * k0 * jc.g_qr / (d_qr * (k0 - d_qr))))
}

/// Drive amplitude that produces a target |g̃| (inverse of [`f0g1_coupling`]).
pub fn f0g1_amplitude_for_coupling(jc: &JcParams, g_tilde: f64) -> Result<f64, SystemError> {
    let unit = f0g1_coupling(jc, C64::new(1.0, 0.0))?;
    if unit.norm() == 0.0 {
        return Err(SystemError::SingularRegime {
            which: "g_qr",
            value: 0.0,
        });
    }
    Ok((g_tilde / unit.norm()).abs())
}

/// Published device values and the shipped placeholder frequencies.
pub mod paper {
    use super::*;
    use std::sync::OnceLock;

    /// Ordinary frequency (Hz) to angular (rad/s).
    #[inline]
    pub fn angular(f_hz: f64) -> f64 {
        TWO_PI * f_hz
    }

    /// Measured fit inputs: K_q/2π = -0.257 GHz, χ_sq/2π = -10.72 kHz,
    /// χ_qr/2π = -0.392 MHz.
    pub fn measured() -> MeasuredDispersive {
        MeasuredDispersive {
            k_q: angular(-0.257e9),
            chi_sq: angular(-10.72e3),
            chi_qr: angular(-0.392e6),
        }
    }

    /// Placeholder dressed frequencies. The absolute mode frequencies are
    /// not published beyond "between 6 and 9 GHz"; these defaults sit in
    /// that window with detunings chosen so the reconstructed model also
    /// reproduces the published induced self-Kerr of the storage and
    /// resonator modes and the storage–resonator cross-Kerr regime.
    /// Config-overridable.
    pub fn assumed_frequencies() -> AssumedFrequencies {
        AssumedFrequencies {
            omega_s: angular(6.120e9),
            omega_q: angular(7.600e9),
            omega_r: angular(8.960e9),
        }
    }

    /// Dissipative-dynamics table: decay and dephasing rates, equilibrium
    /// populations, readout error probabilities.
    pub fn lindblad() -> LindbladParams {
        LindbladParams {
            kappa_1s: angular(0.474e3),
            kappa_1q: angular(4.81e3),
            kappa_1r: angular(1.73e6),
            kappa_phi_s: angular(1.45),
            kappa_phi_q: angular(0.904e3),
            kappa_phi_r: 0.0,
            n_eq_s: 0.0,
            n_eq_q: 0.0038,
            n_eq_r: 0.0,
            eps_g: 0.0012,
            eps_e: 0.0045,
        }
    }

    /// χ_sq2/2π = -12.2 kHz, the value used in simulation (the
    /// diagonalization of the fitted model gives -4.2 kHz instead; both are
    /// kept available).
    pub fn chi_sq2_sim() -> f64 {
        angular(-12.2e3)
    }

    /// Bare model fitted from [`measured`] and [`assumed_frequencies`].
    pub fn fitted_jc() -> JcParams {
        static CACHE: OnceLock<JcParams> = OnceLock::new();
        *CACHE.get_or_init(|| {
            fit_jc_from_measured(&measured(), &assumed_frequencies())
                .expect("paper defaults fit must converge")
                .0
        })
    }

    /// The dispersive parameter set used by the simulations: numerical
    /// diagonalization of the fitted bare model, with the simulation value
    /// of χ_sq2 substituted and χ_sr dropped (neglected in simulation).
    pub fn dispersive_sim() -> DispersiveParams {
        static CACHE: OnceLock<DispersiveParams> = OnceLock::new();
        *CACHE.get_or_init(|| {
            let mut d = dressed_params_numerical(&fitted_jc(), DiagDims::default())
                .expect("paper defaults diagonalization");
            d.chi_sq2 = Some(chi_sq2_sim());
            d.chi_sr = 0.0;
            d
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use paper::angular;

    fn relative(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn zero_coupling_dressed_equals_bare() {
        let jc = JcParams {
            omega_s0: angular(6e9),
            omega_q0: angular(8e9),
            omega_r0: angular(9e9),
            k_q0: angular(-0.25e9),
            g_sq: 0.0,
            g_qr: 0.0,
        };
        let ana = dressed_params_analytical(&jc).unwrap();
        assert_eq!(ana.omega_s, jc.omega_s0);
        assert_eq!(ana.omega_q, jc.omega_q0);
        assert_eq!(ana.k_s, 0.0);
        assert_eq!(ana.chi_sq, 0.0);
        assert_eq!(ana.chi_qr, 0.0);
        let num = dressed_params_numerical(&jc, DiagDims::default()).unwrap();
        assert_abs_diff_eq!(num.omega_s, jc.omega_s0, epsilon = 1.0);
        assert_abs_diff_eq!(num.k_q, jc.k_q0, epsilon = 1.0);
        assert_abs_diff_eq!(num.chi_sq, 0.0, epsilon = 1.0);
        assert_abs_diff_eq!(num.chi_sq2.unwrap(), 0.0, epsilon = 1.0);
    }

    #[test]
    fn analytical_matches_numerical_at_weak_coupling() {
        // g/Δ = 0.05: second-order perturbation theory should agree with
        // the exact diagonalization to ~2% on χ_sq.
        let d_sq = angular(2.0e9);
        let jc = JcParams {
            omega_s0: angular(6.0e9),
            omega_q0: angular(8.0e9),
            omega_r0: angular(9.2e9),
            k_q0: angular(-0.25e9),
            g_sq: 0.05 * d_sq,
            g_qr: 0.04 * d_sq,
        };
        let ana = dressed_params_analytical(&jc).unwrap();
        let num = dressed_params_numerical(&jc, DiagDims::default()).unwrap();
        assert!(relative(ana.chi_sq, num.chi_sq) < 0.02, "χ_sq mismatch");
        assert!(relative(ana.chi_qr, num.chi_qr) < 0.03, "χ_qr mismatch");
        assert!(relative(ana.k_q, num.k_q) < 0.01, "K_q mismatch");
    }

    #[test]
    fn numerical_invariant_under_larger_dims() {
        let jc = paper::fitted_jc();
        let d1 = dressed_params_numerical(&jc, DiagDims::default()).unwrap();
        let d2 = dressed_params_numerical(
            &jc,
            DiagDims {
                storage: 9,
                auxiliary: 9,
                resonator: 6,
            },
        )
        .unwrap();
        assert!(relative(d1.chi_sq, d2.chi_sq) < 1e-3);
        assert!(relative(d1.k_s, d2.k_s) < 1e-3);
        assert!(relative(d1.chi_sq2.unwrap(), d2.chi_sq2.unwrap()) < 1e-3);
    }

    #[test]
    fn fit_round_trip_recovers_known_model() {
        let truth = JcParams {
            omega_s0: angular(6.1e9),
            omega_q0: angular(7.7e9),
            omega_r0: angular(8.9e9),
            k_q0: angular(-0.26e9),
            g_sq: angular(9.0e6),
            g_qr: angular(55.0e6),
        };
        let d = dressed_params_numerical(&truth, DiagDims::default()).unwrap();
        let measured = MeasuredDispersive {
            k_q: d.k_q,
            chi_sq: d.chi_sq,
            chi_qr: d.chi_qr,
        };
        let assumed = AssumedFrequencies {
            omega_s: d.omega_s,
            omega_q: d.omega_q,
            omega_r: d.omega_r,
        };
        let (fit, res) = fit_jc_from_measured(&measured, &assumed).unwrap();
        assert!(res.residual_norm < 1e-8, "residual {}", res.residual_norm);
        assert!(relative(fit.g_sq, truth.g_sq) < 1e-6);
        assert!(relative(fit.g_qr, truth.g_qr) < 1e-6);
        assert!(relative(fit.k_q0, truth.k_q0) < 1e-6);
    }

    #[test]
    fn fit_zero_couplings_from_zero_chis() {
        let assumed = paper::assumed_frequencies();
        let measured = MeasuredDispersive {
            k_q: angular(-0.257e9),
            chi_sq: angular(-1e-3),
            chi_qr: angular(-1e-3),
        };
        let (fit, _) = fit_jc_from_measured(&measured, &assumed).unwrap();
        assert!(fit.g_sq.abs() < angular(1e5));
        assert!(fit.g_qr.abs() < angular(1e5));
    }

    #[test]
    fn stark_shift_scaling_and_zero() {
        let jc = paper::fitted_jc();
        assert_eq!(ac_stark_shift(&jc, C64::new(0.0, 0.0)).unwrap(), 0.0);
        let e1 = ac_stark_shift(&jc, C64::new(1e8, 0.0)).unwrap();
        let e2 = ac_stark_shift(&jc, C64::new(2e8, 0.0)).unwrap();
        assert_abs_diff_eq!(e2 / e1, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn f0g1_linear_and_stark_ratio_invariant() {
        let jc = paper::fitted_jc();
        let g1 = f0g1_coupling(&jc, C64::new(1e8, 0.0)).unwrap();
        let g2 = f0g1_coupling(&jc, C64::new(2e8, 0.0)).unwrap();
        assert_abs_diff_eq!((g2 / g1).re, 2.0, epsilon = 1e-12);
        assert_eq!(
            f0g1_coupling(&jc, C64::new(0.0, 0.0)).unwrap(),
            C64::new(0.0, 0.0)
        );
        // δω_Stark / |g̃|² is independent of ε.
        let r1 = ac_stark_shift(&jc, C64::new(1e8, 0.0)).unwrap() / g1.norm_sqr();
        let r2 = ac_stark_shift(&jc, C64::new(3e8, 0.0)).unwrap()
            / f0g1_coupling(&jc, C64::new(3e8, 0.0)).unwrap().norm_sqr();
        assert_abs_diff_eq!(r1, r2, epsilon = r1.abs() * 1e-9);
        // Amplitude inversion round-trips.
        let amp = f0g1_amplitude_for_coupling(&jc, angular(1.613e6)).unwrap();
        let g = f0g1_coupling(&jc, C64::new(amp, 0.0)).unwrap();
        assert_abs_diff_eq!(g.norm(), angular(1.613e6), epsilon = 1e-3);
    }

    #[test]
    fn paper_fit_reproduces_numerical_column() {
        let jc = paper::fitted_jc();
        let num = dressed_params_numerical(&jc, DiagDims::default()).unwrap();
        assert!(
            relative(num.k_s, angular(-0.335)) < 0.05,
            "K_s/2π = {} Hz",
            num.k_s / TWO_PI
        );
        assert!(
            relative(num.k_r, angular(-0.772e3)) < 0.05,
            "K_r/2π = {} Hz",
            num.k_r / TWO_PI
        );
        assert!(
            relative(num.chi_s2q, angular(-0.230)) < 0.05,
            "χ_s2q/2π = {} Hz",
            num.chi_s2q / TWO_PI
        );
        assert!(
            relative(num.chi_qr2, angular(0.207e3)) < 0.05,
            "χ_qr2/2π = {} Hz",
            num.chi_qr2 / TWO_PI
        );
        // Fit inputs are reproduced essentially exactly.
        assert!(relative(num.chi_sq, angular(-10.72e3)) < 1e-6);
        assert!(relative(num.k_q, angular(-0.257e9)) < 1e-6);
    }

    #[test]
    fn paper_analytical_agrees_with_numerical() {
        let jc = paper::fitted_jc();
        let num = dressed_params_numerical(&jc, DiagDims::default()).unwrap();
        let ana = dressed_params_analytical(&jc).unwrap();
        for (name, a, n, tol) in [
            ("K_s", ana.k_s, num.k_s, 0.03),
            ("K_r", ana.k_r, num.k_r, 0.03),
            ("K_q", ana.k_q, num.k_q, 0.03),
            ("chi_sq", ana.chi_sq, num.chi_sq, 0.03),
            ("chi_qr", ana.chi_qr, num.chi_qr, 0.03),
            ("chi_s2q", ana.chi_s2q, num.chi_s2q, 0.03),
            ("chi_qr2", ana.chi_qr2, num.chi_qr2, 0.03),
            ("chi_sr", ana.chi_sr, num.chi_sr, 0.12),
        ] {
            assert!(
                relative(a, n) < tol,
                "{name}: analytical {a:.6e} vs numerical {n:.6e} (rel {:.3})",
                relative(a, n)
            );
        }
    }
}
